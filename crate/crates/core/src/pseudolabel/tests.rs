use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geom::{rotated_iou, Detection, OrientedBox, Source};
use crate::{CategoryId, Error, Vocabulary};

const TREE: &str = r#"{"name": "root", "children": [
    {"name": "ship", "children": [{"name": "cargo-ship"}, {"name": "tanker"}]},
    {"name": "aircraft", "children": [{"name": "plane"}]},
    {"name": "vehicle", "children": [{"name": "car"}]},
    {"name": "storage-tank"}
]}"#;

fn setup() -> (Vocabulary, CategoryTree) {
    let mut v = Vocabulary::new();
    let t = CategoryTree::from_json(TREE, &mut v).unwrap();
    (v, t)
}

fn det(v: &Vocabulary, name: &str, b: (f64, f64, f64, f64, f64), score: f64) -> Detection {
    Detection::new(
        OrientedBox::new(b.0, b.1, b.2, b.3, b.4).unwrap(),
        v.id(name).unwrap(),
        score,
        Source::ModelPrediction,
    )
    .unwrap()
}

fn gt(v: &Vocabulary, name: &str, b: (f64, f64, f64, f64, f64)) -> Detection {
    Detection::ground_truth(
        OrientedBox::new(b.0, b.1, b.2, b.3, b.4).unwrap(),
        v.id(name).unwrap(),
    )
}

fn cands(dets: &[Detection]) -> Vec<Candidate> {
    Candidate::enumerate(dets, 0)
}

#[test]
fn score_filter() {
    let (v, _) = setup();
    let d = cands(&[
        det(&v, "car", (10.0, 10.0, 5.0, 5.0, 0.0), 0.31),
        det(&v, "car", (30.0, 10.0, 5.0, 5.0, 0.0), 0.29),
    ]);
    let kept = filter_by_score(&d, 0.3);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].det_index, 0);
    assert!(filter_by_score(&[], 0.3).is_empty());
    assert_eq!(filter_by_score(&d, 0.0), d);
}

#[test]
fn partition_cases() {
    let (v, t) = setup();
    let g = vec![
        gt(&v, "cargo-ship", (100.0, 100.0, 60.0, 20.0, 0.1)),
        gt(&v, "plane", (300.0, 100.0, 40.0, 40.0, 0.0)),
    ];
    let far = det(&v, "tanker", (500.0, 500.0, 20.0, 20.0, 0.0), 0.9);
    // Shifted 4 px along its long axis: IoU = 1120 / 1280 = 0.875.
    let same_parent = det(
        &v,
        "tanker",
        (
            100.0 + 4.0 * 0.1f64.cos(),
            100.0 + 4.0 * 0.1f64.sin(),
            60.0,
            20.0,
            0.1,
        ),
        0.8,
    );
    let cross = det(&v, "car", (300.0, 104.0, 40.0, 40.0, 0.0), 0.7);
    let p = partition_vs_gt(&cands(&[far.clone(), same_parent, cross]), &g, &t, 0.5).unwrap();
    assert_eq!(p.novel.len(), 1);
    assert_eq!(p.novel[0].det, far);
    assert_eq!(p.discarded.len(), 1);
    assert!((rotated_iou(&p.discarded[0].det.obb, &g[0].obb) - 0.875).abs() < 1e-9);
    assert_eq!(p.hard_negatives.len(), 1);
    assert_eq!(p.hard_negatives[0].gt_index, 1);
    assert!((p.hard_negatives[0].iou - 36.0 / 44.0).abs() < 1e-12);

    let mut v2 = v.clone();
    let stray = v2.intern("helipad");
    let bad = Detection::new(
        OrientedBox::new(5.0, 5.0, 4.0, 4.0, 0.0).unwrap(),
        stray,
        0.9,
        Source::ModelPrediction,
    )
    .unwrap();
    assert!(matches!(
        partition_vs_gt(&cands(&[bad]), &g, &t, 0.5),
        Err(Error::UnknownCategory(_))
    ));
}

/// Concatenate everything, then repeatedly keep the best and drop what it covers.
fn brute_merge(sets: &[Vec<Candidate>], thr: f64) -> Vec<Candidate> {
    let mut rest: Vec<Candidate> = sets.iter().flatten().cloned().collect();
    let mut out = Vec::new();
    while !rest.is_empty() {
        let mut b = 0;
        for i in 1..rest.len() {
            let (x, y) = (&rest[i].det, &rest[b].det);
            if x.score > y.score || (x.score == y.score && x.category < y.category) {
                b = i;
            }
        }
        let best = rest.remove(b);
        rest.retain(|c| rotated_iou(&c.det.obb, &best.det.obb) <= thr);
        out.push(best);
    }
    out
}

fn random_sets(seed: u64) -> Vec<Vec<Candidate>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut offset = 0;
    (0..3)
        .map(|_| {
            let n = r.gen_range(0..15);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    Detection::new(
                        OrientedBox::new(
                            r.gen_range(0.0..80.0),
                            r.gen_range(0.0..80.0),
                            r.gen_range(5.0..30.0),
                            r.gen_range(5.0..30.0),
                            r.gen_range(-1.5..1.5),
                        )
                        .unwrap(),
                        CategoryId(r.gen_range(0..3)),
                        r.gen_range(0.0..1.0),
                        Source::ModelPrediction,
                    )
                    .unwrap()
                })
                .collect();
            let c = Candidate::enumerate(&dets, offset);
            offset += n;
            c
        })
        .collect()
}

#[test]
fn merge_cases() {
    let (v, _) = setup();
    let a = cands(&[
        det(&v, "car", (10.0, 10.0, 8.0, 8.0, 0.0), 0.6),
        det(&v, "car", (11.0, 10.0, 8.0, 8.0, 0.0), 0.5),
    ]);
    assert_eq!(merge_predictions(&[a.clone()], 0.5), vec![a[0].clone()]);
    let dup = Candidate::enumerate(&[a[0].det.clone()], 2);
    let merged = merge_predictions(&[vec![a[0].clone()], dup], 0.5);
    assert_eq!(merged.len(), 1);

    for seed in 0..200 {
        let sets = random_sets(seed);
        assert_eq!(
            merge_predictions(&sets, 0.5),
            brute_merge(&sets, 0.5),
            "seed {seed}"
        );
        // Source order does not matter with distinct scores.
        let rev: Vec<Vec<Candidate>> = sets.iter().rev().cloned().collect();
        assert_eq!(merge_predictions(&rev, 0.5), merge_predictions(&sets, 0.5));
    }
}

#[test]
fn similarity_gate() {
    let (v, _) = setup();
    let small = det(&v, "car", (20.0, 20.0, 8.0, 8.0, 0.0), 0.9);
    let big = det(&v, "car", (80.0, 80.0, 32.0, 32.0, 0.0), 0.9);
    let car = v.id("car").unwrap();
    let kept = similarity_filter(
        "a",
        &cands(&[small.clone()]),
        &SimilarityProvider::new(),
        0.24,
        16.0,
    )
    .unwrap();
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].similarity, None);
    for (sim, keep) in [(0.25, true), (0.23, false), (0.24, true)] {
        let mut p = SimilarityProvider::new();
        p.insert("a", 0, car, sim).unwrap();
        let kept = similarity_filter("a", &cands(&[big.clone()]), &p, 0.24, 16.0).unwrap();
        assert_eq!(kept.len() == 1, keep, "sim {sim}");
        if keep {
            assert_eq!(kept[0].similarity, Some(sim));
        }
    }
    let err = similarity_filter("a", &cands(&[big]), &SimilarityProvider::new(), 0.24, 16.0);
    assert!(matches!(err, Err(Error::MissingSimilarity { .. })));
    assert!(SimilarityProvider::new().insert("a", 0, car, 1.5).is_err());
}

#[test]
fn record_categories() {
    let (v, _) = setup();
    let g = vec![gt(&v, "plane", (50.0, 50.0, 40.0, 20.0, 0.0))];
    let r = build_record("x", &[], &[], &g);
    assert_eq!(r.category_list, BTreeSet::from([v.id("plane").unwrap()]));
    assert!(r.detections.is_empty());

    let tank = Kept {
        candidate: Candidate {
            det_index: 3,
            det: det(&v, "storage-tank", (150.0, 150.0, 30.0, 30.0, 0.0), 0.7),
        },
        similarity: Some(0.4),
    };
    let r = build_record("x", &[tank.clone()], &[], &g);
    assert_eq!(r.category_list.len(), 2);
    assert_eq!(r.detections[0].source, Source::PseudoLabel);

    // A category kept as a box, or annotated, is never a hard negative.
    let hn = |name: &str| HardNegative {
        candidate: Candidate {
            det_index: 9,
            det: det(&v, name, (50.0, 50.0, 40.0, 20.0, 0.0), 0.5),
        },
        gt_index: 0,
        iou: 1.0,
    };
    let r = build_record(
        "x",
        &[tank],
        &[hn("storage-tank"), hn("plane"), hn("car")],
        &g,
    );
    assert_eq!(r.hard_negatives, BTreeSet::from([v.id("car").unwrap()]));
    assert_eq!(r.provenance.len(), 4);
    assert!(r.category_list.contains(&v.id("car").unwrap()));
}

/// Hand-walked single-image fixture with two prompt sets.
fn walked_fixture(v: &Vocabulary) -> (ImageInput, SimilarityProvider) {
    let set_a = vec![
        det(v, "plane", (50.0, 50.0, 40.0, 20.0, 0.0), 0.9), // 0: on the plane GT, same parent
        det(v, "car", (150.0, 50.0, 60.0, 16.0, 0.3), 0.8),  // 1: on the ship GT, other parent
        det(v, "storage-tank", (100.0, 150.0, 40.0, 40.0, 0.0), 0.7), // 2: novel, large, similar
        det(v, "tanker", (30.0, 150.0, 10.0, 8.0, 0.0), 0.6), // 3: novel, small
    ];
    let set_b = vec![
        det(v, "tanker", (200.0, 150.0, 30.0, 30.0, 0.0), 0.2), // 4: low score
        det(v, "storage-tank", (101.0, 150.0, 40.0, 40.0, 0.0), 0.65), // 5: duplicate of 2
        det(v, "plane", (200.0, 220.0, 32.0, 32.0, 0.2), 0.5),  // 6: novel, dissimilar
    ];
    let input = ImageInput {
        image_id: "img".into(),
        gt: vec![
            gt(v, "plane", (50.0, 50.0, 40.0, 20.0, 0.0)),
            gt(v, "cargo-ship", (150.0, 50.0, 60.0, 16.0, 0.3)),
        ],
        predictions: vec![set_a, set_b],
    };
    let mut sims = SimilarityProvider::new();
    sims.insert("img", 2, v.id("storage-tank").unwrap(), 0.5)
        .unwrap();
    sims.insert("img", 6, v.id("plane").unwrap(), 0.2).unwrap();
    (input, sims)
}

#[test]
fn walked_fixture_gives_expected_record() {
    let (v, t) = setup();
    let (input, sims) = walked_fixture(&v);
    let rec = process_image(&input, &t, &sims, &FilterConfig::default()).unwrap();
    let id = |n: &str| v.id(n).unwrap();
    assert_eq!(rec.detections.len(), 2);
    assert_eq!(rec.detections[0].category, id("storage-tank"));
    assert_eq!(rec.detections[0].obb.cx(), 100.0);
    assert_eq!(rec.detections[1].category, id("tanker"));
    assert_eq!(
        rec.category_list,
        BTreeSet::from([
            id("plane"),
            id("cargo-ship"),
            id("storage-tank"),
            id("tanker"),
            id("car")
        ])
    );
    assert_eq!(rec.hard_negatives, BTreeSet::from([id("car")]));
    let prov: Vec<(usize, Option<f64>, FilterPath)> = rec
        .provenance
        .iter()
        .map(|p| (p.det_index, p.clip_similarity, p.filter_path))
        .collect();
    assert_eq!(
        prov,
        vec![
            (2, Some(0.5), FilterPath::Novel),
            (3, None, FilterPath::Novel),
            (1, None, FilterPath::TreeChecked)
        ]
    );

    let line = rec.to_json_line(&v).unwrap();
    let mut v2 = v.clone();
    assert_eq!(
        PseudoLabelRecord::from_json_line(&line, &mut v2).unwrap(),
        rec
    );
}

#[test]
fn pipeline_is_deterministic_across_parallelism() {
    let (v, t) = setup();
    let (base, sims) = walked_fixture(&v);
    let inputs: Vec<ImageInput> = (0..12)
        .rev()
        .map(|i| ImageInput {
            image_id: format!("img-{i:02}"),
            ..base.clone()
        })
        .collect();
    let mut all_sims = SimilarityProvider::new();
    for i in 0..12 {
        for (k, c) in [(2, "storage-tank"), (6, "plane")] {
            all_sims
                .insert(
                    &format!("img-{i:02}"),
                    k,
                    v.id(c).unwrap(),
                    sims.get("img", k, v.id(c).unwrap()).unwrap(),
                )
                .unwrap();
        }
    }
    let cfg = FilterConfig::default();
    let a = run_pipeline(&inputs, &t, &all_sims, &cfg, false).unwrap();
    let b = run_pipeline(&inputs, &t, &all_sims, &cfg, true).unwrap();
    let text = |rs: &[PseudoLabelRecord]| {
        rs.iter()
            .map(|r| r.to_json_line(&v).unwrap())
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(text(&a), text(&b));
    assert_eq!(a[0].image_id, "img-00");
}

proptest! {
    #[test]
    fn emitted_boxes_never_overlap_ground_truth(seed in 0u64..2000) {
        let (v, t) = setup();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let names = ["plane", "car", "tanker", "cargo-ship", "storage-tank"];
        let rand_box = |r: &mut ChaCha8Rng| (
            r.gen_range(0.0..120.0), r.gen_range(0.0..120.0),
            r.gen_range(6.0..40.0), r.gen_range(6.0..40.0), r.gen_range(-1.5..1.5),
        );
        let g: Vec<Detection> = (0..r.gen_range(0..4)).map(|_| {
            let b = rand_box(&mut r);
            gt(&v, names[r.gen_range(0..5)], b)
        }).collect();
        let preds: Vec<Detection> = (0..r.gen_range(0..20)).map(|_| {
            let b = rand_box(&mut r);
            det(&v, names[r.gen_range(0..5)], b, r.gen_range(0.0..1.0))
        }).collect();
        let mut sims = SimilarityProvider::new();
        for (i, d) in preds.iter().enumerate() {
            sims.insert("p", i, d.category, r.gen_range(-1.0..1.0)).unwrap();
        }
        let input = ImageInput { image_id: "p".into(), gt: g.clone(), predictions: vec![preds] };
        let rec = process_image(&input, &t, &sims, &FilterConfig::default()).unwrap();
        for d in &rec.detections {
            prop_assert!(rec.category_list.contains(&d.category));
            prop_assert!(!rec.hard_negatives.contains(&d.category));
            for gd in &g {
                prop_assert!(rotated_iou(&d.obb, &gd.obb) < 0.5);
            }
        }
        for (p, d) in rec.provenance.iter().zip(&rec.detections) {
            let side = d.hbox.width().min(d.hbox.height());
            match p.clip_similarity {
                Some(s) => prop_assert!(s >= 0.24 && side > 16.0),
                None => prop_assert!(side <= 16.0),
            }
        }
    }
}
