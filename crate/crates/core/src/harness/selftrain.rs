//! Self-training on toy scenes: remove one class from most annotations,
//! train a baseline, pseudo-label the incomplete scenes with it and
//! retrain on labeled plus pseudo-labeled images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ap::ApReport;
use super::config::{derive_seed, RunConfig, SeedStream};
use super::dictionary::simulated_similarities;
use super::scene::{SyntheticScene, TexturePalette};
use super::train::{
    evaluate, train_model, EvalSettings, IterLog, ToyData, ToyDetector, TrainImage, TrainSet,
};
use crate::geom::Detection;
use crate::promptdict::{inference_prompts, PromptDictionary};
use crate::pseudolabel::{
    run_pipeline, CategoryTree, FilterConfig, ImageInput, PseudoLabelRecord, SimilarityProvider,
};
use crate::{CategoryId, Result, Vocabulary};

/// Annotations with `withheld` removed from every scene at or after
/// `labeled_scenes`.
pub fn under_label(
    scenes: &[SyntheticScene],
    labeled_scenes: usize,
    withheld: CategoryId,
) -> Vec<Vec<Detection>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if i < labeled_scenes {
                s.gt.clone()
            } else {
                s.gt.iter()
                    .filter(|d| d.category != withheld)
                    .cloned()
                    .collect()
            }
        })
        .collect()
}

/// Training set from explicit per-scene annotations. Scenes without boxes
/// are skipped.
pub fn labeled_set(scenes: Vec<SyntheticScene>, gt: &[Vec<Detection>]) -> TrainSet {
    let labeled = gt
        .iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .map(|(i, g)| TrainImage::labeled(i, g.clone()))
        .collect();
    TrainSet {
        scenes,
        labeled,
        pseudo: Vec::new(),
    }
}

/// Every palette class as its own top-level category.
pub fn flat_tree(palette: &TexturePalette, vocab: &mut Vocabulary) -> Result<CategoryTree> {
    let mut tree = CategoryTree::new();
    for name in &palette.names {
        tree.add(vocab, name, None)?;
    }
    Ok(tree)
}

/// Detections of `prompt_sets` independent prompt draws per scene; the
/// draws of scene `i` come from stream `i` of `settings.seed`.
pub fn predict_prompt_sets(
    model: &ToyDetector,
    scenes: &[SyntheticScene],
    dict: &PromptDictionary,
    settings: &EvalSettings,
    prompt_sets: usize,
) -> Result<Vec<Vec<Vec<Detection>>>> {
    let categories = dict.categories(settings.modality);
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            rng.set_stream(i as u64);
            (0..prompt_sets)
                .map(|_| {
                    let batch = inference_prompts(
                        &categories,
                        dict,
                        settings.modality,
                        settings.prompt_count,
                        &mut rng,
                    )?;
                    model.detect(
                        scene,
                        &batch,
                        settings.head,
                        settings.score_thresh,
                        settings.nms_iou,
                    )
                })
                .collect()
        })
        .collect()
}

/// Similarities of every prediction, numbered across the prompt sets of
/// each scene.
pub fn scene_similarities(
    scenes: &[SyntheticScene],
    predictions: &[Vec<Vec<Detection>>],
    palette: &TexturePalette,
) -> Result<SimilarityProvider> {
    let mut sims = SimilarityProvider::new();
    for (scene, preds) in scenes.iter().zip(predictions) {
        let mut offset = 0;
        for set in preds {
            simulated_similarities(scene, set, palette, offset, &mut sims)?;
            offset += set.len();
        }
    }
    Ok(sims)
}

/// Runs the model with `prompt_sets` prompt draws on each scene and filters
/// the detections into pseudo-label records against `gt`.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_label_scenes(
    model: &ToyDetector,
    scenes: &[SyntheticScene],
    gt: &[Vec<Detection>],
    dict: &PromptDictionary,
    palette: &TexturePalette,
    settings: &EvalSettings,
    prompt_sets: usize,
    filter: &FilterConfig,
) -> Result<Vec<PseudoLabelRecord>> {
    let predictions = predict_prompt_sets(model, scenes, dict, settings, prompt_sets)?;
    let sims = scene_similarities(scenes, &predictions, palette)?;
    let inputs: Vec<ImageInput> = scenes
        .iter()
        .zip(gt)
        .zip(predictions)
        .map(|((scene, g), preds)| ImageInput {
            image_id: scene.image_id.clone(),
            gt: g.clone(),
            predictions: preds,
        })
        .collect();
    let mut vocab = palette.vocabulary();
    let tree = flat_tree(palette, &mut vocab)?;
    run_pipeline(&inputs, &tree, &sims, filter, true)
}

/// Labeled images for the fully annotated scenes and pseudo-labeled ones
/// for the rest. `records` must follow the scene order of
/// `scenes[labeled_scenes..]`.
pub fn self_training_set(
    scenes: Vec<SyntheticScene>,
    gt: &[Vec<Detection>],
    labeled_scenes: usize,
    records: &[PseudoLabelRecord],
) -> TrainSet {
    let n = labeled_scenes.min(scenes.len());
    let labeled = (0..n)
        .filter(|&i| !gt[i].is_empty())
        .map(|i| TrainImage::labeled(i, gt[i].clone()))
        .collect();
    let pseudo = records
        .iter()
        .enumerate()
        .map(|(k, r)| TrainImage::pseudo(n + k, &gt[n + k], r))
        .filter(|im| !im.positives.is_empty())
        .collect();
    TrainSet {
        scenes,
        labeled,
        pseudo,
    }
}

/// Results of a baseline-then-retrain run.
#[derive(Debug, Clone)]
pub struct SelfTrainReport {
    pub baseline: ApReport,
    pub retrained: ApReport,
    pub records: Vec<PseudoLabelRecord>,
    /// Pseudo-label boxes over all records.
    pub pseudo_boxes: usize,
}

/// Baseline on under-labeled scenes, pseudo labels from it, and a fresh
/// model trained on the labeled plus pseudo-labeled mix. Both models start
/// from the same initialization and run the same number of iterations.
pub fn run_self_training(
    cfg: &RunConfig,
    data: &ToyData,
    mut on_iter: impl FnMut(&str, &IterLog),
) -> Result<SelfTrainReport> {
    let st = &cfg.selftrain;
    let gt = under_label(
        &data.train,
        st.labeled_scenes,
        CategoryId(st.withheld_class),
    );
    let init = ToyDetector::new(cfg.model.clone(), derive_seed(cfg.seed, SeedStream::Init))?;
    let settings = EvalSettings::from_config(cfg);

    let base_set = labeled_set(data.train.clone(), &gt);
    let base = train_model(
        init.clone(),
        cfg,
        &base_set,
        &data.dict,
        Some(&data.eval),
        |l| on_iter("baseline", l),
    )?;
    let baseline = evaluate(&base.model, &data.eval, &data.dict, &settings)?;

    let n = st.labeled_scenes.min(data.train.len());
    let pseudo_settings = EvalSettings {
        seed: derive_seed(cfg.seed, SeedStream::Pseudo),
        ..settings
    };
    let records = pseudo_label_scenes(
        &base.model,
        &data.train[n..],
        &gt[n..],
        &data.dict,
        &data.palette,
        &pseudo_settings,
        st.prompt_sets,
        &cfg.pseudo,
    )?;
    let pseudo_boxes = records.iter().map(|r| r.detections.len()).sum();

    let set = self_training_set(data.train.clone(), &gt, n, &records);
    let re = train_model(init, cfg, &set, &data.dict, Some(&data.eval), |l| {
        on_iter("retrain", l)
    })?;
    let retrained = evaluate(&re.model, &data.eval, &data.dict, &settings)?;
    Ok(SelfTrainReport {
        baseline,
        retrained,
        records,
        pseudo_boxes,
    })
}
