use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{Detection, OrientedBox, Point};
use crate::heads::{encode_obb, FeatureGrid};
use crate::numkit::Tensor2D;
use crate::{CategoryId, Error, Result, Vocabulary};

/// Width of a procedural cell vector.
pub const FIELD_DIM: usize = 16;
/// Leading dims carrying the texture signature.
pub const SIGNATURE_DIM: usize = 8;
const GEOM_OFFSET: usize = 8;
const OBJECTNESS: usize = 14;

/// Parameters of a synthetic scene family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub n_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: f64,
    pub max_side: f64,
    /// Std of the Gaussian noise added to signature and objectness dims.
    pub noise: f64,
    /// Std of the noise on the geometry dims.
    pub geom_noise: f64,
    pub palette_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            stride: 8,
            n_classes: 3,
            min_objects: 1,
            max_objects: 4,
            min_side: 16.0,
            max_side: 36.0,
            noise: 0.35,
            geom_noise: 0.05,
            palette_seed: 1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.stride == 0 || self.width % self.stride != 0 || self.height % self.stride != 0 {
            return bad(format!(
                "{}x{} is not a multiple of stride {}",
                self.width, self.height, self.stride
            ));
        }
        if self.n_classes == 0 || self.n_classes > SIGNATURE_DIM {
            return bad(format!(
                "texture classes must be 1..={SIGNATURE_DIM}, got {}",
                self.n_classes
            ));
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects".into());
        }
        if !(self.min_side > 0.0 && self.min_side <= self.max_side) {
            return bad(format!(
                "bad side range [{}, {}]",
                self.min_side, self.max_side
            ));
        }
        if self.max_side * std::f64::consts::SQRT_2 > self.width.min(self.height) as f64 {
            return bad(format!(
                "objects up to {} px do not fit the image",
                self.max_side
            ));
        }
        if !(self.noise >= 0.0 && self.geom_noise >= 0.0) {
            return bad("noise must be non-negative".into());
        }
        Ok(())
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.stride
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.stride
    }
}

/// Texture class names and their orthonormal signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct TexturePalette {
    pub names: Vec<String>,
    pub signatures: Vec<[f64; SIGNATURE_DIM]>,
}

impl TexturePalette {
    /// Gram-Schmidt on Gaussian draws, so signatures are unit and mutually
    /// orthogonal.
    pub fn new(n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes == 0 || n_classes > SIGNATURE_DIM {
            return Err(Error::InvalidArgument(format!(
                "{n_classes} texture classes"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut sigs: Vec<[f64; SIGNATURE_DIM]> = Vec::new();
        while sigs.len() < n_classes {
            let mut v = [0.0; SIGNATURE_DIM];
            v.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            for s in &sigs {
                let d: f64 = v.iter().zip(s).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(s).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-3 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            sigs.push(v);
        }
        Ok(Self {
            names: (0..n_classes).map(|k| format!("texture-{k}")).collect(),
            signatures: sigs,
        })
    }

    /// Vocabulary whose ids `0..n` are the palette classes in order.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_names(&self.names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Procedural stand-in for an image: one 16-d vector per stride cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    /// `grid_h * grid_w` rows of [`FIELD_DIM`] values, row-major.
    pub field: Tensor2D,
    pub gt: Vec<Detection>,
}

impl SyntheticScene {
    pub fn grid_w(&self) -> usize {
        self.width / self.stride
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.stride
    }

    pub fn centers(&self) -> Vec<Point> {
        FeatureGrid::centers_for(self.grid_w(), self.grid_h(), self.stride as f64)
    }
}

/// Places up to `n_objects` non-overlapping rectangles (fewer if placement
/// keeps failing) and renders the field.
pub fn generate_scene<R: Rng + ?Sized>(
    spec: &SceneSpec,
    palette: &TexturePalette,
    image_id: &str,
    n_objects: usize,
    rng: &mut R,
) -> Result<SyntheticScene> {
    spec.validate()?;
    if palette.len() != spec.n_classes {
        return Err(Error::InvalidArgument(
            "palette size differs from n_classes".into(),
        ));
    }
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut gt: Vec<Detection> = Vec::new();
    for _ in 0..n_objects {
        for _attempt in 0..100 {
            let bw = rng.gen_range(spec.min_side..=spec.max_side);
            let bh = rng.gen_range(spec.min_side..=spec.max_side);
            let theta = rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
            let probe = OrientedBox::new(0.0, 0.0, bw, bh, theta)?.to_hbb();
            let (hw, hh) = (probe.width() / 2.0, probe.height() / 2.0);
            let cx = rng.gen_range(hw..=w - hw);
            let cy = rng.gen_range(hh..=h - hh);
            let obb = OrientedBox::new(cx, cy, bw, bh, theta)?;
            let hb = obb.to_hbb();
            let clash = gt.iter().any(|g| {
                let o = g.obb.to_hbb();
                hb.xmin < o.xmax && o.xmin < hb.xmax && hb.ymin < o.ymax && o.ymin < hb.ymax
            });
            if !clash {
                let class = rng.gen_range(0..spec.n_classes) as u32;
                gt.push(Detection::ground_truth(obb, CategoryId(class)));
                break;
            }
        }
    }
    let field = render_field(spec, palette, &gt, rng)?;
    Ok(SyntheticScene {
        image_id: image_id.to_string(),
        width: spec.width,
        height: spec.height,
        stride: spec.stride,
        field,
        gt,
    })
}

fn render_field<R: Rng + ?Sized>(
    spec: &SceneSpec,
    palette: &TexturePalette,
    gt: &[Detection],
    rng: &mut R,
) -> Result<Tensor2D> {
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let gnoise = Normal::new(0.0, spec.geom_noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let stride = spec.stride as f64;
    let centers = FeatureGrid::centers_for(spec.grid_w(), spec.grid_h(), stride);
    let mut field = Tensor2D::zeros(centers.len(), FIELD_DIM);
    for (i, &c) in centers.iter().enumerate() {
        let owner = gt.iter().find(|g| g.obb.contains(c));
        let row = field.row_mut(i);
        let sig = owner.map(|g| palette.signatures[g.category.0 as usize]);
        for d in 0..SIGNATURE_DIM {
            row[d] = sig.map_or(0.0, |s| s[d]) + noise.sample(rng);
        }
        let geo = match owner {
            Some(g) => encode_obb(&g.obb, c, stride),
            None => [0.0; 6],
        };
        for (d, v) in geo.iter().enumerate() {
            row[GEOM_OFFSET + d] = v + gnoise.sample(rng);
        }
        row[OBJECTNESS] = if owner.is_some() { 1.0 } else { 0.0 } + noise.sample(rng);
        row[FIELD_DIM - 1] = noise.sample(rng);
    }
    Ok(field)
}

/// `count` scenes with ids `{prefix}-{i:04}`, each from its own stream
/// seeded by `(seed, i)`, generated in parallel.
pub fn generate_scenes(
    spec: &SceneSpec,
    palette: &TexturePalette,
    prefix: &str,
    count: usize,
    seed: u64,
) -> Result<Vec<SyntheticScene>> {
    spec.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let k = rng.gen_range(spec.min_objects..=spec.max_objects);
            generate_scene(spec, palette, &format!("{prefix}-{i:04}"), k, &mut rng)
        })
        .collect()
}
