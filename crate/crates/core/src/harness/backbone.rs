use rand::Rng;

use super::scene::{SyntheticScene, FIELD_DIM};
use crate::heads::FeatureGrid;
use crate::numkit::{Graph, Linear, ParamStore, Var};
use crate::Result;

/// Two linear + SiLU layers from the procedural field to model features.
#[derive(Debug, Clone, Copy)]
pub struct ToyBackbone {
    pub l1: Linear,
    pub l2: Linear,
}

impl ToyBackbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, "backbone.l1", FIELD_DIM, dim, rng)?,
            l2: Linear::new(store, "backbone.l2", dim, dim, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.l2.out_dim
    }

    pub fn forward(&self, g: &mut Graph<'_>, field: Var) -> Result<Var> {
        let h = self.l1.forward(g, field)?;
        let h = g.tape.silu(h);
        let h = self.l2.forward(g, h)?;
        Ok(g.tape.silu(h))
    }

    /// Parameter names owned by the backbone.
    pub fn param_prefix() -> &'static str {
        "backbone."
    }
}

/// Cell features of `scene` under the current parameters.
pub fn toy_backbone(
    store: &ParamStore,
    backbone: &ToyBackbone,
    scene: &SyntheticScene,
) -> Result<FeatureGrid> {
    let mut g = Graph::new(store);
    let x = g.input(scene.field.clone());
    let y = backbone.forward(&mut g, x)?;
    FeatureGrid::new(
        g.value(y).clone(),
        scene.grid_w(),
        scene.grid_h(),
        scene.stride as f64,
    )
}
