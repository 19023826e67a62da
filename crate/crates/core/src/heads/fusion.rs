use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::numkit::{Graph, LayerNorm, Mhca, Mlp2, ParamId, ParamStore, Tensor2D, Var};
use crate::promptdict::PromptBatch;
use crate::{CategoryId, Error, Result};

/// Default number of class-embedding slots.
pub const DEFAULT_CLASS_SLOTS: usize = 80;
pub const FUSION_LAYERS: usize = 3;
/// Initial scale of the attention output projections. Attention outputs
/// start nearly identical across queries; a small residual branch keeps
/// them from washing out per-query differences before training.
pub const ATTN_OUT_INIT_SCALE: f64 = 0.1;

/// `K` learnable vectors, one row each.
#[derive(Debug, Clone, Copy)]
pub struct ClassEmbeddingTable {
    pub table: ParamId,
    pub slots: usize,
    pub dim: usize,
}

impl ClassEmbeddingTable {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        slots: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if slots == 0 {
            return Err(Error::InvalidArgument(
                "class embedding table needs at least one slot".into(),
            ));
        }
        let table = store.insert(name, Tensor2D::uniform(slots, dim, 0.1, rng))?;
        Ok(Self { table, slots, dim })
    }
}

/// Random injective map from the batch's categories to table slots.
pub fn draw_class_ids<R: Rng + ?Sized>(
    categories: &[CategoryId],
    slots: usize,
    rng: &mut R,
) -> Result<BTreeMap<CategoryId, usize>> {
    if categories.len() > slots {
        return Err(Error::InvalidArgument(format!(
            "{} categories exceed {slots} class-embedding slots",
            categories.len()
        )));
    }
    let ids = index::sample(rng, slots, categories.len());
    Ok(categories.iter().copied().zip(ids.into_iter()).collect())
}

/// Table slot for every prompt of `batch`, under `ids`.
pub fn prompt_slots(batch: &PromptBatch, ids: &BTreeMap<CategoryId, usize>) -> Result<Vec<usize>> {
    batch
        .labels
        .iter()
        .map(|c| {
            ids.get(c)
                .copied()
                .ok_or_else(|| Error::UnknownCategory(format!("#{c} has no class-embedding slot")))
        })
        .collect()
}

/// Adds `table[id(c)]` to the projected embedding of every prompt of
/// category `c`, with a fresh random ID per category. Returns the shifted
/// batch and the ID map.
pub fn attach_class_embeddings<R: Rng + ?Sized>(
    batch: &PromptBatch,
    table: &Tensor2D,
    rng: &mut R,
) -> Result<(PromptBatch, BTreeMap<CategoryId, usize>)> {
    let ids = draw_class_ids(&batch.categories(), table.rows(), rng)?;
    let mut out = batch.clone();
    for (p, c) in out.prompts.iter_mut().zip(&batch.labels) {
        let proj = p
            .projected()
            .ok_or_else(|| Error::InvalidArgument("prompt has not been projected".into()))?;
        if proj.len() != table.cols() {
            return Err(Error::shape(
                "attach_class_embeddings",
                format!(
                    "prompt width {} vs table width {}",
                    proj.len(),
                    table.cols()
                ),
            ));
        }
        let row = table.row(ids[c]);
        let shifted = proj.iter().zip(row).map(|(a, b)| a + b).collect();
        *p = p.clone().with_projected(shifted);
    }
    Ok((out, ids))
}

/// One cross-attention fusion layer.
#[derive(Debug, Clone, Copy)]
pub struct FusionLayer {
    pub attn_p: Mhca,
    pub ln_p1: LayerNorm,
    pub mlp_p: Mlp2,
    pub ln_p2: LayerNorm,
    pub attn_x: Mhca,
    pub ln_x1: LayerNorm,
    pub mlp_x: Mlp2,
    pub ln_x2: LayerNorm,
}

impl FusionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layer = Self {
            attn_p: Mhca::new(store, &format!("{name}.attn_p"), dim, n_heads, rng)?,
            ln_p1: LayerNorm::new(store, &format!("{name}.ln_p1"), dim)?,
            mlp_p: Mlp2::new(store, &format!("{name}.mlp_p"), dim, dim, dim, rng)?,
            ln_p2: LayerNorm::new(store, &format!("{name}.ln_p2"), dim)?,
            attn_x: Mhca::new(store, &format!("{name}.attn_x"), dim, n_heads, rng)?,
            ln_x1: LayerNorm::new(store, &format!("{name}.ln_x1"), dim)?,
            mlp_x: Mlp2::new(store, &format!("{name}.mlp_x"), dim, dim, dim, rng)?,
            ln_x2: LayerNorm::new(store, &format!("{name}.ln_x2"), dim)?,
        };
        for attn in [layer.attn_p, layer.attn_x] {
            store
                .get_mut(attn.out.weight)
                .data_mut()
                .iter_mut()
                .for_each(|w| *w *= ATTN_OUT_INIT_SCALE);
            store
                .get_mut(attn.out.bias)
                .data_mut()
                .iter_mut()
                .for_each(|b| *b = 0.0);
        }
        Ok(layer)
    }

    /// Prompts attend to the image, then the image attends to the updated
    /// prompts. Each residual uses this layer's own input.
    pub fn forward(&self, g: &mut Graph<'_>, p: Var, x: Var) -> Result<(Var, Var)> {
        let a = self.attn_p.forward(g, p, x)?;
        let r = g.tape.add(a, p)?;
        let p1 = self.ln_p1.forward(g, r)?;
        let m = self.mlp_p.forward(g, p1)?;
        let r = g.tape.add(m, p1)?;
        let p_next = self.ln_p2.forward(g, r)?;

        let a = self.attn_x.forward(g, x, p_next)?;
        let r = g.tape.add(a, x)?;
        let x1 = self.ln_x1.forward(g, r)?;
        let m = self.mlp_x.forward(g, x1)?;
        let r = g.tape.add(m, x1)?;
        let x_next = self.ln_x2.forward(g, r)?;
        Ok((p_next, x_next))
    }
}

/// Input normalization of both streams followed by the fusion layers.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub ln_p_in: LayerNorm,
    pub ln_x_in: LayerNorm,
    pub layers: Vec<FusionLayer>,
}

impl FusionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_heads: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let ln_p_in = LayerNorm::new(store, &format!("{name}.ln_p_in"), dim)?;
        let ln_x_in = LayerNorm::new(store, &format!("{name}.ln_x_in"), dim)?;
        let layers = (0..n_layers)
            .map(|i| FusionLayer::new(store, &format!("{name}.{i}"), dim, n_heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            ln_p_in,
            ln_x_in,
            layers,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: Var, x: Var) -> Result<(Var, Var)> {
        let (pc, xc) = (g.value(p).cols(), g.value(x).cols());
        if pc != xc {
            return Err(Error::shape(
                "fusion_block",
                format!("prompt width {pc} vs feature width {xc}"),
            ));
        }
        let mut p = self.ln_p_in.forward(g, p)?;
        let mut x = self.ln_x_in.forward(g, x)?;
        for layer in &self.layers {
            (p, x) = layer.forward(g, p, x)?;
        }
        Ok((p, x))
    }
}

/// Value-level fusion of prompt rows `p` and feature rows `x`.
pub fn fusion_block(
    p: &Tensor2D,
    x: &Tensor2D,
    block: &FusionBlock,
    store: &ParamStore,
) -> Result<(Tensor2D, Tensor2D)> {
    let mut g = Graph::new(store);
    let pv = g.input(p.clone());
    let xv = g.input(x.clone());
    let (pf, xf) = block.forward(&mut g, pv, xv)?;
    Ok((g.value(pf).clone(), g.value(xf).clone()))
}
