//! Analytic parameter and multiply-accumulate accounting.
//!
//! One multiply-accumulate counts as one FLOP. Norms, softmax, GELU and
//! residual additions are not counted.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::model::{ModelConfig, SitePosition, VitModel};
use crate::prune::PrunePlan;
use crate::{Error, Result};

/// Kept widths at the four sites of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub qkv_in: usize,
    pub attn_out: usize,
    pub mlp_in: usize,
    pub mlp_hidden: usize,
}

/// Per-block kept widths for a whole model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchShape {
    pub blocks: Vec<BlockShape>,
}

impl ArchShape {
    pub fn full(config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        let shape = BlockShape {
            qkv_in: d,
            attn_out: d,
            mlp_in: d,
            mlp_hidden: config.mlp_hidden(),
        };
        Self {
            blocks: alloc::vec![shape; config.num_layers],
        }
    }

    pub fn from_plan(config: &ModelConfig, plan: &PrunePlan) -> Result<Self> {
        let mut shape = Self::full(config);
        for mask in &plan.masks {
            let b = shape.blocks.get_mut(mask.site.block).ok_or_else(|| {
                Error::State(format!("plan refers to missing block {}", mask.site.block))
            })?;
            let kept = mask.keep_indices.len();
            match mask.site.position {
                SitePosition::QkvIn => b.qkv_in = kept,
                SitePosition::AttnOut => b.attn_out = kept,
                SitePosition::MlpIn => b.mlp_in = kept,
                SitePosition::MlpHidden => b.mlp_hidden = kept,
            }
        }
        Ok(shape)
    }

    /// Widths recorded in a model's keep lists (full widths when unpruned).
    pub fn of_model(model: &VitModel) -> Self {
        let blocks = model
            .blocks
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let kept = |position| {
                    model
                        .keep_indices(crate::model::GateSite { block: i, position })
                        .len()
                };
                BlockShape {
                    qkv_in: kept(SitePosition::QkvIn),
                    attn_out: kept(SitePosition::AttnOut),
                    mlp_in: kept(SitePosition::MlpIn),
                    mlp_hidden: kept(SitePosition::MlpHidden),
                }
            })
            .collect();
        Self { blocks }
    }
}

/// Parameter count of one block (gates excluded).
pub fn block_params(config: &ModelConfig, s: &BlockShape) -> u64 {
    let d = config.embed_dim as u64;
    let (qi, vo, mi, hid) = (
        s.qkv_in as u64,
        s.attn_out as u64,
        s.mlp_in as u64,
        s.mlp_hidden as u64,
    );
    let norms = 4 * d;
    let qk = 2 * (qi * d + d);
    let v = qi * vo + vo;
    let out = vo * d + d;
    let fc1 = mi * hid + hid;
    let fc2 = hid * d + d;
    norms + qk + v + out + fc1 + fc2
}

/// Number of gate scalars in a soft model.
pub fn gate_params(config: &ModelConfig) -> u64 {
    (config.num_layers * (3 * config.embed_dim + config.mlp_hidden())) as u64
}

/// All learnable scalars: patch embedding, class token, positional embeddings,
/// norms, projections with biases, head. Gates are added only when
/// `include_gates` is set (soft models).
pub fn count_params(config: &ModelConfig, shape: Option<&ArchShape>, include_gates: bool) -> u64 {
    let full;
    let shape = match shape {
        Some(s) => s,
        None => {
            full = ArchShape::full(config);
            &full
        }
    };
    let d = config.embed_dim as u64;
    let embed = config.patch_dim() as u64 * d + d + d + config.tokens() as u64 * d;
    let blocks: u64 = shape.blocks.iter().map(|b| block_params(config, b)).sum();
    let tail = 2 * d + d * config.num_classes as u64 + config.num_classes as u64;
    let gates = if include_gates { gate_params(config) } else { 0 };
    embed + blocks + tail + gates
}

/// Multiply-accumulates of one block, split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockFlops {
    pub qkv: u64,
    pub attention: u64,
    pub out_proj: u64,
    pub mlp: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.qkv + self.attention + self.out_proj + self.mlp
    }
}

pub fn block_flops(config: &ModelConfig, s: &BlockShape, tokens: usize) -> BlockFlops {
    let n = tokens as u64;
    let d = config.embed_dim as u64;
    let (qi, vo, mi, hid) = (
        s.qkv_in as u64,
        s.attn_out as u64,
        s.mlp_in as u64,
        s.mlp_hidden as u64,
    );
    BlockFlops {
        // q and k keep full width; v loses the attention-output columns
        qkv: n * qi * (2 * d + vo),
        // Q·Kᵀ over full key width, then A·V over kept value columns
        attention: n * n * d + n * n * vo,
        out_proj: n * vo * d,
        mlp: n * mi * hid + n * hid * d,
    }
}

fn tokens_at(config: &ModelConfig, image_size: usize) -> Result<usize> {
    if image_size == 0 || !image_size.is_multiple_of(config.patch_size) {
        return Err(Error::Config(format!(
            "image size {image_size} is not a multiple of patch size {}",
            config.patch_size
        )));
    }
    let side = image_size / config.patch_size;
    Ok(side * side + 1)
}

/// Multiply-accumulates for one image of side `image_size`.
pub fn count_flops(config: &ModelConfig, shape: Option<&ArchShape>, image_size: usize) -> Result<u64> {
    let full;
    let shape = match shape {
        Some(s) => s,
        None => {
            full = ArchShape::full(config);
            &full
        }
    };
    let n = tokens_at(config, image_size)?;
    let d = config.embed_dim as u64;
    let patch = (n as u64 - 1) * config.patch_dim() as u64 * d;
    let blocks: u64 = shape.blocks.iter().map(|b| block_flops(config, b, n).total()).sum();
    let head = d * config.num_classes as u64;
    Ok(patch + blocks + head)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCost {
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: BlockFlops,
    pub flops_after: BlockFlops,
}

/// Parameters and FLOPs before and after pruning. Counts exclude gates; the
/// gate scalars dropped by pruning are reported separately.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub image_size: usize,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    /// `100 · (1 − params_after / params_before)`.
    pub params_reduced_pct: f64,
    /// `100 · (1 − flops_after / flops_before)`.
    pub flops_reduced_pct: f64,
    pub gate_params_removed: u64,
    pub per_block: Vec<BlockCost>,
}

fn reduced_pct(before: u64, after: u64) -> f64 {
    100.0 * (1.0 - after as f64 / before as f64)
}

impl CostReport {
    pub fn new(
        config: &ModelConfig,
        after: &ArchShape,
        image_size: usize,
        gate_params_removed: u64,
    ) -> Result<Self> {
        if after.blocks.len() != config.num_layers {
            return Err(Error::State(format!(
                "shape has {} blocks, config has {}",
                after.blocks.len(),
                config.num_layers
            )));
        }
        let before = ArchShape::full(config);
        let n = tokens_at(config, image_size)?;
        let params_before = count_params(config, Some(&before), false);
        let params_after = count_params(config, Some(after), false);
        let flops_before = count_flops(config, Some(&before), image_size)?;
        let flops_after = count_flops(config, Some(after), image_size)?;
        let per_block = before
            .blocks
            .iter()
            .zip(&after.blocks)
            .map(|(b, a)| BlockCost {
                params_before: block_params(config, b),
                params_after: block_params(config, a),
                flops_before: block_flops(config, b, n),
                flops_after: block_flops(config, a, n),
            })
            .collect();
        Ok(Self {
            image_size,
            params_before,
            params_after,
            flops_before,
            flops_after,
            params_reduced_pct: reduced_pct(params_before, params_after),
            flops_reduced_pct: reduced_pct(flops_before, flops_after),
            gate_params_removed,
            per_block,
        })
    }

    /// Report for an unpruned architecture.
    pub fn baseline(config: &ModelConfig, image_size: usize) -> Result<Self> {
        Self::new(config, &ArchShape::full(config), image_size, 0)
    }

    /// Report for a model as it stands (pruned or not) at its native resolution.
    pub fn for_model(model: &VitModel) -> Result<Self> {
        let removed = if model.is_pruned() {
            gate_params(&model.config)
        } else {
            0
        };
        Self::new(
            &model.config,
            &ArchShape::of_model(model),
            model.config.image_size,
            removed,
        )
    }

    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let m = |v: u64| v as f64 / 1e6;
        let b = |v: u64| v as f64 / 1e9;
        let _ = writeln!(s, "{:<12} {:>14} {:>14} {:>10}", "", "before", "after", "reduced");
        let _ = writeln!(
            s,
            "{:<12} {:>13.3}M {:>13.3}M {:>9.2}%",
            "params",
            m(self.params_before),
            m(self.params_after),
            self.params_reduced_pct
        );
        let _ = writeln!(
            s,
            "{:<12} {:>13.4}B {:>13.4}B {:>9.2}%",
            "flops",
            b(self.flops_before),
            b(self.flops_after),
            self.flops_reduced_pct
        );
        let _ = writeln!(s, "image size: {}", self.image_size);
        let _ = writeln!(s, "gate params removed: {}", self.gate_params_removed);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:>5} {:>12} {:>12} {:>14} {:>14} {:>14} {:>14}",
            "block", "params", "params'", "qkv'", "attn'", "out'", "mlp'"
        );
        for (i, c) in self.per_block.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:>5} {:>12} {:>12} {:>14} {:>14} {:>14} {:>14}",
                i,
                c.params_before,
                c.params_after,
                c.flops_after.qkv,
                c.flops_after.attention,
                c.flops_after.out_proj,
                c.flops_after.mlp
            );
        }
        s
    }

    /// `key=value` lines; per-block entries use `per_block[i].field` keys.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "params_before={}", self.params_before);
        let _ = writeln!(s, "params_after={}", self.params_after);
        let _ = writeln!(s, "params_reduced_pct={:.6}", self.params_reduced_pct);
        let _ = writeln!(s, "flops_before={}", self.flops_before);
        let _ = writeln!(s, "flops_after={}", self.flops_after);
        let _ = writeln!(s, "flops_reduced_pct={:.6}", self.flops_reduced_pct);
        let _ = writeln!(s, "gate_params_removed={}", self.gate_params_removed);
        for (i, c) in self.per_block.iter().enumerate() {
            let p = format!("per_block[{i}]");
            let _ = writeln!(s, "{p}.params_before={}", c.params_before);
            let _ = writeln!(s, "{p}.params_after={}", c.params_after);
            for (name, before, after) in [
                ("qkv", c.flops_before.qkv, c.flops_after.qkv),
                ("attention", c.flops_before.attention, c.flops_after.attention),
                ("out_proj", c.flops_before.out_proj, c.flops_after.out_proj),
                ("mlp", c.flops_before.mlp, c.flops_after.mlp),
            ] {
                let _ = writeln!(s, "{p}.{name}_flops_before={before}");
                let _ = writeln!(s, "{p}.{name}_flops_after={after}");
            }
        }
        s
    }
}
