//! Global magnitude threshold over all importance scores, binarization into
//! per-site keep masks, and structural slicing of the gated projections.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::{Block, BlockKeep, GateSite, Linear, SitePosition, VitModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One importance score, located by site and index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreEntry {
    pub site: GateSite,
    pub index: usize,
    pub magnitude: f64,
}

/// Every gate entry of a soft model as `|â|`, in `(block, site, index)` order.
pub fn collect_scores(model: &VitModel) -> Result<Vec<ScoreEntry>> {
    if model.is_pruned() {
        return Err(Error::State("model is already pruned; no gates to rank".into()));
    }
    let mut out = Vec::new();
    for (site, gate) in model.gates() {
        out.extend(gate.data().iter().enumerate().map(|(index, v)| ScoreEntry {
            site,
            index,
            magnitude: v.abs(),
        }));
    }
    Ok(out)
}

/// Cut point for a requested pruning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub tau: f64,
    /// `floor(rate · N)`: how many entries the ranking removes.
    pub prune_count: usize,
    pub rate: f64,
}

/// Threshold pruning exactly `floor(rate · N)` of the given magnitudes.
///
/// Entries are ranked ascending by `(magnitude, position)`; `tau` is the
/// magnitude at rank `floor(rate · N)`. Entries strictly below `tau` are pruned,
/// and ties at `tau` are pruned in position order until the count is met. With
/// nothing to prune, `tau` sits just below the smallest magnitude.
pub fn compute_threshold(magnitudes: &[f64], rate: f64) -> Result<Threshold> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("pruning rate {rate} outside [0, 1)")));
    }
    if magnitudes.is_empty() {
        return Err(Error::Input("no importance scores to rank".into()));
    }
    if let Some(bad) = magnitudes.iter().find(|m| !m.is_finite() || **m < 0.0) {
        return Err(Error::Input(format!("invalid score magnitude {bad}")));
    }
    let n = magnitudes.len();
    let prune_count = (libm::floor(rate * n as f64) as usize).min(n - 1);
    let mut sorted = magnitudes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tau = if prune_count == 0 {
        sorted[0].next_down()
    } else {
        sorted[prune_count]
    };
    Ok(Threshold {
        tau,
        prune_count,
        rate,
    })
}

/// Binary keep decision for one site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub site: GateSite,
    pub keep: Vec<bool>,
    pub keep_indices: Vec<usize>,
}

impl PruneMask {
    pub fn from_keep(site: GateSite, keep: Vec<bool>) -> Self {
        let keep_indices = keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect();
        Self {
            site,
            keep,
            keep_indices,
        }
    }

    pub fn pruned(&self) -> usize {
        self.keep.len() - self.keep_indices.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    /// One mask per site, in site order.
    pub masks: Vec<PruneMask>,
    pub tau: f64,
    pub requested_rate: f64,
    pub achieved_rate: f64,
    /// Sites that would have lost every dimension and kept their top score.
    pub protected_sites: Vec<GateSite>,
}

impl PrunePlan {
    pub fn total_scores(&self) -> usize {
        self.masks.iter().map(|m| m.keep.len()).sum()
    }

    pub fn total_pruned(&self) -> usize {
        self.masks.iter().map(PruneMask::pruned).sum()
    }

    pub fn mask(&self, site: GateSite) -> Option<&PruneMask> {
        self.masks.iter().find(|m| m.site == site)
    }

    /// Builds a plan directly from keep masks (no threshold involved).
    pub fn from_masks(masks: Vec<PruneMask>) -> Self {
        let total: usize = masks.iter().map(|m| m.keep.len()).sum();
        let pruned: usize = masks.iter().map(PruneMask::pruned).sum();
        Self {
            masks,
            tau: f64::NAN,
            requested_rate: pruned as f64 / total.max(1) as f64,
            achieved_rate: pruned as f64 / total.max(1) as f64,
            protected_sites: Vec::new(),
        }
    }
}

/// Turns a threshold into per-site masks (`a* = |â| ≥ τ` with rank-order tie
/// resolution). Every site keeps at least its largest score.
///
/// `scores` must be grouped by site, as produced by [`collect_scores`].
pub fn binarize(scores: &[ScoreEntry], threshold: &Threshold) -> PrunePlan {
    let tau = threshold.tau;
    let below = scores.iter().filter(|e| e.magnitude < tau).count();
    let mut ties_to_prune = threshold.prune_count.saturating_sub(below);
    let mut masks: Vec<PruneMask> = Vec::new();
    let mut protected_sites = Vec::new();
    let mut start = 0;
    while start < scores.len() {
        let site = scores[start].site;
        let end = start + scores[start..].iter().take_while(|e| e.site == site).count();
        let group = &scores[start..end];
        let mut keep = vec![true; group.len()];
        for (e, k) in group.iter().zip(keep.iter_mut()) {
            if e.magnitude < tau {
                *k = false;
            } else if e.magnitude == tau && ties_to_prune > 0 {
                *k = false;
                ties_to_prune -= 1;
            }
        }
        if !keep.iter().any(|&k| k) {
            // first index among the largest magnitudes
            let best = group
                .iter()
                .enumerate()
                .fold(0, |b, (i, e)| if e.magnitude > group[b].magnitude { i } else { b });
            keep[best] = true;
            protected_sites.push(site);
        }
        let mut mask = PruneMask::from_keep(site, keep);
        // entries keep their within-site index even if the group is reordered
        if group.iter().enumerate().any(|(i, e)| e.index != i) {
            let mut order: Vec<(usize, bool)> = group.iter().map(|e| e.index).zip(mask.keep).collect();
            order.sort_by_key(|p| p.0);
            mask = PruneMask::from_keep(site, order.into_iter().map(|p| p.1).collect());
        }
        masks.push(mask);
        start = end;
    }
    let total = scores.len();
    let pruned: usize = masks.iter().map(PruneMask::pruned).sum();
    PrunePlan {
        masks,
        tau,
        requested_rate: threshold.rate,
        achieved_rate: pruned as f64 / total.max(1) as f64,
        protected_sites,
    }
}

/// Ranks every gate of `model` globally and binarizes at `rate`.
pub fn plan_for_rate(model: &VitModel, rate: f64) -> Result<PrunePlan> {
    let scores = collect_scores(model)?;
    let mags: Vec<f64> = scores.iter().map(|e| e.magnitude).collect();
    let threshold = compute_threshold(&mags, rate)?;
    Ok(binarize(&scores, &threshold))
}

/// Keeps `rows` of an `in × out` weight, scaling row `j` by `row_scale[j]`, and
/// optionally keeps only `cols`.
fn fold_rows(weight: &Tensor, rows: &[usize], row_scale: &[f64], cols: Option<&[usize]>) -> Tensor {
    let out = weight.shape()[1];
    let all: Vec<usize>;
    let cols = match cols {
        Some(c) => c,
        None => {
            all = (0..out).collect();
            &all
        }
    };
    let src = weight.data();
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        let row = &src[r * out..(r + 1) * out];
        let s = row_scale[r];
        data.extend(cols.iter().map(|&c| row[c] * s));
    }
    // zero-width weights only arise for heads whose value columns all vanish,
    // which cannot happen at the whole-site level thanks to floor protection
    Tensor::new(&[rows.len(), cols.len()], data)
        .expect("site keeps at least one index")
        .with_requires_grad(true)
}

fn sliced(weight: Tensor, bias: Tensor) -> Linear {
    Linear { weight, bias }
}

/// Structurally prunes a soft model: slices every affected projection to the
/// kept indices and folds the kept gate values into the following weights.
/// Residual stream, norms, embeddings and head are untouched.
pub fn apply_plan(model: &VitModel, plan: &PrunePlan) -> Result<VitModel> {
    if model.is_pruned() {
        return Err(Error::State("model is already pruned".into()));
    }
    let sites = model.config.sites();
    if plan.masks.len() != sites.len() {
        return Err(Error::State(format!(
            "plan has {} masks, model has {} gate sites",
            plan.masks.len(),
            sites.len()
        )));
    }
    for (mask, site) in plan.masks.iter().zip(&sites) {
        let dim = model.config.site_dim(site.position);
        if mask.site != *site || mask.keep.len() != dim {
            return Err(Error::State(format!(
                "plan mask for {} ({} entries) does not match model site {site} ({dim} entries)",
                mask.site,
                mask.keep.len()
            )));
        }
        if mask.keep_indices.is_empty() {
            return Err(Error::State(format!("plan removes every dimension at {site}")));
        }
    }
    let mut pruned = model.clone();
    for (b, block) in pruned.blocks.iter_mut().enumerate() {
        let keep_at = |p: SitePosition| plan.masks[b * 4 + p.index()].keep_indices.clone();
        let keep = BlockKeep {
            qkv_in: keep_at(SitePosition::QkvIn),
            attn_out: keep_at(SitePosition::AttnOut),
            mlp_in: keep_at(SitePosition::MlpIn),
            mlp_hidden: keep_at(SitePosition::MlpHidden),
        };
        let gates = block.gates.take().expect("unpruned block carries gates");
        let [g_qkv, g_out, g_in, g_hid] = gates.each_ref().map(|t| t.data());
        *block = Block {
            norm1: block.norm1.clone(),
            q: sliced(fold_rows(&block.q.weight, &keep.qkv_in, g_qkv, None), block.q.bias.clone()),
            k: sliced(fold_rows(&block.k.weight, &keep.qkv_in, g_qkv, None), block.k.bias.clone()),
            v: sliced(
                fold_rows(&block.v.weight, &keep.qkv_in, g_qkv, Some(&keep.attn_out)),
                block.v.bias.select(&keep.attn_out).with_requires_grad(true),
            ),
            out: sliced(fold_rows(&block.out.weight, &keep.attn_out, g_out, None), block.out.bias.clone()),
            norm2: block.norm2.clone(),
            fc1: sliced(
                fold_rows(&block.fc1.weight, &keep.mlp_in, g_in, Some(&keep.mlp_hidden)),
                block.fc1.bias.select(&keep.mlp_hidden).with_requires_grad(true),
            ),
            fc2: sliced(fold_rows(&block.fc2.weight, &keep.mlp_hidden, g_hid, None), block.fc2.bias.clone()),
            gates: None,
            keep: Some(keep),
        };
    }
    pruned.zero_grad();
    Ok(pruned)
}

/// Copy of a soft model whose gates are multiplied by the plan's binary masks,
/// so pruned entries are zero and kept entries retain their real value.
pub fn mask_gates(model: &VitModel, plan: &PrunePlan) -> Result<VitModel> {
    let mut masked = model.clone();
    for mask in &plan.masks {
        let gate = masked
            .gate_mut(mask.site)
            .ok_or_else(|| Error::State(format!("model has no gate at {}", mask.site)))?;
        if gate.len() != mask.keep.len() {
            return Err(Error::State(format!("mask length mismatch at {}", mask.site)));
        }
        for (v, &k) in gate.data_mut().iter_mut().zip(&mask.keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
    Ok(masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn entries(mags: &[f64]) -> Vec<ScoreEntry> {
        let site = GateSite {
            block: 0,
            position: SitePosition::QkvIn,
        };
        mags.iter()
            .enumerate()
            .map(|(index, &magnitude)| ScoreEntry {
                site,
                index,
                magnitude,
            })
            .collect()
    }

    #[test]
    fn threshold_small_example() {
        let mags = [0.5, 0.1, 0.9, 0.3];
        let t = compute_threshold(&mags, 0.5).unwrap();
        assert_eq!(t.prune_count, 2);
        assert_eq!(t.tau, 0.5);
        let plan = binarize(&entries(&mags), &t);
        assert_eq!(plan.masks[0].keep, vec![true, false, true, false]);
        assert_eq!(plan.achieved_rate, 0.5);
    }

    #[test]
    fn rate_zero_prunes_nothing() {
        let mags = [0.5, 0.1, 0.9, 0.3];
        let t = compute_threshold(&mags, 0.0).unwrap();
        assert!(t.tau < 0.1);
        let plan = binarize(&entries(&mags), &t);
        assert_eq!(plan.total_pruned(), 0);
        assert_eq!(plan.achieved_rate, 0.0);
    }

    #[test]
    fn invalid_rate_is_config_error() {
        for r in [-0.1, 1.0, 1.5, f64::NAN] {
            assert!(matches!(compute_threshold(&[1.0], r), Err(Error::Config(_))));
        }
    }

    #[test]
    fn ties_resolved_by_position() {
        let mags = [1.0, 1.0, 1.0, 1.0, 1.0];
        let t = compute_threshold(&mags, 0.4).unwrap();
        let plan = binarize(&entries(&mags), &t);
        assert_eq!(plan.masks[0].keep, vec![false, false, true, true, true]);
    }

    #[test]
    fn tau_above_everything_keeps_one_per_site() {
        let cfg = ModelConfig::toy();
        let model = VitModel::init(&cfg, 3).unwrap();
        let scores = collect_scores(&model).unwrap();
        let t = Threshold {
            tau: 2.0,
            prune_count: scores.len(),
            rate: 0.99,
        };
        let plan = binarize(&scores, &t);
        assert!(plan.masks.iter().all(|m| m.keep_indices == vec![0]));
        assert_eq!(plan.protected_sites.len(), 8);
    }

    #[test]
    fn collect_counts_and_magnitudes() {
        let model = VitModel::init(&ModelConfig::toy(), 3).unwrap();
        let scores = collect_scores(&model).unwrap();
        assert_eq!(scores.len(), 2 * (32 + 32 + 32 + 128));
        assert!(scores.iter().all(|e| e.magnitude == 1.0));
    }

    #[test]
    fn mlp_hidden_half_pruned_halves_extents() {
        let cfg = ModelConfig::toy();
        let model = VitModel::init(&cfg, 3).unwrap();
        let masks = cfg
            .sites()
            .into_iter()
            .map(|site| {
                let n = cfg.site_dim(site.position);
                let keep = (0..n)
                    .map(|i| site.position != SitePosition::MlpHidden || i % 2 == 0)
                    .collect();
                PruneMask::from_keep(site, keep)
            })
            .collect();
        let hard = apply_plan(&model, &PrunePlan::from_masks(masks)).unwrap();
        assert_eq!(hard.blocks[0].fc1.weight.shape(), &[32, 64]);
        assert_eq!(hard.blocks[0].fc1.bias.shape(), &[64]);
        assert_eq!(hard.blocks[0].fc2.weight.shape(), &[64, 32]);
        assert!(apply_plan(&hard, &plan_for_rate(&model, 0.1).unwrap()).is_err());
    }
}
