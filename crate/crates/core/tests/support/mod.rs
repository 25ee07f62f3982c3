//! Independent oracles shared by the integration tests: a loop-only forward
//! pass that counts multiply-accumulates, a central finite-difference checker,
//! and a sort-based pruning plan.

#![allow(dead_code)]

use vtp_core::model::{GateSite, SitePosition};
use rand::Rng;
use vtp_core::prune::{PruneMask, PrunePlan, ScoreEntry};
use vtp_core::{Graph, Tensor, Var, VitModel};

pub const EPS: f64 = 1e-6;

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let r = 1.0 / (var + EPS).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * r * g + b)
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// `x · W + b` for one row, `W` stored `in × out`, counting MACs.
fn affine(x: &[f64], w: &Tensor, b: &Tensor, macs: &mut u64) -> Vec<f64> {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), n_in);
    let mut y = b.data().to_vec();
    for i in 0..n_in {
        for j in 0..n_out {
            y[j] += x[i] * w.data()[i * n_out + j];
        }
    }
    *macs += (n_in * n_out) as u64;
    y
}

/// Applies the site's gate (soft) or keeps the site's indices (hard).
fn site(model: &VitModel, b: usize, pos: SitePosition, x: Vec<f64>) -> Vec<f64> {
    let block = &model.blocks[b];
    match (&block.gates, &block.keep) {
        (Some(g), _) => x.iter().zip(g[pos.index()].data()).map(|(v, a)| v * a).collect(),
        (None, Some(k)) => k.get(pos).iter().map(|&i| x[i]).collect(),
        (None, None) => x,
    }
}

/// Logits for `images` (`b × c × H × W`) plus the multiply-accumulate count of
/// one image, computed with plain loops over the model's tensors.
pub fn reference_forward(model: &VitModel, images: &Tensor) -> (Vec<Vec<f64>>, u64) {
    let cfg = &model.config;
    let (s, c, p, d) = (cfg.image_size, cfg.in_channels, cfg.patch_size, cfg.embed_dim);
    let grid = s / p;
    let n = grid * grid + 1;
    let dh = d / cfg.num_heads;
    let batch = images.shape()[0];
    let px = |b: usize, ch: usize, y: usize, x: usize| images.data()[((b * c + ch) * s + y) * s + x];
    let mut all_logits = Vec::new();
    let mut macs_first = 0;
    for b in 0..batch {
        let mut macs = 0u64;
        let mut tokens: Vec<Vec<f64>> = Vec::with_capacity(n);
        let cls: Vec<f64> = model.cls_token.data().to_vec();
        tokens.push(cls);
        for gy in 0..grid {
            for gx in 0..grid {
                let mut patch = Vec::with_capacity(p * p * c);
                for py in 0..p {
                    for pxx in 0..p {
                        for ch in 0..c {
                            patch.push(px(b, ch, gy * p + py, gx * p + pxx));
                        }
                    }
                }
                tokens.push(affine(&patch, &model.patch_embed.weight, &model.patch_embed.bias, &mut macs));
            }
        }
        for (t, tok) in tokens.iter_mut().enumerate() {
            for j in 0..d {
                tok[j] += model.pos_embed.data()[t * d + j];
            }
        }

        for (bi, blk) in model.blocks.iter().enumerate() {
            let mut q = Vec::new();
            let mut k = Vec::new();
            let mut v = Vec::new();
            for tok in &tokens {
                let h = layer_norm(tok, blk.norm1.gain.data(), blk.norm1.bias.data());
                let h = site(model, bi, SitePosition::QkvIn, h);
                q.push(affine(&h, &blk.q.weight, &blk.q.bias, &mut macs));
                k.push(affine(&h, &blk.k.weight, &blk.k.bias, &mut macs));
                v.push(affine(&h, &blk.v.weight, &blk.v.bias, &mut macs));
            }
            // head owning each value column
            let v_cols: Vec<usize> = match &blk.keep {
                Some(keep) => keep.attn_out.clone(),
                None => (0..d).collect(),
            };
            let vw = v_cols.len();
            let mut probs = vec![vec![vec![0.0; n]; n]; cfg.num_heads];
            for (h, ph) in probs.iter_mut().enumerate() {
                for i in 0..n {
                    let mut row = vec![0.0; n];
                    for j in 0..n {
                        let mut dot = 0.0;
                        for e in h * dh..(h + 1) * dh {
                            dot += q[i][e] * k[j][e];
                        }
                        row[j] = dot / (dh as f64).sqrt();
                    }
                    macs += (n * dh) as u64;
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|r| (r - m).exp()).sum();
                    for j in 0..n {
                        ph[i][j] = (row[j] - m).exp() / z;
                    }
                }
            }
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let mut a = vec![0.0; vw];
                for (col, &orig) in v_cols.iter().enumerate() {
                    let h = orig / dh;
                    for j in 0..n {
                        a[col] += probs[h][i][j] * v[j][col];
                    }
                }
                macs += (n * vw) as u64;
                let a = match &blk.keep {
                    Some(_) => a,
                    None => site(model, bi, SitePosition::AttnOut, a),
                };
                let o = affine(&a, &blk.out.weight, &blk.out.bias, &mut macs);
                let y: Vec<f64> = tokens[i].iter().zip(&o).map(|(x, o)| x + o).collect();

                let h = layer_norm(&y, blk.norm2.gain.data(), blk.norm2.bias.data());
                let h = site(model, bi, SitePosition::MlpIn, h);
                let u: Vec<f64> = affine(&h, &blk.fc1.weight, &blk.fc1.bias, &mut macs)
                    .into_iter()
                    .map(gelu)
                    .collect();
                let u = match &blk.keep {
                    Some(_) => u,
                    None => site(model, bi, SitePosition::MlpHidden, u),
                };
                let f = affine(&u, &blk.fc2.weight, &blk.fc2.bias, &mut macs);
                next.push(y.iter().zip(&f).map(|(y, f)| y + f).collect());
            }
            tokens = next;
        }
        let h = layer_norm(&tokens[0], model.norm.gain.data(), model.norm.bias.data());
        all_logits.push(affine(&h, &model.head.weight, &model.head.bias, &mut macs));
        if b == 0 {
            macs_first = macs;
        }
    }
    (all_logits, macs_first)
}

/// Normwise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`, for every element of every input. Returns the
/// worst per-input relative error.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars);
        g.value(out)[0]
    };
    let mut g = Graph::new();
    let ts: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; ts[i].len()]);
        let mut numeric = vec![0.0; ts[i].len()];
        let mut work = ts.clone();
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[e] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[e] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Random score multiset laid out over `sites`.
pub fn synthetic_scores(rng: &mut rand_chacha::ChaCha8Rng, sites: &[(GateSite, usize)]) -> Vec<ScoreEntry> {
    // a third of the multisets draw from a handful of values to force ties
    let coarse = rng.gen_bool(0.33);
    let skew = rng.gen_bool(0.25);
    let mut out = Vec::new();
    for (k, &(site, dim)) in sites.iter().enumerate() {
        for index in 0..dim {
            let mut m = if coarse {
                rng.gen_range(0..5) as f64 * 0.25
            } else {
                rng.gen_range(0.0..2.0)
            };
            // one site far below the rest exercises floor protection
            if skew && k == 0 {
                m *= 1e-3;
            }
            out.push(ScoreEntry {
                site,
                index,
                magnitude: m,
            });
        }
    }
    out
}

/// Plan from a full sort by `(magnitude, flat position)`: the first
/// `floor(rate · N)` entries are pruned, then any site left empty keeps its
/// largest (earliest on ties) entry.
pub fn sorted_plan(scores: &[ScoreEntry], sites: &[(GateSite, usize)], rate: f64) -> (PrunePlan, usize) {
    let n = scores.len();
    let count = (rate * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .magnitude
            .partial_cmp(&scores[b].magnitude)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut pruned = vec![false; n];
    for &i in &order[..count] {
        pruned[i] = true;
    }
    let mut masks = Vec::new();
    let mut protected = 0;
    let mut start = 0;
    for &(s, dim) in sites {
        let idx: Vec<usize> = (start..start + dim).collect();
        let mut keep: Vec<bool> = idx.iter().map(|&i| !pruned[i]).collect();
        if !keep.iter().any(|&k| k) {
            let mut best = 0;
            for (j, &i) in idx.iter().enumerate() {
                if scores[i].magnitude > scores[idx[best]].magnitude {
                    best = j;
                }
            }
            keep[best] = true;
            protected += 1;
        }
        masks.push(PruneMask::from_keep(s, keep));
        start += dim;
    }
    (PrunePlan::from_masks(masks), protected)
}

pub mod cases {
    //! Randomized gradient-check instances for every graph op and for the
    //! full gated transformer.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use vtp_core::graph::AttentionLayout;
    use vtp_core::prune::{apply_plan, PruneMask, PrunePlan};
    use vtp_core::{Graph, ModelConfig, Tensor, Var, VitModel};

    use super::{grad_check, rel_error};

    pub const H: f64 = 1e-5;
    pub const TOL_LINEAR: f64 = 1e-6;
    pub const TOL: f64 = 1e-4;

    pub struct CaseResult {
        pub name: &'static str,
        pub worst: f64,
        pub tol: f64,
    }

    pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    /// Entries bounded away from zero, where `|x|` is smooth.
    fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = rng.gen_range(0.1..1.5);
                if rng.gen::<bool>() { m } else { -m }
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    fn weighted(g: &mut Graph, y: Var, w: &Tensor) -> Var {
        let c = g.constant(w.clone());
        let m = g.mul(y, c).unwrap();
        g.sum(m)
    }

    fn run<F>(
        name: &'static str,
        tol: f64,
        instances: usize,
        seed: u64,
        mut make: F,
    ) -> CaseResult
    where
        F: FnMut(&mut ChaCha8Rng) -> f64,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let worst = (0..instances).map(|_| make(&mut rng)).fold(0.0, f64::max);
        CaseResult { name, worst, tol }
    }

    /// Every op, `instances` random draws each.
    pub fn op_cases(instances: usize) -> Vec<CaseResult> {
        let mut out = Vec::new();
        out.push(run("matmul", TOL_LINEAR, instances, 1, |r| {
            let (a, b, w) = (rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[4, 2], 1.0), rand_tensor(r, &[3, 2], 1.0));
            grad_check(&[a, b], H, |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                weighted(g, y, &w)
            })
        }));
        out.push(run("add_bias", TOL_LINEAR, instances, 2, |r| {
            let (x, b, w) = (rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[4], 1.0), rand_tensor(r, &[3, 4], 1.0));
            grad_check(&[x, b], H, |g, v| {
                let y = g.add_bias(v[0], v[1]).unwrap();
                weighted(g, y, &w)
            })
        }));
        out.push(run("add", TOL_LINEAR, instances, 3, |r| {
            let (a, b, w) = (rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[2, 3], 1.0));
            grad_check(&[a, b], H, |g, v| {
                let y = g.add(v[0], v[1]).unwrap();
                weighted(g, y, &w)
            })
        }));
        out.push(run("mul", TOL_LINEAR, instances, 4, |r| {
            let (a, b) = (rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[2, 3], 1.0));
            grad_check(&[a, b], H, |g, v| {
                let y = g.mul(v[0], v[1]).unwrap();
                g.sum(y)
            })
        }));
        out.push(run("scale", TOL_LINEAR, instances, 5, |r| {
            let (x, w) = (rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[2, 3], 1.0));
            let c = r.gen_range(-2.0..2.0);
            grad_check(&[x], H, |g, v| {
                let y = g.scale(v[0], c);
                weighted(g, y, &w)
            })
        }));
        out.push(run("sum", TOL_LINEAR, instances, 6, |r| {
            let x = rand_tensor(r, &[3, 5], 1.0);
            grad_check(&[x], H, |g, v| g.sum(v[0]))
        }));
        out.push(run("scale_columns", TOL_LINEAR, instances, 7, |r| {
            let (x, a, w) = (rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[4], 1.0), rand_tensor(r, &[3, 4], 1.0));
            grad_check(&[x, a], H, |g, v| {
                let y = g.scale_columns(v[0], v[1]).unwrap();
                weighted(g, y, &w)
            })
        }));
        out.push(run("gather_columns", TOL_LINEAR, instances, 8, |r| {
            let (x, w) = (rand_tensor(r, &[3, 5], 1.0), rand_tensor(r, &[3, 4], 1.0));
            grad_check(&[x], H, |g, v| {
                let y = g.gather_columns(v[0], &[4, 0, 2, 2]).unwrap();
                weighted(g, y, &w)
            })
        }));
        out.push(run("gather_rows", TOL_LINEAR, instances, 9, |r| {
            let (x, w) = (rand_tensor(r, &[4, 3], 1.0), rand_tensor(r, &[3, 3], 1.0));
            grad_check(&[x], H, |g, v| {
                let y = g.gather_rows(v[0], &[3, 1, 3]).unwrap();
                weighted(g, y, &w)
            })
        }));
        out.push(run("assemble_tokens", TOL_LINEAR, instances, 10, |r| {
            let (p, c, pos) = (rand_tensor(r, &[6, 4], 1.0), rand_tensor(r, &[4], 1.0), rand_tensor(r, &[4, 4], 1.0));
            let w = rand_tensor(r, &[8, 4], 1.0);
            grad_check(&[p, c, pos], H, |g, v| {
                let y = g.assemble_tokens(v[0], v[1], v[2], 2).unwrap();
                weighted(g, y, &w)
            })
        }));
        out.push(run("layer_norm", TOL, instances, 11, |r| {
            let (x, gain, bias) = (rand_tensor(r, &[3, 5], 2.0), rand_tensor(r, &[5], 1.5), rand_tensor(r, &[5], 1.0));
            let w = rand_tensor(r, &[3, 5], 1.0);
            grad_check(&[x, gain, bias], H, |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
                weighted(g, y, &w)
            })
        }));
        out.push(run("gelu", TOL, instances, 12, |r| {
            let (x, w) = (rand_tensor(r, &[3, 4], 3.0), rand_tensor(r, &[3, 4], 1.0));
            grad_check(&[x], H, |g, v| {
                let y = g.gelu(v[0]);
                weighted(g, y, &w)
            })
        }));
        out.push(run("softmax_rows", TOL, instances, 13, |r| {
            let (x, w) = (rand_tensor(r, &[3, 4], 3.0), rand_tensor(r, &[3, 4], 1.0));
            grad_check(&[x], H, |g, v| {
                let y = g.softmax_rows(v[0]).unwrap();
                weighted(g, y, &w)
            })
        }));
        out.push(run("attention", TOL, instances, 14, |r| {
            // uniform heads, then ragged value widths including an empty head
            let offsets = match r.gen_range(0..3) {
                0 => vec![0, 2, 4],
                1 => vec![0, 1, 4],
                _ => vec![0, 0, 3],
            };
            let vw = *offsets.last().unwrap();
            let (q, k) = (rand_tensor(r, &[6, 4], 1.5), rand_tensor(r, &[6, 4], 1.5));
            let (v, w) = (rand_tensor(r, &[6, vw], 1.0), rand_tensor(r, &[6, vw], 1.0));
            let layout = AttentionLayout {
                batch: 2,
                tokens: 3,
                head_dim: 2,
                v_offsets: offsets,
            };
            grad_check(&[q, k, v], H, |g, vars| {
                let y = g.attention(vars[0], vars[1], vars[2], layout.clone()).unwrap();
                weighted(g, y, &w)
            })
        }));
        out.push(run("cross_entropy", TOL, instances, 15, |r| {
            let x = rand_tensor(r, &[4, 3], 3.0);
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
            grad_check(&[x], H, |g, v| g.cross_entropy(v[0], &labels).unwrap())
        }));
        out.push(run("l1_penalty", TOL, instances, 16, |r| {
            let (a, b) = (away_from_zero(r, &[5]), away_from_zero(r, &[3]));
            let lambda = r.gen_range(0.01..1.0);
            grad_check(&[a, b], H, |g, v| g.l1_penalty(&[v[0], v[1]], lambda).unwrap())
        }));
        out
    }

    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            in_channels: 2,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            num_classes: 3,
        }
    }

    /// A model with every parameter redrawn at a scale where the
    /// nonlinearities matter, gates bounded away from zero.
    pub fn scrambled_model(rng: &mut ChaCha8Rng, config: &ModelConfig) -> VitModel {
        let mut m = VitModel::init(config, rng.gen()).unwrap();
        for (name, _, t) in m.params_mut() {
            let shape = t.shape().to_vec();
            let fresh = if name.contains(".gate.") {
                away_from_zero(rng, &shape)
            } else if name.ends_with("gain") {
                let mut x = rand_tensor(rng, &shape, 0.5);
                x.data_mut().iter_mut().for_each(|v| *v += 1.0);
                x
            } else {
                rand_tensor(rng, &shape, 0.4)
            };
            t.data_mut().copy_from_slice(fresh.data());
        }
        m
    }

    pub fn random_plan(rng: &mut ChaCha8Rng, config: &ModelConfig, keep_prob: f64) -> PrunePlan {
        let masks = config
            .sites()
            .into_iter()
            .map(|s| {
                let dim = config.site_dim(s.position);
                let mut keep: Vec<bool> = (0..dim).map(|_| rng.gen_bool(keep_prob)).collect();
                if !keep.iter().any(|&k| k) {
                    keep[rng.gen_range(0..dim)] = true;
                }
                PruneMask::from_keep(s, keep)
            })
            .collect();
        PrunePlan::from_masks(masks)
    }

    fn model_loss(model: &VitModel, images: &Tensor, labels: &[usize], lambda: f64) -> (Graph, vtp_core::model::Forward, Var) {
        let mut g = Graph::new();
        let f = model.forward(&mut g, images, model.mode()).unwrap();
        let mut loss = g.cross_entropy(f.logits, labels).unwrap();
        if lambda > 0.0 {
            let p = g.l1_penalty(&f.gates, lambda).unwrap();
            loss = g.add(loss, p).unwrap();
        }
        (g, f, loss)
    }

    /// Full-model loss (cross-entropy plus ℓ1 on the gates for soft models,
    /// cross-entropy alone for pruned ones) against central differences over
    /// every parameter. Instances alternate soft and pruned models.
    pub fn model_case(instances: usize) -> CaseResult {
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let soft = scrambled_model(&mut rng, &config);
            let (model, lambda) = if i % 2 == 0 {
                (soft, rng.gen_range(0.01..0.5))
            } else {
                let plan = random_plan(&mut rng, &config, 0.6);
                (apply_plan(&soft, &plan).unwrap(), 0.0)
            };
            let images = rand_tensor(&mut rng, &[2, 2, 8, 8], 1.0);
            let labels = [rng.gen_range(0..3), rng.gen_range(0..3)];

            let (g, f, loss) = model_loss(&model, &images, &labels, lambda);
            let grads = g.backward(loss).unwrap();
            let mut analytic = Vec::new();
            for v in &f.params {
                analytic.extend_from_slice(grads.get(*v).unwrap());
            }
            let mut numeric = Vec::with_capacity(analytic.len());
            let mut work = model.clone();
            let value = |m: &VitModel| {
                let (g, _, loss) = model_loss(m, &images, &labels, lambda);
                g.value(loss)[0]
            };
            let count = work.params().len();
            for p in 0..count {
                let len = work.params()[p].2.len();
                for e in 0..len {
                    let orig = work.params()[p].2.data()[e];
                    work.params_mut()[p].2.data_mut()[e] = orig + H;
                    let up = value(&work);
                    work.params_mut()[p].2.data_mut()[e] = orig - H;
                    let down = value(&work);
                    work.params_mut()[p].2.data_mut()[e] = orig;
                    numeric.push((up - down) / (2.0 * H));
                }
            }
            worst = worst.max(rel_error(&analytic, &numeric));
        }
        CaseResult {
            name: "gated transformer loss",
            worst,
            tol: TOL,
        }
    }
}
