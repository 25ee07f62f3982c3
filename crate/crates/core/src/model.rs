//! Pre-norm vision transformer with dimension-importance gates.
//!
//! Each block carries four gate sites. In soft mode the gates scale feature
//! columns; after pruning the gates are folded into sliced projection weights and
//! the block runs gate-free on narrower matrices.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{AttentionLayout, Graph, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl ModelConfig {
    /// DeiT-Base: 12 layers, 12 heads, width 768, 16-pixel patches at 224².
    pub fn deit_b() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_ratio: 4.0,
            num_classes: 1000,
        }
    }

    /// ViT-B/16 evaluated at 384².
    pub fn vit_b16() -> Self {
        Self {
            image_size: 384,
            ..Self::deit_b()
        }
    }

    /// Small configuration used by unit tests and the `toy` analyzer preset.
    pub fn toy() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            mlp_ratio: 4.0,
            num_classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.in_channels == 0 || self.num_layers == 0 || self.num_classes == 0 {
            return fail("in_channels, num_layers and num_classes must be positive".into());
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        let hidden = self.mlp_ratio * self.embed_dim as f64;
        if !(hidden >= 1.0) || libm::trunc(hidden) != hidden {
            return fail(format!(
                "mlp_ratio {} times embed_dim {} must be a positive integer",
                self.mlp_ratio, self.embed_dim
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64) as usize
    }

    pub fn site_dim(&self, position: SitePosition) -> usize {
        match position {
            SitePosition::MlpHidden => self.mlp_hidden(),
            _ => self.embed_dim,
        }
    }

    /// Every gate site in `(block, position)` order.
    pub fn sites(&self) -> Vec<GateSite> {
        (0..self.num_layers)
            .flat_map(|block| SitePosition::ALL.map(|position| GateSite { block, position }))
            .collect()
    }
}

/// Where inside a block a gate applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SitePosition {
    /// Normed block input feeding the query/key/value projections.
    QkvIn,
    /// Attention output feeding the output projection.
    AttnOut,
    /// Normed residual feeding the first MLP projection.
    MlpIn,
    /// Activated MLP hidden layer feeding the second projection.
    MlpHidden,
}

impl SitePosition {
    pub const ALL: [SitePosition; 4] = [
        SitePosition::QkvIn,
        SitePosition::AttnOut,
        SitePosition::MlpIn,
        SitePosition::MlpHidden,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SitePosition::QkvIn => "qkv_in",
            SitePosition::AttnOut => "attn_out",
            SitePosition::MlpIn => "mlp_in",
            SitePosition::MlpHidden => "mlp_hidden",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GateSite {
    pub block: usize,
    pub position: SitePosition,
}

impl fmt::Display for GateSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.position.name())
    }
}

/// Forward flavour: real-valued gates, or folded gates with sliced weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Soft,
    Hard,
}

/// What kind of scalar a parameter holds; drives weight-decay selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
    Gate,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

/// Affine projection `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: trunc_normal(rng, &[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]).with_requires_grad(true),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn init(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], 1.0).with_requires_grad(true),
            bias: Tensor::zeros(&[d]).with_requires_grad(true),
        }
    }
}

/// Kept feature indices for each site of a pruned block, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockKeep {
    pub qkv_in: Vec<usize>,
    pub attn_out: Vec<usize>,
    pub mlp_in: Vec<usize>,
    pub mlp_hidden: Vec<usize>,
}

impl BlockKeep {
    pub fn get(&self, position: SitePosition) -> &[usize] {
        match position {
            SitePosition::QkvIn => &self.qkv_in,
            SitePosition::AttnOut => &self.attn_out,
            SitePosition::MlpIn => &self.mlp_in,
            SitePosition::MlpHidden => &self.mlp_hidden,
        }
    }

    pub fn full(config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        Self {
            qkv_in: (0..d).collect(),
            attn_out: (0..d).collect(),
            mlp_in: (0..d).collect(),
            mlp_hidden: (0..config.mlp_hidden()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    /// Importance scores indexed by [`SitePosition::index`]; absent once pruned.
    pub gates: Option<[Tensor; 4]>,
    /// Kept indices per site; present only after pruning.
    pub keep: Option<BlockKeep>,
}

/// Graph handles for one block's parameters.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub norm1: (Var, Var),
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub out: (Var, Var),
    pub norm2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
    pub gates: Option<[Var; 4]>,
}

fn bind_linear(g: &mut Graph, l: &Linear, order: &mut Vec<Var>) -> (Var, Var) {
    let w = g.leaf(&l.weight);
    let b = g.leaf(&l.bias);
    order.extend([w, b]);
    (w, b)
}

fn bind_norm(g: &mut Graph, n: &LayerNormParams, order: &mut Vec<Var>) -> (Var, Var) {
    let w = g.leaf(&n.gain);
    let b = g.leaf(&n.bias);
    order.extend([w, b]);
    (w, b)
}

impl Block {
    fn init(rng: &mut ChaCha8Rng, config: &ModelConfig) -> Self {
        let (d, hidden) = (config.embed_dim, config.mlp_hidden());
        Self {
            norm1: LayerNormParams::init(d),
            q: Linear::init(rng, d, d),
            k: Linear::init(rng, d, d),
            v: Linear::init(rng, d, d),
            out: Linear::init(rng, d, d),
            norm2: LayerNormParams::init(d),
            fc1: Linear::init(rng, d, hidden),
            fc2: Linear::init(rng, hidden, d),
            gates: Some(SitePosition::ALL.map(|p| {
                Tensor::full(&[config.site_dim(p)], 1.0).with_requires_grad(true)
            })),
            keep: None,
        }
    }

    /// Records the block's parameters on `g`, appending them to `order` in
    /// [`VitModel::params`] order.
    pub fn bind(&self, g: &mut Graph, order: &mut Vec<Var>) -> BlockVars {
        let norm1 = bind_norm(g, &self.norm1, order);
        let q = bind_linear(g, &self.q, order);
        let k = bind_linear(g, &self.k, order);
        let v = bind_linear(g, &self.v, order);
        let out = bind_linear(g, &self.out, order);
        let norm2 = bind_norm(g, &self.norm2, order);
        let fc1 = bind_linear(g, &self.fc1, order);
        let fc2 = bind_linear(g, &self.fc2, order);
        let gates = self.gates.as_ref().map(|gs| {
            let vars = [0, 1, 2, 3].map(|i| g.leaf(&gs[i]));
            order.extend(vars);
            vars
        });
        BlockVars {
            norm1,
            q,
            k,
            v,
            out,
            norm2,
            fc1,
            fc2,
            gates,
        }
    }

    /// Head partition of the value projection's output columns.
    pub fn value_offsets(&self, config: &ModelConfig) -> Vec<usize> {
        let dh = config.head_dim();
        let mut offsets = vec![0; config.num_heads + 1];
        match &self.keep {
            None => {
                for h in 0..config.num_heads {
                    offsets[h + 1] = offsets[h] + dh;
                }
            }
            Some(keep) => {
                for &j in &keep.attn_out {
                    offsets[j / dh + 1] += 1;
                }
                for h in 0..config.num_heads {
                    offsets[h + 1] += offsets[h];
                }
            }
        }
        offsets
    }
}

fn linear(g: &mut Graph, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// One transformer block on a `batch·tokens × d` residual stream.
///
/// Soft mode multiplies by whichever gates the block carries (none for a plain
/// block). Hard mode requires a pruned block and gathers the kept input columns
/// before each sliced projection.
pub fn block_forward(
    g: &mut Graph,
    x: Var,
    block: &Block,
    vars: &BlockVars,
    config: &ModelConfig,
    batch: usize,
    mode: Mode,
) -> Result<Var> {
    let keep = match (mode, &block.keep) {
        (Mode::Hard, None) => {
            return Err(Error::State("hard forward on a block without a prune plan".into()))
        }
        (Mode::Soft, Some(_)) => {
            return Err(Error::State("soft forward on a pruned block".into()))
        }
        (_, keep) => keep.as_ref(),
    };
    let gate = |g: &mut Graph, x: Var, pos: SitePosition| -> Result<Var> {
        match &vars.gates {
            Some(gs) => g.scale_columns(x, gs[pos.index()]),
            None => Ok(x),
        }
    };

    let h = g.layer_norm(x, vars.norm1.0, vars.norm1.1, LAYER_NORM_EPS)?;
    let h = match keep {
        Some(k) => g.gather_columns(h, &k.qkv_in)?,
        None => gate(g, h, SitePosition::QkvIn)?,
    };
    let q = linear(g, h, vars.q)?;
    let k = linear(g, h, vars.k)?;
    let v = linear(g, h, vars.v)?;
    let layout = AttentionLayout {
        batch,
        tokens: config.tokens(),
        head_dim: config.head_dim(),
        v_offsets: block.value_offsets(config),
    };
    let a = g.attention(q, k, v, layout)?;
    let a = match keep {
        Some(_) => a,
        None => gate(g, a, SitePosition::AttnOut)?,
    };
    let a = linear(g, a, vars.out)?;
    let y = g.add(x, a)?;

    let h = g.layer_norm(y, vars.norm2.0, vars.norm2.1, LAYER_NORM_EPS)?;
    let h = match keep {
        Some(k) => g.gather_columns(h, &k.mlp_in)?,
        None => gate(g, h, SitePosition::MlpIn)?,
    };
    let u = linear(g, h, vars.fc1)?;
    let u = g.gelu(u);
    let u = match keep {
        Some(_) => u,
        None => gate(g, u, SitePosition::MlpHidden)?,
    };
    let u = linear(g, u, vars.fc2)?;
    g.add(y, u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitModel {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNormParams,
    pub head: Linear,
}

/// Result of recording a forward pass on a graph.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Parameter handles in [`VitModel::params`] order.
    pub params: Vec<Var>,
    /// Gate handles in site order (empty for pruned models).
    pub gates: Vec<Var>,
}

macro_rules! visit_params {
    ($model:ident, $f:ident, $($m:tt)?) => {{
        use ParamKind::*;
        $f(String::from("patch_embed.weight"), Weight, & $($m)? $model.patch_embed.weight);
        $f(String::from("patch_embed.bias"), Bias, & $($m)? $model.patch_embed.bias);
        $f(String::from("cls_token"), Embedding, & $($m)? $model.cls_token);
        $f(String::from("pos_embed"), Embedding, & $($m)? $model.pos_embed);
        for (i, b) in (& $($m)? $model.blocks).into_iter().enumerate() {
            $f(format!("blocks.{i}.norm1.gain"), Norm, & $($m)? b.norm1.gain);
            $f(format!("blocks.{i}.norm1.bias"), Norm, & $($m)? b.norm1.bias);
            $f(format!("blocks.{i}.q.weight"), Weight, & $($m)? b.q.weight);
            $f(format!("blocks.{i}.q.bias"), Bias, & $($m)? b.q.bias);
            $f(format!("blocks.{i}.k.weight"), Weight, & $($m)? b.k.weight);
            $f(format!("blocks.{i}.k.bias"), Bias, & $($m)? b.k.bias);
            $f(format!("blocks.{i}.v.weight"), Weight, & $($m)? b.v.weight);
            $f(format!("blocks.{i}.v.bias"), Bias, & $($m)? b.v.bias);
            $f(format!("blocks.{i}.out.weight"), Weight, & $($m)? b.out.weight);
            $f(format!("blocks.{i}.out.bias"), Bias, & $($m)? b.out.bias);
            $f(format!("blocks.{i}.norm2.gain"), Norm, & $($m)? b.norm2.gain);
            $f(format!("blocks.{i}.norm2.bias"), Norm, & $($m)? b.norm2.bias);
            $f(format!("blocks.{i}.fc1.weight"), Weight, & $($m)? b.fc1.weight);
            $f(format!("blocks.{i}.fc1.bias"), Bias, & $($m)? b.fc1.bias);
            $f(format!("blocks.{i}.fc2.weight"), Weight, & $($m)? b.fc2.weight);
            $f(format!("blocks.{i}.fc2.bias"), Bias, & $($m)? b.fc2.bias);
            if let Some(gates) = & $($m)? b.gates {
                for (pos, t) in SitePosition::ALL.into_iter().zip(gates) {
                    $f(format!("blocks.{i}.gate.{}", pos.name()), Gate, t);
                }
            }
        }
        $f(String::from("norm.gain"), Norm, & $($m)? $model.norm.gain);
        $f(String::from("norm.bias"), Norm, & $($m)? $model.norm.bias);
        $f(String::from("head.weight"), Weight, & $($m)? $model.head.weight);
        $f(String::from("head.bias"), Bias, & $($m)? $model.head.bias);
    }};
}

fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            // Box-Muller, rejecting draws beyond two standard deviations
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            let z = libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2);
            if z.abs() <= 2.0 {
                break z * INIT_STD;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap().with_requires_grad(true)
}

/// Rearranges `b × c × H × W` images into `b·patches × patch_dim` rows.
///
/// Patches run row-major over the patch grid; inside a patch the feature index
/// is `(row·patch + col)·channels + channel`.
pub fn patchify(config: &ModelConfig, images: &Tensor) -> Result<Tensor> {
    let s = config.image_size;
    let c = config.in_channels;
    let p = config.patch_size;
    let batch = match *images.shape() {
        [b, ch, h, w] if ch == c && h == s && w == s => b,
        ref other => {
            return Err(Error::Dimension(format!(
                "images have shape {other:?}, expected [batch, {c}, {s}, {s}]"
            )))
        }
    };
    let grid = s / p;
    let pd = config.patch_dim();
    let src = images.data();
    let mut out = vec![0.0; batch * grid * grid * pd];
    for b in 0..batch {
        for gy in 0..grid {
            for gx in 0..grid {
                let row = &mut out[((b * grid + gy) * grid + gx) * pd..][..pd];
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            let (y, x) = (gy * p + py, gx * p + px);
                            row[(py * p + px) * c + ch] = src[((b * c + ch) * s + y) * s + x];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[batch * grid * grid, pd], out)
}

impl VitModel {
    /// Fresh soft model: truncated-normal weights (σ = 0.02), zero biases,
    /// unit norm gains, all gates at exactly 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let patch_embed = Linear::init(&mut rng, config.patch_dim(), d);
        let cls_token = trunc_normal(&mut rng, &[d]);
        let pos_embed = trunc_normal(&mut rng, &[config.tokens(), d]);
        let blocks = (0..config.num_layers)
            .map(|_| Block::init(&mut rng, config))
            .collect();
        let head = Linear::init(&mut rng, d, config.num_classes);
        Ok(Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNormParams::init(d),
            head,
        })
    }

    pub fn is_pruned(&self) -> bool {
        self.blocks.iter().any(|b| b.keep.is_some())
    }

    /// The mode this model's state supports.
    pub fn mode(&self) -> Mode {
        if self.is_pruned() {
            Mode::Hard
        } else {
            Mode::Soft
        }
    }

    /// All learnable tensors with stable names, in a fixed order.
    pub fn params(&self) -> Vec<(String, ParamKind, &Tensor)> {
        let mut out = Vec::new();
        let mut f = |n, k, t| out.push((n, k, t));
        visit_params!(self, f,);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, ParamKind, &mut Tensor)> {
        let mut out = Vec::new();
        let mut f = |n, k, t| out.push((n, k, t));
        visit_params!(self, f, mut);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn gate(&self, site: GateSite) -> Option<&Tensor> {
        self.blocks
            .get(site.block)?
            .gates
            .as_ref()
            .map(|g| &g[site.position.index()])
    }

    pub fn gate_mut(&mut self, site: GateSite) -> Option<&mut Tensor> {
        self.blocks
            .get_mut(site.block)?
            .gates
            .as_mut()
            .map(|g| &mut g[site.position.index()])
    }

    /// Gate tensors in site order; empty for pruned models.
    pub fn gates(&self) -> Vec<(GateSite, &Tensor)> {
        self.config
            .sites()
            .into_iter()
            .filter_map(|s| self.gate(s).map(|t| (s, t)))
            .collect()
    }

    /// Kept indices at a site; the full range for unpruned blocks.
    pub fn keep_indices(&self, site: GateSite) -> Vec<usize> {
        match &self.blocks[site.block].keep {
            Some(k) => k.get(site.position).to_vec(),
            None => (0..self.config.site_dim(site.position)).collect(),
        }
    }

    /// Records the forward pass for `images` (`b × c × H × W`) on `g`.
    pub fn forward(&self, g: &mut Graph, images: &Tensor, mode: Mode) -> Result<Forward> {
        let patches = patchify(&self.config, images)?;
        let batch = images.shape()[0];
        self.forward_patches(g, patches, batch, mode)
    }

    /// Like [`forward`](Self::forward) with images already patchified.
    pub fn forward_patches(&self, g: &mut Graph, patches: Tensor, batch: usize, mode: Mode) -> Result<Forward> {
        match (mode, self.is_pruned()) {
            (Mode::Hard, false) => {
                return Err(Error::State("hard forward requires a pruned model".into()))
            }
            (Mode::Soft, true) => {
                return Err(Error::State("soft forward on a pruned model".into()))
            }
            _ => {}
        }
        let cfg = &self.config;
        if patches.shape() != [batch * cfg.num_patches(), cfg.patch_dim()] {
            return Err(Error::Dimension(format!(
                "patches {:?} do not match batch {batch} of {} patches x {}",
                patches.shape(),
                cfg.num_patches(),
                cfg.patch_dim()
            )));
        }
        let mut order = Vec::new();
        let pe = bind_linear(g, &self.patch_embed, &mut order);
        let cls = g.leaf(&self.cls_token);
        let pos = g.leaf(&self.pos_embed);
        order.extend([cls, pos]);
        let block_vars: Vec<BlockVars> = self.blocks.iter().map(|b| b.bind(g, &mut order)).collect();
        let norm = bind_norm(g, &self.norm, &mut order);
        let head = bind_linear(g, &self.head, &mut order);

        let input = g.constant(patches);
        let emb = linear(g, input, pe)?;
        let mut x = g.assemble_tokens(emb, cls, pos, batch)?;
        for (block, vars) in self.blocks.iter().zip(&block_vars) {
            x = block_forward(g, x, block, vars, cfg, batch, mode)?;
        }
        let x = g.layer_norm(x, norm.0, norm.1, LAYER_NORM_EPS)?;
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * cfg.tokens()).collect();
        let x = g.gather_rows(x, &cls_rows)?;
        let logits = linear(g, x, head)?;
        let gates = block_vars
            .iter()
            .filter_map(|b| b.gates)
            .flatten()
            .collect();
        Ok(Forward {
            logits,
            params: order,
            gates,
        })
    }

    /// Logits for a batch, without keeping the graph.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, images, self.mode())?;
        Ok(g.tensor(f.logits))
    }

    /// Copies gradients from a backward sweep into every parameter's slot.
    pub fn store_grads(&mut self, grads: &crate::Gradients, forward: &Forward) -> Result<()> {
        let params = self.params_mut();
        if params.len() != forward.params.len() {
            return Err(Error::Usage("forward record does not belong to this model".into()));
        }
        for ((_, _, t), v) in params.into_iter().zip(&forward.params) {
            grads.write_into(*v, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for (_, _, t) in self.params_mut() {
            t.zero_grad();
        }
    }
}
