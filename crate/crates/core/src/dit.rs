//! Spatio-temporal transformer denoiser with joint text/video self-attention.
//!
//! Video tokens are 2×2 spatial patches of the channel-concatenated noisy and
//! conditioning latents, one per latent frame, in `(t', h', w')` raster order.
//! Text tokens come first in the joint sequence. Every block is pre-norm:
//! `x + attn(ln(x))` followed by `x + mlp(ln(x))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{join, Binder, LayerNorm, Linear, Module};
use crate::tensor::Tensor;

pub const PATCH: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct DitConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub n_text: usize,
    pub mlp_ratio: usize,
    pub latent_channels: usize,
    /// Largest valid timestep; inputs must satisfy `1 <= t <= t_train`.
    pub t_train: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self { d_model: 64, layers: 3, heads: 2, n_text: 4, mlp_ratio: 4, latent_channels: 4, t_train: 50 }
    }
}

/// Text conditioning: one row per caption word (hashed), padded with null rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEmbedding {
    pub tokens: Tensor,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl CaptionEmbedding {
    /// Lowercased alphanumeric words of `caption`, each mapped to a Gaussian
    /// row seeded by its FNV-1a hash. The null token is the zero row. Words
    /// beyond `n_text` are dropped.
    pub fn new(caption: &str, n_text: usize, d_model: usize) -> Self {
        let lower = caption.to_lowercase();
        let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).take(n_text).collect();
        let mut data = vec![0.0; n_text * d_model];
        for (i, w) in words.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(w.as_bytes()));
            let row = Tensor::randn(&[d_model], 1.0, &mut rng);
            data[i * d_model..(i + 1) * d_model].copy_from_slice(row.data());
        }
        Self { tokens: Tensor::new(&[n_text, d_model], data).expect("n_text, d_model > 0") }
    }
}

/// Token counts of a joint sequence; text tokens precede video tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_text: usize,
    pub n_video: usize,
}

/// One layer's captured attention.
#[derive(Debug, Clone, Copy)]
pub struct LayerAttention<'t> {
    /// Softmax weights `[heads, N, N]`.
    pub weights: Var<'t>,
    /// Head-merged `A · V` before the output projection, `[N, d_model]`.
    pub output: Var<'t>,
    /// Per-head value projections `[heads, N, d_head]`.
    pub values: Var<'t>,
}

/// Attention captured across all layers of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord<'t> {
    pub layers: Vec<LayerAttention<'t>>,
    pub layout: Option<TokenLayout>,
}

impl<'t> AttentionRecord<'t> {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Worst absolute deviation of any row sum of any `A` from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for l in &self.layers {
            l.weights.with_value(|a| {
                let n = *a.shape().last().unwrap();
                for row in a.data().chunks(n) {
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            });
        }
        worst
    }

    /// Worst absolute deviation between captured `H` and an explicit loop `A · V`.
    pub fn max_output_error(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                let h = l.output.value();
                let av = merged_product(&l.weights.value(), &l.values.value());
                h.data().iter().zip(av.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

/// Loop oracle for the head-merged product: `out[n, h·dh + j] = Σ_m A[h,n,m] V[h,m,j]`.
fn merged_product(a: &Tensor, v: &Tensor) -> Tensor {
    let (heads, n, dh) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let mut out = vec![0.0; n * heads * dh];
    for h in 0..heads {
        for r in 0..n {
            for j in 0..dh {
                let mut s = 0.0;
                for m in 0..n {
                    s += a.data()[(h * n + r) * n + m] * v.data()[(h * n + m) * dh + j];
                }
                out[r * heads * dh + h * dh + j] = s;
            }
        }
    }
    Tensor::new(&[n, heads * dh], out).expect("consistent extents")
}

/// The video-rows × text-columns sub-block of every layer's `A`, each
/// `[heads, n_video, n_text]`.
pub fn cross_block_mask<'t>(rec: &AttentionRecord<'t>) -> Result<Vec<Var<'t>>> {
    let layout = rec.layout.ok_or_else(|| Error::Usage("attention record has no token layout".into()))?;
    rec.layers.iter().map(|l| l.weights.narrow(1, layout.n_text, layout.n_video)?.narrow(2, 0, layout.n_text)).collect()
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(d_model: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!("d_model {d_model} is not divisible into {heads} heads")));
        }
        Ok(Self { qkv: Linear::new(d_model, 3 * d_model, 1.0, rng), proj: Linear::new(d_model, d_model, 1.0, rng), heads })
    }

    /// Attends over `x: [N, d_model]`; returns the projected output and the
    /// captured weights and head-merged values.
    pub fn forward<'t>(&self, p: &Binder<'t>, x: Var<'t>) -> Result<(Var<'t>, LayerAttention<'t>)> {
        let s = x.shape();
        let (n, d) = (s[0], s[1]);
        if d % self.heads != 0 {
            return Err(Error::Config(format!("d_model {d} is not divisible into {} heads", self.heads)));
        }
        let dh = d / self.heads;
        let qkv = self.qkv.forward(p, x)?.reshape(&[n, 3, self.heads, dh])?.permute(&[1, 2, 0, 3])?;
        let part = |i| -> Result<Var<'t>> { qkv.narrow(0, i, 1)?.reshape(&[self.heads, n, dh]) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let weights = q.matmul_nt(k)?.scale(1.0 / (dh as f64).sqrt()).softmax_lastdim()?;
        let output = weights.matmul(v)?.permute(&[1, 0, 2])?.reshape(&[n, d])?;
        let rec = LayerAttention { weights, output, values: v };
        debug_assert!(
            AttentionRecord { layers: vec![rec], layout: None }.max_output_error() < 1e-10,
            "captured attention output differs from A·V"
        );
        Ok((self.proj.forward(p, output)?, rec))
    }
}

impl Module for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn forward<'t>(&self, p: &Binder<'t>, x: Var<'t>) -> Result<(Var<'t>, LayerAttention<'t>)> {
        let (a, rec) = self.attn.forward(p, self.ln1.forward(p, x)?)?;
        let x = x.add(a)?;
        let m = self.fc1.forward(p, self.ln2.forward(p, x)?)?.silu();
        Ok((x.add(self.fc2.forward(p, m)?)?, rec))
    }
}

impl Module for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Noise-prediction transformer.
#[derive(Debug, Clone)]
pub struct Dit {
    pub config: DitConfig,
    patch_in: Linear,
    text_proj: Linear,
    text_pos: Tensor,
    time1: Linear,
    time2: Linear,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    head: Linear,
    trained: bool,
}

/// Sinusoidal features of a scalar position: `[sin(p·w_k), cos(p·w_k)]` with
/// `w_k = 10000^(−k/(dim/2))`.
pub fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (position * w).sin();
        out[half + k] = (position * w).cos();
    }
    out
}

impl Dit {
    pub fn new(config: DitConfig, seed: u64) -> Result<Self> {
        let d = config.d_model;
        if !d.is_multiple_of(8) {
            return Err(Error::Config(format!("d_model must be a multiple of 8, got {d}")));
        }
        if config.layers == 0 || config.n_text == 0 || config.t_train < 1 {
            return Err(Error::Config("layers, n_text and t_train must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = 2 * config.latent_channels * PATCH * PATCH;
        let patch_in = Linear::new(feat, d, 1.0, &mut rng);
        let text_proj = Linear::new(d, d, 1.0, &mut rng);
        let text_pos = Tensor::randn(&[config.n_text, d], 0.1, &mut rng);
        let time1 = Linear::new(d, d, 1.0, &mut rng);
        let time2 = Linear::new(d, d, 1.0, &mut rng);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(Block {
                ln1: LayerNorm::new(d),
                attn: MultiHeadAttention::new(d, config.heads, &mut rng)?,
                ln2: LayerNorm::new(d),
                fc1: Linear::new(d, config.mlp_ratio * d, 1.0, &mut rng),
                fc2: Linear::new(config.mlp_ratio * d, d, 0.5, &mut rng),
            });
        }
        Ok(Self {
            ln_out: LayerNorm::new(d),
            head: Linear::zeros(d, config.latent_channels * PATCH * PATCH),
            config,
            patch_in,
            text_proj,
            text_pos,
            time1,
            time2,
            blocks,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub(crate) fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        crate::nn::named_tensors(self, "dit")
    }

    /// Rebuilds a trained denoiser from checkpoint tensors.
    pub fn from_named(config: DitConfig, named: &std::collections::BTreeMap<String, Tensor>) -> Result<Self> {
        let mut dit = Dit::new(config, 0)?;
        crate::nn::load_named(&mut dit, "dit", named)?;
        dit.trained = true;
        Ok(dit)
    }

    pub fn caption(&self, caption: &str) -> CaptionEmbedding {
        CaptionEmbedding::new(caption, self.config.n_text, self.config.d_model)
    }

    /// Video position table `[n, d_model]` for the `(t', h', w')` grid: a
    /// quarter of the features encode `t'`, the rest split between rows and
    /// columns.
    pub fn video_positions(&self, grid: [usize; 3]) -> Tensor {
        let d = self.config.d_model;
        let dt = d / 4;
        let dh = (d - dt) / 2;
        let dw = d - dt - dh;
        let mut data = Vec::with_capacity(grid.iter().product::<usize>() * d);
        for t in 0..grid[0] {
            for i in 0..grid[1] {
                for j in 0..grid[2] {
                    data.extend(sinusoid(t as f64, dt));
                    data.extend(sinusoid(i as f64, dh));
                    data.extend(sinusoid(j as f64, dw));
                }
            }
        }
        Tensor::new(&[grid.iter().product(), d], data).expect("positive grid")
    }

    fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.t_train {
            return Err(Error::Usage(format!("timestep {t} outside 1..={}", self.config.t_train)));
        }
        Ok(())
    }

    /// Runs the transformer on already-patchified video features
    /// `[n_video, 2·C·4]` with their position table; returns per-video-token
    /// outputs `[n_video, C·4]` and the attention record.
    pub fn forward_tokens<'t>(
        &self,
        p: &Binder<'t>,
        features: Var<'t>,
        positions: &Tensor,
        caption: &CaptionEmbedding,
        t: usize,
    ) -> Result<(Var<'t>, AttentionRecord<'t>)> {
        self.check_timestep(t)?;
        let d = self.config.d_model;
        let n_video = features.shape()[0];
        if positions.shape() != [n_video, d] {
            return Err(Error::dim("forward_tokens", positions.shape(), &[n_video, d]));
        }
        if caption.tokens.shape() != [self.config.n_text, d] {
            return Err(Error::dim("forward_tokens", caption.tokens.shape(), &[self.config.n_text, d]));
        }
        let temb = Tensor::new(&[1, d], sinusoid(t as f64, d))?;
        let temb = self.time1.forward(p, p.constant(temb))?.silu();
        let temb = self.time2.forward(p, temb)?.reshape(&[d])?;
        let video = self.patch_in.forward(p, features)?.add(p.constant(positions.clone()))?;
        let text = self.text_proj.forward(p, p.constant(caption.tokens.clone()))?.add(p.bind(&self.text_pos))?;
        let mut x = Var::concat(&[text, video], 0)?.add_bias(temb)?;
        let mut rec = AttentionRecord {
            layers: Vec::with_capacity(self.blocks.len()),
            layout: Some(TokenLayout { n_text: self.config.n_text, n_video }),
        };
        for b in &self.blocks {
            let (y, l) = b.forward(p, x)?;
            rec.layers.push(l);
            x = y;
        }
        let y = self.head.forward(p, self.ln_out.forward(p, x)?)?;
        Ok((y.narrow(0, self.config.n_text, n_video)?, rec))
    }

    /// Noise prediction `ε̂(x_t, t, c)` for latents `[T', C, H', W']`.
    pub fn forward<'t>(
        &self,
        p: &Binder<'t>,
        noisy: Var<'t>,
        cond: Var<'t>,
        caption: &CaptionEmbedding,
        t: usize,
    ) -> Result<(Var<'t>, AttentionRecord<'t>)> {
        let s = noisy.shape();
        let c = self.config.latent_channels;
        if s.len() != 4 || s[1] != c || !s[2].is_multiple_of(PATCH) || !s[3].is_multiple_of(PATCH) {
            return Err(Error::dim("dit_forward", &s, &[0, c, PATCH, PATCH]));
        }
        if cond.shape() != s {
            return Err(Error::dim("dit_forward", &cond.shape(), &s));
        }
        let grid = [s[0], s[2] / PATCH, s[3] / PATCH];
        let n = grid.iter().product::<usize>();
        let features = Var::concat(&[noisy, cond], 1)?
            .reshape(&[grid[0], 2 * c, grid[1], PATCH, grid[2], PATCH])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[n, 2 * c * PATCH * PATCH])?;
        let (y, rec) = self.forward_tokens(p, features, &self.video_positions(grid), caption, t)?;
        let eps = y.reshape(&[grid[0], grid[1], grid[2], c, PATCH, PATCH])?.permute(&[0, 3, 1, 4, 2, 5])?.reshape(&s)?;
        Ok((eps, rec))
    }
}

impl Module for Dit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.patch_in.visit(&join(prefix, "patch_in"), f);
        self.text_proj.visit(&join(prefix, "text_proj"), f);
        f(&join(prefix, "text_pos"), &self.text_pos);
        self.time1.visit(&join(prefix, "time1"), f);
        self.time2.visit(&join(prefix, "time2"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.ln_out.visit(&join(prefix, "ln_out"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.patch_in.visit_mut(&join(prefix, "patch_in"), f);
        self.text_proj.visit_mut(&join(prefix, "text_proj"), f);
        f(&join(prefix, "text_pos"), &mut self.text_pos);
        self.time1.visit_mut(&join(prefix, "time1"), f);
        self.time2.visit_mut(&join(prefix, "time2"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.ln_out.visit_mut(&join(prefix, "ln_out"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
