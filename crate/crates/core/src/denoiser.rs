//! Toy DiT-style text-conditional noise predictor.
//!
//! Tokens pass through `blocks` pre-norm transformer blocks, each made of a
//! residual self-attention sublayer, a residual cross-attention sublayer
//! against the text tokens, and a residual GELU MLP. The text condition
//! enters only through the cross-attention keys and values; the timestep is
//! an additive sinusoidal embedding. Both attention sublayers are exposed to
//! an [`AttentionHook`], which can skip, record or substitute their outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::{self, MacCounter, Prng, Tensor};

/// Vocabulary size of the hashed pseudo-tokenizer.
pub const VOCAB_SIZE: u64 = 4096;

pub const LABEL_SA: &str = "sa";
pub const LABEL_CA: &str = "ca";
pub const LABEL_MLP: &str = "mlp";
pub const LABEL_PROJ: &str = "proj";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Tokens per side of the square latent grid before patching.
    pub latent_side: usize,
    pub channels: usize,
    pub patch: usize,
    /// Model width D.
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub text_len: usize,
    pub text_dim: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_side: 8,
            channels: 4,
            patch: 1,
            width: 64,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4,
            text_len: 8,
            text_dim: 64,
            seed: 7,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_side", self.latent_side),
            ("channels", self.channels),
            ("patch", self.patch),
            ("width", self.width),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("mlp_ratio", self.mlp_ratio),
            ("text_len", self.text_len),
            ("text_dim", self.text_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !self.latent_side.is_multiple_of(self.patch) {
            return Err(Error::InvalidArgument(format!(
                "latent_side {} not divisible by patch {}",
                self.latent_side, self.patch
            )));
        }
        Ok(())
    }

    /// Latent tokens s.
    pub fn tokens(&self) -> usize {
        let side = self.latent_side / self.patch;
        side * side
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Values per token after patching.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.width
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.channels, self.latent_side, self.latent_side]
    }
}

/// Latent z_t at inference step `step` (1-based) and training-grid `timestep`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub step: usize,
    pub timestep: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextCondition {
    /// (text_len, text_dim)
    pub tokens: Tensor,
    pub is_null: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionKind {
    SelfAttn,
    Cross,
}

#[derive(Clone, Debug, PartialEq)]
pub enum HookAction {
    UseComputed,
    Substitute(Tensor),
}

/// Per-sublayer interception point.
///
/// `before` runs first; returning a tensor skips the sublayer entirely and
/// feeds that tensor to the residual. Otherwise the sublayer is computed and
/// `after` sees its post-projection output and the pre-projection
/// concatenated heads.
pub trait AttentionHook {
    fn before(&mut self, _block: usize, _kind: AttentionKind) -> Result<Option<Tensor>> {
        Ok(None)
    }

    fn after(
        &mut self,
        _block: usize,
        _kind: AttentionKind,
        _output: &Tensor,
        _map: &Tensor,
    ) -> Result<HookAction> {
        Ok(HookAction::UseComputed)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone, Debug)]
struct Norm {
    gain: Tensor,
    bias: Tensor,
}

#[derive(Clone, Debug)]
struct Block {
    norm_sa: Norm,
    sa: AttentionWeights,
    norm_ca: Norm,
    ca: AttentionWeights,
    norm_mlp: Norm,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Immutable after construction.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    patch_in: Tensor,
    patch_bias: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm_out: Norm,
    patch_out: Tensor,
    out_bias: Tensor,
}

fn init_weight(prng: &Prng, label: &str, fan_in: usize, fan_out: usize) -> Tensor {
    let std = 1.0 / (fan_in as f32).sqrt();
    let data = prng.stream(label).normals(fan_in * fan_out, std);
    Tensor::new(vec![fan_in, fan_out], data).expect("weight shape")
}

fn unit_norm(width: usize) -> Norm {
    Norm {
        gain: Tensor::full(&[width], 1.0),
        bias: Tensor::zeros(&[width]),
    }
}

/// Sinusoidal embedding of a scalar position into `width` values:
/// [sin(p·f₀), cos(p·f₀), sin(p·f₁), …] with fᵢ = 10000^(−i/half).
pub fn sinusoidal(position: f32, width: usize) -> Vec<f32> {
    let half = (width / 2).max(1);
    let ln_base = libm::logf(10_000.0);
    (0..width)
        .map(|c| {
            let i = c / 2;
            let freq = libm::expf(-ln_base * i as f32 / half as f32);
            if c % 2 == 0 {
                libm::sinf(position * freq)
            } else {
                libm::cosf(position * freq)
            }
        })
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic pseudo-embedding of `prompt`.
///
/// Whitespace-separated tokens are hashed into a seeded table of
/// [`VOCAB_SIZE`] rows; the sequence is padded with a pad row or truncated to
/// `text_len`, and a sinusoidal position code is added. The empty prompt maps
/// to the null condition: a dedicated seeded row at every position.
pub fn embed_text(prompt: &str, config: &DenoiserConfig, seed: u64) -> TextCondition {
    let prng = Prng::new(seed);
    let dim = config.text_dim;
    let is_null = prompt.is_empty();
    let null_row = || prng.stream("text.null").normals(dim, 1.0);
    let pad_row = || prng.stream("text.pad").normals(dim, 1.0);
    let words: Vec<&str> = prompt.split_whitespace().collect();

    let mut data = Vec::with_capacity(config.text_len * dim);
    for pos in 0..config.text_len {
        let row = if is_null {
            null_row()
        } else if let Some(word) = words.get(pos) {
            let index = fnv1a(word.as_bytes()) % VOCAB_SIZE;
            prng.stream_indexed("text.vocab", index).normals(dim, 1.0)
        } else {
            pad_row()
        };
        let code = sinusoidal(pos as f32, dim);
        data.extend(row.iter().zip(&code).map(|(a, b)| a + b));
    }
    TextCondition {
        tokens: Tensor::new(vec![config.text_len, dim], data).expect("text shape"),
        is_null,
    }
}

fn columns(t: &Tensor, start: usize, width: usize) -> Tensor {
    let c = t.cols();
    let rows = t.rows();
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&t.data()[r * c + start..r * c + start + width]);
    }
    Tensor::new(vec![rows, width], out).expect("column slice")
}

/// Multi-head attention of `q_src` tokens over `kv_src` tokens.
///
/// Returns the output-projected sublayer result and the pre-projection
/// concatenation of the per-head softmax(Q·Kᵀ/√d)·V products.
pub fn attention(
    q_src: &Tensor,
    kv_src: &Tensor,
    weights: &AttentionWeights,
    heads: usize,
    mut counter: Option<&mut MacCounter>,
    label: &str,
) -> Result<(Tensor, Tensor)> {
    let q = numkern::matmul(q_src, &weights.wq, counter.as_deref_mut(), label)?;
    let k = numkern::matmul(kv_src, &weights.wk, counter.as_deref_mut(), label)?;
    let v = numkern::matmul(kv_src, &weights.wv, counter.as_deref_mut(), label)?;
    let width = q.cols();
    if heads == 0 || width % heads != 0 {
        return Err(Error::shape("attention", format!("width {width} vs {heads} heads")));
    }
    let d = width / heads;
    let s = q.rows();
    let inv_sqrt_d = 1.0 / (d as f32).sqrt();

    let mut map = vec![0.0f32; s * width];
    for h in 0..heads {
        let qh = columns(&q, h * d, d);
        let kh_t = numkern::transpose(&columns(&k, h * d, d))?;
        let vh = columns(&v, h * d, d);
        let logits = numkern::matmul(&qh, &kh_t, counter.as_deref_mut(), label)?;
        let probs = numkern::softmax_rows(&numkern::scale(&logits, inv_sqrt_d)?)?;
        let ch = numkern::matmul(&probs, &vh, counter.as_deref_mut(), label)?;
        for r in 0..s {
            map[r * width + h * d..r * width + (h + 1) * d].copy_from_slice(ch.row(r));
        }
    }
    let map = Tensor::new(vec![s, width], map)?;
    map.check_finite("attention")?;
    let out = numkern::matmul(&map, &weights.wo, counter, label)?;
    Ok((out, map))
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let prng = Prng::new(config.seed);
        let d = config.width;
        let attn = |prefix: &str, kv_dim: usize| AttentionWeights {
            wq: init_weight(&prng, &format!("{prefix}.wq"), d, d),
            wk: init_weight(&prng, &format!("{prefix}.wk"), kv_dim, d),
            wv: init_weight(&prng, &format!("{prefix}.wv"), kv_dim, d),
            wo: init_weight(&prng, &format!("{prefix}.wo"), d, d),
        };
        let blocks = (0..config.blocks)
            .map(|i| Block {
                norm_sa: unit_norm(d),
                sa: attn(&format!("block{i}.sa"), d),
                norm_ca: unit_norm(d),
                ca: attn(&format!("block{i}.ca"), config.text_dim),
                norm_mlp: unit_norm(d),
                w1: init_weight(&prng, &format!("block{i}.mlp.w1"), d, config.mlp_hidden()),
                b1: Tensor::zeros(&[config.mlp_hidden()]),
                w2: init_weight(&prng, &format!("block{i}.mlp.w2"), config.mlp_hidden(), d),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let s = config.tokens();
        let pos_embed = Tensor::new(
            vec![s, d],
            prng.stream("pos_embed").normals(s * d, 0.1),
        )?;
        Ok(Self {
            patch_in: init_weight(&prng, "patch_in", config.patch_dim(), d),
            patch_bias: Tensor::zeros(&[d]),
            pos_embed,
            blocks,
            norm_out: unit_norm(d),
            patch_out: init_weight(&prng, "patch_out", d, config.patch_dim()),
            out_bias: Tensor::zeros(&[config.patch_dim()]),
            config,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Weight tensors in a fixed order, for dumping.
    pub fn named_weights(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_in".to_string(), &self.patch_in),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, a) in [("sa", &b.sa), ("ca", &b.ca)] {
                out.push((format!("block{i}.{name}.wq"), &a.wq));
                out.push((format!("block{i}.{name}.wk"), &a.wk));
                out.push((format!("block{i}.{name}.wv"), &a.wv));
                out.push((format!("block{i}.{name}.wo"), &a.wo));
            }
            out.push((format!("block{i}.mlp.w1"), &b.w1));
            out.push((format!("block{i}.mlp.w2"), &b.w2));
        }
        out.push(("patch_out".to_string(), &self.patch_out));
        out
    }

    fn patchify(&self, z: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if z.shape() != c.latent_shape() {
            return Err(Error::shape(
                "predict_noise",
                format!("latent {:?} vs expected {:?}", z.shape(), c.latent_shape()),
            ));
        }
        let (p, side) = (c.patch, c.latent_side);
        let grid = side / p;
        let zd = z.data();
        let mut out = Vec::with_capacity(c.tokens() * c.patch_dim());
        for py in 0..grid {
            for px in 0..grid {
                for ch in 0..c.channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            out.push(zd[(ch * side + py * p + dy) * side + px * p + dx]);
                        }
                    }
                }
            }
        }
        Tensor::new(vec![c.tokens(), c.patch_dim()], out)
    }

    fn unpatchify(&self, tokens: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let (p, side) = (c.patch, c.latent_side);
        let grid = side / p;
        let td = tokens.data();
        let mut out = vec![0.0f32; c.channels * side * side];
        let mut idx = 0;
        for py in 0..grid {
            for px in 0..grid {
                for ch in 0..c.channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[(ch * side + py * p + dy) * side + px * p + dx] = td[idx];
                            idx += 1;
                        }
                    }
                }
            }
        }
        Tensor::new(c.latent_shape().to_vec(), out)
    }

    fn add_bias(x: &mut Tensor, bias: &Tensor) {
        let c = x.cols();
        for row in x.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn sublayer(
        &self,
        block: usize,
        kind: AttentionKind,
        x: &Tensor,
        norm: &Norm,
        kv: Option<&Tensor>,
        weights: &AttentionWeights,
        hook: &mut Option<&mut dyn AttentionHook>,
        counter: Option<&mut MacCounter>,
    ) -> Result<Tensor> {
        let expected = [x.rows(), self.config.width];
        if let Some(h) = hook.as_deref_mut() {
            if let Some(provided) = h.before(block, kind)? {
                if provided.shape() != expected {
                    return Err(Error::shape(
                        "attention hook",
                        format!("substitute {:?} vs {:?}", provided.shape(), expected),
                    ));
                }
                return Ok(provided);
            }
        }
        let normed = numkern::layernorm(x, &norm.gain, &norm.bias)?;
        let label = match kind {
            AttentionKind::SelfAttn => LABEL_SA,
            AttentionKind::Cross => LABEL_CA,
        };
        let kv_src = kv.unwrap_or(&normed);
        let (out, map) = attention(&normed, kv_src, weights, self.config.heads, counter, label)?;
        match hook.as_deref_mut() {
            Some(h) => match h.after(block, kind, &out, &map)? {
                HookAction::UseComputed => Ok(out),
                HookAction::Substitute(t) => {
                    if t.shape() != expected {
                        return Err(Error::shape(
                            "attention hook",
                            format!("substitute {:?} vs {:?}", t.shape(), expected),
                        ));
                    }
                    Ok(t)
                }
            },
            None => Ok(out),
        }
    }

    /// ε̂(z_t, t, c).
    pub fn predict_noise(
        &self,
        state: &LatentState,
        cond: &TextCondition,
        mut hook: Option<&mut dyn AttentionHook>,
        mut counter: Option<&mut MacCounter>,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        if cond.tokens.shape() != [cfg.text_len, cfg.text_dim] {
            return Err(Error::shape(
                "predict_noise",
                format!(
                    "text tokens {:?} vs expected [{}, {}]",
                    cond.tokens.shape(),
                    cfg.text_len,
                    cfg.text_dim
                ),
            ));
        }
        let tokens = self.patchify(&state.z)?;
        let mut x = numkern::matmul(&tokens, &self.patch_in, counter.as_deref_mut(), LABEL_PROJ)?;
        Self::add_bias(&mut x, &self.patch_bias);
        let time = sinusoidal(state.timestep as f32, cfg.width);
        let d = cfg.width;
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v += self.pos_embed.data()[i] + time[i % d];
        }

        for (i, b) in self.blocks.iter().enumerate() {
            let sa = self.sublayer(
                i,
                AttentionKind::SelfAttn,
                &x,
                &b.norm_sa,
                None,
                &b.sa,
                &mut hook,
                counter.as_deref_mut(),
            )?;
            x = numkern::add(&x, &sa)?;

            let ca = self.sublayer(
                i,
                AttentionKind::Cross,
                &x,
                &b.norm_ca,
                Some(&cond.tokens),
                &b.ca,
                &mut hook,
                counter.as_deref_mut(),
            )?;
            x = numkern::add(&x, &ca)?;

            let h = numkern::layernorm(&x, &b.norm_mlp.gain, &b.norm_mlp.bias)?;
            let mut h = numkern::matmul(&h, &b.w1, counter.as_deref_mut(), LABEL_MLP)?;
            Self::add_bias(&mut h, &b.b1);
            let h = numkern::gelu(&h)?;
            let mut h = numkern::matmul(&h, &b.w2, counter.as_deref_mut(), LABEL_MLP)?;
            Self::add_bias(&mut h, &b.b2);
            x = numkern::add(&x, &h)?;
        }

        let h = numkern::layernorm(&x, &self.norm_out.gain, &self.norm_out.bias)?;
        let mut out = numkern::matmul(&h, &self.patch_out, counter, LABEL_PROJ)?;
        Self::add_bias(&mut out, &self.out_bias);
        let eps = self.unpatchify(&out)?;
        eps.check_finite("predict_noise")?;
        Ok(eps)
    }
}
