//! Small trainable stand-ins for the paired-image encoder and the report
//! encoder.
//!
//! Image tower: each image is mean-pooled per patch, mapped linearly to a
//! hidden vector, and the pair is represented as `[h_prev, h_cur, h_cur −
//! h_prev]`. A tanh layer and a linear projection follow, then L2
//! normalisation. The difference channel flips sign when the pair is
//! reversed, so the tower can represent temporal order.
//!
//! Text tower: tokens are embedded and mean-pooled within each sentence, a
//! tanh layer is applied per sentence, the sentence features are averaged and
//! projected, then L2 normalised. Pooling tokens inside a sentence before the
//! nonlinearity keeps direction words bound to the finding they describe.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    affine, affine_transpose_acc, dot, normalize, normalize_backward, outer_acc, rng_from,
    ParamStore, SegmentId,
};

/// Token id reserved for the sentence delimiter.
pub const SENTENCE_BREAK: u32 = 0;
pub const MAX_TOKENS: usize = 256;

pub mod names {
    pub const PATCH_W: &str = "img.patch.w";
    pub const PATCH_B: &str = "img.patch.b";
    pub const JOINT_W: &str = "img.joint.w";
    pub const JOINT_B: &str = "img.joint.b";
    pub const IMG_PROJ: &str = "img.proj.w";
    pub const EMBED: &str = "txt.embed";
    pub const TEXT_W: &str = "txt.hidden.w";
    pub const TEXT_B: &str = "txt.hidden.b";
    pub const TEXT_PROJ: &str = "txt.proj.w";
    pub const LOG_SCALE: &str = "logit.log_scale";
    pub const BIAS: &str = "logit.bias";
    pub const SWAP_LOG_SCALE: &str = "logit.swap_log_scale";
    pub const SWAP_BIAS: &str = "logit.swap_bias";

    pub const IMAGE_SIDE: [&str; 5] = [PATCH_W, PATCH_B, JOINT_W, JOINT_B, IMG_PROJ];
    pub const TEXT_SIDE: [&str; 4] = [EMBED, TEXT_W, TEXT_B, TEXT_PROJ];
}

/// Initial logit scale (stored as its logarithm) and bias of both heads.
pub const INIT_SCALE: f64 = 10.0;
pub const INIT_BIAS: f64 = -10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub hidden: usize,
    pub proj_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_side: 64,
            patch_size: 8,
            hidden: 64,
            proj_dim: 128,
            vocab_size: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_side == 0 || self.image_side % self.patch_size != 0
        {
            return Err(Error::config(format!(
                "encoder.image_side ({}) must be a positive multiple of encoder.patch_size ({})",
                self.image_side, self.patch_size
            )));
        }
        if self.proj_dim < 2 {
            return Err(Error::config("encoder.proj_dim must be at least 2"));
        }
        if self.hidden == 0 {
            return Err(Error::config("encoder.hidden must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("encoder.vocab_size must be at least 2"));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        let per_side = self.image_side / self.patch_size;
        per_side * per_side
    }
}

/// Square grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::domain(format!(
                "image of side {side} needs {} pixels, got {}",
                side * side,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::domain(format!(
                "pixel {bad} = {} outside [0, 1]",
                pixels[bad]
            )));
        }
        Ok(Image { side, pixels })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.side + col]
    }
}

/// Ordered vocabulary indices, `1..=256` long.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::domain("token sequence is empty"));
        }
        if tokens.len() > MAX_TOKENS {
            return Err(Error::domain(format!(
                "token sequence of length {} exceeds {MAX_TOKENS}",
                tokens.len()
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::domain(format!(
                "token {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(TokenSequence(tokens))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Non-empty runs of tokens between sentence delimiters.
    pub fn sentences(&self) -> impl Iterator<Item = &[u32]> {
        self.0
            .split(|&t| t == SENTENCE_BREAK)
            .filter(|s| !s.is_empty())
    }
}

/// Unit-norm embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalises `raw` to unit length.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        normalize(raw).map(|(v, _)| EmbeddingVector(v))
    }

    /// Wraps an already unit-norm vector.
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        let n = dot(&v, &v).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("embedding has norm {n}, expected 1")));
        }
        Ok(EmbeddingVector(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Per-patch mean intensities of one image, row-major over the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledImage(Vec<f64>);

impl PooledImage {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn pool_patches(image: &Image, cfg: &EncoderConfig) -> Result<PooledImage> {
    if image.side() != cfg.image_side {
        return Err(Error::domain(format!(
            "image side {} does not match encoder side {}",
            image.side(),
            cfg.image_side
        )));
    }
    let per_side = cfg.image_side / cfg.patch_size;
    let area = (cfg.patch_size * cfg.patch_size) as f64;
    let mut out = vec![0.0; per_side * per_side];
    for r in 0..cfg.image_side {
        let pr = r / cfg.patch_size;
        for c in 0..cfg.image_side {
            out[pr * per_side + c / cfg.patch_size] += f64::from(image.at(r, c));
        }
    }
    out.iter_mut().for_each(|x| *x /= area);
    Ok(PooledImage(out))
}

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Builds a freshly initialised store for both towers and both logit heads.
///
/// Weights are uniform in `±1/√fan_in`, biases zero, log-scales `ln 10` and
/// biases `−10`.
pub fn init_params(cfg: &EncoderConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = rng_from(cfg.seed);
    let (p, h, d, v) = (cfg.patches(), cfg.hidden, cfg.proj_dim, cfg.vocab_size);
    let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let mut s = ParamStore::new();
    s.insert(names::PATCH_W, h, p, uniform_matrix(&mut rng, h, p, inv(p)))?;
    s.insert(names::PATCH_B, h, 1, vec![0.0; h])?;
    s.insert(names::JOINT_W, h, 3 * h, uniform_matrix(&mut rng, h, 3 * h, inv(3 * h)))?;
    s.insert(names::JOINT_B, h, 1, vec![0.0; h])?;
    s.insert(names::IMG_PROJ, d, h, uniform_matrix(&mut rng, d, h, inv(h)))?;
    s.insert(names::EMBED, v, h, uniform_matrix(&mut rng, v, h, 1.0))?;
    s.insert(names::TEXT_W, h, h, uniform_matrix(&mut rng, h, h, inv(h)))?;
    s.insert(names::TEXT_B, h, 1, vec![0.0; h])?;
    s.insert(names::TEXT_PROJ, d, h, uniform_matrix(&mut rng, d, h, inv(h)))?;
    s.insert(names::LOG_SCALE, 1, 1, vec![INIT_SCALE.ln()])?;
    s.insert(names::BIAS, 1, 1, vec![INIT_BIAS])?;
    s.insert(names::SWAP_LOG_SCALE, 1, 1, vec![INIT_SCALE.ln()])?;
    s.insert(names::SWAP_BIAS, 1, 1, vec![INIT_BIAS])?;
    Ok(s)
}

/// Resolved segment handles for both towers.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch_w: SegmentId,
    patch_b: SegmentId,
    joint_w: SegmentId,
    joint_b: SegmentId,
    img_proj: SegmentId,
    embed: SegmentId,
    text_w: SegmentId,
    text_b: SegmentId,
    text_proj: SegmentId,
}

/// Intermediate values of one paired-image forward pass.
#[derive(Clone, Debug)]
pub struct PairCache {
    h_prev: Vec<f64>,
    h_cur: Vec<f64>,
    joint_in: Vec<f64>,
    z: Vec<f64>,
    norm: f64,
    v: Vec<f64>,
}

impl PairCache {
    pub fn embedding(&self) -> &[f64] {
        &self.v
    }
}

#[derive(Clone, Debug)]
struct SentenceCache {
    tokens: Vec<u32>,
    mean: Vec<f64>,
    z: Vec<f64>,
}

/// Intermediate values of one text forward pass.
#[derive(Clone, Debug)]
pub struct TextCache {
    sentences: Vec<SentenceCache>,
    pooled: Vec<f64>,
    norm: f64,
    v: Vec<f64>,
}

impl TextCache {
    pub fn embedding(&self) -> &[f64] {
        &self.v
    }
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, params: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let check = |name: &str, rows: usize, cols: usize| -> Result<SegmentId> {
            let id = params.id(name)?;
            let s = params.segment(id);
            if s.rows != rows || s.cols != cols {
                return Err(Error::domain(format!(
                    "segment {name} has shape {}x{}, config expects {rows}x{cols}",
                    s.rows, s.cols
                )));
            }
            Ok(id)
        };
        let (p, h, d, v) = (cfg.patches(), cfg.hidden, cfg.proj_dim, cfg.vocab_size);
        Ok(Encoder {
            cfg: cfg.clone(),
            patch_w: check(names::PATCH_W, h, p)?,
            patch_b: check(names::PATCH_B, h, 1)?,
            joint_w: check(names::JOINT_W, h, 3 * h)?,
            joint_b: check(names::JOINT_B, h, 1)?,
            img_proj: check(names::IMG_PROJ, d, h)?,
            embed: check(names::EMBED, v, h)?,
            text_w: check(names::TEXT_W, h, h)?,
            text_b: check(names::TEXT_B, h, 1)?,
            text_proj: check(names::TEXT_PROJ, d, h)?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn pool(&self, image: &Image) -> Result<PooledImage> {
        pool_patches(image, &self.cfg)
    }

    /// `f(prev, cur)`: order-sensitive unit-norm embedding of an image pair.
    pub fn encode_pair(
        &self,
        prev: &Image,
        cur: &Image,
        params: &ParamStore,
    ) -> Result<EmbeddingVector> {
        let cache = self.pair_forward(params, &self.pool(prev)?, &self.pool(cur)?)?;
        Ok(EmbeddingVector(cache.v))
    }

    /// `g(tokens)`: unit-norm embedding of a report.
    pub fn encode_text(
        &self,
        tokens: &TokenSequence,
        params: &ParamStore,
    ) -> Result<EmbeddingVector> {
        Ok(EmbeddingVector(self.text_forward(params, tokens)?.v))
    }

    pub fn pair_forward(
        &self,
        params: &ParamStore,
        prev: &PooledImage,
        cur: &PooledImage,
    ) -> Result<PairCache> {
        let (p, h, d) = (self.cfg.patches(), self.cfg.hidden, self.cfg.proj_dim);
        if prev.0.len() != p || cur.0.len() != p {
            return Err(Error::domain("pooled image does not match encoder patch grid"));
        }
        let mut h_prev = vec![0.0; h];
        let mut h_cur = vec![0.0; h];
        let (pw, pb) = (params.value(self.patch_w), params.value(self.patch_b));
        affine(pw, Some(pb), &prev.0, &mut h_prev);
        affine(pw, Some(pb), &cur.0, &mut h_cur);
        let mut joint_in = Vec::with_capacity(3 * h);
        joint_in.extend_from_slice(&h_prev);
        joint_in.extend_from_slice(&h_cur);
        joint_in.extend(h_cur.iter().zip(&h_prev).map(|(c, p)| c - p));
        let mut z = vec![0.0; h];
        affine(
            params.value(self.joint_w),
            Some(params.value(self.joint_b)),
            &joint_in,
            &mut z,
        );
        z.iter_mut().for_each(|a| *a = a.tanh());
        let mut e = vec![0.0; d];
        affine(params.value(self.img_proj), None, &z, &mut e);
        let (v, norm) = normalize(&e)?;
        Ok(PairCache {
            h_prev,
            h_cur,
            joint_in,
            z,
            norm,
            v,
        })
    }

    /// Accumulates `dL/dθ` for the image tower given `dL/dv`.
    pub fn pair_backward(
        &self,
        params: &mut ParamStore,
        prev: &PooledImage,
        cur: &PooledImage,
        cache: &PairCache,
        dv: &[f64],
    ) {
        let h = self.cfg.hidden;
        let de = normalize_backward(&cache.v, cache.norm, dv);
        outer_acc(params.grad_mut(self.img_proj), &de, &cache.z);
        let mut dz = vec![0.0; h];
        affine_transpose_acc(params.value(self.img_proj), &de, &mut dz);
        let da: Vec<f64> = dz
            .iter()
            .zip(&cache.z)
            .map(|(g, z)| g * (1.0 - z * z))
            .collect();
        outer_acc(params.grad_mut(self.joint_w), &da, &cache.joint_in);
        params
            .grad_mut(self.joint_b)
            .iter_mut()
            .zip(&da)
            .for_each(|(g, d)| *g += d);
        let mut d_in = vec![0.0; 3 * h];
        affine_transpose_acc(params.value(self.joint_w), &da, &mut d_in);
        let d_prev: Vec<f64> = (0..h).map(|k| d_in[k] - d_in[2 * h + k]).collect();
        let d_cur: Vec<f64> = (0..h).map(|k| d_in[h + k] + d_in[2 * h + k]).collect();
        let gw = params.grad_mut(self.patch_w);
        outer_acc(gw, &d_prev, &prev.0);
        outer_acc(gw, &d_cur, &cur.0);
        params
            .grad_mut(self.patch_b)
            .iter_mut()
            .enumerate()
            .for_each(|(k, g)| *g += d_prev[k] + d_cur[k]);
        debug_assert_eq!(cache.h_prev.len(), h);
        debug_assert_eq!(cache.h_cur.len(), h);
    }

    pub fn text_forward(&self, params: &ParamStore, tokens: &TokenSequence) -> Result<TextCache> {
        let (h, d, vocab) = (self.cfg.hidden, self.cfg.proj_dim, self.cfg.vocab_size);
        let embed = params.value(self.embed);
        let mut sentences = Vec::new();
        for sent in tokens.sentences() {
            let mut mean = vec![0.0; h];
            for &t in sent {
                let t = t as usize;
                if t >= vocab {
                    return Err(Error::domain(format!("token {t} outside vocabulary")));
                }
                mean.iter_mut()
                    .zip(&embed[t * h..(t + 1) * h])
                    .for_each(|(m, e)| *m += e);
            }
            let inv = 1.0 / sent.len() as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
            let mut z = vec![0.0; h];
            affine(
                params.value(self.text_w),
                Some(params.value(self.text_b)),
                &mean,
                &mut z,
            );
            z.iter_mut().for_each(|a| *a = a.tanh());
            sentences.push(SentenceCache {
                tokens: sent.to_vec(),
                mean,
                z,
            });
        }
        if sentences.is_empty() {
            return Err(Error::domain("report contains no tokens besides delimiters"));
        }
        let inv = 1.0 / sentences.len() as f64;
        let mut pooled = vec![0.0; h];
        for s in &sentences {
            pooled.iter_mut().zip(&s.z).for_each(|(p, z)| *p += z * inv);
        }
        let mut e = vec![0.0; d];
        affine(params.value(self.text_proj), None, &pooled, &mut e);
        let (v, norm) = normalize(&e)?;
        Ok(TextCache {
            sentences,
            pooled,
            norm,
            v,
        })
    }

    /// Accumulates `dL/dφ` for the text tower given `dL/dt`.
    pub fn text_backward(&self, params: &mut ParamStore, cache: &TextCache, dt: &[f64]) {
        let h = self.cfg.hidden;
        let de = normalize_backward(&cache.v, cache.norm, dt);
        outer_acc(params.grad_mut(self.text_proj), &de, &cache.pooled);
        let mut dpooled = vec![0.0; h];
        affine_transpose_acc(params.value(self.text_proj), &de, &mut dpooled);
        let inv_s = 1.0 / cache.sentences.len() as f64;
        for s in &cache.sentences {
            let da: Vec<f64> = dpooled
                .iter()
                .zip(&s.z)
                .map(|(g, z)| g * inv_s * (1.0 - z * z))
                .collect();
            outer_acc(params.grad_mut(self.text_w), &da, &s.mean);
            params
                .grad_mut(self.text_b)
                .iter_mut()
                .zip(&da)
                .for_each(|(g, d)| *g += d);
            let mut dmean = vec![0.0; h];
            affine_transpose_acc(params.value(self.text_w), &da, &mut dmean);
            let inv_t = 1.0 / s.tokens.len() as f64;
            let ge = params.grad_mut(self.embed);
            for &t in &s.tokens {
                let t = t as usize;
                ge[t * h..(t + 1) * h]
                    .iter_mut()
                    .zip(&dmean)
                    .for_each(|(g, d)| *g += d * inv_t);
            }
        }
    }
}
