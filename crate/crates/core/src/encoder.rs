//! Masked ViT image encoder with class-token readout and pixel-shuffle
//! upsampling to a full-resolution feature map.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spa_diff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::{Result, SpaError};
use crate::nn::{param, Conv2d, Init, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    /// Patch side in pixels; must be a perfect square so that two pixel
    /// shuffles by `sqrt(patch)` restore the input resolution.
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl VitConfig {
    /// `sqrt(patch)`, the upscale factor of each upsampling stage.
    pub fn shuffle_factor(&self) -> usize {
        (self.patch as f64).sqrt().round() as usize
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Channels of the upsampled feature map.
    pub fn feature_dim(&self) -> usize {
        self.dim / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.shuffle_factor();
        let problem = if self.patch == 0 || r * r != self.patch {
            Some(format!("patch size {} is not a perfect square", self.patch))
        } else if self.image_size % self.patch != 0 {
            Some(format!("patch {} does not divide image size {}", self.patch, self.image_size))
        } else if self.heads == 0 || self.dim % self.heads != 0 {
            Some(format!("dim {} not divisible by {} heads", self.dim, self.heads))
        } else if self.dim % self.patch != 0 {
            Some(format!("dim {} not divisible by patch {}", self.dim, self.patch))
        } else if self.depth == 0 || self.mlp_ratio == 0 {
            Some("depth and mlp ratio must be positive".into())
        } else {
            None
        };
        match problem {
            Some(p) => Err(SpaError::invalid(format!("encoder config: {p}"))),
            None => Ok(()),
        }
    }
}

/// Which patches are hidden from the backbone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub total: usize,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub seed: u64,
}

/// Uniformly masks `floor(ratio * total)` patches without replacement.
pub fn random_mask(total: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(SpaError::invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let m = (ratio * total as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hidden = vec![false; total];
    for i in sample(&mut rng, total, m).into_iter() {
        hidden[i] = true;
    }
    let (masked, visible): (Vec<usize>, Vec<usize>) = (0..total).partition(|&i| hidden[i]);
    Ok(MaskSpec {
        total,
        visible,
        masked,
        seed,
    })
}

/// Splits a `[C, H, W]` image into `[L, C * p * p]` patch rows, patches in
/// row-major grid order and each row laid out as (py, px, c).
pub fn patchify<T: Scalar>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(SpaError::invalid(format!("patchify expects [C,H,W], got {:?}", image.shape())));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(SpaError::invalid(format!("patch {p} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut data = Vec::with_capacity(c * h * w);
    let d = image.data();
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (gy * p + py, gx * p + px);
                    for ci in 0..c {
                        data.push(d[(ci * h + y) * w + x]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, c * p * p], data)?)
}

/// `[L, C]` tokens to a `[C, gh, gw]` grid (row-major patch order).
pub fn unpatchify<T: Scalar>(t: &Tape<T>, tokens: Var, gh: usize, gw: usize) -> Result<Var> {
    let shape = t.shape(tokens);
    if shape.len() != 2 || shape[0] != gh * gw {
        return Err(SpaError::invalid(format!(
            "unpatchify: {shape:?} tokens for a {gh}x{gw} grid"
        )));
    }
    let g = t.reshape(tokens, &[gh, gw, shape[1]])?;
    Ok(t.permute(g, &[2, 0, 1])?)
}

/// Converts an interleaved `H * W * 3` image to a `[3, H, W]` tensor.
pub fn image_tensor<T: Scalar>(rgb: &[f32], h: usize, w: usize) -> Result<Tensor<T>> {
    if rgb.len() != h * w * 3 {
        return Err(SpaError::invalid("image buffer length mismatch"));
    }
    Ok(Tensor::from_fn(vec![3, h, w], |i| {
        let (c, yx) = (i / (h * w), i % (h * w));
        T::c(rgb[yx * 3 + c] as f64)
    }))
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: VitConfig,
    pub patch_embed: Linear,
    pub pos: ParamId,
    pub cls: ParamId,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub readout: Linear,
    pub up1: Conv2d,
    pub up2: Conv2d,
}

pub struct VitOutput {
    /// `[1 + visible, C]`, class token first.
    pub tokens: Var,
    /// Per block, `[heads, n, n]` attention probabilities.
    pub attention: Vec<Var>,
}

pub struct EncoderOutput {
    /// `[1, C]`
    pub cls: Var,
    /// `[L, C]` after mask-token scatter and readout fusion.
    pub tokens: Var,
    /// `[1, C_f, H, W]`
    pub features: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Masking {
    /// Inference: every patch is visible.
    Off,
    Random { ratio: f64, seed: u64 },
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &VitConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        let pin = 3 * cfg.patch * cfg.patch;
        let hidden = c * cfg.mlp_ratio;
        let lin = |s: &mut ParamStore<T>, n: &str, i, o, r: &mut ChaCha8Rng| {
            Linear::new(s, n, i, o, Init::glorot(i, o), r)
        };
        let patch_embed = lin(store, "encoder.patch_embed", pin, c, rng)?;
        let pos = param(store, "encoder.pos", vec![cfg.tokens(), c], Init::Normal(0.02), rng)?;
        let cls = param(store, "encoder.cls", vec![1, c], Init::Normal(0.02), rng)?;
        let mask_token = param(store, "encoder.mask_token", vec![1, c], Init::Normal(0.02), rng)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("encoder.block{i}");
            blocks.push(Block {
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), c, rng)?,
                qkv: lin(store, &format!("{p}.qkv"), c, 3 * c, rng)?,
                proj: lin(store, &format!("{p}.proj"), c, c, rng)?,
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), c, rng)?,
                fc1: lin(store, &format!("{p}.fc1"), c, hidden, rng)?,
                fc2: lin(store, &format!("{p}.fc2"), hidden, c, rng)?,
            });
        }
        let norm = LayerNorm::new(store, "encoder.norm", c, rng)?;
        let readout = lin(store, "encoder.readout", 2 * c, c, rng)?;
        let up1 = Conv2d::new(store, "encoder.up1", c, c, 3, rng)?;
        let up2 = Conv2d::new(store, "encoder.up2", cfg.feature_dim(), c, 3, rng)?;
        Ok(Encoder {
            cfg: cfg.clone(),
            patch_embed,
            pos,
            cls,
            mask_token,
            blocks,
            norm,
            readout,
            up1,
            up2,
        })
    }

    fn attention<T: Scalar>(
        &self,
        t: &Tape<T>,
        s: &ParamStore<T>,
        b: &Block,
        x: Var,
    ) -> Result<(Var, Var)> {
        let n = t.shape(x)[0];
        let (c, h) = (self.cfg.dim, self.cfg.heads);
        let dh = c / h;
        let qkv = b.qkv.forward(t, s, x)?;
        let qkv = t.reshape(qkv, &[n, 3, h, dh])?;
        let qkv = t.permute(qkv, &[1, 2, 0, 3])?; // [3, h, n, dh]
        let q = t.reshape(t.slice(qkv, 0, 0, 1)?, &[h, n, dh])?;
        let k = t.reshape(t.slice(qkv, 0, 1, 2)?, &[h, n, dh])?;
        let v = t.reshape(t.slice(qkv, 0, 2, 3)?, &[h, n, dh])?;
        let kt = t.permute(k, &[0, 2, 1])?;
        let scores = t.scale(t.matmul(q, kt)?, 1.0 / (dh as f64).sqrt())?;
        let probs = t.softmax(scores, 2)?;
        let o = t.matmul(probs, v)?; // [h, n, dh]
        let o = t.reshape(t.permute(o, &[1, 0, 2])?, &[n, c])?;
        Ok((b.proj.forward(t, s, o)?, probs))
    }

    /// Pre-norm transformer over embedded visible tokens `[n, C]` with the
    /// class token prepended.
    pub fn vit_forward<T: Scalar>(
        &self,
        t: &Tape<T>,
        s: &ParamStore<T>,
        visible: Var,
    ) -> Result<VitOutput> {
        let shape = t.shape(visible);
        if shape.len() != 2 || shape[1] != self.cfg.dim {
            return Err(SpaError::invalid(format!(
                "vit input {shape:?}, expected [n, {}]",
                self.cfg.dim
            )));
        }
        let mut x = t.concat(&[t.param(s, self.cls), visible], 0)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (a, probs) = self.attention(t, s, b, b.norm1.forward(t, s, x)?)?;
            attention.push(probs);
            x = t.add(x, a)?;
            let m = b.fc1.forward(t, s, b.norm2.forward(t, s, x)?)?;
            let m = b.fc2.forward(t, s, t.gelu(m)?)?;
            x = t.add(x, m)?;
        }
        Ok(VitOutput {
            tokens: self.norm.forward(t, s, x)?,
            attention,
        })
    }

    /// Places visible latents `[|visible|, C]` at their patch indices and
    /// fills masked positions with the mask token plus positional embedding.
    pub fn scatter_mask_tokens<T: Scalar>(
        &self,
        t: &Tape<T>,
        s: &ParamStore<T>,
        latents: Var,
        mask: &MaskSpec,
    ) -> Result<Var> {
        let l = self.cfg.tokens();
        if mask.total != l
            || t.shape(latents)[0] != mask.visible.len()
            || mask.visible.len() + mask.masked.len() != l
        {
            return Err(SpaError::invalid(format!(
                "mask covers {} of {} positions with {} latents",
                mask.visible.len() + mask.masked.len(),
                l,
                t.shape(latents)[0]
            )));
        }
        if mask.masked.is_empty() {
            return Ok(t.scatter_rows(latents, &mask.visible, l)?);
        }
        let placed = if mask.visible.is_empty() {
            None
        } else {
            Some(t.scatter_rows(latents, &mask.visible, l)?)
        };
        let fill = t.index_select(t.param(s, self.mask_token), &vec![0; mask.masked.len()])?;
        let pos = t.index_select(t.param(s, self.pos), &mask.masked)?;
        let fill = t.scatter_rows(t.add(fill, pos)?, &mask.masked, l)?;
        Ok(match placed {
            Some(p) => t.add(p, fill)?,
            None => fill,
        })
    }

    /// Concatenates each patch token with the class token and projects back to C.
    pub fn readout_fuse<T: Scalar>(
        &self,
        t: &Tape<T>,
        s: &ParamStore<T>,
        tokens: Var,
        cls: Var,
    ) -> Result<Var> {
        let l = t.shape(tokens)[0];
        let cls_rows = t.index_select(cls, &vec![0; l])?;
        let cat = t.concat(&[tokens, cls_rows], 1)?;
        self.readout.forward(t, s, cat)
    }

    /// Two stages of 3x3 conv, GELU and pixel shuffle by `sqrt(P)`.
    pub fn upsample<T: Scalar>(&self, t: &Tape<T>, s: &ParamStore<T>, grid: Var) -> Result<Var> {
        let r = self.cfg.shuffle_factor();
        let x = t.gelu(self.up1.forward(t, s, grid)?)?;
        let x = t.pixel_shuffle(x, r)?;
        let x = t.gelu(self.up2.forward(t, s, x)?)?;
        Ok(t.pixel_shuffle(x, r)?)
    }

    /// Full per-view composition from a `[3, H, W]` image.
    pub fn encode_view<T: Scalar>(
        &self,
        t: &Tape<T>,
        s: &ParamStore<T>,
        image: &Tensor<T>,
        masking: Masking,
    ) -> Result<EncoderOutput> {
        let sz = self.cfg.image_size;
        if image.shape() != [3, sz, sz] {
            return Err(SpaError::invalid(format!(
                "image {:?} does not match encoder size {sz}",
                image.shape()
            )));
        }
        let l = self.cfg.tokens();
        let mask = match masking {
            Masking::Off => MaskSpec {
                total: l,
                visible: (0..l).collect(),
                masked: vec![],
                seed: 0,
            },
            Masking::Random { ratio, seed } => random_mask(l, ratio, seed)?,
        };
        let patches = patchify(image, self.cfg.patch)?;
        let patches = t.constant(patches);
        let emb = self.patch_embed.forward(t, s, patches)?;
        let pos = t.param(s, self.pos);
        let x = t.add(emb, pos)?;
        let visible = if mask.masked.is_empty() {
            x
        } else {
            t.index_select(x, &mask.visible)?
        };
        let n = mask.visible.len();
        if n == 0 {
            return Err(SpaError::invalid("every patch is masked"));
        }
        let out = self.vit_forward(t, s, visible)?.tokens;
        let cls = t.slice(out, 0, 0, 1)?;
        let latents = t.slice(out, 0, 1, n + 1)?;
        let full = self.scatter_mask_tokens(t, s, latents, &mask)?;
        let fused = self.readout_fuse(t, s, full, cls)?;
        let g = self.cfg.grid();
        let grid = unpatchify(t, fused, g, g)?;
        let grid = t.reshape(grid, &[1, self.cfg.dim, g, g])?;
        Ok(EncoderOutput {
            cls,
            tokens: fused,
            features: self.upsample(t, s, grid)?,
        })
    }
}
