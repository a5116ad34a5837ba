//! Patch transformer encoder.
//!
//! A text image is cut into a raster grid of patches, each patch is
//! flattened and linearly projected, a learnable register token is
//! prepended, and position embeddings are added. A stack of pre-norm
//! transformer blocks (attention then a two-layer GELU MLP, residual around
//! each) produces the visual features, normalized once more at the top.
//!
//! The register token occupies the extra position-embedding slot and flows
//! through to the decoder with the patch tokens.

use crate::real::Real;
use crate::tensor::{attention, normal_init, with_register, Ctx, Tensor};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canvas size every dataset image uses.
pub const IMG_H: usize = 32;
pub const IMG_W: usize = 128;
pub const IMG_C: usize = 3;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("image {h}x{w} not divisible by patch {patch_h}x{patch_w}")]
    BadDimensions { h: usize, w: usize, patch_w: usize, patch_h: usize },
    #[error("bad image: {0}")]
    BadImage(String),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("bad encoder config: {0}")]
    BadConfig(String),
    #[error("non-finite activations after block {block}")]
    NonFinite { block: usize },
}

/// An H x W x 3 image, channels interleaved, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self, EncoderError> {
        if h == 0 || w == 0 || data.len() != h * w * IMG_C {
            return Err(EncoderError::BadImage(format!(
                "{h}x{w}x{IMG_C} needs {} values, got {}",
                h * w * IMG_C,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(EncoderError::BadImage("values outside [0, 1]".into()));
        }
        Ok(ImageTensor { h, w, data })
    }

    /// Bytes scale to [0, 1] by 1/255.
    pub fn from_bytes(h: usize, w: usize, bytes: &[u8]) -> Result<Self, EncoderError> {
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        ImageTensor::new(h, w, data)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.w + x) * IMG_C + c]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_w: usize,
    pub patch_h: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Depth and width used for full-scale runs.
    pub fn paper() -> Self {
        EncoderConfig {
            layers: 12,
            width: 384,
            heads: 6,
            mlp_ratio: 4,
            patch_w: 8,
            patch_h: 4,
            dropout: 0.1,
        }
    }

    /// Small stack for desk-scale runs.
    pub fn toy() -> Self {
        EncoderConfig {
            layers: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            patch_w: 8,
            patch_h: 4,
            dropout: 0.1,
        }
    }

    /// Layers may be zero here (encode degenerates to normalized
    /// embeddings); run-level validation demands at least one.
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.width == 0 || self.heads == 0 {
            return Err(EncoderError::BadConfig("width and heads must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(EncoderError::BadConfig(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.patch_w == 0 || self.patch_h == 0 {
            return Err(EncoderError::BadConfig("patch dims must be positive".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(EncoderError::BadConfig("mlp_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::BadConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Patch tokens per image.
    pub fn n_tokens(&self, h: usize, w: usize) -> Result<usize, EncoderError> {
        if h % self.patch_h != 0 || w % self.patch_w != 0 {
            return Err(EncoderError::BadDimensions {
                h,
                w,
                patch_w: self.patch_w,
                patch_h: self.patch_h,
            });
        }
        Ok((h / self.patch_h) * (w / self.patch_w))
    }

    pub fn patch_len(&self) -> usize {
        self.patch_w * self.patch_h * IMG_C
    }
}

/// Rows are patches in raster order (top row of patches first); each row is
/// the patch flattened in the image's own (y, x, c) order.
pub fn patchify<R: Real>(
    img: &ImageTensor,
    cfg: &EncoderConfig,
) -> Result<Array2<R>, EncoderError> {
    let n = cfg.n_tokens(img.h(), img.w())?;
    let (pw, ph) = (cfg.patch_w, cfg.patch_h);
    let grid_w = img.w() / pw;
    let mut out = Array2::zeros((n, cfg.patch_len()));
    for gy in 0..img.h() / ph {
        for gx in 0..grid_w {
            let row = gy * grid_w + gx;
            let mut col = 0;
            for py in 0..ph {
                for px in 0..pw {
                    for c in 0..IMG_C {
                        out[[row, col]] =
                            R::from_f64(f64::from(img.get(gy * ph + py, gx * pw + px, c)));
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`] for a known image size.
pub fn unpatchify<R: Real>(
    patches: &Array2<R>,
    cfg: &EncoderConfig,
    h: usize,
    w: usize,
) -> Result<ImageTensor, EncoderError> {
    let n = cfg.n_tokens(h, w)?;
    if patches.dim() != (n, cfg.patch_len()) {
        return Err(EncoderError::ShapeMismatch {
            left: patches.dim(),
            right: (n, cfg.patch_len()),
        });
    }
    let (pw, ph) = (cfg.patch_w, cfg.patch_h);
    let grid_w = w / pw;
    let mut data = vec![0.0f32; h * w * IMG_C];
    for row in 0..n {
        let (gy, gx) = (row / grid_w, row % grid_w);
        let mut col = 0;
        for py in 0..ph {
            for px in 0..pw {
                for c in 0..IMG_C {
                    let (y, x) = (gy * ph + py, gx * pw + px);
                    data[(y * w + x) * IMG_C + c] = patches[[row, col]].to_f64() as f32;
                    col += 1;
                }
            }
        }
    }
    ImageTensor::new(h, w, data)
}

/// Linear projection of patch rows plus a per-row position term.
pub fn embed<R: Real>(
    patches: &Tensor<R>,
    e: &Tensor<R>,
    e_pos: &Tensor<R>,
) -> Result<Tensor<R>, EncoderError> {
    let (n, plen) = patches.shape();
    let (er, d) = e.shape();
    if er != plen {
        return Err(EncoderError::ShapeMismatch { left: (n, plen), right: (er, d) });
    }
    if e_pos.shape() != (n, d) {
        return Err(EncoderError::ShapeMismatch { left: (n, d), right: e_pos.shape() });
    }
    Ok(patches.matmul(e).add(e_pos))
}

pub struct BlockParams<R: Real> {
    pub ln1_g: Tensor<R>,
    pub ln1_b: Tensor<R>,
    pub wq: Tensor<R>,
    pub bq: Tensor<R>,
    pub wk: Tensor<R>,
    pub bk: Tensor<R>,
    pub wv: Tensor<R>,
    pub bv: Tensor<R>,
    pub wo: Tensor<R>,
    pub bo: Tensor<R>,
    pub ln2_g: Tensor<R>,
    pub ln2_b: Tensor<R>,
    pub w1: Tensor<R>,
    pub b1: Tensor<R>,
    pub w2: Tensor<R>,
    pub b2: Tensor<R>,
}

impl<R: Real> BlockParams<R> {
    pub fn init(d: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        let m = d * mlp_ratio;
        let w = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
            Tensor::param(normal_init::<R>(r, c, 0.02, rng))
        };
        BlockParams {
            ln1_g: Tensor::param(Array2::from_elem((1, d), R::one())),
            ln1_b: Tensor::param(Array2::zeros((1, d))),
            wq: w(d, d, rng),
            bq: Tensor::param(Array2::zeros((1, d))),
            wk: w(d, d, rng),
            bk: Tensor::param(Array2::zeros((1, d))),
            wv: w(d, d, rng),
            bv: Tensor::param(Array2::zeros((1, d))),
            wo: w(d, d, rng),
            bo: Tensor::param(Array2::zeros((1, d))),
            ln2_g: Tensor::param(Array2::from_elem((1, d), R::one())),
            ln2_b: Tensor::param(Array2::zeros((1, d))),
            w1: w(d, m, rng),
            b1: Tensor::param(Array2::zeros((1, m))),
            w2: w(m, d, rng),
            b2: Tensor::param(Array2::zeros((1, d))),
        }
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor<R>)>) {
        let pairs: [(&str, &Tensor<R>); 16] = [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ];
        for (name, t) in pairs {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
    }
}

pub struct EncoderParams<R: Real> {
    pub e: Tensor<R>,
    pub register: Tensor<R>,
    pub e_pos: Tensor<R>,
    pub blocks: Vec<BlockParams<R>>,
    pub ln_f_g: Tensor<R>,
    pub ln_f_b: Tensor<R>,
}

impl<R: Real> EncoderParams<R> {
    /// Position table is sized for h x w images: one register slot plus one
    /// slot per patch.
    pub fn init(
        cfg: &EncoderConfig,
        h: usize,
        w: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let n = cfg.n_tokens(h, w)?;
        let d = cfg.width;
        let e = Tensor::param(normal_init::<R>(cfg.patch_len(), d, 0.02, rng));
        let register = Tensor::param(normal_init::<R>(1, d, 0.02, rng));
        let e_pos = Tensor::param(normal_init::<R>(n + 1, d, 0.02, rng));
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams::init(d, cfg.mlp_ratio, rng))
            .collect();
        Ok(EncoderParams {
            e,
            register,
            e_pos,
            blocks,
            ln_f_g: Tensor::param(Array2::from_elem((1, d), R::one())),
            ln_f_b: Tensor::param(Array2::zeros((1, d))),
        })
    }

    pub fn named(&self) -> Vec<(String, Tensor<R>)> {
        let mut out = vec![
            ("enc.e".to_string(), self.e.clone()),
            ("enc.register".to_string(), self.register.clone()),
            ("enc.e_pos".to_string(), self.e_pos.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("enc.b{i}"), &mut out);
        }
        out.push(("enc.ln_f_g".to_string(), self.ln_f_g.clone()));
        out.push(("enc.ln_f_b".to_string(), self.ln_f_b.clone()));
        out
    }
}

/// Pre-norm block: attention sublayer then MLP sublayer, residual around
/// each, dropout on each sublayer output.
pub fn encoder_block<R: Real>(
    z: &Tensor<R>,
    p: &BlockParams<R>,
    heads: usize,
    dropout: f64,
    batch: usize,
    ctx: &Ctx,
    index: usize,
) -> Result<Tensor<R>, EncoderError> {
    let ln1 = z.layer_norm(&p.ln1_g, &p.ln1_b, R::from_f64(LN_EPS));
    let q = ln1.matmul(&p.wq).add_bias(&p.bq);
    let k = ln1.matmul(&p.wk).add_bias(&p.bk);
    let v = ln1.matmul(&p.wv).add_bias(&p.bv);
    let att = attention(&q, &k, &v, heads, batch, None);
    let z1 = z.add(&att.matmul(&p.wo).add_bias(&p.bo).dropout(dropout, ctx));
    let ln2 = z1.layer_norm(&p.ln2_g, &p.ln2_b, R::from_f64(LN_EPS));
    let m = ln2.matmul(&p.w1).add_bias(&p.b1).gelu().matmul(&p.w2).add_bias(&p.b2);
    let z2 = z1.add(&m.dropout(dropout, ctx));
    if !z2.value().iter().all(|v| v.is_finite()) {
        return Err(EncoderError::NonFinite { block: index });
    }
    Ok(z2)
}

/// Full encoder over a batch. Output has `images.len() * (N + 1)` rows:
/// per sample, the register token's row first, then the N patch tokens.
pub fn encode<R: Real>(
    params: &EncoderParams<R>,
    cfg: &EncoderConfig,
    images: &[ImageTensor],
    ctx: &Ctx,
) -> Result<Tensor<R>, EncoderError> {
    if images.is_empty() {
        return Err(EncoderError::BadImage("empty batch".into()));
    }
    let (h, w) = (images[0].h(), images[0].w());
    let n = cfg.n_tokens(h, w)?;
    if params.e_pos.shape().0 != n + 1 {
        return Err(EncoderError::ShapeMismatch {
            left: params.e_pos.shape(),
            right: (n + 1, cfg.width),
        });
    }
    let b = images.len();
    let mut stacked = Array2::zeros((b * n, cfg.patch_len()));
    for (i, img) in images.iter().enumerate() {
        if (img.h(), img.w()) != (h, w) {
            return Err(EncoderError::BadImage(format!(
                "image {i} is {}x{}, batch is {h}x{w}",
                img.h(),
                img.w()
            )));
        }
        let p = patchify::<R>(img, cfg)?;
        stacked.slice_mut(ndarray::s![i * n..(i + 1) * n, ..]).assign(&p);
    }
    let tokens = Tensor::constant(stacked).matmul(&params.e);
    let mut z = with_register(&tokens, &params.register, b)
        .add_tiled(&params.e_pos, b)
        .dropout(cfg.dropout, ctx);
    for (i, blk) in params.blocks.iter().enumerate() {
        z = encoder_block(&z, blk, cfg.heads, cfg.dropout, b, ctx, i)?;
    }
    let out = z.layer_norm(&params.ln_f_g, &params.ln_f_b, R::from_f64(LN_EPS));
    if !out.value().iter().all(|v| v.is_finite()) {
        return Err(EncoderError::NonFinite { block: cfg.layers });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            patch_w: 8,
            patch_h: 4,
            dropout: 0.1,
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..h * w * IMG_C).map(|_| rng.gen::<f32>()).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn default_grid_is_128_patches_of_len_96() {
        let cfg = EncoderConfig::paper();
        assert_eq!(cfg.n_tokens(IMG_H, IMG_W).unwrap(), 128);
        assert_eq!(cfg.patch_len(), 96);
        let img = random_image(IMG_H, IMG_W, 0);
        let p = patchify::<f64>(&img, &cfg).unwrap();
        assert_eq!(p.dim(), (128, 96));
    }

    #[test]
    fn constant_image_gives_constant_rows() {
        let cfg = tiny_cfg();
        let img = ImageTensor::new(8, 16, vec![0.25; 8 * 16 * 3]).unwrap();
        let p = patchify::<f64>(&img, &cfg).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn patchify_layout_golden() {
        // 8x16 image, 8x4 patches: grid is 2x2. Pixel value encodes its
        // coordinates so the layout is fully pinned.
        let (h, w) = (8, 16);
        let mut data = vec![0.0f32; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[(y * w + x) * 3 + c] = (y * w + x) as f32 / 1000.0 + c as f32 / 10.0;
                }
            }
        }
        // Scale into [0,1].
        let data: Vec<f32> = data.iter().map(|v| v / 2.0).collect();
        let img = ImageTensor::new(h, w, data).unwrap();
        let p = patchify::<f64>(&img, &tiny_cfg()).unwrap();
        // Row 3 is the patch at grid (1, 1): pixels y in 4..8, x in 8..16.
        // Its first entry is (y=4, x=8, c=0).
        let want = f64::from(((4 * w + 8) as f32 / 1000.0) / 2.0);
        assert!((p[[3, 0]] - want).abs() < 1e-9);
        // Entry after the first pixel's three channels is (y=4, x=9, c=0).
        let want = f64::from(((4 * w + 9) as f32 / 1000.0) / 2.0);
        assert!((p[[3, 3]] - want).abs() < 1e-9);
    }

    #[test]
    fn unpatchify_round_trips() {
        let cfg = tiny_cfg();
        for seed in 0..5 {
            let img = random_image(8, 16, seed);
            let p = patchify::<f64>(&img, &cfg).unwrap();
            let back = unpatchify(&p, &cfg, 8, 16).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let cfg = tiny_cfg();
        let img = ImageTensor::new(6, 16, vec![0.0; 6 * 16 * 3]).unwrap();
        assert_eq!(
            patchify::<f64>(&img, &cfg).err(),
            Some(EncoderError::BadDimensions { h: 6, w: 16, patch_w: 8, patch_h: 4 })
        );
        assert!(ImageTensor::new(4, 4, vec![0.0; 3]).is_err());
        assert!(ImageTensor::new(1, 1, vec![1.5, 0.0, 0.0]).is_err());
    }

    #[test]
    fn embed_degenerate_cases_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 4;
        let plen = 6;
        let d = 5;
        let patches = Tensor::<f64>::constant(normal_init(n, plen, 1.0, &mut rng));
        let e = Tensor::param(normal_init(plen, d, 1.0, &mut rng));
        let pos = Tensor::param(normal_init(n, d, 1.0, &mut rng));
        // E = 0 leaves only the position term.
        let zero_e = Tensor::param(Array2::zeros((plen, d)));
        let z = embed(&patches, &zero_e, &pos).unwrap();
        assert_eq!(z.to_owned_value(), pos.to_owned_value());
        // pos = 0 with identity-padded patches selects rows of E.
        let eye_pad = Tensor::constant(Array2::from_shape_fn((n, plen), |(i, j)| {
            if i == j { 1.0 } else { 0.0 }
        }));
        let zero_pos = Tensor::param(Array2::zeros((n, d)));
        let z = embed(&eye_pad, &e, &zero_pos).unwrap();
        for i in 0..n {
            for j in 0..d {
                assert_eq!(z.value()[[i, j]], e.value()[[i, j]]);
            }
        }
        // Random inputs vs a triple-loop oracle.
        let z = embed(&patches, &e, &pos).unwrap();
        let (pv, ev, posv) = (patches.to_owned_value(), e.to_owned_value(), pos.to_owned_value());
        for i in 0..n {
            for j in 0..d {
                let mut want = posv[[i, j]];
                for k in 0..plen {
                    want += pv[[i, k]] * ev[[k, j]];
                }
                assert!((z.value()[[i, j]] - want).abs() < 1e-12);
            }
        }
        // Shape mismatches are reported.
        let bad = Tensor::param(Array2::<f64>::zeros((plen + 1, d)));
        assert!(embed(&patches, &bad, &pos).is_err());
        let bad_pos = Tensor::param(Array2::<f64>::zeros((n + 1, d)));
        assert!(embed(&patches, &e, &bad_pos).is_err());
    }

    #[test]
    fn zeroed_projections_make_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 16;
        let mut p = BlockParams::<f64>::init(d, 2, &mut rng);
        p.wo = Tensor::param(Array2::zeros((d, d)));
        p.w2 = Tensor::param(Array2::zeros((d * 2, d)));
        let z = Tensor::constant(normal_init(6, d, 1.0, &mut rng));
        let out = encoder_block(&z, &p, 2, 0.1, 1, &Ctx::eval(), 0).unwrap();
        assert_eq!(out.to_owned_value(), z.to_owned_value());
    }

    #[test]
    fn block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = BlockParams::<f64>::init(16, 2, &mut rng);
        let z = Tensor::constant(normal_init(10, 16, 1.0, &mut rng));
        let out = encoder_block(&z, &p, 2, 0.1, 2, &Ctx::eval(), 0).unwrap();
        assert_eq!(out.shape(), (10, 16));
    }

    #[test]
    fn single_head_block_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (n, d) = (4, 8);
        let mut p = BlockParams::<f64>::init(d, 2, &mut rng);
        // Kill the MLP half so the oracle only needs the attention sublayer.
        p.w2 = Tensor::param(Array2::zeros((d * 2, d)));
        p.b2 = Tensor::param(Array2::zeros((1, d)));
        let z = Tensor::constant(normal_init(n, d, 1.0, &mut rng));
        let got = encoder_block(&z, &p, 1, 0.1, 1, &Ctx::eval(), 0)
            .unwrap()
            .to_owned_value();

        // Oracle: LN, projections, softmax(QK^T/sqrt(d))V, output proj,
        // residual, all by hand.
        let zv = z.to_owned_value();
        let mut ln = zv.clone();
        for i in 0..n {
            let row = zv.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                ln[[i, j]] = (zv[[i, j]] - mean) / (var + LN_EPS).sqrt()
                    * p.ln1_g.value()[[0, j]]
                    + p.ln1_b.value()[[0, j]];
            }
        }
        let q = ln.dot(&p.wq.to_owned_value());
        let k = ln.dot(&p.wk.to_owned_value());
        let v = ln.dot(&p.wv.to_owned_value());
        let mut att = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let mut weights = vec![0.0; n];
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..d {
                    s += q[[i, c]] * k[[j, c]];
                }
                weights[j] = (s / (d as f64).sqrt()).exp();
            }
            let total: f64 = weights.iter().sum();
            for j in 0..n {
                for c in 0..d {
                    att[[i, c]] += weights[j] / total * v[[j, c]];
                }
            }
        }
        let want = &zv + &att.dot(&p.wo.to_owned_value());
        for i in 0..n {
            for j in 0..d {
                assert!(
                    (got[[i, j]] - want[[i, j]]).abs() < 1e-10,
                    "[{i},{j}]: {} vs {}",
                    got[[i, j]],
                    want[[i, j]]
                );
            }
        }
    }

    #[test]
    fn zero_layers_encode_is_layernorm_of_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cfg = tiny_cfg();
        cfg.layers = 0;
        let params = EncoderParams::<f64>::init(&cfg, 8, 16, &mut rng).unwrap();
        let img = random_image(8, 16, 1);
        let got = encode(&params, &cfg, &[img.clone()], &Ctx::eval())
            .unwrap()
            .to_owned_value();
        let p = Tensor::constant(patchify::<f64>(&img, &cfg).unwrap());
        let tokens = p.matmul(&params.e);
        let z0 = with_register(&tokens, &params.register, 1).add_tiled(&params.e_pos, 1);
        let want = z0
            .layer_norm(&params.ln_f_g, &params.ln_f_b, LN_EPS)
            .to_owned_value();
        assert_eq!(got, want);
    }

    #[test]
    fn encode_is_deterministic_in_eval_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = tiny_cfg();
        let params = EncoderParams::<f64>::init(&cfg, 8, 16, &mut rng).unwrap();
        let img = random_image(8, 16, 2);
        let a = encode(&params, &cfg, &[img.clone()], &Ctx::eval()).unwrap();
        let b = encode(&params, &cfg, &[img], &Ctx::eval()).unwrap();
        assert_eq!(a.to_owned_value(), b.to_owned_value());
        assert_eq!(a.shape(), (5, 16));
    }

    #[test]
    fn batch_neighbors_cannot_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = tiny_cfg();
        let params = EncoderParams::<f64>::init(&cfg, 8, 16, &mut rng).unwrap();
        let a = random_image(8, 16, 3);
        let b = random_image(8, 16, 4);
        let b2 = random_image(8, 16, 5);
        let out1 = encode(&params, &cfg, &[a.clone(), b], &Ctx::eval()).unwrap();
        let out2 = encode(&params, &cfg, &[a, b2], &Ctx::eval()).unwrap();
        let rows = 5;
        for i in 0..rows {
            for j in 0..16 {
                assert_eq!(
                    out1.value()[[i, j]],
                    out2.value()[[i, j]],
                    "sample 0 row {i} changed when its neighbor did"
                );
            }
        }
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cfg = tiny_cfg();
        let params = EncoderParams::<f64>::init(&cfg, 8, 16, &mut rng).unwrap();
        let img = random_image(8, 16, 6);
        let loss = |params: &EncoderParams<f64>| {
            encode(params, &cfg, &[img.clone()], &Ctx::eval())
                .unwrap()
                .mean_all()
        };
        let l = loss(&params);
        l.backward();
        let h = 1e-5;
        let mut rng2 = ChaCha8Rng::seed_from_u64(15);
        for target in [&params.e, &params.e_pos, &params.register, &params.blocks[0].wq] {
            let g = target.grad().expect("missing grad");
            let (rows, cols) = target.shape();
            for _ in 0..4 {
                let (i, j) = (rng2.gen_range(0..rows), rng2.gen_range(0..cols));
                let base = target.to_owned_value();
                let mut up = base.clone();
                up[[i, j]] += h;
                target.set_value(up);
                let fu = loss(&params).scalar();
                let mut dn = base.clone();
                dn[[i, j]] -= h;
                target.set_value(dn);
                let fd = loss(&params).scalar();
                target.set_value(base);
                let numeric = (fu - fd) / (2.0 * h);
                let analytic = g[[i, j]];
                let rel =
                    (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6);
                assert!(
                    rel < 1e-3,
                    "[{i},{j}]: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn poisoned_weights_surface_non_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cfg = tiny_cfg();
        let params = EncoderParams::<f64>::init(&cfg, 8, 16, &mut rng).unwrap();
        let mut bad = params.blocks[0].wo.to_owned_value();
        bad[[0, 0]] = f64::NAN;
        params.blocks[0].wo.set_value(bad);
        let img = random_image(8, 16, 7);
        assert_eq!(
            encode(&params, &cfg, &[img], &Ctx::eval()).err(),
            Some(EncoderError::NonFinite { block: 0 })
        );
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = EncoderConfig::paper();
        assert!(cfg.validate().is_ok());
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::toy();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::toy();
        cfg.mlp_ratio = 0;
        assert!(cfg.validate().is_err());
    }
}
