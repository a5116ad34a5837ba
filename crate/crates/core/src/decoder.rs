//! Two-stream character decoder.
//!
//! Stage 1 refines the context tokens: masked self-attention over the
//! context rows, then unmasked cross-attention into the visual tokens.
//! Stage 2 sends learned position queries through the refined context under
//! the query mask, then into the visual tokens again. A linear head scores
//! every position over the character classes plus the end marker.
//!
//! The mask kinds keep the streams honest: a content row may include its
//! own token, a query row never does, so position i's logits depend only on
//! tokens decoded strictly before i in the active order.

use crate::charset::TokenSequence;
use crate::mask::{mask_from_permutation, AttentionMask, MaskKind, Permutation};
use crate::real::Real;
use crate::tensor::{attention, gather_rows, normal_init, Ctx, Tensor};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DecoderError {
    #[error("shape mismatch at {what}: {left:?} vs {right:?}")]
    ShapeMismatch { what: String, left: (usize, usize), right: (usize, usize) },
    #[error("mask kind error: expected {expected:?}, got {got:?}")]
    MaskKind { expected: MaskKind, got: MaskKind },
    #[error("bad decoder config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Longest label in characters; context and query streams carry
    /// t_max + 1 rows.
    pub t_max: usize,
    pub d_model: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn new(t_max: usize, d_model: usize, heads: usize, dropout: f64) -> Self {
        DecoderConfig { t_max, d_model, heads, dropout }
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.t_max == 0 {
            return Err(DecoderError::BadConfig("t_max must be positive".into()));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(DecoderError::BadConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DecoderError::BadConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.t_max + 1
    }
}

/// One multi-head attention application's projections.
pub struct MhaParams<R: Real> {
    pub wq: Tensor<R>,
    pub bq: Tensor<R>,
    pub wk: Tensor<R>,
    pub bk: Tensor<R>,
    pub wv: Tensor<R>,
    pub bv: Tensor<R>,
    pub wo: Tensor<R>,
    pub bo: Tensor<R>,
}

impl<R: Real> MhaParams<R> {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = |rng: &mut ChaCha8Rng| Tensor::param(normal_init::<R>(d, d, 0.02, rng));
        MhaParams {
            wq: w(rng),
            bq: Tensor::param(Array2::zeros((1, d))),
            wk: w(rng),
            bk: Tensor::param(Array2::zeros((1, d))),
            wv: w(rng),
            bv: Tensor::param(Array2::zeros((1, d))),
            wo: w(rng),
            bo: Tensor::param(Array2::zeros((1, d))),
        }
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor<R>)>) {
        for (name, t) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
    }

    /// Projected attention with residual left to the caller.
    fn apply(
        &self,
        q: &Tensor<R>,
        kv: &Tensor<R>,
        heads: usize,
        blocks: usize,
        gate: Option<&Tensor<R>>,
    ) -> Tensor<R> {
        let qp = q.matmul(&self.wq).add_bias(&self.bq);
        let kp = kv.matmul(&self.wk).add_bias(&self.bk);
        let vp = kv.matmul(&self.wv).add_bias(&self.bv);
        attention(&qp, &kp, &vp, heads, blocks, gate).matmul(&self.wo).add_bias(&self.bo)
    }
}

pub struct DecoderParams<R: Real> {
    /// Token table over the whole id space (characters, the three markers).
    pub embedding: Tensor<R>,
    /// Positional term added to the context rows.
    pub pos_ctx: Tensor<R>,
    /// The learnable position queries p.
    pub pos_q: Tensor<R>,
    pub mha_c: MhaParams<R>,
    pub mha_cv: MhaParams<R>,
    pub mha_p: MhaParams<R>,
    pub mha_f: MhaParams<R>,
    pub head_w: Tensor<R>,
    pub head_b: Tensor<R>,
}

impl<R: Real> DecoderParams<R> {
    /// `id_space` counts every token id (S + 3); `classes` is S + 1.
    pub fn init(
        cfg: &DecoderConfig,
        id_space: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, DecoderError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let rows = cfg.rows();
        Ok(DecoderParams {
            embedding: Tensor::param(normal_init::<R>(id_space, d, 0.02, rng)),
            pos_ctx: Tensor::param(normal_init::<R>(rows, d, 0.02, rng)),
            pos_q: Tensor::param(normal_init::<R>(rows, d, 0.02, rng)),
            mha_c: MhaParams::init(d, rng),
            mha_cv: MhaParams::init(d, rng),
            mha_p: MhaParams::init(d, rng),
            mha_f: MhaParams::init(d, rng),
            head_w: Tensor::param(normal_init::<R>(d, classes, 0.02, rng)),
            head_b: Tensor::param(Array2::zeros((1, classes))),
        })
    }

    pub fn named(&self) -> Vec<(String, Tensor<R>)> {
        let mut out = vec![
            ("dec.embedding".to_string(), self.embedding.clone()),
            ("dec.pos_ctx".to_string(), self.pos_ctx.clone()),
            ("dec.pos_q".to_string(), self.pos_q.clone()),
        ];
        self.mha_c.named("dec.mha_c", &mut out);
        self.mha_cv.named("dec.mha_cv", &mut out);
        self.mha_p.named("dec.mha_p", &mut out);
        self.mha_f.named("dec.mha_f", &mut out);
        out.push(("dec.head_w".to_string(), self.head_w.clone()));
        out.push(("dec.head_b".to_string(), self.head_b.clone()));
        out
    }

    /// Context rows for a batch: per sample, embeddings of [B] plus the T
    /// context tokens, with the positional term added.
    pub fn context_embed(
        &self,
        tokens: &[TokenSequence],
        cfg: &DecoderConfig,
    ) -> Result<Tensor<R>, DecoderError> {
        let rows = cfg.rows();
        let mut ids = Vec::with_capacity(tokens.len() * rows);
        for (i, seq) in tokens.iter().enumerate() {
            let ctx = seq.context_ids();
            if ctx.len() != rows {
                return Err(DecoderError::ShapeMismatch {
                    what: format!("token sequence {i}"),
                    left: (ctx.len(), 1),
                    right: (rows, 1),
                });
            }
            ids.extend_from_slice(ctx);
        }
        Ok(gather_rows(&self.embedding, &ids).add_tiled(&self.pos_ctx, tokens.len()))
    }

    /// Position queries tiled across the batch.
    pub fn queries(&self, batch: usize, cfg: &DecoderConfig) -> Tensor<R> {
        Tensor::constant(Array2::zeros((batch * cfg.rows(), cfg.d_model)))
            .add_tiled(&self.pos_q, batch)
    }
}

fn check_widths<R: Real>(
    what: &str,
    a: &Tensor<R>,
    b: &Tensor<R>,
) -> Result<(), DecoderError> {
    if a.shape().1 != b.shape().1 {
        return Err(DecoderError::ShapeMismatch {
            what: what.to_string(),
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Stage 1 with an explicit gate tensor (hard bits or a straight-through
/// node). Rows of `gate` line up with the context rows.
pub fn stage1_gated<R: Real>(
    c: &Tensor<R>,
    z: &Tensor<R>,
    gate: &Tensor<R>,
    params: &DecoderParams<R>,
    cfg: &DecoderConfig,
    blocks: usize,
    ctx: &Ctx,
) -> Result<Tensor<R>, DecoderError> {
    check_widths("stage1 c vs z", c, z)?;
    let attn_c = c.add(&params.mha_c.apply(c, c, cfg.heads, blocks, Some(gate)).dropout(cfg.dropout, ctx));
    let attn_cv = attn_c
        .add(&params.mha_cv.apply(&attn_c, z, cfg.heads, blocks, None).dropout(cfg.dropout, ctx));
    Ok(attn_cv)
}

/// Stage 1 for a content-kind mask: context self-attention under the mask,
/// then unmasked cross-attention into the visual tokens.
pub fn stage1<R: Real>(
    c: &Tensor<R>,
    z: &Tensor<R>,
    mask: &AttentionMask,
    params: &DecoderParams<R>,
    cfg: &DecoderConfig,
    blocks: usize,
    ctx: &Ctx,
) -> Result<Tensor<R>, DecoderError> {
    if mask.kind() != MaskKind::Content {
        return Err(DecoderError::MaskKind { expected: MaskKind::Content, got: mask.kind() });
    }
    let gate = Tensor::constant(mask.content_self_gate::<R>());
    stage1_gated(c, z, &gate, params, cfg, blocks, ctx)
}

/// Stage 2 with an explicit gate tensor.
pub fn stage2_gated<R: Real>(
    p: &Tensor<R>,
    attn_cv: &Tensor<R>,
    z: &Tensor<R>,
    gate: &Tensor<R>,
    params: &DecoderParams<R>,
    cfg: &DecoderConfig,
    blocks: usize,
    ctx: &Ctx,
) -> Result<Tensor<R>, DecoderError> {
    check_widths("stage2 p vs context", p, attn_cv)?;
    check_widths("stage2 p vs z", p, z)?;
    let attn_p = p.add(
        &params.mha_p.apply(p, attn_cv, cfg.heads, blocks, Some(gate)).dropout(cfg.dropout, ctx),
    );
    let attn_f = attn_p
        .add(&params.mha_f.apply(&attn_p, z, cfg.heads, blocks, None).dropout(cfg.dropout, ctx));
    Ok(attn_f)
}

/// Stage 2 for a query-kind mask: position queries read the refined context
/// under the mask, then the visual tokens unmasked.
pub fn stage2<R: Real>(
    p: &Tensor<R>,
    attn_cv: &Tensor<R>,
    z: &Tensor<R>,
    mask: &AttentionMask,
    params: &DecoderParams<R>,
    cfg: &DecoderConfig,
    blocks: usize,
    ctx: &Ctx,
) -> Result<Tensor<R>, DecoderError> {
    if mask.kind() != MaskKind::Query {
        return Err(DecoderError::MaskKind { expected: MaskKind::Query, got: mask.kind() });
    }
    let gate = Tensor::constant(mask.query_gate::<R>());
    stage2_gated(p, attn_cv, z, &gate, params, cfg, blocks, ctx)
}

/// Affine map from decoder rows to character classes plus the end marker.
pub fn head<R: Real>(attn_f: &Tensor<R>, params: &DecoderParams<R>) -> Tensor<R> {
    attn_f.matmul(&params.head_w).add_bias(&params.head_b)
}

/// All intermediates of one decode, for tracing and testing.
pub struct DecoderState<R: Real> {
    pub attn_c: Tensor<R>,
    pub attn_cv: Tensor<R>,
    pub attn_p: Tensor<R>,
    pub attn_f: Tensor<R>,
    pub logits: Tensor<R>,
}

/// Full decode from explicit gate tensors. `use_cha` off skips stage 1:
/// position queries then read the raw context embeddings, and only the
/// final cross-attention into the visual tokens remains.
#[allow(clippy::too_many_arguments)]
pub fn decode_gated<R: Real>(
    tokens: &[TokenSequence],
    z: &Tensor<R>,
    content_gate: &Tensor<R>,
    query_gate: &Tensor<R>,
    params: &DecoderParams<R>,
    cfg: &DecoderConfig,
    use_cha: bool,
    ctx: &Ctx,
) -> Result<DecoderState<R>, DecoderError> {
    let blocks = tokens.len();
    if blocks == 0 {
        return Err(DecoderError::BadConfig("empty batch".into()));
    }
    if z.shape().0 % blocks != 0 {
        return Err(DecoderError::ShapeMismatch {
            what: "visual rows vs batch".to_string(),
            left: z.shape(),
            right: (blocks, cfg.d_model),
        });
    }
    let c = params.context_embed(tokens, cfg)?;
    check_widths("context vs visual", &c, z)?;
    let attn_cv = if use_cha {
        stage1_gated(&c, z, content_gate, params, cfg, blocks, ctx)?
    } else {
        c.clone()
    };
    let p = params.queries(blocks, cfg);
    let attn_p = p.add(
        &params
            .mha_p
            .apply(&p, &attn_cv, cfg.heads, blocks, Some(query_gate))
            .dropout(cfg.dropout, ctx),
    );
    let attn_f = attn_p
        .add(&params.mha_f.apply(&attn_p, z, cfg.heads, blocks, None).dropout(cfg.dropout, ctx));
    let logits = head(&attn_f, params);
    Ok(DecoderState { attn_c: c, attn_cv, attn_p, attn_f, logits })
}

/// Teacher-forced decode under one permutation: hard masks derived from the
/// order, content variant for stage 1, query variant for stage 2.
pub fn decode_training<R: Real>(
    tokens: &[TokenSequence],
    z: &Tensor<R>,
    perm: &Permutation,
    params: &DecoderParams<R>,
    cfg: &DecoderConfig,
    use_cha: bool,
    ctx: &Ctx,
) -> Result<Tensor<R>, DecoderError> {
    if perm.t() != cfg.t_max {
        return Err(DecoderError::ShapeMismatch {
            what: "permutation length".to_string(),
            left: (perm.t(), 1),
            right: (cfg.t_max, 1),
        });
    }
    let content = Tensor::constant(
        mask_from_permutation(perm, MaskKind::Content).content_self_gate::<R>(),
    );
    let query =
        Tensor::constant(mask_from_permutation(perm, MaskKind::Query).query_gate::<R>());
    let state = decode_gated(tokens, z, &content, &query, params, cfg, use_cha, ctx)?;
    Ok(state.logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charset::{encode as tok_encode, Charset};
    use crate::mask::cloze_content_mask;
    use rand::SeedableRng;

    const T: usize = 4;

    fn cfg() -> DecoderConfig {
        DecoderConfig::new(T, 12, 2, 0.1)
    }

    fn setup(seed: u64) -> (DecoderParams<f64>, DecoderConfig, Charset) {
        let charset = Charset::train94();
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params =
            DecoderParams::init(&c, charset.id_space(), charset.class_count(), &mut rng)
                .unwrap();
        (params, c, charset)
    }

    fn visual(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::constant(normal_init(rows, d, 1.0, &mut rng))
    }

    fn zero_like(t: &Tensor<f64>) -> Tensor<f64> {
        let (r, c) = t.shape();
        Tensor::param(Array2::zeros((r, c)))
    }

    #[test]
    fn zeroed_projections_make_stage1_identity() {
        let (mut params, cfg, charset) = setup(0);
        params.mha_c.wo = zero_like(&params.mha_c.wo);
        params.mha_cv.wo = zero_like(&params.mha_cv.wo);
        let tokens = vec![tok_encode("ab", &charset, T).unwrap()];
        let c = params.context_embed(&tokens, &cfg).unwrap();
        let z = visual(6, cfg.d_model, 1);
        let mask = mask_from_permutation(&Permutation::canonical(T), MaskKind::Content);
        let out = stage1(&c, &z, &mask, &params, &cfg, 1, &Ctx::eval()).unwrap();
        assert_eq!(out.to_owned_value(), c.to_owned_value());
    }

    #[test]
    fn stage1_rejects_query_mask_and_stage2_rejects_content() {
        let (params, cfg, charset) = setup(1);
        let tokens = vec![tok_encode("ab", &charset, T).unwrap()];
        let c = params.context_embed(&tokens, &cfg).unwrap();
        let z = visual(6, cfg.d_model, 2);
        let qmask = mask_from_permutation(&Permutation::canonical(T), MaskKind::Query);
        assert_eq!(
            stage1(&c, &z, &qmask, &params, &cfg, 1, &Ctx::eval()).err(),
            Some(DecoderError::MaskKind { expected: MaskKind::Content, got: MaskKind::Query })
        );
        let cmask = cloze_content_mask(T);
        let p = params.queries(1, &cfg);
        assert_eq!(
            stage2(&p, &c, &z, &cmask, &params, &cfg, 1, &Ctx::eval()).err(),
            Some(DecoderError::MaskKind { expected: MaskKind::Query, got: MaskKind::Content })
        );
    }

    #[test]
    fn bos_only_row_depends_only_on_bos() {
        let (params, cfg, charset) = setup(2);
        let z = visual(6, cfg.d_model, 3);
        // Hand-crafted content gate: context row 2 (token y2) sees only the
        // [B] row. Remaining rows follow the canonical order.
        let base = mask_from_permutation(&Permutation::canonical(T), MaskKind::Content);
        let mut gate = base.content_self_gate::<f64>();
        for j in 0..=T {
            gate[[2, j]] = if j == 0 { 1.0 } else { 0.0 };
        }
        let gate = Tensor::constant(gate);
        let run = |label: &str| {
            let tokens = vec![tok_encode(label, &charset, T).unwrap()];
            let c = params.context_embed(&tokens, &cfg).unwrap();
            stage1_gated(&c, &z, &gate, &params, &cfg, 1, &Ctx::eval())
                .unwrap()
                .to_owned_value()
        };
        // Perturb every blocked token; y2 itself stays fixed because the
        // residual feeds the row's own embedding back in regardless of the
        // gate.
        let a = run("abcd");
        let b = run("wbyz");
        for j in 0..cfg.d_model {
            assert_eq!(a[[2, j]], b[[2, j]], "column {j} leaked");
        }
        // Sanity: rows whose gates include the tokens did change.
        assert!((0..cfg.d_model).any(|j| a[[3, j]] != b[[3, j]]));
    }

    #[test]
    fn stage1_single_head_matches_masked_softmax_oracle() {
        let t = 3;
        let cfg = DecoderConfig::new(t, 8, 1, 0.1);
        let charset = Charset::train94();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params =
            DecoderParams::<f64>::init(&cfg, charset.id_space(), charset.class_count(), &mut rng)
                .unwrap();
        let tokens = vec![tok_encode("hi", &charset, t).unwrap()];
        let c = params.context_embed(&tokens, &cfg).unwrap();
        let z = visual(5, cfg.d_model, 5);
        let mask = mask_from_permutation(&Permutation::canonical(t), MaskKind::Content);
        let got = stage1(&c, &z, &mask, &params, &cfg, 1, &Ctx::eval())
            .unwrap()
            .to_owned_value();

        // Oracle with explicit loops and the same gate layout.
        let gate = mask.content_self_gate::<f64>();
        let d = cfg.d_model;
        let rows = t + 1;
        let cv = c.to_owned_value();
        let project = |x: &Array2<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let mut out = x.dot(&w.to_owned_value());
            for i in 0..out.dim().0 {
                for j in 0..d {
                    out[[i, j]] += b.value()[[0, j]];
                }
            }
            out
        };
        let masked_attention = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, gate: Option<&Array2<f64>>| {
            let scale = 1.0 / (d as f64).sqrt();
            let mut out = Array2::<f64>::zeros((q.dim().0, d));
            for i in 0..q.dim().0 {
                let mut weights = vec![0.0; k.dim().0];
                for j in 0..k.dim().0 {
                    if let Some(g) = gate {
                        if g[[i, j]] == 0.0 {
                            continue;
                        }
                    }
                    let mut s = 0.0;
                    for cdim in 0..d {
                        s += q[[i, cdim]] * k[[j, cdim]];
                    }
                    weights[j] = (s * scale).exp();
                }
                let total: f64 = weights.iter().sum();
                for j in 0..k.dim().0 {
                    for cdim in 0..d {
                        out[[i, cdim]] += weights[j] / total * v[[j, cdim]];
                    }
                }
            }
            out
        };
        let mp = &params.mha_c;
        let self_att = masked_attention(
            &project(&cv, &mp.wq, &mp.bq),
            &project(&cv, &mp.wk, &mp.bk),
            &project(&cv, &mp.wv, &mp.bv),
            Some(&gate),
        );
        let attn_c = &cv + &project(&self_att, &mp.wo, &mp.bo);
        let zp = z.to_owned_value();
        let mx = &params.mha_cv;
        let cross = masked_attention(
            &project(&attn_c, &mx.wq, &mx.bq),
            &project(&zp, &mx.wk, &mx.bk),
            &project(&zp, &mx.wv, &mx.bv),
            None,
        );
        let want = &attn_c + &project(&cross, &mx.wo, &mx.bo);
        for i in 0..rows {
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
    fn zeroed_projections_make_stage2_queries() {
        let (mut params, cfg, charset) = setup(6);
        params.mha_p.wo = zero_like(&params.mha_p.wo);
        params.mha_f.wo = zero_like(&params.mha_f.wo);
        let tokens = vec![tok_encode("ab", &charset, T).unwrap()];
        let c = params.context_embed(&tokens, &cfg).unwrap();
        let z = visual(6, cfg.d_model, 7);
        let mask = mask_from_permutation(&Permutation::canonical(T), MaskKind::Query);
        let p = params.queries(1, &cfg);
        let out = stage2(&p, &c, &z, &mask, &params, &cfg, 1, &Ctx::eval()).unwrap();
        assert_eq!(out.to_owned_value(), p.to_owned_value());
    }

    #[test]
    fn ltr_first_position_ignores_every_token() {
        let (params, cfg, charset) = setup(8);
        let z = visual(6, cfg.d_model, 9);
        let perm = Permutation::canonical(T);
        let run = |label: &str| {
            let tokens = vec![tok_encode(label, &charset, T).unwrap()];
            decode_training(&tokens, &z, &perm, &params, &cfg, true, &Ctx::eval())
                .unwrap()
                .to_owned_value()
        };
        let a = run("abcd");
        let b = run("wxyz");
        // Logits row 0 scores y1, which under left-to-right order sees only
        // [B]; it must be bit-identical across any token change.
        for j in 0..a.dim().1 {
            assert_eq!(a[[0, j]], b[[0, j]], "logit column {j} leaked into position 1");
        }
        assert!((0..a.dim().1).any(|j| a[[1, j]] != b[[1, j]]));
    }

    #[test]
    fn head_shapes_and_oracles() {
        let charset = Charset::train94();
        let cfg = DecoderConfig::new(25, 16, 2, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params =
            DecoderParams::<f64>::init(&cfg, charset.id_space(), charset.class_count(), &mut rng)
                .unwrap();
        let x = Tensor::constant(normal_init(26, 16, 1.0, &mut rng));
        let logits = head(&x, &params);
        assert_eq!(logits.shape(), (26, 95));
        // Affine oracle.
        let (xv, wv) = (x.to_owned_value(), params.head_w.to_owned_value());
        for i in 0..26 {
            for j in 0..95 {
                let mut want = params.head_b.value()[[0, j]];
                for k in 0..16 {
                    want += xv[[i, k]] * wv[[k, j]];
                }
                assert!((logits.value()[[i, j]] - want).abs() < 1e-12);
            }
        }
        // Zero weights leave only the bias.
        let zeroed = DecoderParams {
            head_w: Tensor::param(Array2::zeros((16, 95))),
            head_b: Tensor::param(Array2::from_elem((1, 95), 0.25)),
            ..params
        };
        let logits = head(&x, &zeroed);
        assert!(logits.value().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn decode_training_is_deterministic_and_mask_functional() {
        let (params, cfg, charset) = setup(11);
        let z = visual(6, cfg.d_model, 12);
        let tokens = vec![tok_encode("abc", &charset, T).unwrap()];
        let perm = Permutation::new(vec![2, 4, 1, 3]).unwrap();
        let same_perm = Permutation::new(vec![2, 4, 1, 3]).unwrap();
        let a = decode_training(&tokens, &z, &perm, &params, &cfg, true, &Ctx::eval()).unwrap();
        let b =
            decode_training(&tokens, &z, &same_perm, &params, &cfg, true, &Ctx::eval()).unwrap();
        assert_eq!(a.to_owned_value(), b.to_owned_value());
        assert_eq!(a.shape(), (T + 1, charset.class_count()));
    }

    #[test]
    fn causality_holds_for_every_permutation_at_t4() {
        let (params, cfg, charset) = setup(13);
        let z = visual(6, cfg.d_model, 14);
        // All 24 orders of T=4; every context slot perturbed in turn.
        let mut orders = Vec::new();
        let items = [1usize, 2, 3, 4];
        for a in items {
            for b in items {
                for c in items {
                    for d in items {
                        let v = vec![a, b, c, d];
                        if Permutation::new(v.clone()).is_ok() {
                            orders.push(Permutation::new(v).unwrap());
                        }
                    }
                }
            }
        }
        assert_eq!(orders.len(), 24);
        let base_label = "abcd";
        for perm in &orders {
            let qmask = mask_from_permutation(perm, MaskKind::Query);
            let base_tokens = vec![tok_encode(base_label, &charset, T).unwrap()];
            let base = decode_training(&base_tokens, &z, perm, &params, &cfg, true, &Ctx::eval())
                .unwrap()
                .to_owned_value();
            for slot in 0..T {
                let mut label: Vec<char> = base_label.chars().collect();
                label[slot] = 'z';
                let label: String = label.into_iter().collect();
                let tokens = vec![tok_encode(&label, &charset, T).unwrap()];
                let got = decode_training(&tokens, &z, perm, &params, &cfg, true, &Ctx::eval())
                    .unwrap()
                    .to_owned_value();
                for i in 0..=T {
                    // Mask column for token slot y_{slot+1} is slot + 1.
                    if qmask.bits()[[i, slot + 1]] == 0 {
                        for j in 0..got.dim().1 {
                            let delta = (got[[i, j]] - base[[i, j]]).abs();
                            assert!(
                                delta < 1e-9,
                                "order {:?}: blocked token {} moved logit row {i} by {delta}",
                                perm.order(),
                                slot + 1
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pad_region_tokens_cannot_reach_earlier_positions() {
        let (params, cfg, charset) = setup(15);
        let z = visual(6, cfg.d_model, 16);
        let perm = Permutation::canonical(T);
        // "ab" fills slots 1..2; slot 4 is [PAD]. Forge a token there.
        let base_tokens = vec![tok_encode("ab", &charset, T).unwrap()];
        let base = decode_training(&base_tokens, &z, &perm, &params, &cfg, true, &Ctx::eval())
            .unwrap()
            .to_owned_value();
        let mut forged = base_tokens[0].clone();
        forged.set_id(4, charset.char_to_id('q').unwrap());
        let got = decode_training(&[forged], &z, &perm, &params, &cfg, true, &Ctx::eval())
            .unwrap()
            .to_owned_value();
        // Positions decoded before slot 4 under canonical order: rows 0..3.
        for i in 0..4 {
            for j in 0..got.dim().1 {
                assert_eq!(got[[i, j]], base[[i, j]], "row {i} saw the pad slot");
            }
        }
    }

    #[test]
    fn cha_off_skips_stage_one_but_keeps_masking() {
        let (params, cfg, charset) = setup(17);
        let z = visual(6, cfg.d_model, 18);
        let perm = Permutation::canonical(T);
        let tokens = vec![tok_encode("abcd", &charset, T).unwrap()];
        let on = decode_training(&tokens, &z, &perm, &params, &cfg, true, &Ctx::eval())
            .unwrap()
            .to_owned_value();
        let off = decode_training(&tokens, &z, &perm, &params, &cfg, false, &Ctx::eval())
            .unwrap()
            .to_owned_value();
        assert_ne!(on, off);
        // First position still ignores every token with CHA off.
        let other = vec![tok_encode("wxyz", &charset, T).unwrap()];
        let off2 = decode_training(&other, &z, &perm, &params, &cfg, false, &Ctx::eval())
            .unwrap()
            .to_owned_value();
        for j in 0..off.dim().1 {
            assert_eq!(off[[0, j]], off2[[0, j]]);
        }
    }

    #[test]
    fn batched_decode_matches_per_sample_decode() {
        let (params, cfg, charset) = setup(19);
        let d = cfg.d_model;
        let z1 = visual(6, d, 20);
        let z2 = visual(6, d, 21);
        let mut stacked = Array2::zeros((12, d));
        stacked.slice_mut(ndarray::s![0..6, ..]).assign(&z1.to_owned_value());
        stacked.slice_mut(ndarray::s![6..12, ..]).assign(&z2.to_owned_value());
        let z_both = Tensor::constant(stacked);
        let perm = Permutation::new(vec![3, 1, 4, 2]).unwrap();
        let ta = tok_encode("ab", &charset, T).unwrap();
        let tb = tok_encode("wxyz", &charset, T).unwrap();
        let both = decode_training(
            &[ta.clone(), tb.clone()],
            &z_both,
            &perm,
            &params,
            &cfg,
            true,
            &Ctx::eval(),
        )
        .unwrap()
        .to_owned_value();
        let solo_a = decode_training(&[ta], &z1, &perm, &params, &cfg, true, &Ctx::eval())
            .unwrap()
            .to_owned_value();
        let solo_b = decode_training(&[tb], &z2, &perm, &params, &cfg, true, &Ctx::eval())
            .unwrap()
            .to_owned_value();
        for i in 0..=T {
            for j in 0..both.dim().1 {
                assert!((both[[i, j]] - solo_a[[i, j]]).abs() < 1e-12);
                assert!((both[[i + T + 1, j]] - solo_b[[i, j]]).abs() < 1e-12);
            }
        }
    }
}
