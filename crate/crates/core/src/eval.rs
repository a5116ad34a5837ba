//! Inference and evaluation: greedy autoregressive decoding, cloze-mask
//! refinement rounds, word accuracy, latency, and analytic cost accounting.

use crate::charset::{encode as encode_label, fold_for_eval, Charset, CharsetError, TokenSequence};
use crate::decoder::{decode_gated, DecoderConfig, DecoderError};
use crate::encoder::{encode, EncoderConfig, EncoderError, ImageTensor};
use crate::mask::{cloze_content_mask, cloze_mask, mask_from_permutation, MaskKind, Permutation};
use crate::model::ModelParams;
use crate::real::Real;
use crate::tensor::{Ctx, Tensor};
use serde::Serialize;
use std::time::Instant;
use thiserror::Error;

pub const MAX_IR_ROUNDS: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Charset(#[from] CharsetError),
    #[error("prediction count {preds} != reference count {refs}")]
    LengthMismatch { preds: usize, refs: usize },
    #[error("no samples")]
    NoSamples,
    #[error("bad decode options: {0}")]
    BadOptions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Refinement passes after the autoregressive pass.
    pub ir_rounds: usize,
    /// Must match the decoder variant the parameters were trained with.
    pub use_cha: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { ir_rounds: 0, use_cha: true }
    }
}

impl DecodeOptions {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.ir_rounds > MAX_IR_ROUNDS {
            return Err(EvalError::BadOptions(format!(
                "ir_rounds {} > {MAX_IR_ROUNDS}",
                self.ir_rounds
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub text: String,
    /// Softmax probability of each greedy choice: one entry per emitted
    /// character, plus one for the end marker when it fired before the cap.
    pub confidences: Vec<f64>,
}

fn softmax_row<R: Real>(row: &[R]) -> Vec<f64> {
    let mx = row.iter().map(|v| Real::to_f64(*v)).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (Real::to_f64(*v) - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Greedy left-to-right decode over a shared visual encoding. The masks are
/// always the canonical pair, whatever mode trained the parameters.
fn greedy_ltr<R: Real>(
    model: &ModelParams<R>,
    dec_cfg: &DecoderConfig,
    charset: &Charset,
    z: &Tensor<R>,
    batch: usize,
    use_cha: bool,
    ctx: &Ctx,
) -> Result<Vec<Decoded>, EvalError> {
    let t = dec_cfg.t_max;
    let rows = dec_cfg.rows();
    let canonical = Permutation::canonical(t);
    let content = Tensor::constant(
        mask_from_permutation(&canonical, MaskKind::Content).content_self_gate::<R>(),
    );
    let query =
        Tensor::constant(mask_from_permutation(&canonical, MaskKind::Query).query_gate::<R>());
    let mut seqs: Vec<TokenSequence> = Vec::with_capacity(batch);
    for _ in 0..batch {
        seqs.push(encode_label("", charset, t)?);
    }
    let mut out = vec![Decoded { text: String::new(), confidences: Vec::new() }; batch];
    let mut done = vec![false; batch];
    for s in 1..=t {
        if done.iter().all(|&d| d) {
            break;
        }
        let state =
            decode_gated(&seqs, z, &content, &query, &model.decoder, dec_cfg, use_cha, ctx)?;
        let logits = state.logits.to_owned_value();
        for b in 0..batch {
            if done[b] {
                continue;
            }
            let row: Vec<R> = logits.row(b * rows + (s - 1)).to_vec();
            let probs = softmax_row(&row);
            let (best, best_p) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .expect("non-empty class row");
            out[b].confidences.push(*best_p);
            if best == 0 {
                done[b] = true;
            } else {
                let c = charset.id_to_char(best).expect("class ids map to characters");
                out[b].text.push(c);
                seqs[b].set_id(s, best);
            }
        }
    }
    Ok(out)
}

/// One cloze re-prediction pass: every kept position is re-chosen from all
/// other positions plus the visual tokens. Lengths are frozen; the end
/// marker does not move; only character classes compete.
pub fn refine_texts<R: Real>(
    model: &ModelParams<R>,
    dec_cfg: &DecoderConfig,
    charset: &Charset,
    z: &Tensor<R>,
    decoded: &[Decoded],
    use_cha: bool,
    ctx: &Ctx,
) -> Result<Vec<Decoded>, EvalError> {
    let t = dec_cfg.t_max;
    let rows = dec_cfg.rows();
    let seqs: Vec<TokenSequence> = decoded
        .iter()
        .map(|d| encode_label(&d.text, charset, t))
        .collect::<Result<_, _>>()?;
    let content = Tensor::constant(cloze_content_mask(t).content_self_gate::<R>());
    let query = Tensor::constant(
        cloze_mask(t, 1).expect("t >= 1 by decoder config").query_gate::<R>(),
    );
    let state = decode_gated(&seqs, z, &content, &query, &model.decoder, dec_cfg, use_cha, ctx)?;
    let logits = state.logits.to_owned_value();
    let mut out = Vec::with_capacity(decoded.len());
    for (b, d) in decoded.iter().enumerate() {
        let len = d.text.chars().count();
        let mut text = String::with_capacity(len);
        let mut confidences = d.confidences.clone();
        for pos in 1..=len {
            let row: Vec<R> = logits.row(b * rows + (pos - 1)).to_vec();
            let probs = softmax_row(&row);
            let (best, best_p) = probs
                .iter()
                .enumerate()
                .skip(1)
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .expect("at least one character class");
            text.push(charset.id_to_char(best).expect("class ids map to characters"));
            if pos - 1 < confidences.len() {
                confidences[pos - 1] = *best_p;
            }
        }
        out.push(Decoded { text, confidences });
    }
    Ok(out)
}

/// Encode once, decode greedily, then apply the requested refinement
/// rounds. Deterministic for fixed inputs and parameters.
pub fn ar_decode_batch<R: Real>(
    model: &ModelParams<R>,
    enc_cfg: &EncoderConfig,
    dec_cfg: &DecoderConfig,
    charset: &Charset,
    images: &[ImageTensor],
    opts: &DecodeOptions,
) -> Result<Vec<Decoded>, EvalError> {
    opts.validate()?;
    if images.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let ctx = Ctx::eval();
    let z = encode(&model.encoder, enc_cfg, images, &ctx)?;
    let mut decoded =
        greedy_ltr(model, dec_cfg, charset, &z, images.len(), opts.use_cha, &ctx)?;
    for _ in 0..opts.ir_rounds {
        decoded = refine_texts(model, dec_cfg, charset, &z, &decoded, opts.use_cha, &ctx)?;
    }
    Ok(decoded)
}

pub fn ar_decode<R: Real>(
    model: &ModelParams<R>,
    enc_cfg: &EncoderConfig,
    dec_cfg: &DecoderConfig,
    charset: &Charset,
    image: &ImageTensor,
    opts: &DecodeOptions,
) -> Result<Decoded, EvalError> {
    Ok(ar_decode_batch(model, enc_cfg, dec_cfg, charset, std::slice::from_ref(image), opts)?
        .remove(0))
}

/// Exact-match fraction after folding both sides to the 36-symbol
/// evaluation alphabet.
pub fn word_accuracy(preds: &[String], refs: &[String]) -> Result<f64, EvalError> {
    if preds.len() != refs.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), refs: refs.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let hits = preds
        .iter()
        .zip(refs)
        .filter(|(p, r)| fold_for_eval(p) == fold_for_eval(r))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Analytic multiply-add counts per image; FLOPs = 2x MACs. Only matrix
/// products and attention score/mix products are counted.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CostReport {
    pub params: usize,
    pub ir_rounds: usize,
    pub encoder_macs: u64,
    pub decoder_pass_macs: u64,
    pub total_macs: u64,
    pub flops: u64,
}

pub fn encoder_macs(cfg: &EncoderConfig, h: usize, w: usize) -> u64 {
    let n = ((h / cfg.patch_h) * (w / cfg.patch_w)) as u64;
    let d = cfg.width as u64;
    let plen = (cfg.patch_w * cfg.patch_h * 3) as u64;
    let n1 = n + 1;
    let per_block = 4 * n1 * d * d + 2 * n1 * n1 * d + 2 * n1 * d * (cfg.mlp_ratio as u64 * d);
    n * plen * d + cfg.layers as u64 * per_block
}

pub fn decoder_pass_macs(
    dec_cfg: &DecoderConfig,
    charset: &Charset,
    n_visual: usize,
    use_cha: bool,
) -> u64 {
    let t1 = dec_cfg.rows() as u64;
    let d = dec_cfg.d_model as u64;
    let nv = n_visual as u64;
    let classes = charset.class_count() as u64;
    let self_attn = 4 * t1 * d * d + 2 * t1 * t1 * d;
    let cross_attn = 2 * t1 * d * d + 2 * nv * d * d + 2 * t1 * nv * d;
    let stage1 = if use_cha { self_attn + cross_attn } else { 0 };
    stage1 + self_attn + cross_attn + t1 * d * classes
}

pub fn cost_report(
    enc_cfg: &EncoderConfig,
    dec_cfg: &DecoderConfig,
    charset: &Charset,
    params: usize,
    ir_rounds: usize,
    use_cha: bool,
) -> CostReport {
    let enc = encoder_macs(enc_cfg, crate::encoder::IMG_H, crate::encoder::IMG_W);
    let n_visual = (crate::encoder::IMG_H / enc_cfg.patch_h)
        * (crate::encoder::IMG_W / enc_cfg.patch_w)
        + 1;
    let pass = decoder_pass_macs(dec_cfg, charset, n_visual, use_cha);
    let total = enc + pass * (1 + ir_rounds as u64);
    CostReport {
        params,
        ir_rounds,
        encoder_macs: enc,
        decoder_pass_macs: pass,
        total_macs: total,
        flops: 2 * total,
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LatencyReport {
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub n: usize,
}

/// Wall-time distribution of single-image decodes.
pub fn latency<R: Real>(
    model: &ModelParams<R>,
    enc_cfg: &EncoderConfig,
    dec_cfg: &DecoderConfig,
    charset: &Charset,
    image: &ImageTensor,
    opts: &DecodeOptions,
    n: usize,
) -> Result<LatencyReport, EvalError> {
    if n == 0 {
        return Err(EvalError::NoSamples);
    }
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        let t0 = Instant::now();
        let _ = ar_decode(model, enc_cfg, dec_cfg, charset, image, opts)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let at = |q: f64| times[((times.len() - 1) as f64 * q).round() as usize];
    Ok(LatencyReport { median_ms: at(0.5), p10_ms: at(0.1), p90_ms: at(0.9), n })
}

/// One split's evaluation summary.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: usize,
    pub word_accuracy: f64,
    pub ir_rounds: usize,
    pub params: usize,
    pub flops: u64,
    pub latency: Option<LatencyReport>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render::{render, RenderRecord, Style};
    use ndarray::Array2;

    const T: usize = 5;

    fn tiny() -> (ModelParams<f64>, EncoderConfig, DecoderConfig, Charset) {
        let enc = EncoderConfig {
            layers: 1,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            patch_w: 8,
            patch_h: 4,
            dropout: 0.1,
        };
        let dec = DecoderConfig::new(T, 16, 2, 0.1);
        let charset = Charset::train94();
        let model = ModelParams::<f64>::init(&enc, &dec, &charset, 21).unwrap();
        (model, enc, dec, charset)
    }

    fn img(word: &str) -> ImageTensor {
        render(word, &RenderRecord::clean(Style::plain())).unwrap()
    }

    /// Forces every head row toward one class whatever the inputs.
    fn bias_head_to(model: &ModelParams<f64>, charset: &Charset, class: usize) {
        let (d, c) = model.decoder.head_w.shape();
        model.decoder.head_w.set_value(Array2::zeros((d, c)));
        let mut b = Array2::zeros((1, charset.class_count()));
        b[[0, class]] = 10.0;
        model.decoder.head_b.set_value(b);
    }

    #[test]
    fn end_biased_model_decodes_empty_in_one_step() {
        let (model, enc, dec, charset) = tiny();
        bias_head_to(&model, &charset, 0);
        let out =
            ar_decode(&model, &enc, &dec, &charset, &img("toe"), &DecodeOptions::default())
                .unwrap();
        assert_eq!(out.text, "");
        assert_eq!(out.confidences.len(), 1);
        assert!(out.confidences[0] > 0.99);
    }

    #[test]
    fn char_biased_model_runs_to_the_cap() {
        let (model, enc, dec, charset) = tiny();
        let a_id = charset.char_to_id('a').unwrap();
        bias_head_to(&model, &charset, a_id);
        let out =
            ar_decode(&model, &enc, &dec, &charset, &img("toe"), &DecodeOptions::default())
                .unwrap();
        assert_eq!(out.text, "a".repeat(T));
        assert_eq!(out.confidences.len(), T);
    }

    #[test]
    fn decoding_is_idempotent() {
        let (model, enc, dec, charset) = tiny();
        let opts = DecodeOptions { ir_rounds: 2, use_cha: true };
        let a = ar_decode(&model, &enc, &dec, &charset, &img("it"), &opts).unwrap();
        let b = ar_decode(&model, &enc, &dec, &charset, &img("it"), &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_decode_ignores_ranking_parameters() {
        let (model, enc, dec, charset) = tiny();
        let before =
            ar_decode(&model, &enc, &dec, &charset, &img("on"), &DecodeOptions::default())
                .unwrap();
        model.ipn.p_query.set_value(Array2::from_elem((T, T), 3.25));
        let after =
            ar_decode(&model, &enc, &dec, &charset, &img("on"), &DecodeOptions::default())
                .unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn refinement_of_a_bias_locked_model_is_a_fixed_point() {
        let (model, enc, dec, charset) = tiny();
        let a_id = charset.char_to_id('a').unwrap();
        bias_head_to(&model, &charset, a_id);
        let base = ar_decode(&model, &enc, &dec, &charset, &img("toe"), &DecodeOptions::default())
            .unwrap();
        let refined = ar_decode(
            &model,
            &enc,
            &dec,
            &charset,
            &img("toe"),
            &DecodeOptions { ir_rounds: 3, use_cha: true },
        )
        .unwrap();
        assert_eq!(base.text, refined.text);
    }

    #[test]
    fn refinement_keeps_length_and_end_marker_fixed() {
        let (model, enc, dec, charset) = tiny();
        let ctx = Ctx::eval();
        let images = [img("cab"), img("go")];
        let z = encode(&model.encoder, &enc, &images, &ctx).unwrap();
        let decoded = vec![
            Decoded { text: "cab".into(), confidences: vec![0.5; 4] },
            Decoded { text: "go".into(), confidences: vec![0.5; 3] },
        ];
        let refined =
            refine_texts(&model, &dec, &charset, &z, &decoded, true, &ctx).unwrap();
        assert_eq!(refined[0].text.chars().count(), 3);
        assert_eq!(refined[1].text.chars().count(), 2);
        for r in &refined {
            assert!(r.text.chars().all(|c| charset.contains(c)));
        }
    }

    #[test]
    fn ir_rounds_above_the_cap_are_rejected() {
        let (model, enc, dec, charset) = tiny();
        let err = ar_decode(
            &model,
            &enc,
            &dec,
            &charset,
            &img("it"),
            &DecodeOptions { ir_rounds: 5, use_cha: true },
        );
        assert!(matches!(err, Err(EvalError::BadOptions(_))));
    }

    #[test]
    fn word_accuracy_matches_the_exact_match_contract() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let refs = s(&["sharp", "stone", "go", "cab"]);
        assert_eq!(word_accuracy(&refs, &refs).unwrap(), 1.0);
        let case = s(&["SHARP", "stone", "GO", "cab"]);
        assert_eq!(word_accuracy(&case, &refs).unwrap(), 1.0);
        let off = s(&["sharp", "stone", "go", "cap"]);
        assert_eq!(word_accuracy(&off, &refs).unwrap(), 0.75);
        assert!(matches!(
            word_accuracy(&refs[..2].to_vec(), &refs),
            Err(EvalError::LengthMismatch { .. })
        ));
        let mut preds_p = off.clone();
        let mut refs_p = refs.clone();
        preds_p.rotate_left(2);
        refs_p.rotate_left(2);
        assert_eq!(
            word_accuracy(&off, &refs).unwrap(),
            word_accuracy(&preds_p, &refs_p).unwrap()
        );
    }

    #[test]
    fn flops_strictly_increase_with_refinement_rounds() {
        let (model, enc, dec, charset) = tiny();
        let params = model.param_count();
        let mut last = 0;
        for ir in 0..=4 {
            let report = cost_report(&enc, &dec, &charset, params, ir, true);
            assert!(report.flops > last, "ir {ir}: {} !> {last}", report.flops);
            assert_eq!(report.params, params);
            assert_eq!(report.flops, 2 * report.total_macs);
            last = report.flops;
        }
        let off = cost_report(&enc, &dec, &charset, params, 0, false);
        let on = cost_report(&enc, &dec, &charset, params, 0, true);
        assert!(off.decoder_pass_macs < on.decoder_pass_macs);
    }

    #[test]
    fn encoder_cost_scales_quadratically_with_width() {
        let enc = EncoderConfig::toy();
        let mut wide = enc.clone();
        wide.width *= 2;
        wide.heads *= 2;
        let base = encoder_macs(&enc, 32, 128);
        let doubled = encoder_macs(&wide, 32, 128);
        let ratio = doubled as f64 / base as f64;
        assert!(ratio > 3.0 && ratio < 4.5, "ratio {ratio}");
    }

    #[test]
    fn latency_report_is_ordered_and_positive() {
        let (model, enc, dec, charset) = tiny();
        let report = latency(
            &model,
            &enc,
            &dec,
            &charset,
            &img("it"),
            &DecodeOptions::default(),
            5,
        )
        .unwrap();
        assert!(report.p10_ms > 0.0);
        assert!(report.p10_ms <= report.median_ms);
        assert!(report.median_ms <= report.p90_ms);
        assert_eq!(report.n, 5);
    }
}
