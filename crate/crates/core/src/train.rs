//! Training engine: K-way masked cross-entropy over permutation sets,
//! optimizer and schedule, metrics logging, checkpointing, and the
//! multi-session stability protocol.

use crate::charset::{encode as encode_label, Charset, CharsetError, TokenSequence};
use crate::ckpt::{self, CkptError, RngState};
use crate::config::RunConfig;
use crate::data::container::Dataset;
use crate::data::DataError;
use crate::decoder::{decode_gated, decode_training, DecoderConfig, DecoderError, DecoderParams};
use crate::encoder::{encode, EncoderError, ImageTensor};
use crate::eval::{ar_decode_batch, word_accuracy, DecodeOptions, EvalError};
use crate::ipn::{adaptive_gate_pair, IpnError, IpnParams};
use crate::mask::{random_permutation_with, Permutation};
use crate::model::{ModelError, ModelParams};
use crate::optim::{lr_at, Adam};
use crate::real::Real;
use crate::tensor::{cross_entropy, mean_of, Ctx, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

/// Ranking temperature anneals linearly between these over a run.
pub const TEMP_START: f64 = 1.0;
pub const TEMP_END: f64 = 0.1;
/// Stop when the best validation accuracy gains less than the threshold
/// over this many steps.
pub const EARLY_STOP_WINDOW: usize = 200;
pub const EARLY_STOP_MIN_GAIN: f64 = 0.003;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Charset(#[from] CharsetError),
    #[error(transparent)]
    Ipn(#[from] IpnError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty batch")]
    EmptyBatch,
    #[error("bad training setup: {0}")]
    Bad(String),
}

/// How decoding orders are chosen each batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PermMode {
    /// Canonical order only.
    Ltr,
    /// Canonical plus its reverse.
    Bidir,
    /// Canonical pair plus a fresh random pair per batch.
    Plm,
    /// Canonical pair plus the learned adaptive pair.
    Ipn,
}

impl PermMode {
    pub fn k(self) -> usize {
        match self {
            PermMode::Ltr => 1,
            PermMode::Bidir => 2,
            PermMode::Plm | PermMode::Ipn => 4,
        }
    }

    pub fn all() -> [PermMode; 4] {
        [PermMode::Ltr, PermMode::Bidir, PermMode::Plm, PermMode::Ipn]
    }
}

impl std::str::FromStr for PermMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ltr" => Ok(PermMode::Ltr),
            "bidir" => Ok(PermMode::Bidir),
            "plm" => Ok(PermMode::Plm),
            "ipn" => Ok(PermMode::Ipn),
            other => Err(format!("unknown mode {other:?} (ltr|bidir|plm|ipn)")),
        }
    }
}

impl std::fmt::Display for PermMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PermMode::Ltr => "ltr",
            PermMode::Bidir => "bidir",
            PermMode::Plm => "plm",
            PermMode::Ipn => "ipn",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub label_smoothing: f64,
    pub mode: PermMode,
    pub use_cha: bool,
    /// Steps between validation passes; 0 validates only at the end.
    pub eval_every: usize,
    /// Samples per validation pass (capped at the split size).
    pub eval_subset: usize,
    /// 0 disables early stopping.
    pub early_stop_window: usize,
    pub early_stop_min_gain: f64,
    pub temp_start: f64,
    pub temp_end: f64,
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 20,
            lr: 3e-4,
            warmup_frac: 0.05,
            label_smoothing: 0.0,
            mode: PermMode::Plm,
            use_cha: true,
            eval_every: 100,
            eval_subset: 128,
            early_stop_window: EARLY_STOP_WINDOW,
            early_stop_min_gain: EARLY_STOP_MIN_GAIN,
            temp_start: TEMP_START,
            temp_end: TEMP_END,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 1024,
            epochs: 10,
            lr: crate::optim::DEFAULT_LR,
            warmup_frac: 0.05,
            label_smoothing: 0.0,
            mode: PermMode::Ipn,
            use_cha: true,
            eval_every: 1000,
            eval_subset: 1024,
            early_stop_window: 2000,
            early_stop_min_gain: EARLY_STOP_MIN_GAIN,
            temp_start: TEMP_START,
            temp_end: TEMP_END,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Bad(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive and finite", self.lr));
        }
        if !(0.0..=0.5).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} outside [0, 0.5]", self.warmup_frac));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.temp_start <= 0.0 || self.temp_end <= 0.0 {
            return bad("temperatures must be positive".into());
        }
        if self.eval_subset == 0 {
            return bad("eval_subset must be positive".into());
        }
        Ok(())
    }
}

/// Targets and per-row weights for a batch, aligned with decoder output
/// rows. Row r of a sample is supervised by the id in slot r+1; rows past
/// the end marker carry weight zero.
pub fn supervision<R: Real>(tokens: &[TokenSequence]) -> (Vec<usize>, Vec<R>) {
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for seq in tokens {
        let ids = seq.ids();
        for row in 0..ids.len() - 1 {
            targets.push(ids[row + 1]);
            weights.push(if row <= seq.length() { R::one() } else { R::zero() });
        }
    }
    (targets, weights)
}

/// Orders for one batch in the sampled modes. `Ipn` orders come from the
/// scoring head, not from draws; asking for them here is a logic error.
pub fn draw_perms(mode: PermMode, t: usize, rng: &mut ChaCha8Rng) -> Vec<Permutation> {
    let canonical = Permutation::canonical(t);
    match mode {
        PermMode::Ltr => vec![canonical],
        PermMode::Bidir => vec![canonical.reversed(), canonical],
        PermMode::Plm => {
            let pi = random_permutation_with(t, rng);
            vec![canonical.reversed(), canonical, pi.reversed(), pi]
        }
        PermMode::Ipn => unreachable!("adaptive orders come from the scoring head"),
    }
}

/// Mean of per-order cross-entropies over a shared batch encoding.
#[allow(clippy::too_many_arguments)]
pub fn plm_loss<R: Real>(
    tokens: &[TokenSequence],
    z: &Tensor<R>,
    perms: &[Permutation],
    params: &DecoderParams<R>,
    cfg: &DecoderConfig,
    use_cha: bool,
    smoothing: R,
    ctx: &Ctx,
) -> Result<Tensor<R>, TrainError> {
    if tokens.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if perms.is_empty() {
        return Err(TrainError::Bad("empty permutation set".into()));
    }
    let (targets, weights) = supervision::<R>(tokens);
    let mut terms = Vec::with_capacity(perms.len());
    for perm in perms {
        let logits = decode_training(tokens, z, perm, params, cfg, use_cha, ctx)?;
        terms.push(cross_entropy(&logits, &targets, &weights, smoothing));
    }
    Ok(mean_of(&terms))
}

/// Four-way loss for the adaptive mode: the canonical pair under hard
/// masks, the scored order and its reverse under straight-through gates so
/// the ranking parameters receive gradient.
#[allow(clippy::too_many_arguments)]
pub fn ipn_loss<R: Real>(
    tokens: &[TokenSequence],
    z: &Tensor<R>,
    ipn: &IpnParams<R>,
    temperature: f64,
    params: &DecoderParams<R>,
    cfg: &DecoderConfig,
    use_cha: bool,
    smoothing: R,
    ctx: &Ctx,
) -> Result<Tensor<R>, TrainError> {
    if tokens.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let (targets, weights) = supervision::<R>(tokens);
    let canonical = Permutation::canonical(cfg.t_max);
    let score = ipn.score()?;
    let gates = adaptive_gate_pair(&score, R::from_f64(temperature))?;
    let mut terms = Vec::with_capacity(4);
    for perm in [canonical.reversed(), canonical] {
        let logits = decode_training(tokens, z, &perm, params, cfg, use_cha, ctx)?;
        terms.push(cross_entropy(&logits, &targets, &weights, smoothing));
    }
    for g in &gates {
        let state = decode_gated(tokens, z, &g.content, &g.query, params, cfg, use_cha, ctx)?;
        terms.push(cross_entropy(&state.logits, &targets, &weights, smoothing));
    }
    Ok(mean_of(&terms))
}

#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub temperature: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub samples_seen: usize,
    pub final_loss: f64,
    pub best_val_acc: f64,
    /// First validation step whose accuracy reached within the early-stop
    /// threshold of the run's best.
    pub converged_at: Option<usize>,
    pub stopped_early: bool,
    pub wall_secs: f64,
    pub metrics_path: PathBuf,
    pub ckpt_path: PathBuf,
}

struct Prepared {
    images: Vec<ImageTensor>,
    tokens: Vec<TokenSequence>,
    labels: Vec<String>,
}

fn prepare(set: &Dataset, charset: &Charset, t_max: usize) -> Result<Prepared, TrainError> {
    let mut images = Vec::with_capacity(set.len());
    let mut tokens = Vec::with_capacity(set.len());
    let mut labels = Vec::with_capacity(set.len());
    for s in &set.samples {
        images.push(s.image());
        tokens.push(encode_label(&s.label, charset, t_max)?);
        labels.push(s.label.clone());
    }
    Ok(Prepared { images, tokens, labels })
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
    rng.set_stream(1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn validation_accuracy(
    model: &ModelParams<f32>,
    cfg: &RunConfig,
    charset: &Charset,
    val: &Prepared,
    subset: usize,
) -> Result<f64, TrainError> {
    let n = subset.min(val.images.len());
    if n == 0 {
        return Ok(0.0);
    }
    let decoded = ar_decode_batch(
        model,
        &cfg.encoder,
        &cfg.decoder,
        charset,
        &val.images[..n],
        &DecodeOptions { ir_rounds: 0, use_cha: cfg.training.use_cha },
    )?;
    let preds: Vec<String> = decoded.into_iter().map(|d| d.text).collect();
    Ok(word_accuracy(&preds, &val.labels[..n])?)
}

/// Full training run. Deterministic given the config: shuffling,
/// dropout, and random orders ride fixed seeded streams.
pub fn train(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    out_dir: &Path,
) -> Result<TrainReport, TrainError> {
    cfg.training.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let started = Instant::now();
    let charset = cfg.charset.charset();
    let t_max = cfg.decoder.t_max;
    let tr = prepare(train_set, &charset, t_max)?;
    let va = prepare(val_set, &charset, t_max)?;

    let model = ModelParams::<f32>::init(&cfg.encoder, &cfg.decoder, &charset, cfg.seed)?;
    let mut adam = Adam::new(model.named().into_iter().map(|(_, t)| t).collect());

    let n = tr.images.len();
    let bs = cfg.training.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let total_steps = steps_per_epoch * cfg.training.epochs;

    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let ctx = Ctx::train(dropout_rng);
    let mut perm_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    perm_rng.set_stream(3);

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let ckpt_path = out_dir.join("ckpt.bin");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);

    let smoothing = cfg.training.label_smoothing as f32;
    let mut evals: Vec<(usize, f64)> = Vec::new();
    let mut step = 0usize;
    let mut samples_seen = 0usize;
    let mut final_loss = f64::NAN;
    let mut stopped_early = false;

    'outer: for epoch in 0..cfg.training.epochs {
        let order = shuffled_indices(n, cfg.seed, epoch);
        for chunk in order.chunks(bs) {
            let images: Vec<ImageTensor> = chunk.iter().map(|&i| tr.images[i].clone()).collect();
            let tokens: Vec<TokenSequence> = chunk.iter().map(|&i| tr.tokens[i].clone()).collect();
            let frac = if total_steps > 1 { step as f64 / (total_steps - 1) as f64 } else { 0.0 };
            let temperature =
                cfg.training.temp_start + (cfg.training.temp_end - cfg.training.temp_start) * frac;

            let z = encode(&model.encoder, &cfg.encoder, &images, &ctx)?;
            let loss = match cfg.training.mode {
                PermMode::Ipn => ipn_loss(
                    &tokens,
                    &z,
                    &model.ipn,
                    temperature,
                    &model.decoder,
                    &cfg.decoder,
                    cfg.training.use_cha,
                    smoothing,
                    &ctx,
                )?,
                mode => {
                    let perms = draw_perms(mode, t_max, &mut perm_rng);
                    plm_loss(
                        &tokens,
                        &z,
                        &perms,
                        &model.decoder,
                        &cfg.decoder,
                        cfg.training.use_cha,
                        smoothing,
                        &ctx,
                    )?
                }
            };
            final_loss = loss.scalar() as f64;
            model.zero_grads();
            loss.backward();
            let lr = lr_at(step, total_steps, cfg.training.lr, cfg.training.warmup_frac);
            adam.step(lr);
            step += 1;
            samples_seen += chunk.len();

            let due = cfg.training.eval_every > 0 && step % cfg.training.eval_every == 0;
            let val_acc = if due && !va.images.is_empty() {
                let acc =
                    validation_accuracy(&model, cfg, &charset, &va, cfg.training.eval_subset)?;
                evals.push((step, acc));
                Some(acc)
            } else {
                None
            };
            let line = StepMetrics {
                step,
                epoch,
                loss: final_loss,
                lr,
                temperature,
                val_acc,
            };
            writeln!(metrics, "{}", serde_json::to_string(&line).expect("metrics serialize"))?;

            if val_acc.is_some() && early_stop_due(&evals, step, &cfg.training) {
                stopped_early = true;
                break 'outer;
            }
        }
    }

    if !va.images.is_empty() && evals.last().map(|&(s, _)| s) != Some(step) {
        let acc = validation_accuracy(&model, cfg, &charset, &va, cfg.training.eval_subset)?;
        evals.push((step, acc));
        let line = StepMetrics {
            step,
            epoch: cfg.training.epochs,
            loss: final_loss,
            lr: 0.0,
            temperature: cfg.training.temp_end,
            val_acc: Some(acc),
        };
        writeln!(metrics, "{}", serde_json::to_string(&line).expect("metrics serialize"))?;
    }
    metrics.flush()?;

    let rng_state = ctx
        .rng_snapshot()
        .map(|r| RngState::capture(&r))
        .unwrap_or_else(|| RngState::capture(&ChaCha8Rng::seed_from_u64(cfg.seed)));
    ckpt::save(&ckpt_path, &model.named(), step as u64, cfg.hash(), &rng_state)?;

    let best_val_acc = evals.iter().map(|&(_, a)| a).fold(0.0f64, f64::max);
    let converged_at = evals
        .iter()
        .find(|&&(_, a)| a >= best_val_acc - cfg.training.early_stop_min_gain)
        .map(|&(s, _)| s);
    Ok(TrainReport {
        steps: step,
        samples_seen,
        final_loss,
        best_val_acc,
        converged_at,
        stopped_early,
        wall_secs: started.elapsed().as_secs_f64(),
        metrics_path,
        ckpt_path,
    })
}

/// True when the best accuracy no longer beats the pre-window best by the
/// configured margin. Armed only once some evaluation has cleared zero: a
/// flat stretch before learning starts is not convergence, and a run that
/// never learns still ends at the epoch cap.
fn early_stop_due(evals: &[(usize, f64)], step: usize, cfg: &TrainConfig) -> bool {
    let window = cfg.early_stop_window;
    if window == 0 || step < window {
        return false;
    }
    let best = evals.iter().map(|&(_, a)| a).fold(f64::NEG_INFINITY, f64::max);
    if best <= 0.0 {
        return false;
    }
    let past_best = evals
        .iter()
        .filter(|&&(s, _)| s + window <= step)
        .map(|&(_, a)| a)
        .fold(f64::NEG_INFINITY, f64::max);
    if past_best == f64::NEG_INFINITY {
        return false;
    }
    best - past_best < cfg.early_stop_min_gain
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionReport {
    pub seed: u64,
    pub converged_at: Option<usize>,
    pub final_acc: f64,
    pub samples_seen: usize,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiReport {
    pub mode: PermMode,
    pub sessions: Vec<SessionReport>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_converged: f64,
    pub std_converged: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Repeated training sessions under distinct seeds; reports the spread of
/// final accuracy and convergence step.
pub fn multi_session(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    sessions: usize,
    out_dir: &Path,
) -> Result<MultiReport, TrainError> {
    if sessions < 2 {
        return Err(TrainError::Bad(format!("sessions {sessions} < 2")));
    }
    let mut reports = Vec::with_capacity(sessions);
    for s in 0..sessions {
        let mut cfg_s = cfg.clone();
        cfg_s.seed = cfg.seed.wrapping_add(s as u64);
        let dir = out_dir.join(format!("session{s}"));
        let r = train(&cfg_s, train_set, val_set, &dir)?;
        reports.push(SessionReport {
            seed: cfg_s.seed,
            converged_at: r.converged_at,
            final_acc: r.best_val_acc,
            samples_seen: r.samples_seen,
            wall_secs: r.wall_secs,
        });
    }
    let accs: Vec<f64> = reports.iter().map(|r| r.final_acc).collect();
    let (mean_acc, std_acc) = mean_std(&accs);
    let conv: Vec<f64> =
        reports.iter().map(|r| r.converged_at.unwrap_or(0) as f64).collect();
    let (mean_converged, std_converged) = mean_std(&conv);
    Ok(MultiReport {
        mode: cfg.training.mode,
        sessions: reports,
        mean_acc,
        std_acc,
        mean_converged,
        std_converged,
    })
}
