//! Command-line surface: corpus generation, training, evaluation, decoding,
//! mask inspection, ablation grids, and cost sweeps.
//!
//! Exit codes: 0 success, 1 runtime error (single line on stderr), 2 usage.

use crate::charset::Charset;
use crate::ckpt;
use crate::config::RunConfig;
use crate::data::container::Dataset;
use crate::data::{self, split_paths};
use crate::encoder::{ImageTensor, IMG_C, IMG_H, IMG_W};
use crate::eval::{self, DecodeOptions, Decoded, EvalReport};
use crate::mask::{self, mask_from_permutation, MaskKind, Permutation};
use crate::model::ModelParams;
use crate::plot::Chart;
use crate::train::{self, PermMode};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::error::Error;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

type CliResult = Result<(), Box<dyn Error>>;

/// Images decoded per forward batch; bounds activation memory.
const DECODE_CHUNK: usize = 64;

pub fn run_cli() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match init_threads().and_then(|()| dispatch(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', "; "));
            1
        }
    }
}

fn init_threads() -> CliResult {
    match std::env::var("HAAP_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or(format!("HAAP_THREADS must be a positive integer, got {v:?}"))?;
            // Ignore the error from a pool that is already built.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Ok(())
        }
    }
}

#[derive(Parser)]
#[command(
    name = "haap",
    version,
    about = "Scene-text recognition lab: synthetic corpora, permutation-trained decoders"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic corpus into train/val/test containers.
    GenData(GenDataArgs),
    /// Train a model; writes checkpoint, metrics, plots, and a report.
    Train(TrainArgs),
    /// Score a checkpoint on one split: accuracy, cost, optional latency.
    Eval(EvalArgs),
    /// Decode images from a split and print text with confidences.
    Decode(DecodeArgs),
    /// Print the attention mask a decoding order induces, with checks.
    Masks(MasksArgs),
    /// Decoding-order grid, refinement sweep, and stability report.
    Ablate(AblateArgs),
    /// Per-decode cost across refinement rounds, optionally with accuracy.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Mini,
    Paper,
}

#[derive(Args)]
struct ConfigOpt {
    /// Run-config TOML; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config used when no --config is given.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

impl ConfigOpt {
    fn resolve(&self, default: Preset) -> Result<RunConfig, Box<dyn Error>> {
        match &self.config {
            Some(path) => Ok(RunConfig::load(path)?),
            None => Ok(match self.preset.unwrap_or(default) {
                Preset::Toy => RunConfig::toy(),
                Preset::Mini => RunConfig::mini(),
                Preset::Paper => RunConfig::paper(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ChaFlag {
    On,
    Off,
}

impl ChaFlag {
    fn as_bool(self) -> bool {
        matches!(self, ChaFlag::On)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn index(self) -> usize {
        self as usize
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Query,
    Content,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// Override the corpus sample count from the config.
    #[arg(long)]
    count: Option<usize>,
    /// Override the corpus seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// Decoding-order regime: ltr, bidir, plm, or ipn.
    #[arg(long, value_parser = PermMode::from_str)]
    mode: Option<PermMode>,
    /// Cross-modal first stage in the decoder position stream.
    #[arg(long, value_enum)]
    cha: Option<ChaFlag>,
    /// Override the model/init seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoint, metrics, and plots.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Train N sessions on consecutive seeds and report spread (N >= 2).
    #[arg(long)]
    sessions: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// Checkpoint written by train.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory; defaults to the config's data dir.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Refinement rounds after the autoregressive pass (0..=4).
    #[arg(long, default_value_t = 0)]
    ir: usize,
    /// Defaults to the config's training arm.
    #[arg(long, value_enum)]
    cha: Option<ChaFlag>,
    /// Also measure single-image decode latency over 100 runs.
    #[arg(long)]
    latency: bool,
    /// Append the report to OUT/eval.jsonl in addition to printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// Checkpoint written by train.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory; defaults to the config's data dir.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// First sample to decode.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// How many consecutive samples to decode.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Refinement rounds after the autoregressive pass (0..=4).
    #[arg(long, default_value_t = 0)]
    ir: usize,
    /// Defaults to the config's training arm.
    #[arg(long, value_enum)]
    cha: Option<ChaFlag>,
    /// Print every refinement round and per-character confidences.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct MasksArgs {
    /// Decoding order as 1-based positions, e.g. 2,1,3.
    #[arg(long)]
    perm: String,
    #[arg(long, value_enum, default_value_t = KindArg::Query)]
    kind: KindArg,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigOpt,
    #[arg(long, default_value = "runs/ablate")]
    out: PathBuf,
    /// Seeds per arm of the refinement sweep.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Sessions per mode in the stability report (>= 2).
    #[arg(long, default_value_t = 5)]
    sessions: usize,
    /// Largest refinement round in the sweep (<= 4).
    #[arg(long, default_value_t = 4)]
    max_ir: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// Score this checkpoint per round to add an accuracy column.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset directory for the accuracy column; defaults to the config's.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Defaults to the config's training arm.
    #[arg(long, value_enum)]
    cha: Option<ChaFlag>,
    /// Measure decode latency per round; runs are clamped up to 100.
    #[arg(long, default_value_t = 0)]
    latency_runs: usize,
    /// Directory receiving bench.jsonl and the sweep chart.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.cmd {
        Cmd::GenData(a) => run_gen_data(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Decode(a) => run_decode(a),
        Cmd::Masks(a) => run_masks(a),
        Cmd::Ablate(a) => run_ablate(a),
        Cmd::Bench(a) => run_bench(a),
    }
}

fn run_gen_data(a: GenDataArgs) -> CliResult {
    let mut cfg = a.config.resolve(Preset::Toy)?;
    if let Some(count) = a.count {
        cfg.data.corpus.count = count;
    }
    if let Some(seed) = a.seed {
        cfg.data.corpus.seed = seed;
    }
    if let Some(out) = a.out {
        cfg.data.dir = out;
    }
    cfg.validate()?;
    let report = data::generate(&cfg.data.corpus, &cfg.data.dir)?;
    for i in 0..3 {
        println!(
            "wrote {}  {} samples  digest {:016x}",
            report.paths[i].display(),
            report.counts[i],
            report.digests[i]
        );
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> CliResult {
    let mut cfg = a.config.resolve(Preset::Toy)?;
    if let Some(mode) = a.mode {
        cfg.training.mode = mode;
    }
    if let Some(cha) = a.cha {
        cfg.training.use_cha = cha.as_bool();
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let sets = ensure_data(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    match a.sessions {
        Some(n) => {
            let report = train::multi_session(&cfg, &sets[0], &sets[1], n, &a.out)?;
            print_multi(&report);
            write_json(&a.out.join("multi_report.json"), &report)?;
        }
        None => {
            let report = train::train(&cfg, &sets[0], &sets[1], &a.out)?;
            println!("steps          {}", report.steps);
            println!("samples seen   {}", report.samples_seen);
            println!("final loss     {:.4}", report.final_loss);
            println!("best val acc   {:.4}", report.best_val_acc);
            match report.converged_at {
                Some(s) => println!("converged at   step {s}"),
                None => println!("converged at   -"),
            }
            println!("stopped early  {}", report.stopped_early);
            println!("wall time      {:.1} s", report.wall_secs);
            println!("checkpoint     {}", report.ckpt_path.display());
            println!("metrics        {}", report.metrics_path.display());
            write_json(&a.out.join("report.json"), &report)?;
            plot_metrics(&report.metrics_path, &a.out)?;
        }
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> CliResult {
    let cfg = a.config.resolve(Preset::Toy)?;
    let charset = cfg.charset.charset();
    let model = load_model(&cfg, &a.ckpt)?;
    let dir = a.data.clone().unwrap_or_else(|| cfg.data.dir.clone());
    let set = Dataset::read(&split_paths(&dir)[a.split.index()])?;
    let use_cha = a.cha.map(ChaFlag::as_bool).unwrap_or(cfg.training.use_cha);
    let opts = DecodeOptions { ir_rounds: a.ir, use_cha };
    let preds = decode_texts(&model, &cfg, &charset, &set, &opts)?;
    let acc = eval::word_accuracy(&preds, &labels(&set))?;
    let cost =
        eval::cost_report(&cfg.encoder, &cfg.decoder, &charset, model.param_count(), a.ir, use_cha);
    let latency = match a.latency {
        false => None,
        true => Some(eval::latency(
            &model,
            &cfg.encoder,
            &cfg.decoder,
            &charset,
            &set.samples[0].image(),
            &opts,
            100,
        )?),
    };
    let report = EvalReport {
        split: a.split.name().to_string(),
        samples: set.len(),
        word_accuracy: acc,
        ir_rounds: a.ir,
        params: cost.params,
        flops: cost.flops,
        latency,
    };
    print_eval(&report);
    if let Some(out) = a.out {
        std::fs::create_dir_all(&out)?;
        append_jsonl(&out.join("eval.jsonl"), &report)?;
    }
    Ok(())
}

fn run_decode(a: DecodeArgs) -> CliResult {
    let cfg = a.config.resolve(Preset::Toy)?;
    let charset = cfg.charset.charset();
    let model = load_model(&cfg, &a.ckpt)?;
    let dir = a.data.clone().unwrap_or_else(|| cfg.data.dir.clone());
    let set = Dataset::read(&split_paths(&dir)[a.split.index()])?;
    let end = a.index + a.count.max(1);
    if end > set.len() {
        return Err(format!(
            "samples {}..{} out of range, split {} has {}",
            a.index,
            end,
            a.split.name(),
            set.len()
        )
        .into());
    }
    let use_cha = a.cha.map(ChaFlag::as_bool).unwrap_or(cfg.training.use_cha);
    for sample in &set.samples[a.index..end] {
        let image = sample.image();
        match a.trace {
            false => {
                let opts = DecodeOptions { ir_rounds: a.ir, use_cha };
                let d = eval::ar_decode(&model, &cfg.encoder, &cfg.decoder, &charset, &image, &opts)?;
                println!("{}  label {:?}  pred {:?}  conf {}", sample.id, sample.label, d.text, conf_summary(&d));
            }
            true => {
                println!("{}  label {:?}", sample.id, sample.label);
                for round in 0..=a.ir {
                    let opts = DecodeOptions { ir_rounds: round, use_cha };
                    let d =
                        eval::ar_decode(&model, &cfg.encoder, &cfg.decoder, &charset, &image, &opts)?;
                    println!("  round {round}  pred {:?}  [{}]", d.text, conf_detail(&d));
                }
            }
        }
    }
    Ok(())
}

fn run_masks(a: MasksArgs) -> CliResult {
    let order = a
        .perm
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad position {p:?} in --perm")))
        .collect::<Result<Vec<usize>, String>>()?;
    let perm = Permutation::new(order)?;
    let kind = match a.kind {
        KindArg::Query => MaskKind::Query,
        KindArg::Content => MaskKind::Content,
    };
    let m = mask_from_permutation(&perm, kind);
    print!("{m}");
    let report = mask::validate(&m);
    println!();
    println!("start column   {}", if report.start_column_ok { "all ones" } else { "BROKEN" });
    println!("end row        {}", if report.end_row_ok { "all ones" } else { "BROKEN" });
    println!("acyclic        {}", report.acyclic);
    match report.permutation {
        Some(p) => println!(
            "order          {}",
            p.order().iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        ),
        None => println!("order          not recoverable"),
    }
    Ok(())
}

fn run_ablate(a: AblateArgs) -> CliResult {
    if a.max_ir > eval::MAX_IR_ROUNDS {
        return Err(format!("--max-ir {} above limit {}", a.max_ir, eval::MAX_IR_ROUNDS).into());
    }
    let base = a.config.resolve(Preset::Mini)?;
    base.validate()?;
    std::fs::create_dir_all(&a.out)?;
    let sets = ensure_data(&base)?;
    let charset = base.charset.charset();
    let test_labels = labels(&sets[2]);

    println!("== decoding-order grid ==");
    println!("{:<8} {:>2} {:>10} {:>10}", "mode", "K", "best val", "test acc");
    let mut mode_rows = Vec::new();
    for mode in PermMode::all() {
        let mut cfg = base.clone();
        cfg.training.mode = mode;
        let rep = train::train(&cfg, &sets[0], &sets[1], &a.out.join(format!("mode_{mode}")))?;
        let model = load_model(&cfg, &rep.ckpt_path)?;
        let opts = DecodeOptions { ir_rounds: 0, use_cha: cfg.training.use_cha };
        let preds = decode_texts(&model, &cfg, &charset, &sets[2], &opts)?;
        let acc = eval::word_accuracy(&preds, &test_labels)?;
        println!("{:<8} {:>2} {:>10.4} {:>10.4}", mode.to_string(), mode.k(), rep.best_val_acc, acc);
        mode_rows.push(serde_json::json!({
            "mode": mode.to_string(),
            "k": mode.k(),
            "best_val_acc": rep.best_val_acc,
            "test_acc": acc,
        }));
    }

    println!();
    println!("== refinement sweep ({} seeds per arm) ==", a.seeds);
    let mut sweep_rows = Vec::new();
    let mut acc_series = Vec::new();
    let mut tradeoff_series = Vec::new();
    for use_cha in [true, false] {
        let arm = if use_cha { "cha-on" } else { "cha-off" };
        let mut acc_by_ir = vec![0.0f64; a.max_ir + 1];
        for s in 0..a.seeds.max(1) {
            let mut cfg = base.clone();
            cfg.training.use_cha = use_cha;
            cfg.seed = base.seed.wrapping_add(s as u64);
            let dir = a.out.join(format!("{arm}_seed{s}"));
            let rep = train::train(&cfg, &sets[0], &sets[1], &dir)?;
            let model = load_model(&cfg, &rep.ckpt_path)?;
            for ir in 0..=a.max_ir {
                let opts = DecodeOptions { ir_rounds: ir, use_cha };
                let preds = decode_texts(&model, &cfg, &charset, &sets[2], &opts)?;
                acc_by_ir[ir] += eval::word_accuracy(&preds, &test_labels)? / a.seeds.max(1) as f64;
            }
        }
        let params = ModelParams::<f32>::init(&base.encoder, &base.decoder, &charset, base.seed)?
            .param_count();
        let flops: Vec<u64> = (0..=a.max_ir)
            .map(|ir| eval::cost_report(&base.encoder, &base.decoder, &charset, params, ir, use_cha).flops)
            .collect();
        print!("{arm:<8} acc   ");
        for acc in &acc_by_ir {
            print!(" {acc:>7.4}");
        }
        println!();
        print!("{arm:<8} gflop ");
        for f in &flops {
            print!(" {:>7.3}", *f as f64 / 1e9);
        }
        println!();
        acc_series.push((arm, (0..=a.max_ir).map(|ir| (ir as f64, acc_by_ir[ir])).collect::<Vec<_>>()));
        tradeoff_series.push((
            arm,
            (0..=a.max_ir).map(|ir| (flops[ir] as f64 / 1e9, acc_by_ir[ir])).collect::<Vec<_>>(),
        ));
        sweep_rows.push(serde_json::json!({
            "arm": arm,
            "accuracy_by_ir": acc_by_ir,
            "flops_by_ir": flops,
        }));
    }
    let mut acc_chart = Chart::new("accuracy vs refinement rounds", "refinement rounds", "word accuracy");
    let mut trade_chart = Chart::new("accuracy vs compute", "gflops per decode", "word accuracy");
    for (name, pts) in acc_series {
        acc_chart = acc_chart.with_series(name, pts);
    }
    for (name, pts) in tradeoff_series {
        trade_chart = trade_chart.with_series(name, pts);
    }
    acc_chart.write(&a.out.join("ir_accuracy.svg"))?;
    trade_chart.write(&a.out.join("ir_tradeoff.svg"))?;

    println!();
    println!("== stability ({} sessions per mode) ==", a.sessions);
    let mut stability = Vec::new();
    for mode in [PermMode::Plm, PermMode::Ipn] {
        let mut cfg = base.clone();
        cfg.training.mode = mode;
        let report =
            train::multi_session(&cfg, &sets[0], &sets[1], a.sessions, &a.out.join(format!("stability_{mode}")))?;
        print_multi(&report);
        stability.push(report);
    }

    write_json(
        &a.out.join("ablate.json"),
        &serde_json::json!({
            "modes": mode_rows,
            "refinement_sweep": sweep_rows,
            "stability": stability,
        }),
    )?;
    println!();
    println!("wrote {}", a.out.join("ablate.json").display());
    Ok(())
}

fn run_bench(a: BenchArgs) -> CliResult {
    let cfg = a.config.resolve(Preset::Toy)?;
    cfg.validate()?;
    let charset = cfg.charset.charset();
    let use_cha = a.cha.map(ChaFlag::as_bool).unwrap_or(cfg.training.use_cha);
    let model = match &a.ckpt {
        Some(path) => load_model(&cfg, path)?,
        None => ModelParams::<f32>::init(&cfg.encoder, &cfg.decoder, &charset, cfg.seed)?,
    };
    let set = match (&a.ckpt, &a.data) {
        (Some(_), _) | (_, Some(_)) => {
            let dir = a.data.clone().unwrap_or_else(|| cfg.data.dir.clone());
            let path = &split_paths(&dir)[a.split.index()];
            match path.exists() {
                true => Some(Dataset::read(path)?),
                false => None,
            }
        }
        _ => None,
    };
    let refs = set.as_ref().map(labels);
    let image = match &set {
        Some(s) if !s.samples.is_empty() => s.samples[0].image(),
        _ => ImageTensor::new(IMG_H, IMG_W, vec![0.5; IMG_H * IMG_W * IMG_C])?,
    };
    println!("params {}", model.param_count());
    println!(
        "{:>2} {:>10} {:>10} {:>10} {:>10}",
        "ir", "gmacs", "gflops", "acc", "p50 ms"
    );
    let mut rows = Vec::new();
    let mut flop_pts = Vec::new();
    for ir in 0..=eval::MAX_IR_ROUNDS {
        let cost =
            eval::cost_report(&cfg.encoder, &cfg.decoder, &charset, model.param_count(), ir, use_cha);
        let opts = DecodeOptions { ir_rounds: ir, use_cha };
        let acc = match (&set, &refs) {
            (Some(s), Some(r)) if a.ckpt.is_some() => {
                let preds = decode_texts(&model, &cfg, &charset, s, &opts)?;
                Some(eval::word_accuracy(&preds, r)?)
            }
            _ => None,
        };
        let lat = match a.latency_runs {
            0 => None,
            n => Some(eval::latency(
                &model,
                &cfg.encoder,
                &cfg.decoder,
                &charset,
                &image,
                &opts,
                n.max(100),
            )?),
        };
        println!(
            "{:>2} {:>10.3} {:>10.3} {:>10} {:>10}",
            ir,
            cost.total_macs as f64 / 1e9,
            cost.flops as f64 / 1e9,
            acc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            lat.as_ref().map(|l| format!("{:.2}", l.median_ms)).unwrap_or_else(|| "-".into()),
        );
        flop_pts.push((ir as f64, cost.flops as f64 / 1e9));
        rows.push(serde_json::json!({
            "ir": ir,
            "total_macs": cost.total_macs,
            "flops": cost.flops,
            "accuracy": acc,
            "latency": lat,
        }));
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        for row in &rows {
            append_jsonl(&out.join("bench.jsonl"), row)?;
        }
        Chart::new("compute per decode", "refinement rounds", "gflops")
            .with_series("flops", flop_pts)
            .write(&out.join("bench_flops.svg"))?;
        println!("wrote {}", out.join("bench.jsonl").display());
    }
    Ok(())
}

/// Load the three splits named by the config, rendering them first when any
/// container is missing.
fn ensure_data(cfg: &RunConfig) -> Result<[Dataset; 3], Box<dyn Error>> {
    let paths = split_paths(&cfg.data.dir);
    if paths.iter().any(|p| !p.exists()) {
        eprintln!("generating corpus into {}", cfg.data.dir.display());
        data::generate(&cfg.data.corpus, &cfg.data.dir)?;
    }
    Ok([Dataset::read(&paths[0])?, Dataset::read(&paths[1])?, Dataset::read(&paths[2])?])
}

/// Fresh parameters shaped by the config with the checkpoint's values
/// copied in. A config-hash mismatch is reported but not fatal; shape
/// mismatches are.
fn load_model(cfg: &RunConfig, path: &Path) -> Result<ModelParams<f32>, Box<dyn Error>> {
    let charset = cfg.charset.charset();
    let model = ModelParams::<f32>::init(&cfg.encoder, &cfg.decoder, &charset, cfg.seed)?;
    let ck = ckpt::load(path)?;
    if ck.config_hash != cfg.hash() {
        eprintln!(
            "note: checkpoint config hash {:016x} differs from the resolved config {:016x}",
            ck.config_hash,
            cfg.hash()
        );
    }
    ck.apply(&model.named())?;
    Ok(model)
}

fn labels(set: &Dataset) -> Vec<String> {
    set.samples.iter().map(|s| s.label.clone()).collect()
}

fn decode_texts(
    model: &ModelParams<f32>,
    cfg: &RunConfig,
    charset: &Charset,
    set: &Dataset,
    opts: &DecodeOptions,
) -> Result<Vec<String>, Box<dyn Error>> {
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.samples.chunks(DECODE_CHUNK) {
        let images: Vec<ImageTensor> = chunk.iter().map(|s| s.image()).collect();
        let decoded =
            eval::ar_decode_batch(model, &cfg.encoder, &cfg.decoder, charset, &images, opts)?;
        out.extend(decoded.into_iter().map(|d| d.text));
    }
    Ok(out)
}

fn conf_summary(d: &Decoded) -> String {
    let n = d.confidences.len().max(1) as f64;
    format!("mean {:.3}", d.confidences.iter().sum::<f64>() / n)
}

fn conf_detail(d: &Decoded) -> String {
    let mut parts: Vec<String> = d
        .text
        .chars()
        .zip(&d.confidences)
        .map(|(c, p)| format!("{c} {p:.2}"))
        .collect();
    if d.confidences.len() == d.text.chars().count() + 1 {
        parts.push(format!("end {:.2}", d.confidences.last().unwrap()));
    }
    parts.join(", ")
}

fn print_eval(r: &EvalReport) {
    println!("split          {}", r.split);
    println!("samples        {}", r.samples);
    println!("word accuracy  {:.4}", r.word_accuracy);
    println!("ir rounds      {}", r.ir_rounds);
    println!("params         {}", r.params);
    println!("flops/decode   {:.3} G", r.flops as f64 / 1e9);
    if let Some(l) = &r.latency {
        println!(
            "latency ms     p50 {:.2}  p10 {:.2}  p90 {:.2}  (n={})",
            l.median_ms, l.p10_ms, l.p90_ms, l.n
        );
    }
}

fn print_multi(r: &train::MultiReport) {
    println!("mode {}  {} sessions", r.mode, r.sessions.len());
    for s in &r.sessions {
        let conv = s.converged_at.map(|c| c.to_string()).unwrap_or_else(|| "-".into());
        println!(
            "  seed {:<6} acc {:.4}  converged at {:>6}  {:.1} s",
            s.seed, s.final_acc, conv, s.wall_secs
        );
    }
    println!("  accuracy    mean {:.4}  std {:.4}", r.mean_acc, r.std_acc);
    println!("  convergence mean {:.1}  std {:.1}", r.mean_converged, r.std_converged);
}

fn plot_metrics(metrics: &Path, out: &Path) -> CliResult {
    let text = std::fs::read_to_string(metrics)?;
    let mut loss = Vec::new();
    let mut acc = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let step = v["step"].as_f64().unwrap_or(0.0);
        if let Some(l) = v["loss"].as_f64() {
            loss.push((step, l));
        }
        if let Some(a) = v["val_acc"].as_f64() {
            acc.push((step, a));
        }
    }
    Chart::new("training loss", "step", "loss")
        .with_series("loss", loss)
        .write(&out.join("loss.svg"))?;
    if !acc.is_empty() {
        Chart::new("validation accuracy", "step", "word accuracy")
            .with_series("validation", acc)
            .write(&out.join("val_acc.svg"))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    Ok(std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?)
}

fn append_jsonl<T: Serialize>(path: &Path, row: &T) -> CliResult {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    Ok(writeln!(f, "{}", serde_json::to_string(row)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_are_rejected_at_parse_time() {
        assert!(Cli::try_parse_from(["haap"]).is_err());
        assert!(Cli::try_parse_from(["haap", "frobnicate"]).is_err());
        assert!(Cli::try_parse_from(["haap", "train", "--mode", "zigzag"]).is_err());
        assert!(Cli::try_parse_from(["haap", "train", "--cha", "maybe"]).is_err());
        assert!(Cli::try_parse_from(["haap", "eval", "--ckpt", "m.ckpt", "--split", "dev"]).is_err());
    }

    #[test]
    fn flags_reach_the_command_structs() {
        let cli = Cli::try_parse_from([
            "haap", "train", "--mode", "ipn", "--cha", "off", "--seed", "7", "--out", "o",
            "--sessions", "3",
        ])
        .unwrap();
        match cli.cmd {
            Cmd::Train(a) => {
                assert_eq!(a.mode, Some(PermMode::Ipn));
                assert!(matches!(a.cha, Some(ChaFlag::Off)));
                assert_eq!(a.seed, Some(7));
                assert_eq!(a.out, PathBuf::from("o"));
                assert_eq!(a.sessions, Some(3));
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn masks_subcommand_prints_grid_and_checks() {
        let a = match Cli::try_parse_from(["haap", "masks", "--perm", "2,1,3"]).unwrap().cmd {
            Cmd::Masks(a) => a,
            _ => panic!("wrong subcommand"),
        };
        assert_eq!(a.perm, "2,1,3");
        run_masks(a).unwrap();
        let bad = MasksArgs { perm: "2,5,3".into(), kind: KindArg::Query };
        assert!(run_masks(bad).is_err());
    }

    #[test]
    fn gen_data_writes_all_three_splits() {
        let dir = tempfile::tempdir().unwrap();
        let a = GenDataArgs {
            config: ConfigOpt { config: None, preset: Some(Preset::Mini) },
            count: Some(30),
            seed: None,
            out: Some(dir.path().to_path_buf()),
        };
        run_gen_data(a).unwrap();
        for p in split_paths(dir.path()) {
            assert!(p.exists());
        }
    }

    #[test]
    fn bench_runs_without_a_checkpoint() {
        let a = BenchArgs {
            config: ConfigOpt { config: None, preset: Some(Preset::Mini) },
            ckpt: None,
            data: None,
            split: SplitArg::Test,
            cha: None,
            latency_runs: 0,
            out: None,
        };
        run_bench(a).unwrap();
    }

    #[test]
    fn thread_env_rejects_garbage() {
        std::env::set_var("HAAP_THREADS", "zero");
        assert!(init_threads().is_err());
        std::env::set_var("HAAP_THREADS", "0");
        assert!(init_threads().is_err());
        std::env::set_var("HAAP_THREADS", "1");
        assert!(init_threads().is_ok());
        std::env::remove_var("HAAP_THREADS");
    }
}
