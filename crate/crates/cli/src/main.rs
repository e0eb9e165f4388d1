//! `imhsa`: scaling benchmarks, gradient checks, toy training and attention
//! diagnostics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use imhsa_core::attention::{export_attention_heatmap, AttentionKind};
use imhsa_core::autodiff::GradCheckOptions;
use imhsa_core::bench::{fit_method, run_scaling_bench, write_bench_csv, BenchConfig, DEFAULT_TOKENS};
use imhsa_core::data::{parse_config_file, serialize_config, write_csv, ConfigMap};
use imhsa_core::model::{
    ablation_run, attention_maps, build_toy_ivit, evaluate, head_count_study, load_params, parse_grid, save_params,
    train, RunConfig, TrainState, DEFAULT_SEED, RUN_KEYS,
};
use imhsa_core::par;
use imhsa_core::suite::gradient_suite;
use imhsa_core::tensor::Tensor;

/// Environment variable that overrides the seed from a config file.
const SEED_ENV: &str = "IMHSA_SEED";

#[derive(Parser)]
#[command(name = "imhsa", version, about = "Interactive multi-head self-attention toolkit")]
struct Cli {
    /// Worker threads for data-parallel kernels; 0 uses every core.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time and account one attention layer over a range of token counts.
    Bench(BenchArgs),
    /// Central-difference check of every op and the toy model.
    Gradcheck(GradcheckArgs),
    /// Train the toy model; writes metrics.csv, model.ckpt and run.cfg.
    Train(TrainArgs),
    /// Validation accuracy of a checkpoint.
    Evaluate(CheckpointArgs),
    /// Decomposition × interaction ablation.
    Ablate(AblateArgs),
    /// Head variance and cross-head similarity across head counts.
    Diag(DiagArgs),
    /// Per-head attention heatmaps of a checkpoint as PGM files.
    Attnmap(AttnmapArgs),
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = AttentionKind::ALL)]
    methods: Vec<AttentionKind>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TOKENS)]
    tokens: Vec<usize>,
    #[arg(long, default_value_t = 6)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    /// Landmark grid as `7x7` or a square count such as `49`.
    #[arg(long, default_value = "7x7")]
    landmarks: String,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Largest N run for plain MHSA.
    #[arg(long)]
    mhsa_cap: Option<usize>,
    /// Largest N run for MHSA with head interaction.
    #[arg(long)]
    mhsa_ix_cap: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Only f64 is supported; f32 differences drown in rounding.
    #[arg(long, default_value = "f64", value_parser = ["f64"])]
    dtype: String,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Random instances per op and attention variant.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long)]
    seed: Option<u64>,
}

/// Run settings shared by every training subcommand. Flags override the
/// config file; the seed resolves as flag, then `IMHSA_SEED`, then config.
#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// `synth` or `cifar`.
    #[arg(long)]
    task: Option<String>,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    noise: Option<f64>,
    /// Attention variant of every attention stage.
    #[arg(long)]
    variant: Option<AttentionKind>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 8])]
    heads: Vec<usize>,
    /// Validation samples whose maps are averaged.
    #[arg(long, default_value_t = 16)]
    probe: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttnmapArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Validation sample to visualise.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors and 0 for --help
    let cli = Cli::parse();
    let threads = cli.threads;
    match par::with_threads(threads, move || dispatch(cli.command)) {
        Ok(Ok(code)) => code,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Diag(a) => diag(a),
        Command::Attnmap(a) => attnmap(a),
    }
}

/// Flag, then environment, then the given fallback.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}=`{v}` is not an unsigned integer")),
        Err(_) => Ok(fallback),
    }
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut map = match &args.config {
        Some(p) => parse_config_file(p, RUN_KEYS).with_context(|| format!("reading {}", p.display()))?,
        None => ConfigMap::new(),
    };
    let mut set = |k: &str, v: String| {
        map.insert(k.to_string(), v);
    };
    if let Some(t) = &args.task {
        set("task", t.clone());
    }
    if let Some(d) = &args.data_dir {
        set("data_dir", d.display().to_string());
    }
    if let Some(n) = args.noise {
        set("noise", n.to_string());
    }
    if let Some(v) = args.variant {
        set("variant", v.to_string());
    }
    if let Some(s) = args.steps {
        set("steps", s.to_string());
        map.shift_remove("epochs");
    }
    let mut run = RunConfig::from_map(&map)?;
    let config_seed = if map.contains_key("seed") { run.seed } else { DEFAULT_SEED };
    run.seed = resolve_seed(args.seed, config_seed)?;
    Ok(run)
}

/// The resolved run as a config file `train` can be re-run from.
fn run_to_map(run: &RunConfig, args: &RunArgs) -> ConfigMap {
    let mut map = match &args.config {
        Some(p) => parse_config_file(p, RUN_KEYS).unwrap_or_default(),
        None => ConfigMap::new(),
    };
    match &run.task {
        imhsa_core::model::TaskSource::Synth { noise } => {
            map.insert("task".into(), "synth".into());
            map.insert("noise".into(), noise.to_string());
        }
        imhsa_core::model::TaskSource::Cifar { dir } => {
            map.insert("task".into(), "cifar".into());
            map.insert("data_dir".into(), dir.display().to_string());
        }
    }
    map.shift_remove("epochs");
    let stages: Vec<String> = run.model.stages.iter().map(ToString::to_string).collect();
    map.insert("stages".into(), stages.join(","));
    map.shift_remove("variant");
    map.shift_remove("heads");
    for (k, v) in [
        ("seed", run.seed.to_string()),
        ("steps", run.steps.to_string()),
        ("batch_size", run.batch_size.to_string()),
        ("train_size", run.train_size.to_string()),
        ("val_size", run.val_size.to_string()),
        ("lr", run.model.lr.to_string()),
        ("schedule", run.model.schedule.to_string()),
    ] {
        map.insert(k.into(), v);
    }
    map
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    let defaults = BenchConfig::default();
    let cfg = BenchConfig {
        heads: a.heads,
        head_dim: a.head_dim,
        landmark_grid: parse_grid("landmarks", &a.landmarks)?,
        reps: a.reps,
        seed: resolve_seed(a.seed, defaults.seed)?,
        mhsa_cap: a.mhsa_cap.unwrap_or(defaults.mhsa_cap),
        mhsa_ix_cap: a.mhsa_ix_cap.unwrap_or(defaults.mhsa_ix_cap),
    };
    let run = run_scaling_bench(&a.methods, &a.tokens, &cfg)?;
    write_bench_csv(&a.out, &run.records)?;
    for &kind in &a.methods {
        // a fit needs at least two distinct token counts
        if let Ok(fit) = fit_method(&run.records, kind) {
            eprintln!("{kind}: log-log slope {:.3} (r² {:.3}, {} points)", fit.slope, fit.r2, fit.points);
        }
    }
    eprintln!("wrote {} rows to {}", run.records.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let opts = GradCheckOptions {
        eps: a.eps,
        tol: a.tol,
        seed: resolve_seed(a.seed, GradCheckOptions::default().seed)?,
        ..GradCheckOptions::default()
    };
    let start = Instant::now();
    let suite = gradient_suite(&opts, a.instances)?;
    println!("{:<24} {:>8} {:>12}  result", "check", "coords", "max_rel_err");
    let mut failed = 0;
    for e in &suite {
        let ok = e.report.passed();
        failed += usize::from(!ok);
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("{:<24} {:>8} {:>12.3e}  {verdict}", e.name, e.report.coordinates_checked(), e.report.max_rel_error());
    }
    println!(
        "{} of {} checks passed (dtype {}, eps {:e}, tol {:e}) in {:.1}s",
        suite.len() - failed,
        suite.len(),
        a.dtype,
        a.eps,
        a.tol,
        start.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let run = run_config(&a.run)?;
    let task = run.load_task::<f32>()?;
    create_dir(&a.out_dir)?;
    let cfg = &run.model;
    let mut params = build_toy_ivit::<f32>(cfg, run.seed)?;
    let mut state = TrainState::new(&params, run.seed)?;
    let mut rows = Vec::new();
    let start = Instant::now();
    let every = run.eval_every.max(1);
    train(cfg, &mut params, &mut state, &task.train, &run.train_options(), |s, p| {
        let last = s.step as usize == run.steps;
        if (s.step as usize).is_multiple_of(every) || last {
            let val = evaluate(cfg, p, &task.val, 256)?;
            eprintln!("step {:>5}  loss {:.4}  val {:.4}  {:.1}s", s.step, s.loss, val, start.elapsed().as_secs_f64());
            rows.push(vec![s.step.to_string(), format!("{:.6}", s.loss), format!("{:.4}", s.accuracy), format!("{val:.4}")]);
        }
        Ok(())
    })?;
    write_csv(a.out_dir.join("metrics.csv"), &["step", "loss", "train_accuracy", "val_accuracy"], &rows)?;
    save_params(a.out_dir.join("model.ckpt"), &params)?;
    fs::write(a.out_dir.join("run.cfg"), serialize_config(&run_to_map(&run, &a.run)))?;
    if let Some(last) = rows.last() {
        println!("final val_accuracy {}", last[3]);
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate_cmd(a: CheckpointArgs) -> Result<ExitCode> {
    let run = run_config(&a.run)?;
    let params = load_params::<f32>(&a.checkpoint, &run.model)?;
    let task = run.load_task::<f32>()?;
    let acc = evaluate(&run.model, &params, &task.val, 256)?;
    println!("val_accuracy {acc:.4} ({} samples)", task.val.len());
    Ok(ExitCode::SUCCESS)
}

fn ablate(a: AblateArgs) -> Result<ExitCode> {
    let run = run_config(&a.run)?;
    let task = run.load_task::<f32>()?;
    let rows = ablation_run(&run.model, &task, &run.train_options())?;
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.decomposition.to_string(),
                r.interaction.to_string(),
                r.flops.to_string(),
                format!("{:.4}", r.wall_ms),
                format!("{:.4}", r.top1),
            ]
        })
        .collect();
    write_csv(&a.out, &["decomposition", "interaction", "flops", "wall_ms", "top1"], &body)?;
    eprintln!("wrote {} rows to {}", body.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn diag(a: DiagArgs) -> Result<ExitCode> {
    let run = run_config(&a.run)?;
    let task = run.load_task::<f32>()?;
    let rows = head_count_study(&run.model, &a.heads, &task, &run.train_options(), a.probe)?;
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.heads.to_string(),
                r.layer.to_string(),
                format!("{:.4}", r.accuracy),
                format!("{:.6e}", r.variance),
                format!("{:.6}", r.similarity),
            ]
        })
        .collect();
    write_csv(&a.out, &["heads", "layer", "accuracy", "variance", "similarity"], &body)?;
    eprintln!("wrote {} rows to {}", body.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// `[.., H, R, C]` for one sample and head, as a 2-D map.
fn head_slice(t: &Tensor<f32>, sample: usize, head: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    let (h, r, c) = (s[1], s[2], s[3]);
    let start = (sample * h + head) * r * c;
    Ok(Tensor::new([r, c], t.data()[start..start + r * c].to_vec())?)
}

fn attnmap(a: AttnmapArgs) -> Result<ExitCode> {
    let run = run_config(&a.run)?;
    let params = load_params::<f32>(&a.checkpoint, &run.model)?;
    let task = run.load_task::<f32>()?;
    if a.sample >= task.val.len() {
        bail!("sample {} out of range (validation set has {})", a.sample, task.val.len());
    }
    let (x, _) = task.val.batch(&[a.sample])?;
    create_dir(&a.out_dir)?;
    let mut written = 0;
    for m in attention_maps(&run.model, &params, &x)? {
        let heads = m.dense.shape()[1];
        let stem = format!("stage{}_block{}", m.stage, m.block);
        for h in 0..heads {
            let mut export = |name: &str, t: &Tensor<f32>| -> Result<()> {
                export_attention_heatmap(&head_slice(t, 0, h)?, a.out_dir.join(format!("{stem}_head{h}_{name}.pgm")))?;
                written += 1;
                Ok(())
            };
            // the dense map of a decomposed variant is the A_Q·A_K product
            export(if m.kind.is_quadratic() { "attn" } else { "product" }, &m.dense)?;
            if !m.kind.is_quadratic() {
                export("query_landmarks", &m.first)?;
                export("landmarks_key", &m.second)?;
            }
        }
    }
    eprintln!("wrote {written} heatmaps to {}", a.out_dir.display());
    Ok(ExitCode::SUCCESS)
}
