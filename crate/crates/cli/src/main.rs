//! `cir`: generate feature stores, cut splits, train, evaluate and analyze.
//!
//! Exit status is 0 on success, 1 when a run fails, 2 on a usage error.

mod sweep;

use anyhow::Context;
use cir_core::cir::{check_gradients, CirLossConfig, MaskPolicy};
use cir_core::data::{
    batch_iter, generate_synthetic, read_feature_store, write_feature_store, Dataset, SplitManifest, SplitMode,
    SplitSpec, SyntheticSpec,
};
use cir_core::eval::{
    attention_report, drop_recovery, top1, topk_support, write_attention_csv, write_summary_csv, SummaryRow,
};
use cir_core::model::{Checkpoint, CirModel, ModelConfig};
use cir_core::ndmath::GradCheck;
use cir_core::objective::ObjectiveRegistry;
use cir_core::train::{train_run, TrainConfig};
use cir_core::CirError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cir", version, about = "Cross-instance reconstruction experiments on clip features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scenario × location feature store.
    Generate(GenerateArgs),
    /// Cut a held-out (scenario, location) split with a validation set.
    Split(SplitArgs),
    /// Train one model and write its run directory.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on one side of a split.
    Eval(EvalArgs),
    /// Attention composition, top-k supports and drop recovery.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Train once per value of one config field and merge the summaries.
    Sweep(sweep::SweepArgs),
    /// Finite-difference check of the full objective on a toy model.
    Gradcheck(GradcheckArgs),
}

/// How a command failed, which decides the exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<CirError> for Failure {
    fn from(e: CirError) -> Self {
        match e {
            CirError::Param(_) | CirError::Unknown { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Sweep(a) => sweep::run(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Whether `CIR_DETERMINISTIC=1` is set. All math is single-threaded and
/// reproducible already; the flag also serializes sweeps.
pub fn deterministic() -> bool {
    std::env::var("CIR_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CmdResult {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_store(dir: &Path) -> CmdResult<Dataset> {
    Ok(read_feature_store(dir).with_context(|| format!("reading feature store {}", dir.display()))?)
}

fn load_manifest(path: &Path) -> CmdResult<SplitManifest> {
    Ok(SplitManifest::load(path).with_context(|| format!("reading split {}", path.display()))?)
}

fn load_checkpoint(path: &Path) -> CmdResult<Checkpoint> {
    Ok(Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?)
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON synthetic spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    scenarios: Option<u32>,
    #[arg(long)]
    locations: Option<u32>,
    #[arg(long)]
    samples_per_cell: Option<usize>,
    #[arg(long)]
    video_dim: Option<usize>,
    #[arg(long)]
    text_dim: Option<usize>,
    #[arg(long)]
    class_signal: Option<f64>,
    #[arg(long)]
    scenario_shift: Option<f64>,
    #[arg(long)]
    location_shift: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    clips_per_video: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn generate(a: GenerateArgs) -> CmdResult {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)
            .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => SyntheticSpec::default(),
    };
    macro_rules! overlay {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { spec.$field = v; })*
        };
    }
    overlay!(
        classes => num_classes,
        scenarios => num_scenarios,
        locations => num_locations,
        samples_per_cell => samples_per_cell,
        video_dim => video_dim,
        text_dim => text_dim,
        class_signal => class_signal,
        scenario_shift => scenario_shift,
        location_shift => location_shift,
        noise => noise,
        clips_per_video => clips_per_video,
        seed => seed
    );
    spec.validate()?;
    let ds = generate_synthetic(&spec)?;
    write_feature_store(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    write_json(&a.out.join("spec.json"), &spec)?;
    println!("wrote {} clips to {}", ds.len(), a.out.display());
    Ok(())
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    held_scenario: u32,
    #[arg(long, default_value_t = 0)]
    held_location: u32,
    /// exclude_both, include_scenario, include_location, include_union or include_pair.
    #[arg(long, default_value = "exclude_both")]
    mode: String,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn split(a: SplitArgs) -> CmdResult {
    let mode = SplitMode::parse(&a.mode)?;
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(Failure::Usage(format!("--val-fraction must lie in [0, 1), got {}", a.val_fraction)));
    }
    let ds = load_store(&a.data)?;
    let spec = SplitSpec {
        held_scenario: a.held_scenario,
        held_location: a.held_location,
        mode,
    };
    let m = SplitManifest::build(&ds, spec, a.val_fraction, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    m.save(&a.out)?;
    println!(
        "{}: train {} val {} test {}",
        spec.name(),
        m.train.len(),
        m.val.len(),
        m.test.len()
    );
    Ok(())
}

/// Run configuration flags shared by `train` and `sweep`.
#[derive(Args, Clone, Default)]
pub struct TrainFlags {
    /// JSON run config (for example a previous run's config.json); flags
    /// override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    /// cir, cir_no_text, erm, mixup, coral or mmd.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    lr_decay_epochs: Option<Vec<u64>>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// `permissive` or a comma list of no-same-scenario, no-other-scenario,
    /// no-same-location, no-other-location.
    #[arg(long)]
    mask_policy: Option<String>,
    #[arg(long)]
    mixup_alpha: Option<f64>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    qk_dim: Option<usize>,
    #[arg(long)]
    attention_batches: Option<usize>,
}

impl TrainFlags {
    pub fn resolve(&self) -> CmdResult<TrainConfig> {
        let mut c: TrainConfig = match &self.config {
            Some(p) => serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)
                .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
            None => TrainConfig::default(),
        };
        macro_rules! overlay {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { c.$field = v; })*
            };
        }
        overlay!(method, epochs, lr_decay_epochs, batch_size, lambda1, lambda2, mixup_alpha, seed, hidden_dim, embed_dim, qk_dim);
        if self.lr.is_some() {
            c.lr = self.lr;
        }
        if self.gamma1.is_some() {
            c.gamma1 = self.gamma1;
        }
        if self.gamma2.is_some() {
            c.gamma2 = self.gamma2;
        }
        if self.attention_batches.is_some() {
            c.attention_batches = self.attention_batches;
        }
        if let Some(p) = &self.mask_policy {
            c.mask_policy = p.parse::<MaskPolicy>()?;
        }
        if self.data.is_some() {
            c.data = self.data.clone();
        }
        if self.split.is_some() {
            c.split = self.split.clone();
        }
        if c.data.is_none() || c.split.is_none() {
            return Err(Failure::Usage("--data and --split are required (directly or via --config)".into()));
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Continue from this checkpoint; CSV logs in --out are appended to.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Trains into `out` and writes `summary.csv` and `attention.csv` beside
/// the trainer's own outputs.
pub fn run_training(
    config: &TrainConfig,
    dataset: &Dataset,
    manifest: &SplitManifest,
    out: &Path,
    resume: Option<Checkpoint>,
) -> CmdResult<Vec<SummaryRow>> {
    let registry = ObjectiveRegistry::builtin();
    let outcome = train_run(config, dataset, manifest, &registry, Some(out), resume)?;
    let rows = outcome.report.summary_rows();
    write_summary_csv(out.join("summary.csv"), &rows)?;
    if let Some(att) = &outcome.report.attention {
        write_attention_csv(out.join("attention.csv"), att)?;
    }
    Ok(rows)
}

fn train(a: TrainArgs) -> CmdResult {
    let config = a.flags.resolve()?;
    ObjectiveRegistry::builtin().create(&config.method, &config.objective_params())?;
    let ds = load_store(config.data.as_deref().unwrap())?;
    let manifest = load_manifest(config.split.as_deref().unwrap())?;
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let rows = run_training(&config, &ds, &manifest, &a.out, resume)?;
    for r in rows {
        println!("{},{},{},{}", r.split, r.method, r.seed, r.top1);
    }
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Train,
    Val,
    Test,
}

impl Side {
    fn ids(self, m: &SplitManifest) -> &[usize] {
        match self {
            Side::Train => &m.train,
            Side::Val => &m.val,
            Side::Test => &m.test,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Side::Train => "train",
            Side::Val => "val",
            Side::Test => "test",
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    set: Side,
    /// Directory for eval.json and summary.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Method and seed from the run config next to a checkpoint, if any.
fn run_identity(checkpoint: &Path) -> (String, u64) {
    let cfg = checkpoint
        .parent()
        .map(|d| d.join("config.json"))
        .and_then(|p| std::fs::read(p).ok())
        .and_then(|b| serde_json::from_slice::<TrainConfig>(&b).ok());
    match cfg {
        Some(c) => (c.method, c.seed),
        None => ("unknown".into(), 0),
    }
}

fn eval(a: EvalArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let ds = load_store(&a.data)?;
    let m = load_manifest(&a.split)?;
    let acc = top1(&ckpt.model, &ds, a.set.ids(&m))?;
    let (method, seed) = run_identity(&a.checkpoint);
    let result = json!({
        "checkpoint": a.checkpoint,
        "data": a.data,
        "split": a.split,
        "split_name": m.spec.name(),
        "set": a.set.name(),
        "method": method,
        "seed": seed,
        "top1": acc,
    });
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("eval.json"), &result)?;
        write_summary_csv(
            out.join("summary.csv"),
            &[SummaryRow {
                split: m.spec.name(),
                method,
                seed,
                top1: acc,
            }],
        )?;
    }
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

#[derive(Subcommand)]
enum Analyze {
    /// Where learned attention goes, by scenario and location.
    Attention(AttentionArgs),
    /// Strongest supports of one query within a batch.
    Topk(TopkArgs),
    /// Share of the exclude_both → include_pair gap recovered by each mode.
    DropRecovery(DropArgs),
}

#[derive(Args)]
struct AttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    set: Side,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Defaults to one pass over the chosen set.
    #[arg(long)]
    num_batches: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TopkArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    query: usize,
    /// Dataset ids forming the batch; must contain the query.
    #[arg(long, value_delimiter = ',', required = true)]
    batch: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args)]
struct DropArgs {
    #[arg(long)]
    exclude_both: f64,
    #[arg(long)]
    with_scenario: f64,
    #[arg(long)]
    with_location: f64,
    #[arg(long)]
    with_union: Option<f64>,
    #[arg(long)]
    with_pair: f64,
}

fn analyze(a: Analyze) -> CmdResult {
    match a {
        Analyze::Attention(a) => {
            if a.batch_size < 2 {
                return Err(Failure::Usage("--batch-size must be at least 2".into()));
            }
            let ckpt = load_checkpoint(&a.checkpoint)?;
            let ds = load_store(&a.data)?;
            let m = load_manifest(&a.split)?;
            let stats = attention_report(&ckpt.model, &ds, a.set.ids(&m), a.batch_size, a.num_batches, a.seed)?;
            std::fs::create_dir_all(&a.out)?;
            write_json(
                &a.out.join("config.json"),
                &json!({
                    "checkpoint": a.checkpoint,
                    "data": a.data,
                    "split": a.split,
                    "set": a.set.name(),
                    "batch_size": a.batch_size,
                    "num_batches": a.num_batches,
                    "seed": a.seed,
                }),
            )?;
            write_json(&a.out.join("attention.json"), &stats)?;
            write_attention_csv(a.out.join("attention.csv"), &stats)?;
            println!(
                "SS {:.4} OS {:.4} SL {:.4} OL {:.4} over {} batches",
                stats.same_scenario, stats.other_scenario, stats.same_location, stats.other_location, stats.batches
            );
        }
        Analyze::Topk(a) => {
            let ckpt = load_checkpoint(&a.checkpoint)?;
            let ds = load_store(&a.data)?;
            if let Some(&bad) = a.batch.iter().find(|&&i| i >= ds.len()) {
                return Err(Failure::Usage(format!("id {bad} is outside the dataset of {} clips", ds.len())));
            }
            let top = topk_support(&ckpt.model, &ds, a.query, &a.batch, a.k)?;
            println!("{}", serde_json::to_string_pretty(&top)?);
        }
        Analyze::DropRecovery(a) => {
            let r = drop_recovery(a.exclude_both, a.with_scenario, a.with_location, a.with_union, a.with_pair);
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 6)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    qk_dim: usize,
    #[arg(long, default_value_t = 6)]
    video_dim: usize,
    #[arg(long, default_value_t = 5)]
    text_dim: usize,
    #[arg(long, default_value_t = 10)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda2: f64,
    #[arg(long, default_value = "permissive")]
    mask_policy: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    if a.batch < 2 {
        return Err(Failure::Usage("--batch must be at least 2".into()));
    }
    let cfg = CirLossConfig {
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        mask_policy: a.mask_policy.parse()?,
    };
    cfg.validate()?;
    let ds = generate_synthetic(&SyntheticSpec {
        num_classes: a.classes,
        video_dim: a.video_dim,
        text_dim: a.text_dim,
        samples_per_cell: a.batch.max(2),
        seed: a.seed,
        ..SyntheticSpec::default()
    })?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let ids = batch_iter(&all, a.batch, a.seed, 0).swap_remove(0);
    let batch = ds.batch(&ids)?;
    let model = CirModel::init(&ModelConfig {
        video_dim: a.video_dim,
        text_dim: a.text_dim,
        hidden_dim: a.hidden_dim,
        embed_dim: a.embed_dim,
        qk_dim: a.qk_dim,
        num_classes: a.classes,
        seed: a.seed,
        tau_init: 0.07,
    })?;
    let report = check_gradients(&model, &batch, &cfg, &GradCheck::default())?;
    println!(
        "max relative error {:.3e} over {} elements ({} skipped at relu kinks)",
        report.max_rel_error, report.checked, report.skipped_kinks
    );
    if report.max_rel_error >= a.tolerance {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "gradient check failed: {:.3e} ≥ {:.0e} at {:?}",
            report.max_rel_error,
            a.tolerance,
            report.worst
        )));
    }
    Ok(())
}
