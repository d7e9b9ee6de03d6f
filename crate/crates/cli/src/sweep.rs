use crate::{deterministic, load_manifest, load_store, run_training, write_json, CmdResult, Failure, TrainFlags};
use cir_core::data::{Dataset, SplitManifest};
use cir_core::eval::SummaryRow;
use cir_core::objective::ObjectiveRegistry;
use cir_core::train::TrainConfig;
use clap::Args;
use serde_json::Value;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Args)]
pub struct SweepArgs {
    /// Config field to vary, e.g. `lambda1`, `batch_size`, `mask_policy`.
    #[arg(long)]
    param: String,
    /// Comma-separated values; each is read as JSON, else as a string.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[command(flatten)]
    flags: TrainFlags,
    /// Concurrent runs. Forced to 1 under CIR_DETERMINISTIC=1.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

/// `base` with one field replaced; the value is parsed as JSON when it can be.
pub fn with_param(base: &TrainConfig, param: &str, raw: &str) -> CmdResult<TrainConfig> {
    let mut obj = serde_json::to_value(base)?;
    let map = obj.as_object_mut().expect("config serializes to an object");
    let known = map.contains_key(param)
        || serde_json::to_value(TrainConfig::default())?
            .as_object()
            .is_some_and(|m| m.contains_key(param))
        || matches!(param, "lr" | "gamma1" | "gamma2" | "attention_batches");
    if !known || matches!(param, "data" | "split") {
        return Err(Failure::Usage(format!("cannot sweep over `{param}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    map.insert(param.to_string(), value);
    let c: TrainConfig = serde_json::from_value(obj)
        .map_err(|e| Failure::Usage(format!("{param} = {raw}: {e}")))?;
    c.validate().map_err(|e| Failure::Usage(format!("{param} = {raw}: {e}")))?;
    ObjectiveRegistry::builtin().create(&c.method, &c.objective_params())?;
    Ok(c)
}

fn run_dir_name(param: &str, raw: &str) -> String {
    let clean: String = raw
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect();
    format!("{param}-{clean}")
}

pub fn run(a: SweepArgs) -> CmdResult {
    let values: Vec<&str> = a.values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Failure::Usage("--values needs at least one value".into()));
    }
    if a.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let base = a.flags.resolve()?;
    let configs = values
        .iter()
        .map(|v| with_param(&base, &a.param, v))
        .collect::<CmdResult<Vec<_>>>()?;
    let ds = load_store(base.data.as_deref().unwrap())?;
    let manifest = load_manifest(base.split.as_deref().unwrap())?;
    std::fs::create_dir_all(&a.out)?;
    write_json(
        &a.out.join("sweep.json"),
        &serde_json::json!({ "param": a.param, "values": values, "base": base }),
    )?;

    let jobs = if deterministic() { 1 } else { a.jobs.min(configs.len()) };
    let dirs: Vec<PathBuf> = values.iter().map(|v| a.out.join(run_dir_name(&a.param, v))).collect();
    let results: Vec<Mutex<Option<CmdResult<Vec<SummaryRow>>>>> = configs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= configs.len() {
            break;
        }
        log::info!("{} = {}", a.param, values[i]);
        let r = run_one(&configs[i], &ds, &manifest, &dirs[i]);
        *results[i].lock().unwrap() = Some(r);
    };
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }

    let mut csv = String::from("param,value,split,method,seed,top1\n");
    let mut failed = 0;
    for (i, slot) in results.into_iter().enumerate() {
        match slot.into_inner().unwrap().expect("every run finishes") {
            Ok(rows) => {
                for r in rows {
                    csv += &format!("{},{},{},{},{},{}\n", a.param, values[i], r.split, r.method, r.seed, r.top1);
                }
            }
            Err(e) => {
                failed += 1;
                let msg = match e {
                    Failure::Usage(m) => m,
                    Failure::Runtime(e) => format!("{e:#}"),
                };
                eprintln!("{} = {} failed: {msg}", a.param, values[i]);
            }
        }
    }
    std::fs::write(a.out.join("summary.csv"), &csv)?;
    std::io::stdout().write_all(csv.as_bytes())?;
    if failed > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!("{failed} of {} runs failed", values.len())));
    }
    Ok(())
}

fn run_one(config: &TrainConfig, ds: &Dataset, manifest: &SplitManifest, dir: &Path) -> CmdResult<Vec<SummaryRow>> {
    run_training(config, ds, manifest, dir, None)
}
