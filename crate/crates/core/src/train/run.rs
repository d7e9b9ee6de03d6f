use super::{TrainConfig, Trainer};
use crate::cir::LossParts;
use crate::data::{batch_composition, batch_iter, BatchComposition, Dataset, SplitManifest};
use crate::error::{CirError, Result};
use crate::eval::{attention_report, top1, EpochLoss, RunReport, SplitResult};
use crate::model::{Checkpoint, CirModel};
use crate::objective::ObjectiveRegistry;
use serde::Serialize;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

pub const METRICS_HEADER: &str = "step,epoch,batch,loss,l_c,l_rt,l_rc,l_align,tau,lr";

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    /// Steps taken so far, including this one.
    pub step: u64,
    pub epoch: u64,
    pub batch: u64,
    pub lr: f64,
    pub parts: LossParts,
    pub end_of_epoch: bool,
}

impl StepRecord {
    fn csv(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.batch, p.total, p.l_c, p.l_rt, p.l_rc, p.l_align, p.tau, self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub final_checkpoint: Checkpoint,
    pub best_model: CirModel,
    pub report: RunReport,
    pub steps: Vec<StepRecord>,
}

/// Trains on `manifest.train`, scoring `manifest.val` after every epoch
/// (and once before the first), and reports test accuracy of both the
/// final and the best-validation model.
///
/// With `out`, writes `config.json`, `metrics.csv`, `val.csv`,
/// `checkpoint_final.cir`, `checkpoint_best.cir` and `report.json`
/// there. With `resume`, training continues from that checkpoint and the
/// CSV logs are appended to.
pub fn train_run(
    config: &TrainConfig,
    dataset: &Dataset,
    manifest: &SplitManifest,
    registry: &ObjectiveRegistry,
    out: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<RunOutcome> {
    let config = config.resolved(registry)?;
    if manifest.train.is_empty() || manifest.test.is_empty() {
        return Err(CirError::Split("train and test sets must be non-empty".into()));
    }
    let resuming = resume.is_some();
    let mut trainer = match resume {
        Some(ckpt) => Trainer::from_checkpoint(&config, ckpt, registry)?,
        None => Trainer::new(&config, &dataset.meta, registry)?,
    };
    if trainer.model.config != config.model_config(&dataset.meta) {
        return Err(CirError::Consistency(
            "checkpoint model configuration differs from the run configuration".into(),
        ));
    }

    let mut logs = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&config)?)?;
            Some(Logs::open(dir, resuming)?)
        }
        None => None,
    };

    let val_top1 = |model: &CirModel| -> Result<Option<f64>> {
        if manifest.val.is_empty() {
            Ok(None)
        } else {
            top1(model, dataset, &manifest.val).map(Some)
        }
    };

    let mut val_curve = Vec::new();
    let mut best: Option<(f64, u64, CirModel)> = None;
    if !resuming {
        if let Some(acc) = val_top1(&trainer.model)? {
            val_curve.push((0, acc));
            if let Some(l) = &mut logs {
                l.val(0, acc)?;
            }
            best = Some((acc, 0, trainer.model.clone()));
        }
    }

    let mut steps = Vec::new();
    let mut loss_curve: Vec<EpochLoss> = Vec::new();
    let mut acc = EpochLoss::default();
    let mut in_epoch = 0usize;
    while trainer.progress.epoch < config.epochs {
        let rec = trainer.step_next(dataset, &manifest.train)?;
        if let Some(l) = &mut logs {
            l.metric(&rec)?;
        }
        acc.accumulate(&rec.parts);
        in_epoch += 1;
        steps.push(rec);
        if rec.end_of_epoch {
            let done = trainer.progress.epoch;
            loss_curve.push(acc.finish(done, in_epoch));
            acc = EpochLoss::default();
            in_epoch = 0;
            if let Some(a) = val_top1(&trainer.model)? {
                val_curve.push((done, a));
                if let Some(l) = &mut logs {
                    l.val(done, a)?;
                }
                if best.as_ref().is_none_or(|(b, _, _)| a > *b) {
                    best = Some((a, done, trainer.model.clone()));
                }
            }
            log::info!(
                "epoch {done}/{} loss {:.4} val {:?}",
                config.epochs,
                loss_curve.last().map_or(f64::NAN, |l| l.total),
                val_curve.last().map(|v| v.1)
            );
        }
    }

    let final_checkpoint = trainer.checkpoint();
    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (Some(e), m),
        None => (None, trainer.model.clone()),
    };
    let test_final = top1(&trainer.model, dataset, &manifest.test)?;
    let test_best = top1(&best_model, dataset, &manifest.test)?;

    let first_epoch = batch_iter(&manifest.train, config.batch_size, config.seed, 0);
    let composition = mean_composition(dataset, &first_epoch);
    let attention = attention_report(
        &trainer.model,
        dataset,
        &manifest.train,
        config.batch_size,
        config.attention_batches,
        config.seed,
    )?;

    let split = manifest.spec.name();
    let report = RunReport {
        method: config.method.clone(),
        seed: config.seed,
        splits: vec![SplitResult {
            split,
            top1: test_best,
            top1_final: test_final,
        }],
        mean_top1: test_best,
        best_epoch,
        val_curve,
        loss_curve,
        attention: Some(attention),
        batch_composition: composition,
    };

    if let Some(dir) = out {
        if let Some(l) = logs.take() {
            l.close()?;
        }
        final_checkpoint.save(dir.join("checkpoint_final.cir"))?;
        Checkpoint {
            model: best_model.clone(),
            progress: final_checkpoint.progress,
            adam: None,
        }
        .save(dir.join("checkpoint_best.cir"))?;
        report.save(dir.join("report.json"))?;
    }

    Ok(RunOutcome {
        final_checkpoint,
        best_model,
        report,
        steps,
    })
}

fn mean_composition(dataset: &Dataset, batches: &[Vec<usize>]) -> BatchComposition {
    let mut c = BatchComposition::default();
    if batches.is_empty() {
        return c;
    }
    for b in batches {
        let domains: Vec<_> = b.iter().map(|&i| dataset.records[i].domain()).collect();
        let x = batch_composition(&domains);
        c.same_scenario += x.same_scenario;
        c.same_location += x.same_location;
        c.same_both += x.same_both;
    }
    let n = batches.len() as f64;
    c.same_scenario /= n;
    c.same_location /= n;
    c.same_both /= n;
    c
}

struct Logs {
    metrics: BufWriter<File>,
    val: BufWriter<File>,
}

impl Logs {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let fresh = !append || !path.exists();
            let f = if fresh {
                File::create(&path)?
            } else {
                OpenOptions::new().append(true).open(&path)?
            };
            let mut w = BufWriter::new(f);
            if fresh {
                writeln!(w, "{header}")?;
            }
            Ok(w)
        };
        Ok(Logs {
            metrics: open("metrics.csv", METRICS_HEADER)?,
            val: open("val.csv", "epoch,top1")?,
        })
    }

    fn metric(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.metrics, "{}", r.csv())?;
        Ok(())
    }

    fn val(&mut self, epoch: u64, acc: f64) -> Result<()> {
        writeln!(self.val, "{epoch},{acc}")?;
        Ok(())
    }

    fn close(mut self) -> Result<()> {
        self.metrics.flush()?;
        self.val.flush()?;
        Ok(())
    }
}
