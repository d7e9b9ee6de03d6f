//! Accuracy, attention-composition analysis, top-k supports, drop
//! recovery, and the run report with its CSV exports.

use crate::cir::{attention_scores_learned, reconstruct, MaskPolicy};
use crate::data::{batch_iter, BatchComposition, Dataset, Domain};
use crate::error::{CirError, Result};
use crate::model::{CirModel, Mode};
use crate::ndmath::{Tape, Tensor};
use crate::seed::sub_seed;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const EVAL_CHUNK: usize = 512;

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode class predictions for `ids`.
pub fn predict(model: &CirModel, dataset: &Dataset, ids: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_CHUNK) {
        let batch = dataset.batch(chunk)?;
        let logits = model.predict_logits(&batch.video)?;
        out.extend((0..logits.rows()).map(|i| argmax(logits.row(i))));
    }
    Ok(out)
}

/// Fraction of `ids` whose eval-mode argmax matches the label.
pub fn top1(model: &CirModel, dataset: &Dataset, ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return Err(CirError::Param("top-1 over an empty id set".into()));
    }
    let pred = predict(model, dataset, ids)?;
    let correct = pred
        .iter()
        .zip(ids)
        .filter(|(p, &i)| **p == dataset.records[i].class_id)
        .count();
    Ok(correct as f64 / ids.len() as f64)
}

/// Learned-attention weights of a batch, computed in eval mode.
pub fn learned_attention_weights(
    model: &CirModel,
    video: &Tensor,
    policy: &MaskPolicy,
    domains: Option<&[Domain]>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = model.bind_frozen(&mut tape);
    let v = tape.constant(video.clone());
    let (f_v, _) = model.encode_video(&mut tape, &vars, v, Mode::Eval)?;
    let scores = attention_scores_learned(model, &mut tape, &vars, f_v)?;
    let (_, w) = reconstruct(&mut tape, scores, f_v, policy, domains)?;
    Ok(tape.value(w).clone())
}

/// Where reconstruction attention goes, by domain relation to the query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub same_scenario: f64,
    pub other_scenario: f64,
    pub same_location: f64,
    pub other_location: f64,
    /// Row-normalized `[query scenario][support scenario]` mass.
    pub scenario_matrix: Vec<Vec<f64>>,
    /// Row-normalized `[query location][support location]` mass.
    pub location_matrix: Vec<Vec<f64>>,
    pub batches: usize,
}

/// Running sums behind [`AttentionStats`].
#[derive(Clone, Debug)]
pub struct AttentionAccumulator {
    same_scenario: f64,
    other_scenario: f64,
    same_location: f64,
    other_location: f64,
    scenario: Vec<Vec<f64>>,
    location: Vec<Vec<f64>>,
    batches: usize,
}

impl AttentionAccumulator {
    pub fn new(num_scenarios: usize, num_locations: usize) -> Self {
        AttentionAccumulator {
            same_scenario: 0.0,
            other_scenario: 0.0,
            same_location: 0.0,
            other_location: 0.0,
            scenario: vec![vec![0.0; num_scenarios]; num_scenarios],
            location: vec![vec![0.0; num_locations]; num_locations],
            batches: 0,
        }
    }

    /// Adds one `B×B` weight matrix with the batch's domain labels.
    pub fn add(&mut self, weights: &Tensor, domains: &[Domain]) -> Result<()> {
        let b = domains.len();
        if weights.shape() != [b, b] {
            return Err(CirError::shape("attention accumulate", weights.shape(), &[b, b]));
        }
        for (i, qi) in domains.iter().enumerate() {
            for (j, sj) in domains.iter().enumerate() {
                let w = weights.at(i, j);
                let (qs, ss) = (qi.scenario as usize, sj.scenario as usize);
                let (ql, sl) = (qi.location as usize, sj.location as usize);
                if qs >= self.scenario.len() || ss >= self.scenario.len() {
                    return Err(CirError::Param(format!("scenario id {} out of range", qs.max(ss))));
                }
                if ql >= self.location.len() || sl >= self.location.len() {
                    return Err(CirError::Param(format!("location id {} out of range", ql.max(sl))));
                }
                if qs == ss {
                    self.same_scenario += w;
                } else {
                    self.other_scenario += w;
                }
                if ql == sl {
                    self.same_location += w;
                } else {
                    self.other_location += w;
                }
                self.scenario[qs][ss] += w;
                self.location[ql][sl] += w;
            }
        }
        self.batches += 1;
        Ok(())
    }

    pub fn finish(&self) -> AttentionStats {
        let split = |same: f64, other: f64| {
            let total = same + other;
            if total > 0.0 {
                let s = same / total;
                (s, 1.0 - s)
            } else {
                (0.0, 0.0)
            }
        };
        let (ss, os) = split(self.same_scenario, self.other_scenario);
        let (sl, ol) = split(self.same_location, self.other_location);
        AttentionStats {
            same_scenario: ss,
            other_scenario: os,
            same_location: sl,
            other_location: ol,
            scenario_matrix: row_normalize(&self.scenario),
            location_matrix: row_normalize(&self.location),
            batches: self.batches,
        }
    }
}

/// Rows with no mass stay zero.
fn row_normalize(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter().map(|x| x / s).collect()
            } else {
                row.clone()
            }
        })
        .collect()
}

/// Learned-attention composition over seeded batches drawn from `ids`,
/// `num_batches` of them or one full pass when `None`.
pub fn attention_report(
    model: &CirModel,
    dataset: &Dataset,
    ids: &[usize],
    batch_size: usize,
    num_batches: Option<usize>,
    seed: u64,
) -> Result<AttentionStats> {
    let batches = batch_iter(ids, batch_size, sub_seed(seed, "attention", 0), 0);
    if batches.is_empty() {
        return Err(CirError::DegenerateBatch(format!(
            "attention analysis needs a batch of at least 2 samples, have {} ids",
            ids.len()
        )));
    }
    let mut acc = AttentionAccumulator::new(
        dataset.meta.num_scenarios as usize,
        dataset.meta.num_locations as usize,
    );
    for ids in batches.iter().take(num_batches.unwrap_or(usize::MAX)) {
        let batch = dataset.batch(ids)?;
        let w = learned_attention_weights(model, &batch.video, &MaskPolicy::PERMISSIVE, None)?;
        acc.add(&w, &batch.domains)?;
    }
    Ok(acc.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    /// `(dataset id, weight)` in descending weight order.
    pub supports: Vec<(usize, f64)>,
    /// Weight held by the supports not listed.
    pub residual: f64,
}

/// The `k` strongest learned-attention supports of `query` within the
/// batch `batch_ids`.
pub fn topk_support(
    model: &CirModel,
    dataset: &Dataset,
    query: usize,
    batch_ids: &[usize],
    k: usize,
) -> Result<TopK> {
    let pos = batch_ids
        .iter()
        .position(|&i| i == query)
        .ok_or_else(|| CirError::Param(format!("query {query} is not in the batch")))?;
    if k >= batch_ids.len() {
        return Err(CirError::Param(format!(
            "k = {k} must be smaller than the batch size {}",
            batch_ids.len()
        )));
    }
    let batch = dataset.batch(batch_ids)?;
    let w = learned_attention_weights(model, &batch.video, &MaskPolicy::PERMISSIVE, None)?;
    Ok(rank_row(w.row(pos), pos, batch_ids, k))
}

fn rank_row(row: &[f64], pos: usize, ids: &[usize], k: usize) -> TopK {
    let mut order: Vec<usize> = (0..row.len()).filter(|&j| j != pos).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let supports = order[..k].iter().map(|&j| (ids[j], row[j])).collect();
    let residual = order[k..].iter().map(|&j| row[j]).sum();
    TopK { supports, residual }
}

/// Share of the accuracy gap between `exclude_both` and `include_pair`
/// closed by re-admitting part of the held domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropRecovery {
    pub acc_exclude_both: f64,
    pub acc_with_scenario: f64,
    pub acc_with_location: f64,
    pub acc_with_union: Option<f64>,
    pub acc_with_pair: f64,
    /// Percentages; `None` when the gap is not positive.
    pub recovered_scenario: Option<f64>,
    pub recovered_location: Option<f64>,
    pub recovered_union: Option<f64>,
}

pub fn drop_recovery(
    exclude_both: f64,
    with_scenario: f64,
    with_location: f64,
    with_union: Option<f64>,
    with_pair: f64,
) -> DropRecovery {
    let gap = with_pair - exclude_both;
    let pct = |x: f64| (gap > 0.0).then(|| 100.0 * (x - exclude_both) / gap);
    DropRecovery {
        acc_exclude_both: exclude_both,
        acc_with_scenario: with_scenario,
        acc_with_location: with_location,
        acc_with_union: with_union,
        acc_with_pair: with_pair,
        recovered_scenario: pct(with_scenario),
        recovered_location: pct(with_location),
        recovered_union: with_union.and_then(pct),
    }
}

/// Mean loss parts over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: u64,
    pub total: f64,
    pub l_c: f64,
    pub l_rt: f64,
    pub l_rc: f64,
    pub l_align: f64,
}

impl EpochLoss {
    pub fn accumulate(&mut self, p: &crate::cir::LossParts) {
        self.total += p.total;
        self.l_c += p.l_c;
        self.l_rt += p.l_rt;
        self.l_rc += p.l_rc;
        self.l_align += p.l_align;
    }

    pub fn finish(self, epoch: u64, steps: usize) -> EpochLoss {
        let n = steps.max(1) as f64;
        EpochLoss {
            epoch,
            total: self.total / n,
            l_c: self.l_c / n,
            l_rt: self.l_rt / n,
            l_rc: self.l_rc / n,
            l_align: self.l_align / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: String,
    /// Test top-1 of the best-validation model.
    pub top1: f64,
    /// Test top-1 after the last epoch.
    pub top1_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub splits: Vec<SplitResult>,
    pub mean_top1: f64,
    pub best_epoch: Option<u64>,
    /// `(epoch, val top-1)`, epoch 0 being the untrained model.
    pub val_curve: Vec<(u64, f64)>,
    pub loss_curve: Vec<EpochLoss>,
    pub attention: Option<AttentionStats>,
    pub batch_composition: BatchComposition,
}

impl RunReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.splits
            .iter()
            .map(|s| SummaryRow {
                split: s.split.clone(),
                method: self.method.clone(),
                seed: self.seed,
                top1: s.top1,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub split: String,
    pub method: String,
    pub seed: u64,
    pub top1: f64,
}

pub const SUMMARY_HEADER: &str = "split,method,seed,top1";

pub fn write_summary_csv(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.split, r.method, r.seed, r.top1)?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format dump of both attention matrices: `matrix,from,to,weight`.
pub fn write_attention_csv(path: impl AsRef<Path>, stats: &AttentionStats) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "matrix,from,to,weight")?;
    for (name, m) in [("scenario", &stats.scenario_matrix), ("location", &stats.location_matrix)] {
        for (i, row) in m.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                writeln!(w, "{name},{i},{j},{x}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
