//! Reference objectives sharing the CIR encoder and classifier: ERM,
//! Mixup, and CORAL / MMD domain alignment on the video embeddings.

use crate::data::Batch;
use crate::error::{CirError, Result};
use crate::model::{CirModel, Mode, ModelVars};
use crate::ndmath::{BatchStats, Tape, Targets, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use std::collections::BTreeMap;

/// Plain cross-entropy `L_c` on `h(f(v))`.
pub fn erm_loss(
    model: &CirModel,
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &Batch,
) -> Result<(Var, Var, Option<BatchStats>)> {
    let video = tape.constant(batch.video.clone());
    let (f_v, stats) = model.encode_video(tape, vars, video, Mode::Train)?;
    let logits = model.classify(tape, vars, f_v)?;
    let l_c = tape.cross_entropy(logits, &Targets::Hard(batch.labels.clone()))?;
    Ok((l_c, f_v, stats))
}

/// Raw video features mixed pairwise, with the matching soft labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub video: Tensor,
    pub targets: Tensor,
    /// Partner of each row.
    pub partner: Vec<usize>,
    pub lambdas: Vec<f64>,
}

/// `x̃_i = λ_i x_i + (1 − λ_i) x_{π(i)}` with `λ_i ~ Beta(α, α)` and `π` a
/// random permutation.
pub fn mixup_batch<R: Rng>(batch: &Batch, num_classes: usize, alpha: f64, rng: &mut R) -> Result<MixedBatch> {
    if !(alpha > 0.0) {
        return Err(CirError::Param(format!("mixup alpha must be positive, got {alpha}")));
    }
    let b = batch.len();
    if b < 2 {
        return Err(CirError::DegenerateBatch(format!("mixup needs at least 2 samples, got {b}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| CirError::Param(e.to_string()))?;
    let mut partner: Vec<usize> = (0..b).collect();
    partner.shuffle(rng);
    let lambdas: Vec<f64> = (0..b).map(|_| beta.sample(rng)).collect();
    mix_with(batch, num_classes, &partner, &lambdas)
}

/// Mixup with explicit partners and coefficients.
pub fn mix_with(batch: &Batch, num_classes: usize, partner: &[usize], lambdas: &[f64]) -> Result<MixedBatch> {
    let b = batch.len();
    if partner.len() != b || lambdas.len() != b {
        return Err(CirError::shape("mixup", &[b], &[partner.len(), lambdas.len()]));
    }
    let d = batch.video.cols();
    let mut video = vec![0.0; b * d];
    let mut targets = vec![0.0; b * num_classes];
    for i in 0..b {
        let (j, lam) = (partner[i], lambdas[i]);
        let (xi, xj) = (batch.video.row(i), batch.video.row(j));
        for k in 0..d {
            video[i * d + k] = lam * xi[k] + (1.0 - lam) * xj[k];
        }
        for (label, w) in [(batch.labels[i], lam), (batch.labels[j], 1.0 - lam)] {
            if label >= num_classes {
                return Err(CirError::Label { label, classes: num_classes });
            }
            targets[i * num_classes + label] += w;
        }
    }
    Ok(MixedBatch {
        video: Tensor::matrix(b, d, video)?,
        targets: Tensor::matrix(b, num_classes, targets)?,
        partner: partner.to_vec(),
        lambdas: lambdas.to_vec(),
    })
}

/// Soft-target cross-entropy on a mixed batch.
pub fn mixup_loss(
    model: &CirModel,
    tape: &mut Tape,
    vars: &ModelVars,
    mixed: &MixedBatch,
) -> Result<(Var, Option<BatchStats>)> {
    let video = tape.constant(mixed.video.clone());
    let (f_v, stats) = model.encode_video(tape, vars, video, Mode::Train)?;
    let logits = model.classify(tape, vars, f_v)?;
    let loss = tape.cross_entropy(logits, &Targets::Soft(mixed.targets.clone()))?;
    Ok((loss, stats))
}

/// Row indices per domain label, keeping only groups with ≥ 2 members.
fn eligible_groups(labels: &[u32]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups.into_values().filter(|g| g.len() >= 2).collect()
}

fn average_over_pairs(
    tape: &mut Tape,
    groups: &[Vec<usize>],
    what: &str,
    mut pair: impl FnMut(&mut Tape, &[usize], &[usize]) -> Result<Var>,
) -> Result<Var> {
    if groups.len() < 2 {
        log::debug!("{what}: fewer than two domains with ≥ 2 samples, skipping");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut total: Option<Var> = None;
    let mut n = 0usize;
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            let d = pair(tape, &groups[a], &groups[b])?;
            total = Some(match total {
                None => d,
                Some(t) => tape.add(t, d)?,
            });
            n += 1;
        }
    }
    Ok(tape.scale(total.expect("at least one pair"), 1.0 / n as f64))
}

/// Mean and unbiased covariance of the selected rows.
fn moments(tape: &mut Tape, f_v: Var, rows: &[usize]) -> Result<(Var, Var)> {
    let x = tape.gather_rows(f_v, rows)?;
    let mu = tape.mean_rows(x)?;
    let centered = tape.sub_row(x, mu)?;
    let ct = tape.transpose(centered)?;
    let cov = tape.matmul(ct, centered)?;
    let cov = tape.scale(cov, 1.0 / (rows.len() - 1) as f64);
    Ok((mu, cov))
}

/// CORAL distance averaged over unordered domain pairs:
/// `‖μ_a − μ_b‖² + ‖C_a − C_b‖²_F / (4E²)`.
pub fn coral_loss(tape: &mut Tape, f_v: Var, domain_labels: &[u32]) -> Result<Var> {
    check_labels(tape, f_v, domain_labels)?;
    let e = tape.shape(f_v)[1] as f64;
    let groups = eligible_groups(domain_labels);
    average_over_pairs(tape, &groups, "coral", |tape, a, b| {
        let (mu_a, cov_a) = moments(tape, f_v, a)?;
        let (mu_b, cov_b) = moments(tape, f_v, b)?;
        let dm = tape.sub(mu_a, mu_b)?;
        let mean_term = tape.sum_squares(dm);
        let dc = tape.sub(cov_a, cov_b)?;
        let cov_term = tape.sum_squares(dc);
        let cov_term = tape.scale(cov_term, 1.0 / (4.0 * e * e));
        tape.add(mean_term, cov_term)
    })
}

pub const MMD_BANDWIDTH_SCALES: [f64; 3] = [0.5, 1.0, 2.0];

/// Median pairwise Euclidean distance over distinct rows, falling back to
/// 1 when every row coincides.
pub fn median_pairwise_distance(x: &Tensor) -> f64 {
    let n = x.rows();
    let mut d: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(
                x.row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2])
    };
    if m > 1e-12 {
        m
    } else {
        1.0
    }
}

/// Sum over bandwidths of `mean(exp(−D / 2σ²))`.
fn mean_kernel(tape: &mut Tape, a: Var, b: Var, sigmas: &[f64]) -> Result<Var> {
    let d = tape.pairwise_sq_dist(a, b)?;
    let mut total: Option<Var> = None;
    for &s in sigmas {
        let scaled = tape.scale(d, -1.0 / (2.0 * s * s));
        let k = tape.exp(scaled);
        let m = tape.mean(k);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    Ok(total.expect("non-empty bandwidth set"))
}

/// Squared MMD with a multi-bandwidth Gaussian kernel, averaged over
/// unordered domain pairs. Bandwidths are the median pairwise distance of
/// the two pooled domains times [`MMD_BANDWIDTH_SCALES`], held constant
/// under differentiation.
pub fn mmd_loss(tape: &mut Tape, f_v: Var, domain_labels: &[u32]) -> Result<Var> {
    mmd_with(tape, f_v, domain_labels, None)
}

/// [`mmd_loss`] with a fixed base bandwidth instead of the median rule.
pub fn mmd_loss_fixed(tape: &mut Tape, f_v: Var, domain_labels: &[u32], bandwidth: f64) -> Result<Var> {
    if !(bandwidth > 0.0) {
        return Err(CirError::Param(format!("bandwidth must be positive, got {bandwidth}")));
    }
    mmd_with(tape, f_v, domain_labels, Some(bandwidth))
}

fn mmd_with(tape: &mut Tape, f_v: Var, domain_labels: &[u32], bandwidth: Option<f64>) -> Result<Var> {
    check_labels(tape, f_v, domain_labels)?;
    let groups = eligible_groups(domain_labels);
    average_over_pairs(tape, &groups, "mmd", |tape, a, b| {
        let base = match bandwidth {
            Some(s) => s,
            None => {
                let pooled: Vec<usize> = a.iter().chain(b).copied().collect();
                median_pairwise_distance(&tape.value(f_v).select_rows(&pooled))
            }
        };
        let sigmas: Vec<f64> = MMD_BANDWIDTH_SCALES.iter().map(|s| s * base).collect();
        let x = tape.gather_rows(f_v, a)?;
        let y = tape.gather_rows(f_v, b)?;
        let kxx = mean_kernel(tape, x, x, &sigmas)?;
        let kyy = mean_kernel(tape, y, y, &sigmas)?;
        let kxy = mean_kernel(tape, x, y, &sigmas)?;
        let within = tape.add(kxx, kyy)?;
        let cross = tape.scale(kxy, 2.0);
        tape.sub(within, cross)
    })
}

fn check_labels(tape: &Tape, f_v: Var, labels: &[u32]) -> Result<()> {
    let s = tape.shape(f_v);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(CirError::shape("domain alignment", s, &[labels.len()]));
    }
    Ok(())
}
