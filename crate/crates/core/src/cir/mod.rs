//! Cross-instance reconstruction: attention scores, self-masked
//! reconstruction from the rest of the batch, and the combined objective
//! `L = L_c + λ1·L_rt + λ2·L_rc`.

use crate::data::{Batch, Domain};
use crate::error::{CirError, Result};
use crate::model::{CirModel, Mode, ModelVars};
use crate::ndmath::{BatchStats, GradCheck, GradCheckReport, Tape, Targets, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which supports a query may attend to, by domain relation. A support is
/// admitted when both its scenario relation and its location relation are
/// allowed. The query itself is always excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MaskPolicy {
    pub allow_same_scenario: bool,
    pub allow_same_location: bool,
    pub allow_other_scenario: bool,
    pub allow_other_location: bool,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self::PERMISSIVE
    }
}

impl MaskPolicy {
    pub const PERMISSIVE: MaskPolicy = MaskPolicy {
        allow_same_scenario: true,
        allow_same_location: true,
        allow_other_scenario: true,
        allow_other_location: true,
    };

    pub fn is_permissive(&self) -> bool {
        *self == Self::PERMISSIVE
    }

    pub fn validate(&self) -> Result<()> {
        let scen = self.allow_same_scenario || self.allow_other_scenario;
        let loc = self.allow_same_location || self.allow_other_location;
        if !(scen && loc) {
            return Err(CirError::Param("mask policy forbids every support".into()));
        }
        Ok(())
    }

    pub fn allows(&self, query: Domain, support: Domain) -> bool {
        let scen_ok = if query.scenario == support.scenario {
            self.allow_same_scenario
        } else {
            self.allow_other_scenario
        };
        let loc_ok = if query.location == support.location {
            self.allow_same_location
        } else {
            self.allow_other_location
        };
        scen_ok && loc_ok
    }

    /// Row-major `B×B` admission mask with the diagonal cleared. Domain
    /// labels are only consulted for a restrictive policy.
    pub fn support_mask(&self, batch_size: usize, domains: Option<&[Domain]>) -> Result<Vec<bool>> {
        self.validate()?;
        let domains = match (self.is_permissive(), domains) {
            (true, _) => None,
            (false, Some(d)) if d.len() == batch_size => Some(d),
            (false, Some(d)) => {
                return Err(CirError::shape("support_mask", &[batch_size], &[d.len()]));
            }
            (false, None) => {
                return Err(CirError::Param(format!(
                    "mask policy `{self}` needs domain labels"
                )));
            }
        };
        let mut mask = vec![false; batch_size * batch_size];
        for i in 0..batch_size {
            for j in 0..batch_size {
                mask[i * batch_size + j] =
                    i != j && domains.is_none_or(|d| self.allows(d[i], d[j]));
            }
        }
        Ok(mask)
    }
}

impl TryFrom<String> for MaskPolicy {
    type Error = CirError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MaskPolicy> for String {
    fn from(p: MaskPolicy) -> String {
        p.to_string()
    }
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_permissive() {
            return write!(f, "permissive");
        }
        let mut parts = Vec::new();
        if !self.allow_same_scenario {
            parts.push("no-same-scenario");
        }
        if !self.allow_other_scenario {
            parts.push("no-other-scenario");
        }
        if !self.allow_same_location {
            parts.push("no-same-location");
        }
        if !self.allow_other_location {
            parts.push("no-other-location");
        }
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for MaskPolicy {
    type Err = CirError;

    /// `permissive`, or a comma-separated list drawn from
    /// `no-same-scenario`, `no-other-scenario`, `no-same-location`,
    /// `no-other-location`.
    fn from_str(s: &str) -> Result<Self> {
        let mut p = MaskPolicy::PERMISSIVE;
        if s.trim() == "permissive" {
            return Ok(p);
        }
        for part in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            match part {
                "no-same-scenario" => p.allow_same_scenario = false,
                "no-other-scenario" => p.allow_other_scenario = false,
                "no-same-location" => p.allow_same_location = false,
                "no-other-location" => p.allow_other_location = false,
                other => {
                    return Err(CirError::Unknown {
                        kind: "mask policy",
                        name: other.into(),
                    })
                }
            }
        }
        p.validate()?;
        Ok(p)
    }
}

/// `c[i][j] = L(Q(f(v_i))) · L(K(f(v_j)))`, before masking and softmax.
pub fn attention_scores_learned(
    model: &CirModel,
    tape: &mut Tape,
    vars: &ModelVars,
    f_v: Var,
) -> Result<Var> {
    let q = model.query(tape, vars, f_v)?;
    let k = model.key(tape, vars, f_v)?;
    let kt = tape.transpose(k)?;
    tape.matmul(q, kt)
}

/// Raw Gram matrix `c'[i][j] = f(v_i) · f(v_j)`.
pub fn attention_scores_crossprod(tape: &mut Tape, f_v: Var) -> Result<Var> {
    let t = tape.transpose(f_v)?;
    tape.matmul(f_v, t)
}

/// Self-masked softmax over `scores` followed by the weighted sum of the
/// embedding rows. Returns `(reconstruction, weights)`.
pub fn reconstruct(
    tape: &mut Tape,
    scores: Var,
    f_v: Var,
    policy: &MaskPolicy,
    domains: Option<&[Domain]>,
) -> Result<(Var, Var)> {
    let b = tape.shape(f_v)[0];
    if tape.shape(scores) != [b, b] {
        return Err(CirError::shape("reconstruct", tape.shape(scores), &[b, b]));
    }
    if b < 2 {
        return Err(CirError::DegenerateBatch(format!(
            "reconstruction needs at least 2 samples, got {b}"
        )));
    }
    let mask = policy.support_mask(b, domains)?;
    if let Some(i) = (0..b).find(|&i| !mask[i * b..(i + 1) * b].iter().any(|&m| m)) {
        return Err(CirError::EmptySupport {
            sample: i,
            policy: format!("mask policy `{policy}`"),
        });
    }
    let weights = tape.softmax_rows(scores, Some(&mask))?;
    let recon = tape.matmul(weights, f_v)?;
    Ok((recon, weights))
}

#[derive(Clone, Copy, Debug)]
pub struct NceOutput {
    /// `L_rt = L_{r→t} + L_{t→r}`.
    pub loss: Var,
    pub recon_to_text: Var,
    pub text_to_recon: Var,
    /// Cosine similarities `s(⊕v_i, g(t_j))`.
    pub similarity: Var,
}

/// Symmetric InfoNCE between reconstructions and text embeddings with a
/// shared temperature, given as the tape scalar `1/τ`. The positive pair
/// stays in each normalizer.
pub fn nce_loss(tape: &mut Tape, recon: Var, text: Var, inv_tau: Var) -> Result<NceOutput> {
    if tape.shape(recon) != tape.shape(text) {
        return Err(CirError::shape("nce_loss", tape.shape(recon), tape.shape(text)));
    }
    let b = tape.shape(recon)[0];
    let similarity = tape.cosine_similarity_matrix(recon, text)?;
    let logits = tape.scale_by(similarity, inv_tau)?;
    let diag = Targets::Hard((0..b).collect());
    let recon_to_text = tape.cross_entropy(logits, &diag)?;
    let logits_t = tape.transpose(logits)?;
    let text_to_recon = tape.cross_entropy(logits_t, &diag)?;
    let loss = tape.add(recon_to_text, text_to_recon)?;
    Ok(NceOutput {
        loss,
        recon_to_text,
        text_to_recon,
        similarity,
    })
}

/// [`nce_loss`] with a fixed temperature.
pub fn nce_loss_with_tau(tape: &mut Tape, recon: Var, text: Var, tau: f64) -> Result<NceOutput> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(CirError::Param(format!("temperature must be positive, got {tau}")));
    }
    let inv = tape.constant(Tensor::scalar(1.0 / tau));
    nce_loss(tape, recon, text, inv)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CirLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mask_policy: MaskPolicy,
}

impl Default for CirLossConfig {
    fn default() -> Self {
        CirLossConfig {
            lambda1: 1.0,
            lambda2: 0.5,
            mask_policy: MaskPolicy::PERMISSIVE,
        }
    }
}

impl CirLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(CirError::Param(format!(
                "loss weights must be non-negative, got λ1={} λ2={}",
                self.lambda1, self.lambda2
            )));
        }
        self.mask_policy.validate()
    }
}

/// Scalar values of every loss term from one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub l_c: f64,
    pub l_rt: f64,
    pub l_rc: f64,
    /// Domain-alignment penalty of the CORAL and MMD baselines.
    pub l_align: f64,
    pub tau: f64,
}

/// Tape handles for the intermediate quantities of one CIR forward pass.
/// Branches disabled by a zero weight are `None`.
#[derive(Clone, Copy, Debug)]
pub struct ReconstructionBatch {
    pub f_v: Var,
    pub g_t: Option<Var>,
    pub recon_text: Option<Var>,
    pub recon_cls: Option<Var>,
    pub weights_text: Option<Var>,
    pub weights_cls: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct CirOutput {
    pub total: Var,
    pub l_c: Var,
    pub l_rt: Option<Var>,
    pub l_rc: Option<Var>,
    pub parts: LossParts,
    pub recon: ReconstructionBatch,
    pub bn_stats: Option<BatchStats>,
}

/// Full CIR objective on one train-mode batch.
pub fn cir_total_loss(
    model: &CirModel,
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &Batch,
    cfg: &CirLossConfig,
) -> Result<CirOutput> {
    cfg.validate()?;
    let video = tape.constant(batch.video.clone());
    let (f_v, bn_stats) = model.encode_video(tape, vars, video, Mode::Train)?;
    let logits = model.classify(tape, vars, f_v)?;
    let l_c = tape.cross_entropy(logits, &Targets::Hard(batch.labels.clone()))?;
    let domains = Some(batch.domains.as_slice());

    let mut recon = ReconstructionBatch {
        f_v,
        g_t: None,
        recon_text: None,
        recon_cls: None,
        weights_text: None,
        weights_cls: None,
    };
    let mut total = l_c;
    let mut l_rt = None;
    let mut l_rc = None;

    if cfg.lambda1 > 0.0 {
        let text = tape.constant(batch.text.clone());
        let g_t = model.encode_text(tape, vars, text)?;
        let scores = attention_scores_learned(model, tape, vars, f_v)?;
        let (r, w) = reconstruct(tape, scores, f_v, &cfg.mask_policy, domains)?;
        let inv_tau = model.inv_tau(tape, vars);
        let nce = nce_loss(tape, r, g_t, inv_tau)?;
        let weighted = tape.scale(nce.loss, cfg.lambda1);
        total = tape.add(total, weighted)?;
        recon.g_t = Some(g_t);
        recon.recon_text = Some(r);
        recon.weights_text = Some(w);
        l_rt = Some(nce.loss);
    }
    if cfg.lambda2 > 0.0 {
        let scores = attention_scores_crossprod(tape, f_v)?;
        let (r, w) = reconstruct(tape, scores, f_v, &cfg.mask_policy, domains)?;
        let logits_r = model.classify(tape, vars, r)?;
        let ce = tape.cross_entropy(logits_r, &Targets::Hard(batch.labels.clone()))?;
        let weighted = tape.scale(ce, cfg.lambda2);
        total = tape.add(total, weighted)?;
        recon.recon_cls = Some(r);
        recon.weights_cls = Some(w);
        l_rc = Some(ce);
    }

    let parts = LossParts {
        total: tape.scalar_value(total),
        l_c: tape.scalar_value(l_c),
        l_rt: l_rt.map_or(0.0, |v| tape.scalar_value(v)),
        l_rc: l_rc.map_or(0.0, |v| tape.scalar_value(v)),
        l_align: 0.0,
        tau: model.tau(),
    };
    Ok(CirOutput {
        total,
        l_c,
        l_rt,
        l_rc,
        parts,
        recon,
        bn_stats,
    })
}

/// Central-difference check of [`cir_total_loss`] with respect to every
/// model parameter block.
pub fn check_gradients(
    model: &CirModel,
    batch: &Batch,
    cfg: &CirLossConfig,
    check: &GradCheck,
) -> Result<GradCheckReport> {
    check.run(model.params(), |tape, inputs| {
        let vars = ModelVars::from_vars(inputs.to_vec())?;
        Ok(cir_total_loss(model, tape, &vars, batch, cfg)?.total)
    })
}

#[cfg(test)]
mod tests;
