//! Training objectives behind one trait, registered by name.
//!
//! The trainer only sees `dyn Objective`; `--method` on the command line is
//! a lookup into an [`ObjectiveRegistry`].

use crate::baselines::{coral_loss, erm_loss, mixup_batch, mixup_loss, mmd_loss};
use crate::cir::{cir_total_loss, CirLossConfig, LossParts, MaskPolicy};
use crate::data::Batch;
use crate::error::{CirError, Result};
use crate::model::{CirModel, ModelVars};
use crate::ndmath::{BatchStats, Tape, Var};
use crate::seed::rng_for;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Debug;

/// Output of one objective evaluation on a train-mode batch.
#[derive(Clone, Debug)]
pub struct ObjectiveOutput {
    pub loss: Var,
    pub parts: LossParts,
    pub bn_stats: Option<BatchStats>,
}

pub trait Objective: Debug + Send + Sync {
    fn name(&self) -> &str;

    /// Whether scenario/location labels are consumed during training.
    fn uses_domain_labels(&self) -> bool;

    /// Learning rate used when the run configuration gives none.
    fn default_lr(&self) -> f64;

    /// Builds the loss for `batch`. `step_seed` feeds any per-step
    /// randomness so that runs stay reproducible.
    fn forward(
        &self,
        model: &CirModel,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &Batch,
        step_seed: u64,
    ) -> Result<ObjectiveOutput>;
}

/// Knobs shared by all factories; each objective reads what it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mask_policy: MaskPolicy,
    pub mixup_alpha: f64,
    /// Scenario-alignment weight; per-method default when absent.
    pub gamma1: Option<f64>,
    /// Location-alignment weight; per-method default when absent.
    pub gamma2: Option<f64>,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        ObjectiveParams {
            lambda1: 1.0,
            lambda2: 0.5,
            mask_policy: MaskPolicy::PERMISSIVE,
            mixup_alpha: 0.2,
            gamma1: None,
            gamma2: None,
        }
    }
}

pub type ObjectiveFactory = fn(&ObjectiveParams) -> Result<Box<dyn Objective>>;

#[derive(Clone)]
pub struct ObjectiveRegistry {
    factories: BTreeMap<String, ObjectiveFactory>,
}

impl Default for ObjectiveRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl ObjectiveRegistry {
    pub fn empty() -> Self {
        ObjectiveRegistry {
            factories: BTreeMap::new(),
        }
    }

    /// `cir`, `cir_no_text`, `erm`, `mixup`, `coral`, `mmd`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("cir", |p| {
            let cfg = CirLossConfig {
                lambda1: p.lambda1,
                lambda2: p.lambda2,
                mask_policy: p.mask_policy,
            };
            cfg.validate()?;
            Ok(Box::new(Cir { name: "cir", cfg }))
        });
        r.register("cir_no_text", |p| {
            let cfg = CirLossConfig {
                lambda1: 0.0,
                lambda2: p.lambda2,
                mask_policy: p.mask_policy,
            };
            cfg.validate()?;
            Ok(Box::new(Cir {
                name: "cir_no_text",
                cfg,
            }))
        });
        r.register("erm", |_| Ok(Box::new(Erm)));
        r.register("mixup", |p| {
            if !(p.mixup_alpha > 0.0) {
                return Err(CirError::Param(format!(
                    "mixup alpha must be positive, got {}",
                    p.mixup_alpha
                )));
            }
            Ok(Box::new(Mixup { alpha: p.mixup_alpha }))
        });
        r.register("coral", |p| {
            Alignment::boxed(AlignKind::Coral, p.gamma1.unwrap_or(0.1), p.gamma2.unwrap_or(0.1))
        });
        r.register("mmd", |p| {
            Alignment::boxed(AlignKind::Mmd, p.gamma1.unwrap_or(1.0), p.gamma2.unwrap_or(0.5))
        });
        r
    }

    pub fn register(&mut self, name: &str, factory: ObjectiveFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn create(&self, name: &str, params: &ObjectiveParams) -> Result<Box<dyn Objective>> {
        let f = self.factories.get(name).ok_or_else(|| CirError::Unknown {
            kind: "method",
            name: name.to_string(),
        })?;
        f(params)
    }
}

#[derive(Debug)]
struct Cir {
    name: &'static str,
    cfg: CirLossConfig,
}

impl Objective for Cir {
    fn name(&self) -> &str {
        self.name
    }

    fn uses_domain_labels(&self) -> bool {
        !self.cfg.mask_policy.is_permissive()
    }

    fn default_lr(&self) -> f64 {
        2e-4
    }

    fn forward(
        &self,
        model: &CirModel,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &Batch,
        _step_seed: u64,
    ) -> Result<ObjectiveOutput> {
        let out = cir_total_loss(model, tape, vars, batch, &self.cfg)?;
        Ok(ObjectiveOutput {
            loss: out.total,
            parts: out.parts,
            bn_stats: out.bn_stats,
        })
    }
}

#[derive(Debug)]
struct Erm;

impl Objective for Erm {
    fn name(&self) -> &str {
        "erm"
    }

    fn uses_domain_labels(&self) -> bool {
        false
    }

    fn default_lr(&self) -> f64 {
        1e-4
    }

    fn forward(
        &self,
        model: &CirModel,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &Batch,
        _step_seed: u64,
    ) -> Result<ObjectiveOutput> {
        let (l_c, _, bn_stats) = erm_loss(model, tape, vars, batch)?;
        let v = tape.scalar_value(l_c);
        Ok(ObjectiveOutput {
            loss: l_c,
            parts: LossParts {
                total: v,
                l_c: v,
                tau: model.tau(),
                ..LossParts::default()
            },
            bn_stats,
        })
    }
}

#[derive(Debug)]
struct Mixup {
    alpha: f64,
}

impl Objective for Mixup {
    fn name(&self) -> &str {
        "mixup"
    }

    fn uses_domain_labels(&self) -> bool {
        false
    }

    fn default_lr(&self) -> f64 {
        1e-5
    }

    fn forward(
        &self,
        model: &CirModel,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &Batch,
        step_seed: u64,
    ) -> Result<ObjectiveOutput> {
        let mut rng = rng_for(step_seed, "mixup", 0);
        let mixed = mixup_batch(batch, model.config.num_classes, self.alpha, &mut rng)?;
        let (loss, bn_stats) = mixup_loss(model, tape, vars, &mixed)?;
        let v = tape.scalar_value(loss);
        Ok(ObjectiveOutput {
            loss,
            parts: LossParts {
                total: v,
                l_c: v,
                tau: model.tau(),
                ..LossParts::default()
            },
            bn_stats,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AlignKind {
    Coral,
    Mmd,
}

#[derive(Debug)]
struct Alignment {
    kind: AlignKind,
    gamma_scenario: f64,
    gamma_location: f64,
}

impl Alignment {
    fn boxed(kind: AlignKind, g1: f64, g2: f64) -> Result<Box<dyn Objective>> {
        if !(g1 >= 0.0 && g2 >= 0.0) {
            return Err(CirError::Param(format!(
                "alignment weights must be non-negative, got γ1={g1} γ2={g2}"
            )));
        }
        Ok(Box::new(Alignment {
            kind,
            gamma_scenario: g1,
            gamma_location: g2,
        }))
    }
}

impl Objective for Alignment {
    fn name(&self) -> &str {
        match self.kind {
            AlignKind::Coral => "coral",
            AlignKind::Mmd => "mmd",
        }
    }

    fn uses_domain_labels(&self) -> bool {
        true
    }

    fn default_lr(&self) -> f64 {
        1e-5
    }

    fn forward(
        &self,
        model: &CirModel,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &Batch,
        _step_seed: u64,
    ) -> Result<ObjectiveOutput> {
        let (l_c, f_v, bn_stats) = erm_loss(model, tape, vars, batch)?;
        let scen: Vec<u32> = batch.domains.iter().map(|d| d.scenario).collect();
        let loc: Vec<u32> = batch.domains.iter().map(|d| d.location).collect();
        let penalty = match self.kind {
            AlignKind::Coral => coral_loss,
            AlignKind::Mmd => mmd_loss,
        };
        let a_s = penalty(tape, f_v, &scen)?;
        let a_l = penalty(tape, f_v, &loc)?;
        let a_s = tape.scale(a_s, self.gamma_scenario);
        let a_l = tape.scale(a_l, self.gamma_location);
        let align = tape.add(a_s, a_l)?;
        let loss = tape.add(l_c, align)?;
        Ok(ObjectiveOutput {
            loss,
            parts: LossParts {
                total: tape.scalar_value(loss),
                l_c: tape.scalar_value(l_c),
                l_align: tape.scalar_value(align),
                tau: model.tau(),
                ..LossParts::default()
            },
            bn_stats,
        })
    }
}
