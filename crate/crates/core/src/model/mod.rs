//! Trainable parameters and forward passes: video encoder `f`, text encoder
//! `g`, query/key heads with their layer norms, the shared classifier `h`
//! and the learnable temperature.

mod checkpoint;

pub use checkpoint::{Checkpoint, Progress, CHECKPOINT_MAGIC};

use crate::error::{CirError, Result};
use crate::ndmath::{BatchStats, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub video_dim: usize,
    pub text_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub qk_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    #[serde(default = "default_tau")]
    pub tau_init: f64,
}

fn default_tau() -> f64 {
    0.07
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            video_dim: 6912,
            text_dim: 512,
            hidden_dim: 4096,
            embed_dim: 512,
            qk_dim: 128,
            num_classes: 60,
            seed: 0,
            tau_init: default_tau(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("video_dim", self.video_dim),
            ("text_dim", self.text_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("qk_dim", self.qk_dim),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(CirError::Param(format!("{name} must be at least 1")));
            }
        }
        if self.num_classes < 2 {
            return Err(CirError::Param(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau_init) {
            return Err(CirError::Param(format!(
                "tau_init {} outside [{TAU_MIN}, {TAU_MAX}]",
                self.tau_init
            )));
        }
        Ok(())
    }
}

/// Parameter blocks in declaration (and checkpoint) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    F1Weight,
    F1Bias,
    FBnGamma,
    FBnBeta,
    F2Weight,
    F2Bias,
    G1Weight,
    G1Bias,
    G2Weight,
    G2Bias,
    QWeight,
    QBias,
    QLnGamma,
    QLnBeta,
    KWeight,
    KBias,
    KLnGamma,
    KLnBeta,
    HWeight,
    HBias,
    LogTauInv,
}

impl Block {
    pub const ALL: [Block; 21] = [
        Block::F1Weight,
        Block::F1Bias,
        Block::FBnGamma,
        Block::FBnBeta,
        Block::F2Weight,
        Block::F2Bias,
        Block::G1Weight,
        Block::G1Bias,
        Block::G2Weight,
        Block::G2Bias,
        Block::QWeight,
        Block::QBias,
        Block::QLnGamma,
        Block::QLnBeta,
        Block::KWeight,
        Block::KBias,
        Block::KLnGamma,
        Block::KLnBeta,
        Block::HWeight,
        Block::HBias,
        Block::LogTauInv,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::F1Weight => "f.fc1.weight",
            Block::F1Bias => "f.fc1.bias",
            Block::FBnGamma => "f.bn.gamma",
            Block::FBnBeta => "f.bn.beta",
            Block::F2Weight => "f.fc2.weight",
            Block::F2Bias => "f.fc2.bias",
            Block::G1Weight => "g.fc1.weight",
            Block::G1Bias => "g.fc1.bias",
            Block::G2Weight => "g.fc2.weight",
            Block::G2Bias => "g.fc2.bias",
            Block::QWeight => "q.weight",
            Block::QBias => "q.bias",
            Block::QLnGamma => "q.ln.gamma",
            Block::QLnBeta => "q.ln.beta",
            Block::KWeight => "k.weight",
            Block::KBias => "k.bias",
            Block::KLnGamma => "k.ln.gamma",
            Block::KLnBeta => "k.ln.beta",
            Block::HWeight => "h.weight",
            Block::HBias => "h.bias",
            Block::LogTauInv => "log_tau_inv",
        }
    }

    fn shape(self, c: &ModelConfig) -> Vec<usize> {
        let (dv, dt, hd, e, q, nc) = (
            c.video_dim,
            c.text_dim,
            c.hidden_dim,
            c.embed_dim,
            c.qk_dim,
            c.num_classes,
        );
        match self {
            Block::F1Weight => vec![dv, hd],
            Block::F1Bias | Block::FBnGamma | Block::FBnBeta => vec![hd],
            Block::F2Weight => vec![hd, e],
            Block::F2Bias | Block::G1Bias | Block::G2Bias => vec![e],
            Block::G1Weight => vec![dt, e],
            Block::G2Weight => vec![e, e],
            Block::QWeight | Block::KWeight => vec![e, q],
            Block::QBias
            | Block::KBias
            | Block::QLnGamma
            | Block::QLnBeta
            | Block::KLnGamma
            | Block::KLnBeta => vec![q],
            Block::HWeight => vec![e, nc],
            Block::HBias => vec![nc],
            Block::LogTauInv => vec![],
        }
    }

    /// Blocks that only feed the video-text reconstruction branch.
    pub fn text_branch_only(self) -> bool {
        matches!(
            self,
            Block::G1Weight
                | Block::G1Bias
                | Block::G2Weight
                | Block::G2Bias
                | Block::QWeight
                | Block::QBias
                | Block::QLnGamma
                | Block::QLnBeta
                | Block::KWeight
                | Block::KBias
                | Block::KLnGamma
                | Block::KLnBeta
                | Block::LogTauInv
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CirModel {
    pub config: ModelConfig,
    params: Vec<Tensor>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
}

/// Tape handles for every parameter block of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelVars {
    vars: Vec<Var>,
}

impl ModelVars {
    /// Wraps externally created tape leaves, one per block in
    /// [`Block::ALL`] order.
    pub fn from_vars(vars: Vec<Var>) -> Result<Self> {
        if vars.len() != Block::ALL.len() {
            return Err(CirError::Consistency(format!(
                "expected {} parameter handles, got {}",
                Block::ALL.len(),
                vars.len()
            )));
        }
        Ok(ModelVars { vars })
    }

    pub fn get(&self, b: Block) -> Var {
        self.vars[b.index()]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

impl CirModel {
    /// Kaiming-uniform weights in front of relu layers, LeCun-uniform
    /// elsewhere, zero biases, unit norm scales, and `τ = tau_init`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Block::ALL
            .iter()
            .map(|&b| {
                let shape = b.shape(config);
                match b {
                    Block::F1Weight | Block::G1Weight => uniform(&mut rng, &shape, 6.0),
                    Block::F2Weight | Block::G2Weight | Block::QWeight | Block::KWeight | Block::HWeight => {
                        uniform(&mut rng, &shape, 3.0)
                    }
                    Block::FBnGamma | Block::QLnGamma | Block::KLnGamma => Tensor::full(&shape, 1.0),
                    Block::LogTauInv => Tensor::scalar((1.0 / config.tau_init).ln()),
                    _ => Tensor::zeros(&shape),
                }
            })
            .collect();
        Ok(CirModel {
            config: config.clone(),
            params,
            bn_running_mean: vec![0.0; config.hidden_dim],
            bn_running_var: vec![1.0; config.hidden_dim],
        })
    }

    /// Rebuilds a model from raw blocks, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        params: Vec<Tensor>,
        bn_running_mean: Vec<f64>,
        bn_running_var: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        if params.len() != Block::ALL.len() {
            return Err(CirError::Consistency(format!(
                "expected {} parameter blocks, found {}",
                Block::ALL.len(),
                params.len()
            )));
        }
        let params = Block::ALL
            .iter()
            .zip(params)
            .map(|(b, t)| {
                let shape = b.shape(&config);
                if t.numel() != shape.iter().product::<usize>() {
                    return Err(CirError::Consistency(format!(
                        "block {} has {} values, expected shape {:?}",
                        b.name(),
                        t.numel(),
                        shape
                    )));
                }
                t.reshape(shape)
            })
            .collect::<Result<Vec<_>>>()?;
        if bn_running_mean.len() != config.hidden_dim || bn_running_var.len() != config.hidden_dim {
            return Err(CirError::Consistency("batch-norm running statistics width".into()));
        }
        Ok(CirModel {
            config,
            params,
            bn_running_mean,
            bn_running_var,
        })
    }

    pub fn param(&self, b: Block) -> &Tensor {
        &self.params[b.index()]
    }

    pub fn param_mut(&mut self, b: Block) -> &mut Tensor {
        &mut self.params[b.index()]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn tau(&self) -> f64 {
        (-self.param(Block::LogTauInv).item()).exp()
    }

    /// Keeps `τ` inside `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_tau(&mut self) {
        let lo = (1.0 / TAU_MAX).ln();
        let hi = (1.0 / TAU_MIN).ln();
        let p = &mut self.params[Block::LogTauInv.index()].data_mut()[0];
        *p = p.clamp(lo, hi);
    }

    /// Registers every block as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            vars: self.params.iter().map(|p| tape.param(p.clone())).collect(),
        }
    }

    /// Registers every block as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            vars: self.params.iter().map(|p| tape.constant(p.clone())).collect(),
        }
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        for (r, m) in self.bn_running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.bn_running_var.iter_mut().zip(&stats.unbiased_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }

    /// `f`: FC → batch norm → relu → FC. Train mode also returns the batch
    /// statistics, which the caller folds in after the step.
    pub fn encode_video(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        video: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        check_width("encode_video", tape, video, self.config.video_dim)?;
        let h = linear(tape, vars, video, Block::F1Weight, Block::F1Bias)?;
        let (gamma, beta) = (vars.get(Block::FBnGamma), vars.get(Block::FBnBeta));
        let (h, stats) = match mode {
            Mode::Train => {
                let (h, s) = tape.batch_norm_train(h, gamma, beta, BN_EPS)?;
                (h, Some(s))
            }
            Mode::Eval => (
                tape.batch_norm_eval(h, gamma, beta, &self.bn_running_mean, &self.bn_running_var, BN_EPS)?,
                None,
            ),
        };
        let h = tape.relu(h);
        let e = linear(tape, vars, h, Block::F2Weight, Block::F2Bias)?;
        Ok((e, stats))
    }

    /// `g`: FC → relu → FC.
    pub fn encode_text(&self, tape: &mut Tape, vars: &ModelVars, text: Var) -> Result<Var> {
        check_width("encode_text", tape, text, self.config.text_dim)?;
        let h = linear(tape, vars, text, Block::G1Weight, Block::G1Bias)?;
        let h = tape.relu(h);
        linear(tape, vars, h, Block::G2Weight, Block::G2Bias)
    }

    /// Layer-normed query projection `L(Q(e))`.
    pub fn query(&self, tape: &mut Tape, vars: &ModelVars, e: Var) -> Result<Var> {
        let q = linear(tape, vars, e, Block::QWeight, Block::QBias)?;
        tape.layer_norm(q, vars.get(Block::QLnGamma), vars.get(Block::QLnBeta), LN_EPS)
    }

    /// Layer-normed key projection `L(K(e))`.
    pub fn key(&self, tape: &mut Tape, vars: &ModelVars, e: Var) -> Result<Var> {
        let k = linear(tape, vars, e, Block::KWeight, Block::KBias)?;
        tape.layer_norm(k, vars.get(Block::KLnGamma), vars.get(Block::KLnBeta), LN_EPS)
    }

    /// Shared classifier `h`, applied alike to video embeddings and to
    /// reconstructions.
    pub fn classify(&self, tape: &mut Tape, vars: &ModelVars, e: Var) -> Result<Var> {
        check_width("classify", tape, e, self.config.embed_dim)?;
        linear(tape, vars, e, Block::HWeight, Block::HBias)
    }

    /// `1/τ` as a tape scalar.
    pub fn inv_tau(&self, tape: &mut Tape, vars: &ModelVars) -> Var {
        tape.exp(vars.get(Block::LogTauInv))
    }

    /// Eval-mode logits for raw video features, no gradients.
    pub fn predict_logits(&self, video: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let v = tape.constant(video.clone());
        let (e, _) = self.encode_video(&mut tape, &vars, v, Mode::Eval)?;
        let logits = self.classify(&mut tape, &vars, e)?;
        Ok(tape.value(logits).clone())
    }

    /// Eval-mode video embeddings, no gradients.
    pub fn embed_videos(&self, video: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let v = tape.constant(video.clone());
        let (e, _) = self.encode_video(&mut tape, &vars, v, Mode::Eval)?;
        Ok(tape.value(e).clone())
    }
}

fn linear(tape: &mut Tape, vars: &ModelVars, x: Var, w: Block, b: Block) -> Result<Var> {
    let y = tape.matmul(x, vars.get(w))?;
    tape.add_bias(y, vars.get(b))
}

fn check_width(op: &'static str, tape: &Tape, x: Var, width: usize) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != width {
        return Err(CirError::shape(op, s, &[width]));
    }
    Ok(())
}

/// `U(−√(k/fan_in), √(k/fan_in))`.
fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], k: f64) -> Tensor {
    let fan_in = shape[0] as f64;
    let bound = (k / fan_in).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}
