use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, ScheduleKind, TimestepSet};
use crate::error::{Error, Result};
use crate::nets::{CondMode, DenoiserConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub zero_terminal: bool,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Cosine,
            steps: 1000,
            zero_terminal: true,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.kind, self.steps, self.zero_terminal)
    }
}

/// Per-timestep factor `c(t)` of the distillation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `c(t) = alpha_t`.
    #[default]
    Exponential,
    /// `c(t) = alpha_t / (2 sigma_t) * w(t)` with unit `w`.
    Sds,
    /// `c(t) = 1`; a neutral control.
    Uniform,
    /// Parsed only so it can be rejected with a clear message.
    Nfsd,
}

impl Weighting {
    pub fn c(self, t: usize, sched: &NoiseSchedule) -> f64 {
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        match self {
            Weighting::Exponential => a,
            Weighting::Sds => a / (2.0 * s) * sds_w(t),
            Weighting::Uniform => 1.0,
            Weighting::Nfsd => f64::NAN,
        }
    }
}

/// Diffusion-loss scaling `w(t)`; unit everywhere.
pub fn sds_w(_t: usize) -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    #[default]
    Pretrained,
    Random,
}

/// Standardization of the feature layers the discriminator heads read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatNorm {
    #[default]
    None,
    /// Unit variance over the training set.
    Standard,
    /// Unit pooled within-class variance.
    Within,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub weighting: Weighting,
    pub student_taus: TimestepSet,
    pub teacher_steps: usize,
    pub cond_mode: CondMode,
    pub distill_t_bounds: [usize; 2],
    /// Include the adversarial terms; `false` gives distillation-only training.
    pub adversarial: bool,
    pub student_init: StudentInit,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Adam moment decay rates shared by both optimizers.
    pub adam_betas: [f64; 2],
    pub iters: usize,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    /// Global gradient-norm clip for both networks; `None` disables.
    #[serde(with = "crate::opt_serde")]
    pub clip_grad: Option<f64>,
    pub disc_hidden: usize,
    pub disc_proj_dim: usize,
    pub feat_norm: FeatNorm,
    /// Logged 1-step sliced-W2 snapshot period in iterations (0 disables).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 2.5,
            gamma: 1e-5,
            weighting: Weighting::Exponential,
            student_taus: TimestepSet::evenly_spaced(4, 1000).expect("valid default"),
            teacher_steps: 1,
            cond_mode: CondMode::LabelImage,
            distill_t_bounds: [20, 980],
            adversarial: true,
            student_init: StudentInit::Pretrained,
            batch_size: 128,
            lr_g: 1e-4,
            lr_d: 2e-4,
            adam_betas: [0.9, 0.999],
            iters: 2000,
            d_steps: 1,
            clip_grad: Some(1.0),
            disc_hidden: 64,
            disc_proj_dim: 16,
            feat_norm: FeatNorm::None,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.weighting == Weighting::Nfsd {
            return bad(
                "weighting \"nfsd\" is not supported: it relies on a guidance decomposition that is not \
                 implemented here; use exponential, sds or uniform"
                    .into(),
            );
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if self.teacher_steps == 0 {
            return bad("teacher_steps must be >= 1".into());
        }
        let [lo, hi] = self.distill_t_bounds;
        if lo < 1 || lo > hi || hi >= sched.steps() || sched.alpha(hi) <= 0.0 {
            return bad(format!(
                "distill_t_bounds {:?} must satisfy 1 <= lo <= hi < T={} with alpha > 0",
                self.distill_t_bounds,
                sched.steps()
            ));
        }
        if self.teacher_steps > lo {
            return bad(format!("teacher_steps {} exceeds distill t_min {lo}", self.teacher_steps));
        }
        self.student_taus.check_against(sched.steps())?;
        if self.batch_size == 0 || self.d_steps == 0 {
            return bad("batch_size and d_steps must be >= 1".into());
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        let [b1, b2] = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("adam_betas must lie in [0, 1), got {:?}", self.adam_betas));
        }
        if let Some(c) = self.clip_grad {
            if !(c > 0.0) {
                return bad(format!("clip_grad must be > 0, got {c}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub net: DenoiserConfig,
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the end of a cosine decay.
    pub lr_final: f64,
    /// Weight averaging factor for the returned parameters (0 disables).
    pub ema: f64,
    #[serde(with = "crate::opt_serde")]
    pub clip_grad: Option<f64>,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            net: DenoiserConfig::default(),
            iters: 8000,
            batch_size: 256,
            lr: 1e-3,
            lr_final: 1e-5,
            ema: 0.999,
            clip_grad: Some(1.0),
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.iters == 0 || self.batch_size == 0 {
            return Err(Error::Config("teacher iters and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0 && (0.0..1.0).contains(&self.ema)) {
            return Err(Error::Config("teacher lr, lr_final must be > 0 and ema in [0, 1)".into()));
        }
        Ok(())
    }

    /// Cosine decay from `lr` to `lr_final`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let p = step as f64 / self.iters.max(1) as f64;
        self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}
