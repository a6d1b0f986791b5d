use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

/// Variance-preserving coefficients `x_s = alpha_s x_0 + sigma_s eps`.
///
/// Index 0 is the clean sample (`alpha = 1`, `sigma = 0`); indices `1..=T`
/// are the diffusion timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    zero_terminal: bool,
}

const COSINE_OFFSET: f64 = 0.008;

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize, zero_terminal: bool) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
        }
        let t_max = steps as f64;
        let mut alpha: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |s: f64| ((s / t_max + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos();
                let f0 = f(0.0);
                (0..=steps).map(|s| (f(s as f64) / f0).max(0.0)).collect()
            }
            ScheduleKind::Linear => {
                let scale = 1000.0 / t_max;
                let (lo, hi) = (1e-4 * scale, 0.02 * scale);
                let mut abar = 1.0;
                let mut out = vec![1.0];
                for s in 1..=steps {
                    let beta = lo + (hi - lo) * (s - 1) as f64 / (steps - 1) as f64;
                    abar *= 1.0 - beta.min(0.999);
                    out.push(abar.sqrt());
                }
                out
            }
        };
        if zero_terminal {
            // shift and rescale so alpha_1 is kept and alpha_T lands on zero
            let first = alpha[1];
            let last = alpha[steps];
            for a in alpha.iter_mut().skip(1) {
                *a = (*a - last) * first / (first - last);
            }
            alpha[steps] = 0.0;
        }
        alpha[0] = 1.0;
        let sigma = alpha.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        let sched = NoiseSchedule {
            kind,
            alpha,
            sigma,
            zero_terminal,
        };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        for s in 1..self.alpha.len() {
            if self.alpha[s] >= self.alpha[s - 1] {
                return Err(Error::Config(format!(
                    "alpha not strictly decreasing at s={s}; use fewer steps"
                )));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion timesteps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn zero_terminal(&self) -> bool {
        self.zero_terminal
    }

    pub fn alpha(&self, s: usize) -> f64 {
        self.alpha[s]
    }

    pub fn sigma(&self, s: usize) -> f64 {
        self.sigma[s]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn check_timestep(&self, s: usize) -> Result<()> {
        if s > self.steps() {
            return Err(Error::TimestepRange {
                t: s,
                lo: 0,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    /// `s, alpha, sigma` rows for inspection.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,alpha,sigma\n");
        for s in 0..self.alpha.len() {
            let _ = writeln!(out, "{s},{},{}", self.alpha[s], self.sigma[s]);
        }
        out
    }
}

/// Sorted set of student timesteps; the last entry is always `T`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TimestepSet {
    taus: Vec<usize>,
}

impl TryFrom<Vec<usize>> for TimestepSet {
    type Error = Error;

    fn try_from(taus: Vec<usize>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::Config("timestep set is empty".into()));
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("timesteps {taus:?} not strictly increasing")));
        }
        if taus[0] < 1 {
            return Err(Error::Config("timesteps start at 1".into()));
        }
        Ok(TimestepSet { taus })
    }
}

impl From<TimestepSet> for Vec<usize> {
    fn from(t: TimestepSet) -> Self {
        t.taus
    }
}

impl TimestepSet {
    pub fn new(taus: Vec<usize>, steps: usize) -> Result<Self> {
        let set = TimestepSet::try_from(taus)?;
        set.check_against(steps)?;
        Ok(set)
    }

    /// `N` evenly spaced timesteps ending at `T` (`{250, 500, 750, 1000}` for `N = 4, T = 1000`).
    pub fn evenly_spaced(n: usize, steps: usize) -> Result<Self> {
        if n == 0 || n > steps {
            return Err(Error::Config(format!("cannot place {n} timesteps in 1..={steps}")));
        }
        Self::new((1..=n).map(|i| i * steps / n).collect(), steps)
    }

    pub fn check_against(&self, steps: usize) -> Result<()> {
        if *self.taus.last().expect("non-empty") != steps {
            return Err(Error::Config(format!(
                "last student timestep must equal T={steps}, got {:?}",
                self.taus
            )));
        }
        Ok(())
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.taus[rng.random_range(0..self.taus.len())]
    }
}
