use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    /// `n_i = n_max * ratio^(-(i-1)/(C-1))`; `ratio` is the imbalance ratio.
    Exp,
    /// `n_i = n_max * i^(-power)`; rank decay.
    Pareto,
}

/// Long-tailed class-size profile. Sizes are non-increasing in class rank and
/// clamped to `[n_min, n_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailProfile {
    pub kind: ProfileKind,
    pub num_classes: usize,
    pub n_max: usize,
    /// Imbalance ratio for `exp`, decay exponent for `pareto`.
    pub param: f64,
    #[serde(default = "default_n_min")]
    pub n_min: usize,
}

fn default_n_min() -> usize {
    1
}

impl LongTailProfile {
    pub fn exp(num_classes: usize, n_max: usize, ratio: f64, n_min: usize) -> Self {
        LongTailProfile {
            kind: ProfileKind::Exp,
            num_classes,
            n_max,
            param: ratio,
            n_min,
        }
    }

    pub fn pareto(num_classes: usize, n_max: usize, power: f64, n_min: usize) -> Self {
        LongTailProfile {
            kind: ProfileKind::Pareto,
            num_classes,
            n_max,
            param: power,
            n_min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "profile needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.n_min < 1 || self.n_max < self.n_min {
            return Err(Error::Config(format!(
                "profile bounds must satisfy n_max >= n_min >= 1, got n_max={} n_min={}",
                self.n_max, self.n_min
            )));
        }
        let ok = match self.kind {
            ProfileKind::Exp => self.param >= 1.0,
            ProfileKind::Pareto => self.param >= 0.0,
        };
        if !ok || !self.param.is_finite() {
            return Err(Error::Config(format!("profile parameter {} out of range", self.param)));
        }
        Ok(())
    }

    /// Per-class training sizes `n_1..n_C`, head first.
    pub fn sizes(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let c = self.num_classes;
        let n_max = self.n_max as f64;
        Ok((1..=c)
            .map(|i| {
                let raw = match self.kind {
                    ProfileKind::Exp => n_max * self.param.powf(-((i - 1) as f64) / ((c - 1) as f64)),
                    ProfileKind::Pareto => n_max * (i as f64).powf(-self.param),
                };
                (raw.round() as usize).clamp(self.n_min, self.n_max)
            })
            .collect())
    }
}

/// Class sizes for `profile`.
pub fn make_profile(profile: &LongTailProfile) -> Result<Vec<usize>> {
    profile.sizes()
}
