//! Follower dynamics `y^(r) + f(x, t)ᵀθ = u + d` in chain-of-integrators
//! form, and the disturbance profiles acting on them.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{check_beta_hurwitz, CompanionForm};
use crate::error::{Error, Result};
use crate::expr::{BoundExpr, ExprError};

/// A bounded, piecewise-continuous matched disturbance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceProfile {
    #[default]
    Zero,
    Sinusoid {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `+amplitude` on the first half of each period, `-amplitude` on the second.
    SquareWave { amplitude: f64, period: f64 },
    /// `values[k]` on `[breakpoints[k], breakpoints[k+1])`; the first breakpoint is 0.
    PiecewiseConstant { breakpoints: Vec<f64>, values: Vec<f64> },
    /// Held uniform samples in `[-amplitude, amplitude]`, redrawn every `hold_time`.
    SeededBoundedNoise { amplitude: f64, hold_time: f64, seed: u64 },
}

impl DisturbanceProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("disturbance: {m}")));
        match self {
            DisturbanceProfile::Zero => Ok(()),
            DisturbanceProfile::Sinusoid { amplitude, frequency, phase } => {
                if !(amplitude.is_finite() && frequency.is_finite() && phase.is_finite()) {
                    return bad("sinusoid parameters must be finite");
                }
                Ok(())
            }
            DisturbanceProfile::SquareWave { amplitude, period } => {
                if !amplitude.is_finite() || !(*period > 0.0) {
                    return bad("square wave needs a finite amplitude and positive period");
                }
                Ok(())
            }
            DisturbanceProfile::PiecewiseConstant { breakpoints, values } => {
                if breakpoints.is_empty() || breakpoints.len() != values.len() {
                    return bad("piecewise constant needs matching non-empty breakpoints and values");
                }
                if breakpoints[0] != 0.0 {
                    return bad("first breakpoint must be 0");
                }
                if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
                    return bad("breakpoints must be strictly increasing");
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return bad("values must be finite");
                }
                Ok(())
            }
            DisturbanceProfile::SeededBoundedNoise { amplitude, hold_time, .. } => {
                if !amplitude.is_finite() || !(*hold_time > 0.0) {
                    return bad("noise needs a finite amplitude and positive hold time");
                }
                Ok(())
            }
        }
    }

    /// The bound `D` with `|d(t)| ≤ D`. Never handed to the controller.
    pub fn bound(&self) -> f64 {
        match self {
            DisturbanceProfile::Zero => 0.0,
            DisturbanceProfile::Sinusoid { amplitude, .. }
            | DisturbanceProfile::SquareWave { amplitude, .. }
            | DisturbanceProfile::SeededBoundedNoise { amplitude, .. } => amplitude.abs(),
            DisturbanceProfile::PiecewiseConstant { values, .. } => {
                values.iter().fold(0.0, |m, v| m.max(v.abs()))
            }
        }
    }

    /// Times at which the profile may jump, within `[0, t_end]`. These must
    /// lie on the integration grid.
    pub fn breakpoints(&self, t_end: f64) -> Vec<f64> {
        let regular = |step: f64| -> Vec<f64> {
            let n = (t_end / step).floor() as usize;
            (0..=n).map(|k| k as f64 * step).collect()
        };
        match self {
            DisturbanceProfile::Zero | DisturbanceProfile::Sinusoid { .. } => vec![],
            DisturbanceProfile::SquareWave { period, .. } => regular(0.5 * period),
            DisturbanceProfile::PiecewiseConstant { breakpoints, .. } => {
                breakpoints.iter().copied().filter(|&b| b <= t_end).collect()
            }
            DisturbanceProfile::SeededBoundedNoise { hold_time, .. } => regular(*hold_time),
        }
    }

    /// The seed, if the profile is random.
    pub fn seed(&self) -> Option<u64> {
        match self {
            DisturbanceProfile::SeededBoundedNoise { seed, .. } => Some(*seed),
            _ => None,
        }
    }
}

fn slot(t: f64, width: f64) -> u64 {
    // nudge so grid times landing a hair under a breakpoint count as on it
    ((t + 1e-9 * t.abs().max(1.0)) / width).floor() as u64
}

pub fn disturbance_at(p: &DisturbanceProfile, t: f64) -> f64 {
    match p {
        DisturbanceProfile::Zero => 0.0,
        DisturbanceProfile::Sinusoid { amplitude, frequency, phase } => {
            amplitude * (frequency * t + phase).sin()
        }
        DisturbanceProfile::SquareWave { amplitude, period } => {
            if slot(t, 0.5 * period).is_multiple_of(2) { *amplitude } else { -amplitude }
        }
        DisturbanceProfile::PiecewiseConstant { breakpoints, values } => {
            let eps = 1e-9 * t.abs().max(1.0);
            match breakpoints.iter().rposition(|&b| b <= t + eps) {
                Some(k) => values[k],
                None => 0.0,
            }
        }
        DisturbanceProfile::SeededBoundedNoise { amplitude, hold_time, seed } => {
            // random access into the seeded stream: one u64 (two words) per hold slot
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_word_pos(2 * slot(t, *hold_time) as u128);
            amplitude * rng.gen_range(-1.0..=1.0)
        }
    }
}

/// Everything the controller of one follower is allowed to know.
#[derive(Debug, Clone)]
pub struct ControllerModel {
    pub order: usize,
    pub regressor: Vec<BoundExpr>,
    /// `β_1 .. β_{r-1}` of the Hurwitz polynomial `λ^{r-1} + β_1 λ^{r-2} + ... + β_{r-1}`.
    pub beta: Vec<f64>,
    pub k_gain: f64,
    pub lambda: DMatrix<f64>,
    /// Cached `Λ⁻¹`.
    pub lambda_inv: DMatrix<f64>,
    pub companion: CompanionForm,
}

impl ControllerModel {
    pub fn new(order: usize, regressor: Vec<BoundExpr>, beta: Vec<f64>, k_gain: f64, lambda: DMatrix<f64>) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("order must be at least 1".into()));
        }
        if beta.len() != order - 1 {
            return Err(Error::Config(format!(
                "order {order} needs {} beta coefficient(s), got {}",
                order - 1,
                beta.len()
            )));
        }
        if !(k_gain > 0.0) {
            return Err(Error::Config(format!("k must be positive, got {k_gain}")));
        }
        if let Some(r) = regressor.iter().find(|r| r.order() > order) {
            return Err(Error::Config(format!("regressor bound to order {} but plant has order {order}", r.order())));
        }
        let m = regressor.len();
        if lambda.nrows() != m || lambda.ncols() != m {
            return Err(Error::Config(format!("Lambda must be {m}x{m}, got {}x{}", lambda.nrows(), lambda.ncols())));
        }
        if (&lambda - lambda.transpose()).norm() > 1e-12 * lambda.norm().max(1.0) {
            return Err(Error::Config("Lambda must be symmetric".into()));
        }
        let lambda_inv = if m == 0 {
            DMatrix::zeros(0, 0)
        } else {
            lambda
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Config("Lambda must be positive definite".into()))?
                .inverse()
        };
        let companion = check_beta_hurwitz(&beta)?;
        Ok(Self { order, regressor, beta, k_gain, lambda, lambda_inv, companion })
    }

    pub fn regressor_dim(&self) -> usize {
        self.regressor.len()
    }

    /// `f(x, t)` written into `out`.
    pub fn regressor_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<(), ExprError> {
        for (o, row) in out.iter_mut().zip(&self.regressor) {
            *o = row.eval(x, t)?;
        }
        Ok(())
    }
}

/// One follower: its controller-visible model plus the plant's true parameters
/// and disturbance.
#[derive(Debug, Clone)]
pub struct FollowerSpec {
    pub model: ControllerModel,
    pub theta_true: DVector<f64>,
    pub disturbance: DisturbanceProfile,
    pub phi: BoundExpr,
    pub x_init: DVector<f64>,
}

impl FollowerSpec {
    pub fn new(
        model: ControllerModel,
        theta_true: DVector<f64>,
        disturbance: DisturbanceProfile,
        phi: BoundExpr,
        x_init: DVector<f64>,
    ) -> Result<Self> {
        if theta_true.len() != model.regressor_dim() {
            return Err(Error::Config(format!(
                "theta has {} entries but the regressor has {} rows",
                theta_true.len(),
                model.regressor_dim()
            )));
        }
        if x_init.len() != model.order {
            return Err(Error::Config(format!("x0 has {} entries, order is {}", x_init.len(), model.order)));
        }
        if phi.order() > model.order {
            return Err(Error::Config("phi references states beyond the plant order".into()));
        }
        disturbance.validate()?;
        Ok(Self { model, theta_true, disturbance, phi, x_init })
    }

    pub fn order(&self) -> usize {
        self.model.order
    }

    pub fn disturbance_bound(&self) -> f64 {
        self.disturbance.bound()
    }
}

/// Chain-of-integrators derivative with an explicit disturbance value `d`.
pub fn plant_rhs_into(spec: &FollowerSpec, x: &[f64], u: f64, d: f64, t: f64, dx: &mut [f64]) -> Result<(), ExprError> {
    let r = spec.order();
    dx[..r - 1].copy_from_slice(&x[1..r]);
    let mut drift = 0.0;
    for (row, theta) in spec.model.regressor.iter().zip(spec.theta_true.iter()) {
        drift += row.eval(x, t)? * theta;
    }
    dx[r - 1] = u + d - drift;
    Ok(())
}

/// `ẋ_l = x_{l+1}`, `ẋ_r = u + d(t) − f(x, t)ᵀθ`.
pub fn plant_rhs(spec: &FollowerSpec, x: &[f64], u: f64, t: f64) -> Result<Vec<f64>, ExprError> {
    let mut dx = vec![0.0; spec.order()];
    plant_rhs_into(spec, x, u, disturbance_at(&spec.disturbance, t), t, &mut dx)?;
    Ok(dx)
}
