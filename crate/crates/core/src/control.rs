//! Sliding-variable controller: the reference `p_ri` built from the observer,
//! its analytic time derivative, the adaptive control laws with and without
//! disturbance rejection, and the Lyapunov diagnostics `V` and `W`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::ExprError;
use crate::observer::{dot, e_k_terms_into, matvec};
use crate::plant::ControllerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    #[default]
    Baseline,
    DisturbanceRejection,
}

/// Companion realization of the error chain `ξ' = A ξ + B ū`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompanionForm {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Builds the companion form of `λ^{m} + β_1 λ^{m−1} + … + β_m` and rejects it
/// unless every root lies strictly in the left half plane.
pub fn check_beta_hurwitz(beta: &[f64]) -> Result<CompanionForm> {
    let m = beta.len();
    let mut a = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    if m == 0 {
        return Ok(CompanionForm { a, b });
    }
    if beta.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config("beta polynomial not Hurwitz (non-finite coefficient)".into()));
    }
    for i in 0..m - 1 {
        a[(i, i + 1)] = 1.0;
    }
    for (j, bk) in beta.iter().enumerate() {
        // last row is [-β_m, …, -β_1]
        a[(m - 1, m - 1 - j)] = -bk;
    }
    b[m - 1] = 1.0;
    let tol = 1e-9 * a.norm().max(1.0);
    let ev = crate::exo::eigenvalues(&a)?;
    if ev.iter().any(|z| z.re >= -tol) {
        return Err(Error::Config("beta polynomial not Hurwitz".into()));
    }
    Ok(CompanionForm { a, b })
}

/// Estimates carried by one follower's controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub theta_hat: DVector<f64>,
    /// Disturbance-bound estimate; only evolves in disturbance-rejection mode.
    pub d_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SlidingQuantities {
    pub p: f64,
    pub s: f64,
    pub p_dot: f64,
}

/// Scratch space for [`sliding_quantities`]; reused across calls.
#[derive(Debug, Clone, Default)]
pub struct SlidingScratch {
    powers: Vec<Vec<f64>>,
    e_terms: Vec<Vec<f64>>,
    q: Vec<f64>,
    fe: Vec<f64>,
}

impl SlidingScratch {
    fn ensure(&mut self, n: usize, r: usize) {
        if self.powers.len() != r + 1 || self.powers.first().map(Vec::len) != Some(n) {
            self.powers = vec![vec![0.0; n]; r + 1];
            self.e_terms = vec![vec![0.0; n]; r];
            self.q = vec![0.0; r + 1];
            self.fe = vec![0.0; r];
        }
    }
}

/// `p_ri`, `s_i` and the analytic `ṗ_ri` from local data only: the follower
/// state `x`, its estimates `(v_i, S_i)` (row-major `S_i`), the output row `F`
/// and the innovations `(e_v, e_S)`. Leader quantities are not inputs.
#[allow(clippy::too_many_arguments)]
pub fn sliding_quantities(
    beta: &[f64],
    x: &[f64],
    v: &[f64],
    s_i: &[f64],
    f: &[f64],
    e_v: &[f64],
    e_s: &[f64],
    scratch: &mut SlidingScratch,
) -> SlidingQuantities {
    let r = beta.len() + 1;
    let n = v.len();
    scratch.ensure(n, r);
    let SlidingScratch { powers, e_terms, q, fe } = scratch;
    powers[0].copy_from_slice(v);
    for k in 1..=r {
        let (done, rest) = powers.split_at_mut(k);
        matvec(s_i, &done[k - 1], &mut rest[0]);
    }
    for k in 0..=r {
        q[k] = dot(f, &powers[k]);
    }
    e_k_terms_into(s_i, v, e_v, e_s, r - 1, e_terms);
    for k in 0..r {
        fe[k] = dot(f, &e_terms[k]);
    }

    // p = q_{r-1} − Σ_j β_j (x_{r-1-j} − q_{r-1-j})
    let mut p = q[r - 1];
    for (j, b) in beta.iter().enumerate() {
        let j = j + 1;
        p -= b * (x[r - 1 - j] - q[r - 1 - j]);
    }
    let s = x[r - 1] - p;

    // ṗ = q_r − Σ_j β_j (x_{r-j} − q_{r-j}) + Σ_{k=0}^{r-1} β_k F e_{r-1-k},  β_0 = 1
    let mut p_dot = q[r] + fe[r - 1];
    for (j, b) in beta.iter().enumerate() {
        let j = j + 1;
        p_dot -= b * (x[r - j] - q[r - j]);
        p_dot += b * fe[r - 1 - j];
    }
    SlidingQuantities { p, s, p_dot }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// `p_ri = F S_i^{r−1} v_i − β_1 (y^{(r−2)} − F S_i^{r−2} v_i) − … − β_{r−1} (y − F v_i)`.
pub fn compute_p_ri(model: &ControllerModel, x: &[f64], v_i: &DVector<f64>, s_i: &DMatrix<f64>, f: &DVector<f64>) -> f64 {
    let n = v_i.len();
    let zeros = vec![0.0; n * n];
    let mut scratch = SlidingScratch::default();
    sliding_quantities(&model.beta, x, v_i.as_slice(), &row_major(s_i), f.as_slice(), &zeros[..n], &zeros, &mut scratch).p
}

/// `s_i = y^{(r−1)} − p_ri`.
pub fn compute_s(model: &ControllerModel, x: &[f64], p_ri: f64) -> f64 {
    x[model.order - 1] - p_ri
}

/// Analytic `ṗ_ri`; uses only the follower's own state, estimates and innovations.
pub fn compute_p_dot(
    model: &ControllerModel,
    x: &[f64],
    v_i: &DVector<f64>,
    s_i: &DMatrix<f64>,
    f: &DVector<f64>,
    e_v: &DVector<f64>,
    e_s: &DMatrix<f64>,
) -> f64 {
    let mut scratch = SlidingScratch::default();
    sliding_quantities(
        &model.beta,
        x,
        v_i.as_slice(),
        &row_major(s_i),
        f.as_slice(),
        e_v.as_slice(),
        &row_major(e_s),
        &mut scratch,
    )
    .p_dot
}

/// `sgn` with `sgn(0) = 0` when `eps == 0`; otherwise the boundary-layer
/// saturation `s / max(|s|, eps)`.
pub fn smoothed_sign(s: f64, eps: f64) -> f64 {
    if eps > 0.0 {
        s / s.abs().max(eps)
    } else if s > 0.0 {
        1.0
    } else if s < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn feedforward(model: &ControllerModel, x: &[f64], t: f64, theta_hat: &DVector<f64>) -> Result<f64, ExprError> {
    let mut acc = 0.0;
    for (row, th) in model.regressor.iter().zip(theta_hat.iter()) {
        acc += row.eval(x, t)? * th;
    }
    Ok(acc)
}

/// `u = f(x, t)ᵀθ̂ − k s + ṗ`.
pub fn control_ui3(model: &ControllerModel, x: &[f64], t: f64, ctrl: &ControllerState, s: f64, p_dot: f64) -> Result<f64, ExprError> {
    Ok(feedforward(model, x, t, &ctrl.theta_hat)? - model.k_gain * s + p_dot)
}

/// `u = f(x, t)ᵀθ̂ − sgn(s) D̂ − k s + ṗ`, with `sgn` smoothed when `eps > 0`.
pub fn control_ui32(
    model: &ControllerModel,
    x: &[f64],
    t: f64,
    ctrl: &ControllerState,
    s: f64,
    p_dot: f64,
    eps: f64,
) -> Result<f64, ExprError> {
    Ok(control_ui3(model, x, t, ctrl, s, p_dot)? - smoothed_sign(s, eps) * ctrl.d_hat)
}

/// Adaptation rates from the evaluated regressor `f`: `θ̂' = −Λ⁻¹ f s` and,
/// in disturbance-rejection mode, `D̂' = sgn(s) s` (`= |s|` for exact `sgn`).
pub fn adapt_rhs(model: &ControllerModel, f_vals: &[f64], s: f64, mode: ControlMode, eps: f64) -> (DVector<f64>, f64) {
    let fv = DVector::from_column_slice(f_vals);
    let theta_dot = -(&model.lambda_inv * fv) * s;
    let d_dot = match mode {
        ControlMode::Baseline => 0.0,
        ControlMode::DisturbanceRejection => smoothed_sign(s, eps) * s,
    };
    (theta_dot, d_dot)
}

/// Diagnostic input of the error chain, built from leader derivatives
/// `y0^(k)`, `k = 0..r−1`. Never used by the controller.
pub fn u_bar(model: &ControllerModel, s: f64, v_i: &[f64], s_i: &[f64], f: &[f64], y0: &[f64]) -> f64 {
    let r = model.order;
    let n = v_i.len();
    let mut w = v_i.to_vec();
    let mut tmp = vec![0.0; n];
    let mut q = Vec::with_capacity(r);
    for k in 0..r {
        if k > 0 {
            matvec(s_i, &w, &mut tmp);
            std::mem::swap(&mut w, &mut tmp);
        }
        q.push(dot(f, &w));
    }
    let mut ub = -(y0[r - 1] - q[r - 1]);
    for (j, b) in model.beta.iter().enumerate() {
        let j = j + 1;
        ub -= b * (y0[r - 1 - j] - q[r - 1 - j]);
    }
    ub + s
}

/// One follower's contribution to `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovTerm {
    pub s: f64,
    pub theta_tilde: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub d_tilde: f64,
}

/// `V = ½ Σ (s² + θ̃ᵀΛθ̃)`, plus `D̃²` inside the sum in disturbance-rejection mode.
pub fn lyapunov_v(terms: &[LyapunovTerm], mode: ControlMode) -> f64 {
    0.5 * terms
        .iter()
        .map(|t| {
            let quad = (t.theta_tilde.transpose() * &t.lambda * &t.theta_tilde)[(0, 0)];
            let d = if mode == ControlMode::DisturbanceRejection { t.d_tilde * t.d_tilde } else { 0.0 };
            t.s * t.s + quad + d
        })
        .sum::<f64>()
}

/// Running trapezoidal integral of `Σ k_i s_i²` over sampled times.
/// `s[k][i]` is agent `i`'s sliding variable at `times[k]`.
pub fn barbalat_w(times: &[f64], s: &[Vec<f64>], k_gains: &[f64]) -> Vec<f64> {
    let integrand = |row: &Vec<f64>| row.iter().zip(k_gains).map(|(si, ki)| ki * si * si).sum::<f64>();
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    for idx in 0..times.len() {
        if idx > 0 {
            acc += 0.5 * (times[idx] - times[idx - 1]) * (integrand(&s[idx]) + integrand(&s[idx - 1]));
        }
        out.push(acc);
    }
    out
}
