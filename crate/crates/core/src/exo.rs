//! The leader exosystem `v0' = S v0, y0 = F v0`, its stability and
//! detectability checks, and the observer gain design for neutrally stable `S`.

use std::convert::Infallible;

use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{h_matrix, SwitchingSchedule};
use crate::ode::{self, Integrator, Workspace};

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderSystem {
    pub s: DMatrix<f64>,
    /// Output row, stored as an `n`-vector.
    pub f: DVector<f64>,
    pub v0_init: DVector<f64>,
}

impl LeaderSystem {
    pub fn new(s: DMatrix<f64>, f: DVector<f64>, v0_init: DVector<f64>) -> Result<Self> {
        let n = s.nrows();
        if n == 0 || s.ncols() != n {
            return Err(Error::Config(format!("S must be square and non-empty, got {}x{}", s.nrows(), s.ncols())));
        }
        if f.len() != n || v0_init.len() != n {
            return Err(Error::Config(format!(
                "leader dimensions disagree: S is {n}x{n}, F has {}, v0 has {}",
                f.len(),
                v0_init.len()
            )));
        }
        Ok(Self { s, f, v0_init })
    }

    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    /// `F S^k v` for `k = 0..=kmax`.
    pub fn output_derivatives(&self, v: &DVector<f64>, kmax: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(kmax + 1);
        let mut w = v.clone();
        for k in 0..=kmax {
            if k > 0 {
                w = &self.s * w;
            }
            out.push(self.f.dot(&w));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    /// Eigenvalues as `(re, im)` pairs.
    pub eigenvalues: Vec<(f64, f64)>,
    pub marginally_stable: bool,
    pub neutrally_stable: bool,
    pub detectable: bool,
}

fn scale(s: &DMatrix<f64>) -> f64 {
    s.norm().max(1.0)
}

fn eig_tol(s: &DMatrix<f64>) -> f64 {
    1e-9 * scale(s)
}

fn rank_tol(s: &DMatrix<f64>) -> f64 {
    1e-7 * scale(s)
}

pub fn eigenvalues(s: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if s.nrows() != s.ncols() {
        return Err(Error::Numerical("eigenvalues of a non-square matrix".into()));
    }
    let ev = s.clone().complex_eigenvalues();
    if ev.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numerical("eigen-solver returned non-finite values".into()));
    }
    Ok(ev.iter().copied().collect())
}

fn complex_rank(m: &DMatrix<Complex<f64>>, tol: f64) -> usize {
    m.clone().svd(false, false).singular_values.iter().filter(|&&sv| sv > tol).count()
}

fn shifted(s: &DMatrix<f64>, lambda: Complex<f64>) -> DMatrix<Complex<f64>> {
    let n = s.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let v = Complex::new(s[(i, j)], 0.0);
        if i == j { v - lambda } else { v }
    })
}

/// Groups numerically repeated eigenvalues; returns `(representative, multiplicity)`.
fn clusters(ev: &[Complex<f64>], tol: f64) -> Vec<(Complex<f64>, usize)> {
    let mut out: Vec<(Complex<f64>, Vec<Complex<f64>>)> = Vec::new();
    for &z in ev {
        match out.iter_mut().find(|(c, _)| (c - z).norm() <= tol) {
            Some((_, members)) => members.push(z),
            None => out.push((z, vec![z])),
        }
    }
    out.into_iter()
        .map(|(_, m)| {
            let mean = m.iter().sum::<Complex<f64>>() / m.len() as f64;
            (mean, m.len())
        })
        .collect()
}

/// Marginal stability (no eigenvalue in the open right half plane, every
/// imaginary-axis eigenvalue semi-simple) and neutral stability (additionally
/// all eigenvalues on the imaginary axis). Returns `(marginal, neutral, eigenvalues)`.
pub fn check_assumption1(s: &DMatrix<f64>) -> Result<(bool, bool, Vec<Complex<f64>>)> {
    let ev = eigenvalues(s)?;
    let tol = eig_tol(s);
    let n = s.nrows();
    let mut marginal = ev.iter().all(|z| z.re <= tol);
    if marginal {
        for (lambda, alg) in clusters(&ev, 1e-6 * scale(s)) {
            if lambda.re.abs() <= tol {
                let geo = n - complex_rank(&shifted(s, lambda), rank_tol(s));
                if geo < alg {
                    marginal = false;
                    break;
                }
            }
        }
    }
    let neutral = marginal && ev.iter().all(|z| z.re.abs() <= tol);
    Ok((marginal, neutral, ev))
}

/// PBH detectability: `[S - λI; F]` has full column rank at every eigenvalue
/// with non-negative real part (within tolerance).
pub fn check_assumption2(f: &DVector<f64>, s: &DMatrix<f64>) -> Result<bool> {
    let n = s.nrows();
    if f.len() != n {
        return Err(Error::Config(format!("F has {} entries but S is {n}x{n}", f.len())));
    }
    let tol = eig_tol(s);
    for lambda in eigenvalues(s)? {
        if lambda.re < -tol {
            continue;
        }
        let top = shifted(s, lambda);
        let stacked = DMatrix::from_fn(n + 1, n, |i, j| {
            if i < n { top[(i, j)] } else { Complex::new(f[j], 0.0) }
        });
        if complex_rank(&stacked, rank_tol(s)) < n {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn stability_report(leader: &LeaderSystem) -> Result<StabilityReport> {
    let (marginal, neutral, ev) = check_assumption1(&leader.s)?;
    Ok(StabilityReport {
        eigenvalues: ev.iter().map(|z| (z.re, z.im)).collect(),
        marginally_stable: marginal,
        neutrally_stable: neutral,
        detectable: check_assumption2(&leader.f, &leader.s)?,
    })
}

/// Symmetric positive definite `R` with `R S + Sᵀ R = 0`, normalized so the
/// largest diagonal entry is 1.
///
/// Works on the vectorized operator `X ↦ X S + Sᵀ X`. For neutrally stable
/// `S` its kernel and range are complementary, and the component of the
/// identity in the kernel (along the range) is the time average of
/// `exp(Sᵀt) exp(St)`, which is positive definite. That component is found
/// from one least-squares solve of `[K | M] z = vec(I)`.
pub fn solve_neutral_lyapunov(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    let (_, neutral, _) = check_assumption1(s)?;
    if !neutral {
        return Err(Error::Design("S is not neutrally stable; supply the observer gain L0 explicitly".into()));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let st = s.transpose();
    let op = st.kronecker(&eye) + eye.kronecker(&st);
    let m = n * n;
    let svd = op.clone().svd(true, true);
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Numerical("SVD did not return V".into()))?;
    let null_tol = 1e-9 * op.norm().max(1.0);
    let kernel: Vec<DVector<f64>> = (0..m)
        .filter(|&k| svd.singular_values[k] <= null_tol)
        .map(|k| v_t.row(k).transpose())
        .collect();
    if kernel.is_empty() {
        return Err(Error::Design("RS + SᵀR = 0 has only the trivial solution".into()));
    }
    let d = kernel.len();
    let mut aug = DMatrix::<f64>::zeros(m, d + m);
    for (c, kv) in kernel.iter().enumerate() {
        aug.set_column(c, kv);
    }
    aug.view_mut((0, d), (m, m)).copy_from(&op);
    let rhs = DVector::from_column_slice(eye.as_slice());
    let z = aug
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Numerical(format!("least-squares solve failed: {e}")))?;
    let mut r = DMatrix::<f64>::zeros(n, n);
    for (c, kv) in kernel.iter().enumerate() {
        r += DMatrix::from_column_slice(n, n, kv.as_slice()) * z[c];
    }
    let r = (&r + r.transpose()) * 0.5;

    let max_diag = r.diagonal().max();
    if !(max_diag > 0.0) {
        return Err(Error::Design("no positive definite solution of RS + SᵀR = 0 found".into()));
    }
    let r = r / max_diag;
    let residual = (&r * s + s.transpose() * &r).norm();
    let min_eig = r.clone().symmetric_eigenvalues().min();
    let tol = 1e-8 * scale(s);
    if residual > tol || min_eig <= tol {
        return Err(Error::Design(format!(
            "Lyapunov solution rejected (residual {residual:.3e}, min eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(r)
}

/// `L0 = μ0 R Fᵀ`.
pub fn design_gain(leader: &LeaderSystem, mu0: f64) -> Result<DVector<f64>> {
    if !(mu0 > 0.0) {
        return Err(Error::Config(format!("mu0 must be positive, got {mu0}")));
    }
    if !check_assumption2(&leader.f, &leader.s)? {
        return Err(Error::Design("(F, S) is not detectable".into()));
    }
    let r = solve_neutral_lyapunov(&leader.s)?;
    Ok(r * &leader.f * mu0)
}

/// Spectral check of `I ⊗ S − H ⊗ (L0 F)` for one fixed graph.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphSpectrum {
    pub graph: usize,
    pub max_real_part: f64,
    pub hurwitz: bool,
}

/// Per-graph spectral diagnostic of the gain. Says nothing conclusive about
/// the switched system: each instantaneous graph may be disconnected.
pub fn per_graph_spectra(
    leader: &LeaderSystem,
    l0: &DVector<f64>,
    schedule: &SwitchingSchedule,
) -> Result<Vec<GraphSpectrum>> {
    let n = leader.dim();
    let lf = l0 * leader.f.transpose();
    schedule
        .graphs()
        .iter()
        .enumerate()
        .map(|(idx, g)| {
            let h = h_matrix(g);
            let nf = h.nrows();
            if nf == 0 {
                return Ok(GraphSpectrum { graph: idx, max_real_part: f64::NEG_INFINITY, hurwitz: true });
            }
            let a = DMatrix::<f64>::identity(nf, nf).kronecker(&leader.s) - h.kronecker(&lf);
            debug_assert_eq!(a.nrows(), nf * n);
            let max_re = eigenvalues(&a)?.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
            Ok(GraphSpectrum { graph: idx, max_real_part: max_re, hurwitz: max_re < -eig_tol(&a) })
        })
        .collect()
}

/// Leader state and output derivatives sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderSample {
    pub v0: DVector<f64>,
    /// `y0^(k) = F S^k v0` for `k = 0..=kmax`.
    pub outputs: Vec<f64>,
}

/// Integrates the leader on the fixed grid of step `h` up to `t` (rounded to
/// the nearest grid point) with RK4. Output derivatives are for diagnostics.
pub fn leader_flow(leader: &LeaderSystem, t: f64, h: f64, kmax: usize) -> Result<LeaderSample> {
    if t < 0.0 || !(h > 0.0) {
        return Err(Error::Domain(format!("leader flow needs t >= 0 and h > 0 (t = {t}, h = {h})")));
    }
    let steps = (t / h).round() as usize;
    let mut v = leader.v0_init.as_slice().to_vec();
    let mut ws = Workspace::new(v.len());
    let s = &leader.s;
    let mut rhs = |_t: f64, x: &[f64], dx: &mut [f64]| -> std::result::Result<(), Infallible> {
        let x = DVector::from_column_slice(x);
        dx.copy_from_slice((s * x).as_slice());
        Ok(())
    };
    for k in 0..steps {
        let _ = ode::step(Integrator::Rk4, &mut rhs, k as f64 * h, &mut v, h, &mut ws);
    }
    let v0 = DVector::from_vec(v);
    let outputs = leader.output_derivatives(&v0, kmax);
    Ok(LeaderSample { v0, outputs })
}
