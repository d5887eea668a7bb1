//! Fixed-step explicit integrators over flat state vectors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

/// Reusable stage buffers so repeated steps do not allocate.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Workspace {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    fn ensure(&mut self, dim: usize) {
        if self.k1.len() != dim {
            *self = Self::new(dim);
        }
    }
}

/// Advances `x` in place by one step of size `h`. The derivative closure
/// writes `dx/dt` at `(t, x)` into its third argument.
pub fn step<F, E>(
    method: Integrator,
    f: &mut F,
    t: f64,
    x: &mut [f64],
    h: f64,
    ws: &mut Workspace,
) -> Result<(), E>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
{
    let n = x.len();
    ws.ensure(n);
    match method {
        Integrator::Euler => {
            f(t, x, &mut ws.k1)?;
            for (xi, ki) in x.iter_mut().zip(&ws.k1) {
                *xi += h * ki;
            }
        }
        Integrator::Rk4 => {
            let Workspace { k1, k2, k3, k4, tmp } = ws;
            f(t, x, k1)?;
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            f(t + 0.5 * h, tmp, k2)?;
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            f(t + 0.5 * h, tmp, k3)?;
            for i in 0..n {
                tmp[i] = x[i] + h * k3[i];
            }
            f(t + h, tmp, k4)?;
            for i in 0..n {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }
    Ok(())
}
