use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::EnvError;

/// Linear dynamics `x' = A x + B clip(a)` with quadratic cost, run for a fixed
/// horizon. Reward per step is `-(xᵀ Qc x + aᵀ Rc a)` on the clipped action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinPointMassSpec {
    pub n: usize,
    pub m: usize,
    /// Row-major matrices.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub qc: Vec<Vec<f64>>,
    pub rc: Vec<Vec<f64>>,
    pub horizon: usize,
    pub gamma: f64,
    pub action_bound: f64,
    /// Standard deviation of each coordinate of the initial state.
    pub reset_std: f64,
}

fn scaled_identity(n: usize, s: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { s } else { 0.0 }).collect())
        .collect()
}

impl Default for LinPointMassSpec {
    fn default() -> Self {
        LinPointMassSpec {
            n: 2,
            m: 2,
            a: scaled_identity(2, 1.0),
            b: scaled_identity(2, 0.1),
            qc: scaled_identity(2, 1.0),
            rc: scaled_identity(2, 0.01),
            horizon: 40,
            gamma: 0.99,
            action_bound: 5.0,
            reset_std: 1.0,
        }
    }
}

fn to_matrix(name: &str, rows: &[Vec<f64>], r: usize, c: usize) -> Result<DMatrix<f64>, EnvError> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(EnvError::InvalidSpec(format!("{name} must be {r}x{c}")));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(EnvError::InvalidSpec(format!("{name} has non-finite entries")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn check_symmetric_definite(name: &str, m: &DMatrix<f64>, strict: bool) -> Result<(), EnvError> {
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-12 {
        return Err(EnvError::InvalidSpec(format!("{name} is not symmetric")));
    }
    let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
    let ok = if strict { min_eig > 0.0 } else { min_eig >= -1e-12 };
    if !ok {
        let what = if strict {
            "positive definite"
        } else {
            "positive semidefinite"
        };
        return Err(EnvError::InvalidSpec(format!("{name} is not {what}")));
    }
    Ok(())
}

impl LinPointMassSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n == 0 || self.m == 0 {
            return Err(EnvError::InvalidSpec("dimensions must be positive".into()));
        }
        let (_, _, qc, rc) = self.matrices()?;
        check_symmetric_definite("qc", &qc, false)?;
        check_symmetric_definite("rc", &rc, true)?;
        if self.horizon == 0 {
            return Err(EnvError::InvalidSpec("horizon must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(EnvError::InvalidSpec(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.action_bound > 0.0 && self.action_bound.is_finite()) {
            return Err(EnvError::InvalidSpec("action_bound must be positive".into()));
        }
        if !(self.reset_std >= 0.0 && self.reset_std.is_finite()) {
            return Err(EnvError::InvalidSpec("reset_std must be non-negative".into()));
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn matrices(&self) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), EnvError> {
        Ok((
            to_matrix("a", &self.a, self.n, self.n)?,
            to_matrix("b", &self.b, self.n, self.m)?,
            to_matrix("qc", &self.qc, self.n, self.n)?,
            to_matrix("rc", &self.rc, self.m, self.m)?,
        ))
    }

    pub fn clip(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .map(|u| u.clamp(-self.action_bound, self.action_bound))
            .collect()
    }

    /// `(x', reward)` for a state and an already clipped action.
    pub fn transition(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, f64) {
        let mut next = vec![0.0; self.n];
        let mut cost = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                next[i] += self.a[i][j] * x[j];
                cost += x[i] * self.qc[i][j] * x[j];
            }
            for j in 0..self.m {
                next[i] += self.b[i][j] * u[j];
            }
        }
        for i in 0..self.m {
            for j in 0..self.m {
                cost += u[i] * self.rc[i][j] * u[j];
            }
        }
        (next, -cost)
    }

    /// Feedback gain `K` (row-major `m x n`, control `u = -K x`) of the
    /// discounted infinite-horizon LQR, by iterating the Riccati recursion
    /// `P = Q + γAᵀPA - γ²AᵀPB (R + γBᵀPB)⁻¹ BᵀPA` to a fixed point.
    pub fn lqr_gain(&self) -> Result<Vec<Vec<f64>>, EnvError> {
        self.validate()?;
        let (a, b, q, r) = self.matrices()?;
        let g = self.gamma;
        let mut p = q.clone();
        let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>, EnvError> {
            let s = &r + b.transpose() * p * &b * g;
            let inv = s
                .try_inverse()
                .ok_or_else(|| EnvError::InvalidSpec("singular Riccati system".into()))?;
            Ok(inv * b.transpose() * p * &a * g)
        };
        for _ in 0..100_000 {
            let k = gain(&p)?;
            let next = &q + a.transpose() * &p * &a * g - a.transpose() * &p * &b * &k * g;
            let next = (&next + next.transpose()) * 0.5;
            let delta = (&next - &p).abs().max();
            p = next;
            if !delta.is_finite() {
                break;
            }
            if delta <= 1e-12 * p.abs().max().max(1.0) {
                let k = gain(&p)?;
                return Ok((0..self.m).map(|i| (0..self.n).map(|j| k[(i, j)]).collect()).collect());
            }
        }
        Err(EnvError::InvalidSpec(
            "Riccati iteration did not converge (system not stabilizable?)".into(),
        ))
    }

    /// Closed-loop spectral radius of `A - B K`; below 1 means stable.
    pub fn closed_loop_radius(&self, gain: &[Vec<f64>]) -> Result<f64, EnvError> {
        let (a, b, _, _) = self.matrices()?;
        let k = to_matrix("gain", gain, self.m, self.n)?;
        let cl = a - b * k;
        Ok(cl.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max))
    }
}
