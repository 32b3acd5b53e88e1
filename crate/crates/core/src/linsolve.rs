//! Sparse symmetric positive definite solves for the orientation step.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositive { row: usize, pivot: f64 },
    #[error("conjugate gradients stalled at relative residual {0:e}")]
    Stalled(f64),
}

/// `A = diag(d) + sum_(i<j) a_ij (e_i e_j^T + e_j e_i^T)`; repeated pairs add up.
#[derive(Debug, Clone, Default)]
pub(crate) struct SymSparse {
    pub diag: Vec<f64>,
    pub off: Vec<(usize, usize, f64)>,
}

/// Above this many band-Cholesky flops the solver switches to PCG.
const BAND_WORK_LIMIT: f64 = 5e7;
pub(crate) const CG_REL_TOL: f64 = 1e-12;

impl SymSparse {
    pub fn with_diag(diag: Vec<f64>) -> Self {
        Self {
            diag,
            off: Vec::new(),
        }
    }

    /// Adds `x` to `A[i][j]` (and its mirror); entries with `i > j` are
    /// ignored so callers can sweep a full symmetric stencil.
    pub fn add(&mut self, i: usize, j: usize, x: f64) {
        if i == j {
            self.diag[i] += x;
        } else if i < j {
            self.off.push((i, j, x));
        }
    }

    /// Adds `w (e_i - e_j)(e_i - e_j)^T`.
    pub fn add_edge(&mut self, i: usize, j: usize, w: f64) {
        self.diag[i] += w;
        self.diag[j] += w;
        self.off.push((i.min(j), i.max(j), -w));
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (d, xi)) in out.iter_mut().zip(self.diag.iter().zip(x)) {
            *o = d * xi;
        }
        for &(i, j, a) in &self.off {
            out[i] += a * x[j];
            out[j] += a * x[i];
        }
    }

    fn bandwidth(&self) -> usize {
        self.off.iter().map(|e| e.1 - e.0).max().unwrap_or(0)
    }

    pub fn solve(&self, rhs: &[f64], guess: &[f64]) -> Result<Vec<f64>, SolveError> {
        let n = self.diag.len() as f64;
        let b = self.bandwidth() as f64;
        if n * (b + 1.0) * (b + 1.0) <= BAND_WORK_LIMIT {
            self.solve_banded(rhs)
        } else {
            self.solve_pcg(rhs, guess)
        }
    }

    /// Banded Cholesky; accurate up to rounding regardless of conditioning.
    pub fn solve_banded(&self, rhs: &[f64]) -> Result<Vec<f64>, SolveError> {
        let n = self.diag.len();
        let b = self.bandwidth();
        let w = b + 1;
        // row i holds A[i][i - b ..= i]
        let mut band = vec![0.0; n * w];
        let at = |i: usize, j: usize| i * w + (j + b - i);
        for (i, d) in self.diag.iter().enumerate() {
            band[at(i, i)] += d;
        }
        for &(i, j, a) in &self.off {
            band[at(j, i)] += a;
        }
        for i in 0..n {
            let lo = i.saturating_sub(b);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(b));
                let mut s = band[at(i, j)];
                for k in klo..j {
                    s -= band[at(i, k)] * band[at(j, k)];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(SolveError::NotPositive { row: i, pivot: s });
                    }
                    band[at(i, i)] = s.sqrt();
                } else {
                    band[at(i, j)] = s / band[at(j, j)];
                }
            }
        }
        let mut y = rhs.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(b);
            let mut s = y[i];
            for k in lo..i {
                s -= band[at(i, k)] * y[k];
            }
            y[i] = s / band[at(i, i)];
        }
        for i in (0..n).rev() {
            let hi = (i + b).min(n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= band[at(k, i)] * y[k];
            }
            y[i] = s / band[at(i, i)];
        }
        Ok(y)
    }

    /// Jacobi-preconditioned conjugate gradients to relative residual `CG_REL_TOL`.
    pub fn solve_pcg(&self, rhs: &[f64], guess: &[f64]) -> Result<Vec<f64>, SolveError> {
        let n = self.diag.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let bnorm = dot(rhs, rhs).sqrt();
        if bnorm == 0.0 {
            return Ok(vec![0.0; n]);
        }
        if let Some(row) = self.diag.iter().position(|d| !(*d > 0.0)) {
            return Err(SolveError::NotPositive {
                row,
                pivot: self.diag[row],
            });
        }
        let mut x = guess.to_vec();
        let mut ax = vec![0.0; n];
        self.apply(&x, &mut ax);
        let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut z: Vec<f64> = r.iter().zip(&self.diag).map(|(r, p)| r / p).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; n];
        for _ in 0..(20 * n).max(100) {
            if dot(&r, &r).sqrt() <= CG_REL_TOL * bnorm {
                return Ok(x);
            }
            self.apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                return Err(SolveError::NotPositive { row: 0, pivot: pap });
            }
            let a = rz / pap;
            for k in 0..n {
                x[k] += a * p[k];
                r[k] -= a * ap[k];
                z[k] = r[k] / self.diag[k];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
        }
        Err(SolveError::Stalled(dot(&r, &r).sqrt() / bnorm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize, d: f64, w: f64) -> SymSparse {
        let mut s = SymSparse::with_diag(vec![d; n]);
        for i in 0..n - 1 {
            s.add_edge(i, i + 1, w);
        }
        s
    }

    fn residual(s: &SymSparse, x: &[f64], b: &[f64]) -> f64 {
        let mut ax = vec![0.0; x.len()];
        s.apply(x, &mut ax);
        ax.iter().zip(b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn banded_and_cg_agree() {
        let n = 30;
        let mut s = SymSparse::with_diag((0..n).map(|i| 0.1 + 0.01 * i as f64).collect());
        for i in 0..n - 1 {
            s.add_edge(i, i + 1, 1.0 + i as f64);
        }
        for i in 0..n - 5 {
            s.add_edge(i, i + 5, 0.5);
        }
        // a symmetric positive semidefinite cross coupling
        for i in 0..n - 4 {
            s.add(i + 1, i + 4, 0.05);
            s.add(i + 4, i + 1, 0.05);
            s.add(i + 1, i + 1, 0.05);
            s.add(i + 4, i + 4, 0.05);
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x1 = s.solve_banded(&b).unwrap();
        let x2 = s.solve_pcg(&b, &vec![0.0; n]).unwrap();
        assert!(residual(&s, &x1, &b) < 1e-12);
        for (a, c) in x1.iter().zip(&x2) {
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn stiff_chain_keeps_max_principle() {
        let n = 64;
        let s = chain(n, 1.0, 1e9);
        let b: Vec<f64> = (0..n).map(|i| if i < n / 2 { -1.0 } else { 1.0 }).collect();
        let x = s.solve(&b, &b).unwrap();
        assert!(x.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn zero_diag_is_not_definite() {
        let s = chain(4, 0.0, 1.0);
        assert!(matches!(
            s.solve_banded(&[1.0, 0.0, 0.0, -1.0]),
            Err(SolveError::NotPositive { .. })
        ));
    }
}
