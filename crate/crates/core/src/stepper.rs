//! The time-discrete scheme: a v-step with the previous orientation frozen,
//! then a theta-step with the new v frozen.

use std::collections::VecDeque;

use thiserror::Error;

use crate::energy::{cell_gradients, free_energy, minus_laplacian, EnergyBreakdown, EnergyError};
use crate::grid::{Field, FieldPair, Grid, GridError};
use crate::linsolve::{SolveError, SymSparse};
use crate::model::{InitialData, ModelError, ModelSpec};
use crate::regnorm::{euclid, Norm, RegularizedNorm};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("time step {h} exceeds the uniqueness bound {bound}")]
    StepTooLarge { h: f64, bound: f64 },
    #[error("time step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("the exact norm cannot drive the solvers; pick a regularized norm")]
    ExactNorm,
    #[error("v-step did not converge: residual {residual:e} after {iterations} iterations")]
    VNotConverged { residual: f64, iterations: usize },
    #[error("theta-step did not converge: last change {change:e} after {iterations} iterations")]
    ThetaNotConverged { change: f64, iterations: usize },
    #[error("state left the admissible set: {0}")]
    Inadmissible(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Projected-gradient residual of the v-step (sup norm, unit step).
    pub v_tol: f64,
    pub v_max_iter: usize,
    /// Sup-norm change between successive lagged-diffusivity iterates.
    pub theta_tol: f64,
    pub picard_max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            v_tol: 1e-9,
            v_max_iter: 10_000,
            theta_tol: 1e-12,
            picard_max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub index: usize,
    pub time: f64,
    pub v: FieldPair,
    pub theta: Field,
    /// Time-averaged source over the step; `None` for the initial record.
    pub u: Option<Field>,
    pub energy: EnergyBreakdown,
    pub v_increment: f64,
    pub theta_increment: f64,
    pub v_iterations: usize,
    pub theta_iterations: usize,
    /// Left minus right side of the one-step dissipation inequality with a
    /// zero reference temperature; nonpositive up to solver error.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub spec: ModelSpec,
    pub grid: Grid,
    pub h: f64,
    pub norm: Norm,
    pub records: Vec<StepRecord>,
}

impl Trajectory {
    pub fn last(&self) -> &StepRecord {
        self.records.last().expect("a trajectory always has its initial record")
    }

    pub fn steps(&self) -> usize {
        self.records.len() - 1
    }

    /// Rebuilds records (energies, increments, slacks) from stored fields,
    /// e.g. after loading a saved trajectory.
    pub fn from_fields(
        spec: ModelSpec,
        norm: Norm,
        h: f64,
        states: Vec<(FieldPair, Field, Option<Field>)>,
    ) -> Result<Self, StepError> {
        let grid = *states
            .first()
            .ok_or_else(|| StepError::Inadmissible("empty trajectory".into()))?
            .1
            .grid();
        let mut records: Vec<StepRecord> = Vec::with_capacity(states.len());
        for (i, (v, theta, u)) in states.into_iter().enumerate() {
            let energy = free_energy(&spec, &v, &theta, &norm)?;
            let mut rec = StepRecord {
                index: i,
                time: i as f64 * h,
                v,
                theta,
                u,
                energy,
                v_increment: 0.0,
                theta_increment: 0.0,
                v_iterations: 0,
                theta_iterations: 0,
                slack: 0.0,
            };
            if let Some(prev) = records.last() {
                fill_increments(&spec, h, prev, &mut rec)?;
            }
            records.push(rec);
        }
        Ok(Self {
            spec,
            grid,
            h,
            norm,
            records,
        })
    }
}

fn fill_increments(
    spec: &ModelSpec,
    h: f64,
    prev: &StepRecord,
    rec: &mut StepRecord,
) -> Result<(), StepError> {
    let grid = *rec.theta.grid();
    let dv = rec.v.dist_sq(&prev.v);
    let dth: Vec<f64> = rec
        .theta
        .values()
        .iter()
        .zip(prev.theta.values())
        .map(|(a, b)| a - b)
        .collect();
    let weighted: f64 = dth
        .iter()
        .enumerate()
        .map(|(c, d)| spec.alpha0.value(rec.v.w.values()[c], rec.v.eta.values()[c]) * d * d)
        .sum::<f64>()
        * grid.cell_measure();
    let u_sq = match &rec.u {
        Some(u) => grid.inner(u, u)?,
        None => 0.0,
    };
    rec.v_increment = dv.sqrt();
    rec.theta_increment = grid.inner_raw(&dth, &dth).sqrt();
    rec.slack = dv / (2.0 * h) + weighted / h + rec.energy.total
        - prev.energy.total
        - spec.c * spec.c * h * u_sq;
    Ok(())
}

/// Outcome of one inner solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Solved<T> {
    pub value: T,
    pub iterations: usize,
    /// Final projected residual (v-step) or last iterate change (theta-step).
    pub residual: f64,
}

/// Validated per-run context shared by all steps.
#[derive(Debug, Clone)]
pub struct Stepper {
    spec: ModelSpec,
    norm: RegularizedNorm,
    h: f64,
    tol: Tolerances,
}

impl Stepper {
    pub fn new(spec: ModelSpec, norm: &Norm, h: f64, tol: Tolerances) -> Result<Self, StepError> {
        let Norm::Smooth(reg) = norm else {
            return Err(StepError::ExactNorm);
        };
        if !(h > 0.0 && h.is_finite()) {
            return Err(StepError::BadStep(h));
        }
        let bound = spec.step_bound()?;
        if h > bound {
            return Err(StepError::StepTooLarge { h, bound });
        }
        Ok(Self {
            spec,
            norm: *reg,
            h,
            tol,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Projected gradient with Barzilai-Borwein steps and a nonmonotone
    /// Armijo search on the strongly convex v-functional.
    pub fn v_step(
        &self,
        v_prev: &FieldPair,
        theta_prev: &Field,
        u: &Field,
    ) -> Result<Solved<FieldPair>, StepError> {
        let grid = *theta_prev.grid();
        if v_prev.grid() != &grid || u.grid() != &grid {
            return Err(GridError::Mismatch.into());
        }
        let prob = VProblem::new(&self.spec, &self.norm, self.h, v_prev, theta_prev, u);
        let n = grid.len();
        let m = grid.cell_measure();

        let mut x: Vec<f64> = prob.prev.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let mut g = prob.gradient(&x);
        let mut j = prob.objective(&x);
        let lip = 1.0 / self.h + 4.0 * grid.spacing().iter().map(|d| 1.0 / (d * d)).sum::<f64>();
        let mut tau = 1.0 / lip;
        let mut hist: VecDeque<f64> = VecDeque::from([j]);
        let mut xn = vec![0.0; 2 * n];
        let mut d = vec![0.0; 2 * n];

        for it in 0..=self.tol.v_max_iter {
            let res = projected_residual(&x, &g);
            if res <= self.tol.v_tol {
                return Ok(Solved {
                    value: prob.unpack(grid, x),
                    iterations: it,
                    residual: res,
                });
            }
            if it == self.tol.v_max_iter {
                return Err(StepError::VNotConverged {
                    residual: res,
                    iterations: it,
                });
            }
            for k in 0..2 * n {
                d[k] = (x[k] - tau * g[k]).clamp(0.0, 1.0) - x[k];
            }
            let slope = m * d.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
            let j_ref = hist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let noise = 1e-14 * (1.0 + j.abs());
            let mut lambda = 1.0;
            let jn = loop {
                for k in 0..2 * n {
                    xn[k] = (x[k] + lambda * d[k]).clamp(0.0, 1.0);
                }
                let jn = prob.objective(&xn);
                if jn <= j_ref + 1e-4 * lambda * slope + noise {
                    break jn;
                }
                lambda *= 0.5;
                if lambda < 1e-30 {
                    return Err(StepError::VNotConverged {
                        residual: res,
                        iterations: it,
                    });
                }
            };
            let gn = prob.gradient(&xn);
            let (mut ss, mut sy) = (0.0, 0.0);
            for k in 0..2 * n {
                let s = xn[k] - x[k];
                ss += s * s;
                sy += s * (gn[k] - g[k]);
            }
            tau = if sy > 0.0 {
                (ss / sy).clamp(1e-12, 1e12)
            } else {
                1.0 / lip
            };
            std::mem::swap(&mut x, &mut xn);
            g = gn;
            j = jn;
            hist.push_back(j);
            if hist.len() > 10 {
                hist.pop_front();
            }
        }
        unreachable!("loop returns on its last iteration")
    }

    /// Minimizes `(1/2h)(alpha0 (theta - theta_prev), theta - theta_prev) + Phi(v; theta)`.
    ///
    /// Solved by a globalized primal-dual Newton iteration, which stays fast
    /// as `sigma -> 0`; if it fails, damped primal Newton with
    /// lagged-diffusivity fallback steps takes over.
    pub fn theta_step(&self, v: &FieldPair, theta_prev: &Field) -> Result<Solved<Field>, StepError> {
        let grid = *theta_prev.grid();
        if v.grid() != &grid {
            return Err(GridError::Mismatch.into());
        }
        let (lo, hi) = (theta_prev.min(), theta_prev.max());
        if hi - lo == 0.0 {
            return Ok(Solved {
                value: theta_prev.clone(),
                iterations: 0,
                residual: 0.0,
            });
        }
        let prob = ThetaProblem::new(&self.spec, &self.norm, self.h, v, theta_prev.values());
        let (cap, tol) = (self.tol.picard_max_iter, self.tol.theta_tol);
        let mut solved = prob
            .solve_primal_dual(cap, tol)
            .or_else(|_| prob.solve_primal(prob.prev.to_vec(), cap, tol))?;
        // the exact minimizer obeys the discrete maximum principle
        solved.value.iter_mut().for_each(|t| *t = t.clamp(lo, hi));
        Ok(Solved {
            value: Field::from_raw(grid, solved.value),
            iterations: solved.iterations,
            residual: solved.residual,
        })
    }

    /// One full step from `prev` with averaged source `u`.
    pub fn step(&self, prev: &StepRecord, u: Field) -> Result<StepRecord, StepError> {
        let vs = self.v_step(&prev.v, &prev.theta, &u)?;
        let ts = self.theta_step(&vs.value, &prev.theta)?;
        let norm = Norm::Smooth(self.norm);
        let energy = free_energy(&self.spec, &vs.value, &ts.value, &norm)?;
        if !vs.value.in_unit_box() {
            return Err(StepError::Inadmissible("v left the unit box".into()));
        }
        let mut rec = StepRecord {
            index: prev.index + 1,
            time: (prev.index + 1) as f64 * self.h,
            v: vs.value,
            theta: ts.value,
            u: Some(u),
            energy,
            v_increment: 0.0,
            theta_increment: 0.0,
            v_iterations: vs.iterations,
            theta_iterations: ts.iterations,
            slack: 0.0,
        };
        fill_increments(&self.spec, self.h, prev, &mut rec)?;
        Ok(rec)
    }

    pub fn initial_record(&self, initial: &InitialData) -> Result<StepRecord, StepError> {
        let init = InitialData::new(initial.v0.clone(), initial.theta0.clone())?;
        let energy = free_energy(&self.spec, &init.v0, &init.theta0, &Norm::Smooth(self.norm))?;
        Ok(StepRecord {
            index: 0,
            time: 0.0,
            v: init.v0,
            theta: init.theta0,
            u: None,
            energy,
            v_increment: 0.0,
            theta_increment: 0.0,
            v_iterations: 0,
            theta_iterations: 0,
            slack: 0.0,
        })
    }
}

/// `max |x - P(x - g)|` with the unit-box projection `P`.
fn projected_residual(x: &[f64], g: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .map(|(x, g)| (x - (x - g).clamp(0.0, 1.0)).abs())
        .fold(0.0, f64::max)
}

/// Curvature floor for the p-growth family at vanishing gradients.
const R_FLOOR: f64 = 1e-12;
/// Largest mismatch `|rho(|xi|) p - xi|` at which the primal-dual
/// iteration may stop.
const CONSISTENCY_TOL: f64 = 1e-9;

/// The orientation functional with `v` frozen, divided by the cell measure.
struct ThetaProblem<'a> {
    grid: Grid,
    norm: &'a RegularizedNorm,
    nu2: f64,
    /// `alpha0(v) / h` per cell.
    mass: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    prev: &'a [f64],
    /// `mass * theta_prev`
    rhs: Vec<f64>,
    /// Forward neighbour of each cell along each axis.
    next: Vec<[Option<usize>; 2]>,
}

impl<'a> ThetaProblem<'a> {
    fn new(
        spec: &ModelSpec,
        norm: &'a RegularizedNorm,
        h: f64,
        v: &FieldPair,
        prev: &'a [f64],
    ) -> Self {
        let grid = *v.grid();
        let n = grid.len();
        let (mut mass, mut alpha, mut beta) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for c in 0..n {
            let (w, e) = (v.w.values()[c], v.eta.values()[c]);
            mass[c] = spec.alpha0.value(w, e) / h;
            alpha[c] = spec.alpha.value(w, e);
            beta[c] = spec.beta.value(w, e);
        }
        let mut next = vec![[None; 2]; n];
        grid.for_each_face(|axis, _, a, b| next[a][axis] = Some(b));
        Self {
            grid,
            norm,
            nu2: spec.nu * spec.nu,
            rhs: mass.iter().zip(prev).map(|(m, t)| m * t).collect(),
            mass,
            alpha,
            beta,
            prev,
            next,
        }
    }

    fn objective(&self, theta: &[f64]) -> f64 {
        let xi = cell_gradients(&self.grid, theta);
        let mut acc = 0.0;
        for c in 0..theta.len() {
            let d = theta[c] - self.prev[c];
            let r = euclid(&xi[c]);
            acc += 0.5 * self.mass[c] * d * d
                + self.alpha[c] * self.norm.profile(r)
                + self.nu2 * self.beta[c] * r * r;
        }
        acc
    }

    fn diffusivity(&self, c: usize, xi: &[f64; 2]) -> f64 {
        self.alpha[c] * self.norm.diffusivity(euclid(xi), R_FLOOR) + 2.0 * self.nu2 * self.beta[c]
    }

    /// `D^T q` for per-cell vectors `q` living on the faces each cell owns.
    fn div_t(&self, q: &[[f64; 2]], out: &mut [f64]) {
        let dx = self.grid.spacing();
        for (c, qc) in q.iter().enumerate() {
            for axis in 0..2 {
                if let Some(nb) = self.next[c][axis] {
                    let f = qc[axis] / dx[axis];
                    out[nb] += f;
                    out[c] -= f;
                }
            }
        }
    }

    fn gradient(&self, xi: &[[f64; 2]], theta: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = (0..theta.len())
            .map(|c| self.mass[c] * (theta[c] - self.prev[c]))
            .collect();
        let flux: Vec<[f64; 2]> = xi
            .iter()
            .enumerate()
            .map(|(c, x)| {
                let d = self.diffusivity(c, x);
                [d * x[0], d * x[1]]
            })
            .collect();
        self.div_t(&flux, &mut g);
        g
    }

    /// Quadratic majorizer of the objective at the current iterate.
    fn picard_matrix(&self, xi: &[[f64; 2]]) -> SymSparse {
        let mut m = SymSparse::with_diag(self.mass.clone());
        let dx = self.grid.spacing();
        for (c, x) in xi.iter().enumerate() {
            let d = self.diffusivity(c, x);
            for (nb, h) in self.next[c].iter().zip(dx) {
                if let Some(nb) = nb {
                    m.add_edge(c, *nb, d / (h * h));
                }
            }
        }
        m
    }

    /// `mass + D^T W D` for symmetric per-cell weights `W = [w00, w01, w11]`.
    fn assemble(&self, weights: &[[f64; 3]]) -> SymSparse {
        let mut m = SymSparse::with_diag(self.mass.clone());
        let dx = self.grid.spacing();
        for (c, w) in weights.iter().enumerate() {
            let wm = [[w[0], w[1]], [w[1], w[2]]];
            for k in 0..2 {
                let Some(nk) = self.next[c][k] else { continue };
                for l in 0..2 {
                    let Some(nl) = self.next[c][l] else { continue };
                    let coef = wm[k][l] / (dx[k] * dx[l]);
                    m.add(nk, nl, coef);
                    m.add(nk, c, -coef);
                    m.add(c, nl, -coef);
                    m.add(c, c, coef);
                }
            }
        }
        m
    }

    fn weights(&self, c: usize, hs: [f64; 3]) -> [f64; 3] {
        let q = 2.0 * self.nu2 * self.beta[c];
        let a = self.alpha[c];
        [a * hs[0] + q, a * hs[1], a * hs[2] + q]
    }

    /// Damped Newton; lagged-diffusivity step whenever the line search fails.
    fn solve_primal(&self, start: Vec<f64>, cap: usize, tol: f64) -> Result<Solved<Vec<f64>>, StepError> {
        let mut theta = start;
        let mut k = self.objective(&theta);
        let mut change = f64::INFINITY;
        let mut cand = vec![0.0; theta.len()];
        for it in 1..=cap {
            let xi = cell_gradients(&self.grid, &theta);
            let g = self.gradient(&xi, &theta);
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            let weights: Vec<[f64; 3]> = xi
                .iter()
                .enumerate()
                .map(|(c, x)| self.weights(c, self.norm.hessian2(*x, R_FLOOR)))
                .collect();
            let dir = self.assemble(&weights).solve(&neg, &neg)?;
            let slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
            let noise = 1e-14 * (1.0 + k.abs());
            let mut t = 1.0;
            let mut accepted = None;
            while t >= 1.0 / 64.0 && slope < 0.0 {
                for (c, (th, d)) in cand.iter_mut().zip(theta.iter().zip(&dir)) {
                    *c = th + t * d;
                }
                let kc = self.objective(&cand);
                if kc <= k + 1e-4 * t * slope + noise {
                    accepted = Some(kc);
                    break;
                }
                t *= 0.5;
            }
            k = match accepted {
                Some(kc) => kc,
                None => {
                    cand = self.picard_matrix(&xi).solve(&self.rhs, &theta)?;
                    self.objective(&cand)
                }
            };
            change = max_diff(&cand, &theta);
            std::mem::swap(&mut theta, &mut cand);
            // a Newton decrement below rounding noise cannot lower the objective
            if change <= tol || (accepted.is_some() && -0.5 * slope <= noise) {
                return Ok(Solved {
                    value: theta,
                    iterations: it,
                    residual: change,
                });
            }
        }
        Err(StepError::ThetaNotConverged {
            change,
            iterations: cap,
        })
    }

    /// Newton on the optimality system in `(theta, p)` written as
    /// `rho(|xi|) p = xi` with `rho(r) = r / phi'(r)`, which stays well
    /// conditioned as `sigma -> 0`; `p` is kept inside the dual domain.
    fn solve_primal_dual(&self, cap: usize, tol: f64) -> Result<Solved<Vec<f64>>, StepError> {
        let n = self.prev.len();
        let bound = self.norm.slope_bound().unwrap_or(f64::INFINITY);
        let mut theta = self.prev.to_vec();
        let mut p = vec![[0.0; 2]; n];
        let mut change = f64::INFINITY;
        for it in 1..=cap {
            let xi = cell_gradients(&self.grid, &theta);
            let g = self.gradient(&xi, &theta);
            let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
            // per cell: rho, the nonsymmetric dual Jacobian A and the residual
            let mut rho = vec![0.0; n];
            let mut jac = vec![[0.0; 4]; n];
            let mut consistency: f64 = 0.0;
            let weights: Vec<[f64; 3]> = (0..n)
                .map(|c| {
                    let x = xi[c];
                    let r = x[0].hypot(x[1]);
                    let (rh, mut d) = self.norm.dual_ratio(r.max(R_FLOOR));
                    rho[c] = rh;
                    let pc = p[c];
                    consistency = consistency
                        .max((rh * pc[0] - x[0]).abs())
                        .max((rh * pc[1] - x[1]).abs());
                    let pn = pc[0].hypot(pc[1]);
                    // keep the radial weight at least the curvature it has at
                    // consistency, so the matrix stays positive definite
                    let floor = self.norm.profile_curvature(r, R_FLOOR) * rh;
                    if 1.0 - d * pn < floor {
                        d = (1.0 - floor) / pn;
                    }
                    let e = if r > 0.0 { [x[0] / r, x[1] / r] } else { [0.0; 2] };
                    // A = (I - d p e^T) / rho
                    jac[c] = [
                        (1.0 - d * pc[0] * e[0]) / rh,
                        -d * pc[0] * e[1] / rh,
                        -d * pc[1] * e[0] / rh,
                        (1.0 - d * pc[1] * e[1]) / rh,
                    ];
                    let off = 0.5 * (jac[c][1] + jac[c][2]);
                    self.weights(c, [jac[c][0], off, jac[c][3]])
                })
                .collect();
            let dtheta = self.assemble(&weights).solve(&rhs, &rhs)?;
            let slope: f64 = dtheta.iter().zip(&g).map(|(a, b)| a * b).sum();
            let k = self.objective(&theta);
            let noise = 1e-14 * (1.0 + k.abs());
            let mut t = 1.0;
            let mut cand = vec![0.0; n];
            loop {
                for (c, (th, d)) in cand.iter_mut().zip(theta.iter().zip(&dtheta)) {
                    *c = th + t * d;
                }
                if t < 1.0 / 1024.0 || self.objective(&cand) <= k + 1e-4 * t * slope + noise {
                    break;
                }
                t *= 0.5;
            }
            let dtheta: Vec<f64> = dtheta.iter().map(|d| t * d).collect();
            theta = cand;
            let dxi = cell_gradients(&self.grid, &dtheta);
            let xi_new = cell_gradients(&self.grid, &theta);
            for c in 0..n {
                let (x, dx, a) = (xi[c], dxi[c], jac[c]);
                // p + t dp with dp = A dxi - (rho p - xi) / rho
                let full = [
                    (1.0 - t) * p[c][0] + a[0] * dx[0] + a[1] * dx[1] + t * x[0] / rho[c],
                    (1.0 - t) * p[c][1] + a[2] * dx[0] + a[3] * dx[1] + t * x[1] / rho[c],
                ];
                p[c] = if full[0].hypot(full[1]) < bound {
                    full
                } else {
                    // an infeasible dual update restarts from the primal value,
                    // at most halfway to the boundary
                    let xn = xi_new[c];
                    let r = xn[0].hypot(xn[1]);
                    let q = r / self.norm.dual_ratio(r.max(R_FLOOR)).0;
                    let cap = 0.5 * (bound + p[c][0].hypot(p[c][1]));
                    let k = if q > cap { cap / r } else { q / r };
                    [k * xn[0], k * xn[1]]
                };
            }
            if !theta.iter().all(|t| t.is_finite()) {
                break;
            }
            change = dtheta.iter().fold(0.0, |m, d| m.max(d.abs()));
            if change <= tol && consistency <= CONSISTENCY_TOL {
                return Ok(Solved {
                    value: theta,
                    iterations: it,
                    residual: change,
                });
            }
        }
        Err(StepError::ThetaNotConverged {
            change,
            iterations: cap,
        })
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// The v-functional with `theta_prev` frozen, on the stacked vector `[w, eta]`.
struct VProblem<'a> {
    spec: &'a ModelSpec,
    grid: Grid,
    h: f64,
    prev: Vec<f64>,
    u: &'a [f64],
    /// `|grad theta_prev|_sigma` per cell.
    tv: Vec<f64>,
    /// `nu^2 |grad theta_prev|^2` per cell.
    quad: Vec<f64>,
}

impl<'a> VProblem<'a> {
    fn new(
        spec: &'a ModelSpec,
        norm: &RegularizedNorm,
        h: f64,
        v_prev: &FieldPair,
        theta_prev: &Field,
        u: &'a Field,
    ) -> Self {
        let grid = *theta_prev.grid();
        let xi = cell_gradients(&grid, theta_prev.values());
        let nu2 = spec.nu * spec.nu;
        let mut prev = v_prev.w.values().to_vec();
        prev.extend_from_slice(v_prev.eta.values());
        Self {
            spec,
            grid,
            h,
            prev,
            u: u.values(),
            tv: xi.iter().map(|x| norm.profile(euclid(x))).collect(),
            quad: xi.iter().map(|x| nu2 * (x[0] * x[0] + x[1] * x[1])).collect(),
        }
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let n = self.grid.len();
        let (w, e) = x.split_at(n);
        let s = self.spec;
        let mut acc = 0.0;
        for c in 0..n {
            let (dw, de) = (w[c] - self.prev[c], e[c] - self.prev[n + c]);
            acc += (dw * dw + de * de) / (2.0 * self.h)
                + s.gamma.smooth(w[c])
                + s.g.value(w[c], e[c])
                + s.c * self.u[c] * w[c]
                + s.alpha.value(w[c], e[c]) * self.tv[c]
                + s.beta.value(w[c], e[c]) * self.quad[c];
        }
        let m = self.grid.cell_measure();
        acc * m
            + 0.5
                * (crate::energy::dirichlet_raw(&self.grid, w)
                    + crate::energy::dirichlet_raw(&self.grid, e))
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        let (w, e) = x.split_at(n);
        let s = self.spec;
        let mut out = minus_laplacian(&self.grid, w);
        out.extend(minus_laplacian(&self.grid, e));
        for c in 0..n {
            let gg = s.g.grad(w[c], e[c]);
            let ga = s.alpha.grad(w[c], e[c]);
            let gb = s.beta.grad(w[c], e[c]);
            out[c] += (w[c] - self.prev[c]) / self.h
                + s.gamma.smooth_slope(w[c])
                + gg[0]
                + s.c * self.u[c]
                + ga[0] * self.tv[c]
                + gb[0] * self.quad[c];
            out[n + c] += (e[c] - self.prev[n + c]) / self.h
                + gg[1]
                + ga[1] * self.tv[c]
                + gb[1] * self.quad[c];
        }
        out
    }

    fn unpack(&self, grid: Grid, x: Vec<f64>) -> FieldPair {
        let n = grid.len();
        let eta = x[n..].to_vec();
        let mut w = x;
        w.truncate(n);
        FieldPair {
            w: Field::from_raw(grid, w),
            eta: Field::from_raw(grid, eta),
        }
    }
}

pub fn v_step(
    v_prev: &FieldPair,
    theta_prev: &Field,
    u: &Field,
    h: f64,
    spec: &ModelSpec,
    norm: &Norm,
    tol: &Tolerances,
) -> Result<FieldPair, StepError> {
    Ok(Stepper::new(spec.clone(), norm, h, *tol)?
        .v_step(v_prev, theta_prev, u)?
        .value)
}

pub fn theta_step(
    v: &FieldPair,
    theta_prev: &Field,
    h: f64,
    spec: &ModelSpec,
    norm: &Norm,
    tol: &Tolerances,
) -> Result<Field, StepError> {
    let Norm::Smooth(reg) = norm else {
        return Err(StepError::ExactNorm);
    };
    if !(h > 0.0 && h.is_finite()) {
        return Err(StepError::BadStep(h));
    }
    // the theta-step is well posed for every h; skip the v-step bound
    let s = Stepper {
        spec: spec.clone(),
        norm: *reg,
        h,
        tol: *tol,
    };
    Ok(s.theta_step(v, theta_prev)?.value)
}

/// Failure during [`run`], with every completed step kept.
#[derive(Debug, Error)]
#[error("run stopped after {} steps: {error}", partial.steps())]
pub struct RunError {
    pub partial: Box<Trajectory>,
    pub error: StepError,
}

pub fn run(
    spec: &ModelSpec,
    initial: &InitialData,
    h: f64,
    steps: usize,
    norm: &Norm,
    tol: &Tolerances,
    mut hook: impl FnMut(&StepRecord),
) -> Result<Trajectory, RunError> {
    let grid = *initial.theta0.grid();
    let mut traj = Trajectory {
        spec: spec.clone(),
        grid,
        h,
        norm: *norm,
        records: Vec::with_capacity(steps + 1),
    };
    let fail = |traj: Trajectory, error: StepError| RunError {
        partial: Box::new(traj),
        error,
    };
    let stepper = match Stepper::new(spec.clone(), norm, h, *tol) {
        Ok(s) => s,
        Err(e) => return Err(fail(traj, e)),
    };
    if spec.source.grid() != &grid {
        return Err(fail(traj, GridError::Mismatch.into()));
    }
    match stepper.initial_record(initial) {
        Ok(r) => {
            hook(&r);
            traj.records.push(r);
        }
        Err(e) => return Err(fail(traj, e)),
    }
    for i in 1..=steps {
        let u = spec.source.sample(i, h);
        match stepper.step(traj.last(), u) {
            Ok(r) => {
                hook(&r);
                traj.records.push(r);
            }
            Err(e) => return Err(fail(traj, e)),
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolant {
    /// Right-continuous piecewise constant: value of step `i` on `((i-1)h, ih]`.
    Backward,
    /// Left-constant: value of step `i-1` on `[(i-1)h, ih)`.
    Forward,
    /// Piecewise affine through the nodes.
    Linear,
}

pub fn interpolate(
    traj: &Trajectory,
    t: f64,
    mode: Interpolant,
) -> Result<(FieldPair, Field), StepError> {
    let h = traj.h;
    let end = traj.steps() as f64 * h;
    if !(t >= 0.0 && t <= end * (1.0 + 1e-14)) {
        return Err(StepError::Inadmissible(format!(
            "time {t} outside [0, {end}]"
        )));
    }
    let k = t / h;
    let node = k.round();
    let rec = |i: usize| {
        let r = &traj.records[i.min(traj.steps())];
        (r.v.clone(), r.theta.clone())
    };
    if (k - node).abs() <= 1e-12 * node.max(1.0) {
        return Ok(rec(node as usize));
    }
    let i = k.ceil() as usize;
    Ok(match mode {
        Interpolant::Backward => rec(i),
        Interpolant::Forward => rec(i - 1),
        Interpolant::Linear => {
            let a = i as f64 - k; // weight of the earlier node
            let (v0, t0) = rec(i - 1);
            let (v1, t1) = rec(i);
            let blend = |x: &Field, y: &Field| x.map(|_| 0.0).axpy(a, x).and_then(|z| z.axpy(1.0 - a, y));
            (
                FieldPair {
                    w: blend(&v0.w, &v1.w)?,
                    eta: blend(&v0.eta, &v1.eta)?,
                },
                blend(&t0, &t1)?,
            )
        }
    })
}
