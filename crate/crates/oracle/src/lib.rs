//! Brute-force reference solvers for the two per-step minimization problems
//! and a central-difference gradient. Deliberately simple and slow: plain
//! (projected) gradient descent from several starts, with discrete
//! operators rebuilt here from cell coordinates rather than borrowed from
//! the solver under test.

use kwc_core::{Field, FieldPair, Grid, ModelSpec, Norm, RegularizedNorm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Largest grid the oracles accept.
pub const MAX_CELLS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("oracle grids are limited to {MAX_CELLS} cells, got {0}")]
    TooLarge(usize),
    #[error("the oracles need a regularized norm (sigma > 0)")]
    ExactNorm,
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("start {start} stalled with residual {residual:e} after {iterations} iterations")]
    NotConverged {
        start: usize,
        residual: f64,
        iterations: usize,
    },
    #[error("starts {a} and {b} converged to points {distance:e} apart (sup norm)")]
    Disagreement { a: usize, b: usize, distance: f64 },
    #[error("objective is not finite at or near the evaluation point")]
    NonFinite,
}

/// A certified minimizer: `certificate` is the sup norm of the (projected)
/// L2 gradient at `minimizer`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult<T> {
    pub minimizer: T,
    pub objective: f64,
    pub certificate: f64,
}

/// Forward-difference gradient operator rebuilt from cell coordinates.
struct Stencil {
    /// `(cell, neighbor, axis)` for every forward neighbor that exists.
    pairs: Vec<(usize, usize, usize)>,
    spacing: [f64; 2],
    measure: f64,
    n: usize,
}

impl Stencil {
    fn new(grid: &Grid) -> Result<Self, OracleError> {
        let n = grid.len();
        if n > MAX_CELLS {
            return Err(OracleError::TooLarge(n));
        }
        let shape = grid.shape();
        let ny = shape.get(1).copied().unwrap_or(1);
        let mut index = vec![usize::MAX; shape[0] * ny];
        for c in 0..n {
            let [i, j] = grid.coords(c);
            index[i * ny + j] = c;
        }
        let mut pairs = Vec::new();
        for c in 0..n {
            let [i, j] = grid.coords(c);
            if i + 1 < shape[0] {
                pairs.push((c, index[(i + 1) * ny + j], 0));
            }
            if grid.dim() == 2 && j + 1 < ny {
                pairs.push((c, index[i * ny + j + 1], 1));
            }
        }
        let sp = grid.spacing();
        Ok(Self {
            pairs,
            spacing: [sp[0], sp.get(1).copied().unwrap_or(1.0)],
            measure: grid.cell_measure(),
            n,
        })
    }

    /// Gradient vector owned by each cell; missing forward neighbors give 0.
    fn grad(&self, f: &[f64]) -> Vec<[f64; 2]> {
        let mut out = vec![[0.0; 2]; self.n];
        for &(c, nb, ax) in &self.pairs {
            out[c][ax] = (f[nb] - f[c]) / self.spacing[ax];
        }
        out
    }

    /// Adjoint of `grad` (unweighted): accumulates `sum_c q_c . (grad e_k)_c`.
    fn grad_transpose(&self, q: &[[f64; 2]]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for &(c, nb, ax) in &self.pairs {
            let s = q[c][ax] / self.spacing[ax];
            out[nb] += s;
            out[c] -= s;
        }
        out
    }

    fn dirichlet(&self, f: &[f64]) -> f64 {
        self.grad(f).iter().map(|x| x[0] * x[0] + x[1] * x[1]).sum::<f64>() * self.measure
    }
}

fn smooth_norm(norm: &Norm) -> Result<&RegularizedNorm, OracleError> {
    norm.smooth().ok_or(OracleError::ExactNorm)
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn same_grid(grid: &Grid, fields: &[&Field]) -> Result<(), OracleError> {
    if fields.iter().all(|f| f.grid() == grid) {
        Ok(())
    } else {
        Err(OracleError::GridMismatch)
    }
}

/// Merges independent runs: all must agree within `agree`; the one with the
/// lowest objective is returned.
fn merge(
    runs: Vec<Result<OracleResult<Vec<f64>>, OracleError>>,
    agree: f64,
) -> Result<OracleResult<Vec<f64>>, OracleError> {
    let runs: Vec<_> = runs.into_iter().collect::<Result<_, _>>()?;
    for a in 0..runs.len() {
        for b in a + 1..runs.len() {
            let distance = sup_dist(&runs[a].minimizer, &runs[b].minimizer);
            // NaN distances count as disagreement
            if distance.is_nan() || distance > agree {
                return Err(OracleError::Disagreement { a, b, distance });
            }
        }
    }
    Ok(runs
        .into_iter()
        .min_by(|x, y| x.objective.total_cmp(&y.objective))
        .expect("at least one start"))
}

/// Runs `solve` for every start on its own thread.
fn multistart(
    starts: Vec<Vec<f64>>,
    solve: impl Fn(usize, Vec<f64>) -> Result<OracleResult<Vec<f64>>, OracleError> + Sync,
) -> Vec<Result<OracleResult<Vec<f64>>, OracleError>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = starts
            .into_iter()
            .enumerate()
            .map(|(k, x)| {
                let solve = &solve;
                s.spawn(move || solve(k, x))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("oracle start panicked"))
            .collect()
    })
}

struct ThetaObjective<'a> {
    st: Stencil,
    h: f64,
    nu2: f64,
    norm: &'a RegularizedNorm,
    prev: &'a [f64],
    a0: Vec<f64>,
    al: Vec<f64>,
    be: Vec<f64>,
}

impl<'a> ThetaObjective<'a> {
    fn new(
        v: &FieldPair,
        theta_prev: &'a Field,
        h: f64,
        spec: &ModelSpec,
        norm: &'a Norm,
    ) -> Result<Self, OracleError> {
        let grid = theta_prev.grid();
        same_grid(grid, &[&v.w, &v.eta])?;
        let (w, e) = (v.w.values(), v.eta.values());
        let at = |p: &kwc_core::model::BiPoly| -> Vec<f64> {
            w.iter().zip(e).map(|(a, b)| p.value(*a, *b)).collect()
        };
        Ok(Self {
            st: Stencil::new(grid)?,
            h,
            nu2: spec.nu * spec.nu,
            norm: smooth_norm(norm)?,
            prev: theta_prev.values(),
            a0: at(&spec.alpha0),
            al: at(&spec.alpha),
            be: at(&spec.beta),
        })
    }

    fn value(&self, th: &[f64]) -> f64 {
        let xi = self.st.grad(th);
        let mut acc = 0.0;
        for c in 0..self.st.n {
            let d = th[c] - self.prev[c];
            let r2 = xi[c][0] * xi[c][0] + xi[c][1] * xi[c][1];
            acc += self.a0[c] * d * d / (2.0 * self.h)
                + self.al[c] * self.norm.profile(r2.sqrt())
                + self.nu2 * self.be[c] * r2;
        }
        acc * self.st.measure
    }

    /// L2 gradient (per-cell derivative divided by the cell measure).
    fn gradient(&self, th: &[f64]) -> Vec<f64> {
        let xi = self.st.grad(th);
        let q: Vec<[f64; 2]> = (0..self.st.n)
            .map(|c| {
                let dn = self.norm.gradient(&xi[c]);
                let mut out = [0.0; 2];
                for (k, o) in out.iter_mut().enumerate() {
                    *o = self.al[c] * dn.get(k).copied().unwrap_or(0.0)
                        + 2.0 * self.nu2 * self.be[c] * xi[c][k];
                }
                out
            })
            .collect();
        let mut g = self.st.grad_transpose(&q);
        for c in 0..self.st.n {
            g[c] += self.a0[c] * (th[c] - self.prev[c]) / self.h;
        }
        g
    }
}

/// Objective of the orientation step,
/// `(1/2h)(alpha0(v)(theta - theta_prev), theta - theta_prev) + Phi(v; theta)`.
pub fn theta_objective(
    v: &FieldPair,
    theta_prev: &Field,
    theta: &Field,
    h: f64,
    spec: &ModelSpec,
    norm: &Norm,
) -> Result<f64, OracleError> {
    same_grid(theta_prev.grid(), &[theta])?;
    Ok(ThetaObjective::new(v, theta_prev, h, spec, norm)?.value(theta.values()))
}

const THETA_CERT: f64 = 1e-10;
const THETA_AGREE: f64 = 1e-8;
const MAX_ITER: usize = 2_000_000;

/// Gradient descent with Barzilai-Borwein trial steps and monotone Armijo
/// backtracking.
fn descend(
    start: usize,
    mut x: Vec<f64>,
    value: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64]) -> Vec<f64>,
    project: impl Fn(f64) -> f64,
    certificate: f64,
) -> Result<OracleResult<Vec<f64>>, OracleError> {
    x.iter_mut().for_each(|t| *t = project(*t));
    let mut f = value(&x);
    let mut g = gradient(&x);
    let mut tau = 1e-3;
    let residual = |x: &[f64], g: &[f64]| -> f64 {
        x.iter()
            .zip(g)
            .map(|(a, b)| (a - project(a - b)).abs())
            .fold(0.0, f64::max)
    };
    let mut stalls = 0;
    for it in 0..MAX_ITER {
        let res = residual(&x, &g);
        if !res.is_finite() || !f.is_finite() {
            return Err(OracleError::NonFinite);
        }
        if res <= certificate {
            return Ok(OracleResult {
                minimizer: x,
                objective: f,
                certificate: res,
            });
        }
        let mut t = tau;
        let (xn, fn_) = loop {
            let xn: Vec<f64> = x.iter().zip(&g).map(|(a, b)| project(a - t * b)).collect();
            // sufficient decrease measured along the projection arc
            let decrease: f64 = x.iter().zip(&xn).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t;
            let fn_ = value(&xn);
            let noise = 1e-15 * (1.0 + f.abs());
            if fn_ <= f - 1e-4 * decrease + noise {
                break (xn, fn_);
            }
            t *= 0.5;
            if t < 1e-300 {
                return Err(OracleError::NotConverged {
                    start,
                    residual: res,
                    iterations: it,
                });
            }
        };
        let gn = gradient(&xn);
        let (mut ss, mut sy) = (0.0, 0.0);
        for k in 0..x.len() {
            let s = xn[k] - x[k];
            ss += s * s;
            sy += s * (gn[k] - g[k]);
        }
        if ss == 0.0 {
            // rounding floor reached without meeting the certificate
            stalls += 1;
            if stalls > 50 {
                return Err(OracleError::NotConverged {
                    start,
                    residual: res,
                    iterations: it,
                });
            }
        }
        tau = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e6) } else { t * 2.0 };
        x = xn;
        f = fn_;
        g = gn;
    }
    Err(OracleError::NotConverged {
        start,
        residual: residual(&x, &g),
        iterations: MAX_ITER,
    })
}

/// Minimizes the orientation-step objective from five starts: `theta_prev`,
/// the constants `min`, `max` and `mean` of `theta_prev`, and zero.
pub fn oracle_theta_step(
    v: &FieldPair,
    theta_prev: &Field,
    h: f64,
    spec: &ModelSpec,
    norm: &Norm,
) -> Result<OracleResult<Field>, OracleError> {
    let obj = ThetaObjective::new(v, theta_prev, h, spec, norm)?;
    let p = theta_prev.values();
    let n = p.len();
    let mean = p.iter().sum::<f64>() / n as f64;
    let starts = vec![
        p.to_vec(),
        vec![theta_prev.min(); n],
        vec![theta_prev.max(); n],
        vec![mean; n],
        vec![0.0; n],
    ];
    let runs = multistart(starts, |k, x| {
        descend(k, x, |t| obj.value(t), |t| obj.gradient(t), |t| t, THETA_CERT)
    });
    let best = merge(runs, THETA_AGREE)?;
    Ok(OracleResult {
        minimizer: Field::new(*theta_prev.grid(), best.minimizer).map_err(|_| OracleError::GridMismatch)?,
        objective: best.objective,
        certificate: best.certificate,
    })
}

struct VObjective<'a> {
    st: Stencil,
    spec: &'a ModelSpec,
    h: f64,
    prev: Vec<f64>,
    u: &'a [f64],
    tv: Vec<f64>,
    quad: Vec<f64>,
}

impl<'a> VObjective<'a> {
    fn new(
        v_prev: &FieldPair,
        theta_prev: &Field,
        u: &'a Field,
        h: f64,
        spec: &'a ModelSpec,
        norm: &Norm,
    ) -> Result<Self, OracleError> {
        let grid = theta_prev.grid();
        same_grid(grid, &[&v_prev.w, &v_prev.eta, u])?;
        let st = Stencil::new(grid)?;
        let norm = smooth_norm(norm)?;
        let xi = st.grad(theta_prev.values());
        let nu2 = spec.nu * spec.nu;
        let mut prev = v_prev.w.values().to_vec();
        prev.extend_from_slice(v_prev.eta.values());
        Ok(Self {
            tv: xi.iter().map(|x| norm.profile(x[0].hypot(x[1]))).collect(),
            quad: xi.iter().map(|x| nu2 * (x[0] * x[0] + x[1] * x[1])).collect(),
            st,
            spec,
            h,
            prev,
            u: u.values(),
        })
    }

    fn value(&self, x: &[f64]) -> f64 {
        let n = self.st.n;
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
        acc * self.st.measure + 0.5 * (self.st.dirichlet(w) + self.st.dirichlet(e))
    }

    /// L2 gradient.
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let n = self.st.n;
        let (w, e) = x.split_at(n);
        let s = self.spec;
        let lap = |f: &[f64]| self.st.grad_transpose(&self.st.grad(f));
        let mut out = lap(w);
        out.extend(lap(e));
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
}

/// Objective of the phase step (smooth part; the box constraint is separate).
pub fn v_objective(
    v_prev: &FieldPair,
    theta_prev: &Field,
    u: &Field,
    v: &FieldPair,
    h: f64,
    spec: &ModelSpec,
    norm: &Norm,
) -> Result<f64, OracleError> {
    same_grid(theta_prev.grid(), &[&v.w, &v.eta])?;
    let obj = VObjective::new(v_prev, theta_prev, u, h, spec, norm)?;
    let mut x = v.w.values().to_vec();
    x.extend_from_slice(v.eta.values());
    Ok(obj.value(&x))
}

const V_CERT: f64 = 1e-10;
const V_AGREE: f64 = 1e-6;
const V_RANDOM_STARTS: usize = 16;

/// Projected gradient descent on the unit box from `v_prev` and 16 random
/// starts drawn from `seed`.
pub fn oracle_v_step(
    v_prev: &FieldPair,
    theta_prev: &Field,
    u: &Field,
    h: f64,
    spec: &ModelSpec,
    norm: &Norm,
    seed: u64,
) -> Result<OracleResult<FieldPair>, OracleError> {
    let obj = VObjective::new(v_prev, theta_prev, u, h, spec, norm)?;
    let n = obj.st.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![obj.prev.clone()];
    for _ in 0..V_RANDOM_STARTS {
        starts.push((0..2 * n).map(|_| rng.gen_range(0.0..=1.0)).collect());
    }
    let runs = multistart(starts, |k, x| {
        descend(
            k,
            x,
            |t| obj.value(t),
            |t| obj.gradient(t),
            |t| t.clamp(0.0, 1.0),
            V_CERT,
        )
    });
    let best = merge(runs, V_AGREE)?;
    let grid = *theta_prev.grid();
    let (w, e) = best.minimizer.split_at(n);
    let field = |x: &[f64]| Field::new(grid, x.to_vec()).map_err(|_| OracleError::GridMismatch);
    Ok(OracleResult {
        minimizer: FieldPair::new(field(w)?, field(e)?).map_err(|_| OracleError::GridMismatch)?,
        objective: best.objective,
        certificate: best.certificate,
    })
}

/// Central differences `(f(x + eps e_k) - f(x - eps e_k)) / (2 eps)` for
/// every coordinate.
pub fn fd_gradient(
    objective: impl Fn(&[f64]) -> f64,
    point: &[f64],
    eps: f64,
) -> Result<Vec<f64>, OracleError> {
    if !objective(point).is_finite() {
        return Err(OracleError::NonFinite);
    }
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for k in 0..point.len() {
        x[k] = point[k] + eps;
        let fp = objective(&x);
        x[k] = point[k] - eps;
        let fm = objective(&x);
        x[k] = point[k];
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(OracleError::NonFinite);
        }
        out.push((fp - fm) / (2.0 * eps));
    }
    Ok(out)
}
