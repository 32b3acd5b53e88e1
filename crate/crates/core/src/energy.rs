//! Discrete free energies, weighted total variations and their gradients.

use thiserror::Error;

use crate::grid::{Field, FieldPair, Grid, GridError};
use crate::model::ModelSpec;
use crate::regnorm::{euclid, Norm};
use crate::stepper::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("weight is negative at cell {0}")]
    NegativeWeight(usize),
    #[error("gradient of the exact norm is undefined; use a regularized norm")]
    ExactNormGradient,
    #[error("trajectory carries no source history")]
    MissingSources,
}

/// Parts of the free energy. `total` excludes `coupling`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub dirichlet_v: f64,
    pub potential_gamma: f64,
    pub interaction_g: f64,
    pub weighted_tv: f64,
    pub theta_dirichlet: f64,
    pub total: f64,
    pub coupling: Option<f64>,
    /// False when `(w, eta)` leaves the unit box; the total is then `+inf`.
    pub admissible: bool,
}

/// Per-cell gradient vectors built from the faces each cell owns.
pub(crate) fn cell_gradients(grid: &Grid, f: &[f64]) -> Vec<[f64; 2]> {
    let mut faces = vec![0.0; grid.face_count()];
    grid.face_gradient_raw(f, &mut faces);
    let mut out = vec![[0.0; 2]; grid.len()];
    grid.cell_vectors_raw(&faces, &mut out);
    out
}

fn check(grid: &Grid, f: &Field) -> Result<(), GridError> {
    if f.grid() == grid {
        Ok(())
    } else {
        Err(GridError::Mismatch)
    }
}

/// `sum_c |grad theta|^2 * m` — the face Dirichlet integral.
pub(crate) fn dirichlet_raw(grid: &Grid, f: &[f64]) -> f64 {
    cell_gradients(grid, f)
        .iter()
        .map(|x| x[0] * x[0] + x[1] * x[1])
        .sum::<f64>()
        * grid.cell_measure()
}

/// Weighted TV plus the quadratic term, both at each cell.
pub fn phi(
    spec: &ModelSpec,
    v: &FieldPair,
    theta: &Field,
    nu: f64,
    norm: &Norm,
) -> Result<f64, EnergyError> {
    let (tv, quad) = phi_parts(spec, v, theta, nu, norm)?;
    Ok(tv + quad)
}

fn phi_parts(
    spec: &ModelSpec,
    v: &FieldPair,
    theta: &Field,
    nu: f64,
    norm: &Norm,
) -> Result<(f64, f64), EnergyError> {
    let grid = *theta.grid();
    check(&grid, &v.w)?;
    check(&grid, &v.eta)?;
    let xi = cell_gradients(&grid, theta.values());
    let (mut tv, mut quad) = (0.0, 0.0);
    for (c, x) in xi.iter().enumerate() {
        let (w, e) = (v.w.values()[c], v.eta.values()[c]);
        let r = euclid(x);
        tv += spec.alpha.value(w, e) * norm.profile(r);
        quad += spec.beta.value(w, e) * r * r;
    }
    let m = grid.cell_measure();
    Ok((tv * m, nu * nu * quad * m))
}

pub fn free_energy(
    spec: &ModelSpec,
    v: &FieldPair,
    theta: &Field,
    norm: &Norm,
) -> Result<EnergyBreakdown, EnergyError> {
    let grid = *theta.grid();
    let (weighted_tv, theta_dirichlet) = phi_parts(spec, v, theta, spec.nu, norm)?;
    let m = grid.cell_measure();
    let dirichlet_v =
        0.5 * (dirichlet_raw(&grid, v.w.values()) + dirichlet_raw(&grid, v.eta.values()));
    let admissible = v.in_unit_box();
    let (mut gam, mut gg) = (0.0, 0.0);
    for (&w, &e) in v.w.values().iter().zip(v.eta.values()) {
        gam += spec.gamma.smooth(w);
        gg += spec.g.value(w, e);
    }
    let potential_gamma = if admissible { gam * m } else { f64::INFINITY };
    let interaction_g = gg * m;
    Ok(EnergyBreakdown {
        dirichlet_v,
        potential_gamma,
        interaction_g,
        weighted_tv,
        theta_dirichlet,
        total: dirichlet_v + potential_gamma + interaction_g + weighted_tv + theta_dirichlet,
        coupling: None,
        admissible,
    })
}

/// Free energy plus `c (u, w)`.
pub fn gibbs_energy(
    spec: &ModelSpec,
    u: &Field,
    v: &FieldPair,
    theta: &Field,
    norm: &Norm,
) -> Result<f64, EnergyError> {
    let f = free_energy(spec, v, theta, norm)?;
    Ok(f.total + spec.c * theta.grid().inner(u, &v.w)?)
}

pub fn weighted_tv(rho: &Field, theta: &Field, norm: &Norm) -> Result<f64, EnergyError> {
    if let Some(c) = rho.values().iter().position(|&r| r < 0.0) {
        return Err(EnergyError::NegativeWeight(c));
    }
    signed_weighted_tv(rho, theta, norm)
}

/// `weighted_tv(rho+) - weighted_tv(rho-)`, which is linear in `rho`.
pub fn signed_weighted_tv(rho: &Field, theta: &Field, norm: &Norm) -> Result<f64, EnergyError> {
    let grid = *theta.grid();
    check(&grid, rho)?;
    let xi = cell_gradients(&grid, theta.values());
    Ok(xi
        .iter()
        .zip(rho.values())
        .map(|(x, r)| r * norm.profile(euclid(x)))
        .sum::<f64>()
        * grid.cell_measure())
}

/// `J_i = F_i + c (u_dag, w_i) - c^2 sum_{k<=i} h |u_k - u_dag|^2`.
pub fn lyapunov(traj: &Trajectory, u_dagger: &Field) -> Result<Vec<f64>, EnergyError> {
    if traj.records.len() > 1 && traj.records[1..].iter().any(|r| r.u.is_none()) {
        return Err(EnergyError::MissingSources);
    }
    let grid = traj.grid;
    check(&grid, u_dagger)?;
    let (c, h) = (traj.spec.c, traj.h);
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(traj.records.len());
    for (i, r) in traj.records.iter().enumerate() {
        if i > 0 {
            let u = r.u.as_ref().expect("checked above");
            let d = u.axpy(-1.0, u_dagger)?;
            acc += h * grid.inner(&d, &d)?;
        }
        out.push(r.energy.total + c * grid.inner(u_dagger, &r.v.w)? - c * c * acc);
    }
    Ok(out)
}

/// L2 gradients of the smooth part of the free energy (the indicator is
/// left out) with respect to `(w, eta)` and `theta`.
pub fn energy_gradient(
    spec: &ModelSpec,
    v: &FieldPair,
    theta: &Field,
    norm: &Norm,
) -> Result<(FieldPair, Field), EnergyError> {
    let Norm::Smooth(reg) = norm else {
        return Err(EnergyError::ExactNormGradient);
    };
    let grid = *theta.grid();
    check(&grid, &v.w)?;
    check(&grid, &v.eta)?;
    let n = grid.len();
    let nu2 = spec.nu * spec.nu;
    let xi = cell_gradients(&grid, theta.values());

    let mut gw = minus_laplacian(&grid, v.w.values());
    let mut ge = minus_laplacian(&grid, v.eta.values());
    let mut flux = vec![[0.0; 2]; n];
    for c in 0..n {
        let (w, e) = (v.w.values()[c], v.eta.values()[c]);
        let r = euclid(&xi[c]);
        let a = spec.alpha.grad(w, e);
        let b = spec.beta.grad(w, e);
        let g = spec.g.grad(w, e);
        let tv = reg.profile(r);
        gw[c] += g[0] + spec.gamma.smooth_slope(w) + a[0] * tv + nu2 * b[0] * r * r;
        ge[c] += g[1] + a[1] * tv + nu2 * b[1] * r * r;

        let dn = reg.gradient(&xi[c]);
        let (al, be) = (spec.alpha.value(w, e), spec.beta.value(w, e));
        for k in 0..2 {
            flux[c][k] = al * dn.get(k).copied().unwrap_or(0.0) + 2.0 * nu2 * be * xi[c][k];
        }
    }
    let mut faces = vec![0.0; grid.face_count()];
    grid.cell_flux_to_faces_raw(&flux, &mut faces);
    let mut gt = vec![0.0; n];
    grid.face_divergence_raw(&faces, &mut gt);
    gt.iter_mut().for_each(|x| *x = -*x);
    Ok((
        FieldPair {
            w: Field::from_raw(grid, gw),
            eta: Field::from_raw(grid, ge),
        },
        Field::from_raw(grid, gt),
    ))
}

pub(crate) fn minus_laplacian(grid: &Grid, f: &[f64]) -> Vec<f64> {
    let mut faces = vec![0.0; grid.face_count()];
    grid.face_gradient_raw(f, &mut faces);
    let mut out = vec![0.0; grid.len()];
    grid.face_divergence_raw(&faces, &mut out);
    out.iter_mut().for_each(|x| *x = -*x);
    out
}
