//! Model functions, assumption checks, derived constants and source data.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{Field, FieldPair, Grid, GridError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model violates its assumptions: {0}")]
    Invalid(String),
    #[error("initial data outside the admissible class: {0}")]
    BadInitialData(String),
    #[error("source table is not ordered by start time")]
    UnorderedSource,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// `sum_k coef_k * w^a_k * eta^b_k` with analytic derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct BiPoly {
    terms: Vec<(f64, u32, u32)>,
}

fn pow(x: f64, k: u32) -> f64 {
    x.powi(k as i32)
}

impl BiPoly {
    pub fn new(terms: Vec<(f64, u32, u32)>) -> Self {
        Self { terms }
    }

    pub fn constant(k: f64) -> Self {
        Self::new(vec![(k, 0, 0)])
    }

    /// `offset + eta^2`
    pub fn offset_eta_sq(offset: f64) -> Self {
        Self::new(vec![(offset, 0, 0), (1.0, 0, 2)])
    }

    /// `scale * (w - eta)^2 / 2`
    pub fn half_sq_diff(scale: f64) -> Self {
        Self::new(vec![(0.5 * scale, 2, 0), (-scale, 1, 1), (0.5 * scale, 0, 2)])
    }

    /// `(w - eta)^2 / 2 - c w^2 / 2`; negative somewhere in the unit square for `c > 0`.
    pub fn kwc_relaxed(c: f64) -> Self {
        Self::new(vec![(0.5 - 0.5 * c, 2, 0), (-1.0, 1, 1), (0.5, 0, 2)])
    }

    pub fn value(&self, w: f64, e: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(c, a, b)| c * pow(w, a) * pow(e, b))
            .sum()
    }

    /// `[d/dw, d/deta]`
    pub fn grad(&self, w: f64, e: f64) -> [f64; 2] {
        let mut g = [0.0; 2];
        for &(c, a, b) in &self.terms {
            if a > 0 {
                g[0] += c * a as f64 * pow(w, a - 1) * pow(e, b);
            }
            if b > 0 {
                g[1] += c * b as f64 * pow(w, a) * pow(e, b - 1);
            }
        }
        g
    }

    /// `[d2/dw2, d2/dw deta, d2/deta2]`
    pub fn hessian(&self, w: f64, e: f64) -> [f64; 3] {
        let mut h = [0.0; 3];
        for &(c, a, b) in &self.terms {
            let (af, bf) = (a as f64, b as f64);
            if a > 1 {
                h[0] += c * af * (af - 1.0) * pow(w, a - 2) * pow(e, b);
            }
            if a > 0 && b > 0 {
                h[1] += c * af * bf * pow(w, a - 1) * pow(e, b - 1);
            }
            if b > 1 {
                h[2] += c * bf * (bf - 1.0) * pow(w, a) * pow(e, b - 2);
            }
        }
        h
    }

    fn scaled(&self, s: f64) -> Self {
        Self::new(self.terms.iter().map(|&(c, a, b)| (s * c, a, b)).collect())
    }
}

impl fmt::Display for BiPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|&(c, a, b)| match (a, b) {
                (0, 0) => format!("{c}"),
                (a, 0) => format!("{c}*w^{a}"),
                (0, b) => format!("{c}*eta^{b}"),
                (a, b) => format!("{c}*w^{a}*eta^{b}"),
            })
            .collect();
        f.write_str(&parts.join(" + "))
    }
}

/// `gamma = (k/2) w^2 + indicator of [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gamma {
    pub quadratic: f64,
}

impl Gamma {
    pub const INDICATOR: Gamma = Gamma { quadratic: 0.0 };

    pub fn smooth(&self, w: f64) -> f64 {
        0.5 * self.quadratic * w * w
    }

    pub fn smooth_slope(&self, w: f64) -> f64 {
        self.quadratic * w
    }

    /// Full potential including the indicator.
    pub fn value(&self, w: f64) -> f64 {
        if (0.0..=1.0).contains(&w) {
            self.smooth(w)
        } else {
            f64::INFINITY
        }
    }
}

/// Piecewise-constant-in-time source, zero outside `[0, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    segments: Vec<(f64, Field)>,
    end: f64,
    u_infinity: Option<Field>,
}

impl Source {
    pub fn constant(field: Field) -> Self {
        Self {
            segments: vec![(0.0, field)],
            end: f64::INFINITY,
            u_infinity: None,
        }
    }

    pub fn zero(grid: Grid) -> Self {
        Self::constant(Field::zeros(grid)).with_u_infinity(Field::zeros(grid))
    }

    /// Segment `k` covers `[start_k, start_{k+1})`; the last one runs up to `end`.
    pub fn table(segments: Vec<(f64, Field)>, end: f64) -> Result<Self, ModelError> {
        if segments.is_empty()
            || segments.windows(2).any(|p| !(p[0].0 < p[1].0))
            || !(segments.last().map(|s| s.0 < end).unwrap_or(false))
        {
            return Err(ModelError::UnorderedSource);
        }
        let g = *segments[0].1.grid();
        if segments.iter().any(|s| *s.1.grid() != g) {
            return Err(GridError::Mismatch.into());
        }
        Ok(Self {
            segments,
            end,
            u_infinity: None,
        })
    }

    pub fn with_u_infinity(mut self, u: Field) -> Self {
        self.u_infinity = Some(u);
        self
    }

    pub fn grid(&self) -> &Grid {
        self.segments[0].1.grid()
    }

    pub fn u_infinity(&self) -> Option<&Field> {
        self.u_infinity.as_ref()
    }

    /// `u_infinity` if given, zero otherwise.
    pub fn u_dagger(&self) -> Field {
        self.u_infinity
            .clone()
            .unwrap_or_else(|| Field::zeros(*self.grid()))
    }

    pub fn segments(&self) -> &[(f64, Field)] {
        &self.segments
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    /// Exact time average of the zero-extended source over `((i-1)h, ih]`.
    pub fn sample(&self, i: usize, h: f64) -> Field {
        let grid = *self.grid();
        let (t0, t1) = ((i as f64 - 1.0) * h, i as f64 * h);
        let mut acc = vec![0.0; grid.len()];
        for (k, (start, field)) in self.segments.iter().enumerate() {
            let stop = self.segments.get(k + 1).map(|s| s.0).unwrap_or(self.end);
            let lo = start.max(t0).max(0.0);
            let hi = stop.min(t1);
            if hi > lo {
                let wgt = (hi - lo) / h;
                for (a, v) in acc.iter_mut().zip(field.values()) {
                    *a += wgt * v;
                }
            }
        }
        Field::from_raw(grid, acc)
    }

    /// Whether `u - u_infinity` is square integrable on `(0, inf)`, i.e. the
    /// table eventually equals `u_infinity`.
    pub fn settles(&self) -> bool {
        let Some(u_inf) = &self.u_infinity else {
            return false;
        };
        let tail = if self.end.is_finite() {
            Field::zeros(*self.grid())
        } else {
            self.segments.last().unwrap().1.clone()
        };
        tail.values()
            .iter()
            .zip(u_inf.values())
            .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub c: f64,
    pub nu: f64,
    pub delta_star: f64,
    pub gamma: Gamma,
    pub g: BiPoly,
    pub alpha0: BiPoly,
    pub alpha: BiPoly,
    pub beta: BiPoly,
    pub source: Source,
    /// Lets the interaction potential violate positivity (A4).
    pub relaxed: bool,
}

impl ModelSpec {
    /// `gamma` = indicator, `g = (w - eta)^2 / 2`, `alpha0 = 1`,
    /// `alpha = 0.1 + eta^2`, `beta = 1`, `delta_* = 0.1`, `c = 1`, `nu = 0.1`,
    /// zero source.
    pub fn default_on(grid: Grid) -> Self {
        let delta_star = 0.1;
        Self {
            c: 1.0,
            nu: 0.1,
            delta_star,
            gamma: Gamma::INDICATOR,
            g: BiPoly::half_sq_diff(1.0),
            alpha0: BiPoly::constant(1.0),
            alpha: BiPoly::offset_eta_sq(delta_star),
            beta: BiPoly::constant(1.0),
            source: Source::zero(grid),
            relaxed: false,
        }
    }

    /// Uses `g = (w - eta)^2/2 - c w^2/2`, which needs the relaxed flag.
    pub fn kwc_relaxed_on(grid: Grid, c: f64) -> Self {
        Self {
            c,
            g: BiPoly::kwc_relaxed(c),
            relaxed: true,
            ..Self::default_on(grid)
        }
    }

    pub fn with_g_scale(mut self, s: f64) -> Self {
        self.g = self.g.scaled(s);
        self
    }

    pub fn validate(&self, samples_per_axis: usize) -> ValidationReport {
        validate(self, samples_per_axis)
    }

    pub fn step_bound(&self) -> Result<f64, ModelError> {
        step_bound(self)
    }
}

/// Points of `[0,1]` sampled by every uniform lattice with `16..=n` points, so
/// a finer request always contains every coarser one.
fn nested_samples(n: usize) -> Vec<f64> {
    let mut pts: Vec<f64> = Vec::new();
    for m in 16..=n.max(16) {
        for k in 0..m {
            pts.push(k as f64 / (m - 1) as f64);
        }
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    pts
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionCheck {
    pub name: &'static str,
    /// Largest sampled violation; `<= 0` means satisfied.
    pub worst_violation: f64,
    pub at: [f64; 2],
    /// Waived by the relaxed-assumptions flag.
    pub waived: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub const TOLERANCE: f64 = 1e-12;

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks
            .iter()
            .filter(|c| !c.waived && !(c.worst_violation <= Self::TOLERANCE))
    }

    pub fn into_result(self) -> Result<Self, ModelError> {
        if self.passed() {
            return Ok(self);
        }
        {
            Err(ModelError::Invalid(
                self.failures()
                    .map(|c| format!("{} (worst {:.3e} at {:?})", c.name, c.worst_violation, c.at))
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.worst_violation <= Self::TOLERANCE {
                "ok"
            } else if c.waived {
                "waived"
            } else {
                "FAIL"
            };
            writeln!(f, "{:<40} {:>12.4e}  {}", c.name, c.worst_violation, status)?;
        }
        Ok(())
    }
}

fn min_eig(h: [f64; 3]) -> f64 {
    let tr = 0.5 * (h[0] + h[2]);
    let d = (0.25 * (h[0] - h[2]).powi(2) + h[1] * h[1]).sqrt();
    tr - d
}

pub fn validate(spec: &ModelSpec, samples_per_axis: usize) -> ValidationReport {
    let pts = nested_samples(samples_per_axis);
    let mut checks: Vec<AssumptionCheck> = Vec::new();
    let mut rec = |name: &'static str, viol: f64, at: [f64; 2], waivable: bool| {
        match checks.iter_mut().find(|c| c.name == name) {
            Some(c) => {
                if viol > c.worst_violation {
                    c.worst_violation = viol;
                    c.at = at;
                }
            }
            None => checks.push(AssumptionCheck {
                name,
                worst_violation: viol,
                at,
                waived: waivable && spec.relaxed,
            }),
        }
    };
    let ds = spec.delta_star;
    rec(
        "A2: delta_star in (0,1)",
        if ds > 0.0 && ds < 1.0 { -ds.min(1.0 - ds) } else { 1.0 },
        [0.0; 2],
        false,
    );
    rec(
        "A3: gamma smooth part convex",
        -spec.gamma.quadratic,
        [0.0; 2],
        false,
    );
    for &w in &pts {
        for &e in &pts {
            let at = [w, e];
            rec("A2: alpha0 >= delta_star", ds - spec.alpha0.value(w, e), at, false);
            rec("A2: alpha >= delta_star", ds - spec.alpha.value(w, e), at, false);
            rec("A2: beta >= delta_star", ds - spec.beta.value(w, e), at, false);
            rec("A2: alpha convex", -min_eig(spec.alpha.hessian(w, e)), at, false);
            rec("A2: beta convex", -min_eig(spec.beta.hessian(w, e)), at, false);
            rec("A4: g >= 0", -spec.g.value(w, e), at, true);
        }
        rec("A2: alpha_eta(w,0) <= 0", spec.alpha.grad(w, 0.0)[1], [w, 0.0], false);
        rec("A2: alpha_eta(w,1) >= 0", -spec.alpha.grad(w, 1.0)[1], [w, 1.0], false);
        rec("A2: beta_eta(w,0) <= 0", spec.beta.grad(w, 0.0)[1], [w, 0.0], false);
        rec("A2: beta_eta(w,1) >= 0", -spec.beta.grad(w, 1.0)[1], [w, 1.0], false);
        rec("A4: g_eta(w,0) <= 0", spec.g.grad(w, 0.0)[1], [w, 0.0], true);
        rec("A4: g_eta(w,1) >= 0", -spec.g.grad(w, 1.0)[1], [w, 1.0], true);
    }
    ValidationReport { checks }
}

/// Sample lattice used for sup-norms.
pub const NORM_SAMPLES: usize = 64;

fn lattice(n: usize) -> impl Iterator<Item = (f64, f64)> {
    (0..n).flat_map(move |i| {
        (0..n).map(move |j| (i as f64 / (n - 1) as f64, j as f64 / (n - 1) as f64))
    })
}

/// `sup |f|` over the sample lattice.
fn sup0(p: &BiPoly) -> f64 {
    lattice(NORM_SAMPLES).fold(0.0, |m, (w, e)| m.max(p.value(w, e).abs()))
}

/// `max(sup |f|, sup |f_w|, sup |f_eta|)`.
fn sup1(p: &BiPoly) -> f64 {
    lattice(NORM_SAMPLES).fold(sup0(p), |m, (w, e)| {
        let g = p.grad(w, e);
        m.max(g[0].abs()).max(g[1].abs())
    })
}

/// `max` of `|f|` and all first and second partial magnitudes.
fn sup2(p: &BiPoly) -> f64 {
    lattice(NORM_SAMPLES).fold(sup1(p), |m, (w, e)| {
        p.hessian(w, e).iter().fold(m, |m, x| m.max(x.abs()))
    })
}

/// `h1 = 1 / (2 max(1, |g|_{C^2}))`.
pub fn step_bound(spec: &ModelSpec) -> Result<f64, ModelError> {
    validate(spec, 16).into_result()?;
    Ok(0.5 / sup2(&spec.g).max(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivedConstants {
    pub h1_dagger: f64,
    pub r_star: f64,
    pub a_star: f64,
    pub b_star: f64,
    pub c_star: f64,
    pub nu_star: f64,
    /// Sup-norm inputs, named after the quantity they bound.
    pub inputs: Vec<(&'static str, f64)>,
}

impl DerivedConstants {
    pub fn input(&self, name: &str) -> Option<f64> {
        self.inputs.iter().find(|i| i.0 == name).map(|i| i.1)
    }

    /// `A_* <= 2 delta_* sqrt(R_*)`
    pub fn a_star_bound_holds(&self, delta_star: f64) -> bool {
        self.a_star <= 2.0 * delta_star * self.r_star.sqrt()
    }
}

impl fmt::Display for DerivedConstants {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.inputs {
            writeln!(f, "{k:<18} = {v}")?;
        }
        writeln!(f, "h1_dagger          = {}", self.h1_dagger)?;
        writeln!(f, "R_star             = {:e}", self.r_star)?;
        writeln!(f, "A_star             = {}", self.a_star)?;
        writeln!(f, "B_star             = {}", self.b_star)?;
        writeln!(f, "C_star             = {:e}", self.c_star)?;
        write!(f, "nu_star            = {:e}", self.nu_star)
    }
}

pub fn derived_constants(
    spec: &ModelSpec,
    theta0_sup: f64,
    domain_measure: f64,
) -> Result<DerivedConstants, ModelError> {
    let h1 = step_bound(spec)?;
    let ds = spec.delta_star;
    let a0_c = sup0(&spec.alpha0);
    let a0_w1 = sup1(&spec.alpha0);
    let a_c = sup0(&spec.alpha);
    let a_c1 = sup1(&spec.alpha);
    let b_c = sup0(&spec.beta);
    let gamma_inf = spec.gamma.smooth(0.0).max(spec.gamma.smooth(1.0));
    let g_w2 = sup2(&spec.g);

    let base = (1.0 + a0_w1)
        * (1.0 + a_c1)
        * (1.0 + b_c)
        * (1.0 + gamma_inf)
        * (1.0 + g_w2)
        * (1.0 + theta0_sup)
        * (1.0 + domain_measure);
    let r_star = base * base / ds.powi(4);
    let a_star = 2.0 * a0_c * a_c.max(b_c) / ds;
    let b_star = 0.5f64.min(ds / a_c).min(ds / b_c);
    let c_star = 4e4 * r_star.powi(5);
    let nu_star = 0.99 * (1.0 / (128.0 * a0_c * a_star * r_star)).min(0.5).sqrt();
    Ok(DerivedConstants {
        h1_dagger: h1,
        r_star,
        a_star,
        b_star,
        c_star,
        nu_star,
        inputs: vec![
            ("|alpha0|_C", a0_c),
            ("|alpha0|_W1inf", a0_w1),
            ("|alpha|_C", a_c),
            ("|alpha|_C1", a_c1),
            ("|beta|_C", b_c),
            ("|gamma|_Linf", gamma_inf),
            ("|g|_W2inf", g_w2),
            ("|theta0|_Linf", theta0_sup),
            ("measure", domain_measure),
            ("delta_star", ds),
        ],
    })
}

/// Initial triple `[w0, eta0, theta0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    pub v0: FieldPair,
    pub theta0: Field,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialPreset {
    /// `theta0` linear along axis 0 from `-A` to `A`.
    Ramp,
    /// `theta0 = -A` on the left half, `A` on the right half.
    Step,
    /// Uniform random `v0` in the unit box and `theta0` in `[-A, A]`.
    Random { seed: u64 },
    /// Two grains of orientation `-A` / `A` with an orientation-order dip at the boundary.
    TwoGrain,
}

impl InitialData {
    pub fn new(v0: FieldPair, theta0: Field) -> Result<Self, ModelError> {
        if v0.grid() != theta0.grid() {
            return Err(GridError::Mismatch.into());
        }
        if !v0.in_unit_box() {
            return Err(ModelError::BadInitialData(
                "w0 and eta0 must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { v0, theta0 })
    }

    pub fn theta0_sup(&self) -> f64 {
        self.theta0.sup_norm()
    }

    pub fn preset(grid: Grid, preset: InitialPreset, amplitude: f64) -> Self {
        let n0 = grid.shape()[0];
        // normalized position along axis 0, endpoints hit exactly
        let s = |cell: usize| grid.coords(cell)[0] as f64 / (n0 - 1) as f64;
        let t = |cell: usize| {
            if grid.dim() == 2 {
                grid.coords(cell)[1] as f64 / (grid.shape()[1] - 1) as f64
            } else {
                0.0
            }
        };
        let pi = std::f64::consts::PI;
        let field = |f: &dyn Fn(usize) -> f64| Field::from_raw(grid, (0..grid.len()).map(f).collect());
        let smooth_v = || {
            FieldPair {
                w: field(&|c| 0.6 + 0.3 * (pi * s(c)).cos() * (0.5 + 0.5 * (pi * t(c)).cos())),
                eta: field(&|c| 0.5 - 0.3 * (pi * s(c)).cos()),
            }
        };
        match preset {
            InitialPreset::Ramp => Self {
                v0: smooth_v(),
                theta0: field(&|c| amplitude * (2.0 * s(c) - 1.0)),
            },
            InitialPreset::Step => Self {
                v0: smooth_v(),
                theta0: field(&|c| if s(c) < 0.5 { -amplitude } else { amplitude }),
            },
            InitialPreset::TwoGrain => Self {
                v0: FieldPair {
                    w: Field::constant(grid, 1.0),
                    eta: field(&|c| 1.0 - 0.8 * (-((s(c) - 0.5) / 0.1).powi(2)).exp()),
                },
                theta0: field(&|c| if s(c) < 0.5 { -amplitude } else { amplitude }),
            },
            InitialPreset::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = grid.len();
                let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
                let eta: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
                let th: Vec<f64> = (0..n).map(|_| rng.gen_range(-amplitude..=amplitude)).collect();
                Self {
                    v0: FieldPair {
                        w: Field::from_raw(grid, w),
                        eta: Field::from_raw(grid, eta),
                    },
                    theta0: Field::from_raw(grid, th),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::unit(1, 8).unwrap()
    }

    #[test]
    fn polynomial_derivatives_match_differences() {
        let p = BiPoly::new(vec![(0.3, 3, 1), (-1.2, 0, 2), (2.0, 1, 0), (0.7, 2, 2)]);
        let (w, e, h) = (0.37, 0.81, 1e-5);
        let g = p.grad(w, e);
        assert!((g[0] - (p.value(w + h, e) - p.value(w - h, e)) / (2.0 * h)).abs() < 1e-8);
        assert!((g[1] - (p.value(w, e + h) - p.value(w, e - h)) / (2.0 * h)).abs() < 1e-8);
        let hs = p.hessian(w, e);
        let gw = |w: f64, e: f64| p.grad(w, e);
        assert!((hs[0] - (gw(w + h, e)[0] - gw(w - h, e)[0]) / (2.0 * h)).abs() < 1e-7);
        assert!((hs[1] - (gw(w, e + h)[0] - gw(w, e - h)[0]) / (2.0 * h)).abs() < 1e-7);
        assert!((hs[2] - (gw(w, e + h)[1] - gw(w, e - h)[1]) / (2.0 * h)).abs() < 1e-7);
    }

    #[test]
    fn default_model_is_valid() {
        let spec = ModelSpec::default_on(grid());
        let rep = spec.validate(64);
        assert!(rep.passed(), "{rep}");
    }

    #[test]
    fn nonconvex_beta_fails() {
        let mut spec = ModelSpec::default_on(grid());
        spec.beta = BiPoly::new(vec![(2.0, 0, 0), (-1.0, 0, 2)]);
        let rep = spec.validate(16);
        assert!(rep.failures().any(|c| c.name == "A2: beta convex"));
    }

    #[test]
    fn negative_g_fails() {
        let mut spec = ModelSpec::default_on(grid());
        spec.g = BiPoly::constant(-1.0);
        let rep = spec.validate(16);
        assert!(rep.failures().any(|c| c.name == "A4: g >= 0"));
    }

    #[test]
    fn relaxed_preset_waives_positivity_only() {
        let spec = ModelSpec::kwc_relaxed_on(grid(), 1.0);
        let rep = spec.validate(16);
        assert!(rep.passed());
        assert!(rep.checks.iter().any(|c| c.waived && c.worst_violation > 0.0));
        let strict = ModelSpec { relaxed: false, ..spec };
        assert!(!strict.validate(16).passed());
    }

    #[test]
    fn refinement_never_rescues_a_failure() {
        // violation only visible away from coarse lattice points
        let mut spec = ModelSpec::default_on(grid());
        spec.g = BiPoly::new(vec![(1.0, 0, 0), (-4.0, 1, 0), (4.0, 2, 0), (-1e-4, 0, 0)]);
        let mut failed = false;
        for n in 16..40 {
            let pass = spec.validate(n).passed();
            assert!(!(failed && pass), "n = {n}");
            failed |= !pass;
        }
        assert!(failed);
    }

    #[test]
    fn step_bound_examples() {
        let g = grid();
        assert_eq!(ModelSpec::default_on(g).step_bound().unwrap(), 0.5);
        let mut zero = ModelSpec::default_on(g);
        zero.g = BiPoly::constant(0.0);
        assert_eq!(zero.step_bound().unwrap(), 0.5);
        let four = ModelSpec::default_on(g).with_g_scale(4.0);
        assert_eq!(four.step_bound().unwrap(), 0.125);
    }

    #[test]
    fn derived_constants_defaults() {
        let spec = ModelSpec::default_on(grid());
        let pi = std::f64::consts::PI;
        let dc = derived_constants(&spec, pi, 1.0).unwrap();
        assert!((dc.a_star - 22.0).abs() < 1e-12);
        assert!((dc.b_star - 1.0 / 11.0).abs() < 1e-15);
        // hand evaluation: |alpha0|_W1inf = 1, |alpha|_C1 = max(1.1, 2) = 2,
        // |beta|_C = 1, |gamma|_Linf = 0, |g|_W2inf = 1
        let base: f64 = 2.0 * 3.0 * 2.0 * 1.0 * 2.0 * (1.0 + pi) * 2.0;
        let r = base * base / 1e-4;
        assert!((dc.r_star - r).abs() <= 1e-12 * r);
        assert!((dc.c_star - 4e4 * r.powi(5)).abs() <= 1e-12 * dc.c_star);
        assert!(dc.a_star_bound_holds(spec.delta_star));
        let nu2 = (1.0f64 / (128.0 * 22.0 * r)).min(0.5);
        assert!((dc.nu_star - 0.99 * nu2.sqrt()).abs() < 1e-18);
        assert!(dc.nu_star > 0.0 && dc.nu_star < 1.0);
    }

    #[test]
    fn source_averages() {
        let g = grid();
        let c = Source::constant(Field::constant(g, 0.3));
        for (i, h) in [(1, 0.1), (7, 0.45), (100, 2.0)] {
            assert!(c.sample(i, h).values().iter().all(|&x| (x - 0.3).abs() < 1e-15));
        }
        let t = Source::table(
            vec![(0.0, Field::constant(g, 1.0)), (0.5, Field::constant(g, 0.0))],
            1.0,
        )
        .unwrap();
        assert!(t.sample(1, 1.0).values().iter().all(|&x| x == 0.5));
        assert!(t.sample(3, 0.5).values().iter().all(|&x| x == 0.0));
        // window straddling the end of support
        assert!(t.sample(2, 0.4).values().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn settling_rule() {
        let g = grid();
        let u = Field::constant(g, 0.2);
        let table = Source::table(vec![(0.0, Field::constant(g, 1.0)), (1.0, u.clone())], f64::INFINITY)
            .unwrap()
            .with_u_infinity(u.clone());
        assert!(table.settles());
        let bad = Source::table(vec![(0.0, Field::constant(g, 1.0))], f64::INFINITY)
            .unwrap()
            .with_u_infinity(u);
        assert!(!bad.settles());
        assert!(Source::zero(g).settles());
    }

    #[test]
    fn presets_are_admissible() {
        for grid in [Grid::unit(1, 32).unwrap(), Grid::unit(2, 16).unwrap()] {
            for p in [
                InitialPreset::Ramp,
                InitialPreset::Step,
                InitialPreset::TwoGrain,
                InitialPreset::Random { seed: 4 },
            ] {
                let d = InitialData::preset(grid, p, std::f64::consts::PI);
                assert!(InitialData::new(d.v0.clone(), d.theta0.clone()).is_ok());
                assert!(d.theta0_sup() <= std::f64::consts::PI);
            }
        }
        let ramp = InitialData::preset(grid(), InitialPreset::Ramp, 2.0);
        assert_eq!(ramp.theta0_sup(), 2.0);
    }
}
