//! Smooth convex approximations `|.|_sigma` of the Euclidean norm on R^N, N <= 2.
//!
//! Every family here is radial, `|xi|_sigma = phi(|xi|)` with `phi(0) = 0`,
//! `phi` convex and nondecreasing, so gradients are
//! `phi'(|xi|) xi / |xi|` and vanish at the origin.
//!
//! Each instance carries bound witnesses `(q0, r0, q1, r1)` such that
//! `|xi|_sigma >= q0 |xi| - r0` and `|grad|(xi) <= q1 |xi|^r1`.

use std::f64::consts::{FRAC_2_PI, LN_2};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormError {
    #[error("sigma must lie in (0, 1], got {0}")]
    SigmaOutOfRange(f64),
    #[error("p-growth exponent must lie in (1, 2], got {0}")]
    BadExponent(f64),
    #[error("unknown norm family `{0}`")]
    UnknownFamily(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// `sqrt(|xi|^2 + sigma^2) - sigma`
    Hyperbola,
    /// Moreau envelope of `|.|` with parameter `sigma` (Huber function).
    Yosida,
    /// `int_0^|xi| tanh(t / sigma) dt`
    Tanh,
    /// `(2 / pi) int_0^|xi| atan(t / sigma) dt`
    Arctan,
    /// `|xi|^p / p` with `p = p(sigma)`
    PGrowth,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Hyperbola,
        Family::Yosida,
        Family::Tanh,
        Family::Arctan,
        Family::PGrowth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Hyperbola => "hyperbola",
            Family::Yosida => "yosida",
            Family::Tanh => "tanh",
            Family::Arctan => "arctan",
            Family::PGrowth => "p_growth",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = NormError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| NormError::UnknownFamily(s.to_string()))
    }
}

/// Constants certifying the growth conditions of one regularized norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundWitness {
    pub q0: f64,
    pub q1: f64,
    pub r0: f64,
    pub r1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizedNorm {
    family: Family,
    sigma: f64,
    p: f64,
}

impl RegularizedNorm {
    /// For [`Family::PGrowth`] the exponent defaults to `p(sigma) = 1 + sigma`.
    pub fn new(family: Family, sigma: f64) -> Result<Self, NormError> {
        Self::with_exponent(family, sigma, 1.0 + sigma)
    }

    pub fn with_exponent(family: Family, sigma: f64, p: f64) -> Result<Self, NormError> {
        if !(sigma.is_finite() && sigma > 0.0 && sigma <= 1.0) {
            return Err(NormError::SigmaOutOfRange(sigma));
        }
        if family == Family::PGrowth && !(p > 1.0 && p <= 2.0) {
            return Err(NormError::BadExponent(p));
        }
        Ok(Self { family, sigma, p })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn exponent(&self) -> f64 {
        self.p
    }

    /// Radial profile `phi(r)`, `r >= 0`.
    pub fn profile(&self, r: f64) -> f64 {
        let s = self.sigma;
        match self.family {
            Family::Hyperbola => r * r / ((r * r + s * s).sqrt() + s),
            Family::Yosida => {
                if r <= s {
                    0.5 * r * r / s
                } else {
                    r - 0.5 * s
                }
            }
            Family::Tanh => {
                // s ln cosh(r/s), evaluated without overflow
                let x = r / s;
                if x < 20.0 {
                    let sh = (0.5 * x).sinh();
                    s * (2.0 * sh * sh).ln_1p()
                } else {
                    s * (x + (-2.0 * x).exp().ln_1p() - LN_2)
                }
            }
            Family::Arctan => {
                let x = r / s;
                FRAC_2_PI * (r * x.atan() - 0.5 * s * (x * x).ln_1p())
            }
            Family::PGrowth => r.powf(self.p) / self.p,
        }
    }

    /// Derivative `phi'(r)`.
    pub fn profile_slope(&self, r: f64) -> f64 {
        let s = self.sigma;
        match self.family {
            Family::Hyperbola => r / (r * r + s * s).sqrt(),
            Family::Yosida => (r / s).min(1.0),
            Family::Tanh => (r / s).tanh(),
            Family::Arctan => FRAC_2_PI * (r / s).atan(),
            Family::PGrowth => r.powf(self.p - 1.0),
        }
    }

    /// `phi'(r) / r`, extended continuously to `r = 0` where the limit is
    /// finite. For the p-growth family the limit is infinite; `r` is floored
    /// at `r_floor` there.
    pub fn diffusivity(&self, r: f64, r_floor: f64) -> f64 {
        let s = self.sigma;
        match self.family {
            Family::Hyperbola => 1.0 / (r * r + s * s).sqrt(),
            Family::Yosida => 1.0 / r.max(s),
            Family::Tanh => {
                let x = r / s;
                if x < 1e-6 {
                    (1.0 - x * x / 3.0) / s
                } else {
                    x.tanh() / r
                }
            }
            Family::Arctan => {
                let x = r / s;
                if x < 1e-6 {
                    FRAC_2_PI * (1.0 - x * x / 3.0) / s
                } else {
                    FRAC_2_PI * x.atan() / r
                }
            }
            Family::PGrowth => r.max(r_floor).powf(self.p - 2.0),
        }
    }

    /// Second derivative `phi''(r)`; `r` is floored at `r_floor` for the
    /// p-growth family, whose curvature blows up at the origin.
    pub fn profile_curvature(&self, r: f64, r_floor: f64) -> f64 {
        let s = self.sigma;
        match self.family {
            Family::Hyperbola => {
                let q = r * r + s * s;
                s * s / (q * q.sqrt())
            }
            Family::Yosida => {
                if r < s {
                    1.0 / s
                } else {
                    0.0
                }
            }
            Family::Tanh => {
                let c = (r / s).cosh();
                1.0 / (s * c * c)
            }
            Family::Arctan => {
                let x = r / s;
                FRAC_2_PI / (s * (1.0 + x * x))
            }
            Family::PGrowth => (self.p - 1.0) * r.max(r_floor).powf(self.p - 2.0),
        }
    }

    /// Supremum of `phi'`, when finite: the radius of the dual domain.
    pub fn slope_bound(&self) -> Option<f64> {
        match self.family {
            Family::PGrowth => None,
            _ => Some(1.0),
        }
    }

    /// Inverse of `phi'` on `[0, slope_bound)`.
    pub fn slope_inverse(&self, q: f64) -> f64 {
        let s = self.sigma;
        match self.family {
            Family::Hyperbola => s * q / ((1.0 - q) * (1.0 + q)).sqrt(),
            Family::Yosida => s * q,
            Family::Tanh => s * q.atanh(),
            Family::Arctan => s * (0.5 * std::f64::consts::PI * q).tan(),
            Family::PGrowth => q.powf(1.0 / (self.p - 1.0)),
        }
    }

    /// Gradient of the convex conjugate: the `xi` with `gradient(xi) = p`.
    pub fn dual_point(&self, p: [f64; 2]) -> [f64; 2] {
        let q = p[0].hypot(p[1]);
        if q == 0.0 {
            return [0.0; 2];
        }
        let r = self.slope_inverse(q);
        [r * p[0] / q, r * p[1] / q]
    }

    /// `rho(r) = r / phi'(r)` and its derivative, for families with a bounded
    /// slope; `p = xi / rho(|xi|)` is the gradient.
    pub fn dual_ratio(&self, r: f64) -> (f64, f64) {
        let s = self.sigma;
        let x = r / s;
        match self.family {
            Family::Hyperbola => ((r * r + s * s).sqrt(), r / (r * r + s * s).sqrt()),
            Family::Yosida if r <= s => (s, 0.0),
            Family::Yosida => (r, 1.0),
            Family::Tanh if x < 1e-4 => (s * (1.0 + x * x / 3.0), 2.0 * x / 3.0),
            Family::Tanh => {
                let sh = x.sinh();
                let d = if sh.is_finite() { x / (sh * sh) } else { 0.0 };
                (r / x.tanh(), 1.0 / x.tanh() - d)
            }
            Family::Arctan if x < 1e-4 => {
                let k = 0.5 * std::f64::consts::PI;
                (k * s * (1.0 + x * x / 3.0), k * 2.0 * x / 3.0)
            }
            Family::Arctan => {
                let g = self.profile_slope(r);
                let c = self.profile_curvature(r, 0.0);
                (r / g, (g - r * c) / (g * g))
            }
            Family::PGrowth => (r.powf(2.0 - self.p), (2.0 - self.p) * r.powf(1.0 - self.p)),
        }
    }

    /// Hessian of `xi -> phi(|xi|)` for a two-component `xi`, as
    /// `[h00, h01, h11]`.
    pub fn hessian2(&self, xi: [f64; 2], r_floor: f64) -> [f64; 3] {
        let r = xi[0].hypot(xi[1]);
        let k = self.diffusivity(r, r_floor);
        if r == 0.0 {
            return [k, 0.0, k];
        }
        let d = self.profile_curvature(r, r_floor) - k;
        let (a, b) = (xi[0] / r, xi[1] / r);
        [k + d * a * a, d * a * b, k + d * b * b]
    }

    pub fn value(&self, xi: &[f64]) -> f64 {
        self.profile(euclid(xi))
    }

    pub fn gradient(&self, xi: &[f64]) -> Vec<f64> {
        let r = euclid(xi);
        if r == 0.0 {
            return vec![0.0; xi.len()];
        }
        let k = self.profile_slope(r) / r;
        xi.iter().map(|x| k * x).collect()
    }

    pub fn witness(&self) -> BoundWitness {
        let s = self.sigma;
        match self.family {
            Family::Hyperbola => BoundWitness { q0: 1.0, r0: s, q1: 1.0, r1: 0.0 },
            Family::Yosida => BoundWitness { q0: 1.0, r0: 0.5 * s, q1: 1.0, r1: 0.0 },
            Family::Tanh => BoundWitness { q0: 1.0, r0: s * LN_2, q1: 1.0, r1: 0.0 },
            Family::Arctan => {
                // r - phi(r) grows like (s/pi) ln(r/s); absorb the log with a
                // linear term of slope sqrt(s).
                let eps = s.sqrt();
                let a = std::f64::consts::FRAC_PI_2 * eps;
                BoundWitness {
                    q0: 1.0 - eps,
                    r0: FRAC_2_PI * s * (1.0 + (1.0 / a).ln().max(0.0)),
                    q1: 1.0,
                    r1: 0.0,
                }
            }
            Family::PGrowth => BoundWitness {
                q0: 1.0,
                r0: (self.p - 1.0) / self.p,
                q1: 1.0,
                r1: self.p - 1.0,
            },
        }
    }

    /// Samples the defining axioms with this instance's own witnesses.
    pub fn verify_axioms(&self, sample_count: usize) -> AxiomReport {
        self.verify_axioms_with(&self.witness(), sample_count, 0x5eed)
    }

    /// Samples convexity, the two growth bounds for `witness`, and the chain
    /// `|xi|_s <= grad . xi <= q1 |xi|^(1 + r1)` on `sample_count` points.
    /// Violations are measured relative to `1 + |value|`.
    pub fn verify_axioms_with(
        &self,
        witness: &BoundWitness,
        sample_count: usize,
        seed: u64,
    ) -> AxiomReport {
        let sample_count = sample_count.max(100);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = AxiomReport::new();

        let origin = [0.0, 0.0];
        report.record("origin", self.value(&origin).abs(), origin);
        let g0 = self.gradient(&origin);
        report.record("origin", euclid(&g0), origin);

        let draw = |rng: &mut ChaCha8Rng| {
            let mag = 10f64.powf(rng.gen_range(-6.0..3.0));
            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
            [mag * ang.cos(), mag * ang.sin()]
        };
        for _ in 0..sample_count {
            let xi = draw(&mut rng);
            let zeta = if rng.gen_bool(0.5) {
                draw(&mut rng)
            } else {
                // nearby partner, so curvature at small scales is probed too
                let d = draw(&mut rng);
                [xi[0] + 1e-3 * d[0], xi[1] + 1e-3 * d[1]]
            };
            let r = euclid(&xi);
            let val = self.value(&xi);
            let scale = 1.0 + val.abs();
            let grad = self.gradient(&xi);
            let gdotx = grad[0] * xi[0] + grad[1] * xi[1];
            let gnorm = euclid(&grad);

            let mid = [0.5 * (xi[0] + zeta[0]), 0.5 * (xi[1] + zeta[1])];
            let chord = 0.5 * (val + self.value(&zeta));
            report.record("convexity", (self.value(&mid) - chord) / (1.0 + chord.abs()), xi);

            report.record("lower_bound", (witness.q0 * r - witness.r0 - val) / scale, xi);
            report.record(
                "gradient_bound",
                (gnorm - witness.q1 * r.powf(witness.r1)) / (1.0 + gnorm),
                xi,
            );
            report.record("chain_lower", (val - gdotx) / scale, xi);
            report.record(
                "chain_upper",
                (gdotx - witness.q1 * r.powf(1.0 + witness.r1)) / (1.0 + gdotx.abs()),
                xi,
            );
            let dg = self.gradient(&zeta);
            let mono = (grad[0] - dg[0]) * (xi[0] - zeta[0]) + (grad[1] - dg[1]) * (xi[1] - zeta[1]);
            report.record("monotone_gradient", -mono / scale, xi);
        }
        report
    }
}

/// The exact Euclidean norm or one regularized member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Norm {
    Exact,
    Smooth(RegularizedNorm),
}

impl Norm {
    pub fn profile(&self, r: f64) -> f64 {
        match self {
            Norm::Exact => r,
            Norm::Smooth(n) => n.profile(r),
        }
    }

    pub fn smooth(&self) -> Option<&RegularizedNorm> {
        match self {
            Norm::Exact => None,
            Norm::Smooth(n) => Some(n),
        }
    }
}

impl From<RegularizedNorm> for Norm {
    fn from(n: RegularizedNorm) -> Self {
        Norm::Smooth(n)
    }
}

pub(crate) fn euclid(xi: &[f64]) -> f64 {
    match xi {
        [a] => a.abs(),
        [a, b] => a.hypot(*b),
        _ => xi.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxiomCheck {
    pub name: &'static str,
    pub worst_violation: f64,
    pub counterexample: [f64; 2],
}

/// Worst violation of each sampled axiom; negative means satisfied with margin.
#[derive(Debug, Clone, PartialEq)]
pub struct AxiomReport {
    pub checks: Vec<AxiomCheck>,
}

impl AxiomReport {
    pub const TOLERANCE: f64 = 1e-10;

    fn new() -> Self {
        Self { checks: Vec::new() }
    }

    fn record(&mut self, name: &'static str, violation: f64, at: [f64; 2]) {
        match self.checks.iter_mut().find(|c| c.name == name) {
            Some(c) => {
                if violation > c.worst_violation || violation.is_nan() {
                    c.worst_violation = violation;
                    c.counterexample = at;
                }
            }
            None => self.checks.push(AxiomCheck {
                name,
                worst_violation: violation,
                counterexample: at,
            }),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks
            .iter()
            .all(|c| c.worst_violation <= Self::TOLERANCE)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AxiomCheck> {
        self.checks
            .iter()
            .filter(|c| !(c.worst_violation <= Self::TOLERANCE))
    }
}
