//! Line-based `key = value` run configuration with dotted section prefixes
//! and `#` comments. Every key has a default, so an empty file is valid.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use kwc_core::io::Snapshot;
use kwc_core::model::{BiPoly, Gamma, Source};
use kwc_core::{
    Family, Field, Grid, InitialData, InitialPreset, ModelSpec, Norm, RegularizedNorm, Tolerances,
};

/// Every key the parser accepts.
pub const KEYS: &[&str] = &[
    "grid.dim",
    "grid.shape",
    "grid.spacing",
    "model.preset",
    "model.c",
    "model.nu",
    "model.delta_star",
    "model.gamma",
    "model.g",
    "model.g_scale",
    "model.alpha0",
    "model.alpha",
    "model.beta",
    "model.relaxed",
    "norm.family",
    "norm.sigma",
    "norm.exponent",
    "time.h",
    "time.steps",
    "initial.preset",
    "initial.amplitude",
    "initial.seed",
    "initial.snapshot",
    "source.kind",
    "source.value",
    "source.table",
    "source.end",
    "source.u_infinity",
    "tolerance.v",
    "tolerance.v_max_iter",
    "tolerance.theta",
    "tolerance.theta_max_iter",
    "tolerance.slack",
    "audit.dissipation",
    "audit.apriori",
    "audit.lyapunov",
    "audit.omega_limit",
    "audit.u_dagger",
    "audit.spread_tol",
    "audit.residual_tol",
    "output.snapshot_every",
    "output.pgm",
];

/// Reference temperature used by the dissipation and Lyapunov audits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UDagger {
    Zero,
    UInfinity,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Audits {
    pub dissipation: bool,
    pub apriori: bool,
    pub lyapunov: bool,
    pub omega_limit: bool,
    pub u_dagger: UDagger,
    /// Slack tolerance relative to `1 + |F_0|` (or `1 + |J_0|`).
    pub slack_rel: f64,
    pub spread_tol: f64,
    pub residual_tol: f64,
}

/// A fully resolved and validated run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub grid: Grid,
    pub spec: ModelSpec,
    pub norm: Norm,
    pub h: f64,
    /// `h` was derived as `0.9 h1_dagger`.
    pub h_auto: bool,
    pub steps: usize,
    pub initial: InitialData,
    pub tol: Tolerances,
    pub audits: Audits,
    pub snapshot_every: usize,
    pub pgm: bool,
}

impl RunConfig {
    pub fn u_dagger(&self) -> Field {
        match self.audits.u_dagger {
            UDagger::Zero => Field::zeros(self.grid),
            UDagger::UInfinity => self.spec.source.u_dagger(),
            UDagger::Value(x) => Field::constant(self.grid, x),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.norm.smooth().map(|n| n.sigma()).unwrap_or(0.0)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.spec;
        writeln!(f, "grid.shape       = {:?}", self.grid.shape())?;
        writeln!(f, "grid.spacing     = {:?}", self.grid.spacing())?;
        writeln!(f, "model.c          = {}", s.c)?;
        writeln!(f, "model.nu         = {}", s.nu)?;
        writeln!(f, "model.delta_star = {}", s.delta_star)?;
        writeln!(f, "model.gamma      = {}*w^2/2 + indicator", s.gamma.quadratic)?;
        writeln!(f, "model.g          = {}", s.g)?;
        writeln!(f, "model.alpha0     = {}", s.alpha0)?;
        writeln!(f, "model.alpha      = {}", s.alpha)?;
        writeln!(f, "model.beta       = {}", s.beta)?;
        if let Some(n) = self.norm.smooth() {
            writeln!(f, "norm             = {} sigma {}", n.family(), n.sigma())?;
        }
        let auto = if self.h_auto { " (auto)" } else { "" };
        writeln!(f, "time.h           = {}{auto}", self.h)?;
        write!(f, "time.steps       = {}", self.steps)
    }
}

struct Entry {
    value: String,
    line: usize,
}

/// Raw key/value table with line numbers.
struct Table(BTreeMap<String, Entry>);

impl Table {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| anyhow!("line {line}: expected `key = value`, got `{content}`"))?;
            let key = key.trim();
            let value = value.trim().trim_matches('"').to_string();
            if !KEYS.contains(&key) {
                bail!("line {line}: unknown key `{key}`");
            }
            if let Some(prev) = map.insert(key.to_string(), Entry { value, line }) {
                bail!("line {line}: duplicate key `{key}` (first set on line {})", prev.line);
            }
        }
        Ok(Self(map))
    }

    fn raw(&self, key: &str) -> Option<&Entry> {
        self.0.get(key)
    }

    fn get<T>(&self, key: &str, default: T, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(e) => parse(&e.value).with_context(|| format!("line {}: bad value for `{key}`", e.line)),
        }
    }

    fn num(&self, key: &str, default: f64) -> Result<f64> {
        self.get(key, default, parse_f64)
    }

    fn count(&self, key: &str, default: usize) -> Result<usize> {
        self.get(key, default, |s| Ok(s.parse::<usize>()?))
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        self.get(key, default, |s| match s {
            "true" | "yes" | "on" => Ok(true),
            "false" | "no" | "off" => Ok(false),
            _ => bail!("expected true or false, got `{s}`"),
        })
    }

    /// Attaches the line of `key` (if set) to a validation error.
    fn at(&self, key: &str) -> String {
        self.raw(key)
            .map(|e| format!("line {}: ", e.line))
            .unwrap_or_default()
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    let x = match s {
        "inf" | "infinity" => f64::INFINITY,
        "pi" => std::f64::consts::PI,
        _ => s.parse::<f64>().map_err(|_| anyhow!("`{s}` is not a number"))?,
    };
    if x.is_nan() {
        bail!("NaN is not allowed");
    }
    Ok(x)
}

fn parse_list<T>(s: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').map(|p| item(p.trim())).collect()
}

/// Named model function: `const K`, `half_sq_diff S`, `offset_eta_sq K`,
/// `kwc_relaxed C` or `poly c:a:b, c:a:b, ...` (terms `c w^a eta^b`).
pub fn parse_function(s: &str) -> Result<BiPoly> {
    let (name, arg) = s.split_once(char::is_whitespace).unwrap_or((s, ""));
    let arg = arg.trim();
    let one = || parse_f64(arg).with_context(|| format!("`{name}` takes one number"));
    Ok(match name {
        "const" => BiPoly::constant(one()?),
        "half_sq_diff" => BiPoly::half_sq_diff(one()?),
        "offset_eta_sq" => BiPoly::offset_eta_sq(one()?),
        "kwc_relaxed" => BiPoly::kwc_relaxed(one()?),
        "poly" => BiPoly::new(parse_list(arg, |t| {
            let parts: Vec<&str> = t.split(':').map(str::trim).collect();
            let [c, a, b] = parts[..] else {
                bail!("poly term `{t}` must be coef:w_power:eta_power");
            };
            Ok((parse_f64(c)?, a.parse()?, b.parse()?))
        })?),
        _ => bail!("unknown function `{name}` (const, half_sq_diff, offset_eta_sq, kwc_relaxed, poly)"),
    })
}

fn parse_gamma(s: &str) -> Result<Gamma> {
    let (name, arg) = s.split_once(char::is_whitespace).unwrap_or((s, ""));
    match name {
        "indicator" => Ok(Gamma::INDICATOR),
        "quadratic" => Ok(Gamma {
            quadratic: parse_f64(arg.trim())?,
        }),
        _ => bail!("unknown gamma `{name}` (indicator, quadratic K)"),
    }
}

fn parse_preset(s: &str, seed: u64) -> Result<InitialPreset> {
    Ok(match s {
        "ramp" => InitialPreset::Ramp,
        "step" => InitialPreset::Step,
        "random" => InitialPreset::Random { seed },
        "two_grain" => InitialPreset::TwoGrain,
        _ => bail!("unknown initial preset `{s}` (ramp, step, random, two_grain)"),
    })
}

/// Reads and resolves a config file; relative snapshot paths are taken
/// from the file's directory.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base).with_context(|| format!("in {}", path.display()))
}

pub fn parse_config_str(text: &str, base: &Path) -> Result<RunConfig> {
    let t = Table::parse(text)?;

    let dim = t.count("grid.dim", 1)?;
    let mut shape = t.get("grid.shape", vec![32], |s| parse_list(s, |x| Ok(x.parse::<usize>()?)))?;
    if shape.len() == 1 && dim == 2 {
        shape.push(shape[0]);
    }
    if shape.len() != dim {
        bail!("{}grid.shape needs {dim} extents, got {}", t.at("grid.shape"), shape.len());
    }
    let spacing = t.get("grid.spacing", None, |s| {
        if s == "auto" {
            Ok(None)
        } else {
            Ok(Some(parse_list(s, parse_f64)?))
        }
    })?;
    let spacing = match spacing {
        Some(mut sp) => {
            if sp.len() == 1 && dim == 2 {
                sp.push(sp[0]);
            }
            sp
        }
        // unit domain
        None => shape.iter().map(|n| 1.0 / *n as f64).collect(),
    };
    let grid = Grid::new(&shape, &spacing).with_context(|| t.at("grid.shape"))?;

    let spec = resolve_model(&t, grid)?;
    let norm = resolve_norm(&t)?;

    let h1 = spec.step_bound().map_err(|e| anyhow!("model rejected: {e}"))?;
    let (h, h_auto) = t.get("time.h", (0.9 * h1, true), |s| {
        if s == "auto" {
            Ok((0.9 * h1, true))
        } else {
            Ok((parse_f64(s)?, false))
        }
    })?;
    if !(h > 0.0 && h.is_finite()) {
        bail!("{}time.h must be positive", t.at("time.h"));
    }
    if h > h1 {
        bail!(
            "{}time.h = {h} exceeds the uniqueness bound h1_dagger = {h1}",
            t.at("time.h")
        );
    }
    let steps = t.count("time.steps", 100)?;

    let initial = resolve_initial(&t, grid, base)?;

    let default_tol = Tolerances::default();
    let tol = Tolerances {
        v_tol: t.num("tolerance.v", default_tol.v_tol)?,
        v_max_iter: t.count("tolerance.v_max_iter", default_tol.v_max_iter)?,
        theta_tol: t.num("tolerance.theta", default_tol.theta_tol)?,
        picard_max_iter: t.count("tolerance.theta_max_iter", default_tol.picard_max_iter)?,
    };

    let audits = Audits {
        dissipation: t.flag("audit.dissipation", true)?,
        apriori: t.flag("audit.apriori", true)?,
        lyapunov: t.flag("audit.lyapunov", false)?,
        omega_limit: t.flag("audit.omega_limit", false)?,
        u_dagger: t.get("audit.u_dagger", UDagger::Zero, |s| {
            Ok(match s {
                "zero" => UDagger::Zero,
                "u_infinity" => UDagger::UInfinity,
                _ => UDagger::Value(parse_f64(s)?),
            })
        })?,
        slack_rel: t.num("tolerance.slack", 1e-7)?,
        spread_tol: t.num("audit.spread_tol", 1e-3)?,
        residual_tol: t.num("audit.residual_tol", 1e-5)?,
    };
    if audits.omega_limit && !spec.source.settles() {
        bail!(
            "{}A6: the source never settles to u_infinity, so u - u_infinity is not square \
             integrable in time; the omega-limit audit needs it",
            t.at("audit.omega_limit")
        );
    }
    if audits.u_dagger == UDagger::UInfinity && spec.source.u_infinity().is_none() {
        bail!("{}audit.u_dagger = u_infinity but no source.u_infinity is set", t.at("audit.u_dagger"));
    }

    let snapshot_every = t.count("output.snapshot_every", 10)?;
    if snapshot_every == 0 {
        bail!("{}output.snapshot_every must be at least 1", t.at("output.snapshot_every"));
    }
    Ok(RunConfig {
        grid,
        spec,
        norm,
        h,
        h_auto,
        steps,
        initial,
        tol,
        audits,
        snapshot_every,
        pgm: t.flag("output.pgm", true)?,
    })
}

fn resolve_model(t: &Table, grid: Grid) -> Result<ModelSpec> {
    let c = t.num("model.c", 1.0)?;
    let mut spec = match t.get("model.preset", "default".to_string(), |s| Ok(s.to_string()))?.as_str() {
        "default" => ModelSpec::default_on(grid),
        "kwc_relaxed" => ModelSpec::kwc_relaxed_on(grid, c),
        other => bail!("{}unknown model preset `{other}` (default, kwc_relaxed)", t.at("model.preset")),
    };
    spec.c = c;
    spec.nu = t.num("model.nu", spec.nu)?;
    if spec.nu < 0.0 {
        bail!("{}model.nu must be nonnegative", t.at("model.nu"));
    }
    spec.delta_star = t.num("model.delta_star", spec.delta_star)?;
    spec.alpha = BiPoly::offset_eta_sq(spec.delta_star);
    spec.gamma = t.get("model.gamma", spec.gamma, parse_gamma)?;
    spec.g = t.get("model.g", spec.g.clone(), parse_function)?;
    spec.alpha0 = t.get("model.alpha0", spec.alpha0.clone(), parse_function)?;
    spec.alpha = t.get("model.alpha", spec.alpha.clone(), parse_function)?;
    spec.beta = t.get("model.beta", spec.beta.clone(), parse_function)?;
    spec.relaxed = t.flag("model.relaxed", spec.relaxed)?;
    let scale = t.num("model.g_scale", 1.0)?;
    if scale != 1.0 {
        spec = spec.with_g_scale(scale);
    }
    spec.source = resolve_source(t, grid)?;

    let report = spec.validate(64);
    if let Some(first) = report.failures().next() {
        let all: Vec<&str> = report.failures().map(|c| c.name).collect();
        bail!(
            "model violates {} (worst {:.3e} at w = {}, eta = {}); failing checks: {}",
            first.name,
            first.worst_violation,
            first.at[0],
            first.at[1],
            all.join(", ")
        );
    }
    Ok(spec)
}

fn resolve_source(t: &Table, grid: Grid) -> Result<Source> {
    let kind = t.get("source.kind", "constant".to_string(), |s| Ok(s.to_string()))?;
    let u_inf = t.get("source.u_infinity", None, |s| Ok(Some(parse_f64(s)?)))?;
    let field = |x: f64| Field::constant(grid, x);
    let source = match kind.as_str() {
        "constant" => {
            let value = t.num("source.value", 0.0)?;
            // a constant source settles to itself unless told otherwise
            Source::constant(field(value)).with_u_infinity(field(u_inf.unwrap_or(value)))
        }
        "table" => {
            let entries = t.get("source.table", Vec::new(), |s| {
                parse_list(s, |e| {
                    let (start, value) = e
                        .split_once(':')
                        .ok_or_else(|| anyhow!("table entry `{e}` must be start:value"))?;
                    Ok((parse_f64(start.trim())?, parse_f64(value.trim())?))
                })
            })?;
            if entries.is_empty() {
                bail!("source.kind = table needs source.table = start:value, ...");
            }
            let end = t.num("source.end", f64::INFINITY)?;
            let segments = entries.into_iter().map(|(s, v)| (s, field(v))).collect();
            let src = Source::table(segments, end).with_context(|| t.at("source.table"))?;
            match u_inf {
                Some(u) => src.with_u_infinity(field(u)),
                None => src,
            }
        }
        other => bail!("{}unknown source kind `{other}` (constant, table)", t.at("source.kind")),
    };
    Ok(source)
}

fn resolve_norm(t: &Table) -> Result<Norm> {
    let family: Family = t.get("norm.family", Family::Hyperbola, |s| Ok(s.parse()?))?;
    let sigma = t.num("norm.sigma", 0.1)?;
    let norm = match t.raw("norm.exponent") {
        Some(_) => RegularizedNorm::with_exponent(family, sigma, t.num("norm.exponent", 1.0 + sigma)?),
        None => RegularizedNorm::new(family, sigma),
    };
    let norm = norm.map_err(|e| anyhow!("{}{e}", t.at("norm.sigma")))?;
    Ok(Norm::Smooth(norm))
}

fn resolve_initial(t: &Table, grid: Grid, base: &Path) -> Result<InitialData> {
    if let Some(e) = t.raw("initial.snapshot") {
        let path = base.join(&e.value);
        let snap = Snapshot::read(&path)
            .with_context(|| format!("line {}: cannot load snapshot {}", e.line, path.display()))?;
        let (v, theta) = snap.state()?;
        if theta.grid() != &grid {
            bail!("line {}: snapshot grid does not match grid.shape/grid.spacing", e.line);
        }
        return InitialData::new(v, theta).map_err(|e| anyhow!("A5: {e}"));
    }
    let seed = t.count("initial.seed", 0)? as u64;
    let preset = t.get("initial.preset", InitialPreset::Ramp, |s| parse_preset(s, seed))?;
    let amplitude = t.num("initial.amplitude", 1.0)?;
    Ok(InitialData::preset(grid, preset, amplitude))
}
