//! Locally averaged space-time norms, Dirichlet forms, the local space-time
//! Sobolev inequality in one dimension, and the moment-condition predicates.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::env::{DynamicConductanceField, Edge};
use crate::error::{param, Error, Result};

/// An exponent in `(0, inf]`. Infinity is a marker, never a large float.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exponent {
    Finite(f64),
    Infinity,
}

impl Exponent {
    pub fn finite(v: f64) -> Result<Self> {
        if v.is_finite() && v > 0.0 {
            Ok(Exponent::Finite(v))
        } else if v == f64::INFINITY {
            Ok(Exponent::Infinity)
        } else {
            param(format!("exponent must lie in (0, inf], got {v}"))
        }
    }

    /// `1 / e`, zero for infinity.
    pub fn recip(self) -> f64 {
        match self {
            Exponent::Finite(v) => 1.0 / v,
            Exponent::Infinity => 0.0,
        }
    }

    /// Hölder conjugate `e / (e - 1)`; needs `e >= 1`.
    pub fn conjugate(self) -> Self {
        match self {
            Exponent::Infinity => Exponent::Finite(1.0),
            Exponent::Finite(v) if v <= 1.0 => Exponent::Infinity,
            Exponent::Finite(v) => Exponent::Finite(v / (v - 1.0)),
        }
    }

    pub fn scale(self, factor: f64) -> Self {
        match self {
            Exponent::Finite(v) => Exponent::Finite(v * factor),
            Exponent::Infinity => Exponent::Infinity,
        }
    }

    /// `q / (q + 1)`, the time exponent on the left of the Sobolev inequality.
    pub fn sobolev_time(self) -> Self {
        match self {
            Exponent::Finite(v) => Exponent::Finite(v / (v + 1.0)),
            Exponent::Infinity => Exponent::Finite(1.0),
        }
    }

    fn check(self) -> Result<()> {
        match self {
            Exponent::Finite(v) if !(v.is_finite() && v > 0.0) => {
                param(format!("exponent must lie in (0, inf], got {v}"))
            }
            _ => Ok(()),
        }
    }

    fn at_least_one(self, name: &str) -> Result<()> {
        match self {
            Exponent::Finite(v) if !(v >= 1.0 && v.is_finite()) => {
                param(format!("{name} must lie in [1, inf], got {v}"))
            }
            _ => Ok(()),
        }
    }
}

/// Space exponent `p` and time exponent `q` of `||.||_{p,q,Q}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub p: Exponent,
    pub q: Exponent,
}

impl NormSpec {
    pub fn new(p: Exponent, q: Exponent) -> Self {
        Self { p, q }
    }

    pub fn finite(p: f64, q: f64) -> Result<Self> {
        Ok(Self::new(Exponent::finite(p)?, Exponent::finite(q)?))
    }
}

/// `Q = [t0, t1] x {lo, ..., hi}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeBox {
    pub t0: f64,
    pub t1: f64,
    pub lo: i64,
    pub hi: i64,
}

impl SpaceTimeBox {
    pub fn new(t0: f64, t1: f64, lo: i64, hi: i64) -> Result<Self> {
        if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
            return param(format!("time interval [{t0}, {t1}] must have positive length"));
        }
        if hi < lo {
            return param(format!("site range {lo}..={hi} is empty"));
        }
        Ok(Self { t0, t1, lo, hi })
    }

    pub fn duration(&self) -> f64 {
        self.t1 - self.t0
    }

    pub fn size(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    pub fn sites(&self) -> impl Iterator<Item = i64> {
        self.lo..=self.hi
    }
}

/// `Q(n) = [0, n^2] x B(0, n)`.
pub fn box_q(n: u32) -> Result<SpaceTimeBox> {
    if n < 1 {
        return param("box radius n must be at least 1");
    }
    let r = i64::from(n);
    SpaceTimeBox::new(0.0, f64::from(n) * f64::from(n), -r, r)
}

/// One time piece of a [`GridFunction`].
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    /// Values at sites `lo..=hi` of the box.
    pub values: Vec<f64>,
}

/// A function on a box, constant on each time segment and zero outside the
/// box's sites.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub bounds: SpaceTimeBox,
    pub segments: Vec<Segment>,
}

impl GridFunction {
    /// Samples `f` at segment midpoints between `breaks` (sorted, inside the
    /// box's interval). Exact when `f` is constant between breaks.
    pub fn piecewise<F: Fn(f64, i64) -> f64>(bounds: SpaceTimeBox, breaks: &[f64], f: F) -> Self {
        let mut cuts = vec![bounds.t0];
        cuts.extend(breaks.iter().copied().filter(|&b| b > bounds.t0 && b < bounds.t1));
        cuts.push(bounds.t1);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let segments = cuts
            .windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                Segment {
                    t0: w[0],
                    t1: w[1],
                    values: bounds.sites().map(|x| f(mid, x)).collect(),
                }
            })
            .collect();
        Self { bounds, segments }
    }

    /// Composite-midpoint sampling with segments no longer than `max_step`,
    /// additionally cut at `breaks`.
    pub fn midpoint<F: Fn(f64, i64) -> f64>(
        bounds: SpaceTimeBox,
        max_step: f64,
        breaks: &[f64],
        f: F,
    ) -> Self {
        let pieces = (bounds.duration() / max_step).ceil().max(1.0) as usize;
        let mut cuts: Vec<f64> = (1..pieces)
            .map(|j| bounds.t0 + bounds.duration() * j as f64 / pieces as f64)
            .collect();
        cuts.extend_from_slice(breaks);
        Self::piecewise(bounds, &cuts, f)
    }

    /// Time-independent values over the box's sites.
    pub fn constant_in_time(bounds: SpaceTimeBox, values: Vec<f64>) -> Result<Self> {
        if values.len() != bounds.size() {
            return param("value count does not match the box");
        }
        Ok(Self {
            bounds,
            segments: vec![Segment {
                t0: bounds.t0,
                t1: bounds.t1,
                values,
            }],
        })
    }

    /// Splits segments at `breaks` without changing values.
    pub fn refine(&self, breaks: &[f64]) -> Self {
        let mut segments = Vec::with_capacity(self.segments.len() + breaks.len());
        for seg in &self.segments {
            let mut start = seg.t0;
            for &b in breaks.iter().filter(|&&b| b > seg.t0 && b < seg.t1) {
                segments.push(Segment {
                    t0: start,
                    t1: b,
                    values: seg.values.clone(),
                });
                start = b;
            }
            segments.push(Segment {
                t0: start,
                t1: seg.t1,
                values: seg.values.clone(),
            });
        }
        Self {
            bounds: self.bounds,
            segments,
        }
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Self {
        Self {
            bounds: self.bounds,
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    t0: s.t0,
                    t1: s.t1,
                    values: s.values.iter().map(|&v| f(v)).collect(),
                })
                .collect(),
        }
    }
}

fn spatial_mean(values: &[f64], p: Exponent) -> f64 {
    match p {
        Exponent::Infinity => values.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
        Exponent::Finite(p) => {
            let mean = values.iter().map(|v| v.abs().powf(p)).sum::<f64>() / values.len() as f64;
            mean.powf(1.0 / p)
        }
    }
}

/// `(|I|^-1 int_I (|B|^-1 sum_B |u|^p)^{q/p} dt)^{1/q}`, with maxima for
/// infinite exponents. Exact for the piecewise-constant representation.
pub fn st_norm(u: &GridFunction, spec: NormSpec) -> Result<f64> {
    spec.p.check()?;
    spec.q.check()?;
    let duration = u.bounds.duration();
    let profile = u
        .segments
        .iter()
        .filter(|s| s.t1 > s.t0)
        .map(|s| (s.t1 - s.t0, spatial_mean(&s.values, spec.p)));
    Ok(match spec.q {
        Exponent::Infinity => profile.fold(0.0_f64, |m, (_, v)| m.max(v)),
        Exponent::Finite(q) => {
            let integral: f64 = profile.map(|(len, v)| len * v.powf(q)).sum();
            (integral / duration).powf(1.0 / q)
        }
    })
}

/// Which Dirichlet form to use. The squared gradient is the standard one;
/// `Unsquared` sums `w(y, y+1) (f(y) - f(y+1))` literally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DirichletReading {
    #[default]
    Squared,
    Unsquared,
}

/// Dirichlet energy at time `t` of `f` given on sites `lo..lo + f.len()`
/// and zero elsewhere, summed over every edge touching those sites.
pub fn dirichlet_energy(
    field: &DynamicConductanceField,
    t: f64,
    f: &[f64],
    lo: i64,
    reading: DirichletReading,
) -> f64 {
    let value = |x: i64| {
        let i = x - lo;
        if i >= 0 && (i as usize) < f.len() {
            f[i as usize]
        } else {
            0.0
        }
    };
    let hi = lo + f.len() as i64 - 1;
    (lo - 1..=hi)
        .map(|y| {
            let diff = value(y) - value(y + 1);
            let w = field.eval(t, Edge::new(y));
            match reading {
                DirichletReading::Squared => w * diff * diff,
                DirichletReading::Unsquared => w * diff,
            }
        })
        .sum()
}

/// Both sides of the local space-time Sobolev inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SobolevOutcome {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Evaluates `||u^2||_{inf, q'/(q'+1), Q}` against
/// `|B|^2 ||nu||_{1, q', Q} (|I|^-1 int_I E_t(u_t) / |B| dt)`.
pub fn sobolev_check(
    field: &DynamicConductanceField,
    u: &GridFunction,
    q_prime: Exponent,
    reading: DirichletReading,
) -> Result<SobolevOutcome> {
    q_prime.at_least_one("q'")?;
    let bounds = u.bounds;
    let refined = u.refine(&field.change_times_in(bounds.t0, bounds.t1));
    let squared = refined.map(|v| v * v);
    let lhs = st_norm(&squared, NormSpec::new(Exponent::Infinity, q_prime.sobolev_time()))?;

    let nu = GridFunction {
        bounds,
        segments: refined
            .segments
            .iter()
            .map(|s| {
                let mid = 0.5 * (s.t0 + s.t1);
                Segment {
                    t0: s.t0,
                    t1: s.t1,
                    values: bounds.sites().map(|x| field.nu(mid, x)).collect(),
                }
            })
            .collect(),
    };
    let nu_norm = st_norm(&nu, NormSpec::new(Exponent::Finite(1.0), q_prime))?;
    let b = bounds.size() as f64;
    let energy: f64 = refined
        .segments
        .iter()
        .map(|s| {
            let mid = 0.5 * (s.t0 + s.t1);
            (s.t1 - s.t0) * dirichlet_energy(field, mid, &s.values, bounds.lo, reading) / b
        })
        .sum::<f64>()
        / bounds.duration();
    let rhs = b * b * nu_norm * energy;
    Ok(SobolevOutcome {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-12),
    })
}

/// `1/(p-1) + 1/((p-1) q) < 1`; `false` for `p <= 1`.
pub fn condition_1d(p: Exponent, q: Exponent) -> bool {
    condition_1d_lhs(p, q).is_some_and(|v| v < 1.0)
}

/// Left side of the one-dimensional condition, `None` where it diverges.
pub fn condition_1d_lhs(p: Exponent, q: Exponent) -> Option<f64> {
    let a = match p {
        Exponent::Infinity => 0.0,
        Exponent::Finite(v) if v > 1.0 => 1.0 / (v - 1.0),
        Exponent::Finite(_) => return None,
    };
    Some(a + a * q.recip())
}

/// `1/(p-1) + 1/((p-1) q) + 1/q`, `None` for `p <= 1`. No restriction on
/// the dimension.
pub fn condition_d_lhs(p: Exponent, q: Exponent) -> Option<f64> {
    condition_1d_lhs(p, q).map(|v| v + q.recip())
}

/// The `d`-dimensional strict inequality without the `d >= 2` check.
pub fn condition_d_formula(p: Exponent, q: Exponent, d: u32) -> bool {
    d > 0 && condition_d_lhs(p, q).is_some_and(|v| v < 2.0 / f64::from(d))
}

/// The moment condition for `d >= 2`; one dimension has its own predicate.
pub fn condition_d(p: Exponent, q: Exponent, d: u32) -> Result<bool> {
    if d < 2 {
        return param(format!("condition_d needs d >= 2, got {d}; use condition_1d"));
    }
    Ok(condition_d_formula(p, q, d))
}

/// Conditions with separate time and space integrability:
/// `(1/p) (p'/(p'-1)) ((q'+1)/q') < 1` for `d = 1`, and
/// `... + 1/q < 2/d` for `d >= 2`.
pub fn condition_int(
    p: Exponent,
    p_prime: Exponent,
    q_prime: Exponent,
    q: Option<Exponent>,
    d: u32,
) -> Result<bool> {
    p.at_least_one("p")?;
    p_prime.at_least_one("p'")?;
    q_prime.at_least_one("q'")?;
    let space = match p_prime {
        Exponent::Infinity => 1.0,
        Exponent::Finite(v) if v > 1.0 => v / (v - 1.0),
        Exponent::Finite(_) => return Ok(false),
    };
    let time = 1.0 + q_prime.recip();
    let term = p.recip() * space * time;
    match d {
        0 => param("dimension must be positive"),
        1 => Ok(term < 1.0),
        _ => {
            let q = q.ok_or_else(|| Error::Parameter("d >= 2 needs the exponent q".into()))?;
            q.at_least_one("q")?;
            Ok(term + q.recip() < 2.0 / f64::from(d))
        }
    }
}

/// One point of the `(p, q)` feasibility grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionPoint {
    pub p: f64,
    pub q: f64,
    pub lhs: f64,
    pub satisfied: bool,
}

/// Evaluates [`condition_1d`] on a uniform grid over `[p_lo, p_hi] x [q_lo, q_hi]`.
pub fn condition_grid(
    p_range: (f64, f64),
    q_range: (f64, f64),
    p_steps: usize,
    q_steps: usize,
) -> Result<Vec<ConditionPoint>> {
    if p_steps < 2 || q_steps < 2 {
        return param("grid needs at least two points per axis");
    }
    if !(p_range.0 > 1.0 && p_range.1 >= p_range.0 && q_range.0 >= 1.0 && q_range.1 >= q_range.0)
    {
        return param("grid needs 1 < p_lo <= p_hi and 1 <= q_lo <= q_hi");
    }
    let at = |range: (f64, f64), i: usize, n: usize| {
        range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64
    };
    let mut out = Vec::with_capacity(p_steps * q_steps);
    for i in 0..p_steps {
        let p = at(p_range, i, p_steps);
        for j in 0..q_steps {
            let q = at(q_range, j, q_steps);
            let (pe, qe) = (Exponent::Finite(p), Exponent::Finite(q));
            out.push(ConditionPoint {
                p,
                q,
                lhs: condition_1d_lhs(pe, qe).unwrap_or(f64::INFINITY),
                satisfied: condition_1d(pe, qe),
            });
        }
    }
    Ok(out)
}

pub fn write_condition_csv<W: Write>(out: &mut W, grid: &[ConditionPoint]) -> io::Result<()> {
    writeln!(out, "p,q,lhs,satisfied")?;
    for pt in grid {
        writeln!(out, "{},{},{},{}", pt.p, pt.q, pt.lhs, u8::from(pt.satisfied))?;
    }
    Ok(())
}

/// Exponents `(p, p', q')` of the energy estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySpecs {
    pub p: Exponent,
    pub p_prime: Exponent,
    pub q_prime: Exponent,
}

/// Both sides of one Moser step: the energy estimate on `Q(sigma n)` versus
/// `Q(n)`, and the interpolation inequality. Constants are reported, not
/// asserted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub n: u32,
    /// `|| |u|^{2 alpha} ||_{1, inf, Q(sigma n)}`
    pub sup_term: f64,
    /// `int_{I(sigma n)} E_t(eta |u_t|^alpha) / |B(n)| dt`
    pub dirichlet_term: f64,
    /// `||mu||_{p, p', Q(n)}`
    pub mu_norm: f64,
    /// `|| |u|^{2 alpha} ||_{p_*, p'_*, Q(n)}`
    pub power_norm: f64,
    pub gamma: f64,
    pub rhs_bound: f64,
    /// `(sup_term + dirichlet_term) / rhs_bound`, the smallest admissible `C_alpha`.
    pub implied_constant: f64,
    pub interpolation_alpha: f64,
    pub interpolation_lhs: f64,
    pub interpolation_rhs: f64,
}

/// Cut-off equal to 1 on `B(sigma n)`, vanishing at `|x| >= n`, with
/// gradient at most `1 / ((1 - sigma) n)`.
pub fn cutoff(x: i64, n: u32, sigma: f64) -> f64 {
    let n = f64::from(n);
    let inner = (sigma * n).floor();
    let d = (x as f64).abs();
    if d <= inner {
        1.0
    } else {
        ((n - d) / (n - inner)).clamp(0.0, 1.0)
    }
}

/// Evaluates the energy estimate and interpolation inequality for `u` on
/// `Q(n)` and `Q(sigma n) = [0, sigma n^2] x B(sigma n)`. Time integrals use
/// unit midpoint segments cut at the field's change points.
pub fn energy_quantities<F: Fn(f64, i64) -> f64>(
    field: &DynamicConductanceField,
    u: F,
    n: u32,
    sigma: f64,
    alpha: f64,
    specs: EnergySpecs,
) -> Result<EnergyReport> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return param(format!("sigma must lie in (0, 1), got {sigma}"));
    }
    if !(alpha >= 1.0 && alpha.is_finite()) {
        return param(format!("alpha must be at least 1, got {alpha}"));
    }
    specs.p.at_least_one("p")?;
    specs.p_prime.at_least_one("p'")?;
    specs.q_prime.at_least_one("q'")?;
    let outer = box_q(n)?;
    let nf = f64::from(n);
    let inner_radius = (sigma * nf).floor() as i64;
    let inner = SpaceTimeBox::new(0.0, sigma * nf * nf, -inner_radius, inner_radius)?;

    let sample = |bounds: SpaceTimeBox| {
        let breaks = field.change_times_in(bounds.t0, bounds.t1);
        GridFunction::midpoint(bounds, 1.0, &breaks, &u)
    };
    let u_inner = sample(inner);
    let u_outer = sample(outer);
    let power = |g: &GridFunction, k: f64| g.map(|v| v.abs().powf(k));

    let sup_term = st_norm(
        &power(&u_inner, 2.0 * alpha),
        NormSpec::new(Exponent::Finite(1.0), Exponent::Infinity),
    )?;

    // E_t(eta |u_t|^alpha) over I(sigma n), with eta |u|^alpha supported in B(n)
    let weighted = sample(SpaceTimeBox::new(0.0, sigma * nf * nf, -(n as i64), n as i64)?);
    let b_outer = outer.size() as f64;
    let dirichlet_term: f64 = weighted
        .segments
        .iter()
        .map(|s| {
            let mid = 0.5 * (s.t0 + s.t1);
            let f: Vec<f64> = weighted
                .bounds
                .sites()
                .zip(&s.values)
                .map(|(x, v)| cutoff(x, n, sigma) * v.abs().powf(alpha))
                .collect();
            (s.t1 - s.t0) * dirichlet_energy(field, mid, &f, -(n as i64), DirichletReading::Squared)
                / b_outer
        })
        .sum();

    let mu = GridFunction::piecewise(
        outer,
        &field.change_times_in(outer.t0, outer.t1),
        |t, x| field.mu(t, x),
    );
    let mu_norm = st_norm(&mu, NormSpec::new(specs.p, specs.p_prime))?;
    let p_star = specs.p.conjugate();
    let p_prime_star = specs.p_prime.conjugate();
    let power_norm = st_norm(&power(&u_outer, 2.0 * alpha), NormSpec::new(p_star, p_prime_star))?;
    let gamma = if power_norm >= 1.0 { 1.0 } else { 1.0 - 1.0 / alpha };
    let rhs_bound = mu_norm * power_norm.powf(gamma / (2.0 * alpha));
    let lhs = sup_term + dirichlet_term;
    let implied_constant = if lhs == 0.0 {
        0.0
    } else if rhs_bound > 0.0 {
        lhs / rhs_bound
    } else {
        f64::INFINITY
    };

    // alpha = 1/p_* + q' / (p_* (q' + 1))
    let ps = p_star.recip();
    let q_frac = match specs.q_prime {
        Exponent::Infinity => 1.0,
        Exponent::Finite(q) => q / (q + 1.0),
    };
    let interpolation_alpha = ps + ps * q_frac;
    let (interpolation_lhs, interpolation_rhs) = if interpolation_alpha > 0.0 {
        let g = power(&u_inner, 2.0 * interpolation_alpha);
        let lhs = st_norm(
            &g,
            NormSpec::new(
                p_star.scale(interpolation_alpha),
                p_prime_star.scale(interpolation_alpha),
            ),
        )?;
        let rhs = st_norm(&g, NormSpec::new(Exponent::Finite(1.0), Exponent::Infinity))?
            + st_norm(&g, NormSpec::new(Exponent::Infinity, specs.q_prime.sobolev_time()))?;
        (lhs, rhs)
    } else {
        (0.0, 0.0)
    };

    Ok(EnergyReport {
        n,
        sup_term,
        dirichlet_term,
        mu_norm,
        power_norm,
        gamma,
        rhs_bound,
        implied_constant,
        interpolation_alpha,
        interpolation_lhs,
        interpolation_rhs,
    })
}
