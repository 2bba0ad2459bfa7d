//! Conductance environments on a periodic ring.
//!
//! A [`DynamicConductanceField`] stores, for every edge `{x, x+1}` with
//! `0 <= x < L`, a càdlàg piecewise-constant schedule over one time period.
//! Queries at arbitrary `(t, x)` wrap periodically in space and time. Shifts
//! are stored as offsets, so a shifted field shares its schedules with the
//! original and evaluates bit-identically to the unshifted query.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

/// Format tag written into serialized fields.
pub const FIELD_FORMAT: &str = "dynrcm-field/1";

/// The nearest-neighbour bond `{left_site, left_site + 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub left_site: i64,
}

impl Edge {
    pub const fn new(left_site: i64) -> Self {
        Self { left_site }
    }

    /// The bond joining two neighbouring sites, in either orientation.
    pub fn between(x: i64, y: i64) -> Option<Self> {
        match y - x {
            1 => Some(Self::new(x)),
            -1 => Some(Self::new(y)),
            _ => None,
        }
    }

    pub const fn right_site(self) -> i64 {
        self.left_site + 1
    }
}

/// Distribution of a single conductance value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum Marginal {
    PointMass { value: f64 },
    Uniform { low: f64, high: f64 },
    /// `high` with probability `p_high`, otherwise `low`.
    TwoPoint { low: f64, high: f64, p_high: f64 },
    /// `P(w > s) = s^-alpha` for `s >= 1`: moments `E[w^p]` finite iff `p < alpha`.
    Pareto { alpha: f64 },
    /// `1/w` is Pareto: moments `E[w^-q]` finite iff `q < alpha`.
    InversePareto { alpha: f64 },
    /// Even mixture of [`Marginal::Pareto`] and [`Marginal::InversePareto`].
    TwoSidedPareto { alpha_upper: f64, alpha_lower: f64 },
}

impl Marginal {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                param(format!("{name} must be positive and finite, got {v}"))
            }
        };
        match *self {
            Marginal::PointMass { value } => positive("point mass value", value),
            Marginal::Uniform { low, high } => {
                positive("uniform low", low)?;
                positive("uniform high", high)?;
                if low > high {
                    return param(format!("uniform bounds reversed: [{low}, {high}]"));
                }
                Ok(())
            }
            Marginal::TwoPoint { low, high, p_high } => {
                positive("two-point low", low)?;
                positive("two-point high", high)?;
                if !(0.0..=1.0).contains(&p_high) {
                    return param(format!("two-point probability {p_high} outside [0, 1]"));
                }
                Ok(())
            }
            Marginal::Pareto { alpha } | Marginal::InversePareto { alpha } => {
                positive("Pareto exponent", alpha)
            }
            Marginal::TwoSidedPareto {
                alpha_upper,
                alpha_lower,
            } => {
                positive("upper Pareto exponent", alpha_upper)?;
                positive("lower Pareto exponent", alpha_lower)
            }
        }
    }

    /// Draws one value. Every branch returns a strictly positive finite number;
    /// Pareto draws use `1 - U`, which lies in `(0, 1]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let w = match *self {
            Marginal::PointMass { value } => value,
            Marginal::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            Marginal::TwoPoint { low, high, p_high } => {
                if rng.random::<f64>() < p_high {
                    high
                } else {
                    low
                }
            }
            Marginal::Pareto { alpha } => (1.0 - rng.random::<f64>()).powf(-1.0 / alpha),
            Marginal::InversePareto { alpha } => (1.0 - rng.random::<f64>()).powf(1.0 / alpha),
            Marginal::TwoSidedPareto {
                alpha_upper,
                alpha_lower,
            } => {
                if rng.random::<bool>() {
                    (1.0 - rng.random::<f64>()).powf(-1.0 / alpha_upper)
                } else {
                    (1.0 - rng.random::<f64>()).powf(1.0 / alpha_lower)
                }
            }
        };
        w.clamp(f64::MIN_POSITIVE, f64::MAX)
    }
}

/// How conductances are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvironmentModel {
    Constant {
        value: f64,
    },
    StaticIid {
        marginal: Marginal,
    },
    /// Edge `x` carries `pattern[x mod pattern.len()]`.
    StaticPeriodic {
        pattern: Vec<f64>,
    },
    /// Each edge resamples from `marginal` at the rings of its own
    /// exponential clock of rate `switch_rate`.
    MarkovSwitching {
        marginal: Marginal,
        switch_rate: f64,
    },
    /// Deterministic slabs: during the `k`-th slab (length `durations[k]`),
    /// edge `x` carries `patterns[k][x mod patterns[k].len()]`.
    TimePeriodic {
        durations: Vec<f64>,
        patterns: Vec<Vec<f64>>,
    },
}

/// Time period of a field; static fields never change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimePeriod {
    Static,
    Periodic(f64),
}

impl TimePeriod {
    pub fn length(self) -> Option<f64> {
        match self {
            TimePeriod::Static => None,
            TimePeriod::Periodic(t) => Some(t),
        }
    }
}

/// One edge's values over a single time period. `breaks[0] == 0` and
/// `values[i]` holds on `[breaks[i], breaks[i + 1])`, the last value up to
/// the period end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSchedule {
    pub breaks: Vec<f64>,
    pub values: Vec<f64>,
}

impl EdgeSchedule {
    fn constant(value: f64) -> Self {
        Self {
            breaks: vec![0.0],
            values: vec![value],
        }
    }

    /// Segment index holding at the in-period time `r`.
    #[inline]
    pub(crate) fn segment(&self, r: f64) -> usize {
        self.breaks.partition_point(|&b| b <= r).max(1) - 1
    }

    fn check(&self, period: Option<f64>) -> Result<()> {
        if self.breaks.is_empty() || self.breaks.len() != self.values.len() {
            return Err(Error::Consistency("schedule breaks/values length mismatch".into()));
        }
        if self.breaks[0] != 0.0 {
            return Err(Error::Consistency("schedule must start at time 0".into()));
        }
        if self.breaks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Consistency("schedule breaks not strictly increasing".into()));
        }
        match period {
            None if self.breaks.len() > 1 => {
                return Err(Error::Consistency("static field with change points".into()))
            }
            Some(t) if *self.breaks.last().unwrap() >= t => {
                return Err(Error::Consistency("change point beyond the time period".into()))
            }
            _ => {}
        }
        if let Some(v) = self.values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Consistency(format!("non-elliptic conductance {v}")));
        }
        Ok(())
    }
}

/// Positive, space- and time-periodic edge weights `w_t(e)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicConductanceField {
    format: String,
    model: EnvironmentModel,
    seed: u64,
    space_period: usize,
    time_period: TimePeriod,
    time_offset: f64,
    site_offset: i64,
    edges: Vec<EdgeSchedule>,
}

/// Builds a field from a model. Equal inputs give bit-identical fields.
pub fn build_environment(
    model: &EnvironmentModel,
    space_period: usize,
    time_period: TimePeriod,
    seed: u64,
) -> Result<DynamicConductanceField> {
    if space_period < 2 {
        return param(format!("space period must be at least 2, got {space_period}"));
    }
    if let TimePeriod::Periodic(t) = time_period {
        if !(t.is_finite() && t > 0.0) {
            return param(format!("time period must be positive and finite, got {t}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = space_period;
    let check_pattern = |pattern: &[f64]| -> Result<()> {
        if pattern.is_empty() || l % pattern.len() != 0 {
            return param(format!(
                "pattern length {} must divide the space period {l}",
                pattern.len()
            ));
        }
        for &w in pattern {
            Marginal::PointMass { value: w }.validate()?;
        }
        Ok(())
    };

    let edges = match model {
        EnvironmentModel::Constant { value } => {
            Marginal::PointMass { value: *value }.validate()?;
            vec![EdgeSchedule::constant(*value); l]
        }
        EnvironmentModel::StaticIid { marginal } => {
            marginal.validate()?;
            (0..l)
                .map(|_| EdgeSchedule::constant(marginal.sample(&mut rng)))
                .collect()
        }
        EnvironmentModel::StaticPeriodic { pattern } => {
            check_pattern(pattern)?;
            (0..l)
                .map(|x| EdgeSchedule::constant(pattern[x % pattern.len()]))
                .collect()
        }
        EnvironmentModel::MarkovSwitching {
            marginal,
            switch_rate,
        } => {
            marginal.validate()?;
            if !(switch_rate.is_finite() && *switch_rate >= 0.0) {
                return param(format!("switch rate must be nonnegative, got {switch_rate}"));
            }
            let Some(period) = time_period.length() else {
                return param("markov-switching fields need a finite time period");
            };
            (0..l)
                .map(|_| {
                    let mut schedule = EdgeSchedule::constant(marginal.sample(&mut rng));
                    if *switch_rate > 0.0 {
                        let mut t = 0.0;
                        loop {
                            t += -(1.0 - rng.random::<f64>()).ln() / switch_rate;
                            if t >= period {
                                break;
                            }
                            if t > *schedule.breaks.last().unwrap() {
                                schedule.breaks.push(t);
                                schedule.values.push(marginal.sample(&mut rng));
                            }
                        }
                    }
                    schedule
                })
                .collect()
        }
        EnvironmentModel::TimePeriodic {
            durations,
            patterns,
        } => {
            let Some(period) = time_period.length() else {
                return param("time-periodic fields need a finite time period");
            };
            if durations.is_empty() || durations.len() != patterns.len() {
                return param("time-periodic model needs one pattern per slab duration");
            }
            if durations.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
                return param("slab durations must be positive");
            }
            let total: f64 = durations.iter().sum();
            if (total - period).abs() > 1e-12 * period {
                return param(format!(
                    "slab durations sum to {total}, expected the time period {period}"
                ));
            }
            for pattern in patterns {
                check_pattern(pattern)?;
            }
            let mut starts = Vec::with_capacity(durations.len());
            let mut acc = 0.0;
            for d in durations {
                starts.push(acc);
                acc += d;
            }
            (0..l)
                .map(|x| EdgeSchedule {
                    breaks: starts.clone(),
                    values: patterns.iter().map(|p| p[x % p.len()]).collect(),
                })
                .collect()
        }
    };

    let field = DynamicConductanceField {
        format: FIELD_FORMAT.to_string(),
        model: model.clone(),
        seed,
        space_period,
        time_period,
        time_offset: 0.0,
        site_offset: 0,
        edges,
    };
    field.validate()?;
    Ok(field)
}

impl DynamicConductanceField {
    /// Builds a field directly from explicit per-edge schedules.
    pub fn from_schedules(time_period: TimePeriod, edges: Vec<EdgeSchedule>) -> Result<Self> {
        if edges.len() < 2 {
            return param("need at least two edges");
        }
        let field = Self {
            format: FIELD_FORMAT.to_string(),
            model: EnvironmentModel::Constant { value: 1.0 },
            seed: 0,
            space_period: edges.len(),
            time_period,
            time_offset: 0.0,
            site_offset: 0,
            edges,
        };
        field.validate()?;
        Ok(field)
    }

    fn validate(&self) -> Result<()> {
        if self.format != FIELD_FORMAT {
            return Err(Error::Consistency(format!("unknown field format {:?}", self.format)));
        }
        if self.edges.len() != self.space_period || self.space_period < 2 {
            return Err(Error::Consistency("edge table does not match space period".into()));
        }
        if !self.time_offset.is_finite() {
            return Err(Error::Consistency("non-finite time offset".into()));
        }
        let period = self.time_period.length();
        if let Some(t) = period {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Consistency(format!("invalid time period {t}")));
            }
        }
        self.edges.iter().try_for_each(|e| e.check(period))
    }

    pub fn model(&self) -> &EnvironmentModel {
        &self.model
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn space_period(&self) -> usize {
        self.space_period
    }

    pub fn time_period(&self) -> TimePeriod {
        self.time_period
    }

    pub fn is_static(&self) -> bool {
        self.time_period == TimePeriod::Static || self.edges.iter().all(|e| e.breaks.len() == 1)
    }

    pub fn offsets(&self) -> (f64, i64) {
        (self.time_offset, self.site_offset)
    }

    pub(crate) fn schedule(&self, base_edge: usize) -> &EdgeSchedule {
        &self.edges[base_edge]
    }

    pub(crate) fn base_edge(&self, left_site: i64) -> usize {
        (left_site + self.site_offset).rem_euclid(self.space_period as i64) as usize
    }

    #[inline]
    pub(crate) fn base_time(&self, t: f64) -> f64 {
        t + self.time_offset
    }

    /// In-period time for a base time, in `[0, T)`.
    #[inline]
    pub(crate) fn wrap(&self, u: f64) -> f64 {
        match self.time_period {
            TimePeriod::Static => 0.0,
            TimePeriod::Periodic(t) => {
                let r = u.rem_euclid(t);
                if r >= t {
                    0.0
                } else {
                    r
                }
            }
        }
    }

    /// The conductance `w_t(e)`; right-continuous in `t`.
    #[inline]
    pub fn eval(&self, t: f64, e: Edge) -> f64 {
        let schedule = &self.edges[self.base_edge(e.left_site)];
        if schedule.values.len() == 1 {
            return schedule.values[0];
        }
        let r = self.wrap(self.base_time(t));
        schedule.values[schedule.segment(r)]
    }

    /// `w_t(x, y)` for neighbours `x ~ y`.
    pub fn eval_pair(&self, t: f64, x: i64, y: i64) -> Result<f64> {
        Edge::between(x, y)
            .map(|e| self.eval(t, e))
            .ok_or_else(|| Error::Parameter(format!("sites {x} and {y} are not neighbours")))
    }

    /// The field `r` with `r.eval(t, {x, x+1}) = self.eval(t + s, {x+z, x+z+1})`.
    pub fn shift(&self, s: f64, z: i64) -> Self {
        let mut shifted = self.clone();
        shifted.time_offset += s;
        shifted.site_offset += z;
        shifted
    }

    /// Sum of the conductances incident to `x`.
    pub fn mu(&self, t: f64, x: i64) -> f64 {
        self.eval(t, Edge::new(x - 1)) + self.eval(t, Edge::new(x))
    }

    /// Sum of the inverse conductances incident to `x`.
    pub fn nu(&self, t: f64, x: i64) -> f64 {
        1.0 / self.eval(t, Edge::new(x - 1)) + 1.0 / self.eval(t, Edge::new(x))
    }

    /// Change points of the field inside one period, in field time, sorted,
    /// starting with 0. Static fields return `[0]`.
    pub fn period_breaks(&self) -> Vec<f64> {
        let Some(period) = self.time_period.length() else {
            return vec![0.0];
        };
        let mut out: Vec<f64> = self
            .edges
            .iter()
            .flat_map(|e| e.breaks.iter().copied())
            .map(|b| {
                let r = (b - self.time_offset).rem_euclid(period);
                if r >= period {
                    0.0
                } else {
                    r
                }
            })
            .collect();
        out.push(0.0);
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    /// All change points strictly inside `(t0, t1)`, in field time.
    pub fn change_times_in(&self, t0: f64, t1: f64) -> Vec<f64> {
        let Some(period) = self.time_period.length() else {
            return Vec::new();
        };
        if self.is_static() || !(t1 > t0) {
            return Vec::new();
        }
        let breaks = self.period_breaks();
        let first = (t0 / period).floor() as i64;
        let last = (t1 / period).ceil() as i64;
        let mut out = Vec::new();
        for k in first..=last {
            for b in &breaks {
                let t = k as f64 * period + b;
                if t > t0 && t < t1 {
                    out.push(t);
                }
            }
        }
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    /// Conductances of edges `0..L` at time `t`, in field coordinates.
    pub fn snapshot(&self, t: f64) -> Vec<f64> {
        (0..self.space_period as i64)
            .map(|x| self.eval(t, Edge::new(x)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Loads a field written by [`Self::to_json`], re-checking every invariant.
    pub fn from_json(text: &str) -> Result<Self> {
        let field: Self = serde_json::from_str(text)?;
        field.validate()?;
        Ok(field)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alternating() -> DynamicConductanceField {
        build_environment(
            &EnvironmentModel::StaticPeriodic {
                pattern: vec![1.0, 2.0],
            },
            2,
            TimePeriod::Static,
            0,
        )
        .unwrap()
    }

    fn step_field() -> DynamicConductanceField {
        // edge {0,1} jumps from 1 to 2 at t = 1; period 4
        let mut edges = vec![EdgeSchedule::constant(1.0); 4];
        edges[0] = EdgeSchedule {
            breaks: vec![0.0, 1.0],
            values: vec![1.0, 2.0],
        };
        DynamicConductanceField::from_schedules(TimePeriod::Periodic(4.0), edges).unwrap()
    }

    #[test]
    fn constant_field_is_one_everywhere() {
        let f = build_environment(
            &EnvironmentModel::Constant { value: 1.0 },
            4,
            TimePeriod::Static,
            7,
        )
        .unwrap();
        for (t, x) in [(0.0, 0), (3.5, -9), (1e6, 123)] {
            assert_eq!(f.eval(t, Edge::new(x)), 1.0);
            assert_eq!(f.mu(t, x), 2.0);
            assert_eq!(f.nu(t, x), 2.0);
        }
    }

    #[test]
    fn alternating_pattern() {
        let f = alternating();
        assert_eq!(f.eval(0.0, Edge::new(0)), 1.0);
        assert_eq!(f.eval(7.3, Edge::new(1)), 2.0);
        assert_eq!(f.eval(7.3, Edge::new(-1)), 2.0);
        assert_eq!(f.eval_pair(7.3, 2, 1).unwrap(), 2.0);
        assert!(f.eval_pair(0.0, 0, 2).is_err());
    }

    #[test]
    fn right_continuity() {
        let f = step_field();
        let e = Edge::new(0);
        assert_eq!(f.eval(0.5, e), 1.0);
        assert_eq!(f.eval(1.0, e), 2.0);
        assert_eq!(f.eval(1.5, e), 2.0);
        // periodic wrap
        assert_eq!(f.eval(4.5, e), 1.0);
        assert_eq!(f.eval(-3.0, e), 2.0);
    }

    #[test]
    fn vertex_measures() {
        let mut edges = vec![EdgeSchedule::constant(1.0); 4];
        edges[3] = EdgeSchedule::constant(3.0);
        edges[0] = EdgeSchedule::constant(2.0);
        let f = DynamicConductanceField::from_schedules(TimePeriod::Static, edges).unwrap();
        // site 0: w(-1,0) = 3, w(0,1) = 2
        assert_eq!(f.mu(0.0, 0), 5.0);
        assert!((f.nu(0.0, 0) - 5.0 / 6.0).abs() < 1e-15);

        let both = DynamicConductanceField::from_schedules(
            TimePeriod::Periodic(2.0),
            vec![
                EdgeSchedule {
                    breaks: vec![0.0, 1.0],
                    values: vec![1.0, 2.0],
                };
                3
            ],
        )
        .unwrap();
        assert_eq!(both.mu(0.5, 1), 2.0);
        assert_eq!(both.mu(1.5, 1), 4.0);
    }

    #[test]
    fn shifts() {
        let f = alternating();
        assert_eq!(f.shift(0.0, 0), f);
        let g = f.shift(0.0, 1);
        assert_eq!(g.eval(0.0, Edge::new(0)), 2.0);
        assert_eq!(g.eval(0.0, Edge::new(1)), 1.0);
        let c = build_environment(
            &EnvironmentModel::Constant { value: 1.0 },
            3,
            TimePeriod::Periodic(1.0),
            0,
        )
        .unwrap();
        assert_eq!(c.shift(0.37, -5).eval(11.1, Edge::new(4)), 1.0);

        let s = step_field();
        assert_eq!(s.shift(0.75, 0).shift(-0.75, 0), s);
        let shifted = s.shift(0.5, 0);
        assert_eq!(shifted.period_breaks(), vec![0.0, 0.5, 3.5]);
        assert_eq!(shifted.eval(0.5, Edge::new(0)), 2.0);
    }

    #[test]
    fn parameter_errors() {
        let bad = EnvironmentModel::StaticIid {
            marginal: Marginal::Pareto { alpha: 0.0 },
        };
        assert!(matches!(
            build_environment(&bad, 4, TimePeriod::Static, 0),
            Err(Error::Parameter(_))
        ));
        let c = EnvironmentModel::Constant { value: 1.0 };
        assert!(build_environment(&c, 1, TimePeriod::Static, 0).is_err());
        assert!(build_environment(&c, 4, TimePeriod::Periodic(0.0), 0).is_err());
        let ms = EnvironmentModel::MarkovSwitching {
            marginal: Marginal::PointMass { value: 1.0 },
            switch_rate: 1.0,
        };
        assert!(build_environment(&ms, 4, TimePeriod::Static, 0).is_err());
        let tp = EnvironmentModel::TimePeriodic {
            durations: vec![1.0, 1.0],
            patterns: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
        };
        assert!(build_environment(&tp, 4, TimePeriod::Periodic(3.0), 0).is_err());
        assert!(build_environment(&tp, 3, TimePeriod::Periodic(2.0), 0).is_err());
        assert!(build_environment(&tp, 4, TimePeriod::Periodic(2.0), 0).is_ok());
    }

    #[test]
    fn json_rejects_broken_tables() {
        let f = step_field();
        let text = f.to_json().unwrap();
        let broken = text.replacen("2.0", "-2.0", 1);
        assert!(DynamicConductanceField::from_json(&broken).is_err());
    }
}
