//! Exact event-driven simulation of the variable-speed walk among
//! time-dependent conductances.
//!
//! From site `x` at time `J_k` the walk waits until the integrated vertex
//! rate `int mu_u(x) du` reaches an `Exp(1)` variate, then steps to `x + 1`
//! with probability `w(x, x+1) / mu(x)`. Rates are piecewise constant, so
//! the waiting time is found by walking the change points and inverting a
//! linear function on the last segment; there is no time discretization.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{DynamicConductanceField, Edge, EdgeSchedule};
use crate::error::{param, Error, Result};

/// Jump cap per walker; reaching it means the path exploded.
pub const DEFAULT_EXPLOSION_CAP: u64 = 1_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordMode {
    FullPath,
    EndpointOnly,
    /// Positions at `start + horizon * k / 2^levels` for `k = 1..=2^levels`.
    DyadicTimes { levels: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkerConfig {
    pub horizon: f64,
    pub seed: u64,
    pub record_mode: RecordMode,
    /// Selects the random stream; walkers with distinct indices are independent.
    pub walker_index: u64,
    pub explosion_cap: u64,
}

impl WalkerConfig {
    pub fn new(horizon: f64, seed: u64) -> Self {
        Self {
            horizon,
            seed,
            record_mode: RecordMode::FullPath,
            walker_index: 0,
            explosion_cap: DEFAULT_EXPLOSION_CAP,
        }
    }

    pub fn with_mode(mut self, mode: RecordMode) -> Self {
        self.record_mode = mode;
        self
    }

    pub fn with_walker(mut self, index: u64) -> Self {
        self.walker_index = index;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return param(format!("horizon must be finite and nonnegative, got {}", self.horizon));
        }
        if self.explosion_cap == 0 {
            return param("explosion cap must be positive");
        }
        if let RecordMode::DyadicTimes { levels } = self.record_mode {
            if levels > 24 {
                return param(format!("too many dyadic levels: {levels}"));
            }
        }
        Ok(())
    }
}

/// One quenched trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub start_time: f64,
    pub start_site: i64,
    pub horizon: f64,
    /// Jump times `J_1 < J_2 < ...`; empty unless the path was recorded in full.
    pub jump_times: Vec<f64>,
    /// Site occupied right after each jump.
    pub sites: Vec<i64>,
    /// `(time, site)` marks for [`RecordMode::DyadicTimes`].
    pub marks: Vec<(f64, i64)>,
    pub jump_count: u64,
    pub end_site: i64,
    pub full: bool,
}

impl PathSample {
    pub fn end_time(&self) -> f64 {
        self.start_time + self.horizon
    }

    /// Position at time `t` (càdlàg). Needs a full path.
    pub fn site_at(&self, t: f64) -> Result<i64> {
        if !self.full {
            return param("path was not recorded in full");
        }
        if !(t >= self.start_time && t <= self.end_time()) {
            return Err(Error::Range(format!(
                "time {t} outside [{}, {}]",
                self.start_time,
                self.end_time()
            )));
        }
        let idx = self.jump_times.partition_point(|&j| j <= t);
        Ok(if idx == 0 {
            self.start_site
        } else {
            self.sites[idx - 1]
        })
    }

    /// Writes rows `walker_id,jump_index,time,site`, with jump index 0 for the start.
    pub fn write_csv_rows<W: Write>(&self, out: &mut W, walker_id: u64) -> io::Result<()> {
        writeln!(out, "{walker_id},0,{},{}", self.start_time, self.start_site)?;
        for (k, (t, x)) in self.jump_times.iter().zip(&self.sites).enumerate() {
            writeln!(out, "{walker_id},{},{t},{x}", k + 1)?;
        }
        Ok(())
    }
}

pub const PATH_CSV_HEADER: &str = "walker_id,jump_index,time,site";
pub const ENDPOINT_CSV_HEADER: &str = "walker_id,time,value";

/// Position of one edge's schedule relative to an absolute (base) time.
#[derive(Clone, Copy)]
struct EdgeCursor<'a> {
    schedule: &'a EdgeSchedule,
    period: f64,
    /// Index of the current period; the cycle origin is `cycle * period`,
    /// matching the field's change times exactly.
    cycle: f64,
    cycle_start: f64,
    segment: usize,
}

impl<'a> EdgeCursor<'a> {
    fn locate(field: &'a DynamicConductanceField, base_edge: usize, u: f64) -> Self {
        let schedule = field.schedule(base_edge);
        match field.time_period().length() {
            Some(period) if schedule.breaks.len() > 1 => {
                let mut k = (u / period).floor();
                let mut r = u - k * period;
                if r < 0.0 {
                    k -= 1.0;
                    r += period;
                } else if r >= period {
                    k += 1.0;
                    r -= period;
                }
                Self {
                    schedule,
                    period,
                    cycle: k,
                    cycle_start: k * period,
                    segment: schedule.segment(r),
                }
            }
            _ => Self {
                schedule,
                period: f64::INFINITY,
                cycle: 0.0,
                cycle_start: 0.0,
                segment: 0,
            },
        }
    }

    #[inline]
    fn value(&self) -> f64 {
        self.schedule.values[self.segment]
    }

    #[inline]
    fn next_change(&self) -> f64 {
        let breaks = &self.schedule.breaks;
        if breaks.len() == 1 {
            f64::INFINITY
        } else if self.segment + 1 < breaks.len() {
            self.cycle_start + breaks[self.segment + 1]
        } else {
            (self.cycle + 1.0) * self.period
        }
    }

    #[inline]
    fn advance(&mut self) {
        self.segment += 1;
        if self.segment == self.schedule.breaks.len() {
            self.segment = 0;
            self.cycle += 1.0;
            self.cycle_start = self.cycle * self.period;
        }
    }
}

/// The two edges incident to a site.
#[derive(Clone, Copy)]
struct SiteClock<'a> {
    left: EdgeCursor<'a>,
    right: EdgeCursor<'a>,
}

impl<'a> SiteClock<'a> {
    fn locate(field: &'a DynamicConductanceField, x: i64, u: f64) -> Self {
        Self {
            left: EdgeCursor::locate(field, field.base_edge(x - 1), u),
            right: EdgeCursor::locate(field, field.base_edge(x), u),
        }
    }

    #[inline]
    fn rate(&self) -> f64 {
        self.left.value() + self.right.value()
    }

    /// Moves both cursors past every change point at or before `u`.
    #[inline]
    fn catch_up(&mut self, u: f64) {
        while self.left.next_change() <= u {
            self.left.advance();
        }
        while self.right.next_change() <= u {
            self.right.advance();
        }
    }

    /// Inverts `int_{u0}^{u0+h} mu = z`. Returns `(u0 + h, h)` and leaves the
    /// cursors on the segments containing `u0 + h`.
    #[inline]
    fn hold(&mut self, u0: f64, z: f64) -> (f64, f64) {
        let mut u = u0;
        let mut remaining = z;
        let mut elapsed = 0.0;
        // rounding carried by `remaining` and `elapsed`, so long holds over
        // many change points stay within a few ulps of the exact inversion
        let mut remaining_err = 0.0;
        let mut elapsed_err = 0.0;
        loop {
            let rate = self.rate();
            let next = self.left.next_change().min(self.right.next_change());
            let span = next - u;
            let capacity = rate * span;
            if !(capacity < remaining + remaining_err) {
                let dt = (remaining + remaining_err) / rate;
                let end = u + dt;
                self.catch_up(end);
                let (h, h_err) = two_sum(elapsed, dt);
                return (end, h + (h_err + elapsed_err));
            }
            let capacity_err = rate.mul_add(span, -capacity);
            let (r, r_err) = two_sum(remaining, -capacity);
            remaining = r;
            remaining_err += r_err - capacity_err;
            let (e, e_err) = two_sum(elapsed, span);
            elapsed = e;
            elapsed_err += e_err;
            u = next;
            self.catch_up(u);
        }
    }
}

/// `a + b = s + err` exactly.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// The waiting time `h >= 0` with `int_{t0}^{t0+h} mu_u(x) du = z`.
pub fn sample_holding(field: &DynamicConductanceField, t0: f64, x: i64, z: f64) -> f64 {
    if z <= 0.0 {
        return 0.0;
    }
    let u0 = field.base_time(t0);
    let mut clock = SiteClock::locate(field, x, u0);
    clock.hold(u0, z).1
}

/// Nearest-neighbour target of a jump from `x` at time `t`, given a uniform
/// variate `u` in `[0, 1)`.
pub fn sample_jump_target(field: &DynamicConductanceField, t: f64, x: i64, u: f64) -> i64 {
    let right = field.eval(t, Edge::new(x));
    if u < right / field.mu(t, x) {
        x + 1
    } else {
        x - 1
    }
}

/// `int_{t0}^{t1} mu_u(x) du`, summed segment by segment from the field's
/// change points.
pub fn integrated_rate(field: &DynamicConductanceField, x: i64, t0: f64, t1: f64) -> f64 {
    let mut cuts = vec![t0];
    cuts.extend(field.change_times_in(t0, t1));
    cuts.push(t1);
    cuts.windows(2)
        .map(|w| field.mu(0.5 * (w[0] + w[1]), x) * (w[1] - w[0]))
        .sum()
}

/// Random stream of one walker: two 64-bit words per jump, so jump `k` of
/// walker `i` always reads the same words regardless of scheduling.
pub(crate) struct WalkerStream(ChaCha8Rng);

impl WalkerStream {
    pub(crate) fn new(seed: u64, walker_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(walker_index);
        Self(rng)
    }

    /// `(Exp(1) variate, uniform variate)` for the next jump.
    #[inline]
    pub(crate) fn next_jump(&mut self) -> (f64, f64) {
        let a: f64 = self.0.random();
        let b: f64 = self.0.random();
        (-(1.0 - a).ln(), b)
    }
}

/// Core event loop. `on_jump` receives `(base_time_of_jump, site_before,
/// site_after)` and is called once per jump; the loop stops at the horizon.
fn run_walker<F>(
    field: &DynamicConductanceField,
    s: f64,
    x: i64,
    cfg: &WalkerConfig,
    mut on_jump: F,
) -> Result<(i64, u64)>
where
    F: FnMut(f64, i64, i64),
{
    let (offset, _) = field.offsets();
    let mut u = field.base_time(s);
    let u_end = field.base_time(s + cfg.horizon);
    let mut site = x;
    let mut clock = SiteClock::locate(field, site, u);
    let mut stream = WalkerStream::new(cfg.seed, cfg.walker_index);
    let mut jumps = 0_u64;
    loop {
        let (z, pick) = stream.next_jump();
        let (u_jump, _) = clock.hold(u, z);
        if u_jump > u_end {
            break;
        }
        if jumps >= cfg.explosion_cap {
            return Err(Error::Explosion {
                cap: cfg.explosion_cap,
                time: u_jump - offset,
            });
        }
        let right = clock.right.value();
        let target = if pick < right / (right + clock.left.value()) {
            site + 1
        } else {
            site - 1
        };
        let fresh = |edge: i64| EdgeCursor::locate(field, field.base_edge(edge), u_jump);
        clock = if target > site {
            SiteClock {
                left: clock.right,
                right: fresh(target),
            }
        } else {
            SiteClock {
                left: fresh(target - 1),
                right: clock.left,
            }
        };
        on_jump(u_jump, site, target);
        site = target;
        u = u_jump;
        jumps += 1;
    }
    Ok((site, jumps))
}

/// Simulates one walker started at `(s, x)` under the quenched law.
pub fn simulate(
    field: &DynamicConductanceField,
    s: f64,
    x: i64,
    cfg: &WalkerConfig,
) -> Result<PathSample> {
    cfg.validate()?;
    let (offset, _) = field.offsets();
    let mut jump_times = Vec::new();
    let mut sites = Vec::new();
    let mut marks = Vec::new();
    let full = cfg.record_mode == RecordMode::FullPath;

    let (end_site, jump_count) = match cfg.record_mode {
        RecordMode::FullPath => run_walker(field, s, x, cfg, |u, _, to| {
            jump_times.push(u - offset);
            sites.push(to);
        })?,
        RecordMode::EndpointOnly => run_walker(field, s, x, cfg, |_, _, _| {})?,
        RecordMode::DyadicTimes { levels } => {
            let count = 1_u64 << levels;
            let times: Vec<f64> = (1..=count)
                .map(|k| s + cfg.horizon * k as f64 / count as f64)
                .collect();
            let observed = observe_at(field, s, x, cfg, &times)?;
            marks = times.into_iter().zip(observed.sites).collect();
            (observed.end_site, observed.jump_count)
        }
    };
    Ok(PathSample {
        start_time: s,
        start_site: x,
        horizon: cfg.horizon,
        jump_times,
        sites,
        marks,
        jump_count,
        end_site,
        full,
    })
}

/// Positions of one walker at fixed times, without storing the path.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub sites: Vec<i64>,
    pub end_site: i64,
    pub jump_count: u64,
}

/// Runs one walker and records `X_t` at each of `times` (ascending, inside
/// `[s, s + horizon]`). Uses the same random stream as [`simulate`].
pub fn observe_at(
    field: &DynamicConductanceField,
    s: f64,
    x: i64,
    cfg: &WalkerConfig,
    times: &[f64],
) -> Result<Observation> {
    cfg.validate()?;
    if times.windows(2).any(|w| w[0] > w[1]) {
        return param("observation times must be ascending");
    }
    if let (Some(&first), Some(&last)) = (times.first(), times.last()) {
        if first < s || last > s + cfg.horizon {
            return Err(Error::Range(format!(
                "observation times [{first}, {last}] outside [{s}, {}]",
                s + cfg.horizon
            )));
        }
    }
    let base_times: Vec<f64> = times.iter().map(|&t| field.base_time(t)).collect();
    let mut sites = Vec::with_capacity(times.len());
    let mut cursor = 0;
    let (end_site, jump_count) = run_walker(field, s, x, cfg, |u, from, _| {
        while cursor < base_times.len() && base_times[cursor] < u {
            sites.push(from);
            cursor += 1;
        }
    })?;
    sites.resize(times.len(), end_site);
    Ok(Observation {
        sites,
        end_site,
        jump_count,
    })
}

/// Diffusive rescaling `X_{n^2 t} / n` of a full path, for `t` measured from
/// the path's start time.
pub fn rescale(path: &PathSample, n: u32, times: &[f64]) -> Result<Vec<f64>> {
    if n == 0 {
        return param("scale n must be positive");
    }
    let scale = f64::from(n);
    times
        .iter()
        .map(|&t| {
            let real = scale * scale * t;
            if !(t >= 0.0 && real <= path.horizon) {
                return Err(Error::Range(format!(
                    "time {t} maps to {real}, outside the horizon {}",
                    path.horizon
                )));
            }
            Ok(path.site_at(path.start_time + real)? as f64 / scale)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_environment, EnvironmentModel, TimePeriod};

    fn constant() -> DynamicConductanceField {
        build_environment(
            &EnvironmentModel::Constant { value: 1.0 },
            4,
            TimePeriod::Static,
            0,
        )
        .unwrap()
    }

    fn two_rate() -> DynamicConductanceField {
        // mu(0) = 1 on [0, 1) and 3 on [1, 2): both incident edges switch
        let mut edges = vec![
            EdgeSchedule {
                breaks: vec![0.0],
                values: vec![1.0],
            };
            4
        ];
        edges[3] = EdgeSchedule {
            breaks: vec![0.0, 1.0],
            values: vec![0.5, 1.5],
        };
        edges[0] = edges[3].clone();
        DynamicConductanceField::from_schedules(TimePeriod::Periodic(2.0), edges).unwrap()
    }

    #[test]
    fn holding_constant_rate() {
        let f = constant();
        let h = sample_holding(&f, 3.0, 0, std::f64::consts::LN_2);
        assert!((h - std::f64::consts::LN_2 / 2.0).abs() < 1e-16);
        assert_eq!(sample_holding(&f, 3.0, 0, 0.0), 0.0);
    }

    #[test]
    fn holding_piecewise_rate() {
        let f = two_rate();
        let h = sample_holding(&f, 0.0, 0, 2.0);
        assert!((h - (1.0 + 1.0 / 3.0)).abs() < 1e-15, "{h}");
        // wraps into the next period: 1 + 3 + 1 = 5 over [0, 3)
        let h = sample_holding(&f, 0.0, 0, 5.0);
        assert!((h - 3.0).abs() < 1e-14, "{h}");
    }

    #[test]
    fn jump_target_thresholds() {
        let mut edges = vec![
            EdgeSchedule {
                breaks: vec![0.0],
                values: vec![1.0],
            };
            4
        ];
        edges[1].values[0] = 2.0;
        let f = DynamicConductanceField::from_schedules(TimePeriod::Static, edges).unwrap();
        assert_eq!(sample_jump_target(&f, 0.0, 1, 0.5), 2);
        assert_eq!(sample_jump_target(&f, 0.0, 1, 0.7), 0);
        let c = constant();
        assert_eq!(sample_jump_target(&c, 0.0, 5, 0.499), 6);
        assert_eq!(sample_jump_target(&c, 0.0, 5, 0.501), 4);
    }

    #[test]
    fn zero_horizon_is_empty() {
        let p = simulate(&two_rate(), 0.3, 5, &WalkerConfig::new(0.0, 9)).unwrap();
        assert!(p.jump_times.is_empty());
        assert_eq!(p.end_site, 5);
    }

    #[test]
    fn path_invariants_and_reproducibility() {
        let f = two_rate();
        let cfg = WalkerConfig::new(50.0, 11).with_walker(3);
        let a = simulate(&f, 0.25, 0, &cfg).unwrap();
        let b = simulate(&f, 0.25, 0, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.jump_times.is_empty());
        assert!(a.jump_times.windows(2).all(|w| w[0] < w[1]));
        assert!(a.jump_times[0] > 0.25 && *a.jump_times.last().unwrap() <= 50.25);
        let mut prev = 0;
        for &x in &a.sites {
            assert_eq!((x - prev).abs(), 1);
            prev = x;
        }
        assert_eq!(a.end_site, prev);
        assert_eq!(a.jump_count as usize, a.sites.len());

        // endpoint-only and dyadic modes see the same randomness
        let e = simulate(&f, 0.25, 0, &cfg.clone().with_mode(RecordMode::EndpointOnly)).unwrap();
        assert_eq!(e.end_site, a.end_site);
        let d = simulate(&f, 0.25, 0, &cfg.clone().with_mode(RecordMode::DyadicTimes { levels: 3 }))
            .unwrap();
        assert_eq!(d.marks.len(), 8);
        for (t, x) in &d.marks {
            assert_eq!(*x, a.site_at(*t).unwrap());
        }
    }

    #[test]
    fn explosion_cap_fires() {
        let mut cfg = WalkerConfig::new(100.0, 1);
        cfg.explosion_cap = 10;
        assert!(matches!(
            simulate(&constant(), 0.0, 0, &cfg),
            Err(Error::Explosion { cap: 10, .. })
        ));
    }

    #[test]
    fn rescaling() {
        let path = PathSample {
            start_time: 0.0,
            start_site: 0,
            horizon: 500.0,
            jump_times: vec![10.0, 399.0],
            sites: vec![1, 7],
            marks: vec![],
            jump_count: 2,
            end_site: 7,
            full: true,
        };
        assert_eq!(rescale(&path, 2, &[100.0]).unwrap(), vec![3.5]);
        assert_eq!(rescale(&path, 1, &[5.0, 10.0, 400.0]).unwrap(), vec![0.0, 1.0, 7.0]);
        assert!(matches!(rescale(&path, 2, &[126.0]), Err(Error::Range(_))));
        let still = PathSample {
            jump_times: vec![],
            sites: vec![],
            end_site: 0,
            ..path
        };
        assert_eq!(rescale(&still, 3, &[0.0, 10.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn csv_rows() {
        let p = simulate(&constant(), 0.0, 0, &WalkerConfig::new(1.0, 2)).unwrap();
        let mut buf = Vec::new();
        p.write_csv_rows(&mut buf, 4).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), p.sites.len() + 1);
        assert!(text.starts_with("4,0,0,0"));
    }
}
