//! Monte Carlo statistics for the invariance principle: variance scaling,
//! Kolmogorov-Smirnov tests, martingale increments and quadratic variation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::corrector::{variance_formula, HarmonicTable, SublinearityRow};
use crate::env::DynamicConductanceField;
use crate::error::{param, Error, Result};
use crate::walk::{observe_at, RecordMode, WalkerConfig};

/// Smallest ensemble accepted by [`estimate_sigma2`].
pub const MIN_VARIANCE_WALKERS: usize = 1000;

/// Below this sample size the asymptotic KS constant is unreliable.
pub const KS_MIN_SAMPLE: usize = 100;

const KS_CONSTANT: f64 = 1.36;

/// Sum with a balanced binary tree; the result depends only on the order of
/// `values`, not on how the work was scheduled.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// A number with its sample size and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Estimate {
    /// `|a - b| <= k sqrt(se_a^2 + se_b^2)`.
    pub fn agrees_with(&self, other: &Estimate, k: f64) -> bool {
        (self.value - other.value).abs() <= k * self.stderr.hypot(other.stderr)
    }
}

/// Positions of many walkers in one quenched field at a common time grid.
#[derive(Debug, Clone)]
pub struct Ensemble {
    field: Arc<DynamicConductanceField>,
    seed: u64,
    start_time: f64,
    start_site: i64,
    times: Vec<f64>,
    /// `positions[i][k]` is walker `i` at `times[k]`.
    positions: Vec<Vec<i64>>,
    jumps: Vec<u64>,
}

impl Ensemble {
    /// Runs `walkers` independent walkers from `(start_time, start_site)`
    /// and records them at `times` (ascending, within `[start_time, inf)`).
    /// Walker `i` uses stream `i` of `seed`, so the result does not depend
    /// on the thread count.
    pub fn simulate(
        field: Arc<DynamicConductanceField>,
        start_time: f64,
        start_site: i64,
        times: &[f64],
        walkers: usize,
        seed: u64,
    ) -> Result<Self> {
        if walkers == 0 {
            return param("ensemble needs at least one walker");
        }
        let Some(&last) = times.last() else {
            return param("ensemble needs at least one observation time");
        };
        let horizon = last - start_time;
        if !(horizon > 0.0) {
            return param("last observation time must exceed the start time");
        }
        let runs: Vec<_> = (0..walkers as u64)
            .into_par_iter()
            .map(|i| {
                let cfg = WalkerConfig::new(horizon, seed)
                    .with_mode(RecordMode::EndpointOnly)
                    .with_walker(i);
                observe_at(&field, start_time, start_site, &cfg, times)
            })
            .collect::<Result<_>>()?;
        let (positions, jumps) = runs
            .into_iter()
            .map(|obs: crate::walk::Observation| (obs.sites, obs.jump_count))
            .unzip();
        Ok(Self {
            field,
            seed,
            start_time,
            start_site,
            times: times.to_vec(),
            positions,
            jumps,
        })
    }

    pub fn field(&self) -> &DynamicConductanceField {
        &self.field
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn walkers(&self) -> usize {
        self.positions.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn start(&self) -> (f64, i64) {
        (self.start_time, self.start_site)
    }

    pub fn positions(&self) -> &[Vec<i64>] {
        &self.positions
    }

    pub fn jump_counts(&self) -> &[u64] {
        &self.jumps
    }

    /// Index of `t` in the time grid.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        let tol = 1e-12 * (1.0 + t.abs());
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= tol)
            .ok_or_else(|| Error::Range(format!("time {t} is not in the ensemble grid")))
    }

    /// `X_t - X_s` for every walker.
    pub fn displacements(&self, t: f64) -> Result<Vec<f64>> {
        let k = self.time_index(t)?;
        Ok(self
            .positions
            .iter()
            .map(|p| (p[k] - self.start_site) as f64)
            .collect())
    }

    /// `(X_{n^2} - X_0) / n`, needs `n^2` in the grid and start time 0.
    pub fn rescaled(&self, n: u32) -> Result<Vec<f64>> {
        let scale = f64::from(n);
        let d = self.displacements(self.start_time + scale * scale)?;
        Ok(d.into_iter().map(|v| v / scale).collect())
    }

    /// `Phi(t_k, X_{t_k})` for every walker and grid time.
    fn harmonic_values(&self, table: &HarmonicTable) -> Result<Vec<Vec<f64>>> {
        if table.field() != self.field.as_ref() {
            return Err(Error::Consistency(
                "harmonic table was solved on a different field than the ensemble".into(),
            ));
        }
        let mut grid = Vec::with_capacity(self.times.len() + 1);
        grid.push(self.start_time);
        grid.extend_from_slice(&self.times);
        let rows: Vec<Vec<f64>> = grid.iter().map(|&t| table.psi_at(t)).collect();
        Ok(self
            .positions
            .iter()
            .map(|p| {
                std::iter::once(&self.start_site)
                    .chain(p)
                    .zip(&rows)
                    .map(|(&x, psi)| table.phi_from(psi, x))
                    .collect()
            })
            .collect())
    }

    /// Value of `M` at `t` given a row from `harmonic_values`.
    fn grid_slot(&self, t: f64) -> Result<usize> {
        if (t - self.start_time).abs() <= 1e-12 * (1.0 + t.abs()) {
            Ok(0)
        } else {
            Ok(self.time_index(t)? + 1)
        }
    }
}

/// Sample variance of `values` with its delete-one jackknife standard error.
pub fn jackknife_variance(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 3 {
        return param("variance needs at least three samples");
    }
    let nf = n as f64;
    let centre = mean(values);
    let dev: Vec<f64> = values.iter().map(|v| v - centre).collect();
    let s1 = pairwise_sum(&dev);
    let s2 = pairwise_sum(&dev.iter().map(|d| d * d).collect::<Vec<_>>());
    let full = (s2 - s1 * s1 / nf) / (nf - 1.0);
    let m = nf - 1.0;
    let leave_out: Vec<f64> = dev
        .iter()
        .map(|d| {
            let a = s1 - d;
            let b = s2 - d * d;
            (b - a * a / m) / (m - 1.0)
        })
        .collect();
    let avg = mean(&leave_out);
    let spread = pairwise_sum(&leave_out.iter().map(|v| (v - avg).powi(2)).collect::<Vec<_>>());
    Ok((full, ((nf - 1.0) / nf * spread).sqrt()))
}

/// Mean with the standard error `sd / sqrt(n)`.
pub fn mean_with_stderr(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return param("mean needs at least two samples");
    }
    let m = mean(values);
    let ss = pairwise_sum(&values.iter().map(|v| (v - m).powi(2)).collect::<Vec<_>>());
    Ok((m, (ss / (n as f64 - 1.0) / n as f64).sqrt()))
}

/// `Var(X_t) / (t - s)` with a jackknife standard error.
pub fn estimate_sigma2(ensemble: &Ensemble, t: f64) -> Result<Estimate> {
    if ensemble.walkers() < MIN_VARIANCE_WALKERS {
        return param(format!(
            "variance estimation needs at least {MIN_VARIANCE_WALKERS} walkers, got {}",
            ensemble.walkers()
        ));
    }
    let elapsed = t - ensemble.start_time;
    if !(elapsed > 0.0) {
        return param("variance time must be after the start time");
    }
    let (var, se) = jackknife_variance(&ensemble.displacements(t)?)?;
    Ok(Estimate {
        value: var / elapsed,
        stderr: se / elapsed,
        samples: ensemble.walkers(),
        seed: ensemble.seed,
    })
}

/// One-sample Kolmogorov-Smirnov outcome against `N(0, sigma2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsOutcome {
    pub d: f64,
    pub threshold: f64,
    pub pass: bool,
    pub samples: usize,
    /// Set when the sample is too small for the asymptotic threshold.
    pub small_sample: bool,
}

pub fn gaussian_cdf(x: f64, sigma2: f64) -> f64 {
    0.5 * erfc(-x / (2.0 * sigma2).sqrt())
}

/// KS distance to `N(0, sigma2)` with the asymptotic 95% threshold `1.36 / sqrt(m)`.
pub fn ks_gaussian(sample: &[f64], sigma2: f64) -> Result<KsOutcome> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return param(format!("sigma2 must be positive, got {sigma2}"));
    }
    if sample.is_empty() || sample.iter().any(|v| !v.is_finite()) {
        return param("KS sample must be nonempty and finite");
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = gaussian_cdf(x, sigma2);
        d = d.max((i as f64 + 1.0) / m - f).max(f - i as f64 / m);
    }
    let threshold = KS_CONSTANT / m.sqrt();
    Ok(KsOutcome {
        d,
        threshold,
        pass: d < threshold,
        samples: sorted.len(),
        small_sample: sorted.len() < KS_MIN_SAMPLE,
    })
}

/// KS test for values on the lattice `spacing Z`: each value is spread
/// uniformly over its lattice cell with a seeded generator before testing,
/// so ties do not inflate the distance. Adds `spacing^2 / 12` of variance.
pub fn ks_gaussian_lattice(sample: &[f64], sigma2: f64, spacing: f64, seed: u64) -> Result<KsOutcome> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return param("lattice spacing must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread: Vec<f64> = sample
        .iter()
        .map(|&v| v + spacing * (rng.random::<f64>() - 0.5))
        .collect();
    ks_gaussian(&spread, sigma2)
}

/// Fraction of `reps` samples of `m` exact `N(0, sigma2)` draws that the KS
/// test rejects.
pub fn ks_self_test(reps: usize, m: usize, sigma2: f64, seed: u64) -> Result<f64> {
    if reps == 0 || m == 0 {
        return param("self-test needs positive repetitions and sample size");
    }
    let sd = sigma2.sqrt();
    let rejected = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r);
            let sample: Vec<f64> = (0..m).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
            ks_gaussian(&sample, sigma2).map(|o| usize::from(!o.pass))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rejected.iter().sum::<usize>() as f64 / reps as f64)
}

/// Pooled martingale increments at one lag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleRow {
    pub lag: f64,
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
    pub seed: u64,
}

impl MartingaleRow {
    /// `|mean| / stderr`.
    pub fn z_score(&self) -> f64 {
        if self.stderr > 0.0 {
            self.mean.abs() / self.stderr
        } else if self.mean == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Mean of `M_{t+h} - M_t` with `M_t = Phi(t, X_t)`, pooled over
/// `t = s, s + h, s + 2h, ...` inside the grid. Increments at disjoint
/// windows are uncorrelated for a martingale, so the pooled standard error
/// is the plain one.
pub fn martingale_residual(
    ensemble: &Ensemble,
    table: &HarmonicTable,
    lags: &[f64],
) -> Result<Vec<MartingaleRow>> {
    let values = ensemble.harmonic_values(table)?;
    let end = *ensemble.times.last().expect("nonempty grid");
    lags.iter()
        .map(|&h| {
            if !(h > 0.0) {
                return param(format!("lag must be positive, got {h}"));
            }
            let mut starts = Vec::new();
            let mut k = 0u32;
            loop {
                let t = ensemble.start_time + f64::from(k) * h;
                if t + h > end * (1.0 + 1e-12) {
                    break;
                }
                starts.push(t);
                k += 1;
            }
            increments_at(ensemble, &values, h, &starts)
        })
        .collect()
}

/// Mean of `M_{t+h} - M_t` pooled over the given start times.
pub fn martingale_residual_at(
    ensemble: &Ensemble,
    table: &HarmonicTable,
    lag: f64,
    starts: &[f64],
) -> Result<MartingaleRow> {
    let values = ensemble.harmonic_values(table)?;
    increments_at(ensemble, &values, lag, starts)
}

fn increments_at(
    ensemble: &Ensemble,
    values: &[Vec<f64>],
    lag: f64,
    starts: &[f64],
) -> Result<MartingaleRow> {
    if starts.is_empty() {
        return param(format!("no start times fit lag {lag} in the ensemble grid"));
    }
    let slots: Vec<(usize, usize)> = starts
        .iter()
        .map(|&t| Ok((ensemble.grid_slot(t)?, ensemble.grid_slot(t + lag)?)))
        .collect::<Result<_>>()?;
    let increments: Vec<f64> = values
        .iter()
        .flat_map(|row| slots.iter().map(move |&(a, b)| row[b] - row[a]))
        .collect();
    let (mean, stderr) = mean_with_stderr(&increments)?;
    Ok(MartingaleRow {
        lag,
        mean,
        stderr,
        samples: increments.len(),
        seed: ensemble.seed,
    })
}

/// Empirical `E[(M_t - M_s)^2] / (t - s)` against the variance formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QvMatch {
    pub empirical: Estimate,
    pub formula: f64,
    pub ratio: f64,
}

pub fn qv_match(ensemble: &Ensemble, table: &HarmonicTable, t: f64) -> Result<QvMatch> {
    let values = ensemble.harmonic_values(table)?;
    let elapsed = t - ensemble.start_time;
    if !(elapsed > 0.0) {
        return param("quadratic variation time must be after the start time");
    }
    let slot = ensemble.grid_slot(t)?;
    let squares: Vec<f64> = values
        .iter()
        .map(|row| (row[slot] - row[0]).powi(2) / elapsed)
        .collect();
    let (mean, stderr) = mean_with_stderr(&squares)?;
    let formula = variance_formula(table);
    Ok(QvMatch {
        empirical: Estimate {
            value: mean,
            stderr,
            samples: squares.len(),
            seed: ensemble.seed,
        },
        formula,
        ratio: mean / formula,
    })
}

/// Ordinary least squares `y = slope x + intercept` with `R^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return param("fit needs at least two paired points");
    }
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return param("fit needs distinct abscissae");
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared: if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) },
    })
}

/// One KS row of a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsRow {
    pub n: u32,
    pub sigma2: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub outcome: KsOutcome,
}

/// A named pass/fail check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Everything an experiment measured, with the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StatReport {
    pub sigma2_mc: Option<Estimate>,
    pub sigma2_formula: Option<f64>,
    pub ks: Vec<KsRow>,
    pub martingale_residuals: Vec<MartingaleRow>,
    pub quadratic_variation: Option<QvMatch>,
    pub sublinearity: Vec<SublinearityRow>,
    pub checks: Vec<Check>,
    pub metadata: serde_json::Value,
}

impl StatReport {
    pub fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        });
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
