//! Sublinearity diagnostics of the corrector over parabolic boxes
//! `Q(n) = [0, n^2] x {-n, ..., n}`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{solve, HarmonicTable, SolveOptions};
use crate::env::{build_environment, DynamicConductanceField, EnvironmentModel, TimePeriod};
use crate::error::{param, Result};

/// `max |chi / n|` and the `(1, 1)` box average of `|chi / n|` over `Q(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SublinearityRow {
    pub n: u32,
    pub sites: usize,
    pub linf: f64,
    pub l1: f64,
}

/// Profiles one table. Space outside the cell uses the periodic extension
/// `chi(t, x + L) = chi(t, x) + (1 - slope) L`. Time integrals use the
/// composite midpoint rule with unit step; the maximum runs over the unit
/// grid and the midpoints.
pub fn sublinearity_profile(table: &HarmonicTable, n_values: &[u32]) -> Result<Vec<SublinearityRow>> {
    let mut cache: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut psi_at = |t: f64| -> Vec<f64> {
        let key = match table.period() {
            None => 0,
            Some(p) => t.rem_euclid(p).to_bits(),
        };
        cache.entry(key).or_insert_with(|| table.psi_at(t)).clone()
    };
    n_values
        .iter()
        .map(|&n| {
            if n == 0 {
                return param("box radius n must be positive");
            }
            let scale = f64::from(n);
            let radius = i64::from(n);
            let steps = u64::from(n) * u64::from(n);
            let row_stats = |psi: &[f64]| {
                let mut max = 0.0_f64;
                let mut sum = 0.0;
                for x in -radius..=radius {
                    let v = ((x as f64 - table.phi_from(psi, x)) / scale).abs();
                    max = max.max(v);
                    sum += v;
                }
                (max, sum / (2 * radius + 1) as f64)
            };
            let (linf, l1) = if table.period().is_none() {
                row_stats(&psi_at(0.0))
            } else {
                let mut linf = 0.0_f64;
                let mut l1 = 0.0;
                for j in 0..=steps {
                    linf = linf.max(row_stats(&psi_at(j as f64)).0);
                    if j < steps {
                        let (m, avg) = row_stats(&psi_at(j as f64 + 0.5));
                        linf = linf.max(m);
                        l1 += avg;
                    }
                }
                (linf, l1 / steps as f64)
            };
            Ok(SublinearityRow {
                n,
                sites: table.sites(),
                linf,
                l1,
            })
        })
        .collect()
}

/// Solves the field's cell problem and profiles it.
pub fn sublinearity_for_field(
    field: &DynamicConductanceField,
    n_values: &[u32],
    opts: SolveOptions,
) -> Result<Vec<SublinearityRow>> {
    sublinearity_profile(&solve(field, opts)?, n_values)
}

/// Profiles with the ring size growing with the box: for each `n` a fresh
/// field with `L = sites_per_n * n` is drawn from `model`.
pub fn scaled_sublinearity(
    model: &EnvironmentModel,
    n_values: &[u32],
    sites_per_n: usize,
    period: TimePeriod,
    seed: u64,
    opts: SolveOptions,
) -> Result<Vec<SublinearityRow>> {
    if sites_per_n == 0 {
        return param("sites_per_n must be positive");
    }
    n_values
        .iter()
        .map(|&n| {
            if n == 0 {
                return param("box radius n must be positive");
            }
            let l = (sites_per_n * n as usize).max(2);
            let field = build_environment(model, l, period, seed ^ u64::from(n))?;
            let table = solve(&field, opts)?;
            Ok(sublinearity_profile(&table, &[n])?.remove(0))
        })
        .collect()
}
