//! Harmonic coordinates and the corrector on a periodic space-time cell.
//!
//! On a ring of `L` sites with time period `T`, the harmonic coordinate is
//! written `Phi(t, x) = x + psi(t, x mod L)` with `psi` periodic in space and
//! time, and solves `d/dt Phi + L_t Phi = 0`, i.e. `d/dt psi = -A_t psi - b_t`.
//! The equation is a contraction when run backwards in time, so each slab is
//! propagated from its end to its start; the time-periodic solution is the
//! fixed point of the one-period monodromy map, found by one linear solve on
//! mean-zero vectors. The corrector is `chi = x - Phi`.

mod propagate;
mod sublinear;

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::env::{DynamicConductanceField, TimePeriod};
use crate::error::{param, Error, Result};

pub use propagate::{Backend, DENSE_MAX_SITES};
pub use sublinear::{
    scaled_sublinearity, sublinearity_for_field, sublinearity_profile, SublinearityRow,
};

use propagate::{apply_generator, dense_integral, dense_quadratic, dense_step, forcing, Uniformizer};

/// Default relative tolerance of the dynamic solver.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Gauss-Legendre nodes and weights on `[-1, 1]` used by the residual check.
const GAUSS5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_47),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_47),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_08),
    (0.906_179_845_938_664, 0.236_926_885_056_189_08),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub backend: Backend,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            backend: Backend::Auto,
        }
    }
}

/// A time interval on which every conductance is constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Slab {
    pub start: f64,
    pub end: f64,
    /// Conductance of edge `{x, x+1}` for `x = 0..L`.
    pub conductances: Vec<f64>,
}

impl Slab {
    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

/// Harmonic coordinate `Phi(t, x) = slope * x + psi(t, x mod L)` on a
/// periodic cell, with `psi` stored at every slab boundary.
#[derive(Debug, Clone)]
pub struct HarmonicTable {
    field: DynamicConductanceField,
    /// `None` for a time-independent table.
    period: Option<f64>,
    slabs: Vec<Slab>,
    /// `psi[k]` at `slabs[k].start`; for periodic tables `psi[K]` is `psi(T)`.
    psi: Vec<Vec<f64>>,
    slope: f64,
    backend: Backend,
    tol: f64,
    residual: f64,
}

/// The corrector `chi(t, x) = x - Phi(t, x)` of a [`HarmonicTable`].
#[derive(Debug, Clone)]
pub struct CorrectorTable {
    harmonic: HarmonicTable,
}

fn check_space_period(field: &DynamicConductanceField, l: usize) -> Result<()> {
    if field.space_period() != l {
        return param(format!(
            "field has space period {}, requested {l}",
            field.space_period()
        ));
    }
    Ok(())
}

/// Explicit harmonic coordinate of a time-constant field:
/// `Phi(x) = c * sum_{0 <= j < x} 1 / w_j` with `c = L / sum_j 1 / w_j`.
pub fn solve_static(field: &DynamicConductanceField, l: usize) -> Result<HarmonicTable> {
    check_space_period(field, l)?;
    if !field.is_static() {
        return param("solve_static needs a time-constant field");
    }
    let w = field.snapshot(0.0);
    let resistance: f64 = w.iter().map(|v| 1.0 / v).sum();
    let c = l as f64 / resistance;
    let mut psi = vec![0.0; l];
    let mut phi = 0.0;
    for x in 1..l {
        phi += c / w[x - 1];
        psi[x] = phi - x as f64;
    }
    let mut table = HarmonicTable {
        field: field.clone(),
        period: None,
        slabs: vec![Slab {
            start: 0.0,
            end: f64::INFINITY,
            conductances: w,
        }],
        psi: vec![psi],
        slope: 1.0,
        backend: Backend::Dense,
        tol: 0.0,
        residual: 0.0,
    };
    table.residual = table.static_residual();
    Ok(table)
}

/// Time-periodic harmonic coordinate of a field with periods `(l, period)`.
///
/// A time-constant field is accepted with any `period` and treated as a
/// single slab.
pub fn solve_dynamic(
    field: &DynamicConductanceField,
    l: usize,
    period: f64,
    opts: SolveOptions,
) -> Result<HarmonicTable> {
    check_space_period(field, l)?;
    if !(period.is_finite() && period > 0.0) {
        return param(format!("time period must be positive, got {period}"));
    }
    if !(opts.tol > 0.0) {
        return param("solver tolerance must be positive");
    }
    if let TimePeriod::Periodic(own) = field.time_period() {
        if (own - period).abs() > 1e-12 * own && !field.is_static() {
            return param(format!("field has time period {own}, requested {period}"));
        }
    }
    let backend = opts.backend.resolve(l);

    let mut breaks = if field.is_static() {
        vec![0.0]
    } else {
        field.period_breaks()
    };
    breaks.push(period);
    let slabs: Vec<Slab> = breaks
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| Slab {
            start: w[0],
            end: w[1],
            conductances: field.snapshot(0.5 * (w[0] + w[1])),
        })
        .collect();

    let (monodromy, offset) = match backend {
        Backend::Dense => {
            let steps: Vec<DMatrix<f64>> = slabs
                .iter()
                .map(|s| dense_step(&s.conductances, s.len()))
                .collect();
            let mut m = DMatrix::<f64>::identity(l + 1, l + 1);
            for step in &steps {
                m *= step;
            }
            let p = m.view((0, 0), (l, l)).into_owned();
            let c = m.view((0, l), (l, 1)).column(0).into_owned();
            (p, c)
        }
        _ => {
            let eps = opts.tol * 1e-6;
            let mut p = DMatrix::zeros(l, l);
            for j in 0..l {
                let mut v = vec![0.0; l];
                v[j] = 1.0;
                for s in slabs.iter().rev() {
                    v = Uniformizer::new(&s.conductances, eps)
                        .run(s.len(), &v, false, false)
                        .end;
                }
                p.set_column(j, &DVector::from_vec(v));
            }
            let mut v = vec![0.0; l];
            let mut truncation = 0.0;
            for s in slabs.iter().rev() {
                let out = Uniformizer::new(&s.conductances, eps).run(s.len(), &v, true, false);
                truncation += out.error_bound;
                v = out.end;
            }
            if truncation > opts.tol {
                return Err(Error::Solver(format!(
                    "uniformization truncation bound {truncation:e} exceeds tolerance"
                )));
            }
            (p, DVector::from_vec(v))
        }
    };

    // (I - P) psi0 = c restricted to mean-zero vectors; the rank-one term
    // pins the constant mode.
    let system = DMatrix::<f64>::identity(l, l) - &monodromy
        + DMatrix::from_element(l, l, 1.0 / l as f64);
    let psi_end = system
        .lu()
        .solve(&offset)
        .ok_or_else(|| Error::Solver("monodromy system is singular".into()))?;
    if psi_end.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("monodromy solve produced non-finite values".into()));
    }

    let mut table = HarmonicTable {
        field: field.clone(),
        period: Some(period),
        psi: vec![Vec::new(); slabs.len() + 1],
        slabs,
        slope: 1.0,
        backend,
        tol: opts.tol,
        residual: 0.0,
    };
    let k_max = table.slabs.len();
    table.psi[k_max] = psi_end.as_slice().to_vec();
    for k in (0..k_max).rev() {
        let next = table.psi[k + 1].clone();
        table.psi[k] = table.propagate(k, table.slabs[k].len(), &next);
    }
    let anchor = table.psi[0][0];
    for v in table.psi.iter_mut() {
        for p in v.iter_mut() {
            *p -= anchor;
        }
    }
    table.residual = table.dynamic_residual();
    if !(table.residual <= opts.tol) {
        return Err(Error::Solver(format!(
            "residual {:.3e} exceeds tolerance {:.3e}",
            table.residual, opts.tol
        )));
    }
    Ok(table)
}

impl HarmonicTable {
    pub fn field(&self) -> &DynamicConductanceField {
        &self.field
    }

    pub fn sites(&self) -> usize {
        self.field.space_period()
    }

    pub fn period(&self) -> Option<f64> {
        self.period
    }

    pub fn slabs(&self) -> &[Slab] {
        &self.slabs
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    /// Largest relative residual found when the table was solved.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// Start times of the slabs.
    pub fn slab_times(&self) -> Vec<f64> {
        self.slabs.iter().map(|s| s.start).collect()
    }

    /// `psi` at each slab start.
    pub fn boundary_values(&self) -> &[Vec<f64>] {
        &self.psi[..self.slabs.len()]
    }

    /// Same table with a different linear part: `Phi = slope * x + psi`.
    /// Only meaningful as a deliberately wrong coordinate.
    pub fn with_slope(&self, slope: f64) -> Self {
        Self {
            slope,
            ..self.clone()
        }
    }

    fn wrap(&self, t: f64) -> f64 {
        match self.period {
            None => 0.0,
            Some(p) => {
                let r = t.rem_euclid(p);
                if r >= p {
                    0.0
                } else {
                    r
                }
            }
        }
    }

    fn slab_index(&self, r: f64) -> usize {
        self.slabs.partition_point(|s| s.start <= r).max(1) - 1
    }

    /// Runs slab `k` backwards from its end over a duration `tau`.
    fn propagate(&self, k: usize, tau: f64, psi_end: &[f64]) -> Vec<f64> {
        let w = &self.slabs[k].conductances;
        let l = w.len();
        match self.backend {
            Backend::Dense => {
                let e = dense_step(w, tau);
                let mut v = DVector::from_element(l + 1, 1.0);
                v.rows_mut(0, l).copy_from_slice(psi_end);
                (e * v).rows(0, l).iter().copied().collect()
            }
            _ => Uniformizer::new(w, self.tol * 1e-6)
                .run(tau, psi_end, true, false)
                .end,
        }
    }

    /// `int psi dt` over the whole slab `k`.
    fn slab_integral(&self, k: usize) -> Vec<f64> {
        let slab = &self.slabs[k];
        let w = &slab.conductances;
        let l = w.len();
        match self.backend {
            Backend::Dense => {
                let e = dense_integral(w, slab.len());
                let mut v = DVector::from_element(l + 1, 1.0);
                v.rows_mut(0, l).copy_from_slice(&self.psi[k + 1]);
                (e * v).rows(0, l).iter().copied().collect()
            }
            _ => Uniformizer::new(w, self.tol * 1e-6)
                .run(slab.len(), &self.psi[k + 1], true, true)
                .integral
                .expect("integral requested"),
        }
    }

    /// `psi(t, .)` over sites `0..L`.
    pub fn psi_at(&self, t: f64) -> Vec<f64> {
        if self.period.is_none() {
            return self.psi[0].clone();
        }
        let r = self.wrap(t);
        let k = self.slab_index(r);
        let slab = &self.slabs[k];
        if r == slab.start {
            return self.psi[k].clone();
        }
        self.propagate(k, slab.end - r, &self.psi[k + 1])
    }

    /// `Phi(t, x)` using the periodic extension in space.
    pub fn phi(&self, t: f64, x: i64) -> f64 {
        let l = self.sites() as i64;
        self.slope * x as f64 + self.psi_at(t)[x.rem_euclid(l) as usize]
    }

    /// `Phi(t, x)` given a precomputed `psi(t, .)`.
    pub fn phi_from(&self, psi: &[f64], x: i64) -> f64 {
        let l = psi.len() as i64;
        self.slope * x as f64 + psi[x.rem_euclid(l) as usize]
    }

    pub fn chi(&self, t: f64, x: i64) -> f64 {
        x as f64 - self.phi(t, x)
    }

    fn static_residual(&self) -> f64 {
        let w = &self.slabs[0].conductances;
        let l = w.len() as i64;
        let psi = &self.psi[0];
        let scale = w.iter().fold(0.0_f64, |m, v| m.max(*v));
        (0..l)
            .map(|x| {
                let phi = |y: i64| self.phi_from(psi, y);
                let right = w[x as usize];
                let left = w[(x - 1).rem_euclid(l) as usize];
                (right * (phi(x + 1) - phi(x)) + left * (phi(x - 1) - phi(x))).abs() / scale
            })
            .fold(0.0, f64::max)
    }

    /// Largest relative residual of the integrated equation
    /// `psi(start) - psi(end) = A int psi + h b` over each slab, with the
    /// integral taken by Gauss-Legendre quadrature of pointwise values, plus
    /// the time-periodicity defect.
    fn dynamic_residual(&self) -> f64 {
        let l = self.sites();
        let k_max = self.slabs.len();
        let norm = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let mut worst = 0.0_f64;
        for (k, slab) in self.slabs.iter().enumerate() {
            let w = &slab.conductances;
            let h = slab.len();
            let rate = propagate::max_rate(w);
            let pieces = (rate * h).ceil().max(1.0) as usize;
            let delta = h / pieces as f64;
            let mut integral = vec![0.0; l];
            for j in 0..pieces {
                let mid = slab.start + (j as f64 + 0.5) * delta;
                for &(node, weight) in &GAUSS5 {
                    let t = mid + 0.5 * delta * node;
                    let v = self.propagate(k, slab.end - t, &self.psi[k + 1]);
                    for i in 0..l {
                        integral[i] += 0.5 * delta * weight * v[i];
                    }
                }
            }
            let mut a_int = vec![0.0; l];
            apply_generator(w, &integral, &mut a_int);
            let b = forcing(w);
            let scale = 1.0 + norm(&self.psi[k]).max(norm(&self.psi[k + 1])) + h * norm(&b);
            for i in 0..l {
                let r = self.psi[k][i] - self.psi[k + 1][i] - a_int[i] - h * b[i];
                worst = worst.max(r.abs() / scale);
            }
        }
        let scale = 1.0 + norm(&self.psi[0]);
        for i in 0..l {
            worst = worst.max((self.psi[0][i] - self.psi[k_max][i]).abs() / scale);
        }
        worst
    }

    /// Writes rows `slab_time,site,phi,chi` for every slab start.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "slab_time,site,phi,chi")?;
        for (slab, psi) in self.slabs.iter().zip(&self.psi) {
            for (x, p) in psi.iter().enumerate() {
                let phi = self.slope * x as f64 + p;
                writeln!(out, "{},{x},{phi},{}", slab.start, x as f64 - phi)?;
            }
        }
        Ok(())
    }
}

impl CorrectorTable {
    pub fn new(harmonic: HarmonicTable) -> Self {
        Self { harmonic }
    }

    pub fn harmonic(&self) -> &HarmonicTable {
        &self.harmonic
    }

    pub fn chi(&self, t: f64, x: i64) -> f64 {
        self.harmonic.chi(t, x)
    }

    /// `chi(t, x)` for `x = 0..L`.
    pub fn chi_row(&self, t: f64) -> Vec<f64> {
        let psi = self.harmonic.psi_at(t);
        (0..psi.len() as i64)
            .map(|x| x as f64 - self.harmonic.phi_from(&psi, x))
            .collect()
    }
}

impl From<HarmonicTable> for CorrectorTable {
    fn from(harmonic: HarmonicTable) -> Self {
        Self::new(harmonic)
    }
}

/// Builds the table appropriate for a field: explicit for static fields,
/// monodromy-based otherwise.
pub fn solve(field: &DynamicConductanceField, opts: SolveOptions) -> Result<HarmonicTable> {
    match field.time_period() {
        TimePeriod::Periodic(t) if !field.is_static() => {
            solve_dynamic(field, field.space_period(), t, opts)
        }
        _ => solve_static(field, field.space_period()),
    }
}

/// Effective variance: the cell average of
/// `w(x, x+1) (Phi(x+1) - Phi(x))^2 + w(x, x-1) (Phi(x) - Phi(x-1))^2`.
///
/// Slab integrals are exact: by Van Loan's block exponential on the dense
/// backend, and through the periodic energy identity
/// `int sum_e w_e (grad Phi_e)^2 = int sum_e w_e grad Phi_e` on the
/// uniformized one.
pub fn variance_formula(table: &HarmonicTable) -> f64 {
    match (table.period, table.backend) {
        (None, _) => static_variance(table),
        (Some(_), Backend::Dense) => quadratic_variance(table),
        _ => linear_variance(table),
    }
}

fn static_variance(table: &HarmonicTable) -> f64 {
    let w = &table.slabs[0].conductances;
    let psi = &table.psi[0];
    let l = w.len();
    let energy: f64 = (0..l)
        .map(|x| {
            let grad = table.phi_from(psi, x as i64 + 1) - table.phi_from(psi, x as i64);
            w[x] * grad * grad
        })
        .sum();
    2.0 * energy / l as f64
}

fn quadratic_variance(table: &HarmonicTable) -> f64 {
    let l = table.sites();
    let period = table.period.expect("periodic table");
    let mut total = 0.0;
    for (k, slab) in table.slabs.iter().enumerate() {
        // gradient operator on [psi; 1]: grad_e = psi[e+1] - psi[e] + slope
        let mut grad = DMatrix::zeros(l, l + 1);
        for e in 0..l {
            grad[(e, e)] -= 1.0;
            grad[(e, (e + 1) % l)] += 1.0;
            grad[(e, l)] = table.slope;
        }
        let weights = DMatrix::from_diagonal(&DVector::from_column_slice(&slab.conductances));
        let q = grad.transpose() * weights * &grad;
        // the block exponential loses accuracy once rate * h is large, so the
        // slab is cut into short pieces sharing one Gram matrix
        let rate = propagate::max_rate(&slab.conductances);
        let pieces = (2.0 * rate * slab.len()).ceil().max(1.0) as usize;
        let delta = slab.len() / pieces as f64;
        let gram = dense_quadratic(&slab.conductances, &q, delta);
        let step = dense_step(&slab.conductances, delta);
        let mut y = DVector::from_element(l + 1, 1.0);
        y.rows_mut(0, l).copy_from_slice(&table.psi[k + 1]);
        for _ in 0..pieces {
            total += (y.transpose() * &gram * &y)[(0, 0)];
            y = &step * y;
        }
    }
    2.0 * total / (period * l as f64)
}

/// Variance through the energy identity; valid for time-periodic solutions
/// with slope 1.
pub fn linear_variance(table: &HarmonicTable) -> f64 {
    let Some(period) = table.period else {
        return static_variance(table);
    };
    let l = table.sites();
    let mut total = 0.0;
    for (k, slab) in table.slabs.iter().enumerate() {
        let w = &slab.conductances;
        let integral = table.slab_integral(k);
        for e in 0..l {
            total += w[e] * (slab.len() + integral[(e + 1) % l] - integral[e]);
        }
    }
    2.0 * total / (period * l as f64)
}

/// `max_x |[chi(t, x) - chi(t, 0)] - chi'(0, x)|`, where `chi'` is solved
/// from scratch on the field shifted by `(t, 0)`.
pub fn chi_split_check(
    field: &DynamicConductanceField,
    table: &CorrectorTable,
    t: f64,
    opts: SolveOptions,
) -> Result<f64> {
    let harmonic = table.harmonic();
    let l = harmonic.sites();
    if let Some(period) = harmonic.period() {
        if !(0.0..period).contains(&t) {
            return Err(Error::Range(format!("time {t} outside [0, {period})")));
        }
    }
    let shifted = field.shift(t, 0);
    let fresh = match harmonic.period() {
        Some(period) => solve_dynamic(&shifted, l, period, opts)?,
        None => solve_static(&shifted, l)?,
    };
    let here = table.chi_row(t);
    let there = CorrectorTable::new(fresh).chi_row(0.0);
    Ok((0..l)
        .map(|x| ((here[x] - here[0]) - there[x]).abs())
        .fold(0.0, f64::max))
}

/// Cocycle defect of the time-0 slice: compares `chi(y) - chi(x)` from the
/// periodically extended table with the telescoped edge increments
/// `sum (1 - grad Phi_e)`, over `x, y` in `[-L, 2L]`.
pub fn cocycle_check(table: &HarmonicTable) -> f64 {
    cocycle_check_at(table, 0.0)
}

pub fn cocycle_check_at(table: &HarmonicTable, t: f64) -> f64 {
    let l = table.sites() as i64;
    let psi = table.psi_at(t);
    // edge increments of Phi; explicit for static tables
    let increments: Vec<f64> = match table.period {
        None => {
            let w = &table.slabs[0].conductances;
            let c = l as f64 / w.iter().map(|v| 1.0 / v).sum::<f64>();
            w.iter().map(|v| table.slope * c / v).collect()
        }
        Some(_) => (0..l)
            .map(|e| table.slope + psi[((e + 1) % l) as usize] - psi[e as usize])
            .collect(),
    };
    let chi = |x: i64| x as f64 - table.phi_from(&psi, x);
    let mut worst = 0.0_f64;
    for x in -l..=2 * l {
        let mut telescoped = 0.0;
        for y in x..=2 * l {
            worst = worst.max((telescoped - (chi(y) - chi(x))).abs());
            telescoped += 1.0 - increments[y.rem_euclid(l) as usize];
        }
    }
    worst
}
