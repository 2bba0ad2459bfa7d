//! Exact slab propagators for `d/dtau psi = A psi + b` on the ring.
//!
//! On a slab with conductances `w`, `A` is the generator of the walk on the
//! ring `Z / LZ` and `b = A x` is the forcing produced by the linear part of
//! the harmonic coordinate, `b[x] = w[x] - w[x - 1]`. Two routes are offered:
//! dense matrix exponentials of augmented matrices, and a uniformization
//! series `e^{hA} = sum_k Pois(k; lambda h) P^k` with `P = I + A / lambda`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Largest ring handled by [`Backend::Dense`] under [`Backend::Auto`].
pub const DENSE_MAX_SITES: usize = 64;

/// Largest `lambda * h` per uniformization sub-step; keeps `e^{-lambda h}`
/// far from underflow.
const MAX_POISSON_MEAN: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[default]
    Auto,
    Dense,
    Uniformized,
}

impl Backend {
    pub fn resolve(self, sites: usize) -> Backend {
        match self {
            Backend::Auto if sites <= DENSE_MAX_SITES => Backend::Dense,
            Backend::Auto => Backend::Uniformized,
            other => other,
        }
    }
}

/// `out = A v` for the ring generator with edge conductances `w`.
pub(crate) fn apply_generator(w: &[f64], v: &[f64], out: &mut [f64]) {
    let l = w.len();
    for x in 0..l {
        let right = (x + 1) % l;
        let left = (x + l - 1) % l;
        out[x] = w[x] * (v[right] - v[x]) + w[left] * (v[left] - v[x]);
    }
}

/// `b = A x`, the generator applied to the position map.
pub(crate) fn forcing(w: &[f64]) -> Vec<f64> {
    let l = w.len();
    (0..l).map(|x| w[x] - w[(x + l - 1) % l]).collect()
}

pub(crate) fn max_rate(w: &[f64]) -> f64 {
    let l = w.len();
    (0..l)
        .map(|x| w[x] + w[(x + l - 1) % l])
        .fold(0.0, f64::max)
}

/// `[[A, b], [0, 0]]`, acting on `[psi; 1]`.
pub(crate) fn augmented_generator(w: &[f64]) -> DMatrix<f64> {
    let l = w.len();
    let mut m = DMatrix::zeros(l + 1, l + 1);
    for (x, &wx) in w.iter().enumerate() {
        let y = (x + 1) % l;
        m[(x, y)] += wx;
        m[(x, x)] -= wx;
        m[(y, x)] += wx;
        m[(y, y)] -= wx;
    }
    for (x, bx) in forcing(w).into_iter().enumerate() {
        m[(x, l)] = bx;
    }
    m
}

/// `exp(h [[A, b], [0, 0]])`: maps `[psi(end); 1]` to `[psi(end - h); 1]`.
pub(crate) fn dense_step(w: &[f64], h: f64) -> DMatrix<f64> {
    (augmented_generator(w) * h).exp()
}

/// `int_0^h exp(s G) ds` for the augmented generator `G`.
pub(crate) fn dense_integral(w: &[f64], h: f64) -> DMatrix<f64> {
    let n = w.len() + 1;
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block
        .view_mut((0, 0), (n, n))
        .copy_from(&(augmented_generator(w) * h));
    block
        .view_mut((0, n), (n, n))
        .copy_from(&(DMatrix::<f64>::identity(n, n) * h));
    block.exp().view((0, n), (n, n)).into_owned()
}

/// `int_0^h exp(s G)^T Q exp(s G) ds` by Van Loan's block exponential.
pub(crate) fn dense_quadratic(w: &[f64], q: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let n = w.len() + 1;
    let g = augmented_generator(w);
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block
        .view_mut((0, 0), (n, n))
        .copy_from(&(-g.transpose() * h));
    block.view_mut((0, n), (n, n)).copy_from(&(q * h));
    block.view_mut((n, n), (n, n)).copy_from(&(g * h));
    let e = block.exp();
    let f12 = e.view((0, n), (n, n));
    let f22 = e.view((n, n), (n, n));
    f22.transpose() * f12
}

/// Poisson(a) weights with the tails the series need.
struct PoissonWeights {
    pmf: Vec<f64>,
    /// `P(N >= k + 1)`
    tail: Vec<f64>,
    /// `sum_{j >= k + 1} P(N >= j + 1)`
    tail_sum: Vec<f64>,
    /// Probability mass dropped by truncation.
    dropped: f64,
}

impl PoissonWeights {
    fn new(a: f64, eps: f64) -> Self {
        let mut pmf = vec![(-a).exp()];
        loop {
            let k = pmf.len() as f64;
            let next = pmf[pmf.len() - 1] * a / k;
            pmf.push(next);
            let ratio = a / (k + 1.0);
            if ratio < 0.5 && next * ratio / (1.0 - ratio) < eps {
                break;
            }
        }
        let k_max = pmf.len();
        let last = pmf[k_max - 1];
        let ratio = a / k_max as f64;
        let dropped = last * ratio / (1.0 - ratio);
        let mut tail = vec![0.0; k_max];
        let mut acc = 0.0;
        for k in (0..k_max).rev() {
            tail[k] = acc;
            acc += pmf[k];
        }
        let mut tail_sum = vec![0.0; k_max];
        let mut acc = 0.0;
        for k in (0..k_max).rev() {
            tail_sum[k] = acc;
            acc += tail[k];
        }
        Self {
            pmf,
            tail,
            tail_sum,
            dropped,
        }
    }
}

/// Uniformization of one slab's generator.
pub(crate) struct Uniformizer<'a> {
    w: &'a [f64],
    lambda: f64,
    b: Vec<f64>,
    eps: f64,
}

/// Result of a uniformized propagation over `[0, h]`.
pub(crate) struct SeriesOutput {
    pub end: Vec<f64>,
    pub integral: Option<Vec<f64>>,
    /// Bound on the truncation error in the sup norm.
    pub error_bound: f64,
}

impl<'a> Uniformizer<'a> {
    pub(crate) fn new(w: &'a [f64], eps: f64) -> Self {
        Self {
            w,
            lambda: max_rate(w),
            b: forcing(w),
            eps,
        }
    }

    /// Propagates `v` by `h`; with `forced` the affine term is included, and
    /// with `integrate` the time integral of the trajectory is returned too.
    pub(crate) fn run(&self, h: f64, v: &[f64], forced: bool, integrate: bool) -> SeriesOutput {
        let l = self.w.len();
        let mut state = v.to_vec();
        let mut integral = integrate.then(|| vec![0.0; l]);
        let mut bound = 0.0;
        if h <= 0.0 {
            return SeriesOutput {
                end: state,
                integral,
                error_bound: 0.0,
            };
        }
        let pieces = ((self.lambda * h) / MAX_POISSON_MEAN).ceil().max(1.0) as usize;
        let delta = h / pieces as f64;
        let weights = PoissonWeights::new(self.lambda * delta, self.eps);
        let inv = 1.0 / self.lambda;
        let b_norm = self.b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));

        let mut y = vec![0.0; l];
        let mut g = vec![0.0; l];
        let mut scratch = vec![0.0; l];
        for _ in 0..pieces {
            let v_norm = state.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            y.copy_from_slice(&state);
            g.copy_from_slice(&self.b);
            let mut next = vec![0.0; l];
            for k in 0..weights.pmf.len() {
                let pk = weights.pmf[k];
                let tk = weights.tail[k] * inv;
                for i in 0..l {
                    next[i] += pk * y[i];
                    if forced {
                        next[i] += tk * g[i];
                    }
                }
                if let Some(acc) = integral.as_mut() {
                    let sk = weights.tail_sum[k] * inv * inv;
                    for i in 0..l {
                        acc[i] += tk * y[i];
                        if forced {
                            acc[i] += sk * g[i];
                        }
                    }
                }
                self.step(&mut y, &mut scratch);
                if forced {
                    self.step(&mut g, &mut scratch);
                }
            }
            bound += weights.dropped * (v_norm + if forced { h * b_norm } else { 0.0 });
            state = next;
        }
        SeriesOutput {
            end: state,
            integral,
            error_bound: bound,
        }
    }

    /// `v <- P v` with `P = I + A / lambda`.
    fn step(&self, v: &mut [f64], scratch: &mut [f64]) {
        apply_generator(self.w, v, scratch);
        let inv = 1.0 / self.lambda;
        for (vi, si) in v.iter_mut().zip(scratch.iter()) {
            *vi += si * inv;
        }
    }
}
