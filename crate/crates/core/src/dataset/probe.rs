//! Linear probes: plain logistic regression, the per-step latent probe and a
//! rank-correlation helper.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::kernels;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub iters: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            iters: 200,
            lr: 1.0,
            l2: 1e-3,
        }
    }
}

/// `P(y = 1 | x) = σ(w·x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LogisticRegression {
    /// Full-batch gradient descent on the mean log-loss plus `l2/2·‖w‖²`.
    /// `x` holds one `dim`-wide row per label.
    pub fn fit(x: &[f64], y: &[u8], dim: usize, opts: FitOptions) -> Result<Self> {
        let n = y.len();
        if n == 0 || x.len() != n * dim {
            return Err(Error::dim(format!("{} feature values for {n} labels of width {dim}", x.len())));
        }
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let mut z = vec![0.0; n];
        let mut gw = vec![0.0; dim];
        for _ in 0..opts.iters {
            let mut gb = 0.0;
            gw.fill(0.0);
            for ((zi, &yi), xi) in z.iter_mut().zip(y).zip(x.chunks_exact(dim)) {
                *zi = (kernels::sigmoid(kernels::dot(xi, &w) + b) - yi as f64) / n as f64;
                gb += *zi;
                kernels::axpy(*zi, xi, &mut gw);
            }
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= opts.lr * (gi + opts.l2 * *wi);
            }
            b -= opts.lr * gb;
        }
        Ok(LogisticRegression { w, b })
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        kernels::dot(&self.w, x) + self.b
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.score(x) > 0.0)
    }

    pub fn accuracy(&self, x: &[f64], y: &[u8]) -> f64 {
        let dim = self.w.len();
        let hits = x.chunks_exact(dim).zip(y).filter(|(xi, &yi)| self.predict(xi) == yi).count();
        hits as f64 / y.len().max(1) as f64
    }
}

/// Per-step accuracy of a latent-only linear probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// `(t, accuracy)` for `t = 1..=T`.
    pub steps: Vec<(usize, f64)>,
    /// Rank correlation between denoising progress `T − t` and accuracy.
    pub spearman: f64,
}

impl ProbeReport {
    /// Worst-case (largest) accuracy over steps with `t ≥ frac·T`.
    pub fn max_noisy(&self, frac: f64) -> f64 {
        let cut = frac * self.steps.len() as f64;
        self.steps.iter().filter(|(t, _)| *t as f64 >= cut).map(|s| s.1).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Worst-case (smallest) accuracy over steps with `t ≤ frac·T`.
    pub fn min_clean(&self, frac: f64) -> f64 {
        let cut = frac * self.steps.len() as f64;
        self.steps.iter().filter(|(t, _)| *t as f64 <= cut).map(|s| s.1).fold(f64::INFINITY, f64::min)
    }
}

/// Fits one probe per step on the training items at that step and scores it
/// on `eval_per_label` fresh latent draws per class.
pub fn latent_probe(data: &Dataset, split: &Split, eval_per_label: usize, seed: u64) -> Result<ProbeReport> {
    let steps = data.config.steps;
    let zl = data.config.latent.len();
    let mut by_step: Vec<Vec<usize>> = vec![Vec::new(); steps];
    for &i in &split.train {
        by_step[data.key(i).t - 1].push(i);
    }
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        let items = &by_step[t - 1];
        let mut x = Vec::with_capacity(items.len() * zl);
        let mut y = Vec::with_capacity(items.len());
        for &i in items {
            let k = data.key(i);
            x.extend(data.latent(k));
            y.push(k.label);
        }
        let probe = LogisticRegression::fit(&x, &y, zl, FitOptions::default())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let mut hits = 0;
        for label in [0u8, 1] {
            for _ in 0..eval_per_label {
                let z = data.sample_latent(label, t, &mut rng);
                hits += usize::from(probe.predict(&z) == label);
            }
        }
        out.push((t, hits as f64 / (2 * eval_per_label) as f64));
    }
    let progress: Vec<f64> = out.iter().map(|(t, _)| (steps - t) as f64).collect();
    let acc: Vec<f64> = out.iter().map(|s| s.1).collect();
    Ok(ProbeReport {
        steps: out,
        spearman: spearman(&progress, &acc),
    })
}

/// Ranks with ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal-length samples");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // Ties: ranks of b are [1.5, 1.5, 3]; Pearson with [1, 2, 3] is √3/2.
        assert!((spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 7.0]) - 3f64.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn logistic_regression_separates_a_margin() {
        let x = [2.0, 0.1, 1.5, -0.3, -2.0, 0.2, -1.0, -0.4];
        let y = [1, 1, 0, 0];
        let m = LogisticRegression::fit(&x, &y, 2, FitOptions::default()).unwrap();
        assert_eq!(m.accuracy(&x, &y), 1.0);
        assert!(m.w[0] > 0.0);
    }
}
