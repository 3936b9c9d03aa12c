use serde::{Deserialize, Serialize};

/// Cumulative signal fractions `ᾱ_0..=ᾱ_T` of a cosine noise schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockSchedule {
    pub alpha_bar: Vec<f64>,
}

impl MockSchedule {
    /// `ᾱ_t = cos²(π/2 · t/T)`.
    pub fn cosine(steps: usize) -> Self {
        assert!(steps > 0, "schedule needs at least one step");
        let alpha_bar = (0..=steps)
            .map(|t| {
                let c = (std::f64::consts::FRAC_PI_2 * t as f64 / steps as f64).cos();
                c * c
            })
            .collect();
        MockSchedule { alpha_bar }
    }

    /// T, the index of the noisiest step.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn signal(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn noise(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).max(0.0).sqrt()
    }

    /// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·η`
    pub fn noisy(&self, z0: &[f64], eta: &[f64], t: usize) -> Vec<f64> {
        let (a, b) = (self.signal(t), self.noise(t));
        z0.iter().zip(eta).map(|(&z, &e)| a * z + b * e).collect()
    }

    /// Deterministic DDIM update from `z_t` to `z_{t−1}` given a clean estimate.
    pub fn ddim_step(&self, z_t: &[f64], z0_hat: &[f64], t: usize) -> Vec<f64> {
        assert!(t >= 1 && t <= self.steps(), "step {t} outside the schedule");
        let (a, b) = (self.signal(t), self.noise(t));
        let (a_prev, b_prev) = (self.signal(t - 1), self.noise(t - 1));
        z_t.iter()
            .zip(z0_hat)
            .map(|(&z, &x0)| {
                let eps = if b > 0.0 { (z - a * x0) / b } else { 0.0 };
                a_prev * x0 + b_prev * eps
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strictly_decreasing_from_one() {
        let s = MockSchedule::cosine(50);
        assert_eq!(s.alpha_bar.len(), 51);
        assert!(s.alpha_bar[0] > 0.99 && s.alpha_bar[0] <= 1.0);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[50] < 1e-12);
    }

    #[test]
    fn ddim_reaches_clean_estimate() {
        let s = MockSchedule::cosine(10);
        let x0 = [0.5, -1.0];
        let mut z = vec![0.3, 0.9];
        for t in (1..=10).rev() {
            z = s.ddim_step(&z, &x0, t);
        }
        assert!((z[0] - 0.5).abs() < 1e-12 && (z[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ddim_is_consistent_with_forward_noising() {
        let s = MockSchedule::cosine(20);
        let (x0, eta) = ([1.0, 2.0], [0.4, -0.3]);
        let z7 = s.noisy(&x0, &eta, 7);
        let z6 = s.ddim_step(&z7, &x0, 7);
        let want = s.noisy(&x0, &eta, 6);
        assert!(z6.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
