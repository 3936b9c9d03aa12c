use serde::{Deserialize, Serialize};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl AdamW {
    pub fn new(n: usize, lr: f64, weight_decay: f64, betas: (f64, f64), eps: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer sized for a different parameter vector");
        assert_eq!(grads.len(), params.len(), "gradient length");
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            let step = self.lr * self.weight_decay * params[i] + self.lr * mh / (vh.sqrt() + self.eps);
            // Subtracting a signed zero could flip the sign of a zero weight.
            if step != 0.0 {
                params[i] -= step;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let mut p = vec![1.5, -0.0, 3e-7, -2.25];
        let before: Vec<u64> = p.iter().map(|v: &f64| v.to_bits()).collect();
        let mut opt = AdamW::new(4, 0.0, 0.01, (0.9, 0.999), 1e-8);
        opt.step(&mut p, &[0.3, -1.0, 5.0, 0.0]);
        let after: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // After one step m̂ = g and v̂ = g², so the move is lr·g/(|g| + eps) plus decay.
        let mut p = vec![2.0];
        let mut opt = AdamW::new(1, 0.1, 0.5, (0.9, 0.999), 1e-8);
        opt.step(&mut p, &[4.0]);
        let want = 2.0 - 0.1 * 0.5 * 2.0 - 0.1 * 4.0 / (4.0 + 1e-8);
        assert!((p[0] - want).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = AdamW::new(2, 0.05, 0.0, (0.9, 0.999), 1e-8);
        for _ in 0..2000 {
            let g = [2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }
}
