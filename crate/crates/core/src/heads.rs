//! Safety classifier, token-wise delta generator, mask predictor and scale predictor.

use serde::{Deserialize, Serialize};

use crate::layers::{silu_backward, silu_vec, Linear};
use crate::numerics::kernels;
use crate::params::ParamLayout;

/// Per-sample result of the guidance heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceOutput {
    /// `[safe, unsafe]`
    pub logits: [f64; 2],
    /// `L × D`
    pub delta: Vec<f64>,
    /// Length `L`, each in (0, 1).
    pub mask: Vec<f64>,
    /// Length `L`, each in (0, 1).
    pub alpha: Vec<f64>,
}

impl GuidanceOutput {
    pub fn tokens(&self) -> usize {
        self.mask.len()
    }

    pub fn is_unsafe(&self, tie_unsafe: bool) -> bool {
        decide(self.logits, tie_unsafe) == 1
    }
}

/// Argmax over `[safe, unsafe]` logits; ties go to safe unless `tie_unsafe`.
pub fn decide(logits: [f64; 2], tie_unsafe: bool) -> u8 {
    if logits[1] > logits[0] || (tie_unsafe && logits[1] == logits[0]) {
        1
    } else {
        0
    }
}

/// Sinusoidal position code for token positions `0..l`, `l × dim`.
pub fn positional_encoding(l: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; l * dim];
    for (i, row) in pe.chunks_exact_mut(dim).enumerate() {
        kernels::sinusoid(i as f64, dim, crate::encoders::SINUSOID_BASE, row);
    }
    pe
}

/// Two hidden SiLU layers then a 2-way linear read-out.
#[derive(Clone, Debug)]
pub struct Classifier {
    fc1: Linear,
    fc2: Linear,
    out: Linear,
}

#[derive(Clone, Debug, Default)]
pub struct ClassifierCache {
    pre1: Vec<f64>,
    a1: Vec<f64>,
    pre2: Vec<f64>,
    a2: Vec<f64>,
}

impl Classifier {
    pub fn new(layout: &mut ParamLayout, d: usize, hidden: usize) -> Self {
        Classifier {
            fc1: Linear::new(layout, "classifier.fc1", d, hidden, true),
            fc2: Linear::new(layout, "classifier.fc2", hidden, hidden, true),
            out: Linear::new(layout, "classifier.out", hidden, 2, true),
        }
    }

    pub fn forward(&self, p: &[f64], f_attn: &[f64]) -> ([f64; 2], ClassifierCache) {
        let pre1 = self.fc1.forward(p, f_attn, 1);
        let a1 = silu_vec(&pre1);
        let pre2 = self.fc2.forward(p, &a1, 1);
        let a2 = silu_vec(&pre2);
        let o = self.out.forward(p, &a2, 1);
        ([o[0], o[1]], ClassifierCache { pre1, a1, pre2, a2 })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], f_attn: &[f64], c: &ClassifierCache, dlogits: [f64; 2], df_attn: &mut [f64]) {
        let mut da2 = vec![0.0; c.a2.len()];
        self.out.backward(p, g, &c.a2, 1, &dlogits, Some(&mut da2));
        let mut dpre2 = vec![0.0; da2.len()];
        silu_backward(&c.pre2, &da2, &mut dpre2);
        let mut da1 = vec![0.0; c.a1.len()];
        self.fc2.backward(p, g, &c.a1, 1, &dpre2, Some(&mut da1));
        let mut dpre1 = vec![0.0; da1.len()];
        silu_backward(&c.pre1, &da1, &mut dpre1);
        self.fc1.backward(p, g, f_attn, 1, &dpre1, Some(df_attn));
    }
}

/// Per-token MLP over `[f_joint; f_attn; token]` projected to a common width,
/// with an additive low-rank adapter whose down-projection starts at zero.
#[derive(Clone, Debug)]
pub struct DeltaGenerator {
    proj_joint: Linear,
    proj_attn: Linear,
    proj_token: Linear,
    fc1: Linear,
    fc2: Linear,
    lora_b: Linear,
    lora_a: Linear,
    pub d: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Default)]
pub struct DeltaCache {
    u: Vec<f64>,
    pre1: Vec<f64>,
    h: Vec<f64>,
    low: Vec<f64>,
}

impl DeltaGenerator {
    pub fn new(layout: &mut ParamLayout, joint_dim: usize, d: usize, width: usize, rank: usize) -> Self {
        DeltaGenerator {
            proj_joint: Linear::new(layout, "delta.proj_joint", joint_dim, width, false),
            proj_attn: Linear::new(layout, "delta.proj_attn", d, width, true),
            proj_token: Linear::new(layout, "delta.proj_token", d, width, false),
            fc1: Linear::new(layout, "delta.fc1", width, width, true),
            fc2: Linear::new(layout, "delta.fc2", width, d, true),
            lora_b: Linear::zeros(layout, "delta.lora_b", width, rank),
            lora_a: Linear::new(layout, "delta.lora_a", rank, d, false),
            d,
            width,
        }
    }

    /// Contribution of the low-rank adapter alone, `L × D`.
    pub fn adapter_output(&self, p: &[f64], c: &DeltaCache) -> Vec<f64> {
        let l = c.u.len() / self.width;
        self.lora_a.forward(p, &c.low, l)
    }

    pub fn forward(&self, p: &[f64], f_joint: &[f64], f_attn: &[f64], tokens: &[f64]) -> (Vec<f64>, DeltaCache) {
        let l = tokens.len() / self.d;
        let mut shared = self.proj_joint.forward(p, f_joint, 1);
        self.proj_attn.forward_into(p, f_attn, 1, &mut shared, 1.0);
        let mut u = self.proj_token.forward(p, tokens, l);
        for row in u.chunks_exact_mut(self.width) {
            kernels::axpy(1.0, &shared, row);
        }
        let pre1 = self.fc1.forward(p, &u, l);
        let h = silu_vec(&pre1);
        let mut delta = self.fc2.forward(p, &h, l);
        let low = self.lora_b.forward(p, &u, l);
        self.lora_a.forward_into(p, &low, l, &mut delta, 1.0);
        (delta, DeltaCache { u, pre1, h, low })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        f_joint: &[f64],
        f_attn: &[f64],
        tokens: &[f64],
        c: &DeltaCache,
        ddelta: &[f64],
        df_joint: Option<&mut [f64]>,
        df_attn: &mut [f64],
    ) {
        let l = tokens.len() / self.d;
        let w = self.width;
        let mut dh = vec![0.0; l * w];
        self.fc2.backward(p, g, &c.h, l, ddelta, Some(&mut dh));
        let mut dpre1 = vec![0.0; l * w];
        silu_backward(&c.pre1, &dh, &mut dpre1);
        let mut du = vec![0.0; l * w];
        self.fc1.backward(p, g, &c.u, l, &dpre1, Some(&mut du));
        let mut dlow = vec![0.0; c.low.len()];
        self.lora_a.backward(p, g, &c.low, l, ddelta, Some(&mut dlow));
        self.lora_b.backward(p, g, &c.u, l, &dlow, Some(&mut du));
        self.proj_token.backward(p, g, tokens, l, &du, None);
        let mut dshared = vec![0.0; w];
        for row in du.chunks_exact(w) {
            kernels::axpy(1.0, row, &mut dshared);
        }
        self.proj_joint.backward(p, g, f_joint, 1, &dshared, df_joint);
        self.proj_attn.backward(p, g, f_attn, 1, &dshared, Some(df_attn));
    }
}

/// Single-head self-attention over the prompt (optionally position-coded),
/// a residual add, then a per-token MLP and sigmoid.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pos_proj: Linear,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    fc1: Linear,
    fc2: Linear,
    pub d: usize,
    pub pe_dim: usize,
    pub use_position: bool,
}

#[derive(Clone, Debug, Default)]
pub struct MaskCache {
    pe: Vec<f64>,
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    h: Vec<f64>,
    pre1: Vec<f64>,
    a1: Vec<f64>,
    mask: Vec<f64>,
}

impl MaskHead {
    pub fn new(layout: &mut ParamLayout, d: usize, hidden: usize, pe_dim: usize, use_position: bool) -> Self {
        MaskHead {
            pos_proj: Linear::new(layout, "mask.pos_proj", pe_dim, d, false),
            wq: Linear::new(layout, "mask.q", d, d, false),
            wk: Linear::new(layout, "mask.k", d, d, false),
            wv: Linear::new(layout, "mask.v", d, d, false),
            fc1: Linear::new(layout, "mask.fc1", d, hidden, true),
            fc2: Linear::new(layout, "mask.fc2", hidden, 1, true),
            d,
            pe_dim,
            use_position,
        }
    }

    pub fn forward(&self, p: &[f64], tokens: &[f64]) -> (Vec<f64>, MaskCache) {
        let d = self.d;
        let l = tokens.len() / d;
        let mut x = tokens.to_vec();
        let pe = if self.use_position {
            let pe = positional_encoding(l, self.pe_dim);
            self.pos_proj.forward_into(p, &pe, l, &mut x, 1.0);
            pe
        } else {
            Vec::new()
        };
        let q = self.wq.forward(p, &x, l);
        let k = self.wk.forward(p, &x, l);
        let v = self.wv.forward(p, &x, l);
        let scale = 1.0 / (d as f64).sqrt();
        let mut attn = vec![0.0; l * l];
        kernels::gemm(l, d, l, &q, kernels::Op::N, &k, kernels::Op::T, 0.0, &mut attn);
        for row in attn.chunks_exact_mut(l) {
            row.iter_mut().for_each(|s| *s *= scale);
            kernels::softmax_inplace(row);
        }
        let mut h = x.clone();
        kernels::gemm(l, l, d, &attn, kernels::Op::N, &v, kernels::Op::N, 1.0, &mut h);
        let pre1 = self.fc1.forward(p, &h, l);
        let a1 = silu_vec(&pre1);
        let mask: Vec<f64> = self.fc2.forward(p, &a1, l).into_iter().map(kernels::sigmoid).collect();
        let cache = MaskCache {
            pe,
            x,
            q,
            k,
            v,
            attn,
            h,
            pre1,
            a1,
            mask: mask.clone(),
        };
        (mask, cache)
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], c: &MaskCache, dmask: &[f64]) {
        use kernels::Op;
        let d = self.d;
        let l = dmask.len();
        let dlogit: Vec<f64> = dmask.iter().zip(&c.mask).map(|(dm, m)| dm * m * (1.0 - m)).collect();
        let mut da1 = vec![0.0; c.a1.len()];
        self.fc2.backward(p, g, &c.a1, l, &dlogit, Some(&mut da1));
        let mut dpre1 = vec![0.0; da1.len()];
        silu_backward(&c.pre1, &da1, &mut dpre1);
        let mut dh = vec![0.0; l * d];
        self.fc1.backward(p, g, &c.h, l, &dpre1, Some(&mut dh));

        let mut dx = dh.clone();
        let mut dattn = vec![0.0; l * l];
        kernels::gemm(l, d, l, &dh, Op::N, &c.v, Op::T, 0.0, &mut dattn);
        let mut dv = vec![0.0; l * d];
        kernels::gemm(l, l, d, &c.attn, Op::T, &dh, Op::N, 0.0, &mut dv);
        let scale = 1.0 / (d as f64).sqrt();
        let mut dscore = vec![0.0; l * l];
        for i in 0..l {
            let r = i * l..(i + 1) * l;
            kernels::softmax_backward(&c.attn[r.clone()], &dattn[r.clone()], &mut dscore[r]);
        }
        dscore.iter_mut().for_each(|v| *v *= scale);
        let mut dq = vec![0.0; l * d];
        kernels::gemm(l, l, d, &dscore, Op::N, &c.k, Op::N, 0.0, &mut dq);
        let mut dk = vec![0.0; l * d];
        kernels::gemm(l, l, d, &dscore, Op::T, &c.q, Op::N, 0.0, &mut dk);
        self.wq.backward(p, g, &c.x, l, &dq, Some(&mut dx));
        self.wk.backward(p, g, &c.x, l, &dk, Some(&mut dx));
        self.wv.backward(p, g, &c.x, l, &dv, Some(&mut dx));
        if self.use_position {
            self.pos_proj.backward(p, g, &c.pe, l, &dx, None);
        }
    }
}

/// `α = sigmoid(MLP(x)) · sigmoid(w_g·[x; pe] + b_g)` per token.
#[derive(Clone, Debug)]
pub struct AlphaHead {
    fc1: Linear,
    fc2: Linear,
    gate: Linear,
    pub d: usize,
    pub pe_dim: usize,
}

#[derive(Clone, Debug, Default)]
pub struct AlphaCache {
    tokens: Vec<f64>,
    pre1: Vec<f64>,
    a1: Vec<f64>,
    gate_in: Vec<f64>,
    scale: Vec<f64>,
    gate: Vec<f64>,
}

impl AlphaHead {
    pub fn new(layout: &mut ParamLayout, d: usize, hidden: usize, pe_dim: usize) -> Self {
        AlphaHead {
            fc1: Linear::new(layout, "alpha.fc1", d, hidden, true),
            fc2: Linear::new(layout, "alpha.fc2", hidden, 1, true),
            gate: Linear::new(layout, "alpha.gate", d + pe_dim, 1, true),
            d,
            pe_dim,
        }
    }

    /// Slot of the gate bias, for tests that drive it to extremes.
    pub fn gate_bias(&self) -> crate::params::Slot {
        self.gate.b.expect("gate has a bias")
    }

    pub fn forward(&self, p: &[f64], tokens: &[f64]) -> (Vec<f64>, AlphaCache) {
        let l = tokens.len() / self.d;
        let pre1 = self.fc1.forward(p, tokens, l);
        let a1 = silu_vec(&pre1);
        let scale: Vec<f64> = self.fc2.forward(p, &a1, l).into_iter().map(kernels::sigmoid).collect();
        let pe = positional_encoding(l, self.pe_dim);
        let mut gate_in = Vec::with_capacity(l * (self.d + self.pe_dim));
        for i in 0..l {
            gate_in.extend_from_slice(&tokens[i * self.d..(i + 1) * self.d]);
            gate_in.extend_from_slice(&pe[i * self.pe_dim..(i + 1) * self.pe_dim]);
        }
        let gate: Vec<f64> = self.gate.forward(p, &gate_in, l).into_iter().map(kernels::sigmoid).collect();
        let alpha = scale.iter().zip(&gate).map(|(s, g)| s * g).collect();
        let cache = AlphaCache {
            tokens: tokens.to_vec(),
            pre1,
            a1,
            gate_in,
            scale,
            gate,
        };
        (alpha, cache)
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], c: &AlphaCache, dalpha: &[f64]) {
        let l = dalpha.len();
        let mut dscale_pre = vec![0.0; l];
        let mut dgate_pre = vec![0.0; l];
        for i in 0..l {
            let (s, gt) = (c.scale[i], c.gate[i]);
            dscale_pre[i] = dalpha[i] * gt * s * (1.0 - s);
            dgate_pre[i] = dalpha[i] * s * gt * (1.0 - gt);
        }
        self.gate.backward(p, g, &c.gate_in, l, &dgate_pre, None);
        let mut da1 = vec![0.0; c.a1.len()];
        self.fc2.backward(p, g, &c.a1, l, &dscale_pre, Some(&mut da1));
        let mut dpre1 = vec![0.0; da1.len()];
        silu_backward(&c.pre1, &da1, &mut dpre1);
        self.fc1.backward(p, g, &c.tokens, l, &dpre1, None);
    }
}
