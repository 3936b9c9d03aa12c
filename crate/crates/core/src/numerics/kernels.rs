//! Slice-level kernels shared by the layers. Everything here works on
//! row-major `f64` buffers and panics on inconsistent lengths, since callers
//! inside the crate size their buffers from the same layout.

/// Matrix layout of a gemm operand as stored in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// Stored exactly as the logical operand.
    N,
    /// Stored transposed.
    T,
}

/// `c = a · b + beta · c` where `a` is logically `m×k`, `b` is `k×n` and `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: Op, b: &[f64], tb: Op, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if beta != 1.0 {
        for v in &mut c[..m * n] {
            *v = if beta == 0.0 { 0.0 } else { *v * beta };
        }
    }
    if k == 0 {
        return;
    }
    // Skinny products are dominated by packing overhead in the blocked kernel.
    if m * n * k < 512 {
        small_gemm(m, k, n, a, ta, b, tb, c);
        return;
    }
    let (rsa, csa) = match ta {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a · b` with loop orders that keep the innermost access contiguous.
#[allow(clippy::too_many_arguments)]
fn small_gemm(m: usize, k: usize, n: usize, a: &[f64], ta: Op, b: &[f64], tb: Op, c: &mut [f64]) {
    match (ta, tb) {
        (Op::N, Op::T) => {
            for i in 0..m {
                let ar = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    c[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (Op::N, Op::N) => {
            for i in 0..m {
                let cr = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av != 0.0 {
                        axpy(av, &b[p * n..(p + 1) * n], cr);
                    }
                }
            }
        }
        (Op::T, Op::N) => {
            for p in 0..k {
                let br = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av != 0.0 {
                        axpy(av, br, &mut c[i * n..(i + 1) * n]);
                    }
                }
            }
        }
        (Op::T, Op::T) => {
            for i in 0..m {
                for j in 0..n {
                    let bc = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * bc[p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d silu / dx
#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable in-place softmax of one lane.
pub fn softmax_inplace(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Backward of a softmax lane: given the outputs `p` and upstream `dp`, returns
/// `p ⊙ (dp − ⟨p, dp⟩)` into `out`.
pub fn softmax_backward(p: &[f64], dp: &[f64], out: &mut [f64]) {
    let inner = dot(p, dp);
    for ((o, pi), di) in out.iter_mut().zip(p).zip(dp) {
        *o = pi * (di - inner);
    }
}

/// Cosine similarity with the zero-vector convention: if either side has
/// norm below `eps` the similarity is 0. Clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let na = norm2(a);
    let nb = norm2(b);
    if na < eps || nb < eps {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Gradient of [`cosine`] with respect to `a`, accumulated as `ga += scale · ∂cos/∂a`.
pub fn cosine_grad_a(a: &[f64], b: &[f64], eps: f64, scale: f64, ga: &mut [f64]) {
    let na = norm2(a);
    let nb = norm2(b);
    if na < eps || nb < eps {
        return;
    }
    let c = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let self_coef = c / (na * na);
    for ((g, ai), bi) in ga.iter_mut().zip(a).zip(b) {
        *g += scale * (bi * inv - ai * self_coef);
    }
}

/// Standard sinusoidal embedding: the first half holds `sin(pos·f_i)`, the second
/// half `cos(pos·f_i)`, with `f_i = base^(−i/half)`.
pub fn sinusoid(pos: f64, dim: usize, base: f64, out: &mut [f64]) {
    assert!(dim % 2 == 0 && out.len() == dim, "sinusoid: even width required");
    let half = dim / 2;
    for i in 0..half {
        let freq = base.powf(-(i as f64) / half as f64);
        let angle = pos * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
}
