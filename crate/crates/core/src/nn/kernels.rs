//! Dense kernels on row-major matrices.
//!
//! Each output row is computed from the corresponding input row only, so
//! row-wise independence (and hence bitwise causal-mask invariance) holds.

/// `a[n,k] · b[k,m]`
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let ci = &mut c[i * m..(i + 1) * m];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * m..(p + 1) * m];
            for (cij, &bpj) in ci.iter_mut().zip(bp) {
                *cij += aip * bpj;
            }
        }
    }
    c
}

/// `aᵀ · g` for `a[n,k]`, `g[n,m]`, giving `[k,m]`.
pub fn matmul_tn(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * m];
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        let gi = &g[i * m..(i + 1) * m];
        for (p, &aip) in ai.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let cp = &mut c[p * m..(p + 1) * m];
            for (cpj, &gij) in cp.iter_mut().zip(gi) {
                *cpj += aip * gij;
            }
        }
    }
    c
}

/// `g · bᵀ` for `g[n,m]`, `b[k,m]`, giving `[n,k]`.
pub fn matmul_nt(g: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * k];
    for i in 0..n {
        let gi = &g[i * m..(i + 1) * m];
        let ci = &mut c[i * k..(i + 1) * k];
        for (p, cip) in ci.iter_mut().enumerate() {
            *cip = dot(gi, &b[p * m..(p + 1) * m]);
        }
    }
    c
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociation.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Numerically stable `log Σ exp(x)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
