//! Dense row-major kernels used by the attention network.

use num_traits::Float;

/// `out (m×n) = a (m×k) · b (k×n)`.
pub fn matmul<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `out (m×n) += a (m×k) · b (k×n)` with a bias row broadcast.
pub fn affine<F: Float>(a: &[F], w: &[F], bias: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = matmul(a, w, m, k, n);
    for row in out.chunks_exact_mut(n) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
    out
}

/// `acc (k×n) += aᵀ · b` for `a (m×k)`, `b (m×n)`.
pub fn acc_at_b<F: Float>(acc: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let arow = &mut acc[p * n..(p + 1) * n];
            for (o, &bv) in arow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out (m×k) = a (m×n) · bᵀ` for `b (k×n)`.
pub fn matmul_bt<F: Float>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
    out
}

/// Column sums of `g (m×n)` added into `acc (n)`.
pub fn acc_colsum<F: Float>(acc: &mut [F], g: &[F], n: usize) {
    for row in g.chunks_exact(n) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
}

#[inline]
pub fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

pub fn add_into<F: Float>(acc: &mut [F], x: &[F]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a = *a + v;
    }
}

pub struct LnCache<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
}

pub const LN_EPS: f64 = 1e-8;

/// Row-wise layer norm of `x (rows×d)`.
pub fn layer_norm<F: Float>(x: &[F], gamma: &[F], beta: &[F], d: usize) -> (Vec<F>, LnCache<F>) {
    let rows = x.len() / d;
    let eps = F::from(LN_EPS).unwrap();
    let df = F::from(d).unwrap();
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv_std = vec![F::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().fold(F::zero(), |s, &v| s + v) / df;
        let var = row.iter().fold(F::zero(), |s, &v| s + (v - mean) * (v - mean)) / df;
        let is = F::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// Returns `dx` and accumulates `dgamma`, `dbeta`.
pub fn layer_norm_backward<F: Float>(
    dy: &[F],
    cache: &LnCache<F>,
    gamma: &[F],
    dgamma: &mut [F],
    dbeta: &mut [F],
    d: usize,
) -> Vec<F> {
    let rows = dy.len() / d;
    let df = F::from(d).unwrap();
    let mut dx = vec![F::zero(); dy.len()];
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for j in 0..d {
            dgamma[j] = dgamma[j] + dyr[j] * xh[j];
            dbeta[j] = dbeta[j] + dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
            sum_dxhat = sum_dxhat + dxhat[j];
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xh[j];
        }
        let scale = cache.inv_std[r] / df;
        for j in 0..d {
            dx[r * d + j] = scale * (df * dxhat[j] - sum_dxhat - xh[j] * sum_dxhat_xhat);
        }
    }
    dx
}
