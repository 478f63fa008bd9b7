//! Dense linear-algebra helpers shared by the analysis modules.
//!
//! Everything here works on `f64` [`DMatrix`] values. Operator norms switch
//! between an exact route (eigendecomposition of the smaller Gram matrix)
//! and seeded power iteration once both dimensions exceed
//! [`EXACT_NORM_MAX_DIM`].

use nalgebra::{DMatrix, DMatrixView, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Largest min-dimension for which operator norms use the exact route.
pub const EXACT_NORM_MAX_DIM: usize = 512;

/// Power-iteration stopping tolerance on the relative change of the estimate.
pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 1000;
const POWER_SEED: u64 = 0x5EED;

/// Column chunk used when streaming a Gram matrix through gemm.
const GRAM_ROW_BLOCK: usize = 128;
const GRAM_CHUNK: usize = 256;

/// Pairwise (cascade) summation of a slice.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (lo, hi) = xs.split_at(xs.len() / 2);
    pairwise_sum(lo) + pairwise_sum(hi)
}

/// Pairwise sum of `n` vectors of length `dim`, where `row(i)` yields the
/// i-th vector. The summation tree depends only on `n`, so results are
/// bit-reproducible.
pub fn pairwise_vec_sum<'a, F>(n: usize, dim: usize, row: &F) -> Vec<f64>
where
    F: Fn(usize) -> &'a [f64],
{
    fn rec<'a, F: Fn(usize) -> &'a [f64]>(lo: usize, hi: usize, dim: usize, row: &F) -> Vec<f64> {
        if hi - lo <= 8 {
            let mut acc = vec![0.0; dim];
            for i in lo..hi {
                for (a, x) in acc.iter_mut().zip(row(i)) {
                    *a += x;
                }
            }
            return acc;
        }
        let mid = lo + (hi - lo) / 2;
        let mut left = rec(lo, mid, dim, row);
        let right = rec(mid, hi, dim, row);
        for (a, b) in left.iter_mut().zip(&right) {
            *a += b;
        }
        left
    }
    rec(0, n, dim, row)
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Symmetric eigendecomposition with eigenpairs sorted by descending eigenvalue.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Singular values in descending order.
pub fn singular_values_desc(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// `m * mᵀ`, accumulated over column chunks so that the full product of a
/// very wide matrix never needs a second copy in memory. Only the upper block
/// triangle is multiplied; the lower one is mirrored.
pub fn gram_rows(m: DMatrixView<'_, f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut acc = DMatrix::zeros(r, r);
    let blocks: Vec<(usize, usize)> =
        (0..r).step_by(GRAM_ROW_BLOCK).map(|i| (i, GRAM_ROW_BLOCK.min(r - i))).collect();
    let mut start = 0;
    while start < c {
        let w = GRAM_CHUNK.min(c - start);
        let chunk = m.columns(start, w);
        for (bi, &(i0, ih)) in blocks.iter().enumerate() {
            let a = chunk.rows(i0, ih);
            for &(j0, jh) in &blocks[bi..] {
                let b = chunk.rows(j0, jh);
                acc.view_mut((i0, j0), (ih, jh)).gemm(1.0, &a, &b.transpose(), 1.0);
            }
        }
        start += w;
    }
    for j in 0..r {
        for i in j + 1..r {
            acc[(i, j)] = acc[(j, i)];
        }
    }
    acc
}

/// Largest eigenvalue of a symmetric PSD matrix, clamped at zero.
fn top_eigenvalue_psd(g: DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(g);
    eig.eigenvalues.iter().copied().fold(0.0, f64::max)
}

/// Operator (spectral) norm. Exact when `min(rows, cols) <= 512`, seeded
/// power iteration otherwise.
pub fn op_norm(m: DMatrixView<'_, f64>) -> f64 {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return 0.0;
    }
    if r.min(c) > EXACT_NORM_MAX_DIM {
        return power_iteration_op_norm(m, POWER_TOL, POWER_MAX_ITER);
    }
    let g = if r <= c { gram_rows(m) } else { gram_rows(m.transpose().as_view()) };
    top_eigenvalue_psd(g).sqrt()
}

/// Operator norm of a symmetric matrix as its largest absolute eigenvalue.
pub fn sym_op_norm(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

/// Power iteration on `mᵀm` from a fixed-seed Gaussian start vector.
pub fn power_iteration_op_norm(m: DMatrixView<'_, f64>, tol: f64, max_iter: usize) -> f64 {
    let (_, c) = m.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v = DVector::from_fn(c, |_, _| StandardNormal.sample(&mut rng));
    let n = v.norm();
    if n == 0.0 {
        return 0.0;
    }
    v /= n;
    let mut sigma = 0.0;
    for _ in 0..max_iter {
        let u = m * &v;
        let next = u.norm();
        if next == 0.0 {
            return 0.0;
        }
        let w = m.transpose() * u;
        let wn = w.norm();
        if wn == 0.0 {
            return next;
        }
        v = w / wn;
        let done = (next - sigma).abs() <= tol * next;
        sigma = next;
        if done {
            break;
        }
    }
    sigma
}

/// Row-wise unit normalization. Rows whose norm is exactly zero stay zero
/// and their indices are returned.
pub fn normalize_rows(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let mut out = m.clone();
    let mut zero = Vec::new();
    for i in 0..m.nrows() {
        let n = m.row(i).norm();
        if n == 0.0 {
            zero.push(i);
        } else {
            out.row_mut(i).scale_mut(1.0 / n);
        }
    }
    (out, zero)
}

/// Linear-interpolation quantile (the "type 7" estimator) of `values`.
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, (pairwise_sum(&ss) / (n - 1.0)).sqrt())
}
