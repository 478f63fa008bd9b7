//! Gram matrices of the positional basis, 2-D DCT analysis, finite
//! differences on the reflected Gram matrix and the low-frequency
//! approximation certificate.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::decompose::PositionalBasisMatrix;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, gram_rows, op_norm, sym_eigen_desc};

/// Relative column-sum threshold above which `P` is re-centred before the
/// certificate is built.
pub const RECENTER_TOL: f64 = 1e-8;
/// Negative eigenvalues of `4QᵀGQ` above `-CLIP_TOL·scale` are clipped silently.
pub const CLIP_TOL: f64 = 1e-10;
/// Below `-FAIL_TOL·scale` the input is not a Gram matrix.
pub const FAIL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GramBundle {
    /// `T × T` normalized Gram matrix.
    pub g: DMatrix<f64>,
    /// `2T × 2T` reflected extension.
    pub g_ext: DMatrix<f64>,
    /// Zero rows of `P`; their rows and columns of `g` are zero.
    pub excluded_rows: Vec<usize>,
}

/// Normalized Gram matrix of the positional basis and its reflection.
pub fn gram(pb: &PositionalBasisMatrix) -> Result<GramBundle> {
    let t = pb.n_positions();
    if pb.zero_rows().len() == t {
        return Err(Error::degenerate("all positional rows are zero"));
    }
    let mut g = gram_rows(pb.p_norm().as_view());
    for i in 0..t {
        for j in 0..t {
            g[(i, j)] = g[(i, j)].clamp(-1.0, 1.0);
        }
    }
    for i in 0..t {
        if !pb.zero_rows().contains(&i) {
            g[(i, i)] = 1.0;
        }
    }
    // Exact symmetry regardless of gemm accumulation order.
    for i in 0..t {
        for j in 0..i {
            g[(j, i)] = g[(i, j)];
        }
    }
    let g_ext = extend_reflect(&g);
    Ok(GramBundle { g, g_ext, excluded_rows: pb.zero_rows().to_vec() })
}

/// `[[G, G·R], [R·G, R·G·R]]` with `R` the order-reversing permutation.
pub fn extend_reflect(g: &DMatrix<f64>) -> DMatrix<f64> {
    let t = g.nrows();
    let fold = |i: usize| if i < t { i } else { 2 * t - 1 - i };
    DMatrix::from_fn(2 * t, 2 * t, |i, j| g[(fold(i), fold(j))])
}

/// Orthonormal DCT-II matrix: row `k` is `α_k cos(πk(n+½)/T)`.
pub fn dct_matrix(t: usize) -> DMatrix<f64> {
    let a0 = (1.0 / t as f64).sqrt();
    let a = (2.0 / t as f64).sqrt();
    DMatrix::from_fn(t, t, |k, n| {
        let scale = if k == 0 { a0 } else { a };
        scale * (PI * k as f64 * (n as f64 + 0.5) / t as f64).cos()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencySummary {
    #[serde(skip)]
    pub g_hat: DMatrix<f64>,
    /// `(K, r_K)` for each requested `K`, in request order.
    pub ratios: Vec<(usize, f64)>,
}

impl FrequencySummary {
    pub fn ratio(&self, k: usize) -> Option<f64> {
        self.ratios.iter().find(|(kk, _)| *kk == k).map(|&(_, r)| r)
    }
}

/// `Ĝ = F̃ G F̃ᵀ` and the low-frequency energy ratios `r_K`.
///
/// `K` larger than `T` is treated as `T`.
pub fn dct2(g: &DMatrix<f64>, ks: &[usize]) -> Result<FrequencySummary> {
    if !g.is_square() || g.is_empty() {
        return Err(Error::invalid(format!("dct2 needs a non-empty square matrix, got {:?}", g.shape())));
    }
    if !all_finite(g.as_slice()) {
        return Err(Error::invalid("matrix contains non-finite entries"));
    }
    if ks.contains(&0) {
        return Err(Error::invalid("K must be at least 1"));
    }
    let f = dct_matrix(g.nrows());
    let g_hat = &f * g * f.transpose();
    let ratios = ks.iter().map(|&k| (k, low_frequency_ratio(&g_hat, k))).collect();
    Ok(FrequencySummary { g_hat, ratios })
}

/// Inverse of [`dct2`]'s transform.
pub fn idct2(g_hat: &DMatrix<f64>) -> DMatrix<f64> {
    let f = dct_matrix(g_hat.nrows());
    f.transpose() * g_hat * f
}

/// Share of `Σ Ĝ²` in the top-left `K × K` block. Zero total gives 1.
pub fn low_frequency_ratio(g_hat: &DMatrix<f64>, k: usize) -> f64 {
    let k = k.min(g_hat.nrows());
    let total = g_hat.norm_squared();
    if total == 0.0 {
        return 1.0;
    }
    let top = g_hat.view((0, 0), (k, k)).norm_squared();
    (top / total).min(1.0)
}

/// `Δ^{(m,m)}` of the reflected Gram matrix with periodic wrap and `T²`
/// scaling per application (`T = N/2`). Returns the matrix and its max-norm.
pub fn finite_difference(g_ext: &DMatrix<f64>, m: usize) -> Result<(DMatrix<f64>, f64)> {
    if m < 1 {
        return Err(Error::invalid("finite difference order must be at least 1"));
    }
    if !g_ext.is_square() || !g_ext.nrows().is_multiple_of(2) || g_ext.is_empty() {
        return Err(Error::invalid(format!("expected a 2T × 2T matrix, got {:?}", g_ext.shape())));
    }
    let n = g_ext.nrows();
    let t2 = ((n / 2) as f64).powi(2);
    let mut cur = g_ext.clone();
    for _ in 0..m {
        let prev = cur.clone();
        for j in 0..n {
            let jm = (j + n - 1) % n;
            for i in 0..n {
                let im = (i + n - 1) % n;
                cur[(i, j)] = t2 * (prev[(i, j)] - prev[(im, j)] - prev[(i, jm)] + prev[(im, jm)]);
            }
        }
    }
    let max = cur.amax();
    Ok((cur, max))
}

/// `F_{≤k}`: column `s` (1-based) is `cos((s−½)(t−1)π/T)` for `t = 1..T`.
pub fn low_frequency_vectors(t: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t, k, |ti, s| ((s as f64 + 0.5) * ti as f64 * PI / t as f64).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Thm1Certificate {
    pub k: usize,
    pub m: usize,
    pub t: usize,
    /// `(1/T)‖G − F B (F B)ᵀ‖_op`.
    pub lhs: f64,
    /// `6/(8k)^m · ‖Δ^{(m,m)} G̃‖_max`.
    pub rhs: f64,
    pub delta_max: f64,
    /// Row-major `k × k`.
    pub b: Vec<Vec<f64>>,
    pub holds: bool,
    /// Whether `P` was re-centred first.
    pub recentered: bool,
    pub excluded_rows: Vec<usize>,
    /// Most negative eigenvalue of `4QᵀGQ` before clipping.
    pub min_eigenvalue: f64,
}

/// Builds the low-frequency certificate for the positional basis.
///
/// `B` is the constructive factor: `4QᵀGQ = B₀B₀ᵀ` through a clipped
/// eigendecomposition, `B = B₀/T`, with `Q = F_{≤k}`.
pub fn thm1_verify(pb: &PositionalBasisMatrix, k: usize, m: usize) -> Result<Thm1Certificate> {
    let t = pb.n_positions();
    if k < 1 || k > t {
        return Err(Error::invalid(format!("k must lie in 1..={t}, got {k}")));
    }
    if m < 1 {
        return Err(Error::invalid("m must be at least 1"));
    }
    let p = pb.p();
    let col_sum = DMatrix::from_fn(1, p.ncols(), |_, j| p.column(j).sum());
    let recentered = col_sum.norm() / t as f64 > RECENTER_TOL;
    let centred;
    let pb = if recentered {
        let mean = col_sum / t as f64;
        centred = PositionalBasisMatrix::new(DMatrix::from_fn(t, p.ncols(), |i, j| p[(i, j)] - mean[(0, j)]));
        &centred
    } else {
        pb
    };

    let bundle = gram(pb)?;
    let g = &bundle.g;
    let q = low_frequency_vectors(t, k);
    let core = (q.transpose() * g * &q) * 4.0;
    let core = (&core + core.transpose()) * 0.5;
    let (vals, vecs) = sym_eigen_desc(&core);
    let scale = vals.first().copied().unwrap_or(0.0).max(1.0);
    let min_eigenvalue = vals.last().copied().unwrap_or(0.0);
    if min_eigenvalue < -FAIL_TOL * scale {
        return Err(Error::NumericalFailure(format!(
            "4QᵀGQ has eigenvalue {min_eigenvalue:e}; G is not a Gram matrix"
        )));
    }
    if min_eigenvalue < -CLIP_TOL * scale {
        log::warn!("clipping eigenvalue {min_eigenvalue:e} of 4QᵀGQ to zero");
    }
    let mut b0 = vecs;
    for (j, &l) in vals.iter().enumerate() {
        b0.column_mut(j).scale_mut(l.max(0.0).sqrt());
    }
    let b = b0 / t as f64;
    let fb = &q * &b;
    let approx = &fb * fb.transpose();
    let lhs = op_norm((g - approx).as_view()) / t as f64;

    let (_, delta_max) = finite_difference(&bundle.g_ext, m)?;
    let rhs = 6.0 / (8.0 * k as f64).powi(m as i32) * delta_max;
    Ok(Thm1Certificate {
        k,
        m,
        t,
        lhs,
        rhs,
        delta_max,
        b: b.row_iter().map(|r| r.iter().copied().collect()).collect(),
        holds: lhs <= rhs,
        recentered,
        excluded_rows: bundle.excluded_rows,
        min_eigenvalue,
    })
}
