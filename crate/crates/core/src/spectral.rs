//! Singular spectra, rank estimates, stable rank and relative norm.

use nalgebra::{DMatrix, DMatrixView};
use serde::Serialize;

use crate::decompose::Decomposition;
use crate::error::{Error, Result};
use crate::linalg::{
    all_finite, power_iteration_op_norm, singular_values_desc, EXACT_NORM_MAX_DIM, POWER_MAX_ITER,
    POWER_TOL,
};
use crate::tensor::Tensor3;

/// Number of leading singular values written to CSV rows.
pub const CSV_TOP_SINGULAR: usize = 60;

/// Cumulative squared-energy fraction used by [`RankMethod::Energy`].
pub const ENERGY_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    /// Largest consecutive ratio `σ_i / σ_{i+1}` over the leading half.
    Gap,
    /// Smallest `k` holding 95% of the squared spectrum.
    Energy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralSummary {
    pub singular_values: Vec<f64>,
    pub rank_gap: usize,
    pub rank_energy: usize,
    pub stable_rank: f64,
    pub relative_norm: f64,
}

impl SpectralSummary {
    /// Summary of `P` alone; `relative_norm` comes from elsewhere.
    pub fn of_matrix(p: &DMatrix<f64>, relative_norm: f64) -> Result<Self> {
        let sv = singular_spectrum(p)?;
        Ok(Self {
            rank_gap: rank_from_spectrum(&sv, RankMethod::Gap)?,
            rank_energy: rank_from_spectrum(&sv, RankMethod::Energy)?,
            stable_rank: stable_rank_from_spectrum(&sv)?,
            singular_values: sv,
            relative_norm,
        })
    }

    pub fn csv_header() -> Vec<String> {
        let mut h: Vec<String> =
            ["layer", "rank_gap", "rank_energy", "stable_rank", "relative_norm"].map(String::from).to_vec();
        h.extend((1..=CSV_TOP_SINGULAR).map(|i| format!("sv_{i}")));
        h
    }

    /// One CSV record; missing singular values are left empty.
    pub fn csv_record(&self, layer: usize) -> Vec<String> {
        let mut r = vec![
            layer.to_string(),
            self.rank_gap.to_string(),
            self.rank_energy.to_string(),
            self.stable_rank.to_string(),
            self.relative_norm.to_string(),
        ];
        r.extend((0..CSV_TOP_SINGULAR).map(|i| self.singular_values.get(i).map(f64::to_string).unwrap_or_default()));
        r
    }
}

pub fn singular_spectrum(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !all_finite(m.as_slice()) {
        return Err(Error::invalid("matrix contains non-finite entries"));
    }
    Ok(singular_values_desc(m))
}

pub fn stable_rank(m: &DMatrix<f64>) -> Result<f64> {
    stable_rank_from_spectrum(&singular_spectrum(m)?)
}

pub fn stable_rank_from_spectrum(sv: &[f64]) -> Result<f64> {
    let top = sv.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Err(Error::degenerate("stable rank of a zero matrix"));
    }
    Ok(sv.iter().map(|s| s * s).sum::<f64>() / (top * top))
}

pub fn rank_estimate(m: &DMatrix<f64>, method: RankMethod) -> Result<usize> {
    rank_from_spectrum(&singular_spectrum(m)?, method)
}

/// Rank estimate from a descending spectrum.
///
/// `Gap` scans `i = 1..=⌈n/2⌉` (also `i < n`) and returns the first maximiser
/// of `σ_i / σ_{i+1}`; a zero denominator under a positive numerator counts as
/// an infinite ratio and `0/0` as zero. `Energy` returns the smallest `k` with
/// `Σ_{i≤k} σ_i² ≥ 0.95 Σ σ_i²`.
pub fn rank_from_spectrum(sv: &[f64], method: RankMethod) -> Result<usize> {
    if sv.first().is_none_or(|&s| s <= 0.0) {
        return Err(Error::degenerate("rank estimate of a zero matrix"));
    }
    let n = sv.len();
    match method {
        RankMethod::Gap => {
            if n == 1 {
                return Ok(1);
            }
            let last = n.div_ceil(2).min(n - 1);
            let mut best = (1, f64::NEG_INFINITY);
            for i in 1..=last {
                let (a, b) = (sv[i - 1], sv[i]);
                let ratio = if b > 0.0 {
                    a / b
                } else if a > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
                if ratio > best.1 {
                    best = (i, ratio);
                }
            }
            Ok(best.0)
        }
        RankMethod::Energy => {
            let total: f64 = sv.iter().map(|s| s * s).sum();
            // Tiny slack so that exact ties such as equal spectra are not
            // lost to rounding in the cumulative sum.
            let target = ENERGY_FRACTION * total * (1.0 - 1e-12);
            let mut acc = 0.0;
            for (i, s) in sv.iter().enumerate() {
                acc += s * s;
                if acc >= target {
                    return Ok(i + 1);
                }
            }
            Ok(n)
        }
    }
}

/// `‖P‖_op / ‖M‖_op` for explicit matrices.
pub fn relative_norm(p: &DMatrix<f64>, m_centered: &DMatrix<f64>) -> Result<f64> {
    let denom = crate::linalg::op_norm(m_centered.as_view());
    if denom == 0.0 {
        return Err(Error::degenerate("centered embedding matrix is zero"));
    }
    Ok(crate::linalg::op_norm(p.as_view()) / denom)
}

/// Relative norm from a decomposition without materialising `M`.
///
/// `M` is the `d × CT` matrix of centered embeddings `h[c,t] − μ`. Because
/// `pos`, `ctx` and `resid` sum to zero along the shared axes, the cross
/// terms of `M Mᵀ` vanish and `M Mᵀ = C·PᵀP + T·XᵀX + R Rᵀ` with `X` the
/// context basis and `R` the residual, already laid out as `d × CT`.
pub fn relative_norm_from_decomposition(dec: &Decomposition) -> Result<f64> {
    let denom = centered_op_norm(dec);
    if denom == 0.0 {
        return Err(Error::degenerate("centered embeddings are all zero"));
    }
    Ok(crate::linalg::op_norm(dec.pos.as_view()) / denom)
}

fn centered_op_norm(dec: &Decomposition) -> f64 {
    let [c, t, d] = dec.dims();
    let r = DMatrixView::from_slice(dec.resid.as_slice(), d, c * t);
    let mut gram = crate::linalg::gram_rows(r);
    gram.gemm(c as f64, &dec.pos.transpose(), &dec.pos, 1.0);
    gram.gemm(t as f64, &dec.ctx.transpose(), &dec.ctx, 1.0);
    top_eigenvalue_psd(gram).sqrt()
}

fn top_eigenvalue_psd(g: DMatrix<f64>) -> f64 {
    if g.nrows() <= EXACT_NORM_MAX_DIM {
        nalgebra::SymmetricEigen::new(g).eigenvalues.iter().copied().fold(0.0, f64::max)
    } else {
        power_iteration_op_norm(g.as_view(), POWER_TOL, POWER_MAX_ITER)
    }
}

/// Centered embeddings as an explicit `d × CT` matrix. Test and small-input
/// helper; large inputs should go through [`relative_norm_from_decomposition`].
pub fn centered_matrix(data: &Tensor3, mu: &[f64]) -> DMatrix<f64> {
    let [c, t, d] = data.dims();
    DMatrix::from_fn(d, c * t, |k, j| data.as_slice()[j * d + k] - mu[k])
}
