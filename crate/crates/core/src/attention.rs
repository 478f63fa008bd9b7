//! QK matrices and their four positional/contextual constituents, softmax
//! attention, the argmax locality ratio and the weight-matrix dissection.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::decompose::{Decomposition, PositionalBasisMatrix};
use crate::error::{Error, Result};
use crate::linalg::{quantile, singular_values_desc, sym_eigen_desc};
use crate::tensor::AttentionWeights;

/// How the global mean enters the query/key inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MuMode {
    /// `h = pos_t + cvec`.
    #[default]
    Exclude,
    /// `h = (μ + pos_t) + cvec`; the mean is carried by the positional part.
    FoldIntoPos,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QkConstituents {
    pub full: DMatrix<f64>,
    pub pp: DMatrix<f64>,
    pub pc: DMatrix<f64>,
    pub cp: DMatrix<f64>,
    pub cc: DMatrix<f64>,
    pub mu_mode: MuMode,
}

impl QkConstituents {
    pub fn sum(&self) -> DMatrix<f64> {
        &self.pp + &self.pc + &self.cp + &self.cc
    }
}

fn positional_rows(dec: &Decomposition, mode: MuMode) -> DMatrix<f64> {
    match mode {
        MuMode::Exclude => dec.pos.clone(),
        MuMode::FoldIntoPos => {
            let mut p = dec.pos.clone();
            for mut r in p.row_iter_mut() {
                r += dec.mu.transpose();
            }
            p
        }
    }
}

fn check_dims(dec: &Decomposition, w: &AttentionWeights) -> Result<()> {
    let d = dec.dims()[2];
    if w.d_model() != d {
        return Err(Error::invalid(format!("weights expect d = {}, embeddings have d = {d}", w.d_model())));
    }
    Ok(())
}

/// `X W Yᵀ` with `W = W^q (W^k)ᵀ / √d_head`, evaluated through the
/// `d_head`-dimensional projections.
fn bilinear(x: &DMatrix<f64>, y: &DMatrix<f64>, w: &AttentionWeights) -> DMatrix<f64> {
    let scale = 1.0 / (w.d_head() as f64).sqrt();
    (x * &w.wq) * (y * &w.wk).transpose() * scale
}

/// QK matrix of sequence `seq` and its four constituents.
pub fn qk_decompose(dec: &Decomposition, w: &AttentionWeights, seq: usize, mode: MuMode) -> Result<QkConstituents> {
    check_dims(dec, w)?;
    let c = dec.dims()[0];
    if seq >= c {
        return Err(Error::invalid(format!("sequence index {seq} out of range for C = {c}")));
    }
    let p = positional_rows(dec, mode);
    let cv = dec.cvec_matrix(seq);
    let h = &p + &cv;
    Ok(QkConstituents {
        full: bilinear(&h, &h, w),
        pp: bilinear(&p, &p, w),
        pc: bilinear(&p, &cv, w),
        cp: bilinear(&cv, &p, w),
        cc: bilinear(&cv, &cv, w),
        mu_mode: mode,
    })
}

/// Only the positional-positional constituent, shared by all sequences.
pub fn pos_pos_constituent(dec: &Decomposition, w: &AttentionWeights, mode: MuMode) -> Result<DMatrix<f64>> {
    check_dims(dec, w)?;
    let p = positional_rows(dec, mode);
    Ok(bilinear(&p, &p, w))
}

/// Row-wise softmax. With `causal`, entries `t' > t` get zero mass.
pub fn attention_matrix(qk: &DMatrix<f64>, causal: bool) -> DMatrix<f64> {
    let (n, m) = qk.shape();
    let mut out = DMatrix::zeros(n, m);
    for i in 0..n {
        let allowed = if causal { (i + 1).min(m) } else { m };
        let max = (0..allowed).map(|j| qk[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..allowed {
            let e = (qk[(i, j)] - max).exp();
            out[(i, j)] = e;
            total += e;
        }
        for j in 0..allowed {
            out[(i, j)] /= total;
        }
    }
    out
}

/// Normalized kernel weights `K_W(x_t, x_k) / Σ_k' K_W(x_t, x_k')`, with
/// `W` the head's scaled QK matrix and rows of `x` as inputs.
pub fn kernel_smoothing_weights(x: &DMatrix<f64>, w: &AttentionWeights, causal: bool) -> DMatrix<f64> {
    let wm = w.qk_matrix();
    let n = x.nrows();
    let mut out = DMatrix::zeros(n, n);
    for t in 0..n {
        let allowed = if causal { t + 1 } else { n };
        let logs: Vec<f64> = (0..allowed)
            .map(|k| crate::kernel::log_kernel(&wm, &x.row(t).transpose(), &x.row(k).transpose()))
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        for (k, l) in logs.iter().enumerate() {
            out[(t, k)] = (l - max).exp() / total;
        }
    }
    out
}

/// Fraction of rows `t = 2..T` whose maximiser over `t' ≤ t` (all `t'` when
/// not causal) is `t` itself. Ties go to the smaller index.
pub fn argmax_locality_ratio(b: &DMatrix<f64>, causal: bool) -> Result<f64> {
    let t = b.nrows();
    if t < 2 || !b.is_square() {
        return Err(Error::invalid(format!("argmax ratio needs a square matrix with T ≥ 2, got {:?}", b.shape())));
    }
    let mut hits = 0usize;
    for i in 1..t {
        let allowed = if causal { i + 1 } else { t };
        let mut best = 0;
        for j in 1..allowed {
            if b[(i, j)] > b[(i, best)] {
                best = j;
            }
        }
        if best == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / (t - 1) as f64)
}

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_QUANTILE: f64 = 0.98;
/// Relative singular-value cutoff defining `rank(P)` for clipping `K`.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightDissection {
    /// `diag(W)`.
    pub d: Vec<f64>,
    /// Leading `K` right singular vectors of `P`, `d × K`.
    pub v: DMatrix<f64>,
    /// Top-left `K × K` block of the denoised rotated matrix.
    pub l: DMatrix<f64>,
    /// Rotated entries removed by the threshold.
    pub noise: DMatrix<f64>,
    pub threshold: f64,
    pub k: usize,
    /// Requested `K` when it exceeded `rank(P)`.
    pub k_clipped_from: Option<usize>,
    /// Complete right singular basis of `P`, `d × d`.
    pub rotation: DMatrix<f64>,
    /// `Rᵀ (W − diag(D)) R`.
    pub rotated: DMatrix<f64>,
    pub denoised: DMatrix<f64>,
    /// `‖L‖_F² / ‖denoised‖_F²` (1 when nothing survives the threshold).
    pub energy_fraction: f64,
}

impl WeightDissection {
    /// `diag(D) + R · rotated · Rᵀ`, equal to `W` before thresholding.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut w = &self.rotation * &self.rotated * self.rotation.transpose();
        for (i, di) in self.d.iter().enumerate() {
            w[(i, i)] += di;
        }
        w
    }
}

/// Splits `W = W^q (W^k)ᵀ/√d_head` into its diagonal and the off-diagonal part
/// seen in the right singular basis of `P`, then thresholds small entries.
pub fn dissect_weights(
    w: &AttentionWeights,
    pb: &PositionalBasisMatrix,
    k: usize,
    threshold_quantile: f64,
) -> Result<WeightDissection> {
    let d = w.d_model();
    if pb.p().ncols() != d {
        return Err(Error::invalid(format!("P has d = {}, weights have d = {d}", pb.p().ncols())));
    }
    if k == 0 || k > d {
        return Err(Error::invalid(format!("K must lie in 1..={d}, got {k}")));
    }
    if !(threshold_quantile > 0.0 && threshold_quantile < 1.0) {
        return Err(Error::invalid(format!("threshold quantile must lie in (0, 1), got {threshold_quantile}")));
    }
    let p = pb.p();
    let (_, rotation) = sym_eigen_desc(&(p.transpose() * p));
    // Rank from the SVD: Gram eigenvalues lose the small singular values.
    let sv = singular_values_desc(p);
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * top).count();
    let (k, k_clipped_from) = if k > rank {
        log::warn!("K = {k} exceeds rank(P) = {rank}; clipping");
        (rank.max(1), Some(k))
    } else {
        (k, None)
    };

    let wm = w.qk_matrix();
    let diag: Vec<f64> = (0..d).map(|i| wm[(i, i)]).collect();
    let mut off = wm;
    for i in 0..d {
        off[(i, i)] = 0.0;
    }
    let rotated = rotation.transpose() * &off * &rotation;
    let mut mags: Vec<f64> = rotated.iter().map(|x| x.abs()).collect();
    let threshold = quantile(&mut mags, threshold_quantile);
    let denoised = rotated.map(|x| if x.abs() >= threshold { x } else { 0.0 });
    let noise = &rotated - &denoised;
    let l = denoised.view((0, 0), (k, k)).into_owned();
    let total = denoised.norm_squared();
    let energy_fraction = if total > 0.0 { l.norm_squared() / total } else { 1.0 };
    Ok(WeightDissection {
        d: diag,
        v: rotation.columns(0, k).into_owned(),
        l,
        noise,
        threshold,
        k,
        k_clipped_from,
        rotation,
        rotated,
        denoised,
        energy_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::decompose;
    use crate::tensor::{EmbeddingTensor, Tensor3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn instance(c: usize, t: usize, d: usize, dh: usize, seed: u64) -> (Decomposition, AttentionWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Tensor3::from_fn([c, t, d], |_, _, _| rng.random_range(-2.0..2.0));
        let dec = decompose(&EmbeddingTensor::new(data, 0, None).unwrap()).unwrap();
        let w = AttentionWeights::new(random_matrix(d, dh, &mut rng), random_matrix(d, dh, &mut rng), 0, 0).unwrap();
        (dec, w)
    }

    #[test]
    fn constituents_match_direct_bilinear_form() {
        let (dec, w) = instance(3, 4, 3, 2, 1);
        let q = qk_decompose(&dec, &w, 1, MuMode::Exclude).unwrap();
        let wm = w.qk_matrix();
        for t in 0..4 {
            for t2 in 0..4 {
                let h = |i: usize| dec.pos.row(i).transpose() + dec.cvec(1, i);
                let direct = (h(t).transpose() * &wm * h(t2))[(0, 0)];
                assert!((q.full[(t, t2)] - direct).abs() < 1e-12);
            }
        }
        assert!((q.sum() - &q.full).amax() < 1e-12);
    }

    #[test]
    fn fold_mode_shifts_positional_rows() {
        let (dec, w) = instance(2, 3, 4, 2, 2);
        let q = qk_decompose(&dec, &w, 0, MuMode::FoldIntoPos).unwrap();
        assert!((q.sum() - &q.full).amax() < 1e-12);
        let pp = pos_pos_constituent(&dec, &w, MuMode::FoldIntoPos).unwrap();
        assert_eq!(pp, q.pp);
    }

    #[test]
    fn degenerate_parts() {
        let (mut dec, w) = instance(2, 3, 4, 2, 3);
        let mut zero_c = dec.clone();
        zero_c.ctx.fill(0.0);
        zero_c.resid.as_mut_slice().fill(0.0);
        let q = qk_decompose(&zero_c, &w, 0, MuMode::Exclude).unwrap();
        assert!((&q.full - &q.pp).amax() < 1e-12);
        assert!(q.pc.amax() == 0.0 && q.cp.amax() == 0.0 && q.cc.amax() == 0.0);
        dec.pos.fill(0.0);
        let q = qk_decompose(&dec, &w, 1, MuMode::Exclude).unwrap();
        assert!((&q.full - &q.cc).amax() < 1e-12);
    }

    #[test]
    fn qk_input_errors() {
        let (dec, w) = instance(2, 3, 4, 2, 4);
        assert!(matches!(qk_decompose(&dec, &w, 2, MuMode::Exclude), Err(Error::InvalidInput(_))));
        let (dec5, _) = instance(2, 3, 5, 2, 5);
        assert!(matches!(qk_decompose(&dec5, &w, 0, MuMode::Exclude), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn softmax_examples() {
        let a = attention_matrix(&DMatrix::from_element(4, 4, 2.5), true);
        for t in 0..4 {
            for j in 0..4 {
                let expect = if j <= t { 1.0 / (t + 1) as f64 } else { 0.0 };
                assert!((a[(t, j)] - expect).abs() < 1e-15);
            }
        }
        let a = attention_matrix(&DMatrix::from_row_slice(1, 2, &[0.0, 3f64.ln()]), false);
        assert!((a[(0, 0)] - 0.25).abs() < 1e-15 && (a[(0, 1)] - 0.75).abs() < 1e-15);
        // Large logits stay finite.
        let a = attention_matrix(&DMatrix::from_row_slice(1, 2, &[1e6, 1e6 - 1.0]), false);
        assert!(a.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn kernel_smoothing_equals_softmax() {
        let (dec, w) = instance(2, 6, 5, 3, 6);
        let x = dec.pos.clone() + dec.cvec_matrix(0);
        for causal in [false, true] {
            let a = attention_matrix(&bilinear(&x, &x, &w), causal);
            let k = kernel_smoothing_weights(&x, &w, causal);
            assert!((a - k).amax() < 1e-12);
        }
    }

    #[test]
    fn argmax_examples() {
        let t = 16;
        let smooth = DMatrix::from_fn(t, t, |i, j| (-(i as f64 - j as f64).abs() / t as f64).exp());
        assert_eq!(argmax_locality_ratio(&smooth, true).unwrap(), 1.0);
        let far = DMatrix::from_fn(t, t, |i, j| (i as f64 - j as f64).abs());
        assert_eq!(argmax_locality_ratio(&far, true).unwrap(), 0.0);
        // A tie between t and an earlier position counts as a miss.
        let flat = DMatrix::from_element(3, 3, 1.0);
        assert_eq!(argmax_locality_ratio(&flat, true).unwrap(), 0.0);
        assert!(argmax_locality_ratio(&DMatrix::zeros(1, 1), true).is_err());
    }

    fn planted_p(t: usize, d: usize, rank: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        random_matrix(t, rank, rng) * random_matrix(rank, d, rng)
    }

    #[test]
    fn dissection_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = AttentionWeights::new(random_matrix(12, 4, &mut rng), random_matrix(12, 4, &mut rng), 0, 0).unwrap();
        let pb = PositionalBasisMatrix::new(planted_p(10, 12, 5, &mut rng));
        let ws = dissect_weights(&w, &pb, 3, 0.9).unwrap();
        assert!((ws.reconstruct() - w.qk_matrix()).amax() < 1e-10);
        assert!((&ws.denoised + &ws.noise - &ws.rotated).amax() == 0.0);
        assert!(ws.denoised.iter().all(|x| *x == 0.0 || x.abs() >= ws.threshold));
        assert_eq!(ws.v.ncols(), 3);
        assert_eq!(ws.k_clipped_from, None);
    }

    #[test]
    fn dissection_clips_k_to_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = AttentionWeights::new(random_matrix(8, 2, &mut rng), random_matrix(8, 2, &mut rng), 0, 0).unwrap();
        let pb = PositionalBasisMatrix::new(planted_p(6, 8, 2, &mut rng));
        let ws = dissect_weights(&w, &pb, 5, 0.5).unwrap();
        assert_eq!((ws.k, ws.k_clipped_from), (2, Some(5)));
        assert!(dissect_weights(&w, &pb, 0, 0.5).is_err());
        assert!(dissect_weights(&w, &pb, 2, 1.0).is_err());
    }

    #[test]
    fn diagonal_weight_has_no_off_diagonal_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // W^q (W^k)ᵀ diagonal: both identity-like with d_head = d.
        let diag: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect();
        let wq = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag));
        let w = AttentionWeights::new(wq, DMatrix::identity(6, 6), 0, 0).unwrap();
        let pb = PositionalBasisMatrix::new(planted_p(5, 6, 3, &mut rng));
        let ws = dissect_weights(&w, &pb, 2, 0.98).unwrap();
        assert!(ws.rotated.amax() < 1e-12);
        assert!(ws.l.amax() < 1e-12);
        let scale = (6f64).sqrt();
        for i in 0..6 {
            assert!((ws.d[i] - (i as f64 + 1.0) / scale).abs() < 1e-14);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn softmax_rows_and_shift(seed in any::<u64>(), n in 1usize..12, kappa in -50.0f64..50.0, causal in any::<bool>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let qk = random_matrix(n, n, &mut rng) * 10.0;
                let a = attention_matrix(&qk, causal);
                for i in 0..n {
                    prop_assert!((a.row(i).sum() - 1.0).abs() <= 1e-12);
                    if causal {
                        prop_assert!((i + 1..n).all(|j| a[(i, j)] == 0.0));
                    }
                }
                let shifted = attention_matrix(&qk.add_scalar(kappa), causal);
                prop_assert!((shifted - a).amax() <= 1e-12);
            }

            #[test]
            fn qk_additivity(seed in any::<u64>(), t in 1usize..8, d in 1usize..6) {
                let (dec, w) = instance(3, t, d, d.div_ceil(2), seed);
                for mode in [MuMode::Exclude, MuMode::FoldIntoPos] {
                    let q = qk_decompose(&dec, &w, 2, mode).unwrap();
                    prop_assert!((q.sum() - &q.full).amax() <= 1e-12 * q.full.amax().max(1.0));
                }
            }
        }
    }
}
