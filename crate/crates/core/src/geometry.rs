//! Incoherence between positional and context bases, cluster similarity of
//! context vectors, the joint normalized Gram matrix and PCA projections.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::decompose::{Decomposition, PositionalBasisMatrix};
use crate::error::{Error, Result};
use crate::fourier::gram;
use crate::linalg::normalize_rows;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub incoherence_max: f64,
    pub incoherence_mean: f64,
    /// `None` when only one cluster has nonzero context vectors.
    pub inter_cluster: Option<f64>,
    /// `None` when no cluster has two members.
    pub intra_cluster: Option<f64>,
    #[serde(skip)]
    pub joint_gram: Option<DMatrix<f64>>,
}

pub fn similarity_report(dec: &Decomposition, labels: &[i64], with_joint_gram: bool) -> Result<SimilarityReport> {
    let (incoherence_max, incoherence_mean) = incoherence(&dec.pos, &dec.ctx)?;
    let (inter_cluster, intra_cluster) = cluster_similarity(&dec.ctx, labels)?;
    let joint_gram = if with_joint_gram { Some(joint_gram(&dec.pos, &dec.ctx)?) } else { None };
    Ok(SimilarityReport { incoherence_max, incoherence_mean, inter_cluster, intra_cluster, joint_gram })
}

fn nonzero_normalized(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let (n, zero) = normalize_rows(m);
    let keep: Vec<usize> = (0..m.nrows()).filter(|i| !zero.contains(i)).collect();
    (n.select_rows(&keep), keep)
}

/// Max and mean of `|cos(pos_t, ctx_c)|` over all pairs of nonzero rows.
pub fn incoherence(pos: &DMatrix<f64>, ctx: &DMatrix<f64>) -> Result<(f64, f64)> {
    if pos.ncols() != ctx.ncols() {
        return Err(Error::invalid(format!("dimension mismatch: pos has {} columns, ctx {}", pos.ncols(), ctx.ncols())));
    }
    let (p, _) = nonzero_normalized(pos);
    let (c, _) = nonzero_normalized(ctx);
    if p.nrows() == 0 || c.nrows() == 0 {
        return Err(Error::degenerate("incoherence needs a nonzero row in each basis"));
    }
    let cross = &p * c.transpose();
    let max = cross.amax().min(1.0);
    let mean = cross.iter().map(|x| x.abs()).sum::<f64>() / cross.len() as f64;
    Ok((max, mean.min(max)))
}

/// Mean cosine over different-label pairs (inter) and same-label unordered
/// pairs (intra). Zero rows are skipped.
///
/// Uses `Σ_{i<j} ⟨x_i, x_j⟩ = (‖Σ x_i‖² − n)/2` for unit vectors, per label
/// group and overall, so the cost is linear in `C`.
pub fn cluster_similarity(ctx: &DMatrix<f64>, labels: &[i64]) -> Result<(Option<f64>, Option<f64>)> {
    if labels.len() != ctx.nrows() {
        return Err(Error::invalid(format!("{} labels for {} context vectors", labels.len(), ctx.nrows())));
    }
    let (x, keep) = nonzero_normalized(ctx);
    let n = x.nrows();
    if n < 2 {
        return Err(Error::degenerate("cluster similarity needs at least two nonzero context vectors"));
    }
    let d = ctx.ncols();
    let mut groups: BTreeMap<i64, (DVector<f64>, usize)> = BTreeMap::new();
    for (row, &orig) in keep.iter().enumerate() {
        let e = groups.entry(labels[orig]).or_insert_with(|| (DVector::zeros(d), 0));
        e.0 += x.row(row).transpose();
        e.1 += 1;
    }
    let pair_sum = |s: &DVector<f64>, m: usize| (s.norm_squared() - m as f64) / 2.0;
    let total_vec = groups.values().fold(DVector::zeros(d), |acc, (s, _)| acc + s);
    let total_sum = pair_sum(&total_vec, n);
    let total_pairs = n * (n - 1) / 2;

    let mut intra_sum = 0.0;
    let mut intra_pairs = 0;
    for (s, m) in groups.values() {
        if *m >= 2 {
            intra_sum += pair_sum(s, *m);
            intra_pairs += m * (m - 1) / 2;
        }
    }
    let inter_pairs = total_pairs - intra_pairs;
    let clamp = |v: f64| v.clamp(-1.0, 1.0);
    let intra = (intra_pairs > 0).then(|| clamp(intra_sum / intra_pairs as f64));
    let inter = (inter_pairs > 0).then(|| clamp((total_sum - intra_sum) / inter_pairs as f64));
    Ok((inter, intra))
}

/// `(T+C) × (T+C)` normalized inner products, block order `[pos; ctx]`.
///
/// The `T × T` block is exactly [`fourier::gram`](crate::fourier::gram).
pub fn joint_gram(pos: &DMatrix<f64>, ctx: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if pos.ncols() != ctx.ncols() {
        return Err(Error::invalid("pos and ctx have different dimensions"));
    }
    let t = pos.nrows();
    let c = ctx.nrows();
    let g_pp = gram(&PositionalBasisMatrix::new(pos.clone()))?.g;
    let (pn, _) = normalize_rows(pos);
    let (cn, czero) = normalize_rows(ctx);
    let g_pc = &pn * cn.transpose();
    let g_cc = &cn * cn.transpose();
    let mut out = DMatrix::zeros(t + c, t + c);
    out.view_mut((0, 0), (t, t)).copy_from(&g_pp);
    for i in 0..t {
        for j in 0..c {
            let v = g_pc[(i, j)].clamp(-1.0, 1.0);
            out[(i, t + j)] = v;
            out[(t + j, i)] = v;
        }
    }
    for i in 0..c {
        for j in 0..=i {
            let v = if i == j { if czero.contains(&i) { 0.0 } else { 1.0 } } else { g_cc[(i, j)].clamp(-1.0, 1.0) };
            out[(t + i, t + j)] = v;
            out[(t + j, t + i)] = v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// `d × 2` projection axes (second column zero in the 1-D fallback).
    pub axes: DMatrix<f64>,
    /// `T × 2`.
    pub pos_coords: DMatrix<f64>,
    /// `n × 2`.
    pub cvec_coords: DMatrix<f64>,
    /// Set when `P` has rank below 2 and only one axis is meaningful.
    pub warning: Option<String>,
}

/// Relative singular-value cutoff for treating the second axis as absent.
const PCA_RANK_TOL: f64 = 1e-10;

/// Projects `P` and context samples onto the top-2 right singular directions
/// of `P`. Each axis is oriented so that `pos_T` projects nonnegatively.
pub fn pca_projection(pos: &DMatrix<f64>, cvec_samples: &DMatrix<f64>) -> Result<PcaProjection> {
    let (t, d) = pos.shape();
    if t < 2 {
        return Err(Error::invalid("PCA projection needs T ≥ 2"));
    }
    if cvec_samples.ncols() != d && cvec_samples.nrows() > 0 {
        return Err(Error::invalid("cvec samples have the wrong dimension"));
    }
    // Right singular vectors of P are eigenvectors of PᵀP; work through the
    // smaller of PPᵀ and PᵀP.
    let (vals, dirs) = if d <= t {
        crate::linalg::sym_eigen_desc(&(pos.transpose() * pos))
    } else {
        let (vals, u) = crate::linalg::sym_eigen_desc(&(pos * pos.transpose()));
        let mut v = DMatrix::zeros(d, vals.len());
        for (j, &l) in vals.iter().enumerate() {
            if l > 0.0 {
                v.set_column(j, &(pos.transpose() * u.column(j) / l.sqrt()));
            }
        }
        (vals, v)
    };
    let sv = crate::linalg::singular_values_desc(pos);
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Err(Error::degenerate("positional basis is zero"));
    }
    let mut axes = DMatrix::zeros(d, 2);
    let mut warning = None;
    for j in 0..2 {
        let sv_ok = sv.get(j).is_some_and(|&s| s > PCA_RANK_TOL * top) && vals[j] > 0.0;
        if !sv_ok {
            warning = Some(format!("positional basis has rank {j}; emitting a {j}-D projection"));
            log::warn!("{}", warning.as_ref().unwrap());
            break;
        }
        let mut v = dirs.column(j).normalize();
        if pos.row(t - 1).dot(&v.transpose()) < 0.0 {
            v = -v;
        }
        axes.set_column(j, &v);
    }
    let pos_coords = pos * &axes;
    let cvec_coords = if cvec_samples.nrows() == 0 { DMatrix::zeros(0, 2) } else { cvec_samples * &axes };
    Ok(PcaProjection { axes, pos_coords, cvec_coords, warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Brute-force pair loop oracle.
    fn cluster_oracle(ctx: &DMatrix<f64>, labels: &[i64]) -> (Option<f64>, Option<f64>) {
        let (mut inter, mut intra) = (Vec::new(), Vec::new());
        for i in 0..ctx.nrows() {
            for j in (i + 1)..ctx.nrows() {
                let (a, b) = (ctx.row(i), ctx.row(j));
                if a.norm() == 0.0 || b.norm() == 0.0 {
                    continue;
                }
                let cos = a.dot(&b) / (a.norm() * b.norm());
                if labels[i] == labels[j] { intra.push(cos) } else { inter.push(cos) }
            }
        }
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        (mean(inter), mean(intra))
    }

    #[test]
    fn incoherence_examples() {
        let pos = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, 0.0, -3.0, 1.0, 0.0, 0.0]);
        let ctx = DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 5.0, -2.0]);
        assert_eq!(incoherence(&pos, &ctx).unwrap(), (0.0, 0.0));
        let ctx = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 0.0, 0.0]);
        assert!((incoherence(&pos, &ctx).unwrap().0 - 1.0).abs() < 1e-15);
        assert!(matches!(incoherence(&pos, &DMatrix::zeros(2, 4)), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn incoherence_matches_pair_loop() {
        let pos = random_matrix(7, 5, 1);
        let ctx = random_matrix(9, 5, 2);
        let mut cos = Vec::new();
        for i in 0..7 {
            for j in 0..9 {
                let (a, b) = (pos.row(i), ctx.row(j));
                cos.push((a.dot(&b) / (a.norm() * b.norm())).abs());
            }
        }
        let (max, mean) = incoherence(&pos, &ctx).unwrap();
        assert!((max - cos.iter().cloned().fold(0.0, f64::max)).abs() < 1e-14);
        assert!((mean - cos.iter().sum::<f64>() / cos.len() as f64).abs() < 1e-14);
    }

    #[test]
    fn cluster_examples() {
        let ctx = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0]);
        let (inter, intra) = cluster_similarity(&ctx, &[0, 0, 1, 1]).unwrap();
        assert!((inter.unwrap() + 1.0).abs() < 1e-15);
        assert!((intra.unwrap() - 1.0).abs() < 1e-15);
        let same = DMatrix::from_element(3, 2, 0.7);
        let (inter, intra) = cluster_similarity(&same, &[4, 4, 9]).unwrap();
        assert!((inter.unwrap() - 1.0).abs() < 1e-12 && (intra.unwrap() - 1.0).abs() < 1e-12);
        let (inter, _) = cluster_similarity(&same, &[0, 0, 0]).unwrap();
        assert!(inter.is_none());
        assert!(matches!(cluster_similarity(&DMatrix::from_element(1, 2, 1.0), &[0]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn cluster_matches_oracle() {
        let mut ctx = random_matrix(30, 6, 3);
        ctx.row_mut(4).fill(0.0);
        let labels: Vec<i64> = (0..30).map(|i| (i * 7 % 4) as i64).collect();
        let (a, b) = cluster_similarity(&ctx, &labels).unwrap();
        let (oa, ob) = cluster_oracle(&ctx, &labels);
        assert!((a.unwrap() - oa.unwrap()).abs() < 1e-12);
        assert!((b.unwrap() - ob.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn joint_gram_blocks() {
        let pos = random_matrix(5, 4, 4);
        let ctx = random_matrix(3, 4, 5);
        let j = joint_gram(&pos, &ctx).unwrap();
        let g = gram(&PositionalBasisMatrix::new(pos.clone())).unwrap().g;
        assert_eq!(j.view((0, 0), (5, 5)), g.view((0, 0), (5, 5)));
        assert_eq!(j, j.transpose());
        assert!((0..8).all(|i| j[(i, i)] == 1.0));
        assert_eq!(joint_gram(&pos, &DMatrix::zeros(0, 4)).unwrap(), g);
        let eye = DMatrix::<f64>::identity(5, 5);
        let jo = joint_gram(&eye.rows(0, 2).into_owned(), &eye.rows(2, 3).into_owned()).unwrap();
        assert_eq!(jo, DMatrix::identity(5, 5));
    }

    #[test]
    fn pca_planar_spiral() {
        let t = 20;
        let planar = DMatrix::from_fn(t, 2, |i, j| {
            let th = 0.3 * i as f64;
            let r = 1.0 + 0.1 * i as f64;
            if j == 0 { r * th.cos() } else { r * th.sin() }
        });
        let planar = &planar - DMatrix::from_fn(t, 2, |_, j| planar.column(j).mean());
        let rot = random_matrix(6, 6, 6).qr().q();
        let pos = DMatrix::from_fn(t, 6, |i, k| planar[(i, 0)] * rot[(k, 0)] + planar[(i, 1)] * rot[(k, 1)]);
        let cvec = DMatrix::from_fn(4, 6, |i, k| rot[(k, 2 + i)]);
        let proj = pca_projection(&pos, &cvec).unwrap();
        assert!(proj.warning.is_none());
        let g_proj = &proj.pos_coords * proj.pos_coords.transpose();
        let g_true = &planar * planar.transpose();
        assert!((g_proj - g_true).amax() < 1e-9);
        assert!(proj.cvec_coords.amax() < 1e-12);
        assert!(proj.pos_coords.row(t - 1).iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn pca_rank_one_fallback() {
        let pos = DMatrix::from_fn(5, 3, |i, k| (i as f64 - 2.0) * [0.3, 1.7, 2.9][k]);
        let proj = pca_projection(&pos, &DMatrix::zeros(0, 3)).unwrap();
        assert!(proj.warning.is_some());
        assert!(proj.pos_coords.column(1).iter().all(|&x| x == 0.0));
        assert!(matches!(pca_projection(&pos.rows(0, 1).into_owned(), &DMatrix::zeros(0, 3)), Err(Error::InvalidInput(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn incoherence_scale_invariant(seed in any::<u64>(), s in 0.01f64..100.0) {
                let pos = random_matrix(6, 4, seed);
                let ctx = random_matrix(5, 4, seed ^ 9);
                let mut scaled = ctx.clone();
                for (i, mut r) in scaled.row_iter_mut().enumerate() {
                    r *= s * (i + 1) as f64;
                }
                let (a, b) = incoherence(&pos, &ctx).unwrap();
                let (c, d) = incoherence(&pos, &scaled).unwrap();
                prop_assert!((a - c).abs() < 1e-12 && (b - d).abs() < 1e-12);
                prop_assert!(b <= a);
            }

            #[test]
            fn cluster_relabel_invariant(seed in any::<u64>(), n in 6usize..20) {
                let ctx = random_matrix(n, 4, seed);
                let labels: Vec<i64> = (0..n).map(|i| (i % 3) as i64).collect();
                let relabel: Vec<i64> = labels.iter().map(|l| [17, -4, 2][*l as usize]).collect();
                let a = cluster_similarity(&ctx, &labels).unwrap();
                let b = cluster_similarity(&ctx, &relabel).unwrap();
                prop_assert!((a.0.unwrap() - b.0.unwrap()).abs() < 1e-12);
                prop_assert!((a.1.unwrap() - b.1.unwrap()).abs() < 1e-12);
            }

            #[test]
            fn pca_preserves_top2_inner_products(seed in any::<u64>(), t in 3usize..12, d in 2usize..8) {
                let pos = random_matrix(t, d, seed);
                let proj = pca_projection(&pos, &DMatrix::zeros(0, d)).unwrap();
                let restricted = &pos * &proj.axes * proj.axes.transpose();
                let a = &restricted * restricted.transpose();
                let b = &proj.pos_coords * proj.pos_coords.transpose();
                prop_assert!((a - b).amax() < 1e-9);
            }
        }
    }
}
