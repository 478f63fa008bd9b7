//! Planted-structure generator: embeddings with known mean, positional,
//! context and residual parts.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::decompose::Decomposition;
use crate::error::{Error, Result};
use crate::fourier::low_frequency_vectors;
use crate::tensor::{EmbeddingTensor, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlantedSpec {
    pub c: usize,
    pub t: usize,
    pub d: usize,
    /// Number of cosine profiles in the positional part.
    pub pos_rank: usize,
    /// Weight of profile `s`; shorter lists are padded with `1/s`.
    pub pos_weights: Vec<f64>,
    /// Overall scale of the positional part.
    pub pos_scale: f64,
    pub n_clusters: usize,
    /// Norm of each cluster mean before centering.
    pub cluster_radius: f64,
    /// Per-sequence Gaussian spread around its cluster mean.
    pub cluster_spread: f64,
    /// Project context vectors off `span(pos)`.
    pub orthogonalize_clusters: bool,
    pub noise_sigma: f64,
    pub mu_scale: f64,
    pub seed: u64,
}

impl PlantedSpec {
    pub fn new(c: usize, t: usize, d: usize) -> Self {
        Self {
            c,
            t,
            d,
            pos_rank: 4.min(t).min(d),
            pos_weights: Vec::new(),
            pos_scale: 1.0,
            n_clusters: 1,
            cluster_radius: 1.0,
            cluster_spread: 0.0,
            orthogonalize_clusters: true,
            noise_sigma: 0.0,
            mu_scale: 1.0,
            seed: 0,
        }
    }

    fn weight(&self, s: usize) -> f64 {
        self.pos_weights.get(s).copied().unwrap_or(1.0 / (s + 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Planted {
    pub embeddings: EmbeddingTensor,
    pub truth: Decomposition,
    /// Orthonormal positional directions, `d × r`.
    pub directions: DMatrix<f64>,
    /// Cluster means after projection, before centering, `n_clusters × d`.
    pub cluster_means: DMatrix<f64>,
}

fn gaussian_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// `d × r` matrix with orthonormal columns.
pub fn random_orthonormal(d: usize, r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    if r == 0 {
        return DMatrix::zeros(d, 0);
    }
    gaussian_matrix(d, r, rng).qr().q().columns(0, r).into_owned()
}

fn project_out(v: &mut DVector<f64>, basis: &DMatrix<f64>) {
    // Twice for numerical orthogonality.
    for _ in 0..2 {
        let coef = basis.transpose() * &*v;
        *v -= basis * coef;
    }
}

pub fn generate(spec: &PlantedSpec) -> Result<Planted> {
    let PlantedSpec { c, t, d, pos_rank: r, .. } = *spec;
    if c == 0 || t == 0 || d == 0 {
        return Err(Error::invalid("planted dimensions must be positive"));
    }
    if r > t.min(d) {
        return Err(Error::invalid(format!("pos_rank {r} exceeds min(T, d) = {}", t.min(d))));
    }
    if spec.n_clusters == 0 || spec.n_clusters > c {
        return Err(Error::invalid(format!("n_clusters must lie in 1..={c}")));
    }
    if spec.orthogonalize_clusters && r >= d && spec.cluster_radius > 0.0 {
        return Err(Error::invalid("no room for context vectors orthogonal to the positional span"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Positional part: centred cosine profiles on orthonormal directions.
    let dirs = random_orthonormal(d, r, &mut rng);
    let mut prof = low_frequency_vectors(t, r);
    for s in 0..r {
        let mean = prof.column(s).mean();
        let w = spec.pos_scale * spec.weight(s);
        prof.column_mut(s).apply(|x| *x = (*x - mean) * w);
    }
    let pos = &prof * dirs.transpose();

    // Context part: cluster means on a sphere plus spread, then centred.
    let mut means = DMatrix::zeros(spec.n_clusters, d);
    for g in 0..spec.n_clusters {
        let mut v = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        if spec.orthogonalize_clusters {
            project_out(&mut v, &dirs);
        }
        let n = v.norm();
        if n > 0.0 {
            v *= spec.cluster_radius / n;
        }
        means.set_row(g, &v.transpose());
    }
    let labels: Vec<i64> = (0..c).map(|i| (i % spec.n_clusters) as i64).collect();
    let mut ctx = DMatrix::zeros(c, d);
    for i in 0..c {
        let mut v = means.row(labels[i] as usize).transpose();
        if spec.cluster_spread > 0.0 {
            let mut e = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng)) * spec.cluster_spread;
            if spec.orthogonalize_clusters {
                project_out(&mut e, &dirs);
            }
            v += e;
        }
        ctx.set_row(i, &v.transpose());
    }
    let ctx_mean = ctx.row_mean();
    for mut row in ctx.row_iter_mut() {
        row -= &ctx_mean;
    }

    // Residual: Gaussian, double-centred per coordinate.
    let mut resid = Tensor3::zeros([c, t, d]);
    if spec.noise_sigma > 0.0 {
        for x in resid.as_mut_slice() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = spec.noise_sigma * z;
        }
        double_center(&mut resid);
    }

    let mu = DVector::from_fn(d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        spec.mu_scale * z
    });
    let data = Tensor3::from_fn([c, t, d], |ci, ti, k| mu[k] + pos[(ti, k)] + ctx[(ci, k)] + resid.row(ci, ti)[k]);
    let embeddings = EmbeddingTensor::new(data, 0, Some(labels))?;
    Ok(Planted { embeddings, truth: Decomposition { mu, pos, ctx, resid }, directions: dirs, cluster_means: means })
}

/// Removes per-sequence and per-position means from every coordinate.
pub fn double_center(x: &mut Tensor3) {
    let [c, t, d] = x.dims();
    let mut row_mean = vec![0.0; c * d];
    let mut col_mean = vec![0.0; t * d];
    let mut grand = vec![0.0; d];
    for ci in 0..c {
        for ti in 0..t {
            for (k, v) in x.row(ci, ti).iter().enumerate() {
                row_mean[ci * d + k] += v / t as f64;
                col_mean[ti * d + k] += v / c as f64;
                grand[k] += v / (c * t) as f64;
            }
        }
    }
    for ci in 0..c {
        for ti in 0..t {
            for (k, v) in x.row_mut(ci, ti).iter_mut().enumerate() {
                *v += grand[k] - row_mean[ci * d + k] - col_mean[ti * d + k];
            }
        }
    }
}

/// Smooth unit-norm curve: row `t` is `Σ_{j≤r} j⁻¹ cos(πj(t−½)/T) u_j`
/// renormalized, with orthonormal `u_j`. The profiles are even about both
/// ends, so the reflected Gram matrix stays smooth across the seams.
pub fn smooth_curve_basis(t: usize, d: usize, r: usize, seed: u64) -> Result<DMatrix<f64>> {
    if r < 2 || r > d {
        return Err(Error::invalid(format!("smooth curve needs 2 ≤ r ≤ d, got r = {r}, d = {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = random_orthonormal(d, r, &mut rng);
    let prof = DMatrix::from_fn(t, r, |ti, j| {
        let j = (j + 1) as f64;
        (std::f64::consts::PI * j * (ti as f64 + 0.5) / t as f64).cos() / j
    });
    let mut p = prof * dirs.transpose();
    for mut row in p.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    Ok(p)
}

/// Rows drawn uniformly from the unit sphere.
pub fn random_unit_basis(t: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = gaussian_matrix(t, d, &mut rng);
    for mut row in p.row_iter_mut() {
        let n = row.norm();
        row /= n;
    }
    p
}

/// Uniform in `[-1, 1]`; small helper for tests and benches.
pub fn uniform_tensor(dims: [usize; 3], seed: u64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::{decompose, PositionalBasisMatrix};
    use crate::fourier::{finite_difference, gram};
    use crate::geometry::{cluster_similarity, pca_projection};

    fn rel_err(a: &[f64], b: &[f64], scale: f64) -> f64 {
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn exact_recovery_without_noise() {
        let spec = PlantedSpec { seed: 3, ..PlantedSpec::new(6, 10, 8) };
        let p = generate(&spec).unwrap();
        let dec = decompose(&p.embeddings).unwrap();
        let scale = p.embeddings.data().max_abs();
        assert!(rel_err(dec.pos.as_slice(), p.truth.pos.as_slice(), scale) <= 1e-12);
        assert!(rel_err(dec.mu.as_slice(), p.truth.mu.as_slice(), scale) <= 1e-12);
    }

    #[test]
    fn truth_satisfies_invariants() {
        let spec = PlantedSpec {
            n_clusters: 3,
            cluster_spread: 0.3,
            noise_sigma: 0.5,
            seed: 4,
            ..PlantedSpec::new(7, 9, 6)
        };
        let p = generate(&spec).unwrap();
        let tr = &p.truth;
        for k in 0..6 {
            assert!(tr.pos.column(k).sum().abs() < 1e-12);
            assert!(tr.ctx.column(k).sum().abs() < 1e-12);
            for ti in 0..9 {
                assert!((0..7).map(|c| tr.resid.row(c, ti)[k]).sum::<f64>().abs() < 1e-12);
            }
            for c in 0..7 {
                assert!((0..9).map(|ti| tr.resid.row(c, ti)[k]).sum::<f64>().abs() < 1e-12);
            }
        }
        // Context stays orthogonal to the positional span.
        assert!((&tr.ctx * &p.directions).amax() < 1e-12);
        assert_eq!(p.embeddings.seq_labels, vec![0, 1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PlantedSpec { noise_sigma: 1.0, seed: 5, ..PlantedSpec::new(3, 4, 5) };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn infeasible_specs_rejected() {
        assert!(generate(&PlantedSpec { pos_rank: 6, ..PlantedSpec::new(3, 5, 8) }).is_err());
        assert!(generate(&PlantedSpec { n_clusters: 4, ..PlantedSpec::new(3, 5, 8) }).is_err());
        assert!(generate(&PlantedSpec { pos_rank: 3, ..PlantedSpec::new(3, 5, 3) }).is_err());
    }

    #[test]
    fn two_clusters_are_antipodal_after_centering() {
        // Zero spread: with Σ ctx = 0 and balanced labels, the two centred
        // cluster means are opposite regardless of the planted angle.
        let spec = PlantedSpec { n_clusters: 2, seed: 6, ..PlantedSpec::new(8, 4, 6) };
        let p = generate(&spec).unwrap();
        let (inter, intra) = cluster_similarity(&p.truth.ctx, &p.embeddings.seq_labels).unwrap();
        assert!((intra.unwrap() - 1.0).abs() < 1e-12);
        assert!((inter.unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cluster_similarity_matches_planted_angles() {
        let spec = PlantedSpec { n_clusters: 4, seed: 7, ..PlantedSpec::new(12, 4, 10) };
        let p = generate(&spec).unwrap();
        // Oracle: cosines between the centred cluster means.
        let centre = p.cluster_means.row_mean();
        let m: Vec<_> = (0..4).map(|g| (p.cluster_means.row(g) - &centre).transpose()).collect();
        let mut cos = Vec::new();
        for a in 0..12 {
            for b in (a + 1)..12 {
                if a % 4 != b % 4 {
                    let (x, y) = (&m[a % 4], &m[b % 4]);
                    cos.push(x.dot(y) / (x.norm() * y.norm()));
                }
            }
        }
        let expect = cos.iter().sum::<f64>() / cos.len() as f64;
        let (inter, _) = cluster_similarity(&p.truth.ctx, &p.embeddings.seq_labels).unwrap();
        assert!((inter.unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn smooth_curve_rows_are_unit_and_planar_for_r2() {
        let p = smooth_curve_basis(32, 6, 2, 1).unwrap();
        assert!(p.row_iter().all(|r| (r.norm() - 1.0).abs() < 1e-14));
        let proj = pca_projection(&p, &DMatrix::zeros(0, 6)).unwrap();
        let back = &proj.pos_coords * proj.axes.transpose();
        assert!((back - &p).amax() < 1e-12);
        assert!(smooth_curve_basis(8, 4, 1, 0).is_err());
    }

    fn delta2_max(p: DMatrix<f64>) -> f64 {
        let g = gram(&PositionalBasisMatrix::new(p)).unwrap();
        finite_difference(&g.g_ext, 2).unwrap().1
    }

    #[test]
    fn smooth_curve_difference_stable_under_doubling() {
        let a = delta2_max(smooth_curve_basis(64, 16, 4, 2).unwrap());
        let b = delta2_max(smooth_curve_basis(128, 16, 4, 2).unwrap());
        assert!(a.is_finite() && b.is_finite());
        assert!(b / a <= 2.0 && a / b <= 2.0, "{a} vs {b}");
        let rough = delta2_max(random_unit_basis(64, 16, 2));
        assert!(rough / a > 64.0 * 64.0 / 10.0, "rough {rough} smooth {a}");
    }
}
