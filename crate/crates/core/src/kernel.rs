//! Exponential bilinear kernels and the kernel-factorization verifier.
//!
//! A query `x^q = c^q + t^q` and key `x^k = c^k + t^k` are split over two
//! nearly orthogonal dictionaries. When each block `W_{αβ}` of
//! `W = W11 + W12 + W21 + W22` is a short sum of dictionary outer products,
//! `log K_W(x^q, x^k)` differs from the sum of the four matched block kernels
//! by at most `12·s·incoh`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// Number of mismatched (block, input-pair) evaluations: 3 per block × 4.
pub const CROSS_TERMS: f64 = 12.0;
/// Default noise constant in the bound allowance `12·C_z·incoh`.
pub const DEFAULT_C_Z: f64 = 3.0;

/// `zᵀ W z′`, the logarithm of `K_W(z, z′)`.
pub fn log_kernel(w: &DMatrix<f64>, z: &DVector<f64>, z2: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..w.ncols() {
        if z2[j] != 0.0 {
            acc += z.dot(&w.column(j)) * z2[j];
        }
    }
    acc
}

/// `exp(zᵀ W z′)`. May overflow to infinity; prefer [`log_kernel`].
pub fn kernel(w: &DMatrix<f64>, z: &DVector<f64>, z2: &DVector<f64>) -> f64 {
    log_kernel(w, z, z2).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncoherentBases {
    pub basis1: Vec<DVector<f64>>,
    pub basis2: Vec<DVector<f64>>,
    /// Largest `|⟨c, t⟩|` over `c ∈ basis1`, `t ∈ basis2`.
    pub achieved_incoh: f64,
}

/// `basis1 = {e_1..e_{n1}}`; atom `j` of `basis2` is
/// `cos θ · e_{n1+j} + sin θ · e_r` with `sin θ = target` and `r` a random
/// `basis1` index, so every cross inner product is `0` or `±target`.
pub fn build_incoherent_bases<R: Rng + ?Sized>(
    d: usize,
    n1: usize,
    n2: usize,
    target: f64,
    rng: &mut R,
) -> Result<IncoherentBases> {
    if n1 == 0 || n2 == 0 || n1 + n2 > d {
        return Err(Error::invalid(format!("cannot place {n1} + {n2} atoms in dimension {d}")));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::invalid(format!("target incoherence must lie in [0, 1], got {target}")));
    }
    let unit = |i: usize| DVector::from_fn(d, |k, _| if k == i { 1.0 } else { 0.0 });
    let basis1: Vec<_> = (0..n1).map(unit).collect();
    let (s, c) = (target, (1.0 - target * target).sqrt());
    let basis2: Vec<_> = (0..n2)
        .map(|j| {
            let r = rng.random_range(0..n1);
            let mut v = unit(n1 + j) * c;
            v[r] += s;
            v
        })
        .collect();
    let achieved_incoh = mutual_incoherence(&basis1, &basis2);
    Ok(IncoherentBases { basis1, basis2, achieved_incoh })
}

pub fn mutual_incoherence(b1: &[DVector<f64>], b2: &[DVector<f64>]) -> f64 {
    b1.iter().flat_map(|c| b2.iter().map(move |t| c.dot(t).abs())).fold(0.0, f64::max)
}

/// One sparse block `Σ_k a_k u_k v_kᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBlock {
    pub coeffs: Vec<f64>,
    pub u: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
}

impl SparseBlock {
    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.u.first().map_or(0, |u| u.len());
        let mut w = DMatrix::zeros(d, d);
        for ((a, u), v) in self.coeffs.iter().zip(&self.u).zip(&self.v) {
            w += u * v.transpose() * *a;
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelTestInstance {
    pub incoh: f64,
    pub s: usize,
    /// Blocks in order `W11, W12, W21, W22`.
    pub blocks: [SparseBlock; 4],
    /// Dense blocks including the noise term when enabled.
    pub w: [DMatrix<f64>; 4],
    pub noise: bool,
    pub cq: DVector<f64>,
    pub tq: DVector<f64>,
    pub ck: DVector<f64>,
    pub tk: DVector<f64>,
}

fn scaled_atom<R: Rng + ?Sized>(basis: &[DVector<f64>], rng: &mut R) -> DVector<f64> {
    let lambda: f64 = rng.random_range(-1.0..=1.0);
    &basis[rng.random_range(0..basis.len())] * lambda
}

/// Draws blocks, coefficients and query/key parts from the bases. With
/// `noise`, each block gets `Z/√d` with standard Gaussian `Z`.
pub fn sample_instance<R: Rng + ?Sized>(bases: &IncoherentBases, s: usize, noise: bool, rng: &mut R) -> KernelTestInstance {
    let pick = |alpha: usize| if alpha == 0 { &bases.basis1 } else { &bases.basis2 };
    let d = bases.basis1[0].len();
    let blocks: [SparseBlock; 4] = std::array::from_fn(|i| {
        let (alpha, beta) = (i / 2, i % 2);
        let mut coeffs = Vec::with_capacity(s);
        let mut u = Vec::with_capacity(s);
        let mut v = Vec::with_capacity(s);
        for _ in 0..s {
            coeffs.push(rng.random_range(-1.0..=1.0));
            u.push(scaled_atom(pick(alpha), rng));
            v.push(scaled_atom(pick(beta), rng));
        }
        SparseBlock { coeffs, u, v }
    });
    let w: [DMatrix<f64>; 4] = std::array::from_fn(|i| {
        let mut m = blocks[i].matrix();
        if noise {
            let scale = 1.0 / (d as f64).sqrt();
            m += DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng)) * scale;
        }
        m
    });
    let cq = scaled_atom(&bases.basis1, rng);
    let tq = scaled_atom(&bases.basis2, rng);
    let ck = scaled_atom(&bases.basis1, rng);
    let tk = scaled_atom(&bases.basis2, rng);
    KernelTestInstance { incoh: bases.achieved_incoh, s, blocks, w, noise, cq, tq, ck, tk }
}

impl KernelTestInstance {
    pub fn x_q(&self) -> DVector<f64> {
        &self.cq + &self.tq
    }

    pub fn x_k(&self) -> DVector<f64> {
        &self.ck + &self.tk
    }

    pub fn w_total(&self) -> DMatrix<f64> {
        &self.w[0] + &self.w[1] + &self.w[2] + &self.w[3]
    }

    /// Query and key swap roles: `W′_{αβ} = W_{βα}ᵀ`, `x′^q = x^k`, `x′^k = x^q`.
    pub fn transposed(&self) -> Self {
        let tb = |b: &SparseBlock| SparseBlock { coeffs: b.coeffs.clone(), u: b.v.clone(), v: b.u.clone() };
        Self {
            incoh: self.incoh,
            s: self.s,
            blocks: [tb(&self.blocks[0]), tb(&self.blocks[2]), tb(&self.blocks[1]), tb(&self.blocks[3])],
            w: [self.w[0].transpose(), self.w[2].transpose(), self.w[1].transpose(), self.w[3].transpose()],
            noise: self.noise,
            cq: self.ck.clone(),
            tq: self.tk.clone(),
            ck: self.cq.clone(),
            tk: self.tq.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thm2Result {
    pub log_lhs: f64,
    pub log_rhs_sum: f64,
    pub gap: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Compares `log K_W(x^q, x^k)` to the sum of the four matched block kernels.
pub fn thm2_verify(inst: &KernelTestInstance, c_z: f64) -> Thm2Result {
    let log_lhs = log_kernel(&inst.w_total(), &inst.x_q(), &inst.x_k());
    let log_rhs_sum = log_kernel(&inst.w[0], &inst.cq, &inst.ck)
        + log_kernel(&inst.w[1], &inst.cq, &inst.tk)
        + log_kernel(&inst.w[2], &inst.tq, &inst.ck)
        + log_kernel(&inst.w[3], &inst.tq, &inst.tk);
    let gap = (log_lhs - log_rhs_sum).abs();
    let mut bound = CROSS_TERMS * inst.s as f64 * inst.incoh;
    if inst.noise {
        bound += CROSS_TERMS * c_z * inst.incoh;
    }
    Thm2Result { log_lhs, log_rhs_sum, gap, bound, holds: gap <= bound }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Thm2Config {
    pub d: usize,
    pub s: usize,
    pub n1: usize,
    pub n2: usize,
    pub incoh: f64,
    pub trials: usize,
    pub noise: bool,
    pub c_z: f64,
    pub seed: u64,
}

impl Thm2Config {
    /// Dictionary sizes default to `min(16, d/4)` each (at least 1).
    pub fn new(d: usize, s: usize, incoh: f64, trials: usize, noise: bool, seed: u64) -> Self {
        let n = (d / 4).clamp(1, 16);
        Self { d, s, n1: n, n2: n, incoh, trials, noise, c_z: DEFAULT_C_Z, seed }
    }

    /// `incoh = d^{-γ}`.
    pub fn incoh_from_gamma(d: usize, gamma: f64) -> f64 {
        (d as f64).powf(-gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Thm2Summary {
    pub config: Thm2Config,
    pub n_holds: usize,
    pub max_gap: f64,
    /// Largest `gap / bound` (0 when every bound is 0 and every gap is 0).
    pub max_ratio: f64,
    pub failure_fraction: f64,
    pub trials: Vec<Thm2Result>,
}

/// Per-trial generator: ChaCha8 seeded by the master seed, stream = trial index.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

pub fn run_thm2_trials(cfg: &Thm2Config) -> Result<Thm2Summary> {
    if cfg.s == 0 {
        return Err(Error::invalid("sparsity s must be at least 1"));
    }
    // Validate the sizes once before fanning out.
    build_incoherent_bases(cfg.d, cfg.n1, cfg.n2, cfg.incoh, &mut trial_rng(cfg.seed, 0))?;
    let trials: Vec<Thm2Result> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(cfg.seed, i);
            let bases = build_incoherent_bases(cfg.d, cfg.n1, cfg.n2, cfg.incoh, &mut rng).expect("validated");
            thm2_verify(&sample_instance(&bases, cfg.s, cfg.noise, &mut rng), cfg.c_z)
        })
        .collect();
    let n_holds = trials.iter().filter(|r| r.holds).count();
    let max_gap = trials.iter().map(|r| r.gap).fold(0.0, f64::max);
    let max_ratio = trials
        .iter()
        .map(|r| if r.bound > 0.0 { r.gap / r.bound } else if r.gap > 0.0 { f64::INFINITY } else { 0.0 })
        .fold(0.0, f64::max);
    let failure_fraction = if trials.is_empty() { 0.0 } else { 1.0 - n_holds as f64 / trials.len() as f64 };
    Ok(Thm2Summary { config: cfg.clone(), n_holds, max_gap, max_ratio, failure_fraction, trials })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(d: usize, i: usize) -> DVector<f64> {
        DVector::from_fn(d, |k, _| if k == i { 1.0 } else { 0.0 })
    }

    #[test]
    fn kernel_examples() {
        let w = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(kernel(&w, &e(3, 0), &e(3, 1)), 1.0);
        let w = e(3, 0) * e(3, 1).transpose();
        assert!((kernel(&w, &e(3, 0), &e(3, 1)) - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(kernel(&w, &DVector::zeros(3), &e(3, 1)), 1.0);
        // Large exponents stay finite in log space.
        let big = DMatrix::from_element(2, 2, 1e3);
        assert!(log_kernel(&big, &DVector::from_element(2, 1.0), &DVector::from_element(2, 1.0)).is_finite());
    }

    #[test]
    fn bases_examples() {
        let mut rng = trial_rng(1, 0);
        let b = build_incoherent_bases(8, 3, 3, 0.0, &mut rng).unwrap();
        assert_eq!(b.achieved_incoh, 0.0);
        let b = build_incoherent_bases(2, 1, 1, 0.5, &mut rng).unwrap();
        assert!((b.achieved_incoh - 0.5).abs() < 1e-12);
        assert!((b.basis2[0].norm() - 1.0).abs() < 1e-15);
        let b = build_incoherent_bases(4, 2, 2, 1.0, &mut rng).unwrap();
        assert_eq!(b.achieved_incoh, 1.0);
        assert!(build_incoherent_bases(4, 3, 2, 0.1, &mut rng).is_err());
        assert!(build_incoherent_bases(4, 2, 2, 1.5, &mut rng).is_err());
    }

    #[test]
    fn orthogonal_case_has_zero_gap() {
        for i in 0..20 {
            let mut rng = trial_rng(5, i);
            let b = build_incoherent_bases(32, 6, 6, 0.0, &mut rng).unwrap();
            let r = thm2_verify(&sample_instance(&b, 3, false, &mut rng), DEFAULT_C_Z);
            assert!(r.gap <= 1e-12, "gap {}", r.gap);
            assert!(r.holds);
        }
    }

    /// Oracle: expand `x^qᵀ W x^k` into 16 (block, query part, key part)
    /// terms and sum the 12 mismatched ones.
    fn brute_force_gap(inst: &KernelTestInstance) -> f64 {
        let q = [&inst.cq, &inst.tq];
        let k = [&inst.ck, &inst.tk];
        let mut sum = 0.0;
        for (i, w) in inst.w.iter().enumerate() {
            let (alpha, beta) = (i / 2, i % 2);
            for (a, qa) in q.iter().enumerate() {
                for (b, kb) in k.iter().enumerate() {
                    if (a, b) != (alpha, beta) {
                        sum += (qa.transpose() * w * *kb)[(0, 0)];
                    }
                }
            }
        }
        sum.abs()
    }

    #[test]
    fn gap_matches_cross_term_expansion() {
        for i in 0..20 {
            let mut rng = trial_rng(9, i);
            let b = build_incoherent_bases(10, 2, 2, 0.3, &mut rng).unwrap();
            let inst = sample_instance(&b, 1, i % 2 == 0, &mut rng);
            let r = thm2_verify(&inst, DEFAULT_C_Z);
            assert!((r.gap - brute_force_gap(&inst)).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_blocks_match_dense() {
        let mut rng = trial_rng(2, 0);
        let b = build_incoherent_bases(12, 3, 3, 0.2, &mut rng).unwrap();
        let inst = sample_instance(&b, 3, false, &mut rng);
        for i in 0..4 {
            assert_eq!(inst.blocks[i].matrix(), inst.w[i]);
            assert!(inst.blocks[i].coeffs.iter().all(|a| a.abs() <= 1.0));
        }
    }

    #[test]
    fn trials_are_reproducible() {
        let cfg = Thm2Config::new(64, 2, 0.05, 8, true, 11);
        let a = run_thm2_trials(&cfg).unwrap();
        let b = run_thm2_trials(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(run_thm2_trials(&Thm2Config { s: 0, ..cfg }).is_err());
    }

    #[test]
    fn gamma_parameterization() {
        assert!((Thm2Config::incoh_from_gamma(256, 0.25) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gap_roughly_linear_in_incoherence() {
        let (big, small) = (1e-3, 5e-4);
        let mut checked = 0;
        for i in 0..60 {
            let gap_at = |incoh: f64| {
                let mut rng = trial_rng(21, i);
                let b = build_incoherent_bases(24, 4, 4, incoh, &mut rng).unwrap();
                thm2_verify(&sample_instance(&b, 3, false, &mut rng), DEFAULT_C_Z).gap
            };
            let (g1, g2) = (gap_at(big), gap_at(small));
            // No first-order term when no random partner meets a drawn atom.
            if g1 / big < 1e-2 {
                continue;
            }
            checked += 1;
            assert!((g1 / g2 / 2.0 - 1.0).abs() <= 0.1, "trial {i}: ratio {}", g1 / g2);
        }
        assert!(checked >= 20, "only {checked} informative trials");
    }

    #[test]
    fn noisy_trials_monitor() {
        let cfg = Thm2Config::new(512, 3, 0.05, 200, true, 3);
        let s = run_thm2_trials(&cfg).unwrap();
        // The noise allowance is heuristic; record the rate and keep it low.
        assert!(s.failure_fraction <= 0.05, "failure fraction {}", s.failure_fraction);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn transposed_instance_same_gap(seed in any::<u64>(), incoh in 0.0f64..0.5, noise in any::<bool>()) {
                let mut rng = trial_rng(seed, 0);
                let b = build_incoherent_bases(16, 4, 4, incoh, &mut rng).unwrap();
                let inst = sample_instance(&b, 2, noise, &mut rng);
                let a = thm2_verify(&inst, DEFAULT_C_Z);
                let t = thm2_verify(&inst.transposed(), DEFAULT_C_Z);
                prop_assert!((a.gap - t.gap).abs() <= 1e-12);
                prop_assert!((a.log_lhs - t.log_lhs).abs() <= 1e-12);
            }

            #[test]
            fn noiseless_bound_always_holds(seed in any::<u64>(), incoh in 0.0f64..1.0, s in 1usize..5) {
                let mut rng = trial_rng(seed, 1);
                let b = build_incoherent_bases(20, 5, 5, incoh, &mut rng).unwrap();
                let r = thm2_verify(&sample_instance(&b, s, false, &mut rng), DEFAULT_C_Z);
                prop_assert!(r.gap <= r.bound + 1e-12);
            }
        }
    }
}
