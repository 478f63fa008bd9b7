//! Mean-based decomposition `h[c,t] = μ + pos[t] + ctx[c] + resid[c,t]`.
//!
//! `pos[t]` is the per-position mean minus the global mean, `ctx[c]` the
//! per-sequence mean minus the global mean, and `resid` whatever is left.
//! Means use pairwise summation so results are reproducible to the last bit
//! for a given shape.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{normalize_rows, pairwise_vec_sum};
use crate::tensor::{EmbeddingTensor, Tensor3};
use crate::tensor_io::{write_container, DType, Kind, TensorContainer};

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// Global mean, length `d`.
    pub mu: DVector<f64>,
    /// Positional basis, `T × d` (row `t` is `pos[t]`).
    pub pos: DMatrix<f64>,
    /// Context basis, `C × d`.
    pub ctx: DMatrix<f64>,
    pub resid: Tensor3,
}

impl Decomposition {
    pub fn dims(&self) -> [usize; 3] {
        self.resid.dims()
    }

    /// `cvec[c,t] = ctx[c] + resid[c,t]`, built on demand.
    pub fn cvec(&self, c: usize, t: usize) -> DVector<f64> {
        let r = self.resid.row(c, t);
        DVector::from_fn(r.len(), |k, _| self.ctx[(c, k)] + r[k])
    }

    /// All `cvec` rows of sequence `c` as a `T × d` matrix.
    pub fn cvec_matrix(&self, c: usize) -> DMatrix<f64> {
        let [_, t, d] = self.dims();
        DMatrix::from_fn(t, d, |ti, k| self.ctx[(c, k)] + self.resid.row(c, ti)[k])
    }

    /// Sum of the four components.
    pub fn reconstruct(&self) -> Tensor3 {
        let [c, t, d] = self.dims();
        Tensor3::from_fn([c, t, d], |ci, ti, k| {
            self.mu[k] + self.pos[(ti, k)] + self.ctx[(ci, k)] + self.resid.row(ci, ti)[k]
        })
    }

    pub fn positional_basis(&self) -> PositionalBasisMatrix {
        PositionalBasisMatrix::new(self.pos.clone())
    }

    /// Writes `mu.gt`, `pos.gt`, `ctx.gt`, `resid.gt` and `decomposition.json`
    /// into `dir`.
    pub fn write_to_dir(&self, dir: &Path, dtype: DType) -> Result<()> {
        fs::create_dir_all(dir)?;
        let [c, t, d] = self.dims();
        write_container(
            &TensorContainer::from_f64(Kind::Generic, vec![d], self.mu.as_slice().to_vec(), dtype)?,
            dir.join("mu.gt"),
        )?;
        write_container(&TensorContainer::from_matrix(Kind::Generic, &self.pos, dtype)?, dir.join("pos.gt"))?;
        write_container(&TensorContainer::from_matrix(Kind::Generic, &self.ctx, dtype)?, dir.join("ctx.gt"))?;
        write_container(
            &TensorContainer::from_f64(Kind::Generic, vec![c, t, d], self.resid.as_slice().to_vec(), dtype)?,
            dir.join("resid.gt"),
        )?;
        let pb = self.positional_basis();
        let sidecar = Sidecar {
            c,
            t,
            d,
            files: [("mu", vec![d]), ("pos", vec![t, d]), ("ctx", vec![c, d]), ("resid", vec![c, t, d])]
                .into_iter()
                .map(|(n, s)| SidecarFile { name: n.into(), file: format!("{n}.gt"), shape: s })
                .collect(),
            zero_pos_rows: pb.zero_rows().to_vec(),
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(dir.join("decomposition.json"), json)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Sidecar {
    c: usize,
    t: usize,
    d: usize,
    files: Vec<SidecarFile>,
    zero_pos_rows: Vec<usize>,
}

#[derive(Serialize)]
struct SidecarFile {
    name: String,
    file: String,
    shape: Vec<usize>,
}

/// The positional basis `P` and its row-normalized version.
///
/// Rows with `‖pos[t]‖ = 0` stay zero in `p_norm` and are listed in
/// [`zero_rows`](Self::zero_rows); downstream statistics skip them.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalBasisMatrix {
    p: DMatrix<f64>,
    p_norm: DMatrix<f64>,
    zero_rows: Vec<usize>,
}

impl PositionalBasisMatrix {
    pub fn new(p: DMatrix<f64>) -> Self {
        let (p_norm, zero_rows) = normalize_rows(&p);
        Self { p, p_norm, zero_rows }
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn p_norm(&self) -> &DMatrix<f64> {
        &self.p_norm
    }

    pub fn zero_rows(&self) -> &[usize] {
        &self.zero_rows
    }

    pub fn n_positions(&self) -> usize {
        self.p.nrows()
    }
}

pub fn decompose(e: &EmbeddingTensor) -> Result<Decomposition> {
    decompose_owned(e.clone())
}

/// Like [`decompose`], but reuses the embedding buffer for the residual.
pub fn decompose_owned(e: EmbeddingTensor) -> Result<Decomposition> {
    let data = e.data();
    let [c, t, d] = data.dims();
    if c == 0 || t == 0 || d == 0 {
        return Err(Error::invalid("empty embedding tensor"));
    }

    let inv_c = 1.0 / c as f64;
    let inv_t = 1.0 / t as f64;

    // Per-position means over sequences, then the global mean as their mean.
    let pos_means: Vec<Vec<f64>> = (0..t)
        .map(|ti| {
            let mut s = pairwise_vec_sum(c, d, &|ci| data.row(ci, ti));
            s.iter_mut().for_each(|x| *x *= inv_c);
            s
        })
        .collect();
    let mut mu = pairwise_vec_sum(t, d, &|ti| pos_means[ti].as_slice());
    mu.iter_mut().for_each(|x| *x *= inv_t);

    let ctx_means: Vec<Vec<f64>> = (0..c)
        .map(|ci| {
            let seq = data.sequence(ci);
            let mut s = pairwise_vec_sum(t, d, &|ti| &seq[ti * d..(ti + 1) * d]);
            s.iter_mut().for_each(|x| *x *= inv_t);
            s
        })
        .collect();

    let pos = DMatrix::from_fn(t, d, |ti, k| pos_means[ti][k] - mu[k]);
    let ctx = DMatrix::from_fn(c, d, |ci, k| ctx_means[ci][k] - mu[k]);

    // Row-contiguous copies so the residual pass streams through memory.
    let pos_rows: Vec<f64> = (0..t).flat_map(|ti| (0..d).map(move |k| (ti, k))).map(|(ti, k)| pos[(ti, k)]).collect();
    let mut shift = vec![0.0; d];
    let mut resid = e.into_data();
    for ci in 0..c {
        for (k, s) in shift.iter_mut().enumerate() {
            *s = mu[k] + ctx[(ci, k)];
        }
        for (h, p) in resid.sequence_mut(ci).chunks_exact_mut(d).zip(pos_rows.chunks_exact(d)) {
            for ((h, p), s) in h.iter_mut().zip(p).zip(&shift) {
                *h = *h - s - p;
            }
        }
    }

    Ok(Decomposition { mu: DVector::from_vec(mu), pos, ctx, resid })
}

/// Artifact-removal switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArtifactOptions {
    /// Remove position 1, which behaves as a null token.
    pub drop_first_token: bool,
    /// Drop the tensor entirely when it is the model's final layer.
    pub drop_layer_if_last: bool,
}

impl Default for ArtifactOptions {
    fn default() -> Self {
        Self { drop_first_token: true, drop_layer_if_last: true }
    }
}

/// Applies the artifact conventions. Returns `None` when the layer itself is
/// dropped (`drop_layer_if_last` and `is_last_layer`).
pub fn drop_artifacts(
    e: &EmbeddingTensor,
    opts: ArtifactOptions,
    is_last_layer: bool,
) -> Result<Option<EmbeddingTensor>> {
    if opts.drop_layer_if_last && is_last_layer {
        return Ok(None);
    }
    apply_artifacts(e.clone(), opts, is_last_layer)
}

/// Owned form of [`drop_artifacts`] that trims without copying the tensor.
pub fn apply_artifacts(e: EmbeddingTensor, opts: ArtifactOptions, is_last_layer: bool) -> Result<Option<EmbeddingTensor>> {
    if opts.drop_layer_if_last && is_last_layer {
        return Ok(None);
    }
    if !opts.drop_first_token {
        return Ok(Some(e));
    }
    e.drop_first_position().map(Some)
}

/// Cross-layer cosine similarity and norm profile.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossLayerStats {
    /// `L × L`, entry `(a, b)` = mean over `(c, t)` of `cos(h_a[c,t], h_b[c,t])`.
    pub cosine: DMatrix<f64>,
    /// Mean `‖h[c,t]‖` per layer.
    pub mean_norms: Vec<f64>,
}

pub fn cross_layer_stats(layers: &[EmbeddingTensor]) -> Result<CrossLayerStats> {
    let first = layers.first().ok_or_else(|| Error::invalid("no layers given"))?;
    let dims = first.dims();
    if let Some(bad) = layers.iter().find(|l| l.dims() != dims) {
        return Err(Error::invalid(format!("layer shape {:?} differs from {:?}", bad.dims(), dims)));
    }
    let [c, t, _] = dims;
    let n_layers = layers.len();
    let norms: Vec<Vec<f64>> = layers
        .iter()
        .map(|l| l.data().as_slice().chunks_exact(dims[2]).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect())
        .collect();
    let mean_norms = norms.iter().map(|n| crate::linalg::pairwise_sum(n) / n.len() as f64).collect();

    let mut cosine = DMatrix::from_element(n_layers, n_layers, 1.0);
    for a in 0..n_layers {
        for b in (a + 1)..n_layers {
            let mut cos = Vec::with_capacity(c * t);
            for ci in 0..c {
                for ti in 0..t {
                    let i = ci * t + ti;
                    let (na, nb) = (norms[a][i], norms[b][i]);
                    if na > 0.0 && nb > 0.0 {
                        let ra = layers[a].data().row(ci, ti);
                        let rb = layers[b].data().row(ci, ti);
                        let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                        cos.push(dot / (na * nb));
                    }
                }
            }
            let v = if cos.is_empty() { f64::NAN } else { crate::linalg::pairwise_sum(&cos) / cos.len() as f64 };
            cosine[(a, b)] = v;
            cosine[(b, a)] = v;
        }
    }
    Ok(CrossLayerStats { cosine, mean_norms })
}
