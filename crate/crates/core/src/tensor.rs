//! In-memory domain types: 3-D tensors, per-layer embeddings and per-head
//! query/key weights, plus their mapping onto [`TensorContainer`]s.

use nalgebra::DMatrix;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::tensor_io::{DType, Header, Kind, Payload, TensorContainer};

/// Dense row-major `C × T × d` tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for c in 0..dims[0] {
            for t in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(c, t, k));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The `d`-vector at `(c, t)`.
    pub fn row(&self, c: usize, t: usize) -> &[f64] {
        let d = self.dims[2];
        let start = (c * self.dims[1] + t) * d;
        &self.data[start..start + d]
    }

    pub fn row_mut(&mut self, c: usize, t: usize) -> &mut [f64] {
        let d = self.dims[2];
        let start = (c * self.dims[1] + t) * d;
        &mut self.data[start..start + d]
    }

    /// All `T` rows of sequence `c` as a contiguous `T·d` slice.
    pub fn sequence(&self, c: usize) -> &[f64] {
        let stride = self.dims[1] * self.dims[2];
        &self.data[c * stride..(c + 1) * stride]
    }

    /// Sequence `c` as a `T × d` matrix.
    pub fn sequence_mut(&mut self, c: usize) -> &mut [f64] {
        let stride = self.dims[1] * self.dims[2];
        &mut self.data[c * stride..(c + 1) * stride]
    }

    pub fn sequence_matrix(&self, c: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dims[1], self.dims[2], self.sequence(c))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
    }
}

/// Hidden states of one layer: `C` sequences of `T` positions in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTensor {
    data: Tensor3,
    pub layer: usize,
    pub seq_labels: Vec<i64>,
    pub model_name: Option<String>,
    /// Set when the first (null) token has been removed.
    pub dropped_first_token: bool,
}

impl EmbeddingTensor {
    /// Validates shape and finiteness. Missing labels default to a single
    /// cluster `0`.
    pub fn new(data: Tensor3, layer: usize, seq_labels: Option<Vec<i64>>) -> Result<Self> {
        let [c, t, d] = data.dims();
        if c == 0 || t == 0 || d == 0 {
            return Err(Error::invalid(format!("embedding dims must be positive, got {:?}", data.dims())));
        }
        if !all_finite(data.as_slice()) {
            return Err(Error::invalid("embedding tensor contains non-finite entries"));
        }
        let seq_labels = seq_labels.unwrap_or_else(|| vec![0; c]);
        if seq_labels.len() != c {
            return Err(Error::invalid(format!("{} sequence labels for {c} sequences", seq_labels.len())));
        }
        Ok(Self { data, layer, seq_labels, model_name: None, dropped_first_token: false })
    }

    pub fn with_model_name(mut self, name: impl Into<String>) -> Self {
        self.model_name = Some(name.into());
        self
    }

    /// Removes position 0 of every sequence, compacting the buffer in place.
    pub fn drop_first_position(self) -> Result<Self> {
        let [c, t, d] = self.dims();
        if t < 2 {
            return Err(Error::invalid("cannot drop the first token of a length-1 sequence"));
        }
        let mut buf = self.data.into_vec();
        for ci in 0..c {
            let src = (ci * t + 1) * d;
            buf.copy_within(src..src + (t - 1) * d, ci * (t - 1) * d);
        }
        buf.truncate(c * (t - 1) * d);
        Ok(Self { data: Tensor3::new([c, t - 1, d], buf)?, dropped_first_token: true, ..self })
    }

    pub fn data(&self) -> &Tensor3 {
        &self.data
    }

    pub fn into_data(self) -> Tensor3 {
        self.data
    }

    pub fn dims(&self) -> [usize; 3] {
        self.data.dims()
    }

    pub fn n_seqs(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn n_positions(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.dims()[2]
    }

    /// Keeps only the listed sequences, in the given order.
    pub fn select_sequences(&self, idx: &[usize]) -> Result<Self> {
        let [c, t, d] = self.dims();
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::invalid(format!("sequence index {bad} out of range (C={c})")));
        }
        let mut data = Vec::with_capacity(idx.len() * t * d);
        for &i in idx {
            data.extend_from_slice(self.data.sequence(i));
        }
        let mut out = Self::new(
            Tensor3::new([idx.len(), t, d], data)?,
            self.layer,
            Some(idx.iter().map(|&i| self.seq_labels[i]).collect()),
        )?;
        out.model_name = self.model_name.clone();
        out.dropped_first_token = self.dropped_first_token;
        Ok(out)
    }

    pub fn to_container(&self, dtype: DType) -> Result<TensorContainer> {
        let mut header = Header::new(dtype, self.dims().to_vec(), Kind::Embeddings)
            .with("layer", self.layer)
            .with("seq_labels", self.seq_labels.clone());
        if let Some(name) = &self.model_name {
            header = header.with("model_name", name.clone());
        }
        if self.dropped_first_token {
            header = header.with("dropped_first_token", true);
        }
        TensorContainer::new(header, Payload::from_f64(self.data.as_slice().to_vec(), dtype))
    }

    pub fn from_container(container: TensorContainer) -> Result<Self> {
        if container.kind() != Kind::Embeddings {
            return Err(Error::invalid(format!("expected kind embeddings, got {:?}", container.kind())));
        }
        let dims: [usize; 3] = container
            .shape()
            .try_into()
            .map_err(|_| Error::invalid(format!("embeddings must be 3-D, got {:?}", container.shape())))?;
        let header = container.header().clone();
        let layer = match header.get("layer") {
            None => 0,
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::invalid(format!("layer must be a non-negative integer, got {v}")))?
                as usize,
        };
        let labels = match header.get("seq_labels") {
            None | Some(Value::Null) => None,
            Some(Value::Array(items)) => Some(
                items
                    .iter()
                    .map(|v| v.as_i64().ok_or_else(|| Error::invalid(format!("bad sequence label {v}"))))
                    .collect::<Result<Vec<_>>>()?,
            ),
            Some(v) => return Err(Error::invalid(format!("seq_labels must be an array, got {v}"))),
        };
        let data = Tensor3::new(dims, container.into_payload().into_f64())?;
        let mut out = Self::new(data, layer, labels)?;
        out.model_name = header.get("model_name").and_then(Value::as_str).map(str::to_owned);
        out.dropped_first_token = header.get("dropped_first_token").and_then(Value::as_bool).unwrap_or(false);
        Ok(out)
    }
}

/// Query and key projections of one attention head, both `d × d_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub layer: usize,
    pub head: usize,
}

impl AttentionWeights {
    pub fn new(wq: DMatrix<f64>, wk: DMatrix<f64>, layer: usize, head: usize) -> Result<Self> {
        if wq.shape() != wk.shape() {
            return Err(Error::invalid(format!("W^q {:?} and W^k {:?} differ in shape", wq.shape(), wk.shape())));
        }
        let (d, d_head) = wq.shape();
        if d == 0 || d_head == 0 || d_head > d {
            return Err(Error::invalid(format!("need 0 < d_head <= d, got d={d}, d_head={d_head}")));
        }
        if !all_finite(wq.as_slice()) || !all_finite(wk.as_slice()) {
            return Err(Error::invalid("attention weights contain non-finite entries"));
        }
        Ok(Self { wq, wk, layer, head })
    }

    pub fn d_model(&self) -> usize {
        self.wq.nrows()
    }

    pub fn d_head(&self) -> usize {
        self.wq.ncols()
    }

    /// `W = W^q (W^k)ᵀ / √d_head`.
    pub fn qk_matrix(&self) -> DMatrix<f64> {
        (&self.wq * self.wk.transpose()) / (self.d_head() as f64).sqrt()
    }

    pub fn to_containers(&self, dtype: DType) -> Result<(TensorContainer, TensorContainer)> {
        let make = |m: &DMatrix<f64>, kind| -> Result<TensorContainer> {
            let header = Header::new(dtype, vec![m.nrows(), m.ncols()], kind)
                .with("layer", self.layer)
                .with("head", self.head)
                .with("d_head", self.d_head());
            TensorContainer::new(header, Payload::from_f64(m.transpose().as_slice().to_vec(), dtype))
        };
        Ok((make(&self.wq, Kind::WeightQ)?, make(&self.wk, Kind::WeightK)?))
    }

    pub fn from_containers(q: &TensorContainer, k: &TensorContainer) -> Result<Self> {
        if q.kind() != Kind::WeightQ || k.kind() != Kind::WeightK {
            return Err(Error::invalid(format!(
                "expected weight_q/weight_k containers, got {:?}/{:?}",
                q.kind(),
                k.kind()
            )));
        }
        let field = |c: &TensorContainer, key| c.header().get(key).and_then(Value::as_u64).map(|v| v as usize);
        let layer = field(q, "layer").unwrap_or(0);
        let head = field(q, "head").unwrap_or(0);
        if (field(k, "layer"), field(k, "head")) != (field(q, "layer"), field(q, "head")) {
            return Err(Error::invalid("query and key containers belong to different heads"));
        }
        let w = Self::new(q.to_matrix()?, k.to_matrix()?, layer, head)?;
        if let Some(dh) = field(q, "d_head") {
            if dh != w.d_head() {
                return Err(Error::invalid(format!("header d_head={dh} but matrix has {} columns", w.d_head())));
            }
        }
        Ok(w)
    }
}
