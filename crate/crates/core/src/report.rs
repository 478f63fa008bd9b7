//! Batch analysis over layers and table-style CSV/JSON output.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::decompose::{apply_artifacts, decompose_owned, ArtifactOptions};
use crate::error::{Error, Result};
use crate::fourier::{dct2, gram};
use crate::geometry::{similarity_report, SimilarityReport};
use crate::linalg::mean_std;
use crate::spectral::{relative_norm_from_decomposition, SpectralSummary};
use crate::tensor::EmbeddingTensor;
use crate::tensor_io::{read_container, read_header, Header};

pub const DEFAULT_KS: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    /// One embeddings container per layer.
    pub inputs: Vec<PathBuf>,
    pub drop_first_token: bool,
    /// Skip the input with the largest layer index.
    pub skip_final_layer: bool,
    pub include_layer0: bool,
    /// `K` values for the low-frequency ratios `r_K`.
    pub ks: Vec<usize>,
    pub seed: u64,
    /// Analyze a seeded random subset of this many sequences.
    pub sample_sequences: Option<usize>,
}

impl RunConfig {
    pub fn new(inputs: Vec<PathBuf>) -> Self {
        Self {
            inputs,
            drop_first_token: true,
            skip_final_layer: true,
            include_layer0: true,
            ks: DEFAULT_KS.to_vec(),
            seed: 0,
            sample_sequences: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub layer: usize,
    pub n_seqs: usize,
    pub n_positions: usize,
    pub dim: usize,
    pub zero_pos_rows: usize,
    pub spectral: SpectralSummary,
    pub similarity: SimilarityReport,
    /// `(K, r_K)` of the positional Gram matrix.
    pub ratios: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerFailure {
    pub path: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<LayerRow>,
    pub failures: Vec<LayerFailure>,
    pub ks: Vec<usize>,
}

/// Full per-layer analysis of an (already artifact-trimmed) tensor.
pub fn analyze_layer(e: &EmbeddingTensor, ks: &[usize]) -> Result<LayerRow> {
    analyze_owned(e.clone(), ks)
}

fn analyze_owned(e: EmbeddingTensor, ks: &[usize]) -> Result<LayerRow> {
    let [c, t, d] = e.dims();
    let (layer, labels) = (e.layer, e.seq_labels.clone());
    let dec = decompose_owned(e)?;
    let pb = dec.positional_basis();
    let relative_norm = relative_norm_from_decomposition(&dec)?;
    let spectral = SpectralSummary::of_matrix(&dec.pos, relative_norm)?;
    let similarity = similarity_report(&dec, &labels, false)?;
    let ratios = dct2(&gram(&pb)?.g, ks)?.ratios;
    Ok(LayerRow {
        layer,
        n_seqs: c,
        n_positions: t,
        dim: d,
        zero_pos_rows: pb.zero_rows().len(),
        spectral,
        similarity,
        ratios,
    })
}

/// Reads and trims one layer according to the configuration. `None` means
/// the layer is skipped by configuration.
fn prepare_layer(path: &Path, cfg: &RunConfig, final_layer: Option<usize>) -> Result<Option<EmbeddingTensor>> {
    // Skipped layers are decided from the header so their payload is never read.
    let layer = header_layer(&read_header(path)?);
    if (!cfg.include_layer0 && layer == 0) || (cfg.skip_final_layer && Some(layer) == final_layer) {
        return Ok(None);
    }
    let mut e = EmbeddingTensor::from_container(read_container(path)?)?;
    if let Some(n) = cfg.sample_sequences {
        if n == 0 {
            return Err(Error::invalid("sample size must be positive"));
        }
        if n < e.n_seqs() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = rand::seq::index::sample(&mut rng, e.n_seqs(), n).into_vec();
            idx.sort_unstable();
            e = e.select_sequences(&idx)?;
        }
    }
    let opts = ArtifactOptions { drop_first_token: cfg.drop_first_token, drop_layer_if_last: cfg.skip_final_layer };
    let is_last = Some(e.layer) == final_layer;
    apply_artifacts(e, opts, is_last)
}

fn header_layer(h: &Header) -> usize {
    h.get("layer").and_then(|v| v.as_u64()).unwrap_or(0) as usize
}

/// Checks every input up front and returns the layer index per input.
fn validate_inputs(cfg: &RunConfig) -> Result<Vec<usize>> {
    if cfg.inputs.is_empty() {
        return Err(Error::invalid("no input files"));
    }
    if cfg.ks.contains(&0) {
        return Err(Error::invalid("K must be at least 1"));
    }
    cfg.inputs
        .iter()
        .map(|p| {
            if !p.is_file() {
                return Err(Error::invalid(format!("input {} does not exist", p.display())));
            }
            Ok(header_layer(&read_header(p)?))
        })
        .collect()
}

/// Analyzes every layer. Per-layer failures are recorded and skipped; the
/// run fails only when no layer succeeds.
pub fn run_report(cfg: &RunConfig) -> Result<Report> {
    let layers = validate_inputs(cfg)?;
    let final_layer = layers.iter().copied().max();
    let results: Vec<(usize, std::result::Result<Option<LayerRow>, String>)> = cfg
        .inputs
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let r = prepare_layer(path, cfg, final_layer)
                .and_then(|e| e.map(|e| analyze_owned(e, &cfg.ks)).transpose())
                .map_err(|e| e.to_string());
            (i, r)
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results {
        match r {
            Ok(Some(row)) => rows.push(row),
            Ok(None) => {}
            Err(error) => {
                log::warn!("layer input {} failed: {error}", cfg.inputs[i].display());
                failures.push(LayerFailure { path: cfg.inputs[i].clone(), error });
            }
        }
    }
    if rows.is_empty() {
        return Err(match failures.first() {
            Some(f) => Error::invalid(format!("all {} layers failed; first: {}", failures.len(), f.error)),
            None => Error::invalid("no layers left to analyze after skipping"),
        });
    }
    rows.sort_by_key(|r| r.layer);
    Ok(Report { rows, failures, ks: cfg.ks.clone() })
}

/// Same run restricted to the rank estimate and `r_10`.
pub fn run_ood_report(cfg: &RunConfig) -> Result<Report> {
    let mut cfg = cfg.clone();
    if !cfg.ks.contains(&10) {
        cfg.ks.push(10);
    }
    run_report(&cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn summary_cell(values: &[f64]) -> String {
    if values.is_empty() {
        return String::new();
    }
    let (m, s) = mean_std(values);
    format!("{m:.4} ({s:.4})")
}

/// Stable column names of the main report.
pub fn report_columns(ks: &[usize]) -> Vec<String> {
    let mut cols: Vec<String> = [
        "layer",
        "n_seqs",
        "n_positions",
        "dim",
        "rank_estimate",
        "rank_energy",
        "stable_rank",
        "relative_norm",
        "inter",
        "intra",
        "incoherence_mean",
        "incoherence_max",
        "zero_pos_rows",
    ]
    .map(String::from)
    .to_vec();
    cols.extend(ks.iter().map(|k| format!("r_{k}")));
    cols
}

impl LayerRow {
    /// Numeric cells in [`report_columns`] order after the four shape columns.
    fn metrics(&self) -> Vec<Option<f64>> {
        let mut v = vec![
            Some(self.spectral.rank_gap as f64),
            Some(self.spectral.rank_energy as f64),
            Some(self.spectral.stable_rank),
            Some(self.spectral.relative_norm),
            self.similarity.inter_cluster,
            self.similarity.intra_cluster,
            Some(self.similarity.incoherence_mean),
            Some(self.similarity.incoherence_max),
            Some(self.zero_pos_rows as f64),
        ];
        v.extend(self.ratios.iter().map(|&(_, r)| Some(r)));
        v
    }

    pub fn ratio(&self, k: usize) -> Option<f64> {
        self.ratios.iter().find(|(kk, _)| *kk == k).map(|&(_, r)| r)
    }
}

fn write_csv(header: &[String], records: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in records {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

impl Report {
    /// Per-layer rows followed by a `mean (std)` summary row.
    pub fn to_csv(&self) -> String {
        let header = report_columns(&self.ks);
        let mut records: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut rec = vec![r.layer.to_string(), r.n_seqs.to_string(), r.n_positions.to_string(), r.dim.to_string()];
                rec.extend(r.metrics().into_iter().map(fmt_opt));
                rec
            })
            .collect();
        if !self.rows.is_empty() {
            let n_metrics = self.rows[0].metrics().len();
            let mut summary = vec!["mean (std)".to_string(), String::new(), String::new(), String::new()];
            for j in 0..n_metrics {
                let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.metrics()[j]).collect();
                summary.push(summary_cell(&vals));
            }
            records.push(summary);
        }
        write_csv(&header, records)
    }

    /// Rank estimates and `r_10` only.
    pub fn to_ood_csv(&self) -> String {
        let header = ["layer", "rank_estimate", "rank_energy", "r_10"].map(String::from).to_vec();
        let mut records: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.layer.to_string(),
                    r.spectral.rank_gap.to_string(),
                    r.spectral.rank_energy.to_string(),
                    fmt_opt(r.ratio(10)),
                ]
            })
            .collect();
        if !self.rows.is_empty() {
            let col = |f: &dyn Fn(&LayerRow) -> Option<f64>| {
                summary_cell(&self.rows.iter().filter_map(f).collect::<Vec<_>>())
            };
            records.push(vec![
                "mean (std)".into(),
                col(&|r| Some(r.spectral.rank_gap as f64)),
                col(&|r| Some(r.spectral.rank_energy as f64)),
                col(&|r| r.ratio(10)),
            ]);
        }
        write_csv(&header, records)
    }

    /// Per-layer spectral rows with the top singular values.
    pub fn spectral_csv(&self) -> String {
        write_csv(&SpectralSummary::csv_header(), self.rows.iter().map(|r| r.spectral.csv_record(r.layer)))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let cols = report_columns(&self.ks);
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut m = serde_json::Map::new();
                m.insert(cols[0].clone(), json!(r.layer));
                m.insert(cols[1].clone(), json!(r.n_seqs));
                m.insert(cols[2].clone(), json!(r.n_positions));
                m.insert(cols[3].clone(), json!(r.dim));
                for (name, v) in cols[4..].iter().zip(r.metrics()) {
                    m.insert(name.clone(), json!(v));
                }
                serde_json::Value::Object(m)
            })
            .collect();
        json!({ "rows": rows, "failures": self.failures })
    }
}
