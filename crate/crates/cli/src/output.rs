use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use geomlens_core::tensor_io::{read_container, write_container, DType, Kind, TensorContainer};
use geomlens_core::{apply_artifacts, decompose, ArtifactOptions, EmbeddingTensor};
use nalgebra::DMatrix;

/// Writes `text` to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

pub fn emit_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit(Some(path), &text)
}

/// CSV with one line per matrix row and no header.
pub fn matrix_csv(m: &DMatrix<f64>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in m.row_iter() {
        w.write_record(row.iter().map(|x| x.to_string()))?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// CSV from a header and already formatted records.
pub fn table_csv(header: &[&str], records: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in records {
        w.write_record(&r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, dtype: DType) -> Result<()> {
    write_container(&TensorContainer::from_matrix(Kind::Generic, m, dtype)?, path)
        .with_context(|| format!("cannot write {}", path.display()))
}

pub fn load_embeddings(path: &Path, keep_first_token: bool) -> Result<EmbeddingTensor> {
    let e = EmbeddingTensor::from_container(read_container(path)?)
        .with_context(|| format!("reading {}", path.display()))?;
    let opts = ArtifactOptions { drop_first_token: !keep_first_token, drop_layer_if_last: false };
    Ok(apply_artifacts(e, opts, false)?.expect("layer is never dropped here"))
}

/// A 2-D container is taken as `P` directly; embeddings are decomposed.
pub fn load_positional(path: &Path, keep_first_token: bool) -> Result<DMatrix<f64>> {
    let c = read_container(path).with_context(|| format!("reading {}", path.display()))?;
    if c.kind() == Kind::Embeddings {
        let e = EmbeddingTensor::from_container(c)?;
        let opts = ArtifactOptions { drop_first_token: !keep_first_token, drop_layer_if_last: false };
        let e = apply_artifacts(e, opts, false)?.expect("layer is never dropped here");
        return Ok(decompose(&e)?.pos);
    }
    let p = c.to_matrix().with_context(|| format!("reading {}", path.display()))?;
    if p.iter().any(|x| !x.is_finite()) {
        return Err(geomlens_core::Error::InvalidInput(format!("{} contains non-finite entries", path.display())).into());
    }
    Ok(p)
}
