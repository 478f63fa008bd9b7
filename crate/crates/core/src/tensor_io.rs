//! The `GEOMTNSR` container: a self-describing little-endian tensor file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "GEOMTNSR"
//! offset 8   u32       version (= 1)
//! offset 12  u64       header length H in bytes
//! offset 20  H bytes   UTF-8 JSON header
//!            0..7      zero padding so the payload starts on an 8-byte boundary
//!            ...       payload: row-major scalars of `dtype`
//! ```
//!
//! The header must carry `dtype` (`"f32"` or `"f64"`), `shape` and `kind`.
//! Any other keys are preserved verbatim. A container keeps the exact header
//! bytes it was read with, so `write(read(f))` reproduces `f` byte for byte.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GEOMTNSR";
pub const VERSION: u32 = 1;
/// Conventional file extension.
pub const EXTENSION: &str = "gt";

const PREAMBLE_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub const fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Embeddings,
    WeightQ,
    WeightK,
    Generic,
}

/// Parsed container header. Unknown keys land in `extra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub kind: Kind,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Header {
    pub fn new(dtype: DType, shape: Vec<usize>, kind: Kind) -> Self {
        Self { dtype, shape, kind, extra: Map::new() }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.extra.insert(key.to_owned(), value.into());
        self
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.extra.get(key)
    }
}

#[derive(Debug, Clone)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values promoted to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Payload::F64(v) => v.clone(),
        }
    }

    pub fn into_f64(self) -> Vec<f64> {
        match self {
            Payload::F64(v) => v,
            other => other.to_f64(),
        }
    }

    /// Stores `values` at the requested precision.
    pub fn from_f64(values: Vec<f64>, dtype: DType) -> Self {
        match dtype {
            DType::F64 => Payload::F64(values),
            DType::F32 => Payload::F32(values.iter().map(|&x| x as f32).collect()),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

impl PartialEq for Payload {
    /// Bitwise equality, so NaN payloads still compare equal to themselves.
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Payload::F32(a), Payload::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Payload::F64(a), Payload::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// An immutable, validated container.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    header: Header,
    raw_header: String,
    payload: Payload,
}

impl TensorContainer {
    /// Builds a container, serializing the header canonically.
    pub fn new(header: Header, payload: Payload) -> Result<Self> {
        let raw_header = serde_json::to_string(&header)
            .map_err(|e| Error::Format(format!("cannot serialize header: {e}")))?;
        Self::validate(&header, &payload)?;
        Ok(Self { header, raw_header, payload })
    }

    /// Convenience constructor for a `f64` payload written at `dtype`.
    pub fn from_f64(kind: Kind, shape: Vec<usize>, values: Vec<f64>, dtype: DType) -> Result<Self> {
        Self::new(Header::new(dtype, shape, kind), Payload::from_f64(values, dtype))
    }

    /// Row-major 2-D container holding `m`.
    pub fn from_matrix(kind: Kind, m: &DMatrix<f64>, dtype: DType) -> Result<Self> {
        let values = m.transpose().as_slice().to_vec();
        Self::from_f64(kind, vec![m.nrows(), m.ncols()], values, dtype)
    }

    fn validate(header: &Header, payload: &Payload) -> Result<()> {
        if header.dtype != payload.dtype() {
            return Err(Error::CorruptPayload(format!(
                "header dtype {:?} does not match payload dtype {:?}",
                header.dtype,
                payload.dtype()
            )));
        }
        if header.element_count() != payload.len() {
            return Err(Error::CorruptPayload(format!(
                "shape {:?} needs {} elements, payload has {}",
                header.shape,
                header.element_count(),
                payload.len()
            )));
        }
        Ok(())
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    /// The header JSON exactly as stored on disk.
    pub fn raw_header(&self) -> &str {
        &self.raw_header
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn into_payload(self) -> Payload {
        self.payload
    }

    pub fn shape(&self) -> &[usize] {
        &self.header.shape
    }

    pub fn kind(&self) -> Kind {
        self.header.kind
    }

    /// Interprets a 2-D container as a matrix (promoted to `f64`).
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.shape() {
            &[r, c] => Ok(DMatrix::from_row_slice(r, c, &self.payload.to_f64())),
            other => Err(Error::invalid(format!("expected a 2-D container, got shape {other:?}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.raw_header.as_bytes();
        let pad = padding(PREAMBLE_LEN + header.len());
        let mut out = Vec::with_capacity(
            PREAMBLE_LEN + header.len() + pad + self.payload.len() * self.header.dtype.size(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header);
        out.resize(out.len() + pad, 0);
        self.payload.write_le(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE_LEN {
            return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&bytes[..8])
            )));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| PREAMBLE_LEN.checked_add(h))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format(format!("header length {header_len} exceeds file size")))?;
        let raw_header = std::str::from_utf8(&bytes[PREAMBLE_LEN..header_end])
            .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?
            .to_owned();
        let header: Header = serde_json::from_str(&raw_header)
            .map_err(|e| Error::Format(format!("invalid header: {e}")))?;

        let payload_start = header_end + padding(header_end);
        if payload_start > bytes.len() {
            return Err(Error::CorruptPayload("file ends inside header padding".into()));
        }
        if bytes[header_end..payload_start].iter().any(|&b| b != 0) {
            return Err(Error::Format("non-zero header padding".into()));
        }
        let body = &bytes[payload_start..];
        let expected = header
            .element_count()
            .checked_mul(header.dtype.size())
            .ok_or_else(|| Error::CorruptPayload(format!("shape {:?} overflows", header.shape)))?;
        if body.len() != expected {
            return Err(Error::CorruptPayload(format!(
                "shape {:?} ({:?}) expects {expected} payload bytes, found {}",
                header.shape,
                header.dtype,
                body.len()
            )));
        }
        let payload = match header.dtype {
            DType::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => Payload::F64(
                body.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            ),
        };
        Ok(Self { header, raw_header, payload })
    }
}

fn padding(offset: usize) -> usize {
    (8 - offset % 8) % 8
}

/// Reads a container file, streaming the payload straight into its typed
/// buffer. Errors match [`TensorContainer::from_bytes`].
pub fn read_container(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let mut file = fs::File::open(path)?;
    let file_len = file.metadata()?.len();
    let (header, raw_header) = read_preamble(&mut file, file_len)?;
    let header_end = PREAMBLE_LEN + raw_header.len();
    let pad = padding(header_end);
    if (header_end + pad) as u64 > file_len {
        return Err(Error::CorruptPayload("file ends inside header padding".into()));
    }
    let mut pad_bytes = [0u8; 8];
    file.read_exact(&mut pad_bytes[..pad])?;
    if pad_bytes.iter().any(|&b| b != 0) {
        return Err(Error::Format("non-zero header padding".into()));
    }
    let body_len = file_len - (header_end + pad) as u64;
    let n = header.element_count();
    let expected = n
        .checked_mul(header.dtype.size())
        .ok_or_else(|| Error::CorruptPayload(format!("shape {:?} overflows", header.shape)))?;
    if body_len != expected as u64 {
        return Err(Error::CorruptPayload(format!(
            "shape {:?} ({:?}) expects {expected} payload bytes, found {body_len}",
            header.shape, header.dtype
        )));
    }
    let payload = match header.dtype {
        DType::F32 => Payload::F32(read_scalars::<_, 4>(&mut file, n, |b| f32::from_le_bytes(b.try_into().expect("4 bytes")))?),
        DType::F64 => Payload::F64(read_scalars::<_, 8>(&mut file, n, |b| f64::from_le_bytes(b.try_into().expect("8 bytes")))?),
    };
    Ok(TensorContainer { header, raw_header, payload })
}

fn read_scalars<T, const N: usize>(file: &mut fs::File, n: usize, decode: impl Fn(&[u8]) -> T) -> Result<Vec<T>> {
    const CHUNK: usize = 1 << 20;
    let mut out = Vec::with_capacity(n);
    let mut buf = vec![0u8; CHUNK * N];
    while out.len() < n {
        let m = CHUNK.min(n - out.len());
        let bytes = &mut buf[..m * N];
        file.read_exact(bytes)?;
        out.extend(bytes.chunks_exact(N).map(&decode));
    }
    Ok(out)
}

fn read_preamble(file: &mut fs::File, file_len: u64) -> Result<(Header, String)> {
    let mut pre = [0u8; PREAMBLE_LEN];
    file.read_exact(&mut pre).map_err(|_| Error::Format(format!("file too short ({file_len} bytes)")))?;
    if &pre[..8] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&pre[..8]))));
    }
    let version = u32::from_le_bytes(pre[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let len = u64::from_le_bytes(pre[12..20].try_into().expect("8 bytes"));
    if len > file_len - PREAMBLE_LEN as u64 {
        return Err(Error::Format(format!("header length {len} exceeds file size")));
    }
    let mut raw = vec![0u8; len as usize];
    file.read_exact(&mut raw)?;
    let raw = String::from_utf8(raw).map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let header: Header =
        serde_json::from_str(&raw).map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    Ok((header, raw))
}

/// Parses only the preamble and JSON header of a container file.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let mut file = fs::File::open(path)?;
    let file_len = file.metadata()?.len();
    read_preamble(&mut file, file_len).map(|(h, _)| h)
}

pub fn write_container(container: &TensorContainer, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&container.to_bytes())?;
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.gt");
        write_container(&sample(), &path).unwrap();
        let h = read_header(&path).unwrap();
        assert_eq!(h, *sample().header());
        fs::write(&path, b"GEOMTNSX\x01\0\0\0").unwrap();
        assert!(matches!(read_header(&path), Err(Error::Format(_))));
    }

    #[test]
    fn file_reader_agrees_with_byte_parser_on_damage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.gt");
        let c = sample();
        let good = c.to_bytes();
        let header_end = PREAMBLE_LEN + c.raw_header().len();
        let mut cases = vec![good[..good.len() - 4].to_vec(), [&good[..], &[0u8; 8]].concat(), good[..header_end].to_vec()];
        if padding(header_end) > 0 {
            let mut b = good.clone();
            b[header_end] = 7;
            cases.push(b);
        }
        for bytes in cases {
            fs::write(&path, &bytes).unwrap();
            let a = read_container(&path).unwrap_err();
            let b = TensorContainer::from_bytes(&bytes).unwrap_err();
            assert_eq!(std::mem::discriminant(&a), std::mem::discriminant(&b), "{a} vs {b}");
        }
    }

    fn sample() -> TensorContainer {
        let header = Header::new(DType::F32, vec![2, 3, 4], Kind::Embeddings)
            .with("layer", 3)
            .with("seq_labels", vec![0, 1]);
        let payload = Payload::F32((0..24).map(|i| i as f32 * 0.5).collect());
        TensorContainer::new(header, payload).unwrap()
    }

    #[test]
    fn f32_payload_encoding_is_little_endian_ieee() {
        let c = TensorContainer::new(
            Header::new(DType::F32, vec![2], Kind::Generic),
            Payload::F32(vec![1.0, 2.0]),
        )
        .unwrap();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[bytes.len() - 8..], &[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40]);
    }

    #[test]
    fn f64_zero_is_eight_zero_bytes_after_header() {
        let c = TensorContainer::new(Header::new(DType::F64, vec![1], Kind::Generic), Payload::F64(vec![0.0]))
            .unwrap();
        let bytes = c.to_bytes();
        assert_eq!(bytes.len() % 8, 0);
        assert_eq!(&bytes[bytes.len() - 8..], &[0u8; 8]);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = sample().to_bytes();
        bytes[7] = b'X';
        assert!(matches!(TensorContainer::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(TensorContainer::from_bytes(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn exact_payload_length_parses_and_short_payload_is_corrupt() {
        let bytes = sample().to_bytes();
        // 2*3*4 f32 values = 96 payload bytes
        let parsed = TensorContainer::from_bytes(&bytes).unwrap();
        assert_eq!(parsed.payload().len() * 4, 96);
        let truncated = &bytes[..bytes.len() - 4];
        assert!(matches!(TensorContainer::from_bytes(truncated), Err(Error::CorruptPayload(_))));
    }

    #[test]
    fn missing_mandatory_key_is_rejected() {
        for raw in [
            r#"{"dtype":"f32","shape":[1]}"#,
            r#"{"dtype":"f32","kind":"generic"}"#,
            r#"{"shape":[1],"kind":"generic"}"#,
            r#"{"dtype":"f16","shape":[1],"kind":"generic"}"#,
        ] {
            let mut bytes = Vec::new();
            bytes.extend_from_slice(MAGIC);
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.extend_from_slice(&(raw.len() as u64).to_le_bytes());
            bytes.extend_from_slice(raw.as_bytes());
            bytes.resize(bytes.len() + padding(bytes.len()), 0);
            bytes.extend_from_slice(&[0u8; 4]);
            assert!(matches!(TensorContainer::from_bytes(&bytes), Err(Error::Format(_))), "{raw}");
        }
    }

    #[test]
    fn foreign_header_formatting_survives_round_trip() {
        // Whitespace and key order a different writer might produce.
        let raw = r#"{ "kind": "generic",  "shape": [2], "note": "x", "dtype": "f64" }"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(raw.len() as u64).to_le_bytes());
        bytes.extend_from_slice(raw.as_bytes());
        bytes.resize(bytes.len() + padding(bytes.len()), 0);
        bytes.extend_from_slice(&1.5f64.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f64).to_le_bytes());
        let c = TensorContainer::from_bytes(&bytes).unwrap();
        assert_eq!(c.header().get("note").unwrap(), "x");
        assert_eq!(c.to_bytes(), bytes);
    }

    #[test]
    fn empty_optional_fields_keep_required_keys() {
        let c = TensorContainer::new(Header::new(DType::F64, vec![0], Kind::Generic), Payload::F64(vec![]))
            .unwrap();
        let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.header().dtype, DType::F64);
        assert_eq!(back.header().kind, Kind::Generic);
        assert_eq!(back.shape(), &[0]);
        assert!(back.header().extra.is_empty());
    }

    #[test]
    fn nonzero_padding_is_rejected() {
        let c = sample();
        let mut bytes = c.to_bytes();
        let header_end = PREAMBLE_LEN + c.raw_header().len();
        if padding(header_end) > 0 {
            bytes[header_end] = 1;
            assert!(matches!(TensorContainer::from_bytes(&bytes), Err(Error::Format(_))));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.gt");
        let c = sample();
        write_container(&c, &path).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back, c);
        let path2 = dir.path().join("y.gt");
        write_container(&back, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn matrix_round_trip_is_row_major() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = TensorContainer::from_matrix(Kind::Generic, &m, DType::F64).unwrap();
        assert_eq!(c.payload().to_f64(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(c.to_matrix().unwrap(), m);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn read_write_is_identity(
                values in prop::collection::vec(any::<f64>(), 0..64),
                layer in 0u32..100,
                note in "[a-z]{0,12}",
            ) {
                let header = Header::new(DType::F64, vec![values.len()], Kind::Generic)
                    .with("layer", layer)
                    .with("note", note);
                let c = TensorContainer::new(header, Payload::F64(values)).unwrap();
                let bytes = c.to_bytes();
                let back = TensorContainer::from_bytes(&bytes).unwrap();
                prop_assert_eq!(&back, &c);
                prop_assert_eq!(back.to_bytes(), bytes);
            }

            #[test]
            fn f32_values_round_trip_bitwise(values in prop::collection::vec(any::<f32>(), 1..32)) {
                let c = TensorContainer::new(
                    Header::new(DType::F32, vec![values.len()], Kind::Generic),
                    Payload::F32(values),
                ).unwrap();
                prop_assert_eq!(TensorContainer::from_bytes(&c.to_bytes()).unwrap(), c);
            }
        }
    }
}
