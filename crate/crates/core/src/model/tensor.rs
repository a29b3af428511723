use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported bit-width. Payloads use one byte per value up to q=8
/// and two bytes above that.
pub const MAX_Q: u8 = 16;

fn default_q() -> u8 {
    8
}

/// Inclusive range of a q-bit two's-complement integer.
pub fn int_range(q: u8) -> (i32, i32) {
    let half = 1i32 << (q - 1);
    (-half, half - 1)
}

pub(crate) fn check_q(q: u8) -> Result<()> {
    if q == 0 || q > MAX_Q {
        return Err(Error::validation(format!("q must be in 1..={MAX_Q}, got {q}")));
    }
    Ok(())
}

/// Signed fixed-width integer tensor, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorDoc", into = "TensorDoc")]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    q: u8,
    scale: f64,
    values: Vec<i32>,
}

#[derive(Serialize, Deserialize)]
struct TensorDoc {
    shape: Vec<usize>,
    #[serde(default = "default_q")]
    q: u8,
    scale: f64,
    values: Vec<i32>,
}

impl TryFrom<TensorDoc> for QuantizedTensor {
    type Error = Error;

    fn try_from(doc: TensorDoc) -> Result<Self> {
        QuantizedTensor::new(doc.shape, doc.q, doc.scale, doc.values)
    }
}

impl From<QuantizedTensor> for TensorDoc {
    fn from(t: QuantizedTensor) -> Self {
        TensorDoc {
            shape: t.shape,
            q: t.q,
            scale: t.scale,
            values: t.values,
        }
    }
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, q: u8, scale: f64, values: Vec<i32>) -> Result<Self> {
        check_q(q)?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("dimensions must be positive: {shape:?}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::validation(format!("scale must be positive, got {scale}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Length {
                expected: n,
                actual: values.len(),
            });
        }
        let (min, max) = int_range(q);
        if let Some(&v) = values.iter().find(|&&v| v < min || v > max) {
            return Err(Error::Range {
                value: v as i64,
                min: min as i64,
                max: max as i64,
                q,
            });
        }
        Ok(Self {
            shape,
            q,
            scale,
            values,
        })
    }

    /// A 2-D tensor.
    pub fn matrix(rows: usize, cols: usize, q: u8, values: Vec<i32>) -> Result<Self> {
        Self::new(vec![rows, cols], q, 1.0, values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn q(&self) -> u8 {
        self.q
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(rows, cols)` if the tensor is 2-D.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected a 2-D tensor, got {:?}", self.shape))),
        }
    }

    /// Element `(r, c)` of a 2-D tensor.
    pub fn at(&self, r: usize, c: usize) -> i32 {
        self.values[r * self.shape[1] + c]
    }

    /// Same shape and scale, new values (re-validated against q).
    pub fn with_values(&self, values: Vec<i32>) -> Result<Self> {
        Self::new(self.shape.clone(), self.q, self.scale, values)
    }
}

/// Sidecar describing a binary tensor payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    #[serde(default = "default_q")]
    pub q: u8,
    pub scale: f64,
    #[serde(default = "little")]
    pub byte_order: String,
    /// Payload file, relative to the sidecar. Defaults to the sidecar's stem
    /// with a `.bin` extension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    /// Inline values for small tensors; takes precedence over `data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<i32>>,
}

fn little() -> String {
    "little".to_string()
}

/// Bytes per element in the binary payload.
pub fn element_width(q: u8) -> usize {
    if q <= 8 {
        1
    } else {
        2
    }
}

/// Decodes a flat little-endian payload against its header.
pub fn load_tensor(payload: &[u8], header: &TensorHeader) -> Result<QuantizedTensor> {
    check_q(header.q)?;
    if header.byte_order != "little" {
        return Err(Error::parse(
            "byte_order",
            format!("only \"little\" is supported, got {:?}", header.byte_order),
        ));
    }
    let n: usize = header.shape.iter().product();
    let width = element_width(header.q);
    if payload.len() != n * width {
        return Err(Error::Length {
            expected: n,
            actual: payload.len() / width,
        });
    }
    let values = match width {
        1 => payload.iter().map(|&b| b as i8 as i32).collect(),
        _ => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
            .collect(),
    };
    QuantizedTensor::new(header.shape.clone(), header.q, header.scale, values)
}

/// Encodes values as the flat binary payload.
pub fn encode_payload(t: &QuantizedTensor) -> Vec<u8> {
    match element_width(t.q) {
        1 => t.values.iter().map(|&v| v as i8 as u8).collect(),
        _ => t
            .values
            .iter()
            .flat_map(|&v| (v as i16).to_le_bytes())
            .collect(),
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn payload_path(sidecar: &Path, header: &TensorHeader) -> PathBuf {
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    match &header.data {
        Some(p) => dir.join(p),
        None => sidecar.with_extension("bin"),
    }
}

/// Reads a tensor from its JSON sidecar, following the payload reference
/// unless values are inlined.
pub fn read_tensor(sidecar: &Path) -> Result<QuantizedTensor> {
    let header: TensorHeader = read_json(sidecar)?;
    if let Some(values) = &header.values {
        check_q(header.q)?;
        return QuantizedTensor::new(header.shape.clone(), header.q, header.scale, values.clone());
    }
    let bin = payload_path(sidecar, &header);
    let payload = fs::read(&bin).map_err(|source| Error::Io { path: bin, source })?;
    load_tensor(&payload, &header)
}

/// Writes `<path>` (sidecar) and `<path>.bin` (payload).
pub fn write_tensor(sidecar: &Path, t: &QuantizedTensor) -> Result<()> {
    let bin = sidecar.with_extension("bin");
    let header = TensorHeader {
        shape: t.shape.clone(),
        q: t.q,
        scale: t.scale,
        byte_order: little(),
        data: bin.file_name().map(|n| n.to_string_lossy().into_owned()),
        values: None,
    };
    write_file(&bin, &encode_payload(t))?;
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    write_file(sidecar, text.as_bytes())
}
