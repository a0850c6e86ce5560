//! Flat name -> array containers on disk (safetensors layout).
//!
//! Backbone weights, head checkpoints, and exported heads all share this
//! container. Tensors are widened to `f32`/`f64` on load.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone)]
struct Stored {
    shape: Vec<usize>,
    data: Data,
}

/// An in-memory copy of a tensor container.
#[derive(Debug, Clone)]
pub struct TensorStore {
    origin: PathBuf,
    tensors: HashMap<String, Stored>,
    metadata: HashMap<String, String>,
    digest: String,
}

impl TensorStore {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
            _ => Error::Load {
                path: path.to_path_buf(),
                reason: e.to_string(),
            },
        })?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], origin: impl Into<PathBuf>) -> Result<Self> {
        let origin = origin.into();
        let load_err = |reason: String| Error::Load {
            path: origin.clone(),
            reason,
        };
        let st = SafeTensors::deserialize(bytes).map_err(|e| load_err(e.to_string()))?;
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| load_err(e.to_string()))?;
        let metadata = header.metadata().clone().unwrap_or_default();

        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            let data = decode(&view).map_err(|r| load_err(format!("tensor `{name}`: {r}")))?;
            tensors.insert(
                name,
                Stored {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        let digest = hex::encode(Sha256::digest(bytes));
        Ok(Self {
            origin,
            tensors,
            metadata,
            digest,
        })
    }

    pub fn origin(&self) -> &Path {
        &self.origin
    }

    /// Hex SHA-256 of the raw container bytes.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn metadata(&self) -> &HashMap<String, String> {
        &self.metadata
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(|t| t.shape.as_slice())
    }

    fn lookup(&self, name: &str, expected: Option<&[usize]>) -> Result<&Stored> {
        let t = self.tensors.get(name).ok_or_else(|| Error::Load {
            path: self.origin.clone(),
            reason: format!("missing tensor `{name}`"),
        })?;
        if let Some(expected) = expected {
            if t.shape != expected {
                return Err(Error::Load {
                    path: self.origin.clone(),
                    reason: format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        t.shape, expected
                    ),
                });
            }
        }
        Ok(t)
    }

    /// Fetch a tensor as `f32`, checking its shape when `expected` is given.
    pub fn f32(&self, name: &str, expected: Option<&[usize]>) -> Result<ArrayD<f32>> {
        let t = self.lookup(name, expected)?;
        let data = match &t.data {
            Data::F32(v) => v.clone(),
            Data::F64(v) => v.iter().map(|&x| x as f32).collect(),
        };
        Ok(ArrayD::from_shape_vec(IxDyn(&t.shape), data).expect("shape checked on load"))
    }

    /// Fetch a tensor as `f64`. Values stored as `f64` come back bit-exact.
    pub fn f64(&self, name: &str, expected: Option<&[usize]>) -> Result<ArrayD<f64>> {
        let t = self.lookup(name, expected)?;
        let data = match &t.data {
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::F64(v) => v.clone(),
        };
        Ok(ArrayD::from_shape_vec(IxDyn(&t.shape), data).expect("shape checked on load"))
    }
}

fn decode(view: &TensorView<'_>) -> std::result::Result<Data, String> {
    let raw = view.data();
    let n: usize = view.shape().iter().product();
    let data = match view.dtype() {
        Dtype::F32 => Data::F32(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::F64 => Data::F64(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F16 => Data::F32(
            raw.chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        ),
        Dtype::BF16 => Data::F32(
            raw.chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        ),
        // Integer buffers (e.g. position ids) are not weights; they are widened
        // so the store stays total, and callers simply never ask for them.
        Dtype::I64 => Data::F64(
            raw.chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        ),
        other => return Err(format!("unsupported dtype {other:?}")),
    };
    let len = match &data {
        Data::F32(v) => v.len(),
        Data::F64(v) => v.len(),
    };
    if len != n {
        return Err(format!("expected {n} elements, found {len}"));
    }
    Ok(data)
}

/// Accumulates tensors and writes a container.
///
/// Output bytes are a pure function of the inserted tensors and metadata.
#[derive(Debug, Default)]
pub struct TensorWriter {
    tensors: BTreeMap<String, (Dtype, Vec<usize>, Vec<u8>)>,
    metadata: BTreeMap<String, String>,
}

impl TensorWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, shape: &[usize], data: &[f32]) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.tensors
            .insert(name.into(), (Dtype::F32, shape.to_vec(), bytes));
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.tensors
            .insert(name.into(), (Dtype::F64, shape.to_vec(), bytes));
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let views = self
            .tensors
            .iter()
            .map(|(name, (dtype, shape, bytes))| {
                TensorView::new(*dtype, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::InvalidArgument(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let metadata = (!self.metadata.is_empty())
            .then(|| self.metadata.clone().into_iter().collect::<HashMap<_, _>>());
        let bytes = safetensors::serialize(views, metadata)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        canonical_header(bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

/// Re-emit the JSON header with sorted keys. The serializer walks hash maps,
/// so without this the header order (and the file bytes) would vary run to run.
fn canonical_header(bytes: Vec<u8>) -> Result<Vec<u8>> {
    let bad = || Error::InvalidArgument("malformed container header".into());
    let n = u64::from_le_bytes(bytes.get(..8).ok_or_else(bad)?.try_into().expect("8 bytes")) as usize;
    let header = bytes.get(8..8 + n).ok_or_else(bad)?;
    let value: serde_json::Value = serde_json::from_slice(header)?;
    let mut json = serde_json::to_vec(&value)?;
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}
