//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `DSSRCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header, then
//! every tensor's data as little-endian `f32` in header order. Optimizer
//! moments, when present, are stored as extra tensors named
//! `adam.m/<param>` and `adam.v/<param>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dssr, DssrConfig, DssrParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::variants::VariantKind;

const MAGIC: &[u8; 8] = b"DSSRCKPT";
const VERSION: u32 = 1;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// Adam first/second moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: DssrParams<f32>,
    pub v: DssrParams<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Dssr<f32>,
    pub optimizer: Option<OptimizerState>,
    /// Completed training iterations.
    pub iter: u64,
    /// Free-form metadata, e.g. the training configuration.
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: DssrConfig,
    variant: VariantKind,
    iter: u64,
    adam_step: Option<u64>,
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn new(model: Dssr<f32>) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            iter: 0,
            extra: serde_json::Value::Null,
        }
    }

    fn tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out: Vec<(String, &Tensor<f32>)> =
            self.model.params().iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            out.extend(opt.m.iter().map(|(n, t)| (format!("{M_PREFIX}{n}"), t)));
            out.extend(opt.v.iter().map(|(n, t)| (format!("{V_PREFIX}{n}"), t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let header = Header {
            config: self.model.config().clone(),
            variant: self.model.variant(),
            iter: self.iter,
            adam_step: self.optimizer.as_ref().map(|o| o.step),
            extra: self.extra.clone(),
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n_values: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        let mut buf = Vec::with_capacity(20 + json.len() + 4 * n_values);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad(format!("header truncated ({} of {hlen} bytes)", body.len())));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("malformed header: {e}")))?;
        let mut data = &body[hlen..];

        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < 4 * n {
                return Err(bad(format!(
                    "data for `{}` {:?} truncated: need {} bytes, {} left",
                    entry.name,
                    entry.shape,
                    4 * n,
                    data.len()
                )));
            }
            let values = data[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            data = &data[4 * n..];
            let t = Tensor::from_vec(&entry.shape, values)?;
            if !t.all_finite() {
                return Err(bad(format!("`{}` contains non-finite values", entry.name)));
            }
            if let Some(name) = entry.name.strip_prefix(M_PREFIX) {
                m.push((name.to_string(), t));
            } else if let Some(name) = entry.name.strip_prefix(V_PREFIX) {
                v.push((name.to_string(), t));
            } else {
                params.push((entry.name, t));
            }
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes after tensor data", data.len())));
        }

        let model = Dssr::new(header.config, header.variant, DssrParams::from_entries(params)?)?;
        let optimizer = match header.adam_step {
            None => None,
            Some(step) => {
                let m = DssrParams::from_entries(m)?;
                let v = DssrParams::from_entries(v)?;
                m.check_layout(model.config(), model.variant())
                    .map_err(|e| bad(format!("first moments: {e}")))?;
                v.check_layout(model.config(), model.variant())
                    .map_err(|e| bad(format!("second moments: {e}")))?;
                Some(OptimizerState { step, m, v })
            }
        };
        Ok(Checkpoint {
            model,
            optimizer,
            iter: header.iter,
            extra: header.extra,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::variants::build_variant;

    fn tiny() -> Dssr<f32> {
        build_variant(VariantKind::FullSmu, &DssrConfig::tiny(2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn round_trip_with_moments() {
        let model = tiny();
        let m = model.params().clone();
        let mut v = model.params().clone();
        for (_, t) in v.iter_mut() {
            for x in t.data_mut() {
                *x = x.abs();
            }
        }
        let ck = Checkpoint {
            optimizer: Some(OptimizerState { step: 7, m, v }),
            iter: 42,
            extra: serde_json::json!({"alpha": 1.0}),
            model,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn truncation_names_tensor() {
        let bytes = Checkpoint::new(tiny()).to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).unwrap_err().to_string();
        assert!(err.contains("recon.output.bias"), "{err}");
    }

    #[test]
    fn wrong_variant_lists_parameters() {
        let mut bytes = Checkpoint::new(tiny()).to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[20..20 + hlen].to_vec()).unwrap();
        // same length so the offsets stay valid
        let patched = header.replace("\"full_smu\"", "\"ea\"      ");
        bytes[20..20 + hlen].copy_from_slice(patched.as_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("smu.adapter_hr.0.weight"), "{err}");
        assert!(err.contains("unexpected `smu.affine_hr.0.weight`"), "{err}");
    }

    #[test]
    fn bad_magic() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
    }
}
