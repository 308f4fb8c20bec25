//! `MPMF1` model files: a short text header followed by the raw parameters.
//!
//! ```text
//! MPMF1
//! fingerprint=<16 hex digits>
//! steps=<K>
//! values=<count>
//! sha256=<64 hex digits of the payload>
//! num_scenes=…            (full config echo, one key per line)
//! …
//! end
//! <count little-endian f64 values>
//! ```
//!
//! Values follow [`NetworkParams::to_vec`] order: per step, `alpha`, `beta`,
//! `w_phi`, `w_psi`.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::scalar::Scalar;

pub const MAGIC: &str = "MPMF1";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile<S> {
    pub config: ModelConfig,
    pub params: NetworkParams<S>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl<S: Scalar> ModelFile<S> {
    pub fn new(config: ModelConfig, params: NetworkParams<S>) -> Self {
        ModelFile { config, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: Vec<u8> = self.params.iter().flat_map(|v| v.as_f64().to_le_bytes()).collect();
        let mut head = String::new();
        let _ = writeln!(head, "{MAGIC}");
        let _ = writeln!(head, "fingerprint={:016x}", self.config.fingerprint());
        let _ = writeln!(head, "steps={}", self.params.num_steps());
        let _ = writeln!(head, "values={}", self.params.len());
        let _ = writeln!(head, "sha256={}", sha256_hex(&payload));
        head.push_str(&self.config.to_config_string());
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::ModelFile(msg.to_string());
        let end = bytes
            .windows(5)
            .position(|w| w == b"\nend\n")
            .ok_or_else(|| bad("header terminator `end` not found"))?;
        let head = std::str::from_utf8(&bytes[..end + 1]).map_err(|_| bad("header is not UTF-8"))?;
        let payload = &bytes[end + 5..];

        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing MPMF1 magic"));
        }
        let (mut fingerprint, mut steps, mut values, mut checksum) = (None, None, None, None);
        let mut config_text = String::new();
        for line in lines {
            match line.split_once('=') {
                Some(("fingerprint", v)) => {
                    fingerprint = Some(u64::from_str_radix(v, 16).map_err(|_| bad("bad fingerprint"))?)
                }
                Some(("steps", v)) => steps = Some(v.parse::<usize>().map_err(|_| bad("bad steps"))?),
                Some(("values", v)) => values = Some(v.parse::<usize>().map_err(|_| bad("bad values"))?),
                Some(("sha256", v)) => checksum = Some(v.to_string()),
                _ => {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
            }
        }
        let fingerprint = fingerprint.ok_or_else(|| bad("missing fingerprint"))?;
        let steps = steps.ok_or_else(|| bad("missing steps"))?;
        let values = values.ok_or_else(|| bad("missing values"))?;
        let checksum = checksum.ok_or_else(|| bad("missing sha256"))?;

        let actual = sha256_hex(payload);
        if actual != checksum {
            return Err(Error::Checksum {
                expected: checksum,
                actual,
            });
        }
        let config = ModelConfig::parse(&config_text)?;
        if config.fingerprint() != fingerprint {
            return Err(Error::Fingerprint(fingerprint, config.fingerprint()));
        }
        let mut params = NetworkParams::<S>::zeros(&config, steps);
        if params.len() != values || payload.len() != values * 8 {
            return Err(Error::ModelFile(format!(
                "payload holds {} bytes; header declares {values} values, config implies {}",
                payload.len(),
                params.len()
            )));
        }
        let decoded: Vec<S> = payload
            .chunks_exact(8)
            .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        params.set_from_slice(&decoded);
        Ok(ModelFile { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_model<S: Scalar>(path: impl AsRef<Path>, config: &ModelConfig, params: &NetworkParams<S>) -> Result<()> {
    ModelFile::new(config.clone(), params.clone()).save(path)
}

pub fn load_model<S: Scalar>(path: impl AsRef<Path>) -> Result<ModelFile<S>> {
    ModelFile::load(path)
}
