//! Checkpoint files: a readable text manifest followed by raw little-endian
//! `f64` parameter blocks.
//!
//! ```text
//! DIFFEWS-CKPT 1
//! iteration 2000
//! config {"seed":0,...}
//! bytes 812544
//! checksum 8f3a...
//! param conv_in.w 864 32 f64
//! ...
//! end
//! <raw values>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;
use crate::unet::UNet;

use super::config::RunConfig;

const MAGIC: &str = "DIFFEWS-CKPT 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: usize,
    pub params: ParamStore,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl Checkpoint {
    pub fn model(&self) -> Result<UNet> {
        UNet::from_params(self.config.unet(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::with_capacity(self.params.num_scalars() * 8);
        for (_, m) in self.params.iter() {
            for v in &m.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut head = format!(
            "{MAGIC}\niteration {}\nconfig {}\nbytes {}\nchecksum {:016x}\n",
            self.iteration,
            serde_json::to_string(&self.config)?,
            blob.len(),
            fnv1a(&blob)
        );
        for (name, m) in self.params.iter() {
            head.push_str(&format!("param {name} {} {} f64\n", m.rows, m.cols));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.extend(blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        let end = bytes
            .windows(5)
            .position(|w| w == b"\nend\n")
            .ok_or_else(|| corrupt("manifest terminator not found"))?;
        let head = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("manifest is not text"))?;
        let blob = &bytes[end + 5..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(corrupt("missing magic line"));
        }
        let mut field = |key: &str| -> Result<String> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| corrupt(&format!("missing `{key}` line")))
        };
        let iteration: usize = field("iteration")?.parse().map_err(|_| corrupt("bad iteration"))?;
        let config = RunConfig::from_json(&field("config")?).map_err(|_| corrupt("bad config snapshot"))?;
        let declared: usize = field("bytes")?.parse().map_err(|_| corrupt("bad byte count"))?;
        let checksum = u64::from_str_radix(&field("checksum")?, 16).map_err(|_| corrupt("bad checksum"))?;
        let mut shapes = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["param", name, r, c, "f64"] => {
                    let r: usize = r.parse().map_err(|_| corrupt("bad parameter rows"))?;
                    let c: usize = c.parse().map_err(|_| corrupt("bad parameter cols"))?;
                    shapes.push((name.to_string(), r, c));
                }
                _ => return Err(corrupt(&format!("unreadable manifest line `{line}`"))),
            }
        }
        if blob.len() != declared {
            return Err(corrupt(&format!("value block has {} bytes, header declares {declared}", blob.len())));
        }
        if fnv1a(blob) != checksum {
            return Err(corrupt("checksum mismatch"));
        }
        let needed: usize = shapes.iter().map(|(_, r, c)| r * c * 8).sum();
        if needed != declared {
            return Err(Error::ManifestMismatch(format!(
                "parameter shapes need {needed} bytes, value block has {declared}"
            )));
        }
        let mut params = ParamStore::new();
        let mut offset = 0;
        for (name, r, c) in shapes {
            let data = blob[offset..offset + r * c * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes")))
                .collect();
            offset += r * c * 8;
            params.add(name, Matrix::from_vec(r, c, data));
        }
        let ck = Self { config, iteration, params };
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
