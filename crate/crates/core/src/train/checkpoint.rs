//! Single-file checkpoints: a plain-text header with the tensor manifest, then
//! little-endian `f32` values in manifest order.
//!
//! ```text
//! CTD-CHECKPOINT 1
//! variant <canonical variant string>
//! digest <hex>
//! seed <u64>
//! step <u64>
//! tensors <count>
//! <name> <b> <c> <h> <w> <byte offset>
//! ...
//! end
//! <blob>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{CtdError, Result};
use crate::model::{Ctd, VariantConfig};
use crate::nn::named_tensors;
use crate::tensor::Shape;

const MAGIC: &str = "CTD-CHECKPOINT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Shape,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub variant: VariantConfig,
    pub seed: u64,
    pub step: u64,
    pub manifest: Vec<ManifestEntry>,
    pub values: Vec<f32>,
}

impl Checkpoint {
    /// Snapshot of every parameter and buffer in canonical order.
    pub fn capture(model: &Ctd<f32>, seed: u64, step: u64) -> Self {
        let mut manifest = Vec::new();
        let mut values = Vec::new();
        for (name, t, _) in named_tensors(model) {
            manifest.push(ManifestEntry {
                name,
                shape: t.shape(),
                offset: values.len() * 4,
            });
            values.extend(t.data().iter());
        }
        Checkpoint {
            variant: model.variant.clone(),
            seed,
            step,
            manifest,
            values,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!(
            "{MAGIC}\nvariant {}\ndigest {}\nseed {}\nstep {}\ntensors {}\n",
            self.variant.canonical(),
            self.variant.digest(),
            self.seed,
            self.step,
            self.manifest.len()
        );
        for e in &self.manifest {
            let s = e.shape;
            head.push_str(&format!(
                "{} {} {} {} {} {}\n",
                e.name, s.b, s.c, s.h, s.w, e.offset
            ));
        }
        head.push_str("end\n");
        let mut bytes = head.into_bytes();
        bytes.reserve(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| CtdError::Validation(format!("checkpoint: {m}"));
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not utf-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = next_line()?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}`, got `{line}`")))
        };
        let variant = VariantConfig::parse_canonical(&field("variant")?)?;
        let digest = field("digest")?;
        if digest != variant.digest() {
            return Err(bad(format!(
                "digest {digest} does not match variant {}",
                variant.digest()
            )));
        }
        let int = |s: String| {
            s.parse::<u64>()
                .map_err(|_| bad(format!("bad integer `{s}`")))
        };
        let seed = int(field("seed")?)?;
        let step = int(field("step")?)?;
        let count = int(field("tensors")?)? as usize;
        let mut manifest = Vec::with_capacity(count);
        let mut expected = 0;
        for _ in 0..count {
            let line = next_line()?;
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 6 {
                return Err(bad(format!("bad manifest line `{line}`")));
            }
            let n: Vec<usize> = f[1..]
                .iter()
                .map(|x| {
                    x.parse()
                        .map_err(|_| bad(format!("bad manifest line `{line}`")))
                })
                .collect::<Result<_>>()?;
            let shape = Shape::new(n[0], n[1], n[2], n[3]);
            if n[4] != expected {
                return Err(bad(format!(
                    "{}: offset {} where {expected} expected",
                    f[0], n[4]
                )));
            }
            expected += shape.numel() * 4;
            manifest.push(ManifestEntry {
                name: f[0].to_string(),
                shape,
                offset: n[4],
            });
        }
        if next_line()? != "end" {
            return Err(bad("missing `end`".into()));
        }
        let blob = &bytes[pos..];
        if blob.len() != expected {
            return Err(bad(format!(
                "blob has {} bytes, manifest needs {expected}",
                blob.len()
            )));
        }
        let values = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Checkpoint {
            variant,
            seed,
            step,
            manifest,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CtdError::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| CtdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CtdError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CtdError::Validation(m) => CtdError::io(path, m),
            other => other,
        })
    }

    /// Copies the stored values into a freshly built model.
    pub fn restore(&self) -> Result<Ctd<f32>> {
        let model = Ctd::new(&self.variant, self.seed)?;
        let tensors = named_tensors(&model);
        if tensors.len() != self.manifest.len() {
            return Err(CtdError::Validation(format!(
                "checkpoint has {} tensors, model has {}",
                self.manifest.len(),
                tensors.len()
            )));
        }
        for ((name, t, _), e) in tensors.iter().zip(&self.manifest) {
            if *name != e.name || t.shape() != e.shape {
                return Err(CtdError::Validation(format!(
                    "checkpoint tensor {} {} does not match model tensor {name} {}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            let start = e.offset / 4;
            t.data_mut()
                .copy_from_slice(&self.values[start..start + e.shape.numel()]);
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VariantName;

    #[test]
    fn save_load_save_is_byte_identical() {
        let model: Ctd<f32> = Ctd::new(&VariantConfig::desk(VariantName::S), 4).unwrap();
        let ck = Checkpoint::capture(&model, 4, 17);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let restored = back.restore().unwrap();
        assert_eq!(Checkpoint::capture(&restored, 4, 17).to_bytes(), bytes);
        let total: usize = ck.manifest.iter().map(|e| e.shape.numel()).sum();
        assert_eq!(ck.values.len(), total);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let model: Ctd<f32> = Ctd::new(&VariantConfig::desk(VariantName::M), 0).unwrap();
        let bytes = Checkpoint::capture(&model, 0, 0).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nope\n").is_err());
    }
}
