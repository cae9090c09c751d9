//! Checkpoint files: a text manifest followed by the tensors as `FAMT` blobs.
//!
//! ```text
//! FAMLP-CHECKPOINT 1
//! image_size=32
//! ...
//! tensor patch_embed.w 4136
//! tensor layers.0.aff.w_filter.re 8232
//! ---
//! <blobs, concatenated in manifest order>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{FamlpModel, ModelConfig};
use crate::error::{Error, Result};
use crate::fft::ComplexTensor;
use crate::tensor::{read_tensor_from, write_tensor_to, Tensor};

const HEADER: &str = "FAMLP-CHECKPOINT 1";

pub fn write_checkpoint_to<W: Write>(w: &mut W, model: &FamlpModel) -> std::io::Result<()> {
    let mut blobs = Vec::new();
    let mut manifest = format!("{HEADER}\n");
    for (k, v) in model.config().to_pairs() {
        manifest.push_str(&format!("{k}={v}\n"));
    }
    for (name, t) in model.named_parameters() {
        let start = blobs.len();
        write_tensor_to(&mut blobs, t)?;
        manifest.push_str(&format!("tensor {name} {}\n", blobs.len() - start));
    }
    manifest.push_str("---\n");
    w.write_all(manifest.as_bytes())?;
    w.write_all(&blobs)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &FamlpModel) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint_to(&mut w, model)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint_from<R: BufRead>(r: &mut R) -> Result<FamlpModel> {
    let bad = |msg: String| Error::format("checkpoint", msg);
    let mut line = String::new();
    let next_line = |r: &mut R, line: &mut String| -> Result<()> {
        line.clear();
        let n = r.read_line(line).map_err(|e| bad(e.to_string()))?;
        if n == 0 {
            return Err(bad("unexpected end of manifest".into()));
        }
        Ok(())
    };

    next_line(r, &mut line)?;
    if line.trim_end() != HEADER {
        return Err(bad(format!("expected `{HEADER}`, found `{}`", line.trim_end())));
    }
    let mut config = ModelConfig::default();
    let mut entries: Vec<(String, usize)> = Vec::new();
    loop {
        next_line(r, &mut line)?;
        let l = line.trim_end();
        if l == "---" {
            break;
        }
        if let Some(rest) = l.strip_prefix("tensor ") {
            let mut parts = rest.split(' ');
            let (Some(name), Some(len), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(format!("bad tensor line `{l}`")));
            };
            let len = len.parse().map_err(|_| bad(format!("bad byte count in `{l}`")))?;
            entries.push((name.to_string(), len));
        } else if let Some((k, v)) = l.split_once('=') {
            config
                .set(k, v, "")
                .map_err(|e| bad(format!("config line `{l}`: {e}")))?;
        } else {
            return Err(bad(format!("unrecognized line `{l}`")));
        }
    }

    let mut tensors = Vec::with_capacity(entries.len());
    for (name, len) in entries {
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)
            .map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, read_tensor_from(&mut buf.as_slice())?));
    }

    // Build a skeleton of the right architecture, then overwrite every
    // parameter; names and shapes must line up one-to-one.
    let mut model = FamlpModel::new(config, 0)?;
    let expected = model.parameter_names();
    if expected.len() != tensors.len() {
        return Err(bad(format!(
            "expected {} tensors for this configuration, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    let mut iter = tensors.into_iter();
    let mut result = Ok(());
    model.visit_parameters_mut(|name, slot| {
        let (got, t) = iter.next().expect("counts checked above");
        if result.is_err() {
            return;
        }
        if got != name {
            result = Err(bad(format!("expected tensor `{name}`, found `{got}`")));
        } else if t.shape() != slot.shape() {
            result = Err(Error::shape("checkpoint", slot.shape(), t.shape()));
        } else {
            *slot = t;
        }
    });
    result.map(|_| model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FamlpModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint_from(&mut BufReader::new(file))
}

impl FamlpModel {
    pub fn parameter_names(&self) -> Vec<String> {
        self.named_parameters().into_iter().map(|(n, _)| n).collect()
    }

    /// Sets layer `layer`'s frequency filter.
    pub fn set_filter(&mut self, layer: usize, filter: ComplexTensor) -> Result<()> {
        let size = self.blocks.len();
        let block = self.blocks.get_mut(layer).ok_or(Error::Index {
            op: "set_filter",
            index: layer,
            size,
        })?;
        let aff = block
            .aff
            .as_mut()
            .ok_or_else(|| Error::Parameter("the Fourier filter is disabled".into()))?;
        if filter.shape() != aff.w_filter.shape() {
            return Err(Error::shape("set_filter", aff.w_filter.shape(), filter.shape()));
        }
        aff.w_filter = filter;
        Ok(())
    }

    /// Copies every parameter value from `other`, which must share the
    /// architecture.
    pub fn copy_from(&mut self, other: &FamlpModel) -> Result<()> {
        let src: Vec<Tensor> = other.named_parameters().into_iter().map(|(_, t)| t.clone()).collect();
        if src.len() != self.named_parameters().len() {
            return Err(Error::Congruence("parameter counts differ".into()));
        }
        let mut iter = src.into_iter();
        let mut result = Ok(());
        self.visit_parameters_mut(|name, slot| {
            let t = iter.next().expect("counts checked above");
            if result.is_ok() && t.shape() != slot.shape() {
                result = Err(Error::Congruence(format!("shape of `{name}` differs")));
            } else {
                slot.data_mut().copy_from_slice(t.data());
            }
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let model = FamlpModel::new(ModelConfig::default(), 5).unwrap();
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &model).unwrap();
        let back = read_checkpoint_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn rejects_truncated_payload() {
        let model = FamlpModel::new(ModelConfig::default(), 5).unwrap();
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &model).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_checkpoint_from(&mut buf.as_slice()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn manifest_names_follow_fields() {
        let model = FamlpModel::new(ModelConfig::default(), 5).unwrap();
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &model).unwrap();
        let text = String::from_utf8_lossy(&buf);
        assert!(text.starts_with("FAMLP-CHECKPOINT 1\nimage_size=32\n"));
        assert!(text.contains("tensor layers.3.aff.w_filter.re "));
    }
}
