//! Checkpoint files.
//!
//! One line of JSON (format tag, config, step, best validation perplexity,
//! optional vocabulary, and a manifest of `{name, shape, offset}` in
//! declaration order), a newline, then every parameter as little-endian
//! `f32`, row-major, concatenated in manifest order. Offsets count elements.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::{manifest, TreeCoderModel, TreeConfig};
use crate::params::ParamSet;
use crate::tokenizer::Vocab;

const FORMAT: &str = "treecoder-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub config: TreeConfig,
    pub step: usize,
    pub best_val_ppl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<serde_json::Value>,
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TreeCoderModel<f32>,
    pub step: usize,
    pub best_val_ppl: Option<f64>,
    pub vocab: Option<Vocab>,
}

/// Serializes a model; values are stored as `f32` whatever `T` is.
pub fn to_bytes<T: Scalar>(
    model: &TreeCoderModel<T>,
    step: usize,
    best_val_ppl: Option<f64>,
    vocab: Option<&Vocab>,
) -> Result<Vec<u8>> {
    let mut offset = 0;
    let manifest = model
        .params
        .iter()
        .map(|p| {
            let e = ManifestEntry { name: p.name.clone(), shape: p.value.shape.clone(), offset };
            offset += p.value.len();
            e
        })
        .collect();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        step,
        best_val_ppl: best_val_ppl.filter(|p| p.is_finite()),
        vocab: vocab.map(Vocab::to_value),
        manifest,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(offset * 4);
    for p in model.params.iter() {
        for v in &p.value.data {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Format(format!("unsupported format {} v{}", header.format, header.version)));
    }
    header.config.validate()?;
    let payload = &bytes[split + 1..];
    let specs = manifest(&header.config);
    if specs.len() != header.manifest.len() {
        return Err(Error::Format(format!(
            "manifest lists {} parameters, config implies {}",
            header.manifest.len(),
            specs.len()
        )));
    }
    let mut params = ParamSet::new();
    let mut offset = 0;
    for (spec, entry) in specs.into_iter().zip(&header.manifest) {
        if spec.name != entry.name || spec.shape != entry.shape || entry.offset != offset {
            return Err(Error::Format(format!("manifest entry {} does not match the config", entry.name)));
        }
        let n = spec.numel();
        let raw = payload
            .get(offset * 4..(offset + n) * 4)
            .ok_or_else(|| Error::Format(format!("payload ends inside {}", spec.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.push(spec.name, Tensor { shape: spec.shape, data }, spec.decay);
        offset += n;
    }
    if payload.len() != offset * 4 {
        return Err(Error::Format(format!("{} trailing payload bytes", payload.len() - offset * 4)));
    }
    let vocab = header.vocab.map(Vocab::from_value).transpose()?;
    Ok(Checkpoint {
        model: TreeCoderModel::from_params(header.config, params)?,
        step: header.step,
        best_val_ppl: header.best_val_ppl,
        vocab,
    })
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save<T: Scalar>(
    path: &Path,
    model: &TreeCoderModel<T>,
    step: usize,
    best_val_ppl: Option<f64>,
    vocab: Option<&Vocab>,
) -> Result<()> {
    let bytes = to_bytes(model, step, best_val_ppl, vocab)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Input(format!("cannot read checkpoint {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RoutingMode;
    use crate::nn::NORM_EPS;
    use crate::tokenizer::train_bpe;

    fn config() -> TreeConfig {
        TreeConfig {
            k: 2,
            h: 1,
            dec: 1,
            d_model: 8,
            n_heads: 2,
            ffn_hidden: 16,
            context_len: 4,
            vocab_size: 270,
            selector_hidden_mult: 2,
            dropout: 0.1,
            routing: RoutingMode::Random,
            norm_eps: NORM_EPS,
        }
    }

    #[test]
    fn round_trip_is_exact_for_f32() {
        let m = TreeCoderModel::<f32>::build(config(), 3).unwrap();
        let vocab = train_bpe(b"abcabcabc abc", 270, false).unwrap();
        let bytes = to_bytes(&m, 17, Some(12.5), Some(&vocab)).unwrap();
        let c = from_bytes(&bytes).unwrap();
        assert_eq!(c.model, m);
        assert_eq!((c.step, c.best_val_ppl), (17, Some(12.5)));
        assert_eq!(c.vocab, Some(vocab));
    }

    #[test]
    fn layout_is_header_then_little_endian_floats() {
        let m = TreeCoderModel::<f32>::build(config(), 3).unwrap();
        let bytes = to_bytes(&m, 0, None, None).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["manifest"][0]["name"], "embed.token");
        assert_eq!(header["manifest"][1]["offset"], 270 * 8);
        assert_eq!(bytes.len() - nl - 1, 4 * m.params.element_count());
        let first = f32::from_le_bytes(bytes[nl + 1..nl + 5].try_into().unwrap());
        assert_eq!(first, m.params.iter().next().unwrap().value.data[0]);
    }

    #[test]
    fn corruption_is_detected() {
        let m = TreeCoderModel::<f32>::build(config(), 3).unwrap();
        let bytes = to_bytes(&m, 0, None, None).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Format(_))));
        assert!(matches!(from_bytes(b"{}"), Err(Error::Format(_))));
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).to_string();
        let renamed = text.replace("\"final_norm\"", "\"final_nrm\"");
        let mut tampered = renamed.into_bytes();
        tampered.extend_from_slice(&bytes[tampered.len()..]);
        assert!(from_bytes(&tampered).is_err());
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = TreeCoderModel::<f64>::build(config(), 5).unwrap();
        save(&path, &m, 3, None, None).unwrap();
        let c = load(&path).unwrap();
        assert_eq!(c.model, m.cast::<f32>());
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Input(_))));
    }
}
