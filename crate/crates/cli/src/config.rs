//! Experiment configuration: one flat JSON object holding the model fields,
//! the training fields and the paths.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{Map, Value};
use treecoder::nn::default_ffn_hidden;
use treecoder::train::TrainConfig;
use treecoder::TreeConfig;

const PATH_KEYS: [&str; 6] = ["name", "out_dir", "vocab", "train_data", "valid_data", "test_data"];

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub vocab: PathBuf,
    pub train_data: Vec<PathBuf>,
    pub valid_data: Vec<PathBuf>,
    pub test_data: Vec<PathBuf>,
    pub model: TreeConfig,
    pub train: TrainConfig,
    /// Whether `vocab_size` was given; otherwise it is taken from the vocabulary.
    pub vocab_size_given: bool,
}

fn field_names<T: serde::Serialize>(value: &T) -> Vec<String> {
    match serde_json::to_value(value) {
        Ok(Value::Object(map)) => map.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Overlays `given` on the serialized defaults and deserializes.
fn overlay<T: serde::Serialize + serde::de::DeserializeOwned>(defaults: &T, given: Map<String, Value>) -> Result<T> {
    let Value::Object(mut base) = serde_json::to_value(defaults)? else { unreachable!("configs are objects") };
    base.extend(given);
    Ok(serde_json::from_value(Value::Object(base))?)
}

fn paths(map: &mut Map<String, Value>, key: &str, base: &Path, required: bool) -> Result<Vec<PathBuf>> {
    let list = match map.remove(key) {
        None if required => bail!("config is missing required key {key:?}"),
        None => return Ok(Vec::new()),
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => bail!("{key} entries must be strings, got {other}"),
            })
            .collect::<Result<_>>()?,
        Some(other) => bail!("{key} must be a path or a list of paths, got {other}"),
    };
    if required && list.is_empty() {
        bail!("{key} must name at least one file");
    }
    Ok(list.into_iter().map(|p| base.join(p)).collect())
}

impl ExperimentConfig {
    /// Parses a config; relative paths are resolved against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        let Value::Object(mut map) = value else { bail!("config must be a JSON object") };

        let tree_keys = field_names(&TreeConfig::default());
        let train_keys = field_names(&TrainConfig::default());
        let mut unknown: Vec<&str> = map
            .keys()
            .map(String::as_str)
            .filter(|k| !PATH_KEYS.contains(k) && !tree_keys.iter().any(|t| t == k) && !train_keys.iter().any(|t| t == k))
            .collect();
        if !unknown.is_empty() {
            unknown.sort_unstable();
            bail!("unknown config keys: {}", unknown.join(", "));
        }

        let name = match map.remove("name") {
            None => "experiment".to_string(),
            Some(Value::String(s)) => s,
            Some(other) => bail!("name must be a string, got {other}"),
        };
        let out_dir = paths(&mut map, "out_dir", base, true)?.remove(0);
        let vocab = paths(&mut map, "vocab", base, true)?.remove(0);
        let train_data = paths(&mut map, "train_data", base, true)?;
        let valid_data = paths(&mut map, "valid_data", base, true)?;
        let test_data = paths(&mut map, "test_data", base, false)?;

        let (tree, rest): (Map<String, Value>, Map<String, Value>) =
            map.into_iter().partition(|(k, _)| tree_keys.iter().any(|t| t == k));
        let vocab_size_given = tree.contains_key("vocab_size");
        let mut defaults = TreeConfig::default();
        if let Some(d) = tree.get("d_model").and_then(Value::as_u64) {
            let d = d as usize;
            defaults.ffn_hidden = default_ffn_hidden(d);
            defaults.n_heads = (d / 64).max(1);
        }
        let model = overlay(&defaults, tree).context("invalid model settings")?;
        let train = overlay(&TrainConfig::default(), rest).context("invalid training settings")?;
        Ok(Self { name, out_dir, vocab, train_data, valid_data, test_data, model, train, vocab_size_given })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Every input file must exist before anything is written.
    pub fn check_inputs(&self) -> Result<()> {
        for p in std::iter::once(&self.vocab).chain(&self.train_data).chain(&self.valid_data).chain(&self.test_data) {
            if !p.is_file() {
                bail!("input file {} does not exist", p.display());
            }
        }
        Ok(())
    }
}
