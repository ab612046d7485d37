//! Model checkpoints inside a run directory.

use std::path::Path;

use anyhow::{Context, Result};
use loraloop::generator::{GeneratorConfig, GeneratorModel};
use loraloop::numcore::{checkpoint, ParamStore};
use loraloop::vlm::{DualEncoder, Tokenizer, VlmConfig};

fn store_from(entries: Vec<(String, loraloop::numcore::Tensor)>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, t) in entries {
        store.insert(name, t)?;
    }
    Ok(store)
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes `{stem}.llcp` and `{stem}.vocab.json`; returns the weights hash.
pub fn save_vlm(dir: &Path, stem: &str, model: &DualEncoder) -> Result<String> {
    checkpoint::save(&dir.join(format!("{stem}.llcp")), model.params().iter())?;
    let words: Vec<&str> = model.tokenizer().words_in_order().collect();
    write_json(&dir.join(format!("{stem}.vocab.json")), &words)?;
    Ok(checkpoint::hash(model.params().iter())?)
}

pub fn load_vlm(dir: &Path, stem: &str, config: VlmConfig, seed: u64) -> Result<DualEncoder> {
    let params = store_from(checkpoint::load(&dir.join(format!("{stem}.llcp")))?)?;
    let words: Vec<String> = read_json(&dir.join(format!("{stem}.vocab.json")))?;
    let tokenizer = Tokenizer::from_words(words.iter().map(String::as_str));
    Ok(DualEncoder::from_parts(config, params, tokenizer, seed)?)
}

/// Writes `{stem}.llcp` and `{stem}.classes.json`; returns the weights hash.
pub fn save_generator(dir: &Path, stem: &str, model: &GeneratorModel) -> Result<String> {
    checkpoint::save(&dir.join(format!("{stem}.llcp")), model.params().iter())?;
    write_json(&dir.join(format!("{stem}.classes.json")), &model.class_names().collect::<Vec<_>>())?;
    Ok(checkpoint::hash(model.params().iter())?)
}

pub fn load_generator(dir: &Path, stem: &str, config: GeneratorConfig) -> Result<GeneratorModel> {
    let params = store_from(checkpoint::load(&dir.join(format!("{stem}.llcp")))?)?;
    let classes: Vec<String> = read_json(&dir.join(format!("{stem}.classes.json")))?;
    Ok(GeneratorModel::from_parts(config, params, &classes)?)
}
