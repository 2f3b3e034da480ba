//! Self-describing weight checkpoints.
//!
//! A checkpoint is a directory holding `config.toml` (the model
//! configuration), `manifest.txt` (one `path kind dims` line per array, in
//! storage order) and `weights.bin` (the arrays, concatenated in the array
//! container format).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_bytes, write_bytes, RawArray};
use crate::error::{invalid, Error, Result};
use crate::model::{UNetmer, UNetmerConfig};
use crate::nn::ParamKind;
use crate::scalar::Scalar;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    format: u32,
    model: UNetmerConfig,
}

fn kind_name(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Trainable => "trainable",
        ParamKind::Buffer => "buffer",
    }
}

fn dims(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint<T: Scalar>(model: &UNetmer<T>, dir: &Path) -> Result<()> {
    let meta = Meta { format: 1, model: model.config().clone() };
    let config = toml::to_string(&meta).map_err(|e| invalid!("cannot serialize config: {e}"))?;
    let store = model.params();
    let mut manifest = String::new();
    let mut weights = Vec::new();
    for id in store.ids() {
        let t = store.get(id);
        let _ = writeln!(manifest, "{} {} {}", store.path(id), kind_name(store.kind(id)), dims(t.shape()));
        RawArray::from_tensor(t).encode_into(&mut weights);
    }
    write_bytes(&dir.join(CONFIG_FILE), config.as_bytes())?;
    write_bytes(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    write_bytes(&dir.join(WEIGHTS_FILE), &weights)
}

pub fn load_config(dir: &Path) -> Result<UNetmerConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = String::from_utf8(read_bytes(&path)?).map_err(|_| invalid!("{} is not UTF-8", path.display()))?;
    let meta: Meta = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
        message: e.message().to_string(),
    })?;
    if meta.format != 1 {
        return Err(invalid!("unsupported checkpoint format {}", meta.format));
    }
    Ok(meta.model)
}

/// Rebuilds the model described by the checkpoint and loads its weights,
/// converting to `T` if stored at another precision.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<UNetmer<T>> {
    let config = load_config(dir)?;
    let mut model = UNetmer::<T>::new(config, 0)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = String::from_utf8(read_bytes(&manifest_path)?)
        .map_err(|_| invalid!("{} is not UTF-8", manifest_path.display()))?;
    let arrays = RawArray::decode_all(&read_bytes(&dir.join(WEIGHTS_FILE))?)
        .map_err(|e| invalid!("{}: {e}", dir.join(WEIGHTS_FILE).display()))?;
    let lines: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut store = model.params().clone();
    if lines.len() != store.len() || arrays.len() != store.len() {
        return Err(invalid!(
            "checkpoint holds {} manifest lines and {} arrays, model needs {}",
            lines.len(),
            arrays.len(),
            store.len()
        ));
    }
    let ids: Vec<_> = store.ids().collect();
    for ((id, line), array) in ids.into_iter().zip(lines).zip(arrays) {
        let mut parts = line.split_whitespace();
        let (Some(path), Some(kind)) = (parts.next(), parts.next()) else {
            return Err(invalid!("malformed manifest line {line:?}"));
        };
        if path != store.path(id) || kind != kind_name(store.kind(id)) {
            return Err(invalid!("checkpoint entry {path} ({kind}) does not match model parameter {}", store.path(id)));
        }
        let value = array.to_tensor::<T>()?;
        store.set(id, value)?;
    }
    model.load_params(store)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::bottleneck::TransformerConfig;
    use crate::patchify::Scale;

    fn tiny() -> UNetmerConfig {
        UNetmerConfig {
            backbone: BackboneConfig { base_channels: 2, n_pool: 2, ..Default::default() },
            transformer: TransformerConfig { num_layers: 1, num_heads: 2, mlp_ratio: 2.0 },
            scales: vec![Scale::new(1).unwrap(), Scale::new(2).unwrap()],
            input_size: (16, 16),
            use_transformer: true,
        }
    }

    #[test]
    fn round_trip_preserves_every_array() {
        let dir = tempfile::tempdir().unwrap();
        let model = UNetmer::<f32>::new(tiny(), 7).unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        let back = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(back.config(), model.config());
        for id in model.params().ids() {
            assert_eq!(back.params().get(id), model.params().get(id));
        }
        let wide = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(wide.parameter_count(), model.parameter_count());
    }

    #[test]
    fn rejects_tampered_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let model = UNetmer::<f32>::new(tiny(), 7).unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap().replacen("encoder", "decoder", 1);
        std::fs::write(&path, text).unwrap();
        assert!(load_checkpoint::<f32>(dir.path()).is_err());
    }
}
