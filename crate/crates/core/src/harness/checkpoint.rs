//! Checkpoints: a flat little-endian `f64` file plus a text manifest with
//! one `name shape offset` line per tensor.

use std::fs;
use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::nn::Params;
use crate::toy_model::{ModelConfig, ModelShape, ToyModel};

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("manifest"))
}

/// Writes `<stem>.bin` and `<stem>.manifest`.
pub fn save_checkpoint(model: &ToyModel, shape: ModelShape, stem: &Path) -> Result<(), HarnessError> {
    let (bin, manifest) = paths(stem);
    if let Some(dir) = bin.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    }
    let mut text = format!(
        "# config {}\n# shape {}\n",
        serde_json::to_string(&model.config).expect("config serializes"),
        serde_json::to_string(&shape).expect("shape serializes")
    );
    let mut offset = 0;
    model.visit(&mut |name, dims, values| {
        let dims: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        text += &format!("{name} {} {offset}\n", dims.join("x"));
        offset += values.len();
    });
    let bytes: Vec<u8> = model.flatten().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(|e| HarnessError::Io(format!("{}: {e}", bin.display())))?;
    fs::write(&manifest, text).map_err(|e| HarnessError::Io(format!("{}: {e}", manifest.display())))
}

pub fn load_checkpoint(stem: &Path) -> Result<(ToyModel, ModelShape), HarnessError> {
    let (bin, manifest) = paths(stem);
    let text = fs::read_to_string(&manifest).map_err(|e| HarnessError::Io(format!("{}: {e}", manifest.display())))?;
    let bad = |m: &str| HarnessError::Config(format!("{}: {m}", manifest.display()));
    let header = |key: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("# {key} ")))
            .ok_or_else(|| bad(&format!("missing {key} header")))
    };
    let config: ModelConfig = serde_json::from_str(header("config")?).map_err(|e| bad(&e.to_string()))?;
    let shape: ModelShape = serde_json::from_str(header("shape")?).map_err(|e| bad(&e.to_string()))?;
    let mut model = ToyModel::zeros(shape, config);

    let mut expected = Vec::new();
    let mut offset = 0;
    model.visit(&mut |name, dims, values| {
        let dims: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        expected.push(format!("{name} {} {offset}", dims.join("x")));
        offset += values.len();
    });
    let listed: Vec<&str> = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).collect();
    if listed != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(bad("tensor list does not match the model layout"));
    }
    let bytes = fs::read(&bin).map_err(|e| HarnessError::Io(format!("{}: {e}", bin.display())))?;
    if bytes.len() != offset * 8 {
        return Err(bad(&format!("{} bytes, expected {}", bytes.len(), offset * 8)));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    model.load_flat(&values);
    Ok((model, shape))
}
