//! Flat `key=value` settings files covering model and training fields.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Reads `key=value` pairs in file order. Blank lines and lines starting
/// with `#` are skipped.
pub fn read_settings(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Routes one setting to whichever configuration owns the key.
pub fn apply_setting(model: &mut ModelConfig, train: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    if model.set(key, value)? || train.set(key, value)? {
        Ok(())
    } else {
        Err(Error::invalid(format!("unknown setting {key:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# desk run\nlr = 0.01\n\ndropout=0.1\nepochs=3\n").unwrap();
        let (mut m, mut t) = (ModelConfig::default(), TrainConfig::default());
        for (k, v) in read_settings(&path).unwrap() {
            apply_setting(&mut m, &mut t, &k, &v).unwrap();
        }
        apply_setting(&mut m, &mut t, "epochs", "7").unwrap();
        assert_eq!((t.lr, t.epochs, m.dropout), (0.01, 7, 0.1));
        assert!(apply_setting(&mut m, &mut t, "colour", "red").is_err());
        assert!(apply_setting(&mut m, &mut t, "lr", "fast").is_err());
        std::fs::write(&path, "lr 0.1\n").unwrap();
        assert!(read_settings(&path).is_err());
    }
}
