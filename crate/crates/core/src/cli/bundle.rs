//! Checkpoint directory: parameters plus everything needed to rebuild the
//! model and map external ids.
//!
//! ```text
//! model.cfg     key=value model configuration
//! users.tsv     original user id per dense id
//! pois.tsv      original POI id, latitude, longitude per dense id
//! manifest.txt  parameter manifest
//! params.bin    parameter payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geocode::GeoPoint;
use crate::model::{ModelConfig, Tpg};
use crate::numcore::checkpoint::{load_checkpoint, write_checkpoint};
use crate::numcore::ParamStore;

pub const MODEL_CFG: &str = "model.cfg";
pub const USERS: &str = "users.tsv";
pub const POIS: &str = "pois.tsv";
pub const MANIFEST: &str = "manifest.txt";
pub const PARAMS: &str = "params.bin";

/// Vocabulary and configuration saved alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub cfg: ModelConfig,
    pub user_ids: Vec<String>,
    pub poi_ids: Vec<String>,
    pub pois: Vec<GeoPoint>,
}

/// Writes a temporary sibling of `path` and renames it into place, so a
/// crash never leaves a half-written file under the final name.
fn replace_file(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("partial");
    write(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn malformed(file: &str, line: usize) -> Error {
    Error::Checkpoint(format!("{file} line {line} is malformed"))
}

impl Bundle {
    pub fn from_dataset(cfg: &ModelConfig, ds: &Dataset) -> Self {
        Bundle {
            cfg: cfg.clone(),
            user_ids: ds.user_ids.clone(),
            poi_ids: ds.poi_ids.clone(),
            pois: ds.pois.clone(),
        }
    }

    pub fn build_model(&self, seed: u64) -> Result<(Tpg, ParamStore)> {
        Tpg::new(&self.cfg, &self.pois, self.user_ids.len(), seed)
    }

    pub fn save(&self, dir: &Path, store: &ParamStore) -> Result<()> {
        fs::create_dir_all(dir)?;
        replace_file(&dir.join(MODEL_CFG), |p| Ok(fs::write(p, self.cfg.to_key_values())?))?;
        replace_file(&dir.join(USERS), |p| {
            let mut f = std::io::BufWriter::new(fs::File::create(p)?);
            for u in &self.user_ids {
                writeln!(f, "{u}")?;
            }
            Ok(f.flush()?)
        })?;
        replace_file(&dir.join(POIS), |p| {
            let mut f = std::io::BufWriter::new(fs::File::create(p)?);
            for (id, pt) in self.poi_ids.iter().zip(&self.pois) {
                writeln!(f, "{id}\t{}\t{}", pt.lat, pt.lon)?;
            }
            Ok(f.flush()?)
        })?;
        let (manifest, params) = (dir.join(MANIFEST), dir.join(PARAMS));
        let (tmp_manifest, tmp_params) = (manifest.with_extension("partial"), params.with_extension("partial"));
        write_checkpoint(store, &tmp_manifest, &tmp_params)?;
        fs::rename(tmp_params, params)?;
        fs::rename(tmp_manifest, manifest)?;
        Ok(())
    }

    fn read(dir: &Path, name: &str) -> Result<String> {
        fs::read_to_string(dir.join(name))
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", dir.join(name).display())))
    }

    /// Loads the bundle and its parameters; the model is rebuilt from the
    /// saved configuration and must match the saved tensors exactly.
    pub fn load(dir: &Path) -> Result<(Bundle, Tpg, ParamStore)> {
        let mut cfg = ModelConfig::default();
        for (i, line) in Self::read(dir, MODEL_CFG)?.lines().enumerate() {
            let (k, v) = line.split_once('=').ok_or_else(|| malformed(MODEL_CFG, i + 1))?;
            if !cfg.set(k, v).map_err(|e| Error::Checkpoint(e.to_string()))? {
                return Err(Error::Checkpoint(format!("unknown model key {k:?}")));
            }
        }
        let user_ids: Vec<String> = Self::read(dir, USERS)?.lines().map(str::to_string).collect();
        let mut poi_ids = Vec::new();
        let mut pois = Vec::new();
        for (i, line) in Self::read(dir, POIS)?.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let [id, lat, lon] = f[..] else {
                return Err(malformed(POIS, i + 1));
            };
            let lat = lat.parse().map_err(|_| malformed(POIS, i + 1))?;
            let lon = lon.parse().map_err(|_| malformed(POIS, i + 1))?;
            poi_ids.push(id.to_string());
            pois.push(GeoPoint::new(lat, lon).map_err(|_| malformed(POIS, i + 1))?);
        }
        let bundle = Bundle { cfg, user_ids, poi_ids, pois };
        let (model, mut store) = bundle
            .build_model(0)
            .map_err(|e| Error::Checkpoint(format!("saved configuration is unusable: {e}")))?;
        load_checkpoint(&mut store, &dir.join(MANIFEST), &dir.join(PARAMS))?;
        Ok((bundle, model, store))
    }

    /// Re-expresses `ds` in this bundle's dense ids.
    pub fn reindex(&self, ds: &Dataset) -> Result<Dataset> {
        ds.reindex(&self.user_ids, &self.poi_ids, &self.pois)
    }
}
