//! Check-in datasets: ingestion, filtering, train/eval splitting, negative
//! sampling and a synthetic periodic-mobility generator.

mod parse;
mod sampling;
mod split;
mod synthetic;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geocode::GeoPoint;

pub use parse::{format_timestamp, parse_checkins, parse_reader, parse_timestamp, Format};
pub use sampling::{sample_eval_negatives, sample_other_negatives, sample_train_negatives, EVAL_NEGATIVES, EVAL_POOL};
pub use split::{build_eval_instances, split_train_eval, EvalCase, EvalInstance, Split, MAX_SEQUENCE_LEN};
pub use synthetic::{generate_synthetic, SyntheticSpec};

/// One visit with dense user and POI ids; coordinates live in the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CheckIn {
    pub user: usize,
    /// Unix seconds, UTC.
    pub time: i64,
    pub poi: usize,
}

/// A parsed row before dense re-indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckIn {
    pub user: String,
    pub time: i64,
    pub point: GeoPoint,
    pub poi: String,
}

/// Check-ins grouped per user plus the POI registry.
///
/// Dense ids follow the sort order of the original ids (numeric when every
/// id parses as an integer), so dumping and re-parsing is lossless.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub user_ids: Vec<String>,
    pub poi_ids: Vec<String>,
    pub pois: Vec<GeoPoint>,
    /// `sequences[u]` is user `u`'s check-ins in time order.
    pub sequences: Vec<Vec<CheckIn>>,
    /// Rows skipped while parsing.
    pub malformed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    #[serde(rename = "#users")]
    pub users: usize,
    #[serde(rename = "#locations")]
    pub locations: usize,
    #[serde(rename = "#check-ins")]
    pub checkins: usize,
    pub malformed_rows: usize,
}

fn sorted_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut v: Vec<String> = ids.map(str::to_owned).collect();
    v.sort_unstable();
    v.dedup();
    if v.iter().all(|s| s.parse::<i64>().is_ok()) {
        v.sort_by_key(|s| s.parse::<i64>().expect("checked numeric"));
    }
    v
}

impl Dataset {
    /// Builds a dataset from raw rows. A POI takes the coordinates of its
    /// first row; per-user order is by time, stable for equal timestamps.
    pub fn from_raw(records: &[RawCheckIn], malformed: usize) -> Dataset {
        let user_ids = sorted_ids(records.iter().map(|r| r.user.as_str()));
        let poi_ids = sorted_ids(records.iter().map(|r| r.poi.as_str()));
        let user_index: HashMap<&str, usize> =
            user_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let poi_index: HashMap<&str, usize> =
            poi_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut pois: Vec<Option<GeoPoint>> = vec![None; poi_ids.len()];
        let mut sequences = vec![Vec::new(); user_ids.len()];
        for r in records {
            let user = user_index[r.user.as_str()];
            let poi = poi_index[r.poi.as_str()];
            pois[poi].get_or_insert(r.point);
            sequences[user].push(CheckIn {
                user,
                time: r.time,
                poi,
            });
        }
        for seq in &mut sequences {
            seq.sort_by_key(|c| c.time);
        }
        Dataset {
            user_ids,
            poi_ids,
            pois: pois.into_iter().map(|p| p.expect("every poi has a row")).collect(),
            sequences,
            malformed,
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_pois(&self) -> usize {
        self.poi_ids.len()
    }

    pub fn num_checkins(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            users: self.num_users(),
            locations: self.num_pois(),
            checkins: self.num_checkins(),
            malformed_rows: self.malformed,
        }
    }

    pub fn point(&self, poi: usize) -> GeoPoint {
        self.pois[poi]
    }

    /// Rows with original ids, users in dense order.
    pub fn to_raw(&self) -> Vec<RawCheckIn> {
        self.sequences
            .iter()
            .flatten()
            .map(|c| RawCheckIn {
                user: self.user_ids[c.user].clone(),
                time: c.time,
                point: self.pois[c.poi],
                poi: self.poi_ids[c.poi].clone(),
            })
            .collect()
    }

    /// Repeatedly drops users with fewer than `min_user_checkins` check-ins
    /// and POIs with fewer than `min_poi_visits` visits until both hold,
    /// then re-indexes densely.
    pub fn filter(&self, min_user_checkins: usize, min_poi_visits: usize) -> Dataset {
        let mut rows = self.to_raw();
        loop {
            let mut per_user: HashMap<&str, usize> = HashMap::new();
            let mut per_poi: HashMap<&str, usize> = HashMap::new();
            for r in &rows {
                *per_user.entry(&r.user).or_default() += 1;
                *per_poi.entry(&r.poi).or_default() += 1;
            }
            let keep: Vec<bool> = rows
                .iter()
                .map(|r| per_user[r.user.as_str()] >= min_user_checkins && per_poi[r.poi.as_str()] >= min_poi_visits)
                .collect();
            if keep.iter().all(|&k| k) {
                break;
            }
            let mut it = keep.into_iter();
            rows.retain(|_| it.next().expect("one flag per row"));
        }
        Dataset::from_raw(&rows, self.malformed)
    }

    /// Maps this dataset onto an existing vocabulary. Unknown ids are
    /// vocabulary errors.
    pub fn reindex(&self, user_ids: &[String], poi_ids: &[String], pois: &[GeoPoint]) -> Result<Dataset> {
        let users: HashMap<&str, usize> = user_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let places: HashMap<&str, usize> = poi_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut sequences = vec![Vec::new(); user_ids.len()];
        for (u, seq) in self.sequences.iter().enumerate() {
            let name = &self.user_ids[u];
            let user = *users.get(name.as_str()).ok_or_else(|| Error::Vocabulary {
                kind: "user",
                id: name.clone(),
            })?;
            for c in seq {
                let pname = &self.poi_ids[c.poi];
                let poi = *places.get(pname.as_str()).ok_or_else(|| Error::Vocabulary {
                    kind: "POI",
                    id: pname.clone(),
                })?;
                sequences[user].push(CheckIn { user, time: c.time, poi });
            }
        }
        Ok(Dataset {
            user_ids: user_ids.to_vec(),
            poi_ids: poi_ids.to_vec(),
            pois: pois.to_vec(),
            sequences,
            malformed: self.malformed,
        })
    }

    /// Writes the canonical dump: gowalla_tsv rows with dense ids, users in
    /// order, each user's rows in time order. Parsing the dump reproduces
    /// the same ids.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for c in self.sequences.iter().flatten() {
            let p = self.pois[c.poi];
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                c.user,
                format_timestamp(c.time),
                p.lat,
                p.lon,
                c.poi
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_stats(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.stats()).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    /// Distinct POIs per user, as a sorted map for deterministic iteration.
    pub fn visit_counts(&self, user: usize) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for c in &self.sequences[user] {
            *m.entry(c.poi).or_default() += 1;
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(user: &str, time: i64, poi: &str) -> RawCheckIn {
        RawCheckIn {
            user: user.into(),
            time,
            point: GeoPoint::new(1.0, 2.0).unwrap(),
            poi: poi.into(),
        }
    }

    #[test]
    fn numeric_ids_sort_numerically() {
        let ds = Dataset::from_raw(&[raw("10", 5, "b"), raw("9", 1, "a"), raw("10", 2, "a")], 0);
        assert_eq!(ds.user_ids, ["9", "10"]);
        assert_eq!(ds.poi_ids, ["a", "b"]);
        assert_eq!(ds.sequences[1].iter().map(|c| c.time).collect::<Vec<_>>(), [2, 5]);
    }

    #[test]
    fn filter_reaches_fixpoint() {
        let rows = vec![
            raw("x", 1, "p"),
            raw("y", 1, "q"),
            raw("y", 2, "q"),
            raw("y", 3, "p"),
            raw("z", 1, "p"),
            raw("z", 2, "p"),
            raw("z", 3, "p"),
        ];
        let ds = Dataset::from_raw(&rows, 0).filter(3, 2);
        assert_eq!(ds.user_ids, ["y", "z"]);
        // Dropping POI "q" leaves user "y" with one check-in.
        let ds = Dataset::from_raw(&rows, 0).filter(3, 3);
        assert_eq!(ds.user_ids, ["z"]);
        assert_eq!(ds.num_checkins(), 3);
    }
}
