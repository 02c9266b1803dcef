//! The recommender network and frozen-parameter inference.

mod config;
mod geo;
mod network;

use std::collections::HashMap;

use crate::data::CheckIn;
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamStore, Tensor};

pub use config::ModelConfig;
pub(crate) use config::parse_value;
pub use geo::{GeoEncoder, GeoTokens};
pub use network::{Query, SequenceInput, Tpg};

/// Hour-of-week buckets.
pub const NUM_SLOTS: usize = 168;
const SECONDS_PER_DAY: i64 = 86_400;

/// `weekday · 24 + hour` in UTC with Monday = 0.
pub fn time_slot(t: i64) -> usize {
    let days = t.div_euclid(SECONDS_PER_DAY);
    let hour = t.rem_euclid(SECONDS_PER_DAY) / 3600;
    // 1970-01-01 was a Thursday.
    ((days + 3).rem_euclid(7) * 24 + hour) as usize
}

/// POIs scored per graph when tabulating candidate embeddings.
const TABLE_CHUNK: usize = 256;

/// Inference with frozen parameters. Candidate embeddings for the whole
/// registry are computed once.
pub struct Predictor<'a> {
    model: &'a Tpg,
    store: &'a ParamStore,
    table: Tensor,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a Tpg, store: &'a ParamStore) -> Result<Self> {
        let n = model.num_pois();
        let d = model.cfg.model_dim;
        let mut data = Vec::with_capacity(n * d);
        let ids: Vec<usize> = (0..n).collect();
        for chunk in ids.chunks(TABLE_CHUNK) {
            let mut g = Graph::new(store, false);
            let rows = model.poi_rows(&mut g, chunk)?;
            data.extend_from_slice(g.value(rows).data());
        }
        Ok(Predictor {
            model,
            store,
            table: Tensor::matrix(n, d, data)?,
        })
    }

    pub fn model(&self) -> &Tpg {
        self.model
    }

    /// Candidate embedding of every POI, one row each.
    pub fn candidate_table(&self) -> &Tensor {
        &self.table
    }

    /// Decoder outputs for `prompts` given the full `history`, one row per
    /// prompt.
    pub fn outputs(&self, user: usize, history: &[CheckIn], prompts: &[i64]) -> Result<Tensor> {
        if prompts.is_empty() {
            return Err(Error::invalid("no prompt timestamps given"));
        }
        for c in history {
            self.model.check_poi(c.poi)?;
        }
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut rows = Vec::new();
        for c in history {
            let next = local.len();
            local.entry(c.poi).or_insert_with(|| {
                rows.extend_from_slice(self.table.row_slice(c.poi));
                next
            });
        }
        let d = self.table.cols();
        let mut g = Graph::new(self.store, false);
        let poi_rows = g.input(Tensor::matrix(rows.len() / d.max(1), d, rows)?);
        let row_of = |p: usize| Ok(local[&p]);
        let seq = SequenceInput {
            user,
            checkins: history,
            queries: prompts.iter().map(|&time| Query { visible: history.len(), time }).collect(),
        };
        // Dropout is inactive outside training, so the rng is never drawn.
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.model.forward(&mut g, poi_rows, &row_of, &[seq], &mut rng)?;
        Ok(g.value(out).clone())
    }

    /// Inner products of one decoder output row with each candidate.
    pub fn scores(&self, output: &[f64], candidates: &[usize]) -> Result<Vec<f64>> {
        candidates
            .iter()
            .map(|&c| {
                self.model.check_poi(c)?;
                Ok(crate::numcore::dot(output, self.table.row_slice(c)))
            })
            .collect()
    }

    /// Top `k` POIs by score for each prompt, descending, ties by id.
    pub fn top_k(&self, user: usize, history: &[CheckIn], prompts: &[i64], k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
        let out = self.outputs(user, history, prompts)?;
        let all: Vec<usize> = (0..self.model.num_pois()).collect();
        (0..prompts.len())
            .map(|i| {
                let scores = self.scores(out.row_slice(i), &all)?;
                let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                ranked.truncate(k);
                Ok(ranked)
            })
            .collect()
    }
}
