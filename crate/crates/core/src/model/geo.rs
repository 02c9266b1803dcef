use std::collections::HashMap;
use std::ops::Range;

use rand::Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geocode::{ngram_tokenize, quadkey_of, shifted_window_quadkeys, GeoPoint, Quadkey};
use crate::numcore::{uniform, FeedForward, Graph, Mask, MultiHeadAttention, NodeId, ParamId, ParamStore};

/// Gram ids per distinct quadkey and the window mixture of every POI.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoTokens {
    grams: Vec<Vec<usize>>,
    /// Per POI: distinct window quadkeys with weight `multiplicity / windows`.
    windows: Vec<Vec<(usize, f64)>>,
}

impl GeoTokens {
    pub fn new(points: &[GeoPoint], cfg: &ModelConfig) -> Result<Self> {
        let mut index: HashMap<Quadkey, usize> = HashMap::new();
        let mut grams = Vec::new();
        let mut windows = Vec::with_capacity(points.len());
        for &p in points {
            let keys = if cfg.use_shifted_window {
                shifted_window_quadkeys(p, cfg.level, cfg.window_step)?
            } else {
                vec![quadkey_of(p, cfg.level)?]
            };
            let n = keys.len() as f64;
            let mut counts: Vec<(usize, usize)> = Vec::new();
            for q in keys {
                let id = match index.get(&q) {
                    Some(&id) => id,
                    None => {
                        let ids = ngram_tokenize(&q, cfg.ngram)?.ids.iter().map(|&i| i as usize).collect();
                        grams.push(ids);
                        index.insert(q, grams.len() - 1);
                        grams.len() - 1
                    }
                };
                match counts.iter_mut().find(|(k, _)| *k == id) {
                    Some(entry) => entry.1 += 1,
                    None => counts.push((id, 1)),
                }
            }
            let mix: Vec<(usize, f64)> = counts.into_iter().map(|(id, c)| (id, c as f64 / n)).collect();
            windows.push(mix);
        }
        Ok(GeoTokens { grams, windows })
    }

    pub fn num_pois(&self) -> usize {
        self.windows.len()
    }

    /// Distinct quadkeys used by POI `poi`.
    pub fn window_count(&self, poi: usize) -> usize {
        self.windows[poi].len()
    }
}

/// Gram embeddings refined by self-attention blocks within each quadkey,
/// mean-pooled over grams, then mixed over the POI's windows.
#[derive(Debug, Clone)]
pub struct GeoEncoder {
    pub gram_table: ParamId,
    pub layers: Vec<(MultiHeadAttention, FeedForward)>,
}

impl GeoEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let vocab = 4usize.pow(cfg.ngram as u32);
        let gram_table = store.add("geo.gram_embedding", uniform(&[vocab, cfg.geo_dim], cfg.init_scale, rng))?;
        let mut layers = Vec::with_capacity(cfg.geo_layers);
        for l in 0..cfg.geo_layers {
            let prefix = format!("geo.layer{l}");
            let attn = MultiHeadAttention::new(store, &format!("{prefix}.attn"), cfg.geo_dim, cfg.heads, cfg.scaled_attention, rng)?;
            let ffn = FeedForward::new(store, &format!("{prefix}.ffn"), cfg.geo_dim, 4 * cfg.geo_dim, rng)?;
            layers.push((attn, ffn));
        }
        Ok(GeoEncoder { gram_table, layers })
    }

    /// One `geo_dim` row per entry of `pois`.
    pub fn encode(&self, g: &mut Graph, tokens: &GeoTokens, pois: &[usize]) -> Result<NodeId> {
        if pois.is_empty() {
            return Err(Error::invalid("no POIs to encode"));
        }
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut order = Vec::new();
        let mut terms = Vec::with_capacity(pois.len());
        for &p in pois {
            let row = tokens.windows[p]
                .iter()
                .map(|&(q, w)| {
                    let l = *local.entry(q).or_insert_with(|| {
                        order.push(q);
                        order.len() - 1
                    });
                    (l, w)
                })
                .collect();
            terms.push(row);
        }
        let width = tokens.grams[order[0]].len();
        let ids: Vec<usize> = order.iter().flat_map(|&q| tokens.grams[q].iter().copied()).collect();
        let mut x = g.embed(self.gram_table, &ids)?;
        for (attn, ffn) in &self.layers {
            x = attn.forward_self(g, x, Mask::blocks(order.len(), width))?;
            let f = ffn.forward(g, x)?;
            x = g.add(x, f)?;
        }
        let segments: Vec<Range<usize>> = (0..order.len()).map(|q| q * width..(q + 1) * width).collect();
        let quads = g.segment_mean(x, segments)?;
        g.weighted_rows(quads, terms)
    }
}
