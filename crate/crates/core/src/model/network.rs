use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::geo::{GeoEncoder, GeoTokens};
use super::{time_slot, NUM_SLOTS};
use crate::data::CheckIn;
use crate::error::{Error, Result};
use crate::geocode::GeoPoint;
use crate::numcore::{
    uniform, xavier, FeedForward, Graph, LayerNorm, Mask, MultiHeadAttention, NodeId, ParamId, ParamStore,
};

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

#[derive(Debug, Clone)]
enum GeoHalf {
    Encoder(GeoEncoder),
    /// One learned row shared by every POI.
    Constant(ParamId),
}

/// A prediction request against one sequence: attend to the first
/// `visible` check-ins and predict the visit at `time`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub visible: usize,
    pub time: i64,
}

/// One user's check-ins plus the queries made against them.
#[derive(Debug, Clone)]
pub struct SequenceInput<'a> {
    pub user: usize,
    pub checkins: &'a [CheckIn],
    pub queries: Vec<Query>,
}

/// The network: geography encoder, history encoder and prompt decoder.
///
/// Parameters live in a separate [`ParamStore`]; the model only holds ids.
#[derive(Debug, Clone)]
pub struct Tpg {
    pub cfg: ModelConfig,
    num_users: usize,
    tokens: GeoTokens,
    poi_table: ParamId,
    geo: GeoHalf,
    time_table: ParamId,
    pos_table: ParamId,
    user: Option<(ParamId, ParamId)>,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
}

fn attention(store: &mut ParamStore, name: String, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<MultiHeadAttention> {
    MultiHeadAttention::new(store, &name, cfg.model_dim, cfg.heads, cfg.scaled_attention, rng)
}

impl Tpg {
    /// Builds the model over a POI registry and initialises its parameters
    /// from `seed`.
    pub fn new(cfg: &ModelConfig, pois: &[GeoPoint], num_users: usize, seed: u64) -> Result<(Tpg, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Tpg::with_store(cfg, pois, num_users, &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn with_store(
        cfg: &ModelConfig,
        pois: &[GeoPoint],
        num_users: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Tpg> {
        cfg.validate()?;
        if pois.is_empty() {
            return Err(Error::invalid("model needs at least one POI"));
        }
        let d = cfg.model_dim;
        let s = cfg.init_scale;
        let tokens = GeoTokens::new(pois, cfg)?;
        let poi_table = store.add("poi.embedding", uniform(&[pois.len(), cfg.poi_dim], s, rng))?;
        let geo = if cfg.use_geo_encoder {
            GeoHalf::Encoder(GeoEncoder::new(store, cfg, rng)?)
        } else {
            GeoHalf::Constant(store.add("geo.constant", uniform(&[1, cfg.geo_dim], s, rng))?)
        };
        let time_table = store.add("time.embedding", uniform(&[NUM_SLOTS, d], s, rng))?;
        let pos_table = store.add("position.embedding", uniform(&[cfg.max_len, d], s, rng))?;
        let user = if cfg.use_user_embedding {
            let table = store.add("user.embedding", uniform(&[num_users.max(1), cfg.poi_dim], s, rng))?;
            let proj = store.add("user.projection", xavier(d + cfg.poi_dim, d, rng))?;
            Some((table, proj))
        } else {
            None
        };
        let mut encoder = Vec::with_capacity(cfg.encoder_layers);
        for l in 0..cfg.encoder_layers {
            let p = format!("encoder.layer{l}");
            encoder.push(EncoderLayer {
                attn: attention(store, format!("{p}.attn"), cfg, rng)?,
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), d)?,
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, 4 * d, rng)?,
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), d)?,
            });
        }
        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        for l in 0..cfg.decoder_layers {
            let p = format!("decoder.layer{l}");
            decoder.push(DecoderLayer {
                self_attn: attention(store, format!("{p}.self_attn"), cfg, rng)?,
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), d)?,
                cross_attn: attention(store, format!("{p}.cross_attn"), cfg, rng)?,
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), d)?,
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, 4 * d, rng)?,
                norm3: LayerNorm::new(store, &format!("{p}.norm3"), d)?,
            });
        }
        Ok(Tpg {
            cfg: cfg.clone(),
            num_users,
            tokens,
            poi_table,
            geo,
            time_table,
            pos_table,
            user,
            encoder,
            decoder,
        })
    }

    pub fn num_pois(&self) -> usize {
        self.tokens.num_pois()
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn check_poi(&self, poi: usize) -> Result<()> {
        if poi < self.num_pois() {
            Ok(())
        } else {
            Err(Error::Vocabulary {
                kind: "POI",
                id: poi.to_string(),
            })
        }
    }

    pub fn check_user(&self, user: usize) -> Result<()> {
        if user < self.num_users {
            Ok(())
        } else {
            Err(Error::Vocabulary {
                kind: "user",
                id: user.to_string(),
            })
        }
    }

    /// Geography half of the POI embedding, one row per entry of `pois`.
    pub fn geo_rows(&self, g: &mut Graph, pois: &[usize]) -> Result<NodeId> {
        for &p in pois {
            self.check_poi(p)?;
        }
        match &self.geo {
            GeoHalf::Encoder(enc) => enc.encode(g, &self.tokens, pois),
            GeoHalf::Constant(c) => {
                let c = g.param(*c);
                g.gather_rows(c, &vec![0; pois.len()])
            }
        }
    }

    /// `[e_poi ‖ e_geo]` for each entry of `pois`; these rows serve both as
    /// check-in content and as candidate embeddings.
    pub fn poi_rows(&self, g: &mut Graph, pois: &[usize]) -> Result<NodeId> {
        let geo = self.geo_rows(g, pois)?;
        let own = g.embed(self.poi_table, pois)?;
        g.concat_cols(&[own, geo])
    }

    /// Check-in embeddings before dropout, sequences stacked in order.
    /// `row_of` maps a POI id to its row in `poi_rows`.
    pub fn input_embeddings(
        &self,
        g: &mut Graph,
        poi_rows: NodeId,
        row_of: &dyn Fn(usize) -> Result<usize>,
        seqs: &[SequenceInput],
    ) -> Result<NodeId> {
        let mut rows = Vec::new();
        let mut slots = Vec::new();
        let mut positions = Vec::new();
        let mut users = Vec::new();
        for s in seqs {
            if s.checkins.is_empty() {
                return Err(Error::invalid("cannot encode an empty history"));
            }
            if s.checkins.len() > self.cfg.max_len {
                return Err(Error::invalid(format!(
                    "history of {} check-ins exceeds the maximum {}",
                    s.checkins.len(),
                    self.cfg.max_len
                )));
            }
            self.check_user(s.user)?;
            for (i, c) in s.checkins.iter().enumerate() {
                rows.push(row_of(c.poi)?);
                slots.push(time_slot(c.time));
                positions.push(i);
                users.push(s.user);
            }
        }
        let mut x = g.gather_rows(poi_rows, &rows)?;
        if let Some((table, proj)) = self.user {
            let u = g.embed(table, &users)?;
            let joined = g.concat_cols(&[x, u])?;
            let w = g.param(proj);
            x = g.matmul(joined, w)?;
        }
        if self.cfg.use_time_embedding {
            let t = g.embed(self.time_table, &slots)?;
            x = g.add(x, t)?;
        }
        let p = g.embed(self.pos_table, &positions)?;
        g.add(x, p)
    }

    /// Predicted-location embeddings, one row per query in input order.
    pub fn forward(
        &self,
        g: &mut Graph,
        poi_rows: NodeId,
        row_of: &dyn Fn(usize) -> Result<usize>,
        seqs: &[SequenceInput],
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        let inputs = self.input_embeddings(g, poi_rows, row_of, seqs)?;
        let mut starts = Vec::with_capacity(seqs.len());
        let mut causal: Vec<Range<usize>> = Vec::new();
        for s in seqs {
            let start = causal.len();
            starts.push(start);
            causal.extend((0..s.checkins.len()).map(|i| start..start + i + 1));
        }

        let mut x = g.dropout(inputs, self.cfg.dropout, rng)?;
        for layer in &self.encoder {
            x = layer.attn.forward_self(g, x, Mask::Ranges(causal.clone()))?;
            x = layer.norm1.forward(g, x)?;
            let f = layer.ffn.forward(g, x)?;
            let r = g.add(x, f)?;
            x = layer.norm2.forward(g, r)?;
        }
        let memory = x;

        let mut visible = Vec::new();
        let mut prompt_slots = Vec::new();
        let mut last_rows = Vec::new();
        for (s, &start) in seqs.iter().zip(&starts) {
            for q in &s.queries {
                if q.visible == 0 || q.visible > s.checkins.len() {
                    return Err(Error::invalid(format!(
                        "query sees {} of {} check-ins",
                        q.visible,
                        s.checkins.len()
                    )));
                }
                visible.push(start..start + q.visible);
                prompt_slots.push(time_slot(q.time));
                last_rows.push(start + q.visible - 1);
            }
        }
        if visible.is_empty() {
            return Err(Error::invalid("no queries to decode"));
        }
        let m = visible.len();
        let mut y = if self.cfg.use_temporal_prompt {
            g.embed(self.time_table, &prompt_slots)?
        } else {
            g.gather_rows(inputs, &last_rows)?
        };
        for layer in &self.decoder {
            y = layer.self_attn.forward_self(g, y, Mask::diagonal(m))?;
            y = layer.norm1.forward(g, y)?;
            y = layer.cross_attn.forward(g, y, memory, Mask::Ranges(visible.clone()))?;
            y = layer.norm2.forward(g, y)?;
            let f = layer.ffn.forward(g, y)?;
            let r = g.add(y, f)?;
            y = layer.norm3.forward(g, r)?;
        }
        Ok(y)
    }
}
