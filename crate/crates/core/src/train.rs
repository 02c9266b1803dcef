//! Sampled-softmax training.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_other_negatives, sample_train_negatives, CheckIn, MAX_SEQUENCE_LEN};
use crate::error::{Error, Result};
use crate::model::{parse_value, Query, SequenceInput, Tpg};
use crate::numcore::{Adam, Graph, NodeId, ParamStore};

/// Where training negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativePool {
    /// POIs the user never visited in training data.
    Unvisited,
    /// Any POI other than the one visited at the target time, so places
    /// the user frequents at other hours also act as negatives.
    Others,
}

impl NegativePool {
    fn name(self) -> &'static str {
        match self {
            NegativePool::Unvisited => "unvisited",
            NegativePool::Others => "others",
        }
    }
}

impl std::str::FromStr for NegativePool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unvisited" => Ok(NegativePool::Unvisited),
            "others" => Ok(NegativePool::Others),
            _ => Err(Error::invalid(format!("unknown negative pool {s:?}; use unvisited or others"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Negatives per training instance.
    pub negatives: usize,
    pub negative_pool: NegativePool,
    pub seed: u64,
    /// Train on every target position of a sequence instead of one random
    /// position per epoch.
    pub all_prefixes: bool,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Multiplicative learning-rate decay per epoch; 1 disables it.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            epochs: 50,
            batch_size: 32,
            negatives: 100,
            negative_pool: NegativePool::Unvisited,
            seed: 0,
            all_prefixes: false,
            clip_norm: 0.0,
            lr_decay: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.negatives == 0 {
            return Err(Error::invalid(
                "need lr > 0 and positive epochs, batch_size and negatives",
            ));
        }
        if !(self.clip_norm >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::invalid("clip_norm must be >= 0 and lr_decay > 0"));
        }
        Ok(())
    }

    /// Sets a field by its key-file name. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "negatives" => self.negatives = parse_value(key, value)?,
            "negative_pool" => self.negative_pool = value.trim().parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            "all_prefixes" => self.all_prefixes = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "lr_decay" => self.lr_decay = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("negatives", self.negatives.to_string()),
            ("negative_pool", self.negative_pool.name().to_string()),
            ("seed", self.seed.to_string()),
            ("all_prefixes", self.all_prefixes.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
        ] {
            writeln!(s, "{k}={v}").expect("writing to a string");
        }
        s
    }
}

/// One training instance: a check-in window, the positions predicted from
/// its prefixes, and negatives shared by those targets. A negative equal to
/// a target's own POI is dropped for that target only.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub user: usize,
    pub checkins: Vec<CheckIn>,
    /// Indices into `checkins`, each at least 1; the prompt for target `j`
    /// is `checkins[j].time` and the visible history is `checkins[..j]`.
    pub targets: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Picks a target uniformly in `[1, len)` and returns the up to
/// `MAX_SEQUENCE_LEN` check-ins before it plus the target. `None` when the
/// sequence is too short.
pub fn make_train_instance<'s>(seq: &'s [CheckIn], rng: &mut impl Rng) -> Option<(&'s [CheckIn], CheckIn)> {
    if seq.len() < 2 {
        return None;
    }
    let t = rng.gen_range(1..seq.len());
    Some((&seq[t.saturating_sub(MAX_SEQUENCE_LEN)..t], seq[t]))
}

/// Mean sampled-softmax loss of `rows` (decoder outputs) against candidate
/// rows `cands`: column lists start with the positive.
pub fn rec_loss(g: &mut Graph, outputs: NodeId, cands: NodeId, positives: &[usize], negatives: &[Vec<usize>]) -> Result<NodeId> {
    let mut cols = Vec::with_capacity(positives.len());
    for (&p, negs) in positives.iter().zip(negatives) {
        if negs.is_empty() {
            return Err(Error::invalid("rec_loss needs at least one negative"));
        }
        if negs.contains(&p) {
            return Err(Error::invalid(format!("positive {p} appears among the negatives")));
        }
        let mut c = Vec::with_capacity(1 + negs.len());
        c.push(p);
        c.extend_from_slice(negs);
        cols.push(c);
    }
    let logits = g.matmul_nt(outputs, cands)?;
    g.sampled_nll(logits, cols)
}

/// Builds the loss graph for a batch and returns `(loss, target count)`.
pub fn batch_loss(model: &Tpg, g: &mut Graph, batch: &[TrainExample], rng: &mut impl Rng) -> Result<(NodeId, usize)> {
    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut pois = Vec::new();
    let mut note = |p: usize| {
        *local.entry(p).or_insert_with(|| {
            pois.push(p);
            pois.len() - 1
        })
    };
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for ex in batch {
        let memory = ex.targets.iter().copied().max().unwrap_or(0);
        for c in &ex.checkins[..memory] {
            note(c.poi);
        }
        let negs: Vec<usize> = ex.negatives.iter().map(|&p| note(p)).collect();
        for &t in &ex.targets {
            // A shared negative that is this target's positive is skipped.
            let pos = note(ex.checkins[t].poi);
            positives.push(pos);
            negatives.push(negs.iter().copied().filter(|&n| n != pos).collect());
        }
    }
    let rows = model.poi_rows(g, &pois)?;
    let seqs: Vec<SequenceInput> = batch
        .iter()
        .map(|ex| {
            let memory = ex.targets.iter().copied().max().unwrap_or(0);
            SequenceInput {
                user: ex.user,
                checkins: &ex.checkins[..memory],
                queries: ex
                    .targets
                    .iter()
                    .map(|&t| Query {
                        visible: t,
                        time: ex.checkins[t].time,
                    })
                    .collect(),
            }
        })
        .collect();
    let row_of = |p: usize| Ok(local[&p]);
    let out = model.forward(g, rows, &row_of, &seqs, rng)?;
    let loss = rec_loss(g, out, rows, &positives, &negatives)?;
    Ok((loss, positives.len()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

/// Renders the loss log as CSV with a header row.
pub fn loss_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,mean_loss,wall_seconds\n");
    for e in log {
        writeln!(s, "{},{},{:.3}", e.epoch, e.mean_loss, e.wall_seconds).expect("writing to a string");
    }
    s
}

pub fn write_loss_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    std::fs::write(path, loss_csv(log))?;
    Ok(())
}

/// Epoch-by-epoch trainer over fixed training sequences.
pub struct Trainer<'m> {
    model: &'m Tpg,
    cfg: TrainConfig,
    sequences: Vec<Vec<CheckIn>>,
    /// `visited[u][p]`: user `u` checked in at POI `p` in training data.
    visited: Vec<Vec<bool>>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Tpg, sequences: &[Vec<CheckIn>], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut visited = vec![vec![false; model.num_pois()]; model.num_users()];
        for c in sequences.iter().flatten() {
            model.check_user(c.user)?;
            model.check_poi(c.poi)?;
            visited[c.user][c.poi] = true;
        }
        let sequences: Vec<Vec<CheckIn>> = sequences.iter().filter(|s| s.len() >= 2).cloned().collect();
        if sequences.is_empty() {
            return Err(Error::invalid("no training sequence has two or more check-ins"));
        }
        // A separate stream from the one that initialised the parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            model,
            cfg: cfg.clone(),
            sequences,
            visited,
            rng,
            epoch: 0,
        })
    }

    fn examples(&mut self) -> Result<Vec<TrainExample>> {
        let mut order: Vec<usize> = (0..self.sequences.len()).collect();
        order.shuffle(&mut self.rng);
        let mut out = Vec::with_capacity(order.len());
        for i in order {
            let seq = &self.sequences[i];
            let (checkins, targets) = if self.cfg.all_prefixes {
                let window = &seq[seq.len().saturating_sub(MAX_SEQUENCE_LEN)..];
                (window.to_vec(), (1..window.len()).collect())
            } else {
                let (prefix, target) = make_train_instance(seq, &mut self.rng).expect("sequence has two check-ins");
                let mut v = prefix.to_vec();
                v.push(target);
                let t = v.len() - 1;
                (v, vec![t])
            };
            let user = checkins[0].user;
            let target = checkins[targets[0]].poi;
            let negatives = match self.cfg.negative_pool {
                NegativePool::Unvisited => {
                    sample_train_negatives(&self.visited[user], target, self.cfg.negatives, &mut self.rng)?
                }
                NegativePool::Others => {
                    sample_other_negatives(self.model.num_pois(), target, self.cfg.negatives, &mut self.rng)?
                }
            };
            out.push(TrainExample {
                user,
                checkins,
                targets,
                negatives,
            });
        }
        Ok(out)
    }

    /// Runs one epoch. A non-finite loss aborts before any update from the
    /// offending batch.
    pub fn run_epoch(&mut self, store: &mut ParamStore) -> Result<EpochLog> {
        let start = Instant::now();
        let adam = Adam::with_lr(self.cfg.lr * self.cfg.lr_decay.powi(self.epoch as i32));
        let examples = self.examples()?;
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in examples.chunks(self.cfg.batch_size) {
            let grads = {
                let mut g = Graph::new(store, true);
                let (loss, n) = batch_loss(self.model, &mut g, batch, &mut self.rng)?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss {value} in epoch {}", self.epoch)));
                }
                total += value * n as f64;
                count += n;
                g.backward(loss)?
            };
            store.accumulate(&grads);
            if self.cfg.clip_norm > 0.0 {
                store.clip_grad_norm(self.cfg.clip_norm);
            }
            adam.step(store)?;
        }
        let log = EpochLog {
            epoch: self.epoch,
            mean_loss: total / count as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        Ok(log)
    }
}

/// Trains for `cfg.epochs` epochs. `after_epoch` sees each log entry and
/// the updated parameters, e.g. to checkpoint or evaluate.
pub fn fit(
    model: &Tpg,
    store: &mut ParamStore,
    sequences: &[Vec<CheckIn>],
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(&EpochLog, &ParamStore) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    let mut trainer = Trainer::new(model, sequences, cfg)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let entry = match trainer.run_epoch(store) {
            Ok(e) => e,
            Err(e @ Error::Numeric(_)) => {
                warn!("training halted: {e}");
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        info!("epoch {} loss {:.5} ({:.2}s)", entry.epoch, entry.mean_loss, entry.wall_seconds);
        after_epoch(&entry, store)?;
        log.push(entry);
    }
    Ok(log)
}
