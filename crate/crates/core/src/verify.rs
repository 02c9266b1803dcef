//! Built-in self checks run by `tpg verify`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::CheckIn;
use crate::error::Result;
use crate::eval::{ndcg_at_k, rank, recall_at_k};
use crate::geocode::{haversine_km, quadkey_of, quadkey_to_center, GeoPoint, SpatialIndex};
use crate::model::{ModelConfig, Tpg};
use crate::numcore::{grad_check, GradCheckConfig, GradCheckReport, Graph, ParamStore};
use crate::train::{batch_loss, TrainExample};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status}  {:<20} {}", self.name, self.detail)
    }
}

fn outcome(name: &'static str, result: Result<(bool, String)>) -> CheckOutcome {
    match result {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_point(rng: &mut impl Rng) -> GeoPoint {
    GeoPoint {
        lat: rng.gen_range(-85.0..85.0),
        lon: rng.gen_range(-180.0..180.0),
    }
}

fn quadkeys() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad = 0;
    let mut checked = 0;
    for _ in 0..1000 {
        let p = random_point(&mut rng);
        let mut parent: Option<crate::geocode::Quadkey> = None;
        for level in 1..=20 {
            let q = quadkey_of(p, level)?;
            if quadkey_of(quadkey_to_center(&q)?, level)? != q {
                bad += 1;
            }
            if let Some(parent) = &parent {
                if !parent.is_prefix_of(&q) {
                    bad += 1;
                }
            }
            parent = Some(q);
            checked += 1;
        }
    }
    Ok((bad == 0, format!("{checked} keys, {bad} violations")))
}

fn nearest_neighbours() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    for _ in 0..20 {
        let lat0 = rng.gen_range(-60.0..60.0);
        let lon0 = rng.gen_range(-170.0..170.0);
        let pois: Vec<GeoPoint> = (0..200)
            .map(|_| GeoPoint {
                lat: lat0 + rng.gen_range(-0.5..0.5),
                lon: lon0 + rng.gen_range(-0.5..0.5),
            })
            .collect();
        let index = SpatialIndex::from_registry(&pois)?;
        let q = GeoPoint {
            lat: lat0 + rng.gen_range(-0.5..0.5),
            lon: lon0 + rng.gen_range(-0.5..0.5),
        };
        let got = index.k_nearest(q, 10)?;
        let mut brute: Vec<(f64, usize)> = pois.iter().enumerate().map(|(i, &p)| (haversine_km(q, p), i)).collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let got_d: Vec<f64> = got.iter().map(|&i| haversine_km(q, pois[i])).collect();
        if got_d.iter().zip(&brute).any(|(g, b)| (g - b.0).abs() > 1e-9) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("20 queries, {bad} mismatches")))
}

fn metrics() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for _ in 0..200 {
        let n = rng.gen_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..8u8))).collect();
        let t = rng.gen_range(0..n);
        // Stable sort with the target moved last puts it behind its ties.
        let mut order: Vec<usize> = (0..n).filter(|&i| i != t).chain([t]).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let want = order.iter().position(|&i| i == t).expect("target is present") + 1;
        if rank(&scores, t)? != want {
            bad += 1;
        }
    }
    for _ in 0..200 {
        let ranks: Vec<usize> = (0..rng.gen_range(1..30)).map(|_| rng.gen_range(1..=101)).collect();
        let k = rng.gen_range(1..=20);
        let hits = ranks.iter().filter(|&&r| r <= k).count() as f64;
        let gain: f64 = ranks.iter().map(|&r| if r <= k { (2f64).ln() / ((r + 1) as f64).ln() } else { 0.0 }).sum();
        let (recall, ndcg) = (recall_at_k(&ranks, k)?, ndcg_at_k(&ranks, k)?);
        let n = ranks.len() as f64;
        if (recall - hits / n).abs() > 1e-12 || (ndcg - gain / n).abs() > 1e-12 || ndcg > recall {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("400 cases, {bad} mismatches")))
}

/// Small configuration shared by the gradient and calibration checks.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        poi_dim: 4,
        geo_dim: 4,
        time_dim: 8,
        model_dim: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        geo_layers: 1,
        ngram: 2,
        level: 8,
        dropout: 0.0,
        init_scale: 0.5,
        use_user_embedding: true,
        ..ModelConfig::default()
    }
}

/// Three users with four check-ins each, every prefix a target.
fn toy_batch() -> (Vec<GeoPoint>, Vec<TrainExample>) {
    let pois: Vec<GeoPoint> = (0..8)
        .map(|i| GeoPoint {
            lat: 40.0 + 0.01 * i as f64,
            lon: -74.0 + 0.013 * (i * i) as f64,
        })
        .collect();
    let batch = (0..3)
        .map(|u| TrainExample {
            user: u,
            checkins: (0..4)
                .map(|i| CheckIn {
                    user: u,
                    time: 1_704_067_200 + 20_000 * (i + 3 * u) as i64,
                    poi: (u + 2 * i) % 6,
                })
                .collect(),
            targets: vec![1, 2, 3],
            negatives: vec![6, 7],
        })
        .collect();
    (pois, batch)
}

/// Finite-difference check of the full training loss on a toy batch.
pub fn toy_gradient_check(corrupt_backward: bool) -> Result<GradCheckReport> {
    let (pois, batch) = toy_batch();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = Tpg::with_store(&toy_config(), &pois, 3, &mut store, &mut rng)?;
    let cfg = GradCheckConfig {
        max_entries_per_param: Some(8),
        ..GradCheckConfig::default()
    };
    grad_check(&mut store, &cfg, |s, want| {
        let mut g = Graph::new(s, true).with_corrupted_backward(corrupt_backward);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, _) = batch_loss(&model, &mut g, &batch, &mut rng)?;
        let grads = if want { Some(g.backward(loss)?) } else { None };
        Ok((g.scalar(loss), grads))
    })
}

fn gradients(corrupt: bool) -> Result<(bool, String)> {
    let r = toy_gradient_check(corrupt)?;
    Ok((
        r.max_rel_error < 1e-4,
        format!("{} entries, max relative error {:.3e}", r.checked, r.max_rel_error),
    ))
}

fn loss_at_init() -> Result<(bool, String)> {
    let (pois, mut batch) = toy_batch();
    let cfg = ModelConfig {
        init_scale: 0.05,
        ..toy_config()
    };
    let (model, store) = Tpg::new(&cfg, &pois, 3, 5)?;
    for ex in &mut batch {
        ex.negatives = vec![6, 7, 6, 7, 6];
    }
    let mut g = Graph::new(&store, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (loss, _) = batch_loss(&model, &mut g, &batch, &mut rng)?;
    let loss = g.scalar(loss);
    let want = 6f64.ln();
    let gap = (loss - want).abs() / want;
    Ok((gap < 0.05, format!("loss {loss:.4} vs ln 6 = {want:.4}")))
}

/// Runs every check in a fixed order. `corrupt_backward` injects a gradient
/// fault so the gradient check must fail.
pub fn run_checks(corrupt_backward: bool) -> Vec<CheckOutcome> {
    vec![
        outcome("quadkey_roundtrip", quadkeys()),
        outcome("nearest_neighbours", nearest_neighbours()),
        outcome("metric_oracles", metrics()),
        outcome("gradient_check", gradients(corrupt_backward)),
        outcome("loss_at_init", loss_at_init()),
    ]
}
