//! Browser bindings: synthesize a city, look up a user's neighbors, and run
//! a short collaborative training session. Every export returns JSON.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use nextpoi_core::config::{Ablation, ExperimentConfig};
use nextpoi_core::pipeline;
use nextpoi_core::Result;

const BENCHMARK: &str = include_str!("../../../configs/benchmark.toml");

fn config(users: usize, pois: usize, seed: u64) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_toml(BENCHMARK)?;
    cfg.synth.users = users;
    cfg.synth.pois = pois;
    cfg.synth.seed = seed;
    cfg.seed = seed;
    cfg.d = 16;
    cfg.n_cand = 100.min(pois.saturating_sub(1)).max(1);
    cfg.q = cfg.q.min(users.saturating_sub(1)).max(1);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct CityPoi {
    lon: f64,
    lat: f64,
    category: u32,
}

#[derive(Serialize)]
struct CityUser {
    user: u64,
    visits: Vec<usize>,
}

#[derive(Serialize)]
struct City {
    pois: Vec<CityPoi>,
    users: Vec<CityUser>,
}

pub fn city_json(users: usize, pois: usize, seed: u64) -> Result<String> {
    let cfg = config(users, pois, seed)?;
    let d = pipeline::synthesize(&cfg)?;
    let city = City {
        pois: d.catalog.pois().iter().map(|p| CityPoi { lon: p.lon, lat: p.lat, category: p.category }).collect(),
        users: d
            .trajectories
            .iter()
            .map(|t| CityUser {
                user: t.user,
                visits: t.checkins.iter().map(|c| d.catalog.index_of(c.poi).expect("catalog POI")).collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&city)?)
}

pub fn neighbors_json(users: usize, pois: usize, seed: u64, q: usize, epsilon: f64, private: bool) -> Result<String> {
    let mut cfg = config(users, pois, seed)?;
    cfg.q = q.clamp(1, users.saturating_sub(1).max(1));
    cfg.epsilon = epsilon;
    if !private {
        cfg.ablations.insert(Ablation::Pp);
    }
    cfg.validate()?;
    let split = pipeline::prepare_split(&pipeline::synthesize(&cfg)?, &cfg)?;
    let nb = pipeline::stage_neighbors(&split, &cfg)?;
    Ok(serde_json::to_string(&nb)?)
}

#[derive(Serialize)]
struct Session {
    hr5: f64,
    hr10: f64,
    ndcg10: f64,
    loss: Vec<f64>,
}

pub fn train_json(users: usize, pois: usize, seed: u64, rounds: usize, epsilon: f64, ablations: &str) -> Result<String> {
    let mut cfg = config(users, pois, seed)?;
    cfg.max_epochs = rounds;
    cfg.epsilon = epsilon;
    for label in ablations.split([',', ' ']).filter(|s| !s.is_empty()) {
        cfg.ablations.insert(label.parse()?);
    }
    cfg.validate()?;
    let r = pipeline::run_pipeline(&pipeline::synthesize(&cfg)?, &cfg, false)?;
    let s = Session { hr5: r.report.hr(5), hr10: r.report.hr(10), ndcg10: r.report.ndcg(10), loss: r.log.mean_local_loss };
    Ok(serde_json::to_string(&s)?)
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// POIs and per-user visit lists of a synthetic two-cluster city.
#[wasm_bindgen]
pub fn city(users: usize, pois: usize, seed: u64) -> std::result::Result<String, JsError> {
    js(city_json(users, pois, seed))
}

/// Geographical and semantic neighbor lists for every user.
#[wasm_bindgen]
pub fn neighbors(users: usize, pois: usize, seed: u64, q: usize, epsilon: f64, private: bool) -> std::result::Result<String, JsError> {
    js(neighbors_json(users, pois, seed, q, epsilon, private))
}

/// Pretrain, train for `rounds` and evaluate. `ablations` is a comma list like `-GN,-MIM`.
#[wasm_bindgen]
pub fn train(users: usize, pois: usize, seed: u64, rounds: usize, epsilon: f64, ablations: &str) -> std::result::Result<String, JsError> {
    js(train_json(users, pois, seed, rounds, epsilon, ablations))
}
