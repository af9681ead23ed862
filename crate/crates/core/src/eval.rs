//! Leave-one-out ranking evaluation against location-constrained candidates.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{CheckIn, PoiCatalog, Trajectory, UserId};
use crate::error::{Error, Result};
use crate::geo::haversine;
use crate::recommender::{self, CoreParams, EncodedSeq};

pub const DEFAULT_N_CAND: usize = 200;
pub const KS: [usize; 2] = [5, 10];

/// The truth POI followed by the `n_cand` unvisited POIs nearest to the last
/// training check-in (ties to the smaller POI id). Catalog indices.
pub fn candidate_set(train: &[CheckIn], truth: &CheckIn, catalog: &PoiCatalog, n_cand: usize) -> Result<Vec<usize>> {
    let last = train
        .last()
        .ok_or_else(|| Error::Contract("candidate set needs a training check-in".into()))?;
    let index = |poi| {
        catalog
            .index_of(poi)
            .ok_or_else(|| Error::Contract(format!("POI {poi} not in catalog")))
    };
    let origin = catalog.lon_lat(index(last.poi)?);
    let truth_idx = index(truth.poi)?;
    let mut visited = vec![false; catalog.len()];
    for c in train {
        visited[index(c.poi)?] = true;
    }
    let mut pool: Vec<(f64, u64, usize)> = (0..catalog.len())
        .filter(|&i| !visited[i] && i != truth_idx)
        .map(|i| (haversine(origin, catalog.lon_lat(i)), catalog.poi(i).id, i))
        .collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = Vec::with_capacity(n_cand.min(pool.len()) + 1);
    out.push(truth_idx);
    out.extend(pool.into_iter().take(n_cand).map(|t| t.2));
    Ok(out)
}

/// 1-based rank of `scores[truth]` under descending order; ties count
/// against the truth.
pub fn rank_truth(scores: &[f64], truth: usize) -> Result<usize> {
    let t = *scores
        .get(truth)
        .ok_or_else(|| Error::Contract(format!("truth index {truth} out of range")))?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric { param: "scores".into() });
    }
    Ok(1 + scores.iter().enumerate().filter(|&(i, &s)| i != truth && s >= t).count())
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserResult {
    pub user: UserId,
    pub rank: usize,
    pub n_candidates: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub users: Vec<UserResult>,
    pub means: Vec<AtK>,
}

impl MetricsReport {
    pub fn from_ranks(users: Vec<UserResult>) -> Self {
        let n = users.len().max(1) as f64;
        let means = KS
            .iter()
            .map(|&k| AtK {
                k,
                hr: users.iter().map(|u| hr_at_k(u.rank, k)).sum::<f64>() / n,
                ndcg: users.iter().map(|u| ndcg_at_k(u.rank, k)).sum::<f64>() / n,
            })
            .collect();
        MetricsReport { users, means }
    }

    pub fn at(&self, k: usize) -> Option<AtK> {
        self.means.iter().copied().find(|m| m.k == k)
    }

    pub fn hr(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |m| m.hr)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |m| m.ndcg)
    }

    /// One row per user, then a `mean` summary row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["user".to_string(), "rank".to_string()];
        for k in KS {
            header.push(format!("hr@{k}"));
            header.push(format!("ndcg@{k}"));
        }
        out.write_record(&header)?;
        for u in &self.users {
            let mut row = vec![u.user.to_string(), u.rank.to_string()];
            for k in KS {
                row.push(hr_at_k(u.rank, k).to_string());
                row.push(ndcg_at_k(u.rank, k).to_string());
            }
            out.write_record(&row)?;
        }
        let mut row = vec!["mean".to_string(), String::new()];
        for k in KS {
            row.push(self.hr(k).to_string());
            row.push(self.ndcg(k).to_string());
        }
        out.write_record(&row)?;
        out.flush()?;
        Ok(())
    }
}

/// Ranks one user's held-out check-in under `params`.
pub fn evaluate_user(
    train: &Trajectory,
    truth: &CheckIn,
    catalog: &PoiCatalog,
    params: &CoreParams,
    n_cand: usize,
) -> Result<UserResult> {
    let cands = candidate_set(&train.checkins, truth, catalog, n_cand)?;
    let seq = EncodedSeq::encode(&train.checkins, catalog)?;
    let scores = recommender::predict(&seq, &cands, truth.timestamp, catalog, params)?;
    Ok(UserResult {
        user: train.user,
        rank: rank_truth(&scores, 0)?,
        n_candidates: cands.len(),
    })
}

/// `models[i]` scores user `train[i]`, whose held-out check-in is `test[i]`.
pub fn evaluate(
    train: &[Trajectory],
    test: &[CheckIn],
    models: &[&CoreParams],
    catalog: &PoiCatalog,
    n_cand: usize,
) -> Result<MetricsReport> {
    if train.len() != test.len() || train.len() != models.len() {
        return Err(Error::Contract("one trajectory, test check-in and model per user".into()));
    }
    let one = |i: usize| {
        if train[i].user != test[i].user {
            return Err(Error::Contract(format!(
                "test check-in of user {} paired with user {}",
                test[i].user, train[i].user
            )));
        }
        evaluate_user(&train[i], &test[i], catalog, models[i], n_cand)
    };
    #[cfg(feature = "parallel")]
    let users = {
        use rayon::prelude::*;
        (0..train.len()).into_par_iter().map(one).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let users = (0..train.len()).map(one).collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_ranks(users))
}
