//! Server-side neighbor identification from perturbed per-user summaries:
//! multi-centroid activity regions and category preference distributions.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CheckIn, PoiCatalog, Trajectory, UserId};
use crate::error::{Error, Result};
use crate::geo::{haversine, LonLat};
use crate::numerics::Matrix;
use crate::privacy::{self, PrivacyBudget};
use crate::seed::derive_rng;

pub const DEFAULT_THRESHOLD_KM: f64 = 10.0;
pub const DEFAULT_Q: usize = 30;
pub const MAX_CENTROIDS: usize = 20;
const KMEANS_TOL: f64 = 1e-6;
const KMEANS_MAX_ITER: usize = 100;
const PROB_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidSet {
    pub user: UserId,
    pub centroids: Vec<LonLat>,
}

/// Distinct visited POIs with their visit counts, in first-visit order.
fn visited_points(checkins: &[CheckIn], catalog: &PoiCatalog) -> Result<Vec<(LonLat, f64)>> {
    let mut order: Vec<usize> = Vec::new();
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for c in checkins {
        let idx = catalog
            .index_of(c.poi)
            .ok_or_else(|| Error::Contract(format!("POI {} not in catalog", c.poi)))?;
        let n = counts.entry(idx).or_insert(0.0);
        if *n == 0.0 {
            order.push(idx);
        }
        *n += 1.0;
    }
    Ok(order.into_iter().map(|i| (catalog.lon_lat(i), counts[&i])).collect())
}

fn nearest(p: LonLat, centers: &[LonLat]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, &c)| (i, haversine(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Visit-weighted k-means with k-means++ seeding and haversine assignment.
fn kmeans<R: Rng + ?Sized>(points: &[(LonLat, f64)], k: usize, rng: &mut R) -> Vec<LonLat> {
    let first = WeightedIndex::new(points.iter().map(|p| p.1)).expect("positive visit counts");
    let mut centers = vec![points[first.sample(rng)].0];
    while centers.len() < k {
        let d2: Vec<f64> = points.iter().map(|&(p, w)| w * nearest(p, &centers).1.powi(2)).collect();
        match WeightedIndex::new(&d2) {
            Ok(dist) => centers.push(points[dist.sample(rng)].0),
            // every point already sits on a center
            Err(_) => break,
        }
    }
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![(0.0, 0.0, 0.0); centers.len()];
        for &(p, w) in points {
            let (i, _) = nearest(p, &centers);
            sums[i].0 += w * p.0;
            sums[i].1 += w * p.1;
            sums[i].2 += w;
        }
        let mut moved: f64 = 0.0;
        for (c, &(sx, sy, sw)) in centers.iter_mut().zip(&sums) {
            if sw > 0.0 {
                let next = (sx / sw, sy / sw);
                moved = moved.max((next.0 - c.0).abs() + (next.1 - c.1).abs());
                *c = next;
            }
        }
        if moved < KMEANS_TOL {
            break;
        }
    }
    centers
}

/// Smallest k-means solution leaving no visited POI farther than
/// `threshold_km` from its nearest centroid, with `k ≤ min(distinct, 20)`.
pub fn user_centroids<R: Rng + ?Sized>(
    t: &Trajectory,
    catalog: &PoiCatalog,
    threshold_km: f64,
    rng: &mut R,
) -> Result<CentroidSet> {
    if t.is_empty() {
        return Err(Error::Contract(format!("user {} has no check-ins", t.user)));
    }
    if !(threshold_km > 0.0) {
        return Err(Error::Config(format!("centroid threshold must be > 0 km, got {threshold_km}")));
    }
    let points = visited_points(&t.checkins, catalog)?;
    let k_max = points.len().min(MAX_CENTROIDS);
    let mut centers = Vec::new();
    for k in 1..=k_max {
        centers = kmeans(&points, k, rng);
        if points.iter().all(|&(p, _)| nearest(p, &centers).1 <= threshold_km) {
            break;
        }
    }
    Ok(CentroidSet { user: t.user, centroids: centers })
}

pub fn category_counts(checkins: &[CheckIn], catalog: &PoiCatalog) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; catalog.n_categories()];
    for c in checkins {
        let idx = catalog
            .index_of(c.poi)
            .ok_or_else(|| Error::Contract(format!("POI {} not in catalog", c.poi)))?;
        counts[catalog.category_of(idx)] += 1;
    }
    Ok(counts)
}

/// Visit share per category, indexed like [`PoiCatalog::categories`].
pub fn category_distribution(t: &Trajectory, catalog: &PoiCatalog) -> Result<Vec<f64>> {
    if t.is_empty() {
        return Err(Error::Contract(format!("user {} has no check-ins", t.user)));
    }
    let counts = category_counts(&t.checkins, catalog)?;
    let total = t.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

/// Closest pair of centroids across the two sets, km.
pub fn geo_distance(a: &[LonLat], b: &[LonLat]) -> f64 {
    a.iter()
        .flat_map(|&x| b.iter().map(move |&y| haversine(x, y)))
        .fold(f64::INFINITY, f64::min)
}

fn floored(p: &[f64]) -> Vec<f64> {
    let f: Vec<f64> = p.iter().map(|&x| x.max(PROB_FLOOR)).collect();
    let z: f64 = f.iter().sum();
    f.into_iter().map(|x| x / z).collect()
}

/// `KL(a ‖ b)` in nats after flooring both at 1e-6 and renormalising.
pub fn cat_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Contract(format!(
            "distributions differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let (a, b) = (floored(a), floored(b));
    let kl: f64 = a
        .iter()
        .zip(&b)
        .map(|(&x, &y)| if x == 0.0 { 0.0 } else { x * (x / y).ln() })
        .sum();
    Ok(kl.max(0.0))
}

/// Row `n` of each matrix holds the distances from user `n`.
pub fn build_matrices(centroids: &[Vec<LonLat>], dists: &[Vec<f64>]) -> Result<(Matrix, Matrix)> {
    let n = centroids.len();
    if dists.len() != n {
        return Err(Error::Contract("one centroid set and one distribution per user".into()));
    }
    if let Some(i) = centroids.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("user index {i} has no centroids")));
    }
    let mut geo = Matrix::zeros(n, n);
    let mut cat = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if j > i {
                let d = geo_distance(&centroids[i], &centroids[j]);
                geo.set(i, j, d);
                geo.set(j, i, d);
            }
            cat.set(i, j, cat_distance(&dists[i], &dists[j])?);
        }
    }
    Ok((geo, cat))
}

/// The `q` smallest entries of row `n`, excluding `n`, as
/// `(user id, distance)`; equal distances go to the smaller id.
pub fn top_q_neighbors(d: &Matrix, n: usize, q: usize, ids: &[UserId]) -> Result<Vec<(UserId, f64)>> {
    if q == 0 {
        return Err(Error::Config("q must be >= 1".into()));
    }
    if d.rows() != d.cols() || d.rows() != ids.len() || n >= ids.len() {
        return Err(Error::Contract("distance matrix does not match the user list".into()));
    }
    let mut row: Vec<(UserId, f64)> = (0..ids.len())
        .filter(|&j| j != n)
        .map(|j| (ids[j], d.get(n, j)))
        .collect();
    row.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    row.truncate(q);
    Ok(row)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborKind {
    Geographical,
    Semantic,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UserNeighbors {
    pub geo: Vec<(UserId, f64)>,
    pub cat: Vec<(UserId, f64)>,
}

impl UserNeighbors {
    pub fn get(&self, kind: NeighborKind) -> &[(UserId, f64)] {
        match kind {
            NeighborKind::Geographical => &self.geo,
            NeighborKind::Semantic => &self.cat,
        }
    }
}

/// Neighbor lists for every user, keyed by user id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NeighborMap(pub BTreeMap<UserId, UserNeighbors>);

impl NeighborMap {
    pub fn get(&self, user: UserId) -> Option<&UserNeighbors> {
        self.0.get(&user)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborConfig {
    pub q: usize,
    pub threshold_km: f64,
    pub budget: PrivacyBudget,
}

impl Default for NeighborConfig {
    fn default() -> Self {
        NeighborConfig {
            q: DEFAULT_Q,
            threshold_km: DEFAULT_THRESHOLD_KM,
            budget: PrivacyBudget::default(),
        }
    }
}

/// What one device uploads: perturbed centroids and category distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSummary {
    pub user: UserId,
    pub centroids: Vec<LonLat>,
    pub distribution: Vec<f64>,
}

/// Device-side: extract and perturb one user's summary.
pub fn summarize_device(t: &Trajectory, catalog: &PoiCatalog, cfg: &NeighborConfig, seed: u64) -> Result<DeviceSummary> {
    let mut rng = derive_rng(seed, "neighbors", t.user);
    let cs = user_centroids(t, catalog, cfg.threshold_km, &mut rng)?;
    let centroids = privacy::perturb_centroids(&cs.centroids, &cfg.budget, &mut rng)?;
    let counts = category_counts(&t.checkins, catalog)?;
    let distribution = privacy::perturb_counts(&counts, &cfg.budget, &mut rng)?;
    Ok(DeviceSummary { user: t.user, centroids, distribution })
}

/// Server-side: distance matrices over the uploaded summaries, then the
/// q nearest users under each.
pub fn assign_neighbors(summaries: &[DeviceSummary], q: usize) -> Result<NeighborMap> {
    let ids: Vec<UserId> = summaries.iter().map(|s| s.user).collect();
    let centroids: Vec<Vec<LonLat>> = summaries.iter().map(|s| s.centroids.clone()).collect();
    let dists: Vec<Vec<f64>> = summaries.iter().map(|s| s.distribution.clone()).collect();
    let (geo, cat) = build_matrices(&centroids, &dists)?;
    let mut out = BTreeMap::new();
    for (n, &user) in ids.iter().enumerate() {
        let entry = if ids.len() < 2 {
            UserNeighbors::default()
        } else {
            UserNeighbors {
                geo: top_q_neighbors(&geo, n, q, &ids)?,
                cat: top_q_neighbors(&cat, n, q, &ids)?,
            }
        };
        out.insert(user, entry);
    }
    Ok(NeighborMap(out))
}

pub fn identify_neighbors(
    trajectories: &[Trajectory],
    catalog: &PoiCatalog,
    cfg: &NeighborConfig,
    seed: u64,
) -> Result<NeighborMap> {
    cfg.budget.validate()?;
    let summarize = |t: &Trajectory| summarize_device(t, catalog, cfg, seed);
    #[cfg(feature = "parallel")]
    let summaries: Vec<DeviceSummary> = {
        use rayon::prelude::*;
        trajectories.par_iter().map(summarize).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let summaries: Vec<DeviceSummary> = trajectories.iter().map(summarize).collect::<Result<_>>()?;
    assign_neighbors(&summaries, cfg.q)
}
