//! Check-in datasets: CSV ingestion, sparsity filtering, leave-one-out
//! splitting, weekly time slots and a planted-structure synthetic generator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{self, LonLat};

pub type UserId = u64;
pub type PoiId = u64;
pub type CategoryId = u32;

/// Number of weekly hour slots.
pub const TIME_SLOTS: usize = 7 * 24;

/// Sequences longer than this keep only their most recent check-ins.
pub const DEFAULT_SEQ_CAP: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: PoiId,
    pub lon: f64,
    pub lat: f64,
    pub category: CategoryId,
}

impl Poi {
    pub fn lon_lat(&self) -> LonLat {
        (self.lon, self.lat)
    }
}

/// Public POI metadata, addressed internally by dense index.
#[derive(Clone, Debug)]
pub struct PoiCatalog {
    pois: Vec<Poi>,
    index: HashMap<PoiId, usize>,
    categories: Vec<CategoryId>,
    poi_category: Vec<usize>,
}

impl PartialEq for PoiCatalog {
    fn eq(&self, other: &Self) -> bool {
        self.pois == other.pois
    }
}

impl PoiCatalog {
    pub fn new(pois: Vec<Poi>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pois.len());
        for (i, p) in pois.iter().enumerate() {
            if !(-180.0..=180.0).contains(&p.lon) || !(-90.0..=90.0).contains(&p.lat) {
                return Err(Error::Contract(format!(
                    "POI {} has out-of-range coordinates ({}, {})",
                    p.id, p.lon, p.lat
                )));
            }
            if index.insert(p.id, i).is_some() {
                return Err(Error::Contract(format!("duplicate POI id {}", p.id)));
            }
        }
        let mut categories: Vec<CategoryId> = pois.iter().map(|p| p.category).collect();
        categories.sort_unstable();
        categories.dedup();
        let poi_category = pois
            .iter()
            .map(|p| categories.binary_search(&p.category).expect("category listed"))
            .collect();
        Ok(PoiCatalog {
            pois,
            index,
            categories,
            poi_category,
        })
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    pub fn pois(&self) -> &[Poi] {
        &self.pois
    }

    pub fn poi(&self, idx: usize) -> &Poi {
        &self.pois[idx]
    }

    pub fn index_of(&self, id: PoiId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn lon_lat(&self, idx: usize) -> LonLat {
        self.pois[idx].lon_lat()
    }

    /// Sorted category identifiers present in the catalog.
    pub fn categories(&self) -> &[CategoryId] {
        &self.categories
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    /// Dense category index of the POI at `idx`.
    pub fn category_of(&self, idx: usize) -> usize {
        self.poi_category[idx]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckIn {
    pub user: UserId,
    pub poi: PoiId,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user: UserId,
    pub checkins: Vec<CheckIn>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.checkins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkins.is_empty()
    }

    /// The most recent `cap` check-ins.
    pub fn capped(&self, cap: usize) -> &[CheckIn] {
        let start = self.checkins.len().saturating_sub(cap);
        &self.checkins[start..]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub catalog: PoiCatalog,
    /// One per user, ascending by user id.
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    /// Groups check-ins by user and sorts each trajectory by time. Every
    /// referenced POI must be in `catalog`.
    pub fn from_checkins(catalog: PoiCatalog, checkins: Vec<CheckIn>) -> Result<Self> {
        let mut by_user: BTreeMap<UserId, Vec<CheckIn>> = BTreeMap::new();
        for (i, c) in checkins.into_iter().enumerate() {
            if catalog.index_of(c.poi).is_none() {
                return Err(Error::UnknownPoi {
                    line: i as u64 + 1,
                    poi: c.poi,
                });
            }
            if c.timestamp < 0 {
                return Err(Error::Contract(format!("negative timestamp {}", c.timestamp)));
            }
            by_user.entry(c.user).or_default().push(c);
        }
        let trajectories = by_user
            .into_iter()
            .map(|(user, mut checkins)| {
                checkins.sort_by_key(|c| c.timestamp);
                Trajectory { user, checkins }
            })
            .collect();
        Ok(Dataset {
            catalog,
            trajectories,
        })
    }

    pub fn n_users(&self) -> usize {
        self.trajectories.len()
    }

    pub fn n_pois(&self) -> usize {
        self.catalog.len()
    }

    pub fn n_categories(&self) -> usize {
        self.catalog.n_categories()
    }

    pub fn n_checkins(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn trajectory(&self, user: UserId) -> Option<&Trajectory> {
        self.trajectories
            .binary_search_by_key(&user, |t| t.user)
            .ok()
            .map(|i| &self.trajectories[i])
    }
}

fn parse_field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    idx: usize,
    name: &str,
    file: &str,
    line: u64,
) -> Result<T> {
    let raw = rec.get(idx).ok_or_else(|| Error::Parse {
        file: file.into(),
        line,
        msg: format!("missing field `{name}`"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        file: file.into(),
        line,
        msg: format!("invalid `{name}`: {raw:?}"),
    })
}

fn column(headers: &csv::StringRecord, name: &str, file: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Parse {
            file: file.into(),
            line: 1,
            msg: format!("header lacks `{name}`"),
        })
}

pub fn read_catalog(path: &Path) -> Result<PoiCatalog> {
    let file = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let (c_id, c_lat, c_lon, c_cat) = (
        column(&headers, "poi_id", &file)?,
        column(&headers, "lat", &file)?,
        column(&headers, "lon", &file)?,
        column(&headers, "category_id", &file)?,
    );
    let mut pois = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        pois.push(Poi {
            id: parse_field(&rec, c_id, "poi_id", &file, line)?,
            lat: parse_field(&rec, c_lat, "lat", &file, line)?,
            lon: parse_field(&rec, c_lon, "lon", &file, line)?,
            category: parse_field(&rec, c_cat, "category_id", &file, line)?,
        });
    }
    PoiCatalog::new(pois)
}

/// Reads a check-in CSV and a POI catalog CSV into a [`Dataset`].
pub fn load_checkins(checkin_file: &Path, poi_file: &Path) -> Result<Dataset> {
    let catalog = read_catalog(poi_file)?;
    let file = checkin_file.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(checkin_file)?;
    let headers = rdr.headers()?.clone();
    let (c_user, c_poi, c_ts) = (
        column(&headers, "user_id", &file)?,
        column(&headers, "poi_id", &file)?,
        column(&headers, "timestamp", &file)?,
    );
    let mut checkins = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let c = CheckIn {
            user: parse_field(&rec, c_user, "user_id", &file, line)?,
            poi: parse_field(&rec, c_poi, "poi_id", &file, line)?,
            timestamp: parse_field(&rec, c_ts, "timestamp", &file, line)?,
        };
        if catalog.index_of(c.poi).is_none() {
            return Err(Error::UnknownPoi { line, poi: c.poi });
        }
        if c.timestamp < 0 {
            return Err(Error::Parse {
                file,
                line,
                msg: "negative timestamp".into(),
            });
        }
        checkins.push(c);
    }
    Dataset::from_checkins(catalog, checkins)
}

/// Writes the two CSV files read by [`load_checkins`].
pub fn write_dataset(d: &Dataset, checkin_file: &Path, poi_file: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(poi_file)?;
    w.write_record(["poi_id", "lat", "lon", "category_id"])?;
    for p in d.catalog.pois() {
        w.write_record([
            p.id.to_string(),
            p.lat.to_string(),
            p.lon.to_string(),
            p.category.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(checkin_file)?;
    w.write_record(["user_id", "poi_id", "timestamp"])?;
    for t in &d.trajectories {
        for c in &t.checkins {
            w.write_record([c.user.to_string(), c.poi.to_string(), c.timestamp.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Drops users with fewer than `min_user_checkins` check-ins and POIs with
/// fewer than `min_poi_visits` visits, repeating until neither rule removes
/// anything.
pub fn filter_sparse(d: &Dataset, min_user_checkins: usize, min_poi_visits: usize) -> Result<Dataset> {
    if min_user_checkins == 0 || min_poi_visits == 0 {
        return Err(Error::Config("sparsity thresholds must be >= 1".into()));
    }
    let mut trajectories = d.trajectories.clone();
    loop {
        let before: usize = trajectories.iter().map(Trajectory::len).sum::<usize>() + trajectories.len();

        trajectories.retain(|t| t.len() >= min_user_checkins);
        let mut visits: HashMap<PoiId, usize> = HashMap::new();
        for c in trajectories.iter().flat_map(|t| &t.checkins) {
            *visits.entry(c.poi).or_default() += 1;
        }
        for t in &mut trajectories {
            t.checkins.retain(|c| visits[&c.poi] >= min_poi_visits);
        }
        trajectories.retain(|t| !t.is_empty());

        let after: usize = trajectories.iter().map(Trajectory::len).sum::<usize>() + trajectories.len();
        if after == before {
            break;
        }
    }
    if trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let alive: HashSet<PoiId> = trajectories
        .iter()
        .flat_map(|t| t.checkins.iter().map(|c| c.poi))
        .collect();
    let pois = d
        .catalog
        .pois()
        .iter()
        .filter(|p| alive.contains(&p.id))
        .cloned()
        .collect();
    Ok(Dataset {
        catalog: PoiCatalog::new(pois)?,
        trajectories,
    })
}

/// Held-out last check-in per user, aligned with the train trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Vec<CheckIn>,
}

/// Caps each trajectory to its most recent `cap` check-ins, then holds out
/// the last one.
pub fn split_leave_one_out(d: &Dataset, cap: usize) -> Result<Split> {
    if cap < 2 {
        return Err(Error::Config("sequence cap must be >= 2".into()));
    }
    let mut train = Vec::with_capacity(d.trajectories.len());
    let mut test = Vec::with_capacity(d.trajectories.len());
    for t in &d.trajectories {
        if t.len() < 2 {
            return Err(Error::Split {
                user: t.user,
                len: t.len(),
            });
        }
        let capped = t.capped(cap);
        let (head, last) = capped.split_at(capped.len() - 1);
        train.push(Trajectory {
            user: t.user,
            checkins: head.to_vec(),
        });
        test.push(last[0]);
    }
    Ok(Split {
        train: Dataset {
            catalog: d.catalog.clone(),
            trajectories: train,
        },
        test,
    })
}

/// Weekly hour slot in `[0, 168)`: `weekday·24 + hour`, Monday = 0, UTC.
pub fn discretize_time(timestamp: i64) -> usize {
    const DAY: i64 = 86_400;
    let days = timestamp.div_euclid(DAY);
    let hour = timestamp.rem_euclid(DAY) / 3600;
    // 1970-01-01 was a Thursday
    let weekday = (days + 3).rem_euclid(7);
    (weekday * 24 + hour) as usize
}

/// Synthetic benchmark shape. Keys mirror the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub pois: usize,
    pub categories: usize,
    pub clusters: usize,
    /// Category-preference profiles shared by groups of users.
    pub profiles: usize,
    pub checkins_per_user: usize,
    pub cluster_radius_km: f64,
    /// Distance between neighbouring cluster centres.
    pub cluster_spacing_km: f64,
    /// Weight multiplier on POIs the user has already visited.
    pub revisit_weight: f64,
    /// Visit weight of categories outside a user's profile (profile categories weigh 1).
    pub off_profile_weight: f64,
    /// Exponent on the random POI popularity `1/(0.05 + U)`.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 50,
            pois: 300,
            categories: 10,
            clusters: 2,
            profiles: 5,
            checkins_per_user: 20,
            cluster_radius_km: 8.0,
            cluster_spacing_km: 40.0,
            revisit_weight: 0.1,
            off_profile_weight: 0.5,
            popularity_skew: 2.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.pois == 0 {
            return Err(Error::Config("synthetic dataset needs users > 0 and pois > 0".into()));
        }
        if self.categories == 0 || self.clusters == 0 || self.profiles == 0 {
            return Err(Error::Config("categories, clusters and profiles must be > 0".into()));
        }
        if self.checkins_per_user < 2 {
            return Err(Error::Config("checkins_per_user must be >= 2".into()));
        }
        if !(self.cluster_radius_km > 0.0) {
            return Err(Error::Config("cluster_radius_km must be > 0".into()));
        }
        if !(self.cluster_spacing_km >= 0.0 && self.cluster_spacing_km <= 5000.0) {
            return Err(Error::Config("cluster_spacing_km must lie in [0, 5000]".into()));
        }
        if !(self.revisit_weight > 0.0 && self.revisit_weight.is_finite()) {
            return Err(Error::Config("revisit_weight must be > 0".into()));
        }
        if !(self.off_profile_weight > 0.0 && self.off_profile_weight.is_finite()) {
            return Err(Error::Config("off_profile_weight must be > 0".into()));
        }
        if !(self.popularity_skew >= 0.0 && self.popularity_skew <= 4.0) {
            return Err(Error::Config("popularity_skew must lie in [0, 4]".into()));
        }
        if self.clusters > 64 {
            return Err(Error::Config("at most 64 clusters are supported".into()));
        }
        Ok(())
    }

    /// Centre of cluster `k`: an 8-wide grid with `cluster_spacing_km`
    /// between neighbouring centres, anchored at 40°N 100°W.
    pub fn cluster_center(&self, k: usize) -> LonLat {
        let east = self.cluster_spacing_km * (k % 8) as f64;
        let north = self.cluster_spacing_km * (k / 8) as f64;
        geo::offset_km((-100.0, 40.0), east, north)
    }

    /// Cluster a synthetic user lives in.
    pub fn user_cluster(&self, user: usize) -> usize {
        user % self.clusters
    }

    /// Category profile of a synthetic user.
    pub fn user_profile(&self, user: usize) -> usize {
        (user / self.clusters) % self.profiles
    }

    /// Visit weight a profile assigns to a category.
    pub fn profile_weight(&self, profile: usize, category: usize) -> f64 {
        if category % self.profiles == profile {
            1.0
        } else {
            self.off_profile_weight
        }
    }
}

/// Generates a dataset whose users each live in one geographic cluster and
/// follow one category profile, so geographical and semantic neighbours
/// exist by construction.
///
/// POIs are spread uniformly over discs of `cluster_radius_km` around the
/// cluster centres and carry a random popularity. Each user gets a home
/// point inside their cluster and picks every POI with probability
/// proportional to popularity × profile weight × a distance decay from
/// home, scaled by `revisit_weight` for POIs already in their history.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pois = Vec::with_capacity(cfg.pois);
    let mut popularity = Vec::with_capacity(cfg.pois);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.clusters];
    for p in 0..cfg.pois {
        let k = p % cfg.clusters;
        let center = cfg.cluster_center(k);
        let loc = loop {
            let r = cfg.cluster_radius_km * rng.gen::<f64>().sqrt();
            let theta = rng.gen::<f64>() * std::f64::consts::TAU;
            let loc = geo::offset_km(center, r * theta.cos(), r * theta.sin());
            if geo::haversine(center, loc) <= cfg.cluster_radius_km {
                break loc;
            }
        };
        let category = ((p / cfg.clusters) % cfg.categories) as CategoryId;
        pois.push(Poi {
            id: p as PoiId,
            lon: loc.0,
            lat: loc.1,
            category,
        });
        popularity.push((1.0 / (0.05 + rng.gen::<f64>())).powf(cfg.popularity_skew));
        members[k].push(p);
    }

    let decay_km = (cfg.cluster_radius_km / 2.0).max(1e-3);
    let base_ts: i64 = 1_609_718_400; // 2021-01-04T00:00:00Z, a Monday
    let mut checkins = Vec::with_capacity(cfg.users * cfg.checkins_per_user);
    for u in 0..cfg.users {
        let cluster = &members[cfg.user_cluster(u)];
        if cluster.is_empty() {
            return Err(Error::Config(format!(
                "cluster {} has no POIs; raise `pois`",
                cfg.user_cluster(u)
            )));
        }
        let profile = cfg.user_profile(u);
        let affinity: Vec<f64> = cluster
            .iter()
            .map(|&p| popularity[p] * cfg.profile_weight(profile, pois[p].category as usize))
            .collect();

        let home = {
            let center = cfg.cluster_center(cfg.user_cluster(u));
            let r = 0.5 * cfg.cluster_radius_km * rng.gen::<f64>().sqrt();
            let theta = rng.gen::<f64>() * std::f64::consts::TAU;
            geo::offset_km(center, r * theta.cos(), r * theta.sin())
        };
        let base: Vec<f64> = cluster
            .iter()
            .zip(&affinity)
            .map(|(&p, &a)| a * (-geo::haversine(home, pois[p].lon_lat()) / decay_km).exp())
            .collect();

        let mut ts = base_ts + rng.gen_range(0..14 * 24) * 3600;
        let mut visited = vec![false; cluster.len()];
        for _ in 0..cfg.checkins_per_user {
            let weights: Vec<f64> = base
                .iter()
                .zip(&visited)
                .map(|(&w, &seen)| if seen { w * cfg.revisit_weight } else { w })
                .collect();
            let slot = WeightedIndex::new(&weights)
                .map_err(|e| Error::Config(e.to_string()))?
                .sample(&mut rng);
            visited[slot] = true;
            let pick = cluster[slot];
            checkins.push(CheckIn {
                user: u as UserId,
                poi: pick as PoiId,
                timestamp: ts,
            });
            ts += rng.gen_range(1..=36) * 3600 + rng.gen_range(0..3600);
        }
    }
    Dataset::from_checkins(PoiCatalog::new(pois)?, checkins)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn slot_is_weekly_periodic(ts in 0i64..4_000_000_000, weeks in 0i64..100) {
            let s = discretize_time(ts);
            prop_assert!(s < TIME_SLOTS);
            prop_assert_eq!(s, discretize_time(ts + weeks * 604_800));
        }

        #[test]
        fn split_partitions_capped_trajectory(len in 2usize..400, cap in 2usize..250) {
            let catalog = PoiCatalog::new(vec![Poi { id: 0, lon: 0.0, lat: 0.0, category: 0 }]).unwrap();
            let cks = (0..len).map(|i| CheckIn { user: 1, poi: 0, timestamp: i as i64 }).collect();
            let d = Dataset::from_checkins(catalog, cks).unwrap();
            let s = split_leave_one_out(&d, cap).unwrap();
            let mut joined = s.train.trajectories[0].checkins.clone();
            joined.push(s.test[0]);
            prop_assert_eq!(&joined[..], d.trajectories[0].capped(cap));
        }
    }
}
