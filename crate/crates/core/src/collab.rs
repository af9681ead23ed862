//! Decentralized round engine: local training, perturbed weight exchange,
//! affinity-weighted aggregation over geographical and semantic neighbors,
//! and contrastive fusion of the two enhanced models.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CheckIn, PoiCatalog, UserId};
use crate::error::{Error, Result};
use crate::neighbors::{NeighborKind, NeighborMap};
use crate::numerics::{self, Graph, Matrix, NodeId, Optimizer, OptimizerKind, ParamStore};
use crate::privacy::{self, PrivacyBudget};
use crate::recommender::{self, CoreParams, LocalData, TrainConfig, INIT_BOUND, POI_EMB};
use crate::seed::{derive_rng, StreamRng};

pub const W_COMB: &str = "w_comb";
const GEO_EMB: &str = "geo_emb";
const CAT_EMB: &str = "cat_emb";

/// `1 / (1 + dist)`.
pub fn affinity(dist: f64) -> Result<f64> {
    if !(dist >= 0.0) {
        return Err(Error::Contract(format!("distance must be >= 0, got {dist}")));
    }
    Ok(1.0 / (1.0 + dist))
}

/// Affinities normalised over the neighbor list.
pub fn neighbor_weights(dists: &[f64]) -> Result<Vec<f64>> {
    if dists.is_empty() {
        return Err(Error::Contract("neighbor list is empty".into()));
    }
    let s = dists.iter().map(|&d| affinity(d)).collect::<Result<Vec<_>>>()?;
    let z: f64 = s.iter().sum();
    Ok(s.into_iter().map(|x| x / z).collect())
}

/// `(1−μ)·own + μ·Σ w_m·Θ_m`, entrywise.
pub fn aggregate(own: &CoreParams, snapshots: &[(&CoreParams, f64)], mu: f64) -> Result<CoreParams> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Config(format!("mu must lie in [0, 1], got {mu}")));
    }
    let wsum: f64 = snapshots.iter().map(|s| s.1).sum();
    if (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("neighbor weights sum to {wsum}, not 1")));
    }
    let mut store = own.store().clone();
    store.scale(1.0 - mu);
    for (p, w) in snapshots {
        store.add_scaled(p.store(), mu * w)?;
    }
    own.with_store(store)
}

/// Per-device bilinear scorer used to fuse the two enhanced models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionHead {
    pub w_comb: Matrix,
}

impl FusionHead {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        FusionHead {
            w_comb: Matrix::uniform(dim, dim, INIT_BOUND, rng),
        }
    }
}

/// One anchor POI with its swapped-in negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct CombSample {
    pub anchor: usize,
    /// Other POIs whose semantic-model embedding replaces the anchor's.
    pub neg_cat: Vec<usize>,
    /// Other POIs whose geographical-model embedding replaces the anchor's.
    pub neg_geo: Vec<usize>,
}

fn others<R: Rng + ?Sized>(anchor: usize, n_pois: usize, k: usize, rng: &mut R) -> Vec<usize> {
    index::sample(rng, n_pois - 1, k)
        .into_iter()
        .map(|i| if i >= anchor { i + 1 } else { i })
        .collect()
}

pub fn sample_comb<R: Rng + ?Sized>(
    anchors: &[usize],
    n_pois: usize,
    n1: usize,
    n2: usize,
    rng: &mut R,
) -> Result<Vec<CombSample>> {
    if n1 == 0 || n2 == 0 || n_pois <= n1.max(n2) {
        return Err(Error::Config(format!(
            "fusion negatives need 1 <= N1, N2 < |P|; got N1={n1}, N2={n2}, |P|={n_pois}"
        )));
    }
    Ok(anchors
        .iter()
        .map(|&a| CombSample {
            anchor: a,
            neg_cat: others(a, n_pois, n1, rng),
            neg_geo: others(a, n_pois, n2, rng),
        })
        .collect())
}

/// Summed fusion loss over a store with `geo_emb`, `cat_emb` and `w_comb`.
fn comb_loss_node(g: &mut Graph<'_>, samples: &[CombSample]) -> Result<NodeId> {
    let n1 = samples.first().map_or(0, |s| s.neg_cat.len());
    let n2 = samples.first().map_or(0, |s| s.neg_geo.len());
    if n1 == 0 || samples.iter().any(|s| s.neg_cat.len() != n1 || s.neg_geo.len() != n2) {
        return Err(Error::Contract("fusion samples need fixed, non-zero negative counts".into()));
    }
    let n = samples.len();
    let geo = g.param(GEO_EMB)?;
    let cat = g.param(CAT_EMB)?;
    let w = g.param(W_COMB)?;
    let anchors: Vec<usize> = samples.iter().map(|s| s.anchor).collect();

    // σ(g_iᵀ W c_i)
    let gi = g.gather_rows(geo, &anchors);
    let gw = g.matmul(gi, w);
    let ci = g.gather_rows(cat, &anchors);
    let pos = g.row_dot(gw, ci);
    let pos = g.sigmoid(pos);

    // σ(g_iᵀ W c_j) over N1 semantic negatives
    let rep1: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(n1)).collect();
    let idx1: Vec<usize> = samples.iter().flat_map(|s| s.neg_cat.iter().copied()).collect();
    let gw_rep = g.gather_rows(gw, &rep1);
    let cj = g.gather_rows(cat, &idx1);
    let neg1 = g.row_dot(gw_rep, cj);
    let neg1 = g.sigmoid(neg1);
    let neg1 = g.exp(neg1);
    let neg1 = g.reshape(neg1, n, n1);
    let neg1 = g.sum_rows(neg1);

    // σ(g_jᵀ W c_i) over N2 geographical negatives
    let rep2: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(n2)).collect();
    let idx2: Vec<usize> = samples.iter().flat_map(|s| s.neg_geo.iter().copied()).collect();
    let gj = g.gather_rows(geo, &idx2);
    let gjw = g.matmul(gj, w);
    let ci_rep = g.gather_rows(ci, &rep2);
    let neg2 = g.row_dot(gjw, ci_rep);
    let neg2 = g.sigmoid(neg2);
    let neg2 = g.exp(neg2);
    let neg2 = g.reshape(neg2, n, n2);
    let neg2 = g.sum_rows(neg2);

    let denom = g.add(neg1, neg2);
    let log_denom = g.ln(denom);
    let per_anchor = g.sub(log_denom, pos);
    Ok(g.sum(per_anchor))
}

fn comb_store(geo: &CoreParams, cat: &CoreParams, head: &FusionHead) -> Result<ParamStore> {
    if geo.dim() != cat.dim() || geo.n_pois() != cat.n_pois() || head.w_comb.shape() != (geo.dim(), geo.dim()) {
        return Err(Error::Contract("fusion inputs disagree in shape".into()));
    }
    let mut s = ParamStore::new();
    s.register(GEO_EMB, geo.poi_emb().clone())?;
    s.register(CAT_EMB, cat.poi_emb().clone())?;
    s.register(W_COMB, head.w_comb.clone())?;
    Ok(s)
}

/// L_comb summed over `samples`.
pub fn comb_loss(geo: &CoreParams, cat: &CoreParams, head: &FusionHead, samples: &[CombSample]) -> Result<f64> {
    let store = comb_store(geo, cat, head)?;
    numerics::eval(&store, |g| comb_loss_node(g, samples))
}

/// Gradient of L_comb with respect to both embedding tables and `W_comb`,
/// keyed `geo_emb`, `cat_emb`, `w_comb`.
pub fn comb_loss_grad(
    geo: &CoreParams,
    cat: &CoreParams,
    head: &FusionHead,
    samples: &[CombSample],
) -> Result<(f64, numerics::GradStore)> {
    let store = comb_store(geo, cat, head)?;
    numerics::grad(&store, |g| comb_loss_node(g, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub n1: usize,
    pub n2: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            steps: 5,
            lr: 0.002,
            optimizer: OptimizerKind::Sgd,
            n1: 5,
            n2: 5,
        }
    }
}

/// Runs `cfg.steps` descent steps on L_comb (both embedding tables and the
/// head), then averages the two models. Returns the merged model and the
/// mean per-anchor loss before the last step, if any step ran.
pub fn finetune_and_merge<R: Rng + ?Sized>(
    geo: &CoreParams,
    cat: &CoreParams,
    head: &mut FusionHead,
    anchors: &[usize],
    cfg: &FusionConfig,
    rng: &mut R,
) -> Result<(CoreParams, Option<f64>)> {
    let mut geo = geo.clone();
    let mut cat = cat.clone();
    let mut last = None;
    if cfg.steps > 0 && !anchors.is_empty() {
        let mut store = comb_store(&geo, &cat, head)?;
        let mut opt = Optimizer::new(cfg.optimizer, &store);
        for _ in 0..cfg.steps {
            let samples = sample_comb(anchors, geo.n_pois(), cfg.n1, cfg.n2, rng)?;
            let (l, grads) = numerics::grad(&store, |g| comb_loss_node(g, &samples))?;
            last = Some(l / anchors.len() as f64);
            store = opt.step(&store, &grads, cfg.lr)?;
        }
        geo.replace(POI_EMB, store.remove(GEO_EMB).expect("registered"))?;
        cat.replace(POI_EMB, store.remove(CAT_EMB).expect("registered"))?;
        head.w_comb = store.remove(W_COMB).expect("registered");
    }
    let mut merged = geo.into_store();
    merged.add_scaled(cat.store(), 1.0)?;
    merged.scale(0.5);
    Ok((cat.with_store(merged)?, last))
}

/// A device's published, already-perturbed weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub sender: UserId,
    pub round: u64,
    pub params: CoreParams,
}

impl ParamSnapshot {
    pub fn to_wire(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_wire(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollabSwitches {
    /// Exchange with neighbors at all; off reduces a round to local training.
    pub neighbors: bool,
    pub geo: bool,
    pub sem: bool,
    /// Contrastive fusion before averaging; off means plain averaging.
    pub mim: bool,
}

impl Default for CollabSwitches {
    fn default() -> Self {
        CollabSwitches {
            neighbors: true,
            geo: true,
            sem: true,
            mim: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollabConfig {
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub mu: f64,
    pub budget: PrivacyBudget,
    pub switches: CollabSwitches,
    pub max_rounds: usize,
    /// Stop once the mean local loss changes by less than this, relatively.
    pub tolerance: f64,
    pub parallel: bool,
}

impl Default for CollabConfig {
    fn default() -> Self {
        CollabConfig {
            train: TrainConfig::default(),
            fusion: FusionConfig::default(),
            mu: 0.3,
            budget: PrivacyBudget::default(),
            switches: CollabSwitches::default(),
            max_rounds: 50,
            tolerance: 1e-4,
            parallel: true,
        }
    }
}

impl CollabConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("mu must lie in [0, 1], got {}", self.mu)));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.train.lr >= 0.0 && self.fusion.lr >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        self.budget.validate()
    }
}

/// One simulated device. The trajectory stays inside.
#[derive(Clone, Debug)]
pub struct DeviceState {
    pub user: UserId,
    pub data: LocalData,
    /// POIs in the device's own training data, used as fusion anchors.
    pub anchors: Vec<usize>,
    pub params: CoreParams,
    pub head: FusionHead,
    pub rng: StreamRng,
    pub round: u64,
    opt: Optimizer,
}

impl DeviceState {
    pub fn new(
        user: UserId,
        checkins: &[CheckIn],
        catalog: &PoiCatalog,
        init: &CoreParams,
        cfg: &CollabConfig,
        seed: u64,
    ) -> Result<Self> {
        let data = LocalData::new(checkins, catalog)?;
        let mut anchors = data.seq.pois.clone();
        anchors.sort_unstable();
        anchors.dedup();
        let mut rng = derive_rng(seed, "device", user);
        let head = FusionHead::init(init.dim(), &mut rng);
        Ok(DeviceState {
            user,
            data,
            anchors,
            params: init.clone(),
            head,
            rng,
            round: 0,
            opt: Optimizer::new(cfg.train.optimizer, init.store()),
        })
    }
}

/// One device per trajectory, all starting from `init`.
pub fn init_devices(
    trajectories: &[crate::data::Trajectory],
    catalog: &PoiCatalog,
    init: &CoreParams,
    cfg: &CollabConfig,
    seed: u64,
) -> Result<Vec<DeviceState>> {
    trajectories
        .iter()
        .map(|t| DeviceState::new(t.user, &t.checkins, catalog, init, cfg, seed))
        .collect()
}

/// Wall clock for round records; `wasm32-unknown-unknown` has no clock and reads 0.
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    fn start() -> Self {
        Stopwatch(std::time::Instant::now())
    }
    #[cfg(target_arch = "wasm32")]
    fn start() -> Self {
        Stopwatch()
    }
    #[cfg(not(target_arch = "wasm32"))]
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
    #[cfg(target_arch = "wasm32")]
    fn seconds(&self) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub user: UserId,
    pub round: u64,
    pub local_loss: f64,
    pub comb_loss: Option<f64>,
    pub wall_time: f64,
}

fn for_each_device<T, F>(devices: &mut [DeviceState], parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut DeviceState) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return devices.par_iter_mut().map(f).collect();
    }
    let _ = parallel;
    devices.iter_mut().map(f).collect()
}

fn local_phase(d: &mut DeviceState, catalog: &PoiCatalog, cfg: &CollabConfig) -> Result<f64> {
    let (p, stats) = recommender::train_local_epoch_with(&d.params, &d.data, catalog, &cfg.train, &mut d.opt, &mut d.rng)?;
    d.params = p;
    Ok(stats.mean_loss)
}

fn enhanced(
    d: &DeviceState,
    kind: NeighborKind,
    neighbors: &NeighborMap,
    mailbox: &BTreeMap<UserId, ParamSnapshot>,
    mu: f64,
) -> Result<Option<CoreParams>> {
    let list = neighbors.get(d.user).map(|n| n.get(kind)).unwrap_or(&[]);
    if list.is_empty() {
        return Ok(None);
    }
    let dists: Vec<f64> = list.iter().map(|&(_, dist)| dist).collect();
    let weights = neighbor_weights(&dists)?;
    let snaps = list
        .iter()
        .zip(weights)
        .map(|(&(id, _), w)| {
            mailbox
                .get(&id)
                .map(|s| (&s.params, w))
                .ok_or(Error::MissingSnapshot { user: d.user, neighbor: id })
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&d.params, &snaps, mu).map(Some)
}

fn exchange_phase(
    d: &mut DeviceState,
    neighbors: &NeighborMap,
    mailbox: &BTreeMap<UserId, ParamSnapshot>,
    cfg: &CollabConfig,
) -> Result<Option<f64>> {
    let sw = cfg.switches;
    let geo = if sw.geo { enhanced(d, NeighborKind::Geographical, neighbors, mailbox, cfg.mu)? } else { None };
    let sem = if sw.sem { enhanced(d, NeighborKind::Semantic, neighbors, mailbox, cfg.mu)? } else { None };
    let (next, comb) = match (geo, sem) {
        (Some(g), Some(c)) => {
            let mut fusion = cfg.fusion.clone();
            if !sw.mim {
                fusion.steps = 0;
            }
            finetune_and_merge(&g, &c, &mut d.head, &d.anchors, &fusion, &mut d.rng)?
        }
        (Some(one), None) | (None, Some(one)) => (one, None),
        (None, None) => return Ok(None),
    };
    next.store().check_finite()?;
    d.params = next;
    Ok(comb)
}

/// One barrier-synchronised round: every device trains locally, then every
/// device publishes one perturbed snapshot, then every device aggregates
/// and fuses from the snapshots of its neighbors.
pub fn run_round(
    devices: &mut [DeviceState],
    neighbors: &NeighborMap,
    catalog: &PoiCatalog,
    cfg: &CollabConfig,
) -> Result<Vec<RoundRecord>> {
    cfg.validate()?;
    let started = Stopwatch::start();
    let losses = for_each_device(devices, cfg.parallel, |d| local_phase(d, catalog, cfg))?;

    let mut combs = vec![None; devices.len()];
    if cfg.switches.neighbors && (cfg.switches.geo || cfg.switches.sem) {
        let snapshots = for_each_device(devices, cfg.parallel, |d| {
            let n_pos = d.data.n_pos().max(1);
            let params = privacy::perturb_weights(&d.params, &cfg.budget, n_pos, &mut d.rng)?;
            Ok(ParamSnapshot { sender: d.user, round: d.round, params })
        })?;
        let mailbox: BTreeMap<UserId, ParamSnapshot> = snapshots.into_iter().map(|s| (s.sender, s)).collect();
        combs = for_each_device(devices, cfg.parallel, |d| exchange_phase(d, neighbors, &mailbox, cfg))?;
    }

    let wall_time = started.seconds();
    Ok(devices
        .iter_mut()
        .zip(losses.into_iter().zip(combs))
        .map(|(d, (local_loss, comb_loss))| {
            let rec = RoundRecord { user: d.user, round: d.round, local_loss, comb_loss, wall_time };
            d.round += 1;
            rec
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<RoundRecord>,
    /// Mean local loss over devices, one entry per round.
    pub mean_local_loss: Vec<f64>,
    pub converged: bool,
}

/// Repeats [`run_round`] up to `cfg.max_rounds` times, stopping early once
/// the mean local loss settles.
pub fn run_training(
    devices: &mut [DeviceState],
    neighbors: &NeighborMap,
    catalog: &PoiCatalog,
    cfg: &CollabConfig,
) -> Result<TrainingLog> {
    let mut log = TrainingLog::default();
    if devices.is_empty() {
        return Ok(log);
    }
    for _ in 0..cfg.max_rounds {
        let recs = run_round(devices, neighbors, catalog, cfg)?;
        let mean = recs.iter().map(|r| r.local_loss).sum::<f64>() / recs.len() as f64;
        log.records.extend(recs);
        let prev = log.mean_local_loss.last().copied();
        log.mean_local_loss.push(mean);
        if let Some(prev) = prev {
            if ((prev - mean) / prev.abs().max(f64::MIN_POSITIVE)).abs() < cfg.tolerance {
                log.converged = true;
                break;
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_leave_one_out, SynthConfig};
    use crate::neighbors::{identify_neighbors, NeighborConfig, UserNeighbors};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn affinity_values() {
        assert_eq!(affinity(0.0).unwrap(), 1.0);
        assert_eq!(affinity(1.0).unwrap(), 0.5);
        assert!(affinity(-0.1).is_err());
        let mut r = rng(0);
        let mut xs: Vec<f64> = (0..100).map(|_| r.gen_range(0.0..1e4)).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let s: Vec<f64> = xs.iter().map(|&x| affinity(x).unwrap()).collect();
        assert!(s.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn weight_values() {
        assert_eq!(neighbor_weights(&[3.0]).unwrap(), vec![1.0]);
        assert_eq!(neighbor_weights(&[2.0, 2.0]).unwrap(), vec![0.5, 0.5]);
        let w = neighbor_weights(&[0.0, 1.0]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        let mut r = rng(1);
        for _ in 0..100 {
            let d: Vec<f64> = (0..r.gen_range(1..40)).map(|_| r.gen_range(0.0..50.0)).collect();
            let w = neighbor_weights(&d).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
        }
    }

    fn scalar_params(v: f64) -> CoreParams {
        let mut p = CoreParams::init(3, 2, &mut rng(0));
        p.map_values(|_| v);
        p
    }

    #[test]
    fn aggregate_cases() {
        let own = CoreParams::init(6, 4, &mut rng(2));
        let other = CoreParams::init(6, 4, &mut rng(3));
        assert_eq!(aggregate(&own, &[(&other, 1.0)], 0.0).unwrap(), own);
        assert_eq!(aggregate(&own, &[(&other, 1.0)], 1.0).unwrap(), other);
        let a = aggregate(&scalar_params(1.0), &[(&scalar_params(0.0), 1.0)], 0.3).unwrap();
        assert!(a.store().values().all(|v| (v - 0.7).abs() < 1e-15));
        for mu in [0.0, 0.3, 0.77, 1.0] {
            let same = aggregate(&own, &[(&own, 0.25), (&own, 0.75)], mu).unwrap();
            for (x, y) in same.store().values().zip(own.store().values()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        assert!(aggregate(&own, &[(&other, 0.9)], 0.3).is_err());
        let wrong = CoreParams::init(7, 4, &mut rng(3));
        assert!(aggregate(&own, &[(&wrong, 1.0)], 0.3).is_err());
    }

    fn emb_params(n: usize, d: usize, seed: u64) -> CoreParams {
        CoreParams::init(n, d, &mut rng(seed))
    }

    #[test]
    fn comb_equal_scores_give_log_n() {
        let geo = emb_params(10, 4, 1);
        let cat = emb_params(10, 4, 2);
        let head = FusionHead { w_comb: Matrix::zeros(4, 4) };
        let samples = sample_comb(&[0, 3, 7], 10, 5, 5, &mut rng(0)).unwrap();
        let l = comb_loss(&geo, &cat, &head, &samples).unwrap();
        assert!((l - 3.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn comb_closed_form_limit() {
        // one-dimensional embeddings driving f⁺ → 1 and both f⁻ → 0
        let mut geo = emb_params(2, 1, 0);
        let mut cat = emb_params(2, 1, 0);
        geo.replace(POI_EMB, Matrix::from_vec(2, 1, vec![60.0, -60.0])).unwrap();
        cat.replace(POI_EMB, Matrix::from_vec(2, 1, vec![60.0, -60.0])).unwrap();
        let head = FusionHead { w_comb: Matrix::from_vec(1, 1, vec![1.0]) };
        let samples = vec![CombSample { anchor: 0, neg_cat: vec![1], neg_geo: vec![1] }];
        let l = comb_loss(&geo, &cat, &head, &samples).unwrap();
        let want = 2f64.ln() - 1.0;
        assert!((l - want).abs() < 1e-12, "{l}");
        assert!((want + 0.3069).abs() < 1e-4);
    }

    #[test]
    fn comb_matches_formula_transcription() {
        let geo = emb_params(8, 3, 4);
        let cat = emb_params(8, 3, 5);
        let head = FusionHead::init(3, &mut rng(6));
        let samples = sample_comb(&[1, 2, 5], 8, 2, 3, &mut rng(7)).unwrap();
        let (ge, ce, w) = (geo.poi_emb(), cat.poi_emb(), &head.w_comb);
        let f = |a: usize, b: usize| {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += ge.get(a, i) * w.get(i, j) * ce.get(b, j);
                }
            }
            numerics::sigmoid(acc)
        };
        let want: f64 = samples
            .iter()
            .map(|s| {
                let denom: f64 = s.neg_cat.iter().map(|&j| f(s.anchor, j).exp()).sum::<f64>()
                    + s.neg_geo.iter().map(|&j| f(j, s.anchor).exp()).sum::<f64>();
                -(f(s.anchor, s.anchor).exp() / denom).ln()
            })
            .sum();
        assert!((comb_loss(&geo, &cat, &head, &samples).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn comb_sampling_rules() {
        let s = sample_comb(&[0, 4], 6, 5, 5, &mut rng(1)).unwrap();
        for x in &s {
            assert!(!x.neg_cat.contains(&x.anchor) && !x.neg_geo.contains(&x.anchor));
            assert_eq!(x.neg_cat.len(), 5);
        }
        assert!(matches!(sample_comb(&[0], 5, 5, 5, &mut rng(1)), Err(Error::Config(_))));
    }

    #[test]
    fn merge_without_steps_is_average() {
        let a = emb_params(6, 4, 1);
        let b = emb_params(6, 4, 2);
        let mut head = FusionHead::init(4, &mut rng(0));
        let cfg = FusionConfig { steps: 0, ..FusionConfig::default() };
        let (m, last) = finetune_and_merge(&a, &b, &mut head, &[0, 1], &cfg, &mut rng(0)).unwrap();
        assert!(last.is_none());
        for ((x, y), z) in a.store().values().zip(b.store().values()).zip(m.store().values()) {
            assert_eq!(z, (x + y) / 2.0);
        }
        let (same, _) = finetune_and_merge(&a, &a, &mut head, &[0, 1], &cfg, &mut rng(0)).unwrap();
        assert_eq!(same, a);
    }

    #[test]
    fn finetuning_lowers_comb_loss() {
        let geo = emb_params(30, 8, 1);
        let cat = emb_params(30, 8, 2);
        let head0 = FusionHead::init(8, &mut rng(3));
        let anchors: Vec<usize> = (0..30).step_by(2).collect();
        let samples = sample_comb(&anchors, 30, 5, 5, &mut rng(9)).unwrap();
        let before = comb_loss(&geo, &cat, &head0, &samples).unwrap();

        // replay the finetuning with the fixed sample set to check descent
        let mut store = comb_store(&geo, &cat, &head0).unwrap();
        for _ in 0..20 {
            let (_, g) = numerics::grad(&store, |gr| comb_loss_node(gr, &samples)).unwrap();
            store = numerics::sgd_step(&store, &g, 0.05).unwrap();
        }
        let after = numerics::eval(&store, |gr| comb_loss_node(gr, &samples)).unwrap();
        assert!(after < before, "{after} !< {before}");

        let mut head = head0.clone();
        let cfg = FusionConfig { steps: 3, ..FusionConfig::default() };
        finetune_and_merge(&geo, &cat, &mut head, &anchors, &cfg, &mut rng(4)).unwrap();
        assert_ne!(head, head0, "head persists its update");
    }

    #[test]
    fn snapshot_wire_roundtrip() {
        let s = ParamSnapshot { sender: 9, round: 3, params: emb_params(5, 4, 1) };
        assert_eq!(ParamSnapshot::from_wire(&s.to_wire().unwrap()).unwrap(), s);
    }

    fn setup(users: usize, q: usize, seed: u64) -> (PoiCatalog, Vec<crate::data::Trajectory>, NeighborMap) {
        let d = generate_synthetic(&SynthConfig { users, pois: 80, checkins_per_user: 12, ..SynthConfig::default() }, seed).unwrap();
        let split = split_leave_one_out(&d, 200).unwrap();
        let cfg = NeighborConfig { q, ..NeighborConfig::default() };
        let n = identify_neighbors(&split.train.trajectories, &d.catalog, &cfg, seed).unwrap();
        (d.catalog, split.train.trajectories, n)
    }

    fn small_cfg() -> CollabConfig {
        CollabConfig {
            train: TrainConfig { dropout: 0.0, ..TrainConfig::default() },
            max_rounds: 2,
            ..CollabConfig::default()
        }
    }

    #[test]
    fn rounds_are_reproducible_serial_and_parallel() {
        let (cat, trajs, nb) = setup(6, 3, 1);
        let init = CoreParams::init(cat.len(), 8, &mut rng(0));
        let run = |parallel| {
            let cfg = CollabConfig { parallel, ..small_cfg() };
            let mut devs = init_devices(&trajs, &cat, &init, &cfg, 5).unwrap();
            run_training(&mut devs, &nb, &cat, &cfg).unwrap();
            devs.into_iter().map(|d| d.params).collect::<Vec<_>>()
        };
        let a = run(false);
        assert_eq!(a, run(false));
        assert_eq!(a, run(true));
    }

    #[test]
    fn no_exchange_is_local_training() {
        let (cat, trajs, nb) = setup(4, 2, 2);
        let init = CoreParams::init(cat.len(), 8, &mut rng(0));
        let run = |cfg: CollabConfig, nb: &NeighborMap| {
            let mut devs = init_devices(&trajs, &cat, &init, &cfg, 5).unwrap();
            run_round(&mut devs, nb, &cat, &cfg).unwrap();
            devs.into_iter().map(|d| d.params).collect::<Vec<_>>()
        };
        let off = CollabConfig {
            switches: CollabSwitches { neighbors: false, ..CollabSwitches::default() },
            ..small_cfg()
        };
        let local = run(off, &nb);
        let empty = NeighborMap(nb.0.keys().map(|&u| (u, UserNeighbors::default())).collect());
        assert_eq!(run(small_cfg(), &empty), local);
        // μ=0 with no privacy and no fusion also leaves the local result intact
        let reduced = CollabConfig {
            mu: 0.0,
            budget: PrivacyBudget::disabled(),
            switches: CollabSwitches { mim: false, ..CollabSwitches::default() },
            ..small_cfg()
        };
        let out = run(reduced, &nb);
        // phase 1 consumes the same RNG draws, so the models agree up to averaging rounding
        for (x, y) in out.iter().zip(&local) {
            for (a, b) in x.store().values().zip(y.store().values()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_neighbors_give_the_affine_blend() {
        let (cat, trajs, _) = setup(3, 2, 3);
        let init = CoreParams::init(cat.len(), 8, &mut rng(0));
        let cfg = CollabConfig {
            budget: PrivacyBudget::disabled(),
            switches: CollabSwitches { mim: false, ..CollabSwitches::default() },
            train: TrainConfig { lr: 0.0, dropout: 0.0, ..TrainConfig::default() },
            ..small_cfg()
        };
        let mut devs = init_devices(&trajs, &cat, &init, &cfg, 5).unwrap();
        let ids: Vec<UserId> = devs.iter().map(|d| d.user).collect();
        let nb = NeighborMap(
            ids.iter()
                .map(|&u| {
                    let others: Vec<(UserId, f64)> = ids.iter().filter(|&&v| v != u).map(|&v| (v, 1.0)).collect();
                    (u, UserNeighbors { geo: others.clone(), cat: others })
                })
                .collect(),
        );
        run_round(&mut devs, &nb, &cat, &cfg).unwrap();
        for d in &devs {
            for (a, b) in d.params.store().values().zip(init.store().values()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn missing_snapshot_names_the_neighbor() {
        let (cat, trajs, mut nb) = setup(3, 1, 4);
        let init = CoreParams::init(cat.len(), 8, &mut rng(0));
        let first = *nb.0.keys().next().unwrap();
        nb.0.get_mut(&first).unwrap().geo = vec![(999, 0.5)];
        let mut devs = init_devices(&trajs, &cat, &init, &small_cfg(), 5).unwrap();
        let err = run_round(&mut devs, &nb, &cat, &small_cfg()).unwrap_err();
        assert!(matches!(err, Error::MissingSnapshot { neighbor: 999, .. }), "{err}");
    }

    #[test]
    fn training_log_bookkeeping() {
        let (cat, trajs, nb) = setup(4, 2, 5);
        let init = CoreParams::init(cat.len(), 8, &mut rng(0));
        let cfg = CollabConfig { max_rounds: 1, ..small_cfg() };
        let mut devs = init_devices(&trajs, &cat, &init, &cfg, 5).unwrap();
        let log = run_training(&mut devs, &nb, &cat, &cfg).unwrap();
        assert_eq!(log.mean_local_loss.len(), 1);
        assert_eq!(log.records.len(), 4);
        assert!(log.records.iter().all(|r| r.round == 0 && r.comb_loss.is_some()));
        assert!(devs.iter().all(|d| d.round == 1));
    }
}
