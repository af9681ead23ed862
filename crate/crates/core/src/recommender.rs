//! Single-layer spatiotemporal self-attention recommender.
//!
//! A check-in is embedded as `poi_emb[p] + time_emb[slot(t)]`. Pairwise
//! distance (km) and time gap (hours) between check-ins are turned into an
//! additive attention bias through two learned unit vectors, and candidates
//! are scored by attending from each candidate to every attended sequence
//! position, normalising over the candidates at each position and summing.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{discretize_time, CheckIn, PoiCatalog, TIME_SLOTS};
use crate::error::{Error, Result};
use crate::geo::haversine;
use crate::numerics::{self, maybe_dropout, sigmoid, Graph, Matrix, Mode, NodeId, Optimizer, OptimizerKind, ParamStore};

pub const POI_EMB: &str = "poi_emb";
pub const TIME_EMB: &str = "time_emb";
pub const UNIT_SPATIAL: &str = "unit_spatial";
pub const UNIT_TEMPORAL: &str = "unit_temporal";
pub const W_Q: &str = "w_q";
pub const W_K: &str = "w_k";
pub const W_V: &str = "w_v";

/// Bounds applied to σ outputs before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Half-width of the uniform initialisation.
pub const INIT_BOUND: f64 = 0.1;

/// The exchangeable model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamStore", into = "ParamStore")]
pub struct CoreParams {
    store: ParamStore,
    dim: usize,
    n_pois: usize,
}

impl TryFrom<ParamStore> for CoreParams {
    type Error = Error;

    fn try_from(store: ParamStore) -> Result<Self> {
        CoreParams::from_store(store)
    }
}

impl From<CoreParams> for ParamStore {
    fn from(p: CoreParams) -> Self {
        p.store
    }
}

impl CoreParams {
    /// Uniform `[-0.1, 0.1]` initialisation of every tensor.
    pub fn init<R: Rng + ?Sized>(n_pois: usize, dim: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mut reg = |name: &str, m: Matrix| store.register(name, m).expect("fresh store");
        reg(POI_EMB, Matrix::uniform(n_pois, dim, INIT_BOUND, rng));
        reg(TIME_EMB, Matrix::uniform(TIME_SLOTS, dim, INIT_BOUND, rng));
        reg(UNIT_SPATIAL, Matrix::uniform(1, dim, INIT_BOUND, rng));
        reg(UNIT_TEMPORAL, Matrix::uniform(1, dim, INIT_BOUND, rng));
        reg(W_Q, Matrix::uniform(dim, dim, INIT_BOUND, rng));
        reg(W_K, Matrix::uniform(dim, dim, INIT_BOUND, rng));
        reg(W_V, Matrix::uniform(dim, dim, INIT_BOUND, rng));
        CoreParams { store, dim, n_pois }
    }

    /// Validates names and shapes of a deserialised store.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let poi = store.expect(POI_EMB)?;
        let (n_pois, dim) = poi.shape();
        let expected = [
            (TIME_EMB, (TIME_SLOTS, dim)),
            (UNIT_SPATIAL, (1, dim)),
            (UNIT_TEMPORAL, (1, dim)),
            (W_Q, (dim, dim)),
            (W_K, (dim, dim)),
            (W_V, (dim, dim)),
        ];
        for (name, shape) in expected {
            let got = store.expect(name)?.shape();
            if got != shape {
                return Err(Error::Contract(format!(
                    "`{name}` has shape {got:?}, expected {shape:?}"
                )));
            }
        }
        if store.len() != expected.len() + 1 {
            return Err(Error::Contract("unexpected extra tensors in model parameters".into()));
        }
        store.check_finite()?;
        Ok(CoreParams { store, dim, n_pois })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_pois(&self) -> usize {
        self.n_pois
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn poi_emb(&self) -> &Matrix {
        self.store.get(POI_EMB).expect("validated")
    }

    pub fn get(&self, name: &str) -> &Matrix {
        self.store.get(name).expect("validated")
    }

    /// Replaces one tensor, keeping its shape.
    pub fn replace(&mut self, name: &str, value: Matrix) -> Result<()> {
        self.store.replace(name, value)
    }

    /// Applies `f` to every scalar entry.
    pub fn map_values(&mut self, mut f: impl FnMut(f64) -> f64) {
        for v in self.store.values_mut() {
            *v = f(*v);
        }
    }

    /// Replaces the underlying store after an optimiser step.
    pub fn with_store(&self, store: ParamStore) -> Result<Self> {
        self.store.check_congruent(&store)?;
        Ok(CoreParams {
            store,
            dim: self.dim,
            n_pois: self.n_pois,
        })
    }
}

/// A check-in sequence resolved to catalog indices and time slots.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSeq {
    pub pois: Vec<usize>,
    pub slots: Vec<usize>,
    pub times: Vec<i64>,
}

impl EncodedSeq {
    pub fn encode(checkins: &[CheckIn], catalog: &PoiCatalog) -> Result<Self> {
        let mut pois = Vec::with_capacity(checkins.len());
        for c in checkins {
            pois.push(catalog.index_of(c.poi).ok_or_else(|| {
                Error::Contract(format!("POI {} is not in the catalog", c.poi))
            })?);
        }
        Ok(EncodedSeq {
            pois,
            slots: checkins.iter().map(|c| discretize_time(c.timestamp)).collect(),
            times: checkins.iter().map(|c| c.timestamp).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    /// The first `m` check-ins.
    pub fn prefix(&self, m: usize) -> EncodedSeq {
        EncodedSeq {
            pois: self.pois[..m].to_vec(),
            slots: self.slots[..m].to_vec(),
            times: self.times[..m].to_vec(),
        }
    }
}

fn hours_between(a: i64, b: i64) -> f64 {
    (a - b).abs() as f64 / 3600.0
}

/// Spatial (km) and temporal (hours) gap matrices between check-ins.
#[derive(Clone, Debug)]
pub struct SeqGaps {
    pub spatial: Matrix,
    pub temporal: Matrix,
}

impl SeqGaps {
    pub fn new(seq: &EncodedSeq, catalog: &PoiCatalog) -> Self {
        let m = seq.len();
        let mut spatial = Matrix::zeros(m, m);
        let mut temporal = Matrix::zeros(m, m);
        for a in 0..m {
            for b in (a + 1)..m {
                let ds = haversine(catalog.lon_lat(seq.pois[a]), catalog.lon_lat(seq.pois[b]));
                let dt = hours_between(seq.times[a], seq.times[b]);
                spatial.set(a, b, ds);
                spatial.set(b, a, ds);
                temporal.set(a, b, dt);
                temporal.set(b, a, dt);
            }
        }
        SeqGaps { spatial, temporal }
    }

    /// Top-left `m×m` block, i.e. the gaps of the length-`m` prefix.
    pub fn prefix(&self, m: usize) -> SeqGaps {
        let sub = |x: &Matrix| Matrix::from_fn(m, m, |a, b| x.get(a, b));
        SeqGaps {
            spatial: sub(&self.spatial),
            temporal: sub(&self.temporal),
        }
    }

    /// Gaps between candidates (located at their POI, observed at
    /// `query_time`) and each sequence position: `h×M`.
    pub fn candidates(
        seq: &EncodedSeq,
        cands: &[usize],
        query_time: i64,
        catalog: &PoiCatalog,
    ) -> SeqGaps {
        let spatial = Matrix::from_fn(cands.len(), seq.len(), |c, m| {
            haversine(catalog.lon_lat(cands[c]), catalog.lon_lat(seq.pois[m]))
        });
        let temporal =
            Matrix::from_fn(cands.len(), seq.len(), |_, m| hours_between(query_time, seq.times[m]));
        SeqGaps { spatial, temporal }
    }
}

/// Relation bias `Δs·Σe_Δs + Δt·Σe_Δt` as a graph node.
fn relation_node(g: &mut Graph<'_>, gaps: &SeqGaps) -> Result<NodeId> {
    let us = g.param(UNIT_SPATIAL)?;
    let ut = g.param(UNIT_TEMPORAL)?;
    let sum_s = g.sum(us);
    let sum_t = g.sum(ut);
    let ds = g.constant(gaps.spatial.clone());
    let dt = g.constant(gaps.temporal.clone());
    let a = g.scale_by(ds, sum_s);
    let b = g.scale_by(dt, sum_t);
    Ok(g.add(a, b))
}

fn embed_node(g: &mut Graph<'_>, seq: &EncodedSeq) -> Result<NodeId> {
    let pe = g.param(POI_EMB)?;
    let te = g.param(TIME_EMB)?;
    let a = g.gather_rows(pe, &seq.pois);
    let b = g.gather_rows(te, &seq.slots);
    Ok(g.add(a, b))
}

fn attention_node(g: &mut Graph<'_>, x: NodeId, delta: NodeId, dim: usize) -> Result<NodeId> {
    let wq = g.param(W_Q)?;
    let wk = g.param(W_K)?;
    let wv = g.param(W_V)?;
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let qk = g.matmul_t(q, k);
    let logits = g.add(qk, delta);
    let scaled = g.scale(logits, 1.0 / (dim as f64).sqrt());
    let attn = g.softmax_rows(scaled);
    Ok(g.matmul(attn, v))
}

/// `α` node (`h×1`) for `cands` given the encoded sequence `e_u` (`M×d`).
fn score_node(
    g: &mut Graph<'_>,
    e_u: NodeId,
    cand_gaps: &SeqGaps,
    cands: &[usize],
    dim: usize,
) -> Result<NodeId> {
    let pe = g.param(POI_EMB)?;
    let e_cand = g.gather_rows(pe, cands);
    let affinity = g.matmul_t(e_cand, e_u);
    let delta = relation_node(g, cand_gaps)?;
    let logits = g.add(affinity, delta);
    let scaled = g.scale(logits, 1.0 / (dim as f64).sqrt());
    // normalise over candidates at each sequence position
    let per_pos = g.transpose(scaled);
    let probs = g.softmax_rows(per_pos);
    let back = g.transpose(probs);
    Ok(g.sum_rows(back))
}

/// Dropout masks for one forward pass; `None` entries skip the layer.
#[derive(Clone, Debug, Default)]
pub struct Masks {
    pub input: Option<Matrix>,
    pub encoded: Option<Matrix>,
}

impl Masks {
    pub fn draw<R: Rng + ?Sized>(mode: Mode, rows: usize, dim: usize, rate: f64, rng: &mut R) -> Result<Self> {
        Ok(Masks {
            input: maybe_dropout(mode, rows, dim, rate, rng)?,
            encoded: maybe_dropout(mode, rows, dim, rate, rng)?,
        })
    }
}

fn apply_mask(g: &mut Graph<'_>, x: NodeId, mask: &Option<Matrix>) -> NodeId {
    match mask {
        Some(m) => {
            let c = g.constant(m.clone());
            g.mul(x, c)
        }
        None => x,
    }
}

/// Full forward pass from sequence to candidate scores.
pub fn alpha_node(
    g: &mut Graph<'_>,
    seq: &EncodedSeq,
    gaps: &SeqGaps,
    cands: &[usize],
    cand_gaps: &SeqGaps,
    masks: &Masks,
) -> Result<NodeId> {
    if cands.is_empty() {
        return Err(Error::Contract("candidate list is empty".into()));
    }
    let dim = g.params().expect(POI_EMB)?.cols();
    let x = embed_node(g, seq)?;
    let x = apply_mask(g, x, &masks.input);
    let delta = relation_node(g, gaps)?;
    let e_u = attention_node(g, x, delta, dim)?;
    let e_u = apply_mask(g, e_u, &masks.encoded);
    score_node(g, e_u, cand_gaps, cands, dim)
}

/// `−[log σ(α₀) + (1/N) Σⱼ log(1 − σ(αⱼ))]` where row 0 of `alpha` is the
/// positive and the remaining rows are its negatives.
pub fn poi_loss_node(g: &mut Graph<'_>, alpha: NodeId) -> NodeId {
    let h = g.value(alpha).rows();
    let s = g.sigmoid(alpha);
    let pos = g.gather_rows(s, &[0]);
    let pos = g.clamp(pos, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let pos = g.ln(pos);
    let idx: Vec<usize> = (1..h).collect();
    let neg = g.gather_rows(s, &idx);
    let neg = g.affine(neg, -1.0, 1.0);
    let neg = g.clamp(neg, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let neg = g.ln(neg);
    let neg = g.sum(neg);
    let neg = g.scale(neg, 1.0 / (h - 1) as f64);
    let total = g.add(pos, neg);
    g.neg(total)
}

/// Rows of `poi_emb[p] + time_emb[slot(t)]`.
pub fn embed_sequence(seq: &EncodedSeq, p: &CoreParams) -> Result<Matrix> {
    check_indices(seq, p)?;
    let mut g = Graph::new(p.store());
    let x = embed_node(&mut g, seq)?;
    Ok(g.value(x).clone())
}

/// `M×M` relation bias of a sequence.
pub fn relation_matrix(seq: &EncodedSeq, catalog: &PoiCatalog, p: &CoreParams) -> Result<Matrix> {
    let gaps = SeqGaps::new(seq, catalog);
    let mut g = Graph::new(p.store());
    let r = relation_node(&mut g, &gaps)?;
    Ok(g.value(r).clone())
}

/// `softmax_rows((XW_Q (XW_K)ᵀ + Δ)/√d) · XW_V`
pub fn self_attention(x: &Matrix, delta: &Matrix, p: &CoreParams) -> Result<Matrix> {
    if x.cols() != p.dim() || delta.shape() != (x.rows(), x.rows()) {
        return Err(Error::Contract("self_attention shape mismatch".into()));
    }
    let mut g = Graph::new(p.store());
    let xn = g.constant(x.clone());
    let dn = g.constant(delta.clone());
    let e = attention_node(&mut g, xn, dn, p.dim())?;
    Ok(g.value(e).clone())
}

/// Scores candidates against an encoded sequence `e_u` of `seq`.
pub fn score_candidates(
    e_u: &Matrix,
    seq: &EncodedSeq,
    cands: &[usize],
    query_time: i64,
    catalog: &PoiCatalog,
    p: &CoreParams,
) -> Result<Vec<f64>> {
    if cands.is_empty() {
        return Err(Error::Contract("candidate list is empty".into()));
    }
    if e_u.rows() != seq.len() || e_u.cols() != p.dim() {
        return Err(Error::Contract("encoded sequence shape mismatch".into()));
    }
    let cand_gaps = SeqGaps::candidates(seq, cands, query_time, catalog);
    let mut g = Graph::new(p.store());
    let e = g.constant(e_u.clone());
    let a = score_node(&mut g, e, &cand_gaps, cands, p.dim())?;
    Ok(g.value(a).as_slice().to_vec())
}

/// Inference: encodes `seq` and scores `cands` at `query_time`, no dropout.
pub fn predict(
    seq: &EncodedSeq,
    cands: &[usize],
    query_time: i64,
    catalog: &PoiCatalog,
    p: &CoreParams,
) -> Result<Vec<f64>> {
    check_indices(seq, p)?;
    let gaps = SeqGaps::new(seq, catalog);
    let cand_gaps = SeqGaps::candidates(seq, cands, query_time, catalog);
    let mut g = Graph::new(p.store());
    let a = alpha_node(&mut g, seq, &gaps, cands, &cand_gaps, &Masks::default())?;
    Ok(g.value(a).as_slice().to_vec())
}

fn clamp_prob(x: f64) -> f64 {
    x.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// POI prediction loss over positives `pos[i]` with negatives `negs[i]`.
pub fn poi_loss(pos: &[f64], negs: &[Vec<f64>]) -> Result<f64> {
    if pos.len() != negs.len() {
        return Err(Error::Contract("one negative list per positive".into()));
    }
    let mut total = 0.0;
    for (&a, ns) in pos.iter().zip(negs) {
        if ns.is_empty() {
            return Err(Error::Contract("at least one negative per positive".into()));
        }
        let neg: f64 = ns.iter().map(|&b| clamp_prob(1.0 - sigmoid(b)).ln()).sum();
        total -= clamp_prob(sigmoid(a)).ln() + neg / ns.len() as f64;
    }
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::Numeric { param: "poi_loss".into() })
    }
}

fn check_indices(seq: &EncodedSeq, p: &CoreParams) -> Result<()> {
    if let Some(&bad) = seq.pois.iter().find(|&&i| i >= p.n_pois()) {
        return Err(Error::Contract(format!("POI index {bad} out of range")));
    }
    if let Some(&bad) = seq.slots.iter().find(|&&s| s >= TIME_SLOTS) {
        return Err(Error::Contract(format!("time slot {bad} out of range")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub n_neg: usize,
    pub dropout: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.002,
            batch_size: 16,
            n_neg: 5,
            dropout: 0.2,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

/// One next-POI training example: the first `prefix` check-ins predict
/// check-in `prefix`, against sampled negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub prefix: usize,
    /// Positive first, then negatives.
    pub cands: Vec<usize>,
}

/// Everything a device needs to train on its own trajectory.
#[derive(Clone, Debug)]
pub struct LocalData {
    pub seq: EncodedSeq,
    pub gaps: SeqGaps,
    /// POIs absent from the training trajectory, ascending.
    pub unvisited: Vec<usize>,
}

impl LocalData {
    pub fn new(checkins: &[CheckIn], catalog: &PoiCatalog) -> Result<Self> {
        let seq = EncodedSeq::encode(checkins, catalog)?;
        let gaps = SeqGaps::new(&seq, catalog);
        let visited: HashSet<usize> = seq.pois.iter().copied().collect();
        let unvisited = (0..catalog.len()).filter(|i| !visited.contains(i)).collect();
        Ok(LocalData {
            seq,
            gaps,
            unvisited,
        })
    }

    /// Number of positive (next-POI) examples.
    pub fn n_pos(&self) -> usize {
        self.seq.len().saturating_sub(1)
    }

    /// Sliding next-POI targets with freshly drawn negatives.
    pub fn sample_targets<R: Rng + ?Sized>(&self, n_neg: usize, rng: &mut R) -> Result<Vec<Target>> {
        if self.seq.len() < 2 {
            return Err(Error::Contract("training needs at least 2 check-ins".into()));
        }
        if self.unvisited.is_empty() || n_neg == 0 {
            return Err(Error::Contract("no negatives available".into()));
        }
        let k = n_neg.min(self.unvisited.len());
        Ok((1..self.seq.len())
            .map(|j| {
                let mut cands = Vec::with_capacity(k + 1);
                cands.push(self.seq.pois[j]);
                cands.extend(self.unvisited.choose_multiple(rng, k).copied());
                Target { prefix: j, cands }
            })
            .collect())
    }

    /// Summed L_POI over `targets` as a graph node.
    pub fn loss_node(
        &self,
        g: &mut Graph<'_>,
        catalog: &PoiCatalog,
        targets: &[Target],
        masks: &[Masks],
    ) -> Result<NodeId> {
        let mut total: Option<NodeId> = None;
        for (t, m) in targets.iter().zip(masks) {
            let seq = self.seq.prefix(t.prefix);
            let gaps = self.gaps.prefix(t.prefix);
            let cand_gaps = SeqGaps::candidates(&seq, &t.cands, self.seq.times[t.prefix], catalog);
            let alpha = alpha_node(g, &seq, &gaps, &t.cands, &cand_gaps, m)?;
            let l = poi_loss_node(g, alpha);
            total = Some(match total {
                Some(acc) => g.add(acc, l),
                None => l,
            });
        }
        total.ok_or_else(|| Error::Contract("no training targets".into()))
    }
}

/// Result of one pass over the local data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// Mean per-positive training loss, measured before each step.
    pub mean_loss: f64,
    pub n_pos: usize,
}

/// One epoch of mini-batch descent on L_POI over shuffled sliding targets,
/// with a fresh optimizer of the configured kind.
pub fn train_local_epoch<R: Rng + ?Sized>(
    params: &CoreParams,
    data: &LocalData,
    catalog: &PoiCatalog,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(CoreParams, EpochStats)> {
    let mut opt = Optimizer::new(cfg.optimizer, params.store());
    train_local_epoch_with(params, data, catalog, cfg, &mut opt, rng)
}

/// [`train_local_epoch`] with optimizer state carried across calls.
pub fn train_local_epoch_with<R: Rng + ?Sized>(
    params: &CoreParams,
    data: &LocalData,
    catalog: &PoiCatalog,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    rng: &mut R,
) -> Result<(CoreParams, EpochStats)> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut targets = data.sample_targets(cfg.n_neg, rng)?;
    targets.shuffle(rng);
    let mut current = params.clone();
    let mut total = 0.0;
    for batch in targets.chunks(cfg.batch_size) {
        let masks = batch
            .iter()
            .map(|t| Masks::draw(Mode::Train, t.prefix, params.dim(), cfg.dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) =
            numerics::grad(current.store(), |g| data.loss_node(g, catalog, batch, &masks))?;
        total += loss;
        if cfg.lr > 0.0 {
            current = current.with_store(opt.step(current.store(), &grads, cfg.lr)?)?;
        }
    }
    Ok((
        current,
        EpochStats {
            mean_loss: total / targets.len() as f64,
            n_pos: targets.len(),
        },
    ))
}

/// Mean per-positive L_POI without dropout or updates.
pub fn eval_local_loss(params: &CoreParams, data: &LocalData, catalog: &PoiCatalog, targets: &[Target]) -> Result<f64> {
    let masks = vec![Masks::default(); targets.len()];
    let total = numerics::eval(params.store(), |g| data.loss_node(g, catalog, targets, &masks))?;
    Ok(total / targets.len() as f64)
}
