//! Laplace mechanisms applied on-device before anything leaves it: visit
//! centroids and category counts (uploaded to the server) and model weights
//! (shared with neighbors).

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::LonLat;
use crate::recommender::CoreParams;

pub const DEFAULT_EPSILON: f64 = 0.1;
/// Sensitivity used for a lone centroid, in degrees.
pub const DEFAULT_CENTROID_FLOOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub enabled: bool,
    pub centroid_floor: f64,
}

impl Default for PrivacyBudget {
    fn default() -> Self {
        PrivacyBudget {
            epsilon: DEFAULT_EPSILON,
            enabled: true,
            centroid_floor: DEFAULT_CENTROID_FLOOR,
        }
    }
}

impl PrivacyBudget {
    pub fn new(epsilon: f64) -> Result<Self> {
        let b = PrivacyBudget { epsilon, ..Self::default() };
        b.validate()?;
        Ok(b)
    }

    pub fn disabled() -> Self {
        PrivacyBudget { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.centroid_floor > 0.0) {
            return Err(Error::Config(format!("centroid floor must be > 0, got {}", self.centroid_floor)));
        }
        Ok(())
    }
}

/// One draw from Laplace(0, b) by inverting the CDF at a single uniform.
pub fn laplace_sample<R: Rng + ?Sized>(b: f64, rng: &mut R) -> Result<f64> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::Contract(format!("Laplace scale must be > 0, got {b}")));
    }
    let u: f64 = rng.sample::<f64, _>(Open01) - 0.5;
    Ok(-b * u.signum() * (1.0 - 2.0 * u.abs()).ln())
}

/// Largest `|Δlon| + |Δlat|` over centroid pairs, or `floor` for one centroid.
pub fn centroid_sensitivity(centroids: &[LonLat], floor: f64) -> f64 {
    let mut best: f64 = 0.0;
    for (i, a) in centroids.iter().enumerate() {
        for b in &centroids[i + 1..] {
            best = best.max((a.0 - b.0).abs() + (a.1 - b.1).abs());
        }
    }
    if centroids.len() < 2 {
        floor
    } else {
        best
    }
}

pub fn perturb_centroids<R: Rng + ?Sized>(
    centroids: &[LonLat],
    budget: &PrivacyBudget,
    rng: &mut R,
) -> Result<Vec<LonLat>> {
    if centroids.is_empty() {
        return Err(Error::Contract("no centroids to perturb".into()));
    }
    if !budget.enabled {
        return Ok(centroids.to_vec());
    }
    budget.validate()?;
    let sens = centroid_sensitivity(centroids, budget.centroid_floor);
    if sens == 0.0 {
        // every centroid coincides; nothing distinguishes them
        return Ok(centroids.to_vec());
    }
    let b = sens / budget.epsilon;
    centroids
        .iter()
        .map(|&(lon, lat)| Ok((lon + laplace_sample(b, rng)?, lat + laplace_sample(b, rng)?)))
        .collect()
}

/// Noisy counts (sensitivity 1), clamped at zero and renormalised.
/// Falls back to uniform when every noisy count clamps to zero.
pub fn perturb_counts<R: Rng + ?Sized>(counts: &[u64], budget: &PrivacyBudget, rng: &mut R) -> Result<Vec<f64>> {
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::Contract("category counts need at least one visit".into()));
    }
    let noisy: Vec<f64> = if budget.enabled {
        budget.validate()?;
        counts
            .iter()
            .map(|&c| Ok((c as f64 + laplace_sample(1.0 / budget.epsilon, rng)?).max(0.0)))
            .collect::<Result<_>>()?
    } else {
        counts.iter().map(|&c| c as f64).collect()
    };
    let total: f64 = noisy.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / counts.len() as f64; counts.len()]);
    }
    Ok(noisy.into_iter().map(|c| c / total).collect())
}

/// `2η / (N_pos·ε)` with `η` the spread of every scalar in `p`.
pub fn weight_noise_scale(p: &CoreParams, epsilon: f64, n_pos: usize) -> Result<f64> {
    if n_pos == 0 {
        return Err(Error::Contract("weight noise needs N_pos >= 1".into()));
    }
    let (lo, hi) = p
        .store()
        .values()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let eta = if lo.is_finite() { hi - lo } else { 0.0 };
    Ok(2.0 * eta / (n_pos as f64 * epsilon))
}

pub fn perturb_weights<R: Rng + ?Sized>(
    p: &CoreParams,
    budget: &PrivacyBudget,
    n_pos: usize,
    rng: &mut R,
) -> Result<CoreParams> {
    if !budget.enabled {
        return Ok(p.clone());
    }
    budget.validate()?;
    let b = weight_noise_scale(p, budget.epsilon, n_pos)?;
    if b == 0.0 {
        return Ok(p.clone());
    }
    let mut out = p.clone();
    let mut err = None;
    out.map_values(|v| match laplace_sample(b, rng) {
        Ok(n) => v + n,
        Err(e) => {
            err.get_or_insert(e);
            v
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use crate::recommender::POI_EMB;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn draws(b: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..n).map(|_| laplace_sample(b, &mut r).unwrap()).collect()
    }

    fn median_abs(xs: &[f64]) -> f64 {
        let mut a: Vec<f64> = xs.iter().map(|x| x.abs()).collect();
        a.sort_by(f64::total_cmp);
        a[a.len() / 2]
    }

    #[test]
    fn laplace_moments() {
        let xs = draws(1.0, 100_000, 1);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 2.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn laplace_scale_doubles_mad() {
        let r = median_abs(&draws(2.0, 100_000, 2)) / median_abs(&draws(1.0, 100_000, 3));
        assert!((r - 2.0).abs() < 0.05, "{r}");
    }

    #[test]
    fn laplace_reproducible_and_rejects_bad_scale() {
        assert_eq!(draws(0.5, 50, 9), draws(0.5, 50, 9));
        assert!(laplace_sample(0.0, &mut rng(0)).is_err());
        assert!(laplace_sample(-1.0, &mut rng(0)).is_err());
    }

    #[test]
    fn disabled_budget_is_identity() {
        let off = PrivacyBudget::disabled();
        let cs = vec![(1.0, 2.0), (3.0, -4.0)];
        assert_eq!(perturb_centroids(&cs, &off, &mut rng(0)).unwrap(), cs);
        assert_eq!(perturb_counts(&[2, 3, 5], &off, &mut rng(0)).unwrap(), vec![0.2, 0.3, 0.5]);
        let p = CoreParams::init(10, 4, &mut rng(1));
        assert_eq!(perturb_weights(&p, &off, 3, &mut rng(0)).unwrap(), p);
    }

    #[test]
    fn centroid_sensitivity_rule() {
        assert_eq!(centroid_sensitivity(&[(0.0, 0.0), (1.0, 1.0)], 0.01), 2.0);
        assert_eq!(centroid_sensitivity(&[(5.0, 5.0)], 0.01), 0.01);
        assert_eq!(centroid_sensitivity(&[(0.0, 0.0), (1.0, 0.5), (-2.0, 3.0)], 0.01), 5.5);
    }

    #[test]
    fn centroid_noise_scales_inverse_to_epsilon() {
        let cs = [(0.0, 0.0), (1.0, 1.0)];
        let mad = |eps: f64, seed| {
            let budget = PrivacyBudget::new(eps).unwrap();
            let mut r = rng(seed);
            let mut noise = Vec::new();
            for _ in 0..25_000 {
                let out = perturb_centroids(&cs, &budget, &mut r).unwrap();
                for (o, c) in out.iter().zip(&cs) {
                    noise.push(o.0 - c.0);
                    noise.push(o.1 - c.1);
                }
            }
            median_abs(&noise)
        };
        let (lo, hi) = (mad(1.0, 4), mad(0.1, 5));
        assert!((hi / lo - 10.0).abs() < 0.5, "{}", hi / lo);
        assert!((lo - 2.0 * 2f64.ln()).abs() < 0.05, "{lo}");
    }

    #[test]
    fn counts_become_a_distribution() {
        let budget = PrivacyBudget::default();
        let mut r = rng(6);
        for _ in 0..500 {
            let counts: Vec<u64> = (0..6).map(|_| r.gen_range(0..4)).chain([1]).collect();
            let d = perturb_counts(&counts, &budget, &mut r).unwrap();
            assert!(d.iter().all(|&x| x >= 0.0));
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn counts_concentrate_at_large_epsilon() {
        let budget = PrivacyBudget::new(10.0).unwrap();
        let mut r = rng(7);
        let ok = (0..100)
            .filter(|_| {
                let d = perturb_counts(&[100, 100], &budget, &mut r).unwrap();
                d.iter().all(|x| (x - 0.5).abs() <= 0.02)
            })
            .count();
        assert!(ok >= 99, "{ok}");
    }

    #[test]
    fn all_clamped_counts_fall_back_to_uniform() {
        // Lap(1e4) noise on a single visit drives everything below zero often
        let budget = PrivacyBudget::new(1e-4).unwrap();
        let mut r = rng(8);
        let seen = (0..200).any(|_| perturb_counts(&[1, 0, 0, 0], &budget, &mut r).unwrap() == vec![0.25; 4]);
        assert!(seen);
    }

    #[test]
    fn weight_scale_formula() {
        let mut p = CoreParams::init(20, 4, &mut rng(2));
        p.map_values(|v| v.clamp(-0.05, 0.05));
        let mut emb = p.poi_emb().clone();
        emb.set(0, 0, 1.0);
        emb.set(1, 0, -1.0);
        p.replace(POI_EMB, emb).unwrap();
        assert_eq!(weight_noise_scale(&p, 0.1, 100).unwrap(), 2.0 * 2.0 / (100.0 * 0.1));
    }

    #[test]
    fn weight_noise_mad_matches_laplace() {
        let mut p = CoreParams::init(400, 32, &mut rng(3));
        let mut emb = p.poi_emb().clone();
        emb.set(0, 0, 1.0);
        emb.set(1, 0, -1.0);
        p.replace(POI_EMB, emb).unwrap();
        let budget = PrivacyBudget::new(0.1).unwrap();
        let q = perturb_weights(&p, &budget, 100, &mut rng(4)).unwrap();
        let noise: Vec<f64> = q.store().values().zip(p.store().values()).map(|(a, b)| a - b).collect();
        let want = 0.4 * 2f64.ln();
        assert!((median_abs(&noise) - want).abs() / want < 0.03, "{}", median_abs(&noise));
    }

    #[test]
    fn constant_weights_are_untouched() {
        let mut p = CoreParams::init(5, 3, &mut rng(5));
        p.map_values(|_| 0.25);
        let q = perturb_weights(&p, &PrivacyBudget::default(), 10, &mut rng(0)).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.poi_emb(), &Matrix::filled(5, 3, 0.25));
    }
}
