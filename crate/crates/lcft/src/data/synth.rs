//! Synthetic impression generator with controllable local-CTR drift.
//!
//! Each user u and item i get latent factors; the true click probability is
//! `sigmoid(<z_u, z_i> + b_u)` where the per-user bias b_u is drawn from a
//! heavy-tailed distribution. The bias is the drift dial: a small tail
//! exponent concentrates most users near the base rate while flinging a
//! long tail of users far from the global CTR, the shape observed in
//! production click logs.

use rand::prelude::*;
use rand_pcg::Pcg64Mcg;

use super::{DataError, Sample, UserDataset};

/// Synthetic fleet configuration. The seed fully determines the output.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    /// Dimension of the latent preference factors.
    pub latent_dim: usize,
    /// Inclusive (min, max) samples drawn per user.
    pub samples_per_user: (usize, usize),
    /// Center of the per-user bias distribution, in logit space.
    pub bias_location: f64,
    /// Scale of the heavy-tailed bias component; 0 disables drift.
    pub bias_scale: f64,
    /// Tail exponent of the bias distribution; smaller means heavier tails
    /// and wilder CTR drift.
    pub bias_tail_exponent: f64,
    /// Scale of the latent factors; 0 removes item-preference signal.
    pub factor_scale: f64,
    /// Mean offset of the user factors. A nonzero mean gives every item a
    /// quality component shared across users (the part of `<z_u, z_i>`
    /// along the mean), which is what a global model can learn; the spread
    /// around the mean stays personal taste.
    pub user_factor_mean: f64,
    /// History length cap per sample; oldest entries drop first.
    pub max_history: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_users: 1000,
            num_items: 200,
            num_categories: 20,
            latent_dim: 8,
            samples_per_user: (30, 60),
            bias_location: -1.0,
            bias_scale: 0.9,
            bias_tail_exponent: 1.2,
            factor_scale: 1.0,
            user_factor_mean: 2.0,
            max_history: super::DEFAULT_MAX_HISTORY,
            seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_users == 0 || self.num_items == 0 || self.num_categories == 0 {
            return Err(DataError::Config(
                "num_users, num_items, num_categories must all be >= 1".into(),
            ));
        }
        if self.latent_dim == 0 {
            return Err(DataError::Config("latent_dim must be >= 1".into()));
        }
        let (lo, hi) = self.samples_per_user;
        if lo == 0 || lo > hi {
            return Err(DataError::Config(format!(
                "samples_per_user ({lo}, {hi}) must satisfy 1 <= min <= max"
            )));
        }
        if self.bias_tail_exponent <= 0.0 || self.bias_tail_exponent.is_nan() {
            return Err(DataError::Config("bias_tail_exponent must be > 0".into()));
        }
        if self.bias_scale < 0.0 || self.factor_scale < 0.0 {
            return Err(DataError::Config("scales must be >= 0".into()));
        }
        Ok(())
    }
}

/// Ground-truth click probabilities for a generated fleet.
#[derive(Debug, Clone)]
pub struct TrueCtrOracle {
    user_factors: Vec<Vec<f64>>,
    item_factors: Vec<Vec<f64>>,
    user_bias: Vec<f64>,
    item_category: Vec<usize>,
}

impl TrueCtrOracle {
    /// True click probability of (user, item).
    pub fn true_ctr(&self, user: usize, item: usize) -> f64 {
        let mut z = self.user_bias[user];
        for (a, b) in self.user_factors[user].iter().zip(&self.item_factors[item]) {
            z += a * b;
        }
        crate::kernel::sigmoid_scalar(z)
    }

    pub fn user_bias(&self, user: usize) -> f64 {
        self.user_bias[user]
    }

    pub fn item_category(&self, item: usize) -> usize {
        self.item_category[item]
    }
}

/// One standard normal draw (Box-Muller on two uniforms).
fn gauss(rng: &mut Pcg64Mcg) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Symmetric Pareto-tailed draw: magnitude `u^(-1/a) - 1` with random sign.
fn heavy_tail(rng: &mut Pcg64Mcg, exponent: f64) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let mag = u.powf(-1.0 / exponent) - 1.0;
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

/// Generates a synthetic fleet plus its ground-truth CTR oracle.
///
/// Labels are Bernoulli draws from the true probability; each sample's
/// history is the user's previously clicked items in timestamp order,
/// capped at `max_history` with the oldest dropped.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Vec<UserDataset>, TrueCtrOracle), DataError> {
    cfg.validate()?;
    let mut rng = Pcg64Mcg::seed_from_u64(cfg.seed);
    let norm = cfg.factor_scale / (cfg.latent_dim as f64).sqrt();

    let item_category: Vec<usize> = (0..cfg.num_items)
        .map(|_| rng.random_range(0..cfg.num_categories))
        .collect();
    let item_factors: Vec<Vec<f64>> = (0..cfg.num_items)
        .map(|_| {
            (0..cfg.latent_dim)
                .map(|_| gauss(&mut rng) * norm)
                .collect()
        })
        .collect();
    let user_factors: Vec<Vec<f64>> = (0..cfg.num_users)
        .map(|_| {
            (0..cfg.latent_dim)
                .map(|_| (gauss(&mut rng) + cfg.user_factor_mean) * norm)
                .collect()
        })
        .collect();
    let user_bias: Vec<f64> = (0..cfg.num_users)
        .map(|_| cfg.bias_location + cfg.bias_scale * heavy_tail(&mut rng, cfg.bias_tail_exponent))
        .collect();

    let oracle = TrueCtrOracle {
        user_factors,
        item_factors,
        user_bias,
        item_category,
    };

    let (lo, hi) = cfg.samples_per_user;
    let mut datasets = Vec::with_capacity(cfg.num_users);
    for user_id in 0..cfg.num_users {
        let n = rng.random_range(lo..=hi);
        let mut clicked: Vec<usize> = Vec::new();
        let mut samples = Vec::with_capacity(n);
        for k in 0..n {
            let item_id = rng.random_range(0..cfg.num_items);
            let p = oracle.true_ctr(user_id, item_id);
            let label = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            let start = clicked.len().saturating_sub(cfg.max_history);
            samples.push(Sample {
                user_id,
                item_id,
                category_id: oracle.item_category[item_id],
                history: clicked[start..].to_vec(),
                label,
                timestamp: k as u64,
            });
            if label == 1.0 {
                clicked.push(item_id);
            }
        }
        datasets.push(UserDataset::from_samples(user_id, samples)?);
    }
    Ok((datasets, oracle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::global_stats;

    #[test]
    fn zero_scales_give_exactly_half_probability() {
        let cfg = SynthConfig {
            num_users: 2000,
            num_items: 50,
            samples_per_user: (50, 50),
            bias_location: 0.0,
            bias_scale: 0.0,
            factor_scale: 0.0,
            seed: 3,
            ..SynthConfig::default()
        };
        let (datasets, oracle) = synth_generate(&cfg).unwrap();
        assert_eq!(oracle.true_ctr(0, 0), 0.5);
        // 1e5 Bernoulli(0.5) samples: empirical global CTR within 0.01.
        let g = global_stats(&datasets).unwrap();
        assert!((g.global_ctr - 0.5).abs() < 0.01, "got {}", g.global_ctr);
    }

    #[test]
    fn same_seed_gives_identical_fleets_and_oracles() {
        let cfg = SynthConfig {
            num_users: 40,
            ..SynthConfig::default()
        };
        let (a, oracle_a) = synth_generate(&cfg).unwrap();
        let (b, oracle_b) = synth_generate(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.samples(), y.samples());
        }
        for u in 0..cfg.num_users {
            for i in 0..cfg.num_items {
                assert_eq!(
                    oracle_a.true_ctr(u, i).to_bits(),
                    oracle_b.true_ctr(u, i).to_bits()
                );
            }
        }
    }

    #[test]
    fn default_drift_shape_is_long_tailed() {
        // Frozen check behind the default parameters: the local-CTR
        // histogram must skew right and put >30% of users more than 0.1
        // away from the global CTR.
        let cfg = SynthConfig::default();
        let (datasets, _) = synth_generate(&cfg).unwrap();
        let g = global_stats(&datasets).unwrap();
        let ctrs: Vec<f64> = datasets.iter().map(|d| d.local_ctr()).collect();
        let n = ctrs.len() as f64;
        let mean = ctrs.iter().sum::<f64>() / n;
        let m2 = ctrs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
        let m3 = ctrs.iter().map(|c| (c - mean).powi(3)).sum::<f64>() / n;
        let skew = m3 / m2.powf(1.5);
        assert!(skew > 0.0, "skewness {skew}");
        let drifted = ctrs
            .iter()
            .filter(|c| (**c - g.global_ctr).abs() > 0.1)
            .count() as f64
            / n;
        assert!(drifted > 0.30, "drifted fraction {drifted}");
    }

    #[test]
    fn histories_are_previous_clicks_in_order() {
        let cfg = SynthConfig {
            num_users: 5,
            samples_per_user: (40, 40),
            ..SynthConfig::default()
        };
        let (datasets, _) = synth_generate(&cfg).unwrap();
        for ds in &datasets {
            let mut clicked: Vec<usize> = Vec::new();
            for s in ds.samples() {
                let start = clicked.len().saturating_sub(cfg.max_history);
                assert_eq!(s.history, &clicked[start..]);
                if s.label == 1.0 {
                    clicked.push(s.item_id);
                }
            }
        }
    }

    #[test]
    fn oracle_matches_empirical_click_rate() {
        let cfg = SynthConfig {
            num_users: 3,
            num_items: 10,
            seed: 11,
            ..SynthConfig::default()
        };
        let (_, oracle) = synth_generate(&cfg).unwrap();
        let p = oracle.true_ctr(1, 4);
        let n = 100_000;
        let mut rng = Pcg64Mcg::seed_from_u64(99);
        let hits = (0..n).filter(|_| rng.random::<f64>() < p).count();
        let freq = hits as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() <= 3.0 * sigma, "freq {freq} vs p {p}");
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let cfg = SynthConfig {
            num_items: 0,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_generate(&cfg), Err(DataError::Config(_))));
        let cfg = SynthConfig {
            samples_per_user: (5, 2),
            ..SynthConfig::default()
        };
        assert!(matches!(synth_generate(&cfg), Err(DataError::Config(_))));
    }
}
