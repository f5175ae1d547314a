//! Monte Carlo dropout on the last hidden layer and positive/negative
//! sample acquisition.
//!
//! One decoder pass produces `h_t`; `K` Bernoulli masks are applied to that
//! same vector, each masked copy goes through the LM head, and the resulting
//! distributions are mined for the gold-token probability (positives) and
//! the probability of any wrong argmax (negatives).

use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{argmax, VocabDistribution};
use crate::tape::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("MC forward count must be at least 1")]
    ZeroSamples,
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("hidden size {hidden} does not match LM head rows {rows}")]
    Shape { hidden: usize, rows: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UncertaintyConfig {
    /// Number of MC forward computations `K`.
    pub samples: usize,
    /// Dropout rate `p`.
    pub dropout: f64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            samples: 5,
            dropout: 0.4,
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.samples == 0 {
            return Err(SamplerError::ZeroSamples);
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SamplerError::DropoutRate(self.dropout));
        }
        Ok(())
    }

    /// Multiplier applied to kept units (inverted dropout).
    pub fn keep_scale(&self) -> f64 {
        1.0 / (1.0 - self.dropout)
    }
}

/// Bernoulli(1 - p) keep mask of the given length; entries are 0 or 1.
pub fn sample_mask<R: Rng>(len: usize, dropout: f64, rng: &mut R) -> Vec<f64> {
    (0..len)
        .map(|_| if rng.random::<f64>() < 1.0 - dropout { 1.0 } else { 0.0 })
        .collect()
}

/// A `rows x cols` mask with a fresh draw per row, already multiplied by the
/// inverted-dropout scale.
pub fn scaled_mask<R: Rng>(rows: usize, cols: usize, cfg: &UncertaintyConfig, rng: &mut R) -> Matrix {
    let scale = cfg.keep_scale();
    let mut m = Matrix::zeros((rows, cols));
    for mut row in m.rows_mut() {
        for (v, keep) in row.iter_mut().zip(sample_mask(cols, cfg.dropout, rng)) {
            *v = keep * scale;
        }
    }
    m
}

/// `K` distributions `softmax(Wᵀ (M_i ⊙ h) / (1 - p))` from one hidden vector.
pub fn mc_distributions<R: Rng>(
    h: &[f64],
    lm_head: &Matrix,
    cfg: &UncertaintyConfig,
    rng: &mut R,
) -> Result<Vec<VocabDistribution>, SamplerError> {
    cfg.validate()?;
    if h.len() != lm_head.nrows() {
        return Err(SamplerError::Shape {
            hidden: h.len(),
            rows: lm_head.nrows(),
        });
    }
    let scale = cfg.keep_scale();
    Ok((0..cfg.samples)
        .map(|_| {
            let masked: Vec<f64> = h
                .iter()
                .zip(sample_mask(h.len(), cfg.dropout, rng))
                .map(|(v, keep)| v * (keep * scale))
                .collect();
            VocabDistribution::from_logits(ArrayView1::from(&masked).dot(lm_head).to_vec())
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Positive {
    pub prob: f64,
    /// Index of the MC distribution the probability was read from.
    pub sample: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Negative {
    pub prob: f64,
    pub token: u32,
    pub sample: usize,
}

/// Positive and negative samples of one decoding step.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SampleSets {
    pub positives: Vec<Positive>,
    pub negatives: Vec<Negative>,
}

impl SampleSets {
    pub fn positive_probs(&self) -> Vec<f64> {
        self.positives.iter().map(|p| p.prob).collect()
    }

    pub fn negative_probs(&self) -> Vec<f64> {
        self.negatives.iter().map(|n| n.prob).collect()
    }
}

/// For each distribution: record its gold probability as a positive and, if
/// its argmax (lowest id on ties) is not the gold token, record that argmax
/// probability as a negative.
pub fn acquire_samples<D: AsRef<[f64]>>(dists: &[D], gold: u32) -> SampleSets {
    let mut sets = SampleSets {
        positives: Vec::with_capacity(dists.len()),
        negatives: Vec::new(),
    };
    for (sample, dist) in dists.iter().enumerate() {
        let p = dist.as_ref();
        let c = argmax(p);
        if c != gold {
            sets.negatives.push(Negative {
                prob: p[c as usize],
                token: c,
                sample,
            });
        }
        sets.positives.push(Positive {
            prob: p[gold as usize],
            sample,
        });
    }
    sets
}

/// Token ids sorted by descending probability, lower id first on ties.
fn ranked(p: &[f64]) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..p.len() as u32).collect();
    ids.sort_by(|&a, &b| p[b as usize].total_cmp(&p[a as usize]).then(a.cmp(&b)));
    ids
}

fn single(p: &[f64], gold: u32, candidates: impl IntoIterator<Item = u32>) -> SampleSets {
    SampleSets {
        positives: vec![Positive {
            prob: p[gold as usize],
            sample: 0,
        }],
        negatives: candidates
            .into_iter()
            .filter(|&c| c != gold)
            .map(|token| Negative {
                prob: p[token as usize],
                token,
                sample: 0,
            })
            .collect(),
    }
}

/// Negatives are the `k` most probable tokens other than the gold one.
pub fn topk_negatives<D: AsRef<[f64]>>(dist: &D, gold: u32, k: usize) -> SampleSets {
    let p = dist.as_ref();
    single(p, gold, ranked(p).into_iter().take(k))
}

/// Negatives are the members of the smallest high-probability set whose
/// mass reaches `p_cut`, minus the gold token.
pub fn topp_negatives<D: AsRef<[f64]>>(dist: &D, gold: u32, p_cut: f64) -> SampleSets {
    let p = dist.as_ref();
    let order = ranked(p);
    if p_cut >= 1.0 {
        return single(p, gold, order);
    }
    let mut mass = 0.0;
    let mut nucleus = Vec::new();
    for id in order {
        nucleus.push(id);
        mass += p[id as usize];
        if mass >= p_cut {
            break;
        }
    }
    single(p, gold, nucleus)
}

/// How negatives are chosen during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum NegativeStrategy {
    /// Wrong argmaxes of the MC dropout distributions.
    Mc,
    TopK(usize),
    TopP(f64),
}

impl NegativeStrategy {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "mc" => Ok(NegativeStrategy::Mc),
            Some(("topk", k)) => match k.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(NegativeStrategy::TopK(k)),
                _ => Err(format!("invalid top-k value {k:?}")),
            },
            Some(("topp", p)) => match p.parse::<f64>() {
                Ok(p) if p > 0.0 && p <= 1.0 => Ok(NegativeStrategy::TopP(p)),
                _ => Err(format!("invalid top-p value {p:?}")),
            },
            _ => Err(format!("unknown negative strategy {s:?} (mc, topk:K, topp:P)")),
        }
    }

    pub fn name(&self) -> String {
        match self {
            NegativeStrategy::Mc => "mc".into(),
            NegativeStrategy::TopK(k) => format!("topk:{k}"),
            NegativeStrategy::TopP(p) => format!("topp:{p}"),
        }
    }
}

/// Deterministic RNG substream for a tuple of indices under a base seed.
pub fn substream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix(seed ^ 0x5eed_0f0a_0b0c);
    for &p in path {
        state = splitmix(state ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    ChaCha8Rng::seed_from_u64(state)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
