//! Loss terms over MC distributions.
//!
//! Every term is computed per sequence (summed over timesteps) and returns,
//! alongside its value, the gradient with respect to the probabilities it
//! read. The trainer pushes those gradients through the softmax nodes of the
//! tape, so the terms themselves stay independent of the network.
//!
//! Distributions are passed as `K` matrices of shape `n x V` (row `t` is the
//! distribution at step `t` of MC sample `i`).

use ndarray::ArrayView2;
use serde::Serialize;

use crate::corpus::PAD;
use crate::sampler::SampleSets;
use crate::tape::Matrix;

/// Floor applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MulConfig {
    /// Scale `α`.
    pub alpha: f64,
    /// Margin `m`.
    pub margin: f64,
}

impl Default for MulConfig {
    fn default() -> Self {
        MulConfig {
            alpha: 10.0,
            margin: -0.6,
        }
    }
}

/// Gradient of the marginalized unlikelihood loss with respect to the
/// members of one step's sample sets (same order as the sets).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleGrad {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

/// `Σ_t log(1 + Σ_k Σ_l exp(α (N_t^l - P_t^k + m)))`.
pub fn mul_loss(samples: &[SampleSets], cfg: &MulConfig) -> f64 {
    mul_loss_grad(samples, cfg).0
}

/// Value and per-sample gradients of [`mul_loss`]. The `1 +` term is folded
/// into a log-sum-exp as `exp(0)`.
pub fn mul_loss_grad(samples: &[SampleSets], cfg: &MulConfig) -> (f64, Vec<SampleGrad>) {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(samples.len());
    for set in samples {
        let mut g = SampleGrad {
            positives: vec![0.0; set.positives.len()],
            negatives: vec![0.0; set.negatives.len()],
        };
        if set.negatives.is_empty() || set.positives.is_empty() {
            grads.push(g);
            continue;
        }
        let exponent = |k: usize, l: usize| cfg.alpha * (set.negatives[l].prob - set.positives[k].prob + cfg.margin);
        let mut max = 0.0f64;
        for k in 0..set.positives.len() {
            for l in 0..set.negatives.len() {
                max = max.max(exponent(k, l));
            }
        }
        let mut sum = (-max).exp();
        for k in 0..set.positives.len() {
            for l in 0..set.negatives.len() {
                sum += (exponent(k, l) - max).exp();
            }
        }
        let lse = max + sum.ln();
        total += lse;
        for k in 0..set.positives.len() {
            for l in 0..set.negatives.len() {
                let w = (exponent(k, l) - lse).exp();
                g.negatives[l] += cfg.alpha * w;
                g.positives[k] -= cfg.alpha * w;
            }
        }
        grads.push(g);
    }
    (total, grads)
}

/// `-(1/K) Σ_i Σ_t log p_t^(i)[y_t]`, skipping `<pad>` targets.
pub fn mle_loss(dists: &[ArrayView2<f64>], gold: &[u32]) -> f64 {
    mle_loss_grad(dists, gold).0
}

pub fn mle_loss_grad(dists: &[ArrayView2<f64>], gold: &[u32]) -> (f64, Vec<Matrix>) {
    let inv_k = 1.0 / dists.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(dists.len());
    for d in dists {
        let mut g = Matrix::zeros(d.raw_dim());
        let mut nll = 0.0;
        for (t, &y) in gold.iter().enumerate() {
            if y == PAD {
                continue;
            }
            let p = d[[t, y as usize]];
            nll -= p.max(LOG_EPS).ln();
            if p > LOG_EPS {
                g[[t, y as usize]] = -inv_k / p;
            }
        }
        total += nll;
        grads.push(g);
    }
    (total * inv_k, grads)
}

/// Sum of Shannon entropies of all `K x n` distributions (`0 log 0 = 0`).
/// With `normalize_by_k` the sum is divided by `K`.
pub fn me_loss(dists: &[ArrayView2<f64>], normalize_by_k: bool) -> f64 {
    me_loss_grad(dists, normalize_by_k).0
}

pub fn me_loss_grad(dists: &[ArrayView2<f64>], normalize_by_k: bool) -> (f64, Vec<Matrix>) {
    let factor = if normalize_by_k { 1.0 / dists.len() as f64 } else { 1.0 };
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(dists.len());
    for d in dists {
        let mut g = Matrix::zeros(d.raw_dim());
        for (p, gv) in d.iter().zip(g.iter_mut()) {
            if *p > 0.0 {
                total -= p * p.ln();
            }
            *gv = -factor * (p.max(LOG_EPS).ln() + 1.0);
        }
        grads.push(g);
    }
    (total * factor, grads)
}

/// `-Σ_t Σ_{c ∈ neg_t} log(1 - p_t[c])` over a single distribution per step.
pub fn ul_loss(dist: ArrayView2<f64>, negatives: &[Vec<u32>]) -> f64 {
    let mut total = 0.0;
    for (t, neg) in negatives.iter().enumerate() {
        for &c in neg {
            total -= (1.0 - dist[[t, c as usize]]).max(LOG_EPS).ln();
        }
    }
    total
}

/// Unlikelihood over acquired negatives: each negative token is penalized in
/// the MC distribution it came from, summed over samples and steps.
pub fn ul_loss_grad(dists: &[ArrayView2<f64>], samples: &[SampleSets]) -> (f64, Vec<Matrix>) {
    let mut total = 0.0;
    let mut grads: Vec<Matrix> = dists.iter().map(|d| Matrix::zeros(d.raw_dim())).collect();
    for (t, set) in samples.iter().enumerate() {
        for n in &set.negatives {
            let c = n.token as usize;
            let q = 1.0 - dists[n.sample][[t, c]];
            total -= q.max(LOG_EPS).ln();
            if q > LOG_EPS {
                grads[n.sample][[t, c]] += 1.0 / q;
            }
        }
    }
    (total, grads)
}

/// Which terms enter the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveFlags {
    pub use_mul: bool,
    pub use_me: bool,
    /// Plain unlikelihood, used by the ablation variants that drop MUL.
    pub use_ul: bool,
    pub me_normalize_by_k: bool,
}

impl Default for ObjectiveFlags {
    fn default() -> Self {
        ObjectiveFlags {
            use_mul: true,
            use_me: true,
            use_ul: false,
            me_normalize_by_k: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBundle {
    pub l_mle: f64,
    pub l_mul: f64,
    pub l_me: f64,
    pub l_ul: f64,
    pub l_joint: f64,
}

impl LossBundle {
    pub fn from_terms(l_mle: f64, l_mul: f64, l_me: f64, l_ul: f64) -> Self {
        LossBundle {
            l_mle,
            l_mul,
            l_me,
            l_ul,
            l_joint: l_mle + l_mul + l_me + l_ul,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_mle, self.l_mul, self.l_me, self.l_ul, self.l_joint]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Term-wise mean; the joint value is re-derived from the averaged terms.
    pub fn mean(bundles: &[LossBundle]) -> LossBundle {
        if bundles.is_empty() {
            return LossBundle::default();
        }
        let n = bundles.len() as f64;
        let avg = |f: fn(&LossBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
        LossBundle::from_terms(avg(|b| b.l_mle), avg(|b| b.l_mul), avg(|b| b.l_me), avg(|b| b.l_ul))
    }
}

#[derive(Debug, Clone)]
pub struct JointOutput {
    pub bundle: LossBundle,
    /// `dL/dp` for each MC distribution.
    pub grads: Vec<Matrix>,
}

/// A single term of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LossTerm {
    Mle,
    Mul,
    Me,
    Ul,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Mle, LossTerm::Mul, LossTerm::Me, LossTerm::Ul];
}

/// Value of one term and its gradient with respect to every MC distribution.
pub fn term_loss_grad(
    term: LossTerm,
    dists: &[ArrayView2<f64>],
    gold: &[u32],
    samples: &[SampleSets],
    mul: &MulConfig,
    me_normalize_by_k: bool,
) -> (f64, Vec<Matrix>) {
    match term {
        LossTerm::Mle => mle_loss_grad(dists, gold),
        LossTerm::Me => me_loss_grad(dists, me_normalize_by_k),
        LossTerm::Ul => ul_loss_grad(dists, samples),
        LossTerm::Mul => {
            let mut grads: Vec<Matrix> = dists.iter().map(|d| Matrix::zeros(d.raw_dim())).collect();
            let (value, sample_grads) = mul_loss_grad(samples, mul);
            for (t, (set, g)) in samples.iter().zip(&sample_grads).enumerate() {
                for (p, gp) in set.positives.iter().zip(&g.positives) {
                    grads[p.sample][[t, gold[t] as usize]] += gp;
                }
                for (n, gn) in set.negatives.iter().zip(&g.negatives) {
                    grads[n.sample][[t, n.token as usize]] += gn;
                }
            }
            (value, grads)
        }
    }
}

/// `L = L_MLE + L_MUL + L_ME` (+ `L_UL` for ablations). Disabled terms are
/// reported as 0 and contribute no gradient.
pub fn joint_loss(
    dists: &[ArrayView2<f64>],
    gold: &[u32],
    samples: &[SampleSets],
    mul: &MulConfig,
    flags: &ObjectiveFlags,
) -> JointOutput {
    let mut values = [0.0; 4];
    let mut grads: Option<Vec<Matrix>> = None;
    let enabled = [true, flags.use_mul, flags.use_me, flags.use_ul];
    for (i, term) in LossTerm::ALL.into_iter().enumerate() {
        if !enabled[i] {
            continue;
        }
        let (value, g) = term_loss_grad(term, dists, gold, samples, mul, flags.me_normalize_by_k);
        values[i] = value;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
    }
    JointOutput {
        bundle: LossBundle::from_terms(values[0], values[1], values[2], values[3]),
        grads: grads.expect("MLE is always enabled"),
    }
}
