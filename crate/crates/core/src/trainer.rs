//! Training loop, ablation suite and the negative-sample inspector.

use std::time::{Duration, Instant};

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::codec::{self, CodecError, TemplateKind};
use crate::config::{ConfigError, UaulConfig};
use crate::corpus::{CorpusSplit, Example, Vocabulary, BOS};
use crate::eval::{self, EvalError, ScoreReportSummary};
use crate::model::{ModelError, Seq2Seq};
use crate::objectives::{joint_loss, mle_loss_grad, LossBundle};
use crate::optim::{clip_global_norm, Adam};
use crate::sampler::{acquire_samples, scaled_mask, substream, topk_negatives, topp_negatives, NegativeStrategy, SampleSets};
use crate::tape::{Gradients, Matrix, Tape, TapeError, Var};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_INSPECT: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("empty training set")]
    EmptyCorpus,
    #[error("example {index} has no valid target")]
    Target { index: usize, source: CodecError },
    #[error("model failed on example {index}")]
    Model { index: usize, source: ModelError },
    #[error("non-finite loss at epoch {epoch}, step {step}; batch examples {examples:?}")]
    Divergence { epoch: usize, step: usize, examples: Vec<usize> },
    #[error("backward pass failed at epoch {epoch}, step {step}")]
    Backward { epoch: usize, step: usize, source: TapeError },
    #[error("evaluation failed: {0}")]
    Eval(String),
}

/// One training pair as token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub src: Vec<u32>,
    /// `<s>` followed by the target without its final `</s>`.
    pub y_in: Vec<u32>,
    /// Target ids ending with `</s>`.
    pub gold: Vec<u32>,
}

pub fn encode_examples(examples: &[Example], vocab: &Vocabulary, template: TemplateKind) -> Result<Vec<Encoded>, TrainError> {
    let targets = examples
        .iter()
        .enumerate()
        .map(|(index, e)| codec::render(&e.quads, template).map_err(|source| TrainError::Target { index, source }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(examples
        .iter()
        .zip(&targets)
        .map(|(ex, tgt)| {
            let gold = vocab.encode_target(tgt);
            let mut y_in = Vec::with_capacity(gold.len());
            y_in.push(BOS);
            y_in.extend_from_slice(&gold[..gold.len() - 1]);
            Encoded {
                src: vocab.tokenize(&ex.sentence),
                y_in,
                gold,
            }
        })
        .collect())
}

/// Teacher-forced forward pass ending in one probability node per MC sample.
/// Without MC dropout there is a single undropped distribution.
pub(crate) fn forward<'p, R: Rng>(
    model: &'p Seq2Seq,
    ex: &Encoded,
    cfg: &UaulConfig,
    rng: &mut R,
) -> Result<(Tape<'p>, Vec<Var>), ModelError> {
    let mut tape = Tape::new(model.params());
    let h = model.encode_decode(&mut tape, &ex.src, &ex.y_in)?;
    let w = tape.param(model.lm_head_id());
    let unc = cfg.effective_uncertainty();
    let (rows, cols) = tape.value(h).dim();
    let mut probs = Vec::with_capacity(unc.samples);
    for _ in 0..unc.samples {
        let hidden = if cfg.use_mc {
            tape.mul_const(h, scaled_mask(rows, cols, &unc, rng))
        } else {
            h
        };
        let logits = tape.matmul(hidden, w);
        probs.push(tape.softmax(logits, false));
    }
    Ok((tape, probs))
}

pub(crate) fn sample_sets(dists: &[ArrayView2<f64>], gold: &[u32], strategy: NegativeStrategy) -> Vec<SampleSets> {
    gold.iter()
        .enumerate()
        .map(|(t, &g)| {
            let rows: Vec<&[f64]> = dists
                .iter()
                .map(|d| d.row(t).to_slice().expect("standard layout"))
                .collect();
            match strategy {
                NegativeStrategy::Mc => acquire_samples(&rows, g),
                NegativeStrategy::TopK(k) => topk_negatives(&rows[0], g, k),
                NegativeStrategy::TopP(p) => topp_negatives(&rows[0], g, p),
            }
        })
        .collect()
}

/// Loss terms and parameter gradients for one sequence under the joint
/// objective (or any ablation of it).
pub fn sequence_grads<R: Rng>(
    model: &Seq2Seq,
    ex: &Encoded,
    cfg: &UaulConfig,
    rng: &mut R,
) -> Result<(LossBundle, Result<Gradients, TapeError>), ModelError> {
    let (tape, probs) = forward(model, ex, cfg, rng)?;
    let dists: Vec<ArrayView2<f64>> = probs.iter().map(|&p| tape.value(p)).collect();
    let samples = sample_sets(&dists, &ex.gold, cfg.negatives);
    let out = joint_loss(&dists, &ex.gold, &samples, &cfg.mul, &cfg.flags());
    if !out.bundle.is_finite() {
        return Ok((out.bundle, Err(TapeError::NonFiniteLoss(out.bundle.l_joint))));
    }
    let seeds = probs.into_iter().zip(out.grads).collect();
    Ok((out.bundle, tape.backward_with(seeds)))
}

/// Plain teacher-forced MLE with no sampling machinery.
pub fn baseline_grads(model: &Seq2Seq, ex: &Encoded) -> Result<(LossBundle, Result<Gradients, TapeError>), ModelError> {
    let mut tape = Tape::new(model.params());
    let h = model.encode_decode(&mut tape, &ex.src, &ex.y_in)?;
    let w = tape.param(model.lm_head_id());
    let logits = tape.matmul(h, w);
    let p = tape.softmax(logits, false);
    let (l_mle, mut grads) = mle_loss_grad(&[tape.value(p)], &ex.gold);
    let bundle = LossBundle::from_terms(l_mle, 0.0, 0.0, 0.0);
    if !bundle.is_finite() {
        return Ok((bundle, Err(TapeError::NonFiniteLoss(bundle.l_joint))));
    }
    let g: Matrix = grads.pop().expect("one distribution");
    Ok((bundle, tape.backward_with(vec![(p, g)])))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub loss: LossBundle,
    pub dev: ScoreReportSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Batch-mean loss terms of every optimizer step.
    pub steps: Vec<LossBundle>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    /// Not part of the deterministic output.
    #[serde(skip)]
    pub wall_clock: Duration,
}

/// Equality ignores `wall_clock`.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs
            && self.steps == other.steps
            && self.best_epoch == other.best_epoch
            && self.best_dev_f1 == other.best_dev_f1
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Seq2Seq,
    pub vocab: Vocabulary,
    pub report: TrainReport,
}

pub fn train(cfg: &UaulConfig, corpus: &CorpusSplit) -> Result<TrainOutcome, TrainError> {
    train_with(cfg, corpus, |_| {})
}

/// Trains on `corpus.train`, scoring `corpus.dev` after every epoch and
/// keeping the parameters of the best dev epoch (later epochs win ties).
/// `on_epoch` sees each epoch log as soon as it is computed.
pub fn train_with(cfg: &UaulConfig, corpus: &CorpusSplit, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let start = Instant::now();
    let vocab = Vocabulary::build(&corpus.train);
    let data = encode_examples(&corpus.train, &vocab, cfg.template)?;
    let mut model = Seq2Seq::new(cfg.dims(vocab.len()), cfg.seed).map_err(|source| TrainError::Model { index: 0, source })?;
    let mut adam = Adam::new(model.params(), cfg.lr);
    let vanilla = cfg.is_vanilla();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, model.params().clone());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut global_step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut substream(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut epoch_steps = Vec::new();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = substream(cfg.seed, &[STREAM_DROPOUT, global_step]);
            global_step += 1;
            let mut total = Gradients::zeros_like(model.params());
            let mut bundles = Vec::with_capacity(batch.len());
            for &i in batch {
                let (bundle, grads) = if vanilla {
                    baseline_grads(&model, &data[i])
                } else {
                    sequence_grads(&model, &data[i], cfg, &mut rng)
                }
                .map_err(|source| TrainError::Model { index: i, source })?;
                let grads = match grads {
                    Ok(g) => g,
                    Err(TapeError::NonFiniteLoss(_) | TapeError::NonFiniteSeed) => {
                        return Err(TrainError::Divergence {
                            epoch,
                            step,
                            examples: batch.to_vec(),
                        })
                    }
                    Err(source) => return Err(TrainError::Backward { epoch, step, source }),
                };
                total.add_assign(&grads);
                bundles.push(bundle);
            }
            total.scale(1.0 / batch.len() as f64);
            clip_global_norm(&mut total, cfg.clip_norm);
            adam.step(model.params_mut(), &total);
            let mean = LossBundle::mean(&bundles);
            epoch_steps.push(mean);
            steps.push(mean);
        }
        let dev = eval::evaluate(&model, &vocab, cfg.template, &corpus.dev, cfg.max_decode_len).map_err(|e| TrainError::Eval(e.to_string()))?;
        let log = EpochLog {
            epoch,
            loss: LossBundle::mean(&epoch_steps),
            dev: (&dev).into(),
        };
        on_epoch(&log);
        if dev.f1 >= best.1 {
            best = (epoch, dev.f1, model.params().clone());
        }
        epochs.push(log);
    }
    *model.params_mut() = best.2;
    Ok(TrainOutcome {
        model,
        vocab,
        report: TrainReport {
            epochs,
            steps,
            best_epoch: best.0,
            best_dev_f1: best.1,
            wall_clock: start.elapsed(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectedPositive {
    pub prob: f64,
    pub sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectedNegative {
    pub token: String,
    pub prob: f64,
    pub sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectedStep {
    pub t: usize,
    pub gold: String,
    pub positives: Vec<InspectedPositive>,
    pub negatives: Vec<InspectedNegative>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectRecord {
    pub index: usize,
    pub sentence: String,
    /// Number of output distributions drawn per decoding step.
    pub distributions: usize,
    pub steps: Vec<InspectedStep>,
}

/// Positive and negative samples the trainer would draw for each example,
/// with token surfaces. Uses the same sampling path as training.
pub fn inspect_negatives(model: &Seq2Seq, vocab: &Vocabulary, cfg: &UaulConfig, examples: &[Example]) -> Result<Vec<InspectRecord>, TrainError> {
    let data = encode_examples(examples, vocab, cfg.template)?;
    let surface = |id: u32| vocab.token(id).unwrap_or("<unk>").to_string();
    data.iter()
        .zip(examples)
        .enumerate()
        .map(|(index, (ex, raw))| {
            let mut rng = substream(cfg.seed, &[STREAM_INSPECT, index as u64]);
            let (tape, probs) = forward(model, ex, cfg, &mut rng).map_err(|source| TrainError::Model { index, source })?;
            let dists: Vec<ArrayView2<f64>> = probs.iter().map(|&p| tape.value(p)).collect();
            let sets = sample_sets(&dists, &ex.gold, cfg.negatives);
            let steps = sets
                .into_iter()
                .enumerate()
                .map(|(t, s)| InspectedStep {
                    t,
                    gold: surface(ex.gold[t]),
                    positives: s
                        .positives
                        .iter()
                        .map(|p| InspectedPositive {
                            prob: p.prob,
                            sample: p.sample,
                        })
                        .collect(),
                    negatives: s
                        .negatives
                        .iter()
                        .map(|n| InspectedNegative {
                            token: surface(n.token),
                            prob: n.prob,
                            sample: n.sample,
                        })
                        .collect(),
                })
                .collect();
            Ok(InspectRecord {
                index,
                sentence: raw.sentence.clone(),
                distributions: probs.len(),
                steps,
            })
        })
        .collect()
}

/// The full configuration and its five ablations.
pub fn ablation_variants(base: &UaulConfig) -> Vec<(&'static str, UaulConfig)> {
    let full = UaulConfig {
        use_mul: true,
        use_me: true,
        use_mc: true,
        use_ul: false,
        negatives: NegativeStrategy::Mc,
        ..base.clone()
    };
    vec![
        ("full", full.clone()),
        ("-ME", UaulConfig { use_me: false, ..full.clone() }),
        ("-MUL", UaulConfig { use_mul: false, ..full.clone() }),
        (
            "-MUL+UL",
            UaulConfig {
                use_mul: false,
                use_ul: true,
                ..full.clone()
            },
        ),
        (
            "-MUL-ME+UL",
            UaulConfig {
                use_mul: false,
                use_me: false,
                use_ul: true,
                ..full.clone()
            },
        ),
        ("-MC dropout", UaulConfig { use_mc: false, ..full }),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub use_mul: bool,
    pub use_me: bool,
    pub use_mc: bool,
    pub use_ul: bool,
    pub negatives: String,
    pub seeds: Vec<SeedResult>,
    pub failures: Vec<SeedFailure>,
    /// Means over the successful seeds.
    pub mean: ScoreReportSummary,
    /// Distributions per decoding step seen by the inspector on the first
    /// test example with the first seed's model.
    pub distributions_per_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub variants: Vec<VariantResult>,
    /// Per-seed F1 of `full` minus `-MUL`, for seeds where both succeeded.
    pub full_minus_no_mul: Vec<SeedDelta>,
    pub full_minus_no_mul_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedDelta {
    pub seed: u64,
    pub delta_f1: f64,
}

impl AblationTable {
    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>7} {:>7} {:>7} {:>6}\n", "variant", "P", "R", "F1", "seeds");
        for v in &self.variants {
            s.push_str(&format!(
                "{:<12} {:>7.4} {:>7.4} {:>7.4} {:>6}\n",
                v.name,
                v.mean.precision,
                v.mean.recall,
                v.mean.f1,
                v.seeds.len()
            ));
        }
        s.push_str(&format!("full - (-MUL) mean F1 delta: {:+.4}", self.full_minus_no_mul_mean));
        s
    }
}

fn mean_of(results: &[SeedResult]) -> ScoreReportSummary {
    let n = results.len().max(1) as f64;
    ScoreReportSummary {
        precision: results.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: results.iter().map(|r| r.recall).sum::<f64>() / n,
        f1: results.iter().map(|r| r.f1).sum::<f64>() / n,
    }
}

/// Trains every variant for every seed and scores it on the test split. A
/// failing run is recorded and the suite continues.
pub fn run_ablation_suite(corpus: &CorpusSplit, base: &UaulConfig, seeds: &[u64]) -> AblationTable {
    let mut variants = Vec::new();
    for (name, cfg) in ablation_variants(base) {
        let mut results = Vec::new();
        let mut failures = Vec::new();
        let mut distributions_per_step = None;
        for &seed in seeds {
            let cfg = UaulConfig { seed, ..cfg.clone() };
            let run = train(&cfg, corpus).map_err(EvalError::from).and_then(|out| {
                let score = eval::evaluate(&out.model, &out.vocab, cfg.template, &corpus.test, cfg.max_decode_len)?;
                Ok((out, score))
            });
            match run {
                Ok((out, score)) => {
                    if distributions_per_step.is_none() {
                        distributions_per_step = corpus
                            .test
                            .first()
                            .and_then(|ex| inspect_negatives(&out.model, &out.vocab, &cfg, std::slice::from_ref(ex)).ok())
                            .and_then(|r| r.first().map(|r| r.distributions));
                    }
                    results.push(SeedResult {
                        seed,
                        precision: score.precision,
                        recall: score.recall,
                        f1: score.f1,
                    });
                }
                Err(e) => failures.push(SeedFailure { seed, error: e.to_string() }),
            }
        }
        variants.push(VariantResult {
            name: name.to_string(),
            use_mul: cfg.use_mul,
            use_me: cfg.use_me,
            use_mc: cfg.use_mc,
            use_ul: cfg.use_ul,
            negatives: cfg.negatives.name(),
            mean: mean_of(&results),
            seeds: results,
            failures,
            distributions_per_step,
        });
    }
    let f1_of = |name: &str, seed: u64| {
        variants
            .iter()
            .find(|v| v.name == name)
            .and_then(|v| v.seeds.iter().find(|r| r.seed == seed))
            .map(|r| r.f1)
    };
    let deltas: Vec<SeedDelta> = seeds
        .iter()
        .filter_map(|&seed| {
            Some(SeedDelta {
                seed,
                delta_f1: f1_of("full", seed)? - f1_of("-MUL", seed)?,
            })
        })
        .collect();
    let mean = if deltas.is_empty() {
        0.0
    } else {
        deltas.iter().map(|d| d.delta_f1).sum::<f64>() / deltas.len() as f64
    };
    AblationTable {
        variants,
        full_minus_no_mul: deltas,
        full_minus_no_mul_mean: mean,
    }
}
