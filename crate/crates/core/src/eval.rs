//! Exact-quad precision/recall/F1 and the low-resource protocol.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::codec::{self, AspectQuad, Sentiment, TemplateKind};
use crate::config::UaulConfig;
use crate::corpus::{CorpusSplit, Example, Vocabulary};
use crate::model::{ModelError, Seq2Seq};
use crate::sampler::substream;
use crate::trainer::{self, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{pred} prediction lists for {gold} gold lists")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("ratio {0} must lie in (0, 1]")]
    InvalidRatio(f64),
    #[error("ratio {ratio} of {total} training examples selects none")]
    EmptySubset { ratio: f64, total: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Parsed model output for one example.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Prediction {
    pub quads: Vec<AspectQuad>,
    /// Chunks of the generated sequence that did not fit the template.
    pub unparseable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleScore {
    pub index: usize,
    pub gold: usize,
    pub predicted: usize,
    pub matched: usize,
    pub unparseable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub matched: usize,
    pub unparseable_chunks: usize,
    pub examples: Vec<ExampleScore>,
}

impl ScoreReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8}", "metric", "value");
        let _ = writeln!(s, "{:<10} {:>8.4}", "precision", self.precision);
        let _ = writeln!(s, "{:<10} {:>8.4}", "recall", self.recall);
        let _ = writeln!(s, "{:<10} {:>8.4}", "f1", self.f1);
        let _ = writeln!(s, "{:<10} {:>8}", "gold", self.gold);
        let _ = writeln!(s, "{:<10} {:>8}", "predicted", self.predicted);
        let _ = writeln!(s, "{:<10} {:>8}", "matched", self.matched);
        let _ = write!(s, "{:<10} {:>8}", "unparsed", self.unparseable_chunks);
        s
    }
}

type QuadKey = (Option<String>, Option<String>, String, Sentiment);

fn norm_text(s: &str) -> String {
    codec::normalize_ws(s).to_lowercase()
}

/// Case-insensitive, whitespace-collapsed comparison key. Implicit terms map
/// to `None`, so they never equal an explicit `"it"` or `"null"`.
fn key(q: &AspectQuad) -> QuadKey {
    (
        q.aspect.text().map(norm_text),
        q.opinion.text().map(norm_text),
        norm_text(&q.category),
        q.sentiment,
    )
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn score(pred: &[Vec<AspectQuad>], gold: &[Vec<AspectQuad>]) -> Result<ScoreReport, EvalError> {
    let preds: Vec<Prediction> = pred
        .iter()
        .map(|q| Prediction {
            quads: q.clone(),
            unparseable: 0,
        })
        .collect();
    score_predictions(&preds, gold)
}

/// Micro-averaged exact-match scores with per-example set semantics.
pub fn score_predictions(pred: &[Prediction], gold: &[Vec<AspectQuad>]) -> Result<ScoreReport, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    let mut examples = Vec::with_capacity(gold.len());
    let (mut n_gold, mut n_pred, mut n_match, mut n_unparsed) = (0, 0, 0, 0);
    for (index, (p, g)) in pred.iter().zip(gold).enumerate() {
        let ps: BTreeSet<QuadKey> = p.quads.iter().map(key).collect();
        let gs: BTreeSet<QuadKey> = g.iter().map(key).collect();
        let matched = ps.intersection(&gs).count();
        n_gold += gs.len();
        n_pred += ps.len();
        n_match += matched;
        n_unparsed += p.unparseable;
        examples.push(ExampleScore {
            index,
            gold: gs.len(),
            predicted: ps.len(),
            matched,
            unparseable: p.unparseable,
        });
    }
    let precision = ratio(n_match, n_pred);
    let recall = ratio(n_match, n_gold);
    Ok(ScoreReport {
        precision,
        recall,
        f1: f1(precision, recall),
        gold: n_gold,
        predicted: n_pred,
        matched: n_match,
        unparseable_chunks: n_unparsed,
        examples,
    })
}

/// Greedy-decodes each sentence and parses the output with `template`.
pub fn predict(
    model: &Seq2Seq,
    vocab: &Vocabulary,
    template: TemplateKind,
    sentences: impl IntoIterator<Item = impl AsRef<str>>,
    max_len: usize,
) -> Result<Vec<(String, Prediction)>, ModelError> {
    sentences
        .into_iter()
        .map(|s| {
            let src = vocab.tokenize(s.as_ref());
            let ids = model.greedy_decode(&src, max_len)?;
            let text = vocab.detokenize(&ids);
            let (quads, diags) = codec::parse(&text, template);
            Ok((
                text,
                Prediction {
                    quads,
                    unparseable: diags.len(),
                },
            ))
        })
        .collect()
}

pub fn evaluate(
    model: &Seq2Seq,
    vocab: &Vocabulary,
    template: TemplateKind,
    examples: &[Example],
    max_len: usize,
) -> Result<ScoreReport, EvalError> {
    let preds: Vec<Prediction> = predict(model, vocab, template, examples.iter().map(|e| &e.sentence), max_len)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let gold: Vec<Vec<AspectQuad>> = examples.iter().map(|e| e.quads.clone()).collect();
    score_predictions(&preds, &gold)
}

/// Training-set fractions 10%, 15%, ..., 50%.
pub fn default_ratios() -> Vec<f64> {
    (2..=10).map(|i| i as f64 * 0.05).collect()
}

/// Indices of the first `ceil(ratio * n)` elements of one seeded
/// permutation, returned in corpus order. Smaller ratios select subsets of
/// larger ones.
pub fn nested_subset(n: usize, ratio: f64, seed: u64) -> Result<Vec<usize>, EvalError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(EvalError::InvalidRatio(ratio));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, &[0x10_0e5]));
    // round before ceil so 0.15 * 20 stays 3
    let take = ((ratio * n as f64 * 1e9).round() / 1e9).ceil() as usize;
    if take == 0 {
        return Err(EvalError::EmptySubset { ratio, total: n });
    }
    let mut picked = order[..take.min(n)].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowResourceRow {
    pub ratio: f64,
    pub train_examples: usize,
    pub baseline: ScoreReportSummary,
    pub uaul: ScoreReportSummary,
    /// UAUL F1 minus baseline F1.
    pub delta_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreReportSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<&ScoreReport> for ScoreReportSummary {
    fn from(r: &ScoreReport) -> Self {
        ScoreReportSummary {
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowResourceTable {
    pub template: String,
    pub rows: Vec<LowResourceRow>,
}

impl LowResourceTable {
    pub fn table(&self) -> String {
        let mut s = format!("template: {}\n{:>6} {:>6} {:>9} {:>9} {:>8}\n", self.template, "ratio", "train", "baseline", "+uaul", "delta");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>5.0}% {:>6} {:>9.4} {:>9.4} {:>+8.4}",
                r.ratio * 100.0,
                r.train_examples,
                r.baseline.f1,
                r.uaul.f1,
                r.delta_f1
            );
        }
        s
    }
}

/// For each ratio: trains the baseline (`cfg.baseline()`) and the full
/// configuration on a nested training subset and scores both on the test split.
pub fn low_resource_run(corpus: &CorpusSplit, ratios: &[f64], cfg: &UaulConfig) -> Result<LowResourceTable, EvalError> {
    let mut rows = Vec::with_capacity(ratios.len());
    for &r in ratios {
        let picked = nested_subset(corpus.train.len(), r, cfg.seed)?;
        let subset = CorpusSplit {
            train: picked.iter().map(|&i| corpus.train[i].clone()).collect(),
            dev: corpus.dev.clone(),
            test: corpus.test.clone(),
        };
        let base = trainer::train(&cfg.baseline(), &subset)?;
        let base_score = evaluate(&base.model, &base.vocab, cfg.template, &subset.test, cfg.max_decode_len)?;
        let full = trainer::train(cfg, &subset)?;
        let full_score = evaluate(&full.model, &full.vocab, cfg.template, &subset.test, cfg.max_decode_len)?;
        rows.push(LowResourceRow {
            ratio: r,
            train_examples: picked.len(),
            baseline: (&base_score).into(),
            uaul: (&full_score).into(),
            delta_f1: full_score.f1 - base_score.f1,
        });
    }
    Ok(LowResourceTable {
        template: cfg.template.name(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Term;

    fn q(at: &str, ot: &str, ac: &str) -> AspectQuad {
        AspectQuad::new(Term::explicit(at), Term::explicit(ot), ac, Sentiment::Positive)
    }

    #[test]
    fn half_right() {
        let (q1, q2, q3) = (q("a", "b", "x#y"), q("c", "d", "x#y"), q("e", "f", "x#y"));
        let r = score(&[vec![q1.clone(), q3]], &[vec![q1, q2]]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        assert_eq!((r.gold, r.predicted, r.matched), (2, 2, 1));
    }

    #[test]
    fn perfect_and_empty() {
        let gold = vec![vec![q("a", "b", "x#y")], vec![q("c", "d", "u#v"), q("e", "f", "u#v")]];
        let r = score(&gold, &gold).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = score(&[vec![], vec![]], &gold).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(score(&[vec![]], &[]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn normalization_and_dedup() {
        let gold = vec![vec![q("Fish  Tacos", "Good", "Food#Quality")]];
        let pred = vec![vec![q("fish tacos", "good", "food#quality"), q("fish tacos", "good", "food#quality")]];
        let r = score(&pred, &gold).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 1.0));
        assert_eq!(r.predicted, 1);
    }

    #[test]
    fn implicit_never_matches_literal_it() {
        let implicit = AspectQuad::new(Term::Implicit, Term::explicit("good"), "a#b", Sentiment::Positive);
        let literal = AspectQuad::new(Term::explicit("it"), Term::explicit("good"), "a#b", Sentiment::Positive);
        let r = score(&[vec![literal]], &[vec![implicit]]).unwrap();
        assert_eq!(r.matched, 0);
    }

    #[test]
    fn unparseable_counts_are_reported() {
        let gold = vec![vec![q("a", "b", "x#y")]];
        let pred = vec![Prediction {
            quads: vec![],
            unparseable: 2,
        }];
        let r = score_predictions(&pred, &gold).unwrap();
        assert_eq!(r.unparseable_chunks, 2);
        assert_eq!(r.examples[0].unparseable, 2);
        assert!(r.table().contains("unparsed"));
    }

    #[test]
    fn ratios_match_protocol() {
        let r = default_ratios();
        assert_eq!(r.len(), 9);
        assert!((r[0] - 0.10).abs() < 1e-12 && (r[8] - 0.50).abs() < 1e-12);
    }

    #[test]
    fn subsets_are_nested() {
        let mut prev: Option<Vec<usize>> = None;
        for r in default_ratios() {
            let s = nested_subset(800, r, 7).unwrap();
            assert_eq!(s.len(), (r * 800.0).round() as usize);
            if let Some(p) = &prev {
                assert!(p.iter().all(|i| s.contains(i)));
            }
            prev = Some(s);
        }
        assert_eq!(nested_subset(10, 1.0, 7).unwrap(), (0..10).collect::<Vec<_>>());
        assert!(matches!(nested_subset(10, 0.0, 7), Err(EvalError::InvalidRatio(_))));
        assert!(matches!(nested_subset(0, 0.5, 7), Err(EvalError::EmptySubset { .. })));
    }
}
