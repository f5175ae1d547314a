//! Dataset files, vocabulary and tokenization.
//!
//! Dataset files are JSON lines, one example per line:
//!
//! ```text
//! {"sentence": "service was good", "quads": [{"at": "service", "ot": "good", "ac": "service#general", "sp": "positive"}]}
//! ```
//!
//! Implicit aspect/opinion terms are written as the literal string `"NULL"`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{self, AspectQuad, Sentiment, TargetSequence, Term};

pub mod synth;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("synthetic grammar too small: produced {produced} distinct sentences, {requested} requested")]
    GrammarExhausted { produced: usize, requested: usize },
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub sentence: String,
    pub quads: Vec<AspectQuad>,
}

impl Example {
    pub fn new(sentence: impl Into<String>, quads: Vec<AspectQuad>) -> Self {
        Example {
            sentence: sentence.into(),
            quads,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuadRecord {
    at: String,
    ot: String,
    ac: String,
    sp: Sentiment,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    sentence: String,
    quads: Vec<QuadRecord>,
}

const NULL_TERM: &str = "NULL";

fn term_from_file(s: String) -> Term {
    if s == NULL_TERM {
        Term::Implicit
    } else {
        Term::Explicit(s)
    }
}

fn term_to_file(t: &Term) -> String {
    t.text().unwrap_or(NULL_TERM).to_string()
}

impl From<&Example> for ExampleRecord {
    fn from(e: &Example) -> Self {
        ExampleRecord {
            sentence: e.sentence.clone(),
            quads: e
                .quads
                .iter()
                .map(|q| QuadRecord {
                    at: term_to_file(&q.aspect),
                    ot: term_to_file(&q.opinion),
                    ac: q.category.clone(),
                    sp: q.sentiment,
                })
                .collect(),
        }
    }
}

/// Whether examples without quads are acceptable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileRole {
    Training,
    Predictions,
}

pub fn parse_line(line: &str, role: FileRole) -> Result<Example, String> {
    let rec: ExampleRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if rec.sentence.trim().is_empty() {
        return Err("empty sentence".into());
    }
    if role == FileRole::Training && rec.quads.is_empty() {
        return Err("training example without quads".into());
    }
    let quads = rec
        .quads
        .into_iter()
        .map(|q| {
            let quad = AspectQuad::new(term_from_file(q.at), term_from_file(q.ot), q.ac, q.sp);
            quad.validate().map(|_| quad).map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Example::new(rec.sentence, quads))
}

pub fn to_line(example: &Example) -> String {
    serde_json::to_string(&ExampleRecord::from(example)).expect("records always serialize")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads a training/evaluation file; every example must carry quads.
pub fn load(path: impl AsRef<Path>) -> Result<Vec<Example>, CorpusError> {
    load_with_role(path, FileRole::Training)
}

/// Loads a prediction file, where examples may have no quads.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Example>, CorpusError> {
    load_with_role(path, FileRole::Predictions)
}

pub fn load_with_role(path: impl AsRef<Path>, role: FileRole) -> Result<Vec<Example>, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_line(&line, role).map_err(|message| CorpusError::Line { line: i + 1, message })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, examples: &[Example]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        writeln!(w, "{}", to_line(ex)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub sentences: usize,
    pub quads: usize,
}

pub fn counts(examples: &[Example]) -> SplitCounts {
    SplitCounts {
        sentences: examples.len(),
        quads: examples.iter().map(|e| e.quads.len()).sum(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl CorpusSplit {
    /// Reads `train.jsonl`, `dev.jsonl` and `test.jsonl` from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let dir = dir.as_ref();
        Ok(CorpusSplit {
            train: load(dir.join("train.jsonl"))?,
            dev: load(dir.join("dev.jsonl"))?,
            test: load(dir.join("test.jsonl"))?,
        })
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<(), CorpusError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save(dir.join("train.jsonl"), &self.train)?;
        save(dir.join("dev.jsonl"), &self.dev)?;
        save(dir.join("test.jsonl"), &self.test)
    }
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 9] = ["<pad>", "<s>", "</s>", "<unk>", "[SSEP]", "[AT]", "[OT]", "[AC]", "[SP]"];

/// Words every template may emit.
const TEMPLATE_WORDS: [&str; 9] = ["great", "ok", "bad", "it", "null", "because", "is", "(", ")"];
const PUNCTUATION: [char; 3] = ['(', ')', ','];

/// Token/id bijection. Reserved tokens take ids `0..9`, followed by template
/// words, followed by the sorted remaining words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: std::collections::HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err("vocabulary does not start with the reserved tokens".into());
        }
        let mut index = std::collections::HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Builds the vocabulary from training sentences, their quads and every
    /// template surface word, so rendered targets are never out of vocabulary.
    pub fn build(train: &[Example]) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        tokens.push(",".into());
        let fixed: BTreeSet<String> = tokens.iter().cloned().collect();
        let mut words = BTreeSet::new();
        for ex in train {
            words.extend(split_words(&ex.sentence));
            for q in &ex.quads {
                for t in [&q.aspect, &q.opinion].into_iter().filter_map(Term::text) {
                    words.extend(split_words(t));
                }
                words.extend(split_words(&q.category.replace('#', " ")));
            }
        }
        tokens.extend(words.into_iter().filter(|w| !fixed.contains(w)));
        Self::from_tokens(tokens).expect("constructed vocabulary is a bijection")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace tokenization with `(`, `)` and `,` split off, lowercased
    /// lookup, unknown words mapped to `<unk>`. Reserved markers match verbatim.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .map(|w| self.id(&w).unwrap_or(UNK))
            .collect()
    }

    /// Target token ids for a rendered sequence, terminated by `</s>`.
    pub fn encode_target(&self, target: &TargetSequence) -> Vec<u32> {
        let mut ids = self.tokenize(&target.text);
        ids.push(EOS);
        ids
    }

    /// Joins tokens with single spaces, stopping at `</s>` and skipping
    /// `<s>`/`<pad>`.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != BOS && id != PAD)
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// SHA-256 over the newline-joined token list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().flat_map(|w| {
        if RESERVED.contains(&w) {
            return vec![w.to_string()];
        }
        let mut out = Vec::new();
        let mut cur = String::new();
        for c in w.chars() {
            if PUNCTUATION.contains(&c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur).to_lowercase());
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur.to_lowercase());
        }
        out
    })
}

/// Renders every example's target with `kind`.
pub fn render_targets(examples: &[Example], kind: codec::TemplateKind) -> Result<Vec<TargetSequence>, codec::CodecError> {
    examples.iter().map(|e| codec::render(&e.quads, kind)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::TemplateKind;

    const INTRO_LINE: &str = r#"{"sentence": "Service was good and food was wonderful", "quads": [{"at": "Service", "ot": "good", "ac": "service#general", "sp": "positive"}, {"at": "food", "ot": "wonderful", "ac": "food#quality", "sp": "positive"}]}"#;

    #[test]
    fn load_intro_example() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        fs::write(&p, format!("{INTRO_LINE}\n")).unwrap();
        let exs = load(&p).unwrap();
        assert_eq!(exs.len(), 1);
        assert_eq!(exs[0].quads.len(), 2);
        assert_eq!(counts(&exs), SplitCounts { sentences: 1, quads: 2 });
    }

    #[test]
    fn load_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        fs::write(&p, "").unwrap();
        let exs = load(&p).unwrap();
        assert!(exs.is_empty());
        assert_eq!(counts(&exs).sentences, 0);
    }

    #[test]
    fn load_reports_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let bad = r#"{"sentence": "x y", "quads": [{"at": "x", "ot": "y", "ac": "a#b", "sp": "positiv"}]}"#;
        fs::write(&p, format!("{INTRO_LINE}\n{bad}\n")).unwrap();
        match load(&p).unwrap_err() {
            CorpusError::Line { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("positiv"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn load_rejects_unknown_and_missing_fields() {
        for line in [
            r#"{"sentence": "x", "quads": [{"at": "x", "ot": "y", "ac": "a#b", "sp": "neutral", "extra": 1}]}"#,
            r#"{"sentence": "x", "quads": [{"at": "x", "ac": "a#b", "sp": "neutral"}]}"#,
            r#"{"sentence": "x", "quads": [{"at": "x", "ot": "y", "ac": "ab", "sp": "neutral"}]}"#,
            r#"{"sentence": "x", "quads": []}"#,
        ] {
            assert!(parse_line(line, FileRole::Training).is_err(), "{line}");
        }
        assert!(parse_line(r#"{"sentence": "x", "quads": []}"#, FileRole::Predictions).is_ok());
    }

    #[test]
    fn null_means_implicit() {
        let ex = parse_line(
            r#"{"sentence": "it was overpriced", "quads": [{"at": "NULL", "ot": "overpriced", "ac": "restaurant#prices", "sp": "negative"}]}"#,
            FileRole::Training,
        )
        .unwrap();
        assert_eq!(ex.quads[0].aspect, Term::Implicit);
        assert_eq!(parse_line(&to_line(&ex), FileRole::Training).unwrap(), ex);
    }

    #[test]
    fn tokenize_basics() {
        let ex = parse_line(INTRO_LINE, FileRole::Training).unwrap();
        let v = Vocabulary::build(&[ex]);
        let ids = v.tokenize("food was wonderful");
        assert_eq!(ids, vec![v.id("food").unwrap(), v.id("was").unwrap(), v.id("wonderful").unwrap()]);
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.tokenize("zebra"), vec![UNK]);
        assert_eq!(v.tokenize("FOOD"), v.tokenize("food"));
        assert_eq!(v.tokenize("[SSEP]"), vec![4]);
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::build(&[]);
        for (i, t) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(t), Some(i as u32));
        }
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn targets_are_never_oov() {
        let ex = parse_line(INTRO_LINE, FileRole::Training).unwrap();
        let v = Vocabulary::build(std::slice::from_ref(&ex));
        for kind in [TemplateKind::Paraphrase, TemplateKind::special_symbols(), TemplateKind::Gas] {
            let t = codec::render(&ex.quads, kind).unwrap();
            let ids = v.encode_target(&t);
            assert!(!ids.contains(&UNK), "{kind}: {}", t.text);
            assert_eq!(*ids.last().unwrap(), EOS);
            let text = v.detokenize(&ids);
            let (qs, diags) = codec::parse(&text, kind);
            assert!(diags.is_empty(), "{text}");
            assert_eq!(qs.len(), 2);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = synth::generate(&synth::SyntheticSpec::new(20, 5, 5, 3)).unwrap();
        split.save_dir(dir.path()).unwrap();
        assert_eq!(CorpusSplit::load_dir(dir.path()).unwrap(), split);
    }
}
