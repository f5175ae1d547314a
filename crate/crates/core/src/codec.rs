//! Conversion between aspect quadruplets and templated target sequences.
//!
//! A quad is first projected onto surface words (implicit aspect becomes
//! `it`, implicit opinion becomes `NULL`, the category `food#quality`
//! becomes `food quality`, sentiment becomes one of `great`/`ok`/`bad`),
//! then the surfaces are written into one of three templates. Multiple
//! quads are joined with ` [SSEP] `.
//!
//! [`parse`] is total: anything that does not fit the template becomes a
//! [`ParseDiagnostic`] and is skipped.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SSEP: &str = "[SSEP]";
pub const IMPLICIT_ASPECT_SURFACE: &str = "it";
pub const IMPLICIT_OPINION_SURFACE: &str = "NULL";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid aspect category {value:?}: {reason}")]
    InvalidCategory { value: String, reason: &'static str },
    #[error("empty explicit {0} term")]
    EmptyTerm(&'static str),
    #[error("quad #{index}")]
    Quad {
        index: usize,
        #[source]
        source: Box<CodecError>,
    },
    #[error("cannot render an empty quad list")]
    NoQuads,
    #[error("unknown template kind {0:?}")]
    UnknownTemplate(String),
    #[error("invalid slot order {0:?}: expected a permutation of at,ot,ac,sp")]
    InvalidOrder(String),
}

/// An aspect or opinion term. Implicit terms have no surface text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Explicit(String),
    Implicit,
}

impl Term {
    pub fn explicit(text: impl Into<String>) -> Self {
        Term::Explicit(text.into())
    }

    pub fn is_implicit(&self) -> bool {
        matches!(self, Term::Implicit)
    }

    pub fn text(&self) -> Option<&str> {
        match self {
            Term::Explicit(t) => Some(t),
            Term::Implicit => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Neutral,
    Negative,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Neutral, Sentiment::Negative];

    pub fn label(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Neutral => "neutral",
            Sentiment::Negative => "negative",
        }
    }

    /// The sentiment-bearing word used inside templates.
    pub fn surface(self) -> &'static str {
        match self {
            Sentiment::Positive => "great",
            Sentiment::Neutral => "ok",
            Sentiment::Negative => "bad",
        }
    }

    /// Inverse of [`Sentiment::surface`], case-insensitive.
    pub fn from_surface(word: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.surface().eq_ignore_ascii_case(word))
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Sentiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| format!("invalid sentiment {s:?}"))
    }
}

/// One (aspect term, opinion term, aspect category, sentiment) tuple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AspectQuad {
    pub aspect: Term,
    pub opinion: Term,
    /// `entity#attribute`, e.g. `food#quality`.
    pub category: String,
    pub sentiment: Sentiment,
}

impl AspectQuad {
    pub fn new(aspect: Term, opinion: Term, category: impl Into<String>, sentiment: Sentiment) -> Self {
        AspectQuad {
            aspect,
            opinion,
            category: category.into(),
            sentiment,
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        validate_category(&self.category)?;
        if let Term::Explicit(t) = &self.aspect {
            if t.trim().is_empty() {
                return Err(CodecError::EmptyTerm("aspect"));
            }
        }
        if let Term::Explicit(t) = &self.opinion {
            if t.trim().is_empty() {
                return Err(CodecError::EmptyTerm("opinion"));
            }
        }
        Ok(())
    }
}

pub fn validate_category(ac: &str) -> Result<(), CodecError> {
    let invalid = |reason| CodecError::InvalidCategory {
        value: ac.to_string(),
        reason,
    };
    let mut halves = ac.split('#');
    let (Some(entity), Some(attribute), None) = (halves.next(), halves.next(), halves.next()) else {
        return Err(invalid("expected exactly one '#' separator"));
    };
    if entity.is_empty() || attribute.is_empty() {
        return Err(invalid("empty entity or attribute"));
    }
    if ac.chars().any(char::is_whitespace) {
        return Err(invalid("whitespace inside category"));
    }
    Ok(())
}

/// Surface words of one quad, ready to be placed into a template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuadSurface {
    pub aspect: String,
    pub opinion: String,
    pub category: String,
    pub sentiment: &'static str,
}

pub fn project(quad: &AspectQuad) -> Result<QuadSurface, CodecError> {
    quad.validate()?;
    let surface = |term: &Term, implicit: &str| match term {
        Term::Explicit(t) => normalize_ws(t),
        Term::Implicit => implicit.to_string(),
    };
    Ok(QuadSurface {
        aspect: surface(&quad.aspect, IMPLICIT_ASPECT_SURFACE),
        opinion: surface(&quad.opinion, IMPLICIT_OPINION_SURFACE),
        category: quad.category.replace('#', " "),
        sentiment: quad.sentiment.surface(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Aspect,
    Opinion,
    Category,
    Sentiment,
}

impl Slot {
    pub fn marker(self) -> &'static str {
        match self {
            Slot::Aspect => "[AT]",
            Slot::Opinion => "[OT]",
            Slot::Category => "[AC]",
            Slot::Sentiment => "[SP]",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Slot::Aspect => "at",
            Slot::Opinion => "ot",
            Slot::Category => "ac",
            Slot::Sentiment => "sp",
        }
    }

    fn from_marker(tok: &str) -> Option<Self> {
        [Slot::Aspect, Slot::Opinion, Slot::Category, Slot::Sentiment]
            .into_iter()
            .find(|s| s.marker() == tok)
    }
}

/// Template family used to linearize quads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateKind {
    /// `x_ac is x_sp because x_at is x_ot`
    Paraphrase,
    /// `[AT] x_at [OT] x_ot [AC] x_ac [SP] x_sp`, slots in the given order.
    SpecialSymbols([Slot; 4]),
    /// `(x_at, x_ot, x_ac, x_sp)`
    Gas,
}

impl TemplateKind {
    pub const DEFAULT_ORDER: [Slot; 4] = [Slot::Aspect, Slot::Opinion, Slot::Category, Slot::Sentiment];

    pub fn special_symbols() -> Self {
        TemplateKind::SpecialSymbols(Self::DEFAULT_ORDER)
    }

    /// Parses `paraphrase`, `gas`, `special`, or `special:ac,sp,at,ot`.
    pub fn parse_name(name: &str) -> Result<Self, CodecError> {
        let (head, order) = match name.split_once(':') {
            Some((h, o)) => (h, Some(o)),
            None => (name, None),
        };
        match (head, order) {
            ("paraphrase", None) => Ok(TemplateKind::Paraphrase),
            ("gas", None) => Ok(TemplateKind::Gas),
            ("special" | "special_symbols", None) => Ok(Self::special_symbols()),
            ("special" | "special_symbols", Some(o)) => Ok(TemplateKind::SpecialSymbols(parse_order(o)?)),
            _ => Err(CodecError::UnknownTemplate(name.to_string())),
        }
    }

    pub fn name(&self) -> String {
        match self {
            TemplateKind::Paraphrase => "paraphrase".into(),
            TemplateKind::Gas => "gas".into(),
            TemplateKind::SpecialSymbols(order) if *order == Self::DEFAULT_ORDER => "special".into(),
            TemplateKind::SpecialSymbols(order) => {
                let keys: Vec<_> = order.iter().map(|s| s.key()).collect();
                format!("special:{}", keys.join(","))
            }
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

fn parse_order(spec: &str) -> Result<[Slot; 4], CodecError> {
    let err = || CodecError::InvalidOrder(spec.to_string());
    let slots: Vec<Slot> = spec
        .split(',')
        .map(|k| match k.trim() {
            "at" => Ok(Slot::Aspect),
            "ot" => Ok(Slot::Opinion),
            "ac" => Ok(Slot::Category),
            "sp" => Ok(Slot::Sentiment),
            _ => Err(err()),
        })
        .collect::<Result<_, _>>()?;
    let order: [Slot; 4] = slots.try_into().map_err(|_| err())?;
    for (i, s) in order.iter().enumerate() {
        if order[..i].contains(s) {
            return Err(err());
        }
    }
    Ok(order)
}

/// A linearized target. Token ids live with the vocabulary; see
/// `corpus::Vocabulary::encode_target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSequence {
    pub text: String,
}

impl TargetSequence {
    pub fn new(text: impl Into<String>) -> Self {
        TargetSequence { text: text.into() }
    }
}

impl fmt::Display for TargetSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

pub fn render(quads: &[AspectQuad], kind: TemplateKind) -> Result<TargetSequence, CodecError> {
    if quads.is_empty() {
        return Err(CodecError::NoQuads);
    }
    let mut parts = Vec::with_capacity(quads.len());
    for (index, quad) in quads.iter().enumerate() {
        let s = project(quad).map_err(|e| CodecError::Quad {
            index,
            source: Box::new(e),
        })?;
        parts.push(render_one(&s, kind));
    }
    Ok(TargetSequence::new(parts.join(&format!(" {SSEP} "))))
}

fn render_one(s: &QuadSurface, kind: TemplateKind) -> String {
    match kind {
        TemplateKind::Paraphrase => format!(
            "{} is {} because {} is {}",
            s.category, s.sentiment, s.aspect, s.opinion
        ),
        TemplateKind::Gas => format!("({}, {}, {}, {})", s.aspect, s.opinion, s.category, s.sentiment),
        TemplateKind::SpecialSymbols(order) => order
            .iter()
            .map(|slot| {
                let value = match slot {
                    Slot::Aspect => s.aspect.as_str(),
                    Slot::Opinion => s.opinion.as_str(),
                    Slot::Category => s.category.as_str(),
                    Slot::Sentiment => s.sentiment,
                };
                format!("{} {}", slot.marker(), value)
            })
            .collect::<Vec<_>>()
            .join(" "),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParseDiagnostic {
    pub chunk_index: usize,
    pub chunk: String,
    pub reason: String,
}

/// Decodes a (possibly malformed) target sequence. Never fails.
pub fn parse(seq: &str, kind: TemplateKind) -> (Vec<AspectQuad>, Vec<ParseDiagnostic>) {
    let mut quads = Vec::new();
    let mut diagnostics = Vec::new();
    for (chunk_index, raw) in seq.split(SSEP).enumerate() {
        let chunk = normalize_ws(raw);
        let parsed = if chunk.is_empty() {
            Err("empty chunk".to_string())
        } else {
            match kind {
                TemplateKind::Paraphrase => parse_paraphrase(&chunk),
                TemplateKind::SpecialSymbols(order) => parse_special(&chunk, order),
                TemplateKind::Gas => parse_gas(&chunk),
            }
        };
        match parsed {
            Ok(q) => quads.push(q),
            Err(reason) => diagnostics.push(ParseDiagnostic {
                chunk_index,
                chunk,
                reason,
            }),
        }
    }
    (quads, diagnostics)
}

/// Collapses runs of whitespace into single spaces and trims the ends.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Case-insensitive search for `needle` (ASCII) in `hay`; returns byte offsets.
fn find_all_ci(hay: &str, needle: &str) -> Vec<usize> {
    let h = hay.as_bytes();
    let n = needle.as_bytes();
    if n.len() > h.len() {
        return Vec::new();
    }
    (0..=h.len() - n.len())
        .filter(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
        .collect()
}

fn parse_paraphrase(chunk: &str) -> Result<AspectQuad, String> {
    let because = *find_all_ci(chunk, " because ")
        .first()
        .ok_or("missing ' because '")?;
    let head = &chunk[..because];
    let tail = &chunk[because + " because ".len()..];

    let head_is = *find_all_ci(head, " is ").first().ok_or("missing ' is ' in head clause")?;
    let category = &head[..head_is];
    let sentiment = &head[head_is + 4..];

    let tail_is = *find_all_ci(tail, " is ").last().ok_or("missing ' is ' in because-clause")?;
    let aspect = &tail[..tail_is];
    let opinion = &tail[tail_is + 4..];

    build_quad(aspect, opinion, category, sentiment)
}

fn parse_special(chunk: &str, order: [Slot; 4]) -> Result<AspectQuad, String> {
    let mut values: [Option<Vec<&str>>; 4] = Default::default();
    let mut seen = Vec::with_capacity(4);
    let mut current: Option<usize> = None;
    for tok in chunk.split(' ') {
        if let Some(slot) = Slot::from_marker(tok) {
            let idx = order.iter().position(|s| *s == slot).unwrap_or(0);
            if values[idx].is_some() {
                return Err(format!("duplicate marker {tok}"));
            }
            values[idx] = Some(Vec::new());
            seen.push(slot);
            current = Some(idx);
        } else {
            match current {
                Some(i) => values[i].as_mut().unwrap_or_else(|| unreachable!()).push(tok),
                None => return Err("text before the first marker".into()),
            }
        }
    }
    if seen.as_slice() != order.as_slice() {
        return Err("markers missing or out of template order".into());
    }
    let get = |slot: Slot| {
        let idx = order.iter().position(|s| *s == slot).unwrap_or(0);
        values[idx].as_ref().map(|v| v.join(" ")).unwrap_or_default()
    };
    build_quad(
        &get(Slot::Aspect),
        &get(Slot::Opinion),
        &get(Slot::Category),
        &get(Slot::Sentiment),
    )
}

fn parse_gas(chunk: &str) -> Result<AspectQuad, String> {
    let inner = chunk
        .strip_prefix('(')
        .and_then(|c| c.strip_suffix(')'))
        .ok_or("tuple must be wrapped in parentheses")?;
    let fields: Vec<&str> = inner.split(',').map(str::trim).collect();
    let [aspect, opinion, category, sentiment] = fields.as_slice() else {
        return Err(format!("expected 4 tuple fields, found {}", fields.len()));
    };
    build_quad(aspect, opinion, category, sentiment)
}

fn build_quad(aspect: &str, opinion: &str, category: &str, sentiment: &str) -> Result<AspectQuad, String> {
    let aspect = aspect.trim();
    let opinion = opinion.trim();
    let sentiment_word = sentiment.trim();
    if aspect.is_empty() || opinion.is_empty() {
        return Err("empty aspect or opinion".into());
    }
    let sentiment = Sentiment::from_surface(sentiment_word)
        .ok_or_else(|| format!("unknown sentiment word {sentiment_word:?}"))?;
    let words: Vec<&str> = category.split_whitespace().collect();
    let [entity, attribute] = words.as_slice() else {
        return Err(format!("category {category:?} is not two words"));
    };
    let aspect = if aspect.eq_ignore_ascii_case(IMPLICIT_ASPECT_SURFACE) {
        Term::Implicit
    } else {
        Term::explicit(aspect)
    };
    let opinion = if opinion.eq_ignore_ascii_case(IMPLICIT_OPINION_SURFACE) {
        Term::Implicit
    } else {
        Term::explicit(opinion)
    };
    Ok(AspectQuad::new(aspect, opinion, format!("{entity}#{attribute}"), sentiment))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(at: &str, ot: &str, ac: &str, sp: Sentiment) -> AspectQuad {
        let term = |s: &str, imp: bool| if imp { Term::Implicit } else { Term::explicit(s) };
        AspectQuad::new(term(at, at == "NULL"), term(ot, ot == "NULL"), ac, sp)
    }

    #[test]
    fn project_explicit_quad() {
        let s = project(&quad("Service", "good", "service#general", Sentiment::Positive)).unwrap();
        assert_eq!(s.aspect, "Service");
        assert_eq!(s.opinion, "good");
        assert_eq!(s.category, "service general");
        assert_eq!(s.sentiment, "great");
    }

    #[test]
    fn project_implicit_terms() {
        let s = project(&quad("NULL", "NULL", "food#quality", Sentiment::Negative)).unwrap();
        assert_eq!((s.aspect.as_str(), s.opinion.as_str()), ("it", "NULL"));
        assert_eq!(s.category, "food quality");
        assert_eq!(s.sentiment, "bad");

        let s = project(&quad("screen", "NULL", "display#quality", Sentiment::Negative)).unwrap();
        assert_eq!(s.aspect, "screen");
        assert_eq!(s.opinion, "NULL");
        assert_eq!(s.category, "display quality");
    }

    #[test]
    fn project_rejects_malformed_category() {
        let err = project(&quad("food", "ok", "foodquality", Sentiment::Neutral)).unwrap_err();
        assert!(matches!(err, CodecError::InvalidCategory { .. }));
        assert!(project(&quad("food", "ok", "a#b#c", Sentiment::Neutral)).is_err());
        assert!(project(&quad("food", "ok", "#b", Sentiment::Neutral)).is_err());
        let err = render(
            &[
                quad("food", "ok", "food#quality", Sentiment::Neutral),
                quad("food", "ok", "broken", Sentiment::Neutral),
            ],
            TemplateKind::Paraphrase,
        )
        .unwrap_err();
        assert!(matches!(err, CodecError::Quad { index: 1, .. }));
    }

    #[test]
    fn render_paraphrase_and_special() {
        let q = quad("Service", "good", "service#general", Sentiment::Positive);
        let t = render(&[q], TemplateKind::Paraphrase).unwrap();
        assert_eq!(t.text, "service general is great because Service is good");

        let q = quad("food", "wonderful", "food#quality", Sentiment::Positive);
        let t = render(std::slice::from_ref(&q), TemplateKind::special_symbols()).unwrap();
        assert_eq!(t.text, "[AT] food [OT] wonderful [AC] food quality [SP] great");

        let t = render(&[q], TemplateKind::Gas).unwrap();
        assert_eq!(t.text, "(food, wonderful, food quality, great)");
    }

    #[test]
    fn render_joins_with_single_separator() {
        let qs = [
            quad("Service", "good", "service#general", Sentiment::Positive),
            quad("food", "wonderful", "food#quality", Sentiment::Positive),
        ];
        for kind in [TemplateKind::Paraphrase, TemplateKind::special_symbols(), TemplateKind::Gas] {
            let t = render(&qs, kind).unwrap();
            assert_eq!(t.text.matches(" [SSEP] ").count(), 1, "{kind}");
        }
    }

    #[test]
    fn parse_paraphrase_example() {
        let (qs, diags) = parse("food quality is great because food is wonderful", TemplateKind::Paraphrase);
        assert!(diags.is_empty());
        assert_eq!(qs, vec![quad("food", "wonderful", "food#quality", Sentiment::Positive)]);
    }

    #[test]
    fn parse_garbage_gives_one_diagnostic() {
        for kind in [TemplateKind::Paraphrase, TemplateKind::special_symbols(), TemplateKind::Gas] {
            let (qs, diags) = parse("garbage tokens with no template", kind);
            assert!(qs.is_empty());
            assert_eq!(diags.len(), 1);
        }
    }

    #[test]
    fn parse_unknown_sentiment_is_diagnostic() {
        let (qs, diags) = parse("food quality is superb because food is nice", TemplateKind::Paraphrase);
        assert!(qs.is_empty());
        assert!(diags[0].reason.contains("sentiment"));
    }

    #[test]
    fn parse_ambiguous_is_uses_last_in_tail() {
        let (qs, _) = parse(
            "food quality is great because the pasta is what it is good",
            TemplateKind::Paraphrase,
        );
        assert_eq!(qs[0].aspect, Term::explicit("the pasta is what it"));
        assert_eq!(qs[0].opinion, Term::explicit("good"));
    }

    #[test]
    fn parse_is_case_insensitive_but_preserves_text() {
        let (qs, diags) = parse("Food Quality IS Great BECAUSE It IS null", TemplateKind::Paraphrase);
        assert!(diags.is_empty());
        assert_eq!(qs[0].aspect, Term::Implicit);
        assert_eq!(qs[0].opinion, Term::Implicit);
        assert_eq!(qs[0].category, "Food#Quality");
        assert_eq!(qs[0].sentiment, Sentiment::Positive);
    }

    #[test]
    fn parse_empty_chunks_are_diagnostics() {
        let text = "(a, b, food quality, ok) [SSEP] [SSEP] (c, d, food quality, bad) [SSEP]";
        let (qs, diags) = parse(text, TemplateKind::Gas);
        assert_eq!(qs.len(), 2);
        assert_eq!(diags.len(), 2);
        assert!(diags.iter().all(|d| d.reason == "empty chunk"));
    }

    #[test]
    fn parse_gas_tolerates_tokenized_punctuation() {
        let (qs, diags) = parse("( food , NULL , food quality , bad )", TemplateKind::Gas);
        assert!(diags.is_empty());
        assert_eq!(qs[0], quad("food", "NULL", "food#quality", Sentiment::Negative));
    }

    #[test]
    fn special_symbols_respects_custom_order() {
        let kind = TemplateKind::parse_name("special:ac,sp,at,ot").unwrap();
        let q = quad("food", "wonderful", "food#quality", Sentiment::Positive);
        let t = render(std::slice::from_ref(&q), kind).unwrap();
        assert_eq!(t.text, "[AC] food quality [SP] great [AT] food [OT] wonderful");
        assert_eq!(parse(&t.text, kind).0, vec![q.clone()]);
        // wrong order is rejected by the default-order parser
        assert_eq!(parse(&t.text, TemplateKind::special_symbols()).1.len(), 1);
        // marker matching is case-sensitive
        assert_eq!(parse("[at] food [OT] x [AC] a b [SP] ok", TemplateKind::special_symbols()).1.len(), 1);
    }

    #[test]
    fn template_names_round_trip() {
        for name in ["paraphrase", "gas", "special", "special:sp,ac,ot,at"] {
            assert_eq!(TemplateKind::parse_name(name).unwrap().name(), name);
        }
        assert!(TemplateKind::parse_name("special:at,at,ac,sp").is_err());
        assert!(TemplateKind::parse_name("tuple").is_err());
    }

    #[test]
    fn duplicates_survive_round_trip() {
        let q = quad("food", "good", "food#quality", Sentiment::Positive);
        let t = render(&[q.clone(), q.clone()], TemplateKind::Paraphrase).unwrap();
        assert_eq!(parse(&t.text, TemplateKind::Paraphrase).0, vec![q.clone(), q]);
    }
}
