//! Seeded synthetic review corpus.
//!
//! Sentences are built from clauses such as `the food was excellent`,
//! `it was overpriced` (implicit aspect) or `i recommend the wine`
//! (implicit opinion), joined with `and`/`but`. Gold quads are derived from
//! the same choices that produced the surface text, so they always agree.
//! The inventories contain near-synonym opinions (`excellent`/`great`) and
//! singular/plural aspect pairs (`food`/`foods`).

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CorpusError, CorpusSplit, Example};
use crate::codec::{AspectQuad, Sentiment, Term};

#[derive(Debug, Clone, PartialEq)]
pub struct AspectEntry {
    pub text: &'static str,
    pub category: &'static str,
    pub plural: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpinionEntry {
    pub text: &'static str,
    pub sentiment: Sentiment,
    /// Restricts the opinion to aspects of this entity; `None` fits any.
    pub entity: Option<&'static str>,
}

/// Opinion phrase that names its category without an explicit aspect.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitAspectEntry {
    pub opinion: &'static str,
    pub category: &'static str,
    pub sentiment: Sentiment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inventory {
    pub aspects: Vec<AspectEntry>,
    pub opinions: Vec<OpinionEntry>,
    pub implicit_aspect: Vec<ImplicitAspectEntry>,
}

const fn a(text: &'static str, category: &'static str, plural: bool) -> AspectEntry {
    AspectEntry { text, category, plural }
}

const fn o(text: &'static str, sentiment: Sentiment, entity: Option<&'static str>) -> OpinionEntry {
    OpinionEntry { text, sentiment, entity }
}

const fn ia(opinion: &'static str, category: &'static str, sentiment: Sentiment) -> ImplicitAspectEntry {
    ImplicitAspectEntry {
        opinion,
        category,
        sentiment,
    }
}

impl Default for Inventory {
    fn default() -> Self {
        use Sentiment::*;
        let food = Some("food");
        let service = Some("service");
        let drinks = Some("drinks");
        let ambience = Some("ambience");
        let prices = Some("restaurant");
        Inventory {
            aspects: vec![
                a("food", "food#quality", false),
                a("foods", "food#quality", true),
                a("pizza", "food#quality", false),
                a("pizzas", "food#quality", true),
                a("sushi", "food#quality", false),
                a("pasta", "food#quality", false),
                a("dessert", "food#quality", false),
                a("desserts", "food#quality", true),
                a("fish tacos", "food#quality", true),
                a("steak", "food#quality", false),
                a("portions", "food#style_options", true),
                a("menu", "food#style_options", false),
                a("service", "service#general", false),
                a("staff", "service#general", false),
                a("waiter", "service#general", false),
                a("waiters", "service#general", true),
                a("waitress", "service#general", false),
                a("owner", "service#general", false),
                a("prices", "restaurant#prices", true),
                a("price", "restaurant#prices", false),
                a("place", "restaurant#general", false),
                a("restaurant", "restaurant#general", false),
                a("ambience", "ambience#general", false),
                a("decor", "ambience#general", false),
                a("atmosphere", "ambience#general", false),
                a("music", "ambience#general", false),
                a("drinks", "drinks#quality", true),
                a("wine", "drinks#quality", false),
                a("coffee", "drinks#quality", false),
                a("cocktails", "drinks#quality", true),
                a("wine list", "drinks#style_options", false),
                a("location", "location#general", false),
                a("view", "location#general", false),
                a("burger", "food#quality", false),
                a("burgers", "food#quality", true),
                a("salad", "food#quality", false),
                a("salads", "food#quality", true),
                a("soup", "food#quality", false),
                a("noodles", "food#quality", true),
                a("ramen", "food#quality", false),
                a("bread", "food#quality", false),
                a("fries", "food#quality", true),
                a("chicken", "food#quality", false),
                a("lamb", "food#quality", false),
                a("curry", "food#quality", false),
                a("dumplings", "food#quality", true),
                a("seafood", "food#quality", false),
                a("appetizers", "food#quality", true),
                a("tacos", "food#quality", true),
                a("sandwiches", "food#quality", true),
                a("cheesecake", "food#quality", false),
                a("selection", "food#style_options", false),
                a("specials", "food#style_options", true),
                a("bartender", "service#general", false),
                a("hostess", "service#general", false),
                a("manager", "service#general", false),
                a("server", "service#general", false),
                a("servers", "service#general", true),
                a("spot", "restaurant#general", false),
                a("bistro", "restaurant#general", false),
                a("diner", "restaurant#general", false),
                a("cafe", "restaurant#general", false),
                a("bill", "restaurant#prices", false),
                a("interior", "ambience#general", false),
                a("lighting", "ambience#general", false),
                a("patio", "ambience#general", false),
                a("seating", "ambience#general", false),
                a("vibe", "ambience#general", false),
                a("beer", "drinks#quality", false),
                a("beers", "drinks#quality", true),
                a("tea", "drinks#quality", false),
                a("margaritas", "drinks#quality", true),
                a("sake", "drinks#quality", false),
                a("juice", "drinks#quality", false),
                a("beer selection", "drinks#style_options", false),
                a("drink menu", "drinks#style_options", false),
                a("neighborhood", "location#general", false),
                a("parking", "location#general", false),
            ],
            opinions: vec![
                o("excellent", Positive, None),
                o("great", Positive, None),
                o("good", Positive, None),
                o("wonderful", Positive, None),
                o("amazing", Positive, None),
                o("fantastic", Positive, None),
                o("nice", Positive, None),
                o("decent", Neutral, None),
                o("okay", Neutral, None),
                o("average", Neutral, None),
                o("mediocre", Negative, None),
                o("terrible", Negative, None),
                o("bad", Negative, None),
                o("awful", Negative, None),
                o("horrible", Negative, None),
                o("poor", Negative, None),
                o("delicious", Positive, food),
                o("tasty", Positive, food),
                o("fresh", Positive, food),
                o("bland", Negative, food),
                o("stale", Negative, food),
                o("overcooked", Negative, food),
                o("friendly", Positive, service),
                o("attentive", Positive, service),
                o("rude", Negative, service),
                o("slow", Negative, service),
                o("refreshing", Positive, drinks),
                o("watery", Negative, drinks),
                o("cozy", Positive, ambience),
                o("romantic", Positive, ambience),
                o("loud", Negative, ambience),
                o("noisy", Negative, ambience),
                o("reasonable", Positive, prices),
                o("cheap", Positive, prices),
                o("expensive", Negative, prices),
                o("fair", Neutral, prices),
                o("superb", Positive, None),
                o("outstanding", Positive, None),
                o("solid", Positive, None),
                o("lovely", Positive, None),
                o("perfect", Positive, None),
                o("pleasant", Positive, None),
                o("impressive", Positive, None),
                o("exceptional", Positive, None),
                o("fine", Neutral, None),
                o("passable", Neutral, None),
                o("ordinary", Neutral, None),
                o("unremarkable", Neutral, None),
                o("disappointing", Negative, None),
                o("dreadful", Negative, None),
                o("lousy", Negative, None),
                o("subpar", Negative, None),
                o("flavorful", Positive, food),
                o("crispy", Positive, food),
                o("juicy", Positive, food),
                o("authentic", Positive, food),
                o("greasy", Negative, food),
                o("salty", Negative, food),
                o("soggy", Negative, food),
                o("undercooked", Negative, food),
                o("cold", Negative, food),
                o("spicy", Neutral, food),
                o("helpful", Positive, service),
                o("courteous", Positive, service),
                o("prompt", Positive, service),
                o("efficient", Positive, service),
                o("welcoming", Positive, service),
                o("inattentive", Negative, service),
                o("careless", Negative, service),
                o("smooth", Positive, drinks),
                o("strong", Positive, drinks),
                o("weak", Negative, drinks),
                o("lively", Positive, ambience),
                o("elegant", Positive, ambience),
                o("charming", Positive, ambience),
                o("quiet", Neutral, ambience),
                o("dark", Negative, ambience),
                o("cramped", Negative, ambience),
                o("unbeatable", Positive, prices),
                o("steep", Negative, prices),
                o("inflated", Negative, prices),
            ],
            implicit_aspect: vec![
                ia("overpriced", "restaurant#prices", Negative),
                ia("affordable", "restaurant#prices", Positive),
                ia("yummy", "food#quality", Positive),
                ia("too loud", "ambience#general", Negative),
                ia("so crowded", "restaurant#general", Negative),
                ia("pricey", "restaurant#prices", Negative),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
    /// Upper bound on clauses per sentence (at least 1).
    pub max_clauses: usize,
    pub inventory: Inventory,
}

impl SyntheticSpec {
    pub fn new(train: usize, dev: usize, test: usize, seed: u64) -> Self {
        SyntheticSpec {
            train,
            dev,
            test,
            seed,
            max_clauses: 3,
            inventory: Inventory::default(),
        }
    }
}

struct Clause {
    text: String,
    quad: AspectQuad,
    aspect_key: Option<&'static str>,
}

fn entity(category: &str) -> &str {
    category.split('#').next().unwrap_or(category)
}

fn explicit_clause(inv: &Inventory, rng: &mut ChaCha8Rng) -> Option<Clause> {
    let aspect = inv.aspects.choose(rng)?;
    let fitting: Vec<&OpinionEntry> = inv
        .opinions
        .iter()
        .filter(|op| op.entity.is_none_or(|e| e == entity(aspect.category)))
        .collect();
    let opinion = fitting.choose(rng)?;
    let verb = if aspect.plural { "were" } else { "was" };
    let article = if rng.random_bool(0.5) { "the " } else { "" };
    Some(Clause {
        text: format!("{article}{} {verb} {}", aspect.text, opinion.text),
        quad: AspectQuad::new(
            Term::explicit(aspect.text),
            Term::explicit(opinion.text),
            aspect.category,
            opinion.sentiment,
        ),
        aspect_key: Some(aspect.text),
    })
}

fn implicit_aspect_clause(inv: &Inventory, rng: &mut ChaCha8Rng) -> Option<Clause> {
    let e = inv.implicit_aspect.choose(rng)?;
    Some(Clause {
        text: format!("it was {}", e.opinion),
        quad: AspectQuad::new(Term::Implicit, Term::explicit(e.opinion), e.category, e.sentiment),
        aspect_key: None,
    })
}

fn implicit_opinion_clause(inv: &Inventory, rng: &mut ChaCha8Rng) -> Option<Clause> {
    let aspect = inv.aspects.choose(rng)?;
    let (lead, sentiment) = if rng.random_bool(0.5) {
        ("i recommend the", Sentiment::Positive)
    } else {
        ("i would avoid the", Sentiment::Negative)
    };
    Some(Clause {
        text: format!("{lead} {}", aspect.text),
        quad: AspectQuad::new(Term::explicit(aspect.text), Term::Implicit, aspect.category, sentiment),
        aspect_key: Some(aspect.text),
    })
}

fn clause(inv: &Inventory, rng: &mut ChaCha8Rng) -> Option<Clause> {
    let r: f64 = rng.random();
    if r < 0.8 {
        explicit_clause(inv, rng)
    } else if r < 0.9 {
        implicit_aspect_clause(inv, rng).or_else(|| explicit_clause(inv, rng))
    } else {
        implicit_opinion_clause(inv, rng)
    }
}

fn sentence(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Option<Example> {
    let max = spec.max_clauses.max(1);
    let n = 1 + (0..max - 1).take_while(|_| rng.random_bool(0.45)).count();
    let mut clauses: Vec<Clause> = Vec::with_capacity(n);
    for _ in 0..n {
        let c = clause(&spec.inventory, rng)?;
        let repeated = clauses.iter().any(|p| {
            (c.aspect_key.is_some() && p.aspect_key == c.aspect_key) || p.quad == c.quad
        });
        if !repeated {
            clauses.push(c);
        }
    }
    let mut text = String::new();
    for (i, c) in clauses.iter().enumerate() {
        if i > 0 {
            text.push_str(if rng.random_bool(0.7) { " and " } else { " but " });
        }
        text.push_str(&c.text);
    }
    Some(Example::new(text, clauses.into_iter().map(|c| c.quad).collect()))
}

/// Generates a split with distinct sentences; identical specs yield
/// identical corpora.
pub fn generate(spec: &SyntheticSpec) -> Result<CorpusSplit, CorpusError> {
    let requested = spec.train + spec.dev + spec.test;
    if spec.train == 0 || spec.dev == 0 || spec.test == 0 {
        return Err(CorpusError::InvalidSpec("split sizes must be positive".into()));
    }
    if spec.inventory.aspects.is_empty() || spec.inventory.opinions.is_empty() {
        return Err(CorpusError::InvalidSpec("empty aspect or opinion inventory".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(requested);
    let max_attempts = 50 * requested + 1000;
    for _ in 0..max_attempts {
        if examples.len() == requested {
            break;
        }
        let Some(ex) = sentence(spec, &mut rng) else {
            break;
        };
        if seen.insert(ex.sentence.clone()) {
            examples.push(ex);
        }
    }
    if examples.len() < requested {
        return Err(CorpusError::GrammarExhausted {
            produced: examples.len(),
            requested,
        });
    }
    let test = examples.split_off(spec.train + spec.dev);
    let dev = examples.split_off(spec.train);
    Ok(CorpusSplit {
        train: examples,
        dev,
        test,
    })
}
