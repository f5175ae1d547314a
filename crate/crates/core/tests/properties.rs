use proptest::prelude::*;
use uaul::codec::{parse, render, Slot};
use uaul::sampler::acquire_samples;
use uaul::{score, AspectQuad, Sentiment, TemplateKind, Term};

const RESERVED: [&str; 4] = ["it", "null", "is", "because"];

fn word() -> impl Strategy<Value = String> {
    "[a-zA-Z]{1,7}".prop_filter("template keyword", |w| !RESERVED.iter().any(|r| w.eq_ignore_ascii_case(r)))
}

fn term() -> impl Strategy<Value = Term> {
    prop_oneof![
        1 => Just(Term::Implicit),
        4 => prop::collection::vec(word(), 1..4).prop_map(|w| Term::explicit(w.join(" "))),
    ]
}

fn quad() -> impl Strategy<Value = AspectQuad> {
    (term(), term(), word(), "[a-z_]{1,8}", prop::sample::select(Sentiment::ALL.to_vec()))
        .prop_filter("template keyword", |(_, _, _, attr, _)| !RESERVED.contains(&attr.as_str()))
        .prop_map(|(at, ot, entity, attr, sp)| AspectQuad::new(at, ot, format!("{}#{attr}", entity.to_uppercase()), sp))
}

fn quads() -> impl Strategy<Value = Vec<AspectQuad>> {
    prop::collection::vec(quad(), 1..5)
}

fn kinds() -> Vec<TemplateKind> {
    vec![
        TemplateKind::Paraphrase,
        TemplateKind::Gas,
        TemplateKind::special_symbols(),
        TemplateKind::SpecialSymbols([Slot::Category, Slot::Sentiment, Slot::Aspect, Slot::Opinion]),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn codec_round_trip(q in quads()) {
        for kind in kinds() {
            let seq = render(&q, kind).unwrap();
            let (back, diags) = parse(&seq.text, kind);
            prop_assert!(diags.is_empty(), "{:?}: {:?}", kind, diags);
            prop_assert_eq!(&back, &q);
        }
    }

    #[test]
    fn acquire_matches_brute_force(
        k in 1usize..=8,
        v in 2usize..=50,
        raw in prop::collection::vec(0u8..6, 8 * 50),
        gold_pick in any::<prop::sample::Index>(),
    ) {
        // few distinct values so ties are common
        let dists: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let w: Vec<f64> = raw[i * 50..i * 50 + v].iter().map(|&x| x as f64 + 1.0).collect();
                let z: f64 = w.iter().sum();
                w.iter().map(|x| x / z).collect()
            })
            .collect();
        let gold = gold_pick.index(v) as u32;
        let got = acquire_samples(&dists, gold);

        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, d) in dists.iter().enumerate() {
            let mut best = 0;
            for j in 1..d.len() {
                if d[j] > d[best] {
                    best = j;
                }
            }
            pos.push((i, d[gold as usize]));
            if best as u32 != gold {
                neg.push((i, best as u32, d[best]));
            }
        }
        let got_pos: Vec<_> = got.positives.iter().map(|p| (p.sample, p.prob)).collect();
        let got_neg: Vec<_> = got.negatives.iter().map(|n| (n.sample, n.token, n.prob)).collect();
        prop_assert_eq!(got_pos, pos);
        prop_assert_eq!(got_neg, neg);
    }
}

proptest! {
    #[test]
    fn score_is_symmetric_and_monotone(gold in prop::collection::vec(quads(), 1..4), extra in quad()) {
        let r = score(&gold, &gold).unwrap();
        prop_assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        let mut partial = gold.clone();
        let dropped = partial[0].pop();
        let before = score(&partial, &gold).unwrap();
        if let Some(q) = dropped {
            partial[0].push(q);
            let after = score(&partial, &gold).unwrap();
            prop_assert!(after.recall >= before.recall);
        }

        let mut noisy = gold.clone();
        let p0 = score(&noisy, &gold).unwrap().precision;
        if !gold[0].contains(&extra) {
            noisy[0].push(extra);
            prop_assert!(score(&noisy, &gold).unwrap().precision <= p0);
        }
        prop_assert!(r.matched <= r.gold.min(r.predicted));
    }
}
