use uaul::corpus::synth::{generate, SyntheticSpec};
use uaul::gradcheck::check_term;
use uaul::objectives::LossTerm;
use uaul::trainer::encode_examples;
use uaul::{Seq2Seq, UaulConfig, Vocabulary};

fn setup() -> (Seq2Seq, uaul::trainer::Encoded, UaulConfig) {
    let split = generate(&SyntheticSpec::new(6, 1, 1, 5)).unwrap();
    let vocab = Vocabulary::build(&split.train);
    let cfg = UaulConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 24,
        max_len: 48,
        use_ul: true,
        ..UaulConfig::default()
    };
    let model = Seq2Seq::new(cfg.dims(vocab.len()), 3).unwrap();
    let ex = encode_examples(&split.train[..1], &vocab, cfg.template).unwrap().remove(0);
    (model, ex, cfg)
}

#[test]
fn every_term_matches_finite_differences() {
    let (model, ex, cfg) = setup();
    for term in LossTerm::ALL {
        let probes = check_term(&model, &ex, &cfg, term, 10, 1e-4, 17).unwrap();
        assert_eq!(probes.len(), 10);
        for p in &probes {
            assert!(p.rel_err < 1e-4, "{term:?} {p:?}");
        }
        assert!(probes.iter().any(|p| p.analytic.abs() > 1e-8), "{term:?}: all probes hit zero gradients");
    }
}

#[test]
fn mul_has_active_pairs_at_init() {
    let (model, ex, cfg) = setup();
    let (value, _) = uaul::gradcheck::term_grads(&model, &ex, &cfg, LossTerm::Mul, 1).unwrap();
    assert!(value > 0.0);
}
