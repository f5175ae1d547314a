use uaul::corpus::synth::{generate, SyntheticSpec};
use uaul::gradcheck::term_grads;
use uaul::objectives::LossTerm;
use uaul::optim::Adam;
use uaul::trainer::{encode_examples, train};
use uaul::{CorpusSplit, Seq2Seq, UaulConfig, Vocabulary};

fn small(lr: f64) -> UaulConfig {
    UaulConfig {
        d_model: 32,
        n_heads: 2,
        n_layers: 1,
        d_ff: 64,
        max_len: 64,
        lr,
        ..UaulConfig::default()
    }
}

#[test]
fn memorizes_four_examples() {
    let full = generate(&SyntheticSpec::new(4, 1, 1, 21)).unwrap();
    let corpus = CorpusSplit {
        train: full.train.clone(),
        dev: full.train.clone(),
        test: full.train,
    };
    let cfg = UaulConfig {
        epochs: 200,
        batch_size: 4,
        ..small(3e-3)
    }
    .baseline();
    let out = train(&cfg, &corpus).unwrap();
    let first_below = out.report.steps.iter().position(|s| s.l_joint < 0.05);
    assert!(first_below.is_some(), "final loss {:?}", out.report.steps.last());
    assert_eq!(out.report.best_dev_f1, 1.0);
}

#[test]
fn entropy_alone_decreases_monotonically() {
    let split = generate(&SyntheticSpec::new(4, 1, 1, 8)).unwrap();
    let vocab = Vocabulary::build(&split.train);
    let cfg = UaulConfig {
        use_mc: false,
        ..small(1e-3)
    };
    let mut model = Seq2Seq::new(cfg.dims(vocab.len()), 2).unwrap();
    let batch = encode_examples(&split.train, &vocab, cfg.template).unwrap();
    let mut adam = Adam::new(model.params(), cfg.lr);
    let mut prev = f64::INFINITY;
    let mut first = None;
    for step in 0..50 {
        let mut total = uaul::tape::Gradients::zeros_like(model.params());
        let mut entropy = 0.0;
        let mut positions = 0;
        for ex in &batch {
            let (value, g) = term_grads(&model, ex, &cfg, LossTerm::Me, 0).unwrap();
            entropy += value;
            positions += ex.gold.len();
            total.add_assign(&g);
        }
        let mean = entropy / positions as f64;
        assert!(mean < prev + 1e-9, "step {step}: {mean} after {prev}");
        prev = mean;
        first.get_or_insert(mean);
        adam.step(model.params_mut(), &total);
    }
    assert!(prev < first.unwrap() - 1e-3);
}
