//! Slower end-to-end training properties on the 32-example overfit split.

use icaf::config::RunConfig;
use icaf::data::{encode_split, generate_synthetic, EncodedExample};
use icaf::model::Icaf;
use icaf::training::{mean_token_nll, Trainer};

fn overfit_setup(extra: &[&str]) -> (Trainer, Vec<EncodedExample>) {
    let mut cfg = RunConfig::default();
    cfg.apply(&[
        "data.train=32",
        "data.dev=0",
        "data.test=0",
        "train.epochs=300",
    ])
    .unwrap();
    cfg.apply(extra).unwrap();
    let d = generate_synthetic(cfg.seed, &cfg.synthetic()).unwrap();
    let m = &cfg.model;
    let train = encode_split(
        &d.train,
        &d.vocab,
        m.patch_size,
        m.max_text_len,
        m.max_summary_len,
    )
    .unwrap();
    let model = Icaf::new(cfg.model.clone(), cfg.seed).unwrap();
    (
        Trainer::new(model, cfg.train.clone(), d.vocab).unwrap(),
        train,
    )
}

fn exact_matches(t: &Trainer, examples: &[EncodedExample]) -> usize {
    examples
        .iter()
        .filter(|ex| t.model.summarize(&ex.text, &ex.patches).unwrap().ids == ex.summary.unpadded())
        .count()
}

#[test]
fn reconstruction_curve_settles_once_halving_is_active() {
    // The training split doubles as the dev split so that halving can fire.
    let (mut t, train) = overfit_setup(&["train.dev_every=10"]);
    t.fit(&train, Some(&train)).unwrap();
    assert!(t.dev_history.iter().any(|r| r.halved));
    let lrs: Vec<f64> = t.history.iter().map(|r| r.lr).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0] && w[1] > 0.0));

    let windows: Vec<f64> = t
        .history
        .chunks_exact(50)
        .map(|w| w.iter().map(|r| r.gene).sum::<f64>() / 50.0)
        .collect();
    let tail = &windows[windows.len() / 2..];
    assert!(tail.len() >= 3);
    assert!(
        tail.windows(2).all(|w| w[1] <= w[0]),
        "50-step reconstruction means {windows:?}"
    );
    assert!(mean_token_nll(&t.model, &train).unwrap() < 0.05);
}

#[test]
fn pure_seq2seq_still_overfits() {
    let (mut t, train) = overfit_setup(&["losses.disable_t2i=true", "losses.disable_i2t=true"]);
    let mut reached = false;
    while t.epoch < 300 && !reached {
        t.run_epoch(&train, None).unwrap();
        if t.epoch % 10 == 0 {
            reached =
                mean_token_nll(&t.model, &train).unwrap() < 0.05 && exact_matches(&t, &train) >= 30;
        }
    }
    assert!(reached, "no convergence in 300 epochs");
    assert!(t
        .history
        .iter()
        .all(|r| r.t2i == 0.0 && r.i2t == 0.0 && r.beta1 == 0.0 && r.beta2 == 0.0));
}
