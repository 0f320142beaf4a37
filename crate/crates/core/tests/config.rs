use std::fs;

use adsrnet_core::config::KEYS;
use adsrnet_core::metrics::Channel;
use adsrnet_core::{Error, Fusion, RunConfig, Variant};
use proptest::prelude::*;

#[test]
fn defaults_and_echo() {
    let c = RunConfig::default();
    let text = c.to_text();
    assert_eq!(text.lines().count(), KEYS.len());
    assert!(text.contains("model.variant=full\n"));
    assert!(text.contains("eval.border=scale\n"));
    assert!(text.contains("data.root=\n"));
    assert_eq!(RunConfig::parse(&text).unwrap(), c);
    let mut sorted = KEYS.to_vec();
    sorted.sort();
    assert_eq!(sorted, KEYS);
}

#[test]
fn later_assignments_win() {
    let mut c = RunConfig::parse("model.scale=3\nmodel.scale = 4\n").unwrap();
    assert_eq!(c.model.scale, 4);
    c.set("model.scale", "2").unwrap();
    assert_eq!(c.model.scale, 2);
    c.apply_text("seed=5\neval.channel=rgb\neval.border=0\nmodel.fusion=concat\nmodel.variant=hb_no_dynamic")
        .unwrap();
    assert_eq!((c.seed, c.train.seed), (5, 5));
    assert_eq!(c.eval.channel, Channel::Rgb);
    assert_eq!(c.eval.border, Some(0));
    assert_eq!(c.model.fusion, Fusion::Concat);
    assert_eq!(c.model.variant, Variant::HbNoDynamic);
    c.set("eval.border", "scale").unwrap();
    assert_eq!(c.eval.border, None);
}

#[test]
fn typos_and_bad_values_are_rejected() {
    let err = RunConfig::parse("model.scale=2\ntrain.lr=1e-3\n").unwrap_err();
    assert!(matches!(&err, Error::Config(m) if m.contains("line 2") && m.contains("train.lr")), "{err}");
    assert!(RunConfig::parse("model.scale=two").is_err());
    assert!(RunConfig::parse("just words").is_err());
    assert!(RunConfig::parse("model.variant=huge").is_err());
    let mut c = RunConfig::default();
    c.set("model.scale", "5").unwrap();
    assert!(c.validate().is_err());
    c.set("model.scale", "3").unwrap();
    c.set("eval.peak", "0").unwrap();
    assert!(c.validate().is_err());
}

#[test]
fn file_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.cfg");
    assert!(RunConfig::from_file(&missing).unwrap_err().to_string().contains("absent.cfg"));
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "# header\nmodel.k=4\nbogus=1\n").unwrap();
    let msg = RunConfig::from_file(&bad).unwrap_err().to_string();
    assert!(msg.contains("bad.cfg") && msg.contains("line 3"), "{msg}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn text_round_trips(
        scale in 2usize..=4,
        variant in 0usize..9,
        k in 1usize..8,
        batch in 1usize..128,
        lr in 1e-6f64..1e-2,
        steps in 1u64..1_000_000,
        seed in any::<u64>(),
        border in proptest::option::of(0usize..8),
        hflip in any::<bool>(),
    ) {
        let mut c = RunConfig::default();
        c.model.scale = scale;
        c.model.variant = Variant::ALL[variant];
        c.model.kernels = k;
        c.train.batch_size = batch;
        c.train.lr_initial = lr;
        c.train.total_steps = steps;
        c.train.hflip = hflip;
        c.seed = seed;
        c.train.seed = seed;
        c.eval.border = border;
        prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
