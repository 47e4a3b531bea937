use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tagkit::archdsl::{expand_layers, parse_arch, Geometry};
use tagkit::complexity::count_complexity;
use tagkit::network::*;
use tagkit::synth::ShapesCorpus;
use tagkit::tensor::{Parameter, Tensor};

fn small_head(classes: usize) -> HeadConfig {
    HeadConfig { spp_levels: vec![2, 1], hidden_fc_widths: vec![16], dropout_rate: 0.2, num_classes: classes }
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        base_lr: 0.01,
        lr_decay_factor: 10.0,
        lr_decay_every: 2,
        total_epochs: epochs,
        momentum: 0.9,
        weight_decay: 0.0005,
        seed: 3,
    }
}

fn shapes_net() -> Network {
    build_from_arch(&parse_arch("s", "(3,4)+2/2; (1x3+3x1,8)").unwrap(), Geometry::new(16, 16, 3), &small_head(8), 5).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = ShapesCorpus::generate(24, 20, 9);
    let mut net = shapes_net();
    train(&mut net, &data, &config(1), &TrainOptions { crop: 16, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.ckpt");
    save_checkpoint(&net, &config(1), &path).unwrap();
    let (back, cfg) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg, config(1));
    assert_eq!(back.epoch, net.epoch);
    assert_eq!((&back.arch, back.input, &back.head), (&net.arch, net.input, &net.head));
    assert_eq!(back.param_names(), net.param_names());
    for (a, b) in back.params().iter().zip(net.params()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
        assert_eq!(bits(&a.momentum), bits(&b.momentum));
    }
    assert_eq!(back.running_stats(), net.running_stats());
    let view = crop_view(&Dataset::image(&data, 0).unwrap(), 16, 4).unwrap();
    let x = Tensor::stack(&[view]).unwrap();
    assert_eq!(back.predict(x.clone()).unwrap(), net.predict(x).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.ckpt");
    save_checkpoint(&shapes_net(), &config(1), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(NetworkError::Checkpoint(_))));
}

#[test]
fn exploding_loss_aborts_with_a_diagnostic() {
    let data = ShapesCorpus::generate(16, 20, 9);
    let mut net = shapes_net();
    let cfg = TrainConfig { base_lr: 1e30, ..config(3) };
    let err = train(&mut net, &data, &cfg, &TrainOptions { crop: 16, ..Default::default() }).unwrap_err();
    assert!(matches!(err, NetworkError::NonFinite { .. } | NetworkError::Tensor(_)), "{err}");
}

#[test]
fn he_and_uniform_inits_differ_in_spread() {
    let arch = parse_arch("s", "(3,64)").unwrap();
    let head = small_head(4);
    let he = build_from_arch_with(&arch, Geometry::new(8, 8, 3), &head, 1, WeightInit::He).unwrap();
    let un = build_from_arch_with(&arch, Geometry::new(8, 8, 3), &head, 1, WeightInit::Uniform).unwrap();
    let var = |n: &Network| {
        let k = &n.params()[0].value;
        k.norm_sq() as f64 / k.len() as f64
    };
    // fan_in 27: He variance 2/27, uniform variance 1/81
    assert!((var(&he) - 2.0 / 27.0).abs() < 0.01, "{}", var(&he));
    assert!((var(&un) - 1.0 / 81.0).abs() < 0.003, "{}", var(&un));
}

fn spec_text() -> impl Strategy<Value = String> {
    let conv = prop_oneof![
        (1usize..5, 1usize..12).prop_map(|(k, c)| format!("({k},{c})")),
        (1usize..12).prop_map(|c| format!("(1x3+3x1,{c})")),
    ];
    (1usize..12, prop::collection::vec(conv, 0..3), prop::option::of(2usize..3))
        .prop_map(|(c0, rest, pool)| {
            let mut s = format!("(3,{c0})");
            for r in rest {
                s.push('+');
                s.push_str(&r);
            }
            if let Some(p) = pool {
                s.push_str(&format!("+{p}/{p}"));
            }
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn built_parameters_match_counted(text in spec_text(), side in 8usize..24, classes in 2usize..20) {
        let arch = parse_arch("p", &text).unwrap();
        let input = Geometry::new(side, side, 3);
        let head = small_head(classes);
        let plan = expand_layers(&arch, input, &head).unwrap();
        let net = build_from_arch(&arch, input, &head, 0).unwrap();
        prop_assert_eq!(net.param_count(), count_complexity(&plan).total_params);
    }

    #[test]
    fn lr_schedule_is_stepwise_non_increasing(base in 1e-4f64..1.0, factor in 1.0f64..20.0, every in 1usize..30) {
        let cfg = TrainConfig { base_lr: base, lr_decay_factor: factor, lr_decay_every: every, ..config(100) };
        for e in 1..100 {
            let (prev, cur) = (lr_at(&cfg, e - 1), lr_at(&cfg, e));
            prop_assert!(cur <= prev);
            if e % every != 0 {
                prop_assert_eq!(cur, prev);
            }
        }
    }

    #[test]
    fn decay_alone_shrinks_norms(seed in any::<u64>(), wd in 1e-4f64..1e-2, lr in 1e-3f64..0.1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Parameter::new(Tensor::<f32>::randn(&[32], 1.0, &mut rng), true);
        let zero = Tensor::zeros(&[32]);
        let mut norm = p.value.norm_sq();
        for _ in 0..20 {
            sgd_update(&mut p, Some(&zero), lr, 0.9, wd);
            let next = p.value.norm_sq();
            prop_assert!(next < norm, "{} !< {}", next, norm);
            norm = next;
        }
    }
}
