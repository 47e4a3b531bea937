use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tagkit::tensor::{Mode, Tape, Tensor};

fn ce(logits: &[f64], target: usize) -> f64 {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![1, logits.len()], logits.to_vec()).unwrap());
    let l = tape.softmax_cross_entropy(x, &[target]).unwrap();
    tape.value(l).item()
}

#[test]
fn symmetric_logits_cost_ln2() {
    assert!((ce(&[0.0, 0.0], 0) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn target_out_of_range_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(tape.softmax_cross_entropy(x, &[3]).is_err());
}

proptest! {
    #[test]
    fn spp_width_is_channels_times_bins(
        n in 1usize..3, c in 1usize..5, h in 1usize..20, w in 1usize..20,
        levels in prop::collection::vec(1usize..7, 1..5),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64((h * 31 + w) as u64);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::randn(&[n, c, h, w], 1.0, &mut rng));
        let y = tape.spp(x, &levels).unwrap();
        let bins: usize = levels.iter().map(|l| l * l).sum();
        prop_assert_eq!(tape.value(y).shape(), &[n, c * bins][..]);
    }

    #[test]
    fn cross_entropy_ignores_shifts(
        logits in prop::collection::vec(-20.0f64..20.0, 2..12),
        shift in -500.0f64..500.0,
        pick in any::<prop::sample::Index>(),
    ) {
        let t = pick.index(logits.len());
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let (a, b) = (ce(&logits, t), ce(&shifted, t));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn seeded_dropout_forward_is_deterministic(seed in any::<u64>(), rate in 0.0f64..0.9) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::from_fn(&[4, 16], |i| i as f32 * 0.1 - 3.0));
            let y = tape.dropout(x, rate, Mode::Train, &mut rng).unwrap();
            let z = tape.relu(y).unwrap();
            tape.value(z).data().to_vec()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn inference_dropout_is_identity(rate in 0.0f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let data = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let x = tape.constant(data.clone());
        let y = tape.dropout(x, rate, Mode::Infer, &mut rng).unwrap();
        prop_assert_eq!(tape.value(y), &data);
    }
}
