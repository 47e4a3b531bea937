//! Trains the channel-reduced network on the generated shapes corpus.
//!
//! `cargo run --release --example desk_train -- [drop_rate] [epochs] [lr] [decay_factor]`

use std::time::Instant;

use tagkit::archdsl::builtin;
use tagkit::network::{build_from_arch_with, evaluate, train, HeadConfig, TrainConfig, TrainOptions, WeightInit};
use tagkit::synth::ShapesCorpus;
use tagkit::Geometry;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let drop: f64 = args.get(1).map_or(Ok(0.0), |s| s.parse())?;
    let epochs: usize = args.get(2).map_or(Ok(48), |s| s.parse())?;
    let lr: f64 = args.get(3).map_or(Ok(0.0025), |s| s.parse())?;
    let factor: f64 = args.get(4).map_or(Ok(4.0), |s| s.parse())?;
    let started = Instant::now();
    let clean = ShapesCorpus::generate(5000, 74, 1);
    let test = ShapesCorpus::generate(1000, 74, 2);
    let train_set = if drop > 0.0 { clean.with_missing_labels(drop, 3) } else { clean };
    let head = HeadConfig { spp_levels: vec![6, 3, 2, 1], hidden_fc_widths: vec![512, 512], dropout_rate: 0.2, num_classes: 8 };
    let arch = builtin("yfnet_d_desk").expect("shipped");
    let mut net = build_from_arch_with(&arch, Geometry::new(64, 64, 3), &head, 7, WeightInit::Uniform)?;
    let config = TrainConfig {
        batch_size: 32,
        base_lr: lr,
        lr_decay_factor: factor,
        lr_decay_every: epochs / 3,
        total_epochs: epochs,
        momentum: 0.9,
        weight_decay: 0.0005,
        seed: 11,
    };
    let opts = TrainOptions { crop: 64, validation: Some(&test), ..Default::default() };
    let metrics = train(&mut net, &train_set, &config, &opts)?;
    for m in &metrics {
        println!("{} {:.4} {:?}", m.epoch, m.mean_loss, m.validation_map);
    }
    println!("test mAP {:.4} in {:.0}s", evaluate(&net, &test, 64, 64)?, started.elapsed().as_secs_f64());
    Ok(())
}
