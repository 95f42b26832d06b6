// Temporary: time one 64px train step at the desk architecture.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vipastain::imgutil::StainDomain;
use vipastain::maskextract::{extraction_channels, Polarity, ThresholdSet};
use vipastain::maskextract::DomainThresholds;
use vipastain::transfer::{TransferConfig, TranslatorBundle};

fn thresholds(domain: StainDomain) -> DomainThresholds {
    let (ca, cb) = extraction_channels(domain);
    let mk = |ch| ThresholdSet::new(domain, ch, vec![40, 80, 120, 160, 190, 205, 230], 5, Polarity::KeepBelow).unwrap();
    DomainThresholds { sets: vec![mk(ca), mk(cb)] }
}

fn main() {
    let cfg = TransferConfig { batch_size: 4, ..TransferConfig::default() };
    let mut bundle = TranslatorBundle::new(cfg, thresholds(StainDomain::He), thresholds(StainDomain::Cd20)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = ArrayD::from_shape_fn(IxDyn(&[4, 3, 64, 64]), |_| rng.gen_range(-0.9..0.9));
    let b = ArrayD::from_shape_fn(IxDyn(&[4, 3, 64, 64]), |_| rng.gen_range(-0.9..0.9));
    // warmup
    bundle.train_step(&a, &b).unwrap();
    let t0 = std::time::Instant::now();
    for _ in 0..5 {
        bundle.train_step(&a, &b).unwrap();
    }
    println!("per step (batch 4, 64px, nf8, 3res): {:?}", t0.elapsed() / 5);
}
