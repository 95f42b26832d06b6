// Temporary op-level profile.
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vipastain::nn::Tape;

fn t(name: &str, mut f: impl FnMut()) {
    let t0 = std::time::Instant::now();
    for _ in 0..20 { f(); }
    println!("{name}: {:?}", t0.elapsed() / 20);
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = ArrayD::from_shape_fn(IxDyn(&[4, 8, 64, 64]), |_| rng.gen_range(-1.0..1.0f64));
    let w = ArrayD::from_shape_fn(IxDyn(&[8, 8, 3, 3]), |_| rng.gen_range(-1.0..1.0f64));
    let b = ArrayD::zeros(IxDyn(&[8]));
    let w7 = ArrayD::from_shape_fn(IxDyn(&[8, 8, 7, 7]), |_| rng.gen_range(-1.0..1.0f64));
    let gamma = ArrayD::ones(IxDyn(&[8]));
    let beta = ArrayD::zeros(IxDyn(&[8]));
    let x16 = ArrayD::from_shape_fn(IxDyn(&[4, 32, 16, 16]), |_| rng.gen_range(-1.0..1.0f64));
    let w16 = ArrayD::from_shape_fn(IxDyn(&[32, 32, 3, 3]), |_| rng.gen_range(-1.0..1.0f64));
    let b16 = ArrayD::zeros(IxDyn(&[32]));

    t("conv3x3 8ch@64 fwd+bwd", || {
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone(), true);
        let wi = tape.leaf(w.clone(), true);
        let bi = tape.leaf(b.clone(), true);
        let y = tape.conv2d(xi, wi, bi, 1, 1);
        let l = tape.mean_all(y);
        let _ = tape.backward(l);
    });
    t("conv7x7 8ch@64 fwd+bwd", || {
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone(), true);
        let wi = tape.leaf(w7.clone(), true);
        let bi = tape.leaf(b.clone(), true);
        let y = tape.conv2d(xi, wi, bi, 1, 3);
        let l = tape.mean_all(y);
        let _ = tape.backward(l);
    });
    t("conv3x3 32ch@16 fwd+bwd", || {
        let mut tape = Tape::new();
        let xi = tape.leaf(x16.clone(), true);
        let wi = tape.leaf(w16.clone(), true);
        let bi = tape.leaf(b16.clone(), true);
        let y = tape.conv2d(xi, wi, bi, 1, 1);
        let l = tape.mean_all(y);
        let _ = tape.backward(l);
    });
    t("instance_norm 8ch@64 fwd+bwd", || {
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone(), true);
        let gi = tape.leaf(gamma.clone(), true);
        let bi = tape.leaf(beta.clone(), true);
        let y = tape.instance_norm(xi, gi, bi, 1e-5);
        let l = tape.mean_all(y);
        let _ = tape.backward(l);
    });
    t("upsample 32ch@16 fwd+bwd", || {
        let mut tape = Tape::new();
        let xi = tape.leaf(x16.clone(), true);
        let y = tape.upsample_nearest2(xi);
        let l = tape.mean_all(y);
        let _ = tape.backward(l);
    });
    t("relu@64 fwd+bwd", || {
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone(), true);
        let y = tape.relu(xi);
        let l = tape.mean_all(y);
        let _ = tape.backward(l);
    });
}
