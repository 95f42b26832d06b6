// Temporary: time full-range multi-Otsu (noisy histogram, all bins populated).
use vipastain::maskextract::{multi_otsu, ChannelHistogram};
fn main() {
    let mut bins = [0u64; 256];
    let mut state = 12345u64;
    for b in bins.iter_mut() {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        *b = (state >> 33) % 5000 + 1;
    }
    let hist = ChannelHistogram::from_bins(bins);
    let t0 = std::time::Instant::now();
    let ts = multi_otsu(&hist, 7).unwrap();
    println!("k=7 L=256 DP: {:?} -> {:?}", t0.elapsed(), ts);
}
