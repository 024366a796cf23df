//! Fréchet distance between Gaussian feature clouds, against the closed
//! form `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
//!
//!     cargo run --release --example frechet

use anyhow::Result;
use fade::eval::frechet_distance;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cloud(n: usize, means: &[f64], stds: &[f64], seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists: Vec<Normal<f64>> = means.iter().zip(stds).map(|(&m, &s)| Normal::new(m, s)).collect::<Result<_, _>>()?;
    Ok((0..n).map(|_| dists.iter().map(|d| d.sample(&mut rng)).collect()).collect())
}

fn main() -> Result<()> {
    let n = 50_000;
    let a = cloud(n, &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 1)?;
    for (shift, scale) in [(0.0, 1.0), (1.0, 1.0), (0.0, 2.0), (0.5, 0.5)] {
        let b = cloud(n, &[shift, 0.0, 0.0], &[scale, 1.0, 1.0], 2)?;
        let exact = shift * shift + (1.0 - scale) * (1.0 - scale);
        let d = frechet_distance(&a, &b)?;
        println!("shift {shift}, std {scale}: estimated {d:.4}, closed form {exact:.4}");
    }
    println!("distance of a cloud to itself: {:.2e}", frechet_distance(&a, &a)?);
    Ok(())
}
