//! Calibrating the Gaussian mechanism and drawing exact discrete Gaussian
//! noise on a power-of-two grid.

use dpsql::mechanisms::{calibrate_sigma, gaussian_delta, granularity_for, NoiseSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (eps, delta, sens) in [(0.1, 1e-7, 1.0), (1.0, 1e-7, 1.0), (1.0, 1e-7, 100.0), (10.0, 1e-9, 1.0)] {
        let sigma = calibrate_sigma(eps, delta, sens)?;
        println!(
            "eps {eps:>5} delta {delta:e} sensitivity {sens:>6}: sigma = {sigma:.5} (achieved delta {:.3e})",
            gaussian_delta(eps, sigma, sens)
        );
    }

    let spec = NoiseSpec::new(3.0, granularity_for(1.0, 10))?;
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let draws: Vec<f64> = (0..100_000).map(|_| spec.sample(&mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64;
    println!(
        "grid {}: 100000 draws, mean {mean:.4}, std {:.4}, first {:?}",
        spec.granularity,
        var.sqrt(),
        &draws[..4]
    );
    Ok(())
}
