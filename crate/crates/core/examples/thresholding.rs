//! The minimum frequency rule: a group needs `k` distinct users and a noisy
//! user count above `tau`. Prints how often groups of various sizes survive.

use dpsql::mechanisms::{calibrate_sigma, granularity_for, NoiseSpec};
use dpsql::thresholding::{apply_double_threshold, PartitionStats, ThresholdParams};
use dpsql::Value;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (k, c_part) = (10, 4);
    let sigma = calibrate_sigma(1.0, 5e-8, (c_part as f64).sqrt())?;
    let params = ThresholdParams::new(k, sigma, 5e-8, c_part)?;
    println!("k = {k}, sigma = {sigma:.3}, tau = {:.3}", params.tau);

    let noise = NoiseSpec::new(sigma, granularity_for(1.0, 30))?;
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let trials = 2_000;
    for users in [5u64, 10, 25, 50, 75, 100, 150] {
        let mut released = 0;
        for _ in 0..trials {
            let stats = [PartitionStats {
                key: vec![Value::Int(users as i64)],
                exact_distinct_users: users,
                clamped_count: users,
                noisy_count: Some(noise.privatize(users as f64, &mut rng)),
            }];
            released += apply_double_threshold(&stats, &params).released.len();
        }
        println!("{users:>4} users: released {:.3}", released as f64 / trials as f64);
    }
    Ok(())
}
