//! Checks denoiser reconstruction bias on training windows.

use demorefine::demonstrator;
use demorefine::harness::BenchmarkConfig;
use demorefine::policy::{build_dataset, Policy};
use demorefine::refine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::path::Path;

fn main() {
    let cfg = BenchmarkConfig::default();
    let root = Path::new("/tmp/calib");
    let policy = Policy::load(&root.join("checkpoint")).unwrap();
    let (episodes, _) = demonstrator::read_dataset(&root.join("dataset.dmdd")).unwrap();
    let ds = build_dataset(&episodes, &cfg.policy).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(1);

    // Refine training windows at r=0.2 and measure per-action-dim bias of
    // (refined - raw), in raw units.
    let mut bias = [0.0f64; 4];
    let mut mag = [0.0f64; 4];
    let n = 300;
    for trial in 0..n {
        let w = &ds.windows[rng.random_range(0..ds.windows.len())];
        let refined = refine::refine_chunk(&policy, &w.actions, &w.obs_history, 0.2, trial as u64)
            .unwrap();
        for k in 0..cfg.policy.chunk_len {
            for d in 0..4 {
                let diff = refined[k * 4 + d] - w.actions[k * 4 + d];
                bias[d] += diff;
                mag[d] += diff.abs();
            }
        }
    }
    let denom = (n * cfg.policy.chunk_len) as f64;
    println!("train-window refine bias per dim: {:?}", bias.map(|b| b / denom));
    println!("train-window refine |err| per dim: {:?}", mag.map(|b| b / denom));
    println!("action std: {:?}", &policy.action_stats.std);

    // Same but with noise injected manually and eps compared directly at s=50.
    let s = 50;
    let ab = policy.schedule().alpha_bar(s);
    let mut eps_err = 0.0;
    let mut count = 0;
    for _ in 0..200 {
        let w = &ds.windows[rng.random_range(0..ds.windows.len())];
        let x0 = policy.action_stats.normalize(&w.actions);
        let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let xs: Vec<f64> = x0
            .iter()
            .zip(&eps)
            .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
            .collect();
        // One strided step to 0 recovers x0_hat; invert for the implied eps.
        let out = demorefine::policy::sample_chunk(&policy, &w.obs_history, 0, s, Some(&xs)).unwrap();
        let out_norm = policy.action_stats.normalize(&out);
        for i in 0..x0.len() {
            let eps_hat = (xs[i] - ab.sqrt() * out_norm[i]) / (1.0 - ab).sqrt();
            eps_err += (eps_hat - eps[i]).powi(2);
            count += 1;
        }
    }
    println!("eps MSE at s=50 on train windows: {:.4}", eps_err / count as f64);
}
