//! Calibration probe: trains policy variants on the generated dataset and
//! measures refined success at a few noise levels.

use demorefine::demonstrator::read_hand_demo;
use demorefine::harness::BenchmarkConfig;
use demorefine::policy::{build_dataset, train_policy, PolicyConfig};
use demorefine::refine::{self, ExecContext, RefineConfig};
use demorefine::retarget::RetargetConfig;
use demorefine::{demonstrator, seeds::SeedMix};
use std::path::Path;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(12000);
    let cfg = BenchmarkConfig::default();
    let root = Path::new("/tmp/calib");
    let (episodes, _) = demonstrator::read_dataset(&root.join("dataset.dmdd")).unwrap();
    let pcfg = PolicyConfig { train_iters: iters, ..cfg.policy.clone() };
    let ds = build_dataset(&episodes, &pcfg).unwrap();
    let t0 = Instant::now();
    let policy = train_policy(&ds, &pcfg, SeedMix::new("train").u64(cfg.root_seed).finish()).unwrap();
    let report = policy.train_report.unwrap();
    println!(
        "iters={iters}: loss {:.5} -> {:.5} in {:.1}s",
        report.loss_at_100, report.loss_final, t0.elapsed().as_secs_f64()
    );
    let layout = cfg.layout();
    let exec = ExecContext { layout, perturb_magnitude: 0.02, log_steps: false };
    for (ti, task) in cfg.tasks.iter().enumerate() {
        let demo = read_hand_demo(&root.join(format!("demos/{}.txt", task.name))).unwrap();
        let mut line = format!("{:<10}", task.name);
        for r in [0.0, 0.2, 0.4, 1.0] {
            let mut succ = 0;
            for seed in 0..25u64 {
                let out = refine::run_episode(
                    task, &policy, &demo, &RetargetConfig::default(),
                    &RefineConfig::new(r, SeedMix::new("c").u64(seed).u64(ti as u64).finish()),
                    &exec,
                );
                succ += out.success as u32;
            }
            line.push_str(&format!("  r={r}: {succ:2}/25"));
        }
        println!("{line}");
    }
}
