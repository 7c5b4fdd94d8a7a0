use demorefine::demonstrator::read_hand_demo;
use demorefine::harness::BenchmarkConfig;
use demorefine::policy::Policy;
use demorefine::refine::{self, ExecContext, RefineConfig};
use demorefine::retarget::{self, RetargetConfig};
use demorefine::simenv;
use std::path::Path;

fn main() {
    let cfg = BenchmarkConfig::default();
    let root = Path::new("/tmp/calib");
    let policy = Policy::load(&root.join("checkpoint")).unwrap();
    let layout = cfg.layout();
    let task = &cfg.tasks[2]; // place
    let demo = read_hand_demo(&root.join("demos/place.txt")).unwrap();
    let traj = retarget::retarget_trajectory(&demo, &RetargetConfig::default()).unwrap();

    // Initial state and first chunk comparison.
    let state = retarget::initial_state(task, &traj, 0.02, 12345);
    let obs0 = simenv::observe(&state, &layout, task.max_steps);
    let hist: Vec<f64> = [obs0.clone(), obs0.clone()].concat();
    let chunk_raw = retarget::retargeted_action_chunk(&traj, 0, 10);
    println!("action stats mean: {:?}", &policy.action_stats.mean);
    println!("action stats std:  {:?}", &policy.action_stats.std);
    for r in [0.2_f64, 0.4] {
        let refined = refine::refine_chunk(&policy, &chunk_raw, &hist, r, 99).unwrap();
        println!("\n-- r={r} --");
        for k in 0..4 {
            println!(
                "raw  {:?}",
                &chunk_raw[k * 4..k * 4 + 4].iter().map(|v| format!("{v:+.4}")).collect::<Vec<_>>()
            );
            println!(
                "ref  {:?}",
                &refined[k * 4..k * 4 + 4].iter().map(|v| format!("{v:+.4}")).collect::<Vec<_>>()
            );
        }
    }

    // Full episodes.
    let exec = ExecContext { layout, perturb_magnitude: 0.02, log_steps: false };
    for r in [0.0, 0.1, 0.2, 0.4, 1.0] {
        let mut succ = 0;
        for seed in 0..20u64 {
            let out = refine::run_episode(
                task, &policy, &demo, &RetargetConfig::default(),
                &RefineConfig::new(r, seed), &exec,
            );
            succ += out.success as u32;
        }
        println!("r={r}: success {succ}/20");
    }

    // Trace one episode at r=0.2: effector + object + gripper over time.
    let out = refine::run_episode(
        task, &policy, &demo, &RetargetConfig::default(),
        &RefineConfig { noise_level: 0.2, ..RefineConfig::new(0.2, 3) },
        &ExecContext { layout, perturb_magnitude: 0.02, log_steps: true },
    );
    let steps = out.steps.unwrap();
    for (i, rec) in steps.iter().enumerate() {
        if i % 8 == 0 {
            let s = &rec.state;
            println!(
                "t={i:3} eff=({:+.3},{:+.3},{:+.3}) ap={:.1} obj=({:+.3},{:+.3},{:+.3}) att={} act_g={:+.2}",
                s.effector.x, s.effector.y, s.effector.z, s.aperture,
                s.objects[0].center.x, s.objects[0].center.y, s.objects[0].center.z,
                s.objects[0].attached, rec.action.gripper
            );
        }
    }
    // And the r=0 reference.
    let out0 = refine::run_episode(
        task, &policy, &demo, &RetargetConfig::default(),
        &RefineConfig::new(0.0, 3),
        &ExecContext { layout, perturb_magnitude: 0.02, log_steps: true },
    );
    println!("r=0 success={} terminal obj=({:+.3},{:+.3},{:+.3})", out0.success,
        out0.terminal.objects[0].center.x, out0.terminal.objects[0].center.y, out0.terminal.objects[0].center.z);
    let steps0 = out0.steps.unwrap();
    for (i, rec) in steps0.iter().enumerate() {
        if i % 8 == 0 {
            let s = &rec.state;
            println!(
                "t={i:3} eff=({:+.3},{:+.3},{:+.3}) ap={:.1} obj=({:+.3},{:+.3},{:+.3}) att={} act_g={:+.2}",
                s.effector.x, s.effector.y, s.effector.z, s.aperture,
                s.objects[0].center.x, s.objects[0].center.y, s.objects[0].center.z,
                s.objects[0].attached, rec.action.gripper
            );
        }
    }
}
