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
    let task = &cfg.tasks[0]; // push
    let demo = read_hand_demo(&root.join("demos/push.txt")).unwrap();
    let traj = retarget::retarget_trajectory(&demo, &RetargetConfig::default()).unwrap();

    for r in [0.05_f64, 0.1, 0.2] {
        let mut s = 0;
        for seed in 0..25u64 {
            let out = refine::run_episode(
                task, &policy, &demo, &RetargetConfig::default(),
                &RefineConfig::new(r, seed),
                &ExecContext { layout, perturb_magnitude: 0.02, log_steps: false },
            );
            s += out.success as u32;
        }
        println!("push r={r}: {s}/25");
    }

    // Side-by-side traces, seed 1.
    let tr = |r: f64| {
        refine::run_episode(
            task, &policy, &demo, &RetargetConfig::default(),
            &RefineConfig::new(r, 1),
            &ExecContext { layout, perturb_magnitude: 0.02, log_steps: true },
        )
    };
    let a = tr(0.0);
    let b = tr(0.2);
    println!("r=0 success={}  r=0.2 success={}", a.success, b.success);
    let sa = a.steps.unwrap();
    let sb = b.steps.unwrap();
    println!("goal=({:.3},{:.3}) radius={:.3}", a.terminal.goal.center.x, a.terminal.goal.center.y, a.terminal.goal.radius);
    for i in (0..sa.len()).step_by(4) {
        let x = &sa[i].state; let y = &sb[i].state;
        println!(
            "t={i:2} | r0 eff=({:+.3},{:+.3},{:+.3}) obj=({:+.3},{:+.3}) | r.2 eff=({:+.3},{:+.3},{:+.3}) obj=({:+.3},{:+.3})",
            x.effector.x, x.effector.y, x.effector.z, x.objects[0].center.x, x.objects[0].center.y,
            y.effector.x, y.effector.y, y.effector.z, y.objects[0].center.x, y.objects[0].center.y,
        );
    }
    // Chunk comparison at the descend cycle (t=8) with live obs from the r=0 path.
    let state8 = &sa[7].state;
    let obs8 = simenv::observe(state8, &layout, task.max_steps);
    let obs7 = simenv::observe(&sa[6].state, &layout, task.max_steps);
    let hist: Vec<f64> = [obs7, obs8].concat();
    let raw = retarget::retargeted_action_chunk(&traj, 8, 10);
    let refined = refine::refine_chunk(&policy, &raw, &hist, 0.2, 42).unwrap();
    for k in 0..6 {
        println!(
            "k={k} raw=({:+.4},{:+.4},{:+.4},{:+.2}) ref=({:+.4},{:+.4},{:+.4},{:+.2})",
            raw[k*4], raw[k*4+1], raw[k*4+2], raw[k*4+3],
            refined[k*4], refined[k*4+1], refined[k*4+2], refined[k*4+3]
        );
    }
}
