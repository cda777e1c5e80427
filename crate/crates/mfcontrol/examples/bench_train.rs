use std::sync::Arc;
use std::time::Instant;

use mfcontrol::dynamics::{InitialLaw, LinearModel, MeanVarianceTerminal, ProblemSpec};
use mfcontrol::levelset::{train, LrDecay, SolverProblem, TrainConfig};
use mfcontrol::nn::{AdamParams, InputScaling};

fn main() {
    let spec = ProblemSpec {
        model: Arc::new(LinearModel::wealth(0.15, 0.35)),
        terminal_cost: Arc::new(MeanVarianceTerminal { lambda: 1.0 }),
        constraint: None,
        terminal_constraint: None,
        initial: InitialLaw::PointMass(vec![1.0]),
        horizon: 1.0,
        control_bounds: None,
    };
    let problem = SolverProblem {
        name: "bench".into(),
        spec,
        audit_spec: None,
        state_scaling: InputScaling {
            shift: vec![1.0],
            scale: vec![1.0],
        },
        beta_enabled: false,
        negated: false,
    };
    let iters: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let cfg = TrainConfig {
        batch: 4096,
        groups: 1,
        n_steps: 50,
        grid: (0..25).map(|i| -1.07 + i as f64 * (0.04 / 24.0)).collect(),
        lambda: 100.0,
        penalty: "integral".into(),
        epsilon: 1e-8,
        iterations: iters,
        hidden: vec![15, 15],
        adam: AdamParams::default(),
        lr_decay: LrDecay::Constant,
        seed: 1,
        eval_batch: 8192,
        eval_groups: 1,
        eval_replications: 2,
        log_every: 1,
    };
    let t0 = Instant::now();
    let out = train(&problem, &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{iters} iterations in {dt:.2}s  ({:.3} s/iter), final loss {:.4}",
        dt / iters as f64,
        out.final_loss
    );
}
