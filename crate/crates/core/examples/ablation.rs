//! Trains the full reward and its two ablations from the same seed and
//! prints held-out metrics for each.
//!
//! Usage: ablation [seed] [steps]

use vlcal_core::confidence::RewardConfig;
use vlcal_core::env::{Environment, Policy};
use vlcal_core::eval::{evaluate, summarize, EvalConfig};
use vlcal_core::grpo::{TrainConfig, Trainer};
use vlcal_core::parallel::Execution;

fn main() -> vlcal_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse()).expect("seed must be an integer");
    let steps: usize = args.next().map_or(Ok(3000), |s| s.parse()).expect("steps must be an integer");

    let env = Environment::default();
    let eval_cfg = EvalConfig::default();
    let cfg = TrainConfig {
        steps,
        seed,
        ..TrainConfig::default()
    };
    let variants = [
        ("full", RewardConfig::default()),
        (
            "no_visual_reward",
            RewardConfig {
                lambda_vis: 0.0,
                ..RewardConfig::default()
            },
        ),
        ("holistic", RewardConfig::holistic()),
    ];
    println!("{:<18}{:>10}{:>8}{:>8}{:>8}{:>8}", "variant", "accuracy", "ece", "auroc", "brier", "gap");
    for (name, reward) in variants {
        let mut trainer = Trainer::new(Policy::base(env.task.colors as usize), env, cfg, reward)?;
        for _ in 0..steps {
            trainer.step()?;
        }
        let records = evaluate(trainer.policy(), &env, &reward, &eval_cfg, seed, Execution::default())?;
        let s = summarize(&records, eval_cfg.bins)?;
        let f = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{name:<18}{:>10}{:>8}{:>8}{:>8}{:>8}",
            f(s.accuracy),
            f(s.ece),
            f(s.auroc),
            f(s.brier),
            f(s.gap.map(|g| g.delta))
        );
    }
    Ok(())
}
