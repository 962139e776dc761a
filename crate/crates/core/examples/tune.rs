//! Scratch harness for agent hyperparameter probing.
//!
//! Usage: cargo run --release -p snmdp-core --example tune -- <loss> <lr> <steps> <seeds> [site] [kind] [strength]

use snmdp_core::agents::{train_run, AgentConfig, InjectionSite, LossKind, NoiseInjection};
use snmdp_core::envs::EnvKind;
use snmdp_core::perturb::{ContinuousNoise, PgdParams};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let loss = if args.get(1).map(|s| s.as_str()) == Some("hist") {
        LossKind::Histogram
    } else {
        LossKind::LeastSquares
    };
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(100_000);
    let seeds: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3);
    let site = match args.get(5).map(|s| s.as_str()) {
        Some("current") => InjectionSite::Current,
        Some("next") => InjectionSite::Next,
        Some("both") => InjectionSite::Both,
        _ => InjectionSite::None,
    };
    let noise = match args.get(6).map(|s| s.as_str()) {
        Some("pgd") => ContinuousNoise::Pgd(PgdParams::new(
            args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.05),
            3,
        )),
        Some("gaussian") => ContinuousNoise::Gaussian {
            std: args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.05),
        },
        _ => ContinuousNoise::Gaussian { std: 0.0 },
    };

    let mut cfg = AgentConfig::defaults(loss, EnvKind::CartPole);
    cfg.learning_rate = lr;
    cfg.total_steps = steps;
    if let Ok(g) = std::env::var("TUNE_GAMMA") {
        cfg.gamma = g.parse().unwrap();
    }
    if let Ok(k) = std::env::var("TUNE_K") {
        cfg.k = k.parse().unwrap();
    }
    if let Ok(l) = std::env::var("TUNE_L") {
        cfg.norm_bound = Some(l.parse().unwrap());
    }
    if let Ok(w) = std::env::var("TUNE_WIDTH") {
        cfg.head_mode = snmdp_core::agents::HeadMode::Nonlinear { width: w.parse().unwrap() };
    }
    if let Ok(s) = std::env::var("TUNE_SYNC") {
        cfg.target_sync = s.parse().unwrap();
    }
    let injection = NoiseInjection { site, noise };

    let start = Instant::now();
    let mut finals = Vec::new();
    for seed in 0..seeds {
        let t0 = Instant::now();
        let log = train_run(&cfg, EnvKind::CartPole, &injection, seed, "tune").unwrap();
        let f = log.final_performance();
        finals.push(f);
        println!(
            "seed {seed}: final {:.1}, episodes {}, diverged {}, max_grad {:.3e}, elapsed {:.1}s",
            f,
            log.episode_returns.len(),
            log.diverged,
            log.max_state_grad_norm,
            t0.elapsed().as_secs_f64()
        );
    }
    let mean: f64 = finals.iter().sum::<f64>() / finals.len() as f64;
    println!(
        "=== loss {:?} lr {lr} steps {steps}: mean final {mean:.1} (total {:.1}s)",
        loss,
        start.elapsed().as_secs_f64()
    );
}
