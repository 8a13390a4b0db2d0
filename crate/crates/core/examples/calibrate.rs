use drpo_core::advantage::EstimatorKind;
use drpo_core::config::ExperimentConfig;
use drpo_core::synthenv::train;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let iters: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(300);
    let seeds: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3);
    let dim: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(8);
    let all: bool = args.get(6).map(|s| s == "all").unwrap_or(false);

    let mut config = ExperimentConfig::default();
    config.environment.learning_rate = lr;
    config.environment.noise_scale = noise;
    config.environment.iterations = iters;
    config.environment.feature_dim = dim;
    config.environment.eval_interval = iters.max(1);
    config.environment.eval_questions_per_domain = 128;

    let estimators: &[EstimatorKind] = if all {
        &[
            EstimatorKind::Grpo,
            EstimatorKind::Drpo,
            EstimatorKind::DrpoNoKl,
            EstimatorKind::DrpoDomainOnly,
        ]
    } else {
        &[EstimatorKind::Grpo, EstimatorKind::Drpo]
    };
    for &estimator in estimators {
        let start = Instant::now();
        let mut per_domain: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        let mut overall = Vec::new();
        for seed in 1..=seeds {
            let trace = train(&config, estimator, seed).unwrap();
            for (domain, metrics) in &trace.final_report.domains {
                per_domain.entry(domain.clone()).or_default().push(metrics.macro_f1);
            }
            overall.push(trace.final_report.overall.macro_f1);
            if std::env::var("PER_SEED").is_ok() {
                print!("  seed {seed}:");
                for (domain, metrics) in &trace.final_report.domains {
                    print!(" {domain}={:.3}", metrics.macro_f1);
                }
                println!();
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        print!("{estimator:>6}: overall={:.3}", mean(&overall));
        for (domain, values) in &per_domain {
            print!("  {domain}={:.3}", mean(values));
        }
        println!("  ({:.1}s for {seeds} seeds)", start.elapsed().as_secs_f64());
    }
}
