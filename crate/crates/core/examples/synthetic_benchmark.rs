//! Trains FISM, then NAIS-prod (β = 0.5 and β = 1) from the FISM embeddings on
//! a synthetic dataset and prints the comparison.
//!
//! Usage: synthetic_benchmark [fism_epochs] [nais_epochs] [k] [seed]

use std::time::Instant;

use nais_core::evaluator::{attention_stats, evaluate, median, paired_ttest};
use nais_core::model::AttentionVariant;
use nais_core::synthetic::{generate, SyntheticConfig};
use nais_core::trainer::{train_fism_with, train_nais_with, ModelKind, TrainConfig};

fn arg(idx: usize, default: u64) -> u64 {
    std::env::args()
        .nth(idx)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fism_epochs = arg(1, 20) as usize;
    let nais_epochs = arg(2, 10) as usize;
    let k = arg(3, 16) as usize;
    let seed = arg(4, 1);

    let data = generate(&SyntheticConfig::default())?;
    println!(
        "users {} items {} train interactions {}",
        data.num_users,
        data.num_items,
        data.num_train_interactions()
    );

    let base = TrainConfig {
        k,
        attention_factor: k,
        epochs: fism_epochs,
        seed,
        eval_top_k: Some(10),
        ..TrainConfig::default()
    };
    let timer = Instant::now();
    let fism_cfg = TrainConfig {
        model: ModelKind::Fism,
        ..base.clone()
    };
    let fism = train_fism_with(&data, &fism_cfg, |log, _| println!("fism\t{log}"))?;
    println!("fism time {:.1}s", timer.elapsed().as_secs_f64());
    let fism_report = evaluate(&fism.params, &data, 10)?;

    for beta in [0.5, 1.0] {
        let cfg = TrainConfig {
            model: ModelKind::Nais(AttentionVariant::Prod),
            beta,
            epochs: nais_epochs,
            ..base.clone()
        };
        let timer = Instant::now();
        let mut first_median = None;
        let nais = train_nais_with(&data, &cfg, Some(&fism.params), |log, params| {
            println!("nais b={beta}\t{log}");
            if log.epoch == 1 {
                let stats = attention_stats(params, &data).expect("stats");
                first_median = Some(median(&stats.iter().map(|s| s.variance).collect::<Vec<_>>()));
            }
        })?;
        let report = evaluate(&nais.params, &data, 10)?;
        let t = paired_ttest(&fism_report.per_user_ndcg, &report.per_user_ndcg)?;
        let stats = attention_stats(&nais.params, &data)?;
        let last_median = median(&stats.iter().map(|s| s.variance).collect::<Vec<_>>());
        println!(
            "beta {beta}: ndcg {:.4} vs fism {:.4} (rel {:+.2}%), t {:.2} p {:.2e}, var median epoch1 {:.3e} final {:.3e}, {:.1}s",
            report.mean_ndcg,
            fism_report.mean_ndcg,
            100.0 * (report.mean_ndcg / fism_report.mean_ndcg - 1.0),
            t.t,
            t.p,
            first_median.unwrap_or(f64::NAN),
            last_median,
            timer.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
