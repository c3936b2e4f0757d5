//! Trains one model per `λ_w` on a fresh synthetic benchmark and prints
//! verification accuracy, age leakage and the JSD curve of each run.
//!
//! ```text
//! cargo run --release --example sweep -- [config.toml] [grid]
//! ```

use std::time::Instant;

use disentangle::config::TrainConfig;
use disentangle::evalsuite::{evaluate_run, parse_grid};
use disentangle::synthdata::{build_folds, generate_split, DEFAULT_MIN_GAP, DEFAULT_PAIRS_PER_FOLD};
use disentangle::trainer::{train, TrainOptions};

fn main() -> disentangle::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let config = match args.first() {
        Some(path) if path.ends_with(".toml") => TrainConfig::load(path.as_ref())?,
        _ => TrainConfig::desk(),
    };
    let grid = parse_grid(args.get(1).map(String::as_str).unwrap_or("0,0.1,1,2"))?;
    let data_seed: u64 = std::env::var("DATA_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(7);

    let train_set = generate_split(data_seed, 0, 200, 30)?;
    let eval_set = generate_split(data_seed, 200, 100, 30)?;
    let folds = build_folds(&eval_set, DEFAULT_MIN_GAP, DEFAULT_PAIRS_PER_FOLD, data_seed)?;

    for lambda_w in grid {
        let mut cfg = config.clone();
        cfg.loss.lambda_w = lambda_w;
        let start = Instant::now();
        let out = train(&cfg, &train_set, TrainOptions::default())?;
        let secs = start.elapsed().as_secs_f64();
        let r = evaluate_run(&out, &eval_set, &folds)?;
        let first = &out.metrics[0];
        let last = out.metrics.last().unwrap();
        println!(
            "lambda_w={lambda_w} time={secs:.1}s acc={:.4}±{:.4} age_r2={:.3} L_id {:.3}->{:.3} L_a {:.3}->{:.3} L_w {:?}",
            r.report.mean_accuracy,
            r.report.std_accuracy,
            r.age_r2,
            first.l_id,
            last.l_id,
            first.l_a,
            last.l_a,
            last.l_w,
        );
        let curve: Vec<String> = r.jsd_series.iter().map(|(t, v)| format!("{t}:{v:.3}")).collect();
        println!("  jsd {}", curve.join(" "));
    }
    Ok(())
}
