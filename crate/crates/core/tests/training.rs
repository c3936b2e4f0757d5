use disentangle::config::TrainConfig;
use disentangle::evalsuite::{jsd_curve, parse_grid};
use disentangle::synthdata::generate_split;
use disentangle::trainer::{metrics_csv, train, TrainOptions};

#[test]
fn identity_loss_halves_on_a_short_run() {
    let data = generate_split(11, 0, 20, 12).unwrap();
    let mut cfg = TrainConfig::ci();
    cfg.schedule.steps = 300;
    cfg.schedule.batch_size = 32;
    cfg.schedule.probe_every = 0;
    let out = train(&cfg, &data, TrainOptions::default()).unwrap();
    let first = out.metrics.first().unwrap().l_id;
    let last = out.metrics.last().unwrap().l_id;
    assert!(last < 0.5 * first, "L_id {first} -> {last}");
}

#[test]
fn probe_rows_follow_the_schedule() {
    let data = generate_split(11, 0, 10, 8).unwrap();
    let mut cfg = TrainConfig::ci();
    cfg.schedule.steps = 101;
    cfg.schedule.batch_size = 16;
    cfg.schedule.probe_every = 50;
    cfg.schedule.probe_steps = 20;
    cfg.schedule.probe_samples = 64;
    let out = train(&cfg, &data, TrainOptions::default()).unwrap();
    let curve = jsd_curve(&metrics_csv(&out.metrics)).unwrap();
    let steps: Vec<usize> = curve.iter().map(|p| p.0).collect();
    assert_eq!(steps, [0, 50, 100]);
    assert!(curve.iter().all(|p| (0.0..=std::f64::consts::LN_2).contains(&p.1)));
}

#[test]
fn grid_parsing_rejects_garbage() {
    assert_eq!(parse_grid("0").unwrap(), [0.0]);
    assert!(parse_grid("0,x").is_err());
    assert!(parse_grid("").is_err());
    assert!(parse_grid("-1").is_err());
}
