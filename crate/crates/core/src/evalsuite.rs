//! Cross-age verification, attribute leakage, JSD curves and the `λ_w`
//! ablation grid.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nets::{embed_id, Architecture, ModelParams};
use crate::synthdata::{Dataset, PairFolds};
use crate::trainer::{train, TrainOptions, TrainOutput, METRICS_HEADER};
use crate::tensor::Tensor;

pub const RIDGE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub thresholds: Vec<f64>,
}

/// `(similarity, same identity)` for one pair.
pub type ScoredPair = (f64, bool);

/// Threshold maximizing accuracy of `similarity >= t` over `pairs`, scanned
/// over the midpoints between consecutive distinct similarities and one
/// point beyond each end. Ties go to the smallest threshold.
pub fn best_threshold(pairs: &[ScoredPair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("threshold selection"));
    }
    if let Some((s, _)) = pairs.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFiniteValue(format!("similarity {s}")));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    // With t below everything all pairs are accepted: correct = positives.
    let mut correct = sorted.iter().filter(|p| p.1).count();
    let mut best = (sorted[0].0 - 1.0, correct);
    let mut i = 0;
    while i < n {
        let v = sorted[i].0;
        while i < n && sorted[i].0 == v {
            correct = if sorted[i].1 { correct - 1 } else { correct + 1 };
            i += 1;
        }
        let t = if i < n { 0.5 * (v + sorted[i].0) } else { v + 1.0 };
        if correct > best.1 {
            best = (t, correct);
        }
    }
    Ok((best.0, best.1 as f64 / n as f64))
}

pub fn accuracy_at(pairs: &[ScoredPair], threshold: f64) -> f64 {
    let hits = pairs.iter().filter(|(s, l)| (*s >= threshold) == *l).count();
    hits as f64 / pairs.len() as f64
}

/// Leave-one-fold-out protocol on precomputed similarities: each fold is
/// scored at the threshold chosen on all other folds.
pub fn verify_scores(folds: &[Vec<ScoredPair>]) -> Result<VerificationReport> {
    if folds.len() < 2 {
        return Err(Error::InfeasibleFolds(format!("need at least 2 folds, got {}", folds.len())));
    }
    if let Some(f) = folds.iter().position(|f| f.is_empty()) {
        return Err(Error::InfeasibleFolds(format!("fold {f} is empty")));
    }
    let mut fold_accuracy = Vec::with_capacity(folds.len());
    let mut thresholds = Vec::with_capacity(folds.len());
    for test in 0..folds.len() {
        let rest: Vec<ScoredPair> = folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != test)
            .flat_map(|(_, p)| p.iter().copied())
            .collect();
        let (t, _) = best_threshold(&rest)?;
        thresholds.push(t);
        fold_accuracy.push(accuracy_at(&folds[test], t));
    }
    let k = fold_accuracy.len() as f64;
    let mean = fold_accuracy.iter().sum::<f64>() / k;
    let var = fold_accuracy.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / k;
    Ok(VerificationReport {
        fold_accuracy,
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
        thresholds,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Pair similarities per fold from one embedding row per dataset sample.
pub fn score_pairs(folds: &PairFolds, embeddings: &Tensor) -> Result<Vec<Vec<ScoredPair>>> {
    let n = embeddings.rows();
    folds
        .folds
        .iter()
        .map(|fold| {
            fold.iter()
                .map(|p| {
                    if p.idx_a >= n || p.idx_b >= n {
                        return Err(Error::InvalidTensor(format!(
                            "pair ({}, {}) indexes past {n} samples",
                            p.idx_a, p.idx_b
                        )));
                    }
                    Ok((cosine(embeddings.row(p.idx_a), embeddings.row(p.idx_b)), p.label))
                })
                .collect()
        })
        .collect()
}

fn check_input_dim(arch: &Architecture, dataset: &Dataset) -> Result<()> {
    if arch.d_x != dataset.d_x() {
        return Err(Error::Config(format!(
            "checkpoint expects d_x = {} but the dataset has d_x = {}",
            arch.d_x,
            dataset.d_x()
        )));
    }
    Ok(())
}

/// Cross-age verification accuracy of identity embeddings.
pub fn cosine_verify(
    folds: &PairFolds,
    arch: &Architecture,
    params: &ModelParams,
    dataset: &Dataset,
) -> Result<VerificationReport> {
    check_input_dim(arch, dataset)?;
    let emb = embed_id(arch, params, &dataset.all_features()?)?;
    verify_scores(&score_pairs(folds, &emb)?)
}

fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return Err(Error::InvalidTensor("ridge system is not positive definite".into()));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Ok(x)
}

/// Ridge regression with an unpenalized intercept:
/// `w = (XcᵀXc + λI)⁻¹ Xcᵀ yc` on centred data. Returns `(w, intercept)`.
pub fn ridge_fit(x: &Tensor, y: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    let (n, d) = x.dims()?;
    if y.len() != n {
        return Err(Error::ShapeMismatch {
            op: "ridge_fit",
            left: x.shape().to_vec(),
            right: vec![y.len()],
        });
    }
    if n == 0 {
        return Err(Error::EmptyBatch("ridge_fit"));
    }
    let mx: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64).collect();
    let my = y.iter().sum::<f64>() / n as f64;
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for i in 0..n {
        let row: Vec<f64> = x.row(i).iter().zip(&mx).map(|(v, m)| v - m).collect();
        let yi = y[i] - my;
        for j in 0..d {
            b[j] += row[j] * yi;
            for k in 0..d {
                a[j * d + k] += row[j] * row[k];
            }
        }
    }
    for j in 0..d {
        a[j * d + j] += lambda;
    }
    let w = cholesky_solve(&a, &b, d)?;
    let intercept = my - w.iter().zip(&mx).map(|(w, m)| w * m).sum::<f64>();
    Ok((w, intercept))
}

pub fn ridge_predict(x: &Tensor, w: &[f64], intercept: f64) -> Vec<f64> {
    (0..x.rows())
        .map(|i| intercept + x.row(i).iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// `1 − SSE/SST` about the mean of `y`; at most 1, unbounded below. A
/// constant target scores 0 unless predicted exactly.
pub fn r_squared(y: &[f64], pred: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sse: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    let sst: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
    if sst == 0.0 {
        return if sse == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - sse / sst
}

/// Held-out R² of a ridge regression from `features` to `targets`; rows with
/// `train[i]` fit the model and the rest score it.
pub fn ridge_r2(features: &Tensor, targets: &[f64], train: &[bool]) -> Result<f64> {
    let fit: Vec<usize> = (0..train.len()).filter(|&i| train[i]).collect();
    let test: Vec<usize> = (0..train.len()).filter(|&i| !train[i]).collect();
    if fit.is_empty() || test.is_empty() {
        return Err(Error::EmptyBatch("ridge_r2 split"));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| targets[i]).collect::<Vec<_>>();
    let (w, b) = ridge_fit(&features.select_rows(&fit)?, &pick(&fit), RIDGE)?;
    let pred = ridge_predict(&features.select_rows(&test)?, &w, b);
    Ok(r_squared(&pick(&test), &pred))
}

/// How well age is linearly decodable from the identity embedding.
/// Identities with even labels fit the probe, odd ones score it.
pub fn age_leakage_probe(arch: &Architecture, params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    check_input_dim(arch, dataset)?;
    let emb = embed_id(arch, params, &dataset.all_features()?)?;
    let ages: Vec<f64> = dataset.samples.iter().map(|s| s.age).collect();
    let train: Vec<bool> = dataset.samples.iter().map(|s| s.identity % 2 == 0).collect();
    ridge_r2(&emb, &ages, &train)
}

/// `(step, jsd_probe)` for every metrics row that carries a probe value.
pub fn jsd_curve(metrics_csv: &str) -> Result<Vec<(usize, f64)>> {
    let mut lines = metrics_csv.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        Some((_, h)) => return Err(Error::Format(format!("line 1: unexpected header {h:?}"))),
        None => return Err(Error::Format("empty metrics log".into())),
    }
    let mut series = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("line {}: {what}", i + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad(&format!("expected 7 fields, found {}", fields.len())));
        }
        let step: usize = fields[0].parse().map_err(|_| bad("bad step"))?;
        for f in [1, 2, 3, 4, 6] {
            if !fields[f].is_empty() {
                fields[f].parse::<f64>().map_err(|_| bad("bad number"))?;
            }
        }
        if !fields[5].is_empty() {
            let v: f64 = fields[5].parse().map_err(|_| bad("bad jsd_probe"))?;
            series.push((step, v));
        }
    }
    if series.is_empty() {
        return Err(Error::Format("metrics log has no jsd_probe values".into()));
    }
    Ok(series)
}

pub fn curve_csv(series: &[(usize, f64)]) -> String {
    let mut s = String::from("step,jsd_probe\n");
    for (t, v) in series {
        let _ = writeln!(s, "{t},{v}");
    }
    s
}

/// Line plot of one or more labelled series on shared axes, as SVG markup.
pub fn curve_svg(series: &[(&str, &[(usize, f64)])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let x_max = points.clone().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let y_max = points.map(|p| p.1).fold(std::f64::consts::LN_2, f64::max);
    let px = |x: f64| M + x / x_max * (W - 2.0 * M);
    let py = |y: f64| H - M - y / y_max * (H - 2.0 * M);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M {M} {t} L {M} {b} L {r} {b}" stroke="black" fill="none"/>"#,
        t = M,
        b = H - M,
        r = W - M
    );
    for k in 0..=4 {
        let y = y_max * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{y:.3}</text>"#,
            M - 6.0,
            py(y) + 4.0
        );
        let x = x_max * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{x:.0}</text>"#,
            px(x),
            H - M + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">encoder step</text>"#,
        W / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">JSD estimate</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (k, (label, s)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let d: Vec<String> = s
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| format!("{} {:.2} {:.2}", if i == 0 { "M" } else { "L" }, px(x as f64), py(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<path d="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            d.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            W - M - 120.0,
            M + 16.0 * (k as f64 + 1.0),
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub report: VerificationReport,
    pub final_jsd: Option<f64>,
    pub age_r2: f64,
    pub jsd_series: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda_w: f64,
    /// The error message of a run that aborted.
    pub outcome: std::result::Result<AblationResult, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
}

/// Parses a comma-separated `λ_w` grid; values must be finite, non-negative
/// and distinct.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let grid = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad grid value {v:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    check_grid(&grid)?;
    Ok(grid)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("empty lambda_w grid".into()));
    }
    for (i, v) in grid.iter().enumerate() {
        if !v.is_finite() || *v < 0.0 {
            return Err(Error::Config(format!("grid value {v} must be finite and >= 0")));
        }
        if grid[..i].contains(v) {
            return Err(Error::Config(format!("duplicate grid value {v}")));
        }
    }
    Ok(())
}

/// Final JSD probe value of a run, if it was monitored.
pub fn final_jsd(out: &TrainOutput) -> Option<f64> {
    out.metrics.last().and_then(|r| r.jsd_probe)
}

/// Trains on `train_set`, then evaluates verification on `folds` over
/// `eval_set` and age leakage on `eval_set`.
pub fn evaluate_run(out: &TrainOutput, eval_set: &Dataset, folds: &PairFolds) -> Result<AblationResult> {
    let arch = &out.state.arch;
    let params = &out.state.params;
    Ok(AblationResult {
        report: cosine_verify(folds, arch, params, eval_set)?,
        final_jsd: final_jsd(out),
        age_r2: age_leakage_probe(arch, params, eval_set)?,
        jsd_series: out
            .metrics
            .iter()
            .filter_map(|r| r.jsd_probe.map(|v| (r.step, v)))
            .collect(),
    })
}

/// One run per `λ_w`, identical otherwise. A failed run is recorded and the
/// grid continues.
pub fn run_ablation(
    base: &TrainConfig,
    grid: &[f64],
    train_set: &Dataset,
    eval_set: &Dataset,
    folds: &PairFolds,
    pretrained_age: Option<&ModelParams>,
    mut on_done: impl FnMut(&AblationRow, Option<&TrainOutput>),
) -> Result<AblationGrid> {
    check_grid(grid)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda_w in grid {
        let mut cfg = base.clone();
        cfg.loss.lambda_w = lambda_w;
        let opts = TrainOptions {
            pretrained_age,
            ..TrainOptions::default()
        };
        let run = train(&cfg, train_set, opts);
        let outcome = run
            .as_ref()
            .map_err(|e| e.to_string())
            .and_then(|out| evaluate_run(out, eval_set, folds).map_err(|e| e.to_string()));
        let row = AblationRow { lambda_w, outcome };
        on_done(&row, run.as_ref().ok());
        rows.push(row);
    }
    Ok(AblationGrid { rows })
}

impl AblationGrid {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda_w,mean_acc,std_acc,final_jsd,age_r2\n");
        for row in &self.rows {
            match &row.outcome {
                Ok(r) => {
                    let jsd = r.final_jsd.map(|v| v.to_string()).unwrap_or_default();
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{}",
                        row.lambda_w, r.report.mean_accuracy, r.report.std_accuracy, jsd, r.age_r2
                    );
                }
                Err(_) => {
                    let _ = writeln!(s, "{},failed,failed,failed,failed", row.lambda_w);
                }
            }
        }
        s
    }

    /// Writes `ablation.csv`, `ablation.json` and `jsd_curve.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("ablation.csv"), self.to_csv())?;
        std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(self)?)?;
        let labels: Vec<String> = self.rows.iter().map(|r| format!("λ_w = {}", r.lambda_w)).collect();
        let series: Vec<(&str, &[(usize, f64)])> = self
            .rows
            .iter()
            .zip(&labels)
            .filter_map(|(r, l)| r.outcome.as_ref().ok().map(|o| (l.as_str(), o.jsd_series.as_slice())))
            .filter(|(_, s)| !s.is_empty())
            .collect();
        if !series.is_empty() {
            std::fs::write(dir.join("jsd_curve.svg"), curve_svg(&series))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn brute_force(pairs: &[ScoredPair]) -> f64 {
        let mut cands: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        cands.push(f64::INFINITY);
        cands
            .iter()
            .map(|&t| accuracy_at(pairs, t))
            .fold(0.0, f64::max)
    }

    #[test]
    fn separable_pairs_score_perfectly() {
        let fold = vec![(1.0, true), (1.0, true), (-1.0, false), (-1.0, false)];
        let r = verify_scores(&vec![fold; 10]).unwrap();
        assert!(r.fold_accuracy.iter().all(|&a| a == 1.0));
        assert_eq!(r.mean_accuracy, 1.0);
        assert_eq!(r.std_accuracy, 0.0);
    }

    #[test]
    fn threshold_scan_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let pairs: Vec<ScoredPair> = (0..n)
                .map(|_| ((rng.gen_range(-4..5) as f64) / 4.0, rng.gen_bool(0.5)))
                .collect();
            let (t, acc) = best_threshold(&pairs).unwrap();
            assert_eq!(acc, brute_force(&pairs));
            assert_eq!(accuracy_at(&pairs, t), acc);
        }
    }

    #[test]
    fn empty_fold_is_rejected() {
        assert!(verify_scores(&[vec![(0.1, true)], vec![]]).is_err());
    }

    #[test]
    fn ridge_recovers_linear_target() {
        let x = Tensor::matrix(6, 2, vec![1., 0., 0., 1., 1., 1., 2., 1., 0., 3., 1., 2.]).unwrap();
        let y: Vec<f64> = (0..6).map(|i| 3.0 * x.get(i, 0) - 2.0 * x.get(i, 1) + 5.0).collect();
        let (w, b) = ridge_fit(&x, &y, 0.0).unwrap();
        assert!((w[0] - 3.0).abs() < 1e-12 && (w[1] + 2.0).abs() < 1e-12 && (b - 5.0).abs() < 1e-12);
        assert_eq!(r_squared(&y, &y), 1.0);
    }

    #[test]
    fn curve_parsing() {
        let log = format!("{METRICS_HEADER}\n0,1,1,0.1,0.2,0.5,0.01\n1,1,1,0.1,0.2,,0.01\n50,1,1,0.1,0.2,0.3,0.01\n");
        assert_eq!(jsd_curve(&log).unwrap(), vec![(0, 0.5), (50, 0.3)]);
        assert!(jsd_curve("").is_err());
        let bad = format!("{METRICS_HEADER}\n0,1,1\n");
        let err = jsd_curve(&bad).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let svg = curve_svg(&[("a", &[(0, 0.5), (50, 0.3)])]);
        assert!(svg.starts_with("<svg") && svg.contains("<path"));
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0,0.1,1.0,2.0").unwrap(), vec![0.0, 0.1, 1.0, 2.0]);
        assert!(parse_grid("0,x").is_err());
        assert!(parse_grid("0,0").is_err());
        assert!(parse_grid("-1").is_err());
    }
}
