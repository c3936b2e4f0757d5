use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use disentangle::config::TrainConfig;
use disentangle::evalsuite::{
    age_leakage_probe, cosine_verify, curve_csv, curve_svg, jsd_curve, parse_grid, run_ablation,
};
use disentangle::losses::AgeMode;
use disentangle::nets::Checkpoint;
use disentangle::synthdata::{
    build_folds, generate_split, Dataset, PairFolds, DEFAULT_MIN_GAP, DEFAULT_PAIRS_PER_FOLD, FOLDS,
};
use disentangle::trainer::{metrics_csv, pretrain_age_encoder, train, MetricsRow, TrainOptions};

mod manifest;

use manifest::RunManifest;

const TRAIN_FILE: &str = "train.bin";
const EVAL_FILE: &str = "eval.bin";
const FOLDS_FILE: &str = "folds.jsonl";

#[derive(Parser)]
#[command(name = "disentangle", version, about = "Identity/age embedding disentanglement on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and held-out eval sets plus verification folds.
    GenData(GenData),
    /// Train the encoders, optionally with the adversarial critic.
    Train(Train),
    /// Train the attribute encoder alone, for pretrained mode.
    PretrainAge(PretrainAge),
    /// Ten-fold verification and age leakage of a checkpoint.
    Eval(Eval),
    /// One run per lambda_w.
    Ablate(Ablate),
    /// Extract and plot the JSD probe series from metrics files.
    JsdCurve(JsdCurveArgs),
    /// Print a configuration as TOML.
    PrintConfig(ConfigArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    identities: usize,
    #[arg(long, default_value_t = 30)]
    images_per_id: usize,
    /// Identities in the held-out eval set [default: --identities / 2]
    #[arg(long)]
    eval_identities: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MIN_GAP)]
    min_gap: f64,
    #[arg(long, default_value_t = DEFAULT_PAIRS_PER_FOLD)]
    pairs_per_fold: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config; keys it leaves out take their defaults.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self) -> disentangle::Result<TrainConfig> {
        match &self.config {
            Some(p) => TrainConfig::load(p),
            None => TrainConfig::preset(&self.preset),
        }
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset file, or a directory holding train.bin.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's mode.
    #[arg(long)]
    mode: Option<AgeMode>,
    /// Checkpoint supplying the frozen attribute encoder in pretrained mode.
    #[arg(long)]
    pretrained_age: Option<PathBuf>,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct PretrainAge {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    folds: PathBuf,
    /// Dataset the folds index into [default: eval.bin beside the folds]
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "0,0.1,1.0,2.0")]
    grid: String,
    #[arg(long)]
    mode: Option<AgeMode>,
    #[arg(long)]
    pretrained_age: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct JsdCurveArgs {
    /// metrics.csv files; each becomes one labelled series.
    #[arg(long, required = true, num_args = 1..)]
    metrics: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Failure split by exit code: 2 for usage and configuration, 1 otherwise.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<disentangle::Error> for Failure {
    fn from(e: disentangle::Error) -> Self {
        use disentangle::Error as E;
        match e {
            E::Config(_) | E::InfeasibleFolds(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl Failure {
    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::PretrainAge(a) => pretrain_age(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::JsdCurve(a) => jsd_curve_cmd(a),
        Command::PrintConfig(a) => print_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn create_out(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Runtime(format!("cannot create output directory {}: {e}", dir.display())))
}

/// Runs `body` between the initial and final manifest writes, recording
/// its outcome either way.
fn with_manifest(mut manifest: RunManifest, body: impl FnOnce(&mut RunManifest) -> CmdResult) -> CmdResult {
    manifest.write()?;
    let result = body(&mut manifest);
    let outcome = result.as_ref().map(|_| ()).map_err(|f| f.message().to_string());
    manifest.finish(outcome)?;
    result
}

fn gen_data(a: GenData) -> CmdResult {
    let eval_ids = a.eval_identities.unwrap_or(a.identities / 2);
    if eval_ids < FOLDS {
        return Err(Failure::Usage(format!(
            "infeasible folds: {eval_ids} eval identities cannot fill {FOLDS} identity-disjoint folds"
        )));
    }
    if a.identities < 2 {
        return Err(Failure::Usage(format!("need at least 2 training identities, got {}", a.identities)));
    }
    create_out(&a.out)?;
    let mut manifest = RunManifest::new("gen-data", &a.out);
    manifest.dataset_seed = Some(a.seed);
    with_manifest(manifest, |m| {
        let train_set = generate_split(a.seed, 0, a.identities, a.images_per_id)?;
        let eval_set = generate_split(a.seed, a.identities, eval_ids, a.images_per_id)?;
        let folds = build_folds(&eval_set, a.min_gap, a.pairs_per_fold, a.seed)?;
        for (name, set) in [(TRAIN_FILE, &train_set), (EVAL_FILE, &eval_set)] {
            let path = a.out.join(name);
            set.save(&path)?;
            m.file(name, &path)?;
        }
        let folds_path = a.out.join(FOLDS_FILE);
        folds.save(&folds_path)?;
        m.file(FOLDS_FILE, &folds_path)?;
        Ok(())
    })
}

fn dataset_path(data: &Path, file: &str) -> PathBuf {
    if data.is_dir() {
        data.join(file)
    } else {
        data.to_path_buf()
    }
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Resolves the mode override and insists on a source checkpoint for
/// pretrained mode before any work starts.
fn resolve_mode(
    config: &mut TrainConfig,
    mode: Option<AgeMode>,
    pretrained_age: Option<&Path>,
) -> Result<Option<Checkpoint>, Failure> {
    if let Some(m) = mode {
        config.mode = m;
    }
    match (config.mode, pretrained_age) {
        (AgeMode::Pretrained, None) => Err(Failure::Usage(
            "pretrained mode requires --pretrained-age <checkpoint> (see `pretrain-age`)".into(),
        )),
        (AgeMode::Pretrained, Some(p)) => load_checkpoint(p).map(Some),
        (AgeMode::Supervised, _) => Ok(None),
    }
}

fn record_common(m: &mut RunManifest, data_path: &Path, dataset: &Dataset, config: &TrainConfig) -> CmdResult {
    m.dataset_seed = Some(dataset.header.seed);
    m.file("data", data_path)?;
    std::fs::write(m.output_dir.join("config.toml"), config.to_toml()?)?;
    Ok(())
}

fn cmd_train(a: Train) -> CmdResult {
    let mut config = a.config.load()?;
    let source = resolve_mode(&mut config, a.mode, a.pretrained_age.as_deref())?;
    let data_path = dataset_path(&a.data, TRAIN_FILE);
    let dataset = load_dataset(&data_path)?;
    create_out(&a.out)?;
    let mut manifest = RunManifest::new("train", &a.out).with_config(&config);
    record_common(&mut manifest, &data_path, &dataset, &config)?;
    if let Some(p) = &a.pretrained_age {
        manifest.file("pretrained_age", p)?;
    }
    with_manifest(manifest, |_| {
        let quiet = a.quiet;
        let mut report = |row: &MetricsRow| {
            if !quiet && (row.jsd_probe.is_some() || row.step % 50 == 0) {
                let jsd = row.jsd_probe.map(|v| format!(" jsd {v:.4}")).unwrap_or_default();
                eprintln!("step {:>5} L_id {:.4} L_a {:.4}{jsd}", row.step, row.l_id, row.l_a);
            }
        };
        let opts = TrainOptions {
            pretrained_age: source.as_ref().map(|c| &c.params),
            progress: Some(&mut report),
            ..TrainOptions::default()
        };
        let out = train(&config, &dataset, opts)?;
        std::fs::write(a.out.join("metrics.csv"), metrics_csv(&out.metrics))?;
        out.checkpoint().save(&a.out.join("checkpoint.json"))?;
        Ok(())
    })
}

fn pretrain_age(a: PretrainAge) -> CmdResult {
    let config = a.config.load()?;
    let data_path = dataset_path(&a.data, TRAIN_FILE);
    let dataset = load_dataset(&data_path)?;
    create_out(&a.out)?;
    let mut manifest = RunManifest::new("pretrain-age", &a.out).with_config(&config);
    record_common(&mut manifest, &data_path, &dataset, &config)?;
    with_manifest(manifest, |_| {
        let (state, history) = pretrain_age_encoder(&config, &dataset)?;
        let mut csv = String::from("step,L_a\n");
        for (t, v) in history.iter().enumerate() {
            csv.push_str(&format!("{t},{v}\n"));
        }
        std::fs::write(a.out.join("age_loss.csv"), csv)?;
        Checkpoint::new(state.arch, state.params, config.hash()).save(&a.out.join("checkpoint.json"))?;
        Ok(())
    })
}

fn eval(a: Eval) -> CmdResult {
    let data_path = match &a.data {
        Some(p) => p.clone(),
        None => a.folds.parent().unwrap_or(Path::new(".")).join(EVAL_FILE),
    };
    let ck = load_checkpoint(&a.ckpt)?;
    let folds = PairFolds::load(&a.folds).map_err(|e| Failure::Runtime(format!("{}: {e}", a.folds.display())))?;
    let dataset = load_dataset(&data_path)?;
    create_out(&a.out)?;
    let mut manifest = RunManifest::new("eval", &a.out);
    manifest.dataset_seed = Some(dataset.header.seed);
    manifest.file("checkpoint", &a.ckpt)?;
    manifest.file("folds", &a.folds)?;
    manifest.file("data", &data_path)?;
    with_manifest(manifest, |_| {
        let report = cosine_verify(&folds, &ck.arch, &ck.params, &dataset)?;
        let r2 = age_leakage_probe(&ck.arch, &ck.params, &dataset)?;
        std::fs::write(a.out.join("verify_report.json"), serde_json::to_string_pretty(&report).map_err(disentangle::Error::from)?)?;
        let leakage = serde_json::json!({ "age_r2": r2 });
        std::fs::write(a.out.join("age_leakage.json"), leakage.to_string() + "\n")?;
        println!("accuracy {:.4} ± {:.4}  age R² {:.4}", report.mean_accuracy, report.std_accuracy, r2);
        Ok(())
    })
}

fn ablate(a: Ablate) -> CmdResult {
    let grid = parse_grid(&a.grid)?;
    let mut config = a.config.load()?;
    let source = resolve_mode(&mut config, a.mode, a.pretrained_age.as_deref())?;
    let train_path = a.data.join(TRAIN_FILE);
    let eval_path = a.data.join(EVAL_FILE);
    let folds_path = a.data.join(FOLDS_FILE);
    let train_set = load_dataset(&train_path)?;
    let eval_set = load_dataset(&eval_path)?;
    let folds = PairFolds::load(&folds_path).map_err(|e| Failure::Runtime(format!("{}: {e}", folds_path.display())))?;
    create_out(&a.out)?;
    let mut manifest = RunManifest::new("ablate", &a.out).with_config(&config);
    record_common(&mut manifest, &train_path, &train_set, &config)?;
    manifest.file("eval", &eval_path)?;
    manifest.file("folds", &folds_path)?;
    with_manifest(manifest, |_| {
        let mut write_err = None;
        let result = run_ablation(
            &config,
            &grid,
            &train_set,
            &eval_set,
            &folds,
            source.as_ref().map(|c| &c.params),
            |row, out| {
                match &row.outcome {
                    Ok(r) => eprintln!(
                        "lambda_w {}: accuracy {:.4} age R² {:.4}",
                        row.lambda_w, r.report.mean_accuracy, r.age_r2
                    ),
                    Err(e) => eprintln!("lambda_w {}: failed: {e}", row.lambda_w),
                }
                if let Some(out) = out {
                    let path = a.out.join(format!("metrics_lw{}.csv", row.lambda_w));
                    if let Err(e) = std::fs::write(&path, metrics_csv(&out.metrics)) {
                        write_err.get_or_insert(e);
                    }
                }
            },
        )?;
        if let Some(e) = write_err {
            return Err(e.into());
        }
        result.write(&a.out)?;
        Ok(())
    })
}

fn jsd_curve_cmd(a: JsdCurveArgs) -> CmdResult {
    let mut labelled = Vec::with_capacity(a.metrics.len());
    for path in &a.metrics {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        let series = jsd_curve(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        let label = path
            .parent()
            .and_then(Path::file_name)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        labelled.push((label, series));
    }
    create_out(&a.out)?;
    for (i, (label, series)) in labelled.iter().enumerate() {
        let name = if labelled.len() == 1 { "jsd_curve.csv".to_string() } else { format!("jsd_curve_{i}.csv") };
        std::fs::write(a.out.join(&name), curve_csv(series))?;
        eprintln!("{name}: {label}");
    }
    let refs: Vec<(&str, &[(usize, f64)])> = labelled.iter().map(|(l, s)| (l.as_str(), s.as_slice())).collect();
    std::fs::write(a.out.join("jsd_curve.svg"), curve_svg(&refs))?;
    Ok(())
}

fn print_config(a: ConfigArgs) -> CmdResult {
    print!("{}", a.load()?.to_toml()?);
    Ok(())
}
