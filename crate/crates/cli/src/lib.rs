//! Command-line driver: dataset generation, multi-seed training runs and
//! run comparison.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use finessl::config::{config_snapshot, read_config};
use finessl::embedstore::{
    encode_emb1, gen_blobs, longtail_counts, read_emb1, read_truth, truth_path, write_truth, BlobsConfig,
};
use finessl::model::write_checkpoint;
use finessl::numkit::{mean_std, streams, RandomStream};
use finessl::trainer::{run_training, RunReport, TrainConfig, TrainInputs, TrainOutcome};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;

const MANIFEST_FILE: &str = "manifest.json";

/// A failure carrying its exit code and a short machine-readable kind.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            kind: "io",
            message: format!("{}: {e}", path.display()),
        }
    }

    /// `error kind=<kind> code=<n> message="<json string>"`
    pub fn line(&self) -> String {
        format!(
            "error kind={} code={} message={}",
            self.kind,
            self.code,
            serde_json::to_string(&self.message).unwrap_or_else(|_| "\"\"".into())
        )
    }
}

impl From<finessl::Error> for CliError {
    fn from(e: finessl::Error) -> Self {
        use finessl::Error as E;
        let (code, kind) = match &e {
            E::Usage(_) => (EXIT_USAGE, "usage"),
            E::Config(_) => (EXIT_USAGE, "config"),
            E::Parse { .. } => (EXIT_IO, "parse"),
            E::Io { .. } => (EXIT_IO, "io"),
            E::NonFinite { .. } => (EXIT_NON_FINITE, "non_finite"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "finessl", version, about = "Semi-supervised training of linear heads over frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic EMB1 dataset.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Train one run per seed and write reports, checkpoints and a manifest.
    Train(TrainArgs),
    /// Tabulate final metrics of several manifests as CSV.
    Compare(CompareArgs),
}

#[derive(Subcommand, Debug)]
enum GenCommand {
    /// Balanced Gaussian blobs.
    Blobs(BlobsArgs),
    /// Gaussian blobs with exponentially decaying class counts.
    Longtail(LongtailArgs),
}

#[derive(Args, Debug)]
struct CommonGen {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Minimum distance between class means, in noise standard deviations.
    #[arg(long, default_value_t = 4.0)]
    sep: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    /// Number of out-of-distribution unlabeled samples.
    #[arg(long, default_value_t = 0)]
    ood: usize,
    /// Multiply the noise of the first `bias_classes` classes by `bias_factor`.
    #[arg(long, default_value_t = 0)]
    bias_classes: usize,
    #[arg(long, default_value_t = 3.0)]
    bias_factor: f64,
    /// Held-out samples per class, written to `--test-out`.
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BlobsArgs {
    /// Labeled samples per class.
    #[arg(long)]
    labeled: usize,
    /// Unlabeled samples per class.
    #[arg(long)]
    unlabeled: usize,
    #[command(flatten)]
    common: CommonGen,
}

#[derive(Args, Debug)]
struct LongtailArgs {
    /// Labeled samples of the most frequent class.
    #[arg(long)]
    n1: usize,
    /// Unlabeled samples of the most frequent class.
    #[arg(long)]
    m1: usize,
    /// Labeled imbalance ratio.
    #[arg(long)]
    rho: f64,
    /// Unlabeled imbalance ratio; defaults to `--rho`.
    #[arg(long)]
    rho_u: Option<f64>,
    #[command(flatten)]
    common: CommonGen,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Comma-separated seeds; defaults to the config's seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing output directory.
    #[arg(long)]
    force: bool,
    /// Run seeds on separate threads.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Manifests to compare (at least two).
    manifests: Vec<PathBuf>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Identity of an input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    /// Paths relative to the manifest's directory.
    pub report: String,
    pub checkpoint: String,
    pub final_test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub strategy: String,
    /// Effective configuration; parsing it reproduces the runs.
    pub config: String,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    pub data: DataRef,
    pub test: Option<DataRef>,
    pub runs: Vec<RunEntry>,
}

impl RunManifest {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError {
            code: EXIT_IO,
            kind: "parse",
            message: format!("{}: {e}", path.display()),
        })
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; failures also print one `error ...` line on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("FINESSL_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::usage(first).line());
            return EXIT_USAGE;
        }
    };
    let result = match cli.command {
        Command::Gen(GenCommand::Blobs(a)) => cmd_gen_blobs(&a),
        Command::Gen(GenCommand::Longtail(a)) => cmd_gen_longtail(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Compare(a) => cmd_compare(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            log::debug!("{}", e.message);
            eprintln!("{}", e.line());
            e.code
        }
    }
}

fn blobs_config(common: &CommonGen, labeled: Vec<usize>, unlabeled: Vec<usize>) -> CliResult<BlobsConfig> {
    if common.bias_classes > common.classes {
        return Err(CliError::usage("--bias-classes exceeds --classes"));
    }
    let bias_profile = (common.bias_classes > 0).then(|| {
        (0..common.classes)
            .map(|k| if k < common.bias_classes { common.bias_factor } else { 1.0 })
            .collect()
    });
    Ok(BlobsConfig {
        classes: common.classes,
        dim: common.dim,
        labeled,
        unlabeled,
        test_per_class: common.test_per_class,
        class_sep: common.sep,
        noise_sd: common.noise_sd,
        bias_profile,
        n_ood: common.ood,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn generate(common: &CommonGen, cfg: &BlobsConfig) -> CliResult<()> {
    let split = gen_blobs(cfg, &mut RandomStream::new(common.seed, streams::DATA_GEN))?;
    split.train.validate_ssl()?;
    write_bytes(&common.out, &encode_emb1(&split.train)?)?;
    write_truth(&split.truth, truth_path(&common.out))?;
    if let Some(t) = &common.test_out {
        write_bytes(t, &encode_emb1(&split.test)?)?;
    }
    log::info!(
        "wrote {} rows ({} labeled) to {}",
        split.train.len(),
        split.train.labeled_indices().len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_gen_blobs(a: &BlobsArgs) -> CliResult<()> {
    let c = a.common.classes;
    let cfg = blobs_config(&a.common, vec![a.labeled; c], vec![a.unlabeled; c])?;
    generate(&a.common, &cfg)
}

fn cmd_gen_longtail(a: &LongtailArgs) -> CliResult<()> {
    let c = a.common.classes;
    if a.n1 == 0 {
        return Err(finessl::Error::Config("SSL requires labeled samples".into()).into());
    }
    if a.m1 == 0 {
        return Err(CliError::usage("--m1 must be ≥ 1"));
    }
    if c < 2 || !(a.rho >= 1.0) || a.rho_u.is_some_and(|r| !(r >= 1.0)) {
        return Err(CliError::usage("longtail needs --classes ≥ 2 and ratios ≥ 1"));
    }
    let labeled = longtail_counts(a.n1, c, a.rho)?;
    let unlabeled = longtail_counts(a.m1, c, a.rho_u.unwrap_or(a.rho))?;
    let cfg = blobs_config(&a.common, labeled, unlabeled)?;
    generate(&a.common, &cfg)
}

fn data_ref(path: &Path) -> CliResult<DataRef> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(DataRef {
        path: path.display().to_string(),
        sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

fn prepare_out_dir(out: &Path, force: bool) -> CliResult<()> {
    if out.exists() {
        let occupied = fs::read_dir(out).map_err(|e| CliError::io(out, e))?.next().is_some();
        if occupied && !force {
            return Err(CliError::usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let base = read_config(&a.config)?;
    let train = read_emb1(&a.data)?;
    let test = a.test.as_deref().map(read_emb1).transpose()?;
    let tp = truth_path(&a.data);
    let truth = if tp.exists() { Some(read_truth(&tp)?) } else { None };
    let seeds = if a.seeds.is_empty() { vec![base.seed] } else { a.seeds.clone() };
    prepare_out_dir(&a.out, a.force)?;

    let run_seed = |seed: u64| -> finessl::Result<TrainOutcome> {
        let cfg = TrainConfig { seed, ..base.clone() };
        log::info!("seed {seed}: {} for {} epochs", cfg.strategy, cfg.epochs);
        run_training(
            TrainInputs {
                train: &train,
                test: test.as_ref(),
                truth: truth.as_deref(),
            },
            &cfg,
        )
    };
    let outcomes: Vec<finessl::Result<TrainOutcome>> = if a.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || run_seed(seed))).collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        })
    } else {
        seeds.iter().map(|&seed| run_seed(seed)).collect()
    };

    let mut runs = Vec::with_capacity(seeds.len());
    let mut strategy = base.strategy.to_string();
    for (&seed, outcome) in seeds.iter().zip(outcomes) {
        let outcome = outcome?;
        strategy = outcome.report.strategy.clone();
        let report = format!("seed-{seed}.jsonl");
        let checkpoint = format!("seed-{seed}.hds1");
        write_bytes(&a.out.join(&report), outcome.report.to_jsonl().as_bytes())?;
        write_checkpoint(&outcome.heads, a.out.join(&checkpoint))?;
        runs.push(RunEntry {
            seed,
            report,
            checkpoint,
            final_test_acc: outcome.report.last().and_then(|r| r.test_acc),
        });
    }
    let manifest = RunManifest {
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        strategy,
        config: config_snapshot(&base),
        seeds: seeds.clone(),
        out_dir: a.out.display().to_string(),
        data: data_ref(&a.data)?,
        test: a.test.as_deref().map(data_ref).transpose()?,
        runs,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_bytes(&a.out.join(MANIFEST_FILE), json.as_bytes())?;

    let accs: Vec<f64> = manifest.runs.iter().filter_map(|r| r.final_test_acc).collect();
    if accs.len() == manifest.runs.len() && !accs.is_empty() {
        let (m, s) = mean_std(&accs);
        println!("test_acc {m:.4} ± {s:.4} over {} seed(s)", accs.len());
    } else {
        println!("trained {} seed(s); no test split attached", manifest.runs.len());
    }
    Ok(())
}

/// Final-epoch metrics of every run of a manifest.
fn final_records(manifest_path: &Path, m: &RunManifest) -> CliResult<Vec<finessl::trainer::EpochRecord>> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    m.runs
        .iter()
        .map(|r| {
            let p = dir.join(&r.report);
            let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
            let report = RunReport::from_jsonl(&text)?;
            report.last().cloned().ok_or_else(|| CliError {
                code: EXIT_IO,
                kind: "parse",
                message: format!("{} has no records", p.display()),
            })
        })
        .collect()
}

fn fmt_stat(xs: &[Option<f64>]) -> String {
    let vals: Vec<f64> = xs.iter().flatten().copied().collect();
    if vals.len() != xs.len() || vals.is_empty() {
        return ",".to_string();
    }
    let (m, s) = mean_std(&vals);
    format!("{m},{s}")
}

fn cmd_compare(a: &CompareArgs) -> CliResult<()> {
    if a.manifests.len() < 2 {
        return Err(CliError::usage("compare needs at least two manifests"));
    }
    let manifests: Vec<RunManifest> = a.manifests.iter().map(|p| RunManifest::read(p)).collect::<CliResult<_>>()?;
    let first = &manifests[0];
    for (p, m) in a.manifests.iter().zip(&manifests).skip(1) {
        let same_test = m.test.as_ref().map(|t| &t.sha256) == first.test.as_ref().map(|t| &t.sha256);
        if m.data.sha256 != first.data.sha256 || !same_test {
            return Err(CliError {
                code: EXIT_USAGE,
                kind: "mismatch",
                message: format!(
                    "{} was trained on {} but {} on {}",
                    p.display(),
                    m.data.path,
                    a.manifests[0].display(),
                    first.data.path
                ),
            });
        }
    }
    let mut csv = String::from("strategy,seeds,acc_mean,acc_std,pl_entropy_mean,pl_entropy_std,ece_mean,ece_std\n");
    for (p, m) in a.manifests.iter().zip(&manifests) {
        let recs = final_records(p, m)?;
        let col = |f: fn(&finessl::trainer::EpochRecord) -> Option<f64>| fmt_stat(&recs.iter().map(f).collect::<Vec<_>>());
        csv.push_str(&format!(
            "\"{}\",{},{},{},{}\n",
            m.strategy,
            recs.len(),
            col(|r| r.test_acc),
            col(|r| r.pl_entropy),
            col(|r| r.ece)
        ));
    }
    match &a.out {
        Some(p) => write_bytes(p, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
