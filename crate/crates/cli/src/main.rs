//! Command-line entry point: reproducible training, evaluation, ablation
//! grids, gradient checking and synthetic-corpus generation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mans_core::config::{parse_synth_spec, ExperimentConfig, Variant};
use mans_core::data::{
    load_corpus_grids, synth_generate, synth_sequences, GridSample, SynthSpec,
};
use mans_core::model::{
    batch_from_grids, evaluate, gradcheck_model, train_epochs, MansModel, SgdState, TrainError,
};
use mans_core::stcm::Depth;

#[derive(Parser)]
#[command(
    name = "mans",
    version,
    about = "Memory attention networks for skeleton-based action recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, checkpoints and manifest.txt.
    Train {
        /// Flat `key = value` config file (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for manifest, metrics and checkpoints.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (falls back to MANS_THREADS, then all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// key=value config overrides, highest precedence.
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a corpus; prints accuracy, writes the
    /// confusion matrix CSV next to the checkpoint (or under --out).
    Eval {
        checkpoint: PathBuf,
        /// `synthetic` or a corpus directory.
        corpus: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Trains the variant grid {stcm_only, no_attention, full} and the
    /// alpha sweep {4, 8, 16, 32} on one shared data split.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
        /// Base seed; cells use seed, seed+1, ...
        #[arg(long)]
        seed: Option<u64>,
        /// Number of seeds per cell.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        threads: Option<usize>,
        overrides: Vec<String>,
    },
    /// Finite-difference audit of every parameter group on a reduced
    /// float64 model; nonzero exit on any failure.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Generates a .skl corpus (plus corpus.tsv manifest) from a spec file.
    Synth {
        /// Flat spec file; the built-in default spec applies when omitted.
        spec: Option<PathBuf>,
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
    },
}

/// Failures mapped to the documented exit codes: 1 usage/config, 2 data,
/// 3 numerical.
enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => write!(f, "{m}"),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numerical { .. } => CliError::Numerical(e.to_string()),
            TrainError::Data(_) | TrainError::Checkpoint(_) => CliError::Data(e.to_string()),
            TrainError::Tensor(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<mans_core::data::DataError> for CliError {
    fn from(e: mans_core::data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<mans_core::config::ConfigError> for CliError {
    fn from(e: mans_core::config::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, everything else is
            // a usage error (exit 1).
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn init_threads(flag: Option<usize>) -> usize {
    let requested = flag.or_else(|| {
        std::env::var("MANS_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = requested {
        // Ignore the error when a pool already exists (tests call twice).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    rayon::current_num_threads()
}

fn load_config(
    path: &Option<PathBuf>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<ExperimentConfig, CliError> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    config.apply_overrides(overrides)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn load_grids(config: &ExperimentConfig) -> Result<(Vec<GridSample>, Vec<GridSample>), CliError> {
    if config.data == "synthetic" {
        Ok(synth_generate(&SynthSpec::default(), config.t, config.n)?)
    } else {
        Ok(load_corpus_grids(
            Path::new(&config.data),
            config.t,
            config.n,
        )?)
    }
}

/// FNV-1a over the resampled grids; identical streams give identical
/// hashes, so ablation cells can prove they trained on the same split.
fn split_hash(train: &[GridSample], test: &[GridSample]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    for (split, samples) in [(0u8, train), (1u8, test)] {
        eat(&[split]);
        for g in samples {
            eat(&g.label.to_le_bytes());
            for plane in &g.planes {
                for v in plane.data() {
                    eat(&v.to_le_bytes());
                }
            }
        }
    }
    hash
}

fn write_manifest(
    dir: &Path,
    config: &ExperimentConfig,
    threads: usize,
    split: u64,
) -> Result<(), CliError> {
    let manifest = format!(
        "# mans run manifest\n\
         # version = {}\n\
         # threads = {threads}\n\
         # split_hash = {split:016x}\n\
         # layout: manifest.txt metrics.csv best.mans last.mans\n\
         {}",
        env!("CARGO_PKG_VERSION"),
        config.to_flat_text()
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn cmd_train(
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    threads: Option<usize>,
    overrides: Vec<String>,
) -> Result<(), CliError> {
    let threads = init_threads(threads);
    let config = load_config(&config, &overrides, seed)?;
    let (train, test) = load_grids(&config)?;
    fs::create_dir_all(&out)?;
    write_manifest(&out, &config, threads, split_hash(&train, &test))?;

    let mut model = MansModel::<f32>::init(&config);
    let mut sgd = SgdState::new();
    let metrics_path = out.join("metrics.csv");
    fs::write(&metrics_path, "epoch,split,loss,accuracy\n")?;
    let mut metrics_file = fs::OpenOptions::new().append(true).open(&metrics_path)?;

    let best_path = out.join("best.mans");
    let last_path = out.join("last.mans");
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut epoch_err: Option<TrainError> = None;
    let history = train_epochs(
        &mut model,
        &mut sgd,
        &train,
        &test,
        config.epochs,
        |m, model| {
            use std::io::Write;
            let rows = format!(
                "{},train,{},{}\n{},test,{},{}\n",
                m.epoch, m.train_loss, m.train_accuracy, m.epoch, m.test_loss, m.test_accuracy
            );
            let result = metrics_file
                .write_all(rows.as_bytes())
                .map_err(|e| TrainError::Data(e.into()))
                .and_then(|()| model.save(&last_path))
                .and_then(|()| {
                    if m.test_accuracy > best_acc {
                        best_acc = m.test_accuracy;
                        best_epoch = m.epoch;
                        model.save(&best_path)
                    } else {
                        Ok(())
                    }
                });
            match result {
                Ok(()) => true,
                Err(e) => {
                    epoch_err = Some(e);
                    false
                }
            }
        },
    )?;
    if let Some(e) = epoch_err {
        return Err(e.into());
    }

    let final_acc = history.last().map(|m| m.test_accuracy).unwrap_or(0.0);
    println!("final test accuracy: {final_acc}");
    println!("best test accuracy: {best_acc} (epoch {best_epoch})");
    Ok(())
}

fn cmd_eval(
    checkpoint: PathBuf,
    corpus: String,
    out: Option<PathBuf>,
    threads: Option<usize>,
) -> Result<(), CliError> {
    init_threads(threads);
    let run_dir = checkpoint
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = run_dir.join("manifest.txt");
    if !manifest.exists() {
        return Err(CliError::Data(format!(
            "no manifest.txt next to checkpoint {} (needed for the architecture)",
            checkpoint.display()
        )));
    }
    let config = ExperimentConfig::load(&manifest)?;
    let mut model = MansModel::<f32>::init(&config);
    model.load_into(&checkpoint)?;

    let test = if corpus == "synthetic" {
        synth_generate(&SynthSpec::default(), config.t, config.n)?.1
    } else {
        load_corpus_grids(Path::new(&corpus), config.t, config.n)?.1
    };
    let result = evaluate(&mut model, &test)?;
    println!("accuracy: {}", result.accuracy);

    let out_dir = out.unwrap_or(run_dir);
    fs::create_dir_all(&out_dir)?;
    let mut csv = String::from("true_class,predicted_class,count\n");
    for (t, row) in result.confusion.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            csv.push_str(&format!("{t},{p},{count}\n"));
        }
    }
    fs::write(out_dir.join("confusion.csv"), csv)?;
    Ok(())
}

fn cmd_ablate(
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    seeds: usize,
    threads: Option<usize>,
    overrides: Vec<String>,
) -> Result<(), CliError> {
    init_threads(threads);
    let base = load_config(&config, &overrides, seed)?;
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let (train, test) = load_grids(&base)?;
    let split = split_hash(&train, &test);
    fs::create_dir_all(&out)?;

    let mut rows = String::from("kind,name,seed,split_hash,accuracy\n");
    let mut summaries: Vec<(String, Vec<f64>)> = Vec::new();
    let mut run_cell = |kind: &str,
                        name: &str,
                        config: &ExperimentConfig,
                        accs: &mut Vec<f64>|
     -> Result<(), CliError> {
        for s in 0..seeds {
            let mut cfg = config.clone();
            cfg.seed = base.seed + s as u64;
            let mut model = MansModel::<f32>::init(&cfg);
            let mut sgd = SgdState::new();
            let history = train_epochs(&mut model, &mut sgd, &train, &test, cfg.epochs, |_, _| true)?;
            let acc = history.last().map(|m| m.test_accuracy).unwrap_or(0.0);
            rows.push_str(&format!(
                "{kind},{name},{},{split:016x},{acc}\n",
                cfg.seed
            ));
            accs.push(acc);
        }
        Ok(())
    };

    for variant in [Variant::StcmOnly, Variant::NoAttention, Variant::Full] {
        let mut cfg = base.clone();
        cfg.variant = variant;
        let mut accs = Vec::new();
        run_cell("variant", variant.name(), &cfg, &mut accs)?;
        summaries.push((format!("variant/{}", variant.name()), accs));
    }
    for alpha in [4usize, 8, 16, 32] {
        let mut cfg = base.clone();
        cfg.variant = Variant::Full;
        cfg.alpha = alpha;
        cfg.validate()?;
        let mut accs = Vec::new();
        run_cell("alpha", &alpha.to_string(), &cfg, &mut accs)?;
        summaries.push((format!("alpha/{alpha}"), accs));
    }

    fs::write(out.join("ablation.csv"), &rows)?;
    let mut summary = String::from("cell,mean,std\n");
    for (name, accs) in &summaries {
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
        summary.push_str(&format!("{name},{mean},{}\n", var.sqrt()));
        println!("{name}: mean {mean:.4} +/- {:.4}", var.sqrt());
    }
    fs::write(out.join("summary.csv"), summary)?;
    Ok(())
}

fn cmd_gradcheck(tolerance: f64, threads: Option<usize>) -> Result<(), CliError> {
    init_threads(threads);
    let config = ExperimentConfig {
        t: 10,
        n: 10,
        k: 4,
        alpha: 2,
        depth: Depth::Mans9Reduced,
        batch_size: 1,
        seed: 12345,
        ..ExperimentConfig::default()
    };
    let spec = SynthSpec {
        samples_per_class: 2,
        frames_min: 12,
        frames_max: 16,
        joints: 6,
        ..SynthSpec::default()
    };
    let (train, _) = synth_generate(&spec, config.t, config.n)?;
    let refs = vec![&train[0]];
    let batch = batch_from_grids::<f64>(&refs);
    let mut model = MansModel::<f64>::init(&config);
    let report = gradcheck_model(&mut model, &batch, &[train[0].label], tolerance)?;
    for group in &report.groups {
        let status = if group.max_rel_err < tolerance {
            "PASS"
        } else {
            "FAIL"
        };
        println!("{status} {:<24} max rel err {:.3e}", group.name, group.max_rel_err);
    }
    if report.passed() {
        println!("gradcheck passed ({} groups)", report.groups.len());
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradcheck failed for {} of {} groups",
            report.failing().len(),
            report.groups.len()
        )))
    }
}

fn cmd_synth(spec: Option<PathBuf>, out: PathBuf) -> Result<(), CliError> {
    let spec = match spec {
        Some(path) => parse_synth_spec(&fs::read_to_string(&path)?)?,
        None => SynthSpec::default(),
    };
    let sequences = synth_sequences(&spec)?;
    let train_per_class = spec.samples_per_class * 4 / 5;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, seq) in sequences.into_iter().enumerate() {
        if i % spec.samples_per_class < train_per_class {
            train.push(seq);
        } else {
            test.push(seq);
        }
    }
    mans_core::data::write_corpus(&out, &train, &test)?;
    println!(
        "wrote {} train and {} test sequences to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            threads,
            overrides,
        } => cmd_train(config, out, seed, threads, overrides),
        Command::Eval {
            checkpoint,
            corpus,
            out,
            threads,
        } => cmd_eval(checkpoint, corpus, out, threads),
        Command::Ablate {
            config,
            out,
            seed,
            seeds,
            threads,
            overrides,
        } => cmd_ablate(config, out, seed, seeds, threads, overrides),
        Command::Gradcheck { tolerance, threads } => cmd_gradcheck(tolerance, threads),
        Command::Synth { spec, out } => cmd_synth(spec, out),
    }
}
