//! `gdtc`: data preparation, training, evaluation, and the four experiment
//! protocols, each run leaving a manifest that can reproduce it.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use clap::{Args, Parser, Subcommand};
use gdtc_core::checkpoint;
use gdtc_core::config::Config;
use gdtc_core::data::{self, Dataset, Vocabulary};
use gdtc_core::error::{Error, Result};
use gdtc_core::experiments::{
    self, run_continual, run_curve_cell, run_shift, run_zero_shot, CurveCell, FittedModel,
    ModelKind,
};
use gdtc_core::manifest::{self, RunManifest};
use gdtc_core::synth::{self, AnalogSpec};
use gdtc_core::train::select_learning_rate;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "gdtc",
    version,
    about = "Generative vs discriminative LSTM text classifiers and count baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flat key=value configuration: optional preset, optional file, then
/// individual overrides, applied in that order.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration preset: fixture | agnews-small
    #[arg(long)]
    preset: Option<String>,
    /// Flat key=value configuration file (# starts a comment)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, repeatable: --set key=value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<Config> {
        let mut cfg = match &self.preset {
            Some(name) => Config::preset(name)?,
            None => Config::default(),
        };
        if let Some(path) = &self.config {
            cfg.apply_kv_file(path)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArg(format!("--set expects key=value, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.opt.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from training text and encode all splits.
    Prepare {
        /// Training CSV ("class","title","body"; 1-indexed classes)
        #[arg(long)]
        train: PathBuf,
        /// Test CSV in the same format
        #[arg(long)]
        test: PathBuf,
        /// Dev CSV; without it, n_dev rows are held out of train
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Class names: a comma-separated list or a file with one name
        /// per line (defaults to class1,class2,...)
        #[arg(long)]
        classes: Option<String>,
        /// Parent directory for the run directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model on a prepared dataset.
    Train {
        /// disc | gen-shared | gen-indep | naive-bayes/nb | kneser-ney/kn | mlp-naive-bayes/mlp-nb
        #[arg(long)]
        model: String,
        /// Prepared data directory (from `prepare` or `synth` + `prepare`)
        #[arg(long)]
        data: PathBuf,
        /// Parent directory for the run directory
        #[arg(long)]
        out: PathBuf,
        /// Select the learning rate from the configured grid by dev accuracy
        #[arg(long)]
        grid: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on one split of a prepared dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train | dev | test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run one of the comparison protocols.
    Experiment {
        #[command(subcommand)]
        what: Experiment,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck,
    /// Generate a seeded synthetic news-style corpus as CSVs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 1000)]
        train_per_class: usize,
        #[arg(long, default_value_t = 125)]
        dev_per_class: usize,
        #[arg(long, default_value_t = 250)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probability a token comes from the class pool (lower = harder)
        #[arg(long, default_value_t = 0.5)]
        class_word_prob: f64,
        /// Size of the shared common-word pool
        #[arg(long, default_value_t = 60)]
        common_words: usize,
        /// hidden,parent_a,parent_b: hidden class draws keywords from both parents
        #[arg(long)]
        blend: Option<String>,
        /// Also write label vectors (one per class name) of this dimension
        #[arg(long)]
        label_dim: Option<usize>,
    },
}

#[derive(Subcommand)]
enum Experiment {
    /// Test accuracy at several training-set sizes, repeated over seeds.
    Curve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated model kinds
        #[arg(
            long,
            default_value = "disc,gen-shared,gen-indep,naive-bayes,kneser-ney,mlp-naive-bayes"
        )]
        models: String,
        /// Independent (size, seed, model) cells run on this many threads
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Introduce one class at a time and evaluate after each phase.
    Continual {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// disc | gen-shared | gen-indep
        #[arg(long)]
        model: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Hold classes out of training and classify them via fixed label vectors.
    Zeroshot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// disc | gen-shared
        #[arg(long)]
        model: String,
        /// Comma-separated hidden class indices (0-based)
        #[arg(long)]
        hidden: String,
        /// Word-vector file: token then space-separated decimals per line
        #[arg(long)]
        vectors: PathBuf,
        /// Comma-separated label word per class; defaults to resolving
        /// the dataset's class names through --label-map
        #[arg(long)]
        label_words: Option<String>,
        /// class-name<TAB>word table for multi-word class names
        #[arg(long)]
        label_map: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on all but one class and compare marginal likelihoods.
    Shift {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Class (0-based) excluded from training
        #[arg(long)]
        hold_out: usize,
        /// Histogram bin count for the plot data
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        let code = match e {
            Error::InvalidArg(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare {
            train,
            test,
            dev,
            classes,
            out,
            cfg,
        } => cmd_prepare(&train, &test, dev.as_deref(), classes.as_deref(), &out, &cfg),
        Command::Train {
            model,
            data,
            out,
            grid,
            cfg,
        } => cmd_train(&model, &data, &out, grid, &cfg),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => cmd_eval(&checkpoint, &data, &split),
        Command::Experiment { what } => match what {
            Experiment::Curve {
                data,
                out,
                models,
                workers,
                cfg,
            } => cmd_curve(&data, &out, &models, workers, &cfg),
            Experiment::Continual {
                data,
                out,
                model,
                cfg,
            } => cmd_continual(&data, &out, &model, &cfg),
            Experiment::Zeroshot {
                data,
                out,
                model,
                hidden,
                vectors,
                label_words,
                label_map,
                cfg,
            } => cmd_zeroshot(
                &data,
                &out,
                &model,
                &hidden,
                &vectors,
                label_words.as_deref(),
                label_map.as_deref(),
                &cfg,
            ),
            Experiment::Shift {
                data,
                out,
                hold_out,
                bins,
                cfg,
            } => cmd_shift(&data, &out, hold_out, bins, &cfg),
        },
        Command::Gradcheck => cmd_gradcheck(),
        Command::Synth {
            out,
            classes,
            train_per_class,
            dev_per_class,
            test_per_class,
            seed,
            class_word_prob,
            common_words,
            blend,
            label_dim,
        } => cmd_synth(
            &out,
            classes,
            train_per_class,
            dev_per_class,
            test_per_class,
            seed,
            class_word_prob,
            common_words,
            blend.as_deref(),
            label_dim,
        ),
    }
}

// ---------------------------------------------------------------------------
// Run-directory and manifest plumbing
// ---------------------------------------------------------------------------

/// Create `<out>/<timestamp>-<hash8>/` where the hash covers the exact
/// command line and the timestamp.
fn make_run_dir(out: &Path) -> Result<PathBuf> {
    let started = manifest::timestamp();
    let mut h = Sha256::new();
    h.update(started.as_bytes());
    for arg in std::env::args() {
        h.update(arg.as_bytes());
        h.update(b"\0");
    }
    let digest = format!("{:x}", h.finalize());
    let dir = out.join(format!("{}-{}", started.replace('.', ""), &digest[..8]));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_manifest(
    dir: &Path,
    cfg: &Config,
    dataset_hashes: BTreeMap<String, String>,
    vocab_hash: String,
    started_at: String,
) -> Result<()> {
    RunManifest {
        command: std::env::args().collect(),
        config: cfg.to_map(),
        seed: cfg.opt.seed,
        dataset_hashes,
        vocab_hash,
        code_version: manifest::code_version(),
        started_at,
        finished_at: manifest::timestamp(),
    }
    .save(&dir.join("manifest.json"))
}

fn write_ndjson<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        let line =
            serde_json::to_string(row).map_err(|e| Error::Format(format!("ndjson: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Prepared-data directory layout
// ---------------------------------------------------------------------------

struct Prepared {
    vocab: Vocabulary,
    train: Dataset,
    dev: Dataset,
    test: Dataset,
    class_names: Vec<String>,
}

fn load_prepared(dir: &Path) -> Result<Prepared> {
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let train = data::load_encoded(&dir.join("train.enc"))?;
    let dev = data::load_encoded(&dir.join("dev.enc"))?;
    let test = data::load_encoded(&dir.join("test.enc"))?;
    let classes_path = dir.join("classes.txt");
    let class_names: Vec<String> = if classes_path.exists() {
        std::fs::read_to_string(&classes_path)?
            .lines()
            .map(|l| l.to_string())
            .collect()
    } else {
        (1..=train.num_classes).map(|i| format!("class{i}")).collect()
    };
    if class_names.len() != train.num_classes {
        return Err(Error::Format(format!(
            "classes.txt lists {} names but the data has {} classes",
            class_names.len(),
            train.num_classes
        )));
    }
    Ok(Prepared {
        vocab,
        train,
        dev,
        test,
        class_names,
    })
}

fn prepared_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut hashes = BTreeMap::new();
    for name in ["vocab.txt", "train.enc", "dev.enc", "test.enc"] {
        hashes.insert(name.to_string(), manifest::file_hash(&dir.join(name))?);
    }
    Ok(hashes)
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

fn cmd_prepare(
    train_csv: &Path,
    test_csv: &Path,
    dev_csv: Option<&Path>,
    classes: Option<&str>,
    out: &Path,
    cfg_args: &ConfigArgs,
) -> Result<()> {
    let started = manifest::timestamp();
    let cfg = cfg_args.build()?;
    let train_raw = data::load_csv(train_csv)?;
    let test_raw = data::load_csv(test_csv)?;
    let (train_raw, dev_raw) = match dev_csv {
        Some(p) => (train_raw, data::load_csv(p)?),
        None => data::hold_out_dev_raw(&train_raw, cfg.n_dev.min(train_raw.len() / 10), cfg.opt.seed)?,
    };
    let max_label = train_raw
        .iter()
        .chain(&dev_raw)
        .chain(&test_raw)
        .map(|e| e.label)
        .max()
        .unwrap_or(0);
    let class_names: Vec<String> = match classes {
        Some(s) if Path::new(s).is_file() => std::fs::read_to_string(s)?
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect(),
        Some(s) => s.split(',').map(|c| c.trim().to_string()).collect(),
        None => (1..=max_label + 1).map(|i| format!("class{i}")).collect(),
    };
    if class_names.len() <= max_label {
        return Err(Error::InvalidArg(format!(
            "{} class names given but labels go up to {}",
            class_names.len(),
            max_label + 1
        )));
    }
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".to_string());
    let prep = synth::prepare(
        &train_raw,
        &dev_raw,
        &test_raw,
        class_names.len(),
        cfg.max_vocab,
        cfg.min_count,
        &name,
        class_names,
    )?;

    let dir = make_run_dir(out)?;
    prep.vocab.save(&dir.join("vocab.txt"))?;
    data::save_encoded(&prep.train, &dir.join("train.enc"))?;
    data::save_encoded(&prep.dev, &dir.join("dev.enc"))?;
    data::save_encoded(&prep.test, &dir.join("test.enc"))?;
    std::fs::write(dir.join("classes.txt"), prep.class_names.join("\n") + "\n")?;

    let mut hashes = BTreeMap::new();
    hashes.insert("train.csv".to_string(), manifest::file_hash(train_csv)?);
    hashes.insert("test.csv".to_string(), manifest::file_hash(test_csv)?);
    if let Some(p) = dev_csv {
        hashes.insert("dev.csv".to_string(), manifest::file_hash(p)?);
    }
    write_manifest(&dir, &cfg, hashes, prep.vocab.hash(), started)?;

    println!(
        "prepared {} train / {} dev / {} test docs, {} classes, vocabulary {}",
        prep.train.len(),
        prep.dev.len(),
        prep.test.len(),
        prep.train.num_classes,
        prep.vocab.size()
    );
    println!("{}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(model: &str, data_dir: &Path, out: &Path, grid: bool, cfg_args: &ConfigArgs) -> Result<()> {
    let started = manifest::timestamp();
    let cfg = cfg_args.build()?;
    let kind: ModelKind = model.parse()?;
    let prep = load_prepared(data_dir)?;
    let dir = make_run_dir(out)?;

    let neural = matches!(
        kind,
        ModelKind::Disc | ModelKind::GenShared | ModelKind::GenIndep
    );
    let (fitted, report) = if grid && neural {
        let (lr, m, r) = select_learning_rate(&cfg.lr_grid, |lr| {
            let mut c = cfg.clone();
            c.opt.learning_rate = lr;
            let (m, r) = experiments::fit_model(
                kind,
                &prep.train,
                &prep.dev,
                prep.vocab.size(),
                &c,
                c.opt.seed,
            )?;
            Ok((m, r.expect("neural kinds produce a training report")))
        })?;
        println!("selected learning rate {lr} by dev accuracy");
        (m, Some(r))
    } else {
        if grid {
            println!("note: --grid only applies to disc/gen-shared/gen-indep; ignored");
        }
        experiments::fit_model(
            kind,
            &prep.train,
            &prep.dev,
            prep.vocab.size(),
            &cfg,
            cfg.opt.seed,
        )?
    };

    if let Some(report) = &report {
        write_ndjson(&dir.join("report.ndjson"), &report.epochs)?;
        println!(
            "best dev accuracy {:.2}% at epoch {} ({:.1}s)",
            100.0 * report.best_dev_accuracy,
            report.best_epoch,
            report.wall_clock_secs
        );
    }

    match &fitted {
        FittedModel::NaiveBayes(m) => {
            let f = std::io::BufWriter::new(std::fs::File::create(dir.join("counts.tsv"))?);
            m.write_counts(&prep.vocab, f)?;
        }
        FittedModel::KneserNey(m) => {
            let f = std::io::BufWriter::new(std::fs::File::create(dir.join("counts.tsv"))?);
            m.write_counts(&prep.vocab, f)?;
        }
        _ => {
            checkpoint::save_model(
                &fitted,
                &prep.vocab.hash(),
                &prep.class_names,
                &dir.join("model.ckpt"),
            )?;
        }
    }

    let metrics = experiments::evaluate(&fitted, &prep.test)?;
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::Format(format!("metrics: {e}")))?;
    std::fs::write(dir.join("metrics.json"), &json)?;
    println!("test accuracy {:.2}%", metrics.accuracy);

    write_manifest(&dir, &cfg, prepared_hashes(data_dir)?, prep.vocab.hash(), started)?;
    println!("{}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(ckpt: &Path, data_dir: &Path, split: &str) -> Result<()> {
    if !matches!(split, "train" | "dev" | "test") {
        return Err(Error::InvalidArg(format!(
            "split must be train, dev, or test, not `{split}`"
        )));
    }
    let vocab = Vocabulary::load(&data_dir.join("vocab.txt"))?;
    let (model, class_names) = checkpoint::load_model(ckpt, &vocab.hash())?;
    let ds = data::load_encoded(&data_dir.join(format!("{split}.enc")))?;
    let metrics = experiments::evaluate(&model, &ds)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&metrics).map_err(|e| Error::Format(format!("metrics: {e}")))?
    );
    eprintln!(
        "classes: {} | {} accuracy {:.2}%",
        class_names.join(", "),
        split,
        metrics.accuracy
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// experiment curve
// ---------------------------------------------------------------------------

fn cmd_curve(
    data_dir: &Path,
    out: &Path,
    models: &str,
    workers: usize,
    cfg_args: &ConfigArgs,
) -> Result<()> {
    let started = manifest::timestamp();
    let cfg = cfg_args.build()?;
    let kinds: Vec<ModelKind> = models
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_>>()?;
    if workers == 0 {
        return Err(Error::InvalidArg("--workers must be >= 1".into()));
    }
    let prep = load_prepared(data_dir)?;
    let dir = make_run_dir(out)?;

    let cells = experiments::curve_cells(&kinds, &cfg);
    let results = run_cells(&cells, workers, &prep, &cfg);

    write_ndjson(&dir.join("results.ndjson"), &results)?;
    write_curve_csv(&dir.join("curve.csv"), &results)?;
    write_manifest(&dir, &cfg, prepared_hashes(data_dir)?, prep.vocab.hash(), started)?;

    let failures = results.iter().filter(|c| c.error.is_some()).count();
    println!("{} cells ({} failed)", results.len(), failures);
    println!("{}", dir.display());
    Ok(())
}

/// Fan the independent cells out over `workers` threads; results keep the
/// original cell order.
fn run_cells(
    cells: &[(usize, u64, ModelKind)],
    workers: usize,
    prep: &Prepared,
    cfg: &Config,
) -> Vec<CurveCell> {
    if workers <= 1 {
        return cells
            .iter()
            .map(|&(n, seed, kind)| {
                run_curve_cell(
                    &prep.train,
                    &prep.dev,
                    &prep.test,
                    prep.vocab.size(),
                    n,
                    seed,
                    kind,
                    cfg,
                )
            })
            .collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<CurveCell>>> =
        (0..cells.len()).map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let (n, seed, kind) = cells[i];
                let cell = run_curve_cell(
                    &prep.train,
                    &prep.dev,
                    &prep.test,
                    prep.vocab.size(),
                    n,
                    seed,
                    kind,
                    cfg,
                );
                *slots[i].lock().unwrap() = Some(cell);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every cell ran"))
        .collect()
}

/// One row per curve point: mean accuracy over the successful seeds.
fn write_curve_csv(path: &Path, cells: &[CurveCell]) -> Result<()> {
    let mut points: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for c in cells {
        if let Some(acc) = c.accuracy {
            points
                .entry((c.model.clone(), c.n_per_class))
                .or_default()
                .push(acc);
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "model,n_per_class,mean_accuracy,seeds")?;
    for ((model, n), accs) in points {
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        writeln!(f, "{model},{n},{mean:.4},{}", accs.len())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// experiment continual
// ---------------------------------------------------------------------------

fn cmd_continual(data_dir: &Path, out: &Path, model: &str, cfg_args: &ConfigArgs) -> Result<()> {
    let started = manifest::timestamp();
    let cfg = cfg_args.build()?;
    let kind: ModelKind = model.parse()?;
    let prep = load_prepared(data_dir)?;
    let dir = make_run_dir(out)?;

    let result = run_continual(
        &prep.train,
        &prep.dev,
        &prep.test,
        prep.vocab.size(),
        kind,
        &cfg,
    )?;
    write_ndjson(&dir.join("results.ndjson"), &result.phases)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("continual.csv"))?);
    writeln!(f, "phase,new_class,accuracy,newest_class_share")?;
    for p in &result.phases {
        writeln!(
            f,
            "{},{},{:.4},{:.4}",
            p.phase, p.new_class, p.metrics.accuracy, p.newest_class_share
        )?;
    }
    drop(f);
    write_manifest(&dir, &cfg, prepared_hashes(data_dir)?, prep.vocab.hash(), started)?;

    let last = result.phases.last().expect(">=1 phase");
    println!(
        "{} phases, final accuracy {:.2}%, newest-class share {:.2}%",
        result.phases.len(),
        last.metrics.accuracy,
        last.newest_class_share
    );
    println!("{}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// experiment zeroshot
// ---------------------------------------------------------------------------

/// Resolve one label word per class, either given directly or by looking
/// up each class name in a `name<TAB>word` table.
fn resolve_label_words(
    class_names: &[String],
    label_words: Option<&str>,
    label_map: Option<&Path>,
) -> Result<Vec<String>> {
    if let Some(words) = label_words {
        let words: Vec<String> = words.split(',').map(|w| w.trim().to_lowercase()).collect();
        if words.len() != class_names.len() {
            return Err(Error::InvalidArg(format!(
                "{} label words given for {} classes",
                words.len(),
                class_names.len()
            )));
        }
        return Ok(words);
    }
    let map_path = label_map.ok_or_else(|| {
        Error::InvalidArg("zero-shot needs --label-words or --label-map".into())
    })?;
    let mut table: BTreeMap<String, String> = BTreeMap::new();
    for (i, line) in std::fs::read_to_string(map_path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, word) = line.split_once('\t').ok_or_else(|| {
            Error::Format(format!("label map line {}: expected name<TAB>word", i + 1))
        })?;
        table.insert(name.trim().to_lowercase(), word.trim().to_lowercase());
    }
    class_names
        .iter()
        .map(|name| {
            table
                .get(&name.to_lowercase())
                .cloned()
                .ok_or_else(|| Error::Format(format!("class `{name}` missing from label map")))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_zeroshot(
    data_dir: &Path,
    out: &Path,
    model: &str,
    hidden: &str,
    vectors: &Path,
    label_words: Option<&str>,
    label_map: Option<&Path>,
    cfg_args: &ConfigArgs,
) -> Result<()> {
    let started = manifest::timestamp();
    let cfg = cfg_args.build()?;
    let kind: ModelKind = model.parse()?;
    let hidden: Vec<usize> = hidden
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArg(format!("bad hidden class index `{s}`")))
        })
        .collect::<Result<_>>()?;
    let prep = load_prepared(data_dir)?;

    let words = resolve_label_words(&prep.class_names, label_words, label_map)?;
    let wv = data::load_word_vectors(vectors, &prep.vocab, &words)?;
    if wv.dim != cfg.hidden_dim {
        return Err(Error::InvalidArg(format!(
            "label vectors have dimension {} but hidden_dim is {}",
            wv.dim, cfg.hidden_dim
        )));
    }
    let label_vectors: Vec<Vec<f64>> = words
        .iter()
        .map(|w| wv.vectors[w].clone())
        .collect();

    let dir = make_run_dir(out)?;
    let result = run_zero_shot(
        &prep.train,
        &prep.dev,
        &prep.test,
        prep.vocab.size(),
        &hidden,
        &label_vectors,
        kind,
        &cfg,
    )?;

    #[derive(Serialize)]
    struct RoundRow<'a> {
        round: usize,
        added: usize,
        metrics: &'a experiments::Metrics,
    }
    let mut rows = vec![RoundRow {
        round: 0,
        added: 0,
        metrics: &result.initial,
    }];
    for r in &result.rounds {
        rows.push(RoundRow {
            round: r.round,
            added: r.added,
            metrics: &r.metrics,
        });
    }
    write_ndjson(&dir.join("results.ndjson"), &rows)?;

    let hidden_mean = |per: &[f64]| -> f64 {
        if hidden.is_empty() {
            return 0.0;
        }
        hidden.iter().map(|&h| per[h]).sum::<f64>() / hidden.len() as f64
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("zeroshot.csv"))?);
    writeln!(f, "round,added,accuracy,hidden_precision,hidden_recall")?;
    for row in &rows {
        writeln!(
            f,
            "{},{},{:.4},{:.4},{:.4}",
            row.round,
            row.added,
            row.metrics.accuracy,
            hidden_mean(&row.metrics.precision),
            hidden_mean(&row.metrics.recall),
        )?;
    }
    drop(f);
    write_manifest(&dir, &cfg, prepared_hashes(data_dir)?, prep.vocab.hash(), started)?;

    let last = rows.last().expect("at least the initial row");
    println!(
        "final: accuracy {:.2}%, hidden precision {:.2}%, hidden recall {:.2}%",
        last.metrics.accuracy,
        hidden_mean(&last.metrics.precision),
        hidden_mean(&last.metrics.recall),
    );
    println!("{}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// experiment shift
// ---------------------------------------------------------------------------

fn cmd_shift(data_dir: &Path, out: &Path, hold_out: usize, bins: usize, cfg_args: &ConfigArgs) -> Result<()> {
    let started = manifest::timestamp();
    let cfg = cfg_args.build()?;
    if bins == 0 {
        return Err(Error::InvalidArg("--bins must be >= 1".into()));
    }
    let prep = load_prepared(data_dir)?;
    let dir = make_run_dir(out)?;

    let run = run_shift(
        &prep.train,
        &prep.dev,
        &prep.test,
        prep.vocab.size(),
        hold_out,
        &cfg,
    )?;

    // gold class for each score row (held-out docs keep their own class)
    let gold_of = |s: &experiments::ShiftScore| -> usize {
        if s.in_domain {
            run.in_gold[s.index]
        } else {
            hold_out
        }
    };

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("scores.csv"))?);
    writeln!(f, "index,in_domain,gold_class,tokens,log_px,log_px_per_token")?;
    for s in &run.report.scores {
        writeln!(
            f,
            "{},{},{},{},{:.6},{:.6}",
            s.index,
            s.in_domain,
            gold_of(s),
            s.tokens,
            s.log_px,
            s.log_px_per_token
        )?;
    }
    drop(f);

    // per-gold-class histogram over per-token scores, shared bin edges
    let lo = run
        .report
        .scores
        .iter()
        .map(|s| s.log_px_per_token)
        .fold(f64::INFINITY, f64::min);
    let hi = run
        .report
        .scores
        .iter()
        .map(|s| s.log_px_per_token)
        .fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(1e-12);
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for s in &run.report.scores {
        let b = (((s.log_px_per_token - lo) / width) as usize).min(bins - 1);
        *counts.entry((gold_of(s), b)).or_insert(0) += 1;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("histogram.csv"))?);
    writeln!(f, "gold_class,bin_lo,bin_hi,count")?;
    for ((class, b), count) in counts {
        writeln!(
            f,
            "{},{:.6},{:.6},{}",
            class,
            lo + b as f64 * width,
            lo + (b + 1) as f64 * width,
            count
        )?;
    }
    drop(f);

    #[derive(Serialize)]
    struct Summary {
        hold_out: usize,
        mean_in_per_token: f64,
        mean_out_per_token: f64,
        gap_per_token: f64,
        rank_sum_u: f64,
        rank_sum_z: f64,
        rank_sum_p: f64,
        docs: usize,
    }
    write_ndjson(
        &dir.join("results.ndjson"),
        &[Summary {
            hold_out,
            mean_in_per_token: run.report.mean_in_per_token,
            mean_out_per_token: run.report.mean_out_per_token,
            gap_per_token: run.report.gap_per_token,
            rank_sum_u: run.report.rank_sum_u,
            rank_sum_z: run.report.rank_sum_z,
            rank_sum_p: run.report.rank_sum_p,
            docs: run.report.scores.len(),
        }],
    )?;
    write_manifest(&dir, &cfg, prepared_hashes(data_dir)?, prep.vocab.hash(), started)?;

    println!(
        "per-token log p(x): seen {:.4}, held-out {:.4} (gap {:.4} nats), rank-sum p = {:.2e}",
        run.report.mean_in_per_token,
        run.report.mean_out_per_token,
        run.report.gap_per_token,
        run.report.rank_sum_p
    );
    println!("{}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn cmd_gradcheck() -> Result<()> {
    let (disc_err, gen_err) = experiments::fixture_grad_errors()?;
    println!("disc nll max relative gradient error:        {disc_err:.3e}");
    println!("shared gen loglik max relative gradient error: {gen_err:.3e}");
    if disc_err < 1e-4 && gen_err < 1e-4 {
        println!("gradcheck passed (threshold 1e-4)");
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed: disc {disc_err:.3e}, gen {gen_err:.3e} (threshold 1e-4)"
        )))
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    classes: usize,
    train_per_class: usize,
    dev_per_class: usize,
    test_per_class: usize,
    seed: u64,
    class_word_prob: f64,
    common_words: usize,
    blend: Option<&str>,
    label_dim: Option<usize>,
) -> Result<()> {
    if !(0.0..=1.0).contains(&class_word_prob) {
        return Err(Error::InvalidArg(
            "--class-word-prob must be in [0, 1]".into(),
        ));
    }
    let blend = match blend {
        None => None,
        Some(s) => {
            let parts: Vec<usize> = s
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::InvalidArg(format!("bad --blend component `{p}`")))
                })
                .collect::<Result<_>>()?;
            if parts.len() != 3 {
                return Err(Error::InvalidArg(
                    "--blend expects hidden,parent_a,parent_b".into(),
                ));
            }
            if parts.iter().any(|&c| c >= classes) || parts[1] == parts[0] || parts[2] == parts[0] {
                return Err(Error::InvalidArg("--blend classes out of range".into()));
            }
            Some((parts[0], parts[1], parts[2]))
        }
    };
    let spec = AnalogSpec {
        num_classes: classes,
        n_train_per_class: train_per_class,
        n_dev_per_class: dev_per_class,
        n_test_per_class: test_per_class,
        class_word_prob,
        n_common_words: common_words,
        blend,
        seed,
        ..AnalogSpec::default()
    };
    let corpus = synth::generate_analog(&spec);
    std::fs::create_dir_all(out)?;
    synth::write_csv(&corpus.train, &out.join("train.csv"))?;
    synth::write_csv(&corpus.dev, &out.join("dev.csv"))?;
    synth::write_csv(&corpus.test, &out.join("test.csv"))?;
    std::fs::write(out.join("classes.txt"), corpus.class_names.join("\n") + "\n")?;

    if let Some(dim) = label_dim {
        let vectors = synth::analog_label_vectors(classes, dim, blend);
        let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("vectors.txt"))?);
        for (name, v) in corpus.class_names.iter().zip(&vectors) {
            let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
            writeln!(f, "{name} {}", vals.join(" "))?;
        }
    }

    println!(
        "wrote {} train / {} dev / {} test docs across {} classes to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        classes,
        out.display()
    );
    Ok(())
}
