use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::Args;
use log::warn;

use bridgemem::checkpoint::{load_checkpoint, save_checkpoint};
use bridgemem::config::RunConfig;
use bridgemem::data::{generate_dataset, nearest_centroid_accuracy, Dataset, Modality};
use bridgemem::eval::{ablate_slots, addressing_similarity, evaluate, EvalMode, EvalReport};
use bridgemem::gradcheck::{run_suite, SuiteOptions, PASS_THRESHOLD};
use bridgemem::graph::OpKind;
use bridgemem::optim::OptimizerKind;
use bridgemem::trainer::{check_dataset, train_from};
use bridgemem::{Error, Result};

use crate::Common;

pub const TRAIN_FILE: &str = "train.bin";
pub const TEST_FILE: &str = "test.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding train.bin and test.bin.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Passes over the training set.
    #[arg(long)]
    epochs: Option<usize>,
    /// Memory slot count N; 0 trains the memory-free baseline.
    #[arg(long)]
    slots: Option<usize>,
    /// Addressing scale r.
    #[arg(long)]
    scale_r: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// sgd, momentum or adam.
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Treat the target addressing as a constant in the bridging loss.
    #[arg(long, value_name = "BOOL")]
    detach_target_addressing: Option<bool>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory holding the dataset files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which split to evaluate on.
    #[arg(long, default_value = "test")]
    split: String,
    /// recall, oracle or baseline.
    #[arg(long, default_value = "recall")]
    mode: EvalMode,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Probe samples per class.
    #[arg(long, default_value_t = 10)]
    per_class: usize,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated slot counts; must include 0.
    #[arg(long, value_delimiter = ',', default_value = "0,16,32,64")]
    slots: Vec<usize>,
    /// Number of training seeds per slot count, counted up from `--seed`.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Passes over the training set.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Upper bound on every dimension of the random problems.
    #[arg(long, default_value_t = 16)]
    dims: usize,
    /// Random problems per loss path.
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// Test hook: scale the adjoint of one operation to prove detection.
    #[arg(long, hide = true, value_parser = parse_op)]
    corrupt_adjoint: Option<OpKind>,
}

fn parse_op(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| format!("unknown operation `{s}`"))
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName(TRAIN_FILE)),
            "test" => Ok(SplitName(TEST_FILE)),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, test)"))),
        }
    }
}

struct SplitName(&'static str);

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn echo(config: &RunConfig) {
    eprintln!("# effective configuration\n{}", config.to_toml());
}

fn commented(text: &str) -> String {
    text.lines().map(|l| format!("# {l}\n")).collect()
}

fn out_dir(common: &Common, config: &RunConfig) -> Result<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| config.paths.out.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set paths.out".into()))
}

fn data_dir(flag: &Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| config.paths.data.clone())
        .ok_or_else(|| Error::Config("no data directory: pass --data or set paths.data".into()))
}

/// Creates `dir` and fails if any of `files` already exists there and
/// `force` is off.
fn prepare_outputs(dir: &Path, files: &[&str], force: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    if !force {
        if let Some(f) = files.iter().find(|f| dir.join(f).exists()) {
            return Err(Error::Io(io::Error::new(
                io::ErrorKind::AlreadyExists,
                format!("{} exists; pass --force to overwrite", dir.join(f).display()),
            )));
        }
    }
    Ok(())
}

pub fn gen_data(common: &Common) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(s) = common.seed {
        config.data.seed = s;
    }
    config.data.validate()?;
    echo(&config);
    let dir = out_dir(common, &config)?;
    prepare_outputs(&dir, &[TRAIN_FILE, TEST_FILE, CONFIG_FILE], common.force)?;
    let (train, test) = generate_dataset(&config.data)?;
    train.save(&dir.join(TRAIN_FILE))?;
    test.save(&dir.join(TEST_FILE))?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml())?;

    let s = &config.data;
    println!(
        "classes {}  codebook {}  steps {}  d_src {}  d_tgt {}  noise src {} tgt {}",
        s.num_classes, s.codebook_size, s.seq_len, s.source_dim, s.target_dim, s.source_noise, s.target_noise
    );
    println!("train {} samples, test {} samples -> {}", train.len(), test.len(), dir.display());
    println!(
        "nearest-centroid accuracy  source {:.4}  target {:.4}",
        nearest_centroid_accuracy(&train, &test, Modality::Source),
        nearest_centroid_accuracy(&train, &test, Modality::Target)
    );
    Ok(())
}

fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    let name: SplitName = split.parse()?;
    Dataset::load(&dir.join(name.0))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut config = load_config(&a.common)?;
    let t = &mut config.train;
    if let Some(v) = a.common.seed {
        t.seed = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.slots {
        t.slots = v;
    }
    if let Some(v) = a.scale_r {
        t.scale = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.optimizer {
        t.optimizer = v;
    }
    if let Some(v) = a.detach_target_addressing {
        t.detach_target_addressing = v;
    }
    let data = data_dir(&a.data, &config)?;
    let train_set = Dataset::load(&data.join(TRAIN_FILE))?;
    let test_set = Dataset::load(&data.join(TEST_FILE))?;
    if a.common.config.is_some() && config.data != train_set.spec {
        warn!("dataset spec in the config differs from the dataset files; using the files");
    }
    config.data = train_set.spec.clone();
    config.validate()?;
    echo(&config);
    let dir = out_dir(&a.common, &config)?;
    prepare_outputs(&dir, &[CHECKPOINT_FILE, METRICS_FILE, CONFIG_FILE], a.common.force)?;

    let model = config.train.init_model(&config.data)?;
    let outcome = train_from(model, &config.train, &train_set, &test_set)?;
    let mut log = outcome.log;
    log.config_echo = config.to_toml();
    save_checkpoint(
        &dir.join(CHECKPOINT_FILE),
        &outcome.model.store,
        &config,
        config.train.epochs as u64,
    )?;
    fs::write(dir.join(METRICS_FILE), log.to_csv())?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
    if let Some(last) = log.rows.last() {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        println!(
            "epoch {}  L_total {:.4}  L_save {}  L_bridge {}  L_task {:.4}  acc recall {}  oracle {}  baseline {}",
            last.epoch,
            last.l_total,
            opt(last.l_save),
            opt(last.l_bridge),
            last.l_task,
            opt(last.acc_recall),
            opt(last.acc_oracle),
            opt(last.acc_baseline)
        );
    }
    println!("checkpoint -> {}", dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.model()?;
    let data = load_split(&data_dir(&a.data, &ck.config)?, &a.split)?;
    check_dataset(&model, &data)?;
    let report = evaluate(&model, &data, a.mode)?;
    let header = format!("{}# split = {}\n", commented(&ck.config.to_toml()), a.split);
    print!("{}", report.to_text());
    if let Some(dir) = &a.common.out {
        let name = a.mode.name();
        let (txt, csv) = (format!("eval_{name}.txt"), format!("eval_{name}.csv"));
        prepare_outputs(dir, &[&txt, &csv], a.common.force)?;
        fs::write(dir.join(&txt), format!("{header}{}", report.to_text()))?;
        fs::write(
            dir.join(&csv),
            format!("{header}{}\n{}\n", EvalReport::csv_header(), report.csv_row()),
        )?;
    }
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.model()?;
    let data = load_split(&data_dir(&a.data, &ck.config)?, &a.split)?;
    check_dataset(&model, &data)?;
    let report = addressing_similarity(&model, &data, Some(a.per_class))?;
    print!("{}", report.to_text());
    if let Some(dir) = &a.common.out {
        prepare_outputs(dir, &["similarity.txt", "similarity_pairs.csv"], a.common.force)?;
        let header = commented(&ck.config.to_toml());
        fs::write(dir.join("similarity.txt"), format!("{header}{}", report.to_text()))?;
        fs::write(dir.join("similarity_pairs.csv"), format!("{header}{}", report.pairs_csv()))?;
    }
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let mut config = load_config(&a.common)?;
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    let master = a.common.seed.unwrap_or(config.train.seed);
    let seeds: Vec<u64> = (0..a.seeds).map(|i| master.wrapping_add(i)).collect();
    let data = data_dir(&a.data, &config)?;
    let train_set = Dataset::load(&data.join(TRAIN_FILE))?;
    let test_set = Dataset::load(&data.join(TEST_FILE))?;
    config.data = train_set.spec.clone();
    config.validate()?;
    echo(&config);
    let dir = a.common.out.clone().or_else(|| config.paths.out.clone());
    if let Some(dir) = &dir {
        prepare_outputs(dir, &["ablation.txt", "ablation.csv"], a.common.force)?;
    }
    let table = ablate_slots(&config.train, &a.slots, &seeds, &train_set, &test_set)?;
    print!("{}", table.to_text());
    if let Some(dir) = &dir {
        let mut header = commented(&config.to_toml());
        let _ = writeln!(header, "# slots = {:?}\n# seeds = {:?}", a.slots, seeds);
        fs::write(dir.join("ablation.txt"), format!("{header}{}", table.to_text()))?;
        fs::write(dir.join("ablation.csv"), format!("{header}{}", table.to_csv()))?;
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let opts = SuiteOptions {
        seed: a.seed,
        seeds: a.seeds,
        dims: a.dims,
        corrupt: a.corrupt_adjoint,
        ..SuiteOptions::default()
    };
    let entries = run_suite(&opts)?;
    println!(
        "{:<22}{:>16}{:>8}{:>12}  result",
        "path", "max_rel_error", "seed", "coordinate"
    );
    for e in &entries {
        println!(
            "{:<22}{:>16.3e}{:>8}{:>12}  {}",
            e.path,
            e.max_rel_error,
            e.worst.0,
            e.worst.1,
            if e.passed() { "pass" } else { "FAIL" }
        );
    }
    match entries.iter().find(|e| !e.passed()) {
        None => {
            println!("all paths within {PASS_THRESHOLD:e}");
            Ok(())
        }
        Some(e) => Err(Error::GradCheck {
            op: e.path.clone(),
            coordinate: e.worst.1,
            analytic: e.analytic,
            numeric: e.numeric,
        }),
    }
}
