use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use restt::data::{export_synth, subsample_fraction, synth_generate, Embedded, Embedding, SynthSpec};
use restt::features::FeatureMap;
use restt::grad::Loss;
use restt::kv::KvWriter;
use restt::meanfield::{self, ModelKind, Thresholds, Verdict};
use restt::model::{load_checkpoint, save_checkpoint};
use restt::train::{evaluate, fit_with, Metrics, Task, TrainSpec};
use restt::{init_params, oracle, Preset, Topology};

use crate::dataset::{self, parse_delimiter, CsvOptions};
use crate::Cli;

/// Invalid option values detected by the command layer.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()).into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Tt,
    Restt,
    Fc,
    Volterra,
}

impl ModelArg {
    fn preset(self) -> Preset {
        match self {
            ModelArg::Tt => Preset::PlainTt,
            ModelArg::Restt => Preset::GeneralRestt,
            ModelArg::Fc => Preset::FullyConnected,
            ModelArg::Volterra => Preset::Volterra,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ModelArg::Tt => "tt",
            ModelArg::Restt => "restt",
            ModelArg::Fc => "fc",
            ModelArg::Volterra => "volterra",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureMapArg {
    Trig,
    Raw,
}

impl FeatureMapArg {
    fn map(self) -> FeatureMap {
        match self {
            FeatureMapArg::Trig => FeatureMap::Trig,
            FeatureMapArg::Raw => FeatureMap::Raw,
        }
    }
}

fn write_manifest(dir: &Path, command: &str, kv: &KvWriter, notes: &[String]) -> Result<()> {
    let mut text = format!("# restt {command} {}\n", env!("CARGO_PKG_VERSION"));
    for n in notes {
        text.push_str(&format!("# {n}\n"));
    }
    text.push_str(&kv.render());
    let path = dir.join("manifest.txt");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn threads_kv(kv: &mut KvWriter, cli: &Cli) {
    if let Some(t) = cli.threads {
        kv.set("threads", t);
    }
}

// ---------------------------------------------------------------- gen-synth

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Length of each of the three input vectors
    #[arg(long, default_value_t = 10)]
    pub d: usize,
    #[arg(long, default_value_t = 10000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 10000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Variance of the ground-truth weights
    #[arg(long, default_value_t = 0.1)]
    pub weight_variance: f64,
    /// Variance of the input components
    #[arg(long, default_value_t = 0.5)]
    pub input_variance: f64,
    /// Output directory (train.csv, test.csv, synth.meta, manifest.txt)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_synth(a: &GenSynthArgs, cli: &Cli) -> Result<()> {
    let spec = SynthSpec {
        d: a.d,
        n_train: a.n_train,
        n_test: a.n_test,
        weight_variance: a.weight_variance,
        input_variance: a.input_variance,
        seed: a.seed,
    };
    let (train, test, _) = synth_generate(&spec)?;
    create_out(&a.out)?;
    export_synth(&spec, &train, &test, &a.out)?;
    let mut kv = KvWriter::new();
    kv.set("d", a.d)
        .set("n_train", a.n_train)
        .set("n_test", a.n_test)
        .set("seed", a.seed)
        .set("weight_variance", a.weight_variance)
        .set("input_variance", a.input_variance)
        .set("out", a.out.display());
    threads_kv(&mut kv, cli);
    write_manifest(&a.out, "gen-synth", &kv, &[])?;
    println!("wrote {} train and {} test rows to {}", a.n_train, a.n_test, a.out.display());
    Ok(())
}

// -------------------------------------------------------------------- data

#[derive(Debug, Args)]
pub struct DataArgs {
    /// mnist, fashion-mnist, idx:DIR, synth:DIR or csv:PATH
    #[arg(long)]
    pub dataset: String,
    /// Target column for csv data
    #[arg(long, default_value = "y")]
    pub target: String,
    /// Field delimiter for csv data (one byte, or `tab`)
    #[arg(long, default_value = ",")]
    pub delimiter: String,
    /// Training fraction when splitting csv data
    #[arg(long, default_value_t = 0.7)]
    pub split: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Node map for tabular features after min-max scaling
    #[arg(long, value_enum, default_value_t = FeatureMapArg::Trig)]
    pub feature_map: FeatureMapArg,
}

impl DataArgs {
    fn csv_options(&self) -> Result<CsvOptions> {
        Ok(CsvOptions {
            target: self.target.clone(),
            delimiter: parse_delimiter(&self.delimiter).map_err(ConfigError)?,
            split: self.split,
            split_seed: self.split_seed,
        })
    }

    fn write_kv(&self, kv: &mut KvWriter) {
        kv.set("dataset", &self.dataset)
            .set("target", &self.target)
            .set("delimiter", if self.delimiter == "\t" { "tab" } else { &self.delimiter })
            .set("split", self.split)
            .set("split_seed", self.split_seed)
            .set("feature_map", self.feature_map.map().as_str());
    }
}

fn task_of(e: &Embedded) -> Task {
    if e.labels.is_some() {
        Task::Classification
    } else {
        Task::Regression
    }
}

fn print_metrics(prefix: &str, m: &Metrics) {
    match m {
        Metrics::Classification { accuracy } => println!("{prefix}accuracy={accuracy:.6}"),
        Metrics::Regression { rmse, r2 } => println!("{prefix}rmse={rmse:.6} r2={r2:.6}"),
    }
}

// -------------------------------------------------------------------- train

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = ModelArg::Restt)]
    pub model: ModelArg,
    /// Bond dimension r
    #[arg(long, default_value_t = 20)]
    pub rank: usize,
    /// Initialization variance, or `auto` for the signal-propagation rule
    #[arg(long, default_value = "auto")]
    pub sigma_w2: String,
    #[command(flatten)]
    pub data: DataArgs,
    /// Fraction of the training split to keep
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub fraction_seed: u64,
    /// Learning rate (default 1e-3 for images, 1e-2 otherwise)
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub weight_decay: f64,
    /// mse or softmax_cross_entropy (default by task)
    #[arg(long)]
    pub loss: Option<String>,
    /// Initialization seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub shuffle_seed: u64,
    /// Evaluate on the test split every this many epochs
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    /// Output directory (runlog.csv, model.ckpt, manifest.txt)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn train(a: &TrainArgs, cli: &Cli) -> Result<()> {
    let (train, test) = dataset::resolve(&a.data.dataset, &a.data.csv_options()?)?;
    let train = if a.fraction < 1.0 {
        subsample_fraction(&train, a.fraction, a.fraction_seed)?
    } else if a.fraction == 1.0 {
        train
    } else {
        return config_err(format!("fraction must be in (0, 1], got {}", a.fraction));
    };
    let emb = Embedding::fit(&train, a.data.feature_map.map())?;
    let tr = emb.apply(&train)?;
    let te = emb.apply(&test)?;
    if te.clamped > 0 {
        eprintln!("note: {} test feature values clamped into the training range", te.clamped);
    }
    let task = task_of(&tr);
    let topo = Topology::preset(a.model.preset(), tr.node_dims(), a.rank, tr.output_dim())?;

    let mut notes = Vec::new();
    let kind = ModelKind::of(&topo).ok();
    let sigma_w2 = if a.sigma_w2 == "auto" {
        let Some(kind) = kind else {
            return config_err(format!("sigma_w2=auto needs model tt or restt, got {}", a.model.name()));
        };
        let s = meanfield::recommend_sigma(kind, &tr.input_stats())?;
        notes.push("sigma_w2 resolved from auto".to_string());
        s
    } else {
        a.sigma_w2
            .parse::<f64>()
            .map_err(|_| ConfigError(format!("sigma_w2 must be a number or auto, got '{}'", a.sigma_w2)))?
    };
    if kind.is_some() {
        let pred = meanfield::predict(&topo, sigma_w2, &tr.input_stats())?;
        let verdict = pred.verdict(&Thresholds::default());
        if verdict != Verdict::Stable {
            eprintln!(
                "warning: predicted regime at sigma_w2={sigma_w2} is {}; q(N)/q(1) = {:e}",
                verdict.as_str(),
                pred.q[pred.q.len() - 1] / pred.q[0]
            );
        }
    }
    let lr = a.lr.unwrap_or(match task {
        Task::Classification => 1e-3,
        Task::Regression => 1e-2,
    });
    let loss = match &a.loss {
        Some(s) => Loss::parse(s).map_err(|e| ConfigError(e.to_string()))?,
        None => task.default_loss(),
    };
    let mut spec = TrainSpec::new(lr, loss);
    spec.epochs = a.epochs;
    spec.batch_size = a.batch_size;
    spec.weight_decay = a.weight_decay;
    spec.shuffle_seed = a.shuffle_seed;
    spec.eval_every = a.eval_every;

    create_out(&a.out)?;
    let mut kv = KvWriter::new();
    kv.set("model", a.model.name()).set("rank", a.rank).set("sigma_w2", sigma_w2);
    a.data.write_kv(&mut kv);
    kv.set("fraction", a.fraction)
        .set("fraction_seed", a.fraction_seed)
        .set("lr", lr)
        .set("epochs", a.epochs)
        .set("batch_size", a.batch_size)
        .set("weight_decay", a.weight_decay)
        .set("loss", loss.as_str())
        .set("seed", a.seed)
        .set("shuffle_seed", a.shuffle_seed)
        .set("eval_every", a.eval_every)
        .set("out", a.out.display());
    threads_kv(&mut kv, cli);
    notes.push(format!(
        "task={} train_samples={} test_samples={} nodes={} output_dim={}",
        task.as_str(),
        tr.len(),
        te.len(),
        topo.n_nodes(),
        topo.output_dim
    ));
    write_manifest(&a.out, "train", &kv, &notes)?;

    let mut params = init_params(&topo, sigma_w2, a.seed)?;
    let log = fit_with(&mut params, &topo, &tr, Some(&te), task, &spec, |rec| {
        let metric = rec
            .eval
            .map(|m| format!(" {}={:.6}", m.primary_name(), m.primary()))
            .unwrap_or_default();
        eprintln!("epoch {:>4} loss={:.6e}{metric} t={:.1}s", rec.epoch, rec.train_loss, rec.seconds);
    })?;
    fs::write(a.out.join("runlog.csv"), log.to_csv())?;
    save_checkpoint(a.out.join("model.ckpt"), &topo, &params)?;
    if let Some(m) = log.last_eval() {
        print_metrics("final ", &m);
    }
    Ok(())
}

// --------------------------------------------------------- probe-meanfield

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeModel {
    Tt,
    Restt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputArg {
    /// Trig-embedded uniform pixels (unit norm, input_dim 2)
    Unit,
    /// Independent Gaussian components
    Gaussian,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_enum, default_value_t = ProbeModel::Tt)]
    pub model: ProbeModel,
    /// Number of nodes N
    #[arg(long, default_value_t = 20)]
    pub nodes: usize,
    #[arg(long, default_value_t = 2)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 10)]
    pub rank: usize,
    #[arg(long, default_value_t = 1)]
    pub output_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_w2: f64,
    #[arg(long, default_value_t = 10000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = InputArg::Unit)]
    pub inputs: InputArg,
    /// Component variance for gaussian inputs
    #[arg(long, default_value_t = 0.5)]
    pub input_variance: f64,
    /// Output directory (meanfield.csv, manifest.txt)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn probe_meanfield(a: &ProbeArgs, cli: &Cli) -> Result<()> {
    let preset = match a.model {
        ProbeModel::Tt => Preset::PlainTt,
        ProbeModel::Restt => Preset::GeneralRestt,
    };
    let topo = Topology::uniform(preset, a.nodes, a.input_dim, a.rank, a.output_dim)?;
    let report = match a.inputs {
        InputArg::Unit => {
            if a.input_dim != 2 {
                return config_err(format!("unit inputs are 2-dimensional, got input_dim={}", a.input_dim));
            }
            meanfield::measure(&topo, a.sigma_w2, meanfield::unit_norm_sampler(a.nodes), a.trials, a.seed)?
        }
        InputArg::Gaussian => {
            if !(a.input_variance > 0.0) {
                return config_err("input_variance must be positive");
            }
            let sampler = meanfield::gaussian_sampler(topo.input_dims.clone(), a.input_variance);
            meanfield::measure(&topo, a.sigma_w2, sampler, a.trials, a.seed)?
        }
    };
    create_out(&a.out)?;
    fs::write(a.out.join("meanfield.csv"), report.to_csv())?;
    let mut kv = KvWriter::new();
    kv.set("model", report.predicted.kind.as_str())
        .set("nodes", a.nodes)
        .set("input_dim", a.input_dim)
        .set("rank", a.rank)
        .set("output_dim", a.output_dim)
        .set("sigma_w2", a.sigma_w2)
        .set("trials", a.trials)
        .set("seed", a.seed)
        .set("inputs", if a.inputs == InputArg::Unit { "unit" } else { "gaussian" })
        .set("input_variance", a.input_variance)
        .set("out", a.out.display());
    threads_kv(&mut kv, cli);
    write_manifest(&a.out, "probe-meanfield", &kv, &[])?;
    let worst = (1..a.nodes).map(|l| report.rel_err(l)).fold(0.0, f64::max);
    println!(
        "verdict={} q(N)/q(1) predicted={:e} measured={:e} max_ratio_rel_err={:.4}",
        report.verdict.as_str(),
        report.end_to_end_predicted(),
        report.end_to_end_measured,
        worst
    );
    Ok(())
}

// ------------------------------------------------------------------ expand

#[derive(Debug, Args)]
pub struct ExpandArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory (expansion.txt, manifest.txt)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn expand(a: &ExpandArgs, cli: &Cli) -> Result<()> {
    let (topo, params) =
        load_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let exp = oracle::expand(&params, &topo)?;
    create_out(&a.out)?;
    fs::write(a.out.join("expansion.txt"), exp.to_text())?;
    let mut kv = KvWriter::new();
    kv.set("checkpoint", a.checkpoint.display()).set("out", a.out.display());
    threads_kv(&mut kv, cli);
    write_manifest(&a.out, "expand", &kv, &[])?;
    println!("families={} terms={}", exp.families().len(), exp.terms.len());
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Which split to evaluate
    #[arg(long, value_enum, default_value_t = PartArg::Test)]
    pub part: PartArg,
    /// classification or regression (default from the data)
    #[arg(long)]
    pub task: Option<String>,
    /// Output directory (metrics.csv, manifest.txt)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn eval(a: &EvalArgs, cli: &Cli) -> Result<()> {
    let (topo, params) =
        load_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let (train, test) = dataset::resolve(&a.data.dataset, &a.data.csv_options()?)?;
    let emb = Embedding::fit(&train, a.data.feature_map.map())?;
    let data = emb.apply(if a.part == PartArg::Train { &train } else { &test })?;
    if data.node_dims() != topo.input_dims || data.output_dim() != topo.output_dim {
        return Err(restt::Error::ShapeMismatch(format!(
            "checkpoint expects {} nodes of dims {:?} and {} outputs, data has {} nodes of dims {:?} and {} targets",
            topo.n_nodes(),
            topo.input_dims,
            topo.output_dim,
            data.node_dims().len(),
            data.node_dims(),
            data.output_dim()
        ))
        .into());
    }
    let task = match &a.task {
        Some(t) => Task::parse(t).map_err(|e| ConfigError(e.to_string()))?,
        None => task_of(&data),
    };
    let m = evaluate(&params, &topo, &data, task)?;
    create_out(&a.out)?;
    let mut csv = String::from("metric,value\n");
    match m {
        Metrics::Classification { accuracy } => csv.push_str(&format!("accuracy,{accuracy}\n")),
        Metrics::Regression { rmse, r2 } => csv.push_str(&format!("rmse,{rmse}\nr2,{r2}\n")),
    }
    csv.push_str(&format!("samples,{}\n", data.len()));
    fs::write(a.out.join("metrics.csv"), csv)?;
    let mut kv = KvWriter::new();
    kv.set("checkpoint", a.checkpoint.display());
    a.data.write_kv(&mut kv);
    kv.set("part", if a.part == PartArg::Train { "train" } else { "test" })
        .set("task", task.as_str())
        .set("out", a.out.display());
    threads_kv(&mut kv, cli);
    write_manifest(&a.out, "eval", &kv, &[])?;
    print_metrics("", &m);
    Ok(())
}
