//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attnmap::{self, AttnMethod, AttnOptions, TensorPack, ThresholdRange};
use crate::corpus::{self, Corpus, FoldPlan, Label, LoadMode};
use crate::depgraph::{self, ConjMode, SardConfig};
use crate::error::{Error, Result};
use crate::eval::{self, ConfigEcho, Experiment, Metrics};
use crate::pairgen::{self, LabelSource, PairReport};
use crate::riskmin::{
    self, DevData, EstimatorConfig, FeatureTable, Method, RatesMode, TeacherConfig, TrainHyper, TrainedHead,
};

/// Relative input paths are resolved against this directory when set.
pub const DATA_DIR_ENV: &str = "RELSIFT_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "relsift", version, about = "Weakly supervised relation detection between entity pairs")]
pub struct Cli {
    /// key=value file of default flag values; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for sentence- and fold-parallel stages.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dependency-path heuristic over a corpus and its parses.
    Sard(SardCmd),
    /// Attention-based detector at a fixed threshold.
    Attn(AttnCmd),
    /// Attention-based detector over a threshold grid.
    Sweep(SweepCmd),
    /// Pairwise-comparison data from gold or silver labels.
    Pairgen(PairgenCmd),
    /// Risk-minimization training of the classifier head.
    Train(TrainCmd),
    /// Score predictions, or a trained head, against gold labels.
    Eval(EvalCmd),
    /// Fold-orchestrated pipeline.
    Xval(XvalCmd),
    /// Merge metrics files into one report.
    Report(ReportCmd),
}

#[derive(Debug, Args, Serialize)]
pub struct CorpusArgs {
    /// Corpus JSONL.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Skip records with overlapping entity spans instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SardArgs {
    /// CoNLL-U parses with `# sent_id` matching corpus ids.
    #[arg(long)]
    pub parses: PathBuf,
    /// Assumption id (1 root verb on path, 2 root on path, 3 verb on path).
    #[arg(long = "a", default_value_t = 3)]
    pub a: u8,
    /// Heuristic id (1 assumption or direct link, 2 also no conjunction).
    #[arg(long = "h", default_value_t = 1)]
    pub h: u8,
    #[arg(long, value_enum, default_value_t = ConjArg::Upos)]
    pub conj_mode: ConjArg,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConjArg {
    Upos,
    Deprel,
}

#[derive(Debug, Args, Serialize)]
pub struct SardCmd {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub sard: SardArgs,
    /// Optional `<id>\t<fold>` file; reports per-fold and mean metrics.
    #[arg(long)]
    pub folds: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PackArgs {
    /// Tensor-pack directory.
    #[arg(long)]
    pub pack: PathBuf,
    #[arg(long, default_value_t = 11)]
    pub layer: u32,
    /// Keep special-token columns in the entity attention.
    #[arg(long)]
    pub no_mask_special: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct AttnCmd {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub pack: PackArgs,
    /// picmi, picmi-up or conex.
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub threshold: f64,
    #[arg(long)]
    pub folds: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepCmd {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub pack: PackArgs,
    #[arg(long)]
    pub method: String,
    /// Grid bounds and step; default to the method's standard grid.
    #[arg(long)]
    pub lo: Option<f64>,
    #[arg(long)]
    pub hi: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PairgenCmd {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Silver `<id>\t<label>` file; gold labels are used without it.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Name of the method that produced the silver labels.
    #[arg(long, default_value = "silver")]
    pub silver_name: String,
    /// Accepted pairs to emit; defaults to the corpus size.
    #[arg(long)]
    pub n_pairs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EstimatorArgs {
    /// binary_biased, uu, pcomp_unbiased, pcomp_relu, pcomp_abs,
    /// noisy_unbiased, rank_pruning or pcomp_teacher.
    #[arg(long)]
    pub estimator: String,
    /// Prior of the two unlabeled sets, for `uu`.
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub theta_prime: Option<f64>,
    #[arg(long, value_enum, default_value_t = RatesArg::Estimate)]
    pub rates_mode: RatesArg,
    #[arg(long, default_value_t = 0.99)]
    pub ema_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_max: f64,
    #[arg(long, default_value_t = 5)]
    pub ramp_epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RatesArg {
    Theory,
    Estimate,
}

impl EstimatorArgs {
    fn config(&self, pi_plus: f64) -> Result<(EstimatorConfig, TrainHyper)> {
        let method = Method::parse(&self.estimator)
            .ok_or_else(|| Error::Argument(format!("unknown estimator {:?}", self.estimator)))?;
        let mut cfg = EstimatorConfig::new(method, pi_plus, self.seed);
        if let (Some(t), Some(tp)) = (self.theta, self.theta_prime) {
            cfg = cfg.with_uu_thetas(t, tp);
        }
        cfg.rates_mode = match self.rates_mode {
            RatesArg::Theory => RatesMode::Theory,
            RatesArg::Estimate => RatesMode::Estimate,
        };
        if method == Method::PcompTeacher {
            cfg.teacher = Some(TeacherConfig {
                ema_decay: self.ema_decay,
                lambda_max: self.lambda_max,
                ramp_epochs: self.ramp_epochs,
            });
        }
        cfg.validate()?;
        let hyper = TrainHyper {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            dropout: self.dropout,
            ..TrainHyper::default()
        };
        Ok((cfg, hyper))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainCmd {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Tensor pack providing token embeddings.
    #[arg(long)]
    pub pack: PathBuf,
    /// Embedding layer; defaults to the highest layer with embeddings.
    #[arg(long)]
    pub emb_layer: Option<u32>,
    /// Pointwise sets file (`<id>\tP|N`).
    #[arg(long)]
    pub sets: PathBuf,
    /// `gold` or `silver:<method>`.
    #[arg(long, default_value = "gold")]
    pub label_source: String,
    #[arg(long)]
    pub pi_plus: f64,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    /// Development pointwise sets, for risk-based epoch selection.
    #[arg(long)]
    pub dev_sets: Option<PathBuf>,
    /// Development labels from the training label source, for F1-based selection.
    #[arg(long)]
    pub dev_labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalCmd {
    /// Corpus with gold labels.
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Predictions file (`<id>\t<label>`).
    #[arg(long, conflicts_with = "head")]
    pub pred: Option<PathBuf>,
    /// Trained head metadata; predicts every corpus record.
    #[arg(long, requires = "pack")]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub pack: Option<PathBuf>,
    #[arg(long)]
    pub emb_layer: Option<u32>,
    /// Method name recorded in the report.
    #[arg(long, default_value = "eval")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Sard,
    Attn,
    Train,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceArg {
    Gold,
    Sard,
    Attn,
}

#[derive(Debug, Args, Serialize)]
pub struct XvalCmd {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_enum)]
    pub pipeline: Pipeline,
    /// `<id>\t<fold>` file; random folds are drawn without it.
    #[arg(long)]
    pub folds: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub fold_seed: u64,
    #[arg(long)]
    pub parses: Option<PathBuf>,
    #[arg(long = "a", default_value_t = 3)]
    pub a: u8,
    #[arg(long = "h", default_value_t = 1)]
    pub h: u8,
    #[arg(long, value_enum, default_value_t = ConjArg::Upos)]
    pub conj_mode: ConjArg,
    #[arg(long)]
    pub pack: Option<PathBuf>,
    #[arg(long, default_value_t = 11)]
    pub layer: u32,
    #[arg(long)]
    pub no_mask_special: bool,
    #[arg(long)]
    pub attn_method: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Training labels for the `train` pipeline.
    #[arg(long, value_enum, default_value_t = SourceArg::Gold)]
    pub label_source: SourceArg,
    /// Comma-separated class priors to train with.
    #[arg(long, value_delimiter = ',', default_values_t = pairgen::DEFAULT_PRIOR_GRID.to_vec())]
    pub pi_plus: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub dev_fraction: f64,
    #[arg(long)]
    pub emb_layer: Option<u32>,
    #[arg(long)]
    pub estimator: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    #[arg(long, value_enum, default_value_t = RatesArg::Estimate)]
    pub rates_mode: RatesArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportCmd {
    /// Metrics JSON files written by other subcommands.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match with_config_defaults(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::Argument("--jobs must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Numerical(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Sard(c) => cmd_sard(c),
        Command::Attn(c) => cmd_attn(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Pairgen(c) => cmd_pairgen(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Xval(c) => cmd_xval(c),
        Command::Report(c) => cmd_report(c),
    })
}

/// Inserts `--key value` pairs from the `--config` file right after the
/// subcommand, skipping keys that are already given on the command line.
fn with_config_defaults(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let config = strs.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            strs.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    });
    let Some(config) = config else {
        return Ok(argv);
    };
    let path = PathBuf::from(&config);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let given: Vec<&str> = strs
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a))
        .collect();
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::malformed(&config, n + 1, "expected key=value"))?;
        let key = key.trim().replace('_', "-");
        if key == "config" || given.contains(&key.as_str()) {
            continue;
        }
        match value.trim() {
            "true" => extra.push(format!("--{key}")),
            "false" => {}
            v => {
                extra.push(format!("--{key}"));
                extra.push(v.to_string());
            }
        }
    }
    const SUBCOMMANDS: [&str; 8] = ["sard", "attn", "sweep", "pairgen", "train", "eval", "xval", "report"];
    let at = strs
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.as_str()))
        .map_or(argv.len(), |i| i + 1);
    let mut out = argv[..at].to_vec();
    out.extend(extra.into_iter().map(OsString::from));
    out.extend_from_slice(&argv[at..]);
    Ok(out)
}

fn input(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn load_corpus(args: &CorpusArgs) -> Result<Corpus> {
    let mode = if args.lenient { LoadMode::Lenient } else { LoadMode::Strict };
    corpus::load_corpus(&input(&args.corpus), mode)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Every effective flag of `args`, as strings.
fn settings<T: Serialize>(args: &T) -> BTreeMap<String, String> {
    fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, v) in m {
                    flatten(k, v, out);
                }
            }
            serde_json::Value::Null => {}
            serde_json::Value::String(s) => {
                out.insert(prefix.to_string(), s.clone());
            }
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    let mut out = BTreeMap::new();
    flatten("", &serde_json::to_value(args).expect("arguments serialize"), &mut out);
    out
}

fn write_predictions(dir: &Path, corpus: &Corpus, preds: &[Label]) -> Result<()> {
    corpus::write_label_file(
        &dir.join("predictions.tsv"),
        corpus.records().iter().zip(preds).map(|(r, &l)| (r.id.as_str(), l)),
    )
}

fn metrics_on(indices: &[usize], preds: &[Label], golds: &[Label]) -> Result<Metrics> {
    let p: Vec<Label> = indices.iter().map(|&i| preds[i]).collect();
    let g: Vec<Label> = indices.iter().map(|&i| golds[i]).collect();
    eval::score_labels(&p, &g)
}

/// Report for fixed predictions, per fold when a fold file is given.
fn report_predictions(
    dir: &Path,
    name: &str,
    corpus: &Corpus,
    preds: &[Label],
    folds: Option<&Path>,
    echo: ConfigEcho,
) -> Result<()> {
    let Ok(golds) = corpus.gold_labels() else {
        log::warn!("corpus lacks gold labels; skipping metrics");
        return Ok(());
    };
    let exp = match folds {
        Some(path) => {
            let plan = FoldPlan::load(&input(path), corpus)?;
            let cv = eval::cross_validate(&plan, |f| metrics_on(&plan.test_indices(f), preds, &golds))?;
            Experiment::from_cv(cv, echo)
        }
        None => Experiment::new(eval::score_labels(preds, &golds)?, echo),
    };
    eval::emit_report(dir, name, &[exp])
}

fn sard_config(a: u8, h: u8, conj: ConjArg) -> Result<SardConfig> {
    let mode = match conj {
        ConjArg::Upos => ConjMode::Upos,
        ConjArg::Deprel => ConjMode::Deprel,
    };
    Ok(SardConfig::new(a, h).map_err(as_argument)?.with_conj_mode(mode))
}

fn as_argument(e: Error) -> Error {
    match e {
        Error::Invalid(m) => Error::Argument(m),
        other => other,
    }
}

fn sard_predictions(corpus: &Corpus, parses: &Path, cfg: &SardConfig) -> Result<Vec<Label>> {
    let trees = depgraph::load_conllu(&input(parses))?;
    depgraph::check_against_corpus(&trees, corpus)?;
    depgraph::sard_predict_corpus(&trees, corpus, cfg)
}

fn cmd_sard(c: &SardCmd) -> Result<()> {
    let cfg = sard_config(c.sard.a, c.sard.h, c.sard.conj_mode)?;
    let corpus = load_corpus(&c.corpus)?;
    let preds = sard_predictions(&corpus, &c.sard.parses, &cfg)?;
    ensure_dir(&c.out)?;
    write_predictions(&c.out, &corpus, &preds)?;
    let echo = ConfigEcho {
        method: format!("sard_a{}_h{}", c.sard.a, c.sard.h),
        settings: settings(c),
        ..ConfigEcho::default()
    };
    report_predictions(&c.out, "sard", &corpus, &preds, c.folds.as_deref(), echo)
}

fn attn_method(name: &str) -> Result<AttnMethod> {
    AttnMethod::parse(name).ok_or_else(|| Error::Argument(format!("unknown attention method {name:?}")))
}

fn attn_options(no_mask_special: bool) -> AttnOptions {
    AttnOptions {
        mask_special: !no_mask_special,
    }
}

fn cmd_attn(c: &AttnCmd) -> Result<()> {
    let method = attn_method(&c.method)?;
    let corpus = load_corpus(&c.corpus)?;
    let pack = TensorPack::open(&input(&c.pack.pack))?;
    let opts = attn_options(c.pack.no_mask_special);
    let preds = attnmap::predict_corpus(method, &corpus, &pack, c.pack.layer, c.threshold, &opts)?;
    ensure_dir(&c.out)?;
    write_predictions(&c.out, &corpus, &preds)?;
    let echo = ConfigEcho {
        method: method.name().to_string(),
        layer: Some(c.pack.layer),
        threshold: Some(c.threshold),
        settings: settings(c),
        ..ConfigEcho::default()
    };
    report_predictions(&c.out, method.name(), &corpus, &preds, c.folds.as_deref(), echo)
}

fn cmd_sweep(c: &SweepCmd) -> Result<()> {
    let method = attn_method(&c.method)?;
    let d = method.default_range();
    let range = ThresholdRange::new(c.lo.unwrap_or(d.lo), c.hi.unwrap_or(d.hi), c.step.unwrap_or(d.step));
    let corpus = load_corpus(&c.corpus)?;
    let pack = TensorPack::open(&input(&c.pack.pack))?;
    let rows = attnmap::sweep_thresholds(
        method,
        &corpus,
        &pack,
        c.pack.layer,
        &range,
        &attn_options(c.pack.no_mask_special),
    )?;
    let mut s = settings(c);
    s.insert("lo".into(), range.lo.to_string());
    s.insert("hi".into(), range.hi.to_string());
    s.insert("step".into(), range.step.to_string());
    let results: Vec<Experiment> = rows
        .into_iter()
        .map(|r| {
            Experiment::new(
                r.metrics,
                ConfigEcho {
                    method: method.name().to_string(),
                    layer: Some(c.pack.layer),
                    threshold: Some(r.threshold),
                    settings: s.clone(),
                    ..ConfigEcho::default()
                },
            )
        })
        .collect();
    eval::emit_report(&c.out, &format!("sweep_{}_L{}", method.name(), c.pack.layer), &results)
}

fn labels_for(corpus: &Corpus, path: &Path) -> Result<Vec<Label>> {
    let map = corpus::load_label_file(&input(path))?;
    corpus
        .records()
        .iter()
        .map(|r| {
            map.get(&r.id)
                .copied()
                .ok_or_else(|| Error::MissingRecord(format!("{} in {}", r.id, path.display())))
        })
        .collect()
}

fn cmd_pairgen(c: &PairgenCmd) -> Result<()> {
    let corpus = load_corpus(&c.corpus)?;
    let (labels, source) = match &c.labels {
        Some(p) => (labels_for(&corpus, p)?, LabelSource::Silver(c.silver_name.clone())),
        None => (corpus.gold_labels()?, LabelSource::Gold),
    };
    let n = c.n_pairs.unwrap_or(corpus.len());
    let (pairs, stats) = pairgen::generate_pairs(&labels, n, c.seed)?;
    let sets = pairgen::split_pointwise(&pairs, source.clone())?;
    ensure_dir(&c.out)?;
    pairgen::write_pairs(&c.out.join("pairs.tsv"), &pairs, &corpus)?;
    pairgen::write_sets(&c.out.join("sets.tsv"), &sets, &corpus)?;
    let report = PairReport::new(stats, &source, c.seed);
    let path = c.out.join("pairgen.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn parse_source(s: &str) -> Result<LabelSource> {
    match s {
        "gold" => Ok(LabelSource::Gold),
        _ => s
            .strip_prefix("silver:")
            .filter(|m| !m.is_empty())
            .map(|m| LabelSource::Silver(m.to_string()))
            .ok_or_else(|| Error::Argument(format!("label source must be gold or silver:<method>, got {s:?}"))),
    }
}

fn cmd_train(c: &TrainCmd) -> Result<()> {
    let (cfg, hyper) = c.estimator.config(c.pi_plus)?;
    let source = parse_source(&c.label_source)?;
    let corpus = load_corpus(&c.corpus)?;
    let pack = TensorPack::open(&input(&c.pack))?;
    let features = FeatureTable::from_pack(&pack, &corpus, c.emb_layer)?;
    let mut sets = pairgen::read_sets(&input(&c.sets), &corpus, source.clone())?;
    sets.pi_plus = Some(c.pi_plus);
    let dev = DevData {
        sets: c
            .dev_sets
            .as_ref()
            .map(|p| pairgen::read_sets(&input(p), &corpus, source.clone()))
            .transpose()?,
        labeled: c
            .dev_labels
            .as_ref()
            .map(|p| -> Result<_> {
                let map = corpus::load_label_file(&input(p))?;
                let mut idx = Vec::with_capacity(map.len());
                let mut labels = Vec::with_capacity(map.len());
                for (id, l) in map {
                    idx.push(corpus.index_of(&id).ok_or_else(|| Error::MissingRecord(id.clone()))?);
                    labels.push(l);
                }
                Ok((idx, labels))
            })
            .transpose()?,
    };
    let out = riskmin::train(&sets, &features, &cfg, &hyper, &dev)?;
    ensure_dir(&c.out)?;
    out.trained.save(&c.out.join("head.json"))?;
    riskmin::write_log(&c.out.join("train_log.jsonl"), &out.log)
}

fn cmd_eval(c: &EvalCmd) -> Result<()> {
    let corpus = load_corpus(&c.corpus)?;
    let golds = corpus.gold_labels()?;
    let mut echo = ConfigEcho {
        method: c.name.clone(),
        settings: settings(c),
        ..ConfigEcho::default()
    };
    let preds = match (&c.pred, &c.head) {
        (Some(p), None) => labels_for(&corpus, p)?,
        (None, Some(h)) => {
            let trained = TrainedHead::load(&input(h))?;
            let pack = TensorPack::open(&input(c.pack.as_ref().expect("required by clap")))?;
            let features = FeatureTable::from_pack(&pack, &corpus, c.emb_layer)?;
            if features.dim() != trained.head.dim() {
                return Err(Error::SizeMismatch(format!(
                    "head expects {} features, pack yields {}",
                    trained.head.dim(),
                    features.dim()
                )));
            }
            echo.pi_plus = Some(trained.meta.estimator.pi_plus);
            echo.seed = Some(trained.meta.seed);
            let all: Vec<usize> = (0..corpus.len()).collect();
            riskmin::predict(&trained.head, &features, &all)?
        }
        _ => return Err(Error::Argument("give exactly one of --pred or --head".into())),
    };
    ensure_dir(&c.out)?;
    write_predictions(&c.out, &corpus, &preds)?;
    eval::emit_report(&c.out, &c.name, &[Experiment::new(eval::score_labels(&preds, &golds)?, echo)])
}

fn require<'a, T>(v: &'a Option<T>, flag: &str, pipeline: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Argument(format!("--{flag} is required for this {pipeline} run")))
}

fn cmd_xval(c: &XvalCmd) -> Result<()> {
    let corpus = load_corpus(&c.corpus)?;
    let golds = corpus.gold_labels()?;
    let plan = match &c.folds {
        Some(p) => FoldPlan::load(&input(p), &corpus)?,
        None => corpus::make_folds(&corpus, c.k, c.fold_seed)?,
    };
    ensure_dir(&c.out)?;
    plan.write(&c.out.join("folds.tsv"), &corpus)?;

    let sard = || -> Result<(Vec<Label>, String)> {
        let cfg = sard_config(c.a, c.h, c.conj_mode)?;
        let parses = require(&c.parses, "parses", "sard")?;
        Ok((sard_predictions(&corpus, parses, &cfg)?, format!("sard_a{}_h{}", c.a, c.h)))
    };
    let attn = || -> Result<(Vec<Label>, String)> {
        let method = attn_method(require(&c.attn_method, "attn-method", "attention")?)?;
        let threshold = *require(&c.threshold, "threshold", "attention")?;
        let pack = TensorPack::open(&input(require(&c.pack, "pack", "attention")?))?;
        let preds =
            attnmap::predict_corpus(method, &corpus, &pack, c.layer, threshold, &attn_options(c.no_mask_special))?;
        Ok((preds, method.name().to_string()))
    };
    let base = settings(c);

    let results = match c.pipeline {
        Pipeline::Sard | Pipeline::Attn => {
            let (preds, name) = if matches!(c.pipeline, Pipeline::Sard) { sard()? } else { attn()? };
            let cv = eval::cross_validate(&plan, |f| metrics_on(&plan.test_indices(f), &preds, &golds))?;
            let echo = ConfigEcho {
                method: name,
                layer: matches!(c.pipeline, Pipeline::Attn).then_some(c.layer),
                threshold: c.threshold.filter(|_| matches!(c.pipeline, Pipeline::Attn)),
                settings: base,
                ..ConfigEcho::default()
            };
            vec![Experiment::from_cv(cv, echo)]
        }
        Pipeline::Train => {
            let est = EstimatorArgs {
                estimator: require(&c.estimator, "estimator", "train")?.clone(),
                theta: None,
                theta_prime: None,
                rates_mode: c.rates_mode,
                ema_decay: 0.99,
                lambda_max: 1.0,
                ramp_epochs: 5,
                epochs: c.epochs,
                batch_size: c.batch_size,
                lr: c.lr,
                dropout: c.dropout,
                seed: c.seed,
            };
            let (labels, source) = match c.label_source {
                SourceArg::Gold => (golds.clone(), LabelSource::Gold),
                SourceArg::Sard => {
                    let (p, n) = sard()?;
                    (p, LabelSource::Silver(n))
                }
                SourceArg::Attn => {
                    let (p, n) = attn()?;
                    (p, LabelSource::Silver(n))
                }
            };
            let pack = TensorPack::open(&input(require(&c.pack, "pack", "train")?))?;
            let features = FeatureTable::from_pack(&pack, &corpus, c.emb_layer)?;
            let mut results = Vec::new();
            for &pi in &c.pi_plus {
                let (cfg, hyper) = est.config(pi)?;
                let runner = |f: usize| -> Result<Metrics> {
                    let seed = c.seed.wrapping_add(f as u64);
                    let (tr, dv) = corpus::split_train_dev(&plan.train_indices(f), c.dev_fraction, seed)?;
                    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
                    let (pairs, _) = pairgen::generate_pairs_for(&tr, &pick(&tr), tr.len(), seed)?;
                    let mut sets = pairgen::split_pointwise(&pairs, source.clone())?;
                    sets.pi_plus = Some(pi);
                    let (dev_pairs, _) = pairgen::generate_pairs_for(&dv, &pick(&dv), dv.len(), seed ^ 1)?;
                    let dev = DevData {
                        sets: Some(pairgen::split_pointwise(&dev_pairs, source.clone())?),
                        labeled: Some((dv.clone(), pick(&dv))),
                    };
                    let fold_cfg = EstimatorConfig { seed, ..cfg.clone() };
                    let out = riskmin::train(&sets, &features, &fold_cfg, &hyper, &dev)?;
                    let test = plan.test_indices(f);
                    let preds = riskmin::predict(&out.trained.head, &features, &test)?;
                    let g: Vec<Label> = test.iter().map(|&i| golds[i]).collect();
                    eval::score_labels(&preds, &g)
                };
                let cv = eval::cross_validate(&plan, runner)?;
                let mut s = base.clone();
                s.insert("label_source".into(), source.to_string());
                results.push(Experiment::from_cv(
                    cv,
                    ConfigEcho {
                        method: cfg.method.name().to_string(),
                        pi_plus: Some(pi),
                        seed: Some(c.seed),
                        settings: s,
                        ..ConfigEcho::default()
                    },
                ));
            }
            results
        }
    };
    eval::emit_report(&c.out, "xval", &results)
}

fn cmd_report(c: &ReportCmd) -> Result<()> {
    let mut all = Vec::new();
    for p in &c.inputs {
        all.extend(eval::load_report(&input(p))?);
    }
    eval::emit_report(&c.out, &c.name, &all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_yield_to_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "# defaults\na = 2\nh=2\nconj_mode=deprel\nlenient=true\n").unwrap();
        let argv: Vec<OsString> = ["relsift", "--config", cfg.to_str().unwrap(), "sard", "--a", "1"]
            .iter()
            .map(OsString::from)
            .collect();
        let out = with_config_defaults(argv).unwrap();
        let out: Vec<String> = out.iter().map(|a| a.to_string_lossy().into_owned()).collect();
        assert_eq!(
            out[3..],
            ["sard", "--h", "2", "--conj-mode", "deprel", "--lenient", "--a", "1"].map(String::from)
        );
    }

    #[test]
    fn source_parsing() {
        assert_eq!(parse_source("gold").unwrap(), LabelSource::Gold);
        assert_eq!(parse_source("silver:conex").unwrap(), LabelSource::Silver("conex".into()));
        assert!(parse_source("silver:").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
