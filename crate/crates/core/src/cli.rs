//! Command-line front end. Every subcommand computes all of its outputs in
//! memory first; files are written only once nothing can fail any more.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::aggregation::{
    evaluate, group_vs_group_kappa, pool_readers, subgroup, AgeBand, PooledReaderPairs, SubgroupFilter,
};
use crate::data::{
    kfold_split, parse_predictions, parse_readers, summarize, synth_generate, synth_readers,
    write_predictions, write_readers, Arm, ClassLabel, Dataset, DatasetSummary, FoldUnit,
    PredictionRecord, ReaderGroup, ReaderSynthSpec, SynthSpec,
};
use crate::fusion::{
    grad_check_random, make_toy_data, read_feature_bundle, train_head, FusionError, GradCheckReport,
    HeadDims, HeadParams, ToyData, ToySpec, TrainSpec,
};
use crate::metrics::{build_report, EvalLevel, Evaluation, MetricReport, ReportInput};
use crate::report::{
    cm_csv, curves_svg, to_json_bytes, Envelope, InputDigest, Report, POOLED_PAIRING_NOTE,
    WEIGHTED_N_NOTE,
};
use crate::stats::{
    bootstrap_auc_test, bowker_test, delong_test_class, kappa_test, PairedPredictions, TestResult,
};

pub const DEFAULT_SEED: u64 = 20240601;
/// Gradient-check threshold of `fusion-demo --grad-check`.
pub const GRAD_CHECK_TOL: f64 = 1e-4;
const GRAD_CHECK_CONFIGS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("degenerate result in strict mode: {0}")]
    Degenerate(String),
    #[error("{0}")]
    Divergence(String),
    #[error("self-check failed: {0}")]
    SelfCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Degenerate(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::SelfCheck(_) => 4,
        }
    }
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "gjeval", version, about = "Evaluate three-class diagnostic classifiers")]
pub struct Cli {
    /// Worker threads for parallel sections (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Embed the generation time in reports.
    #[arg(long, global = true)]
    pub stamp: bool,
    /// Also render curves as SVG.
    #[arg(long, global = true)]
    pub svg: bool,
    /// Fail (exit 2) on degenerate metrics or tests; reject unnormalized probabilities.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Metrics, intervals and curves for one prediction file.
    Evaluate(EvaluateArgs),
    /// Paired tests between two prediction files.
    Compare(CompareArgs),
    /// Reader-study analysis against model predictions.
    Readers(ReadersArgs),
    /// Seeded k-fold split with per-fold metrics.
    Kfold(KfoldArgs),
    /// Write a synthetic prediction file.
    Synth(SynthArgs),
    /// Train the fusion head on synthetic or supplied features.
    FusionDemo(FusionDemoArgs),
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value = "image")]
    pub level: EvalLevel,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub sex: Option<String>,
    #[arg(long)]
    pub age_band: Option<AgeBand>,
    #[arg(long)]
    pub center: Option<String>,
    #[arg(long)]
    pub modality: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassChoice {
    Aegja,
    Eegja,
    Control,
    All,
}

impl ClassChoice {
    fn classes(self) -> Vec<ClassLabel> {
        match self {
            ClassChoice::Aegja => vec![ClassLabel::Aegja],
            ClassChoice::Eegja => vec![ClassLabel::Eegja],
            ClassChoice::Control => vec![ClassLabel::Control],
            ClassChoice::All => ClassLabel::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub pred_a: PathBuf,
    #[arg(long)]
    pub pred_b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub class: ClassChoice,
    /// Bootstrap replicates for an additional AUC test per class (0 = off).
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReadersArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub readers: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KfoldArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value = "patient")]
    pub by: FoldUnit,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Patients per class, in the order A-EGJA,E-EGJA,control.
    #[arg(long, default_value = "44,18,50", value_delimiter = ',')]
    pub patients: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub images_min: usize,
    #[arg(long, default_value_t = 20)]
    pub images_max: usize,
    /// Logit separation of the true class; `inf` gives one-hot vectors.
    #[arg(long, default_value_t = 3.0)]
    pub sep: f64,
    #[arg(long, default_value_t = 1.0)]
    pub image_sd: f64,
    #[arg(long, default_value_t = 0.5)]
    pub patient_sd: f64,
    #[arg(long)]
    pub no_metadata: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a reader file for the generated images.
    #[arg(long)]
    pub readers_out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub readers_per_group: usize,
}

#[derive(Debug, Args)]
pub struct FusionDemoArgs {
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Channels of the convolutional branch (default: twice `--dim`).
    #[arg(long)]
    pub res_dim: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    /// Class-centroid separation in noise standard deviations.
    #[arg(long, default_value_t = 3.0)]
    pub margin: f64,
    #[arg(long)]
    pub shuffle_labels: bool,
    /// Train on a feature bundle CSV instead of synthetic clusters.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub grad_check: bool,
}

/// Files to write plus a short human summary for standard output.
#[derive(Debug, Default, Clone)]
pub struct Outputs {
    pub files: Vec<(PathBuf, Vec<u8>)>,
    pub summary: String,
}

impl Outputs {
    fn add(&mut self, dir: &Path, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((dir.join(name), bytes.into()));
    }

    pub fn write_all(&self) -> std::io::Result<()> {
        for (path, bytes) in &self.files {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(path, bytes)?;
        }
        Ok(())
    }
}

struct Global {
    stamp: bool,
    svg: bool,
    strict: bool,
}

/// Runs a parsed command line on a dedicated worker pool.
pub fn run(cli: &Cli) -> Result<Outputs, CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(input_err)?;
    let g = Global {
        stamp: cli.stamp,
        svg: cli.svg,
        strict: cli.strict,
    };
    pool.install(|| match &cli.command {
        Command::Evaluate(a) => run_evaluate(a, &g),
        Command::Compare(a) => run_compare(a, &g),
        Command::Readers(a) => run_readers(a, &g),
        Command::Kfold(a) => run_kfold(a, &g),
        Command::Synth(a) => run_synth(a),
        Command::FusionDemo(a) => run_fusion_demo(a, &g),
    })
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

struct Loaded {
    dataset: Dataset,
    renormalized: usize,
    digest: InputDigest,
}

fn load_predictions(role: &str, path: &Path, strict: bool) -> Result<Loaded, CliError> {
    let bytes = read_input(path)?;
    let parsed = parse_predictions(bytes.as_slice(), strict)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(Loaded {
        dataset: parsed.dataset,
        renormalized: parsed.renormalized,
        digest: InputDigest::new(role, path, &bytes),
    })
}

fn check_strict(strict: bool, warnings: &[String]) -> Result<(), CliError> {
    if strict && !warnings.is_empty() {
        return Err(CliError::Degenerate(warnings.join("; ")));
    }
    Ok(())
}

/// Curve CSVs (and optional SVGs) of an evaluation.
fn curve_files(out: &mut Outputs, dir: &Path, ev: &Evaluation, svg: bool, prefix: &str) {
    if let Some(r) = &ev.roc_micro {
        out.add(dir, &format!("{prefix}roc_micro.csv"), r.to_csv());
    }
    if let Some(p) = &ev.pr_micro {
        out.add(dir, &format!("{prefix}pr_micro.csv"), p.to_csv());
    }
    for c in ClassLabel::ALL {
        if let Some(r) = &ev.roc_per_class[c.index()] {
            out.add(dir, &format!("{prefix}roc_{}.csv", c.slug()), r.to_csv());
        }
        if let Some(p) = &ev.pr_per_class[c.index()] {
            out.add(dir, &format!("{prefix}pr_{}.csv", c.slug()), p.to_csv());
        }
    }
    if svg {
        for (name, micro, per_class) in [
            ("roc", &ev.roc_micro, &ev.roc_per_class),
            ("pr", &ev.pr_micro, &ev.pr_per_class),
        ] {
            let mut series = Vec::new();
            if let Some(m) = micro {
                series.push(("micro".to_string(), m));
            }
            for c in ClassLabel::ALL {
                if let Some(s) = &per_class[c.index()] {
                    series.push((c.as_str().to_string(), s));
                }
            }
            if !series.is_empty() {
                let title = format!("{} curves", name.to_uppercase());
                out.add(dir, &format!("{prefix}{name}.svg"), curves_svg(&title, &series));
            }
        }
    }
}

fn fmt_n(n: f64) -> String {
    if n.fract() == 0.0 {
        format!("{n}")
    } else {
        format!("{n:.3}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

#[derive(Serialize)]
struct EvaluateBody<'a> {
    level: EvalLevel,
    dataset: DatasetSummary,
    renormalized_rows: usize,
    report: &'a MetricReport,
}

fn run_evaluate(a: &EvaluateArgs, g: &Global) -> Result<Outputs, CliError> {
    let loaded = load_predictions("pred", &a.pred, g.strict)?;
    let filter = SubgroupFilter {
        sex: a.sex.clone(),
        age_band: a.age_band,
        center: a.center.clone(),
        modality: a.modality.clone(),
    };
    let ds = if filter == SubgroupFilter::default() {
        loaded.dataset
    } else {
        subgroup(&loaded.dataset, &filter).map_err(input_err)?
    };
    let ev = evaluate(&ds, a.level).map_err(input_err)?;
    check_strict(g.strict, &ev.report.warnings)?;

    let config = json!({
        "level": a.level,
        "seed": a.seed,
        "strict": g.strict,
        "svg": g.svg,
        "filter": {
            "sex": a.sex,
            "age_band": a.age_band.map(|b| b.as_str()),
            "center": a.center,
            "modality": a.modality,
        },
    });
    let mut envelope = Envelope::new("evaluate", config, vec![loaded.digest], g.stamp);
    if a.level == EvalLevel::Weighted {
        envelope.notes.push(WEIGHTED_N_NOTE.into());
    }
    let body = EvaluateBody {
        level: a.level,
        dataset: summarize(&ds),
        renormalized_rows: loaded.renormalized,
        report: &ev.report,
    };
    let mut out = Outputs::default();
    out.add(&a.out, "report.json", to_json_bytes(&Report { envelope, body }));
    out.add(&a.out, "cm.csv", cm_csv(&ev.report.confusion_matrix));
    curve_files(&mut out, &a.out, &ev, g.svg, "");
    out.summary = format!(
        "{} level: n={} accuracy={} kappa={} micro AUC={} micro AP={}",
        a.level,
        fmt_n(ev.report.n),
        fmt_opt(ev.report.accuracy()),
        fmt_opt(ev.report.kappa),
        fmt_opt(ev.report.auc_micro),
        fmt_opt(ev.report.ap_micro)
    );
    Ok(out)
}

#[derive(Serialize)]
struct JoinInfo {
    rows_a: usize,
    rows_b: usize,
    matched: usize,
    only_a: usize,
    only_b: usize,
}

#[derive(Serialize)]
struct CompareBody<'a> {
    join: JoinInfo,
    report_a: &'a MetricReport,
    report_b: &'a MetricReport,
    kappa_between: Option<f64>,
    tests: Vec<TestResult>,
    warnings: Vec<String>,
}

fn run_compare(a: &CompareArgs, g: &Global) -> Result<Outputs, CliError> {
    let la = load_predictions("pred_a", &a.pred_a, g.strict)?;
    let lb = load_predictions("pred_b", &a.pred_b, g.strict)?;
    let lookup_b = lb.dataset.image_lookup();
    let mut recs_a = Vec::new();
    let mut recs_b = Vec::new();
    for r in la.dataset.records() {
        if let Some(&rb) = lookup_b.get(r.image_id.as_str()) {
            if rb.truth != r.truth {
                return Err(CliError::Input(format!(
                    "image {:?} has truth {} in one file and {} in the other",
                    r.image_id, r.truth, rb.truth
                )));
            }
            recs_a.push(r.clone());
            recs_b.push(rb.clone());
        }
    }
    if recs_a.is_empty() {
        return Err(CliError::Input("empty join: the files share no image_id".into()));
    }
    let join = JoinInfo {
        rows_a: la.dataset.len(),
        rows_b: lb.dataset.len(),
        matched: recs_a.len(),
        only_a: la.dataset.len() - recs_a.len(),
        only_b: lb.dataset.len() - recs_a.len(),
    };
    let ds_a = Dataset::new(recs_a).map_err(input_err)?;
    let ds_b = Dataset::new(recs_b).map_err(input_err)?;
    let ev_a = evaluate(&ds_a, EvalLevel::Image).map_err(input_err)?;
    let ev_b = evaluate(&ds_b, EvalLevel::Image).map_err(input_err)?;

    let truths: Vec<ClassLabel> = ds_a.records().iter().map(|r| r.truth).collect();
    let pa: Vec<ClassLabel> = ds_a.records().iter().map(PredictionRecord::predicted).collect();
    let pb: Vec<ClassLabel> = ds_b.records().iter().map(PredictionRecord::predicted).collect();
    let probs_a: Vec<[f64; 3]> = ds_a.records().iter().map(|r| r.probs).collect();
    let probs_b: Vec<[f64; 3]> = ds_b.records().iter().map(|r| r.probs).collect();

    let mut warnings = Vec::new();
    let mut tests = Vec::new();
    let paired = PairedPredictions::new(truths.clone(), pa.clone(), pb.clone()).map_err(input_err)?;
    tests.push(bowker_test(&paired));
    for c in a.class.classes() {
        match delong_test_class(&probs_a, &probs_b, &truths, c) {
            Ok(t) => tests.push(t),
            Err(e) => warnings.push(format!("DeLong ({c}) skipped: {e}")),
        }
        if a.bootstrap > 0 {
            let k = c.index();
            let sa: Vec<f64> = probs_a.iter().map(|p| p[k]).collect();
            let sb: Vec<f64> = probs_b.iter().map(|p| p[k]).collect();
            let labels: Vec<bool> = truths.iter().map(|&t| t == c).collect();
            match bootstrap_auc_test(&sa, &sb, &labels, a.bootstrap, a.seed) {
                Ok(mut t) => {
                    t.name = format!("Bootstrap AUC ({c})");
                    tests.push(t);
                }
                Err(e) => warnings.push(format!("bootstrap ({c}) skipped: {e}")),
            }
        }
    }
    let kappa_between = match kappa_test(&pa, &pb) {
        Ok(t) => {
            let k = t.detail.get("kappa").copied();
            tests.push(t);
            k
        }
        Err(e) => {
            warnings.push(format!("kappa skipped: {e}"));
            None
        }
    };
    for t in &tests {
        for f in &t.flags {
            if f.starts_with("degenerate") {
                warnings.push(format!("{}: {f}", t.name));
            }
        }
    }
    let mut strict_warnings = warnings.clone();
    strict_warnings.extend(ev_a.report.warnings.iter().cloned());
    strict_warnings.extend(ev_b.report.warnings.iter().cloned());
    check_strict(g.strict, &strict_warnings)?;

    let config = json!({
        "class": a.class,
        "bootstrap": a.bootstrap,
        "seed": a.seed,
        "strict": g.strict,
        "svg": g.svg,
    });
    let envelope = Envelope::new("compare", config, vec![la.digest, lb.digest], g.stamp);
    let summary = tests
        .iter()
        .map(|t| format!("{}: statistic={:.4} p={:.4}", t.name, t.statistic, t.p_value))
        .collect::<Vec<_>>()
        .join("\n");
    let body = CompareBody {
        join,
        report_a: &ev_a.report,
        report_b: &ev_b.report,
        kappa_between,
        tests,
        warnings,
    };
    let mut out = Outputs::default();
    out.add(&a.out, "report.json", to_json_bytes(&Report { envelope, body }));
    out.add(&a.out, "cm_a.csv", cm_csv(&ev_a.report.confusion_matrix));
    out.add(&a.out, "cm_b.csv", cm_csv(&ev_b.report.confusion_matrix));
    curve_files(&mut out, &a.out, &ev_a, g.svg, "a_");
    curve_files(&mut out, &a.out, &ev_b, g.svg, "b_");
    out.summary = summary;
    Ok(out)
}

#[derive(Serialize)]
struct GroupBody {
    group: ReaderGroup,
    arm: Arm,
    reader_count: usize,
    observations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_elapsed_s: Option<f64>,
    report: MetricReport,
    model_vs_group: Vec<TestResult>,
}

#[derive(Serialize)]
struct KappaEntry {
    a: String,
    b: String,
    kappa: Option<f64>,
}

#[derive(Serialize)]
struct ReadersBody<'a> {
    pairing: &'static str,
    model: &'a MetricReport,
    groups: Vec<GroupBody>,
    group_kappa: Vec<KappaEntry>,
    warnings: Vec<String>,
}

fn group_label(p: &PooledReaderPairs) -> String {
    format!("{}/{}", p.group, p.arm)
}

/// Per-reader one-vs-rest operating points, plus the model's.
fn reader_points_csv(model: &MetricReport, pools: &[PooledReaderPairs]) -> Result<String, CliError> {
    let mut s = String::from("reader_id,group,arm,class,sensitivity,specificity,fpr\n");
    let mut row = |id: &str, group: &str, arm: &str, r: &MetricReport| {
        for c in ClassLabel::ALL {
            let st = r.class(c);
            let sens = st.sensitivity.map(|p| p.value);
            let spec = st.specificity.map(|p| p.value);
            let f = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v}"));
            s.push_str(&format!(
                "{id},{group},{arm},{c},{},{},{}\n",
                f(sens),
                f(spec),
                f(spec.map(|v| 1.0 - v))
            ));
        }
    };
    row("model", "", "", model);
    for p in pools {
        for id in p.reader_ids() {
            let obs: Vec<_> = p.observations.iter().filter(|o| o.reader_id == id).collect();
            let truths: Vec<ClassLabel> = obs.iter().map(|o| o.truth).collect();
            let preds: Vec<ClassLabel> = obs.iter().map(|o| o.reader_pred).collect();
            let ev = build_report(ReportInput {
                level: EvalLevel::Image,
                truths: &truths,
                preds: &preds,
                probs: None,
                weights: None,
            })
            .map_err(input_err)?;
            row(id, p.group.as_str(), p.arm.as_str(), &ev.report);
        }
    }
    Ok(s)
}

fn run_readers(a: &ReadersArgs, g: &Global) -> Result<Outputs, CliError> {
    let model = load_predictions("pred", &a.pred, g.strict)?;
    let reader_bytes = read_input(&a.readers)?;
    let readers = parse_readers(reader_bytes.as_slice())
        .map_err(|e| CliError::Input(format!("{}: {e}", a.readers.display())))?;
    let reader_digest = InputDigest::new("readers", &a.readers, &reader_bytes);
    let model_ev = evaluate(&model.dataset, EvalLevel::Image).map_err(input_err)?;

    let mut pools = Vec::new();
    for group in ReaderGroup::ALL {
        for arm in [Arm::A, Arm::B] {
            if !readers.iter().any(|r| r.group == group && r.arm == arm) {
                continue;
            }
            pools.push(pool_readers(&readers, &model.dataset, group, arm).map_err(input_err)?);
        }
    }
    if pools.is_empty() {
        return Err(CliError::Input("reader file has no responses".into()));
    }

    let mut warnings = Vec::new();
    let mut groups = Vec::new();
    for p in &pools {
        let ev = p.evaluate().map_err(input_err)?;
        let label = group_label(p);
        warnings.extend(ev.report.warnings.iter().map(|w| format!("{label}: {w}")));
        let mut tests = Vec::new();
        match kappa_test(&p.model_preds(), &p.reader_preds()) {
            Ok(mut t) => {
                t.name = format!("Kappa (model vs {label})");
                tests.push(t);
            }
            Err(e) => warnings.push(format!("{label}: kappa skipped: {e}")),
        }
        let paired = PairedPredictions::new(p.truths(), p.model_preds(), p.reader_preds()).map_err(input_err)?;
        let mut b = bowker_test(&paired);
        b.name = format!("McNemar-Bowker (model vs {label})");
        tests.push(b);
        for t in &tests {
            if t.is_degenerate() {
                warnings.push(format!("{}: degenerate", t.name));
            }
        }
        groups.push(GroupBody {
            group: p.group,
            arm: p.arm,
            reader_count: p.reader_count,
            observations: p.observations.len(),
            mean_elapsed_s: p.mean_elapsed_s,
            report: ev.report,
            model_vs_group: tests,
        });
    }

    let mut group_kappa = Vec::new();
    for (i, x) in pools.iter().enumerate() {
        for y in &pools[i + 1..] {
            group_kappa.push(KappaEntry {
                a: group_label(x),
                b: group_label(y),
                kappa: group_vs_group_kappa(x, y),
            });
        }
    }
    check_strict(g.strict, &warnings)?;

    // square agreement matrix: model first, then every (group, arm)
    let labels: Vec<String> = std::iter::once("model".to_string())
        .chain(pools.iter().map(group_label))
        .collect();
    let model_kappa: Vec<Option<f64>> = groups
        .iter()
        .map(|gb| gb.model_vs_group.first().and_then(|t| t.detail.get("kappa").copied()))
        .collect();
    let mut matrix = format!(",{}\n", labels.join(","));
    for (i, li) in labels.iter().enumerate() {
        matrix.push_str(li);
        for j in 0..labels.len() {
            let v = match (i, j) {
                (0, 0) => Some(1.0),
                (0, j) => model_kappa[j - 1],
                (i, 0) => model_kappa[i - 1],
                (i, j) if i == j => None,
                (i, j) => group_vs_group_kappa(&pools[i - 1], &pools[j - 1]),
            };
            matrix.push(',');
            if let Some(v) = v {
                matrix.push_str(&format!("{v}"));
            }
        }
        matrix.push('\n');
    }

    let points = reader_points_csv(&model_ev.report, &pools)?;
    let config = json!({ "strict": g.strict, "svg": g.svg });
    let mut envelope = Envelope::new("readers", config, vec![model.digest, reader_digest], g.stamp);
    envelope.notes.push(POOLED_PAIRING_NOTE.into());
    let summary = groups
        .iter()
        .map(|gb| {
            format!(
                "{}/{}: readers={} n={} accuracy={}",
                gb.group,
                gb.arm,
                gb.reader_count,
                gb.observations,
                fmt_opt(gb.report.accuracy())
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    let body = ReadersBody {
        pairing: "pooled",
        model: &model_ev.report,
        groups,
        group_kappa,
        warnings,
    };
    let mut out = Outputs::default();
    out.add(&a.out, "report.json", to_json_bytes(&Report { envelope, body }));
    out.add(&a.out, "kappa_matrix.csv", matrix);
    out.add(&a.out, "reader_points.csv", points);
    out.summary = summary;
    Ok(out)
}

#[derive(Serialize)]
struct FoldBody {
    fold: usize,
    units: usize,
    patients: usize,
    images: usize,
    report: MetricReport,
}

#[derive(Serialize)]
struct KfoldBody {
    k: usize,
    unit: FoldUnit,
    seed: u64,
    fold_sizes: Vec<usize>,
    folds: Vec<FoldBody>,
    accuracy_mean: Option<f64>,
    accuracy_sd: Option<f64>,
}

fn run_kfold(a: &KfoldArgs, g: &Global) -> Result<Outputs, CliError> {
    let loaded = load_predictions("pred", &a.pred, g.strict)?;
    let ds = &loaded.dataset;
    let spec = kfold_split(ds, a.k, a.by, a.seed).map_err(input_err)?;
    let record_folds = spec.record_folds(ds);
    let sizes = spec.fold_sizes();
    let mut folds = Vec::new();
    let mut warnings = Vec::new();
    for (f, positions) in record_folds.iter().enumerate() {
        let sub = ds.select(positions).map_err(input_err)?;
        let ev = evaluate(&sub, EvalLevel::Image).map_err(input_err)?;
        warnings.extend(ev.report.warnings.iter().map(|w| format!("fold {f}: {w}")));
        folds.push(FoldBody {
            fold: f,
            units: sizes[f],
            patients: sub.patient_count(),
            images: sub.len(),
            report: ev.report,
        });
    }
    check_strict(g.strict, &warnings)?;
    let accs: Vec<f64> = folds.iter().filter_map(|f| f.report.accuracy()).collect();
    let (mean, sd) = if accs.is_empty() {
        (None, None)
    } else {
        let m = accs.iter().sum::<f64>() / accs.len() as f64;
        let sd = (accs.len() > 1).then(|| {
            (accs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (accs.len() - 1) as f64).sqrt()
        });
        (Some(m), sd)
    };

    let mut csv = String::from("image_id,patient_id,fold\n");
    for (i, r) in ds.records().iter().enumerate() {
        csv.push_str(&format!("{},{},{}\n", r.image_id, r.patient_id, spec.fold_of_record(ds, i)));
    }
    let config = json!({ "k": a.k, "by": a.by, "seed": a.seed, "strict": g.strict });
    let envelope = Envelope::new("kfold", config, vec![loaded.digest], g.stamp);
    let body = KfoldBody {
        k: a.k,
        unit: a.by,
        seed: a.seed,
        fold_sizes: sizes.clone(),
        folds,
        accuracy_mean: mean,
        accuracy_sd: sd,
    };
    let mut out = Outputs::default();
    out.add(&a.out, "folds.csv", csv);
    out.add(&a.out, "report.json", to_json_bytes(&Report { envelope, body }));
    out.summary = format!(
        "{} folds by {}: sizes {:?}, mean accuracy {}",
        a.k,
        a.by,
        sizes,
        fmt_opt(mean)
    );
    Ok(out)
}

fn run_synth(a: &SynthArgs) -> Result<Outputs, CliError> {
    if a.patients.len() != 3 {
        return Err(CliError::Input("--patients takes three counts".into()));
    }
    if a.images_min == 0 || a.images_max < a.images_min {
        return Err(CliError::Input("need 1 <= images-min <= images-max".into()));
    }
    if a.sep.is_nan() || !a.image_sd.is_finite() || a.image_sd < 0.0 || !a.patient_sd.is_finite() || a.patient_sd < 0.0 {
        return Err(CliError::Input("separation and standard deviations must be valid numbers".into()));
    }
    let spec = SynthSpec {
        patients_per_class: [a.patients[0], a.patients[1], a.patients[2]],
        images_min: a.images_min,
        images_max: a.images_max,
        separation: a.sep,
        image_sd: a.image_sd,
        patient_sd: a.patient_sd,
        metadata: !a.no_metadata,
        seed: a.seed,
    };
    if spec.patients_per_class.iter().sum::<usize>() == 0 {
        return Err(CliError::Input("at least one patient is required".into()));
    }
    let ds = synth_generate(&spec);
    let mut buf = Vec::new();
    write_predictions(&ds, &mut buf).map_err(input_err)?;
    let mut out = Outputs::default();
    out.files.push((a.out.clone(), buf));
    if let Some(path) = &a.readers_out {
        let rs = synth_readers(
            &ds,
            &ReaderSynthSpec {
                readers_per_group: a.readers_per_group,
                seed: a.seed,
                ..ReaderSynthSpec::default()
            },
        );
        let mut rb = Vec::new();
        write_readers(&rs, &mut rb).map_err(input_err)?;
        out.files.push((path.clone(), rb));
    }
    out.summary = format!("{} patients, {} images", ds.patient_count(), ds.len());
    Ok(out)
}

#[derive(Serialize)]
struct FusionBody<'a> {
    dims: HeadDims,
    train_samples: usize,
    test_samples: usize,
    epochs: usize,
    steps: usize,
    final_train_loss: f64,
    final_test_loss: f64,
    final_test_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    grad_check: Option<GradCheckReport>,
    report: &'a MetricReport,
}

fn fusion_err(e: FusionError) -> CliError {
    match e {
        FusionError::Divergence { .. } => CliError::Divergence(e.to_string()),
        other => CliError::Input(other.to_string()),
    }
}

/// Seeded train/test split of supplied features.
fn split_features(rows: Vec<crate::fusion::LabeledBundle>, seed: u64) -> Result<(ToyData, HeadDims), CliError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if rows.len() < 2 {
        return Err(CliError::Input("feature file needs at least 2 rows".into()));
    }
    let dims = (rows[0].bundle.f_cls.len(), rows[0].bundle.f_grid_res.c);
    if rows
        .iter()
        .any(|r| (r.bundle.f_cls.len(), r.bundle.f_grid_res.c) != dims)
    {
        return Err(CliError::Input("feature rows have inconsistent widths".into()));
    }
    let mut samples: Vec<_> = rows.into_iter().map(|r| (r.bundle, r.label.index())).collect();
    samples.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let n_test = (samples.len() / 5).max(1);
    let test = samples.split_off(samples.len() - n_test);
    Ok((
        ToyData { train: samples, test },
        HeadDims {
            c: dims.0,
            c_res: dims.1,
            hidden: 0,
        },
    ))
}

fn run_fusion_demo(a: &FusionDemoArgs, g: &Global) -> Result<Outputs, CliError> {
    let mut inputs = Vec::new();
    let (data, dims) = match &a.features {
        Some(path) => {
            let bytes = read_input(path)?;
            let rows = read_feature_bundle(bytes.as_slice()).map_err(input_err)?;
            inputs.push(InputDigest::new("features", path, &bytes));
            let (data, d) = split_features(rows, a.seed)?;
            (data, HeadDims { hidden: a.hidden, ..d })
        }
        None => {
            let dims = HeadDims {
                c: a.dim,
                c_res: a.res_dim.unwrap_or(2 * a.dim),
                hidden: a.hidden,
            };
            let toy = ToySpec {
                dims,
                samples: a.samples,
                margin: a.margin,
                shuffle_labels: a.shuffle_labels,
                seed: a.seed,
                ..ToySpec::default()
            };
            (make_toy_data(&toy).map_err(fusion_err)?, dims)
        }
    };

    let grad_check = if a.grad_check {
        let r = grad_check_random(GRAD_CHECK_CONFIGS, a.seed).map_err(fusion_err)?;
        if r.max_rel_err.is_nan() || r.max_rel_err >= GRAD_CHECK_TOL {
            return Err(CliError::SelfCheck(format!(
                "gradient check max relative error {:e} at {} (threshold {GRAD_CHECK_TOL:e})",
                r.max_rel_err, r.worst_param
            )));
        }
        Some(r)
    } else {
        None
    };

    let spec = TrainSpec {
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        dropout: a.dropout,
        seed: a.seed,
    };
    let params = HeadParams::init(dims, a.dropout, a.seed).map_err(fusion_err)?;
    let outcome = train_head(params, &data, &spec).map_err(fusion_err)?;
    let last = outcome.log.last().expect("log has the initial row").clone();
    let report = &outcome.evaluation.report;

    // held-out predictions in the evaluation file format
    let test_probs: Vec<[f64; 3]> = data
        .test
        .iter()
        .map(|(b, _)| crate::fusion::forward(b, &outcome.params, None).map(|f| f.probs))
        .collect::<Result<_, _>>()
        .map_err(fusion_err)?;
    let records: Vec<PredictionRecord> = data
        .test
        .iter()
        .zip(&test_probs)
        .enumerate()
        .map(|(i, ((_, t), p))| {
            let id = format!("S{:05}", i + 1);
            PredictionRecord::new(id.clone(), id, ClassLabel::ALL[*t], *p)
        })
        .collect();
    let mut pred_csv = Vec::new();
    write_predictions(&Dataset::new(records).map_err(input_err)?, &mut pred_csv).map_err(input_err)?;

    let config = json!({
        "dim": dims.c,
        "res_dim": dims.c_res,
        "hidden": dims.hidden,
        "epochs": a.epochs,
        "batch": a.batch,
        "lr": a.lr,
        "dropout": a.dropout,
        "samples": a.samples,
        "margin": a.margin,
        "shuffle_labels": a.shuffle_labels,
        "seed": a.seed,
        "grad_check": a.grad_check,
        "features": a.features.is_some(),
    });
    let envelope = Envelope::new("fusion-demo", config, inputs, g.stamp);
    let summary = format!(
        "trained {} epochs ({} steps): held-out accuracy {:.4}, loss {:.4}{}",
        a.epochs,
        last.steps,
        last.test_accuracy,
        last.test_loss,
        grad_check
            .as_ref()
            .map(|r| format!("\ngradient check: max relative error {:e} over {} configs", r.max_rel_err, r.configs))
            .unwrap_or_default()
    );
    let body = FusionBody {
        dims,
        train_samples: data.train.len(),
        test_samples: data.test.len(),
        epochs: a.epochs,
        steps: last.steps,
        final_train_loss: last.train_loss,
        final_test_loss: last.test_loss,
        final_test_accuracy: last.test_accuracy,
        grad_check,
        report,
    };
    let mut out = Outputs::default();
    out.add(&a.out, "report.json", to_json_bytes(&Report { envelope, body }));
    out.add(&a.out, "params.json", format!("{}\n", outcome.params.to_json()));
    out.add(&a.out, "training_log.csv", outcome.log_csv());
    out.add(&a.out, "heldout_predictions.csv", pred_csv);
    curve_files(&mut out, &a.out, &outcome.evaluation, g.svg, "");
    out.summary = summary;
    Ok(out)
}
