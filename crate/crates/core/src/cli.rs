//! Command-line front end: config resolution, pipeline wiring and artifacts.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{HyperParams, Variant};
use crate::data::synthetic::{generate, SyntheticConfig};
use crate::data::{load_interactions, InteractionLog, UserItemIndex};
use crate::error::{Error, Result};
use crate::eval::{
    cohort_reports, evaluate_protocol, mean_short_likelihood, sal_case_statistics, sparsity_cohorts, CaseStatistics,
    EvalReport,
};
use crate::gradcheck::{gradient_check, CheckSettings, TensorCheck};
use crate::pipeline::{build_views, prepare, DataConfig, Prepared, Views};
use crate::training::{draw_batch, Checkpoint, Trainer};

/// Noise ratios swept by `noise-test`.
pub const NOISE_RATIOS: [f64; 5] = [0.0, 0.05, 0.10, 0.15, 0.20];

#[derive(Debug, Parser)]
#[command(name = "selfgnn", version, about = "Self-supervised graph neural network for sequential recommendation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter and split the dataset, then summarise the interval graphs.
    Prepare(CommonArgs),
    /// Train one model and write checkpoints plus the epoch history.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the test protocol.
    Evaluate(CommonArgs),
    /// Train and evaluate every ablation variant.
    Ablate(CommonArgs),
    /// Train and evaluate across injected-noise ratios.
    NoiseTest(CommonArgs),
    /// Report metrics per training-sparsity cohort.
    Sparsity(CommonArgs),
    /// Compare analytic and finite-difference gradients per parameter.
    Gradcheck(CommonArgs),
    /// Contrast planted noisy interactions under models with and without SAL.
    CaseStudy(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prepare(_) => "prepare",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
            Command::NoiseTest(_) => "noise-test",
            Command::Sparsity(_) => "sparsity",
            Command::Gradcheck(_) => "gradcheck",
            Command::CaseStudy(_) => "case-study",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Prepare(a)
            | Command::Train(a)
            | Command::Evaluate(a)
            | Command::Ablate(a)
            | Command::NoiseTest(a)
            | Command::Sparsity(a)
            | Command::Gradcheck(a)
            | Command::CaseStudy(a) => a,
        }
    }
}

#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// `user,item,timestamp[,rating]` CSV, or `synthetic`.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "NAME", allow_hyphen_values = true)]
    pub variant: Option<Variant>,
    #[arg(long, value_name = "F")]
    pub noise_ratio: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of interval graphs.
    #[arg(long = "T", value_name = "N")]
    pub periods: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub att_layers: Option<usize>,
    #[arg(long)]
    pub dsal: Option<usize>,
    #[arg(long, value_name = "F")]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    /// Checkpoint to evaluate (default `<out>/best.sgnn`).
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Lower bounds of the sparsity cohorts after the first.
    #[arg(long, value_delimiter = ',', value_name = "N,N,...")]
    pub boundaries: Option<Vec<usize>>,
    /// Cutoffs for HR@N and NDCG@N.
    #[arg(long, value_delimiter = ',', value_name = "N,N,...")]
    pub n_list: Option<Vec<usize>>,
    /// Coordinates checked per parameter tensor by `gradcheck`.
    #[arg(long)]
    pub max_coords: Option<usize>,
}

/// Fully resolved settings of one command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset CSV; `None` selects the synthetic generator.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub hp: HyperParams,
    pub dataset: DataConfig,
    pub synthetic: SyntheticConfig,
    pub n_list: Vec<usize>,
    pub boundaries: Vec<usize>,
    pub checkpoint: Option<PathBuf>,
    pub gradcheck_coords: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: PathBuf::from("runs"),
            hp: HyperParams::default(),
            dataset: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            n_list: vec![10, 20],
            boundaries: vec![15, 25, 35, 45],
            checkpoint: None,
            gradcheck_coords: 20,
        }
    }
}

impl RunConfig {
    /// Defaults, then the `--config` file, then flags.
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &args.data {
            cfg.data = (d.as_os_str() != "synthetic").then(|| d.clone());
        }
        if let Some(o) = &args.out {
            cfg.out = o.clone();
        }
        if let Some(s) = args.seed {
            cfg.hp.seed = s;
            cfg.dataset.split_seed = s;
            cfg.synthetic.seed = s;
        }
        if let Some(v) = args.variant {
            cfg.hp.variant = v;
        }
        if let Some(r) = args.noise_ratio {
            cfg.dataset.noise_ratio = r;
        }
        let hp = &mut cfg.hp;
        set(&mut hp.epochs, args.epochs);
        set(&mut hp.periods, args.periods);
        set(&mut hp.layers, args.layers);
        set(&mut hp.att_layers, args.att_layers);
        set(&mut hp.d_sal, args.dsal);
        set(&mut hp.lambda1, args.lambda1);
        set(&mut hp.batch, args.batch);
        set(&mut hp.max_seq, args.max_seq);
        cfg.hp = cfg.hp.variant.apply(&cfg.hp);
        if args.checkpoint.is_some() {
            cfg.checkpoint = args.checkpoint.clone();
        }
        set(&mut cfg.boundaries, args.boundaries.clone());
        set(&mut cfg.n_list, args.n_list.clone());
        set(&mut cfg.gradcheck_coords, args.max_coords);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return Err(Error::config("n_list must contain positive cutoffs"));
        }
        if !(0.0..1.0).contains(&self.dataset.noise_ratio) {
            return Err(Error::config("noise ratio must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn load_raw(&self) -> Result<InteractionLog> {
        match &self.data {
            Some(path) => load_interactions(path),
            None => generate(&self.synthetic),
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(command: &Command) -> Result<()> {
    let mut cfg = RunConfig::resolve(command.args())?;
    if matches!(command, Command::CaseStudy(_)) && cfg.dataset.noise_ratio == 0.0 {
        cfg.dataset.noise_ratio = 0.15;
    }
    fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join(format!("{}.config.json", command.name())), &cfg)?;
    match command {
        Command::Prepare(_) => cmd_prepare(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Evaluate(_) => cmd_evaluate(&cfg),
        Command::Ablate(_) => cmd_ablate(&cfg),
        Command::NoiseTest(_) => cmd_noise_test(&cfg),
        Command::Sparsity(_) => cmd_sparsity(&cfg),
        Command::Gradcheck(_) => cmd_gradcheck(&cfg),
        Command::CaseStudy(_) => cmd_case_study(&cfg),
    }
}

#[derive(Serialize)]
struct SplitSummary {
    users: usize,
    items: usize,
    train_interactions: usize,
    validation_users: usize,
    test_users: usize,
    negative_shortfall: Vec<(usize, usize)>,
    planted_noise: usize,
    seed: u64,
}

#[derive(Serialize)]
struct GraphSummary {
    period: usize,
    t_start: f64,
    t_end: f64,
    edges: usize,
    active_users: usize,
}

fn cmd_prepare(cfg: &RunConfig) -> Result<()> {
    let prep = prepare(&cfg.load_raw()?, &cfg.dataset)?;
    let split = &prep.split;
    write_json(
        &cfg.out.join("split.json"),
        &SplitSummary {
            users: split.user_count(),
            items: split.item_count(),
            train_interactions: split.train.len(),
            validation_users: split.validation.iter().flatten().count(),
            test_users: split.test_users.len(),
            negative_shortfall: split.shortfall.clone(),
            planted_noise: prep.planted.len(),
            seed: split.seed,
        },
    )?;
    split.train.write_csv(&cfg.out.join("train.csv"))?;
    let views = build_views(&split.train, &cfg.hp)?;
    let graphs: Vec<GraphSummary> = views
        .graphs
        .iter()
        .map(|g| GraphSummary {
            period: g.period,
            t_start: g.t_start,
            t_end: g.t_end,
            edges: g.edge_count(),
            active_users: (0..g.users()).filter(|&u| g.user_degree(u) > 0).count(),
        })
        .collect();
    write_json(&cfg.out.join("graphs.json"), &graphs)?;
    eprintln!(
        "prepared {} users, {} items, {} training interactions over {} periods",
        split.user_count(),
        split.item_count(),
        split.train.len(),
        graphs.len()
    );
    Ok(())
}

/// Trains with `hp` on `data`, writing `last.sgnn`, `best.sgnn` and
/// `history.csv` under `dir`.
fn train_into(dir: &Path, prep: &Prepared, views: &Views, hp: &HyperParams, data: &DataConfig) -> Result<Checkpoint> {
    fs::create_dir_all(dir)?;
    let mut trainer = Trainer::new(&prep.split, views, hp, Some(data.clone()))?;
    let mut history = csv::Writer::from_path(dir.join("history.csv"))?;
    while !trainer.finished() {
        let rec = trainer.run_epoch()?;
        history.serialize(rec)?;
        eprintln!(
            "[{}] epoch {:>3}  loss {:.4}  rec {:.4}  sal {:.4}  val HR@10 {:.4}",
            hp.variant, rec.epoch, rec.total, rec.l_rec, rec.l_sal, rec.val_hr10
        );
    }
    history.flush()?;
    let outcome = trainer.into_outcome();
    save_checkpoint(&dir.join("last.sgnn"), &outcome.last)?;
    save_checkpoint(&dir.join("best.sgnn"), &outcome.best)?;
    Ok(outcome.best)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let prep = prepare(&cfg.load_raw()?, &cfg.dataset)?;
    let views = build_views(&prep.split.train, &cfg.hp)?;
    train_into(&cfg.out, &prep, &views, &cfg.hp, &cfg.dataset)?;
    Ok(())
}

/// The checkpoint at `path` with the split and views it was trained on.
pub fn restore(cfg: &RunConfig, path: &Path) -> Result<(Checkpoint, Prepared, Views)> {
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let ckpt = load_checkpoint(path)?;
    let data = ckpt.data.clone().unwrap_or_else(|| cfg.dataset.clone());
    let prep = prepare(&cfg.load_raw()?, &data)?;
    if prep.split.user_count() != ckpt.model.users || prep.split.item_count() != ckpt.model.items {
        return Err(Error::config(format!(
            "checkpoint expects {} users and {} items, dataset has {} and {}",
            ckpt.model.users,
            ckpt.model.items,
            prep.split.user_count(),
            prep.split.item_count()
        )));
    }
    let views = build_views(&prep.split.train, ckpt.hp())?;
    Ok((ckpt, prep, views))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("best.sgnn"))
}

fn print_report(report: &EvalReport) {
    let metrics: Vec<String> = report.metrics.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
    println!("{:<5} noise {:.2}  {}", report.variant, report.noise_ratio, metrics.join("  "));
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let (ckpt, prep, views) = restore(cfg, &checkpoint_path(cfg))?;
    let noise = ckpt.data.as_ref().map_or(0.0, |d| d.noise_ratio);
    let (report, _) = evaluate_protocol(&ckpt.model, &views, &prep.split, &cfg.n_list, noise)?;
    write_json(&cfg.out.join("report.json"), &report)?;
    print_report(&report);
    Ok(())
}

fn variant_slug(v: Variant) -> String {
    match v {
        Variant::Full => "full".into(),
        other => format!("no_{}", other.label().trim_start_matches('-').to_ascii_lowercase()),
    }
}

fn train_and_report(cfg: &RunConfig, prep: &Prepared, hp: &HyperParams, dir: &Path) -> Result<EvalReport> {
    let views = build_views(&prep.split.train, hp)?;
    let best = train_into(dir, prep, &views, hp, &cfg.dataset)?;
    let (report, _) = evaluate_protocol(&best.model, &views, &prep.split, &cfg.n_list, cfg.dataset.noise_ratio)?;
    write_json(&dir.join("report.json"), &report)?;
    print_report(&report);
    Ok(report)
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let prep = prepare(&cfg.load_raw()?, &cfg.dataset)?;
    let mut reports = Vec::new();
    for v in Variant::ALL {
        let hp = v.apply(&cfg.hp);
        reports.push(train_and_report(cfg, &prep, &hp, &cfg.out.join(variant_slug(v)))?);
    }
    write_json(&cfg.out.join("ablate.json"), &reports)
}

fn cmd_noise_test(cfg: &RunConfig) -> Result<()> {
    let raw = cfg.load_raw()?;
    let mut reports = Vec::new();
    for ratio in NOISE_RATIOS {
        let mut run = cfg.clone();
        run.dataset.noise_ratio = ratio;
        let prep = prepare(&raw, &run.dataset)?;
        let dir = cfg.out.join(format!("noise_{ratio:.2}"));
        reports.push(train_and_report(&run, &prep, &run.hp, &dir)?);
    }
    write_json(&cfg.out.join("noise.json"), &reports)
}

fn cmd_sparsity(cfg: &RunConfig) -> Result<()> {
    let (ckpt, prep, views) = match &cfg.checkpoint {
        Some(path) => restore(cfg, path)?,
        None => {
            let prep = prepare(&cfg.load_raw()?, &cfg.dataset)?;
            let views = build_views(&prep.split.train, &cfg.hp)?;
            let best = train_into(&cfg.out, &prep, &views, &cfg.hp, &cfg.dataset)?;
            (best, prep, views)
        }
    };
    let noise = ckpt.data.as_ref().map_or(0.0, |d| d.noise_ratio);
    let (mut report, lists) = evaluate_protocol(&ckpt.model, &views, &prep.split, &cfg.n_list, noise)?;
    let cohorts = sparsity_cohorts(&prep.split, &cfg.boundaries)?;
    report.cohorts = cohort_reports(&cohorts, &lists, &cfg.n_list)?;
    for c in &report.cohorts {
        let metrics: Vec<String> = c.metrics.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
        println!("{:<6} users {:>5}  {}", c.label, c.users, metrics.join("  "));
    }
    write_json(&cfg.out.join("sparsity.json"), &report)
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let prep = prepare(&cfg.load_raw()?, &cfg.dataset)?;
    let views = build_views(&prep.split.train, &cfg.hp)?;
    let model = crate::SelfGnn::new(&cfg.hp, prep.split.user_count(), prep.split.item_count())?;
    let index = UserItemIndex::new(&prep.split.train);
    let users: Vec<usize> = (0..prep.split.user_count().min(cfg.hp.batch)).collect();
    let batch = draw_batch(&index, &views.graphs, &users, &cfg.hp, 0, 0)?;
    let settings = CheckSettings {
        max_coords: Some(cfg.gradcheck_coords),
        ..CheckSettings::default()
    };
    let checks = gradient_check(&model, &views.graphs, &views.sequences, &batch, settings)?;
    println!("{:<32} {:>7} {:>7} {:>12} {:>12} {:>10}  result", "parameter", "checked", "skipped", "analytic", "numeric", "rel err");
    for c in &checks {
        let verdict = match (c.passed, c.within_roundoff) {
            (true, true) => "pass (zero)",
            (true, false) => "pass",
            _ => "FAIL",
        };
        println!(
            "{:<32} {:>7} {:>7} {:>12.4e} {:>12.4e} {:>10.2e}  {verdict}",
            c.name, c.checked, c.skipped, c.analytic_norm, c.numeric_norm, c.rel_error
        );
    }
    write_json(&cfg.out.join("gradcheck.json"), &checks)?;
    let failed: Vec<&TensorCheck> = checks.iter().filter(|c| !c.passed).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} of {} parameter tensors failed the gradient check", failed.len(), checks.len())))
    }
}

#[derive(Serialize)]
struct CaseStudy {
    noise_ratio: f64,
    planted: usize,
    clean: usize,
    /// Mean short-term likelihood per edge set and model.
    likelihood: BTreeMap<String, f64>,
    similarity: CaseStatistics,
}

fn cmd_case_study(cfg: &RunConfig) -> Result<()> {
    let prep = prepare(&cfg.load_raw()?, &cfg.dataset)?;
    let views = build_views(&prep.split.train, &cfg.hp)?;
    let with_hp = Variant::Full.apply(&cfg.hp);
    let without_hp = Variant::NoSal.apply(&cfg.hp);
    let with = train_into(&cfg.out.join("full"), &prep, &views, &with_hp, &cfg.dataset)?;
    let without = train_into(&cfg.out.join("no_sal"), &prep, &views, &without_hp, &cfg.dataset)?;
    let ew = with.model.embed(&views.graphs, &views.sequences)?;
    let eo = without.model.embed(&views.graphs, &views.sequences)?;
    let planted: HashSet<_> = prep.planted.iter().copied().collect();
    let clean: Vec<_> = prep.split.train.records().iter().copied().filter(|r| !planted.contains(r)).collect();
    let slope = cfg.hp.leaky_slope;
    let mut likelihood = BTreeMap::new();
    likelihood.insert("planted_with_sal".into(), mean_short_likelihood(&ew, &views.partition, &prep.planted, slope)?);
    likelihood.insert("planted_without_sal".into(), mean_short_likelihood(&eo, &views.partition, &prep.planted, slope)?);
    likelihood.insert("clean_with_sal".into(), mean_short_likelihood(&ew, &views.partition, &clean, slope)?);
    likelihood.insert("clean_without_sal".into(), mean_short_likelihood(&eo, &views.partition, &clean, slope)?);
    let study = CaseStudy {
        noise_ratio: cfg.dataset.noise_ratio,
        planted: prep.planted.len(),
        clean: clean.len(),
        likelihood,
        similarity: sal_case_statistics(&ew, &eo, &prep.split.train, &prep.planted)?,
    };
    for (k, v) in &study.likelihood {
        println!("likelihood {k:<20} {v:.4}");
    }
    println!(
        "peer similarity of planted items: with SAL {:.4}, without {:.4}",
        study.similarity.with_sal, study.similarity.without_sal
    );
    write_json(&cfg.out.join("case_study.json"), &study)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("selfgnn").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_defaults() {
        let cli = parse(&["train", "--T", "3", "--lambda1", "0.5", "--seed", "7", "--variant", "-CF"]);
        let cfg = RunConfig::resolve(cli.command.args()).unwrap();
        assert_eq!(cfg.hp.periods, 3);
        assert_eq!(cfg.hp.lambda1, 0.5);
        assert_eq!(cfg.hp.seed, 7);
        assert_eq!(cfg.dataset.split_seed, 7);
        assert_eq!(cfg.hp.variant, Variant::NoCollaborativeFiltering);
    }

    #[test]
    fn file_sits_between_defaults_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"hp": {"epochs": 3, "dim": 8}, "n_list": [5]}"#).unwrap();
        let p = path.to_str().unwrap();
        let cfg = RunConfig::resolve(parse(&["train", "--config", p, "--epochs", "9"]).command.args()).unwrap();
        assert_eq!(cfg.hp.epochs, 9);
        assert_eq!(cfg.hp.dim, 8);
        assert_eq!(cfg.n_list, vec![5]);
        assert_eq!(cfg.hp.layers, HyperParams::default().layers);
    }

    #[test]
    fn variant_overrides_are_resolved() {
        let cfg = RunConfig::resolve(parse(&["train", "--variant", "-STG"]).command.args()).unwrap();
        assert_eq!(cfg.hp.periods, 1);
        let cfg = RunConfig::resolve(parse(&["train", "--variant", "-SAL"]).command.args()).unwrap();
        assert_eq!(cfg.hp.lambda1, 0.0);
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(main_with(["selfgnn", "train", "--bogus"]), 2);
        assert_eq!(main_with(["selfgnn", "frobnicate"]), 2);
    }

    #[test]
    fn slugs_are_distinct() {
        let slugs: HashSet<String> = Variant::ALL.iter().map(|&v| variant_slug(v)).collect();
        assert_eq!(slugs.len(), Variant::ALL.len());
    }
}
