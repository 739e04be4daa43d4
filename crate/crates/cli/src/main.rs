mod reproduce;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use arbiter_itc::arbitration::{
    arbitrate_ipd, arbitrator_combine, read_json, sponsor_run, sponsor_run_selfservice, write_json, ArbitrationConfig,
    CombinedResult, ResultsPackage, WeightsPackage,
};
use arbiter_itc::data_model::{column_indices, AgdSummary, CovariateIpd, EffectScale, IpdTrial, TrialId, SCHEMA};
use arbiter_itc::estimators::{anchored_combine, published_effect, weighted_contrast, EffectEstimate};
use arbiter_itc::nalgebra::DMatrix;
use arbiter_itc::simharness::{run_study, ScenarioSpec};
use arbiter_itc::weighting::{maic_weights, Normalization};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

const SEED_ENV: &str = "ARBITER_ITC_SEED";

#[derive(Parser)]
#[command(name = "arbiter-itc", version, about = "Arbitrated matching-adjusted indirect treatment comparison")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Output {
    /// Print the machine-readable report instead of the text report.
    #[arg(long, global = true)]
    json: bool,
    /// Directory for output files.
    #[arg(long, value_name = "DIR", global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the bundled two-trial worked example and check every number.
    ReproducePaper {
        /// Read example_{ac,bc}.csv and example_{ac,bc}_agd.json from DIR instead of the bundled copies.
        #[arg(long, value_name = "DIR")]
        fixtures: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Classic MAIC: reweight own IPD to the rival's aggregate means.
    Maic {
        /// Own trial IPD (CSV: subject_id,arm,outcome,<covariates>).
        #[arg(long, value_name = "FILE")]
        ipd: PathBuf,
        /// Rival trial aggregate data (JSON).
        #[arg(long, value_name = "FILE")]
        agd: PathBuf,
        /// Covariates to match (comma separated); defaults to all AgD covariates.
        #[arg(long, value_delimiter = ',')]
        covariates: Vec<String>,
        #[arg(long, value_enum, default_value_t = Scale::LogOr)]
        scale: Scale,
        #[command(flatten)]
        output: Output,
    },
    /// One step of the arbitration protocol.
    Arbitrate {
        #[arg(long, value_enum)]
        role: Role,
        /// Arbitration config (JSON).
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// IPD CSV files: both trials for arbitrator-weights, the sponsor's own trial otherwise.
        #[arg(long, value_name = "FILE")]
        ipd: Vec<PathBuf>,
        /// Rival aggregate data for sponsor-selfservice.
        #[arg(long, value_name = "FILE")]
        agd: Option<PathBuf>,
        /// Weights package for sponsor-run.
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
        /// Both results packages for arbitrator-combine.
        #[arg(long, value_name = "FILE")]
        results: Vec<PathBuf>,
        /// Seed for a covariate-simulation config that does not fix one
        /// (falls back to ARBITER_ITC_SEED).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: Output,
    },
    /// Monte Carlo study of classic and arbitrated MAIC.
    Simulate {
        /// Scenario (JSON).
        #[arg(long, visible_alias = "config", value_name = "FILE")]
        scenario: PathBuf,
        /// Override the scenario's master seed (falls back to ARBITER_ITC_SEED).
        #[arg(long)]
        seed: Option<u64>,
        /// Override the replicate count.
        #[arg(long)]
        replicates: Option<usize>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    ArbitratorWeights,
    SponsorRun,
    SponsorSelfservice,
    ArbitratorCombine,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    #[value(name = "logOR")]
    LogOr,
    #[value(name = "riskdiff")]
    RiskDiff,
    #[value(name = "meandiff")]
    MeanDiff,
}

impl From<Scale> for EffectScale {
    fn from(s: Scale) -> Self {
        match s {
            Scale::LogOr => EffectScale::LogOddsRatio,
            Scale::RiskDiff => EffectScale::RiskDifference,
            Scale::MeanDiff => EffectScale::MeanDifference,
        }
    }
}

/// Malformed command-line input not caught by the parser.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

/// Exit code 1 with the report already printed.
#[derive(Debug)]
struct Failed(String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<arbiter_itc::Error>() {
        Some(err) if err.is_usage() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ReproducePaper { fixtures, output } => cmd_reproduce(fixtures.as_deref(), &output),
        Command::Maic { ipd, agd, covariates, scale, output } => cmd_maic(&ipd, &agd, &covariates, scale.into(), &output),
        Command::Arbitrate { role, config, ipd, agd, weights, results, seed, output } => {
            cmd_arbitrate(role, &config, &ipd, agd.as_deref(), weights.as_deref(), &results, seed, &output)
        }
        Command::Simulate { scenario, seed, replicates, threads, output } => {
            cmd_simulate(&scenario, seed, replicates, threads, &output)
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| usage(format!("{SEED_ENV}={v} is not a 64-bit unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn emit<T: Serialize>(output: &Output, value: &T, text: &str, file: &str) -> Result<()> {
    if let Some(dir) = &output.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&dir.join(file), value)?;
    }
    if output.json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        print!("{text}");
    }
    Ok(())
}

fn cmd_reproduce(dir: Option<&Path>, output: &Output) -> Result<()> {
    // any failure here means the inputs are not the worked example
    let analysis = |e: anyhow::Error| anyhow!(Failed(format!("{e:#}")));
    let inputs = match dir {
        Some(d) => reproduce::Inputs::from_dir(d),
        None => reproduce::Inputs::bundled(),
    }
    .map_err(analysis)?;
    let report = reproduce::run(&inputs).map_err(analysis)?;
    emit(output, &report, &reproduce::render(&report), "reproduce-report.json")?;
    if !report.all_pass {
        bail!(Failed("worked example does not reproduce".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct BalanceRow {
    covariate: String,
    target: f64,
    unweighted: f64,
    weighted: f64,
}

#[derive(Serialize)]
struct MaicReport {
    schema: String,
    own_trial: TrialId,
    rival_trial: TrialId,
    /// Own active drug vs the rival's active drug.
    estimate: EffectEstimate,
    weighted_own: EffectEstimate,
    published_rival: EffectEstimate,
    n: usize,
    ess: f64,
    balance: Vec<BalanceRow>,
}

#[derive(Serialize)]
struct WeightsFile {
    schema: String,
    subject_ids: Vec<String>,
    weights: Vec<f64>,
    normalization: Normalization,
    ess: f64,
}

fn column_means(x: &DMatrix<f64>, w: Option<&[f64]>) -> Vec<f64> {
    let n = x.nrows();
    let total: f64 = w.map_or(n as f64, |w| w.iter().sum());
    (0..x.ncols())
        .map(|j| (0..n).map(|i| w.map_or(1.0, |w| w[i]) * x[(i, j)]).sum::<f64>() / total)
        .collect()
}

fn cmd_maic(ipd: &Path, agd: &Path, covariates: &[String], scale: EffectScale, output: &Output) -> Result<()> {
    let rival = AgdSummary::read_json_path(agd).with_context(|| format!("reading {}", agd.display()))?;
    let mut own = IpdTrial::read_csv_path(ipd, None)
        .and_then(IpdTrial::validated)
        .with_context(|| format!("reading {}", ipd.display()))?;
    if own.trial == rival.trial {
        return Err(usage(format!("aggregate data describe the same trial ({}) as the IPD", own.trial)));
    }
    own.event = rival.event;
    let names: Vec<String> = if covariates.is_empty() {
        rival.covariates.iter().map(|c| c.name.clone()).collect()
    } else {
        covariates.to_vec()
    };
    let own_idx = column_indices(&own.covariates, &names)?;
    let rival_idx = column_indices(&rival.covariates, &names)?;
    let full = own.covariate_matrix();
    let x = DMatrix::from_fn(full.nrows(), own_idx.len(), |i, k| full[(i, own_idx[k])]);
    let targets: Vec<f64> = rival_idx.iter().map(|&j| rival.covariate_means[j]).collect();

    let w = maic_weights(&x, &targets)?;
    let weighted_own = weighted_contrast(&own, &w, scale)?;
    let published_rival = published_effect(&rival)?;
    let estimate = anchored_combine(&weighted_own, &published_rival)?;
    let unweighted = column_means(&x, None);
    let weighted = column_means(&x, Some(w.weights()));
    let report = MaicReport {
        schema: SCHEMA.into(),
        own_trial: own.trial,
        rival_trial: rival.trial,
        estimate,
        weighted_own,
        published_rival,
        n: own.n(),
        ess: w.ess(),
        balance: names
            .iter()
            .enumerate()
            .map(|(k, name)| BalanceRow {
                covariate: name.clone(),
                target: targets[k],
                unweighted: unweighted[k],
                weighted: weighted[k],
            })
            .collect(),
    };

    let (own_active, _) = own.trial.arms();
    let (rival_active, _) = rival.trial.arms();
    let mut text = String::new();
    let se = |e: &EffectEstimate| e.se.map_or(String::new(), |s| format!(" (se {s:.4})"));
    let _ = writeln!(text, "MAIC of trial {} to the population of trial {}", own.trial, rival.trial);
    let _ = writeln!(text, "  weighted {} {own_active} vs C: {:.4}{}", scale, report.weighted_own.point, se(&report.weighted_own));
    let _ = writeln!(text, "  published {} {rival_active} vs C: {:.4}{}", scale, report.published_rival.point, se(&report.published_rival));
    let _ = writeln!(text, "  {own_active} vs {rival_active}: {:.4}{}", report.estimate.point, se(&report.estimate));
    if let Some((lo, hi)) = report.estimate.ci95 {
        let _ = writeln!(text, "  95% CI: ({lo:.4}, {hi:.4})");
    }
    let _ = writeln!(text, "  n = {}, effective sample size = {:.4}", report.n, report.ess);
    let _ = writeln!(text, "  {:<20} {:>10} {:>10} {:>10}", "covariate", "target", "before", "after");
    for b in &report.balance {
        let _ = writeln!(text, "  {:<20} {:>10.4} {:>10.4} {:>10.4}", b.covariate, b.target, b.unweighted, b.weighted);
    }
    if let Some(dir) = &output.out {
        std::fs::create_dir_all(dir)?;
        let wf = WeightsFile {
            schema: SCHEMA.into(),
            subject_ids: own.subject_ids(),
            weights: w.weights().to_vec(),
            normalization: w.normalization(),
            ess: w.ess(),
        };
        write_json(&dir.join("maic-weights.json"), &wf)?;
    }
    emit(output, &report, &text, "maic-report.json")
}

/// Trial membership from the file's arms when present, else `fallback`.
fn read_covariates(path: &Path, fallback: TrialId) -> Result<CovariateIpd> {
    if let Ok(t) = IpdTrial::read_csv_path(path, None) {
        return Ok(t.validated()?.covariate_ipd());
    }
    let file = std::fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    CovariateIpd::read_csv(file, fallback).with_context(|| format!("reading {}", path.display()))
}

fn read_trial(path: &Path) -> Result<IpdTrial> {
    IpdTrial::read_csv_path(path, None)
        .and_then(IpdTrial::validated)
        .with_context(|| format!("reading {}", path.display()))
}

fn one<'a>(paths: &'a [PathBuf], what: &str) -> Result<&'a Path> {
    match paths {
        [p] => Ok(p),
        _ => Err(usage(format!("this role takes exactly one {what}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_arbitrate(
    role: Role,
    config_path: &Path,
    ipd: &[PathBuf],
    agd: Option<&Path>,
    weights: Option<&Path>,
    results: &[PathBuf],
    seed: Option<u64>,
    output: &Output,
) -> Result<()> {
    // validated after the seed is resolved
    let text = std::fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let mut config: ArbitrationConfig = serde_json::from_str(&text)
        .map_err(arbiter_itc::Error::from)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let wants_seed = matches!(role, Role::SponsorSelfservice);
    match (config.seed, seed) {
        (Some(a), Some(b)) if a != b => return Err(usage(format!("--seed {b} conflicts with the config's seed {a}"))),
        (None, Some(s)) if wants_seed => config.seed = Some(s),
        (None, None) if wants_seed => config.seed = env_seed()?,
        _ => {}
    }
    config.validate()?;
    let hash = config.hash()?;

    match role {
        Role::ArbitratorWeights => {
            let [first, second] = ipd else {
                return Err(usage("arbitrator-weights takes two --ipd files (trial AC, then trial BC)"));
            };
            let mut a = read_covariates(first, TrialId::AC)?;
            let mut b = read_covariates(second, TrialId::BC)?;
            if a.trial == TrialId::BC && b.trial == TrialId::AC {
                std::mem::swap(&mut a, &mut b);
            }
            if a.trial == b.trial {
                return Err(usage(format!("both --ipd files are from trial {}", a.trial)));
            }
            let (wa, wb) = arbitrate_ipd(&a, &b, &config)?;
            #[derive(Serialize)]
            struct Both<'a> {
                #[serde(rename = "sponsorA")]
                a: &'a WeightsPackage,
                #[serde(rename = "sponsorB")]
                b: &'a WeightsPackage,
            }
            let mut text = format!("config {hash}\npropensity model: {:?} on {}\n", wa.propensity.coefficients, wa.propensity.covariates.join(", "));
            for p in [&wa, &wb] {
                let _ = writeln!(text, "  {}: {} weights, ess {:.4}", p.recipient, p.weights.len(), p.ess);
            }
            if let Some(dir) = &output.out {
                std::fs::create_dir_all(dir)?;
                write_json(&dir.join("weights-package-sponsorA.json"), &wa)?;
                write_json(&dir.join("weights-package-sponsorB.json"), &wb)?;
            }
            emit(&Output { json: output.json, out: None }, &Both { a: &wa, b: &wb }, &text, "")
        }
        Role::SponsorRun => {
            let trial = read_trial(one(ipd, "--ipd file")?)?;
            let w = weights.ok_or_else(|| usage("sponsor-run needs --weights"))?;
            let package: WeightsPackage = read_json(w).with_context(|| format!("reading {}", w.display()))?;
            let r = sponsor_run(&trial, &package, &config)?;
            emit_results(&r, output)
        }
        Role::SponsorSelfservice => {
            let trial = read_trial(one(ipd, "--ipd file")?)?;
            let a = agd.ok_or_else(|| usage("sponsor-selfservice needs --agd"))?;
            let rival = AgdSummary::read_json_path(a).with_context(|| format!("reading {}", a.display()))?;
            let r = sponsor_run_selfservice(&trial, &rival, &config)?;
            emit_results(&r, output)
        }
        Role::ArbitratorCombine => {
            let [first, second] = results else {
                return Err(usage("arbitrator-combine takes two --results files"));
            };
            let ra: ResultsPackage = read_json(first).with_context(|| format!("reading {}", first.display()))?;
            let rb: ResultsPackage = read_json(second).with_context(|| format!("reading {}", second.display()))?;
            let c = arbitrator_combine(&ra, &rb, Some(&hash))?;
            emit(output, &c, &render_combined(&c), "arbitrated-result.json")
        }
    }
}

fn emit_results(r: &ResultsPackage, output: &Output) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "{} results, config {}", r.sender, r.config_hash);
    let se = r.estimate.se.map_or(String::new(), |s| format!(" (se {s:.4})"));
    let _ = writeln!(text, "  overlap-weighted {} in trial {}: {:.4}{se}", r.estimate.scale, r.sender.trial(), r.estimate.point);
    let _ = writeln!(text, "  effective sample size: {:.4}", r.ess);
    for (name, m) in r.balance.covariates.iter().zip(&r.balance.means) {
        let _ = writeln!(text, "  weighted mean {name}: {m:.4}");
    }
    if let Some(h) = &r.covariate_matrix_hash {
        let _ = writeln!(text, "  simulated covariates sha256: {h}");
    }
    emit(output, r, &text, &format!("results-package-{}.json", r.sender))
}

fn render_combined(c: &CombinedResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "arbitrated A vs B ({}, {}): {:.4}", c.estimate.scale, c.estimate.estimand, c.estimate.point);
    if let (Some(se), Some((lo, hi))) = (c.estimate.se, c.estimate.ci95) {
        let _ = writeln!(s, "  se {se:.4}, 95% CI ({lo:.4}, {hi:.4})");
    }
    let _ = writeln!(s, "  ess: sponsor A {:.4}, sponsor B {:.4}", c.ess[0], c.ess[1]);
    for (who, b) in ["sponsor A", "sponsor B"].iter().zip(&c.balance) {
        let means: Vec<String> = b.covariates.iter().zip(&b.means).map(|(n, m)| format!("{n} {m:.4}")).collect();
        let _ = writeln!(s, "  weighted means, {who}: {}", means.join(", "));
    }
    s
}

fn cmd_simulate(path: &Path, seed: Option<u64>, replicates: Option<usize>, threads: Option<usize>, output: &Output) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut spec: ScenarioSpec = serde_json::from_str(&text).map_err(arbiter_itc::Error::from)?;
    if let Some(s) = seed.map(Some).map_or_else(env_seed, Ok)? {
        spec.seed = s;
    }
    if let Some(r) = replicates {
        spec.replicates = r;
    }
    spec.validate()?;
    let pool = rayon_pool(threads)?;
    let report = pool.install(|| run_study(&spec))?;
    let table = report.render_table();
    if let Some(dir) = &output.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("study-report.txt"), &table)?;
    }
    emit(output, &report, &table, "study-report.json")?;
    report.check()?;
    Ok(())
}

fn rayon_pool(threads: Option<usize>) -> Result<arbiter_itc::rayon::ThreadPool> {
    if threads == Some(0) {
        return Err(usage("--threads must be positive"));
    }
    Ok(arbiter_itc::rayon::ThreadPoolBuilder::new().num_threads(threads.unwrap_or(0)).build()?)
}
