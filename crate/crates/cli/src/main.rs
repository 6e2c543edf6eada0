//! `adaptrt`: selection, conditional randomization inference, confidence
//! sets, power studies, and the numerical diagnostics, behind one JSON
//! config.
//!
//! Every command is deterministic given its config (the master seed
//! included): re-running writes byte-identical output. The resolved config,
//! defaults filled in, is echoed under the `config` key of each JSON result
//! so an output file documents the run that produced it.
//!
//! Exit codes: 0 success, 2 invalid input or config, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use adaptrt_core::config::{RunConfig, StudySpec};
use adaptrt_core::error::{Error, Result};
use adaptrt_core::infer::{
    conditional_rt, confidence_set, exact_conditional_rt, exact_unconditional_rt,
    unconditional_rt,
};
use adaptrt_core::model::{Dataset, SubgroupHypothesis};
use adaptrt_core::select::{audit_self_contained, select, BatchRecord};
use adaptrt_core::simulate::{power_study, PowerTable};
use adaptrt_core::theory::{be_enumeration_check, optimal_threshold, SnrCurve};

#[derive(Parser)]
#[command(
    name = "adaptrt",
    version,
    about = "Randomization inference for data-driven subgroups"
)]
struct Cli {
    /// JSON run configuration; command-line flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for `simulate`; every other command runs
    /// single-threaded.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Primary JSON output path; stdout when omitted. CSV sidecars derive
    /// their names from this path.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the batch selector and report the subgroup.
    Select {
        /// Also write the per-batch trail as a CSV sidecar.
        #[arg(long, value_name = "FORMAT", value_parser = ["csv"])]
        emit_trail: Option<String>,
    },
    /// Selection plus the conditional randomization test of no effect; with
    /// --subgroup-file, an unconditional test of a pre-specified subgroup.
    Test {
        /// Enumerate the assignment support exactly instead of sampling.
        #[arg(long)]
        exact: bool,
        /// File of unit ids (one per line) naming a pre-specified subgroup;
        /// selection is skipped and the full assignment vector re-drawn.
        #[arg(long, value_name = "PATH")]
        subgroup_file: Option<PathBuf>,
    },
    /// Confidence set for a constant subgroup effect by test inversion.
    Ci,
    /// Power study across sample sizes and effect scales.
    Simulate,
    /// Signal-to-noise curve over selection thresholds.
    Snr,
    /// Exhaustive verification of the normal-approximation bound.
    Becheck,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("ADAPTRT_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = match cli.command {
        Command::Simulate => cli.threads.unwrap_or(0),
        _ => 1,
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("thread pool already initialized: {e}");
    }

    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    if matches!(cli.command, Command::Simulate) {
        config.study.get_or_insert_with(StudySpec::default);
    }
    config.resolve();
    config.validate_common()?;

    match cli.command {
        Command::Select { emit_trail } => cmd_select(&config, emit_trail.as_deref()),
        Command::Test { exact, subgroup_file } => {
            cmd_test(&config, exact, subgroup_file.as_deref())
        }
        Command::Ci => cmd_ci(&config),
        Command::Simulate => cmd_simulate(&config),
        Command::Snr => cmd_snr(&config),
        Command::Becheck => cmd_becheck(&config),
    }
}

/// Pretty-printed JSON with a trailing newline. serde_json's map type keeps
/// keys sorted, which is what makes re-runs byte-identical.
fn emit_json(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = format!("{value:#}\n");
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// `<out stem>_<suffix>.csv` next to the primary output, or
/// `<default_stem>_<suffix>.csv` in the working directory when the primary
/// output goes to stdout.
fn sidecar(out: Option<&Path>, default_stem: &str, suffix: &str) -> PathBuf {
    match out {
        Some(p) => {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or(default_stem);
            p.with_file_name(format!("{stem}_{suffix}.csv"))
        }
        None => PathBuf::from(format!("{default_stem}_{suffix}.csv")),
    }
}

fn config_value(config: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(config)?)
}

fn subgroup_ids(dataset: &Dataset, subgroup: &[usize]) -> Vec<u64> {
    subgroup.iter().map(|&i| dataset.units()[i].id).collect()
}

fn cmd_select(config: &RunConfig, emit_trail: Option<&str>) -> Result<()> {
    let dataset = config.load_dataset()?;
    let selection = config.selection.to_config()?;
    let outcome = select(&dataset, &selection)?;
    audit_self_contained(&outcome.subgroup, &outcome.revealed)?;
    log::info!(
        "selected {} of {} units (cutoff {:?})",
        outcome.subgroup.len(),
        dataset.len(),
        outcome.cutoff
    );

    let mut output = json!({
        "config": config_value(config)?,
        "cutoff": outcome.cutoff,
        "subgroup_ids": subgroup_ids(&dataset, &outcome.subgroup),
        "subgroup_size": outcome.subgroup.len(),
        "selection_rate": outcome.subgroup.len() as f64 / dataset.len() as f64,
        "revealed_count": outcome.revealed.len(),
        "detail": serde_json::to_value(&outcome.detail)?,
        "trail": serde_json::to_value(&outcome.trail)?,
    });
    if emit_trail == Some("csv") {
        let path = sidecar(config.out.as_deref(), "select", "trail");
        write_trail_csv(&path, &outcome.trail)?;
        output["trail_csv"] = json!(path.display().to_string());
    }
    emit_json(config.out.as_deref(), &output)
}

fn write_trail_csv(path: &Path, trail: &[BatchRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for record in trail {
        writer.serialize(record)?;
    }
    writer.flush()?;
    Ok(())
}

/// One unit id per line; blank lines and `#` comments allowed. Ids must
/// exist in the dataset and not repeat.
fn read_subgroup_file(path: &Path, dataset: &Dataset) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    let by_id: std::collections::BTreeMap<u64, usize> =
        dataset.units().iter().enumerate().map(|(i, u)| (u.id, i)).collect();
    let mut subgroup = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let id: u64 = line.parse().map_err(|_| {
            Error::InvalidData(format!("{}:{}: not a unit id: {line}", path.display(), lineno + 1))
        })?;
        let &index = by_id.get(&id).ok_or_else(|| {
            Error::InvalidData(format!("{}:{}: unknown unit id {id}", path.display(), lineno + 1))
        })?;
        if !seen.insert(id) {
            return Err(Error::InvalidData(format!(
                "{}:{}: duplicate unit id {id}",
                path.display(),
                lineno + 1
            )));
        }
        subgroup.push(index);
    }
    subgroup.sort_unstable();
    Ok(subgroup)
}

fn cmd_test(config: &RunConfig, exact: bool, subgroup_file: Option<&Path>) -> Result<()> {
    let dataset = config.load_dataset()?;
    let design = config.design.to_design(&dataset)?;
    let stat = config.statistic.to_statistic();

    let (cutoff, subgroup, pre_specified) = match subgroup_file {
        Some(path) => (None, read_subgroup_file(path, &dataset)?, true),
        None => {
            let selection = config.selection.to_config()?;
            let outcome = select(&dataset, &selection)?;
            audit_self_contained(&outcome.subgroup, &outcome.revealed)?;
            (outcome.cutoff, outcome.subgroup, false)
        }
    };
    log::info!(
        "testing subgroup of {} units ({})",
        subgroup.len(),
        if pre_specified { "pre-specified" } else { "selected" }
    );
    let hyp = SubgroupHypothesis::new(subgroup.clone(), 0.0);

    let mut output = json!({
        "config": config_value(config)?,
        "cutoff": cutoff,
        "subgroup_size": subgroup.len(),
        "selection_rate": subgroup.len() as f64 / dataset.len() as f64,
        "subgroup_source": if pre_specified { "file" } else { "selection" },
        "exact": exact,
    });
    if exact {
        let r = if pre_specified {
            exact_unconditional_rt(&dataset, &design, &hyp, &stat, config.orientation)?
        } else {
            exact_conditional_rt(&dataset, &design, &hyp, &stat, config.orientation)?
        };
        output["p_value"] = json!(r.p_value);
        output["observed_stat"] = json!(r.observed_stat);
        output["support_size"] = json!(r.support_size);
        output["orientation"] = serde_json::to_value(r.orientation)?;
        output["degenerate"] = json!(r.degenerate);
    } else {
        let r = if pre_specified {
            unconditional_rt(
                &dataset,
                &design,
                &hyp,
                &stat,
                config.m,
                config.seed,
                config.orientation,
            )?
        } else {
            conditional_rt(
                &dataset,
                &design,
                &hyp,
                &stat,
                config.m,
                config.seed,
                config.orientation,
            )?
        };
        output["p_value"] = json!(r.p_value);
        output["observed_stat"] = json!(r.observed_stat);
        output["m"] = json!(r.m);
        output["seed"] = json!(r.seed);
        output["orientation"] = serde_json::to_value(r.orientation)?;
        output["conditioning"] = json!(r.conditioning);
        output["degenerate"] = json!(r.degenerate);
    }
    emit_json(config.out.as_deref(), &output)
}

fn cmd_ci(config: &RunConfig) -> Result<()> {
    let ci = config.ci.as_ref().ok_or_else(|| {
        Error::InvalidConfig("ci command needs a `ci` section with grid_lo/grid_hi/grid_step".into())
    })?;
    let grid = ci.build_grid()?;
    let dataset = config.load_dataset()?;
    let design = config.design.to_design(&dataset)?;
    let stat = config.statistic.to_statistic();
    let selection = config.selection.to_config()?;
    let outcome = select(&dataset, &selection)?;
    audit_self_contained(&outcome.subgroup, &outcome.revealed)?;

    let set = confidence_set(
        &dataset,
        &design,
        &outcome.subgroup,
        &stat,
        &grid,
        config.alpha,
        config.m,
        config.seed,
    )?;

    let pcurve_path = sidecar(config.out.as_deref(), "ci", "pcurve");
    let mut writer = csv::Writer::from_path(&pcurve_path)?;
    writer.write_record(["effect", "p_value"])?;
    for (c, p) in set.grid.iter().zip(&set.p_curve) {
        writer.write_record([c.to_string(), p.to_string()])?;
    }
    writer.flush()?;

    let output = json!({
        "config": config_value(config)?,
        "alpha": set.alpha,
        "intervals": set.intervals,
        "cutoff": outcome.cutoff,
        "subgroup_size": outcome.subgroup.len(),
        "selection_rate": outcome.subgroup.len() as f64 / dataset.len() as f64,
        "m": config.m,
        "seed": config.seed,
        "pcurve_csv": pcurve_path.display().to_string(),
    });
    emit_json(config.out.as_deref(), &output)
}

fn cmd_simulate(config: &RunConfig) -> Result<()> {
    let study_spec = config.study.clone().unwrap_or_default();
    let study = study_spec.to_study(config)?;
    log::info!(
        "power study: {} cells x {} replicates",
        study.ns.len() * study.deltas.len() * study.tau_kinds.len(),
        study.replicates
    );
    let table = power_study(&study)?;

    let mut panels = serde_json::Map::new();
    for kind in &study.tau_kinds {
        let rows: Vec<_> =
            table.rows.iter().filter(|r| r.tau == kind.name()).cloned().collect();
        let path = sidecar(config.out.as_deref(), "power", kind.name());
        let panel = PowerTable { rows };
        std::fs::write(&path, panel.to_csv())?;
        panels.insert(kind.name().to_string(), json!(path.display().to_string()));
    }

    let output = json!({
        "config": config_value(config)?,
        "panels": panels,
        "rows": table.rows.len(),
        "replicates": study.replicates,
        "seed": study.seed,
    });
    emit_json(config.out.as_deref(), &output)
}

fn cmd_snr(config: &RunConfig) -> Result<()> {
    let spec = config.snr.as_ref().ok_or_else(|| {
        Error::InvalidConfig(
            "snr command needs an `snr` section with density, n, sigma, theta, and grid bounds"
                .into(),
        )
    })?;
    let grid = spec.build_grid()?;
    let curve = SnrCurve::compute(&spec.density, spec.n, spec.sigma, spec.theta, &grid)?;

    let path = sidecar(config.out.as_deref(), "snr", "curve");
    let mut writer = csv::Writer::from_path(&path)?;
    writer.write_record(["t", "snr"])?;
    for (t, v) in curve.grid.iter().zip(&curve.snr) {
        writer.write_record([t.to_string(), v.to_string()])?;
    }
    writer.flush()?;

    let t_hat = optimal_threshold(&spec.density, spec.n, spec.sigma, spec.theta, &grid).ok();
    let output = json!({
        "config": config_value(config)?,
        "curve_csv": path.display().to_string(),
        "optimal_threshold": t_hat,
        "n": spec.n,
        "sigma": spec.sigma,
        "theta": spec.theta,
    });
    emit_json(config.out.as_deref(), &output)
}

fn cmd_becheck(config: &RunConfig) -> Result<()> {
    let spec = config.becheck.as_ref().ok_or_else(|| {
        Error::InvalidConfig("becheck command needs a `becheck` section with residuals and theta".into())
    })?;
    let check = be_enumeration_check(&spec.residuals, spec.theta)?;
    let output = json!({
        "config": config_value(config)?,
        "sup_distance": check.sup_distance,
        "bound": check.bound,
        "pass": check.pass,
    });
    emit_json(config.out.as_deref(), &output)
}
