use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cqa_core::cases::{builtin, reproduce, Example2Params, Example2Reduced, ReproReport, EXAMPLE2_POINT, EXAMPLE2_PROBE_GRADIENT};
use cqa_core::netmodel::load_case_from_path;
use cqa_core::perturb::tangency_escape_probe;
use cqa_core::{
    active_set, build_ybus, evaluate, fixed_licq_check, kkt_solve, licq_check, newton_pf, pf_residual,
    run_genericity_experiment, ActiveSet, AdmittanceMatrix, CQReport, Case, ConstraintSystem, CqaError, Evaluation,
    FixedLicqReport, ModelKind, MultiplierSet, NewtonOptions, PerturbationModel, SystemState, Tolerances,
};
use serde::Serialize;

const EXIT_INPUT: u8 = 2;
const EXIT_LICQ: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;
const EXIT_REPRO: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "cqa", version, about = "Constraint-qualification diagnostics for AC power-flow constrained problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dump the admittance matrix as G and B.
    Ybus(CommonArgs),
    /// LICQ and multiplier report at the case point.
    Check {
        #[command(flatten)]
        common: CommonArgs,
        /// Shift the real load at a bus before the check, e.g. `2:+0.05` (1-based bus).
        #[arg(long, value_name = "BUS:DELTA", value_parser = parse_load_shift, allow_hyphen_values = true)]
        perturb_load: Option<LoadShift>,
    },
    /// Monte Carlo LICQ genericity experiment.
    Perturb {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value_t = ModelArg::Load)]
        model: ModelArg,
        #[arg(long, default_value_t = 100)]
        trials: u64,
    },
    /// Re-run a worked example against its ground truth.
    Repro {
        #[arg(value_parser = ["ex1", "ex2", "ex3"])]
        which: String,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// JSON case file.
    #[arg(long, conflicts_with = "builtin")]
    case: Option<PathBuf>,
    /// Built-in fixture: ex1, ex2, ex3, mesh3, radial5.
    #[arg(long)]
    builtin: Option<String>,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    alpha: f64,
    #[arg(long, env = "CQA_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, allow_negative_numbers = true)]
    act_tol: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    rank_tol_scale: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    stat_tol: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pf_tol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModelArg {
    Load,
    Shunt,
    Line,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Load => ModelKind::Load,
            ModelArg::Shunt => ModelKind::Shunt,
            ModelArg::Line => ModelKind::Line,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct LoadShift {
    /// 0-based bus index.
    bus: usize,
    delta: f64,
}

fn parse_load_shift(s: &str) -> Result<LoadShift, String> {
    let (bus, delta) = s.split_once(':').ok_or("expected BUS:DELTA")?;
    let bus: usize = bus.trim().parse().map_err(|e| format!("bad bus {bus:?}: {e}"))?;
    if bus == 0 {
        return Err("buses are numbered from 1".into());
    }
    let delta: f64 = delta.trim().parse().map_err(|e| format!("bad delta {delta:?}: {e}"))?;
    if !delta.is_finite() {
        return Err("delta must be finite".into());
    }
    Ok(LoadShift { bus: bus - 1, delta })
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn input(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_INPUT,
            error: error.into(),
        }
    }
}

impl From<CqaError> for Failure {
    fn from(e: CqaError) -> Self {
        let code = match e {
            CqaError::NonConvergence { .. } | CqaError::SingularJacobian { .. } | CqaError::Infeasible(_) => {
                EXIT_INFEASIBLE
            }
            _ => EXIT_INPUT,
        };
        Self { code, error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self::input(error)
    }
}

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Ybus(common) => cmd_ybus(&common),
        Command::Check { common, perturb_load } => cmd_check(&common, perturb_load),
        Command::Perturb { common, model, trials } => cmd_perturb(&common, model.into(), trials),
        Command::Repro { which, common } => cmd_repro(&which, &common),
    }
}

impl CommonArgs {
    fn tolerances(&self) -> Result<Tolerances, Failure> {
        let d = Tolerances::default();
        let tol = Tolerances {
            act_tol: self.act_tol.unwrap_or(d.act_tol),
            eq_tol: d.eq_tol,
            pf_tol: self.pf_tol.unwrap_or(d.pf_tol),
            stat_tol: self.stat_tol.unwrap_or(d.stat_tol),
            rank_tol_scale: self.rank_tol_scale.unwrap_or(d.rank_tol_scale),
        };
        tol.validate()?;
        Ok(tol)
    }

    fn source(&self) -> String {
        match (&self.case, &self.builtin) {
            (Some(p), _) => p.display().to_string(),
            (None, Some(name)) => format!("builtin:{name}"),
            (None, None) => String::new(),
        }
    }

    fn load(&self) -> Result<Case, Failure> {
        match (&self.case, &self.builtin) {
            (Some(path), _) => load_case_from_path(path).map_err(|e| match e {
                CqaError::Io(io) => Failure::input(anyhow!(io).context(format!("reading {}", path.display()))),
                other => other.into(),
            }),
            (None, Some(name)) => Ok(builtin(name, self.alpha)?.case),
            (None, None) => Err(Failure::input(anyhow!("one of --case or --builtin is required"))),
        }
    }

    fn emit<T: Serialize>(&self, report: &T) -> Result<(), Failure> {
        if self.format == Format::Csv {
            return Err(Failure::input(anyhow!("csv output is only available for ybus and perturb")));
        }
        let text = serde_json::to_string_pretty(report).map_err(Failure::input)?;
        write_text(self.out.as_deref(), &text)
    }
}

fn write_text(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, format!("{text}\n")).with_context(|| format!("writing {}", path.display()))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(Failure::input(e)),
                _ => {}
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Provenance {
    source: String,
    tolerances: Tolerances,
    seed: u64,
}

fn provenance(common: &CommonArgs, tol: &Tolerances) -> Provenance {
    Provenance {
        source: common.source(),
        tolerances: *tol,
        seed: common.seed,
    }
}

#[derive(Serialize)]
struct YbusReport {
    n_bus: usize,
    #[serde(flatten)]
    y: AdmittanceMatrix,
    warnings: Vec<String>,
    #[serde(flatten)]
    provenance: Provenance,
}

fn cmd_ybus(common: &CommonArgs) -> Outcome {
    let tol = common.tolerances()?;
    let case = common.load()?;
    let y = build_ybus(&case.network)?;
    if common.format == Format::Csv {
        let mut text = String::from("part,row,col,value\n");
        for (part, m) in [("G", &y.g), ("B", &y.b)] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    text.push_str(&format!("{part},{r},{c},{}\n", m[(r, c)]));
                }
            }
        }
        write_text(common.out.as_deref(), text.trim_end())?;
        return Ok(0);
    }
    let report = YbusReport {
        n_bus: y.dim(),
        warnings: case.network.warnings(),
        y,
        provenance: provenance(common, &tol),
    };
    common.emit(&report)?;
    Ok(0)
}

#[derive(Serialize)]
struct ReducedView {
    point: (f64, f64),
    cost_gradient: [f64; 2],
    gradient_angle: f64,
    fixed_licq: FixedLicqReport,
    multipliers: MultiplierSet,
}

#[derive(Serialize)]
struct CheckReport {
    point_source: &'static str,
    perturb_load: Option<LoadShift>,
    state: SystemState,
    evaluation: Evaluation,
    active_set: Option<ActiveSet>,
    licq: Option<CQReport>,
    multipliers: Option<MultiplierSet>,
    fixed_licq: Option<FixedLicqReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reduced: Option<ReducedView>,
    #[serde(flatten)]
    provenance: Provenance,
}

/// The case start when it already solves the power flow, otherwise Newton.
fn analysis_point(cs: &ConstraintSystem, case: &Case, tol: &Tolerances) -> Result<(SystemState, &'static str), Failure> {
    if let Some(start) = &case.start {
        let x = start.clone().with_mask_from_bus_types(&cs.net);
        if pf_residual(&cs.net, &cs.ybus, &x)?.amax() <= tol.pf_tol {
            return Ok((x, "case"));
        }
    }
    let opts = NewtonOptions {
        pf_tol: tol.pf_tol,
        ..Default::default()
    };
    Ok((newton_pf(&cs.net, &cs.ybus, &opts, case.start.as_ref())?.state, "newton"))
}

fn cmd_check(common: &CommonArgs, shift: Option<LoadShift>) -> Outcome {
    let tol = common.tolerances()?;
    let mut case = common.load()?;
    let base = ConstraintSystem::new(case.network.clone(), &case.constraints, tol)?;
    let (mut x, mut point_source) = analysis_point(&base, &case, &tol)?;

    if let Some(s) = shift {
        let n = case.network.n_bus();
        if s.bus >= n {
            return Err(Failure::input(anyhow!("--perturb-load bus {} out of range for {n} buses", s.bus + 1)));
        }
        let rows = tangency_escape_probe(&case, &x, s.bus, s.bus, &[s.delta], &tol)?;
        let row = rows.into_iter().next().expect("one delta gives one row");
        x = row.state.ok_or_else(|| CqaError::Infeasible(row.error.unwrap_or_default()))?;
        case.network.buses[s.bus].p_load += s.delta;
        point_source = "load-shift probe";
    }

    let cs = base.with_network(case.network.clone())?;
    let evaluation = evaluate(&cs, &x)?;
    let reduced = (common.builtin.as_deref() == Some("ex2") && shift.is_none())
        .then(|| -> Result<ReducedView, CqaError> {
            let view = Example2Reduced { params: Example2Params::default() };
            let (v, th) = EXAMPLE2_POINT;
            Ok(ReducedView {
                point: EXAMPLE2_POINT,
                cost_gradient: EXAMPLE2_PROBE_GRADIENT,
                gradient_angle: view.gradient_angle(v, th),
                fixed_licq: view.fixed_licq(v, th, &tol),
                multipliers: view.kkt(v, th, EXAMPLE2_PROBE_GRADIENT, &tol)?,
            })
        })
        .transpose()?;

    let mut report = CheckReport {
        point_source,
        perturb_load: shift,
        state: x.clone(),
        evaluation,
        active_set: None,
        licq: None,
        multipliers: None,
        fixed_licq: None,
        reduced,
        provenance: provenance(common, &tol),
    };
    if !report.evaluation.feasible {
        eprintln!("infeasible point: {}", report.evaluation.violations.join("; "));
        common.emit(&report)?;
        return Ok(EXIT_INFEASIBLE);
    }
    let licq = licq_check(&cs, &x)?;
    let multipliers = kkt_solve(&cs, &x, &case.cost)?;
    report.active_set = Some(active_set(&cs, &x)?);
    report.fixed_licq = Some(fixed_licq_check(&cs.h_ops, &cs.g_ops, &x, &tol)?);
    eprintln!(
        "rank {}/{}, sigma_min {:.3e}, LICQ {}, multipliers {}",
        licq.numerical_rank,
        licq.m,
        licq.sigma_min,
        if licq.licq_holds { "holds" } else { "fails" },
        multipliers.classification
    );
    let code = if licq.licq_holds { 0 } else { EXIT_LICQ };
    report.licq = Some(licq);
    report.multipliers = Some(multipliers);
    common.emit(&report)?;
    Ok(code)
}

fn cmd_perturb(common: &CommonArgs, kind: ModelKind, trials: u64) -> Outcome {
    let tol = common.tolerances()?;
    let case = common.load()?;
    let model = PerturbationModel::default_for(kind, &case.network)?;
    let report = run_genericity_experiment(&case, &model, trials, common.seed, &tol)?;

    let json = serde_json::to_string_pretty(&serde_json::json!({
        "report": report,
        "source": common.source(),
        "seed": common.seed,
        "tolerances": tol,
    }))
    .map_err(Failure::input)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let csv = String::from_utf8(csv).map_err(Failure::input)?;

    match &common.out {
        Some(path) => {
            let other_ext = if common.format == Format::Json { "csv" } else { "json" };
            let sibling = path.with_extension(other_ext);
            let (primary, secondary) = match common.format {
                Format::Json => (&json, &csv),
                Format::Csv => (&csv, &json),
            };
            write_text(Some(path), primary.trim_end())?;
            write_text(Some(&sibling), secondary.trim_end())?;
        }
        None => write_text(None, if common.format == Format::Json { &json } else { csv.trim_end() })?,
    }
    eprintln!(
        "{} trials, {} converged, {} feasible, {} LICQ failures, min sigma_min {}, hypothesis {}",
        report.trials,
        report.converged_count,
        report.feasible_count,
        report.failures.len(),
        report.min_sigma_min().map_or("n/a".into(), |s| format!("{s:.3e}")),
        if report.hypothesis_satisfied { "satisfied" } else { "NOT satisfied" }
    );
    Ok(0)
}

#[derive(Serialize)]
struct ReproOutput<'a> {
    #[serde(flatten)]
    report: &'a ReproReport,
    alpha: f64,
    seed: u64,
}

fn cmd_repro(which: &str, common: &CommonArgs) -> Outcome {
    let tol = common.tolerances()?;
    let report = reproduce(which, common.alpha, &tol)?;
    if common.format == Format::Csv {
        let mut text = String::from("check,passed,detail\n");
        for c in &report.checks {
            text.push_str(&format!("{},{},\"{}\"\n", c.name, c.passed, c.detail.replace('"', "'")));
        }
        write_text(common.out.as_deref(), text.trim_end())?;
    } else {
        common.emit(&ReproOutput {
            report: &report,
            alpha: common.alpha,
            seed: common.seed,
        })?;
    }
    eprintln!("{}", report.summary);
    if report.passed {
        return Ok(0);
    }
    for c in report.checks.iter().filter(|c| !c.passed) {
        eprintln!("mismatch: {} ({})", c.name, c.detail);
    }
    Ok(EXIT_REPRO)
}
