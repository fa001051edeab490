use std::path::Path;

use ncs_core::model::{self, NetworkModel};
use ncs_core::oracle::{self, Evaluation};
use ncs_core::riccati::{self, GeneralizedStep};
use ncs_core::simulator::{self, SimOptions};
use ncs_core::synthesis::{self, GainSchedule};
use ncs_core::{CreSolution, StackedModel, ValidatedModel};
use serde::Serialize;

use crate::args::{Cli, Command, Global};
use crate::output::{ensure_dir, write_json, write_trace};
use crate::{check, CliError};

pub fn load_model(g: &Global) -> Result<NetworkModel, CliError> {
    let m = match &g.config {
        Some(path) => NetworkModel::load(path)
            .map_err(|e| CliError::input(format!("cannot load {}: {e}", path.display())))?,
        None => model::reference_instance()?,
    };
    Ok(match g.horizon {
        Some(h) => m.with_horizon(h),
        None => m,
    })
}

pub struct Problem {
    pub model: ValidatedModel,
    pub stacked: StackedModel,
}

pub fn problem(g: &Global) -> Result<Problem, CliError> {
    let model = model::validate(load_model(g)?, g.mode)?;
    let stacked = model::stack(&model);
    Ok(Problem { model, stacked })
}

/// Loads a gain schedule, truncating it to the model horizon when it is longer.
pub fn load_gains(path: &Path, p: &Problem) -> Result<GainSchedule, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    let g = GainSchedule::from_json(&text)
        .map_err(|e| CliError::input(format!("cannot parse {}: {e}", path.display())))?;
    let h = p.model.horizon();
    let g = if g.horizon > h { g.truncated(h)? } else { g };
    g.check_against(p.model.dims(), h)?;
    Ok(g)
}

pub fn optimal(p: &Problem, g: &Global) -> Result<(CreSolution, GainSchedule), CliError> {
    let sol = riccati::solve_cre(&p.model, &p.stacked, g.coupling)?;
    let gains = synthesis::gains(&sol)?;
    Ok((sol, gains))
}

fn gains_or_optimal(
    path: Option<&Path>,
    p: &Problem,
    g: &Global,
) -> Result<GainSchedule, CliError> {
    match path {
        Some(path) => load_gains(path, p),
        None => Ok(optimal(p, g)?.1),
    }
}

#[derive(Serialize)]
struct CostReport {
    closed_form: f64,
    oracle: f64,
    relative_difference: f64,
    /// The cost expression with per-subsystem mean terms, kept for comparison.
    literal_formula: f64,
}

#[derive(Serialize)]
struct GeneralizedReport<'a> {
    all_upsilon_psd: bool,
    max_asymmetry: f64,
    steps: &'a [GeneralizedStep],
}

#[derive(Serialize)]
struct EvaluationReport {
    total: f64,
    terminal: f64,
    stage: Vec<f64>,
    /// Exact mean ‖xⁱ_k‖² indexed [k][i].
    state_energy: Vec<Vec<f64>>,
}

impl EvaluationReport {
    fn new(e: &Evaluation, s: &StackedModel) -> Self {
        EvaluationReport {
            total: e.total,
            terminal: e.terminal,
            stage: e.stage.clone(),
            state_energy: e.state_energy(s),
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Solve => solve(g),
        Command::Simulate(a) => {
            let p = problem(g)?;
            let gains = gains_or_optimal(a.gains.gains.as_deref(), &p, g)?;
            let opts = SimOptions {
                retain_traces: a.retain_traces,
                ..SimOptions::new(a.trials, g.seed)
            };
            let out = simulator::simulate(&p.model, &gains, &opts)?;
            ensure_dir(&g.out)?;
            write_json(&g.out, "summary.json", &out.summary)?;
            for t in &out.traces {
                write_trace(&g.out, t)?;
            }
            println!(
                "mean cost {} ± {} over {} trials",
                out.summary.cost_mean, out.summary.cost_std_error, out.summary.valid_trials
            );
            Ok(())
        }
        Command::Evaluate(a) => {
            let p = problem(g)?;
            let gains = gains_or_optimal(a.gains.as_deref(), &p, g)?;
            let e = oracle::evaluate(&p.model, &p.stacked, &gains)?;
            ensure_dir(&g.out)?;
            write_json(
                &g.out,
                "evaluation.json",
                &EvaluationReport::new(&e, &p.stacked),
            )?;
            println!("exact cost {}", e.total);
            Ok(())
        }
        Command::Check(a) => check::run(g, a),
        Command::Sweep(a) => {
            if a.p.is_empty() {
                return Err(CliError::input("sweep needs at least one --p value"));
            }
            let base = load_model(g)?;
            let opts = SimOptions::new(a.trials, g.seed);
            let coupling = g.coupling;
            let entries = simulator::sweep_dropout(&base, g.mode, &a.p, &opts, |m, s| {
                synthesis::gains(&riccati::solve_cre(m, s, coupling)?)
            })?;
            ensure_dir(&g.out)?;
            write_json(&g.out, "sweep.json", &entries)?;
            for e in &entries {
                match &e.error {
                    Some(err) => println!("p = {}: {err}", e.p),
                    None => println!(
                        "p = {}: decay time {:?}, mean cost {:?}",
                        e.p, e.decay_time, e.cost_mean
                    ),
                }
            }
            Ok(())
        }
    }
}

fn solve(g: &Global) -> Result<(), CliError> {
    let p = problem(g)?;
    let (sol, gains) = optimal(&p, g)?;
    let closed = synthesis::optimal_cost(&sol, &p.model)?;
    let exact = oracle::exact_cost(&p.model, &p.stacked, &gains)?;
    ensure_dir(&g.out)?;
    write_json(&g.out, "cre.json", &sol)?;
    write_json(&g.out, "gains.json", &gains)?;
    write_json(
        &g.out,
        "cost.json",
        &CostReport {
            closed_form: closed,
            oracle: exact,
            relative_difference: (closed - exact).abs() / exact.abs().max(f64::MIN_POSITIVE),
            literal_formula: synthesis::literal_cost(&sol, &p.model),
        },
    )?;
    if g.mode == ncs_core::Mode::Indefinite {
        let gen = riccati::solve_generalized(&p.model, &p.stacked);
        write_json(
            &g.out,
            "generalized.json",
            &GeneralizedReport {
                all_upsilon_psd: gen.all_psd(),
                max_asymmetry: gen.max_asymmetry,
                steps: &gen.steps,
            },
        )?;
        if !gen.all_psd() {
            let bad: Vec<usize> = gen
                .steps
                .iter()
                .filter(|s| !s.upsilon_psd)
                .map(|s| s.k)
                .collect();
            println!("upsilon_psd: false at k = {bad:?}");
        }
    }
    println!("optimal cost {closed} (oracle {exact})");
    Ok(())
}
