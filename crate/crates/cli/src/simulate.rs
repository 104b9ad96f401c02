//! Closed-loop scenario runner with CSV and JSON artifacts.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use impc_core::impc::{run_closed_loop, ClosedLoopResult};
use serde::Serialize;

use crate::scenarios::Scenario;

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub steps: usize,
    pub reached_goal: bool,
    pub waypoints_reached: usize,
    pub infeasible_at: Option<usize>,
    /// Worst clearance diagnostic over the run; negative means collision.
    pub min_barrier: f64,
    pub mean_iterations: f64,
    pub max_iterations: usize,
    pub mean_solve_time_s: f64,
    pub final_state: [f64; 4],
}

pub fn summarize(scenario_name: &str, result: &ClosedLoopResult) -> RunSummary {
    let n = result.steps.len().max(1) as f64;
    let final_state = *result.states.last().unwrap();
    RunSummary {
        scenario: scenario_name.to_string(),
        steps: result.steps.len(),
        reached_goal: result.reached_goal,
        waypoints_reached: result.waypoints_reached,
        infeasible_at: result.infeasible_at,
        min_barrier: result.min_barrier(),
        mean_iterations: result.steps.iter().map(|s| s.iterations as f64).sum::<f64>() / n,
        max_iterations: result.steps.iter().map(|s| s.iterations).max().unwrap_or(0),
        mean_solve_time_s: result
            .steps
            .iter()
            .map(|s| s.solve_time.as_secs_f64())
            .sum::<f64>()
            / n,
        final_state: [final_state.x, final_state.y, final_state.theta, final_state.v],
    }
}

/// One row per applied control step.
pub fn write_trajectory_csv(result: &ClosedLoopResult, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(out, "t,x,y,theta,v,u1,u2,j_conv,solve_time_s,min_h")?;
    for (t, step) in result.steps.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            t,
            step.state.x,
            step.state.y,
            step.state.theta,
            step.state.v,
            step.input.u1,
            step.input.u2,
            step.iterations,
            step.solve_time.as_secs_f64(),
            step.min_barrier
        )?;
    }
    Ok(())
}

/// Runs a scenario and writes `<name>.csv` and `<name>.json` into `out_dir`
/// when provided.
pub fn run_scenario(scenario: &Scenario, out_dir: Option<&Path>) -> Result<RunSummary> {
    let result = run_closed_loop(
        &scenario.config,
        scenario.detector.as_ref(),
        &scenario.world,
        &scenario.task,
    )?;
    let summary = summarize(scenario.name, &result);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_trajectory_csv(&result, &dir.join(format!("{}.csv", scenario.name)))?;
        std::fs::write(
            dir.join(format!("{}.json", scenario.name)),
            serde_json::to_string_pretty(&summary)?,
        )?;
    }
    Ok(summary)
}
