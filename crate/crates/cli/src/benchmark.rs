//! One-step solve-time benchmark on randomized safe states.
//!
//! The same randomized states are shared by every grid cell so the cells
//! are comparable. Trials run in parallel; per-trial results are collected
//! by index and aggregated sequentially, so the output is independent of
//! scheduling.

use anyhow::Result;
use impc_core::cbf::{CbfConfig, SlackMode};
use impc_core::detector::CircleDetector;
use impc_core::dynamics::BoxBounds;
use impc_core::geometry::{CircleObstacle, Point};
use impc_core::impc::{solve_timestep, MpcConfig, TimestepOutcome, WarmStart};
use impc_core::qp::QpSettings;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkCell {
    pub horizon: usize,
    pub m_cbf: usize,
    pub gamma: f64,
    pub trials: usize,
    pub mean_solve_s: f64,
    pub std_solve_s: f64,
    /// Percentage of trials whose one-step problem was infeasible.
    pub infeasible_rate: f64,
    pub mean_iterations: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub horizons: Vec<usize>,
    pub orders: Vec<usize>,
    pub gamma: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            horizons: vec![4, 8, 12, 16, 20, 24],
            orders: vec![1, 2],
            gamma: 0.4,
            trials: 1000,
            seed: 7,
        }
    }
}

fn cell_config(horizon: usize, m_cbf: usize, gamma: f64) -> MpcConfig {
    MpcConfig {
        horizon,
        dt: 0.1,
        state_weight: DVector::from_element(4, 10.0),
        terminal_weight: DVector::from_element(4, 10.0),
        input_weight: DVector::from_element(2, 1.0),
        slack_weight: 1000.0,
        cbf: CbfConfig::new(vec![gamma; m_cbf]).expect("gamma in (0, 1]"),
        slack_mode: SlackMode::Unbounded,
        bounds: BoxBounds::symmetric(4, 10.0, &[7.0, 5.0]),
        robot_radius: 0.0,
        max_iterations: 1000,
        eps_abs: 1e-4,
        eps_rel: 1e-2,
        qp: QpSettings {
            eps_prim: 1e-5,
            eps_dual: 1e-5,
            check_problem: false,
            ..QpSettings::default()
        },
    }
}

/// Randomized states in the box that keep a small clearance from the unit
/// circle. Generated sequentially so the set depends only on the seed.
pub fn random_safe_states(count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(count);
    while states.len() < count {
        let x = rng.gen_range(-10.0..10.0);
        let y = rng.gen_range(-10.0..10.0);
        if x * x + y * y <= 1.1_f64 * 1.1 {
            continue;
        }
        let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let v = rng.gen_range(-2.0..2.0);
        states.push(DVector::from_column_slice(&[x, y, theta, v]));
    }
    states
}

struct TrialResult {
    solve_s: f64,
    iterations: usize,
    infeasible: bool,
}

fn run_trial(config: &MpcConfig, state: &DVector<f64>) -> Result<TrialResult> {
    let detector = CircleDetector {
        circles: vec![CircleObstacle::new(Point::new(0.0, 0.0), 1.0).unwrap()],
    };
    let reference = DVector::from_column_slice(&[3.0, 0.01, 0.0, 0.0]);
    let warm = WarmStart::from_rollout(state, config.horizon, config.dt)?;
    let started = std::time::Instant::now();
    let outcome = solve_timestep(config, &detector, state, &reference, warm)?;
    let solve_s = started.elapsed().as_secs_f64();
    Ok(TrialResult {
        solve_s,
        iterations: outcome.iterations(),
        infeasible: matches!(outcome, TimestepOutcome::Infeasible { .. }),
    })
}

pub fn run_benchmark(spec: &BenchmarkSpec) -> Result<Vec<BenchmarkCell>> {
    let states = random_safe_states(spec.trials, spec.seed);
    let mut cells = Vec::new();
    for &horizon in &spec.horizons {
        for &m_cbf in &spec.orders {
            let config = cell_config(horizon, m_cbf, spec.gamma);
            let trials: Vec<TrialResult> = states
                .par_iter()
                .map(|s| run_trial(&config, s))
                .collect::<Result<Vec<_>>>()?;
            // Sequential aggregation over the indexed results.
            let n = trials.len() as f64;
            let feasible: Vec<&TrialResult> = trials.iter().filter(|t| !t.infeasible).collect();
            let mean = trials.iter().map(|t| t.solve_s).sum::<f64>() / n;
            let var = trials
                .iter()
                .map(|t| (t.solve_s - mean).powi(2))
                .sum::<f64>()
                / n;
            cells.push(BenchmarkCell {
                horizon,
                m_cbf,
                gamma: spec.gamma,
                trials: trials.len(),
                mean_solve_s: mean,
                std_solve_s: var.sqrt(),
                infeasible_rate: 100.0 * (1.0 - feasible.len() as f64 / n),
                mean_iterations: trials.iter().map(|t| t.iterations as f64).sum::<f64>() / n,
            });
        }
    }
    Ok(cells)
}

pub fn write_benchmark_csv(cells: &[BenchmarkCell], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "horizon,m_cbf,gamma,trials,mean_solve_s,std_solve_s,infeasible_rate,mean_iterations"
    )?;
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.horizon,
            c.m_cbf,
            c.gamma,
            c.trials,
            c.mean_solve_s,
            c.std_solve_s,
            c.infeasible_rate,
            c.mean_iterations
        )?;
    }
    Ok(())
}
