//! Training and evaluation plumbing for the learned boundary detector.
//!
//! Wraps dataset generation, training, and accuracy reporting for a map
//! file, and emits a spatial error heatmap (safe grid cells only, since the
//! detector is never queried from inside an obstacle).

use std::io::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use impc_core::geometry::{nearest_point_exact, ObstacleMap, Point};
use impc_core::sbd::{
    self, Dataset, EvalReport, MlpModel, Normalization, TrainConfig, TrainReport,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Architecture and data budget for one training run.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub samples: usize,
    pub first_width: usize,
    pub hidden_layers: usize,
    pub seed: u64,
    pub config: TrainConfig,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            samples: 100_000,
            first_width: 512,
            hidden_layers: 9,
            seed: 7,
            config: TrainConfig::default(),
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub report: TrainReport,
    /// Accuracy on a held-out set in physical units.
    pub test: EvalReport,
}

/// Trains a detector for `map` from exact nearest-point labels at random
/// safe positions. A fresh test set (one tenth of the training budget) is
/// drawn after training data, so it is disjoint for a fixed seed.
pub fn train_on_map(map: &ObstacleMap, spec: &TrainSpec) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train_data = sbd::generate_dataset(map, spec.samples, true, &mut rng)
        .context("sampling training data")?;
    let test_data = sbd::generate_dataset(map, (spec.samples / 10).max(100), true, &mut rng)
        .context("sampling test data")?;
    let norm = Normalization::from_extent(&map.extent);
    let mut model = MlpModel::new(
        spec.first_width,
        spec.hidden_layers,
        map.obstacles.len(),
        norm,
        &mut rng,
    )?;
    let report = sbd::train(&mut model, &train_data, &spec.config)?;
    let test = sbd::evaluate(&model, &test_data);
    Ok(TrainOutcome { model, report, test })
}

/// Fresh labeled accuracy estimate for an already-trained model.
pub fn eval_on_map(
    model: &MlpModel,
    map: &ObstacleMap,
    samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = sbd::generate_dataset(map, samples, true, &mut rng)?;
    Ok(sbd::evaluate(model, &data))
}

/// Writes a `grid x grid` spatial error map as CSV with columns
/// `x,y,mse`. Cells whose center lies inside an obstacle are skipped.
/// The per-cell value is the squared nearest-point error averaged over
/// obstacles, in physical units.
pub fn write_mse_heatmap(
    model: &MlpModel,
    map: &ObstacleMap,
    grid: usize,
    path: &Path,
) -> Result<()> {
    anyhow::ensure!(grid >= 2, "heatmap grid must be at least 2x2");
    let ext = &map.extent;
    let mut out = String::from("x,y,mse\n");
    for iy in 0..grid {
        let y = ext.y_min + (ext.y_max - ext.y_min) * iy as f64 / (grid - 1) as f64;
        for ix in 0..grid {
            let x = ext.x_min + (ext.x_max - ext.x_min) * ix as f64 / (grid - 1) as f64;
            let p = Point::new(x, y);
            if !map.is_safe(&p) {
                continue;
            }
            let pred = model.predict(p);
            let mut err = 0.0;
            for (j, obstacle) in map.obstacles.iter().enumerate() {
                let (exact, _) = nearest_point_exact(&p, obstacle);
                err += (pred[j] - exact).norm_squared();
            }
            err /= map.obstacles.len() as f64;
            out.push_str(&format!("{:.17e},{:.17e},{:.17e}\n", x, y, err));
        }
    }
    let mut file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Labeled dataset helper shared by tests: exact targets at `n` safe points.
pub fn labeled_safe_points(map: &ObstacleMap, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sbd::generate_dataset(map, n, true, &mut rng)?)
}
