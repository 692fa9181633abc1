use std::collections::HashSet;
use std::time::Instant;

use rayon::prelude::*;

use super::pipeline::{evaluate_split, EvalProtocol, Recommender};
use super::report::{ReportRow, RunMetrics};
use super::{AblationConfig, DataSource};
use crate::data::{
    build_cold_start_scenario, cross_validation_scenarios, load_data_dir, synth_generate,
    DataBundle, Interaction,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridOptions {
    /// Worker threads for independent cells; 1 runs them in order on the
    /// calling thread.
    pub jobs: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self { jobs: 1 }
    }
}

impl DataSource {
    pub fn load(&self) -> Result<DataBundle> {
        match self {
            DataSource::Synth(spec) => {
                let out = synth_generate(spec)?;
                Ok(DataBundle {
                    dataset: out.dataset,
                    embeddings: out.embeddings,
                })
            }
            DataSource::Dir(dir) => load_data_dir(dir),
        }
    }
}

/// Every fold of every seed for one configuration, in seed-major order.
pub fn run_cell(config: &AblationConfig, data: &DataBundle) -> Result<Vec<RunMetrics>> {
    config.validate()?;
    let ds = &data.dataset;
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let scenarios = if config.folds == 1 {
            vec![build_cold_start_scenario(
                ds,
                config.cold_user_fraction,
                config.cold_item_fraction,
                seed,
            )?]
        } else {
            cross_validation_scenarios(
                ds,
                config.cold_user_fraction,
                config.cold_item_fraction,
                config.folds,
                seed,
            )?
        };
        for (fold, sc) in scenarios.iter().enumerate() {
            let pick = |idx: &[usize]| -> Vec<Interaction> {
                idx.iter().map(|&i| ds.interactions[i]).collect()
            };
            let (train, test) = (pick(&sc.train), pick(&sc.test));
            let run_seed = crate::numerics::derive_seed(seed, fold as u64 + 100);
            let rec = Recommender::fit(
                config,
                ds,
                &data.embeddings,
                &train,
                &sc.cold_users,
                &sc.cold_items,
                run_seed,
            )?;
            let scorer = rec.scorer(&data.embeddings, &ds.users, &ds.items)?;
            let protocol = EvalProtocol::from_config(config, ds.manifest.rating_scale, run_seed);
            let report = evaluate_split(&scorer, &ds.users, &ds.items, &train, &test, &protocol)?;
            runs.push(RunMetrics {
                seed,
                fold,
                mse: report.mse,
                precision_at_k: report.precision_at_k,
                ndcg_at_k: report.ndcg_at_k,
                users_evaluated: report.users_evaluated,
            });
        }
    }
    Ok(runs)
}

fn run_row(config: &AblationConfig, data: &DataBundle) -> ReportRow {
    let start = Instant::now();
    let result = run_cell(config, data);
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(runs) => ReportRow::from_runs(config.label(), runs, seconds),
        Err(e) => ReportRow::failed(config.label(), e.to_string(), seconds),
    }
}

/// Runs each configuration over its folds and seeds. A failing cell
/// yields a failed row; rows keep the order of `grid`.
pub fn run_ablation_grid(
    grid: &[AblationConfig],
    data: &DataBundle,
    options: GridOptions,
) -> Result<Vec<ReportRow>> {
    if grid.is_empty() {
        return Err(Error::Argument("empty grid".into()));
    }
    let mut labels = HashSet::new();
    for c in grid {
        if !labels.insert(c.label()) {
            return Err(Error::Config(format!(
                "duplicate row label `{}`",
                c.label()
            )));
        }
    }
    if options.jobs <= 1 {
        return Ok(grid.iter().map(|c| run_row(c, data)).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| grid.par_iter().map(|c| run_row(c, data)).collect()))
}
