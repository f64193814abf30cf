use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::hqm::HqmStrategy;

use super::train::{train_on, Benchmark};
use super::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub seed: u64,
    pub final_map: f64,
    /// `None` when the threshold was never reached.
    pub epochs_to_threshold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub strategy: String,
    pub median_final_map: f64,
    /// Runs that never reached the threshold count as `epochs + 1`.
    pub median_epochs_to_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summaries: Vec<AblationSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationTable {
    pub fn summary(&self, strategy: &str) -> Option<&AblationSummary> {
        self.summaries.iter().find(|s| s.strategy == strategy)
    }

    /// Per-run rows first, then one `median` row per strategy.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["strategy", "seed", "final_map", "epochs_to_threshold"])?;
        for r in &self.rows {
            w.write_record([
                r.strategy.clone(),
                r.seed.to_string(),
                r.final_map.to_string(),
                r.epochs_to_threshold.map(|e| e.to_string()).unwrap_or_default(),
            ])?;
        }
        for s in &self.summaries {
            w.write_record([
                s.strategy.clone(),
                "median".to_string(),
                s.median_final_map.to_string(),
                s.median_epochs_to_threshold.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains every strategy with every configured seed on one shared benchmark.
///
/// Runs go to `<out_dir>/<strategy>/seed<seed>/`; the table is written to
/// `<out_dir>/ablation.csv`.
pub fn ablate(base: &RunConfig, strategies: &[HqmStrategy]) -> Result<AblationTable> {
    if strategies.is_empty() {
        return Err(config_err("ablation needs at least one strategy"));
    }
    if base.ablation.seeds.is_empty() {
        return Err(config_err("ablation needs at least one seed"));
    }
    base.validate()?;
    for s in strategies {
        base.variant(s, base.seed).validate()?;
    }
    let bench = Arc::new(Benchmark::generate(base)?);
    let threshold = base.eval.map_threshold;
    let never = (base.optim.epochs + 1) as f64;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for strategy in strategies {
        let label = strategy.label();
        let mut finals = Vec::new();
        let mut epochs = Vec::new();
        for &seed in &base.ablation.seeds {
            let mut cfg = base.variant(strategy, seed);
            cfg.out_dir = base.out_dir.join(&label).join(format!("seed{seed}"));
            let run = train_on(&cfg, Arc::clone(&bench))?;
            let reached = run.epochs_to(threshold);
            finals.push(run.final_map());
            epochs.push(reached.map(|e| e as f64).unwrap_or(never));
            rows.push(AblationRow {
                strategy: label.clone(),
                seed,
                final_map: run.final_map(),
                epochs_to_threshold: reached,
            });
        }
        summaries.push(AblationSummary {
            strategy: label,
            median_final_map: median(&finals),
            median_epochs_to_threshold: median(&epochs),
        });
    }
    let table = AblationTable { rows, summaries };
    std::fs::create_dir_all(&base.out_dir)?;
    table.write_csv(&base.out_dir.join("ablation.csv"))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hqm::StrategyKind;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn row_count_is_runs_plus_strategies() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::tiny();
        cfg.data.train_scenes = 4;
        cfg.optim.epochs = 1;
        cfg.ablation.seeds = vec![0, 1];
        cfg.out_dir = dir.path().to_path_buf();
        let strategies = [StrategyKind::Baseline.as_strategy(), StrategyKind::Ajl.as_strategy()];
        let table = ablate(&cfg, &strategies).unwrap();
        assert_eq!(table.rows.len(), 4);
        assert_eq!(table.summaries.len(), 2);
        let text = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 + 2);
        assert!(dir.path().join("ajl/seed1/metrics.csv").exists());

        let single = ablate(&cfg, &strategies[..1]).unwrap();
        assert_eq!(single.summaries.len(), 1);
        assert!(ablate(&cfg, &[]).is_err());
    }
}
