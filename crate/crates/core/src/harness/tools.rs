use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::hqm::{learnable_pass, learnable_pass_with, run_hard_branch, Draws, HqmStrategy, StrategyKind};
use crate::losses::total_loss;
use crate::model::{decoder_forward, prepare_grid, Checkpoint, ModelParams, QuerySet};
use crate::numerics::{finite_diff_check_with, DiffScheme, Tape};
use crate::scenes::{class_table, encode_scene, Dataset, Scene};

use super::RunConfig;

/// Writes the unmasked attention of every learnable query as
/// `attn_layer{l}_head{h}.csv`: one row per query, one column per cell.
pub fn dump_attention(checkpoint: &Checkpoint, scene: &Scene, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let grid = encode_scene(scene, &checkpoint.class_table)?;
    let tape = Tape::new();
    let bound = checkpoint.params.bind_frozen(&tape);
    let ctx = prepare_grid(&bound, &grid)?;
    let out = decoder_forward(&QuerySet::learnable(&bound), &ctx, &bound, None)?;
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for (l, heads) in out.attention.iter().enumerate() {
        for (h, map) in heads.iter().enumerate() {
            let path = out_dir.join(format!("attn_layer{l}_head{h}.csv"));
            let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path)?;
            for r in 0..map.rows() {
                w.write_record(map.row(r).iter().map(|v| v.to_string()))?;
            }
            w.flush()?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Strategies covered by [`grad_check`].
pub const GRAD_CHECK_STRATEGIES: [StrategyKind; 6] = StrategyKind::ALL;

/// Worst relative error of one parameter group under one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub strategy: String,
    pub group: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub rows: Vec<GradCheckRow>,
    /// Worst error per strategy, in check order.
    pub per_strategy: Vec<(String, f64)>,
    pub evaluations: usize,
}

impl GradCheckSummary {
    pub fn max_rel_error(&self) -> f64 {
        self.per_strategy.iter().map(|p| p.1).fold(0.0, f64::max)
    }
}

/// `decoder.1.head0.wq` → `decoder.1`, `heads.class.w1` → `heads.class`.
fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        [single] => single.to_string(),
        [first, second, ..] if parts.len() > 2 => format!("{first}.{second}"),
        [first, ..] => first.to_string(),
        [] => String::new(),
    }
}

/// Initial step of the extrapolated differences.
pub const GRAD_CHECK_STEP: f64 = 1e-4;
pub const MAX_CHECK_QUERIES: usize = 4;
pub const MAX_CHECK_SIDE: usize = 6;

/// Compares tape gradients of the full training loss with central
/// differences, on one scene, for each strategy.
///
/// Matching, shifts, masks and the detached query copies are taken once at
/// the unperturbed parameters and replayed in every evaluation, so the loss
/// is a fixed function of the parameters while it is differentiated.
pub fn grad_check(cfg: &RunConfig, strategies: &[StrategyKind]) -> Result<GradCheckSummary> {
    cfg.validate()?;
    let spec = &cfg.data.scene;
    if cfg.model.num_queries > MAX_CHECK_QUERIES || spec.grid_h > MAX_CHECK_SIDE || spec.grid_w > MAX_CHECK_SIDE {
        return Err(contract_err(format!(
            "gradient check needs at most {MAX_CHECK_QUERIES} queries and a {MAX_CHECK_SIDE}x{MAX_CHECK_SIDE} grid"
        )));
    }
    let data = Dataset::generate(spec, cfg.data.seed, "gradcheck", 1)?;
    let scene = &data.scenes[0];
    let grid = encode_scene(scene, &class_table(cfg.model.num_classes, cfg.model.dim, cfg.data.seed))?;
    let params = ModelParams::init(&cfg.model, cfg.seed)?;
    let weights = &cfg.loss;

    let mut rows = Vec::new();
    let mut per_strategy = Vec::new();
    let mut evaluations = 0;
    for &kind in strategies {
        let settings = crate::hqm::HardSettings {
            strategy: HqmStrategy {
                kind,
                ..cfg.strategy.clone()
            },
            ..cfg.hard_settings()
        };
        settings.strategy.validate()?;
        let rng_seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;

        let (assignment, frozen) = {
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let ctx = prepare_grid(&bound, &grid)?;
            let pass = learnable_pass(&bound, &ctx, scene, weights)?;
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let mut draws = Draws::sample(&mut rng);
            run_hard_branch(&settings, 0, scene, &pass, &ctx, &bound, weights, &mut draws)?;
            (pass.assignment.clone(), draws.into_frozen())
        };

        let report = finite_diff_check_with(&params.tensors, DiffScheme::Ridders { h0: GRAD_CHECK_STEP }, |_tape, vars| {
            let bound = params.bind_vars(vars.to_vec())?;
            let ctx = prepare_grid(&bound, &grid)?;
            let pass = learnable_pass_with(&bound, &ctx, scene, weights, Some(&assignment))?;
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let mut draws = Draws::replay(&mut rng, &frozen);
            let hard = run_hard_branch(&settings, 0, scene, &pass, &ctx, &bound, weights, &mut draws)?;
            total_loss(&pass.loss.weighted_total, hard.loss.as_ref(), weights)
        })?;
        evaluations += report.evaluations;

        let mut groups: Vec<(String, f64)> = Vec::new();
        for (name, err) in params.names.iter().zip(&report.per_param) {
            let g = group_of(name);
            match groups.iter_mut().find(|(n, _)| *n == g) {
                Some(entry) => entry.1 = entry.1.max(*err),
                None => groups.push((g, *err)),
            }
        }
        for (group, err) in groups {
            rows.push(GradCheckRow {
                strategy: kind.name().to_string(),
                group,
                max_rel_error: err,
            });
        }
        per_strategy.push((kind.name().to_string(), report.max_rel_error));
    }
    Ok(GradCheckSummary {
        rows,
        per_strategy,
        evaluations,
    })
}
