use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HqmError, Result};
use crate::hqm::{learnable_pass, run_hard_branch, Draws, HardBranch, HardSettings};
use crate::losses::total_loss;
use crate::model::{prepare_grid, Checkpoint, ModelParams};
use crate::numerics::{Tape, Tensor};
use crate::scenes::{class_table, encode_scene, Dataset, FeatureGrid};

use super::eval::{detections_from, evaluate_detections, predict_scene};
use super::optim::{clip_grad_norm, AdamW};
use super::{RunConfig, VAL_SEED_OFFSET};

pub const METRICS_HEADER: [&str; 9] = [
    "epoch", "loss_total", "loss_l", "loss_h", "l1", "giou", "ce", "focal", "val_map",
];

const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_HARD: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Both splits with their encoded grids. Shared read-only between runs.
#[derive(Debug)]
pub struct Benchmark {
    pub train: Dataset,
    pub val: Dataset,
    pub class_table: Tensor,
    pub train_grids: Vec<FeatureGrid>,
    pub val_grids: Vec<FeatureGrid>,
}

impl Benchmark {
    /// Generates both splits from the data section of `cfg`.
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let train = Dataset::generate(&d.scene, d.seed, "train", d.train_scenes)?;
        let val = Dataset::generate(&d.scene, d.seed.wrapping_add(VAL_SEED_OFFSET), "val", d.val_scenes)?;
        Self::from_datasets(cfg, train, val)
    }

    pub fn from_datasets(cfg: &RunConfig, train: Dataset, val: Dataset) -> Result<Self> {
        for ds in [&train, &val] {
            if ds.spec.num_classes != cfg.model.num_classes || ds.spec.num_verbs != cfg.model.num_verbs {
                return Err(HqmError::Config(format!(
                    "{} split has {} classes and {} verbs, model expects {} and {}",
                    ds.split, ds.spec.num_classes, ds.spec.num_verbs, cfg.model.num_classes, cfg.model.num_verbs
                )));
            }
            if ds.scenes.is_empty() {
                return Err(HqmError::Config(format!("{} split is empty", ds.split)));
            }
        }
        let table = class_table(cfg.model.num_classes, cfg.model.dim, cfg.data.seed);
        let encode = |ds: &Dataset| -> Result<Vec<FeatureGrid>> {
            ds.scenes.iter().map(|s| encode_scene(s, &table)).collect()
        };
        Ok(Self {
            train_grids: encode(&train)?,
            val_grids: encode(&val)?,
            train,
            val,
            class_table: table,
        })
    }
}

/// Means over the scenes of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_l: f64,
    pub loss_h: f64,
    pub l1: f64,
    pub giou: f64,
    pub ce: f64,
    pub focal: f64,
    pub gbs_branches: usize,
    pub amm_branches: usize,
    pub empty_amm: usize,
    pub shift_fallbacks: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_l: f64,
    pub loss_h: f64,
    pub l1: f64,
    pub giou: f64,
    pub ce: f64,
    pub focal: f64,
    pub val_map: f64,
}

impl EpochMetrics {
    fn record(&self) -> [String; 9] {
        [
            self.epoch.to_string(),
            self.loss_total.to_string(),
            self.loss_l.to_string(),
            self.loss_h.to_string(),
            self.l1.to_string(),
            self.giou.to_string(),
            self.ce.to_string(),
            self.focal.to_string(),
            self.val_map.to_string(),
        ]
    }
}

/// Training state of one run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub params: ModelParams,
    pub bench: Arc<Benchmark>,
    settings: HardSettings,
    opt: AdamW,
    order_rng: ChaCha8Rng,
    hard_rng: ChaCha8Rng,
    iteration: u64,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, bench: Arc<Benchmark>) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg.model, stream_seed(cfg.seed, STREAM_INIT))?;
        Ok(Self {
            opt: AdamW::new(&params.tensors),
            settings: cfg.hard_settings(),
            order_rng: stream(cfg.seed, STREAM_ORDER),
            hard_rng: stream(cfg.seed, STREAM_HARD),
            cfg: cfg.clone(),
            params,
            bench,
            iteration: 0,
            epoch: 0,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One optimizer step on the given training scenes.
    pub fn step(&mut self, batch: &[usize]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(HqmError::Contract("empty batch".into()));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let mut stats = StepStats::default();
        let mut scene_totals = Vec::with_capacity(batch.len());
        for &i in batch {
            let scene = &self.bench.train.scenes[i];
            let ctx = prepare_grid(&bound, &self.bench.train_grids[i])?;
            let pass = learnable_pass(&bound, &ctx, scene, &self.cfg.loss)?;
            let mut draws = Draws::sample(&mut self.hard_rng);
            let hard = run_hard_branch(
                &self.settings,
                self.iteration,
                scene,
                &pass,
                &ctx,
                &bound,
                &self.cfg.loss,
                &mut draws,
            )?;
            let total = total_loss(&pass.loss.weighted_total, hard.loss.as_ref(), &self.cfg.loss)?;
            let v = pass.loss.values();
            stats.loss_l += v.total;
            stats.l1 += v.l1;
            stats.giou += v.giou;
            stats.ce += v.ce;
            stats.focal += v.focal;
            stats.loss_h += hard.loss.map(|l| l.item()).unwrap_or(0.0);
            stats.loss_total += total.item();
            for b in &hard.branches {
                match b {
                    HardBranch::Gbs => stats.gbs_branches += 1,
                    HardBranch::Amm => stats.amm_branches += 1,
                }
            }
            stats.empty_amm += hard.empty_amm as usize;
            stats.shift_fallbacks += hard.shift_fallbacks;
            scene_totals.push(total);
        }
        let n = batch.len() as f64;
        for x in [
            &mut stats.loss_total,
            &mut stats.loss_l,
            &mut stats.loss_h,
            &mut stats.l1,
            &mut stats.giou,
            &mut stats.ce,
            &mut stats.focal,
        ] {
            *x /= n;
        }
        let mut root = scene_totals[0];
        for t in &scene_totals[1..] {
            root = root.add(t)?;
        }
        let root = root.scale(1.0 / n);
        let grads = tape.backward(&root)?;
        let mut grads: Vec<Tensor> = bound.vars.iter().map(|v| grads.wrt(v)).collect();
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| !g.all_finite()) {
            return Err(HqmError::Numeric(format!(
                "non-finite gradient for {} at iteration {}",
                self.params.names[i], self.iteration
            )));
        }
        if let Some(max) = self.cfg.optim.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        let lr = self.cfg.optim.lr_at(self.epoch);
        self.opt.step(&mut self.params.tensors, &grads, lr, &self.cfg.optim)?;
        if let Some(i) = self.params.tensors.iter().position(|t| !t.all_finite()) {
            return Err(HqmError::Numeric(format!(
                "parameter {} became non-finite at iteration {}",
                self.params.names[i], self.iteration
            )));
        }
        self.iteration += 1;
        Ok(stats)
    }

    /// Mean learnable-branch loss on the given scenes at the current
    /// parameters, computed without any hard branch.
    pub fn learnable_loss(&self, batch: &[usize]) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let mut sum = 0.0;
        for &i in batch {
            let ctx = prepare_grid(&bound, &self.bench.train_grids[i])?;
            let pass = learnable_pass(&bound, &ctx, &self.bench.train.scenes[i], &self.cfg.loss)?;
            sum += pass.loss.values().total;
        }
        Ok(sum / batch.len() as f64)
    }

    /// Batches of the next epoch in shuffled order.
    pub fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.bench.train.scenes.len()).collect();
        order.shuffle(&mut self.order_rng);
        order.chunks(self.cfg.optim.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn validation_map(&self) -> Result<f64> {
        let mut detections = Vec::with_capacity(self.bench.val_grids.len());
        for grid in &self.bench.val_grids {
            detections.push(detections_from(&predict_scene(&self.params, grid)?));
        }
        let report = evaluate_detections(
            &detections,
            &self.bench.val.scenes,
            self.cfg.model.num_verbs,
            &self.cfg.eval,
        )?;
        Ok(report.map)
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let batches = self.epoch_batches();
        let mut sums = StepStats::default();
        for batch in &batches {
            let s = self.step(batch)?;
            sums.loss_total += s.loss_total;
            sums.loss_l += s.loss_l;
            sums.loss_h += s.loss_h;
            sums.l1 += s.l1;
            sums.giou += s.giou;
            sums.ce += s.ce;
            sums.focal += s.focal;
        }
        let n = batches.len() as f64;
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            loss_total: sums.loss_total / n,
            loss_l: sums.loss_l / n,
            loss_h: sums.loss_h / n,
            l1: sums.l1 / n,
            giou: sums.giou / n,
            ce: sums.ce / n,
            focal: sums.focal / n,
            val_map: self.validation_map()?,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            params: self.params.clone(),
            class_table: self.bench.class_table.clone(),
            run: serde_json::to_value(&self.cfg)?,
        })
    }
}

fn stream_seed(seed: u64, id: u64) -> u64 {
    use rand::RngCore;
    stream(seed, id).next_u64()
}

/// Artifacts of a finished run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub metrics: Vec<EpochMetrics>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

impl TrainSummary {
    pub fn final_map(&self) -> f64 {
        self.metrics.last().map(|m| m.val_map).unwrap_or(0.0)
    }

    /// First one-based epoch whose validation mAP reaches `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.metrics.iter().find(|m| m.val_map >= threshold).map(|m| m.epoch)
    }
}

fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Trains on a prepared benchmark and writes `metrics.csv`, `config.json`
/// and `checkpoint.{json,bin}` into the configured output directory.
pub fn train_on(cfg: &RunConfig, bench: Arc<Benchmark>) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(cfg, bench)?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json()?)?;
    let metrics_path = out.join("metrics.csv");
    let mut metrics = Vec::with_capacity(cfg.optim.epochs);
    for _ in 0..cfg.optim.epochs {
        metrics.push(trainer.run_epoch()?);
        write_metrics(&metrics_path, &metrics)?;
    }
    trainer.checkpoint()?.save(out, "checkpoint")?;
    Ok(TrainSummary {
        metrics,
        metrics_path,
        checkpoint_path: out.join("checkpoint.json"),
    })
}

/// Validates `cfg`, generates its benchmark and trains.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    train_on(cfg, Arc::new(Benchmark::generate(cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hqm::StrategyKind;

    fn tiny(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::tiny();
        cfg.data.train_scenes = 4;
        cfg.optim.epochs = 1;
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn one_epoch_writes_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let summary = train(&tiny(dir.path())).unwrap();
        assert_eq!(summary.metrics.len(), 1);
        let text = fs::read_to_string(&summary.metrics_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER.join(","));
        assert_eq!(lines.len(), 2);
        assert!(summary.checkpoint_path.exists());
        Checkpoint::load(&summary.checkpoint_path).unwrap();
    }

    #[test]
    fn same_seed_same_metrics() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut ca = tiny(a.path());
        ca.optim.epochs = 2;
        let mut cb = ca.clone();
        cb.out_dir = b.path().to_path_buf();
        let sa = train(&ca).unwrap();
        let sb = train(&cb).unwrap();
        assert_eq!(fs::read(sa.metrics_path).unwrap(), fs::read(sb.metrics_path).unwrap());
        assert_eq!(
            fs::read(a.path().join("checkpoint.bin")).unwrap(),
            fs::read(b.path().join("checkpoint.bin")).unwrap()
        );
    }

    #[test]
    fn invalid_config_fails_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(&dir.path().join("run"));
        cfg.optim.batch_size = 0;
        assert!(matches!(train(&cfg), Err(HqmError::Config(_))));
        assert!(!dir.path().join("run").exists());
    }

    #[test]
    fn ajl_alternates_branches_per_iteration() {
        let mut cfg = RunConfig::tiny();
        cfg.strategy = StrategyKind::Ajl.as_strategy();
        let bench = Arc::new(Benchmark::generate(&cfg).unwrap());
        let mut t = Trainer::new(&cfg, bench).unwrap();
        let (mut gbs, mut amm) = (0, 0);
        for _ in 0..4 {
            let s = t.step(&[0, 1]).unwrap();
            gbs += (s.gbs_branches > 0) as usize;
            amm += (s.amm_branches > 0) as usize;
            assert!(s.gbs_branches == 0 || s.amm_branches == 0);
        }
        assert_eq!((gbs, amm), (2, 2));
    }

    #[test]
    fn learnable_loss_matches_step_statistics() {
        let mut cfg = RunConfig::tiny();
        cfg.strategy = StrategyKind::Pjl.as_strategy();
        let bench = Arc::new(Benchmark::generate(&cfg).unwrap());
        let mut t = Trainer::new(&cfg, bench).unwrap();
        for _ in 0..3 {
            let expect = t.learnable_loss(&[1, 2, 3]).unwrap();
            let got = t.step(&[1, 2, 3]).unwrap().loss_l;
            assert_eq!(expect.to_bits(), got.to_bits());
        }
    }
}
