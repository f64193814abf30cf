//! Hard-positive queries: shifted-box queries (GBS), attention map masking
//! (AMM), and the schedules that combine them with the learnable branch.
//!
//! A training step for one scene always runs the learnable queries first,
//! matches them, and only then builds the hard branch. The hard branch reads
//! the learnable pass (its assignment and captured attention) but never
//! writes into it, so `L_l` is the same whatever strategy is selected.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::geometry::{shift_box_or_fallback, BBox, ShiftConfig};
use crate::losses::{branch_loss, LossBreakdown, LossWeights};
use crate::matching::{hungarian, matching_cost, Assignment};
use crate::model::{
    decoder_forward, detection_heads, Bound, DecoderOutputs, GridContext, Predictions, QueryKind,
    QuerySet, PRIOR_DIM,
};
use crate::numerics::{Tensor, Var};
use crate::scenes::{HoiPair, Scene};

/// `[x_h, y_h, w_h, h_h, x_o, y_o, w_o, h_o, x_h−x_o, y_h−y_o, w_h·h_h, w_o·h_o]`
pub type PairPrior = [f64; PRIOR_DIM];

pub fn pair_prior(human: BBox, object: BBox) -> PairPrior {
    [
        human.cx,
        human.cy,
        human.w,
        human.h,
        object.cx,
        object.cy,
        object.w,
        object.h,
        human.cx - object.cx,
        human.cy - object.cy,
        human.w * human.h,
        object.w * object.h,
    ]
}

/// How shifted-box queries perturb their ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GbsVariant {
    Shift,
    /// Encode the ground truth as is.
    NoShift,
    /// Encode the ground truth and add zero-mean Gaussian noise after `tanh`.
    GaussianNoise { sigma: f64 },
}

/// Shifted-box queries for `pairs`, one row per pair, plus the number of
/// shifts that fell back to the deterministic offset.
pub fn gbs_queries<'t, R: Rng + ?Sized>(
    pairs: &[HoiPair],
    bound: &Bound<'_, 't>,
    shift: &ShiftConfig,
    variant: GbsVariant,
    rng: &mut R,
) -> Result<(Var<'t>, usize)> {
    if pairs.is_empty() {
        return Err(contract_err("shifted-box queries need at least one pair"));
    }
    let mut fallbacks = 0;
    let mut priors = Vec::with_capacity(pairs.len() * PRIOR_DIM);
    for pair in pairs {
        let (human, object) = match variant {
            GbsVariant::Shift => {
                let (h, fh) = shift_box_or_fallback(pair.human, shift, rng);
                let (o, fo) = shift_box_or_fallback(pair.object, shift, rng);
                fallbacks += fh as usize + fo as usize;
                (h, o)
            }
            _ => (pair.human, pair.object),
        };
        priors.extend(pair_prior(human, object));
    }
    let tape = bound.vars[0].tape();
    let prior = tape.constant(Tensor::new(vec![pairs.len(), PRIOR_DIM], priors)?);
    let mut q = bound.mlp(&prior, bound.index.prior_encoder)?.tanh();
    if let GbsVariant::GaussianNoise { sigma } = variant {
        let normal = Normal::new(0.0, sigma).map_err(|e| config_err(e.to_string()))?;
        let noise: Vec<f64> = (0..q.rows() * q.cols()).map(|_| normal.sample(rng)).collect();
        q = q.add(&tape.constant(Tensor::new(q.shape(), noise)?))?;
    }
    Ok((q, fallbacks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmmConfig {
    /// Number of top reference positions eligible for masking.
    pub k: usize,
    /// Mask probability inside the top-K.
    pub gamma: f64,
    /// Draw fresh masks at every decoder layer; otherwise the draws of the
    /// first layer are replayed at later layers.
    pub per_layer_resample: bool,
    /// Read `gamma` as the keep probability instead of the mask probability.
    pub gamma_is_keep: bool,
}

impl Default for AmmConfig {
    fn default() -> Self {
        Self {
            k: 32,
            gamma: 0.4,
            per_layer_resample: true,
            gamma_is_keep: false,
        }
    }
}

impl AmmConfig {
    pub fn validate(&self, cells: usize) -> Result<()> {
        if self.k == 0 || self.k > cells {
            return Err(config_err(format!(
                "mask top-K must lie in 1..={cells}, got {}",
                self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(config_err(format!("mask gamma must lie in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }

    fn masks(&self, u: f64) -> bool {
        if self.gamma_is_keep {
            u >= self.gamma
        } else {
            u < self.gamma
        }
    }
}

/// Indices of the `k` largest entries, largest first; equal values keep
/// ascending index order.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Binary keep-mask for one attention row. Draws one uniform per top-K
/// position, in rank order.
pub fn amm_keep_mask<R: Rng + ?Sized>(reference: &[f64], cfg: &AmmConfig, rng: &mut R) -> Result<Vec<f64>> {
    if cfg.k > reference.len() {
        return Err(config_err(format!(
            "top-K {} exceeds attention length {}",
            cfg.k,
            reference.len()
        )));
    }
    let mut mask = vec![1.0; reference.len()];
    for i in top_k_indices(reference, cfg.k) {
        if cfg.masks(rng.gen()) {
            mask[i] = 0.0;
        }
    }
    Ok(mask)
}

/// Keep-mask that drops every position independently at `rate`.
pub fn uniform_keep_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 })
        .collect()
}

/// Zeroes a random subset of the positions where `reference` is largest.
/// Every other position is returned bit for bit.
pub fn amm_mask<R: Rng + ?Sized>(
    attention: &[f64],
    reference: &[f64],
    cfg: &AmmConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if attention.len() != reference.len() {
        return Err(contract_err(format!(
            "attention row has {} entries, reference {}",
            attention.len(),
            reference.len()
        )));
    }
    let keep = amm_keep_mask(reference, cfg, rng)?;
    Ok(attention
        .iter()
        .zip(keep)
        .map(|(&a, k)| if k == 0.0 { 0.0 } else { a })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Baseline,
    GbsOnly,
    AmmOnly,
    /// Alternate shifted-box and masked branches between iterations.
    Ajl,
    /// Shifted-box queries whose attention is then masked.
    Cjl,
    /// Both branches every iteration, each at half weight.
    Pjl,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Baseline,
        StrategyKind::GbsOnly,
        StrategyKind::AmmOnly,
        StrategyKind::Ajl,
        StrategyKind::Cjl,
        StrategyKind::Pjl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Baseline => "baseline",
            StrategyKind::GbsOnly => "gbs_only",
            StrategyKind::AmmOnly => "amm_only",
            StrategyKind::Ajl => "ajl",
            StrategyKind::Cjl => "cjl",
            StrategyKind::Pjl => "pjl",
        }
    }

    pub fn uses_gbs(self) -> bool {
        !matches!(self, StrategyKind::Baseline | StrategyKind::AmmOnly)
    }

    pub fn uses_amm(self) -> bool {
        !matches!(self, StrategyKind::Baseline | StrategyKind::GbsOnly)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = crate::HqmError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let key = match key.as_str() {
            "gbs" => "gbs_only",
            "amm" => "amm_only",
            other => other,
        };
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| config_err(format!("unknown strategy `{s}`")))
    }
}

/// A schedule plus its ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HqmStrategy {
    pub kind: StrategyKind,
    /// Shifted-box queries encode the unshifted ground truth.
    pub no_shift: bool,
    /// Unshifted ground truth plus Gaussian noise on the encoded query.
    pub gaussian_noise: bool,
    pub noise_sigma: f64,
    /// Mask uniformly over the whole map at the same expected count.
    pub no_topk: bool,
    /// Rank positions by the hard query's own attention.
    pub reference_self: bool,
    /// Mask the learnable queries themselves instead of detached copies.
    pub mask_learnable: bool,
}

impl Default for HqmStrategy {
    fn default() -> Self {
        Self::plain(StrategyKind::Ajl)
    }
}

impl HqmStrategy {
    pub fn plain(kind: StrategyKind) -> Self {
        Self {
            kind,
            no_shift: false,
            gaussian_noise: false,
            noise_sigma: 0.1,
            no_topk: false,
            reference_self: false,
            mask_learnable: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.no_shift || self.gaussian_noise) && !self.kind.uses_gbs() {
            return Err(config_err(format!(
                "shift ablations need a strategy with shifted-box queries, not {}",
                self.kind
            )));
        }
        if self.no_shift && self.gaussian_noise {
            return Err(config_err("no_shift and gaussian_noise are exclusive"));
        }
        if (self.no_topk || self.reference_self || self.mask_learnable) && !self.kind.uses_amm() {
            return Err(config_err(format!(
                "masking ablations need a strategy with attention masking, not {}",
                self.kind
            )));
        }
        if self.mask_learnable && (self.reference_self || self.kind == StrategyKind::Cjl) {
            return Err(config_err(
                "mask_learnable cannot combine with reference_self or the cascaded schedule",
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(config_err("noise sigma must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn gbs_variant(&self) -> GbsVariant {
        if self.gaussian_noise {
            GbsVariant::GaussianNoise {
                sigma: self.noise_sigma,
            }
        } else if self.no_shift {
            GbsVariant::NoShift
        } else {
            GbsVariant::Shift
        }
    }

    /// Short label used in tables, e.g. `gbs_only+no_shift`.
    pub fn label(&self) -> String {
        let mut s = self.kind.name().to_string();
        for (on, name) in [
            (self.no_shift, "no_shift"),
            (self.gaussian_noise, "gaussian_noise"),
            (self.no_topk, "no_topk"),
            (self.reference_self, "reference_self"),
            (self.mask_learnable, "mask_learnable"),
        ] {
            if on {
                s.push('+');
                s.push_str(name);
            }
        }
        s
    }
}

impl FromStr for HqmStrategy {
    type Err = crate::HqmError;

    /// Parses labels of the form `kind[+flag...]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('+');
        let kind: StrategyKind = parts.next().unwrap_or_default().parse()?;
        let mut out = HqmStrategy::plain(kind);
        for flag in parts {
            match flag.trim() {
                "no_shift" => out.no_shift = true,
                "gaussian_noise" => out.gaussian_noise = true,
                "no_topk" => out.no_topk = true,
                "reference_self" => out.reference_self = true,
                "mask_learnable" => out.mask_learnable = true,
                other => return Err(config_err(format!("unknown ablation flag `{other}`"))),
            }
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardBranch {
    Gbs,
    Amm,
}

/// Alternating schedule: even iterations shift boxes, odd ones mask attention.
pub fn ajl_step(iteration: u64) -> HardBranch {
    if iteration % 2 == 0 {
        HardBranch::Gbs
    } else {
        HardBranch::Amm
    }
}

/// Everything the hard branch needs from the learnable pass of this step.
pub struct LearnablePass<'t> {
    pub queries: QuerySet<'t>,
    pub outputs: DecoderOutputs<'t>,
    pub preds: Predictions<'t>,
    pub assignment: Assignment,
    pub loss: LossBreakdown<'t>,
}

/// Decodes the learnable queries, matches them against the scene and
/// computes `L_l`.
pub fn learnable_pass<'t>(
    bound: &Bound<'_, 't>,
    ctx: &GridContext<'t>,
    scene: &Scene,
    weights: &LossWeights,
) -> Result<LearnablePass<'t>> {
    learnable_pass_with(bound, ctx, scene, weights, None)
}

/// [`learnable_pass`] with an optional fixed assignment in place of matching.
pub fn learnable_pass_with<'t>(
    bound: &Bound<'_, 't>,
    ctx: &GridContext<'t>,
    scene: &Scene,
    weights: &LossWeights,
    fixed: Option<&Assignment>,
) -> Result<LearnablePass<'t>> {
    let queries = QuerySet::learnable(bound);
    let outputs = decoder_forward(&queries, ctx, bound, None)?;
    let preds = detection_heads(&outputs.last(), bound)?;
    let assignment = match fixed {
        Some(a) => {
            if !a.is_valid_for(preds.len(), scene.pairs.len()) {
                return Err(contract_err("fixed assignment does not fit this scene"));
            }
            a.clone()
        }
        None => hungarian(&matching_cost(&preds.detach(), &scene.pairs, weights)?),
    };
    let loss = branch_loss(&preds, &scene.pairs, &assignment, weights)?;
    Ok(LearnablePass {
        queries,
        outputs,
        preds,
        assignment,
        loss,
    })
}

/// Copies of the matched learnable queries, in target order, cut off from
/// the learnable embedding so no gradient reaches it through the copy.
pub fn select_positive_queries<'t>(assignment: &Assignment, learnable: &QuerySet<'t>) -> Result<QuerySet<'t>> {
    if assignment.is_empty() {
        return Err(contract_err("no matched queries to copy"));
    }
    let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let origin: Vec<usize> = assignment.pairs.iter().map(|p| p.1).collect();
    let source = learnable.embeddings.to_tensor();
    let d = source.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in &rows {
        data.extend_from_slice(source.row(r));
    }
    let tape = learnable.embeddings.tape();
    let copy = tape.constant(Tensor::new(vec![rows.len(), d], data)?);
    QuerySet::hard(QueryKind::AmmCopy, copy, origin)
}

/// Hard-branch settings shared by every scene of a run.
#[derive(Debug, Clone)]
pub struct HardSettings {
    pub strategy: HqmStrategy,
    pub amm: AmmConfig,
    pub shift: ShiftConfig,
}

/// Values a hard branch treats as constants: the attention masks and the
/// detached copies of matched learnable queries, in the order they were used.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrozenDraws {
    pub masks: Vec<Tensor>,
    pub copies: Vec<Tensor>,
}

/// Random draws of one hard branch: a generator for shifts and masks, and
/// optionally a [`FrozenDraws`] to replay instead of sampling and copying.
///
/// Every mask and copy used is logged, so a later call can replay them
/// exactly.
pub struct Draws<'a> {
    pub rng: &'a mut ChaCha8Rng,
    frozen: Option<&'a FrozenDraws>,
    masks_used: usize,
    copies_used: usize,
    log: FrozenDraws,
}

impl<'a> Draws<'a> {
    pub fn sample(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            rng,
            frozen: None,
            masks_used: 0,
            copies_used: 0,
            log: FrozenDraws::default(),
        }
    }

    pub fn replay(rng: &'a mut ChaCha8Rng, frozen: &'a FrozenDraws) -> Self {
        Self {
            frozen: Some(frozen),
            ..Self::sample(rng)
        }
    }

    pub fn logged(&self) -> &FrozenDraws {
        &self.log
    }

    pub fn into_frozen(self) -> FrozenDraws {
        self.log
    }

    fn next_frozen_mask(&mut self) -> Result<Option<Tensor>> {
        let Some(frozen) = self.frozen else {
            return Ok(None);
        };
        let mask = frozen
            .masks
            .get(self.masks_used)
            .ok_or_else(|| contract_err("replayed mask list is too short"))?
            .clone();
        self.masks_used += 1;
        Ok(Some(mask))
    }

    /// The copy to use in place of `fresh`: the replayed one when frozen.
    fn copy(&mut self, fresh: Tensor) -> Result<Tensor> {
        let t = match self.frozen {
            Some(frozen) => {
                let t = frozen
                    .copies
                    .get(self.copies_used)
                    .ok_or_else(|| contract_err("replayed copy list is too short"))?;
                if t.shape() != fresh.shape() {
                    return Err(contract_err("replayed copy has the wrong shape"));
                }
                self.copies_used += 1;
                t.clone()
            }
            None => fresh,
        };
        self.log.copies.push(t.clone());
        Ok(t)
    }
}

/// Result of the hard branch for one scene.
pub struct HardOutcome<'t> {
    /// `L_h`, or `None` when no hard pass ran.
    pub loss: Option<Var<'t>>,
    pub branches: Vec<HardBranch>,
    /// A masking branch had no matched query and contributed zero.
    pub empty_amm: bool,
    pub shift_fallbacks: usize,
}

/// Where the reference row for hard query `i` comes from.
enum Reference<'a> {
    /// Row of the captured learnable attention, or `None` to leave the row unmasked.
    Learnable {
        attention: &'a [Vec<Tensor>],
        rows: Vec<Option<usize>>,
    },
    /// The query's own unmasked map.
    SelfMap,
}

struct Masker<'a, 'd> {
    cfg: &'a AmmConfig,
    no_topk: bool,
    reference: Reference<'a>,
    draws: &'a mut Draws<'d>,
    /// Generator state at the first layer, restored at each later layer
    /// when masks are not resampled.
    layer_start: Option<ChaCha8Rng>,
    layer: usize,
}

impl<'a, 'd> Masker<'a, 'd> {
    fn new(cfg: &'a AmmConfig, no_topk: bool, reference: Reference<'a>, draws: &'a mut Draws<'d>) -> Self {
        Self {
            cfg,
            no_topk,
            reference,
            draws,
            layer_start: None,
            layer: 0,
        }
    }

    fn mask(&mut self, layer: usize, head: usize, map: &Tensor) -> Result<Option<Tensor>> {
        if let Some(mask) = self.draws.next_frozen_mask()? {
            self.draws.log.masks.push(mask.clone());
            return Ok(Some(mask));
        }
        if !self.cfg.per_layer_resample {
            match &self.layer_start {
                None => {
                    self.layer_start = Some(self.draws.rng.clone());
                    self.layer = layer;
                }
                Some(start) if layer != self.layer => {
                    *self.draws.rng = start.clone();
                    self.layer = layer;
                }
                Some(_) => {}
            }
        }
        let (n, cells) = (map.rows(), map.cols());
        let rng = &mut *self.draws.rng;
        let mut out = Vec::with_capacity(n * cells);
        for i in 0..n {
            let reference: Option<&[f64]> = match &self.reference {
                Reference::SelfMap => Some(map.row(i)),
                Reference::Learnable { attention, rows } => {
                    rows[i].map(|q| attention[layer][head].row(q))
                }
            };
            match reference {
                None => out.extend(std::iter::repeat_n(1.0, cells)),
                Some(_) if self.no_topk => {
                    let rate = self.cfg.gamma * self.cfg.k as f64 / cells as f64;
                    out.extend(uniform_keep_mask(cells, rate, rng));
                }
                Some(r) => out.extend(amm_keep_mask(r, self.cfg, rng)?),
            }
        }
        let mask = Tensor::new(vec![n, cells], out)?;
        self.draws.log.masks.push(mask.clone());
        Ok(Some(mask))
    }
}

fn identity_assignment(n: usize, origin: &[usize]) -> Assignment {
    Assignment {
        pairs: (0..n).map(|i| (i, origin[i])).collect(),
    }
}

fn decode_and_score<'t>(
    queries: &QuerySet<'t>,
    ctx: &GridContext<'t>,
    bound: &Bound<'_, 't>,
    targets: &[HoiPair],
    assignment: &Assignment,
    weights: &LossWeights,
    masker: Option<&mut Masker<'_, '_>>,
) -> Result<Var<'t>> {
    let outputs = match masker {
        Some(m) => {
            let mut hook = |l: usize, h: usize, map: &Tensor| m.mask(l, h, map);
            decoder_forward(queries, ctx, bound, Some(&mut hook))?
        }
        None => decoder_forward(queries, ctx, bound, None)?,
    };
    let preds = detection_heads(&outputs.last(), bound)?;
    Ok(branch_loss(&preds, targets, assignment, weights)?.weighted_total)
}

#[allow(clippy::too_many_arguments)]
fn gbs_branch<'t>(
    scene: &Scene,
    pass: &LearnablePass<'t>,
    ctx: &GridContext<'t>,
    bound: &Bound<'_, 't>,
    settings: &HardSettings,
    weights: &LossWeights,
    draws: &mut Draws<'_>,
    cascade: bool,
) -> Result<(Var<'t>, usize)> {
    let s = &settings.strategy;
    let (emb, fallbacks) = gbs_queries(&scene.pairs, bound, &settings.shift, s.gbs_variant(), draws.rng)?;
    let origin: Vec<usize> = (0..scene.pairs.len()).collect();
    let queries = QuerySet::hard(QueryKind::Gbs, emb, origin.clone())?;
    let assignment = identity_assignment(origin.len(), &origin);
    let loss = if cascade {
        let reference = if s.reference_self {
            Reference::SelfMap
        } else {
            Reference::Learnable {
                attention: &pass.outputs.attention,
                rows: origin
                    .iter()
                    .map(|&t| pass.assignment.query_for_target(t))
                    .collect(),
            }
        };
        let mut masker = Masker::new(&settings.amm, s.no_topk, reference, draws);
        decode_and_score(&queries, ctx, bound, &scene.pairs, &assignment, weights, Some(&mut masker))?
    } else {
        decode_and_score(&queries, ctx, bound, &scene.pairs, &assignment, weights, None)?
    };
    Ok((loss, fallbacks))
}

fn amm_branch<'t>(
    scene: &Scene,
    pass: &LearnablePass<'t>,
    ctx: &GridContext<'t>,
    bound: &Bound<'_, 't>,
    settings: &HardSettings,
    weights: &LossWeights,
    draws: &mut Draws<'_>,
) -> Result<Option<Var<'t>>> {
    if pass.assignment.is_empty() {
        return Ok(None);
    }
    let s = &settings.strategy;
    let (queries, assignment, reference) = if s.mask_learnable {
        let mut rows = vec![None; pass.queries.len()];
        for &(q, _) in &pass.assignment.pairs {
            rows[q] = Some(q);
        }
        let reference = Reference::Learnable {
            attention: &pass.outputs.attention,
            rows,
        };
        (pass.queries.clone(), pass.assignment.clone(), reference)
    } else {
        let mut copies = select_positive_queries(&pass.assignment, &pass.queries)?;
        let value = draws.copy(copies.embeddings.to_tensor())?;
        copies.embeddings = bound.vars[0].tape().constant(value);
        let origin = copies.origin.clone().expect("hard sets carry origins");
        let assignment = identity_assignment(origin.len(), &origin);
        let reference = if s.reference_self {
            Reference::SelfMap
        } else {
            Reference::Learnable {
                attention: &pass.outputs.attention,
                rows: pass.assignment.pairs.iter().map(|p| Some(p.0)).collect(),
            }
        };
        (copies, assignment, reference)
    };
    let mut masker = Masker::new(&settings.amm, s.no_topk, reference, draws);
    let loss = decode_and_score(&queries, ctx, bound, &scene.pairs, &assignment, weights, Some(&mut masker))?;
    Ok(Some(loss))
}

/// Builds and scores the hard queries of one scene according to the strategy.
#[allow(clippy::too_many_arguments)]
pub fn run_hard_branch<'t>(
    settings: &HardSettings,
    iteration: u64,
    scene: &Scene,
    pass: &LearnablePass<'t>,
    ctx: &GridContext<'t>,
    bound: &Bound<'_, 't>,
    weights: &LossWeights,
    draws: &mut Draws<'_>,
) -> Result<HardOutcome<'t>> {
    let tape = bound.vars[0].tape();
    let mut out = HardOutcome {
        loss: None,
        branches: Vec::new(),
        empty_amm: false,
        shift_fallbacks: 0,
    };
    let zero = || tape.constant(Tensor::scalar(0.0));
    let kind = settings.strategy.kind;
    let branches: Vec<HardBranch> = match kind {
        StrategyKind::Baseline => return Ok(out),
        StrategyKind::GbsOnly | StrategyKind::Cjl => vec![HardBranch::Gbs],
        StrategyKind::AmmOnly => vec![HardBranch::Amm],
        StrategyKind::Ajl => vec![ajl_step(iteration)],
        StrategyKind::Pjl => vec![HardBranch::Gbs, HardBranch::Amm],
    };
    let share = 1.0 / branches.len() as f64;
    let mut total: Option<Var<'t>> = None;
    for branch in &branches {
        let loss = match branch {
            HardBranch::Gbs => {
                let cascade = kind == StrategyKind::Cjl;
                let (l, f) = gbs_branch(scene, pass, ctx, bound, settings, weights, draws, cascade)?;
                out.shift_fallbacks += f;
                l
            }
            HardBranch::Amm => match amm_branch(scene, pass, ctx, bound, settings, weights, draws)? {
                Some(l) => l,
                None => {
                    out.empty_amm = true;
                    zero()
                }
            },
        };
        let part = if branches.len() > 1 { loss.scale(share) } else { loss };
        total = Some(match total {
            Some(t) => t.add(&part)?,
            None => part,
        });
    }
    out.loss = total;
    out.branches = branches;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::model::{prepare_grid, ModelConfig, ModelParams};
    use crate::numerics::Tape;
    use crate::scenes::{class_table, encode_scene, generate_scene, SceneSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn prior_example() {
        let p = pair_prior(BBox::new(0.3, 0.4, 0.2, 0.2), BBox::new(0.5, 0.4, 0.1, 0.2));
        let expect = [0.3, 0.4, 0.2, 0.2, 0.5, 0.4, 0.1, 0.2, -0.2, 0.0, 0.04, 0.02];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn prior_of_identical_boxes() {
        let b = BBox::new(0.4, 0.6, 0.3, 0.1);
        let p = pair_prior(b, b);
        assert_eq!(p[8], 0.0);
        assert_eq!(p[9], 0.0);
        assert_eq!(p[10], p[11]);
    }

    proptest! {
        #[test]
        fn prior_derived_entries_are_consistent(
            h in (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64),
            o in (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64),
        ) {
            let p = pair_prior(BBox::new(h.0, h.1, h.2, h.3), BBox::new(o.0, o.1, o.2, o.3));
            prop_assert!((p[8] - (p[0] - p[4])).abs() < 1e-12);
            prop_assert!((p[9] - (p[1] - p[5])).abs() < 1e-12);
            prop_assert!((p[10] - p[2] * p[3]).abs() < 1e-12);
            prop_assert!((p[11] - p[6] * p[7]).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k_indices(&[0.1, 0.3, 0.3, 0.2, 0.3], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.0; 4], 3), vec![0, 1, 2]);
    }

    #[test]
    fn mask_examples() {
        let row = [0.4, 0.3, 0.2, 0.1];
        let all = AmmConfig {
            k: 2,
            gamma: 1.0,
            ..Default::default()
        };
        assert_eq!(amm_mask(&row, &row, &all, &mut rng(0)).unwrap(), vec![0.0, 0.0, 0.2, 0.1]);
        let none = AmmConfig {
            k: 4,
            gamma: 0.0,
            ..Default::default()
        };
        assert_eq!(amm_mask(&row, &row, &none, &mut rng(0)).unwrap(), row.to_vec());
        let too_big = AmmConfig {
            k: 5,
            ..Default::default()
        };
        assert!(matches!(
            amm_mask(&row, &row, &too_big, &mut rng(0)),
            Err(crate::HqmError::Config(_))
        ));
    }

    #[test]
    fn keep_reading_inverts_the_rate() {
        let reference: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let cfg = AmmConfig {
            k: 200,
            gamma: 0.4,
            gamma_is_keep: true,
            ..Default::default()
        };
        let mut r = rng(3);
        let masked: usize = (0..50)
            .map(|_| amm_keep_mask(&reference, &cfg, &mut r).unwrap().iter().filter(|&&m| m == 0.0).count())
            .sum();
        let rate = masked as f64 / 10_000.0;
        assert!((rate - 0.6).abs() < 0.03, "{rate}");
    }

    proptest! {
        #[test]
        fn mask_only_touches_top_k(seed in 0u64..1000, len in 4usize..64, k_frac in 0.1..1.0f64) {
            let mut r = rng(seed);
            let attention: Vec<f64> = (0..len).map(|_| r.gen()).collect();
            let reference: Vec<f64> = (0..len).map(|_| r.gen()).collect();
            let k = ((len as f64 * k_frac) as usize).max(1);
            let cfg = AmmConfig { k, ..Default::default() };
            let out = amm_mask(&attention, &reference, &cfg, &mut r).unwrap();
            let top = top_k_indices(&reference, k);
            for i in 0..len {
                if top.contains(&i) {
                    prop_assert!(out[i] == 0.0 || out[i].to_bits() == attention[i].to_bits());
                } else {
                    prop_assert_eq!(out[i].to_bits(), attention[i].to_bits());
                }
            }
        }
    }

    #[test]
    fn ajl_alternates() {
        let seq: Vec<HardBranch> = (0..6).map(ajl_step).collect();
        use HardBranch::*;
        assert_eq!(seq, vec![Gbs, Amm, Gbs, Amm, Gbs, Amm]);
    }

    #[test]
    fn strategy_labels_roundtrip() {
        for kind in StrategyKind::ALL {
            assert_eq!(kind.name().parse::<StrategyKind>().unwrap(), kind);
        }
        let s: HqmStrategy = "amm_only+no_topk".parse().unwrap();
        assert!(s.no_topk);
        assert_eq!(s.label(), "amm_only+no_topk");
        assert!("baseline+no_shift".parse::<HqmStrategy>().is_err());
        assert!("gbs_only+no_topk".parse::<HqmStrategy>().is_err());
        assert!("ajl+wat".parse::<HqmStrategy>().is_err());
    }

    struct Fixture {
        params: ModelParams,
        scene: Scene,
        table: Tensor,
    }

    fn fixture(seed: u64) -> Fixture {
        let spec = SceneSpec::default();
        let cfg = ModelConfig::default();
        Fixture {
            params: ModelParams::init(&cfg, seed).unwrap(),
            scene: generate_scene(&spec, &mut rng(seed + 100)),
            table: class_table(spec.num_classes, cfg.dim, 7),
        }
    }

    #[test]
    fn gbs_queries_lie_in_open_unit_interval() {
        let f = fixture(1);
        let tape = Tape::new();
        let bound = f.params.bind(&tape);
        let shift = ShiftConfig::default();
        let (q, _) = gbs_queries(&f.scene.pairs, &bound, &shift, GbsVariant::Shift, &mut rng(2)).unwrap();
        assert_eq!(q.shape(), vec![f.scene.pairs.len(), 32]);
        assert!(q.to_tensor().data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn no_shift_encodes_ground_truth() {
        let f = fixture(2);
        let tape = Tape::new();
        let bound = f.params.bind(&tape);
        let shift = ShiftConfig::default();
        let (a, _) = gbs_queries(&f.scene.pairs, &bound, &shift, GbsVariant::NoShift, &mut rng(1)).unwrap();
        let (b, _) = gbs_queries(&f.scene.pairs, &bound, &shift, GbsVariant::NoShift, &mut rng(9)).unwrap();
        assert_eq!(a.to_tensor(), b.to_tensor());
        let (c, _) = gbs_queries(
            &f.scene.pairs,
            &bound,
            &shift,
            GbsVariant::GaussianNoise { sigma: 0.1 },
            &mut rng(1),
        )
        .unwrap();
        let diff = a.to_tensor().max_abs_diff(&c.to_tensor());
        assert!(diff > 0.0 && diff < 1.0);
    }

    #[test]
    fn shifted_boxes_respect_iou_bounds() {
        let f = fixture(3);
        let shift = ShiftConfig::default();
        let mut r = rng(5);
        for _ in 0..200 {
            for p in &f.scene.pairs {
                let (h, _) = shift_box_or_fallback(p.human, &shift, &mut r);
                let v = iou(p.human, h);
                assert!((0.4..=0.6).contains(&v), "{v}");
            }
        }
    }

    #[test]
    fn positive_copies_are_detached_and_exact() {
        let f = fixture(4);
        let tape = Tape::new();
        let bound = f.params.bind(&tape);
        let grid = encode_scene(&f.scene, &f.table).unwrap();
        let ctx = prepare_grid(&bound, &grid).unwrap();
        let pass = learnable_pass(&bound, &ctx, &f.scene, &LossWeights::default()).unwrap();
        let copies = select_positive_queries(&pass.assignment, &pass.queries).unwrap();
        let origin = copies.origin.clone().unwrap();
        assert_eq!(origin, (0..f.scene.pairs.len()).collect::<Vec<_>>());
        assert!(!copies.embeddings.requires_grad());
        let src = pass.queries.embeddings.to_tensor();
        let cp = copies.embeddings.to_tensor();
        for (i, &(q, _)) in pass.assignment.pairs.iter().enumerate() {
            assert_eq!(cp.row(i), src.row(q));
        }
        let empty = Assignment { pairs: vec![] };
        assert!(select_positive_queries(&empty, &pass.queries).is_err());
    }

    fn run(kind: StrategyKind, iteration: u64, seed: u64) -> (f64, f64, Vec<HardBranch>) {
        let f = fixture(5);
        let tape = Tape::new();
        let bound = f.params.bind(&tape);
        let grid = encode_scene(&f.scene, &f.table).unwrap();
        let ctx = prepare_grid(&bound, &grid).unwrap();
        let w = LossWeights::default();
        let pass = learnable_pass(&bound, &ctx, &f.scene, &w).unwrap();
        let settings = HardSettings {
            strategy: HqmStrategy::plain(kind),
            amm: AmmConfig::default(),
            shift: ShiftConfig::default(),
        };
        let out = run_hard_branch(&settings, iteration, &f.scene, &pass, &ctx, &bound, &w, &mut Draws::sample(&mut rng(seed))).unwrap();
        let lh = out.loss.map(|l| l.item()).unwrap_or(0.0);
        (pass.loss.weighted_total.item(), lh, out.branches)
    }

    #[test]
    fn baseline_runs_no_hard_pass() {
        let (_, lh, branches) = run(StrategyKind::Baseline, 0, 1);
        assert_eq!(lh, 0.0);
        assert!(branches.is_empty());
    }

    #[test]
    fn ajl_dispatches_like_single_branches() {
        let (l0, a0, _) = run(StrategyKind::Ajl, 0, 11);
        let (l1, g0, _) = run(StrategyKind::GbsOnly, 0, 11);
        assert_eq!(a0.to_bits(), g0.to_bits());
        assert_eq!(l0.to_bits(), l1.to_bits());
        let (_, a1, _) = run(StrategyKind::Ajl, 1, 11);
        let (_, m1, _) = run(StrategyKind::AmmOnly, 1, 11);
        assert_eq!(a1.to_bits(), m1.to_bits());
    }

    #[test]
    fn pjl_halves_each_branch() {
        // PJL draws the shift first, then the masks, from the same stream.
        let f = fixture(6);
        let tape = Tape::new();
        let bound = f.params.bind(&tape);
        let grid = encode_scene(&f.scene, &f.table).unwrap();
        let ctx = prepare_grid(&bound, &grid).unwrap();
        let w = LossWeights::default();
        let pass = learnable_pass(&bound, &ctx, &f.scene, &w).unwrap();
        let settings = |kind| HardSettings {
            strategy: HqmStrategy::plain(kind),
            amm: AmmConfig::default(),
            shift: ShiftConfig::default(),
        };
        let mut r = rng(21);
        let pjl = run_hard_branch(&settings(StrategyKind::Pjl), 0, &f.scene, &pass, &ctx, &bound, &w, &mut Draws::sample(&mut r))
            .unwrap()
            .loss
            .unwrap()
            .item();
        let mut r = rng(21);
        let g = run_hard_branch(&settings(StrategyKind::GbsOnly), 0, &f.scene, &pass, &ctx, &bound, &w, &mut Draws::sample(&mut r))
            .unwrap()
            .loss
            .unwrap()
            .item();
        let m = run_hard_branch(&settings(StrategyKind::AmmOnly), 0, &f.scene, &pass, &ctx, &bound, &w, &mut Draws::sample(&mut r))
            .unwrap()
            .loss
            .unwrap()
            .item();
        assert!((pjl - 0.5 * (g + m)).abs() < 1e-12);
    }

    #[test]
    fn learnable_loss_is_independent_of_strategy() {
        let reference = run(StrategyKind::Baseline, 0, 1).0;
        for kind in StrategyKind::ALL {
            for it in 0..2 {
                assert_eq!(run(kind, it, 99).0.to_bits(), reference.to_bits(), "{kind}");
            }
        }
    }

    #[test]
    fn replayed_masks_reproduce_the_loss() {
        let f = fixture(8);
        let tape = Tape::new();
        let bound = f.params.bind(&tape);
        let grid = encode_scene(&f.scene, &f.table).unwrap();
        let ctx = prepare_grid(&bound, &grid).unwrap();
        let w = LossWeights::default();
        let pass = learnable_pass(&bound, &ctx, &f.scene, &w).unwrap();
        let settings = HardSettings {
            strategy: HqmStrategy::plain(StrategyKind::Cjl),
            amm: AmmConfig::default(),
            shift: ShiftConfig::default(),
        };
        let mut r = rng(30);
        let mut draws = Draws::sample(&mut r);
        let first = run_hard_branch(&settings, 0, &f.scene, &pass, &ctx, &bound, &w, &mut draws)
            .unwrap()
            .loss
            .unwrap()
            .item();
        let frozen = draws.into_frozen();
        assert_eq!(frozen.masks.len(), 4);
        assert!(frozen.copies.is_empty());
        let mut r = rng(30);
        let mut replay = Draws::replay(&mut r, &frozen);
        let again = run_hard_branch(&settings, 0, &f.scene, &pass, &ctx, &bound, &w, &mut replay)
            .unwrap()
            .loss
            .unwrap()
            .item();
        assert_eq!(first.to_bits(), again.to_bits());
        let mut r = rng(30);
        let truncated = FrozenDraws {
            masks: frozen.masks[..1].to_vec(),
            copies: vec![],
        };
        let mut short = Draws::replay(&mut r, &truncated);
        assert!(run_hard_branch(&settings, 0, &f.scene, &pass, &ctx, &bound, &w, &mut short).is_err());
    }

    #[test]
    fn every_ablation_runs() {
        let f = fixture(7);
        let tape = Tape::new();
        let bound = f.params.bind(&tape);
        let grid = encode_scene(&f.scene, &f.table).unwrap();
        let ctx = prepare_grid(&bound, &grid).unwrap();
        let w = LossWeights::default();
        let pass = learnable_pass(&bound, &ctx, &f.scene, &w).unwrap();
        for label in [
            "gbs_only+no_shift",
            "gbs_only+gaussian_noise",
            "amm_only+no_topk",
            "amm_only+reference_self",
            "amm_only+mask_learnable",
            "cjl+reference_self",
        ] {
            let settings = HardSettings {
                strategy: label.parse().unwrap(),
                amm: AmmConfig {
                    per_layer_resample: false,
                    ..Default::default()
                },
                shift: ShiftConfig::default(),
            };
            let out = run_hard_branch(&settings, 1, &f.scene, &pass, &ctx, &bound, &w, &mut Draws::sample(&mut rng(4))).unwrap();
            let v = out.loss.unwrap().item();
            assert!(v.is_finite() && v > 0.0, "{label}: {v}");
        }
    }
}
