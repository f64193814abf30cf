//! Cross-attention decoder, detection heads, parameters and checkpoints.
//!
//! Each decoder layer attends from `C_{i-1} + q` to the encoded grid,
//! optionally masks the attention maps through a hook, projects the
//! concatenated head outputs, and applies a residual FFN. Query
//! self-attention is omitted, so every query is decoded independently.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, shape_err, HqmError, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scenes::FeatureGrid;

/// Length of the pair-prior vector fed to the shifted-box query encoder.
pub const PRIOR_DIM: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_queries: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub num_verbs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 2,
            layers: 2,
            num_queries: 8,
            ffn_dim: 64,
            num_classes: 5,
            num_verbs: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(config_err(format!(
                "model dim must be a positive multiple of 4, got {}",
                self.dim
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(config_err(format!(
                "{} heads do not divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.layers == 0 || self.num_queries == 0 || self.ffn_dim == 0 {
            return Err(config_err("layers, queries and ffn_dim must be positive"));
        }
        if self.num_classes == 0 || self.num_verbs == 0 {
            return Err(config_err("need at least one class and one verb"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Indices of a two-layer MLP's tensors in the parameter list.
#[derive(Debug, Clone, Copy)]
pub struct MlpIndex {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub struct LayerIndex {
    pub wq: Vec<usize>,
    pub wk: Vec<usize>,
    pub wv: Vec<usize>,
    pub wo: usize,
    pub bo: usize,
    pub ffn: MlpIndex,
}

/// Where every parameter lives in [`ModelParams::tensors`]. Fixed by the config.
#[derive(Debug, Clone)]
pub struct ParamIndex {
    pub queries: usize,
    pub layers: Vec<LayerIndex>,
    pub class_head: MlpIndex,
    pub verb_head: MlpIndex,
    pub human_head: MlpIndex,
    pub object_head: MlpIndex,
    /// Pair-prior encoder used by shifted-box queries.
    pub prior_encoder: MlpIndex,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn mlp(&mut self, prefix: &str, d_in: usize, d_hidden: usize, d_out: usize) -> MlpIndex {
        MlpIndex {
            w1: self.add(format!("{prefix}.w1"), vec![d_in, d_hidden]),
            b1: self.add(format!("{prefix}.b1"), vec![d_hidden]),
            w2: self.add(format!("{prefix}.w2"), vec![d_hidden, d_out]),
            b2: self.add(format!("{prefix}.b2"), vec![d_out]),
        }
    }
}

fn layout(cfg: &ModelConfig) -> (ParamIndex, Vec<String>, Vec<Vec<usize>>) {
    let d = cfg.dim;
    let dh = cfg.head_dim();
    let mut b = LayoutBuilder {
        names: Vec::new(),
        shapes: Vec::new(),
    };
    let queries = b.add("queries".into(), vec![cfg.num_queries, d]);
    let layers = (0..cfg.layers)
        .map(|l| {
            let per_head = |b: &mut LayoutBuilder, kind: &str| -> Vec<usize> {
                (0..cfg.heads)
                    .map(|h| b.add(format!("decoder.{l}.head{h}.{kind}"), vec![d, dh]))
                    .collect()
            };
            let wq = per_head(&mut b, "wq");
            let wk = per_head(&mut b, "wk");
            let wv = per_head(&mut b, "wv");
            let wo = b.add(format!("decoder.{l}.wo"), vec![d, d]);
            let bo = b.add(format!("decoder.{l}.bo"), vec![d]);
            let ffn = b.mlp(&format!("decoder.{l}.ffn"), d, cfg.ffn_dim, d);
            LayerIndex {
                wq,
                wk,
                wv,
                wo,
                bo,
                ffn,
            }
        })
        .collect();
    let class_head = b.mlp("heads.class", d, d, cfg.num_classes + 1);
    let verb_head = b.mlp("heads.verb", d, d, cfg.num_verbs);
    let human_head = b.mlp("heads.human_box", d, d, 4);
    let object_head = b.mlp("heads.object_box", d, d, 4);
    let prior_encoder = b.mlp("prior_encoder", PRIOR_DIM, d, d);
    let index = ParamIndex {
        queries,
        layers,
        class_head,
        verb_head,
        human_head,
        object_head,
        prior_encoder,
    };
    (index, b.names, b.shapes)
}

/// All trainable tensors in manifest order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub index: ParamIndex,
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, learnable queries uniform in [−1, 1].
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (index, names, shapes) = layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = names
            .iter()
            .zip(&shapes)
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if name == "queries" {
                    (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()
                } else if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-limit..=limit)).collect()
                };
                Tensor::from_parts(shape.clone(), data)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            index,
        })
    }

    /// Same layout with every tensor zeroed.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (index, names, shapes) = layout(config);
        let tensors = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'_, 't> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
            index: &self.index,
            config: &self.config,
        }
    }

    /// Registers every tensor as a constant; for inference.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'_, 't> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
            index: &self.index,
            config: &self.config,
        }
    }

    /// Binds externally supplied leaves (used by gradient checks).
    pub fn bind_vars<'p, 't>(&'p self, vars: Vec<Var<'t>>) -> Result<Bound<'p, 't>> {
        if vars.len() != self.tensors.len() {
            return Err(contract_err(format!(
                "expected {} parameter vars, got {}",
                self.tensors.len(),
                vars.len()
            )));
        }
        Ok(Bound {
            vars,
            index: &self.index,
            config: &self.config,
        })
    }
}

/// Parameters registered on a tape.
pub struct Bound<'p, 't> {
    pub vars: Vec<Var<'t>>,
    pub index: &'p ParamIndex,
    pub config: &'p ModelConfig,
}

impl<'p, 't> Bound<'p, 't> {
    pub fn var(&self, i: usize) -> Var<'t> {
        self.vars[i]
    }

    pub fn mlp(&self, x: &Var<'t>, idx: MlpIndex) -> Result<Var<'t>> {
        x.linear(&self.vars[idx.w1], &self.vars[idx.b1])?
            .relu()
            .linear(&self.vars[idx.w2], &self.vars[idx.b2])
    }
}

/// Which branch a set of queries belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Learnable,
    Gbs,
    AmmCopy,
}

/// Query embeddings tagged with their provenance.
///
/// Hard-positive sets carry `origin[i]`: the ground-truth pair that query `i`
/// answers for.
#[derive(Debug, Clone)]
pub struct QuerySet<'t> {
    pub kind: QueryKind,
    pub embeddings: Var<'t>,
    pub origin: Option<Vec<usize>>,
}

impl<'t> QuerySet<'t> {
    pub fn learnable(bound: &Bound<'_, 't>) -> Self {
        Self {
            kind: QueryKind::Learnable,
            embeddings: bound.var(bound.index.queries),
            origin: None,
        }
    }

    pub fn hard(kind: QueryKind, embeddings: Var<'t>, origin: Vec<usize>) -> Result<Self> {
        if kind == QueryKind::Learnable {
            return Err(contract_err("hard query sets cannot be of learnable kind"));
        }
        if embeddings.rows() != origin.len() {
            return Err(contract_err(format!(
                "{} queries but {} origins",
                embeddings.rows(),
                origin.len()
            )));
        }
        Ok(Self {
            kind,
            embeddings,
            origin: Some(origin),
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-layer, per-head keys and values for one encoded grid.
///
/// Projections do not depend on the queries, so one context serves every
/// decoder pass over the same scene within a step.
pub struct GridContext<'t> {
    keys: Vec<Vec<Var<'t>>>,
    values: Vec<Vec<Var<'t>>>,
    pub cells: usize,
}

pub fn prepare_grid<'t>(bound: &Bound<'_, 't>, grid: &FeatureGrid) -> Result<GridContext<'t>> {
    let cfg = bound.config;
    if grid.dim() != cfg.dim || grid.pos_embed.cols() != cfg.dim {
        return Err(shape_err(format!(
            "grid width {} does not match model dim {}",
            grid.dim(),
            cfg.dim
        )));
    }
    let tape = bound.vars[0].tape();
    let features = tape.constant(grid.features.clone());
    let key_input = features.add(&tape.constant(grid.pos_embed.clone()))?;
    let mut keys = Vec::with_capacity(cfg.layers);
    let mut values = Vec::with_capacity(cfg.layers);
    for layer in &bound.index.layers {
        let mut k = Vec::with_capacity(cfg.heads);
        let mut v = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            k.push(key_input.matmul(&bound.var(layer.wk[h]))?);
            v.push(features.matmul(&bound.var(layer.wv[h]))?);
        }
        keys.push(k);
        values.push(v);
    }
    Ok(GridContext {
        keys,
        values,
        cells: grid.cells(),
    })
}

/// Hook consulted for every attention map before the value product. It
/// receives `(layer, head, map)` and returns a multiplicative mask of the
/// same shape, or `None` to leave the map untouched.
pub type MaskHook<'h> = dyn FnMut(usize, usize, &Tensor) -> Result<Option<Tensor>> + 'h;

pub struct DecoderOutputs<'t> {
    /// Output embedding of every layer, `N × D`.
    pub embeddings: Vec<Var<'t>>,
    /// `[layer][head]`, `N × cells`, before masking.
    pub attention: Vec<Vec<Tensor>>,
    /// `[layer][head]`, the maps actually used in the value product.
    pub masked_attention: Vec<Vec<Tensor>>,
}

impl<'t> DecoderOutputs<'t> {
    pub fn last(&self) -> Var<'t> {
        *self.embeddings.last().expect("decoder has at least one layer")
    }
}

pub fn decoder_forward<'t>(
    queries: &QuerySet<'t>,
    ctx: &GridContext<'t>,
    bound: &Bound<'_, 't>,
    mut mask_hook: Option<&mut MaskHook<'_>>,
) -> Result<DecoderOutputs<'t>> {
    let cfg = bound.config;
    let q = queries.embeddings;
    if q.cols() != cfg.dim {
        return Err(shape_err(format!(
            "query width {} does not match model dim {}",
            q.cols(),
            cfg.dim
        )));
    }
    let tape = q.tape();
    let n = q.rows();
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

    let mut state = tape.constant(Tensor::zeros(&[n, cfg.dim]));
    let mut embeddings = Vec::with_capacity(cfg.layers);
    let mut attention = Vec::with_capacity(cfg.layers);
    let mut masked_attention = Vec::with_capacity(cfg.layers);

    for (l, layer) in bound.index.layers.iter().enumerate() {
        let x_in = state.add(&q)?;
        let mut head_out = Vec::with_capacity(cfg.heads);
        let mut maps = Vec::with_capacity(cfg.heads);
        let mut used = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = x_in.matmul(&bound.var(layer.wq[h]))?;
            let logits = qh.matmul_t(&ctx.keys[l][h])?.scale(scale);
            let mut attn = logits.softmax_rows();
            let raw = attn.to_tensor();
            if let Some(hook) = mask_hook.as_deref_mut() {
                if let Some(mask) = hook(l, h, &raw)? {
                    if mask.shape() != raw.shape() {
                        return Err(contract_err(format!(
                            "mask hook returned shape {:?} for attention {:?}",
                            mask.shape(),
                            raw.shape()
                        )));
                    }
                    attn = attn.mul_const(&mask)?;
                }
            }
            used.push(attn.to_tensor());
            maps.push(raw);
            head_out.push(attn.matmul(&ctx.values[l][h])?);
        }
        let merged = Var::concat_cols(&head_out)?;
        let projected = merged.linear(&bound.var(layer.wo), &bound.var(layer.bo))?;
        let x = state.add(&projected)?;
        state = x.add(&bound.mlp(&x, layer.ffn)?)?;
        embeddings.push(state);
        attention.push(maps);
        masked_attention.push(used);
    }
    Ok(DecoderOutputs {
        embeddings,
        attention,
        masked_attention,
    })
}

/// Head outputs for `N` queries.
pub struct Predictions<'t> {
    /// Center-size boxes in (0, 1).
    pub human_boxes: Var<'t>,
    pub object_boxes: Var<'t>,
    /// Last column is the no-object class.
    pub class_logits: Var<'t>,
    pub verb_logits: Var<'t>,
}

impl Predictions<'_> {
    pub fn len(&self) -> usize {
        self.class_logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn detach(&self) -> PredictionValues {
        PredictionValues {
            human_boxes: self.human_boxes.to_tensor(),
            object_boxes: self.object_boxes.to_tensor(),
            class_logits: self.class_logits.to_tensor(),
            verb_logits: self.verb_logits.to_tensor(),
        }
    }
}

/// Plain-value copy of [`Predictions`].
#[derive(Debug, Clone)]
pub struct PredictionValues {
    pub human_boxes: Tensor,
    pub object_boxes: Tensor,
    pub class_logits: Tensor,
    pub verb_logits: Tensor,
}

pub fn detection_heads<'t>(embedding: &Var<'t>, bound: &Bound<'_, 't>) -> Result<Predictions<'t>> {
    let idx = bound.index;
    Ok(Predictions {
        human_boxes: bound.mlp(embedding, idx.human_head)?.sigmoid(),
        object_boxes: bound.mlp(embedding, idx.object_head)?.sigmoid(),
        class_logits: bound.mlp(embedding, idx.class_head)?,
        verb_logits: bound.mlp(embedding, idx.verb_head)?,
    })
}

/// Trained parameters together with the fixed class table of the scene encoder.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub class_table: Tensor,
    /// Free-form run metadata stored in the manifest.
    pub run: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in 8-byte values from the start of the blob.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    model: ModelConfig,
    blob: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    run: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "hqm-checkpoint/1";
pub const CLASS_TABLE_NAME: &str = "encoder.class_table";

impl Checkpoint {
    /// Writes `<stem>.json` and `<stem>.bin` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let blob_name = format!("{stem}.bin");
        let mut entries = Vec::new();
        let mut blob = Vec::with_capacity(8 * (self.params.numel() + self.class_table.numel()));
        let mut offset = 0;
        let all = self
            .params
            .names
            .iter()
            .zip(&self.params.tensors)
            .chain(std::iter::once((&CLASS_TABLE_NAME.to_string(), &self.class_table)))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect::<Vec<_>>();
        for (name, t) in &all {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            model: self.params.config.clone(),
            blob: blob_name.clone(),
            tensors: entries,
            run: self.run.clone(),
        };
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        fs::write(dir.join(blob_name), blob)?;
        Ok(())
    }

    /// Loads from the manifest path; the blob is resolved next to it.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(HqmError::Format(format!(
                "unknown checkpoint format {:?}",
                manifest.format
            )));
        }
        let blob_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.blob);
        let bytes = fs::read(&blob_path)?;
        if bytes.len() % 8 != 0 {
            return Err(HqmError::Format("blob length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();

        let mut params = ModelParams::zeros(&manifest.model)
            .map_err(|e| HqmError::Format(format!("manifest model config: {e}")))?;
        let expected = params.len() + 1;
        if manifest.tensors.len() != expected {
            return Err(HqmError::Format(format!(
                "manifest lists {} tensors, model needs {expected}",
                manifest.tensors.len()
            )));
        }
        let mut class_table = None;
        for (i, entry) in manifest.tensors.iter().enumerate() {
            let n: usize = entry.shape.iter().product();
            let data = values
                .get(entry.offset..entry.offset + n)
                .ok_or_else(|| HqmError::Format(format!("tensor {} overruns blob", entry.name)))?
                .to_vec();
            let t = Tensor::new(entry.shape.clone(), data)?;
            if i < params.len() {
                if entry.name != params.names[i] || entry.shape != params.tensors[i].shape() {
                    return Err(HqmError::Format(format!(
                        "tensor {i} is {} {:?}, expected {} {:?}",
                        entry.name,
                        entry.shape,
                        params.names[i],
                        params.tensors[i].shape()
                    )));
                }
                params.tensors[i] = t;
            } else {
                let want = [manifest.model.num_classes + 1, manifest.model.dim];
                if entry.name != CLASS_TABLE_NAME || entry.shape != want {
                    return Err(HqmError::Format(format!(
                        "expected class table {want:?}, found {} {:?}",
                        entry.name, entry.shape
                    )));
                }
                class_table = Some(t);
            }
        }
        Ok(Self {
            params,
            class_table: class_table.expect("class table checked above"),
            run: manifest.run,
        })
    }
}
