use serde::{Deserialize, Serialize};

use crate::error::{HqmError, Result};
use crate::geometry::{iou, BBox};
use crate::matching::{class_probs, verb_probs};
use crate::model::{decoder_forward, detection_heads, prepare_grid, Checkpoint, ModelParams, PredictionValues, QuerySet};
use crate::numerics::Tape;
use crate::scenes::{encode_scene, Dataset, FeatureGrid, Scene};

use super::EvalConfig;

/// One query's prediction after dropping the no-object class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub human: BBox,
    pub object: BBox,
    pub class: usize,
    pub class_score: f64,
    pub verb_scores: Vec<f64>,
}

/// Per-verb average precision and the counts behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for verbs without any ground truth in the dataset.
    pub per_verb_ap: Vec<Option<f64>>,
    /// Mean over the verbs that have ground truth.
    pub map: f64,
    pub true_positives: Vec<usize>,
    pub false_positives: Vec<usize>,
    pub ground_truths: Vec<usize>,
}

/// Learnable-query predictions for one encoded scene, without gradients.
pub fn predict_scene(params: &ModelParams, grid: &FeatureGrid) -> Result<PredictionValues> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let ctx = prepare_grid(&bound, grid)?;
    let out = decoder_forward(&QuerySet::learnable(&bound), &ctx, &bound, None)?;
    Ok(detection_heads(&out.last(), &bound)?.detach())
}

/// Keeps queries whose most likely class is a real object class.
pub fn detections_from(values: &PredictionValues) -> Vec<Detection> {
    let n = values.class_logits.rows();
    let no_object = values.class_logits.cols() - 1;
    let mut out = Vec::new();
    for q in 0..n {
        let probs = class_probs(values.class_logits.row(q));
        let best = (0..probs.len())
            .max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)))
            .expect("at least the no-object class");
        if best == no_object {
            continue;
        }
        let hb = values.human_boxes.row(q);
        let ob = values.object_boxes.row(q);
        out.push(Detection {
            human: BBox::new(hb[0], hb[1], hb[2], hb[3]),
            object: BBox::new(ob[0], ob[1], ob[2], ob[3]),
            class: best,
            class_score: probs[best],
            verb_scores: verb_probs(values.verb_logits.row(q)),
        });
    }
    out
}

/// Area under the precision envelope over all recall points.
///
/// `hits` lists detections in descending score order; `positives` is the
/// number of ground truths.
pub fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 || hits.is_empty() {
        return 0.0;
    }
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    for &h in hits {
        if h {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .filter(|&i| recall[i] != recall[i - 1])
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// Scores detections against ground truth, verb by verb.
///
/// A triplet's score is its class probability times the verb probability.
/// Ranked greedily by score, it is a true positive when class, verb and both
/// boxes (IoU at least the threshold) agree with a ground-truth pair not yet
/// claimed for that verb.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    scenes: &[Scene],
    num_verbs: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if detections.len() != scenes.len() {
        return Err(HqmError::Contract(format!(
            "{} detection lists for {} scenes",
            detections.len(),
            scenes.len()
        )));
    }
    let mut per_verb_ap = Vec::with_capacity(num_verbs);
    let mut true_positives = vec![0; num_verbs];
    let mut false_positives = vec![0; num_verbs];
    let mut ground_truths = vec![0; num_verbs];
    for v in 0..num_verbs {
        let positives: usize = scenes
            .iter()
            .flat_map(|s| &s.pairs)
            .filter(|p| p.verbs.get(v).copied().unwrap_or(false))
            .count();
        ground_truths[v] = positives;

        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (s, dets) in detections.iter().enumerate() {
            for (d, det) in dets.iter().enumerate() {
                let score = det.class_score * det.verb_scores.get(v).copied().unwrap_or(0.0);
                if score > cfg.score_threshold {
                    ranked.push((score, s, d));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut used: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.pairs.len()]).collect();
        let mut hits = Vec::with_capacity(ranked.len());
        for &(_, s, d) in &ranked {
            let det = &detections[s][d];
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in scenes[s].pairs.iter().enumerate() {
                if used[s][g] || gt.object_class != det.class || !gt.verbs.get(v).copied().unwrap_or(false) {
                    continue;
                }
                let overlap = iou(det.human, gt.human).min(iou(det.object, gt.object));
                if overlap >= cfg.iou_threshold && best.is_none_or(|(o, _)| overlap > o) {
                    best = Some((overlap, g));
                }
            }
            match best {
                Some((_, g)) => {
                    used[s][g] = true;
                    true_positives[v] += 1;
                    hits.push(true);
                }
                None => {
                    false_positives[v] += 1;
                    hits.push(false);
                }
            }
        }
        per_verb_ap.push((positives > 0).then(|| average_precision(&hits, positives)));
    }
    let scored: Vec<f64> = per_verb_ap.iter().flatten().copied().collect();
    let map = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(EvalReport {
        per_verb_ap,
        map,
        true_positives,
        false_positives,
        ground_truths,
    })
}

/// Runs a checkpoint over a dataset and scores it.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let model = &checkpoint.params.config;
    let spec = &dataset.spec;
    if model.num_classes != spec.num_classes || model.num_verbs != spec.num_verbs {
        return Err(HqmError::Format(format!(
            "checkpoint predicts {} classes and {} verbs, dataset has {} and {}",
            model.num_classes, model.num_verbs, spec.num_classes, spec.num_verbs
        )));
    }
    if checkpoint.class_table.shape() != [model.num_classes + 1, model.dim] {
        return Err(HqmError::Format("class table does not match the model".into()));
    }
    let mut detections = Vec::with_capacity(dataset.scenes.len());
    for scene in &dataset.scenes {
        let grid = encode_scene(scene, &checkpoint.class_table)?;
        detections.push(detections_from(&predict_scene(&checkpoint.params, &grid)?));
    }
    evaluate_detections(&detections, &dataset.scenes, spec.num_verbs, cfg)
}
