//! Set-prediction loss terms: box L1, GIoU, object cross-entropy and
//! sigmoid focal loss over verbs, combined per branch and across branches.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::matching::Assignment;
use crate::model::Predictions;
use crate::numerics::{Tensor, Var};
use crate::scenes::HoiPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_b: f64,
    pub lambda_u: f64,
    pub lambda_c: f64,
    pub lambda_a: f64,
    /// Weight of the learnable-query branch.
    pub alpha: f64,
    /// Weight of the hard-query branch.
    pub beta: f64,
    pub no_object_weight: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_b: 2.5,
            lambda_u: 1.0,
            lambda_c: 1.0,
            lambda_a: 1.0,
            alpha: 1.0,
            beta: 1.0,
            no_object_weight: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_b,
            self.lambda_u,
            self.lambda_c,
            self.lambda_a,
            self.alpha,
            self.beta,
            self.no_object_weight,
            self.focal_gamma,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(config_err("loss weights must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(config_err("focal alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// The four terms of one branch and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown<'t> {
    pub l1: Var<'t>,
    pub giou: Var<'t>,
    pub ce: Var<'t>,
    pub focal: Var<'t>,
    pub weighted_total: Var<'t>,
}

/// Scalar snapshot of a [`LossBreakdown`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l1: f64,
    pub giou: f64,
    pub ce: f64,
    pub focal: f64,
    pub total: f64,
}

impl LossBreakdown<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            l1: self.l1.item(),
            giou: self.giou.item(),
            ce: self.ce.item(),
            focal: self.focal.item(),
            total: self.weighted_total.item(),
        }
    }
}

fn box_tensor(boxes: impl Iterator<Item = [f64; 4]>) -> Tensor {
    let data: Vec<f64> = boxes.flatten().collect();
    let n = data.len() / 4;
    Tensor::new(vec![n, 4], data).expect("four values per box")
}

/// Generalized IoU for each row of two `n × 4` center-size tensors, as `n × 1`.
pub fn giou_rows<'t>(pred: &Var<'t>, target: &Var<'t>) -> Result<Var<'t>> {
    let col = |v: &Var<'t>, c: usize| v.slice_cols(c, 1);
    let corners = |v: &Var<'t>| -> Result<[Var<'t>; 4]> {
        let (cx, cy, w, h) = (col(v, 0)?, col(v, 1)?, col(v, 2)?, col(v, 3)?);
        let (hw, hh) = (w.scale(0.5), h.scale(0.5));
        Ok([cx.sub(&hw)?, cy.sub(&hh)?, cx.add(&hw)?, cy.add(&hh)?])
    };
    let [ax0, ay0, ax1, ay1] = corners(pred)?;
    let [bx0, by0, bx1, by1] = corners(target)?;
    let area_a = ax1.sub(&ax0)?.mul(&ay1.sub(&ay0)?)?;
    let area_b = bx1.sub(&bx0)?.mul(&by1.sub(&by0)?)?;
    let iw = ax1.minimum(&bx1)?.sub(&ax0.maximum(&bx0)?)?.relu();
    let ih = ay1.minimum(&by1)?.sub(&ay0.maximum(&by0)?)?.relu();
    let inter = iw.mul(&ih)?;
    let union = area_a.add(&area_b)?.sub(&inter)?;
    let ew = ax1.maximum(&bx1)?.sub(&ax0.minimum(&bx0)?)?;
    let eh = ay1.maximum(&by1)?.sub(&ay0.minimum(&by0)?)?;
    let enclosing = ew.mul(&eh)?;
    let iou = inter.div(&union)?;
    let penalty = enclosing.sub(&union)?.div(&enclosing)?;
    iou.sub(&penalty)
}

fn check_assignment(assignment: &Assignment, preds: &Predictions<'_>, targets: &[HoiPair]) -> Result<()> {
    if assignment.is_empty() {
        return Err(contract_err("loss needs a non-empty assignment"));
    }
    let ok = assignment
        .pairs
        .iter()
        .all(|&(q, t)| q < preds.len() && t < targets.len());
    if !ok {
        return Err(contract_err("assignment indexes outside predictions or targets"));
    }
    Ok(())
}

/// Mean over matched pairs of the human plus object L1 and GIoU losses.
pub fn box_losses<'t>(
    preds: &Predictions<'t>,
    targets: &[HoiPair],
    assignment: &Assignment,
) -> Result<(Var<'t>, Var<'t>)> {
    check_assignment(assignment, preds, targets)?;
    let tape = preds.class_logits.tape();
    let queries: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let n = queries.len() as f64;
    let tgt_h = tape.constant(box_tensor(
        assignment.pairs.iter().map(|p| targets[p.1].human.to_array()),
    ));
    let tgt_o = tape.constant(box_tensor(
        assignment.pairs.iter().map(|p| targets[p.1].object.to_array()),
    ));
    let pred_h = preds.human_boxes.select_rows(&queries)?;
    let pred_o = preds.object_boxes.select_rows(&queries)?;

    let l1 = pred_h
        .sub(&tgt_h)?
        .abs()
        .sum()
        .add(&pred_o.sub(&tgt_o)?.abs().sum())?
        .scale(1.0 / n);
    let g = giou_rows(&pred_h, &tgt_h)?
        .one_minus()
        .sum()
        .add(&giou_rows(&pred_o, &tgt_o)?.one_minus().sum())?
        .scale(1.0 / n);
    Ok((l1, g))
}

/// Weighted cross-entropy over every query; unmatched queries target the
/// no-object class with weight `no_object_weight`.
pub fn ce_object_loss<'t>(
    class_logits: &Var<'t>,
    targets: &[HoiPair],
    assignment: &Assignment,
    no_object_weight: f64,
) -> Result<Var<'t>> {
    let (n, classes) = (class_logits.rows(), class_logits.cols());
    let no_object = classes - 1;
    let mut target_class = vec![no_object; n];
    let mut weights = vec![no_object_weight; n];
    for &(q, t) in &assignment.pairs {
        let class = targets
            .get(t)
            .ok_or_else(|| contract_err("assignment target out of range"))?
            .object_class;
        if q >= n || class >= no_object {
            return Err(contract_err("assignment or class index out of range"));
        }
        target_class[q] = class;
        weights[q] = 1.0;
    }
    let total_weight: f64 = weights.iter().sum();
    if total_weight <= 0.0 {
        return Err(contract_err("cross-entropy weights sum to zero"));
    }
    let idx: Vec<usize> = target_class
        .iter()
        .enumerate()
        .map(|(q, &c)| q * classes + c)
        .collect();
    let picked = class_logits.log_softmax_rows().gather(&idx)?;
    Ok(picked
        .mul_const(&Tensor::vector(weights))?
        .sum()
        .scale(-1.0 / total_weight))
}

/// Multi-hot verb targets for all queries; unmatched rows are all zeros.
pub fn verb_targets(n: usize, verbs: usize, targets: &[HoiPair], assignment: &Assignment) -> Tensor {
    let mut labels = Tensor::zeros(&[n, verbs]);
    for &(q, t) in &assignment.pairs {
        for v in targets[t].active_verbs() {
            labels.data_mut()[q * verbs + v] = 1.0;
        }
    }
    labels
}

/// Sigmoid focal loss over all queries, normalized by the number of positive labels.
pub fn focal_verb_loss<'t>(
    verb_logits: &Var<'t>,
    targets: &[HoiPair],
    assignment: &Assignment,
    focal_gamma: f64,
    focal_alpha: f64,
) -> Result<Var<'t>> {
    let (n, v) = (verb_logits.rows(), verb_logits.cols());
    if assignment.pairs.iter().any(|&(q, t)| q >= n || t >= targets.len()) {
        return Err(contract_err("assignment index out of range"));
    }
    let labels = verb_targets(n, v, targets, assignment);
    focal_from_labels(verb_logits, &labels, focal_gamma, focal_alpha)
}

pub(crate) fn focal_from_labels<'t>(
    logits: &Var<'t>,
    labels: &Tensor,
    gamma: f64,
    alpha: f64,
) -> Result<Var<'t>> {
    let positives = labels.sum();
    let pos_w = Tensor::new(
        labels.shape().to_vec(),
        labels.data().iter().map(|y| alpha * y).collect(),
    )?;
    let neg_w = Tensor::new(
        labels.shape().to_vec(),
        labels.data().iter().map(|y| (1.0 - alpha) * (1.0 - y)).collect(),
    )?;
    let p = logits.sigmoid();
    // −ln p = softplus(−x), −ln(1 − p) = softplus(x)
    let mut pos = logits.scale(-1.0).softplus();
    let mut neg = logits.softplus();
    if gamma != 0.0 {
        pos = pos.mul(&p.one_minus().powf(gamma))?;
        neg = neg.mul(&p.powf(gamma))?;
    }
    let total = pos.mul_const(&pos_w)?.add(&neg.mul_const(&neg_w)?)?.sum();
    Ok(total.scale(1.0 / positives.max(1.0)))
}

/// All four terms with their λ weights. Serves both branches.
pub fn branch_loss<'t>(
    preds: &Predictions<'t>,
    targets: &[HoiPair],
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<LossBreakdown<'t>> {
    let (l1, giou) = box_losses(preds, targets, assignment)?;
    let ce = ce_object_loss(&preds.class_logits, targets, assignment, weights.no_object_weight)?;
    let focal = focal_verb_loss(
        &preds.verb_logits,
        targets,
        assignment,
        weights.focal_gamma,
        weights.focal_alpha,
    )?;
    let weighted_total = l1
        .scale(weights.lambda_b)
        .add(&giou.scale(weights.lambda_u))?
        .add(&ce.scale(weights.lambda_c))?
        .add(&focal.scale(weights.lambda_a))?;
    Ok(LossBreakdown {
        l1,
        giou,
        ce,
        focal,
        weighted_total,
    })
}

/// α·L_l + β·L_h, or α·L_l when no hard branch ran.
pub fn total_loss<'t>(learnable: &Var<'t>, hard: Option<&Var<'t>>, weights: &LossWeights) -> Result<Var<'t>> {
    let l = learnable.scale(weights.alpha);
    match hard {
        Some(h) => l.add(&h.scale(weights.beta)),
        None => Ok(l),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{giou, BBox};
    use crate::numerics::Tape;
    use proptest::prelude::*;

    fn pair(h: [f64; 4], o: [f64; 4], class: usize, verbs: Vec<bool>) -> HoiPair {
        HoiPair {
            human: h.into(),
            object: o.into(),
            object_class: class,
            verbs,
        }
    }

    fn preds_from<'t>(
        tape: &'t Tape,
        h: Tensor,
        o: Tensor,
        cls: Tensor,
        verbs: Tensor,
    ) -> Predictions<'t> {
        Predictions {
            human_boxes: tape.constant(h),
            object_boxes: tape.constant(o),
            class_logits: tape.constant(cls),
            verb_logits: tape.constant(verbs),
        }
    }

    #[test]
    fn perfect_boxes_have_zero_box_loss() {
        let tape = Tape::new();
        let t = vec![
            pair([0.3, 0.4, 0.2, 0.2], [0.5, 0.4, 0.1, 0.2], 1, vec![true, false]),
            pair([0.6, 0.6, 0.3, 0.2], [0.7, 0.5, 0.2, 0.2], 0, vec![false, true]),
        ];
        let h = Tensor::from_rows(&[t[1].human.to_array().to_vec(), t[0].human.to_array().to_vec()]).unwrap();
        let o = Tensor::from_rows(&[t[1].object.to_array().to_vec(), t[0].object.to_array().to_vec()]).unwrap();
        let preds = preds_from(&tape, h, o, Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 2]));
        let a = Assignment {
            pairs: vec![(1, 0), (0, 1)],
        };
        let (l1, g) = box_losses(&preds, &t, &a).unwrap();
        assert_eq!(l1.item(), 0.0);
        assert!(g.item().abs() < 1e-15);
    }

    #[test]
    fn box_losses_ignore_pair_order() {
        let tape = Tape::new();
        let t = vec![
            pair([0.3, 0.4, 0.2, 0.2], [0.5, 0.4, 0.1, 0.2], 1, vec![true, false]),
            pair([0.6, 0.6, 0.3, 0.2], [0.7, 0.5, 0.2, 0.2], 0, vec![false, true]),
        ];
        let h = Tensor::from_rows(&[vec![0.35, 0.45, 0.2, 0.25], vec![0.5, 0.5, 0.2, 0.2]]).unwrap();
        let o = Tensor::from_rows(&[vec![0.5, 0.35, 0.15, 0.2], vec![0.6, 0.5, 0.3, 0.3]]).unwrap();
        let preds = preds_from(&tape, h, o, Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 2]));
        let a = Assignment {
            pairs: vec![(0, 0), (1, 1)],
        };
        let b = Assignment {
            pairs: vec![(1, 1), (0, 0)],
        };
        let (l1a, ga) = box_losses(&preds, &t, &a).unwrap();
        let (l1b, gb) = box_losses(&preds, &t, &b).unwrap();
        assert!((l1a.item() - l1b.item()).abs() < 1e-15);
        assert!((ga.item() - gb.item()).abs() < 1e-15);
    }

    #[test]
    fn empty_assignment_is_rejected() {
        let tape = Tape::new();
        let preds = preds_from(
            &tape,
            Tensor::full(&[1, 4], 0.5),
            Tensor::full(&[1, 4], 0.5),
            Tensor::zeros(&[1, 3]),
            Tensor::zeros(&[1, 2]),
        );
        let t = vec![pair([0.3, 0.4, 0.2, 0.2], [0.5, 0.4, 0.1, 0.2], 1, vec![true, false])];
        let empty = Assignment { pairs: vec![] };
        assert!(box_losses(&preds, &t, &empty).is_err());
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[4, 3]));
        let t = vec![pair([0.3, 0.4, 0.2, 0.2], [0.5, 0.4, 0.1, 0.2], 1, vec![true, false])];
        let a = Assignment { pairs: vec![(2, 0)] };
        let ce = ce_object_loss(&logits, &t, &a, 0.1).unwrap();
        assert!((ce.item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_classes_give_near_zero_ce() {
        let tape = Tape::new();
        let mut l = Tensor::zeros(&[2, 3]);
        l.data_mut()[1] = 40.0; // query 0 → class 1
        l.data_mut()[5] = 40.0; // query 1 → no-object
        let logits = tape.constant(l);
        let t = vec![pair([0.3, 0.4, 0.2, 0.2], [0.5, 0.4, 0.1, 0.2], 1, vec![true, false])];
        let a = Assignment { pairs: vec![(0, 0)] };
        assert!(ce_object_loss(&logits, &t, &a, 0.1).unwrap().item() < 1e-15);
    }

    #[test]
    fn focal_single_logit_closed_form() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 1]));
        let labels = Tensor::full(&[1, 1], 1.0);
        let f = focal_from_labels(&logits, &labels, 2.0, 0.25).unwrap();
        let expect = 0.25 * 0.5f64.powi(2) * 2f64.ln();
        assert!((f.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn focal_vanishes_at_saturated_targets() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 2], vec![60.0, -60.0]).unwrap());
        let labels = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(focal_from_labels(&logits, &labels, 2.0, 0.25).unwrap().item() < 1e-50);
    }

    #[test]
    fn breakdown_identity_and_zero_total() {
        let tape = Tape::new();
        let t = vec![pair([0.3, 0.4, 0.2, 0.2], [0.5, 0.4, 0.1, 0.2], 1, vec![true, false])];
        let mut cls = Tensor::zeros(&[1, 3]);
        cls.data_mut()[1] = 800.0;
        let verbs = Tensor::new(vec![1, 2], vec![800.0, -800.0]).unwrap();
        let preds = preds_from(
            &tape,
            box_tensor(std::iter::once(t[0].human.to_array())),
            box_tensor(std::iter::once(t[0].object.to_array())),
            cls,
            verbs,
        );
        let a = Assignment { pairs: vec![(0, 0)] };
        let w = LossWeights::default();
        let b = branch_loss(&preds, &t, &a, &w).unwrap();
        let v = b.values();
        assert_eq!(v.total, 0.0);
        let recomposed = 2.5 * v.l1 + v.giou + v.ce + v.focal;
        assert!((v.total - recomposed).abs() <= 1e-12);
    }

    #[test]
    fn total_loss_combines_branches() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::scalar(1.5));
        let h = tape.constant(Tensor::scalar(0.75));
        let w = LossWeights::default();
        assert_eq!(total_loss(&l, Some(&h), &w).unwrap().item(), 2.25);
        let baseline = LossWeights {
            beta: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&l, Some(&h), &baseline).unwrap().item(), 1.5);
        assert_eq!(total_loss(&l, None, &w).unwrap().item(), 1.5);
        let double = LossWeights {
            alpha: 2.0,
            beta: 2.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&l, Some(&h), &double).unwrap().item(), 4.5);
    }

    fn arb_box() -> impl Strategy<Value = [f64; 4]> {
        (0.05..0.95f64, 0.05..0.95f64, 0.05..0.6f64, 0.05..0.6f64).prop_map(|(a, b, c, d)| [a, b, c, d])
    }

    proptest! {
        #[test]
        fn tape_giou_matches_geometry(a in arb_box(), b in arb_box()) {
            let tape = Tape::new();
            let pa = tape.constant(box_tensor(std::iter::once(a)));
            let pb = tape.constant(box_tensor(std::iter::once(b)));
            let v = giou_rows(&pa, &pb).unwrap().item();
            prop_assert!((v - giou(BBox::from(a), BBox::from(b))).abs() < 1e-12);
        }
    }
}
