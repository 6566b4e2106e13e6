//! Pseudo-mask generation from activation maps and mIoU evaluation.
//!
//! Masks use label 0 for background and `k+1` for class `k`. Evaluation
//! pools one confusion matrix over the whole dataset (the PASCAL VOC
//! convention) and averages IoU over the classes with nonzero union.

use crate::cam::ActivationMaps;
use crate::tensor::bilinear_resize;
use crate::{real, Error, Result, Scalar};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A dense label image: 0 is background, `k+1` is class `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoMask {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width` labels.
    pub labels: Vec<u8>,
}

impl PseudoMask {
    pub fn new(image_id: impl Into<String>, height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::argument(format!(
                "mask data {} does not match {height}x{width}",
                labels.len()
            )));
        }
        Ok(PseudoMask {
            image_id: image_id.into(),
            height,
            width,
            labels,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }
}

/// Pooled `(K+1) × (K+1)` confusion counts; rows are reference labels,
/// columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    #[inline]
    pub fn at(&self, reference: usize, prediction: usize) -> u64 {
        self.counts[reference * self.classes + prediction]
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// TP / (TP + FP + FN) per class; `None` where the union is empty.
    pub fn per_class_iou<T: Scalar>(&self) -> Vec<Option<T>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.at(c, c);
                let row: u64 = (0..self.classes).map(|p| self.at(c, p)).sum();
                let col: u64 = (0..self.classes).map(|r| self.at(r, c)).sum();
                let union = row + col - tp;
                if union == 0 {
                    None
                } else {
                    Some(real::<T>(tp as f64) / real::<T>(union as f64))
                }
            })
            .collect()
    }
}

/// Evaluation result over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<T> {
    /// Index 0 is background, `k+1` class `k`; `None` marks classes absent
    /// from both predictions and references.
    pub per_class_iou: Vec<Option<T>>,
    /// Mean over the defined entries of `per_class_iou`.
    pub miou: T,
    pub confusion: ConfusionMatrix,
}

/// Threshold-and-argmax conversion of activation maps into a pseudo-mask.
///
/// Only present classes compete. The maps are bilinearly upsampled to
/// `out_h × out_w`; a pixel whose best present-class activation stays below
/// `bg_threshold` becomes background, otherwise it takes the argmax class
/// (lowest index on exact ties).
pub fn cams_to_pseudo_mask<T: Scalar>(
    maps: &ActivationMaps<T>,
    y: &[bool],
    bg_threshold: T,
    image_id: &str,
    out_h: usize,
    out_w: usize,
) -> Result<PseudoMask> {
    if !maps.normalized {
        return Err(Error::argument("pseudo-masks need sigmoid-normalized maps"));
    }
    if bg_threshold <= T::zero() || bg_threshold >= T::one() {
        return Err(Error::argument(format!(
            "bg_threshold must lie in (0,1), got {bg_threshold}"
        )));
    }
    if y.len() != maps.num_classes() {
        return Err(Error::argument(format!(
            "label length {} does not match {} map channels",
            y.len(),
            maps.num_classes()
        )));
    }
    if maps.num_classes() > u8::MAX as usize - 1 {
        return Err(Error::argument("more classes than the mask encoding holds"));
    }
    let present: Vec<usize> = (0..y.len()).filter(|&k| y[k]).collect();
    let planes: Vec<Vec<T>> = present
        .iter()
        .map(|&k| {
            bilinear_resize(
                maps.values.channel(k),
                maps.values.height(),
                maps.values.width(),
                out_h,
                out_w,
            )
        })
        .collect();
    let mut labels = vec![0u8; out_h * out_w];
    for (i, lab) in labels.iter_mut().enumerate() {
        let mut best_k: Option<usize> = None;
        let mut best_v = T::neg_infinity();
        for (pi, &k) in present.iter().enumerate() {
            let v = planes[pi][i];
            if v > best_v {
                best_v = v;
                best_k = Some(k);
            }
        }
        if let Some(k) = best_k {
            if best_v >= bg_threshold {
                *lab = (k + 1) as u8;
            }
        }
    }
    PseudoMask::new(image_id, out_h, out_w, labels)
}

/// Confusion counts for one aligned mask pair.
pub fn confusion_for_pair(
    prediction: &PseudoMask,
    reference: &PseudoMask,
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if prediction.height != reference.height || prediction.width != reference.width {
        return Err(Error::argument(format!(
            "mask shapes differ for {}: {}x{} vs {}x{}",
            prediction.image_id,
            prediction.height,
            prediction.width,
            reference.height,
            reference.width
        )));
    }
    let classes = num_classes + 1;
    let mut cm = ConfusionMatrix::zeros(classes);
    for (p, r) in prediction.labels.iter().zip(reference.labels.iter()) {
        let (p, r) = (*p as usize, *r as usize);
        if p >= classes || r >= classes {
            return Err(Error::argument(format!(
                "label out of range in {}: pred {p}, ref {r}",
                prediction.image_id
            )));
        }
        cm.counts[r * classes + p] += 1;
    }
    Ok(cm)
}

/// Pooled-confusion mIoU over aligned prediction/reference masks.
///
/// Masks are matched by `image_id`; ids must coincide exactly and shapes per
/// pair must agree.
pub fn evaluate_miou<T: Scalar>(
    predictions: &[PseudoMask],
    references: &[PseudoMask],
    num_classes: usize,
) -> Result<EvalReport<T>> {
    if predictions.is_empty() {
        return Err(Error::argument("no masks to evaluate"));
    }
    if predictions.len() != references.len() {
        return Err(Error::argument(format!(
            "{} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    let by_id: BTreeMap<&str, &PseudoMask> = references
        .iter()
        .map(|m| (m.image_id.as_str(), m))
        .collect();
    let mut pooled = ConfusionMatrix::zeros(num_classes + 1);
    for pred in predictions {
        let reference = by_id.get(pred.image_id.as_str()).ok_or_else(|| {
            Error::argument(format!("no reference mask for image {}", pred.image_id))
        })?;
        pooled.add(&confusion_for_pair(pred, reference, num_classes)?);
    }
    let per_class_iou = pooled.per_class_iou::<T>();
    let defined: Vec<T> = per_class_iou.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        return Err(Error::argument("no class has a nonzero union"));
    }
    let miou = defined.iter().copied().sum::<T>() / real::<T>(defined.len() as f64);
    Ok(EvalReport {
        per_class_iou,
        miou,
        confusion: pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn norm_maps(values: Tensor3<f64>) -> ActivationMaps<f64> {
        ActivationMaps {
            values,
            normalized: true,
        }
    }

    #[test]
    fn zero_activations_give_all_background() {
        let maps = norm_maps(Tensor3::zeros(2, 4, 4));
        let m = cams_to_pseudo_mask(&maps, &[true, true], 0.25, "a", 8, 8).unwrap();
        assert!(m.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn saturated_single_class_covers_everything() {
        let maps = norm_maps(Tensor3::from_fn(3, 4, 4, |c, _, _| {
            if c == 1 {
                1.0
            } else {
                0.9
            }
        }));
        let m = cams_to_pseudo_mask(&maps, &[false, true, false], 0.25, "a", 8, 8).unwrap();
        assert!(m.labels.iter().all(|&l| l == 2), "only class 1 competes");
    }

    #[test]
    fn two_by_two_hand_table() {
        // class 0 plane: [[0.9, 0.1], [0.2, 0.6]]
        // class 1 plane: [[0.1, 0.4], [0.2, 0.7]]
        // threshold 0.3, both present, output at map resolution:
        //   (0,0): max 0.9 → class 0 → 1
        //   (0,1): max 0.4 → class 1 → 2
        //   (1,0): max 0.2 < 0.3 → background
        //   (1,1): max 0.7 → class 1 → 2
        let maps = norm_maps(Tensor3::from_vec(
            2,
            2,
            2,
            vec![0.9, 0.1, 0.2, 0.6, 0.1, 0.4, 0.2, 0.7],
        ));
        let m = cams_to_pseudo_mask(&maps, &[true, true], 0.3, "a", 2, 2).unwrap();
        assert_eq!(m.labels, vec![1, 2, 0, 2]);
    }

    #[test]
    fn threshold_bounds_are_enforced() {
        let maps = norm_maps(Tensor3::zeros(1, 2, 2));
        assert!(cams_to_pseudo_mask(&maps, &[true], 0.0, "a", 2, 2).is_err());
        assert!(cams_to_pseudo_mask(&maps, &[true], 1.0, "a", 2, 2).is_err());
    }

    #[test]
    fn tiny_threshold_backgrounds_only_exact_zeros() {
        let maps = norm_maps(Tensor3::from_vec(1, 2, 2, vec![0.0, 1e-300, 0.5, 0.0]));
        let m = cams_to_pseudo_mask(&maps, &[true], 1e-308, "a", 2, 2).unwrap();
        assert_eq!(m.labels, vec![0, 1, 1, 0]);
    }

    fn mask(id: &str, labels: Vec<u8>) -> PseudoMask {
        let side = (labels.len() as f64).sqrt() as usize;
        PseudoMask::new(id, side, labels.len() / side, labels).unwrap()
    }

    #[test]
    fn identical_masks_score_perfect() {
        let refs = vec![
            mask("a", vec![0, 1, 2, 0]),
            mask("b", vec![2, 2, 0, 1]),
        ];
        let rep = evaluate_miou::<f64>(&refs, &refs, 2).unwrap();
        assert_eq!(rep.miou, 1.0);
        for iou in rep.per_class_iou.iter().flatten() {
            assert_eq!(*iou, 1.0);
        }
    }

    #[test]
    fn disjoint_masks_score_zero_for_the_class() {
        let preds = vec![mask("a", vec![1, 1, 0, 0])];
        let refs = vec![mask("a", vec![0, 0, 1, 1])];
        let rep = evaluate_miou::<f64>(&preds, &refs, 1).unwrap();
        assert_eq!(rep.per_class_iou[1], Some(0.0));
        assert_eq!(rep.per_class_iou[0], Some(0.0)); // background also disjoint
        assert_eq!(rep.miou, 0.0);
    }

    #[test]
    fn shape_and_id_mismatches_are_rejected() {
        let preds = vec![mask("a", vec![0, 1, 1, 0])];
        let refs = vec![mask("b", vec![0, 1, 1, 0])];
        assert!(evaluate_miou::<f64>(&preds, &refs, 1).is_err());

        let refs = vec![PseudoMask::new("a", 1, 4, vec![0, 1, 1, 0]).unwrap()];
        assert!(evaluate_miou::<f64>(&preds, &refs, 1).is_err());
    }

    /// Straight-line oracle: per class, count TP/FP/FN with explicit loops
    /// over images and pixels, no confusion matrix involved.
    fn oracle_miou(preds: &[PseudoMask], refs: &[PseudoMask], num_classes: usize) -> (Vec<Option<f64>>, f64) {
        let mut ious = Vec::new();
        for c in 0..=num_classes {
            let mut tp = 0u64;
            let mut fp = 0u64;
            let mut fn_ = 0u64;
            for (p, r) in preds.iter().zip(refs.iter()) {
                for y in 0..p.height {
                    for x in 0..p.width {
                        let pc = p.at(y, x) as usize == c;
                        let rc = r.at(y, x) as usize == c;
                        match (pc, rc) {
                            (true, true) => tp += 1,
                            (true, false) => fp += 1,
                            (false, true) => fn_ += 1,
                            _ => {}
                        }
                    }
                }
            }
            if tp + fp + fn_ == 0 {
                ious.push(None);
            } else {
                ious.push(Some(tp as f64 / (tp + fp + fn_) as f64));
            }
        }
        let defined: Vec<f64> = ious.iter().filter_map(|v| *v).collect();
        let miou = defined.iter().sum::<f64>() / defined.len() as f64;
        (ious, miou)
    }

    #[test]
    fn pooled_evaluation_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let k = 5;
        for round in 0..100 {
            let n = rng.gen_range(1..4);
            let mut preds = Vec::new();
            let mut refs = Vec::new();
            for i in 0..n {
                let id = format!("img{round}_{i}");
                let p: Vec<u8> = (0..16 * 16).map(|_| rng.gen_range(0..=k as u8)).collect();
                let r: Vec<u8> = (0..16 * 16).map(|_| rng.gen_range(0..=k as u8)).collect();
                preds.push(PseudoMask::new(&id, 16, 16, p).unwrap());
                refs.push(PseudoMask::new(&id, 16, 16, r).unwrap());
            }
            let rep = evaluate_miou::<f64>(&preds, &refs, k).unwrap();
            let (oious, omiou) = oracle_miou(&preds, &refs, k);
            assert_eq!(rep.per_class_iou, oious, "round {round}");
            assert_eq!(rep.miou, omiou, "round {round}");
        }
    }

    #[test]
    fn swapping_roles_transposes_confusion_and_keeps_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let p: Vec<u8> = (0..64).map(|_| rng.gen_range(0..4u8)).collect();
        let r: Vec<u8> = (0..64).map(|_| rng.gen_range(0..4u8)).collect();
        let preds = vec![mask("a", p)];
        let refs = vec![mask("a", r)];
        let fwd = evaluate_miou::<f64>(&preds, &refs, 3).unwrap();
        let bwd = evaluate_miou::<f64>(&refs, &preds, 3).unwrap();
        assert_eq!(fwd.per_class_iou, bwd.per_class_iou);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(fwd.confusion.at(i, j), bwd.confusion.at(j, i));
            }
        }
    }

    #[test]
    fn pooled_confusion_equals_sum_of_per_image_confusions() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let mut preds = Vec::new();
        let mut refs = Vec::new();
        let mut expect = ConfusionMatrix::zeros(4);
        for i in 0..5 {
            let id = format!("m{i}");
            let p: Vec<u8> = (0..100).map(|_| rng.gen_range(0..4u8)).collect();
            let r: Vec<u8> = (0..100).map(|_| rng.gen_range(0..4u8)).collect();
            let pm = PseudoMask::new(&id, 10, 10, p).unwrap();
            let rm = PseudoMask::new(&id, 10, 10, r).unwrap();
            expect.add(&confusion_for_pair(&pm, &rm, 3).unwrap());
            preds.push(pm);
            refs.push(rm);
        }
        let rep = evaluate_miou::<f64>(&preds, &refs, 3).unwrap();
        assert_eq!(rep.confusion, expect);
        assert_eq!(rep.confusion.total(), 500);
    }
}
