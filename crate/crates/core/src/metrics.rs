//! Classification and part-segmentation scores.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::Serialize;

use crate::autodiff::Mode;
use crate::error::{dim_err, Error, Result};
use crate::geometry::PointCloud;
use crate::networks::{multi_scale_predict, PartLayout, PointModel, ScaleMode};
use crate::nn::Forward;
use crate::tensor::Tensor;

/// Index of the largest entry; ties go to the first.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax restricted to `range`, returned as a global index.
pub fn argmax_in(row: &[f64], range: Range<usize>) -> usize {
    range.start + argmax(&row[range])
}

/// Fraction of exact matches.
pub fn overall_accuracy(pred: &[usize], target: &[usize]) -> Result<f64> {
    check_lengths(pred, target)?;
    Ok(pred.iter().zip(target).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// Mean over classes present in `target` of per-class recall.
pub fn mean_class_accuracy(pred: &[usize], target: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(pred, target)?;
    let mut hit = vec![0usize; num_classes];
    let mut tot = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(target) {
        if t >= num_classes {
            return Err(Error::Data(format!("label {} outside [0, {})", t, num_classes)));
        }
        tot[t] += 1;
        hit[t] += usize::from(p == t);
    }
    let present: Vec<f64> = (0..num_classes).filter(|&c| tot[c] > 0).map(|c| hit[c] as f64 / tot[c] as f64).collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

fn check_lengths(pred: &[usize], target: &[usize]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(dim_err!("{} predictions for {} targets", pred.len(), target.len()));
    }
    Ok(())
}

/// IoU of one part over one shape; `None` when the part is absent from
/// both prediction and target.
pub fn part_iou(pred: &[usize], target: &[usize], part: usize) -> Option<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let (a, b) = (p == part, t == part);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Mean IoU over `parts`; parts absent from both sides score 1.
pub fn shape_iou(pred: &[usize], target: &[usize], parts: Range<usize>) -> Result<f64> {
    check_lengths(pred, target)?;
    let n = parts.len();
    if n == 0 {
        return Err(Error::Config("category has no parts".into()));
    }
    Ok(parts.map(|p| part_iou(pred, target, p).unwrap_or(1.0)).sum::<f64>() / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub overall_accuracy: f64,
    pub mean_class_accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentationMetrics {
    pub point_accuracy: f64,
    /// Mean over shapes of the per-shape part IoU.
    pub piou: f64,
    /// Mean shape IoU per category name.
    pub category_iou: BTreeMap<String, f64>,
    pub count: usize,
}

/// Fused probability rows for every cloud, evaluated in batches.
/// `scales` switches to test-time multi-scale averaging.
pub fn predict_all<M: PointModel + ?Sized>(
    model: &M,
    clouds: &[&PointCloud],
    batch_size: usize,
    scales: Option<(&[f64], ScaleMode)>,
) -> Result<Vec<Tensor>> {
    if let Some((s, mode)) = scales {
        return clouds.iter().map(|c| multi_scale_predict(model, c, s, mode)).collect();
    }
    let mut out = Vec::with_capacity(clouds.len());
    for chunk in clouds.chunks(batch_size.max(1)) {
        let mut fw = Forward::new(model.store(), Mode::Eval);
        let heads = model.forward_heads(&mut fw, chunk)?;
        let p = heads.probabilities(&fw, model.fusion());
        let per = p.rows() / chunk.len();
        for i in 0..chunk.len() {
            let rows: Vec<usize> = (i * per..(i + 1) * per).collect();
            out.push(p.select_rows(&rows)?);
        }
    }
    Ok(out)
}

pub fn evaluate_classification<M: PointModel + ?Sized>(
    model: &M,
    clouds: &[&PointCloud],
    num_classes: usize,
    batch_size: usize,
    scales: Option<(&[f64], ScaleMode)>,
) -> Result<ClassificationMetrics> {
    let probs = predict_all(model, clouds, batch_size, scales)?;
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p.row(0))).collect();
    let target = clouds
        .iter()
        .map(|c| c.category.ok_or_else(|| Error::Data("cloud has no class label".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassificationMetrics {
        overall_accuracy: overall_accuracy(&pred, &target)?,
        mean_class_accuracy: mean_class_accuracy(&pred, &target, num_classes)?,
        count: clouds.len(),
    })
}

/// Per-point predictions take the argmax over the parts of each shape's
/// known category.
pub fn evaluate_segmentation<M: PointModel + ?Sized>(
    model: &M,
    clouds: &[&PointCloud],
    layout: &PartLayout,
    category_names: &[String],
    batch_size: usize,
    scales: Option<(&[f64], ScaleMode)>,
) -> Result<SegmentationMetrics> {
    let probs = predict_all(model, clouds, batch_size, scales)?;
    let (mut hits, mut points, mut iou_sum) = (0usize, 0usize, 0.0);
    let mut per_cat: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (c, p) in clouds.iter().zip(&probs) {
        let cat = c.category.ok_or_else(|| Error::Data("segmentation needs a known category".into()))?;
        let target = c.point_labels.as_ref().ok_or_else(|| Error::Data("cloud has no point labels".into()))?;
        let parts = layout.parts_of(cat);
        let pred: Vec<usize> = (0..p.rows()).map(|i| argmax_in(p.row(i), parts.clone())).collect();
        hits += pred.iter().zip(target).filter(|(a, b)| a == b).count();
        points += pred.len();
        let iou = shape_iou(&pred, target, parts)?;
        iou_sum += iou;
        let e = per_cat.entry(cat).or_default();
        e.0 += iou;
        e.1 += 1;
    }
    let category_iou = per_cat
        .into_iter()
        .map(|(k, (s, n))| (category_names.get(k).cloned().unwrap_or_else(|| k.to_string()), s / n as f64))
        .collect();
    Ok(SegmentationMetrics {
        point_accuracy: hits as f64 / points.max(1) as f64,
        piou: iou_sum / clouds.len().max(1) as f64,
        category_iou,
        count: clouds.len(),
    })
}
