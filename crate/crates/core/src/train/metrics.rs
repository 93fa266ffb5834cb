use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationMetrics {
    pub overall_accuracy: f64,
    /// Unweighted mean of per-class recall over classes with at least one instance.
    pub mean_class_accuracy: f64,
    /// Recall per class; `None` for classes absent from the ground truth.
    pub per_class_accuracy: Vec<Option<f64>>,
}

pub fn evaluate_classification(
    predictions: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<ClassificationMetrics> {
    if truth.is_empty() {
        return Err(Error::domain("cannot evaluate an empty dataset"));
    }
    if predictions.len() != truth.len() {
        return Err(Error::dim("evaluate_classification", &[predictions.len()], &[truth.len()]));
    }
    let mut hits = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        if t >= num_classes {
            return Err(Error::domain(format!("label {t} outside {num_classes} classes")));
        }
        counts[t] += 1;
        hits[t] += usize::from(p == t);
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(ClassificationMetrics {
        overall_accuracy: hits.iter().sum::<usize>() as f64 / truth.len() as f64,
        mean_class_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        per_class_accuracy: per_class,
    })
}

/// IoU of one shape: mean over `parts` of |pred ∩ truth| / |pred ∪ truth|,
/// counting a part absent from both as 1.
pub fn shape_iou(predictions: &[usize], truth: &[usize], parts: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::dim("shape_iou", &[predictions.len()], &[truth.len()]));
    }
    if parts.is_empty() {
        return Err(Error::domain("category has no parts"));
    }
    if let Some(bad) = predictions.iter().chain(truth).find(|l| !parts.contains(l)) {
        return Err(Error::domain(format!("label {bad} outside category parts {parts:?}")));
    }
    let counts: Vec<(usize, usize)> = parts
        .iter()
        .map(|&part| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &t) in predictions.iter().zip(truth) {
                let (a, b) = (p == part, t == part);
                inter += usize::from(a && b);
                union += usize::from(a || b);
            }
            (inter, union)
        })
        .collect();
    Ok(mean_part_iou(&counts))
}

/// Mean of `intersection / union` over `(intersection, union)` part counts,
/// with an empty union scoring 1.
pub fn mean_part_iou(counts: &[(usize, usize)]) -> f64 {
    let total: f64 = counts
        .iter()
        .map(|&(i, u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
        .sum();
    total / counts.len() as f64
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentedShape<'a> {
    pub predictions: &'a [usize],
    pub truth: &'a [usize],
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub shape_ious: Vec<f64>,
    /// Mean over shapes.
    pub miou: f64,
    /// Mean shape IoU per category; `None` for categories without shapes.
    pub per_category: Vec<Option<f64>>,
}

pub fn evaluate_miou(shapes: &[SegmentedShape<'_>], parts_of_category: &[Vec<usize>]) -> Result<MiouReport> {
    if shapes.is_empty() {
        return Err(Error::domain("cannot evaluate an empty dataset"));
    }
    let mut sums = vec![(0.0, 0usize); parts_of_category.len()];
    let mut shape_ious = Vec::with_capacity(shapes.len());
    for s in shapes {
        let parts = parts_of_category
            .get(s.category)
            .ok_or_else(|| Error::domain(format!("unknown category {}", s.category)))?;
        let iou = shape_iou(s.predictions, s.truth, parts)?;
        sums[s.category].0 += iou;
        sums[s.category].1 += 1;
        shape_ious.push(iou);
    }
    Ok(MiouReport {
        miou: shape_ious.iter().sum::<f64>() / shape_ious.len() as f64,
        shape_ious,
        per_category: sums.iter().map(|&(s, c)| (c > 0).then(|| s / c as f64)).collect(),
    })
}
