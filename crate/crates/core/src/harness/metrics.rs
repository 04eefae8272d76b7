//! Overlap metrics on label volumes.

use crate::error::{dim_err, Result};

/// `2|P∩G| / (|P|+|G|)` for one class; two empty sets score 1.
pub fn dice_metric(pred: &[u16], gt: &[u16], class: u16) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(dim_err!("prediction has {} voxels, ground truth {}", pred.len(), gt.len()));
    }
    let (mut both, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class, b == class);
        both += (ia && ib) as usize;
        p += ia as usize;
        g += ib as usize;
    }
    Ok(if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 })
}

/// Dice of classes `1..=classes`.
pub fn class_dice(pred: &[u16], gt: &[u16], classes: usize) -> Result<Vec<f64>> {
    (1..=classes).map(|c| dice_metric(pred, gt, c as u16)).collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}
