//! Segmentation and analysis metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel confusion counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::InvalidShape(format!(
                "{} predictions vs {} labels",
                pred.len(),
                truth.len()
            )));
        }
        if let Some(bad) = pred.iter().chain(truth).find(|&&v| v as usize >= self.classes) {
            return Err(Error::Data(format!(
                "class {bad} out of range for {} classes",
                self.classes
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::InvalidShape(format!(
                "merging {} classes into {}",
                other.classes, self.classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Per-class IoU; `None` where the class has zero union.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with non-zero union.
    pub fn miou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        let iou = self.iou();
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::UndefinedMetric("mIoU of an empty confusion matrix".into()));
        }
        Ok((present.iter().sum::<f64>() / present.len() as f64, iou))
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric("accuracy of an empty confusion matrix".into()));
        }
        let diag: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Ok(diag as f64 / total as f64)
    }
}

/// Fraction of equal entries.
pub fn pixel_accuracy(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidShape(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidShape(format!(
            "pearson needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("pearson with zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Agreement between two labelings under the best one-to-one relabeling of
/// `a`'s labels onto `b`'s (exhaustive over permutations; intended for small K).
pub fn best_permutation_agreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidShape(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let k = ka.max(kb);
    if k > 8 {
        return Err(Error::InvalidConfig(format!("permutation search over {k} labels")));
    }
    let mut table = vec![0usize; k * k];
    for (&x, &y) in a.iter().zip(b) {
        table[x * k + y] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        let hits: usize = p.iter().enumerate().map(|(x, &y)| table[x * k + y]).sum();
        best = best.max(hits);
    });
    Ok(best as f64 / a.len() as f64)
}

fn permute(p: &mut [usize], i: usize, visit: &mut impl FnMut(&[usize])) {
    if i == p.len() {
        visit(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, visit);
        p.swap(i, j);
    }
}

/// Cluster purity: share of samples that carry their cluster's majority truth label.
pub fn purity(clusters: &[usize], truth: &[usize]) -> Result<f64> {
    if clusters.len() != truth.len() || clusters.is_empty() {
        return Err(Error::InvalidShape(format!(
            "labelings of length {} and {}",
            clusters.len(),
            truth.len()
        )));
    }
    let mut counts = std::collections::BTreeMap::<(usize, usize), usize>::new();
    for (&c, &t) in clusters.iter().zip(truth) {
        *counts.entry((c, t)).or_default() += 1;
    }
    let mut best = std::collections::BTreeMap::<usize, usize>::new();
    for ((c, _), n) in counts {
        let e = best.entry(c).or_default();
        *e = (*e).max(n);
    }
    Ok(best.values().sum::<usize>() as f64 / clusters.len() as f64)
}
