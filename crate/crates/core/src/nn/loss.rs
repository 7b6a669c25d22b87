use std::cmp::Ordering;

/// Mean softmax cross-entropy over `n` rows of `classes` logits.
///
/// Per-row terms are computed in f32 and accumulated in f64. Non-finite
/// logits yield a non-finite loss; nothing is clamped.
pub fn cross_entropy(logits: &[f32], labels: &[u8], classes: usize) -> f64 {
    batch_loss(logits, labels, classes).mean
}

/// Mean cross-entropy together with the number of rows whose own loss is not finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub mean: f64,
    pub saturated: usize,
}

impl BatchLoss {
    /// Orders by damage: every non-finite mean (NaN included) outranks every
    /// finite one, and among non-finite means more saturated rows rank higher.
    pub fn severity_cmp(&self, other: &Self) -> Ordering {
        match (self.mean.is_finite(), other.mean.is_finite()) {
            (true, true) => self.mean.total_cmp(&other.mean),
            (false, true) => Ordering::Greater,
            (true, false) => Ordering::Less,
            (false, false) => self.saturated.cmp(&other.saturated),
        }
    }
}

pub fn batch_loss(logits: &[f32], labels: &[u8], classes: usize) -> BatchLoss {
    let n = labels.len();
    let mut total = 0.0f64;
    let mut saturated = 0;
    for (s, &y) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let (lse, _) = log_sum_exp(row);
        let l = lse - row[y as usize];
        saturated += usize::from(!l.is_finite());
        total += l as f64;
    }
    BatchLoss {
        mean: total / n as f64,
        saturated,
    }
}

/// Loss plus its gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &[f32], labels: &[u8], classes: usize) -> (f64, Vec<f32>) {
    let n = labels.len();
    let inv_n = 1.0 / n as f32;
    let mut grad = vec![0.0f32; logits.len()];
    let mut total = 0.0f64;
    for (s, &y) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let (lse, max) = log_sum_exp(row);
        total += (lse - row[y as usize]) as f64;
        let g = &mut grad[s * classes..(s + 1) * classes];
        let shift = lse - max;
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - max - shift).exp() * inv_n;
        }
        g[y as usize] -= inv_n;
    }
    (total / n as f64, grad)
}

/// Returns `(log(sum(exp(row))), max(row))`; the max propagates NaN.
fn log_sum_exp(row: &[f32]) -> (f32, f32) {
    let mut max = f32::NEG_INFINITY;
    for &z in row {
        if z.is_nan() || z > max {
            max = z;
        }
        if max.is_nan() {
            break;
        }
    }
    let sum: f32 = row.iter().map(|&z| (z - max).exp()).sum();
    (max + sum.ln(), max)
}

/// Row-wise softmax.
pub fn softmax(logits: &[f32], classes: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let (lse, _) = log_sum_exp(row);
        out.extend(row.iter().map(|&z| (z - lse).exp()));
    }
    out
}

/// Lowest index among the maximal entries; NaN never wins, an all-NaN row maps to 0.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if v > best_v {
            best = j;
            best_v = v;
        }
    }
    best
}
