use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hyperparameters for one SGD epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// The committed reference configuration (`configs/cnn50k.toml`).
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// One shuffled pass of minibatch SGD over `images`/`labels`.
///
/// The shuffle is driven by `seed`; with the same inputs the resulting weights
/// are bitwise reproducible. A non-finite batch loss aborts the epoch.
pub fn train_epoch(mut model: Model, images: &Tensor, labels: &[u8], cfg: &TrainConfig) -> Result<Model> {
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::arg(format!("learning rate {} must be a finite non-negative number", cfg.lr)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let shape = images.shape();
    let n = labels.len();
    if shape.first() != Some(&n) || n == 0 {
        return Err(Error::arg(format!("{:?} images vs {n} labels", shape.first())));
    }
    let per: usize = shape[1..].iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
        }
        let mut bshape = shape.to_vec();
        bshape[0] = idx.len();
        let batch = Batch::new(Tensor::new(bshape, data)?, idx.iter().map(|&i| labels[i]).collect())?;
        let snap = model.loss_and_grad(&batch)?;
        if !snap.loss.is_finite() {
            return Err(Error::Divergence { step, loss: snap.loss });
        }
        if cfg.lr == 0.0 {
            continue;
        }
        for g in snap.grads {
            let p = model.param_mut(g.layer_index, g.role).expect("gradient for an existing parameter");
            for (w, d) in p.data_mut().iter_mut().zip(g.values) {
                *w -= cfg.lr * d;
            }
        }
    }
    Ok(model)
}
