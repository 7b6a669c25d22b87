//! Toy models, flip plans and straight-line selection oracles shared by integration tests.
#![allow(dead_code)]

use expflip::attacks::FlipPlan;
use expflip::bits::{flip_bit, get_bit, BitAddress, FlipRecord, Role};
use expflip::nn::loss::cross_entropy;
use expflip::nn::{Batch, Layer, LayerKind, Model};
use expflip::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

/// conv(1->2, 3x3) relu pool linear(8->4): 50 weights.
pub fn toy_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::new(
        [1, 4, 4],
        vec![
            Layer::conv2d("conv", uniform(&mut rng, vec![2, 1, 3, 3], 1.0), uniform(&mut rng, vec![2], 0.5), 1),
            Layer::relu("relu"),
            Layer::maxpool2x2("pool"),
            Layer::linear("fc", uniform(&mut rng, vec![4, 8], 1.0), uniform(&mut rng, vec![4], 0.5)),
        ],
    )
    .unwrap()
}

pub fn toy_batch(seed: u64, n: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA7C);
    let images = Tensor::new(vec![n, 1, 4, 4], (0..n * 16).map(|_| rng.gen::<f32>()).collect()).unwrap();
    Batch::new(images, (0..n).map(|_| rng.gen_range(0..4u8)).collect()).unwrap()
}

/// Scans every weight, keeps eligible MSBs and returns the one with the largest `|w*g|`.
pub fn naive_top1(model: &Model, batch: &Batch) -> Option<(String, usize)> {
    let snap = model.loss_and_grad(batch).unwrap();
    let mut best: Option<(f64, String, usize)> = None;
    for layer in model.layers() {
        let Some(w) = layer.param(Role::Weight) else { continue };
        let g = snap.get(layer.name(), Role::Weight).unwrap();
        for (i, (&wi, &gi)) in w.data().iter().zip(g).enumerate() {
            let p = wi as f64 * gi as f64;
            let bit = get_bit(wi, 1).unwrap();
            let ok = (bit == 0 && p > 0.0) || (bit == 1 && p < 0.0);
            if !ok || !p.is_finite() {
                continue;
            }
            if best.as_ref().is_none_or(|(s, _, _)| p.abs() > *s) {
                best = Some((p.abs(), layer.name().to_string(), i));
            }
        }
    }
    best.map(|(_, l, i)| (l, i))
}

/// Flips each weight's MSB, runs the whole network, restores, and keeps the worst.
/// Non-finite batch losses beat finite ones; among them, more non-finite rows win.
pub fn naive_exhaustive(model: &Model, batch: &Batch) -> (String, usize) {
    let mut m = model.clone();
    let k = m.output_size();
    let mut best: Option<(f64, usize, String, usize)> = None;
    let names: Vec<String> = m.layers().iter().map(|l| l.name().to_string()).collect();
    for (li, name) in names.iter().enumerate() {
        let Some(len) = m.param(li, Role::Weight).map(|t| t.len()) else { continue };
        for i in 0..len {
            let old = m.param(li, Role::Weight).unwrap().data()[i];
            m.param_mut(li, Role::Weight).unwrap().data_mut()[i] = flip_bit(old, 1).unwrap();
            let loss = m.batch_loss(batch).unwrap();
            let logits = m.forward(&batch.images).unwrap();
            let bad_rows = (0..batch.len())
                .filter(|&r| !cross_entropy(&logits.data()[r * k..(r + 1) * k], &batch.labels[r..r + 1], k).is_finite())
                .count();
            m.param_mut(li, Role::Weight).unwrap().data_mut()[i] = old;
            let better = match &best {
                None => true,
                Some((b, b_rows, _, _)) => match (loss.is_finite(), b.is_finite()) {
                    (false, true) => true,
                    (true, false) => false,
                    (false, false) => bad_rows > *b_rows,
                    (true, true) => loss > *b,
                },
            };
            if better {
                best = Some((loss, bad_rows, name.clone(), i));
            }
        }
    }
    let (_, _, l, i) = best.unwrap();
    (l, i)
}

/// (layer index, role, length) of every parameter tensor.
pub fn param_tensors(m: &Model) -> Vec<(usize, Role, usize)> {
    m.param_layers()
        .into_iter()
        .flat_map(|li| [Role::Weight, Role::Bias].map(|r| (li, r, m.param(li, r).unwrap().len())))
        .collect()
}

/// A plan over the distinct addresses named by `picks` (tensor, offset, bit); repeats are skipped.
pub fn plan_from(m: &Model, picks: &[(usize, usize, u8)]) -> FlipPlan {
    let tensors = param_tensors(m);
    let mut records: Vec<FlipRecord> = Vec::new();
    for &(t, off, bit) in picks {
        let (li, role, len) = tensors[t % tensors.len()];
        let address = BitAddress {
            layer: m.layers()[li].name().to_string(),
            role,
            offset: off % len,
            bit,
        };
        if records.iter().any(|r| r.address == address) {
            continue;
        }
        let old = m.param(li, role).unwrap().data()[off % len];
        records.push(FlipRecord::new(address, old, 0.0, 0.0));
    }
    let n = records.len();
    FlipPlan::new(records, n)
}

/// A plan of exactly `n` distinct addresses over every parameter tensor and bit position.
pub fn random_plan(m: &Model, n: usize, seed: u64) -> FlipPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::new();
    loop {
        let plan = plan_from(m, &picks);
        if plan.len() == n {
            return plan;
        }
        picks.push((rng.gen_range(0..usize::MAX), rng.gen_range(0..usize::MAX), rng.gen_range(0..32u8)));
    }
}

/// Mean cross-entropy evaluated in f64 with straight-line loops, independent of the
/// library kernels. `tweak` replaces one parameter value: (layer, role, offset, value).
pub fn reference_loss(model: &Model, batch: &Batch, tweak: Option<(usize, Role, usize, f64)>) -> f64 {
    let param = |li: usize, role: Role| -> Vec<f64> {
        let mut v: Vec<f64> = model.param(li, role).unwrap().data().iter().map(|&x| x as f64).collect();
        if let Some((tl, tr, off, val)) = tweak {
            if tl == li && tr == role {
                v[off] = val;
            }
        }
        v
    };
    let [c0, h0, w0] = model.input_shape();
    let per_image = c0 * h0 * w0;
    let mut total = 0.0;
    for (s, &label) in batch.labels.iter().enumerate() {
        let mut x: Vec<f64> = batch.images.data()[s * per_image..(s + 1) * per_image].iter().map(|&v| v as f64).collect();
        let (mut c, mut h, mut w) = (c0, h0, w0);
        for (li, layer) in model.layers().iter().enumerate() {
            match layer.kind() {
                LayerKind::Conv2d => {
                    let shape = layer.param(Role::Weight).unwrap().shape().to_vec();
                    let (wt, b) = (param(li, Role::Weight), param(li, Role::Bias));
                    let (out_c, k, pad) = (shape[0], shape[2], layer.padding() as isize);
                    let (oh, ow) = (h + 2 * pad as usize - k + 1, w + 2 * pad as usize - k + 1);
                    let mut y = vec![0.0; out_c * oh * ow];
                    for o in 0..out_c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = b[o];
                                for i in 0..c {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iy = oy as isize + ky as isize - pad;
                                            let ix = ox as isize + kx as isize - pad;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                                continue;
                                            }
                                            acc += wt[((o * c + i) * k + ky) * k + kx] * x[(i * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                                y[(o * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                    (x, c, h, w) = (y, out_c, oh, ow);
                }
                LayerKind::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
                LayerKind::MaxPool2x2 => {
                    let (oh, ow) = (h / 2, w / 2);
                    let mut y = vec![0.0; c * oh * ow];
                    for p in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let at = |dy: usize, dx: usize| x[(p * h + 2 * oy + dy) * w + 2 * ox + dx];
                                y[(p * oh + oy) * ow + ox] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                            }
                        }
                    }
                    (x, h, w) = (y, oh, ow);
                }
                LayerKind::Linear => {
                    let (wt, b) = (param(li, Role::Weight), param(li, Role::Bias));
                    let (out_f, in_f) = (b.len(), x.len());
                    x = (0..out_f).map(|o| b[o] + (0..in_f).map(|i| wt[o * in_f + i] * x[i]).sum::<f64>()).collect();
                    (c, h, w) = (out_f, 1, 1);
                }
            }
        }
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - x[label as usize];
    }
    total / batch.len() as f64
}
