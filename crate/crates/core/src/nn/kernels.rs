//! Float32 compute kernels. Every reduction runs in a fixed order so that a
//! value recomputed in isolation is bitwise-identical to the full pass.

/// Dot product with eight interleaved accumulators combined pairwise.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0f32;
    for k in chunks * 8..a.len() {
        tail += a[k] * b[k];
    }
    let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.in_h + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_w(&self) -> usize {
        self.in_w + 2 * self.pad + 1 - self.kernel
    }

    pub fn in_size(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    pub fn out_size(&self) -> usize {
        self.out_ch * self.out_h() * self.out_w()
    }

    pub fn filter_size(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// Valid output column range for kernel column `kx`.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let ow = self.out_w();
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.in_w + self.pad).saturating_sub(kx).min(ow);
        (lo, hi.max(lo))
    }

    #[inline]
    fn oy_range(&self, ky: usize) -> (usize, usize) {
        let oh = self.out_h();
        let lo = self.pad.saturating_sub(ky);
        let hi = (self.in_h + self.pad).saturating_sub(ky).min(oh);
        (lo, hi.max(lo))
    }
}

/// One output channel of one sample. `filter` is `[in_ch, k, k]`, `out` is `[out_h, out_w]`.
/// Padded positions contribute nothing.
pub fn conv_channel(g: &ConvGeom, input: &[f32], filter: &[f32], bias: f32, out: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    debug_assert_eq!(out.len(), oh * ow);
    out.fill(bias);
    let k = g.kernel;
    for ic in 0..g.in_ch {
        let plane = &input[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            let (y0, y1) = g.oy_range(ky);
            for kx in 0..k {
                let w = filter[(ic * k + ky) * k + kx];
                let (x0, x1) = g.ox_range(kx);
                if x0 >= x1 {
                    continue;
                }
                for oy in y0..y1 {
                    let iy = oy + ky - g.pad;
                    let src = &plane[iy * g.in_w + x0 + kx - g.pad..iy * g.in_w + x1 + kx - g.pad];
                    axpy(w, src, &mut out[oy * ow + x0..oy * ow + x1]);
                }
            }
        }
    }
}

pub fn conv_forward(g: &ConvGeom, n: usize, input: &[f32], weight: &[f32], bias: &[f32], out: &mut [f32]) {
    let plane = g.out_h() * g.out_w();
    let fs = g.filter_size();
    for s in 0..n {
        let x = &input[s * g.in_size()..(s + 1) * g.in_size()];
        for oc in 0..g.out_ch {
            let o = &mut out[s * g.out_size() + oc * plane..s * g.out_size() + (oc + 1) * plane];
            conv_channel(g, x, &weight[oc * fs..(oc + 1) * fs], bias[oc], o);
        }
    }
}

/// Accumulates parameter gradients and, when `grad_in` is given, the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    g: &ConvGeom,
    n: usize,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    grad_w: &mut [f32],
    grad_b: &mut [f32],
    mut grad_in: Option<&mut [f32]>,
) {
    let (ow, plane) = (g.out_w(), g.out_h() * g.out_w());
    let k = g.kernel;
    let fs = g.filter_size();
    for s in 0..n {
        let x = &input[s * g.in_size()..(s + 1) * g.in_size()];
        let dy_s = &grad_out[s * g.out_size()..(s + 1) * g.out_size()];
        for oc in 0..g.out_ch {
            let dy = &dy_s[oc * plane..(oc + 1) * plane];
            grad_b[oc] += dy.iter().sum::<f32>();
            for ic in 0..g.in_ch {
                let xp = &x[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
                for ky in 0..k {
                    let (y0, y1) = g.oy_range(ky);
                    for kx in 0..k {
                        let (x0, x1) = g.ox_range(kx);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0f32;
                        for oy in y0..y1 {
                            let iy = oy + ky - g.pad;
                            let src = &xp[iy * g.in_w + x0 + kx - g.pad..iy * g.in_w + x1 + kx - g.pad];
                            acc += dot(src, &dy[oy * ow + x0..oy * ow + x1]);
                        }
                        grad_w[oc * fs + (ic * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
        if let Some(gi) = grad_in.as_deref_mut() {
            let gi_s = &mut gi[s * g.in_size()..(s + 1) * g.in_size()];
            for oc in 0..g.out_ch {
                let dy = &dy_s[oc * plane..(oc + 1) * plane];
                for ic in 0..g.in_ch {
                    let gp = &mut gi_s[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
                    for ky in 0..k {
                        let (y0, y1) = g.oy_range(ky);
                        for kx in 0..k {
                            let w = weight[oc * fs + (ic * k + ky) * k + kx];
                            let (x0, x1) = g.ox_range(kx);
                            if x0 >= x1 {
                                continue;
                            }
                            for oy in y0..y1 {
                                let iy = oy + ky - g.pad;
                                let dst = &mut gp[iy * g.in_w + x0 + kx - g.pad..iy * g.in_w + x1 + kx - g.pad];
                                axpy(w, &dy[oy * ow + x0..oy * ow + x1], dst);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[s, j] = bias[j] + dot(weight[j, :], input[s, :])`.
pub fn linear_forward(n: usize, in_f: usize, out_f: usize, input: &[f32], weight: &[f32], bias: &[f32], out: &mut [f32]) {
    for s in 0..n {
        let x = &input[s * in_f..(s + 1) * in_f];
        for j in 0..out_f {
            out[s * out_f + j] = linear_unit(x, &weight[j * in_f..(j + 1) * in_f], bias[j]);
        }
    }
}

#[inline]
pub fn linear_unit(x: &[f32], row: &[f32], bias: f32) -> f32 {
    bias + dot(row, x)
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    n: usize,
    in_f: usize,
    out_f: usize,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    grad_w: &mut [f32],
    grad_b: &mut [f32],
    grad_in: Option<&mut [f32]>,
) {
    for s in 0..n {
        let x = &input[s * in_f..(s + 1) * in_f];
        for j in 0..out_f {
            let d = grad_out[s * out_f + j];
            grad_b[j] += d;
            axpy(d, x, &mut grad_w[j * in_f..(j + 1) * in_f]);
        }
    }
    if let Some(gi) = grad_in {
        gi.fill(0.0);
        for s in 0..n {
            let dst = &mut gi[s * in_f..(s + 1) * in_f];
            for j in 0..out_f {
                axpy(grad_out[s * out_f + j], &weight[j * in_f..(j + 1) * in_f], dst);
            }
        }
    }
}

/// Negative values become zero; NaN passes through unchanged.
#[inline]
pub fn relu(x: f32) -> f32 {
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

pub fn relu_backward(input: &[f32], grad_out: &[f32], grad_in: &mut [f32]) {
    for ((gi, &go), &x) in grad_in.iter_mut().zip(grad_out).zip(input) {
        *gi = if x > 0.0 { go } else { 0.0 };
    }
}

/// 2x2 stride-2 max pooling over `[channels, h, w]` planes, flooring odd sizes.
/// The first maximal element of a window wins; a NaN wins over any number.
pub fn maxpool_forward(planes: usize, h: usize, w: usize, input: &[f32], out: &mut [f32]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[pool_argmax(src, w, oy, ox)];
            }
        }
    }
}

#[inline]
fn pool_argmax(src: &[f32], w: usize, oy: usize, ox: usize) -> usize {
    let base = 2 * oy * w + 2 * ox;
    let cand = [base, base + 1, base + w, base + w + 1];
    let mut best = cand[0];
    if src[best].is_nan() {
        return best;
    }
    for &c in &cand[1..] {
        let v = src[c];
        if v.is_nan() {
            return c;
        }
        if v > src[best] {
            best = c;
        }
    }
    best
}

pub fn maxpool_backward(planes: usize, h: usize, w: usize, input: &[f32], grad_out: &[f32], grad_in: &mut [f32]) {
    let (oh, ow) = (h / 2, w / 2);
    grad_in.fill(0.0);
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let gi = &mut grad_in[p * h * w..(p + 1) * h * w];
        let go = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                gi[pool_argmax(src, w, oy, ox)] += go[oy * ow + ox];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_on_small_values() {
        let a: Vec<f32> = (0..21).map(|i| i as f32 * 0.5).collect();
        let b: Vec<f32> = (0..21).map(|i| 1.0 - i as f32 * 0.25).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        assert!((dot(&a, &b) as f64 - naive).abs() < 1e-4);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let g = ConvGeom {
            in_ch: 1,
            out_ch: 1,
            kernel: 3,
            pad: 1,
            in_h: 3,
            in_w: 4,
        };
        let x: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let mut filter = vec![0.0; 9];
        filter[4] = 1.0;
        let mut out = vec![0.0; 12];
        conv_channel(&g, &x, &filter, 0.0, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_matches_naive_padded_sum() {
        let g = ConvGeom {
            in_ch: 2,
            out_ch: 1,
            kernel: 3,
            pad: 1,
            in_h: 4,
            in_w: 5,
        };
        let x: Vec<f32> = (0..40).map(|v| ((v * 7) % 11) as f32 - 5.0).collect();
        let f: Vec<f32> = (0..18).map(|v| ((v * 5) % 7) as f32 - 3.0).collect();
        let mut out = vec![0.0; 20];
        conv_channel(&g, &x, &f, 0.5, &mut out);
        for oy in 0..4i64 {
            for ox in 0..5i64 {
                let mut s = 0.5f64;
                for ic in 0..2i64 {
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                            if (0..4).contains(&iy) && (0..5).contains(&ix) {
                                s += x[(ic * 20 + iy * 5 + ix) as usize] as f64 * f[(ic * 9 + ky * 3 + kx) as usize] as f64;
                            }
                        }
                    }
                }
                assert_eq!(out[(oy * 5 + ox) as usize] as f64, s);
            }
        }
    }

    #[test]
    fn relu_keeps_nan() {
        assert!(relu(f32::NAN).is_nan());
        assert_eq!(relu(-1.0), 0.0);
        assert_eq!(relu(2.0), 2.0);
    }

    #[test]
    fn maxpool_routes_each_gradient_once() {
        let x = vec![1.0, 3.0, 3.0, 0.0, 2.0, 2.0, -1.0, 5.0, 0.0, 0.0, 9.0, 9.0, 0.0, 0.0, 9.0, 9.0];
        let mut y = vec![0.0; 4];
        maxpool_forward(1, 4, 4, &x, &mut y);
        assert_eq!(y, vec![3.0, 5.0, 0.0, 9.0]);
        let go = vec![1.0, 2.0, 3.0, 4.0];
        let mut gi = vec![0.0; 16];
        maxpool_backward(1, 4, 4, &x, &go, &mut gi);
        assert_eq!(gi.iter().sum::<f32>(), 10.0);
        assert_eq!(gi.iter().filter(|&&v| v != 0.0).count(), 4);
        assert_eq!(gi[1], 1.0);
        assert_eq!(gi[7], 2.0);
        assert_eq!(gi[8], 3.0);
        assert_eq!(gi[10], 4.0);
    }
}
