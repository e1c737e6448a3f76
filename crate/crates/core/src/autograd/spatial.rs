//! Pooling, resampling and channel plumbing kernels.

use crate::tensor::Tensor;

pub(crate) fn max_pool3_forward(x: &Tensor, stride: usize) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for dy in 0..3 {
                    let iy = (oy * stride + dy) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let ix = (ox * stride + dx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if xd[idx] > best || best_idx == usize::MAX {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (Tensor::new(&[n, c, ho, wo], out), argmax)
}

pub(crate) fn subsample2_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                out.push(xd[plane * h * w + 2 * oy * w + 2 * ox]);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub(crate) fn subsample2_backward(x: &Tensor, g: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = x.dims4();
    let (_, _, ho, wo) = g.dims4();
    let gd = g.data();
    let mut gx = vec![0.0; x.numel()];
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                gx[plane * h * w + 2 * oy * w + 2 * ox] = gd[(plane * ho + oy) * wo + ox];
            }
        }
    }
    gx
}

pub(crate) fn shift_crop_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h.saturating_sub(1) {
            for xx in 0..w.saturating_sub(1) {
                out[base + y * w + xx] = xd[base + (y + 1) * w + xx + 1];
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

pub(crate) fn shift_crop_backward(g: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = g.dims4();
    let gd = g.data();
    let mut gx = vec![0.0; g.numel()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h.saturating_sub(1) {
            for xx in 0..w.saturating_sub(1) {
                gx[base + (y + 1) * w + xx + 1] = gd[base + y * w + xx];
            }
        }
    }
    gx
}

pub(crate) fn global_avg_pool_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let out = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(&[n, c, 1, 1], out)
}

pub(crate) fn global_avg_pool_backward(x: &Tensor, g: &Tensor) -> Vec<f64> {
    let (_, _, h, w) = x.dims4();
    let plane = h * w;
    g.data()
        .iter()
        .flat_map(|&gv| std::iter::repeat(gv / plane as f64).take(plane))
        .collect()
}

/// Source index pair and interpolation weight for each output coordinate.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_forward(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let base = plane * h * w;
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let top = xd[base + y0 * w + x0] * (1.0 - lx) + xd[base + y0 * w + x1] * lx;
                let bot = xd[base + y1 * w + x0] * (1.0 - lx) + xd[base + y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

pub(crate) fn bilinear_backward(x: &Tensor, g: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = x.dims4();
    let (_, _, out_h, out_w) = g.dims4();
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let gd = g.data();
    let mut gx = vec![0.0; x.numel()];
    for plane in 0..n * c {
        let base = plane * h * w;
        let gbase = plane * out_h * out_w;
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = gd[gbase + oy * out_w + ox];
                gx[base + y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                gx[base + y0 * w + x1] += gv * (1.0 - ly) * lx;
                gx[base + y1 * w + x0] += gv * ly * (1.0 - lx);
                gx[base + y1 * w + x1] += gv * ly * lx;
            }
        }
    }
    gx
}

pub(crate) fn concat_channels_forward(xs: &[&Tensor]) -> Tensor {
    let (n, _, h, w) = xs[0].dims4();
    let plane = h * w;
    let total_c: usize = xs
        .iter()
        .map(|t| {
            let (tn, tc, th, tw) = t.dims4();
            assert_eq!((tn, th, tw), (n, h, w), "concat spatial/batch mismatch");
            tc
        })
        .sum();
    let mut out = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for t in xs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::new(&[n, total_c, h, w], out)
}

pub(crate) fn concat_channels_backward(shapes: &[&[usize]], g: &Tensor) -> Vec<Vec<f64>> {
    let (n, _, h, w) = g.dims4();
    let plane = h * w;
    let gd = g.data();
    let mut parts: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    let mut offset = 0;
    for _ in 0..n {
        for (s, part) in shapes.iter().zip(parts.iter_mut()) {
            let len = s[1] * plane;
            part.extend_from_slice(&gd[offset..offset + len]);
            offset += len;
        }
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_keeps_spatial_size_at_stride_one() {
        let x = Tensor::new(&[1, 1, 3, 3], (0..9).map(f64::from).collect());
        let (y, _) = max_pool3_forward(&x, 1);
        assert_eq!(y.data(), &[4.0, 5.0, 5.0, 7.0, 8.0, 8.0, 7.0, 8.0, 8.0]);
        let (y2, _) = max_pool3_forward(&x, 2);
        assert_eq!(y2.shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x = Tensor::new(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(bilinear_forward(&x, 2, 3), x);
    }

    #[test]
    fn bilinear_doubling_matches_half_pixel_convention() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![0.0, 4.0]);
        let y = bilinear_forward(&x, 1, 4);
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 4.0]);
    }
}
