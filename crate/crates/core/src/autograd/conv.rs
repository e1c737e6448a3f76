//! Direct 2-D convolution kernels (NCHW, weights `[out, in/groups, kh, kw]`).

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dCfg {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Self::new(1, 0, 1, 1)
    }
}

/// Output positions `o` in `[lo, hi)` with `0 <= o * stride + offset < input`.
fn valid_range(out: usize, input: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let limit = input as isize - offset;
    if limit <= 0 {
        return (0, 0);
    }
    let hi = (limit as usize).div_ceil(stride).min(out);
    (lo.min(hi), hi)
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub cfg: Conv2dCfg,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], cfg: Conv2dCfg) -> Self {
        let (n, cin, h, wi) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
        assert_eq!(cin % cfg.groups, 0, "input channels not divisible by groups");
        assert_eq!(cout % cfg.groups, 0, "output channels not divisible by groups");
        assert_eq!(cin / cfg.groups, cin_g, "weight/input channel mismatch");
        Self {
            n,
            cin,
            h,
            w: wi,
            cout,
            kh,
            kw,
            ho: cfg.out_size(h, kh),
            wo: cfg.out_size(wi, kw),
            cfg,
        }
    }

    /// Visits every (output plane, input plane, weight index, row span) tuple.
    /// `f(out_base, in_base, w_idx, oy, iy, ox0, ox1, ix0)` with unit-stride
    /// spans expressed by their starting column.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, isize)) {
        let g = self.cfg.groups;
        let cin_g = self.cin / g;
        let cout_g = self.cout / g;
        let s = self.cfg.stride;
        let pad = self.cfg.padding as isize;
        let dil = self.cfg.dilation as isize;
        for n in 0..self.n {
            for oc in 0..self.cout {
                let grp = oc / cout_g;
                let out_base = (n * self.cout + oc) * self.ho * self.wo;
                for icg in 0..cin_g {
                    let ic = grp * cin_g + icg;
                    let in_base = (n * self.cin + ic) * self.h * self.w;
                    for ky in 0..self.kh {
                        let offy = ky as isize * dil - pad;
                        let (oy0, oy1) = valid_range(self.ho, self.h, s, offy);
                        for kx in 0..self.kw {
                            let offx = kx as isize * dil - pad;
                            let (ox0, ox1) = valid_range(self.wo, self.w, s, offx);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let widx = ((oc * cin_g + icg) * self.kh + ky) * self.kw + kx;
                            for oy in oy0..oy1 {
                                let iy = (oy * s) as isize + offy;
                                f(out_base, in_base, widx, oy, iy as usize, ox0, ox1, offx);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    geom: &ConvGeom,
) -> Vec<f64> {
    let plane = geom.ho * geom.wo;
    let mut out = vec![0.0; geom.n * geom.cout * plane];
    if let Some(b) = bias {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(b[i % geom.cout]);
        }
    }
    let (s, w, wo) = (geom.cfg.stride, geom.w, geom.wo);
    geom.for_each_tap(|ob, ib, widx, oy, iy, ox0, ox1, offx| {
        let wv = weight[widx];
        let orow = &mut out[ob + oy * wo..ob + (oy + 1) * wo];
        let irow = &x[ib + iy * w..ib + (iy + 1) * w];
        if s == 1 {
            let ix0 = (ox0 as isize + offx) as usize;
            for (o, i) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..ix0 + (ox1 - ox0)]) {
                *o += wv * i;
            }
        } else {
            for ox in ox0..ox1 {
                orow[ox] += wv * irow[((ox * s) as isize + offx) as usize];
            }
        }
    });
    out
}

/// Gradients with respect to input and weight.
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    geom: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; weight.len()];
    let (s, w, wo) = (geom.cfg.stride, geom.w, geom.wo);
    geom.for_each_tap(|ob, ib, widx, oy, iy, ox0, ox1, offx| {
        let wv = weight[widx];
        let grow = &grad_out[ob + oy * wo..ob + (oy + 1) * wo];
        let irow = &x[ib + iy * w..ib + (iy + 1) * w];
        let gxrow = &mut gx[ib + iy * w..ib + (iy + 1) * w];
        let mut acc = 0.0;
        if s == 1 {
            let ix0 = (ox0 as isize + offx) as usize;
            let span = ox1 - ox0;
            for ((g, i), gxv) in grow[ox0..ox1]
                .iter()
                .zip(&irow[ix0..ix0 + span])
                .zip(gxrow[ix0..ix0 + span].iter_mut())
            {
                acc += g * i;
                *gxv += wv * g;
            }
        } else {
            for ox in ox0..ox1 {
                let ix = ((ox * s) as isize + offx) as usize;
                acc += grow[ox] * irow[ix];
                gxrow[ix] += wv * grow[ox];
            }
        }
        gw[widx] += acc;
    });
    (gx, gw)
}

pub(crate) fn bias_grad(grad_out: &[f64], cout: usize, plane: usize) -> Vec<f64> {
    let mut gb = vec![0.0; cout];
    for (i, chunk) in grad_out.chunks(plane).enumerate() {
        gb[i % cout] += chunk.iter().sum::<f64>();
    }
    gb
}
