//! Raw loops behind the taped primitives. All loops run in a fixed order so
//! results are bitwise reproducible.

/// Geometry of a stride-1, zero-padded 2-D cross-correlation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl Conv2dDims {
    /// Valid output range `[lo, hi)` along an axis of length `len` for tap `t`.
    #[inline]
    fn range(&self, t: usize, len: usize) -> (usize, usize, isize) {
        let d = t as isize - self.pad as isize;
        let lo = (-d).max(0) as usize;
        let hi = (len as isize - d).clamp(0, len as isize) as usize;
        (lo, hi.max(lo), d)
    }
}

pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], bias: &[f64], d: Conv2dDims) -> Vec<f64> {
    let plane = d.h * d.w;
    let mut out = vec![0.0; d.n * d.c_out * plane];
    for b in 0..d.n {
        for o in 0..d.c_out {
            let out_plane = &mut out[(b * d.c_out + o) * plane..][..plane];
            out_plane.fill(bias[o]);
            for i in 0..d.c_in {
                let in_plane = &x[(b * d.c_in + i) * plane..][..plane];
                for ky in 0..d.k {
                    let (y0, y1, dy) = d.range(ky, d.h);
                    for kx in 0..d.k {
                        let (x0, x1, dx) = d.range(kx, d.w);
                        let wv = kernel[((o * d.c_in + i) * d.k + ky) * d.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in y0..y1 {
                            let src = ((y as isize + dy) as usize) * d.w;
                            let orow = &mut out_plane[y * d.w + x0..y * d.w + x1];
                            let irow = &in_plane[(src as isize + x0 as isize + dx) as usize..][..x1 - x0];
                            for (o, i) in orow.iter_mut().zip(irow) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of the input given the output gradient.
pub(crate) fn conv2d_backward_input(g: &[f64], kernel: &[f64], d: Conv2dDims) -> Vec<f64> {
    let plane = d.h * d.w;
    let mut gx = vec![0.0; d.n * d.c_in * plane];
    for b in 0..d.n {
        for i in 0..d.c_in {
            let gin = &mut gx[(b * d.c_in + i) * plane..][..plane];
            for o in 0..d.c_out {
                let gout = &g[(b * d.c_out + o) * plane..][..plane];
                for ky in 0..d.k {
                    let (y0, y1, dy) = d.range(ky, d.h);
                    for kx in 0..d.k {
                        let (x0, x1, dx) = d.range(kx, d.w);
                        let wv = kernel[((o * d.c_in + i) * d.k + ky) * d.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in y0..y1 {
                            let dst = ((y as isize + dy) as usize) * d.w;
                            let grow = &gout[y * d.w + x0..y * d.w + x1];
                            let irow = &mut gin[(dst as isize + x0 as isize + dx) as usize..][..x1 - x0];
                            for (gi, go) in irow.iter_mut().zip(grow) {
                                *gi += wv * go;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradients of kernel and bias given the output gradient.
pub(crate) fn conv2d_backward_params(g: &[f64], x: &[f64], d: Conv2dDims) -> (Vec<f64>, Vec<f64>) {
    let plane = d.h * d.w;
    let mut gk = vec![0.0; d.c_out * d.c_in * d.k * d.k];
    let mut gb = vec![0.0; d.c_out];
    for b in 0..d.n {
        for o in 0..d.c_out {
            let gout = &g[(b * d.c_out + o) * plane..][..plane];
            gb[o] += gout.iter().sum::<f64>();
            for i in 0..d.c_in {
                let in_plane = &x[(b * d.c_in + i) * plane..][..plane];
                for ky in 0..d.k {
                    let (y0, y1, dy) = d.range(ky, d.h);
                    for kx in 0..d.k {
                        let (x0, x1, dx) = d.range(kx, d.w);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let src = ((y as isize + dy) as usize) * d.w;
                            let grow = &gout[y * d.w + x0..y * d.w + x1];
                            let irow = &in_plane[(src as isize + x0 as isize + dx) as usize..][..x1 - x0];
                            acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gk[((o * d.c_in + i) * d.k + ky) * d.k + kx] += acc;
                    }
                }
            }
        }
    }
    (gk, gb)
}

/// Geometry of a stride-1, zero-padded 1-D cross-correlation over `[N, C, L]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv1dDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub k: usize,
    pub pad: usize,
}

impl Conv1dDims {
    fn taps(&self) -> impl Iterator<Item = (usize, isize, usize, usize)> + '_ {
        (0..self.k).map(move |t| {
            let d = t as isize - self.pad as isize;
            let lo = (-d).max(0) as usize;
            let hi = ((self.len as isize - d).clamp(0, self.len as isize) as usize).max(lo);
            (t, d, lo, hi)
        })
    }
}

pub(crate) fn conv1d_forward(x: &[f64], kernel: &[f64], d: Conv1dDims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.c_out * d.len];
    for b in 0..d.n {
        for o in 0..d.c_out {
            let orow = &mut out[(b * d.c_out + o) * d.len..][..d.len];
            for i in 0..d.c_in {
                let irow = &x[(b * d.c_in + i) * d.len..][..d.len];
                for (t, dd, lo, hi) in d.taps() {
                    let wv = kernel[(o * d.c_in + i) * d.k + t];
                    for p in lo..hi {
                        orow[p] += wv * irow[(p as isize + dd) as usize];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv1d_backward(g: &[f64], x: &[f64], kernel: &[f64], d: Conv1dDims) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    for b in 0..d.n {
        for o in 0..d.c_out {
            let grow = &g[(b * d.c_out + o) * d.len..][..d.len];
            for i in 0..d.c_in {
                let base = (b * d.c_in + i) * d.len;
                for (t, dd, lo, hi) in d.taps() {
                    let widx = (o * d.c_in + i) * d.k + t;
                    let wv = kernel[widx];
                    let mut acc = 0.0;
                    for p in lo..hi {
                        let src = base + (p as isize + dd) as usize;
                        acc += grow[p] * x[src];
                        gx[src] += wv * grow[p];
                    }
                    gk[widx] += acc;
                }
            }
        }
    }
    (gx, gk)
}

/// Non-overlapping 2x2 mean over the two trailing axes of `planes` planes.
pub(crate) fn avgpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        for y in 0..ho {
            let r0 = &src[2 * y * w..][..w];
            let r1 = &src[(2 * y + 1) * w..][..w];
            for xx in 0..wo {
                let s = (r0[2 * xx] + r0[2 * xx + 1]) + (r1[2 * xx] + r1[2 * xx + 1]);
                out.push(0.25 * s);
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                gx[(p * h + y) * w + xx] = 0.25 * g[(p * ho + y / 2) * wo + xx / 2];
            }
        }
    }
    gx
}

pub(crate) fn upsample2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        for y in 0..ho {
            for xx in 0..wo {
                out[(p * ho + y) * wo + xx] = x[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                let r0 = (p * ho + 2 * y) * wo + 2 * xx;
                let r1 = r0 + wo;
                gx[(p * h + y) * w + xx] = (g[r0] + g[r0 + 1]) + (g[r1] + g[r1 + 1]);
            }
        }
    }
    gx
}
