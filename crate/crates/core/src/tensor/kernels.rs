//! Raw loops over `f64` slices behind the convolution and matrix operations.
//!
//! The three convolution kernels are the partial derivatives of one trilinear
//! form `T(x, k, g) = Σ g[o,i,j] · k[o,c,u,v] · x[c, i·s+u−p, j·s+v−p]`, which
//! is what lets each one's derivative be written with the other two.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Input coordinate touched by output position `o` and kernel tap `t`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn conv2d(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.c_out * oh * ow];
    for o in 0..g.c_out {
        for c in 0..g.c_in {
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let kval = k[((o * g.c_in + c) * g.kh + u) * g.kw + v];
                    for i in 0..oh {
                        let Some(r) = g.src(i, u, g.h) else { continue };
                        let xrow = &x[(c * g.h + r) * g.w..(c * g.h + r + 1) * g.w];
                        let orow = &mut out[(o * oh + i) * ow..(o * oh + i + 1) * ow];
                        for (j, acc) in orow.iter_mut().enumerate() {
                            if let Some(col) = g.src(j, v, g.w) {
                                *acc += kval * xrow[col];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of the convolution output wrt its input, given upstream `gy`.
pub(crate) fn conv2d_input_grad(gy: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for o in 0..g.c_out {
        for c in 0..g.c_in {
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let kval = k[((o * g.c_in + c) * g.kh + u) * g.kw + v];
                    for i in 0..oh {
                        let Some(r) = g.src(i, u, g.h) else { continue };
                        for j in 0..ow {
                            if let Some(col) = g.src(j, v, g.w) {
                                out[(c * g.h + r) * g.w + col] += kval * gy[(o * oh + i) * ow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of the convolution output wrt its kernel, given upstream `gy`.
pub(crate) fn conv2d_kernel_grad(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.c_out * g.c_in * g.kh * g.kw];
    for o in 0..g.c_out {
        for c in 0..g.c_in {
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let mut acc = 0.0;
                    for i in 0..oh {
                        let Some(r) = g.src(i, u, g.h) else { continue };
                        for j in 0..ow {
                            if let Some(col) = g.src(j, v, g.w) {
                                acc += gy[(o * oh + i) * ow + j] * x[(c * g.h + r) * g.w + col];
                            }
                        }
                    }
                    out[((o * g.c_in + c) * g.kh + u) * g.kw + v] = acc;
                }
            }
        }
    }
    out
}

/// `W v` for row-major `W` of shape `rows × cols`.
pub(crate) fn matvec(w: &[f64], v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `Wᵀ u` for row-major `W` of shape `rows × cols`.
pub(crate) fn mattvec(w: &[f64], u: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let ur = u[r];
        for (acc, wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *acc += ur * wv;
        }
    }
    out
}

pub(crate) fn outer(u: &[f64], v: &[f64]) -> Vec<f64> {
    u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect()
}
