//! Convolution kernels on raw row-major buffers.
//!
//! Causal convolution anchors output `t` at input index `t*stride + stride - 1`
//! (the last element of its stride window) and reaches back over the kernel
//! taps, zero-padding to the left.

use super::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub t_in: usize,
    pub t_out: usize,
}

impl ConvGeom {
    /// How far tap `kk` looks back from the anchor.
    #[inline]
    fn shift(&self, kk: usize) -> usize {
        (self.kernel - 1 - kk) * self.dilation
    }

    /// First output index whose tap `kk` lands inside the input.
    #[inline]
    fn first_valid(&self, shift: usize) -> usize {
        let s = self.stride;
        if shift <= s - 1 {
            0
        } else {
            (shift - (s - 1)).div_ceil(s)
        }
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * self.cin * self.kernel * self.t_out) as u64
    }
}

pub(crate) fn conv1d_forward<S: Scalar>(x: &[S], w: &[S], bias: &[S], g: &ConvGeom) -> Vec<S> {
    let mut out = vec![S::zero(); g.batch * g.cout * g.t_out];
    for b in 0..g.batch {
        for o in 0..g.cout {
            let row = &mut out[(b * g.cout + o) * g.t_out..][..g.t_out];
            row.fill(bias[o]);
            for i in 0..g.cin {
                let xrow = &x[(b * g.cin + i) * g.t_in..][..g.t_in];
                for kk in 0..g.kernel {
                    let wv = w[(o * g.cin + i) * g.kernel + kk];
                    let shift = g.shift(kk);
                    let t0 = g.first_valid(shift);
                    if t0 >= g.t_out {
                        continue;
                    }
                    if g.stride == 1 {
                        for (y, &xv) in row[t0..].iter_mut().zip(xrow) {
                            *y += wv * xv;
                        }
                    } else {
                        for t in t0..g.t_out {
                            row[t] += wv * xrow[t * g.stride + g.stride - 1 - shift];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients. Any of the three outputs
/// may be skipped by passing `None`.
pub(crate) fn conv1d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    g: &ConvGeom,
    mut dx: Option<&mut [S]>,
    mut dw: Option<&mut [S]>,
    db: Option<&mut [S]>,
) {
    if let Some(db) = db {
        for b in 0..g.batch {
            for o in 0..g.cout {
                let row = &dy[(b * g.cout + o) * g.t_out..][..g.t_out];
                db[o] += row.iter().copied().sum::<S>();
            }
        }
    }
    for b in 0..g.batch {
        for o in 0..g.cout {
            let dyrow = &dy[(b * g.cout + o) * g.t_out..][..g.t_out];
            for i in 0..g.cin {
                let xoff = (b * g.cin + i) * g.t_in;
                for kk in 0..g.kernel {
                    let widx = (o * g.cin + i) * g.kernel + kk;
                    let shift = g.shift(kk);
                    let t0 = g.first_valid(shift);
                    if t0 >= g.t_out {
                        continue;
                    }
                    if g.stride == 1 {
                        let n = g.t_out - t0;
                        let src = &x[xoff..][..n];
                        if let Some(dw) = dw.as_deref_mut() {
                            let mut acc = S::zero();
                            for (&d, &xv) in dyrow[t0..].iter().zip(src) {
                                acc += d * xv;
                            }
                            dw[widx] += acc;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let wv = w[widx];
                            for (dxv, &d) in dx[xoff..][..n].iter_mut().zip(&dyrow[t0..]) {
                                *dxv += wv * d;
                            }
                        }
                    } else {
                        let wv = w[widx];
                        let mut acc = S::zero();
                        for t in t0..g.t_out {
                            let src = xoff + t * g.stride + g.stride - 1 - shift;
                            acc += dyrow[t] * x[src];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[src] += wv * dyrow[t];
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping transposed convolution: kernel width equals the stride,
/// weight layout `[cin, cout, stride]`.
pub(crate) fn conv_transpose1d_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    bias: &[S],
    g: &ConvGeom,
) -> Vec<S> {
    let s = g.stride;
    let mut out = vec![S::zero(); g.batch * g.cout * g.t_out];
    for b in 0..g.batch {
        for o in 0..g.cout {
            let row = &mut out[(b * g.cout + o) * g.t_out..][..g.t_out];
            row.fill(bias[o]);
            for i in 0..g.cin {
                let xrow = &x[(b * g.cin + i) * g.t_in..][..g.t_in];
                for j in 0..s {
                    let wv = w[(i * g.cout + o) * s + j];
                    for (t, &xv) in xrow.iter().enumerate() {
                        row[t * s + j] += wv * xv;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose1d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    g: &ConvGeom,
    mut dx: Option<&mut [S]>,
    mut dw: Option<&mut [S]>,
    db: Option<&mut [S]>,
) {
    let s = g.stride;
    if let Some(db) = db {
        for b in 0..g.batch {
            for o in 0..g.cout {
                let row = &dy[(b * g.cout + o) * g.t_out..][..g.t_out];
                db[o] += row.iter().copied().sum::<S>();
            }
        }
    }
    for b in 0..g.batch {
        for o in 0..g.cout {
            let dyrow = &dy[(b * g.cout + o) * g.t_out..][..g.t_out];
            for i in 0..g.cin {
                let xoff = (b * g.cin + i) * g.t_in;
                for j in 0..s {
                    let widx = (i * g.cout + o) * s + j;
                    let wv = w[widx];
                    let mut acc = S::zero();
                    for t in 0..g.t_in {
                        let d = dyrow[t * s + j];
                        acc += d * x[xoff + t];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xoff + t] += wv * d;
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}
