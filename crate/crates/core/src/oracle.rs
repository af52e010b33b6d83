//! Independent test oracles: deliberately naive re-implementations used to
//! cross-check the optimized paths. Nothing here is called by production
//! code; the implementations stay loop-literal so they can be audited at a
//! glance.

use crate::kernels::conv_out_dim;

/// Direct nested-loop convolution (same padding). Per output element the
/// accumulation order is (kh, kw, ci), matching the canonical kernel order so
/// comparisons can be exact in double precision.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    x: &[f64],
    t: usize,
    h: usize,
    w: usize,
    cin: usize,
    wgt: &[f64],
    bias: Option<&[f64]>,
    k: usize,
    stride: usize,
    cout: usize,
    depthwise: bool,
) -> Vec<f64> {
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    let pad = (k - 1) / 2;
    let mut y = vec![0.0; t * oh * ow * cout];
    for ti in 0..t {
        for ohi in 0..oh {
            for owi in 0..ow {
                for o in 0..cout {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for kh in 0..k {
                        for kw in 0..k {
                            let ih = (ohi * stride + kh) as isize - pad as isize;
                            let iw = (owi * stride + kw) as isize - pad as isize;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                continue;
                            }
                            let xoff = (((ti * h + ih as usize) * w) + iw as usize) * cin;
                            if depthwise {
                                acc += x[xoff + o] * wgt[(kh * k + kw) * cin + o];
                            } else {
                                for ci in 0..cin {
                                    acc +=
                                        x[xoff + ci] * wgt[((kh * k + kw) * cin + ci) * cout + o];
                                }
                            }
                        }
                    }
                    y[((ti * oh + ohi) * ow + owi) * cout + o] = acc;
                }
            }
        }
    }
    y
}

/// Nearest-neighbor x2 upsampling, loop-literal.
pub fn upsample2_naive(x: &[f64], t: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut y = vec![0.0; t * 2 * h * 2 * w * c];
    for ti in 0..t {
        for hi in 0..2 * h {
            for wi in 0..2 * w {
                for ci in 0..c {
                    y[(((ti * 2 * h + hi) * 2 * w) + wi) * c + ci] =
                        x[(((ti * h + hi / 2) * w) + wi / 2) * c + ci];
                }
            }
        }
    }
    y
}
