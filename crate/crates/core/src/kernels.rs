//! Raw f64 compute kernels shared by the autodiff tape and the inference
//! path. Convolutions use same-padding with zeros, stride 1 or 2, odd
//! kernels, and skip zero-valued inputs in the innermost accumulation so
//! sparse spike tensors cost roughly their firing rate.
//!
//! Layouts (row-major):
//!   activations  [T, H, W, C]
//!   dense conv   [Kh, Kw, Cin, Cout]
//!   depthwise    [Kh, Kw, C]
//!   matmul       a[m, k] * b[k, n]

use rayon::prelude::*;

pub fn conv_out_dim(h: usize, stride: usize) -> usize {
    // same padding: ceil(h / stride)
    h.div_ceil(stride)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_dense_fwd(
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
) -> Vec<f64> {
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    let pad = (k - 1) / 2;
    let mut y = vec![0.0; t * oh * ow * cout];
    y.par_chunks_mut(ow * cout)
        .enumerate()
        .for_each(|(row, yrow)| {
            let ti = row / oh;
            let ohi = row % oh;
            for owi in 0..ow {
                let acc = &mut yrow[owi * cout..(owi + 1) * cout];
                if let Some(b) = bias {
                    acc.copy_from_slice(b);
                }
                for kh in 0..k {
                    let ih = (ohi * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = (owi * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let xoff = (((ti * h + ih as usize) * w) + iw as usize) * cin;
                        let xrow = &x[xoff..xoff + cin];
                        let wslab = &wgt[(kh * k + kw) * cin * cout..];
                        for (ci, &xv) in xrow.iter().enumerate() {
                            if xv != 0.0 {
                                let wrow = &wslab[ci * cout..ci * cout + cout];
                                for (a, &wv) in acc.iter_mut().zip(wrow) {
                                    *a += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_dense_bwd(
    x: &[f64],
    t: usize,
    h: usize,
    w: usize,
    cin: usize,
    wgt: &[f64],
    k: usize,
    stride: usize,
    cout: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    let pad = (k - 1) / 2;
    let mut dx = vec![0.0; t * h * w * cin];
    let mut dw = vec![0.0; k * k * cin * cout];
    let mut db = vec![0.0; cout];
    for ti in 0..t {
        for ohi in 0..oh {
            for owi in 0..ow {
                let dyrow = &dy[((ti * oh + ohi) * ow + owi) * cout..][..cout];
                for (o, &g) in dyrow.iter().enumerate() {
                    db[o] += g;
                    let _ = o;
                }
                for kh in 0..k {
                    let ih = (ohi * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = (owi * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let xoff = (((ti * h + ih as usize) * w) + iw as usize) * cin;
                        let woff = (kh * k + kw) * cin * cout;
                        for ci in 0..cin {
                            let wrow = &wgt[woff + ci * cout..woff + ci * cout + cout];
                            let mut dot = 0.0;
                            for (a, &wv) in dyrow.iter().zip(wrow) {
                                dot += a * wv;
                            }
                            dx[xoff + ci] += dot;
                            let xv = x[xoff + ci];
                            if xv != 0.0 {
                                let dwrow = &mut dw[woff + ci * cout..woff + ci * cout + cout];
                                for (d, &g) in dwrow.iter_mut().zip(dyrow) {
                                    *d += xv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_depthwise_fwd(
    x: &[f64],
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    wgt: &[f64],
    bias: Option<&[f64]>,
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    let pad = (k - 1) / 2;
    let mut y = vec![0.0; t * oh * ow * c];
    y.par_chunks_mut(ow * c)
        .enumerate()
        .for_each(|(row, yrow)| {
            let ti = row / oh;
            let ohi = row % oh;
            for owi in 0..ow {
                let acc = &mut yrow[owi * c..(owi + 1) * c];
                if let Some(b) = bias {
                    acc.copy_from_slice(b);
                }
                for kh in 0..k {
                    let ih = (ohi * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = (owi * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let xrow = &x[(((ti * h + ih as usize) * w) + iw as usize) * c..][..c];
                        let wrow = &wgt[(kh * k + kw) * c..][..c];
                        for ((a, &xv), &wv) in acc.iter_mut().zip(xrow).zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        });
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_depthwise_bwd(
    x: &[f64],
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    wgt: &[f64],
    k: usize,
    stride: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    let pad = (k - 1) / 2;
    let mut dx = vec![0.0; t * h * w * c];
    let mut dw = vec![0.0; k * k * c];
    let mut db = vec![0.0; c];
    for ti in 0..t {
        for ohi in 0..oh {
            for owi in 0..ow {
                let dyrow = &dy[((ti * oh + ohi) * ow + owi) * c..][..c];
                for (o, &g) in dyrow.iter().enumerate() {
                    db[o] += g;
                }
                for kh in 0..k {
                    let ih = (ohi * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = (owi * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let xoff = (((ti * h + ih as usize) * w) + iw as usize) * c;
                        let woff = (kh * k + kw) * c;
                        for ci in 0..c {
                            dx[xoff + ci] += dyrow[ci] * wgt[woff + ci];
                            dw[woff + ci] += dyrow[ci] * x[xoff + ci];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn matmul_fwd(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != 0.0 {
                let brow = &b[kk * n..kk * n + n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    });
    c
}

/// Gradients of `c = a @ b` with respect to both operands.
pub fn matmul_bwd(
    a: &[f64],
    m: usize,
    k: usize,
    b: &[f64],
    n: usize,
    dc: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; m * k];
    da.par_chunks_mut(k).enumerate().for_each(|(i, darow)| {
        let dcrow = &dc[i * n..i * n + n];
        for (kk, d) in darow.iter_mut().enumerate() {
            let brow = &b[kk * n..kk * n + n];
            let mut dot = 0.0;
            for (&g, &bv) in dcrow.iter().zip(brow) {
                dot += g * bv;
            }
            *d = dot;
        }
    });
    let mut db = vec![0.0; k * n];
    db.par_chunks_mut(n).enumerate().for_each(|(kk, dbrow)| {
        for i in 0..m {
            let av = a[i * k + kk];
            if av != 0.0 {
                let dcrow = &dc[i * n..i * n + n];
                for (d, &g) in dbrow.iter_mut().zip(dcrow) {
                    *d += av * g;
                }
            }
        }
    });
    (da, db)
}

pub fn transpose2d(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub fn upsample_nearest2_fwd(x: &[f64], t: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut y = vec![0.0; t * 4 * h * w * c];
    let (oh, ow) = (2 * h, 2 * w);
    for ti in 0..t {
        for hi in 0..oh {
            for wi in 0..ow {
                let src = (((ti * h + hi / 2) * w) + wi / 2) * c;
                let dst = (((ti * oh + hi) * ow) + wi) * c;
                y[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    y
}

pub fn upsample_nearest2_bwd(dy: &[f64], t: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut dx = vec![0.0; t * h * w * c];
    let (oh, ow) = (2 * h, 2 * w);
    for ti in 0..t {
        for hi in 0..oh {
            for wi in 0..ow {
                let dst = (((ti * h + hi / 2) * w) + wi / 2) * c;
                let src = (((ti * oh + hi) * ow) + wi) * c;
                for ci in 0..c {
                    dx[dst + ci] += dy[src + ci];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::conv2d_naive;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(t, h, w, cin, cout, k, stride) in &[
            (1, 3, 3, 2, 3, 3, 1),
            (2, 5, 4, 3, 2, 3, 2),
            (1, 6, 6, 2, 4, 7, 2),
            (2, 4, 4, 3, 3, 1, 1),
        ] {
            let x: Vec<f64> = (0..t * h * w * cin)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let wgt: Vec<f64> = (0..k * k * cin * cout)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let fast = conv2d_dense_fwd(&x, t, h, w, cin, &wgt, Some(&b), k, stride, cout);
            let slow = conv2d_naive(&x, t, h, w, cin, &wgt, Some(&b), k, stride, cout, false);
            for (a, s) in fast.iter().zip(&slow) {
                assert!((a - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depthwise_conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, h, w, c, k) = (2, 5, 5, 3, 7);
        let x: Vec<f64> = (0..t * h * w * c)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let wgt: Vec<f64> = (0..k * k * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = conv2d_depthwise_fwd(&x, t, h, w, c, &wgt, None, k, 1);
        let slow = conv2d_naive(&x, t, h, w, c, &wgt, None, k, 1, c, true);
        for (a, s) in fast.iter().zip(&slow) {
            assert!((a - s).abs() < 1e-12);
        }
    }

    #[test]
    fn stride2_output_index_math() {
        // out[h] depends on in[2h + kh - pad]; checked against the naive oracle
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, h, w, cin, cout, k) = (4, 32, 32, 3, 5, 7);
        let x: Vec<f64> = (0..t * h * w * cin)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let wgt: Vec<f64> = (0..k * k * cin * cout)
            .map(|_| rng.gen_range(-0.2..0.2))
            .collect();
        let y = conv2d_dense_fwd(&x, t, h, w, cin, &wgt, None, k, 2, cout);
        assert_eq!(y.len(), t * 16 * 16 * cout);
        let slow = conv2d_naive(&x, t, h, w, cin, &wgt, None, k, 2, cout, false);
        for (a, s) in y.iter().zip(&slow) {
            assert!((a - s).abs() < 1e-10);
        }
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul_fwd(&a, 2, 3, &b, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn upsample_roundtrip_gradient() {
        // backward of nearest-neighbor x2 is a 2x2 sum pool
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = upsample_nearest2_fwd(&x, 1, 2, 2, 1);
        assert_eq!(y.len(), 16);
        assert_eq!(y[0], 1.0);
        assert_eq!(y[1], 1.0);
        assert_eq!(y[5], 1.0);
        let dy = vec![1.0; 16];
        let dx = upsample_nearest2_bwd(&dy, 1, 2, 2, 1);
        assert_eq!(dx, vec![4.0, 4.0, 4.0, 4.0]);
    }
}
