//! 3x3x3 convolution (stride 1 or 2, zero padding 1) and pointwise 1x1x1
//! convolution over [C, D, H, W] volumes, cross-correlation convention.
//!
//! Kernels are written as shifted-row accumulations so the inner loops run
//! over contiguous W-slices, and parallelize over the axis each thread owns
//! exclusively — results are bit-identical for any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{accum, grad_buf, Node, Record, Tape, Var};
use crate::tensor::Tensor;

const K: usize = 3;
const PAD: usize = 1;

pub(crate) fn conv_out_extent(extent: usize, stride: usize) -> usize {
    (extent + 2 * PAD - K) / stride + 1
}

struct ConvDims {
    cin: usize,
    cout: usize,
    din: [usize; 3],
    dout: [usize; 3],
    stride: usize,
}

fn conv_dims<T: Scalar>(tape: &Tape<T>, x: Var, w: Var, stride: usize) -> Result<ConvDims> {
    let sx = tape.value(x).shape().clone();
    let sw = tape.value(w).shape().clone();
    if sx.rank() != 4 {
        return Err(Error::shape("conv3d", format!("input {sx} (need [C,D,H,W])")));
    }
    if sw.rank() != 5 || sw[2] != K || sw[3] != K || sw[4] != K {
        return Err(Error::shape("conv3d", format!("kernel {sw} (need [Co,Ci,3,3,3])")));
    }
    if sx[0] != sw[1] {
        return Err(Error::shape("conv3d", format!("input channels: {sx} vs kernel {sw}")));
    }
    if sx[1] == 0 || sx[2] == 0 || sx[3] == 0 {
        return Err(Error::shape("conv3d", format!("zero spatial extent in {sx}")));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArgument(format!("conv3d stride must be 1 or 2, got {stride}")));
    }
    let din = [sx[1], sx[2], sx[3]];
    let dout = [
        conv_out_extent(din[0], stride),
        conv_out_extent(din[1], stride),
        conv_out_extent(din[2], stride),
    ];
    Ok(ConvDims { cin: sx[0], cout: sw[0], din, dout, stride })
}

/// 3D convolution with 3x3x3 kernel, padding 1.
pub fn conv3d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    stride: usize,
) -> Result<Var> {
    let dims = conv_dims(tape, x, w, stride)?;
    if let Some(b) = bias {
        let sb = tape.value(b).shape();
        if sb.rank() != 1 || sb[0] != dims.cout {
            return Err(Error::shape("conv3d", format!("bias {sb} vs {} out channels", dims.cout)));
        }
    }
    let out_spatial = dims.dout[0] * dims.dout[1] * dims.dout[2];
    let mut data = vec![T::zero(); dims.cout * out_spatial];
    {
        let xv = tape.value(x).data();
        let wv = tape.value(w).data();
        let bv = bias.map(|b| tape.value(b).data().to_vec());
        data.par_chunks_mut(out_spatial).enumerate().for_each(|(co, out_c)| {
            if let Some(bv) = &bv {
                out_c.fill(bv[co]);
            }
            for ci in 0..dims.cin {
                let x_c = &xv[ci * dims.din[0] * dims.din[1] * dims.din[2]..];
                let w_c = &wv[(co * dims.cin + ci) * K * K * K..(co * dims.cin + ci + 1) * K * K * K];
                accumulate_taps(out_c, x_c, w_c, &dims.din, &dims.dout, dims.stride);
            }
        });
    }
    let flops = 2 * (dims.cout * dims.cin * K * K * K * out_spatial) as u64
        + if bias.is_some() { (dims.cout * out_spatial) as u64 } else { 0 };
    tape.add_flops(flops);
    let t = Tensor::from_vec([dims.cout, dims.dout[0], dims.dout[1], dims.dout[2]], data)?;
    let out = tape.push_node(t);
    tape.push_record(Record::Conv3d { x, w, bias, stride, out });
    Ok(out)
}

/// out[od,oh,ow] += sum_k w[k] * x[od*s+kd-1, oh*s+kh-1, ow*s+kw-1].
fn accumulate_taps<T: Scalar>(
    out: &mut [T],
    x: &[T],
    w: &[T],
    din: &[usize; 3],
    dout: &[usize; 3],
    stride: usize,
) {
    let (d, h, wd) = (din[0], din[1], din[2]);
    let (od_n, oh_n, ow_n) = (dout[0], dout[1], dout[2]);
    for kd in 0..K {
        for kh in 0..K {
            for kw in 0..K {
                let wv = w[(kd * K + kh) * K + kw];
                if wv == T::zero() {
                    continue;
                }
                // output range where the tapped input index stays in bounds
                let od_range = tap_range(od_n, d, kd, stride);
                let oh_range = tap_range(oh_n, h, kh, stride);
                let (ow_lo, ow_hi) = tap_range(ow_n, wd, kw, stride);
                for od in od_range.0..od_range.1 {
                    let id = od * stride + kd - PAD;
                    for oh in oh_range.0..oh_range.1 {
                        let ih = oh * stride + kh - PAD;
                        let orow = &mut out[(od * oh_n + oh) * ow_n..][ow_lo..ow_hi];
                        let xbase = (id * h + ih) * wd;
                        if stride == 1 {
                            let xrow = &x[xbase + ow_lo + kw - PAD..][..ow_hi - ow_lo];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o = *o + wv * xv;
                            }
                        } else {
                            for (i, o) in orow.iter_mut().enumerate() {
                                let iw = (ow_lo + i) * stride + kw - PAD;
                                *o = *o + wv * x[xbase + iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output index interval [lo, hi) for which `o*stride + k - PAD` lies in
/// [0, input_extent).
fn tap_range(out_extent: usize, in_extent: usize, k: usize, stride: usize) -> (usize, usize) {
    let lo = if k < PAD { (PAD - k).div_ceil(stride) } else { 0 };
    let mut hi = out_extent;
    // largest o with o*stride + k - PAD <= in_extent - 1
    let max_i = in_extent + PAD;
    if max_i > k {
        hi = hi.min((max_i - k - 1) / stride + 1);
    } else {
        hi = lo;
    }
    (lo.min(hi), hi)
}

pub(crate) fn backward_conv3d<T: Scalar>(
    x: Var,
    w: Var,
    bias: Option<Var>,
    stride: usize,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    let Some(g) = grads[out.0].take() else { return };
    let sx = nodes[x.0].value.shape();
    let so = nodes[out.0].value.shape();
    let (cin, cout) = (sx[0], so[0]);
    let din = [sx[1], sx[2], sx[3]];
    let dout = [so[1], so[2], so[3]];
    let out_spatial = dout[0] * dout[1] * dout[2];
    let in_spatial = din[0] * din[1] * din[2];
    let xv = nodes[x.0].value.data();
    let wv = nodes[w.0].value.data();

    if let Some(b) = bias {
        let mut db = vec![T::zero(); cout];
        for co in 0..cout {
            db[co] = g[co * out_spatial..(co + 1) * out_spatial].iter().copied().sum();
        }
        accum(grads, b, &db);
    }
    {
        let dw = grad_buf(grads, w, nodes[w.0].value.numel());
        dw.par_chunks_mut(cin * K * K * K).enumerate().for_each(|(co, dw_co)| {
            let g_c = &g[co * out_spatial..(co + 1) * out_spatial];
            for ci in 0..cin {
                weight_grad_taps(
                    &mut dw_co[ci * K * K * K..(ci + 1) * K * K * K],
                    g_c,
                    &xv[ci * in_spatial..(ci + 1) * in_spatial],
                    &din,
                    &dout,
                    stride,
                );
            }
        });
    }
    {
        let dx = grad_buf(grads, x, nodes[x.0].value.numel());
        dx.par_chunks_mut(in_spatial).enumerate().for_each(|(ci, dx_c)| {
            for co in 0..cout {
                let g_c = &g[co * out_spatial..(co + 1) * out_spatial];
                let w_c = &wv[(co * cin + ci) * K * K * K..(co * cin + ci + 1) * K * K * K];
                input_grad_taps(dx_c, g_c, w_c, &din, &dout, stride);
            }
        });
    }
    grads[out.0] = Some(g);
}

/// dw[k] += sum over valid outputs of g[o] * x[o*s + k - PAD].
fn weight_grad_taps<T: Scalar>(
    dw: &mut [T],
    g: &[T],
    x: &[T],
    din: &[usize; 3],
    dout: &[usize; 3],
    stride: usize,
) {
    let (h, wd) = (din[1], din[2]);
    let (oh_n, ow_n) = (dout[1], dout[2]);
    for kd in 0..K {
        for kh in 0..K {
            for kw in 0..K {
                let od_range = tap_range(dout[0], din[0], kd, stride);
                let oh_range = tap_range(oh_n, h, kh, stride);
                let (ow_lo, ow_hi) = tap_range(ow_n, wd, kw, stride);
                let mut s = T::zero();
                for od in od_range.0..od_range.1 {
                    let id = od * stride + kd - PAD;
                    for oh in oh_range.0..oh_range.1 {
                        let ih = oh * stride + kh - PAD;
                        let grow = &g[(od * oh_n + oh) * ow_n..][ow_lo..ow_hi];
                        let xbase = (id * h + ih) * wd;
                        if stride == 1 {
                            let xrow = &x[xbase + ow_lo + kw - PAD..][..ow_hi - ow_lo];
                            for (&gv, &xvv) in grow.iter().zip(xrow) {
                                s = s + gv * xvv;
                            }
                        } else {
                            for (i, &gv) in grow.iter().enumerate() {
                                let iw = (ow_lo + i) * stride + kw - PAD;
                                s = s + gv * x[xbase + iw];
                            }
                        }
                    }
                }
                let idx = (kd * K + kh) * K + kw;
                dw[idx] = dw[idx] + s;
            }
        }
    }
}

/// dx[o*s + k - PAD] += w[k] * g[o], the transpose of `accumulate_taps`.
fn input_grad_taps<T: Scalar>(
    dx: &mut [T],
    g: &[T],
    w: &[T],
    din: &[usize; 3],
    dout: &[usize; 3],
    stride: usize,
) {
    let (h, wd) = (din[1], din[2]);
    let (oh_n, ow_n) = (dout[1], dout[2]);
    for kd in 0..K {
        for kh in 0..K {
            for kw in 0..K {
                let wv = w[(kd * K + kh) * K + kw];
                if wv == T::zero() {
                    continue;
                }
                let od_range = tap_range(dout[0], din[0], kd, stride);
                let oh_range = tap_range(oh_n, h, kh, stride);
                let (ow_lo, ow_hi) = tap_range(ow_n, wd, kw, stride);
                for od in od_range.0..od_range.1 {
                    let id = od * stride + kd - PAD;
                    for oh in oh_range.0..oh_range.1 {
                        let ih = oh * stride + kh - PAD;
                        let grow = &g[(od * oh_n + oh) * ow_n..][ow_lo..ow_hi];
                        let xbase = (id * h + ih) * wd;
                        if stride == 1 {
                            let dxrow = &mut dx[xbase + ow_lo + kw - PAD..][..ow_hi - ow_lo];
                            for (d, &gv) in dxrow.iter_mut().zip(grow) {
                                *d = *d + wv * gv;
                            }
                        } else {
                            for (i, &gv) in grow.iter().enumerate() {
                                let iw = (ow_lo + i) * stride + kw - PAD;
                                dx[xbase + iw] = dx[xbase + iw] + wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 1x1x1 convolution: per-voxel linear map over channels.
pub fn pointwise_conv3d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let sx = tape.value(x).shape().clone();
    let sw = tape.value(w).shape().clone();
    if sx.rank() != 4 || sw.rank() != 2 || sw[1] != sx[0] {
        return Err(Error::shape("pointwise_conv3d", format!("input {sx} vs weights {sw}")));
    }
    let (cin, cout) = (sx[0], sw[0]);
    let spatial = sx[1] * sx[2] * sx[3];
    if let Some(b) = bias {
        let sb = tape.value(b).shape();
        if sb.rank() != 1 || sb[0] != cout {
            return Err(Error::shape("pointwise_conv3d", format!("bias {sb} vs {cout} channels")));
        }
    }
    let mut data = vec![T::zero(); cout * spatial];
    {
        let xv = tape.value(x).data();
        let wv = tape.value(w).data();
        let bv = bias.map(|b| tape.value(b).data().to_vec());
        data.par_chunks_mut(spatial).enumerate().for_each(|(co, out_c)| {
            if let Some(bv) = &bv {
                out_c.fill(bv[co]);
            }
            for ci in 0..cin {
                let weight = wv[co * cin + ci];
                if weight == T::zero() {
                    continue;
                }
                let xrow = &xv[ci * spatial..(ci + 1) * spatial];
                for (o, &xvv) in out_c.iter_mut().zip(xrow) {
                    *o = *o + weight * xvv;
                }
            }
        });
    }
    tape.add_flops(
        2 * (cout * cin * spatial) as u64
            + if bias.is_some() { (cout * spatial) as u64 } else { 0 },
    );
    let t = Tensor::from_vec([cout, sx[1], sx[2], sx[3]], data)?;
    let out = tape.push_node(t);
    tape.push_record(Record::PointwiseConv { x, w, bias, out });
    Ok(out)
}

pub(crate) fn backward_pointwise<T: Scalar>(
    x: Var,
    w: Var,
    bias: Option<Var>,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    let Some(g) = grads[out.0].take() else { return };
    let sx = nodes[x.0].value.shape();
    let (cin, cout) = (sx[0], nodes[out.0].value.shape()[0]);
    let spatial = sx[1] * sx[2] * sx[3];
    let xv = nodes[x.0].value.data();
    let wv = nodes[w.0].value.data();

    if let Some(b) = bias {
        let mut db = vec![T::zero(); cout];
        for co in 0..cout {
            db[co] = g[co * spatial..(co + 1) * spatial].iter().copied().sum();
        }
        accum(grads, b, &db);
    }
    {
        let dw = grad_buf(grads, w, cout * cin);
        dw.par_chunks_mut(cin).enumerate().for_each(|(co, dw_co)| {
            let grow = &g[co * spatial..(co + 1) * spatial];
            for ci in 0..cin {
                let xrow = &xv[ci * spatial..(ci + 1) * spatial];
                let mut s = T::zero();
                for (&gv, &xvv) in grow.iter().zip(xrow) {
                    s = s + gv * xvv;
                }
                dw_co[ci] = dw_co[ci] + s;
            }
        });
    }
    {
        let dx = grad_buf(grads, x, cin * spatial);
        dx.par_chunks_mut(spatial).enumerate().for_each(|(ci, dx_c)| {
            for co in 0..cout {
                let weight = wv[co * cin + ci];
                if weight == T::zero() {
                    continue;
                }
                let grow = &g[co * spatial..(co + 1) * spatial];
                for (d, &gv) in dx_c.iter_mut().zip(grow) {
                    *d = *d + weight * gv;
                }
            }
        });
    }
    grads[out.0] = Some(g);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(&Tensor::from_vec(shape, data).unwrap())
    }

    #[test]
    fn zero_kernel_outputs_bias() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2, 2], vec![1.0; 8]);
        let w = leaf(&mut tape, &[2, 1, 3, 3, 3], vec![0.0; 54]);
        let b = leaf(&mut tape, &[2], vec![0.5, -1.5]);
        let y = conv3d(&mut tape, x, w, Some(b), 1).unwrap();
        let d = tape.value(y).data();
        assert!(d[..8].iter().all(|&v| v == 0.5));
        assert!(d[8..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn single_voxel_center_weight() {
        // 1-voxel volume: only the center tap lands inside with pad 1
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 1, 1], vec![3.0]);
        let mut wdata = vec![0.0; 27];
        wdata[13] = 2.0; // center of 3x3x3
        for (i, v) in wdata.iter_mut().enumerate() {
            if i != 13 {
                *v = 7.0; // off-center taps must not contribute
            }
        }
        let w = leaf(&mut tape, &[1, 1, 3, 3, 3], wdata);
        let b = leaf(&mut tape, &[1], vec![0.25]);
        let y = conv3d(&mut tape, x, w, Some(b), 1).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0 * 3.0 + 0.25]);
    }

    #[test]
    fn stride_two_output_shape() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 4, 4, 4], vec![0.0; 2 * 64]);
        let w = leaf(&mut tape, &[3, 2, 3, 3, 3], vec![0.0; 3 * 2 * 27]);
        let y = conv3d(&mut tape, x, w, None, 2).unwrap();
        assert_eq!(tape.value(y).shape().dims(), &[3, 2, 2, 2]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[2, 2, 2, 2], vec![0.0; 16]);
        let w = leaf(&mut tape, &[1, 3, 3, 3, 3], vec![0.0; 81]);
        assert!(conv3d(&mut tape, x, w, None, 1).is_err());
    }

    #[test]
    fn zero_extent_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[1, 0, 2, 2], vec![]);
        let w = leaf(&mut tape, &[1, 1, 3, 3, 3], vec![0.0; 27]);
        assert!(conv3d(&mut tape, x, w, None, 1).is_err());
    }

    #[test]
    fn conv_matches_naive_reference() {
        // brute-force cross-correlation oracle on a random-ish case
        let (cin, cout, d, h, w) = (2, 3, 3, 4, 5);
        let xv: Vec<f64> = (0..cin * d * h * w).map(|i| ((i * 37 + 11) % 17) as f64 - 8.0).collect();
        let wv: Vec<f64> =
            (0..cout * cin * 27).map(|i| ((i * 53 + 3) % 13) as f64 / 6.0 - 1.0).collect();
        let bv: Vec<f64> = (0..cout).map(|i| i as f64 * 0.5).collect();
        for stride in [1usize, 2] {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, &[cin, d, h, w], xv.clone());
            let wt = leaf(&mut tape, &[cout, cin, 3, 3, 3], wv.clone());
            let b = leaf(&mut tape, &[cout], bv.clone());
            let y = conv3d(&mut tape, x, wt, Some(b), stride).unwrap();
            let (od, oh, ow) = (
                conv_out_extent(d, stride),
                conv_out_extent(h, stride),
                conv_out_extent(w, stride),
            );
            assert_eq!(tape.value(y).shape().dims(), &[cout, od, oh, ow]);
            let got = tape.value(y).data();
            for co in 0..cout {
                for zi in 0..od {
                    for yi in 0..oh {
                        for xi in 0..ow {
                            let mut s = bv[co];
                            for ci in 0..cin {
                                for kd in 0..3usize {
                                    for kh in 0..3usize {
                                        for kw in 0..3usize {
                                            let id = (zi * stride + kd) as isize - 1;
                                            let ih = (yi * stride + kh) as isize - 1;
                                            let iw = (xi * stride + kw) as isize - 1;
                                            if id < 0 || ih < 0 || iw < 0 {
                                                continue;
                                            }
                                            let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                                            if id >= d || ih >= h || iw >= w {
                                                continue;
                                            }
                                            s += xv[((ci * d + id) * h + ih) * w + iw]
                                                * wv[(((co * cin + ci) * 3 + kd) * 3 + kh) * 3 + kw];
                                        }
                                    }
                                }
                            }
                            let got_v = got[((co * od + zi) * oh + yi) * ow + xi];
                            assert!(
                                (got_v - s).abs() < 1e-12,
                                "stride {stride} at ({co},{zi},{yi},{xi}): {got_v} vs {s}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pointwise_identity_and_row_sum() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let id = leaf(&mut tape, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = pointwise_conv3d(&mut tape, x, id, None).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let ones = leaf(&mut tape, &[1, 2], vec![1.0, 1.0]);
        let s = pointwise_conv3d(&mut tape, x, ones, None).unwrap();
        assert_eq!(tape.value(s).data(), &[6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn pointwise_equals_matmul_per_voxel() {
        let (cin, cout, sp) = (3, 2, 8);
        let xv: Vec<f64> = (0..cin * sp).map(|i| (i as f64).sin()).collect();
        let wv: Vec<f64> = (0..cout * cin).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[cin, 2, 2, 2], xv.clone());
        let w = leaf(&mut tape, &[cout, cin], wv.clone());
        let y = pointwise_conv3d(&mut tape, x, w, None).unwrap();
        let got = tape.value(y).data();
        for v in 0..sp {
            for co in 0..cout {
                let mut s = 0.0;
                for ci in 0..cin {
                    s += wv[co * cin + ci] * xv[ci * sp + v];
                }
                assert!((got[co * sp + v] - s).abs() < 1e-12);
            }
        }
    }
}
