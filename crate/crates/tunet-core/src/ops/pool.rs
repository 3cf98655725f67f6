//! Spatial resampling: 2x average pooling and 2x trilinear upsampling
//! (half-pixel / align-corners-false convention).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{grad_buf, Node, Record, Tape, Var};
use crate::tensor::Tensor;

/// 2x2x2 mean pooling; all spatial extents must be even.
pub fn avg_pool3d<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.value(x).shape().clone();
    if s.rank() != 4 {
        return Err(Error::shape("avg_pool3d", format!("{s} (need [C,D,H,W])")));
    }
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 || d == 0 || h == 0 || w == 0 {
        return Err(Error::shape("avg_pool3d", format!("odd or zero spatial extent in {s}")));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let eighth = T::from_f64(0.125);
    let xv = tape.value(x).data();
    let mut data = vec![T::zero(); c * od * oh * ow];
    for ci in 0..c {
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut sum = T::zero();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                sum = sum
                                    + xv[((ci * d + 2 * zd + dz) * h + 2 * zh + dy) * w
                                        + 2 * zw
                                        + dx];
                            }
                        }
                    }
                    data[((ci * od + zd) * oh + zh) * ow + zw] = sum * eighth;
                }
            }
        }
    }
    tape.add_flops(8 * (c * od * oh * ow) as u64);
    let t = Tensor::from_vec([c, od, oh, ow], data)?;
    let out = tape.push_node(t);
    tape.push_record(Record::AvgPool { x, out });
    Ok(out)
}

pub(crate) fn backward_avg_pool<T: Scalar>(
    x: Var,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    let Some(g) = grads[out.0].take() else { return };
    let s = nodes[x.0].value.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let eighth = T::from_f64(0.125);
    let dx = grad_buf(grads, x, nodes[x.0].value.numel());
    for ci in 0..c {
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let gv = g[((ci * od + zd) * oh + zh) * ow + zw] * eighth;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dxi in 0..2 {
                                let idx =
                                    ((ci * d + 2 * zd + dz) * h + 2 * zh + dy) * w + 2 * zw + dxi;
                                dx[idx] = dx[idx] + gv;
                            }
                        }
                    }
                }
            }
        }
    }
    grads[out.0] = Some(g);
}

/// Source taps for one upsampled axis: (lo index, hi index, hi weight).
fn upsample_taps(out_extent: usize, in_extent: usize) -> Vec<(usize, usize, f64)> {
    (0..out_extent)
        .map(|o| {
            let s = (o as f64 + 0.5) / 2.0 - 0.5;
            let floor = s.floor();
            let w1 = s - floor;
            let i0 = floor.max(0.0) as usize;
            let i1 = ((floor as isize + 1).max(0) as usize).min(in_extent - 1);
            (i0.min(in_extent - 1), i1, w1)
        })
        .collect()
}

/// Trilinear 2x upsampling.
pub fn trilinear_upsample3d<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.value(x).shape().clone();
    if s.rank() != 4 {
        return Err(Error::shape("trilinear_upsample3d", format!("{s} (need [C,D,H,W])")));
    }
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::shape("trilinear_upsample3d", format!("zero spatial extent in {s}")));
    }
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let td = upsample_taps(od, d);
    let th = upsample_taps(oh, h);
    let tw = upsample_taps(ow, w);
    let xv = tape.value(x).data();
    let mut data = vec![T::zero(); c * od * oh * ow];
    for ci in 0..c {
        let xc = &xv[ci * d * h * w..(ci + 1) * d * h * w];
        let oc = &mut data[ci * od * oh * ow..(ci + 1) * od * oh * ow];
        for (zo, &(d0, d1, wd1)) in td.iter().enumerate() {
            for (yo, &(h0, h1, wh1)) in th.iter().enumerate() {
                for (xo, &(w0, w1, ww1)) in tw.iter().enumerate() {
                    let mut acc = 0.0f64;
                    for (di, dw) in [(d0, 1.0 - wd1), (d1, wd1)] {
                        for (hi, hw) in [(h0, 1.0 - wh1), (h1, wh1)] {
                            for (wi, ww) in [(w0, 1.0 - ww1), (w1, ww1)] {
                                acc += dw * hw * ww * xc[(di * h + hi) * w + wi].to_f64();
                            }
                        }
                    }
                    oc[(zo * oh + yo) * ow + xo] = T::from_f64(acc);
                }
            }
        }
    }
    tape.add_flops(14 * (c * od * oh * ow) as u64);
    let t = Tensor::from_vec([c, od, oh, ow], data)?;
    let out = tape.push_node(t);
    tape.push_record(Record::Upsample { x, out });
    Ok(out)
}

pub(crate) fn backward_upsample<T: Scalar>(
    x: Var,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    let Some(g) = grads[out.0].take() else { return };
    let s = nodes[x.0].value.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let td = upsample_taps(od, d);
    let th = upsample_taps(oh, h);
    let tw = upsample_taps(ow, w);
    let dx = grad_buf(grads, x, nodes[x.0].value.numel());
    for ci in 0..c {
        let dc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        let gc = &g[ci * od * oh * ow..(ci + 1) * od * oh * ow];
        for (zo, &(d0, d1, wd1)) in td.iter().enumerate() {
            for (yo, &(h0, h1, wh1)) in th.iter().enumerate() {
                for (xo, &(w0, w1, ww1)) in tw.iter().enumerate() {
                    let gv = gc[(zo * oh + yo) * ow + xo];
                    for (di, dw) in [(d0, 1.0 - wd1), (d1, wd1)] {
                        for (hi, hw) in [(h0, 1.0 - wh1), (h1, wh1)] {
                            for (wi, ww) in [(w0, 1.0 - ww1), (w1, ww1)] {
                                let idx = (di * h + hi) * w + wi;
                                dc[idx] = dc[idx] + gv * T::from_f64(dw * hw * ww);
                            }
                        }
                    }
                }
            }
        }
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
    fn pool_of_constant_is_constant() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 4, 4, 4], vec![3.25; 128]);
        let y = avg_pool3d(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape().dims(), &[2, 2, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn pool_block_mean() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2, 2], (1..=8).map(f64::from).collect());
        let y = avg_pool3d(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.5]);
    }

    #[test]
    fn pool_rejects_odd_extent() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[1, 3, 2, 2], vec![0.0; 12]);
        assert!(avg_pool3d(&mut tape, x).is_err());
    }

    #[test]
    fn pool_then_tile_preserves_block_means() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..64).map(|i| ((i * 31 + 7) % 23) as f64 * 0.5).collect();
        let x = leaf(&mut tape, &[1, 4, 4, 4], vals.clone());
        let y = avg_pool3d(&mut tape, x).unwrap();
        let pooled = tape.value(y).data();
        for zd in 0..2 {
            for zh in 0..2 {
                for zw in 0..2 {
                    let mut s = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s += vals[((2 * zd + dz) * 4 + 2 * zh + dy) * 4 + 2 * zw + dx];
                            }
                        }
                    }
                    assert_eq!(pooled[(zd * 2 + zh) * 2 + zw], s * 0.125);
                }
            }
        }
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2, 2], vec![1.5; 8]);
        let y = trilinear_upsample3d(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape().dims(), &[1, 4, 4, 4]);
        assert!(tape.value(y).data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn upsample_line_reference_values() {
        // [0, 1] along W doubles to [0, 0.25, 0.75, 1]
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 1, 2], vec![0.0, 1.0]);
        let y = trilinear_upsample3d(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape().dims(), &[1, 2, 2, 4]);
        let d = tape.value(y).data();
        for row in d.chunks(4) {
            assert!((row[0] - 0.0).abs() < 1e-12);
            assert!((row[1] - 0.25).abs() < 1e-12);
            assert!((row[2] - 0.75).abs() < 1e-12);
            assert!((row[3] - 1.0).abs() < 1e-12);
        }
    }
}
