//! Attention-weighted pooling between N spatial maps and a feature volume:
//! the two contractions behind the token bottleneck.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{grad_buf, Node, Record, Tape, Var};
use crate::tensor::Tensor;

/// t[n, f] = sum over voxels of maps[n, v] * x[f, v].
pub fn attention_pool<T: Scalar>(tape: &mut Tape<T>, maps: Var, x: Var) -> Result<Var> {
    let sm = tape.value(maps).shape().clone();
    let sx = tape.value(x).shape().clone();
    if sm.rank() != 4 || sx.rank() != 4 || sm[1..] != sx[1..] {
        return Err(Error::shape("attention_pool", format!("maps {sm} vs features {sx}")));
    }
    let (n, f) = (sm[0], sx[0]);
    let spatial = sm[1] * sm[2] * sm[3];
    let mv = tape.value(maps).data();
    let xv = tape.value(x).data();
    let mut data = vec![T::zero(); n * f];
    for ni in 0..n {
        let mrow = &mv[ni * spatial..(ni + 1) * spatial];
        for fi in 0..f {
            let xrow = &xv[fi * spatial..(fi + 1) * spatial];
            let mut s = T::zero();
            for (&a, &b) in mrow.iter().zip(xrow) {
                s = s + a * b;
            }
            data[ni * f + fi] = s;
        }
    }
    tape.add_flops(2 * (n * f * spatial) as u64);
    let t = Tensor::from_vec([n, f], data)?;
    let out = tape.push_node(t);
    tape.push_record(Record::AttnPool { maps, x, out });
    Ok(out)
}

pub(crate) fn backward_attn_pool<T: Scalar>(
    maps: Var,
    x: Var,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    let Some(g) = grads[out.0].take() else { return };
    let sm = nodes[maps.0].value.shape();
    let (n, f) = (sm[0], nodes[x.0].value.shape()[0]);
    let spatial = sm[1] * sm[2] * sm[3];
    let mv = nodes[maps.0].value.data();
    let xv = nodes[x.0].value.data();
    {
        // d maps[n, v] = sum_f g[n, f] * x[f, v]
        let dm = grad_buf(grads, maps, n * spatial);
        for ni in 0..n {
            let drow = &mut dm[ni * spatial..(ni + 1) * spatial];
            for fi in 0..f {
                let gv = g[ni * f + fi];
                let xrow = &xv[fi * spatial..(fi + 1) * spatial];
                for (d, &xvv) in drow.iter_mut().zip(xrow) {
                    *d = *d + gv * xvv;
                }
            }
        }
    }
    {
        // d x[f, v] = sum_n g[n, f] * maps[n, v]
        let dx = grad_buf(grads, x, f * spatial);
        for fi in 0..f {
            let drow = &mut dx[fi * spatial..(fi + 1) * spatial];
            for ni in 0..n {
                let gv = g[ni * f + fi];
                let mrow = &mv[ni * spatial..(ni + 1) * spatial];
                for (d, &mvv) in drow.iter_mut().zip(mrow) {
                    *d = *d + gv * mvv;
                }
            }
        }
    }
    grads[out.0] = Some(g);
}

/// y[f, v] = sum_n maps[n, v] * tokens[n, f]: broadcast tokens back over
/// space, weighted by per-voxel scores.
pub fn attention_unpool<T: Scalar>(tape: &mut Tape<T>, maps: Var, tokens: Var) -> Result<Var> {
    let sm = tape.value(maps).shape().clone();
    let st = tape.value(tokens).shape().clone();
    if sm.rank() != 4 || st.rank() != 2 || sm[0] != st[0] {
        return Err(Error::shape("attention_unpool", format!("maps {sm} vs tokens {st}")));
    }
    let (n, f) = (st[0], st[1]);
    let spatial = sm[1] * sm[2] * sm[3];
    let mv = tape.value(maps).data();
    let tv = tape.value(tokens).data();
    let mut data = vec![T::zero(); f * spatial];
    for fi in 0..f {
        let orow = &mut data[fi * spatial..(fi + 1) * spatial];
        for ni in 0..n {
            let tvv = tv[ni * f + fi];
            if tvv == T::zero() {
                continue;
            }
            let mrow = &mv[ni * spatial..(ni + 1) * spatial];
            for (o, &mvv) in orow.iter_mut().zip(mrow) {
                *o = *o + tvv * mvv;
            }
        }
    }
    tape.add_flops(2 * (n * f * spatial) as u64);
    let t = Tensor::from_vec([f, sm[1], sm[2], sm[3]], data)?;
    let out = tape.push_node(t);
    tape.push_record(Record::AttnUnpool { maps, tokens, out });
    Ok(out)
}

pub(crate) fn backward_attn_unpool<T: Scalar>(
    maps: Var,
    tokens: Var,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    let Some(g) = grads[out.0].take() else { return };
    let st = nodes[tokens.0].value.shape();
    let (n, f) = (st[0], st[1]);
    let sm = nodes[maps.0].value.shape();
    let spatial = sm[1] * sm[2] * sm[3];
    let mv = nodes[maps.0].value.data();
    let tv = nodes[tokens.0].value.data();
    {
        // d maps[n, v] = sum_f tokens[n, f] * g[f, v]
        let dm = grad_buf(grads, maps, n * spatial);
        for ni in 0..n {
            let drow = &mut dm[ni * spatial..(ni + 1) * spatial];
            for fi in 0..f {
                let tvv = tv[ni * f + fi];
                if tvv == T::zero() {
                    continue;
                }
                let grow = &g[fi * spatial..(fi + 1) * spatial];
                for (d, &gv) in drow.iter_mut().zip(grow) {
                    *d = *d + tvv * gv;
                }
            }
        }
    }
    {
        // d tokens[n, f] = sum_v maps[n, v] * g[f, v]
        let dt = grad_buf(grads, tokens, n * f);
        for ni in 0..n {
            let mrow = &mv[ni * spatial..(ni + 1) * spatial];
            for fi in 0..f {
                let grow = &g[fi * spatial..(fi + 1) * spatial];
                let mut s = T::zero();
                for (&mvv, &gv) in mrow.iter().zip(grow) {
                    s = s + mvv * gv;
                }
                dt[ni * f + fi] = dt[ni * f + fi] + s;
            }
        }
    }
    grads[out.0] = Some(g);
}
