//! Matrix products on the trailing two axes with broadcast over leading
//! batch axes, plus the small rank-2 helpers used by the token blocks.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{accum, grad_buf, Node, Record, Tape, Var};
use crate::tensor::Tensor;

/// Dimension bookkeeping saved for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct MatDims {
    m: usize,
    k: usize,
    n: usize,
    /// Broadcast batch shape; empty for plain rank-2 products.
    out_batch: Vec<usize>,
    /// Per flat out-batch index: matrix offsets into a and b.
    a_map: Vec<usize>,
    b_map: Vec<usize>,
}

fn broadcast_batch(a: &[usize], b: &[usize], sa: &str, sb: &str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![1usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::shape("matmul", format!("batch dims of {sa} vs {sb}")));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Matrix offset (in units of whole matrices) for each flat index of the
/// broadcast batch shape; broadcast axes contribute stride 0.
fn batch_map(out_batch: &[usize], own_batch: &[usize]) -> Vec<usize> {
    let total: usize = out_batch.iter().product();
    let rank = out_batch.len();
    let pad = rank - own_batch.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..own_batch.len()).rev() {
        strides[pad + i] = if own_batch[i] == 1 { 0 } else { acc };
        acc *= own_batch[i];
    }
    let mut map = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut off = 0usize;
        for i in (0..rank).rev() {
            let idx = rem % out_batch[i];
            rem /= out_batch[i];
            off += idx * strides[i];
        }
        map.push(off);
    }
    map
}

fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[.., i, j] = sum_l a[.., i, l] * b[.., l, j], batch axes broadcast.
pub fn matmul<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.value(a).shape().clone(), tape.value(b).shape().clone());
    if sa.rank() < 2 || sb.rank() < 2 {
        return Err(Error::shape("matmul", format!("{sa} vs {sb} (need rank >= 2)")));
    }
    let (m, k) = (sa[sa.rank() - 2], sa[sa.rank() - 1]);
    let (k2, n) = (sb[sb.rank() - 2], sb[sb.rank() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner extents of {sa} vs {sb}")));
    }
    let a_batch = &sa[..sa.rank() - 2];
    let b_batch = &sb[..sb.rank() - 2];
    let out_batch =
        broadcast_batch(a_batch, b_batch, &sa.to_string(), &sb.to_string())?;
    let batches: usize = out_batch.iter().product();
    let a_map = batch_map(&out_batch, a_batch);
    let b_map = batch_map(&out_batch, b_batch);

    let mut data = vec![T::zero(); batches * m * n];
    let (av, bv) = (tape.value(a).data(), tape.value(b).data());
    for idx in 0..batches {
        matmul_kernel(
            &av[a_map[idx] * m * k..(a_map[idx] + 1) * m * k],
            &bv[b_map[idx] * k * n..(b_map[idx] + 1) * k * n],
            &mut data[idx * m * n..(idx + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let mut out_dims = out_batch.clone();
    out_dims.extend([m, n]);
    let t = Tensor::from_vec(out_dims, data)?;
    tape.add_flops(2 * (batches * m * k * n) as u64);
    let out = tape.push_node(t);
    tape.push_record(Record::MatMul { a, b, out, dims: MatDims { m, k, n, out_batch, a_map, b_map } });
    Ok(out)
}

pub(crate) fn backward_matmul<T: Scalar>(
    a: Var,
    b: Var,
    out: Var,
    dims: &MatDims,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    let Some(g) = grads[out.0].take() else { return };
    let (m, k, n) = (dims.m, dims.k, dims.n);
    let batches: usize = dims.out_batch.iter().product();
    let av = nodes[a.0].value.data();
    let bv = nodes[b.0].value.data();
    {
        let da = grad_buf(grads, a, nodes[a.0].value.numel());
        for idx in 0..batches {
            let gm = &g[idx * m * n..(idx + 1) * m * n];
            let bm = &bv[dims.b_map[idx] * k * n..(dims.b_map[idx] + 1) * k * n];
            let dam = &mut da[dims.a_map[idx] * m * k..(dims.a_map[idx] + 1) * m * k];
            // dA = g . B^T
            for i in 0..m {
                for l in 0..k {
                    let mut s = T::zero();
                    let grow = &gm[i * n..(i + 1) * n];
                    let brow = &bm[l * n..(l + 1) * n];
                    for (gv, bvv) in grow.iter().zip(brow) {
                        s = s + *gv * *bvv;
                    }
                    dam[i * k + l] = dam[i * k + l] + s;
                }
            }
        }
    }
    {
        let db = grad_buf(grads, b, nodes[b.0].value.numel());
        for idx in 0..batches {
            let gm = &g[idx * m * n..(idx + 1) * m * n];
            let am = &av[dims.a_map[idx] * m * k..(dims.a_map[idx] + 1) * m * k];
            let dbm = &mut db[dims.b_map[idx] * k * n..(dims.b_map[idx] + 1) * k * n];
            // dB = A^T . g
            for i in 0..m {
                let grow = &gm[i * n..(i + 1) * n];
                for l in 0..k {
                    let avv = am[i * k + l];
                    let dbrow = &mut dbm[l * n..(l + 1) * n];
                    for (dv, gv) in dbrow.iter_mut().zip(grow) {
                        *dv = *dv + avv * *gv;
                    }
                }
            }
        }
    }
    grads[out.0] = Some(g);
}

/// Rank-2 transpose.
pub fn transpose2<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.value(x).shape().clone();
    if s.rank() != 2 {
        return Err(Error::shape("transpose2", format!("{s} (need rank 2)")));
    }
    let (r, c) = (s[0], s[1]);
    let src = tape.value(x).data();
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = src[i * c + j];
        }
    }
    let t = Tensor::from_vec([c, r], data)?;
    let out = tape.push_node(t);
    tape.push_record(Record::Transpose2 { x, out });
    Ok(out)
}

pub(crate) fn backward_transpose2<T: Scalar>(
    x: Var,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    if let Some(g) = grads[out.0].take() {
        let dims = nodes[out.0].value.shape().dims().to_vec();
        let (c, r) = (dims[0], dims[1]);
        let mut dx = vec![T::zero(); r * c];
        for j in 0..c {
            for i in 0..r {
                dx[i * c + j] = g[j * r + i];
            }
        }
        accum(grads, x, &dx);
        grads[out.0] = Some(g);
    }
}

/// Broadcast-add a row vector: [R, C] + [C].
pub fn add_row_bias<T: Scalar>(tape: &mut Tape<T>, x: Var, bias: Var) -> Result<Var> {
    let sx = tape.value(x).shape().clone();
    let sb = tape.value(bias).shape().clone();
    if sx.rank() != 2 || sb.rank() != 1 || sx[1] != sb[0] {
        return Err(Error::shape("add_row_bias", format!("{sx} vs {sb}")));
    }
    let (r, c) = (sx[0], sx[1]);
    let bv = tape.value(bias).data().to_vec();
    let mut data = tape.value(x).data().to_vec();
    for i in 0..r {
        for j in 0..c {
            data[i * c + j] = data[i * c + j] + bv[j];
        }
    }
    let t = Tensor::from_vec(sx, data)?;
    tape.add_flops((r * c) as u64);
    let out = tape.push_node(t);
    tape.push_record(Record::AddRowBias { x, bias, out });
    Ok(out)
}

pub(crate) fn backward_add_row_bias<T: Scalar>(
    x: Var,
    bias: Var,
    out: Var,
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    if let Some(g) = grads[out.0].take() {
        accum(grads, x, &g);
        let c = nodes[bias.0].value.numel();
        let mut db = vec![T::zero(); c];
        for (i, &gi) in g.iter().enumerate() {
            db[i % c] = db[i % c] + gi;
        }
        accum(grads, bias, &db);
        grads[out.0] = Some(g);
    }
}
