//! Tensor operations recorded on the tape.

use super::linalg::{mm_abt_acc, mm_acc, mm_atb_acc};
use super::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The element-wise operation kinds exposed through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise<T> {
    Add,
    Mul,
    Relu,
    Tanh,
    Sigmoid,
    Scale(T),
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    /// Dispatcher over the element-wise kinds. Binary kinds require `b` with
    /// a matching shape; unary kinds reject a second operand.
    pub fn elementwise(
        &mut self,
        kind: Elementwise<T>,
        a: &Tensor<T>,
        b: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        match kind {
            Elementwise::Add | Elementwise::Mul => {
                let b = b.ok_or_else(|| {
                    Error::InvalidArgument("binary element-wise op needs two operands".into())
                })?;
                match kind {
                    Elementwise::Add => self.add(a, b),
                    _ => self.mul(a, b),
                }
            }
            _ => {
                if b.is_some() {
                    return Err(Error::InvalidArgument(
                        "unary element-wise op takes one operand".into(),
                    ));
                }
                match kind {
                    Elementwise::Relu => Ok(self.relu(a)),
                    Elementwise::Tanh => Ok(self.tanh(a)),
                    Elementwise::Sigmoid => Ok(self.sigmoid(a)),
                    Elementwise::Scale(c) => Ok(self.scale(a, c)),
                    _ => unreachable!(),
                }
            }
        }
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::shape_mismatch(a.shape(), b.shape(), "add"));
        }
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let (na, nb) = (a.node(), b.node());
        Ok(self.record(&[a, b], a.shape().to_vec(), out, || {
            Box::new(move |g, sink| {
                sink.add(na, g);
                sink.add(nb, g);
            })
        }))
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::shape_mismatch(a.shape(), b.shape(), "mul"));
        }
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let (na, nb) = (a.node(), b.node());
        let (da, db) = (a.data_arc(), b.data_arc());
        Ok(self.record(&[a, b], a.shape().to_vec(), out, || {
            Box::new(move |g, sink| {
                sink.with(na, |buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(db.iter()) {
                        *o += gv * bv;
                    }
                });
                sink.with(nb, |buf| {
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(da.iter()) {
                        *o += gv * av;
                    }
                });
            })
        }))
    }

    pub fn relu(&mut self, a: &Tensor<T>) -> Tensor<T> {
        let out: Vec<T> = a.data().iter().map(|&x| x.max(T::zero())).collect();
        let na = a.node();
        let da = a.data_arc();
        self.record(&[a], a.shape().to_vec(), out, || {
            Box::new(move |g, sink| {
                sink.with(na, |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(da.iter()) {
                        if xv > T::zero() {
                            *o += gv;
                        }
                    }
                });
            })
        })
    }

    pub fn tanh(&mut self, a: &Tensor<T>) -> Tensor<T> {
        let out: Vec<T> = a.data().iter().map(|&x| x.tanh()).collect();
        let na = a.node();
        let dy = std::sync::Arc::new(out.clone());
        self.record(&[a], a.shape().to_vec(), out, || {
            Box::new(move |g, sink| {
                sink.with(na, |buf| {
                    for ((o, &gv), &tv) in buf.iter_mut().zip(g).zip(dy.iter()) {
                        *o += gv * (T::one() - tv * tv);
                    }
                });
            })
        })
    }

    pub fn sigmoid(&mut self, a: &Tensor<T>) -> Tensor<T> {
        let out: Vec<T> = a.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let na = a.node();
        let dy = std::sync::Arc::new(out.clone());
        self.record(&[a], a.shape().to_vec(), out, || {
            Box::new(move |g, sink| {
                sink.with(na, |buf| {
                    for ((o, &gv), &sv) in buf.iter_mut().zip(g).zip(dy.iter()) {
                        *o += gv * sv * (T::one() - sv);
                    }
                });
            })
        })
    }

    pub fn scale(&mut self, a: &Tensor<T>, c: T) -> Tensor<T> {
        let out: Vec<T> = a.data().iter().map(|&x| x * c).collect();
        let na = a.node();
        self.record(&[a], a.shape().to_vec(), out, || {
            Box::new(move |g, sink| {
                sink.with(na, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                });
            })
        })
    }

    pub fn exp(&mut self, a: &Tensor<T>) -> Tensor<T> {
        let out: Vec<T> = a.data().iter().map(|&x| x.exp()).collect();
        let na = a.node();
        let dy = std::sync::Arc::new(out.clone());
        self.record(&[a], a.shape().to_vec(), out, || {
            Box::new(move |g, sink| {
                sink.with(na, |buf| {
                    for ((o, &gv), &ev) in buf.iter_mut().zip(g).zip(dy.iter()) {
                        *o += gv * ev;
                    }
                });
            })
        })
    }

    /// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, ka) = a.dims2()?;
        let (kb, n) = b.dims2()?;
        if ka != kb {
            return Err(Error::shape_mismatch(a.shape(), b.shape(), "matmul"));
        }
        let mut out = vec![T::zero(); m * n];
        mm_acc(a.data(), b.data(), m, ka, n, &mut out);
        let (na, nb) = (a.node(), b.node());
        let (da, db) = (a.data_arc(), b.data_arc());
        Ok(self.record(&[a, b], vec![m, n], out, || {
            Box::new(move |g, sink| {
                // dA = dC * B^T ; dB = A^T * dC
                sink.with(na, |buf| mm_abt_acc(g, &db, m, n, ka, buf));
                sink.with(nb, |buf| mm_atb_acc(&da, g, m, ka, n, buf));
            })
        }))
    }

    /// Row-broadcast bias: `[n,k] + [k]`.
    pub fn bias_add(&mut self, x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = x.dims2()?;
        if b.shape() != [k] {
            return Err(Error::shape_mismatch(x.shape(), b.shape(), "bias_add"));
        }
        let bd = b.data();
        let out: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % k])
            .collect();
        let (nx, nb) = (x.node(), b.node());
        Ok(self.record(&[x, b], vec![n, k], out, || {
            Box::new(move |g, sink| {
                sink.add(nx, g);
                sink.with(nb, |buf| {
                    for row in 0..n {
                        for (o, &gv) in buf.iter_mut().zip(&g[row * k..(row + 1) * k]) {
                            *o += gv;
                        }
                    }
                });
            })
        }))
    }

    pub fn sum_all(&mut self, a: &Tensor<T>) -> Tensor<T> {
        let s: T = a.data().iter().copied().sum();
        let na = a.node();
        self.record(&[a], vec![1], vec![s], || {
            Box::new(move |g, sink| {
                let gv = g[0];
                sink.with(na, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            })
        })
    }

    pub fn mean_all(&mut self, a: &Tensor<T>) -> Tensor<T> {
        let n = T::from_usize(a.numel()).unwrap();
        let s: T = a.data().iter().copied().sum();
        let na = a.node();
        self.record(&[a], vec![1], vec![s / n], || {
            Box::new(move |g, sink| {
                let gv = g[0];
                sink.with(na, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv / n;
                    }
                });
            })
        })
    }

    /// Contiguous slice `[start, start+len)` along one axis.
    pub fn narrow(
        &mut self,
        a: &Tensor<T>,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Tensor<T>> {
        let shape = a.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "narrow axis {axis} range {start}..{} out of bounds for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();

        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = a.data();
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let na = a.node();
        Ok(self.record(&[a], out_shape, out, || {
            Box::new(move |g, sink| {
                sink.with(na, |buf| {
                    for o in 0..outer {
                        let dst = (o * axis_len + start) * inner;
                        let sg = &g[o * len * inner..(o + 1) * len * inner];
                        for (b, &gv) in buf[dst..dst + len * inner].iter_mut().zip(sg) {
                            *b += gv;
                        }
                    }
                });
            })
        }))
    }

    /// Concatenate along one axis; all other extents must agree.
    pub fn concat(&mut self, axis: usize, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = parts[0].shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of bounds for {first:?}"
            )));
        }
        for p in parts {
            if p.shape().len() != first.len()
                || p.shape()
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape_mismatch(&first, p.shape(), "concat"));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();

        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = vec![T::zero(); outer * total * inner];
        for o in 0..outer {
            let mut offset = 0;
            for (p, &l) in parts.iter().zip(&lens) {
                let src = &p.data()[o * l * inner..(o + 1) * l * inner];
                let dst = (o * total + offset) * inner;
                out[dst..dst + l * inner].copy_from_slice(src);
                offset += l;
            }
        }
        let nodes: Vec<Option<super::NodeId>> = parts.iter().map(|p| p.node()).collect();
        Ok(self.record(parts, out_shape, out, || {
            Box::new(move |g, sink| {
                let mut offset = 0;
                for (idx, &l) in lens.iter().enumerate() {
                    let node = nodes[idx];
                    let off = offset;
                    sink.with(node, |buf| {
                        for o in 0..outer {
                            let src = (o * total + off) * inner;
                            let dst = o * l * inner;
                            for (b, &gv) in
                                buf[dst..dst + l * inner].iter_mut().zip(&g[src..src + l * inner])
                            {
                                *b += gv;
                            }
                        }
                    });
                    offset += l;
                }
            })
        }))
    }

    /// Reorder the channel axis of a 4-d activation: output channel `j`
    /// takes input channel `perm[j]`. `perm` must be a permutation.
    pub fn permute_channels(&mut self, x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if perm.len() != c {
            return Err(Error::InvalidArgument(format!(
                "permutation of length {} for {} channels",
                perm.len(),
                c
            )));
        }
        let mut seen = vec![false; c];
        for &p in perm {
            if p >= c || seen[p] {
                return Err(Error::InvalidArgument("not a permutation".into()));
            }
            seen[p] = true;
        }
        let hw = h * w;
        let src = x.data();
        let mut out = vec![T::zero(); n * c * hw];
        for img in 0..n {
            for (j, &p) in perm.iter().enumerate() {
                let s = (img * c + p) * hw;
                let d = (img * c + j) * hw;
                out[d..d + hw].copy_from_slice(&src[s..s + hw]);
            }
        }
        let nx = x.node();
        let perm = perm.to_vec();
        Ok(self.record(&[x], vec![n, c, h, w], out, || {
            Box::new(move |g, sink| {
                sink.with(nx, |buf| {
                    for img in 0..n {
                        for (j, &p) in perm.iter().enumerate() {
                            let d = (img * c + p) * hw;
                            let s = (img * c + j) * hw;
                            for (b, &gv) in buf[d..d + hw].iter_mut().zip(&g[s..s + hw]) {
                                *b += gv;
                            }
                        }
                    }
                });
            })
        }))
    }

    /// Row-wise log-softmax of a 2-d tensor.
    pub fn log_softmax(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = x.dims2()?;
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            let row = &x.data()[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            for (o, &v) in out[i * k..(i + 1) * k].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let nx = x.node();
        let saved = std::sync::Arc::new(out.clone());
        Ok(self.record(&[x], vec![n, k], out, || {
            Box::new(move |g, sink| {
                sink.with(nx, |buf| {
                    for i in 0..n {
                        let gi = &g[i * k..(i + 1) * k];
                        let li = &saved[i * k..(i + 1) * k];
                        let gsum: T = gi.iter().copied().sum();
                        for ((b, &gv), &lv) in
                            buf[i * k..(i + 1) * k].iter_mut().zip(gi).zip(li)
                        {
                            *b += gv - lv.exp() * gsum;
                        }
                    }
                });
            })
        }))
    }

    /// Gather one element per row of a 2-d tensor: `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
        let (n, k) = x.dims2()?;
        if indices.len() != n || indices.iter().any(|&i| i >= k) {
            return Err(Error::InvalidArgument(format!(
                "pick indices invalid for [{n},{k}]"
            )));
        }
        let out: Vec<T> = indices
            .iter()
            .enumerate()
            .map(|(i, &j)| x.data()[i * k + j])
            .collect();
        let nx = x.node();
        let idx = indices.to_vec();
        Ok(self.record(&[x], vec![n], out, || {
            Box::new(move |g, sink| {
                sink.with(nx, |buf| {
                    for (i, &j) in idx.iter().enumerate() {
                        buf[i * k + j] += g[i];
                    }
                });
            })
        }))
    }

    /// Select one row of a 2-d table (embedding lookup): `[v,e] -> [1,e]`.
    pub fn embed_row(&mut self, table: &Tensor<T>, row: usize) -> Result<Tensor<T>> {
        let (v, e) = table.dims2()?;
        if row >= v {
            return Err(Error::InvalidArgument(format!(
                "embedding row {row} out of {v}"
            )));
        }
        let out = table.data()[row * e..(row + 1) * e].to_vec();
        let nt = table.node();
        Ok(self.record(&[table], vec![1, e], out, || {
            Box::new(move |g, sink| {
                sink.with(nt, |buf| {
                    for (b, &gv) in buf[row * e..(row + 1) * e].iter_mut().zip(g) {
                        *b += gv;
                    }
                });
            })
        }))
    }

    /// Mean negative log-likelihood of integer labels under row softmax.
    /// Gradient is `(softmax - onehot) / batch`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: &Tensor<T>,
        labels: &[usize],
    ) -> Result<Tensor<T>> {
        let (n, k) = logits.dims2()?;
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let bn = T::from_usize(n).unwrap();
        let mut loss = T::zero();
        let mut soft = vec![T::zero(); n * k];
        for i in 0..n {
            let row = &logits.data()[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (s, &v) in soft[i * k..(i + 1) * k].iter_mut().zip(row) {
                *s = (v - m).exp();
                denom += *s;
            }
            for s in &mut soft[i * k..(i + 1) * k] {
                *s = *s / denom;
            }
            loss += denom.ln() + m - row[labels[i]];
        }
        loss = loss / bn;
        let nl = logits.node();
        let labels = labels.to_vec();
        let soft = std::sync::Arc::new(soft);
        Ok(self.record(&[logits], vec![1], vec![loss], || {
            Box::new(move |g, sink| {
                let gv = g[0];
                sink.with(nl, |buf| {
                    for i in 0..n {
                        for j in 0..k {
                            let onehot = if labels[i] == j { T::one() } else { T::zero() };
                            buf[i * k + j] += gv * (soft[i * k + j] - onehot) / bn;
                        }
                    }
                });
            })
        }))
    }
}
