//! Forward recording and adjoints for each taped primitive.
//!
//! Forward methods call the eager tensor kernels and panic on shape errors:
//! taped code operates on shapes the caller has already validated, so a shape
//! mismatch here is a bug, not an input condition. Adjoints accumulate in
//! input-argument order and reuse the deterministic kernels, which keeps the
//! whole backward pass bit-stable.

use super::{Node, NodeId, Op, Var};
use crate::attention::{self, heads, Phi};
use crate::error::Result;
use crate::tensor::{lanes, Tensor};

impl<'t> Var<'t> {
    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let value = self.value().add(&rhs.value()).expect("add: shapes validated by caller");
        self.tape.push(value, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let value = self.value().sub(&rhs.value()).expect("sub: shapes validated by caller");
        self.tape.push(value, Op::Sub(self.id, rhs.id))
    }

    /// Elementwise product; `rhs` may be a leading-prefix shape of `self`.
    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let value = self.value().mul(&rhs.value()).expect("mul: shapes validated by caller");
        self.tape.push(value, Op::Mul(self.id, rhs.id))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let value = self.value().scale(factor);
        self.tape.push(value, Op::Scale(self.id, factor))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let value = self.value().matmul(&rhs.value()).expect("matmul: shapes validated by caller");
        self.tape.push(value, Op::Matmul(self.id, rhs.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.value().sigmoid();
        self.tape.push(value, Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.value().exp();
        self.tape.push(value, Op::Exp(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let value = self.value().relu();
        self.tape.push(value, Op::Relu(self.id))
    }

    pub fn elu_plus_one(self) -> Var<'t> {
        let value = self.value().elu_plus_one();
        self.tape.push(value, Op::EluPlusOne(self.id))
    }

    pub fn phi(self, phi: Phi) -> Var<'t> {
        match phi {
            Phi::Sigmoid => self.sigmoid(),
            Phi::EluPlusOne => self.elu_plus_one(),
            Phi::Relu => self.relu(),
        }
    }

    pub fn softmax_axis(self, axis: usize) -> Var<'t> {
        let value = self.value().softmax_axis(axis).expect("softmax_axis: axis validated by caller");
        self.tape.push(value, Op::SoftmaxAxis(self.id, axis))
    }

    pub fn cumsum_axis(self, axis: usize) -> Var<'t> {
        let value = self.value().cumsum_axis(axis).expect("cumsum_axis: axis validated by caller");
        self.tape.push(value, Op::CumsumAxis(self.id, axis))
    }

    /// `self / (rhs + eps)`; `rhs` may be a leading-prefix shape of `self`.
    pub fn stable_div(self, rhs: Var<'t>, eps: f64) -> Var<'t> {
        let value = self
            .value()
            .stable_div(&rhs.value(), eps)
            .expect("stable_div: shapes and denominator validated by caller");
        self.tape.push(value, Op::StableDiv(self.id, rhs.id, eps))
    }

    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let value = self
            .value()
            .layer_norm(&gamma.value(), &beta.value(), eps)
            .expect("layer_norm: shapes validated by caller");
        self.tape.push(value, Op::LayerNorm(self.id, gamma.id, beta.id, eps))
    }

    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let value = self.value().sum_axis(axis).expect("sum_axis: axis validated by caller");
        self.tape.push(value, Op::SumAxis(self.id, axis))
    }

    pub fn broadcast_axis(self, axis: usize, len: usize) -> Var<'t> {
        let value =
            self.value().broadcast_axis(axis, len).expect("broadcast_axis: axis validated by caller");
        self.tape.push(value, Op::BroadcastAxis(self.id, axis))
    }

    pub fn transpose_last2(self) -> Var<'t> {
        let value = self.value().transpose_last2().expect("transpose_last2: rank validated by caller");
        self.tape.push(value, Op::TransposeLast2(self.id))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t> {
        let value = self.value().reshape(shape).expect("reshape: element count validated by caller");
        self.tape.push(value, Op::Reshape(self.id))
    }

    pub fn split_heads(self, heads: usize) -> Var<'t> {
        let value = heads::split_heads(&self.value(), heads).expect("split_heads: validated by caller");
        self.tape.push(value, Op::Reshape(self.id))
    }

    pub fn merge_heads(self) -> Var<'t> {
        let value = heads::merge_heads(&self.value()).expect("merge_heads: validated by caller");
        self.tape.push(value, Op::Reshape(self.id))
    }

    pub fn contract_seq(self, rhs: Var<'t>) -> Var<'t> {
        let value = heads::contract_seq(&self.value(), &rhs.value())
            .expect("contract_seq: shapes validated by caller");
        self.tape.push(value, Op::ContractSeq(self.id, rhs.id))
    }

    pub fn apply_per_head(self, rhs: Var<'t>) -> Var<'t> {
        let value = heads::apply_per_head(&self.value(), &rhs.value())
            .expect("apply_per_head: shapes validated by caller");
        self.tape.push(value, Op::ApplyPerHead(self.id, rhs.id))
    }

    pub fn scores_qk(self, keys: Var<'t>) -> Var<'t> {
        let value =
            heads::scores_qk(&self.value(), &keys.value()).expect("scores_qk: shapes validated by caller");
        self.tape.push(value, Op::ScoresQk(self.id, keys.id))
    }

    pub fn attn_apply_v(self, values: Var<'t>) -> Var<'t> {
        let value = heads::attn_apply_v(&self.value(), &values.value())
            .expect("attn_apply_v: shapes validated by caller");
        self.tape.push(value, Op::AttnApplyV(self.id, values.id))
    }

    pub fn causal_dot_product(self, keys: Var<'t>, values: Var<'t>) -> Var<'t> {
        let value = attention::causal_dot_product(&self.value(), &keys.value(), &values.value())
            .expect("causal_dot_product: shapes validated by caller");
        self.tape.push(value, Op::CausalDotProduct(self.id, keys.id, values.id))
    }

    pub fn causal_competition(self) -> Var<'t> {
        let value = attention::causal_competition(&self.value())
            .expect("causal_competition: shape validated by caller");
        self.tape.push(value, Op::CausalCompetition(self.id))
    }

    /// Row lookup into a `[rows, d]` table; ids may repeat.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'t> {
        let table = self.value();
        assert_eq!(table.rank(), 2, "gather_rows: table must be rank 2");
        let (rows, d) = (table.shape()[0], table.shape()[1]);
        for &id in ids {
            assert!(id < rows, "gather_rows: row {id} out of range for table with {rows} rows");
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data, table.dtype()).expect("gather_rows: shape");
        self.tape.push(value, Op::GatherRows(self.id, ids.to_vec()))
    }

    /// Summed token-level cross-entropy over masked positions of `[n, v]`
    /// logits. Returns a scalar; divide by the mask count for a mean.
    pub fn cross_entropy(self, targets: &[usize], mask: &[bool]) -> Var<'t> {
        let logits = self.value();
        assert_eq!(logits.rank(), 2, "cross_entropy: logits must be rank 2");
        let (n, v) = (logits.shape()[0], logits.shape()[1]);
        assert_eq!(targets.len(), n, "cross_entropy: one target per row");
        assert_eq!(mask.len(), n, "cross_entropy: one mask entry per row");
        let mut total = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            assert!(targets[i] < v, "cross_entropy: target {} out of range for {v} classes", targets[i]);
            let row = &logits.data()[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &x in row {
                sum += (x - max).exp();
            }
            total += max + sum.ln() - row[targets[i]];
        }
        let value = Tensor::new(vec![1], vec![total], logits.dtype()).expect("cross_entropy: scalar");
        let op = Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), mask: mask.to_vec() };
        self.tape.push(value, op)
    }

    pub fn sum_all(self) -> Var<'t> {
        let input = self.value();
        let value = Tensor::new(vec![1], vec![input.sum_all()], input.dtype()).expect("sum_all: scalar");
        self.tape.push(value, Op::SumAll(self.id))
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(existing) => existing.add(&contribution)?,
        None => contribution,
    });
    Ok(())
}

/// Map `grad` of `nodes[id]` to gradient contributions for its inputs.
pub(crate) fn push_adjoints(
    nodes: &[Node],
    id: NodeId,
    grad: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let val = |i: NodeId| &nodes[i].value;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf { .. } => {}
        Op::Add(a, b) => {
            accumulate(&mut grads[*a], grad.clone())?;
            accumulate(&mut grads[*b], grad.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(&mut grads[*a], grad.clone())?;
            accumulate(&mut grads[*b], grad.scale(-1.0))?;
        }
        Op::Mul(a, b) => {
            accumulate(&mut grads[*a], grad.mul(val(*b))?)?;
            accumulate(&mut grads[*b], grad.mul(val(*a))?.sum_trailing_to(val(*b).shape())?)?;
        }
        Op::Scale(a, factor) => {
            accumulate(&mut grads[*a], grad.scale(*factor))?;
        }
        Op::Matmul(a, b) => {
            accumulate(&mut grads[*a], grad.matmul(&val(*b).transpose_last2()?)?)?;
            accumulate(&mut grads[*b], val(*a).transpose_last2()?.matmul(grad)?)?;
        }
        Op::Sigmoid(a) => {
            // dy/dx = y (1 - y), taken from the stored output.
            let mut data = Vec::with_capacity(out.len());
            for (g, y) in grad.data().iter().zip(out.data()) {
                data.push(g * y * (1.0 - y));
            }
            accumulate(&mut grads[*a], Tensor::new(out.shape().to_vec(), data, grad.dtype())?)?;
        }
        Op::Exp(a) => {
            accumulate(&mut grads[*a], grad.mul(out)?)?;
        }
        Op::Relu(a) => {
            let x = val(*a);
            let mut data = Vec::with_capacity(out.len());
            for (g, xv) in grad.data().iter().zip(x.data()) {
                data.push(if *xv > 0.0 { *g } else { 0.0 });
            }
            accumulate(&mut grads[*a], Tensor::new(out.shape().to_vec(), data, grad.dtype())?)?;
        }
        Op::EluPlusOne(a) => {
            // y = exp(x) for x < 0 (slope y), y = x + 1 otherwise (slope 1).
            let x = val(*a);
            let mut data = Vec::with_capacity(out.len());
            for ((g, xv), y) in grad.data().iter().zip(x.data()).zip(out.data()) {
                data.push(if *xv < 0.0 { g * y } else { *g });
            }
            accumulate(&mut grads[*a], Tensor::new(out.shape().to_vec(), data, grad.dtype())?)?;
        }
        Op::SoftmaxAxis(a, axis) => {
            // dx = y * (g - sum(g * y, axis)) with the sum broadcast back.
            let summed = grad.mul(out)?.sum_axis(*axis)?;
            let back = if out.rank() == 1 {
                Tensor::full(out.shape().to_vec(), summed.data()[0])?
            } else {
                summed.broadcast_axis(*axis, out.shape()[*axis])?
            };
            accumulate(&mut grads[*a], out.mul(&grad.sub(&back)?)?)?;
        }
        Op::CumsumAxis(a, axis) => {
            // Adjoint of an inclusive prefix sum: suffix sums along the axis.
            let (outer, len, inner) = lanes(out.shape(), *axis);
            let mut data = vec![0.0; out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut acc = 0.0;
                    for s in (0..len).rev() {
                        let idx = (o * len + s) * inner + i;
                        acc += grad.data()[idx];
                        data[idx] = acc;
                    }
                }
            }
            accumulate(&mut grads[*a], Tensor::new(out.shape().to_vec(), data, grad.dtype())?)?;
        }
        Op::StableDiv(a, b, eps) => {
            // y = a / (b + eps): da = g / (b + eps), db = -sum(g * y / (b + eps)).
            accumulate(&mut grads[*a], grad.stable_div(val(*b), *eps)?)?;
            let shrunk = grad.mul(out)?.stable_div(val(*b), *eps)?;
            accumulate(&mut grads[*b], shrunk.sum_trailing_to(val(*b).shape())?.scale(-1.0))?;
        }
        Op::LayerNorm(x_id, gamma_id, beta_id, eps) => {
            let (dx, dgamma, dbeta) = layer_norm_backward(val(*x_id), val(*gamma_id), grad, *eps)?;
            accumulate(&mut grads[*x_id], dx)?;
            accumulate(&mut grads[*gamma_id], dgamma)?;
            accumulate(&mut grads[*beta_id], dbeta)?;
        }
        Op::SumAxis(a, axis) => {
            let in_shape = val(*a).shape();
            let (outer, len, inner) = lanes(in_shape, *axis);
            let mut data = vec![0.0; val(*a).len()];
            for o in 0..outer {
                for s in 0..len {
                    for i in 0..inner {
                        data[(o * len + s) * inner + i] = grad.data()[o * inner + i];
                    }
                }
            }
            accumulate(&mut grads[*a], Tensor::new(in_shape.to_vec(), data, grad.dtype())?)?;
        }
        Op::BroadcastAxis(a, axis) => {
            accumulate(&mut grads[*a], grad.sum_axis(*axis)?)?;
        }
        Op::TransposeLast2(a) => {
            accumulate(&mut grads[*a], grad.transpose_last2()?)?;
        }
        Op::Reshape(a) => {
            accumulate(&mut grads[*a], grad.reshape(val(*a).shape().to_vec())?)?;
        }
        Op::ContractSeq(a, b) => {
            // y[h,e,f] = sum_n a[n,h,e] b[n,h,f].
            accumulate(&mut grads[*a], heads::apply_per_head(val(*b), &grad.transpose_last2()?)?)?;
            accumulate(&mut grads[*b], heads::apply_per_head(val(*a), grad)?)?;
        }
        Op::ApplyPerHead(a, m) => {
            // y[n,h,f] = sum_e a[n,h,e] m[h,e,f].
            accumulate(&mut grads[*a], heads::apply_per_head(grad, &val(*m).transpose_last2()?)?)?;
            accumulate(&mut grads[*m], heads::contract_seq(val(*a), grad)?)?;
        }
        Op::ScoresQk(q, k) => {
            // y[h,i,j] = sum_e q[i,h,e] k[j,h,e].
            accumulate(&mut grads[*q], heads::attn_apply_v(grad, val(*k))?)?;
            accumulate(&mut grads[*k], heads::attn_apply_v(&grad.transpose_last2()?, val(*q))?)?;
        }
        Op::AttnApplyV(p, v) => {
            // y[i,h,e] = sum_j p[h,i,j] v[j,h,e].
            accumulate(&mut grads[*p], heads::scores_qk(grad, val(*v))?)?;
            accumulate(&mut grads[*v], heads::attn_apply_v(&val(*p).transpose_last2()?, grad)?)?;
        }
        Op::CausalDotProduct(q, k, v) => {
            let (dq, dk, dv) = causal_dot_product_backward(val(*q), val(*k), val(*v), grad)?;
            accumulate(&mut grads[*q], dq)?;
            accumulate(&mut grads[*k], dk)?;
            accumulate(&mut grads[*v], dv)?;
        }
        Op::CausalCompetition(a) => {
            accumulate(&mut grads[*a], causal_competition_backward(out, grad)?)?;
        }
        Op::GatherRows(table, ids) => {
            let shape = val(*table).shape().to_vec();
            let d = shape[1];
            let mut data = vec![0.0; val(*table).len()];
            for (row, &id) in ids.iter().enumerate() {
                for c in 0..d {
                    data[id * d + c] += grad.data()[row * d + c];
                }
            }
            accumulate(&mut grads[*table], Tensor::new(shape, data, grad.dtype())?)?;
        }
        Op::CrossEntropy { logits, targets, mask } => {
            // d nll_i / d logits_i = softmax(logits_i) - onehot(t_i), masked.
            let l = val(*logits);
            let (n, v) = (l.shape()[0], l.shape()[1]);
            let g = grad.data()[0];
            let mut data = vec![0.0; n * v];
            for i in 0..n {
                if !mask[i] {
                    continue;
                }
                let row = &l.data()[i * v..(i + 1) * v];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for &x in row {
                    sum += (x - max).exp();
                }
                for c in 0..v {
                    let soft = (row[c] - max).exp() / sum;
                    data[i * v + c] = g * (soft - if c == targets[i] { 1.0 } else { 0.0 });
                }
            }
            accumulate(&mut grads[*logits], Tensor::new(vec![n, v], data, grad.dtype())?)?;
        }
        Op::SumAll(a) => {
            accumulate(&mut grads[*a], Tensor::full(val(*a).shape().to_vec(), grad.data()[0])?)?;
        }
    }
    Ok(())
}

/// Backward for normalization over the last axis with affine output.
///
/// With xhat the normalized row, ghat = gamma * g, and sigma the smoothed
/// standard deviation: dx = (ghat - mean(ghat) - xhat * mean(ghat * xhat)) / sigma.
fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    grad: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = *x.shape().last().expect("layer_norm: rank >= 1");
    let rows = x.len() / d;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let gr = &grad.data()[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let sigma = (var + eps).sqrt();
        let mut ghat = vec![0.0; d];
        let mut xhat = vec![0.0; d];
        let mut mean_ghat = 0.0;
        let mut mean_gx = 0.0;
        for c in 0..d {
            xhat[c] = (xr[c] - mean) / sigma;
            ghat[c] = gamma.data()[c] * gr[c];
            mean_ghat += ghat[c];
            mean_gx += ghat[c] * xhat[c];
            dgamma[c] += gr[c] * xhat[c];
            dbeta[c] += gr[c];
        }
        mean_ghat /= d as f64;
        mean_gx /= d as f64;
        for c in 0..d {
            dx[r * d + c] = (ghat[c] - mean_ghat - xhat[c] * mean_gx) / sigma;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx, grad.dtype())?,
        Tensor::new(vec![d], dgamma, grad.dtype())?,
        Tensor::new(vec![d], dbeta, grad.dtype())?,
    ))
}

/// Backward for the causal contraction out_i = q_i . sum_{j<=i} k_j (x) v_j.
///
/// dq uses a forward scan holding the running key-value state; dk and dv use
/// a backward scan holding T_j = sum_{i>=j} q_i (x) g_i. Both scans walk the
/// sequence in a fixed order, so the result is deterministic.
fn causal_dot_product_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, h, e) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let f = v.shape()[2];
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    for hh in 0..h {
        let mut state = vec![0.0; e * f]; // running sum of k_j (x) v_j
        for i in 0..n {
            let kr = &k.data()[(i * h + hh) * e..(i * h + hh + 1) * e];
            let vr = &v.data()[(i * h + hh) * f..(i * h + hh + 1) * f];
            for a in 0..e {
                for b in 0..f {
                    state[a * f + b] += kr[a] * vr[b];
                }
            }
            let gr = &grad.data()[(i * h + hh) * f..(i * h + hh + 1) * f];
            for a in 0..e {
                let mut acc = 0.0;
                for b in 0..f {
                    acc += gr[b] * state[a * f + b];
                }
                dq[(i * h + hh) * e + a] = acc;
            }
        }
        let mut tail = vec![0.0; e * f]; // T_j = sum_{i>=j} q_i (x) g_i
        for j in (0..n).rev() {
            let qr = &q.data()[(j * h + hh) * e..(j * h + hh + 1) * e];
            let gr = &grad.data()[(j * h + hh) * f..(j * h + hh + 1) * f];
            for a in 0..e {
                for b in 0..f {
                    tail[a * f + b] += qr[a] * gr[b];
                }
            }
            let kr = &k.data()[(j * h + hh) * e..(j * h + hh + 1) * e];
            let vr = &v.data()[(j * h + hh) * f..(j * h + hh + 1) * f];
            for a in 0..e {
                let mut acc = 0.0;
                for b in 0..f {
                    acc += tail[a * f + b] * vr[b];
                }
                dk[(j * h + hh) * e + a] = acc;
            }
            for b in 0..f {
                let mut acc = 0.0;
                for a in 0..e {
                    acc += kr[a] * tail[a * f + b];
                }
                dv[(j * h + hh) * f + b] = acc;
            }
        }
    }
    Ok((
        Tensor::new(q.shape().to_vec(), dq, grad.dtype())?,
        Tensor::new(k.shape().to_vec(), dk, grad.dtype())?,
        Tensor::new(v.shape().to_vec(), dv, grad.dtype())?,
    ))
}

/// Backward for the causal rescaled softmax comp_t = D_t exp(x_t) / cusum.
///
/// Each prefix denominator couples x_r to every later output. With
/// w_t = comp_t / D_t (the plain prefix-softmax weight), the suffix quantity
/// T_r = g_r comp_r + (1 - w_{r+1}) T_{r+1} collects those couplings, and
/// dx_r = g_r comp_r - w_r T_r. Everything is recovered from the stored
/// output; no denominators need to be kept.
fn causal_competition_backward(comp: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let (n, h) = (comp.shape()[0], comp.shape()[1]);
    let mut dx = vec![0.0; comp.len()];
    for hh in 0..h {
        let mut tail = 0.0; // T_{r+1}
        let mut w_next = 0.0; // w_{r+1}; unused while tail is zero
        for r in (0..n).rev() {
            let idx = r * h + hh;
            let w = comp.data()[idx] / (r + 1) as f64;
            let own = grad.data()[idx] * comp.data()[idx];
            let t = own + (1.0 - w_next) * tail;
            dx[idx] = own - w * t;
            tail = t;
            w_next = w;
        }
    }
    Tensor::new(comp.shape().to_vec(), dx, grad.dtype())
}
