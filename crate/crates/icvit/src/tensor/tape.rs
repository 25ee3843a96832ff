//! Define-by-run gradient tape.
//!
//! Forward calls record nodes; [`Tape::backward`] walks them in reverse.
//! The tape is rebuilt each step, so there is no graph caching and no
//! cross-step state. Saved activations (softmax outputs, attention
//! weights, norm statistics) live inside the op variant that needs them.

use super::{
    gelu_grad_scalar, gelu_scalar, matmul_at_kernel, matmul_bt_kernel, matmul_kernel,
    softmax_rows, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    /// Row-broadcast add: `x[r, :] + bias`.
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    Gelu { x: Var },
    /// Softmax over the last axis; the node value doubles as saved output.
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean_rstd: Vec<(f32, f32)> },
    /// Row gather; backward scatter-adds. Also used for embedding lookup.
    GatherRows { x: Var, indices: Vec<u32> },
    ConcatRows { parts: Vec<Var> },
    /// Block-diagonal multi-head self-attention over `groups` sequences of
    /// equal length. `attn` holds post-softmax weights, `[g][h][L,L]` flat.
    Mhsa { qkv: Var, heads: usize, groups: usize, attn: Vec<f32> },
    /// Mean over rows of −log softmax(row)[label].
    CrossEntropy { logits: Var, labels: Vec<u32>, probs: Vec<f32> },
    /// Mean over rows of −Σ target·log softmax(row·inv_temp). Targets are
    /// plain values (teacher side) and never receive gradient.
    SoftTargetCe { logits: Var, targets: Tensor, inv_temp: f32, probs: Vec<f32> },
    /// Row-wise x/‖x‖.
    L2NormRows { x: Var, norms: Vec<f32> },
    Sum { x: Var },
    /// Same data, new shape.
    Reshape { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copy of `v`'s value as a fresh constant: gradient stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0f32; m * n];
        matmul_kernel(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }.validated(), Op::Matmul { a, b }, rg))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let w = tx.last_dim();
        if tb.numel() != w {
            return Err(Error::Shape(format!(
                "add_bias: bias len {} vs width {}",
                tb.numel(),
                w
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(w) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        Ok(self.push(Tensor { shape, data }, Op::AddBias { x, bias }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|v| v * c).collect();
        let shape = tx.shape().to_vec();
        let rg = self.requires_grad(x);
        self.push(Tensor { shape, data }, Op::Scale { x, c }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| gelu_scalar(v)).collect();
        let shape = tx.shape().to_vec();
        let rg = self.requires_grad(x);
        self.push(Tensor { shape, data }, Op::Gelu { x }, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let w = tx.last_dim();
        let mut data = tx.data().to_vec();
        softmax_rows(&mut data, w);
        let shape = tx.shape().to_vec();
        let rg = self.requires_grad(x);
        self.push(Tensor { shape, data }, Op::Softmax { x }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let w = tx.last_dim();
        if tg.numel() != w || tb.numel() != w {
            return Err(Error::Shape(format!(
                "layer_norm: affine len {}/{} vs width {}",
                tg.numel(),
                tb.numel(),
                w
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Argument("layer_norm: eps must be positive".into()));
        }
        let rows = tx.rows();
        let mut data = vec![0.0f32; tx.numel()];
        let mut mean_rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f32>() / w as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / w as f32;
            let rstd = 1.0 / (var + eps).sqrt();
            mean_rstd.push((mean, rstd));
            let out = &mut data[r * w..(r + 1) * w];
            for i in 0..w {
                out[i] = (row[i] - mean) * rstd * tg.data()[i] + tb.data()[i];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            Tensor { shape, data },
            Op::LayerNorm { x, gamma, beta, mean_rstd },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[u32]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let w = tx.last_dim();
        let rows = tx.rows();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i as usize >= rows {
                return Err(Error::Argument(format!(
                    "gather_rows: index {} out of {} rows",
                    i, rows
                )));
            }
            data.extend_from_slice(tx.row(i as usize));
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor { shape: vec![indices.len(), w], data },
            Op::GatherRows { x, indices: indices.to_vec() },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_rows: no parts".into()));
        }
        let w = self.nodes[parts[0].0].value.last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = &self.nodes[p.0].value;
            if tp.last_dim() != w {
                return Err(Error::Shape(format!(
                    "concat_rows: width {} vs {}",
                    tp.last_dim(),
                    w
                )));
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            Tensor { shape: vec![rows, w], data },
            Op::ConcatRows { parts: parts.to_vec() },
            rg,
        ))
    }

    /// Multi-head self-attention over `groups` equal-length sequences laid
    /// out contiguously in `qkv` (`[groups·len, 3·dim]`). Attention never
    /// crosses group boundaries.
    pub fn mhsa(&mut self, qkv: Var, heads: usize, groups: usize) -> Result<Var> {
        let t = &self.nodes[qkv.0].value;
        let three_d = t.last_dim();
        if three_d % 3 != 0 {
            return Err(Error::Shape(format!("mhsa: qkv width {three_d} not 3·dim")));
        }
        let dim = three_d / 3;
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Shape(format!("mhsa: dim {dim} not divisible by {heads} heads")));
        }
        let total_rows = t.rows();
        if groups == 0 || total_rows % groups != 0 {
            return Err(Error::Shape(format!(
                "mhsa: {total_rows} rows not divisible into {groups} groups"
            )));
        }
        let len = total_rows / groups;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let qkv_data = t.data();
        let mut out = vec![0.0f32; total_rows * dim];
        let mut attn = vec![0.0f32; groups * heads * len * len];

        for g in 0..groups {
            let base = g * len;
            for h in 0..heads {
                let q_off = h * dh;
                let k_off = dim + h * dh;
                let v_off = 2 * dim + h * dh;
                let a_base = (g * heads + h) * len * len;
                // scores, then row softmax
                for r in 0..len {
                    let q = &qkv_data[(base + r) * three_d + q_off..][..dh];
                    let a_row = &mut attn[a_base + r * len..a_base + (r + 1) * len];
                    for c in 0..len {
                        let k = &qkv_data[(base + c) * three_d + k_off..][..dh];
                        let mut acc = 0.0f32;
                        for (qv, kv) in q.iter().zip(k) {
                            acc += qv * kv;
                        }
                        a_row[c] = acc * scale;
                    }
                }
                softmax_rows(&mut attn[a_base..a_base + len * len], len);
                // out = A · V
                for r in 0..len {
                    let a_row = &attn[a_base + r * len..a_base + (r + 1) * len];
                    let o = &mut out[(base + r) * dim + h * dh..][..dh];
                    for c in 0..len {
                        let w = a_row[c];
                        let v = &qkv_data[(base + c) * three_d + v_off..][..dh];
                        for (ov, vv) in o.iter_mut().zip(v) {
                            *ov += w * vv;
                        }
                    }
                }
            }
        }
        let rg = self.requires_grad(qkv);
        Ok(self.push(
            Tensor { shape: vec![total_rows, dim], data: out },
            Op::Mhsa { qkv, heads, groups, attn },
            rg,
        ))
    }

    /// Post-softmax attention weights of an [`Op::Mhsa`] node, per head:
    /// `heads` matrices of `[groups·len, len]` ... caller reshapes.
    pub fn mhsa_attention(&self, v: Var) -> Option<(&[f32], usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Mhsa { heads, groups, attn, .. } => Some((attn.as_slice(), *heads, *groups)),
            _ => None,
        }
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let k = t.last_dim();
        let rows = t.rows();
        if labels.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                rows
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Argument(format!(
                "cross_entropy: label {bad} out of range [0, {k})"
            )));
        }
        let mut probs = t.data().to_vec();
        softmax_rows(&mut probs, k);
        let mut loss = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            loss -= (probs[r * k + label as usize].max(f32::MIN_POSITIVE) as f64).ln();
        }
        let loss = (loss / rows as f64) as f32;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Distillation loss against fixed target distributions. `inv_temp`
    /// scales the logits before softmax (student sharpening).
    pub fn soft_target_ce(&mut self, logits: Var, targets: Tensor, inv_temp: f32) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "soft_target_ce: logits {:?} vs targets {:?}",
                t.shape(),
                targets.shape()
            )));
        }
        if !inv_temp.is_finite() || inv_temp <= 0.0 {
            return Err(Error::Argument("soft_target_ce: temperature must be positive".into()));
        }
        let k = t.last_dim();
        let rows = t.rows();
        let mut probs: Vec<f32> = t.data().iter().map(|v| v * inv_temp).collect();
        softmax_rows(&mut probs, k);
        let mut loss = 0.0f64;
        for r in 0..rows {
            for c in 0..k {
                let tv = targets.data()[r * k + c] as f64;
                if tv != 0.0 {
                    loss -= tv * (probs[r * k + c].max(f32::MIN_POSITIVE) as f64).ln();
                }
            }
        }
        let loss = (loss / rows as f64) as f32;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftTargetCe { logits, targets, inv_temp, probs },
            rg,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let w = tx.last_dim();
        let rows = tx.rows();
        let mut data = vec![0.0f32; tx.numel()];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            norms.push(norm);
            for (o, v) in data[r * w..(r + 1) * w].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.requires_grad(x);
        self.push(Tensor { shape, data }, Op::L2NormRows { x, norms }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let total: f64 = tx.data().iter().map(|&v| v as f64).sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total as f32), Op::Sum { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} to {:?}",
                tx.shape(),
                shape
            )));
        }
        let data = tx.data().to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor { shape, data }, Op::Reshape { x }, rg))
    }

    /// Run reverse-mode accumulation from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            self.propagate(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut Vec<Option<Vec<f32>>>,
        target: Var,
        update: impl FnOnce(&mut [f32]),
    ) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let buf = grads[target.0]
            .get_or_insert_with(|| vec![0.0f32; self.nodes[target.0].value.numel()]);
        update(buf);
    }

    fn propagate(&self, id: usize, gout: &[f32], grads: &mut Vec<Option<Vec<f32>>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                self.accumulate(grads, *a, |ga| {
                    matmul_bt_kernel(gout, tb.data(), ga, m, n, k);
                });
                self.accumulate(grads, *b, |gb| {
                    matmul_at_kernel(ta.data(), gout, gb, m, k, n);
                });
            }
            Op::AddBias { x, bias } => {
                let w = self.nodes[bias.0].value.numel();
                self.accumulate(grads, *x, |gx| {
                    for (g, o) in gx.iter_mut().zip(gout) {
                        *g += o;
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for row in gout.chunks(w) {
                        for (g, o) in gb.iter_mut().zip(row) {
                            *g += o;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                for t in [a, b] {
                    self.accumulate(grads, *t, |g| {
                        for (gv, o) in g.iter_mut().zip(gout) {
                            *gv += o;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.accumulate(grads, *a, |g| {
                    for ((gv, o), bv) in g.iter_mut().zip(gout).zip(tb.data()) {
                        *gv += o * bv;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((gv, o), av) in g.iter_mut().zip(gout).zip(ta.data()) {
                        *gv += o * av;
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, |g| {
                    for (gv, o) in g.iter_mut().zip(gout) {
                        *gv += o * c;
                    }
                });
            }
            Op::Gelu { x } => {
                let tx = &self.nodes[x.0].value;
                self.accumulate(grads, *x, |g| {
                    for ((gv, o), &v) in g.iter_mut().zip(gout).zip(tx.data()) {
                        *gv += o * gelu_grad_scalar(v);
                    }
                });
            }
            Op::Softmax { x } => {
                let y = &self.nodes[id].value;
                let w = y.last_dim();
                self.accumulate(grads, *x, |g| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let or = &gout[r * w..(r + 1) * w];
                        let dot: f32 = yr.iter().zip(or).map(|(a, b)| a * b).sum();
                        for i in 0..w {
                            g[r * w + i] += yr[i] * (or[i] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, mean_rstd } => {
                let (tx, tg) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value);
                let w = tx.last_dim();
                let rows = tx.rows();
                self.accumulate(grads, *beta, |gb| {
                    for row in gout.chunks(w) {
                        for (g, o) in gb.iter_mut().zip(row) {
                            *g += o;
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| {
                    for r in 0..rows {
                        let (mean, rstd) = mean_rstd[r];
                        let xr = tx.row(r);
                        let or = &gout[r * w..(r + 1) * w];
                        for i in 0..w {
                            gg[i] += or[i] * (xr[i] - mean) * rstd;
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let (mean, rstd) = mean_rstd[r];
                        let xr = tx.row(r);
                        let or = &gout[r * w..(r + 1) * w];
                        // dxhat, then the standard two-mean reduction
                        let mut sum_dxhat = 0.0f32;
                        let mut sum_dxhat_xhat = 0.0f32;
                        for i in 0..w {
                            let xhat = (xr[i] - mean) * rstd;
                            let dxhat = or[i] * tg.data()[i];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_w = 1.0 / w as f32;
                        for i in 0..w {
                            let xhat = (xr[i] - mean) * rstd;
                            let dxhat = or[i] * tg.data()[i];
                            gx[r * w + i] += rstd
                                * (dxhat - inv_w * sum_dxhat - xhat * inv_w * sum_dxhat_xhat);
                        }
                    }
                });
            }
            Op::GatherRows { x, indices } => {
                let w = self.nodes[x.0].value.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for (i, &src) in indices.iter().enumerate() {
                        let dst = &mut gx[src as usize * w..(src as usize + 1) * w];
                        for (g, o) in dst.iter_mut().zip(&gout[i * w..(i + 1) * w]) {
                            *g += o;
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let numel = self.nodes[p.0].value.numel();
                    self.accumulate(grads, p, |g| {
                        for (gv, o) in g.iter_mut().zip(&gout[offset..offset + numel]) {
                            *gv += o;
                        }
                    });
                    offset += numel;
                }
            }
            Op::Mhsa { qkv, heads, groups, attn } => {
                let t = &self.nodes[qkv.0].value;
                let three_d = t.last_dim();
                let dim = three_d / 3;
                let len = t.rows() / groups;
                let dh = dim / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let qkv_data = t.data();
                let (heads, groups) = (*heads, *groups);
                self.accumulate(grads, *qkv, |gq| {
                    let mut d_attn = vec![0.0f32; len * len];
                    let mut d_scores = vec![0.0f32; len * len];
                    for g in 0..groups {
                        let base = g * len;
                        for h in 0..heads {
                            let q_off = h * dh;
                            let k_off = dim + h * dh;
                            let v_off = 2 * dim + h * dh;
                            let a_base = (g * heads + h) * len * len;
                            let a = &attn[a_base..a_base + len * len];
                            // dV and dA
                            d_attn.iter_mut().for_each(|v| *v = 0.0);
                            for r in 0..len {
                                let dout = &gout[(base + r) * dim + h * dh..][..dh];
                                for c in 0..len {
                                    let v = &qkv_data[(base + c) * three_d + v_off..][..dh];
                                    let mut acc = 0.0f32;
                                    for (ov, vv) in dout.iter().zip(v) {
                                        acc += ov * vv;
                                    }
                                    d_attn[r * len + c] = acc;
                                    let w = a[r * len + c];
                                    let gv = &mut gq[(base + c) * three_d + v_off..][..dh];
                                    for (gvv, ov) in gv.iter_mut().zip(dout) {
                                        *gvv += w * ov;
                                    }
                                }
                            }
                            // softmax backward rows: dS = A ⊙ (dA − Σ dA·A)
                            for r in 0..len {
                                let ar = &a[r * len..(r + 1) * len];
                                let dar = &d_attn[r * len..(r + 1) * len];
                                let dot: f32 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
                                let dsr = &mut d_scores[r * len..(r + 1) * len];
                                for c in 0..len {
                                    dsr[c] = ar[c] * (dar[c] - dot) * scale;
                                }
                            }
                            // dQ += dS·K ; dK += dSᵀ·Q
                            for r in 0..len {
                                let dsr = &d_scores[r * len..(r + 1) * len];
                                let q = &qkv_data[(base + r) * three_d + q_off..][..dh];
                                for c in 0..len {
                                    let ds = dsr[c];
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let k = &qkv_data[(base + c) * three_d + k_off..][..dh];
                                    let gqr = &mut gq[(base + r) * three_d + q_off..][..dh];
                                    for (gv, kv) in gqr.iter_mut().zip(k) {
                                        *gv += ds * kv;
                                    }
                                    let gkc = &mut gq[(base + c) * three_d + k_off..][..dh];
                                    for (gv, qv) in gkc.iter_mut().zip(q) {
                                        *gv += ds * qv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.nodes[logits.0].value.last_dim();
                let rows = labels.len();
                let g = gout[0] / rows as f32;
                self.accumulate(grads, *logits, |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let indicator = if c == label as usize { 1.0 } else { 0.0 };
                            gl[r * k + c] += g * (probs[r * k + c] - indicator);
                        }
                    }
                });
            }
            Op::SoftTargetCe { logits, targets, inv_temp, probs } => {
                let k = self.nodes[logits.0].value.last_dim();
                let rows = self.nodes[logits.0].value.rows();
                let g = gout[0] / rows as f32;
                self.accumulate(grads, *logits, |gl| {
                    for r in 0..rows {
                        let t_row = &targets.data()[r * k..(r + 1) * k];
                        let t_sum: f32 = t_row.iter().sum();
                        for c in 0..k {
                            gl[r * k + c] +=
                                g * inv_temp * (probs[r * k + c] * t_sum - t_row[c]);
                        }
                    }
                });
            }
            Op::L2NormRows { x, norms } => {
                let y = &self.nodes[id].value;
                let w = y.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let or = &gout[r * w..(r + 1) * w];
                        let dot: f32 = yr.iter().zip(or).map(|(a, b)| a * b).sum();
                        let inv_n = 1.0 / norms[r];
                        for i in 0..w {
                            gx[r * w + i] += (or[i] - yr[i] * dot) * inv_n;
                        }
                    }
                });
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, |g| {
                    for gv in g.iter_mut() {
                        *gv += gout[0];
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, |g| {
                    for (gv, o) in g.iter_mut().zip(gout) {
                        *gv += o;
                    }
                });
            }
        }
    }
}

impl Tensor {
    fn validated(self) -> Tensor {
        debug_assert!(
            self.data.iter().all(|v| !v.is_nan()),
            "NaN produced in forward op"
        );
        self
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct the same scalar-valued graph from the input leaf
/// every call. Returns the worst relative error over all coordinates so
/// callers can assert their own tolerance.
pub fn finite_diff_rel_err(
    x0: &[f32],
    h: f32,
    build: impl Fn(&mut Tape, Var) -> Var,
) -> f64 {
    let shape = vec![1, x0.len()];
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(shape.clone(), x0.to_vec()).unwrap(), true);
    let root = build(&mut tape, x);
    let grads = tape.backward(root).expect("backward failed in finite-diff check");
    let analytic = grads.get(x).expect("input should receive gradient").to_vec();

    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let eval = |delta: f32| -> f64 {
            let mut xs = x0.to_vec();
            xs[i] += delta;
            let mut t = Tape::new();
            let xv = t.leaf(Tensor::new(shape.clone(), xs).unwrap(), true);
            let r = build(&mut t, xv);
            t.value(r).data()[0] as f64
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h as f64);
        let denom = numeric.abs().max(analytic[i].abs() as f64).max(1e-3);
        let rel = (analytic[i] as f64 - numeric).abs() / denom;
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn t2(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut tape = Tape::new();
        let eye = tape.leaf(t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]), false);
        let m = tape.leaf(t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]), false);
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let sel = tape.leaf(t2(1, 2, vec![1.0, 0.0]), false);
        let col = tape.leaf(t2(2, 1, vec![5.0, -7.0]), false);
        let picked = tape.matmul(sel, col).unwrap();
        assert_eq!(tape.value(picked).data(), &[5.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, vec![0.0; 6]), false);
        let b = tape.leaf(t2(2, 2, vec![0.0; 4]), false);
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 2, vec![0.0, 0.0]), false);
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.leaf(t2(1, 2, vec![1000.0, 0.0]), false);
        let y2 = tape.softmax(big);
        let d = tape.value(y2).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() <= 1e-6 && d[1].abs() <= 1e-6);
    }

    #[test]
    fn softmax_matches_f64_oracle() {
        let input = [1.0f32, 2.0, 3.0];
        let exp: Vec<f64> = input.iter().map(|&v| (v as f64).exp()).collect();
        let total: f64 = exp.iter().sum();
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 3, input.to_vec()), false);
        let y = tape.softmax(x);
        for (got, want) in tape.value(y).data().iter().zip(&exp) {
            assert!((*got as f64 - want / total).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_magnitude() {
        let mut rng = stream_rng(3, Stream::Probe, 0);
        let data: Vec<f32> = (0..40).map(|_| rng.gen_range(-1e4..1e4f32)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(t2(8, 5, data), false);
        let y = tape.softmax(x);
        for r in 0..8 {
            let row = tape.value(y).row(r);
            assert!(row.iter().all(|&v| v >= 0.0));
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_const_slice_and_zero_gamma() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 3, vec![5.0, 5.0, 5.0]), false);
        let ones = tape.leaf(Tensor::new(vec![3], vec![1.0; 3]).unwrap(), false);
        let zeros = tape.leaf(Tensor::new(vec![3], vec![0.0; 3]).unwrap(), false);
        let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
        for v in tape.value(y).data() {
            assert!(v.abs() <= 1e-6);
        }

        let x2 = tape.leaf(t2(1, 3, vec![1.0, -2.0, 0.5]), false);
        let beta = tape.leaf(Tensor::new(vec![3], vec![7.0, 8.0, 9.0]).unwrap(), false);
        let y2 = tape.layer_norm(x2, zeros, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y2).data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn layer_norm_matches_f64_oracle() {
        let mut rng = stream_rng(4, Stream::Probe, 0);
        let xs: Vec<f32> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gs: Vec<f32> = (0..6).map(|_| rng.gen_range(0.5..1.5)).collect();
        let bs: Vec<f32> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let eps = 1e-5f64;
        let mean: f64 = xs.iter().map(|&v| v as f64).sum::<f64>() / 6.0;
        let var: f64 = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 6.0;
        let want: Vec<f64> = xs
            .iter()
            .zip(gs.iter().zip(&bs))
            .map(|(&x, (&g, &b))| {
                (x as f64 - mean) / (var + eps).sqrt() * g as f64 + b as f64
            })
            .collect();

        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 6, xs), false);
        let g = tape.leaf(Tensor::new(vec![6], gs).unwrap(), false);
        let b = tape.leaf(Tensor::new(vec![6], bs).unwrap(), false);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&want) {
            assert!((*got as f64 - want).abs() <= 1e-5);
        }
    }

    #[test]
    fn gelu_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 1, vec![0.0]), false);
        let y = tape.gelu(x);
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn cross_entropy_saturated_and_uniform() {
        let mut tape = Tape::new();
        let mut logits = vec![0.0f32; 4];
        logits[2] = 30.0;
        let x = tape.leaf(t2(1, 4, logits), false);
        let loss = tape.cross_entropy(x, &[2]).unwrap();
        assert!(tape.value(loss).data()[0] <= 1e-9);

        let u = tape.leaf(t2(1, 5, vec![0.3; 5]), false);
        let loss_u = tape.cross_entropy(u, &[3]).unwrap();
        assert!((tape.value(loss_u).data()[0] - (5.0f32).ln()).abs() <= 1e-6);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 4, vec![0.0; 4]), false);
        assert!(matches!(tape.cross_entropy(x, &[4]), Err(Error::Argument(_))));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let w = tape.leaf(t2(1, 1, vec![3.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let root = tape.sum(sq);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let w = tape.leaf(t2(1, 2, vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn detached_branch_contributes_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(t2(1, 2, vec![1.0, 2.0]), true);
        let frozen = tape.detach(w);
        let prod = tape.mul(w, frozen).unwrap(); // w ⊙ stop_grad(w)
        let root = tape.sum(prod);
        let grads = tape.backward(root).unwrap();
        // d/dw (w·c) = c, not 2w
        assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0]);
        assert!(grads.get(frozen).is_none());
    }

    fn finite_diff_check(
        x0: &[f32],
        h: f32,
        max_rel_err: f32,
        build: impl Fn(&mut Tape, Var) -> Var,
    ) {
        let worst = finite_diff_rel_err(x0, h, build);
        assert!(worst <= max_rel_err as f64, "worst relative error {worst}");
    }

    #[test]
    fn finite_differences_per_op() {
        let mut rng = stream_rng(5, Stream::Probe, 0);
        let x0: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // gelu → sum
        finite_diff_check(&x0, 1e-3, 1e-2, |t, x| {
            let y = t.gelu(x);
            t.sum(y)
        });
        // softmax picked through a weighting to make the root scalar nontrivial
        let w: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        finite_diff_check(&x0, 1e-3, 1e-2, |t, x| {
            let y = t.softmax(x);
            let wv = t.leaf(Tensor::new(vec![1, 8], w.clone()).unwrap(), false);
            let p = t.mul(y, wv).unwrap();
            t.sum(p)
        });
        // layer_norm
        let g: Vec<f32> = (0..8).map(|_| rng.gen_range(0.5..1.5)).collect();
        let wb: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        finite_diff_check(&x0, 1e-3, 1e-2, |t, x| {
            let gv = t.leaf(Tensor::new(vec![8], g.clone()).unwrap(), false);
            let bv = t.leaf(Tensor::new(vec![8], vec![0.0; 8]).unwrap(), false);
            let y = t.layer_norm(x, gv, bv, 1e-5).unwrap();
            let wv = t.leaf(Tensor::new(vec![1, 8], wb.clone()).unwrap(), false);
            let p = t.mul(y, wv).unwrap();
            t.sum(p)
        });
        // cross entropy of a linear layer
        let wmat: Vec<f32> = (0..8 * 3).map(|_| rng.gen_range(-0.7..0.7)).collect();
        finite_diff_check(&x0, 1e-3, 1e-2, |t, x| {
            let w = t.leaf(Tensor::new(vec![8, 3], wmat.clone()).unwrap(), false);
            let logits = t.matmul(x, w).unwrap();
            t.cross_entropy(logits, &[1]).unwrap()
        });
        // mhsa: flat input reshaped to 3 tokens of dim 4 (qkv width 12), 2 heads
        let qkv0: Vec<f32> = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
        finite_diff_check(&qkv0, 1e-3, 1e-2, |t, x| {
            let qkv = t.reshape(x, vec![3, 12]).unwrap();
            let y = t.mhsa(qkv, 2, 1).unwrap();
            let s = t.sum(y);
            // square to make the scalar sensitive to sign
            let sq = t.mul(s, s).unwrap();
            t.sum(sq)
        });
        // l2 normalize
        finite_diff_check(&x0, 1e-3, 1e-2, |t, x| {
            let y = t.l2_normalize_rows(x);
            let wv = t.leaf(Tensor::new(vec![1, 8], w.clone()).unwrap(), false);
            let p = t.mul(y, wv).unwrap();
            t.sum(p)
        });
        // soft target ce
        let mut targ = vec![0.1f32; 8];
        targ[2] = 0.3;
        let tsum: f32 = targ.iter().sum();
        let targ: Vec<f32> = targ.iter().map(|v| v / tsum).collect();
        finite_diff_check(&x0, 1e-3, 1e-2, |t, x| {
            t.soft_target_ce(x, Tensor::new(vec![1, 8], targ.clone()).unwrap(), 1.0 / 0.4)
                .unwrap()
        });
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = stream_rng(11, Stream::Probe, 0);
            let a_data: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b_data: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let a = tape.leaf(t2(3, 4, a_data), true);
            let b = tape.leaf(t2(4, 3, b_data), true);
            let c = tape.matmul(a, b).unwrap();
            let g = tape.gelu(c);
            let s = tape.sum(g);
            let grads = tape.backward(s).unwrap();
            (grads.get(a).unwrap().to_vec(), grads.get(b).unwrap().to_vec())
        };
        let (ga1, gb1) = run();
        let (ga2, gb2) = run();
        assert_eq!(ga1, ga2);
        assert_eq!(gb1, gb2);
    }
}
