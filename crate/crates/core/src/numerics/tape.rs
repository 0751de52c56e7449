//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every operation appends one node whose inputs are strictly earlier nodes,
//! so a single reverse sweep over the record visits each node once in a valid
//! topological order.

use crate::error::{Error, Result};

use super::Tensor;

/// Probabilities fed to a cross-entropy are clamped into `[PROB_MIN, PROB_MAX]`.
pub const PROB_MIN: f32 = 1e-7;
pub const PROB_MAX: f32 = 1.0 - 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d { input: Var, kernel: Var, bias: Var },
    Linear { input: Var, weight: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    Threshold { input: Var, eps: f32 },
    MaskRows { input: Var, mask: Vec<f32> },
    MulRows { col: Var, mat: Var },
    TopKMean { input: Var, selected: Vec<Vec<usize>> },
    Bce {
        input: Var,
        target: Vec<f32>,
        weight: Vec<f32>,
        count: f64,
    },
    AbsMean { input: Var, mask: Vec<f32>, count: f64 },
    TotalVariation { input: Var, pairs: Vec<usize> },
    Sum(Var),
    Add(Var, Var),
    Scale(Var, f32),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// The computation record plus gradient storage.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    swept: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward sweep, if `v` was reached by it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Clears gradients so that [`Tape::backward`] may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.swept = false;
    }

    /// Same-length temporal convolution with symmetric zero padding.
    ///
    /// `input` is `T×D`, `kernel` is `K×D×H` with odd `K`, `bias` is `H`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        if x.shape().len() != 2 || k.shape().len() != 3 || b.shape().len() != 1 {
            return Err(Error::dim(
                "conv1d",
                format!(
                    "expected T×D input, K×D×H kernel, H bias; got {:?}, {:?}, {:?}",
                    x.shape(),
                    k.shape(),
                    b.shape()
                ),
            ));
        }
        let (t_len, depth) = (x.shape()[0], x.shape()[1]);
        let (width, k_depth, hidden) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        if width % 2 == 0 {
            return Err(Error::dim("conv1d", format!("kernel width {width} is even")));
        }
        if k_depth != depth {
            return Err(Error::dim(
                "conv1d",
                format!("input depth {depth} != kernel depth {k_depth}"),
            ));
        }
        if b.shape()[0] != hidden {
            return Err(Error::dim(
                "conv1d",
                format!("bias length {} != output channels {hidden}", b.shape()[0]),
            ));
        }
        let out = conv1d_forward(x.data(), k.data(), b.data(), t_len, depth, width, hidden);
        let value = Tensor::new(vec![t_len, hidden], out)?;
        let tracked = self.tracked(&[input, kernel, bias]);
        Ok(self.push(value, Op::Conv1d { input, kernel, bias }, tracked))
    }

    /// Affine map over the last axis: `input · weight + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if w.shape().len() != 2 || b.shape().len() != 1 || x.shape().is_empty() {
            return Err(Error::dim(
                "linear",
                format!("bad ranks {:?}, {:?}, {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        let last = *x.shape().last().unwrap();
        if last != d_in {
            return Err(Error::dim(
                "linear",
                format!("input trailing extent {last} != weight rows {d_in}"),
            ));
        }
        if b.shape()[0] != d_out {
            return Err(Error::dim(
                "linear",
                format!("bias length {} != weight columns {d_out}", b.shape()[0]),
            ));
        }
        let rows = x.numel() / d_in;
        let out = linear_forward(x.data(), w.data(), b.data(), rows, d_in, d_out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(shape, out)?;
        let tracked = self.tracked(&[input, weight, bias]);
        Ok(self.push(value, Op::Linear { input, weight, bias }, tracked))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).unwrap();
        let tracked = self.tracked(&[input]);
        self.push(value, Op::Relu(input), tracked)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).unwrap();
        let tracked = self.tracked(&[input]);
        self.push(value, Op::Sigmoid(input), tracked)
    }

    /// Zeroes entries below `eps`; entries `>= eps` pass through unchanged.
    pub fn threshold(&mut self, input: Var, eps: f32) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v >= eps { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).unwrap();
        let tracked = self.tracked(&[input]);
        self.push(value, Op::Threshold { input, eps }, tracked)
    }

    /// Multiplies row `t` of `input` by `mask[t]`.
    pub fn mask_rows(&mut self, input: Var, mask: &[f32]) -> Result<Var> {
        let x = self.value(input);
        let rows = x.shape().first().copied().unwrap_or(1);
        if rows != mask.len() {
            return Err(Error::dim(
                "mask_rows",
                format!("{} rows vs mask of {}", rows, mask.len()),
            ));
        }
        let width = x.numel() / rows.max(1);
        let mut data = x.data().to_vec();
        for (t, &m) in mask.iter().enumerate() {
            data[t * width..(t + 1) * width].iter_mut().for_each(|v| *v *= m);
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(
            value,
            Op::MaskRows {
                input,
                mask: mask.to_vec(),
            },
            tracked,
        ))
    }

    /// `out[t, c] = col[t] * mat[t, c]`.
    pub fn mul_rows(&mut self, col: Var, mat: Var) -> Result<Var> {
        let a = self.value(col);
        let m = self.value(mat);
        if m.shape().len() != 2 || a.numel() != m.shape()[0] {
            return Err(Error::dim(
                "mul_rows",
                format!("column {:?} vs matrix {:?}", a.shape(), m.shape()),
            ));
        }
        let width = m.shape()[1];
        let data = m
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| a.data()[i / width] * v)
            .collect();
        let value = Tensor::new(m.shape().to_vec(), data)?;
        let tracked = self.tracked(&[col, mat]);
        Ok(self.push(value, Op::MulRows { col, mat }, tracked))
    }

    /// Mean of the `k` largest valid entries along the time axis.
    ///
    /// A `T` input yields a scalar; a `T×C` input yields one value per column.
    /// With fewer than `k` valid frames all valid frames are averaged. Ties
    /// go to the lowest frame index.
    pub fn topk_mean(&mut self, input: Var, mask: &[f32], k: usize) -> Result<Var> {
        if k == 0 {
            return Err(Error::Contract("topk_mean needs k >= 1".into()));
        }
        let x = self.value(input);
        let (t_len, cols, out_shape) = match x.shape() {
            [t] => (*t, 1, Vec::new()),
            [t, c] => (*t, *c, vec![*c]),
            s => return Err(Error::dim("topk_mean", format!("rank of {s:?}"))),
        };
        if mask.len() != t_len {
            return Err(Error::dim(
                "topk_mean",
                format!("{} frames vs mask of {}", t_len, mask.len()),
            ));
        }
        let valid: Vec<usize> = (0..t_len).filter(|&t| mask[t] > 0.0).collect();
        if valid.is_empty() {
            return Err(Error::EmptyInput("topk_mean"));
        }
        let data = x.data();
        let mut selected = Vec::with_capacity(cols);
        let mut out = Vec::with_capacity(cols);
        for c in 0..cols {
            let sel = topk_indices(&valid, |t| data[t * cols + c], k);
            let sum: f64 = sel.iter().map(|&t| data[t * cols + c] as f64).sum();
            out.push((sum / sel.len() as f64) as f32);
            selected.push(sel);
        }
        let value = Tensor::new(out_shape, out)?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(value, Op::TopKMean { input, selected }, tracked))
    }

    /// Weighted-mean binary cross entropy with clamped probabilities.
    ///
    /// `weight` selects the contributing entries (0 or 1). When no entry
    /// contributes the result is exactly 0.
    pub fn bce(&mut self, input: Var, target: &[f32], weight: &[f32]) -> Result<Var> {
        let p = self.value(input);
        if target.len() != p.numel() || weight.len() != p.numel() {
            return Err(Error::dim(
                "bce",
                format!(
                    "{} probabilities vs {} targets / {} weights",
                    p.numel(),
                    target.len(),
                    weight.len()
                ),
            ));
        }
        let count: f64 = weight.iter().map(|&w| w as f64).sum();
        let mut total = 0.0f64;
        if count > 0.0 {
            for ((&pv, &y), &w) in p.data().iter().zip(target).zip(weight) {
                if w != 0.0 {
                    total += w as f64 * bce_term(pv, y);
                }
            }
            total /= count;
        }
        let value = Tensor::scalar(total as f32);
        let tracked = self.tracked(&[input]);
        Ok(self.push(
            value,
            Op::Bce {
                input,
                target: target.to_vec(),
                weight: weight.to_vec(),
                count,
            },
            tracked,
        ))
    }

    /// `Σ_t mask[t]·|x[t]| / Σ_t mask[t]`, or 0 when nothing is valid.
    pub fn abs_mean(&mut self, input: Var, mask: &[f32]) -> Result<Var> {
        let x = self.value(input);
        if x.numel() != mask.len() {
            return Err(Error::dim(
                "abs_mean",
                format!("{} entries vs mask of {}", x.numel(), mask.len()),
            ));
        }
        let count: f64 = mask.iter().map(|&m| m as f64).sum();
        let total = if count > 0.0 {
            x.data()
                .iter()
                .zip(mask)
                .map(|(&v, &m)| m as f64 * (v as f64).abs())
                .sum::<f64>()
                / count
        } else {
            0.0
        };
        let tracked = self.tracked(&[input]);
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::AbsMean {
                input,
                mask: mask.to_vec(),
                count,
            },
            tracked,
        ))
    }

    /// Mean absolute difference over consecutive frame pairs that are both valid.
    pub fn total_variation(&mut self, input: Var, mask: &[f32]) -> Result<Var> {
        let x = self.value(input);
        if x.numel() != mask.len() {
            return Err(Error::dim(
                "total_variation",
                format!("{} entries vs mask of {}", x.numel(), mask.len()),
            ));
        }
        let pairs: Vec<usize> = (0..mask.len().saturating_sub(1))
            .filter(|&t| mask[t] > 0.0 && mask[t + 1] > 0.0)
            .collect();
        let d = x.data();
        let total = if pairs.is_empty() {
            0.0
        } else {
            pairs
                .iter()
                .map(|&t| (d[t + 1] as f64 - d[t] as f64).abs())
                .sum::<f64>()
                / pairs.len() as f64
        };
        let tracked = self.tracked(&[input]);
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::TotalVariation { input, pairs },
            tracked,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        let tracked = self.tracked(&[input]);
        self.push(Tensor::scalar(total as f32), Op::Sum(input), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.numel() != y.numel() {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).unwrap();
        let tracked = self.tracked(&[input]);
        self.push(value, Op::Scale(input, factor), tracked)
    }

    /// Reverse sweep from a scalar `loss`, populating gradients of every
    /// tracked node it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.swept {
            return Err(Error::Contract(
                "backward called twice without zero_grad".into(),
            ));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::Contract(format!("loss is not finite: {}", lv.item())));
        }
        self.swept = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f32], &[Node])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot, &self.nodes);
    }

    fn propagate(&mut self, i: usize, g: &[f32]) {
        // Ops are moved out temporarily so their payload can be borrowed
        // alongside the gradient buffers.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                kernel,
                bias,
            } => {
                let (t_len, depth) = dims2(&self.nodes[input.0].value);
                let ks = self.nodes[kernel.0].value.shape().to_vec();
                let (width, hidden) = (ks[0], ks[2]);
                let pad = width / 2;
                self.accumulate(*bias, |db, _| {
                    for t in 0..t_len {
                        for h in 0..hidden {
                            db[h] += g[t * hidden + h];
                        }
                    }
                });
                self.accumulate(*kernel, |dk, nodes| {
                    let x = nodes[input.0].value.data();
                    for t in 0..t_len {
                        let grow = &g[t * hidden..(t + 1) * hidden];
                        for j in 0..width {
                            let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                                continue;
                            };
                            for d in 0..depth {
                                let xv = x[s * depth + d];
                                if xv == 0.0 {
                                    continue;
                                }
                                let dst = &mut dk[(j * depth + d) * hidden..][..hidden];
                                for (o, &gv) in dst.iter_mut().zip(grow) {
                                    *o += xv * gv;
                                }
                            }
                        }
                    }
                });
                self.accumulate(*input, |dx, nodes| {
                    let k = nodes[kernel.0].value.data();
                    for t in 0..t_len {
                        let grow = &g[t * hidden..(t + 1) * hidden];
                        for j in 0..width {
                            let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                                continue;
                            };
                            for d in 0..depth {
                                let krow = &k[(j * depth + d) * hidden..][..hidden];
                                dx[s * depth + d] += dot(grow, krow);
                            }
                        }
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let ws = self.nodes[weight.0].value.shape().to_vec();
                let (d_in, d_out) = (ws[0], ws[1]);
                let rows = self.nodes[input.0].value.numel() / d_in;
                self.accumulate(*bias, |db, _| {
                    for r in 0..rows {
                        for (o, &gv) in db.iter_mut().zip(&g[r * d_out..(r + 1) * d_out]) {
                            *o += gv;
                        }
                    }
                });
                self.accumulate(*weight, |dw, nodes| {
                    let x = nodes[input.0].value.data();
                    for r in 0..rows {
                        let grow = &g[r * d_out..(r + 1) * d_out];
                        for i in 0..d_in {
                            let xv = x[r * d_in + i];
                            if xv == 0.0 {
                                continue;
                            }
                            for (o, &gv) in dw[i * d_out..(i + 1) * d_out].iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                });
                self.accumulate(*input, |dx, nodes| {
                    let w = nodes[weight.0].value.data();
                    for r in 0..rows {
                        let grow = &g[r * d_out..(r + 1) * d_out];
                        for i in 0..d_in {
                            dx[r * d_in + i] += dot(grow, &w[i * d_out..(i + 1) * d_out]);
                        }
                    }
                });
            }
            Op::Relu(input) => {
                self.accumulate(*input, |dx, nodes| {
                    let x = nodes[input.0].value.data();
                    for ((o, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(input) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(*input, |dx, _| {
                    for ((o, &yv), &gv) in dx.iter_mut().zip(&y).zip(g) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Threshold { input, eps } => {
                self.accumulate(*input, |dx, nodes| {
                    let x = nodes[input.0].value.data();
                    for ((o, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                        if xv >= *eps {
                            *o += gv;
                        }
                    }
                });
            }
            Op::MaskRows { input, mask } => {
                self.accumulate(*input, |dx, _| {
                    let width = dx.len() / mask.len().max(1);
                    for (idx, (o, &gv)) in dx.iter_mut().zip(g).enumerate() {
                        *o += gv * mask[idx / width];
                    }
                });
            }
            Op::MulRows { col, mat } => {
                let width = self.nodes[mat.0].value.shape()[1];
                self.accumulate(*col, |da, nodes| {
                    let m = nodes[mat.0].value.data();
                    for (t, o) in da.iter_mut().enumerate() {
                        let r = t * width..(t + 1) * width;
                        *o += dot(&g[r.clone()], &m[r]);
                    }
                });
                self.accumulate(*mat, |dm, nodes| {
                    let a = nodes[col.0].value.data();
                    for (idx, (o, &gv)) in dm.iter_mut().zip(g).enumerate() {
                        *o += gv * a[idx / width];
                    }
                });
            }
            Op::TopKMean { input, selected } => {
                let cols = selected.len();
                self.accumulate(*input, |dx, _| {
                    for (c, sel) in selected.iter().enumerate() {
                        let share = g[c] / sel.len() as f32;
                        for &t in sel {
                            dx[t * cols + c] += share;
                        }
                    }
                });
            }
            Op::Bce {
                input,
                target,
                weight,
                count,
            } => {
                if *count > 0.0 {
                    let scale = g[0] as f64 / count;
                    self.accumulate(*input, |dx, nodes| {
                        let p = nodes[input.0].value.data();
                        for (idx, o) in dx.iter_mut().enumerate() {
                            let w = weight[idx];
                            if w != 0.0 {
                                *o += (w as f64 * scale * bce_grad(p[idx], target[idx])) as f32;
                            }
                        }
                    });
                }
            }
            Op::AbsMean { input, mask, count } => {
                if *count > 0.0 {
                    let scale = (g[0] as f64 / count) as f32;
                    self.accumulate(*input, |dx, nodes| {
                        let x = nodes[input.0].value.data();
                        for ((o, &xv), &m) in dx.iter_mut().zip(x).zip(mask) {
                            *o += scale * m * sign(xv);
                        }
                    });
                }
            }
            Op::TotalVariation { input, pairs } => {
                if !pairs.is_empty() {
                    let scale = g[0] / pairs.len() as f32;
                    self.accumulate(*input, |dx, nodes| {
                        let x = nodes[input.0].value.data();
                        for &t in pairs {
                            let s = scale * sign(x[t + 1] - x[t]);
                            dx[t + 1] += s;
                            dx[t] -= s;
                        }
                    });
                }
            }
            Op::Sum(input) => {
                self.accumulate(*input, |dx, _| dx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(v, |dx, _| {
                        for (o, &gv) in dx.iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                }
            }
            Op::Scale(input, factor) => {
                self.accumulate(*input, |dx, _| {
                    for (o, &gv) in dx.iter_mut().zip(g) {
                        *o += gv * factor;
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bce_term(p: f32, y: f32) -> f64 {
    let q = p.clamp(PROB_MIN, PROB_MAX) as f64;
    let y = y as f64;
    -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
}

fn bce_grad(p: f32, y: f32) -> f64 {
    if !(PROB_MIN..=PROB_MAX).contains(&p) {
        return 0.0;
    }
    let q = p as f64;
    (q - y as f64) / (q * (1.0 - q))
}

/// Indices of the `k` largest entries among `valid`, ties to the lowest index.
pub(crate) fn topk_indices(valid: &[usize], value: impl Fn(usize) -> f32, k: usize) -> Vec<usize> {
    let mut order = valid.to_vec();
    order.sort_by(|&a, &b| value(b).total_cmp(&value(a)).then(a.cmp(&b)));
    order.truncate(k.min(valid.len()));
    order
}

pub(crate) fn conv1d_forward(
    x: &[f32],
    k: &[f32],
    b: &[f32],
    t_len: usize,
    depth: usize,
    width: usize,
    hidden: usize,
) -> Vec<f32> {
    let pad = width / 2;
    let mut out = vec![0.0f32; t_len * hidden];
    for t in 0..t_len {
        let row = &mut out[t * hidden..(t + 1) * hidden];
        for j in 0..width {
            let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                continue;
            };
            for d in 0..depth {
                let xv = x[s * depth + d];
                let krow = &k[(j * depth + d) * hidden..][..hidden];
                for (o, &kv) in row.iter_mut().zip(krow) {
                    *o += xv * kv;
                }
            }
        }
        for (o, &bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
    }
    out
}

pub(crate) fn linear_forward(
    x: &[f32],
    w: &[f32],
    b: &[f32],
    rows: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * d_out];
    for r in 0..rows {
        let row = &mut out[r * d_out..(r + 1) * d_out];
        for i in 0..d_in {
            let xv = x[r * d_in + i];
            for (o, &wv) in row.iter_mut().zip(&w[i * d_out..(i + 1) * d_out]) {
                *o += xv * wv;
            }
        }
        for (o, &bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
    }
    out
}
