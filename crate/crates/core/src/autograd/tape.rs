//! Flat autodiff tape: forward ops append nodes, backward walks them in
//! reverse. Every node produces exactly one value, so node index and value
//! index coincide. Forward outputs are checked for finiteness; a NaN or Inf
//! anywhere raises a numeric error instead of propagating.

use crate::autograd::conv_kernel as ck;
use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities below this are clamped inside the cross-entropy log.
pub const CE_EPS: f64 = 1e-12;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValId(usize);

enum Node {
    Leaf,
    Conv1d { x: ValId, w: ValId, b: ValId },
    BnTrain { x: ValId, gamma: ValId, beta: ValId, mean: Vec<f64>, ivstd: Vec<f64> },
    BnEval { x: ValId, gamma: ValId, beta: ValId, mean: Vec<f64>, ivstd: Vec<f64> },
    Relu { x: ValId },
    Add { a: ValId, b: ValId },
    Gap { x: ValId },
    Affine { x: ValId, w: ValId, b: ValId },
    Softmax { x: ValId },
    CrossEntropy { y: ValId, targets: Tensor },
}

/// Reverse-mode tape over [`Tensor`] values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
}

fn dims3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match shape {
        &[b, c, n] => Ok((b, c, n)),
        _ => Err(Error::Shape(format!("{what} expects a [B, C, N] tensor, got {shape:?}"))),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: ValId, delta: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, node: Node, val: Tensor) -> Result<ValId> {
        if !val.all_finite() {
            return Err(Error::Numeric(
                "non-finite value produced by a forward op (diverged?)".into(),
            ));
        }
        self.nodes.push(node);
        self.vals.push(val);
        Ok(ValId(self.vals.len() - 1))
    }

    /// Registers an input value (no gradient history of its own).
    pub fn leaf(&mut self, val: Tensor) -> Result<ValId> {
        self.push(Node::Leaf, val)
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.vals[id.0]
    }

    /// Gradient of the last `backward` target with respect to `id`.
    pub fn grad(&self, id: ValId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Same-padded 1D convolution: `[B, C, N] * [O, C, K] + [O] -> [B, O, N]`.
    /// Even `K` pads `(K-1)/2` zeros on the left, `K/2` on the right.
    pub fn conv1d(&mut self, x: ValId, w: ValId, b: ValId) -> Result<ValId> {
        let (bsz, c_in, n) = dims3(self.vals[x.0].shape(), "conv1d input")?;
        let (c_out, wc, k) = dims3(self.vals[w.0].shape(), "conv1d weight")?;
        if wc != c_in {
            return Err(Error::Shape(format!(
                "conv1d weight expects {c_in} input channels, has {wc}"
            )));
        }
        if k == 0 {
            return Err(Error::Shape("conv1d kernel width must be positive".into()));
        }
        if self.vals[b.0].shape() != [c_out] {
            return Err(Error::Shape(format!(
                "conv1d bias must be [{c_out}], got {:?}",
                self.vals[b.0].shape()
            )));
        }
        let mut y = Tensor::zeros(&[bsz, c_out, n]);
        ck::conv1d_fwd(
            self.vals[x.0].data(),
            bsz,
            c_in,
            n,
            self.vals[w.0].data(),
            c_out,
            k,
            self.vals[b.0].data(),
            y.data_mut(),
        );
        self.push(Node::Conv1d { x, w, b }, y)
    }

    fn bn_stats(x: &Tensor) -> Result<(usize, usize, usize, Vec<f64>, Vec<f64>)> {
        let (bsz, c, n) = dims3(x.shape(), "batchnorm input")?;
        let m = (bsz * n) as f64;
        let data = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..bsz {
                let base = (b * c + ch) * n;
                for &v in &data[base..base + n] {
                    s += v;
                }
            }
            let mu = s / m;
            let mut sq = 0.0;
            for b in 0..bsz {
                let base = (b * c + ch) * n;
                for &v in &data[base..base + n] {
                    let d = v - mu;
                    sq += d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = sq / m;
        }
        Ok((bsz, c, n, mean, var))
    }

    fn bn_forward(
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &[f64],
        ivstd: &[f64],
    ) -> Tensor {
        let &[bsz, c, n] = x.shape() else { unreachable!() };
        let mut y = Tensor::zeros(&[bsz, c, n]);
        let xd = x.data();
        let yd = y.data_mut();
        let g = gamma.data();
        let be = beta.data();
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * n;
                let scale = g[ch] * ivstd[ch];
                let shift = be[ch] - mean[ch] * scale;
                for t in 0..n {
                    yd[base + t] = xd[base + t] * scale + shift;
                }
            }
        }
        y
    }

    /// Batch normalization in training mode, normalizing per channel over the
    /// batch and time axes. Requires a batch of at least 2. Returns the new
    /// value plus the batch mean and unbiased batch variance per channel, for
    /// the caller's running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: ValId,
        gamma: ValId,
        beta: ValId,
        eps: f64,
    ) -> Result<(ValId, Vec<f64>, Vec<f64>)> {
        let (bsz, c, _n, mean, var) = Self::bn_stats(&self.vals[x.0])?;
        if bsz < 2 {
            return Err(Error::Config(format!(
                "batchnorm in training mode needs a batch of at least 2, got {bsz}"
            )));
        }
        self.check_bn_params(c, gamma, beta)?;
        let ivstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = Self::bn_forward(
            &self.vals[x.0],
            &self.vals[gamma.0],
            &self.vals[beta.0],
            &mean,
            &ivstd,
        );
        let m = self.vals[x.0].numel() as f64 / c as f64;
        let var_unbiased: Vec<f64> = var.iter().map(|v| v * m / (m - 1.0)).collect();
        let id = self.push(
            Node::BnTrain { x, gamma, beta, mean: mean.clone(), ivstd },
            y,
        )?;
        Ok((id, mean, var_unbiased))
    }

    /// Batch normalization in inference mode, using stored running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: ValId,
        gamma: ValId,
        beta: ValId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<ValId> {
        let (_bsz, c, _n) = dims3(self.vals[x.0].shape(), "batchnorm input")?;
        self.check_bn_params(c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!(
                "running stats must have {c} channels, got {} / {}",
                mean.len(),
                var.len()
            )));
        }
        let ivstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = Self::bn_forward(
            &self.vals[x.0],
            &self.vals[gamma.0],
            &self.vals[beta.0],
            mean,
            &ivstd,
        );
        self.push(Node::BnEval { x, gamma, beta, mean: mean.to_vec(), ivstd }, y)
    }

    fn check_bn_params(&self, c: usize, gamma: ValId, beta: ValId) -> Result<()> {
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.vals[id.0].shape() != [c] {
                return Err(Error::Shape(format!(
                    "batchnorm {name} must be [{c}], got {:?}",
                    self.vals[id.0].shape()
                )));
            }
        }
        Ok(())
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&mut self, x: ValId) -> Result<ValId> {
        let mut y = self.vals[x.0].clone();
        for v in y.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Node::Relu { x }, y)
    }

    /// Elementwise sum of two same-shape values (residual shortcut).
    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let mut y = self.vals[a.0].clone();
        y.add_assign(&self.vals[b.0])?;
        self.push(Node::Add { a, b }, y)
    }

    /// Mean over the time axis: `[B, C, N] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: ValId) -> Result<ValId> {
        let (bsz, c, n) = dims3(self.vals[x.0].shape(), "global_avg_pool input")?;
        let xd = self.vals[x.0].data();
        let mut y = Tensor::zeros(&[bsz, c]);
        let yd = y.data_mut();
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * n;
                yd[b * c + ch] = xd[base..base + n].iter().sum::<f64>() / n as f64;
            }
        }
        self.push(Node::Gap { x }, y)
    }

    /// Fully connected layer: `[B, D] * [O, D]^T + [O] -> [B, O]`.
    pub fn affine(&mut self, x: ValId, w: ValId, b: ValId) -> Result<ValId> {
        let &[bsz, d] = self.vals[x.0].shape() else {
            return Err(Error::Shape(format!(
                "affine input must be [B, D], got {:?}",
                self.vals[x.0].shape()
            )));
        };
        let &[o, wd] = self.vals[w.0].shape() else {
            return Err(Error::Shape(format!(
                "affine weight must be [O, D], got {:?}",
                self.vals[w.0].shape()
            )));
        };
        if wd != d || self.vals[b.0].shape() != [o] {
            return Err(Error::Shape(format!(
                "affine shapes disagree: x {:?}, w {:?}, b {:?}",
                self.vals[x.0].shape(),
                self.vals[w.0].shape(),
                self.vals[b.0].shape()
            )));
        }
        let xd = self.vals[x.0].data();
        let wdat = self.vals[w.0].data();
        let bd = self.vals[b.0].data();
        let mut y = Tensor::zeros(&[bsz, o]);
        let yd = y.data_mut();
        for i in 0..bsz {
            for j in 0..o {
                yd[i * o + j] = ck::dot(&xd[i * d..(i + 1) * d], &wdat[j * d..(j + 1) * d]) + bd[j];
            }
        }
        self.push(Node::Affine { x, w, b }, y)
    }

    /// Row-wise softmax over `[B, D]`.
    pub fn softmax(&mut self, x: ValId) -> Result<ValId> {
        let &[bsz, d] = self.vals[x.0].shape() else {
            return Err(Error::Shape(format!(
                "softmax input must be [B, D], got {:?}",
                self.vals[x.0].shape()
            )));
        };
        let xd = self.vals[x.0].data();
        let mut y = Tensor::zeros(&[bsz, d]);
        let yd = y.data_mut();
        for i in 0..bsz {
            let row = &xd[i * d..(i + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - max).exp();
                yd[i * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                yd[i * d + j] /= sum;
            }
        }
        self.push(Node::Softmax { x }, y)
    }

    /// Mean cross-entropy between probability rows `y` and one-hot targets:
    /// `L = -(1/B) sum_i sum_j t[i][j] ln(max(y[i][j], eps))`.
    pub fn cross_entropy(&mut self, y: ValId, targets: &Tensor) -> Result<ValId> {
        if self.vals[y.0].shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "cross_entropy shapes disagree: y {:?}, targets {:?}",
                self.vals[y.0].shape(),
                targets.shape()
            )));
        }
        let &[bsz, _d] = self.vals[y.0].shape() else {
            return Err(Error::Shape(format!(
                "cross_entropy input must be [B, D], got {:?}",
                self.vals[y.0].shape()
            )));
        };
        let yd = self.vals[y.0].data();
        let mut loss = 0.0;
        for (p, t) in yd.iter().zip(targets.data()) {
            if *t != 0.0 {
                loss -= t * p.max(CE_EPS).ln();
            }
        }
        let val = Tensor::scalar(loss / bsz as f64);
        self.push(Node::CrossEntropy { y, targets: targets.clone() }, val)
    }

    /// Backpropagates from a scalar loss, filling gradients for every value
    /// that influences it.
    pub fn backward(&mut self, loss: ValId) -> Result<()> {
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.vals[loss.0].shape()
            )));
        }
        self.backward_seeded(loss, &Tensor::scalar(1.0))
    }

    /// Backpropagates from `out` with an explicit output gradient, for
    /// callers (such as gradient checking) that differentiate a linear
    /// functional of a non-scalar value.
    pub fn backward_seeded(&mut self, out: ValId, seed: &Tensor) -> Result<()> {
        if seed.shape() != self.vals[out.0].shape() {
            return Err(Error::Shape(format!(
                "backward seed shape {:?} does not match value shape {:?}",
                seed.shape(),
                self.vals[out.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.vals.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.clone());

        for id in (0..=out.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            match &self.nodes[id] {
                Node::Leaf => {}
                Node::Conv1d { x, w, b } => {
                    let &[bsz, c_in, n] = self.vals[x.0].shape() else { unreachable!() };
                    let &[c_out, _, k] = self.vals[w.0].shape() else { unreachable!() };
                    let dx = ck::conv1d_grad_input(dy.data(), self.vals[w.0].data(), bsz, c_in, c_out, n, k);
                    let (dw, db) =
                        ck::conv1d_grad_weight(self.vals[x.0].data(), dy.data(), bsz, c_in, c_out, n, k);
                    accumulate(&mut grads, *x, Tensor::from_vec(&[bsz, c_in, n], dx)?)?;
                    accumulate(&mut grads, *w, Tensor::from_vec(&[c_out, c_in, k], dw)?)?;
                    accumulate(&mut grads, *b, Tensor::from_vec(&[c_out], db)?)?;
                }
                Node::BnTrain { x, gamma, beta, mean, ivstd } => {
                    let &[bsz, c, n] = self.vals[x.0].shape() else { unreachable!() };
                    let m = (bsz * n) as f64;
                    let xd = self.vals[x.0].data();
                    let g = self.vals[gamma.0].data();
                    let dyd = dy.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    // First pass: per-channel reductions of dy and dy * xhat.
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * n;
                            let mut s = 0.0;
                            let mut sx = 0.0;
                            for t in 0..n {
                                let xhat = (xd[base + t] - mean[ch]) * ivstd[ch];
                                s += dyd[base + t];
                                sx += dyd[base + t] * xhat;
                            }
                            dbeta[ch] += s;
                            dgamma[ch] += sx;
                        }
                    }
                    // Second pass: dx through the batch statistics.
                    let mut dx = vec![0.0; xd.len()];
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * n;
                            let scale = g[ch] * ivstd[ch] / m;
                            for t in 0..n {
                                let xhat = (xd[base + t] - mean[ch]) * ivstd[ch];
                                dx[base + t] = scale
                                    * (m * dyd[base + t] - dbeta[ch] - xhat * dgamma[ch]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[bsz, c, n], dx)?)?;
                    accumulate(&mut grads, *gamma, Tensor::from_vec(&[c], dgamma)?)?;
                    accumulate(&mut grads, *beta, Tensor::from_vec(&[c], dbeta)?)?;
                }
                Node::BnEval { x, gamma, beta, mean, ivstd } => {
                    let &[bsz, c, n] = self.vals[x.0].shape() else { unreachable!() };
                    let xd = self.vals[x.0].data();
                    let g = self.vals[gamma.0].data();
                    let dyd = dy.data();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * n;
                            let scale = g[ch] * ivstd[ch];
                            for t in 0..n {
                                let xhat = (xd[base + t] - mean[ch]) * ivstd[ch];
                                dx[base + t] = dyd[base + t] * scale;
                                dgamma[ch] += dyd[base + t] * xhat;
                                dbeta[ch] += dyd[base + t];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[bsz, c, n], dx)?)?;
                    accumulate(&mut grads, *gamma, Tensor::from_vec(&[c], dgamma)?)?;
                    accumulate(&mut grads, *beta, Tensor::from_vec(&[c], dbeta)?)?;
                }
                Node::Relu { x } => {
                    let mut dx = dy.clone();
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.vals[x.0].data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Node::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone())?;
                    accumulate(&mut grads, *b, dy.clone())?;
                }
                Node::Gap { x } => {
                    let &[bsz, c, n] = self.vals[x.0].shape() else { unreachable!() };
                    let dyd = dy.data();
                    let mut dx = vec![0.0; bsz * c * n];
                    for b in 0..bsz {
                        for ch in 0..c {
                            let v = dyd[b * c + ch] / n as f64;
                            let base = (b * c + ch) * n;
                            dx[base..base + n].fill(v);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[bsz, c, n], dx)?)?;
                }
                Node::Affine { x, w, b } => {
                    let &[bsz, d] = self.vals[x.0].shape() else { unreachable!() };
                    let &[o, _] = self.vals[w.0].shape() else { unreachable!() };
                    let xd = self.vals[x.0].data();
                    let wd = self.vals[w.0].data();
                    let dyd = dy.data();
                    let mut dx = vec![0.0; bsz * d];
                    let mut dw = vec![0.0; o * d];
                    let mut db = vec![0.0; o];
                    for i in 0..bsz {
                        for j in 0..o {
                            let g = dyd[i * o + j];
                            ck::axpy(&mut dx[i * d..(i + 1) * d], g, &wd[j * d..(j + 1) * d]);
                            ck::axpy(&mut dw[j * d..(j + 1) * d], g, &xd[i * d..(i + 1) * d]);
                            db[j] += g;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[bsz, d], dx)?)?;
                    accumulate(&mut grads, *w, Tensor::from_vec(&[o, d], dw)?)?;
                    accumulate(&mut grads, *b, Tensor::from_vec(&[o], db)?)?;
                }
                Node::Softmax { x } => {
                    let y = &self.vals[id];
                    let &[bsz, d] = y.shape() else { unreachable!() };
                    let yd = y.data();
                    let dyd = dy.data();
                    let mut dx = vec![0.0; bsz * d];
                    for i in 0..bsz {
                        let row = &yd[i * d..(i + 1) * d];
                        let grow = &dyd[i * d..(i + 1) * d];
                        let inner = ck::dot(row, grow);
                        for j in 0..d {
                            dx[i * d + j] = row[j] * (grow[j] - inner);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[bsz, d], dx)?)?;
                }
                Node::CrossEntropy { y, targets } => {
                    let g = dy.item()?;
                    let yv = &self.vals[y.0];
                    let &[bsz, d] = yv.shape() else { unreachable!() };
                    let yd = yv.data();
                    let td = targets.data();
                    let mut dyv = vec![0.0; bsz * d];
                    let scale = -g / bsz as f64;
                    for i in 0..bsz * d {
                        // Inside the clamp region the loss is constant in y.
                        if td[i] != 0.0 && yd[i] > CE_EPS {
                            dyv[i] = scale * td[i] / yd[i];
                        }
                    }
                    accumulate(&mut grads, *y, Tensor::from_vec(&[bsz, d], dyv)?)?;
                }
            }
            grads[id] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_worked_example() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let w = tape.leaf(t(&[1, 1, 3], &[1.0, 1.0, 1.0])).unwrap();
        let b = tape.leaf(t(&[1], &[0.0])).unwrap();
        let y = tape.conv1d(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn softmax_and_cross_entropy_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[0.0, 0.0])).unwrap();
        let s = tape.softmax(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let y = tape.leaf(t(&[1, 2], &[0.25, 0.75])).unwrap();
        let targets = t(&[1, 2], &[0.0, 1.0]);
        let l = tape.cross_entropy(y, &targets).unwrap();
        let want = -(0.75f64.ln());
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-12);
        assert!((want - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn gap_of_constant_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 3], &[2.0, 2.0, 2.0, -1.0, -1.0, -1.0])).unwrap();
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, -1.0]);
        assert_eq!(tape.value(y).shape(), &[1, 2]);
    }

    #[test]
    fn relu_add_affine_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 4], &[-1.0, 2.0, -3.0, 4.0])).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0, 4.0]);

        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = tape.leaf(t(&[1, 2], &[10.0, 20.0])).unwrap();
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[11.0, 22.0]);

        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let bias = tape.leaf(t(&[2], &[0.5, -0.5])).unwrap();
        let y = tape.affine(s, w, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[11.5, 21.5]);
    }

    #[test]
    fn batchnorm_normalizes_per_channel() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let gamma = tape.leaf(t(&[1], &[1.0])).unwrap();
        let beta = tape.leaf(t(&[1], &[0.0])).unwrap();
        let (y, mean, var_unbiased) = tape.batchnorm_train(x, gamma, beta, 0.0).unwrap();
        assert_eq!(mean, vec![2.5]);
        // Biased variance 1.25; unbiased scales by 4/3.
        assert!((var_unbiased[0] - 1.25 * 4.0 / 3.0).abs() < 1e-12);
        let yd = tape.value(y).data();
        let m: f64 = yd.iter().sum::<f64>() / 4.0;
        let v: f64 = yd.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batchnorm_eval_uses_given_stats() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2], &[3.0, 5.0])).unwrap();
        let gamma = tape.leaf(t(&[1], &[2.0])).unwrap();
        let beta = tape.leaf(t(&[1], &[1.0])).unwrap();
        let y = tape.batchnorm_eval(x, gamma, beta, &[3.0], &[4.0], 0.0).unwrap();
        // (3-3)/2 * 2 + 1 = 1, (5-3)/2 * 2 + 1 = 3.
        assert_eq!(tape.value(y).data(), &[1.0, 3.0]);
    }

    #[test]
    fn batchnorm_train_rejects_batch_of_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let gamma = tape.leaf(t(&[1], &[1.0])).unwrap();
        let beta = tape.leaf(t(&[1], &[0.0])).unwrap();
        let err = tape.batchnorm_train(x, gamma, beta, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1e308, 1e308])).unwrap();
        let y = tape.add(x, x);
        assert!(matches!(y, Err(Error::Numeric(_))));

        let nan = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        assert!(matches!(tape.leaf(nan), Err(Error::Numeric(_))));
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 8])).unwrap();
        let w = tape.leaf(Tensor::zeros(&[4, 3, 5])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[4])).unwrap();
        assert!(tape.conv1d(x, w, b).is_err());

        let a = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
        let c = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        assert!(tape.add(a, c).is_err());
        assert!(tape.cross_entropy(a, &Tensor::zeros(&[2, 3])).is_err());
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn backward_through_small_chain() {
        // loss = CE(softmax(x W^T + b), targets); checks grads exist and the
        // logit gradient matches the closed form y - t for one-hot targets.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[0.3, -0.1])).unwrap();
        let w = tape.leaf(t(&[2, 2], &[0.5, -0.2, 0.1, 0.4])).unwrap();
        let b = tape.leaf(t(&[2], &[0.0, 0.1])).unwrap();
        let z = tape.affine(x, w, b).unwrap();
        let y = tape.softmax(z).unwrap();
        let targets = t(&[1, 2], &[0.0, 1.0]);
        let loss = tape.cross_entropy(y, &targets).unwrap();
        tape.backward(loss).unwrap();

        let yv = tape.value(y).data().to_vec();
        let dz = tape.grad(z).unwrap().data();
        assert!((dz[0] - yv[0]).abs() < 1e-12);
        assert!((dz[1] - (yv[1] - 1.0)).abs() < 1e-12);
        assert!(tape.grad(w).is_some());
        assert!(tape.grad(b).is_some());
        assert!(tape.grad(x).is_some());
    }
}
