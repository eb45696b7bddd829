//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! A [`Tape`] records every forward operation in insertion order; the
//! backward pass replays exactly that order in reverse, accumulating
//! gradients into each node. Nodes are referenced by [`Var`] handles and
//! their inputs always precede them, so the insertion order is already a
//! topological order.
//!
//! A tape and its tensors form a single-threaded unit of work. Parallelism
//! belongs at the granularity of independent tapes (separate folds or
//! seeds), never inside one.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise nonlinearity kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

/// Batch-norm mode: batch statistics vs stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running mean/variance owned by a layer, updated by train-mode batch norm.
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Debug)]
struct ConvMeta {
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, k: usize, meta: ConvMeta },
    ConvTranspose2d { x: usize, k: usize, meta: ConvMeta },
    Dense { x: usize, w: usize, b: usize },
    Act { x: usize, kind: Activation },
    BatchNorm { x: usize, gamma: usize, beta: usize, train: bool, mean: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: usize },
    CrossEntropy { probs: usize, weights: Vec<f64>, wsum: f64, targets: Vec<usize> },
    GradReverse { x: usize, lambda: f64 },
    Mean { x: usize },
    WeightedSum { x: usize, weights: Vec<f64> },
    Sub { a: usize, b: usize },
    Neg { x: usize },
    Reshape { x: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires: bool,
    op: Op,
}

/// The differentiation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: Vec::new(),
            requires,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: usize) -> bool {
        self.nodes[v].requires
    }

    /// Register a tensor as a graph input. `requires_grad` marks it as a
    /// trainable leaf whose gradient survives `backward`.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        t.check_finite("leaf tensor")?;
        let (shape, data) = t.into_parts();
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    /// Register a non-trainable input (data, labels).
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` target with respect to `v`.
    /// Empty slice if backward has not been run or `v` was unreachable.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node shape/data always consistent")
    }

    // ───────────────────────── forward ops ─────────────────────────

    /// Cross-correlation of `x: [N,C,H,W]` with `k: [K,C,R,S]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.nodes[x.0].shape.clone(), self.nodes[k.0].shape.clone());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("need 4-d input and kernel, got {:?} and {:?}", xs, ks),
            });
        }
        if stride == 0 {
            return Err(Error::Parameter { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ko, kc, r, s) = (ks[0], ks[1], ks[2], ks[3]);
        if c != kc {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("input channels {:?} vs kernel channels {:?}", xs, ks),
            });
        }
        if h + 2 * padding < r || w + 2 * padding < s {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("kernel {:?} larger than padded input {:?}", ks, xs),
            });
        }
        let oh = (h + 2 * padding - r) / stride + 1;
        let ow = (w + 2 * padding - s) / stride + 1;

        let mut y = vec![0.0; n * ko * oh * ow];
        let crs = c * r * s;
        let mut cols = vec![0.0; oh * ow * crs];
        let xd = &self.nodes[x.0].data;
        let kd = &self.nodes[k.0].data;
        for ni in 0..n {
            let xb = &xd[ni * c * h * w..(ni + 1) * c * h * w];
            im2col(xb, c, h, w, r, s, stride, padding, oh, ow, &mut cols);
            let yb = &mut y[ni * ko * oh * ow..(ni + 1) * ko * oh * ow];
            // y[k, pos] = dot(kernel row k, cols row pos)
            for ki in 0..ko {
                let krow = &kd[ki * crs..(ki + 1) * crs];
                let yrow = &mut yb[ki * oh * ow..(ki + 1) * oh * ow];
                for (pos, out) in yrow.iter_mut().enumerate() {
                    *out = dot(&cols[pos * crs..(pos + 1) * crs], krow);
                }
            }
        }
        let req = self.requires(x.0) || self.requires(k.0);
        Ok(self.push(
            vec![n, ko, oh, ow],
            y,
            req,
            Op::Conv2d { x: x.0, k: k.0, meta: ConvMeta { stride, padding } },
        ))
    }

    /// Transposed convolution (the adjoint of [`Tape::conv2d`] for a fixed
    /// kernel): `x: [N,K,H,W]`, `k: [K,C,R,S]` -> `[N,C,(H-1)s-2p+R,(W-1)s-2p+S]`.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.nodes[x.0].shape.clone(), self.nodes[k.0].shape.clone());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Dimension {
                op: "conv_transpose2d",
                detail: format!("need 4-d input and kernel, got {:?} and {:?}", xs, ks),
            });
        }
        if stride == 0 {
            return Err(Error::Parameter { op: "conv_transpose2d", detail: "stride must be >= 1".into() });
        }
        let (n, kx, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (kk, c, r, s) = (ks[0], ks[1], ks[2], ks[3]);
        if kx != kk {
            return Err(Error::Dimension {
                op: "conv_transpose2d",
                detail: format!("input channels {:?} vs kernel channels {:?}", xs, ks),
            });
        }
        let oh = (h - 1) * stride + r;
        let ow = (w - 1) * stride + s;
        if oh < 2 * padding + 1 || ow < 2 * padding + 1 {
            return Err(Error::Dimension {
                op: "conv_transpose2d",
                detail: format!("output collapses below 1x1 for input {:?}, kernel {:?}, padding {}", xs, ks, padding),
            });
        }
        let (oh, ow) = (oh - 2 * padding, ow - 2 * padding);

        let crs = c * r * s;
        let mut y = vec![0.0; n * c * oh * ow];
        let mut rows = vec![0.0; h * w * crs];
        let xd = &self.nodes[x.0].data;
        let kd = &self.nodes[k.0].data;
        for ni in 0..n {
            let xb = &xd[ni * kk * h * w..(ni + 1) * kk * h * w];
            // rows[pos, :] = sum_k x[k, pos] * kernel[k, :]
            rows.iter_mut().for_each(|v| *v = 0.0);
            for ki in 0..kk {
                let krow = &kd[ki * crs..(ki + 1) * crs];
                let xrow = &xb[ki * h * w..(ki + 1) * h * w];
                for (pos, &xv) in xrow.iter().enumerate() {
                    if xv != 0.0 {
                        axpy(xv, krow, &mut rows[pos * crs..(pos + 1) * crs]);
                    }
                }
            }
            let yb = &mut y[ni * c * oh * ow..(ni + 1) * c * oh * ow];
            col2im(&rows, c, oh, ow, r, s, stride, padding, h, w, yb);
        }
        let req = self.requires(x.0) || self.requires(k.0);
        Ok(self.push(
            vec![n, c, oh, ow],
            y,
            req,
            Op::ConvTranspose2d { x: x.0, k: k.0, meta: ConvMeta { stride, padding } },
        ))
    }

    /// Affine map `x: [N,D]`, `w: [M,D]`, `b: [M]` -> `x wᵀ + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.nodes[x.0].shape.clone(),
            self.nodes[w.0].shape.clone(),
            self.nodes[b.0].shape.clone(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::Dimension {
                op: "dense",
                detail: format!("x {:?}, w {:?}, b {:?}", xs, ws, bs),
            });
        }
        let (n, d, m) = (xs[0], xs[1], ws[0]);
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let mut y = vec![0.0; n * m];
        for i in 0..n {
            let xrow = &xd[i * d..(i + 1) * d];
            let yrow = &mut y[i * m..(i + 1) * m];
            for j in 0..m {
                yrow[j] = dot(xrow, &wd[j * d..(j + 1) * d]) + bd[j];
            }
        }
        let req = self.requires(x.0) || self.requires(w.0) || self.requires(b.0);
        Ok(self.push(vec![n, m], y, req, Op::Dense { x: x.0, w: w.0, b: b.0 }))
    }

    /// Elementwise nonlinearity.
    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(0.0),
                Activation::LeakyRelu(a) => if v > 0.0 { v } else { a * v },
                Activation::Tanh => v.tanh(),
                Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x.0);
        self.push(shape, data, req, Op::Act { x: x.0, kind })
    }

    /// Batch normalization over `[N,C,H,W]` (or `[N,C]`) with per-channel
    /// statistics. Train mode normalizes by batch statistics and folds them
    /// into `running`; eval mode normalizes by `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        mode: BnMode,
        momentum: f64,
        epsilon: f64,
    ) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 && xs.len() != 2 {
            return Err(Error::Dimension {
                op: "batch_norm",
                detail: format!("need [N,C,H,W] or [N,C], got {:?}", xs),
            });
        }
        let n = xs[0];
        let c = xs[1];
        let hw: usize = xs[2..].iter().product::<usize>().max(1);
        if self.nodes[gamma.0].data.len() != c || self.nodes[beta.0].data.len() != c || running.mean.len() != c {
            return Err(Error::Dimension {
                op: "batch_norm",
                detail: format!("gamma/beta/running channel count must be {}", c),
            });
        }
        if mode == BnMode::Train && n < 2 {
            return Err(Error::BatchSize(n));
        }

        let m = (n * hw) as f64;
        let (mean, var) = match mode {
            BnMode::Train => {
                let xd = &self.nodes[x.0].data;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        acc += xd[base..base + hw].iter().sum::<f64>();
                    }
                    mean[ci] = acc / m;
                    let mut vacc = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        vacc += xd[base..base + hw].iter().map(|&v| (v - mean[ci]).powi(2)).sum::<f64>();
                    }
                    var[ci] = vacc / m;
                }
                // running variance uses the unbiased estimator
                let unbias = m / (m - 1.0);
                for ci in 0..c {
                    running.mean[ci] = (1.0 - momentum) * running.mean[ci] + momentum * mean[ci];
                    running.var[ci] = (1.0 - momentum) * running.var[ci] + momentum * var[ci] * unbias;
                }
                (mean, var)
            }
            BnMode::Eval => (running.mean.clone(), running.var.clone()),
        };

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut y = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let (mu, inv, g, b) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                for k in 0..hw {
                    y[base + k] = g * (xd[base + k] - mu) * inv + b;
                }
            }
        }
        let req = self.requires(x.0) || self.requires(gamma.0) || self.requires(beta.0);
        Ok(self.push(
            xs,
            y,
            req,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                train: mode == BnMode::Train,
                mean,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax over `[N,K]`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 2 || xs[1] < 2 {
            return Err(Error::Dimension {
                op: "softmax",
                detail: format!("need [N,K] with K >= 2, got {:?}", xs),
            });
        }
        let (n, k) = (xs[0], xs[1]);
        let xd = &self.nodes[x.0].data;
        let mut y = vec![0.0; n * k];
        for i in 0..n {
            let row = &xd[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut y[i * k..(i + 1) * k];
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
        let req = self.requires(x.0);
        Ok(self.push(xs, y, req, Op::Softmax { x: x.0 }))
    }

    /// Mean negative log-likelihood of the correct class:
    /// `probs: [N,K]` row-stochastic, `labels: [N,K]` one-hot.
    pub fn cross_entropy(&mut self, probs: Var, labels: Var) -> Result<Var> {
        let n = self.nodes[probs.0].shape[0];
        self.cross_entropy_weighted(probs, labels, &vec![1.0; n])
    }

    /// Cross-entropy with per-sample weights; the loss is the weighted mean
    /// over samples with nonzero weight. Zero total weight yields a zero
    /// loss that contributes no gradient (how synthetic samples are excluded
    /// from the hair objective).
    pub fn cross_entropy_weighted(&mut self, probs: Var, labels: Var, weights: &[f64]) -> Result<Var> {
        const FLOOR: f64 = 1e-12;
        let (ps, ls) = (self.nodes[probs.0].shape.clone(), self.nodes[labels.0].shape.clone());
        if ps.len() != 2 || ps != ls {
            return Err(Error::Dimension {
                op: "cross_entropy",
                detail: format!("probs {:?} vs labels {:?}", ps, ls),
            });
        }
        let (n, k) = (ps[0], ps[1]);
        if weights.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                detail: format!("weights length {} vs batch {}", weights.len(), n),
            });
        }
        let pd = &self.nodes[probs.0].data;
        let ld = &self.nodes[labels.0].data;
        let mut targets = vec![0usize; n];
        for i in 0..n {
            let row = &pd[i * k..(i + 1) * k];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Contract {
                    op: "cross_entropy",
                    detail: format!("probs row {} sums to {}, not 1", i, sum),
                });
            }
            let lrow = &ld[i * k..(i + 1) * k];
            let ones: Vec<usize> = lrow
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(j, _)| j)
                .collect();
            if ones.len() != 1 || lrow[ones[0]] != 1.0 {
                return Err(Error::Contract {
                    op: "cross_entropy",
                    detail: format!("labels row {} is not one-hot", i),
                });
            }
            targets[i] = ones[0];
        }
        let wsum: f64 = weights.iter().sum();
        let loss = if wsum == 0.0 {
            0.0
        } else {
            let mut acc = 0.0;
            for i in 0..n {
                let p = pd[i * k + targets[i]].max(FLOOR);
                acc += weights[i] * (-p.ln());
            }
            acc / wsum
        };
        let req = self.requires(probs.0);
        Ok(self.push(
            vec![1],
            vec![loss],
            req,
            Op::CrossEntropy { probs: probs.0, weights: weights.to_vec(), wsum, targets },
        ))
    }

    /// Identity in the forward pass; multiplies the upstream gradient by
    /// exactly `-lambda` in the backward pass.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(Error::Parameter {
                op: "grad_reverse",
                detail: format!("lambda must be nonnegative, got {}", lambda),
            });
        }
        let shape = self.nodes[x.0].shape.clone();
        let data = self.nodes[x.0].data.clone();
        let req = self.requires(x.0);
        Ok(self.push(shape, data, req, Op::GradReverse { x: x.0, lambda }))
    }

    /// Mean over all elements, as a scalar node.
    pub fn mean(&mut self, x: Var) -> Var {
        let len = self.nodes[x.0].data.len();
        let m = self.nodes[x.0].data.iter().sum::<f64>() / len as f64;
        let req = self.requires(x.0);
        self.push(vec![1], vec![m], req, Op::Mean { x: x.0 })
    }

    /// Scalar projection `sum_i x_i * weights_i` against fixed weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.nodes[x.0].data.len() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                detail: format!(
                    "{} weights vs {} elements",
                    weights.len(),
                    self.nodes[x.0].data.len()
                ),
            });
        }
        let v = self.nodes[x.0]
            .data
            .iter()
            .zip(weights)
            .map(|(a, w)| a * w)
            .sum();
        let req = self.requires(x.0);
        Ok(self.push(
            vec![1],
            vec![v],
            req,
            Op::WeightedSum { x: x.0, weights: weights.to_vec() },
        ))
    }

    /// Elementwise `a - b` (identical shapes).
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension {
                op: "sub",
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(shape, data, req, Op::Sub { a: a.0, b: b.0 }))
    }

    /// Elementwise negation.
    pub fn neg(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].data.iter().map(|v| -v).collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.requires(x.0);
        self.push(shape, data, req, Op::Neg { x: x.0 })
    }

    /// View with a new shape of equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.nodes[x.0].shape, shape),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let req = self.requires(x.0);
        Ok(self.push(shape, data, req, Op::Reshape { x: x.0 }))
    }

    /// Wasserstein critic and generator objectives from raw critic scores:
    /// `critic_loss = mean(fake) - mean(real)`, `generator_loss = -mean(fake)`.
    pub fn wgan_losses(&mut self, critic_real: Var, critic_fake: Var) -> Result<(Var, Var)> {
        let mean_real = self.mean(critic_real);
        let mean_fake = self.mean(critic_fake);
        let critic_loss = self.sub(mean_fake, mean_real)?;
        let generator_loss = self.neg(mean_fake);
        Ok((critic_loss, generator_loss))
    }

    // ───────────────────────── backward ─────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Gradients of every
    /// reachable `requires_grad` node are (re)computed from scratch;
    /// repeated calls are deterministic and independent.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = loss.0;
        if self.nodes[li].data.len() != 1 {
            return Err(Error::Contract {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.nodes[li].shape),
            });
        }
        if !self.nodes[li].data[0].is_finite() {
            return Err(Error::NonFinite("backward loss".into()));
        }

        // Restrict the sweep to ancestors of the loss so unrelated branches
        // of a shared graph neither cost time nor touch gradient buffers.
        let mut reachable = vec![false; self.nodes.len()];
        reachable[li] = true;
        for i in (0..=li).rev() {
            if !reachable[i] {
                continue;
            }
            self.for_each_input(i, |j| reachable[j] = true);
        }

        for node in &mut self.nodes {
            node.grad.clear();
            node.grad.resize(node.data.len(), 0.0);
        }
        self.nodes[li].grad[0] = 1.0;

        for i in (0..=li).rev() {
            if reachable[i] && self.nodes[i].requires {
                self.backward_step(i);
            }
        }
        Ok(())
    }

    fn for_each_input(&self, i: usize, mut f: impl FnMut(usize)) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, k, .. } | Op::ConvTranspose2d { x, k, .. } => {
                f(*x);
                f(*k);
            }
            Op::Dense { x, w, b } => {
                f(*x);
                f(*w);
                f(*b);
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                f(*x);
                f(*gamma);
                f(*beta);
            }
            Op::Act { x, .. }
            | Op::Softmax { x }
            | Op::GradReverse { x, .. }
            | Op::Mean { x }
            | Op::WeightedSum { x, .. }
            | Op::Neg { x }
            | Op::Reshape { x } => f(*x),
            Op::CrossEntropy { probs, .. } => f(*probs),
            Op::Sub { a, b } => {
                f(*a);
                f(*b);
            }
        }
    }

    /// Temporarily detach an input's gradient buffer so it can be mutated
    /// while the rest of the tape stays readable.
    fn with_input_grad(&mut self, j: usize, f: impl FnOnce(&Tape, &mut [f64])) {
        if !self.nodes[j].requires {
            return;
        }
        let mut g = std::mem::take(&mut self.nodes[j].grad);
        f(self, &mut g);
        self.nodes[j].grad = g;
    }

    fn backward_step(&mut self, i: usize) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, k, meta } => {
                let (xs, ks) = (self.nodes[x].shape.clone(), self.nodes[k].shape.clone());
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (ko, _, r, s) = (ks[0], ks[1], ks[2], ks[3]);
                let os = self.nodes[i].shape.clone();
                let (oh, ow) = (os[2], os[3]);
                let crs = c * r * s;
                self.with_input_grad(x, |t, gx| {
                    let dy = &t.nodes[i].grad;
                    let kd = &t.nodes[k].data;
                    let mut dcols = vec![0.0; oh * ow * crs];
                    for ni in 0..n {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        let dyb = &dy[ni * ko * oh * ow..(ni + 1) * ko * oh * ow];
                        for ki in 0..ko {
                            let krow = &kd[ki * crs..(ki + 1) * crs];
                            let dyrow = &dyb[ki * oh * ow..(ki + 1) * oh * ow];
                            for (pos, &g) in dyrow.iter().enumerate() {
                                if g != 0.0 {
                                    axpy(g, krow, &mut dcols[pos * crs..(pos + 1) * crs]);
                                }
                            }
                        }
                        col2im(
                            &dcols, c, h, w, r, s, meta.stride, meta.padding, oh, ow,
                            &mut gx[ni * c * h * w..(ni + 1) * c * h * w],
                        );
                    }
                });
                self.with_input_grad(k, |t, gk| {
                    let dy = &t.nodes[i].grad;
                    let xd = &t.nodes[x].data;
                    let mut cols = vec![0.0; oh * ow * crs];
                    for ni in 0..n {
                        let xb = &xd[ni * c * h * w..(ni + 1) * c * h * w];
                        im2col(xb, c, h, w, r, s, meta.stride, meta.padding, oh, ow, &mut cols);
                        let dyb = &dy[ni * ko * oh * ow..(ni + 1) * ko * oh * ow];
                        for ki in 0..ko {
                            let dyrow = &dyb[ki * oh * ow..(ki + 1) * oh * ow];
                            let gkrow = &mut gk[ki * crs..(ki + 1) * crs];
                            for (pos, &g) in dyrow.iter().enumerate() {
                                if g != 0.0 {
                                    axpy(g, &cols[pos * crs..(pos + 1) * crs], gkrow);
                                }
                            }
                        }
                    }
                });
            }
            Op::ConvTranspose2d { x, k, meta } => {
                let (xs, ks) = (self.nodes[x].shape.clone(), self.nodes[k].shape.clone());
                let (n, kk, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (_, c, r, s) = (ks[0], ks[1], ks[2], ks[3]);
                let os = self.nodes[i].shape.clone();
                let (oh, ow) = (os[2], os[3]);
                let crs = c * r * s;
                // drows[pos, :] gathers dy patches at every input position
                let mut drows = vec![0.0; h * w * crs];
                self.with_input_grad(x, |t, gx| {
                    let dy = &t.nodes[i].grad;
                    let kd = &t.nodes[k].data;
                    for ni in 0..n {
                        let dyb = &dy[ni * c * oh * ow..(ni + 1) * c * oh * ow];
                        im2col(dyb, c, oh, ow, r, s, meta.stride, meta.padding, h, w, &mut drows);
                        let gxb = &mut gx[ni * kk * h * w..(ni + 1) * kk * h * w];
                        for ki in 0..kk {
                            let krow = &kd[ki * crs..(ki + 1) * crs];
                            let gxrow = &mut gxb[ki * h * w..(ki + 1) * h * w];
                            for (pos, out) in gxrow.iter_mut().enumerate() {
                                *out += dot(&drows[pos * crs..(pos + 1) * crs], krow);
                            }
                        }
                    }
                });
                self.with_input_grad(k, |t, gk| {
                    let dy = &t.nodes[i].grad;
                    let xd = &t.nodes[x].data;
                    for ni in 0..n {
                        let dyb = &dy[ni * c * oh * ow..(ni + 1) * c * oh * ow];
                        im2col(dyb, c, oh, ow, r, s, meta.stride, meta.padding, h, w, &mut drows);
                        let xb = &xd[ni * kk * h * w..(ni + 1) * kk * h * w];
                        for ki in 0..kk {
                            let xrow = &xb[ki * h * w..(ki + 1) * h * w];
                            let gkrow = &mut gk[ki * crs..(ki + 1) * crs];
                            for (pos, &xv) in xrow.iter().enumerate() {
                                if xv != 0.0 {
                                    axpy(xv, &drows[pos * crs..(pos + 1) * crs], gkrow);
                                }
                            }
                        }
                    }
                });
            }
            Op::Dense { x, w, b } => {
                let (n, d) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let m = self.nodes[w].shape[0];
                self.with_input_grad(x, |t, gx| {
                    let dy = &t.nodes[i].grad;
                    let wd = &t.nodes[w].data;
                    for ii in 0..n {
                        let dyrow = &dy[ii * m..(ii + 1) * m];
                        let gxrow = &mut gx[ii * d..(ii + 1) * d];
                        for j in 0..m {
                            if dyrow[j] != 0.0 {
                                axpy(dyrow[j], &wd[j * d..(j + 1) * d], gxrow);
                            }
                        }
                    }
                });
                self.with_input_grad(w, |t, gw| {
                    let dy = &t.nodes[i].grad;
                    let xd = &t.nodes[x].data;
                    for ii in 0..n {
                        let dyrow = &dy[ii * m..(ii + 1) * m];
                        let xrow = &xd[ii * d..(ii + 1) * d];
                        for j in 0..m {
                            if dyrow[j] != 0.0 {
                                axpy(dyrow[j], xrow, &mut gw[j * d..(j + 1) * d]);
                            }
                        }
                    }
                });
                self.with_input_grad(b, |t, gb| {
                    let dy = &t.nodes[i].grad;
                    for ii in 0..n {
                        for j in 0..m {
                            gb[j] += dy[ii * m + j];
                        }
                    }
                });
            }
            Op::Act { x, kind } => {
                self.with_input_grad(x, |t, gx| {
                    let dy = &t.nodes[i].grad;
                    let xd = &t.nodes[x].data;
                    let yd = &t.nodes[i].data;
                    match kind {
                        Activation::Relu => {
                            for j in 0..gx.len() {
                                if xd[j] > 0.0 {
                                    gx[j] += dy[j];
                                }
                            }
                        }
                        Activation::LeakyRelu(a) => {
                            for j in 0..gx.len() {
                                gx[j] += dy[j] * if xd[j] > 0.0 { 1.0 } else { a };
                            }
                        }
                        Activation::Tanh => {
                            for j in 0..gx.len() {
                                gx[j] += dy[j] * (1.0 - yd[j] * yd[j]);
                            }
                        }
                        Activation::Sigmoid => {
                            for j in 0..gx.len() {
                                gx[j] += dy[j] * yd[j] * (1.0 - yd[j]);
                            }
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, train, ref mean, ref inv_std } => {
                let xs = self.nodes[x].shape.clone();
                let n = xs[0];
                let c = xs[1];
                let hw: usize = xs[2..].iter().product::<usize>().max(1);
                let m = (n * hw) as f64;
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                // per-channel reductions shared by all three inputs
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                {
                    let dy = &self.nodes[i].grad;
                    let xd = &self.nodes[x].data;
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for k in 0..hw {
                                let xhat = (xd[base + k] - mean[ci]) * inv_std[ci];
                                sum_dy[ci] += dy[base + k];
                                sum_dy_xhat[ci] += dy[base + k] * xhat;
                            }
                        }
                    }
                }
                self.with_input_grad(x, |t, gx| {
                    let dy = &t.nodes[i].grad;
                    let xd = &t.nodes[x].data;
                    let gd = &t.nodes[gamma].data;
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            if train {
                                // batch statistics depend on x
                                let scale = gd[ci] * inv_std[ci] / m;
                                for k in 0..hw {
                                    let xhat = (xd[base + k] - mean[ci]) * inv_std[ci];
                                    gx[base + k] += scale
                                        * (m * dy[base + k] - sum_dy[ci] - xhat * sum_dy_xhat[ci]);
                                }
                            } else {
                                // running statistics are constants
                                let scale = gd[ci] * inv_std[ci];
                                for k in 0..hw {
                                    gx[base + k] += scale * dy[base + k];
                                }
                            }
                        }
                    }
                });
                self.with_input_grad(gamma, |_, gg| {
                    for ci in 0..c {
                        gg[ci] += sum_dy_xhat[ci];
                    }
                });
                self.with_input_grad(beta, |_, gb| {
                    for ci in 0..c {
                        gb[ci] += sum_dy[ci];
                    }
                });
            }
            Op::Softmax { x } => {
                let (n, k) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                self.with_input_grad(x, |t, gx| {
                    let dy = &t.nodes[i].grad;
                    let yd = &t.nodes[i].data;
                    for ii in 0..n {
                        let yrow = &yd[ii * k..(ii + 1) * k];
                        let dyrow = &dy[ii * k..(ii + 1) * k];
                        let inner = dot(yrow, dyrow);
                        let gxrow = &mut gx[ii * k..(ii + 1) * k];
                        for j in 0..k {
                            gxrow[j] += yrow[j] * (dyrow[j] - inner);
                        }
                    }
                });
            }
            Op::CrossEntropy { probs, ref weights, wsum, ref targets } => {
                const FLOOR: f64 = 1e-12;
                if wsum != 0.0 {
                    let weights = weights.clone();
                    let targets = targets.clone();
                    let k = self.nodes[probs].shape[1];
                    self.with_input_grad(probs, |t, gp| {
                        let g = t.nodes[i].grad[0];
                        let pd = &t.nodes[probs].data;
                        for (ii, &ti) in targets.iter().enumerate() {
                            let p = pd[ii * k + ti];
                            // clamped probabilities sit on the constant floor
                            if p >= FLOOR && weights[ii] != 0.0 {
                                gp[ii * k + ti] += g * (-weights[ii] / (wsum * p));
                            }
                        }
                    });
                }
            }
            Op::GradReverse { x, lambda } => {
                self.with_input_grad(x, |t, gx| {
                    let dy = &t.nodes[i].grad;
                    for j in 0..gx.len() {
                        gx[j] += -lambda * dy[j];
                    }
                });
            }
            Op::Mean { x } => {
                let len = self.nodes[x].data.len() as f64;
                self.with_input_grad(x, |t, gx| {
                    let g = t.nodes[i].grad[0] / len;
                    gx.iter_mut().for_each(|v| *v += g);
                });
            }
            Op::WeightedSum { x, ref weights } => {
                let weights = weights.clone();
                self.with_input_grad(x, |t, gx| {
                    let g = t.nodes[i].grad[0];
                    for (v, w) in gx.iter_mut().zip(&weights) {
                        *v += g * w;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.with_input_grad(a, |t, ga| {
                    let dy = &t.nodes[i].grad;
                    for j in 0..ga.len() {
                        ga[j] += dy[j];
                    }
                });
                self.with_input_grad(b, |t, gb| {
                    let dy = &t.nodes[i].grad;
                    for j in 0..gb.len() {
                        gb[j] -= dy[j];
                    }
                });
            }
            Op::Neg { x } => {
                self.with_input_grad(x, |t, gx| {
                    let dy = &t.nodes[i].grad;
                    for j in 0..gx.len() {
                        gx[j] -= dy[j];
                    }
                });
            }
            Op::Reshape { x } => {
                self.with_input_grad(x, |t, gx| {
                    let dy = &t.nodes[i].grad;
                    for j in 0..gx.len() {
                        gx[j] += dy[j];
                    }
                });
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Gather `[C,H,W]` patches into `cols[pos, c*R*S + r*S + s]` where
/// `pos` ranges over an `oh x ow` grid and the source pixel is
/// `(oh*stride + r - padding, ow*stride + s - padding)`; out-of-bounds
/// entries are zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    s: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let crs = c * r * s;
    debug_assert_eq!(cols.len(), oh * ow * crs);
    for ohi in 0..oh {
        for owi in 0..ow {
            let pos = ohi * ow + owi;
            let out = &mut cols[pos * crs..(pos + 1) * crs];
            let mut idx = 0;
            for ci in 0..c {
                for ri in 0..r {
                    let ih = (ohi * stride + ri).wrapping_sub(padding);
                    if ih >= h {
                        out[idx..idx + s].iter_mut().for_each(|v| *v = 0.0);
                        idx += s;
                        continue;
                    }
                    let row = &src[(ci * h + ih) * w..(ci * h + ih + 1) * w];
                    for si in 0..s {
                        let iw = (owi * stride + si).wrapping_sub(padding);
                        out[idx] = if iw < w { row[iw] } else { 0.0 };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add the adjoint of [`im2col`]: accumulate `cols` rows back into
/// the `[C,H,W]` buffer.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    s: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dst: &mut [f64],
) {
    let crs = c * r * s;
    debug_assert_eq!(cols.len(), oh * ow * crs);
    debug_assert_eq!(dst.len(), c * h * w);
    for ohi in 0..oh {
        for owi in 0..ow {
            let pos = ohi * ow + owi;
            let inp = &cols[pos * crs..(pos + 1) * crs];
            let mut idx = 0;
            for ci in 0..c {
                for ri in 0..r {
                    let ih = (ohi * stride + ri).wrapping_sub(padding);
                    if ih >= h {
                        idx += s;
                        continue;
                    }
                    let row = &mut dst[(ci * h + ih) * w..(ci * h + ih + 1) * w];
                    for si in 0..s {
                        let iw = (owi * stride + si).wrapping_sub(padding);
                        if iw < w {
                            row[iw] += inp[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect())).unwrap();
        let k = tape.constant(t(vec![1, 1, 1, 1], vec![1.0])).unwrap();
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv2d_zero_kernel_zero_output_and_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()), true).unwrap();
        let k = tape.constant(t(vec![1, 1, 2, 2], vec![0.0; 4])).unwrap();
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
        let l = tape.mean(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_hand_summed_window() {
        // 3x3 input 1..9, 2x2 ones kernel, stride 1 -> [12,16,24,28]
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect())).unwrap();
        let k = tape.constant(t(vec![1, 1, 2, 2], vec![1.0; 4])).unwrap();
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv2d_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 3, 3])).unwrap();
        let k = tape.constant(Tensor::zeros(vec![1, 3, 2, 2])).unwrap();
        let err = tape.conv2d(x, k, 1, 0).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 3, 3]") && err.contains("[1, 3, 2, 2]"), "{err}");
    }

    #[test]
    fn conv_transpose_scatters_block() {
        // 1x1 input v, 2x2 ones kernel, stride 2 -> 2x2 block of v
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 1, 1, 1], vec![3.5])).unwrap();
        let k = tape.constant(t(vec![1, 1, 2, 2], vec![1.0; 4])).unwrap();
        let y = tape.conv_transpose2d(x, k, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y), &[3.5; 4]);
    }

    #[test]
    fn conv_transpose_zero_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 3, 3])).unwrap();
        let k = tape.constant(t(vec![2, 1, 4, 4], (0..32).map(|i| i as f64).collect())).unwrap();
        let y = tape.conv_transpose2d(x, k, 2, 1).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_adjoint_identity() {
        // <conv(x), y> == <x, conv_transpose(y)> on random small tensors
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "test.adjoint");
        // sizes chosen so (h + 2p - r) divides the stride and the
        // transpose reproduces the input grid exactly
        for &(st, p, h, w) in &[(1usize, 0usize, 6usize, 6usize), (2, 1, 7, 7), (2, 0, 7, 9), (1, 1, 6, 5)] {
            let (n, c, ko, r, s) = (2, 3, 4, 3, 3);
            let x = Tensor::uniform(vec![n, c, h, w], 1.0, &mut rng);
            let k = Tensor::uniform(vec![ko, c, r, s], 1.0, &mut rng);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let kv = tape.constant(k.clone()).unwrap();
            let cx = tape.conv2d(xv, kv, st, p).unwrap();
            let y = Tensor::uniform(tape.shape(cx).to_vec(), 1.0, &mut rng);
            let yv = tape.constant(y.clone()).unwrap();
            let cty = tape.conv_transpose2d(yv, kv, st, p).unwrap();
            assert_eq!(tape.shape(cty), x.shape());
            let lhs: f64 = tape.value(cx).iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(tape.value(cty)).map(|(a, b)| a * b).sum();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-8);
        }
    }

    #[test]
    fn dense_identity_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let w = tape.constant(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = tape.constant(t(vec![2], vec![0.0, 0.0])).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        // 1x2 input [1,2], weight [[3,4]], bias [5] -> [16]
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 2], vec![1.0, 2.0])).unwrap();
        let w = tape.constant(t(vec![1, 2], vec![3.0, 4.0])).unwrap();
        let b = tape.constant(t(vec![1], vec![5.0])).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[16.0]);
    }

    #[test]
    fn dense_zero_weight_rows_equal_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let w = tape.constant(Tensor::zeros(vec![2, 2])).unwrap();
        let b = tape.constant(t(vec![2], vec![7.0, -1.0])).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        for row in tape.value(y).chunks(2) {
            assert_eq!(row, &[7.0, -1.0]);
        }
    }

    #[test]
    fn activations_match_definitions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 3], vec![-1.0, 0.0, 2.0])).unwrap();
        let y = tape.activation(x, Activation::Relu);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);

        let z = tape.constant(t(vec![1, 1], vec![0.0])).unwrap();
        let th = tape.activation(z, Activation::Tanh);
        assert_eq!(tape.value(th), &[0.0]);

        let n = tape.constant(t(vec![1, 1], vec![-5.0])).unwrap();
        let lk = tape.activation(n, Activation::LeakyRelu(0.2));
        assert_relative_eq!(tape.value(lk)[0], -1.0, max_relative = 1e-12);
    }

    #[test]
    fn softmax_symmetry_and_formula() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 2], vec![0.0, 0.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let x = tape.constant(t(vec![1, 3], vec![1.0, 2.0, 3.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        for (got, want) in tape.value(y).iter().zip([1f64, 2.0, 3.0].iter().map(|v| v.exp() / z)) {
            assert_relative_eq!(*got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 3], vec![0.3, -1.2, 2.0])).unwrap();
        let xs = tape.constant(t(vec![1, 3], vec![0.3 + 100.0, -1.2 + 100.0, 2.0 + 100.0])).unwrap();
        let a = tape.softmax(x).unwrap();
        let b = tape.softmax(xs).unwrap();
        for (p, q) in tape.value(a).iter().zip(tape.value(b)) {
            assert_relative_eq!(p, q, max_relative = 1e-12);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        // exact one-hot -> 0
        let mut tape = Tape::new();
        let p = tape.constant(t(vec![1, 2], vec![1.0, 0.0])).unwrap();
        let l = tape.constant(t(vec![1, 2], vec![1.0, 0.0])).unwrap();
        let ce = tape.cross_entropy(p, l).unwrap();
        assert_eq!(tape.value(ce), &[0.0]);

        // uniform two-class -> ln 2
        let mut tape = Tape::new();
        let p = tape.constant(t(vec![1, 2], vec![0.5, 0.5])).unwrap();
        let l = tape.constant(t(vec![1, 2], vec![0.0, 1.0])).unwrap();
        let ce = tape.cross_entropy(p, l).unwrap();
        assert_relative_eq!(tape.value(ce)[0], std::f64::consts::LN_2, max_relative = 1e-12);

        // [0.3, 0.7] label 1 -> -ln 0.7
        let mut tape = Tape::new();
        let p = tape.constant(t(vec![1, 2], vec![0.3, 0.7])).unwrap();
        let l = tape.constant(t(vec![1, 2], vec![0.0, 1.0])).unwrap();
        let ce = tape.cross_entropy(p, l).unwrap();
        assert_relative_eq!(tape.value(ce)[0], -(0.7f64.ln()), max_relative = 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_unnormalized() {
        let mut tape = Tape::new();
        let p = tape.constant(t(vec![1, 2], vec![0.3, 0.3])).unwrap();
        let l = tape.constant(t(vec![1, 2], vec![1.0, 0.0])).unwrap();
        assert!(matches!(tape.cross_entropy(p, l), Err(Error::Contract { .. })));
    }

    #[test]
    fn wgan_loss_hand_values() {
        let mut tape = Tape::new();
        let real = tape.constant(t(vec![2, 1], vec![1.0, 3.0])).unwrap();
        let fake = tape.constant(t(vec![2, 1], vec![0.0, 2.0])).unwrap();
        let (cl, gl) = tape.wgan_losses(real, fake).unwrap();
        assert_eq!(tape.value(cl), &[-1.0]);
        assert_eq!(tape.value(gl), &[-1.0]);

        // equal scores -> zero critic loss
        let mut tape = Tape::new();
        let real = tape.constant(t(vec![2, 1], vec![0.4, 0.6])).unwrap();
        let fake = tape.constant(t(vec![2, 1], vec![0.4, 0.6])).unwrap();
        let (cl, _) = tape.wgan_losses(real, fake).unwrap();
        assert_eq!(tape.value(cl), &[0.0]);

        // zero fake scores -> zero generator loss
        let mut tape = Tape::new();
        let real = tape.constant(t(vec![1, 1], vec![5.0])).unwrap();
        let fake = tape.constant(t(vec![1, 1], vec![0.0])).unwrap();
        let (_, gl) = tape.wgan_losses(real, fake).unwrap();
        assert_eq!(tape.value(gl), &[0.0]);
    }

    #[test]
    fn grad_reverse_forward_bitwise_identity() {
        let mut tape = Tape::new();
        let vals = vec![0.1, -0.0, 3.25e-17, 1e300, -7.5];
        let x = tape.leaf(t(vec![5], vals.clone()), true).unwrap();
        let y = tape.grad_reverse(x, 2.5).unwrap();
        for (a, b) in vals.iter().zip(tape.value(y)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn grad_reverse_negates_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1], vec![2.0]), true).unwrap();
        let y = tape.grad_reverse(x, 1.0).unwrap();
        let l = tape.mean(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x), &[-1.0]);
    }

    #[test]
    fn grad_reverse_lambda_zero_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![3], vec![1.0, 2.0, 3.0]), true).unwrap();
        let y = tape.grad_reverse(x, 0.0).unwrap();
        let l = tape.mean(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn grad_reverse_rejects_negative_lambda() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1], vec![1.0])).unwrap();
        assert!(matches!(tape.grad_reverse(x, -0.5), Err(Error::Parameter { .. })));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2], vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![4], vec![1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let m = tape.mean(x);
        tape.backward(m).unwrap();
        assert!(tape.grad(x).iter().all(|&g| g == 0.25));
    }

    #[test]
    fn backward_is_deterministic() {
        use rand::Rng;
        let mut rng = crate::rng::stream(5, "test.det");
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(vec![2, 3, 5, 5], 1.0, &mut rng), true).unwrap();
        let k = tape.leaf(Tensor::uniform(vec![4, 3, 3, 3], 0.5, &mut rng), true).unwrap();
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        let a = tape.activation(y, Activation::Tanh);
        let l = tape.mean(a);
        tape.backward(l).unwrap();
        let g1: Vec<u64> = tape.grad(k).iter().map(|v| v.to_bits()).collect();
        tape.backward(l).unwrap();
        let g2: Vec<u64> = tape.grad(k).iter().map(|v| v.to_bits()).collect();
        assert_eq!(g1, g2);
    }

    #[test]
    fn batch_norm_train_normalizes() {
        use rand::Rng;
        let mut rng = crate::rng::stream(9, "test.bn");
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(vec![4, 2, 3, 3], 2.0, &mut rng), true).unwrap();
        let g = tape.constant(Tensor::filled(vec![2], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(vec![2])).unwrap();
        let mut rs = RunningStats::new(2);
        let y = tape.batch_norm(x, g, b, &mut rs, BnMode::Train, 0.1, 1e-5).unwrap();
        let yd = tape.value(y);
        for ci in 0..2 {
            let mut vals = Vec::new();
            for ni in 0..4 {
                let base = (ni * 2 + ci) * 9;
                vals.extend_from_slice(&yd[base..base + 9]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "channel mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel var {var}");
        }
    }

    #[test]
    fn batch_norm_constant_input_gives_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(vec![2, 1, 2, 2], 3.0)).unwrap();
        let g = tape.constant(Tensor::filled(vec![1], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(vec![1])).unwrap();
        let mut rs = RunningStats::new(1);
        let y = tape.batch_norm(x, g, b, &mut rs, BnMode::Train, 0.1, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_eval_matches_hand_formula() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 1, 1, 2], vec![3.0, 5.0])).unwrap();
        let g = tape.constant(t(vec![1], vec![2.0])).unwrap();
        let b = tape.constant(t(vec![1], vec![0.5])).unwrap();
        let mut rs = RunningStats { mean: vec![4.0], var: vec![4.0] };
        let eps = 1e-5;
        let y = tape.batch_norm(x, g, b, &mut rs, BnMode::Eval, 0.1, eps).unwrap();
        let inv = 1.0 / (4.0f64 + eps).sqrt();
        assert_relative_eq!(tape.value(y)[0], 2.0 * (3.0 - 4.0) * inv + 0.5, max_relative = 1e-12);
        assert_relative_eq!(tape.value(y)[1], 2.0 * (5.0 - 4.0) * inv + 0.5, max_relative = 1e-12);
    }

    #[test]
    fn batch_norm_train_rejects_batch_of_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 2, 2])).unwrap();
        let g = tape.constant(Tensor::filled(vec![2], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(vec![2])).unwrap();
        let mut rs = RunningStats::new(2);
        assert!(matches!(
            tape.batch_norm(x, g, b, &mut rs, BnMode::Train, 0.1, 1e-5),
            Err(Error::BatchSize(1))
        ));
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut tape = Tape::new();
        assert!(tape.leaf(t(vec![1], vec![f64::INFINITY]), false).is_err());
    }
}
