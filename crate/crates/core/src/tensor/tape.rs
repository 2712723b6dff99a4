use super::conv::{col2im, im2col, max_pool2d, ConvGeometry};
use super::gemm::{matmul_nn, matmul_nt, matmul_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A surrogate backward rule. Receives the upstream gradient of the node's
/// output and returns one optional gradient per recorded input, in order.
pub trait CustomVjp {
    fn vjp(&self, upstream: &[f32]) -> Vec<Option<Vec<f32>>>;
}

enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        batch: usize,
        out_channels: usize,
        cols: Vec<f32>,
    },
    AddBias {
        x: Var,
        bias: Var,
        channels: usize,
        spatial: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Sum {
        x: Var,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        channels: usize,
        spatial: usize,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        scale: Vec<f32>,
        channels: usize,
        spatial: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f32>,
        labels: Vec<usize>,
    },
    KlDivergence {
        student: Var,
        student_probs: Vec<f32>,
        teacher: Vec<f32>,
        temperature: f32,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomVjp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded Wengert list. Nodes are appended in evaluation order,
/// so reverse index order is a valid reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `target`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) {
        if let Some(g) = self.get(v) {
            target.accumulate_grad(g);
        }
    }
}

fn add_into(slot: &mut Option<Vec<f32>>, g: &[f32]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Channel layout of a `[B, C, ...]` tensor: `(batch, channels, spatial)`.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Dimension(format!(
            "expected [B, C, ...] tensor, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Per-channel `Σ up` and `Σ up·x̂`.
fn channel_sums(up: &[f32], xhat: &[f32], channels: usize, spatial: usize) -> (Vec<f32>, Vec<f32>) {
    let mut sum_up = vec![0.0f32; channels];
    let mut sum_up_xhat = vec![0.0f32; channels];
    for (j, (uc, hc)) in up.chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
        let c = j % channels;
        sum_up[c] += uc.iter().sum::<f32>();
        sum_up_xhat[c] += uc.iter().zip(hc).map(|(u, h)| u * h).sum::<f32>();
    }
    (sum_up, sum_up_xhat)
}

/// Eval-mode BatchNorm affine parameters: `scale = γ/√(σ²+ε)`.
pub(crate) fn bn_eval_scale(gamma: &[f32], var: &[f32], eps: f32) -> Vec<f32> {
    gamma
        .iter()
        .zip(var)
        .map(|(g, v)| g / (v + eps).sqrt())
        .collect()
}

/// Applies eval-mode BatchNorm in place: `y = (x − μ)·scale + β`.
pub(crate) fn bn_eval_apply(
    x: &mut [f32],
    channels: usize,
    spatial: usize,
    scale: &[f32],
    mean: &[f32],
    beta: &[f32],
) {
    for (j, chunk) in x.chunks_mut(spatial).enumerate() {
        let c = j % channels;
        let (m, s, b) = (mean[c], scale[c], beta[c]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) * s + b);
    }
}

/// Row-wise `softmax(logits · inv_temp)` over `[B, classes]` data.
pub fn softmax_rows(logits: &[f32], classes: usize, inv_temp: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; logits.len()];
    for (row, dst) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row
            .iter()
            .fold(f32::NEG_INFINITY, |m, &v| m.max(v * inv_temp));
        let mut sum = 0.0f32;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v * inv_temp - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Gradients are reported for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value.detached(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a node whose forward value was computed by the caller and whose
    /// backward is the supplied surrogate rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn CustomVjp>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    fn matmul_dims(&self, a: Var, b: Var) -> Result<(usize, usize, usize)> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul shape mismatch: {sa:?} x {sb:?}"
            )));
        }
        Ok((sa[0], sa[1], sb[1]))
    }

    /// `a[M×K] · b[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = self.matmul_dims(a, b)?;
        let mut out = vec![0.0f32; m * n];
        matmul_nn(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Matmul { a, b, m, k, n },
            rg,
        ))
    }

    /// Records a matmul whose forward value was computed elsewhere (e.g. in
    /// exact integer arithmetic) but whose backward is the float matmul rule.
    pub(crate) fn matmul_with_value(&mut self, a: Var, b: Var, value: Tensor) -> Result<Var> {
        let (m, k, n) = self.matmul_dims(a, b)?;
        if value.shape() != [m, n] {
            return Err(Error::Dimension("precomputed matmul value shape".into()));
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Matmul { a, b, m, k, n }, rg))
    }

    fn conv_geometry(
        &self,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    ) -> Result<(ConvGeometry, usize, usize)> {
        let (si, sk) = (self.value(input).shape(), self.value(kernel).shape());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::Dimension(format!(
                "conv2d shape mismatch: input {si:?}, kernel {sk:?}"
            )));
        }
        let g = ConvGeometry::new(si[1], si[2], si[3], sk[2], sk[3], stride, pad)?;
        Ok((g, si[0], sk[0]))
    }

    fn lower(&self, input: Var, g: &ConvGeometry, batch: usize) -> Vec<f32> {
        let per = g.patch_len() * g.positions();
        let mut cols = vec![0.0f32; batch * per];
        let x = self.value(input).data();
        for b in 0..batch {
            im2col(
                g,
                &x[b * g.image_len()..(b + 1) * g.image_len()],
                &mut cols[b * per..(b + 1) * per],
            );
        }
        cols
    }

    /// Cross-correlation of `[B×C×H×W]` input with `[O×C×kH×kW]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (g, batch, out_channels) = self.conv_geometry(input, kernel, stride, pad)?;
        let cols = self.lower(input, &g, batch);
        let (kl, p) = (g.patch_len(), g.positions());
        let mut out = vec![0.0f32; batch * out_channels * p];
        let w = self.value(kernel).data();
        for b in 0..batch {
            matmul_nn(
                out_channels,
                kl,
                p,
                w,
                &cols[b * kl * p..(b + 1) * kl * p],
                &mut out[b * out_channels * p..(b + 1) * out_channels * p],
            );
        }
        let value = Tensor::new(vec![batch, out_channels, g.out_h, g.out_w], out)?;
        let rg = self.any_grad(&[input, kernel]);
        let op = Op::Conv2d {
            input,
            kernel,
            geom: g,
            batch,
            out_channels,
            cols: if rg { cols } else { Vec::new() },
        };
        Ok(self.push(value, op, rg))
    }

    /// Conv counterpart of [`Tape::matmul_with_value`].
    pub(crate) fn conv2d_with_value(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        value: Tensor,
    ) -> Result<Var> {
        let (g, batch, out_channels) = self.conv_geometry(input, kernel, stride, pad)?;
        if value.shape() != [batch, out_channels, g.out_h, g.out_w] {
            return Err(Error::Dimension("precomputed conv value shape".into()));
        }
        let rg = self.any_grad(&[input, kernel]);
        let cols = if rg {
            self.lower(input, &g, batch)
        } else {
            Vec::new()
        };
        let op = Op::Conv2d {
            input,
            kernel,
            geom: g,
            batch,
            out_channels,
            cols,
        };
        Ok(self.push(value, op, rg))
    }

    /// Adds `bias[C]` along axis 1 of a `[B, C, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, channels, spatial) = channel_layout(self.value(x).shape())?;
        if self.value(bias).len() != channels {
            return Err(Error::Dimension(format!(
                "bias of length {} for {channels} channels",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (j, chunk) in out.chunks_mut(spatial).enumerate() {
            let bc = b[j % channels];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(
            value,
            Op::AddBias {
                x,
                bias,
                channels,
                spatial,
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v * factor).collect(),
            grad: None,
        };
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v.max(0.0)).collect(),
            grad: None,
        };
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Non-overlapping max pooling with window and stride `size`.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 || size == 0 || shape[2] < size || shape[3] < size {
            return Err(Error::Dimension(format!(
                "max_pool2d({size}) on shape {shape:?}"
            )));
        }
        let (out, argmax, oshape) = max_pool2d(self.value(x).data(), &shape, size);
        let value = Tensor::new(oshape.to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).detached().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Training-mode BatchNorm over axis 1 with biased batch statistics.
    /// Returns the output and the per-channel batch mean and variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let (batch, channels, spatial) = channel_layout(self.value(x).shape())?;
        if batch < 2 {
            return Err(Error::Input(format!(
                "BatchNorm in training mode needs batch >= 2, got {batch}"
            )));
        }
        self.check_bn_params(gamma, beta, channels)?;
        let xs = self.value(x).data();
        let count = (batch * spatial) as f32;
        let mut mean = vec![0.0f32; channels];
        let mut var = vec![0.0f32; channels];
        for (j, chunk) in xs.chunks(spatial).enumerate() {
            mean[j % channels] += chunk.iter().sum::<f32>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (j, chunk) in xs.chunks(spatial).enumerate() {
            let m = mean[j % channels];
            var[j % channels] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<f32>();
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; xs.len()];
        let mut out = vec![0.0f32; xs.len()];
        for (j, ((xc, hc), oc)) in xs
            .chunks(spatial)
            .zip(xhat.chunks_mut(spatial))
            .zip(out.chunks_mut(spatial))
            .enumerate()
        {
            let c = j % channels;
            let (m, is, gc, bc) = (mean[c], inv_std[c], g[c], b[c]);
            for ((&v, h), o) in xc.iter().zip(hc.iter_mut()).zip(oc.iter_mut()) {
                *h = (v - m) * is;
                *o = gc * *h + bc;
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let y = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                spatial,
            },
            rg,
        );
        Ok((y, mean, var))
    }

    /// Eval-mode BatchNorm using stored statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let (_, channels, spatial) = channel_layout(self.value(x).shape())?;
        self.check_bn_params(gamma, beta, channels)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::Dimension("BatchNorm statistics length".into()));
        }
        let scale = bn_eval_scale(self.value(gamma).data(), running_var, eps);
        let mut out = self.value(x).data().to_vec();
        bn_eval_apply(
            &mut out,
            channels,
            spatial,
            &scale,
            running_mean,
            self.value(beta).data(),
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        let xhat = if rg {
            let inv: Vec<f32> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut h = self.value(x).data().to_vec();
            for (j, chunk) in h.chunks_mut(spatial).enumerate() {
                let (m, s) = (running_mean[j % channels], inv[j % channels]);
                chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
            }
            h
        } else {
            Vec::new()
        };
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                scale,
                channels,
                spatial,
            },
            rg,
        ))
    }

    fn check_bn_params(&self, gamma: Var, beta: Var, channels: usize) -> Result<()> {
        if self.value(gamma).len() != channels || self.value(beta).len() != channels {
            return Err(Error::Dimension(format!(
                "BatchNorm parameters do not match {channels} channels"
            )));
        }
        Ok(())
    }

    fn class_layout(&self, logits: Var) -> Result<(usize, usize)> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::Dimension(format!(
                "expected [B, C] logits, got {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (batch, classes) = self.class_layout(logits)?;
        if labels.len() != batch {
            return Err(Error::Input(format!(
                "{} labels for batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut loss = 0.0f32;
        for (row, &label) in z.chunks(classes).zip(labels) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f32>().ln() + max;
            loss += lse - row[label];
        }
        loss /= batch as f32;
        let probs = softmax_rows(z, classes, 1.0);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over the batch of `KL(teacher ‖ softmax(student / T))`. The
    /// teacher distribution is a plain buffer, so no gradient reaches it.
    pub fn kl_divergence(
        &mut self,
        student: Var,
        teacher_probs: &[f32],
        temperature: f32,
    ) -> Result<Var> {
        let (batch, classes) = self.class_layout(student)?;
        if teacher_probs.len() != batch * classes {
            return Err(Error::Dimension("teacher distribution shape".into()));
        }
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::Input(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        for (r, row) in teacher_probs.chunks(classes).enumerate() {
            let s: f32 = row.iter().sum();
            if (s - 1.0).abs() > 1e-5 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Input(format!(
                    "teacher row {r} is not a distribution (sum {s})"
                )));
            }
        }
        let z = self.value(student).data();
        let inv_t = 1.0 / temperature;
        let q = softmax_rows(z, classes, inv_t);
        let mut loss = 0.0f32;
        for (zr, pr) in z.chunks(classes).zip(teacher_probs.chunks(classes)) {
            let max = zr.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v * inv_t));
            let lse = zr
                .iter()
                .map(|&v| (v * inv_t - max).exp())
                .sum::<f32>()
                .ln()
                + max;
            for (&zc, &p) in zr.iter().zip(pr) {
                if p > 0.0 {
                    loss += p * (p.ln() - (zc * inv_t - lse));
                }
            }
        }
        loss /= batch as f32;
        let rg = self.any_grad(&[student]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDivergence {
                student,
                student_probs: q,
                teacher: teacher_probs.to_vec(),
                temperature,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(up) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &up, &mut grads);
            grads[idx] = Some(up);
        }
        // Only leaves keep gradients; interior buffers are dropped.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, up: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    let mut ga = vec![0.0f32; m * k];
                    matmul_nt(m, n, k, up, self.value(*b).data(), &mut ga);
                    add_into(&mut grads[a.0], &ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0f32; k * n];
                    matmul_tn(k, m, n, self.value(*a).data(), up, &mut gb);
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                out_channels,
                cols,
            } => {
                let (kl, p, oc) = (geom.patch_len(), geom.positions(), *out_channels);
                if wants(*kernel) {
                    let mut gk = vec![0.0f32; oc * kl];
                    for b in 0..*batch {
                        matmul_nt(
                            oc,
                            p,
                            kl,
                            &up[b * oc * p..(b + 1) * oc * p],
                            &cols[b * kl * p..(b + 1) * kl * p],
                            &mut gk,
                        );
                    }
                    add_into(&mut grads[kernel.0], &gk);
                }
                if wants(*input) {
                    let w = self.value(*kernel).data();
                    let il = geom.image_len();
                    let mut gi = vec![0.0f32; batch * il];
                    let mut gcols = vec![0.0f32; kl * p];
                    for b in 0..*batch {
                        gcols.iter_mut().for_each(|v| *v = 0.0);
                        matmul_tn(kl, oc, p, w, &up[b * oc * p..(b + 1) * oc * p], &mut gcols);
                        col2im(geom, &gcols, &mut gi[b * il..(b + 1) * il]);
                    }
                    add_into(&mut grads[input.0], &gi);
                }
            }
            Op::AddBias {
                x,
                bias,
                channels,
                spatial,
            } => {
                if wants(*x) {
                    add_into(&mut grads[x.0], up);
                }
                if wants(*bias) {
                    let mut gb = vec![0.0f32; *channels];
                    for (j, chunk) in up.chunks(*spatial).enumerate() {
                        gb[j % channels] += chunk.iter().sum::<f32>();
                    }
                    add_into(&mut grads[bias.0], &gb);
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    add_into(&mut grads[a.0], up);
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], up);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    let g: Vec<f32> = up.iter().zip(vb).map(|(u, y)| u * y).collect();
                    add_into(&mut grads[a.0], &g);
                }
                if wants(*b) {
                    let g: Vec<f32> = up.iter().zip(va).map(|(u, x)| u * x).collect();
                    add_into(&mut grads[b.0], &g);
                }
            }
            Op::Scale { x, factor } => {
                let g: Vec<f32> = up.iter().map(|u| u * factor).collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::Sum { x } => {
                let g = vec![up[0]; self.value(*x).len()];
                add_into(&mut grads[x.0], &g);
            }
            Op::Relu { x } => {
                let g: Vec<f32> = up
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&u, &v)| if v > 0.0 { u } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::MaxPool { x, argmax } => {
                let mut g = vec![0.0f32; self.value(*x).len()];
                for (&i, &u) in argmax.iter().zip(up) {
                    g[i] += u;
                }
                add_into(&mut grads[x.0], &g);
            }
            Op::Reshape { x } => add_into(&mut grads[x.0], up),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                spatial,
            } => {
                let (sum_up, sum_up_xhat) = channel_sums(up, xhat, *channels, *spatial);
                if wants(*gamma) {
                    add_into(&mut grads[gamma.0], &sum_up_xhat);
                }
                if wants(*beta) {
                    add_into(&mut grads[beta.0], &sum_up);
                }
                if wants(*x) {
                    let count = (up.len() / channels) as f32;
                    let g = self.value(*gamma).data();
                    let mut gx = vec![0.0f32; up.len()];
                    for (j, ((uc, hc), gc)) in up
                        .chunks(*spatial)
                        .zip(xhat.chunks(*spatial))
                        .zip(gx.chunks_mut(*spatial))
                        .enumerate()
                    {
                        let c = j % channels;
                        let k = g[c] * inv_std[c] / count;
                        let (su, sh) = (sum_up[c], sum_up_xhat[c]);
                        for ((&u, &h), o) in uc.iter().zip(hc).zip(gc.iter_mut()) {
                            *o = k * (count * u - su - h * sh);
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                scale,
                channels,
                spatial,
            } => {
                if wants(*gamma) || wants(*beta) {
                    let (sum_up, sum_up_xhat) = channel_sums(up, xhat, *channels, *spatial);
                    if wants(*gamma) {
                        add_into(&mut grads[gamma.0], &sum_up_xhat);
                    }
                    if wants(*beta) {
                        add_into(&mut grads[beta.0], &sum_up);
                    }
                }
                if wants(*x) {
                    let mut gx = up.to_vec();
                    for (j, chunk) in gx.chunks_mut(*spatial).enumerate() {
                        let sc = scale[j % channels];
                        chunk.iter_mut().for_each(|v| *v *= sc);
                    }
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let classes = probs.len() / labels.len();
                let scale = up[0] / labels.len() as f32;
                let mut g: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * classes + l] -= scale;
                }
                add_into(&mut grads[logits.0], &g);
            }
            Op::KlDivergence {
                student,
                student_probs,
                teacher,
                temperature,
            } => {
                let batch = self.value(*student).shape()[0] as f32;
                let scale = up[0] / (batch * temperature);
                let g: Vec<f32> = student_probs
                    .iter()
                    .zip(teacher)
                    .map(|(q, p)| (q - p) * scale)
                    .collect();
                add_into(&mut grads[student.0], &g);
            }
            Op::Custom { inputs, rule } => {
                let gs = rule.vjp(up);
                debug_assert_eq!(gs.len(), inputs.len());
                for (v, g) in inputs.iter().zip(gs) {
                    if let Some(g) = g {
                        if wants(*v) {
                            add_into(&mut grads[v.0], &g);
                        }
                    }
                }
            }
        }
    }
}
