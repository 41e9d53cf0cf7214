use super::conv::{self, ConvGeometry};
use super::{stable_sigmoid, Activation, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Square(Var),
    Abs(Var),
    Exp(Var),
    LnClamped(Var, f64),
    Act(Var, Activation),
    Sum(Var),
    Mean(Var),
    SoftmaxChannel(Var),
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Upsample(Var),
    InstanceNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    CrossEntropyLogits {
        logits: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph in creation order. Creation order is a
/// topological order, so the backward sweep is a single reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf that requires grad. Leaves the loss does not reach get zeros.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn at(t: &Tensor, i: usize) -> f64 {
    if t.data.len() == 1 {
        t.data[0]
    } else {
        t.data[i]
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], grad: Vec<f64>) {
    // A scalar operand broadcast over a tensor receives the summed gradient.
    let grad = if grad.len() != shape.iter().product::<usize>() {
        vec![grad.iter().sum()]
    } else {
        grad
    };
    match slot {
        Some(t) => t.data.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
        None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: grad,
            })
        }
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Copy of `v` cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = if ta.shape == tb.shape {
            ta.shape.clone()
        } else if ta.data.len() == 1 && ta.shape.iter().all(|&e| e == 1) {
            tb.shape.clone()
        } else if tb.data.len() == 1 && tb.shape.iter().all(|&e| e == 1) {
            ta.shape.clone()
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        };
        let n = shape.iter().product();
        let data = (0..n).map(|i| f(at(ta, i), at(tb, i))).collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor { shape, data }, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, name: &str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg, name)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("mul_scalar", a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// Absolute value; the gradient at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// `ln(max(x, floor))`.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(
            "ln_clamped",
            a,
            move |x| x.max(floor).ln(),
            Op::LnClamped(a, floor),
        )
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |x| x.max(0.0),
            Activation::Tanh => f64::tanh,
            Activation::Sigmoid => stable_sigmoid,
        };
        let name = match kind {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        };
        self.unary(name, a, f, Op::Act(a, kind))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Softmax over axis 1 of `[N, C, ...]`, max-subtracted.
    pub fn softmax_channel(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.shape.len() < 2 || t.shape[1] < 2 {
            return Err(Error::InvalidArgument(format!(
                "softmax_channel needs [N, C>=2, ...], got {:?}",
                t.shape
            )));
        }
        let (outer, c, inner) = outer_inner(&t.shape, 1);
        let mut data = vec![0.0; t.data.len()];
        for o in 0..outer {
            let base = o * c * inner;
            for s in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for k in 0..c {
                    m = m.max(t.data[base + k * inner + s]);
                }
                let mut z = 0.0;
                for k in 0..c {
                    let e = (t.data[base + k * inner + s] - m).exp();
                    data[base + k * inner + s] = e;
                    z += e;
                }
                for k in 0..c {
                    data[base + k * inner + s] /= z;
                }
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxChannel(a), rg, "softmax_channel")
    }

    /// Cross-correlation `conv_nd(input[N, C_in, s...], kernel[C_out, C_in, k...])` plus optional per-channel bias.
    pub fn conv(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Var> {
        let (x, w) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let geom = ConvGeometry::conv(&x.shape, &w.shape, stride, pad)?;
        let b = self.bias_slice(bias, geom.c_out, "conv_nd")?;
        let data = conv::conv_forward(&geom, &x.data, &w.data, b);
        let value = Tensor {
            shape: geom.output_shape(),
            data,
        };
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            value,
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
            "conv_nd",
        )
    }

    /// Transposed convolution with kernel `[C_in, C_out, k...]`; output extent `(in - 1) * stride + k`.
    pub fn conv_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: &[usize],
    ) -> Result<Var> {
        let (x, w) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let geom = ConvGeometry::transpose(&x.shape, &w.shape, stride)?;
        let b = self.bias_slice(bias, geom.c_in, "conv_transpose_nd")?;
        let data = conv::conv_transpose_forward(&geom, &x.data, &w.data, b);
        let value = Tensor {
            shape: geom.input_shape(),
            data,
        };
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            value,
            Op::ConvTranspose {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
            "conv_transpose_nd",
        )
    }

    fn bias_slice(&self, bias: Option<Var>, channels: usize, op: &'static str) -> Result<Option<&[f64]>> {
        match bias {
            None => Ok(None),
            Some(b) => {
                let t = &self.nodes[b.0].value;
                if t.data.len() != channels {
                    return Err(Error::ShapeMismatch {
                        op,
                        lhs: vec![channels],
                        rhs: t.shape.clone(),
                    });
                }
                Ok(Some(&t.data))
            }
        }
    }

    /// Linear ×2 upsampling of every spatial axis (align-corners-false, edge-clamped).
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if !(t.shape.len() == 4 || t.shape.len() == 5) {
            return Err(Error::InvalidArgument(format!(
                "interp_upsample needs spatial rank 2 or 3, got shape {:?}",
                t.shape
            )));
        }
        let mut shape = t.shape.clone();
        let mut data = t.data.clone();
        for axis in 2..shape.len() {
            let (outer, len, inner) = outer_inner(&shape, axis);
            data = conv::upsample_axis(&data, outer, len, inner);
            shape[axis] *= 2;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor { shape, data }, Op::Upsample(a), rg, "interp_upsample")
    }

    /// Per-(item, channel) normalization over spatial sites, no affine part.
    pub fn instance_norm(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.shape.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "instance_norm needs [N, C, spatial...], got {:?}",
                t.shape
            )));
        }
        let inner: usize = t.shape[2..].iter().product();
        let mut data = vec![0.0; t.data.len()];
        let mut inv_std = Vec::with_capacity(t.data.len() / inner);
        for (src, dst) in t.data.chunks(inner).zip(data.chunks_mut(inner)) {
            let mean = src.iter().sum::<f64>() / inner as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / inner as f64;
            let is = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::InstanceNorm { input: a, inv_std }, rg, "instance_norm")
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if axis >= t.shape.len() || len == 0 || start + len > t.shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                t.shape
            )));
        }
        let (outer, full, inner) = outer_inner(&t.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&t.data[base..base + len * inner]);
        }
        let mut shape = t.shape.clone();
        shape[axis] = len;
        let rg = self.rg(&[a]);
        self.push(
            Tensor { shape, data },
            Op::Narrow {
                input: a,
                axis,
                start,
            },
            rg,
            "narrow",
        )
    }

    /// Mean over sites of `-log softmax(logits)[target]`, via log-sum-exp.
    ///
    /// `logits` is `[N, C, s...]`, `target` holds class indices with shape `[N, 1, s...]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let mut expect = t.shape.clone();
        if expect.len() < 2 {
            return Err(Error::InvalidArgument("cross_entropy needs [N, C, ...]".into()));
        }
        expect[1] = 1;
        if target.shape != expect {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape.clone(),
                rhs: target.shape.clone(),
            });
        }
        let (outer, c, inner) = outer_inner(&t.shape, 1);
        let mut total = 0.0;
        for o in 0..outer {
            for s in 0..inner {
                let cls = target.data[o * inner + s] as usize;
                if cls >= c {
                    return Err(Error::InvalidArgument(format!(
                        "cross_entropy target class {cls} out of range for {c} channels"
                    )));
                }
                let at = |k: usize| t.data[(o * c + k) * inner + s];
                let m = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..c).map(|k| (at(k) - m).exp()).sum::<f64>().ln();
                total += lse - at(cls);
            }
        }
        let value = Tensor::scalar(total / (outer * inner) as f64);
        let rg = self.rg(&[logits]);
        self.push(
            value,
            Op::CrossEntropyLogits {
                logits,
                target: target.clone(),
            },
            rg,
            "cross_entropy",
        )
    }

    /// Reverse sweep from a scalar `loss`. Every recorded node is visited once,
    /// in reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                lt.shape
            )));
        }
        if !lt.is_finite() {
            return Err(Error::NonFinite {
                op: "backward".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: lt.shape.clone(),
            data: vec![1.0],
        });
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let keep = matches!(node.op, Op::Leaf) && node.requires_grad;
            if keep && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape.clone()));
            } else if !keep {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, grad: Vec<f64>) {
        let node = &self.nodes[to.0];
        if node.requires_grad {
            accumulate(&mut grads[to.0], &node.value.shape, grad);
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let gd = &g.data;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, gd.clone());
                self.send(grads, *b, gd.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, gd.clone());
                self.send(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = gd.iter().enumerate().map(|(i, g)| g * at(tb, i)).collect();
                let gb = gd.iter().enumerate().map(|(i, g)| g * at(ta, i)).collect();
                self.send(grads, *a, ga);
                self.send(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = gd.iter().enumerate().map(|(i, g)| g / at(tb, i)).collect();
                let gb = gd
                    .iter()
                    .enumerate()
                    .map(|(i, g)| -g * at(ta, i) / (at(tb, i) * at(tb, i)))
                    .collect();
                self.send(grads, *a, ga);
                self.send(grads, *b, gb);
            }
            Op::AddScalar(a) => self.send(grads, *a, gd.clone()),
            Op::MulScalar(a, c) => self.send(grads, *a, gd.iter().map(|g| g * c).collect()),
            Op::Square(a) => {
                let x = &val(*a).data;
                self.send(grads, *a, gd.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect());
            }
            Op::Abs(a) => {
                let x = &val(*a).data;
                let gx = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.send(grads, *a, gx);
            }
            Op::Exp(a) => {
                self.send(grads, *a, gd.iter().zip(&y.data).map(|(g, y)| g * y).collect());
            }
            Op::LnClamped(a, floor) => {
                let x = &val(*a).data;
                let gx = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > *floor { g / x } else { 0.0 })
                    .collect();
                self.send(grads, *a, gx);
            }
            Op::Act(a, kind) => {
                let x = &val(*a).data;
                let gx = match kind {
                    Activation::Relu => gd
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Activation::Tanh => gd
                        .iter()
                        .zip(&y.data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                    Activation::Sigmoid => gd
                        .iter()
                        .zip(&y.data)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                };
                self.send(grads, *a, gx);
            }
            Op::Sum(a) => {
                let n = val(*a).data.len();
                self.send(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = val(*a).data.len();
                self.send(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::SoftmaxChannel(a) => {
                let (outer, c, inner) = outer_inner(&y.shape, 1);
                let mut gx = vec![0.0; y.data.len()];
                for o in 0..outer {
                    let base = o * c * inner;
                    for s in 0..inner {
                        let dot: f64 = (0..c)
                            .map(|k| gd[base + k * inner + s] * y.data[base + k * inner + s])
                            .sum();
                        for k in 0..c {
                            let i = base + k * inner + s;
                            gx[i] = y.data[i] * (gd[i] - dot);
                        }
                    }
                }
                self.send(grads, *a, gx);
            }
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            } => {
                let need = [
                    self.nodes[input.0].requires_grad,
                    self.nodes[kernel.0].requires_grad,
                    bias.is_some_and(|b| self.nodes[b.0].requires_grad),
                ];
                let r = conv::conv_backward(geom, &val(*input).data, &val(*kernel).data, gd, need);
                if let Some(dx) = r.input {
                    self.send(grads, *input, dx);
                }
                if let Some(dw) = r.kernel {
                    self.send(grads, *kernel, dw);
                }
                if let (Some(b), Some(db)) = (bias, r.bias) {
                    self.send(grads, *b, db);
                }
            }
            Op::ConvTranspose {
                input,
                kernel,
                bias,
                geom,
            } => {
                let need = [
                    self.nodes[input.0].requires_grad,
                    self.nodes[kernel.0].requires_grad,
                    bias.is_some_and(|b| self.nodes[b.0].requires_grad),
                ];
                let r = conv::conv_transpose_backward(
                    geom,
                    &val(*input).data,
                    &val(*kernel).data,
                    gd,
                    need,
                );
                if let Some(dx) = r.input {
                    self.send(grads, *input, dx);
                }
                if let Some(dw) = r.kernel {
                    self.send(grads, *kernel, dw);
                }
                if let (Some(b), Some(db)) = (bias, r.bias) {
                    self.send(grads, *b, db);
                }
            }
            Op::Upsample(a) => {
                let in_shape = val(*a).shape.clone();
                // Shapes after each forward axis pass, undone in reverse.
                let mut shapes = vec![in_shape.clone()];
                let mut s = in_shape;
                for axis in 2..s.len() {
                    s[axis] *= 2;
                    shapes.push(s.clone());
                }
                let mut cur = gd.clone();
                for axis in (2..s.len()).rev() {
                    let before = &shapes[axis - 2];
                    let (outer, len, inner) = outer_inner(before, axis);
                    cur = conv::upsample_axis_adjoint(&cur, outer, len, inner);
                }
                self.send(grads, *a, cur);
            }
            Op::InstanceNorm { input, inv_std } => {
                let inner: usize = y.shape[2..].iter().product();
                let mut gx = vec![0.0; y.data.len()];
                for (r, ((gs, ys), dst)) in gd
                    .chunks(inner)
                    .zip(y.data.chunks(inner))
                    .zip(gx.chunks_mut(inner))
                    .enumerate()
                {
                    let mg = gs.iter().sum::<f64>() / inner as f64;
                    let mgy = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / inner as f64;
                    for ((d, g), y) in dst.iter_mut().zip(gs).zip(ys) {
                        *d = inv_std[r] * (g - mg - y * mgy);
                    }
                }
                self.send(grads, *input, gx);
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = &val(*input).shape;
                let (outer, full, inner) = outer_inner(in_shape, *axis);
                let len = y.shape[*axis];
                let mut gx = vec![0.0; val(*input).data.len()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.send(grads, *input, gx);
            }
            Op::CrossEntropyLogits { logits, target } => {
                let t = val(*logits);
                let (outer, c, inner) = outer_inner(&t.shape, 1);
                let scale = gd[0] / (outer * inner) as f64;
                let mut gx = vec![0.0; t.data.len()];
                for o in 0..outer {
                    for s in 0..inner {
                        let cls = target.data[o * inner + s] as usize;
                        let idx = |k: usize| (o * c + k) * inner + s;
                        let m = (0..c).map(|k| t.data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = (0..c).map(|k| (t.data[idx(k)] - m).exp()).sum();
                        for k in 0..c {
                            let p = (t.data[idx(k)] - m).exp() / z;
                            let onehot = if k == cls { 1.0 } else { 0.0 };
                            gx[idx(k)] = scale * (p - onehot);
                        }
                    }
                }
                self.send(grads, *logits, gx);
            }
        }
    }
}
