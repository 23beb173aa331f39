//! Reverse-mode differentiation over a recorded tape of whole-tensor operations.
//!
//! Nodes are appended in evaluation order, so the tape is a topological order
//! by construction and the reverse sweep visits every node once.

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// What a backward closure sees for one node.
pub struct BackwardArgs<'a> {
    /// Upstream gradient, shaped like `output`.
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Which inputs need a gradient; others may be returned as `None`.
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a trainable parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Node { value, inputs: vec![], backward: None, requires_grad: true })
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node { value, inputs: vec![], backward: None, requires_grad: false })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Append an operator node. The closure must return one entry per input.
    pub fn record(
        &mut self,
        value: Tensor,
        inputs: &[Var],
        backward: impl Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
        })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got dims {:?}", lv.dims()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.dims()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let needs: Vec<bool> =
                node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let args = BackwardArgs {
                grad: &grad,
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                output: &node.value,
                needs,
            };
            let input_grads = backward(&args);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&inp, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[inp].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.dims(), self.nodes[inp].value.dims());
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record(out, &[a, b], |args| vec![Some(args.grad.clone()), Some(args.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.record(out, &[a, b], |args| vec![Some(args.grad.clone()), Some(args.grad.scale(-1.0))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(out, &[a, b], |args| {
            let ga = args.needs[0].then(|| args.grad.zip_map(args.inputs[1], |g, y| g * y).unwrap());
            let gb = args.needs[1].then(|| args.grad.zip_map(args.inputs[0], |g, x| g * x).unwrap());
            vec![ga, gb]
        }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.record(out, &[a], move |args| vec![Some(args.grad.scale(k))])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        self.record(out, &[a], |args| vec![Some(args.grad.clone())])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.record(out, &[a], |args| {
            vec![Some(args.grad.zip_map(args.output, |g, y| g * y * (1.0 - y)).unwrap())]
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.record(out, &[a], move |args| {
            let g = args
                .grad
                .zip_map(args.inputs[0], |g, x| if x > 0.0 { g } else { slope * g })
                .unwrap();
            vec![Some(g)]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.record(out, &[a], |args| {
            vec![Some(args.grad.zip_map(args.inputs[0], |g, x| g * gelu_grad(x)).unwrap())]
        })
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.record(out, &[a], |args| {
            vec![Some(Tensor::full(args.inputs[0].dims(), args.grad.data()[0]))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean absolute difference, a scalar.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_dims("l1", vb)?;
        let n = va.len() as f64;
        let out = Tensor::scalar(va.zip_map(vb, |x, y| (x - y).abs())?.sum() / n);
        Ok(self.record(out, &[a, b], move |args| {
            let g = args.grad.data()[0] / n;
            let d = args.inputs[0].zip_map(args.inputs[1], |x, y| g * sign(x - y)).unwrap();
            let ga = args.needs[1].then(|| d.scale(-1.0));
            vec![Some(d), ga]
        }))
    }

    /// Weighted sum of scalars.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let t = self.scale(v, w);
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        acc.ok_or_else(|| Error::invalid("weighted_sum", "no terms"))
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(dims)?;
        Ok(self.record(out, &[a], |args| {
            vec![Some(args.grad.clone().reshape(args.inputs[0].dims()).unwrap())]
        }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let widths: Vec<usize> = vals.iter().map(|t| t.channels()).collect();
        let out = Tensor::concat_channels(&vals)?;
        Ok(self.record(out, parts, move |args| {
            let mut start = 0;
            widths
                .iter()
                .zip(&args.needs)
                .map(|(&w, &need)| {
                    let g = need.then(|| args.grad.channel_slice(start, w));
                    start += w;
                    g
                })
                .collect()
        }))
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.value(a).channels();
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_channels", format!("[{start}, {}) of {c}", start + len)));
        }
        let out = self.value(a).channel_slice(start, len);
        Ok(self.record(out, &[a], move |args| {
            let x = args.inputs[0];
            let mut g = Tensor::zeros(x.dims());
            for (dst, src) in g.data_mut().chunks_exact_mut(c).zip(args.grad.data().chunks_exact(len)) {
                dst[start..start + len].copy_from_slice(src);
            }
            vec![Some(g)]
        }))
    }

    /// Pick frame `t` from a `T×...` tensor.
    pub fn select_frame(&mut self, a: Var, t: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() < 2 || t >= x.dims()[0] {
            return Err(Error::shape("select_frame", format!("frame {t} of {:?}", x.dims())));
        }
        let out = x.frame(t);
        Ok(self.record(out, &[a], move |args| {
            let x = args.inputs[0];
            let inner = args.grad.len();
            let mut g = Tensor::zeros(x.dims());
            g.data_mut()[t * inner..(t + 1) * inner].copy_from_slice(args.grad.data());
            vec![Some(g)]
        }))
    }

    pub fn stack_frames(&mut self, frames: &[Var]) -> Result<Var> {
        let vals: Vec<Tensor> = frames.iter().map(|&v| self.value(v).clone()).collect();
        let out = Tensor::stack(&vals)?;
        Ok(self.record(out, frames, |args| {
            (0..args.inputs.len()).map(|t| args.needs[t].then(|| args.grad.frame(t))).collect()
        }))
    }

    /// Replicate `H×W×C` along a new leading axis of length `t`.
    pub fn broadcast_frames(&mut self, a: Var, t: usize) -> Var {
        let x = self.value(a).clone();
        let out = Tensor::stack(&vec![x; t]).expect("same shapes");
        self.record(out, &[a], move |args| {
            let mut g = args.grad.frame(0);
            for i in 1..t {
                g.add_assign(&args.grad.frame(i));
            }
            vec![Some(g)]
        })
    }

    /// `T×H×W×C → H×W×(T·C)`, channel index `t·C + c`.
    pub fn frames_to_channels(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        x.expect_rank("frames_to_channels", "input", 4)?;
        let d = x.dims().to_vec();
        let out = frames_to_channels(x);
        Ok(self.record(out, &[a], move |args| vec![Some(channels_to_frames(args.grad, d[0]).unwrap())]))
    }

    /// `H×W×(T·C) → T×H×W×C`, inverse of [`Graph::frames_to_channels`].
    pub fn channels_to_frames(&mut self, a: Var, t: usize) -> Result<Var> {
        let out = channels_to_frames(self.value(a), t)?;
        Ok(self.record(out, &[a], |args| vec![Some(frames_to_channels(args.grad))]))
    }

    // ---- linear algebra ----------------------------------------------------

    /// 2-D product `op(a) · op(b)`.
    pub fn matmul(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_rank("matmul", "a", 2)?;
        vb.expect_rank("matmul", "b", 2)?;
        let (m, ka) = if trans_a { (va.dims()[1], va.dims()[0]) } else { (va.dims()[0], va.dims()[1]) };
        let (kb, n) = if trans_b { (vb.dims()[1], vb.dims()[0]) } else { (vb.dims()[0], vb.dims()[1]) };
        if ka != kb {
            return Err(Error::shape("matmul", format!("inner dims {ka} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, va.data(), trans_a, vb.data(), trans_b, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.record(out, &[a, b], move |args| {
            let (a, b, g) = (args.inputs[0], args.inputs[1], args.grad);
            // C = A'B' with A' = op(A): dA' = G B'^T, dB' = A'^T G.
            let ga = args.needs[0].then(|| {
                let mut d = vec![0.0; a.len()];
                if trans_a {
                    // dA = (G B'^T)^T = B' G^T
                    gemm(ka, n, m, b.data(), trans_b, g.data(), true, &mut d, false);
                } else {
                    gemm(m, n, ka, g.data(), false, b.data(), !trans_b, &mut d, false);
                }
                Tensor::new(a.dims().to_vec(), d).unwrap()
            });
            let gb = args.needs[1].then(|| {
                let mut d = vec![0.0; b.len()];
                if trans_b {
                    // dB = (A'^T G)^T = G^T A'
                    gemm(n, m, ka, g.data(), true, a.data(), trans_a, &mut d, false);
                } else {
                    gemm(ka, m, n, a.data(), !trans_a, g.data(), false, &mut d, false);
                }
                Tensor::new(b.dims().to_vec(), d).unwrap()
            });
            vec![ga, gb]
        }))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.record(out, &[a], |args| {
            let c = args.output.channels();
            let mut g = Tensor::zeros(args.output.dims());
            for ((dst, y), gy) in g
                .data_mut()
                .chunks_exact_mut(c)
                .zip(args.output.data().chunks_exact(c))
                .zip(args.grad.data().chunks_exact(c))
            {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for i in 0..c {
                    dst[i] = y[i] * (gy[i] - dot);
                }
            }
            vec![Some(g)]
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.channels();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub(crate) fn frames_to_channels(x: &Tensor) -> Tensor {
    let d = x.dims();
    let (t, h, w, c) = (d[0], d[1], d[2], d[3]);
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for f in 0..t {
        for p in 0..hw {
            let src = &x.data()[(f * hw + p) * c..(f * hw + p + 1) * c];
            out[p * t * c + f * c..p * t * c + (f + 1) * c].copy_from_slice(src);
        }
    }
    Tensor::new(vec![h, w, t * c], out).unwrap()
}

pub(crate) fn channels_to_frames(x: &Tensor, t: usize) -> Result<Tensor> {
    x.expect_rank("channels_to_frames", "input", 3)?;
    let d = x.dims();
    if t == 0 || d[2] % t != 0 {
        return Err(Error::shape("channels_to_frames", format!("{} channels not divisible by T={t}", d[2])));
    }
    let (h, w, c) = (d[0], d[1], d[2] / t);
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for f in 0..t {
        for p in 0..hw {
            out[(f * hw + p) * c..(f * hw + p + 1) * c]
                .copy_from_slice(&x.data()[p * t * c + f * c..p * t * c + (f + 1) * c]);
        }
    }
    Tensor::new(vec![t, h, w, c], out)
}
