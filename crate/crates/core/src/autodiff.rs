//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation records its output value and a closure mapping the output
//! gradient to gradients for each parent. Nodes whose parents are all
//! constants record no closure, so inference on a tape costs little more than
//! plain evaluation.
//!
//! Image-like tensors are `[C, H, W]`. Convolutions use zero padding and
//! `same` output size.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

/// Gradients of a scalar root with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor) -> Vec<Tensor> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push_node(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
        })
    }

    /// Backpropagates from a one-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be a scalar");
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: operand shapes differ");
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))`, stable for large `|x|`.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary<F, D>(self, f: F, df: D) -> Var<'t>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let x = self.value();
        let out = Rc::new(x.map(f));
        let y = Rc::clone(&out);
        self.tape.push((*out).clone(), &[self], move |g| {
            let mut gx = g.clone();
            for ((gi, &xi), &yi) in gx.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                *gi *= df(xi, yi);
            }
            vec![gx]
        })
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        self.tape
            .push(a.zip_map(&b, |x, y| x + y), &[self, other], |g| {
                vec![g.clone(), g.clone()]
            })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        self.tape
            .push(a.zip_map(&b, |x, y| x - y), &[self, other], |g| {
                vec![g.clone(), g.map(|v| -v)]
            })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.push(out, &[self, other], move |g| {
            vec![g.zip_map(&b, |gv, y| gv * y), g.zip_map(&a, |gv, x| gv * x)]
        })
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "div");
        let out = a.zip_map(&b, |x, y| x / y);
        self.tape.push(out, &[self, other], move |g| {
            let ga = g.zip_map(&b, |gv, y| gv / y);
            let mut gb = g.clone();
            for ((gv, &x), &y) in gb.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *gv *= -x / (y * y);
            }
            vec![ga, gb]
        })
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(self, c: &Tensor) -> Var<'t> {
        let x = self.value();
        same_shape(&x, c, "mul_const");
        let c = Rc::new(c.clone());
        let out = x.zip_map(&c, |a, b| a * b);
        self.tape
            .push(out, &[self], move |g| vec![g.zip_map(&c, |gv, b| gv * b)])
    }

    pub fn sub_const(self, c: &Tensor) -> Var<'t> {
        let x = self.value();
        same_shape(&x, c, "sub_const");
        self.tape
            .push(x.zip_map(c, |a, b| a - b), &[self], |g| vec![g.clone()])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let x = self.value();
        self.tape
            .push(x.map(|v| v * c), &[self], move |g| vec![g.map(|v| v * c)])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let x = self.value();
        self.tape
            .push(x.map(|v| v + c), &[self], |g| vec![g.clone()])
    }

    /// Multiplies every element by the one-element variable `s`.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), 1, "mul_scalar: scalar operand expected");
        let k = sv.item();
        self.tape.push(x.map(|v| v * k), &[self, s], move |g| {
            let gs: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            vec![g.map(|v| v * k), Tensor::scalar(gs)]
        })
    }

    /// Adds the one-element variable `s` to every element.
    pub fn add_scalar_var(self, s: Var<'t>) -> Var<'t> {
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), 1, "add_scalar_var: scalar operand expected");
        let k = sv.item();
        self.tape.push(x.map(|v| v + k), &[self, s], |g| {
            vec![g.clone(), Tensor::scalar(g.sum())]
        })
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(|x| 1.0 / x, |x, _| -1.0 / (x * x))
    }

    /// `x^p` for positive `x`.
    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn log_sigmoid(self) -> Var<'t> {
        self.unary(log_sigmoid, |x, _| 1.0 - sigmoid(x))
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Clamps in the forward pass and passes gradients through unchanged.
    pub fn clamp_straight_through(self, lo: f64, hi: f64) -> Var<'t> {
        let x = self.value();
        self.tape
            .push(x.map(|v| v.clamp(lo, hi)), &[self], |g| vec![g.clone()])
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push(Tensor::scalar(x.sum()), &[self], move |g| {
            vec![Tensor::full(&shape, g.item())]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        self.mul(other).sum()
    }

    /// Sum of squares.
    pub fn norm_sq(self) -> Var<'t> {
        self.square().sum()
    }

    /// Divides by the L2 norm, with `eps` added under the square root.
    pub fn l2_normalize(self, eps: f64) -> Var<'t> {
        let inv = self.norm_sq().add_scalar(eps).sqrt().recip();
        self.mul_scalar(inv)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshaped(shape).expect("reshape: element count");
        self.tape.push(out, &[self], move |g| {
            vec![g.clone().reshaped(&old).expect("reshape grad")]
        })
    }

    /// Element `i` of the flattened tensor as a one-element variable.
    pub fn index(self, i: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape
            .push(Tensor::scalar(x.data()[i]), &[self], move |g| {
                let mut gx = Tensor::zeros(&shape);
                gx.data_mut()[i] = g.item();
                vec![gx]
            })
    }

    /// Concatenates along the leading axis.
    pub fn concat(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(values.len());
        for v in &values {
            assert_eq!(&v.shape()[1..], &tail[..], "concat: trailing shapes differ");
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
            sizes.push((v.shape().to_vec(), v.len()));
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(shape, data).expect("concat");
        tape.push(out, parts, move |g| {
            let mut offset = 0;
            sizes
                .iter()
                .map(|(s, n)| {
                    let part = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    Tensor::new(s.clone(), part).expect("concat grad")
                })
                .collect()
        })
    }

    /// `[C, H, W]` sub-block `channels × rows × cols`.
    pub fn crop(
        self,
        channels: std::ops::Range<usize>,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.chw().expect("crop: rank-3 input");
        assert!(channels.end <= c && rows.end <= h && cols.end <= w, "crop out of bounds");
        assert!(
            !channels.is_empty() && !rows.is_empty() && !cols.is_empty(),
            "crop: empty window"
        );
        let (oc, oh, ow) = (channels.len(), rows.len(), cols.len());
        let mut out = Vec::with_capacity(oc * oh * ow);
        for ci in channels.clone() {
            for y in rows.clone() {
                let base = (ci * h + y) * w;
                out.extend_from_slice(&x.data()[base + cols.start..base + cols.end]);
            }
        }
        let out = Tensor::new(vec![oc, oh, ow], out).expect("crop");
        self.tape.push(out, &[self], move |g| {
            let mut gx = Tensor::zeros(&[c, h, w]);
            let gd = gx.data_mut();
            let mut k = 0;
            for ci in channels.clone() {
                for y in rows.clone() {
                    let base = (ci * h + y) * w;
                    gd[base + cols.start..base + cols.end]
                        .copy_from_slice(&g.data()[k..k + ow]);
                    k += ow;
                }
            }
            vec![gx]
        })
    }

    /// Matrix-vector product of `self` (`[O, I]`) with `x` (`[I]`).
    pub fn matvec(self, x: Var<'t>) -> Var<'t> {
        let (m, v) = (self.value(), x.value());
        let (o, i) = match m.shape() {
            [o, i] => (*o, *i),
            s => panic!("matvec: matrix expected, got {s:?}"),
        };
        assert_eq!(v.len(), i, "matvec: inner dimension");
        let out = Tensor::from_fn(&[o], |r| {
            m.data()[r * i..(r + 1) * i]
                .iter()
                .zip(v.data())
                .map(|(a, b)| a * b)
                .sum()
        });
        self.tape.push(out, &[self, x], move |g| {
            let mut gm = Tensor::zeros(&[o, i]);
            let mut gv = Tensor::zeros(&[i]);
            for r in 0..o {
                let gr = g.data()[r];
                let row = &m.data()[r * i..(r + 1) * i];
                for k in 0..i {
                    gm.data_mut()[r * i + k] = gr * v.data()[k];
                    gv.data_mut()[k] += gr * row[k];
                }
            }
            vec![gm, gv.reshaped(&v.shape().to_vec()).expect("matvec grad")]
        })
    }

    /// Softmax over all elements. Where `mask` is given, masked-out entries
    /// get probability exactly zero and receive no gradient.
    pub fn softmax(self, mask: Option<&[bool]>) -> Var<'t> {
        let x = self.value();
        let keep: Vec<bool> = match mask {
            Some(m) => {
                assert_eq!(m.len(), x.len(), "softmax: mask length");
                m.to_vec()
            }
            None => vec![true; x.len()],
        };
        let max = x
            .data()
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = Tensor::zeros(x.shape());
        let mut total = 0.0;
        for ((o, &v), &k) in out.data_mut().iter_mut().zip(x.data()).zip(&keep) {
            if k {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for o in out.data_mut() {
            *o /= total;
        }
        let y = Rc::new(out.clone());
        self.tape.push(out, &[self], move |g| {
            let s: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            vec![g.zip_map(&y, |gv, yv| yv * (gv - s))]
        })
    }

    /// `x * scale[c] + shift[c]` for `x: [C, H, W]` and `scale, shift: [C]`.
    pub fn channel_affine(self, scale: Var<'t>, shift: Var<'t>) -> Var<'t> {
        let (x, a, b) = (self.value(), scale.value(), shift.value());
        let (c, h, w) = x.chw().expect("channel_affine: rank-3 input");
        assert_eq!(a.len(), c, "channel_affine: scale length");
        assert_eq!(b.len(), c, "channel_affine: shift length");
        let hw = h * w;
        let mut out = (*x).clone();
        for ci in 0..c {
            let (av, bv) = (a.data()[ci], b.data()[ci]);
            for v in &mut out.data_mut()[ci * hw..(ci + 1) * hw] {
                *v = *v * av + bv;
            }
        }
        self.tape.push(out, &[self, scale, shift], move |g| {
            let mut gx = g.clone();
            let mut ga = Tensor::zeros(a.shape());
            let mut gb = Tensor::zeros(b.shape());
            for ci in 0..c {
                let av = a.data()[ci];
                let gs = &g.data()[ci * hw..(ci + 1) * hw];
                let xs = &x.data()[ci * hw..(ci + 1) * hw];
                ga.data_mut()[ci] = gs.iter().zip(xs).map(|(p, q)| p * q).sum();
                gb.data_mut()[ci] = gs.iter().sum();
                for v in &mut gx.data_mut()[ci * hw..(ci + 1) * hw] {
                    *v *= av;
                }
            }
            vec![gx, ga, gb]
        })
    }

    /// Adds `bias[c]` to every pixel of channel `c`.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let (c, h, w) = x.chw().expect("add_channel_bias: rank-3 input");
        assert_eq!(b.len(), c, "add_channel_bias: bias length");
        let hw = h * w;
        let mut out = (*x).clone();
        for ci in 0..c {
            let bv = b.data()[ci];
            for v in &mut out.data_mut()[ci * hw..(ci + 1) * hw] {
                *v += bv;
            }
        }
        let bshape = b.shape().to_vec();
        self.tape.push(out, &[self, bias], move |g| {
            let gb = Tensor::from_fn(&[c], |ci| g.data()[ci * hw..(ci + 1) * hw].iter().sum())
                .reshaped(&bshape)
                .expect("bias grad");
            vec![g.clone(), gb]
        })
    }

    /// 2-D convolution: `self: [Ci, H, W]`, `weight: [Co, Ci, K, K]`,
    /// `bias: [Co]`, odd `K`, zero padding, stride 1.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let (x, wt, b) = (self.value(), weight.value(), bias.value());
        let (ci, h, w) = x.chw().expect("conv2d: rank-3 input");
        let (co, k) = match wt.shape() {
            [co, wci, k, k2] if *wci == ci && k == k2 && k % 2 == 1 => (*co, *k),
            s => panic!("conv2d: weight shape {s:?} incompatible with {ci} input channels"),
        };
        assert_eq!(b.len(), co, "conv2d: bias length");
        let mut out = Tensor::zeros(&[co, h, w]);
        conv_forward(x.data(), wt.data(), out.data_mut(), ci, co, h, w, k);
        for o in 0..co {
            let bv = b.data()[o];
            for v in &mut out.data_mut()[o * h * w..(o + 1) * h * w] {
                *v += bv;
            }
        }
        self.tape.push(out, &[self, weight, bias], move |g| {
            let mut gx = Tensor::zeros(&[ci, h, w]);
            let mut gw = Tensor::zeros(wt.shape());
            conv_backward(
                x.data(),
                wt.data(),
                g.data(),
                gx.data_mut(),
                gw.data_mut(),
                ci,
                co,
                h,
                w,
                k,
            );
            let gb = Tensor::from_fn(&[co], |o| g.data()[o * h * w..(o + 1) * h * w].iter().sum());
            vec![gx, gw, gb]
        })
    }

    /// Applies the constant `kernel: [K, K]` to each channel independently.
    pub fn depthwise_filter(self, kernel: &Tensor) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.chw().expect("depthwise_filter: rank-3 input");
        let k = match kernel.shape() {
            [k, k2] if k == k2 && k % 2 == 1 => *k,
            s => panic!("depthwise_filter: odd square kernel expected, got {s:?}"),
        };
        let kern = Rc::new(kernel.clone());
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let xs = &x.data()[ch * h * w..(ch + 1) * h * w];
            let os = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
            conv_forward(xs, kern.data(), os, 1, 1, h, w, k);
        }
        self.tape.push(out, &[self], move |g| {
            let mut gx = Tensor::zeros(&[c, h, w]);
            let mut scratch = vec![0.0; k * k];
            for ch in 0..c {
                let range = ch * h * w..(ch + 1) * h * w;
                conv_backward(
                    &x.data()[range.clone()],
                    kern.data(),
                    &g.data()[range.clone()],
                    &mut gx.data_mut()[range],
                    &mut scratch,
                    1,
                    1,
                    h,
                    w,
                    k,
                );
            }
            vec![gx]
        })
    }

    /// 2×2 average pooling; `H` and `W` must be even.
    pub fn avg_pool2(self) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.chw().expect("avg_pool2: rank-3 input");
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: even spatial size required");
        let (oh, ow) = (h / 2, w / 2);
        let out = Tensor::from_fn(&[c, oh, ow], |i| {
            let (ch, r) = (i / (oh * ow), i % (oh * ow));
            let (y, xx) = (2 * (r / ow), 2 * (r % ow));
            let base = ch * h * w;
            let d = x.data();
            0.25 * (d[base + y * w + xx]
                + d[base + y * w + xx + 1]
                + d[base + (y + 1) * w + xx]
                + d[base + (y + 1) * w + xx + 1])
        });
        self.tape.push(out, &[self], move |g| {
            let gx = Tensor::from_fn(&[c, h, w], |i| {
                let (ch, r) = (i / (h * w), i % (h * w));
                let (y, xx) = (r / w, r % w);
                0.25 * g.data()[ch * oh * ow + (y / 2) * ow + xx / 2]
            });
            vec![gx]
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(self, factor: usize) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.chw().expect("upsample: rank-3 input");
        let (oh, ow) = (h * factor, w * factor);
        let out = Tensor::from_fn(&[c, oh, ow], |i| {
            let (ch, r) = (i / (oh * ow), i % (oh * ow));
            x.data()[ch * h * w + (r / ow / factor) * w + (r % ow) / factor]
        });
        self.tape.push(out, &[self], move |g| {
            let mut gx = Tensor::zeros(&[c, h, w]);
            for (i, gv) in g.data().iter().enumerate() {
                let (ch, r) = (i / (oh * ow), i % (oh * ow));
                gx.data_mut()[ch * h * w + (r / ow / factor) * w + (r % ow) / factor] += gv;
            }
            vec![gx]
        })
    }

    /// Averages over an `out_h × out_w` grid of bins; bin `i` along an axis
    /// of length `n` spans `[floor(i·n/out), ceil((i+1)·n/out))`.
    pub fn adaptive_avg_pool(self, out_h: usize, out_w: usize) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.chw().expect("adaptive_avg_pool: rank-3 input");
        let ybins = adaptive_bins(h, out_h);
        let xbins = adaptive_bins(w, out_w);
        let mut out = Tensor::zeros(&[c, out_h, out_w]);
        for ch in 0..c {
            for (by, ys) in ybins.iter().enumerate() {
                for (bx, xs) in xbins.iter().enumerate() {
                    let mut s = 0.0;
                    for y in ys.clone() {
                        for xx in xs.clone() {
                            s += x.data()[(ch * h + y) * w + xx];
                        }
                    }
                    out.data_mut()[(ch * out_h + by) * out_w + bx] =
                        s / (ys.len() * xs.len()) as f64;
                }
            }
        }
        self.tape.push(out, &[self], move |g| {
            let mut gx = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                for (by, ys) in ybins.iter().enumerate() {
                    for (bx, xs) in xbins.iter().enumerate() {
                        let gv = g.data()[(ch * out_h + by) * out_w + bx]
                            / (ys.len() * xs.len()) as f64;
                        for y in ys.clone() {
                            for xx in xs.clone() {
                                gx.data_mut()[(ch * h + y) * w + xx] += gv;
                            }
                        }
                    }
                }
            }
            vec![gx]
        })
    }
}

/// Bin ranges used by [`Var::adaptive_avg_pool`].
pub fn adaptive_bins(n: usize, bins: usize) -> Vec<std::ops::Range<usize>> {
    assert!(n > 0 && bins > 0, "adaptive bins need positive sizes");
    (0..bins)
        .map(|i| {
            let start = (i * n) / bins;
            let end = ((i + 1) * n).div_ceil(bins);
            start..end.max(start + 1)
        })
        .collect()
}

/// Accumulates a same-padded correlation of `x: [ci,h,w]` with
/// `wt: [co,ci,k,k]` into `out: [co,h,w]`.
#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    wt: &[f64],
    out: &mut [f64],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let p = (k / 2) as isize;
    for o in 0..co {
        for i in 0..ci {
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let (x0, x1) = valid_range(w, dx);
                    let wv = wt[((o * ci + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src = &x[(i * h + sy) * w..(i * h + sy + 1) * w];
                        let dst = &mut out[(o * h + y) * w..(o * h + y + 1) * w];
                        for xx in x0..x1 {
                            dst[xx] += wv * src[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    wt: &[f64],
    g: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let p = (k / 2) as isize;
    for o in 0..co {
        for i in 0..ci {
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let (x0, x1) = valid_range(w, dx);
                    let widx = ((o * ci + i) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &g[(o * h + y) * w..(o * h + y + 1) * w];
                        let xrow = &x[(i * h + sy) * w..(i * h + sy + 1) * w];
                        let gxrow = &mut gx[(i * h + sy) * w..(i * h + sy + 1) * w];
                        for xx in x0..x1 {
                            let sx = (xx as isize + dx) as usize;
                            acc += grow[xx] * xrow[sx];
                            gxrow[sx] += wv * grow[xx];
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
}

/// Output positions `[lo, hi)` whose source `pos + d` lies inside `[0, n)`.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}
