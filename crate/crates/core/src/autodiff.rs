//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every parameter leaf. Graphs are cheap and meant to be built
//! fresh for each forward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{broadcast_binary, expand_to_shape, gemm, permute, sum_to_shape, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(t), parents: vec![], backward: None, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, true)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        let backward: Option<BackwardFn> = if requires_grad { Some(Box::new(backward)) } else { None };
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward,
            requires_grad,
        });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::new(nodes[loss.id].value.shape(), vec![1.0]));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                Some(bw) => {
                    for (&p, gp) in node.parents.iter().zip(bw(&g)) {
                        let Some(gp) = gp else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&gp),
                            slot @ None => *slot = Some(gp),
                        }
                    }
                }
                // leaves keep their gradient
                None => grads[id] = Some(g),
            }
        }
        Gradients { grads }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    Tensor::axis_split(shape, axis)
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.graph.push((*y).clone(), &[self], move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(yc.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), data))]
        })
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn expm1(self) -> Var<'g> {
        self.unary(f64::exp_m1, |_, y| y + 1.0)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// `x · sigmoid(x)`
    pub fn silu(self) -> Var<'g> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(move |x| x.clamp(lo, hi), move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 })
    }

    fn binary(
        self,
        other: Var<'g>,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let out = broadcast_binary(&a, &b, f);
        let out_shape = out.shape().to_vec();
        self.graph.push(out, &[self, other], move |g| {
            let ea = expand_to_shape(&a, &out_shape);
            let eb = expand_to_shape(&b, &out_shape);
            let mut ga = Vec::with_capacity(g.len());
            let mut gb = Vec::with_capacity(g.len());
            for ((&gi, &x), &y) in g.data().iter().zip(ea.data()).zip(eb.data()) {
                ga.push(gi * da(x, y));
                gb.push(gi * db(x, y));
            }
            vec![
                Some(sum_to_shape(&Tensor::new(&out_shape, ga), a.shape())),
                Some(sum_to_shape(&Tensor::new(&out_shape, gb), b.shape())),
            ]
        })
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (sa, sb) = (self.shape(), other.shape());
        let out = broadcast_binary(&self.value(), &other.value(), |x, y| x + y);
        self.graph.push(out, &[self, other], move |g| {
            vec![Some(sum_to_shape(g, &sa)), Some(sum_to_shape(g, &sb))]
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (sa, sb) = (self.shape(), other.shape());
        let out = broadcast_binary(&self.value(), &other.value(), |x, y| x - y);
        self.graph.push(out, &[self, other], move |g| {
            vec![Some(sum_to_shape(g, &sa)), Some(sum_to_shape(&g.map(|x| -x), &sb))]
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    pub fn sum(self) -> Var<'g> {
        let shape = self.shape();
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &x.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        self.graph.push(Tensor::new(&out_shape, out), &[self], move |g| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for j in 0..n {
                    gx[(o * n + j) * inner..(o * n + j + 1) * inner].copy_from_slice(src);
                }
            }
            vec![Some(Tensor::new(&shape, gx))]
        })
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Var<'g> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let old = self.shape();
        let v = (*self.value()).clone().reshape(shape);
        self.graph.push(v, &[self], move |g| vec![Some(g.clone().reshape(&old))])
    }

    pub fn permute(self, axes: &[usize]) -> Var<'g> {
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let v = permute(&self.value(), axes);
        self.graph.push(v, &[self], move |g| vec![Some(permute(g, &inverse))])
    }

    /// Swaps the last two axes.
    pub fn t(self) -> Var<'g> {
        let n = self.shape().len();
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    /// Matrix product over the last two axes. `other` is either a single
    /// `[k, n]` matrix shared by every batch entry or has the same leading
    /// batch axes as `self`.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs matrices, got {sa:?} @ {sb:?}");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, kb, "matmul inner dims {sa:?} @ {sb:?}");
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared = sb.len() == 2;
        if !shared {
            assert_eq!(sa[..sa.len() - 2], sb[..sb.len() - 2], "matmul batch dims {sa:?} @ {sb:?}");
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut c = vec![0.0; batch * m * n];
        if shared {
            gemm(batch * m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, &mut c, 0.0);
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..],
                    k as isize,
                    1,
                    &b.data()[i * k * n..],
                    n as isize,
                    1,
                    &mut c[i * m * n..],
                    0.0,
                );
            }
        }
        self.graph.push(Tensor::new(&out_shape, c), &[self, other], move |g| {
            let gd = g.data();
            let mut ga = vec![0.0; batch * m * k];
            let mut gb = vec![0.0; b.len()];
            if shared {
                // dA = dC Bᵀ, dB = Aᵀ dC over the flattened batch
                gemm(batch * m, n, k, gd, n as isize, 1, b.data(), 1, n as isize, &mut ga, 0.0);
                gemm(k, batch * m, n, a.data(), 1, k as isize, gd, n as isize, 1, &mut gb, 0.0);
            } else {
                for i in 0..batch {
                    let gi = &gd[i * m * n..];
                    gemm(m, n, k, gi, n as isize, 1, &b.data()[i * k * n..], 1, n as isize, &mut ga[i * m * k..], 0.0);
                    gemm(k, m, n, &a.data()[i * m * k..], 1, k as isize, gi, n as isize, 1, &mut gb[i * k * n..], 0.0);
                }
            }
            vec![Some(Tensor::new(&sa, ga)), Some(Tensor::new(&sb, gb))]
        })
    }

    pub fn log_softmax(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut y = vec![0.0; x.len()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..n).map(|j| (xd[at(j)] - mx).exp()).sum::<f64>().ln();
                for j in 0..n {
                    y[at(j)] = xd[at(j)] - lse;
                }
            }
        }
        let yt = Rc::new(Tensor::new(&shape, y));
        let yc = yt.clone();
        self.graph.push((*yt).clone(), &[self], move |g| {
            let (gd, yd) = (g.data(), yc.data());
            let mut gx = vec![0.0; gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let s: f64 = (0..n).map(|j| gd[at(j)]).sum();
                    for j in 0..n {
                        gx[at(j)] = gd[at(j)] - yd[at(j)].exp() * s;
                    }
                }
            }
            vec![Some(Tensor::new(&shape, gx))]
        })
    }

    pub fn softmax(self, axis: usize) -> Var<'g> {
        self.log_softmax(axis).exp()
    }

    /// Numerically stabilised `log Σ exp` along `axis`.
    pub fn logsumexp(self, axis: usize, keepdim: bool) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                out[o * inner + i] = if mx == f64::NEG_INFINITY {
                    mx
                } else {
                    mx + (0..n).map(|j| (xd[at(j)] - mx).exp()).sum::<f64>().ln()
                };
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let lse = out.clone();
        self.graph.push(Tensor::new(&out_shape, out), &[self], move |g| {
            let xd = x.data();
            let mut gx = vec![0.0; xd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let r = o * inner + i;
                    for j in 0..n {
                        let at = (o * n + j) * inner + i;
                        gx[at] = g.data()[r] * (xd[at] - lse[r]).exp();
                    }
                }
            }
            vec![Some(Tensor::new(&shape, gx))]
        })
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        assert!(start + len <= n, "narrow {start}+{len} beyond axis length {n}");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.graph.push(Tensor::new(&out_shape, out), &[self], move |g| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(&shape, gx))]
        })
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut out_shape = values[0].shape().to_vec();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        out_shape[axis] = lens.iter().sum();
        let (outer, total, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        graph.push(Tensor::new(&out_shape, out), parts, move |g| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for o in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    let s = o * total * inner + off;
                    gp.extend_from_slice(&g.data()[s..s + l * inner]);
                    off += l * inner;
                }
                off = 0;
            }
            grads.into_iter().zip(&shapes).map(|(d, s)| Some(Tensor::new(s, d))).collect()
        })
    }

    /// Stride-1 2-D convolution of `[N, C, H, W]` by `[O, C, KH, KW]` with
    /// symmetric zero padding.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, padding: usize) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        assert!(xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1], "conv2d shapes {xs:?} * {ws:?}");
        let geo = ConvGeometry {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            pad: padding,
        };
        let (n, o) = (xs[0], ws[0]);
        let (ho, wo) = geo.out_hw();
        let ckk = geo.c * geo.kh * geo.kw;
        let hw = ho * wo;
        let mut out = vec![0.0; n * o * hw];
        let mut cols = vec![0.0; ckk * hw];
        let img = geo.c * geo.h * geo.w;
        for i in 0..n {
            geo.im2col(&x.data()[i * img..(i + 1) * img], &mut cols);
            gemm(o, ckk, hw, w.data(), ckk as isize, 1, &cols, hw as isize, 1, &mut out[i * o * hw..], 0.0);
        }
        if let Some(b) = bias {
            let bv = b.value();
            for i in 0..n {
                for (oc, &bias) in bv.data().iter().enumerate() {
                    out[(i * o + oc) * hw..(i * o + oc + 1) * hw].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.graph.push(Tensor::new(&[n, o, ho, wo], out), &parents, move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; x.len()];
            let mut gw = vec![0.0; w.len()];
            let mut cols = vec![0.0; ckk * hw];
            let mut gcols = vec![0.0; ckk * hw];
            for i in 0..n {
                let gi = &gd[i * o * hw..(i + 1) * o * hw];
                geo.im2col(&x.data()[i * img..(i + 1) * img], &mut cols);
                gemm(o, hw, ckk, gi, hw as isize, 1, &cols, 1, hw as isize, &mut gw, 1.0);
                gemm(ckk, o, hw, w.data(), 1, ckk as isize, gi, hw as isize, 1, &mut gcols, 0.0);
                geo.col2im(&gcols, &mut gx[i * img..(i + 1) * img]);
            }
            let mut grads = vec![Some(Tensor::new(&xs, gx)), Some(Tensor::new(&ws, gw))];
            if has_bias {
                let mut gb = vec![0.0; o];
                for i in 0..n {
                    for (oc, acc) in gb.iter_mut().enumerate() {
                        *acc += gd[(i * o + oc) * hw..(i * o + oc + 1) * hw].iter().sum::<f64>();
                    }
                }
                grads.push(Some(Tensor::new(&[o], gb)));
            }
            grads
        })
    }

    /// 2×2 average pooling of `[N, C, H, W]`.
    pub fn avg_pool2(self) -> Var<'g> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 on odd spatial shape {s:?}");
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; nc * h2 * w2];
        for p in 0..nc {
            for i in 0..h2 {
                for j in 0..w2 {
                    let base = p * h * w;
                    let v = x.data()[base + 2 * i * w + 2 * j]
                        + x.data()[base + 2 * i * w + 2 * j + 1]
                        + x.data()[base + (2 * i + 1) * w + 2 * j]
                        + x.data()[base + (2 * i + 1) * w + 2 * j + 1];
                    out[p * h2 * w2 + i * w2 + j] = 0.25 * v;
                }
            }
        }
        self.graph.push(Tensor::new(&[s[0], s[1], h2, w2], out), &[self], move |g| {
            let mut gx = vec![0.0; nc * h * w];
            for p in 0..nc {
                for i in 0..h {
                    for j in 0..w {
                        gx[p * h * w + i * w + j] = 0.25 * g.data()[p * h2 * w2 + (i / 2) * w2 + j / 2];
                    }
                }
            }
            vec![Some(Tensor::new(&s, gx))]
        })
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2(self) -> Var<'g> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; nc * h2 * w2];
        for p in 0..nc {
            for i in 0..h2 {
                for j in 0..w2 {
                    out[p * h2 * w2 + i * w2 + j] = x.data()[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        self.graph.push(Tensor::new(&[s[0], s[1], h2, w2], out), &[self], move |g| {
            let mut gx = vec![0.0; nc * h * w];
            for p in 0..nc {
                for i in 0..h2 {
                    for j in 0..w2 {
                        gx[p * h * w + (i / 2) * w + j / 2] += g.data()[p * h2 * w2 + i * w2 + j];
                    }
                }
            }
            vec![Some(Tensor::new(&s, gx))]
        })
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
}

impl ConvGeometry {
    fn out_hw(&self) -> (usize, usize) {
        (self.h + 2 * self.pad + 1 - self.kh, self.w + 2 * self.pad + 1 - self.kw)
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let (ho, wo) = self.out_hw();
        let mut row = 0;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oh in 0..ho {
                        let ih = oh as isize + ki as isize - self.pad as isize;
                        for ow in 0..wo {
                            let iw = ow as isize + kj as isize - self.pad as isize;
                            dst[oh * wo + ow] = if ih >= 0 && iw >= 0 && (ih as usize) < self.h && (iw as usize) < self.w {
                                img[(c * self.h + ih as usize) * self.w + iw as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (ho, wo) = self.out_hw();
        let mut row = 0;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oh in 0..ho {
                        let ih = oh as isize + ki as isize - self.pad as isize;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = ow as isize + kj as isize - self.pad as isize;
                            if iw >= 0 && (iw as usize) < self.w {
                                img[(c * self.h + ih as usize) * self.w + iw as usize] += src[oh * wo + ow];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

macro_rules! impl_binop {
    ($tr:ident, $m:ident, $f:ident) => {
        impl<'g> std::ops::$tr for Var<'g> {
            type Output = Var<'g>;
            fn $m(self, rhs: Var<'g>) -> Var<'g> {
                Var::$f(self, rhs)
            }
        }
    };
}
impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl<'g> std::ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        Var::neg(self)
    }
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape(), grad)
}

/// Largest componentwise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
