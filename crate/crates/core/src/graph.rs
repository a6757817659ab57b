//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! immutable and shared; each recorded node keeps a closure mapping the
//! gradient of its output to gradients of its parents. Nodes whose parents
//! need no gradient store no closure at all, which keeps inference and
//! detached branches cheap.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Maps the output gradient to per-parent gradients. The flag slice tells
/// which parents actually need one; entries for the others may be `None`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Var>>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
    grad_enabled: bool,
    train: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter that took part in the pass (zeros when the
    /// loss did not depend on it).
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<T>>)> + '_ {
        self.params
            .iter()
            .map(move |&(id, node)| (id, self.grads[node].as_ref()))
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph that records gradients; `train` selects batch-statistics normalization.
    pub fn new(train: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
            grad_enabled: true,
            train,
        }
    }

    /// Evaluation-mode graph that records no gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(false)
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push_node(
        &self,
        value: Tensor<T>,
        parents: &[Var],
        backward: Option<BackwardFn<T>>,
        leaf_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.grad_enabled && (leaf_grad || parents.iter().any(|p| nodes[p.0].requires_grad));
        let node = Node {
            value: Rc::new(value),
            parents: if requires_grad {
                parents.iter().map(|p| p.0).collect()
            } else {
                Vec::new()
            },
            backward: if requires_grad { backward } else { None },
            requires_grad,
        };
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push_node(t, &[], None, false)
    }

    /// Leaf that receives a gradient (used for gradient checks on inputs).
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push_node(t, &[], None, true)
    }

    /// Parameter leaf; repeated lookups within one graph return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.push_node(store.value(id).clone(), &[], None, trainable);
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Copy of `v` cut from the gradient tape.
    pub fn detach(&self, v: Var) -> Var {
        let value = (*self.value(v)).clone();
        self.constant(value)
    }

    /// Records an operation with a caller-provided backward rule.
    pub fn custom_op(
        &self,
        parents: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let needs = self.grad_enabled && parents.iter().any(|&p| self.requires_grad(p));
        let bw: Option<BackwardFn<T>> = if needs {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(value, parents, bw, false)
    }

    /// Queues a new value for a non-trainable buffer (normalization statistics).
    pub fn push_buffer_update(&self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    /// Reverse pass from a scalar (single-element) output.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        }
        for (i, node) in nodes.iter().enumerate().take(loss.0 + 1).rev() {
            // Leaves have no backward rule, so only interior gradients are released.
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = bw(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    nodes[p].value.shape(),
                    "gradient shape for node {p}"
                );
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        let mut params: Vec<(ParamId, usize)> = self
            .params
            .borrow()
            .iter()
            .map(|(&id, v)| (id, v.0))
            .collect();
        params.sort_by_key(|&(id, _)| id);
        Gradients { grads, params }
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let out = va.zip_map(&self.value(b), |x, y| x + y);
        self.custom_op(&[a, b], out, |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.custom_op(&[a, b], out, |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x * y);
        self.custom_op(&[a, b], out, move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&vb, |d, y| d * y)),
                needs[1].then(|| g.zip_map(&va, |d, x| d * x)),
            ]
        })
    }

    /// `scale * a + shift`.
    pub fn affine(&self, a: Var, scale: T, shift: T) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        self.custom_op(&[a], out, move |g, _| vec![Some(g.scale(scale))])
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x.max(T::zero()));
        self.custom_op(&[a], out, move |g, _| {
            vec![Some(g.zip_map(&va, |d, x| {
                if x > T::zero() {
                    d
                } else {
                    T::zero()
                }
            }))]
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let y = Rc::new(out.clone());
        self.custom_op(&[a], out, move |g, _| {
            vec![Some(g.zip_map(&y, |d, s| d * s * (T::one() - s)))]
        })
    }

    pub fn abs(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x.abs());
        self.custom_op(&[a], out, move |g, _| {
            vec![Some(g.zip_map(&va, |d, x| {
                if x > T::zero() {
                    d
                } else if x < T::zero() {
                    -d
                } else {
                    T::zero()
                }
            }))]
        })
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = Tensor::scalar(va.sum());
        self.custom_op(&[a], out, move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sum of scalar vars.
    pub fn add_n(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        vars[1..].iter().fold(vars[0], |acc, &v| self.add(acc, v))
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let old = va.shape().to_vec();
        let out = (*va).clone().reshape(shape);
        self.custom_op(&[a], out, move |g, _| vec![Some(g.clone().reshape(&old))])
    }

    /// Concatenation of 4-d tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|&p| self.value(p)).collect();
        let [n, _, h, w] = values[0].dims4();
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                let [vn, vc, vh, vw] = v.dims4();
                assert!(vn == n && vh == h && vw == w, "concat spatial mismatch");
                vc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, total, h, w]);
        {
            let od = out.data_mut();
            for b in 0..n {
                let mut off = 0;
                for (v, &c) in values.iter().zip(&chans) {
                    let src = &v.data()[b * c * hw..(b + 1) * c * hw];
                    od[(b * total + off) * hw..(b * total + off + c) * hw].copy_from_slice(src);
                    off += c;
                }
            }
        }
        self.custom_op(parts, out, move |g, needs| {
            let gd = g.data();
            let mut off = 0;
            chans
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let start = off;
                    off += c;
                    need.then(|| {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            d.extend_from_slice(
                                &gd[(b * total + start) * hw..(b * total + start + c) * hw],
                            );
                        }
                        Tensor::from_vec(&[n, c, h, w], d)
                    })
                })
                .collect()
        })
    }

    /// Nearest-neighbour resampling of a 4-d tensor to `out_h × out_w`.
    pub fn resize_nearest(&self, a: Var, out_h: usize, out_w: usize) -> Var {
        let va = self.value(a);
        let [n, c, h, w] = va.dims4();
        if h == out_h && w == out_w {
            return a;
        }
        let rows: Vec<usize> = (0..out_h).map(|y| y * h / out_h).collect();
        let cols: Vec<usize> = (0..out_w).map(|x| x * w / out_w).collect();
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        {
            let (src, dst) = (va.data(), out.data_mut());
            for plane in 0..n * c {
                let s = &src[plane * h * w..(plane + 1) * h * w];
                let d = &mut dst[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                for (y, &sy) in rows.iter().enumerate() {
                    for (x, &sx) in cols.iter().enumerate() {
                        d[y * out_w + x] = s[sy * w + sx];
                    }
                }
            }
        }
        self.custom_op(&[a], out, move |g, _| {
            let mut gi = Tensor::zeros(&[n, c, h, w]);
            let (gd, gs) = (gi.data_mut(), g.data());
            for plane in 0..n * c {
                let d = &mut gd[plane * h * w..(plane + 1) * h * w];
                let s = &gs[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                for (y, &sy) in rows.iter().enumerate() {
                    for (x, &sx) in cols.iter().enumerate() {
                        d[sy * w + sx] += s[y * out_w + x];
                    }
                }
            }
            vec![Some(gi)]
        })
    }

    pub fn upsample(&self, a: Var, factor: usize) -> Var {
        let [_, _, h, w] = self.value(a).dims4();
        self.resize_nearest(a, h * factor, w * factor)
    }

    /// Non-overlapping `k×k` average pooling; spatial dims must divide by `k`.
    pub fn avg_pool(&self, a: Var, k: usize) -> Var {
        if k == 1 {
            return a;
        }
        let va = self.value(a);
        let [n, c, h, w] = va.dims4();
        assert!(
            h % k == 0 && w % k == 0,
            "avg_pool: {h}×{w} not divisible by {k}"
        );
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / T::of((k * k) as f64);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        {
            let (src, dst) = (va.data(), out.data_mut());
            for plane in 0..n * c {
                for y in 0..h {
                    for x in 0..w {
                        dst[plane * oh * ow + (y / k) * ow + x / k] +=
                            src[plane * h * w + y * w + x] * inv;
                    }
                }
            }
        }
        self.custom_op(&[a], out, move |g, _| {
            let mut gi = Tensor::zeros(&[n, c, h, w]);
            let (gd, gs) = (gi.data_mut(), g.data());
            for plane in 0..n * c {
                for y in 0..h {
                    for x in 0..w {
                        gd[plane * h * w + y * w + x] =
                            gs[plane * oh * ow + (y / k) * ow + x / k] * inv;
                    }
                }
            }
            vec![Some(gi)]
        })
    }

    /// Average pooling to `out_h × out_w`; bin `i` spans rows
    /// `⌊i·h/out_h⌋ .. ⌈(i+1)·h/out_h⌉`. Equals [`Graph::avg_pool`] when the sizes divide.
    pub fn adaptive_avg_pool(&self, a: Var, out_h: usize, out_w: usize) -> Var {
        let va = self.value(a);
        let [n, c, h, w] = va.dims4();
        if out_h == h && out_w == w {
            return a;
        }
        if h % out_h == 0 && w % out_w == 0 && h / out_h == w / out_w {
            return self.avg_pool(a, h / out_h);
        }
        let bins = |o: usize, len: usize| -> Vec<(usize, usize)> {
            (0..o)
                .map(|i| (i * len / o, ((i + 1) * len).div_ceil(o)))
                .collect()
        };
        let (rb, cb) = (bins(out_h, h), bins(out_w, w));
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        {
            let (src, dst) = (va.data(), out.data_mut());
            for plane in 0..n * c {
                for (y, &(r0, r1)) in rb.iter().enumerate() {
                    for (x, &(c0, c1)) in cb.iter().enumerate() {
                        let mut s = T::zero();
                        for r in r0..r1 {
                            for col in c0..c1 {
                                s += src[plane * h * w + r * w + col];
                            }
                        }
                        dst[plane * out_h * out_w + y * out_w + x] =
                            s / T::of(((r1 - r0) * (c1 - c0)) as f64);
                    }
                }
            }
        }
        self.custom_op(&[a], out, move |g, _| {
            let mut gi = Tensor::zeros(&[n, c, h, w]);
            let (gd, gs) = (gi.data_mut(), g.data());
            for plane in 0..n * c {
                for (y, &(r0, r1)) in rb.iter().enumerate() {
                    for (x, &(c0, c1)) in cb.iter().enumerate() {
                        let v = gs[plane * out_h * out_w + y * out_w + x]
                            / T::of(((r1 - r0) * (c1 - c0)) as f64);
                        for r in r0..r1 {
                            for col in c0..c1 {
                                gd[plane * h * w + r * w + col] += v;
                            }
                        }
                    }
                }
            }
            vec![Some(gi)]
        })
    }

    /// Top-left `out_h × out_w` window of a 4-d tensor.
    pub fn crop(&self, a: Var, out_h: usize, out_w: usize) -> Var {
        let va = self.value(a);
        let [n, c, h, w] = va.dims4();
        assert!(out_h <= h && out_w <= w, "crop window larger than input");
        if out_h == h && out_w == w {
            return a;
        }
        let out = Tensor::from_fn(&[n, c, out_h, out_w], |i| {
            let (plane, y, x) = (i / (out_h * out_w), (i / out_w) % out_h, i % out_w);
            va.data()[plane * h * w + y * w + x]
        });
        self.custom_op(&[a], out, move |g, _| {
            let mut gi = Tensor::zeros(&[n, c, h, w]);
            let gd = gi.data_mut();
            for (i, &v) in g.data().iter().enumerate() {
                let (plane, y, x) = (i / (out_h * out_w), (i / out_w) % out_h, i % out_w);
                gd[plane * h * w + y * w + x] = v;
            }
            vec![Some(gi)]
        })
    }

    /// Zero padding at the bottom and right up to `out_h × out_w`.
    pub fn pad_bottom_right(&self, a: Var, out_h: usize, out_w: usize) -> Var {
        let va = self.value(a);
        let [n, c, h, w] = va.dims4();
        assert!(out_h >= h && out_w >= w, "pad target smaller than input");
        if out_h == h && out_w == w {
            return a;
        }
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        {
            let od = out.data_mut();
            for (i, &v) in va.data().iter().enumerate() {
                let (plane, y, x) = (i / (h * w), (i / w) % h, i % w);
                od[plane * out_h * out_w + y * out_w + x] = v;
            }
        }
        self.custom_op(&[a], out, move |g, _| {
            let gi = Tensor::from_fn(&[n, c, h, w], |i| {
                let (plane, y, x) = (i / (h * w), (i / w) % h, i % w);
                g.data()[plane * out_h * out_w + y * out_w + x]
            });
            vec![Some(gi)]
        })
    }

    /// `[n, c, h, w] → [n, c, 1, 1]` spatial mean.
    pub fn global_avg_pool(&self, a: Var) -> Var {
        let va = self.value(a);
        let [n, c, h, w] = va.dims4();
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let out = Tensor::from_fn(&[n, c, 1, 1], |p| {
            va.data()[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv
        });
        self.custom_op(&[a], out, move |g, _| {
            let gi = Tensor::from_fn(&[n, c, h, w], |i| g.data()[i / hw] * inv);
            vec![Some(gi)]
        })
    }

    /// Adds a `[n, c, 1, 1]` tensor to every spatial position of `[n, c, h, w]`.
    pub fn broadcast_add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let [n, c, h, w] = va.dims4();
        assert_eq!(vb.shape(), &[n, c, 1, 1], "broadcast_add operand shape");
        let hw = h * w;
        let out = Tensor::from_fn(&[n, c, h, w], |i| va.data()[i] + vb.data()[i / hw]);
        self.custom_op(&[a, b], out, move |g, needs| {
            let gb = needs[1].then(|| {
                Tensor::from_fn(&[n, c, 1, 1], |p| {
                    g.data()[p * hw..(p + 1) * hw].iter().copied().sum()
                })
            });
            vec![Some(g.clone()), gb]
        })
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m, k] × [k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let [m, k] = va.dims2();
        let [k2, n] = vb.dims2();
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            va.data(),
            (k as isize, 1),
            vb.data(),
            (n as isize, 1),
            T::zero(),
            out.data_mut(),
            (n as isize, 1),
        );
        self.custom_op(&[a, b], out, move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = Tensor::zeros(&[m, k]);
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g.data(),
                    (n as isize, 1),
                    vb.data(),
                    (1, n as isize),
                    T::zero(),
                    ga.data_mut(),
                    (k as isize, 1),
                );
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = Tensor::zeros(&[k, n]);
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    va.data(),
                    (1, k as isize),
                    g.data(),
                    (n as isize, 1),
                    T::zero(),
                    gb.data_mut(),
                    (n as isize, 1),
                );
                gb
            });
            vec![ga, gb]
        })
    }

    /// 2-d convolution, `x: [n, ci, h, w]`, `weight: [co, ci, kh, kw]`, `bias: [co]`.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(weight));
        let vb = bias.map(|b| self.value(b));
        let [n, ci, h, w] = vx.dims4();
        let [co, wci, kh, kw] = vw.dims4();
        assert_eq!(ci, wci, "conv2d input channels: input {ci}, weight {wci}");
        let geom = ConvGeom::new(h, w, kh, kw, stride, pad);
        let (oh, ow) = (geom.out_h, geom.out_w);
        let kk = ci * kh * kw;
        let l = oh * ow;
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        let direct = geom.is_pointwise();
        let mut cols = if direct {
            Vec::new()
        } else {
            vec![T::zero(); kk * l]
        };
        for b in 0..n {
            let xs = &vx.data()[b * ci * h * w..(b + 1) * ci * h * w];
            let src: &[T] = if direct {
                xs
            } else {
                geom.im2col(xs, ci, &mut cols);
                &cols
            };
            let os = &mut out.data_mut()[b * co * l..(b + 1) * co * l];
            if let Some(vb) = &vb {
                for (oc, chunk) in os.chunks_mut(l).enumerate() {
                    chunk.fill(vb.data()[oc]);
                }
            }
            T::gemm(
                co,
                kk,
                l,
                T::one(),
                vw.data(),
                (kk as isize, 1),
                src,
                (l as isize, 1),
                T::one(),
                os,
                (l as isize, 1),
            );
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.custom_op(&parents, out, move |g, needs| {
            let mut gx = needs[0].then(|| Tensor::zeros(&[n, ci, h, w]));
            let mut gw = needs[1].then(|| Tensor::zeros(&[co, ci, kh, kw]));
            let mut cols = if direct {
                Vec::new()
            } else {
                vec![T::zero(); kk * l]
            };
            let mut dcols = if direct {
                Vec::new()
            } else {
                vec![T::zero(); kk * l]
            };
            for b in 0..n {
                let gs = &g.data()[b * co * l..(b + 1) * co * l];
                let xs = &vx.data()[b * ci * h * w..(b + 1) * ci * h * w];
                if let Some(gw) = gw.as_mut() {
                    let src: &[T] = if direct {
                        xs
                    } else {
                        geom.im2col(xs, ci, &mut cols);
                        &cols
                    };
                    // dW += dY · colsᵀ
                    T::gemm(
                        co,
                        l,
                        kk,
                        T::one(),
                        gs,
                        (l as isize, 1),
                        src,
                        (1, l as isize),
                        T::one(),
                        gw.data_mut(),
                        (kk as isize, 1),
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    let gxs = &mut gx.data_mut()[b * ci * h * w..(b + 1) * ci * h * w];
                    if direct {
                        T::gemm(
                            kk,
                            co,
                            l,
                            T::one(),
                            vw.data(),
                            (1, kk as isize),
                            gs,
                            (l as isize, 1),
                            T::zero(),
                            gxs,
                            (l as isize, 1),
                        );
                    } else {
                        T::gemm(
                            kk,
                            co,
                            l,
                            T::one(),
                            vw.data(),
                            (1, kk as isize),
                            gs,
                            (l as isize, 1),
                            T::zero(),
                            &mut dcols,
                            (l as isize, 1),
                        );
                        geom.col2im(&dcols, ci, gxs);
                    }
                }
            }
            let mut res = vec![gx, gw];
            if needs.len() == 3 {
                res.push(needs[2].then(|| {
                    Tensor::from_fn(&[co], |oc| {
                        (0..n)
                            .map(|b| {
                                g.data()[(b * co + oc) * l..(b * co + oc + 1) * l]
                                    .iter()
                                    .copied()
                                    .sum::<T>()
                            })
                            .sum()
                    })
                }));
            }
            res
        })
    }

    // ---- normalization ------------------------------------------------------

    /// Batch normalization over every axis except axis 1 of `x: [n, c, ...]`.
    ///
    /// Train mode normalizes with batch statistics and returns them as
    /// `(mean, biased variance)`; eval mode uses the supplied running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
        use_batch_stats: bool,
    ) -> (Var, Option<(Tensor<T>, Tensor<T>)>) {
        let vx = self.value(x);
        let (vg, vbeta) = (self.value(gamma), self.value(beta));
        let shape = vx.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let m = n * s;
        let idx = move |b: usize, ch: usize, i: usize| (b * c + ch) * s + i;
        let (mean, var) = if use_batch_stats && m > 0 {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv_m = T::one() / T::of(m as f64);
            for ch in 0..c {
                let mut acc = T::zero();
                for b in 0..n {
                    for i in 0..s {
                        acc += vx.data()[idx(b, ch, i)];
                    }
                }
                mean[ch] = acc * inv_m;
                let mut acc2 = T::zero();
                for b in 0..n {
                    for i in 0..s {
                        let d = vx.data()[idx(b, ch, i)] - mean[ch];
                        acc2 += d * d;
                    }
                }
                var[ch] = acc2 * inv_m;
            }
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(&shape);
        let mut out = Tensor::zeros(&shape);
        for b in 0..n {
            for ch in 0..c {
                for i in 0..s {
                    let k = idx(b, ch, i);
                    let xh = (vx.data()[k] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[k] = xh;
                    out.data_mut()[k] = vg.data()[ch] * xh + vbeta.data()[ch];
                }
            }
        }
        let stats = (use_batch_stats && m > 0)
            .then(|| (Tensor::from_vec(&[c], mean), Tensor::from_vec(&[c], var)));
        let batch_mode = use_batch_stats && m > 0;
        let v = self.custom_op(&[x, gamma, beta], out, move |g, needs| {
            let gd = g.data();
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    for i in 0..s {
                        let k = idx(b, ch, i);
                        sum_dy[ch] += gd[k];
                        sum_dy_xhat[ch] += gd[k] * xhat.data()[k];
                    }
                }
            }
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(&shape);
                let inv_m = T::one() / T::of(m.max(1) as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let scale = vg.data()[ch] * inv_std[ch];
                        for i in 0..s {
                            let k = idx(b, ch, i);
                            gx.data_mut()[k] = if batch_mode {
                                scale
                                    * (gd[k]
                                        - sum_dy[ch] * inv_m
                                        - xhat.data()[k] * sum_dy_xhat[ch] * inv_m)
                            } else {
                                scale * gd[k]
                            };
                        }
                    }
                }
                gx
            });
            vec![
                gx,
                needs[1].then(|| Tensor::from_vec(&[c], sum_dy_xhat.clone())),
                needs[2].then(|| Tensor::from_vec(&[c], sum_dy.clone())),
            ]
        });
        (v, stats)
    }

    // ---- softmax family ---------------------------------------------------

    /// Softmax over axis 1 of `[n, c, h, w]`.
    pub fn softmax_channels(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = softmax_channels(&va);
        let y = Rc::new(out.clone());
        let [n, c, h, w] = va.dims4();
        let hw = h * w;
        self.custom_op(&[a], out, move |g, _| {
            let mut gi = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                for p in 0..hw {
                    let mut dot = T::zero();
                    for ch in 0..c {
                        let k = (b * c + ch) * hw + p;
                        dot += g.data()[k] * y.data()[k];
                    }
                    for ch in 0..c {
                        let k = (b * c + ch) * hw + p;
                        gi.data_mut()[k] = y.data()[k] * (g.data()[k] - dot);
                    }
                }
            }
            vec![Some(gi)]
        })
    }

    /// Mean over cells of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&self, logits: Var, labels: Rc<Vec<u8>>) -> Var {
        let vl = self.value(logits);
        let [n, c, h, w] = vl.dims4();
        let hw = h * w;
        assert_eq!(labels.len(), n * hw, "label count");
        let probs = softmax_channels(&vl);
        let mut loss = T::zero();
        for b in 0..n {
            for p in 0..hw {
                let lab = labels[b * hw + p] as usize;
                assert!(lab < c, "label {lab} out of range");
                let z = vl.data()[(b * c + lab) * hw + p];
                let lse = log_sum_exp((0..c).map(|ch| vl.data()[(b * c + ch) * hw + p]));
                loss += lse - z;
            }
        }
        let inv = T::one() / T::of((n * hw).max(1) as f64);
        let out = Tensor::scalar(loss * inv);
        self.custom_op(&[logits], out, move |g, _| {
            let s = g.data()[0] * inv;
            let mut gi = probs.scale(s);
            for b in 0..n {
                for p in 0..hw {
                    let lab = labels[b * hw + p] as usize;
                    gi.data_mut()[(b * c + lab) * hw + p] -= s;
                }
            }
            vec![Some(gi)]
        })
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(vals: impl Iterator<Item = T> + Clone) -> T {
    let m = vals.clone().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<T>().ln()
}

/// Numerically stable softmax over axis 1 of a 4-d tensor.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims4();
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for b in 0..n {
        for p in 0..hw {
            let m = (0..c)
                .map(|ch| x.data()[(b * c + ch) * hw + p])
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x.data()[(b * c + ch) * hw + p] - m).exp();
                out.data_mut()[(b * c + ch) * hw + p] = e;
                z += e;
            }
            for ch in 0..c {
                out.data_mut()[(b * c + ch) * hw + p] /= z;
            }
        }
    }
    out
}

/// Log-softmax over axis 1 of a 4-d tensor.
pub fn log_softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims4();
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for b in 0..n {
        for p in 0..hw {
            let lse = log_sum_exp((0..c).map(|ch| x.data()[(b * c + ch) * hw + p]));
            for ch in 0..c {
                let k = (b * c + ch) * hw + p;
                out.data_mut()[k] = x.data()[k] - lse;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(stride > 0, "conv stride must be positive");
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv kernel larger than padded input"
        );
        Self {
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds one sample into a `[ci·kh·kw, out_h·out_w]` patch matrix.
    fn im2col<T: Scalar>(&self, x: &[T], ci: usize, cols: &mut [T]) {
        let l = self.out_h * self.out_w;
        for c in 0..ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let srow = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], ci: usize, x: &mut [T]) {
        let l = self.out_h * self.out_w;
        for c in 0..ci {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let prow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                prow[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let [n, ci, h, ww] = x.dims4();
        let [co, _, kh, kw] = w.dims4();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (ww + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for bn in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for x0 in 0..ow {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (x0 * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < ww
                                    {
                                        acc += x.at4(bn, c, iy as usize, ix as usize)
                                            * w.at4(o, c, ky, kx);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bn * co + o) * oh + y) * ow + x0] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
            let x = rand_tensor(&[2, 3, 7, 6], 1);
            let w = rand_tensor(&[4, 3, k, k], 2);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let g = Graph::<f64>::inference();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let bv = g.constant(Tensor::from_vec(&[4], b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad);
            let expect = naive_conv(&x, &w, &b, stride, pad);
            assert!(
                g.value(y).max_abs_diff(&expect) < 1e-12,
                "stride {stride} pad {pad}"
            );
        }
    }

    #[test]
    fn conv_gradients_pass_finite_differences() {
        let x = rand_tensor(&[2, 2, 5, 4], 3);
        let w = rand_tensor(&[3, 2, 3, 3], 4);
        let b = rand_tensor(&[3], 5);
        let probe = rand_tensor(&[2, 3, 3, 2], 6);
        let report = check_gradient(&[x, w, b], 1e-6, |g, vs| {
            let y = g.conv2d(vs[0], vs[1], Some(vs[2]), 2, 1);
            let p = g.constant(probe.clone());
            g.sum_all(g.mul(y, p))
        });
        assert!(report.rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn batch_norm_train_gradients_pass_finite_differences() {
        let x = rand_tensor(&[3, 2, 2, 2], 7);
        let gamma = rand_tensor(&[2], 8);
        let beta = rand_tensor(&[2], 9);
        let probe = rand_tensor(&[3, 2, 2, 2], 10);
        let rm = Tensor::zeros(&[2]);
        let rv = Tensor::ones(&[2]);
        let report: GradCheck = check_gradient(&[x, gamma, beta], 1e-6, |g, vs| {
            let (y, _) = g.batch_norm(vs[0], vs[1], vs[2], &rm, &rv, 1e-5, true);
            let p = g.constant(probe.clone());
            g.sum_all(g.mul(y, p))
        });
        assert!(report.rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn shape_ops_gradients_pass_finite_differences() {
        let a = rand_tensor(&[1, 2, 4, 4], 11);
        let b = rand_tensor(&[1, 1, 4, 4], 12);
        let c = rand_tensor(&[1, 3, 1, 1], 13);
        let probe = rand_tensor(&[1, 3, 2, 6], 14);
        let report = check_gradient(&[a, b, c], 1e-6, |g, vs| {
            let cat = g.concat_channels(&[vs[0], vs[1]]);
            let pooled = g.avg_pool(cat, 2);
            let up = g.resize_nearest(pooled, 2, 6);
            let gp = g.global_avg_pool(cat);
            let z = g.broadcast_add(up, vs[2]);
            let z = g.broadcast_add(z, gp);
            let s = g.sigmoid(z);
            let p = g.constant(probe.clone());
            g.sum_all(g.mul(s, p))
        });
        assert!(report.rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn adaptive_pool_matches_avg_pool_and_passes_finite_differences() {
        let a = rand_tensor(&[1, 2, 8, 8], 24);
        let g = Graph::<f64>::inference();
        let x = g.constant(a.clone());
        let p1 = g.value(g.adaptive_avg_pool(x, 4, 4));
        let p2 = g.value(g.avg_pool(x, 2));
        assert_eq!(*p1, *p2);
        let probe = rand_tensor(&[1, 2, 3, 5], 25);
        let report = check_gradient(&[rand_tensor(&[1, 2, 7, 9], 26)], 1e-6, |g, vs| {
            let p = g.adaptive_avg_pool(vs[0], 3, 5);
            g.sum_all(g.mul(p, g.constant(probe.clone())))
        });
        assert!(report.rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn crop_and_pad_are_adjoint() {
        let a = rand_tensor(&[2, 2, 3, 5], 21);
        let probe = rand_tensor(&[2, 2, 2, 4], 22);
        let report = check_gradient(&[a], 1e-6, |g, vs| {
            let padded = g.pad_bottom_right(vs[0], 4, 7);
            let c = g.crop(padded, 2, 4);
            g.sum_all(g.mul(c, g.constant(probe.clone())))
        });
        assert!(report.rel_error < 1e-6, "{report:?}");
        let g = Graph::<f64>::inference();
        let x = g.constant(rand_tensor(&[1, 1, 3, 5], 23));
        let back = g.crop(g.pad_bottom_right(x, 6, 6), 3, 5);
        assert_eq!(*g.value(back), *g.value(x));
    }

    #[test]
    fn cross_entropy_and_softmax_gradients() {
        let logits = rand_tensor(&[2, 4, 2, 3], 15);
        let labels = Rc::new(vec![0u8, 1, 2, 3, 0, 1, 3, 3, 2, 1, 0, 0]);
        let report = check_gradient(&[logits.clone()], 1e-6, |g, vs| {
            g.cross_entropy(vs[0], labels.clone())
        });
        assert!(report.rel_error < 1e-6, "{report:?}");
        let probe = rand_tensor(&[2, 4, 2, 3], 16);
        let report = check_gradient(&[logits], 1e-6, |g, vs| {
            let p = g.softmax_channels(vs[0]);
            let q = g.constant(probe.clone());
            g.sum_all(g.mul(p, q))
        });
        assert!(report.rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn matmul_gradients() {
        let a = rand_tensor(&[3, 4], 17);
        let b = rand_tensor(&[4, 2], 18);
        let report = check_gradient(&[a, b], 1e-6, |g, vs| {
            let m = g.matmul(vs[0], vs[1]);
            let r = g.relu(m);
            g.sum_all(g.abs(g.affine(r, 2.0, -0.1)))
        });
        assert!(report.rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn detached_values_get_no_gradient() {
        let g = Graph::<f64>::new(true);
        let a = g.leaf(Tensor::ones(&[2]));
        let d = g.detach(a);
        let s = g.sum_all(g.mul(a, d));
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn inference_graph_records_no_backward() {
        let g = Graph::<f32>::inference();
        let a = g.leaf(Tensor::ones(&[2]));
        assert!(!g.requires_grad(a));
    }
}
