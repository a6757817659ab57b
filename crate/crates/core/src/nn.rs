//! Layer building blocks on top of [`Graph`].

use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::{bias_uniform, kaiming_uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn param(&mut self, leaf: &str, value: Tensor<T>) -> ParamId {
        let name = self.full_name(leaf);
        self.store.add(name, value)
    }

    pub fn buffer(&mut self, leaf: &str, value: Tensor<T>) -> ParamId {
        let name = self.full_name(leaf);
        self.store.add_buffer(name, value)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = kaiming_uniform(&[cout, cin, k, k], fan_in, b.rng());
        let weight = b.param("weight", w);
        let bias = bias.then(|| {
            let v = bias_uniform(cout, fan_in, b.rng());
            b.param("bias", v)
        });
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let bias = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, bias, self.stride, self.pad)
    }
}

/// Batch normalization with running statistics kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        Self {
            gamma: b.param("gamma", Tensor::ones(&[channels])),
            beta: b.param("beta", Tensor::zeros(&[channels])),
            running_mean: b.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: b.buffer("running_var", Tensor::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let rm = store.value(self.running_mean);
        let rv = store.value(self.running_var);
        let (y, stats) = g.batch_norm(x, gamma, beta, rm, rv, T::of(self.eps), g.is_train());
        if let Some((mean, var)) = stats {
            let shape = g.shape(x);
            let m: usize = shape[0] * shape[2..].iter().product::<usize>();
            let unbias = if m > 1 {
                T::of(m as f64 / (m as f64 - 1.0))
            } else {
                T::one()
            };
            let mom = T::of(self.momentum);
            let keep = T::one() - mom;
            let new_mean = rm.zip_map(&mean, |r, b| keep * r + mom * b);
            let new_var = rv.zip_map(&var, |r, b| keep * r + mom * b * unbias);
            g.push_buffer_update(self.running_mean, new_mean);
            g.push_buffer_update(self.running_var, new_var);
        }
        y
    }
}

/// Convolution → batch normalization → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let conv = Conv2d::new(&mut b.sub("conv"), cin, cout, k, stride, false);
        let bn = BatchNorm::new(&mut b.sub("bn"), cout);
        Self { conv, bn }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.conv.forward(g, store, x);
        let y = self.bn.forward(g, store, y);
        g.relu(y)
    }
}

/// Dense layer on `[rows, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cin: usize, cout: usize, bias: bool) -> Self {
        let w = kaiming_uniform(&[cin, cout], cin, b.rng());
        let weight = b.param("weight", w);
        let bias = bias.then(|| {
            let v = bias_uniform(cout, cin, b.rng());
            b.param("bias", v)
        });
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            None => y,
            Some(b) => {
                let rows = g.shape(x)[0];
                let bias = store.value(b);
                let cols = bias.len();
                // Broadcast through a rank-1 outer product so the bias keeps its gradient.
                let ones = g.constant(Tensor::ones(&[rows, 1]));
                let bv = g.param(store, b);
                let b2 = g.reshape(bv, &[1, cols]);
                g.add(y, g.matmul(ones, b2))
            }
        }
    }
}
