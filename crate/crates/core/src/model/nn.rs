//! Per-point MLP with a mean-pooled context layer and manual backprop.
//!
//! ```text
//! h1  = silu(x W1 + b1)                  per point
//! c   = mean_i h1_i
//! h2  = silu([h1, c] W2 + b2)
//! h_l = silu(h_{l-1} W_l + b_l)          `depth` times
//! out = h_last Wo + bo
//! ```
//!
//! Weights are shared across points, so the map is permutation-equivariant.
//! The pooled mean sums each column in sorted order, which makes it
//! bitwise independent of the point order.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArch {
    pub input: usize,
    pub hidden: usize,
    /// Hidden layers after the context layer.
    pub depth: usize,
    pub output: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.fan_in, self.fan_out), &p[self.offset..self.offset + self.fan_in * self.fan_out])
            .expect("layer shape")
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        let at = self.offset + self.fan_in * self.fan_out;
        &p[at..at + self.fan_out]
    }

    fn forward(&self, p: &[f64], x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight(p));
        let b = self.bias(p);
        for mut row in y.rows_mut() {
            for (v, bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, p: &[f64], x: &Array2<f64>, dy: &Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let n_w = self.fan_in * self.fan_out;
        let dw = x.t().dot(dy);
        let gw = &mut grad[self.offset..self.offset + n_w];
        for (g, d) in gw.iter_mut().zip(dw.iter()) {
            *g += d;
        }
        let db = dy.sum_axis(Axis(0));
        for (g, d) in grad[self.offset + n_w..self.offset + self.len()].iter_mut().zip(db.iter()) {
            *g += d;
        }
        dy.dot(&self.weight(p).t())
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Activations kept for the backward pass.
pub struct Cache {
    x: Array2<f64>,
    pre: Vec<Array2<f64>>,
    acts: Vec<Array2<f64>>,
    joined: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub arch: NetArch,
    pub params: Vec<f64>,
}

impl Mlp {
    fn layers(arch: &NetArch) -> Vec<Dense> {
        let h = arch.hidden;
        let mut dims = vec![(arch.input, h), (2 * h, h)];
        dims.extend(std::iter::repeat_n((h, h), arch.depth));
        dims.push((h, arch.output));
        let mut offset = 0;
        dims.into_iter()
            .map(|(fan_in, fan_out)| {
                let d = Dense { fan_in, fan_out, offset };
                offset += d.len();
                d
            })
            .collect()
    }

    pub fn param_count(arch: &NetArch) -> usize {
        Self::layers(arch).iter().map(Dense::len).sum()
    }

    pub fn zeros(arch: NetArch) -> Result<Self> {
        if arch.input == 0 || arch.hidden == 0 || arch.output == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        Ok(Self {
            arch,
            params: vec![0.0; Self::param_count(&arch)],
        })
    }

    /// Normal weights with variance `1 / fan_in`, zero biases and a zero
    /// output layer (the untrained network outputs zero).
    pub fn init(arch: NetArch, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let mut r = rng::stream(seed, u64::MAX);
        let layers = Self::layers(&arch);
        for d in &layers[..layers.len() - 1] {
            let sd = (1.0 / d.fan_in as f64).sqrt();
            for w in &mut net.params[d.offset..d.offset + d.fan_in * d.fan_out] {
                *w = sd * rng::standard_normal(&mut r);
            }
        }
        Ok(net)
    }

    pub fn from_params(arch: NetArch, params: Vec<f64>) -> Result<Self> {
        if params.len() != Self::param_count(&arch) {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                Self::param_count(&arch),
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, Cache) {
        let layers = Self::layers(&self.arch);
        let p = &self.params;
        let h = self.arch.hidden;
        let m = x.nrows();
        let mut pre = Vec::with_capacity(layers.len() - 1);
        let mut acts = Vec::with_capacity(layers.len() - 1);

        let z1 = layers[0].forward(p, &x);
        let h1 = z1.mapv(silu);
        let mut ctx = Array1::<f64>::zeros(h);
        let mut col = vec![0.0; m];
        for (c, v) in ctx.iter_mut().enumerate() {
            col.iter_mut().zip(h1.column(c)).for_each(|(a, b)| *a = *b);
            col.sort_unstable_by(f64::total_cmp);
            *v = col.iter().sum::<f64>() / m as f64;
        }
        let mut joined = Array2::<f64>::zeros((m, 2 * h));
        joined.slice_mut(s![.., ..h]).assign(&h1);
        joined.slice_mut(s![.., h..]).assign(&ctx.broadcast((m, h)).expect("broadcast"));
        pre.push(z1);
        acts.push(h1);

        let mut cur = joined.clone();
        for d in &layers[1..layers.len() - 1] {
            let z = d.forward(p, &cur);
            let a = z.mapv(silu);
            pre.push(z);
            acts.push(a.clone());
            cur = a;
        }
        let out = layers[layers.len() - 1].forward(p, &cur);
        (out, Cache { x, pre, acts, joined })
    }

    /// Adds `d(out . dout)/d params` into `grad`.
    pub fn backward(&self, cache: &Cache, dout: &Array2<f64>, grad: &mut [f64]) {
        let layers = Self::layers(&self.arch);
        let p = &self.params;
        let h = self.arch.hidden;
        let m = cache.x.nrows() as f64;
        let last = layers.len() - 1;

        let mut d = layers[last].backward(p, &cache.acts[last - 1], dout, grad);
        for l in (1..last).rev() {
            let dz = &d * &cache.pre[l].mapv(silu_grad);
            let input = if l == 1 { &cache.joined } else { &cache.acts[l - 1] };
            d = layers[l].backward(p, input, &dz, grad);
        }
        // d is now the gradient w.r.t. [h1, ctx]
        let mut dh1 = d.slice(s![.., ..h]).to_owned();
        let dctx = d.slice(s![.., h..]).sum_axis(Axis(0)) / m;
        for mut row in dh1.rows_mut() {
            row += &dctx;
        }
        let dz1 = dh1 * cache.pre[0].mapv(silu_grad);
        layers[0].backward(p, &cache.x, &dz1, grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> NetArch {
        NetArch {
            input: 5,
            hidden: 8,
            depth: 2,
            output: 4,
        }
    }

    fn random_net(seed: u64) -> Mlp {
        let mut net = Mlp::init(arch(), seed).unwrap();
        let mut r = rng::stream(seed, 1);
        for v in net.params.iter_mut() {
            *v += 0.3 * rng::standard_normal(&mut r);
        }
        net
    }

    fn input(m: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, 2);
        Array2::from_shape_fn((m, 5), |_| rng::standard_normal(&mut r))
    }

    #[test]
    fn zero_params_give_zero_output() {
        let net = Mlp::zeros(arch()).unwrap();
        let (out, _) = net.forward(input(6, 1));
        assert!(out.iter().all(|&v| v == 0.0));
        let (out, _) = Mlp::init(arch(), 3).unwrap().forward(input(6, 1));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_equivariant_bitwise() {
        let net = random_net(4);
        let x = input(7, 5);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let xp = Array2::from_shape_fn((7, 5), |(i, j)| x[[perm[i], j]]);
        let (a, _) = net.forward(x);
        let (b, _) = net.forward(xp);
        for i in 0..7 {
            for j in 0..4 {
                assert_eq!(b[[i, j]].to_bits(), a[[perm[i], j]].to_bits());
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = random_net(8);
        let x = input(5, 9);
        let mut r = rng::stream(10, 0);
        let w = Array2::from_shape_fn((5, 4), |_| rng::standard_normal(&mut r));
        let objective = |n: &Mlp| (n.forward(x.clone()).0 * &w).sum();
        let (_, cache) = net.forward(x.clone());
        let mut grad = vec![0.0; net.params.len()];
        net.backward(&cache, &w, &mut grad);
        let h = 1e-6;
        // every layer is covered: probe all parameters
        for k in 0..net.params.len() {
            let mut plus = net.clone();
            plus.params[k] += h;
            let mut minus = net.clone();
            minus.params[k] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let tol = 1e-6 * fd.abs().max(1.0);
            assert!((fd - grad[k]).abs() <= tol, "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn rejects_wrong_param_count() {
        assert!(Mlp::from_params(arch(), vec![0.0; 3]).is_err());
        assert_eq!(Mlp::param_count(&arch()), 5 * 8 + 8 + 16 * 8 + 8 + 2 * (64 + 8) + 8 * 4 + 4);
    }
}
