//! Utility and mixing networks over flat parameter vectors, with reverse-mode
//! gradients written out by hand.

use serde::{Deserialize, Serialize};

use crate::env::NUM_ACTIONS;

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Subgradient of |z|, zero at the kink.
fn abs_derivative(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else if z < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `out = W x + b` with `W` row-major `rows × x.len()`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Accumulates `dW += dy ⊗ x` and `db += dy`.
fn affine_backward(x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) {
    let cols = x.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db[r] += g;
        for (d, &xi) in dw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *d += g * xi;
        }
    }
}

/// `dx += Wᵀ dy`.
fn affine_transpose(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (d, &wi) in dx.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *d += g * wi;
        }
    }
}

/// Two-hidden-layer ReLU network from `input` features to one value per action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilityNet {
    pub input: usize,
    pub hidden: usize,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct UtilityCache {
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

impl UtilityNet {
    pub fn num_params(&self) -> usize {
        let (i, h, o) = (self.input, self.hidden, NUM_ACTIONS);
        h * i + h + h * h + h + o * h + o
    }

    fn split<'a>(&self, p: &'a [f64]) -> [&'a [f64]; 6] {
        let (i, h, o) = (self.input, self.hidden, NUM_ACTIONS);
        let (w1, rest) = p.split_at(h * i);
        let (b1, rest) = rest.split_at(h);
        let (w2, rest) = rest.split_at(h * h);
        let (b2, rest) = rest.split_at(h);
        let (w3, b3) = rest.split_at(o * h);
        [w1, b1, w2, b2, w3, b3]
    }

    fn split_mut<'a>(&self, p: &'a mut [f64]) -> [&'a mut [f64]; 6] {
        let (i, h, o) = (self.input, self.hidden, NUM_ACTIONS);
        let (w1, rest) = p.split_at_mut(h * i);
        let (b1, rest) = rest.split_at_mut(h);
        let (w2, rest) = rest.split_at_mut(h * h);
        let (b2, rest) = rest.split_at_mut(h);
        let (w3, b3) = rest.split_at_mut(o * h);
        [w1, b1, w2, b2, w3, b3]
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> [f64; NUM_ACTIONS] {
        let mut cache = UtilityCache::default();
        self.forward_cached(params, x, &mut cache)
    }

    pub fn forward_cached(&self, params: &[f64], x: &[f64], cache: &mut UtilityCache) -> [f64; NUM_ACTIONS] {
        assert_eq!(x.len(), self.input, "utility input width");
        assert_eq!(params.len(), self.num_params(), "utility parameter count");
        let [w1, b1, w2, b2, w3, b3] = self.split(params);
        let h = self.hidden;
        cache.x.clear();
        cache.x.extend_from_slice(x);
        cache.h1.resize(h, 0.0);
        cache.h2.resize(h, 0.0);
        affine(w1, b1, x, &mut cache.h1);
        cache.h1.iter_mut().for_each(|v| *v = relu(*v));
        affine(w2, b2, &cache.h1, &mut cache.h2);
        cache.h2.iter_mut().for_each(|v| *v = relu(*v));
        let mut out = [0.0; NUM_ACTIONS];
        affine(w3, b3, &cache.h2, &mut out);
        out
    }

    /// Adds d(loss)/d(params) to `grad` given d(loss)/d(outputs).
    pub fn backward(&self, params: &[f64], cache: &UtilityCache, dout: &[f64; NUM_ACTIONS], grad: &mut [f64]) {
        let [_, _, w2, _, w3, _] = self.split(params);
        let [gw1, gb1, gw2, gb2, gw3, gb3] = self.split_mut(grad);
        let h = self.hidden;
        let mut dh2 = vec![0.0; h];
        affine_backward(&cache.h2, dout, gw3, gb3);
        affine_transpose(w3, dout, &mut dh2);
        for (d, &a) in dh2.iter_mut().zip(&cache.h2) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        let mut dh1 = vec![0.0; h];
        affine_backward(&cache.h1, &dh2, gw2, gb2);
        affine_transpose(w2, &dh2, &mut dh1);
        for (d, &a) in dh1.iter_mut().zip(&cache.h1) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        affine_backward(&cache.x, &dh1, gw1, gb1);
    }
}

/// Nonlinearity of the mixer's hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerActivation {
    Elu,
    /// Linear mixing; used by tests that need exact additive special cases.
    Identity,
}

impl MixerActivation {
    fn apply(self, x: f64) -> f64 {
        match self {
            MixerActivation::Elu if x <= 0.0 => x.exp_m1(),
            _ => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            MixerActivation::Elu if x <= 0.0 => x.exp(),
            _ => 1.0,
        }
    }
}

/// State-conditioned monotone mixer. Hypernetworks map the global state `s`
/// to first-layer weights `|A1 s + a1|` (agents × embed), bias `B1 s + c1`,
/// output weights `|A2 s + a2|` and a state value `V(s)` from a one-hidden-
/// layer ReLU net:
/// `Q_tot = act(qᵀ W1 + b1) · w2 + V(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerNet {
    pub agents: usize,
    pub state: usize,
    pub embed: usize,
    pub activation: MixerActivation,
}

#[derive(Debug, Clone, Default)]
pub struct MixerCache {
    s: Vec<f64>,
    q: Vec<f64>,
    z1: Vec<f64>,
    w1: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    z2: Vec<f64>,
    w2: Vec<f64>,
    v_pre: Vec<f64>,
}

impl MixerNet {
    pub fn num_params(&self) -> usize {
        let (n, s, e) = (self.agents, self.state, self.embed);
        // A1,a1 | B1,c1 | A2,a2 | V1,v1 | V2,v2
        n * e * s + n * e + e * s + e + e * s + e + e * s + e + e + 1
    }

    fn split<'a>(&self, p: &'a [f64]) -> [&'a [f64]; 10] {
        let (n, s, e) = (self.agents, self.state, self.embed);
        let (a1w, r) = p.split_at(n * e * s);
        let (a1b, r) = r.split_at(n * e);
        let (b1w, r) = r.split_at(e * s);
        let (b1b, r) = r.split_at(e);
        let (a2w, r) = r.split_at(e * s);
        let (a2b, r) = r.split_at(e);
        let (v1w, r) = r.split_at(e * s);
        let (v1b, r) = r.split_at(e);
        let (v2w, v2b) = r.split_at(e);
        [a1w, a1b, b1w, b1b, a2w, a2b, v1w, v1b, v2w, v2b]
    }

    fn split_mut<'a>(&self, p: &'a mut [f64]) -> [&'a mut [f64]; 10] {
        let (n, s, e) = (self.agents, self.state, self.embed);
        let (a1w, r) = p.split_at_mut(n * e * s);
        let (a1b, r) = r.split_at_mut(n * e);
        let (b1w, r) = r.split_at_mut(e * s);
        let (b1b, r) = r.split_at_mut(e);
        let (a2w, r) = r.split_at_mut(e * s);
        let (a2b, r) = r.split_at_mut(e);
        let (v1w, r) = r.split_at_mut(e * s);
        let (v1b, r) = r.split_at_mut(e);
        let (v2w, v2b) = r.split_at_mut(e);
        [a1w, a1b, b1w, b1b, a2w, a2b, v1w, v1b, v2w, v2b]
    }

    pub fn forward(&self, params: &[f64], q: &[f64], state: &[f64]) -> f64 {
        let mut cache = MixerCache::default();
        self.forward_cached(params, q, state, &mut cache)
    }

    pub fn forward_cached(&self, params: &[f64], q: &[f64], state: &[f64], c: &mut MixerCache) -> f64 {
        assert_eq!(q.len(), self.agents, "mixer agent count");
        assert_eq!(state.len(), self.state, "mixer state width");
        assert_eq!(params.len(), self.num_params(), "mixer parameter count");
        let [a1w, a1b, b1w, b1b, a2w, a2b, v1w, v1b, v2w, v2b] = self.split(params);
        let (n, e) = (self.agents, self.embed);
        c.s.clear();
        c.s.extend_from_slice(state);
        c.q.clear();
        c.q.extend_from_slice(q);
        c.z1.resize(n * e, 0.0);
        affine(a1w, a1b, state, &mut c.z1);
        c.w1.clear();
        c.w1.extend(c.z1.iter().map(|z| z.abs()));
        c.pre.resize(e, 0.0);
        affine(b1w, b1b, state, &mut c.pre);
        for (i, &qi) in q.iter().enumerate() {
            if qi == 0.0 {
                continue;
            }
            for (p, &w) in c.pre.iter_mut().zip(&c.w1[i * e..(i + 1) * e]) {
                *p += qi * w;
            }
        }
        c.hidden.clear();
        c.hidden.extend(c.pre.iter().map(|&x| self.activation.apply(x)));
        c.z2.resize(e, 0.0);
        affine(a2w, a2b, state, &mut c.z2);
        c.w2.clear();
        c.w2.extend(c.z2.iter().map(|z| z.abs()));
        c.v_pre.resize(e, 0.0);
        affine(v1w, v1b, state, &mut c.v_pre);
        let v = v2b[0] + v2w.iter().zip(&c.v_pre).map(|(w, x)| w * relu(*x)).sum::<f64>();
        v + c.hidden.iter().zip(&c.w2).map(|(h, w)| h * w).sum::<f64>()
    }

    /// Adds d(loss)/d(params) to `grad` and writes d(loss)/d(q) into `dq`,
    /// given `g = d(loss)/d(Q_tot)`.
    pub fn backward(&self, params: &[f64], c: &MixerCache, g: f64, grad: &mut [f64], dq: &mut [f64]) {
        let v2w = self.split(params)[8];
        let [ga1w, ga1b, gb1w, gb1b, ga2w, ga2b, gv1w, gv1b, gv2w, gv2b] = self.split_mut(grad);
        let e = self.embed;
        // state value branch
        gv2b[0] += g;
        let mut dv = vec![0.0; e];
        for k in 0..e {
            let h = relu(c.v_pre[k]);
            gv2w[k] += g * h;
            if c.v_pre[k] > 0.0 {
                dv[k] = g * v2w[k];
            }
        }
        affine_backward(&c.s, &dv, gv1w, gv1b);
        // output weights
        let dz2: Vec<f64> = (0..e).map(|k| g * c.hidden[k] * abs_derivative(c.z2[k])).collect();
        affine_backward(&c.s, &dz2, ga2w, ga2b);
        // hidden layer
        let dpre: Vec<f64> = (0..e).map(|k| g * c.w2[k] * self.activation.derivative(c.pre[k])).collect();
        affine_backward(&c.s, &dpre, gb1w, gb1b);
        let mut dz1 = vec![0.0; self.agents * e];
        for (i, &qi) in c.q.iter().enumerate() {
            let row = &c.w1[i * e..(i + 1) * e];
            dq[i] = row.iter().zip(&dpre).map(|(w, d)| w * d).sum();
            for k in 0..e {
                dz1[i * e + k] = qi * dpre[k] * abs_derivative(c.z1[i * e + k]);
            }
        }
        affine_backward(&c.s, &dz1, ga1w, ga1b);
    }
}
