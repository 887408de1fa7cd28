//! Gaussian actor-critic with small fully connected networks.

use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Elu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn slope(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    a + 1.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub action_dim: usize,
}

impl PolicySpec {
    /// Two hidden layers of 64.
    pub fn desk(action_dim: usize) -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            action_dim,
        }
    }

    /// Three hidden layers of 256.
    pub fn full_scale(action_dim: usize) -> Self {
        Self {
            hidden: vec![256, 256, 256],
            activation: Activation::Elu,
            action_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|w| *w == 0) || self.action_dim == 0 {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        Ok(())
    }
}

/// Dense layer; weights are column-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn w(&self) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.weights, self.outputs, self.inputs)
    }

    fn affine(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = self.w() * x;
        for mut col in z.column_iter_mut() {
            for (v, b) in col.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        z
    }

    fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

/// Inputs and outputs of every layer from a forward pass.
pub struct Tape {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl Mlp {
    pub fn new<R: Rng>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        Self {
            activation,
            layers: sizes
                .windows(2)
                .map(|w| Layer::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    /// Forward pass over a batch stored column-wise.
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_tape(x).0
    }

    pub fn forward_tape(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Tape) {
        let last = self.layers.len() - 1;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
        };
        let mut a = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&a);
            tape.inputs.push(a);
            if l == last {
                return (z, tape);
            }
            a = z.map(|v| self.activation.apply(v));
            tape.pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Gradient of `sum(dout .* output)` with respect to the parameters, flattened
    /// in [`Mlp::params`] order.
    pub fn backward(&self, tape: &Tape, dout: &DMatrix<f64>) -> Vec<f64> {
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        let mut delta = dout.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let x = &tape.inputs[l];
            let gw = &delta * x.transpose();
            let gb: Vec<f64> = delta.row_iter().map(|r| r.sum()).collect();
            let mut g = gw.as_slice().to_vec();
            g.extend(gb);
            grads[l] = g;
            if l > 0 {
                let back = layer.w().transpose() * &delta;
                let z = &tape.pre[l - 1];
                let a = x;
                delta = DMatrix::from_fn(back.nrows(), back.ncols(), |i, j| {
                    back[(i, j)] * self.activation.slope(z[(i, j)], a[(i, j)])
                });
            }
        }
        grads.concat()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
    }

    fn check(&self) -> Result<()> {
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].outputs != w[1].inputs {
                return Err(Error::Format(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    w[0].outputs,
                    i + 1,
                    w[1].inputs
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Format(format!("layer {i} has inconsistent shapes")));
            }
        }
        if self.layers.is_empty() {
            return Err(Error::Format("network without layers".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub version: u32,
    pub spec: PolicySpec,
    pub obs_dim: usize,
    pub actor: Mlp,
    pub critic: Mlp,
    /// Log standard deviation of the action noise, per action.
    pub log_std: Vec<f64>,
}

/// Scale applied to the initial actor output weights.
pub const ACTOR_OUTPUT_GAIN: f64 = 0.01;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

impl ActorCritic {
    pub fn new<R: Rng>(spec: &PolicySpec, obs_dim: usize, init_std: f64, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        if !(init_std > 0.0) {
            return Err(Error::Config(format!("initial action std must be positive, got {init_std}")));
        }
        let sizes = |out: usize| {
            let mut s = vec![obs_dim];
            s.extend(&spec.hidden);
            s.push(out);
            s
        };
        let mut actor = Mlp::new(&sizes(spec.action_dim), spec.activation, rng);
        // Near-zero initial means keep early actions close to the nominal pose.
        if let Some(out) = actor.layers.last_mut() {
            out.weights.iter_mut().for_each(|w| *w *= ACTOR_OUTPUT_GAIN);
        }
        let critic = Mlp::new(&sizes(1), spec.activation, rng);
        Ok(Self {
            version: CHECKPOINT_VERSION,
            spec: spec.clone(),
            obs_dim,
            actor,
            critic,
            log_std: vec![init_std.ln(); spec.action_dim],
        })
    }

    pub fn action_dim(&self) -> usize {
        self.spec.action_dim
    }

    /// Action means for a batch of observations stored column-wise.
    pub fn mean(&self, obs: &DMatrix<f64>) -> DMatrix<f64> {
        self.actor.forward(obs)
    }

    pub fn value(&self, obs: &DMatrix<f64>) -> DVector<f64> {
        let v = self.critic.forward(obs);
        DVector::from_iterator(v.ncols(), v.iter().copied())
    }

    pub fn act_mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.obs_dim {
            return Err(Error::shape("policy observation", self.obs_dim, obs.len()));
        }
        let x = DMatrix::from_column_slice(obs.len(), 1, obs);
        Ok(self.mean(&x).as_slice().to_vec())
    }

    /// Samples `mean + std * noise` and returns the action with its log density.
    pub fn sample<R: Rng>(&self, mean: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
        let a: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let e: f64 = StandardNormal.sample(rng);
                m + ls.exp() * e
            })
            .collect();
        let lp = self.log_prob(mean, &a);
        (a, lp)
    }

    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        mean.iter()
            .zip(action)
            .zip(&self.log_std)
            .map(|((m, a), ls)| {
                let z = (a - m) / ls.exp();
                -0.5 * z * z - ls - 0.5 * LOG_2PI
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 * (LOG_2PI + 1.0)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.actor.check()?;
        self.critic.check()?;
        if self.actor.input_dim() != self.obs_dim || self.critic.input_dim() != self.obs_dim {
            return Err(Error::Format("network inputs differ from the observation width".into()));
        }
        if self.actor.output_dim() != self.spec.action_dim
            || self.log_std.len() != self.spec.action_dim
            || self.critic.output_dim() != 1
        {
            return Err(Error::Format("network outputs differ from the policy spec".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.actor.params().iter().all(|v| v.is_finite())
            && self.critic.params().iter().all(|v| v.is_finite())
            && self.log_std.iter().all(|v| v.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Self = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Scales `grad` down to at most `max_norm` in Euclidean norm.
pub fn clip_grad(grad: &mut [f64], max_norm: f64) {
    let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Elu] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut net = Mlp::new(&[4, 5, 3, 2], act, &mut rng);
            let x = DMatrix::from_fn(4, 3, |i, j| (i as f64 - 1.5) * 0.4 + j as f64 * 0.3 - 0.2);
            let w = DMatrix::from_fn(2, 3, |i, j| 1.0 + i as f64 - 0.5 * j as f64);
            let (_, tape) = net.forward_tape(&x);
            let g = net.backward(&tape, &w);
            let p = net.params();
            let h = 1e-6;
            for k in 0..p.len() {
                let mut pp = p.clone();
                pp[k] += h;
                net.set_params(&pp);
                let fp = net.forward(&x).component_mul(&w).sum();
                pp[k] -= 2.0 * h;
                net.set_params(&pp);
                let fm = net.forward(&x).component_mul(&w).sum();
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{act:?} param {k}: {fd} vs {}", g[k]);
            }
            net.set_params(&p);
        }
    }

    #[test]
    fn log_prob_of_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ac = ActorCritic::new(&PolicySpec::desk(2), 3, 0.5, &mut rng).unwrap();
        let lp = ac.log_prob(&[0.1, 0.2], &[0.1, 0.2]);
        let expect = 2.0 * (-(0.5_f64).ln() - 0.5 * LOG_2PI);
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ac = ActorCritic::new(&PolicySpec::desk(6), 42, 0.3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        ac.save(&path).unwrap();
        assert_eq!(ActorCritic::load(&path).unwrap(), ac);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }
}
