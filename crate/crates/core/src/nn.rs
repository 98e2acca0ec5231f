//! Named parameters, Adam, and the handful of layers the networks share.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

pub type Grads = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; every layer owns a unique prefix.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            !self.tensors.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes, and the exact bit patterns of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// How a network's parameters enter a tape.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Bind<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: false,
        }
    }

    pub fn var(&self, t: &mut Tape, name: &str) -> Var {
        t.param(self.store, name, self.trainable)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightInit {
    /// Unit-normal storage, scaled by `1/sqrt(fan_in)` at run time.
    Equalized,
    /// He-normal storage for leaky-ReLU slope 0.2, no run-time scale.
    Kaiming,
}

fn init_weight<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: WeightInit, rng: &mut R) -> (Tensor, f64) {
    let w = Tensor::randn(shape, rng);
    match init {
        WeightInit::Equalized => (w, 1.0 / (fan_in as f64).sqrt()),
        WeightInit::Kaiming => {
            let std = (2.0f64 / (1.0 + 0.2 * 0.2)).sqrt() / (fan_in as f64).sqrt();
            (w.map(|v| v * std), 1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub stride: usize,
    pub pad: usize,
    pub weight_gain: f64,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: WeightInit,
    ) -> Self {
        let (w, gain) = init_weight(&[cout, cin, kernel, kernel], cin * kernel * kernel, init, rng);
        let weight = format!("{name}.weight");
        store.insert(weight.clone(), w);
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            store.insert(b.clone(), Tensor::zeros(&[cout]));
            b
        });
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
            weight_gain: gain,
        }
    }

    /// Rebinds an existing layer's names without touching the store.
    pub fn named(name: &str, kernel: usize, stride: usize, bias: bool, init: WeightInit, fan_in: usize) -> Self {
        Self {
            weight: format!("{name}.weight"),
            bias: bias.then(|| format!("{name}.bias")),
            stride,
            pad: kernel / 2,
            weight_gain: match init {
                WeightInit::Equalized => 1.0 / (fan_in as f64).sqrt(),
                WeightInit::Kaiming => 1.0,
            },
        }
    }

    pub fn param_count(cin: usize, cout: usize, kernel: usize, bias: bool) -> usize {
        cout * cin * kernel * kernel + if bias { cout } else { 0 }
    }

    pub fn forward(&self, t: &mut Tape, p: Bind<'_>, x: Var) -> Var {
        let mut w = p.var(t, &self.weight);
        if self.weight_gain != 1.0 {
            w = t.scale(w, self.weight_gain);
        }
        let b = self.bias.as_ref().map(|b| p.var(t, b));
        t.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub weight_gain: f64,
}

impl Linear {
    /// Equalized-learning-rate dense layer with a constant bias initializer.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fin: usize,
        fout: usize,
        bias_init: f64,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(weight.clone(), Tensor::randn(&[fout, fin], rng));
        store.insert(bias.clone(), Tensor::full(&[fout], bias_init));
        Self {
            weight,
            bias,
            weight_gain: 1.0 / (fin as f64).sqrt(),
        }
    }

    pub fn param_count(fin: usize, fout: usize) -> usize {
        fin * fout + fout
    }

    pub fn forward(&self, t: &mut Tape, p: Bind<'_>, x: Var) -> Var {
        let w = p.var(t, &self.weight);
        let w = t.scale(w, self.weight_gain);
        let b = p.var(t, &self.bias);
        t.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter step counters, so parameters added mid-run
/// (progressive growth) get their own bias correction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    steps: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ParamStore, grads: &Grads) {
        for (name, g) in grads {
            let p = params.get_mut(name);
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(*t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(*t as i32);
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }

    pub fn moment(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    pub fn tracked(&self) -> impl Iterator<Item = &String> {
        self.first.keys()
    }
}
