//! Parameters, parameter stores and small building-block layers.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named, optionally-trainable tensor slot.
pub struct Param {
    id: u64,
    name: String,
    value: RefCell<Tensor>,
    trainable: Cell<bool>,
}

impl Param {
    fn new(name: &str, value: Tensor) -> Rc<Self> {
        Rc::new(Self {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.to_string(),
            value: RefCell::new(value),
            trainable: Cell::new(true),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Tensor {
        self.value.borrow().clone()
    }

    pub fn set_value(&self, t: Tensor) {
        assert_eq!(
            self.value.borrow().shape(),
            t.shape(),
            "shape change on param {}",
            self.name
        );
        *self.value.borrow_mut() = t;
    }

    pub fn trainable(&self) -> bool {
        self.trainable.get()
    }

    pub fn set_trainable(&self, v: bool) {
        self.trainable.set(v);
    }

    pub fn numel(&self) -> usize {
        self.value.borrow().numel()
    }
}

/// Ordered registry of parameters; iteration order is insertion order, which
/// keeps optimizer updates and checkpoint layouts deterministic.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Rc<Param>>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Rc<Param> {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let p = Param::new(name, value);
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Rc::clone(&p));
        p
    }

    pub fn get(&self, name: &str) -> Option<&Rc<Param>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rc<Param>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// FNV-1a over the byte representation of every parameter, in order.
    /// Used for freeze contracts and checkpoint identity.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            for b in p.name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            let v = p.value.borrow();
            for x in v.data() {
                for b in x.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Hash restricted to parameters matching a predicate (e.g. frozen ones).
    pub fn content_hash_where(&self, pred: impl Fn(&Param) -> bool) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.params.iter().filter(|p| pred(p)) {
            for b in p.name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            let v = p.value.borrow();
            for x in v.data() {
                for b in x.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn state_dict(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value()))
            .collect()
    }

    pub fn load_state_dict(&self, entries: &[(String, Tensor)]) -> Result<(), String> {
        let given: HashMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &self.params {
            match given.get(p.name.as_str()) {
                Some(t) => {
                    if t.shape() != p.value.borrow().shape() {
                        return Err(format!(
                            "param {}: shape {:?} != expected {:?}",
                            p.name,
                            t.shape(),
                            p.value.borrow().shape()
                        ));
                    }
                    p.set_value((*t).clone());
                }
                None => return Err(format!("missing param {}", p.name)),
            }
        }
        Ok(())
    }

    /// Freeze/unfreeze all parameters whose name starts with `prefix`.
    pub fn set_trainable_prefix(&self, prefix: &str, trainable: bool) {
        for p in &self.params {
            if p.name.starts_with(prefix) {
                p.set_trainable(trainable);
            }
        }
    }
}

// -- init helpers ------------------------------------------------------------

/// Deterministic splitmix64 generator. Self-contained so that random streams
/// (parameter init, data synthesis, noise draws) never shift underneath
/// checkpoints when unrelated dependencies change.
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed ^ 0x9e3779b97f4a7c15,
        }
    }

    /// Derive an independent stream for sub-task `index`.
    pub fn derive(seed: u64, index: u64) -> Self {
        let mut r = Self::new(seed ^ index.wrapping_mul(0xd1342543de82ef95));
        r.next_u64();
        r
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u64 << 24) as f32
    }

    pub fn range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn coin(&mut self, p: f32) -> bool {
        self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f32 {
        let u1 = (self.uniform() as f64).max(1e-12);
        let u2 = self.uniform() as f64;
        ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
    }
}

pub fn normal_init(rng: &mut SplitMix64, shape: &[usize], std: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() * std)
}

pub fn kaiming_init(rng: &mut SplitMix64, shape: &[usize], fan_in: usize) -> Tensor {
    normal_init(rng, shape, (2.0 / fan_in as f32).sqrt())
}

pub fn xavier_init(rng: &mut SplitMix64, shape: &[usize], fan_in: usize) -> Tensor {
    normal_init(rng, shape, (1.0 / fan_in as f32).sqrt())
}

// -- layers ------------------------------------------------------------------

/// Fully-connected layer, weight stored `[out, in]`.
pub struct Linear {
    pub weight: Rc<Param>,
    pub bias: Rc<Param>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let weight = store.register(
            &format!("{name}.weight"),
            xavier_init(rng, &[out_dim, in_dim], in_dim),
        );
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self { weight, bias }
    }

    /// Registered with explicit (e.g. zero) initial weights.
    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        bias: Tensor,
    ) -> Self {
        let weight = store.register(&format!("{name}.weight"), weight);
        let bias = store.register(&format!("{name}.bias"), bias);
        Self { weight, bias }
    }

    /// `x[M, in] -> [M, out]`.
    pub fn forward(&self, tape: &Tape, x: &Var) -> Var {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        x.matmul(&w, false, true).add_row(&b)
    }
}

/// 2D convolution layer.
pub struct Conv2d {
    pub weight: Rc<Param>,
    pub bias: Rc<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let weight = store.register(
            &format!("{name}.weight"),
            kaiming_init(rng, &[out_ch, in_ch, k, k], fan_in),
        );
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// Zero-initialized 1x1 projection (conditioning branch output ports).
    pub fn zero_1x1(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Self {
        let weight = store.register(
            &format!("{name}.weight"),
            Tensor::zeros(&[out_ch, in_ch, 1, 1]),
        );
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            stride: 1,
            pad: 0,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Var {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        x.conv2d(&w, &b, self.stride, self.pad)
    }
}

/// LayerNorm with learned affine.
pub struct LayerNorm {
    pub gamma: Rc<Param>,
    pub beta: Rc<Param>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.register(&format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.register(&format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Var {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        x.layer_norm(&g, &b, self.eps)
    }
}

/// GroupNorm with learned per-channel affine.
pub struct GroupNorm {
    pub gamma: Rc<Param>,
    pub beta: Rc<Param>,
    pub groups: usize,
    pub eps: f32,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: store.register(&format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.register(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Var {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        x.group_norm(self.groups, &g, &b, self.eps)
    }
}
