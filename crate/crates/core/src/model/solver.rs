//! Step-decay SGD with momentum, weight decay and per-layer multipliers.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use super::tensor::Tensor;
use super::ModelError;

/// Solver hyperparameters. Field names follow the usual solver-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub gamma: f64,
    /// Images per micro-batch.
    pub batch_size: usize,
    /// Micro-iterations to run.
    pub max_iter: usize,
    /// Validation batches per evaluation.
    pub test_iter: usize,
    /// Micro-iterations between evaluations.
    pub test_interval: usize,
    /// Micro-iterations between learning-rate decays.
    pub stepsize: usize,
    /// Micro-batches whose gradients are averaged per update.
    pub iter_size: usize,
    /// Learning-rate multipliers keyed by parameter-name prefix; the longest
    /// matching prefix wins over the built-in default.
    #[serde(default)]
    pub lr_mult: BTreeMap<String, f64>,
}

impl SolverConfig {
    /// Base learning rate 0.01, weight decay 1e-5, momentum 0.9, gamma 0.1,
    /// batch 5, 176,180 iterations, 22,023 test iterations every 2,000,
    /// decay every 17,618, gradients accumulated over 12 micro-batches.
    pub fn paper() -> Self {
        Self {
            base_lr: 0.01,
            weight_decay: 0.00001,
            momentum: 0.9,
            gamma: 0.1,
            batch_size: 5,
            max_iter: 176_180,
            test_iter: 22_023,
            test_interval: 2_000,
            stepsize: 17_618,
            iter_size: 12,
            lr_mult: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Solver(m));
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("iter_size", self.iter_size),
            ("stepsize", self.stepsize),
            ("test_interval", self.test_interval),
            ("test_iter", self.test_iter),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.max_iter > 0 && self.stepsize > self.max_iter {
            return bad(format!("stepsize {} exceeds max_iter {}", self.stepsize, self.max_iter));
        }
        for (k, v) in &self.lr_mult {
            if !(v.is_finite() && *v >= 0.0) {
                return bad(format!("lr_mult.{k} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// `base_lr · gamma^⌊iter / stepsize⌋`, with the power applied as repeated
    /// multiplication so decayed rates land on the same doubles as their
    /// decimal literals.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let steps = iter / self.stepsize.max(1);
        let mut lr = self.base_lr;
        for _ in 0..steps {
            lr *= self.gamma;
            if lr == 0.0 {
                break;
            }
        }
        lr
    }

    /// Multiplier for `name`: longest matching override prefix, else `default`.
    pub fn lr_mult_for(&self, name: &str, default: f64) -> f64 {
        self.lr_mult
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(default, |(_, v)| *v)
    }

    /// Parses `key: value` lines; `#` starts a comment. Every table key is
    /// required; `lr_mult.<prefix>: value` lines add overrides.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut fields: BTreeMap<String, String> = BTreeMap::new();
        let mut lr_mult = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| ModelError::Solver(format!("line {}: expected `key: value`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim().trim_matches('"'));
            if let Some(prefix) = k.strip_prefix("lr_mult.") {
                let m: f64 = v
                    .parse()
                    .map_err(|_| ModelError::Solver(format!("line {}: bad multiplier `{v}`", lineno + 1)))?;
                lr_mult.insert(prefix.to_string(), m);
                continue;
            }
            if k == "lr_policy" {
                if v != "step" {
                    return Err(ModelError::Solver(format!("unsupported lr_policy `{v}` (only `step`)")));
                }
                continue;
            }
            if fields.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ModelError::Solver(format!("duplicate key `{k}`")));
            }
        }
        let mut take = |k: &str| {
            fields
                .remove(k)
                .ok_or_else(|| ModelError::Solver(format!("missing key `{k}`")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T, ModelError> {
            v.parse().map_err(|_| ModelError::Solver(format!("bad value `{v}` for `{k}`")))
        }
        let cfg = Self {
            base_lr: num("base_lr", take("base_lr")?)?,
            weight_decay: num("weight_decay", take("weight_decay")?)?,
            momentum: num("momentum", take("momentum")?)?,
            gamma: num("gamma", take("gamma")?)?,
            batch_size: num("batch_size", take("batch_size")?)?,
            max_iter: num("max_iter", take("max_iter")?)?,
            test_iter: num("test_iter", take("test_iter")?)?,
            test_interval: num("test_interval", take("test_interval")?)?,
            stepsize: num("stepsize", take("stepsize")?)?,
            iter_size: num("iter_size", take("iter_size")?)?,
            lr_mult,
        };
        if let Some(k) = fields.keys().next() {
            return Err(ModelError::Solver(format!("unknown key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "base_lr: {}", self.base_lr);
        let _ = writeln!(s, "weight_decay: {}", self.weight_decay);
        let _ = writeln!(s, "momentum: {}", self.momentum);
        let _ = writeln!(s, "gamma: {}", self.gamma);
        let _ = writeln!(s, "batch_size: {}", self.batch_size);
        let _ = writeln!(s, "max_iter: {}", self.max_iter);
        let _ = writeln!(s, "test_iter: {}", self.test_iter);
        let _ = writeln!(s, "test_interval: {}", self.test_interval);
        let _ = writeln!(s, "stepsize: {}", self.stepsize);
        let _ = writeln!(s, "iter_size: {}", self.iter_size);
        for (k, v) in &self.lr_mult {
            let _ = writeln!(s, "lr_mult.{k}: {v}");
        }
        s
    }
}

/// One momentum buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub momentum: Vec<Tensor>,
}

impl SolverState {
    pub fn new(net: &Network) -> Self {
        Self {
            momentum: net.specs().iter().map(|s| Tensor::zeros(s.shape.clone())).collect(),
        }
    }
}

/// `v ← μ·v + lr·(g + λ·p); p ← p − v`, element-wise.
pub fn momentum_step(p: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64, decay: f64) {
    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v + lr * (g + decay * *p);
        *p -= *v;
    }
}

/// Applies one update at iteration `iter`. Nothing is modified when any
/// gradient is non-finite.
pub fn sgd_update(net: &mut Network, grads: &Gradients, state: &mut SolverState, s: &SolverConfig, iter: usize) -> Result<(), ModelError> {
    if grads.tensors().len() != net.specs().len() || state.momentum.len() != net.specs().len() {
        return Err(ModelError::Shape("gradient or momentum count does not match parameters".into()));
    }
    for (spec, g) in net.specs().iter().zip(grads.tensors()) {
        if g.shape() != spec.shape.as_slice() {
            return Err(ModelError::Shape(format!("gradient for `{}` has shape {:?}", spec.name, g.shape())));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteGradient(spec.name.clone()));
        }
    }
    let lr = s.lr_at(iter);
    let plan: Vec<(bool, f64, f64)> = net
        .specs()
        .iter()
        .map(|spec| {
            let decay = if spec.kind.decays() { s.weight_decay } else { 0.0 };
            (spec.kind.learnable(), lr * s.lr_mult_for(&spec.name, spec.default_lr_mult), decay)
        })
        .collect();
    for (i, p) in net.params_mut().iter_mut().enumerate() {
        let (learnable, eff, decay) = plan[i];
        if learnable {
            momentum_step(p.data_mut(), state.momentum[i].data_mut(), grads.tensors()[i].data(), eff, s.momentum, decay);
        }
    }
    Ok(())
}
