//! Residual network parameters, forward and backward passes.

use std::sync::atomic::{AtomicU64, Ordering};

use super::config::{ConvBn, Layout, NetworkConfig, ParamKind, ParamSpec, UnitLayout};
use super::layers::{self, BnCache, ConvGeom};
use super::loss::softmax;
use super::tensor::Tensor;
use super::ModelError;
use crate::rng::{streams, SeededRng};

/// Batch-norm behavior for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Micro-batch statistics; running statistics are updated.
    Train,
    /// Running statistics; gradients treat them as constants.
    Eval,
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Owner {
    Conv { unit: usize, slot: usize },
    Bn { unit: usize, slot: usize },
    Head,
}

/// Location of a named feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Site {
    Conv { unit: usize, slot: usize },
    Unit(usize),
}

#[derive(Debug, Clone)]
struct ConvBnCache {
    input: Tensor,
    conv_out: Tensor,
    bn: BnCache,
    bn_out: Tensor,
}

#[derive(Debug, Clone)]
struct UnitCache {
    convs: Vec<ConvBnCache>,
    shortcut: Option<ConvBnCache>,
    /// Rectified output before max pooling, with argmax indices.
    pre_pool: Option<(Tensor, Vec<usize>)>,
    output: Tensor,
}

impl UnitCache {
    fn slot(&self, slot: usize) -> &ConvBnCache {
        if slot < self.convs.len() {
            &self.convs[slot]
        } else {
            self.shortcut.as_ref().expect("shortcut slot")
        }
    }
}

#[derive(Debug, Clone)]
struct HeadCache {
    input: Tensor,
    pooled: Tensor,
}

/// Everything backward and GradCAM need from a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    version: u64,
    mode: Mode,
    units: Vec<UnitCache>,
    head: HeadCache,
}

impl Cache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Logits plus the cache and the batch-norm statistics the pass observed.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Tensor,
    pub cache: Cache,
    /// `(parameter index, batch value)` for every running statistic.
    pub stats: Vec<(usize, Vec<f64>)>,
}

/// One gradient tensor per parameter, aligned with [`Network::specs`].
/// Running statistics get all-zero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            names: net.specs.iter().map(|s| s.name.clone()).collect(),
            tensors: net.specs.iter().map(|s| Tensor::zeros(s.shape.clone())).collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }

    fn add_to(&mut self, idx: usize, values: &[f64]) {
        for (x, y) in self.tensors[idx].data_mut().iter_mut().zip(values) {
            *x += y;
        }
    }
}

/// A residual network and its parameters.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    layout: Layout,
    specs: Vec<ParamSpec>,
    owners: Vec<Owner>,
    params: Vec<Tensor>,
    version: u64,
}

fn geom(cb: &ConvBn) -> ConvGeom {
    ConvGeom {
        in_c: cb.conv.in_c,
        out_c: cb.conv.out_c,
        kernel: cb.conv.kernel,
        stride: cb.conv.stride,
    }
}

fn unit_parts(u: &UnitLayout) -> (&[ConvBn], Option<&ConvBn>, bool, bool) {
    match u {
        UnitLayout::Stem { conv, max_pool } => (std::slice::from_ref(conv), None, false, *max_pool),
        UnitLayout::Block(b) => (
            &b.convs,
            b.shortcut.as_ref(),
            b.kind != super::config::BlockKind::Plain,
            false,
        ),
    }
}

fn unit_name(u: &UnitLayout) -> &str {
    match u {
        UnitLayout::Stem { .. } => "stem",
        UnitLayout::Block(b) => &b.name,
    }
}

fn apply_patch(name: &str, t: Tensor, patch: Option<(&str, &Tensor)>) -> Result<Tensor, ModelError> {
    match patch {
        Some((p, v)) if p == name => {
            if v.shape() != t.shape() {
                return Err(ModelError::Shape(format!(
                    "patch for `{name}` has shape {:?}, activation is {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
            Ok(v.clone())
        }
        _ => Ok(t),
    }
}

impl Network {
    /// He-uniform initialization (`U(±sqrt(6 / fan_in))`) for conv and dense
    /// weights; zero biases, unit gains, zero means and unit variances.
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self, ModelError> {
        let mut net = Self::zeros(cfg)?;
        let base = SeededRng::new(seed, streams::INIT);
        for (i, spec) in net.specs.iter().enumerate() {
            match spec.kind {
                ParamKind::ConvWeight | ParamKind::DenseWeight => {
                    let fan_in: usize = spec.shape[1..].iter().product();
                    net.params[i] = he_uniform(&spec.shape, fan_in, &mut base.child(i as u64));
                }
                ParamKind::BnGamma => net.params[i].data_mut().fill(1.0),
                _ => {}
            }
        }
        Ok(net)
    }

    /// All weights zero, running variances one.
    pub fn zeros(cfg: NetworkConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = cfg.layout();
        let specs = layout.specs.clone();
        let mut owners = vec![Owner::Head; specs.len()];
        for (u, unit) in layout.units.iter().enumerate() {
            let (convs, shortcut, _, _) = unit_parts(unit);
            let n = convs.len();
            for (slot, cb) in convs.iter().chain(shortcut).enumerate() {
                let slot = if slot < n { slot } else { n };
                owners[cb.conv.weight] = Owner::Conv { unit: u, slot };
                for idx in [cb.bn.gamma, cb.bn.beta, cb.bn.mean, cb.bn.var] {
                    owners[idx] = Owner::Bn { unit: u, slot };
                }
            }
        }
        let params = specs
            .iter()
            .map(|s| {
                let mut t = Tensor::zeros(s.shape.clone());
                if s.kind == ParamKind::BnRunningVar {
                    t.data_mut().fill(1.0);
                }
                t
            })
            .collect();
        Ok(Self {
            cfg,
            layout,
            specs,
            owners,
            params,
            version: fresh_version(),
        })
    }

    /// Builds a network from named tensors; every parameter must be present
    /// exactly once with the expected shape.
    pub fn from_named(cfg: NetworkConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let mut net = Self::zeros(cfg)?;
        let mut seen = vec![false; net.specs.len()];
        for (name, t) in named {
            let i = net
                .param_index(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if seen[i] {
                return Err(ModelError::Checkpoint(format!("tensor `{name}` appears twice")));
            }
            if t.shape() != net.specs[i].shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    net.specs[i].shape
                )));
            }
            if net.specs[i].kind == ParamKind::BnRunningVar && t.data().iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(ModelError::Checkpoint(format!("negative running variance in `{name}`")));
            }
            seen[i] = true;
            net.params[i] = t;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ModelError::Checkpoint(format!("missing tensor `{}`", net.specs[i].name)));
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_index(name).map(|i| &self.params[i])
    }

    /// Mutable parameter access. Invalidates caches from earlier passes.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.version = fresh_version();
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.params)
    }

    /// Name of the final block, the default GradCAM layer.
    pub fn default_cam_layer(&self) -> &str {
        unit_name(self.layout.units.last().expect("stem always present"))
    }

    /// Names of every feature map usable as a patch, capture or GradCAM layer.
    pub fn feature_map_names(&self) -> Vec<&str> {
        self.layout.feature_maps.iter().map(|(n, _)| n.as_str()).collect()
    }

    fn locate(&self, name: &str) -> Result<Site, ModelError> {
        for (u, unit) in self.layout.units.iter().enumerate() {
            if unit_name(unit) == name {
                return Ok(Site::Unit(u));
            }
            let (convs, shortcut, _, _) = unit_parts(unit);
            for (slot, cb) in convs.iter().chain(shortcut).enumerate() {
                if cb.conv.name == name {
                    return Ok(Site::Conv { unit: u, slot });
                }
            }
        }
        if name == "head" || name.starts_with(super::config::HEAD_PREFIX) {
            return Err(ModelError::NotConv(name.to_string()));
        }
        Err(ModelError::UnknownLayer(name.to_string()))
    }

    fn check_input(&self, input: &Tensor) -> Result<(), ModelError> {
        let i = self.cfg.input;
        let ok = input.shape().len() == 4
            && input.shape()[0] > 0
            && input.shape()[1..] == [i.channels, i.height, i.width];
        if ok {
            Ok(())
        } else {
            Err(ModelError::Shape(format!(
                "input shape {:?} does not match [n, {}, {}, {}]",
                input.shape(),
                i.channels,
                i.height,
                i.width
            )))
        }
    }

    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<ForwardPass, ModelError> {
        self.forward_patched(input, mode, None)
    }

    /// Forward pass that substitutes `patch.1` for the named feature map.
    pub fn forward_patched(&self, input: &Tensor, mode: Mode, patch: Option<(&str, &Tensor)>) -> Result<ForwardPass, ModelError> {
        self.check_input(input)?;
        if let Some((name, _)) = patch {
            self.locate(name)?;
        }
        let mut stats = Vec::new();
        let mut units = Vec::with_capacity(self.layout.units.len());
        let mut x = input.clone();
        for u in 0..self.layout.units.len() {
            let c = self.run_unit(u, Some(x), mode, patch, None, &mut stats)?;
            x = c.output.clone();
            units.push(c);
        }
        let (logits, head) = self.run_head(x);
        Ok(ForwardPass {
            logits,
            cache: Cache {
                version: self.version,
                mode,
                units,
                head,
            },
            stats,
        })
    }

    /// Train-mode forward that folds the observed batch statistics into the
    /// running averages.
    pub fn forward_train(&mut self, input: &Tensor) -> Result<(Tensor, Cache), ModelError> {
        let pass = self.forward(input, Mode::Train)?;
        self.apply_stats(&pass.stats);
        Ok((pass.logits, pass.cache))
    }

    pub fn apply_stats(&mut self, stats: &[(usize, Vec<f64>)]) {
        for (idx, v) in stats {
            layers::update_running(self.params[*idx].data_mut(), v);
        }
    }

    /// Eval-mode class probabilities, one row per sample.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, ModelError> {
        Ok(softmax(&self.forward(input, Mode::Eval)?.logits))
    }

    fn run_head(&self, input: Tensor) -> (Tensor, HeadCache) {
        let h = &self.layout.head;
        let pooled = layers::gap_forward(&input);
        let logits = layers::dense_forward(&pooled, self.params[h.weight].data(), self.params[h.bias].data());
        (logits, HeadCache { input, pooled })
    }

    fn conv_bn(
        &self,
        cb: &ConvBn,
        input: Tensor,
        conv_out: Option<Tensor>,
        mode: Mode,
        patch: Option<(&str, &Tensor)>,
        stats: &mut Vec<(usize, Vec<f64>)>,
    ) -> Result<ConvBnCache, ModelError> {
        let conv_out = conv_out.unwrap_or_else(|| layers::conv_forward(&input, self.params[cb.conv.weight].data(), geom(cb)));
        let conv_out = apply_patch(&cb.conv.name, conv_out, patch)?;
        let p = |i: usize| self.params[i].data();
        let (bn_out, bn) = match mode {
            Mode::Train => {
                let (y, c, (mean, var)) = layers::bn_forward_train(&conv_out, p(cb.bn.gamma), p(cb.bn.beta));
                stats.push((cb.bn.mean, mean));
                stats.push((cb.bn.var, var));
                (y, c)
            }
            Mode::Eval => layers::bn_forward_eval(&conv_out, p(cb.bn.gamma), p(cb.bn.beta), p(cb.bn.mean), p(cb.bn.var)),
        };
        Ok(ConvBnCache {
            input,
            conv_out,
            bn,
            bn_out,
        })
    }

    /// Runs one unit. With `resume = (slot, conv_out, previous cache)`, the
    /// slots before `slot` are reused from the previous cache and `conv_out`
    /// replaces the convolution at `slot`.
    fn run_unit(
        &self,
        u: usize,
        x: Option<Tensor>,
        mode: Mode,
        patch: Option<(&str, &Tensor)>,
        resume: Option<(usize, Tensor, &UnitCache)>,
        stats: &mut Vec<(usize, Vec<f64>)>,
    ) -> Result<UnitCache, ModelError> {
        let unit = &self.layout.units[u];
        let (convs, shortcut, residual, pool) = unit_parts(unit);
        let n = convs.len();
        let (rslot, mut rout, prev) = match resume {
            Some((s, t, p)) => (s, Some(t), Some(p)),
            None => (usize::MAX, None, None),
        };
        let unit_input = match (x, prev) {
            (Some(x), _) => x,
            (None, Some(p)) => p.convs[0].input.clone(),
            (None, None) => unreachable!("unit needs an input or a cache"),
        };
        let mut caches: Vec<ConvBnCache> = Vec::with_capacity(n);
        for (j, cb) in convs.iter().enumerate() {
            let reuse = prev.filter(|_| j < rslot);
            let c = match reuse {
                Some(p) => p.convs[j].clone(),
                None => {
                    let input = match caches.last() {
                        None => unit_input.clone(),
                        Some(c) => {
                            let mut h = c.bn_out.clone();
                            layers::relu_inplace(&mut h);
                            h
                        }
                    };
                    let given = if j == rslot { rout.take() } else { None };
                    self.conv_bn(cb, input, given, mode, patch, stats)?
                }
            };
            caches.push(c);
        }
        let short = match shortcut {
            None => None,
            Some(cb) => Some(match prev.filter(|_| rslot != n) {
                Some(p) => p.shortcut.clone().expect("shortcut cached"),
                None => self.conv_bn(cb, unit_input.clone(), rout.take(), mode, patch, stats)?,
            }),
        };
        let mut out = caches.last().expect("unit has a conv").bn_out.clone();
        if residual {
            let add = short.as_ref().map_or(&unit_input, |s| &s.bn_out);
            for (o, a) in out.data_mut().iter_mut().zip(add.data()) {
                *o += a;
            }
        }
        layers::relu_inplace(&mut out);
        let (pre_pool, output) = if pool {
            let (pooled, arg) = layers::maxpool_forward(&out);
            (Some((out, arg)), pooled)
        } else {
            (None, out)
        };
        let output = apply_patch(unit_name(unit), output, patch)?;
        Ok(UnitCache {
            convs: caches,
            shortcut: short,
            pre_pool,
            output,
        })
    }

    fn check_cache(&self, cache: &Cache) -> Result<(), ModelError> {
        if cache.version == self.version {
            Ok(())
        } else {
            Err(ModelError::StaleCache)
        }
    }

    fn finish_from(&self, cache: &Cache, u: usize, first: UnitCache) -> Result<Tensor, ModelError> {
        let mut stats = Vec::new();
        let mut x = first.output;
        for v in u + 1..self.layout.units.len() {
            x = self.run_unit(v, Some(x), cache.mode, None, None, &mut stats)?.output;
        }
        Ok(self.run_head(x).0)
    }

    /// Logits after changing one scalar parameter by `delta`, recomputing
    /// only what depends on it. The cache must come from a forward pass of
    /// this network; parameters are left unchanged.
    pub fn perturbed_logits(&mut self, cache: &Cache, param: usize, flat: usize, delta: f64) -> Result<Tensor, ModelError> {
        self.check_cache(cache)?;
        let owner = self.owners[param];
        let original = self.params[param].data()[flat];
        let result = match owner {
            Owner::Head => {
                self.params[param].data_mut()[flat] = original + delta;
                Ok(self.run_head(cache.units.last().expect("units").output.clone()).0)
            }
            Owner::Bn { unit, slot } => {
                self.params[param].data_mut()[flat] = original + delta;
                let conv_out = cache.units[unit].slot(slot).conv_out.clone();
                self.resume(cache, unit, slot, conv_out)
            }
            Owner::Conv { unit, slot } => {
                let uc = cache.units[unit].slot(slot);
                let mut conv_out = uc.conv_out.clone();
                let (convs, shortcut, _, _) = unit_parts(&self.layout.units[unit]);
                let cb = if slot < convs.len() { &convs[slot] } else { shortcut.expect("shortcut") };
                layers::conv_add_weight_delta(&uc.input, geom(cb), flat, delta, &mut conv_out);
                self.resume(cache, unit, slot, conv_out)
            }
        };
        self.params[param].data_mut()[flat] = original;
        result
    }

    fn resume(&self, cache: &Cache, unit: usize, slot: usize, conv_out: Tensor) -> Result<Tensor, ModelError> {
        let mut stats = Vec::new();
        let first = self.run_unit(unit, None, cache.mode, None, Some((slot, conv_out, &cache.units[unit])), &mut stats)?;
        self.finish_from(cache, unit, first)
    }

    /// Feature map recorded under `name` by the pass that built `cache`.
    pub fn activation<'c>(&self, cache: &'c Cache, name: &str) -> Result<&'c Tensor, ModelError> {
        Ok(match self.locate(name)? {
            Site::Unit(u) => &cache.units[u].output,
            Site::Conv { unit, slot } => &cache.units[unit].slot(slot).conv_out,
        })
    }

    pub fn backward(&self, cache: &Cache, dlogits: &Tensor) -> Result<Gradients, ModelError> {
        Ok(self.backward_inner(cache, dlogits, None)?.0)
    }

    /// Backward pass that also returns the gradient reaching feature map `layer`.
    pub fn backward_capture(&self, cache: &Cache, dlogits: &Tensor, layer: &str) -> Result<(Gradients, Tensor), ModelError> {
        let site = self.locate(layer)?;
        let (g, cap) = self.backward_inner(cache, dlogits, Some(site))?;
        Ok((g, cap.expect("capture site visited")))
    }

    fn backward_inner(&self, cache: &Cache, dlogits: &Tensor, capture: Option<Site>) -> Result<(Gradients, Option<Tensor>), ModelError> {
        self.check_cache(cache)?;
        let n = cache.head.pooled.shape()[0];
        if dlogits.shape() != [n, self.cfg.num_classes] {
            return Err(ModelError::Shape(format!(
                "dlogits shape {:?}, expected [{n}, {}]",
                dlogits.shape(),
                self.cfg.num_classes
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let h = &self.layout.head;
        let (dpooled, dw, db) = layers::dense_backward(&cache.head.pooled, self.params[h.weight].data(), dlogits);
        grads.add_to(h.weight, &dw);
        grads.add_to(h.bias, &db);
        let mut dy = layers::gap_backward(&dpooled, cache.head.input.shape());
        let mut captured = None;
        for u in (0..self.layout.units.len()).rev() {
            if capture == Some(Site::Unit(u)) {
                captured = Some(dy.clone());
            }
            dy = self.unit_backward(u, &cache.units[u], dy, u > 0, &mut grads, capture, &mut captured);
        }
        Ok((grads, captured))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn_backward(
        &self,
        cb: &ConvBn,
        c: &ConvBnCache,
        dy: &Tensor,
        need_dx: bool,
        grads: &mut Gradients,
        capture_here: bool,
        captured: &mut Option<Tensor>,
    ) -> Option<Tensor> {
        let (dconv, dgamma, dbeta) = layers::bn_backward(dy, &c.bn, self.params[cb.bn.gamma].data());
        grads.add_to(cb.bn.gamma, &dgamma);
        grads.add_to(cb.bn.beta, &dbeta);
        if capture_here {
            *captured = Some(dconv.clone());
        }
        let (dx, dw) = layers::conv_backward(&c.input, self.params[cb.conv.weight].data(), geom(cb), &dconv, need_dx);
        grads.add_to(cb.conv.weight, &dw);
        dx
    }

    #[allow(clippy::too_many_arguments)]
    fn unit_backward(
        &self,
        u: usize,
        c: &UnitCache,
        dy: Tensor,
        need_dx: bool,
        grads: &mut Gradients,
        capture: Option<Site>,
        captured: &mut Option<Tensor>,
    ) -> Tensor {
        let (convs, shortcut, residual, _) = unit_parts(&self.layout.units[u]);
        let n = convs.len();
        let at = |slot: usize| capture == Some(Site::Conv { unit: u, slot });
        let mut d = match &c.pre_pool {
            Some((pre, arg)) => {
                let mut d = layers::maxpool_backward(&dy, arg, pre.shape());
                layers::relu_backward_inplace(&mut d, pre);
                d
            }
            None => {
                let mut d = dy;
                layers::relu_backward_inplace(&mut d, &c.output);
                d
            }
        };
        let dres = residual.then(|| d.clone());
        for j in (0..n).rev() {
            if j + 1 < n {
                layers::relu_backward_inplace(&mut d, &c.convs[j + 1].input);
            }
            let want_dx = j > 0 || need_dx;
            match self.conv_bn_backward(&convs[j], &c.convs[j], &d, want_dx, grads, at(j), captured) {
                Some(dx) => d = dx,
                None => d = Tensor::zeros(c.convs[0].input.shape().to_vec()),
            }
        }
        if let Some(dres) = dres {
            match (shortcut, &c.shortcut) {
                (Some(cb), Some(sc)) => {
                    if let Some(dx) = self.conv_bn_backward(cb, sc, &dres, need_dx, grads, at(n), captured) {
                        for (a, b) in d.data_mut().iter_mut().zip(dx.data()) {
                            *a += b;
                        }
                    }
                }
                _ => {
                    for (a, b) in d.data_mut().iter_mut().zip(dres.data()) {
                        *a += b;
                    }
                }
            }
        }
        d
    }
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// He-uniform draw for a dense head `[classes, features]`.
pub(crate) fn init_dense(classes: usize, features: usize, seed: u64) -> Tensor {
    he_uniform(&[classes, features], features, &mut SeededRng::new(seed, streams::HEAD))
}

#[cfg(test)]
mod tests {
    use super::super::config::{BlockKind, InputDims, StageSpec, StemSpec};
    use super::super::loss::softmax_cross_entropy;
    use super::*;

    fn input(n: usize, c: usize, h: usize, seed: u64) -> Tensor {
        let mut r = SeededRng::new(seed, 0);
        Tensor::new(vec![n, c, h, h], (0..n * c * h * h).map(|_| r.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn dims(h: usize, c: usize) -> InputDims {
        InputDims {
            height: h,
            width: h,
            channels: c,
        }
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let net = Network::zeros(NetworkConfig::resnet_tiny(dims(8, 3), 4)).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let p = net.forward(&input(2, 3, 8, 1), mode).unwrap();
            assert!(p.logits.data().iter().all(|&v| v == 0.0));
            assert_eq!(p.logits.shape(), &[2, 4]);
        }
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let cfg = NetworkConfig {
            input: dims(6, 4),
            stem: StemSpec {
                kernel: 3,
                stride: 1,
                width: 4,
                max_pool: false,
            },
            stages: vec![StageSpec {
                block: BlockKind::Basic,
                blocks: 1,
                width: 4,
                stride: 1,
            }],
            num_classes: 2,
        };
        let mut net = Network::new(cfg, 3).unwrap();
        let gi = net.param_index("stage1.block0.bn2.gamma").unwrap();
        net.params_mut()[gi].data_mut().fill(0.0);
        let x = input(2, 4, 6, 4);
        let p = net.forward(&x, Mode::Eval).unwrap();
        let stem = net.activation(&p.cache, "stem").unwrap();
        let block = net.activation(&p.cache, "stage1.block0").unwrap();
        // Stem output is rectified, so relu(x + 0) == x.
        assert_eq!(stem, block);
    }

    #[test]
    fn zero_dlogits_give_zero_gradients() {
        let net = Network::new(NetworkConfig::resnet_toy(dims(8, 1), 3), 1).unwrap();
        let p = net.forward(&input(2, 1, 8, 2), Mode::Train).unwrap();
        let g = net.backward(&p.cache, &Tensor::zeros(vec![2, 3])).unwrap();
        assert!(g.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut net = Network::new(NetworkConfig::resnet_toy(dims(8, 1), 2), 1).unwrap();
        let p = net.forward(&input(1, 1, 8, 2), Mode::Train).unwrap();
        net.params_mut()[0].data_mut()[0] += 1.0;
        assert!(matches!(net.backward(&p.cache, &Tensor::zeros(vec![1, 2])), Err(ModelError::StaleCache)));
    }

    #[test]
    fn shape_and_layer_errors() {
        let net = Network::new(NetworkConfig::resnet_toy(dims(8, 1), 2), 1).unwrap();
        assert!(matches!(net.forward(&input(1, 3, 8, 0), Mode::Eval), Err(ModelError::Shape(_))));
        let p = net.forward(&input(1, 1, 8, 0), Mode::Eval).unwrap();
        assert!(matches!(net.activation(&p.cache, "head.fc"), Err(ModelError::NotConv(_))));
        assert!(matches!(net.activation(&p.cache, "stage9.block0"), Err(ModelError::UnknownLayer(_))));
        assert_eq!(net.default_cam_layer(), "stage2.block0");
    }

    #[test]
    fn perturbed_logits_match_full_recompute() {
        let mut net = Network::new(NetworkConfig::resnet_toy(dims(8, 2), 3), 5).unwrap();
        let x = input(2, 2, 8, 6);
        for mode in [Mode::Train, Mode::Eval] {
            let p = net.forward(&x, mode).unwrap();
            for idx in 0..net.specs().len() {
                let flat = net.params()[idx].numel() / 2;
                let fast = net.perturbed_logits(&p.cache, idx, flat, 0.01).unwrap();
                let mut other = net.clone();
                other.params_mut()[idx].data_mut()[flat] += 0.01;
                let slow = other.forward(&x, mode).unwrap().logits;
                for (a, b) in fast.data().iter().zip(slow.data()) {
                    assert!((a - b).abs() < 1e-10, "{} {mode:?}: {a} vs {b}", net.specs()[idx].name);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_toy_net() {
        let mut net = Network::new(NetworkConfig::resnet_toy(dims(6, 1), 3), 9).unwrap();
        let x = input(3, 1, 6, 10);
        let labels = [0, 2, 1];
        let p = net.forward(&x, Mode::Train).unwrap();
        let (_, dl) = softmax_cross_entropy(&p.logits, &labels).unwrap();
        let g = net.backward(&p.cache, &dl).unwrap();
        let h = 1e-5;
        for idx in 0..net.specs().len() {
            if !net.specs()[idx].kind.learnable() {
                continue;
            }
            for flat in 0..net.params()[idx].numel() {
                let lp = softmax_cross_entropy(&net.perturbed_logits(&p.cache, idx, flat, h).unwrap(), &labels).unwrap().0;
                let lm = softmax_cross_entropy(&net.perturbed_logits(&p.cache, idx, flat, -h).unwrap(), &labels).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let a = g.tensors()[idx].data()[flat];
                assert!(
                    (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-2),
                    "{}[{flat}]: {a} vs {fd}",
                    net.specs()[idx].name
                );
            }
        }
    }

    #[test]
    fn capture_matches_activation_finite_differences() {
        let net = Network::new(NetworkConfig::resnet_toy(dims(8, 1), 2), 2).unwrap();
        let x = input(1, 1, 8, 3);
        for layer in ["stage2.block0", "stage2.block0.conv2", "stage1.block0.shortcut.conv", "stem"] {
            let p = net.forward(&x, Mode::Eval).unwrap();
            let mut dl = Tensor::zeros(vec![1, 2]);
            dl.data_mut()[1] = 1.0;
            let (_, cap) = net.backward_capture(&p.cache, &dl, layer).unwrap();
            let a = net.activation(&p.cache, layer).unwrap().clone();
            for i in (0..a.numel()).step_by(7) {
                let h = 1e-6;
                let mut up = a.clone();
                up.data_mut()[i] += h;
                let mut dn = a.clone();
                dn.data_mut()[i] -= h;
                let fu = net.forward_patched(&x, Mode::Eval, Some((layer, &up))).unwrap().logits.data()[1];
                let fdn = net.forward_patched(&x, Mode::Eval, Some((layer, &dn))).unwrap().logits.data()[1];
                let fd = (fu - fdn) / (2.0 * h);
                let g = cap.data()[i];
                assert!((g - fd).abs() <= 1e-4 * g.abs().max(fd.abs()).max(1e-2), "{layer}[{i}] {g} vs {fd}");
            }
        }
    }

    #[test]
    fn running_stats_update_in_train_mode() {
        let mut net = Network::new(NetworkConfig::resnet_toy(dims(8, 1), 2), 1).unwrap();
        let before = net.param("stem.bn.running_mean").unwrap().clone();
        let v0 = net.param("stem.bn.running_var").unwrap().clone();
        net.forward_train(&input(4, 1, 8, 1)).unwrap();
        assert_ne!(net.param("stem.bn.running_mean").unwrap(), &before);
        assert!(net.param("stem.bn.running_var").unwrap().data().iter().all(|&v| v >= 0.0));
        assert_ne!(net.param("stem.bn.running_var").unwrap(), &v0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let net = Network::new(NetworkConfig::resnet_toy(dims(8, 3), 5), 4).unwrap();
        let probs = net.predict(&input(3, 3, 8, 9)).unwrap();
        for row in probs.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn stem_pooling_path_gradients() {
        let mut cfg = NetworkConfig::resnet_toy(dims(9, 1), 2);
        cfg.stem.max_pool = true;
        cfg.stem.kernel = 3;
        cfg.stem.stride = 1;
        let mut net = Network::new(cfg, 1).unwrap();
        let x = input(2, 1, 9, 11);
        let p = net.forward(&x, Mode::Train).unwrap();
        let (_, dl) = softmax_cross_entropy(&p.logits, &[0, 1]).unwrap();
        let g = net.backward(&p.cache, &dl).unwrap();
        let idx = net.param_index("stem.conv.weight").unwrap();
        for flat in 0..9 {
            let h = 1e-5;
            let lp = softmax_cross_entropy(&net.perturbed_logits(&p.cache, idx, flat, h).unwrap(), &[0, 1]).unwrap().0;
            let lm = softmax_cross_entropy(&net.perturbed_logits(&p.cache, idx, flat, -h).unwrap(), &[0, 1]).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let a = g.tensors()[idx].data()[flat];
            assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-2), "{a} vs {fd}");
        }
    }
}
