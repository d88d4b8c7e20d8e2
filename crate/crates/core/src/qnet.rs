//! Dense Q-network with hand-written backpropagation and an Adam optimizer.
//!
//! Parameters live in one flat vector. Each layer contributes its weight
//! matrix (`inputs x outputs`, row-major) followed by its bias vector. Hidden
//! layers come first, then the head: one output layer for the plain head, or
//! a value layer (1 output) followed by an advantage layer for the dueling
//! head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::ACTION_COUNT;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Plain,
    Dueling,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_width: usize,
    pub hidden: Vec<usize>,
    pub output_width: usize,
    pub head: Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    /// Offset of the weight block in the flat parameter vector.
    pub offset: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.inputs * self.outputs
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.outputs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.weight_len()
    }

    fn biases(&self) -> std::ops::Range<usize> {
        self.offset + self.weight_len()..self.offset + self.len()
    }
}

impl NetworkSpec {
    pub fn new(input_width: usize, hidden: Vec<usize>, output_width: usize, head: Head) -> Result<Self> {
        let spec = Self { input_width, hidden, output_width, head };
        spec.validate()?;
        Ok(spec)
    }

    /// Default topology for `mno_count` operators: four hidden layers of 128.
    pub fn for_mno(mno_count: usize, head: Head) -> Self {
        Self { input_width: 2 * mno_count + 3, hidden: vec![128; 4], output_width: ACTION_COUNT, head }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.output_width == 0 || self.hidden.contains(&0) {
            return Err(Error::Shape(format!("layer widths must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 2);
        let mut offset = 0;
        let mut push = |inputs: usize, outputs: usize| {
            let l = LayerShape { inputs, outputs, offset };
            offset += l.len();
            shapes.push(l);
        };
        let mut width = self.input_width;
        for &h in &self.hidden {
            push(width, h);
            width = h;
        }
        match self.head {
            Head::Plain => push(width, self.output_width),
            Head::Dueling => {
                push(width, 1);
                push(width, self.output_width);
            }
        }
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(LayerShape::len).sum()
    }

    fn feature_width(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_width)
    }
}

/// `c = a * b + beta * c`, where `a` is logically `m x k` and `b` is `k x n`.
/// `at`/`bt` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn matmul<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    at: bool,
    b: &[S],
    bt: bool,
    beta: S,
    c: &mut [S],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; `c` is a distinct mutable borrow.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork<S> {
    spec: NetworkSpec,
    layers: Vec<LayerShape>,
    params: Vec<S>,
}

/// Per-layer outputs kept for backpropagation.
struct Cache<S> {
    batch: usize,
    /// Input followed by every hidden activation.
    acts: Vec<Vec<S>>,
    q: Vec<S>,
}

/// Gradient of the TD loss, laid out like the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub values: Vec<S>,
    /// Loss at the evaluated point.
    pub loss: S,
}

impl<S: Scalar> Gradients<S> {
    pub fn max_abs(&self) -> S {
        self.values.iter().fold(S::zero(), |m, &g| m.max(g.abs()))
    }
}

/// Supervised batch for one gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch<S> {
    /// Row-major `len x input_width`.
    pub states: Vec<S>,
    pub actions: Vec<usize>,
    pub targets: Vec<S>,
}

impl<S> Minibatch<S> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Fan-in scaled uniform initialization bound: weights are drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

pub fn init_network<S: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<QNetwork<S>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec.layers();
    let mut params = vec![S::zero(); spec.parameter_count()];
    for l in &layers {
        let bound = init_bound(l.inputs);
        for w in &mut params[l.weights()] {
            *w = S::of(rng.random_range(-bound..bound));
        }
    }
    Ok(QNetwork { spec: spec.clone(), layers, params })
}

impl<S: Scalar> QNetwork<S> {
    pub fn from_params(spec: &NetworkSpec, params: Vec<S>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.parameter_count() {
            return Err(Error::Shape(format!(
                "{} parameters for a network of {}",
                params.len(),
                spec.parameter_count()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Self { spec: spec.clone(), layers: spec.layers(), params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn layer_shapes(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn layer_weights(&self, layer: usize) -> &[S] {
        &self.params[self.layers[layer].weights()]
    }

    pub fn layer_biases(&self, layer: usize) -> &[S] {
        &self.params[self.layers[layer].biases()]
    }

    pub fn layer_biases_mut(&mut self, layer: usize) -> &mut [S] {
        let r = self.layers[layer].biases();
        &mut self.params[r]
    }

    pub fn layer_weights_mut(&mut self, layer: usize) -> &mut [S] {
        let r = self.layers[layer].weights();
        &mut self.params[r]
    }

    fn affine(&self, l: &LayerShape, x: &[S], batch: usize) -> Vec<S> {
        let b = &self.params[l.biases()];
        let mut out = Vec::with_capacity(batch * l.outputs);
        for _ in 0..batch {
            out.extend_from_slice(b);
        }
        matmul(batch, l.inputs, l.outputs, x, false, &self.params[l.weights()], false, S::one(), &mut out);
        out
    }

    fn forward_cache(&self, states: &[S]) -> Result<Cache<S>> {
        let w = self.spec.input_width;
        if states.is_empty() || states.len() % w != 0 {
            return Err(Error::Shape(format!(
                "input of length {} is not a batch of width {w}",
                states.len()
            )));
        }
        let batch = states.len() / w;
        let hidden = self.spec.hidden.len();
        let mut acts = Vec::with_capacity(hidden + 1);
        acts.push(states.to_vec());
        for l in &self.layers[..hidden] {
            let mut h = self.affine(l, acts.last().expect("input present"), batch);
            for v in &mut h {
                *v = v.max(S::zero());
            }
            acts.push(h);
        }
        let feats = acts.last().expect("input present");
        let a = self.spec.output_width;
        let q = match self.spec.head {
            Head::Plain => self.affine(&self.layers[hidden], feats, batch),
            Head::Dueling => {
                let value = self.affine(&self.layers[hidden], feats, batch);
                let advantage = self.affine(&self.layers[hidden + 1], feats, batch);
                let inv = S::one() / S::of(a as f64);
                let mut q = Vec::with_capacity(batch * a);
                for (v, adv) in value.iter().zip(advantage.chunks_exact(a)) {
                    let mean = adv.iter().copied().sum::<S>() * inv;
                    q.extend(adv.iter().map(|&x| *v + x - mean));
                }
                q
            }
        };
        Ok(Cache { batch, acts, q })
    }

    /// Q-values of one encoded state.
    pub fn forward(&self, state: &[S]) -> Result<Vec<S>> {
        if state.len() != self.spec.input_width {
            return Err(Error::Shape(format!(
                "state width {} but network expects {}",
                state.len(),
                self.spec.input_width
            )));
        }
        Ok(self.forward_cache(state)?.q)
    }

    /// Q-values for a row-major batch of states; `batch x output_width`.
    pub fn forward_batch(&self, states: &[S]) -> Result<Vec<S>> {
        Ok(self.forward_cache(states)?.q)
    }

    fn check_batch(&self, batch: &Minibatch<S>) -> Result<()> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Shape("empty minibatch".into()));
        }
        if batch.targets.len() != n || batch.states.len() != n * self.spec.input_width {
            return Err(Error::Shape("minibatch fields disagree in length".into()));
        }
        if batch.actions.iter().any(|&a| a >= self.spec.output_width) {
            return Err(Error::Shape("action index out of range".into()));
        }
        if batch.states.iter().chain(&batch.targets).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite state or target".into()));
        }
        Ok(())
    }

    /// Mean squared TD error over the batch.
    pub fn td_loss(&self, batch: &Minibatch<S>) -> Result<S> {
        self.check_batch(batch)?;
        let q = self.forward_batch(&batch.states)?;
        Ok(self.loss_from_q(&q, batch))
    }

    fn loss_from_q(&self, q: &[S], batch: &Minibatch<S>) -> S {
        let a = self.spec.output_width;
        let sum: S = batch
            .actions
            .iter()
            .zip(&batch.targets)
            .enumerate()
            .map(|(i, (&act, &y))| {
                let d = q[i * a + act] - y;
                d * d
            })
            .sum();
        sum / S::of(batch.len() as f64)
    }

    /// Gradient of the mean squared TD error with respect to every parameter.
    pub fn td_grad(&self, batch: &Minibatch<S>) -> Result<Gradients<S>> {
        self.check_batch(batch)?;
        let cache = self.forward_cache(&batch.states)?;
        let n = cache.batch;
        let a = self.spec.output_width;
        let scale = S::of(2.0 / n as f64);
        let mut g_q = vec![S::zero(); n * a];
        for (i, (&act, &y)) in batch.actions.iter().zip(&batch.targets).enumerate() {
            g_q[i * a + act] = scale * (cache.q[i * a + act] - y);
        }
        let mut grads = vec![S::zero(); self.params.len()];
        let hidden = self.spec.hidden.len();
        let feats = &cache.acts[hidden];
        let fw = self.spec.feature_width();

        let mut delta = vec![S::zero(); n * fw];
        match self.spec.head {
            Head::Plain => {
                self.layer_backward(&self.layers[hidden], feats, &g_q, n, &mut grads, Some(&mut delta));
            }
            Head::Dueling => {
                let inv = S::one() / S::of(a as f64);
                let g_v: Vec<S> = g_q.chunks_exact(a).map(|r| r.iter().copied().sum()).collect();
                let mut g_adv = g_q.clone();
                for row in g_adv.chunks_exact_mut(a) {
                    let mean = row.iter().copied().sum::<S>() * inv;
                    for x in row {
                        *x = *x - mean;
                    }
                }
                let mut d_adv = vec![S::zero(); n * fw];
                self.layer_backward(&self.layers[hidden], feats, &g_v, n, &mut grads, Some(&mut delta));
                self.layer_backward(&self.layers[hidden + 1], feats, &g_adv, n, &mut grads, Some(&mut d_adv));
                for (d, x) in delta.iter_mut().zip(&d_adv) {
                    *d = *d + *x;
                }
            }
        }
        for li in (0..hidden).rev() {
            for (d, &h) in delta.iter_mut().zip(&cache.acts[li + 1]) {
                if h <= S::zero() {
                    *d = S::zero();
                }
            }
            let l = &self.layers[li];
            if li == 0 {
                self.layer_backward(l, &cache.acts[0], &delta, n, &mut grads, None);
            } else {
                let mut prev = vec![S::zero(); n * l.inputs];
                self.layer_backward(l, &cache.acts[li], &delta, n, &mut grads, Some(&mut prev));
                delta = prev;
            }
        }
        let loss = self.loss_from_q(&cache.q, batch);
        Ok(Gradients { values: grads, loss })
    }

    /// Accumulate weight and bias gradients of one affine layer and optionally
    /// propagate `delta` back to its input.
    fn layer_backward(
        &self,
        l: &LayerShape,
        input: &[S],
        delta: &[S],
        n: usize,
        grads: &mut [S],
        back: Option<&mut Vec<S>>,
    ) {
        matmul(l.inputs, n, l.outputs, input, true, delta, false, S::zero(), &mut grads[l.weights()]);
        let gb = &mut grads[l.biases()];
        for row in delta.chunks_exact(l.outputs) {
            for (g, &d) in gb.iter_mut().zip(row) {
                *g = *g + d;
            }
        }
        if let Some(out) = back {
            matmul(n, l.outputs, l.inputs, delta, false, &self.params[l.weights()], true, S::zero(), out);
        }
    }
}

/// Central finite-difference estimate of the TD-loss gradient.
pub fn finite_diff_grad<S: Scalar>(net: &QNetwork<S>, batch: &Minibatch<S>, h: S) -> Result<Gradients<S>> {
    if !(h > S::zero()) {
        return Err(Error::Domain("finite-difference step must be positive".into()));
    }
    let mut probe = net.clone();
    let loss = net.td_loss(batch)?;
    let mut values = Vec::with_capacity(net.params.len());
    for i in 0..net.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let plus = probe.td_loss(batch)?;
        probe.params[i] = orig - h;
        let minus = probe.td_loss(batch)?;
        probe.params[i] = orig;
        values.push((plus - minus) / (h + h));
    }
    Ok(Gradients { values, loss })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(net: &QNetwork<S>, learning_rate: f64, weight_decay: f64) -> Self {
        let n = net.params.len();
        Self {
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            step: 0,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn with_defaults(net: &QNetwork<S>) -> Self {
        Self::new(net, 1e-3, 1e-6)
    }
}

/// Subnormal moments are zeroed. Moments of inactive units otherwise decay
/// into the subnormal range, where arithmetic is very slow on common CPUs.
#[inline]
fn flush<S: Scalar>(x: S) -> S {
    if x.is_normal() {
        x
    } else {
        S::zero()
    }
}

/// One Adam step with decoupled weight decay.
pub fn adam_step<S: Scalar>(net: &mut QNetwork<S>, grads: &Gradients<S>, opt: &mut AdamState<S>) -> Result<()> {
    let n = net.params.len();
    if grads.values.len() != n || opt.m.len() != n || opt.v.len() != n {
        return Err(Error::Shape("optimizer, gradient and network sizes differ".into()));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = S::of(1.0 - opt.beta1.powi(t));
    let c2 = S::of(1.0 - opt.beta2.powi(t));
    let (b1, b2) = (S::of(opt.beta1), S::of(opt.beta2));
    let (ob1, ob2) = (S::one() - b1, S::one() - b2);
    let lr = S::of(opt.learning_rate);
    let decay = S::of(opt.learning_rate * opt.weight_decay);
    let eps = S::of(opt.epsilon);
    for (((p, &g), m), v) in net.params.iter_mut().zip(&grads.values).zip(&mut opt.m).zip(&mut opt.v) {
        *m = flush(b1 * *m + ob1 * g);
        *v = flush(b2 * *v + ob2 * g * g);
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - decay * *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `target <- tau * online + (1 - tau) * target`, elementwise.
pub fn soft_update<S: Scalar>(target: &mut QNetwork<S>, online: &QNetwork<S>, tau: S) -> Result<()> {
    if target.spec != online.spec {
        return Err(Error::Shape("soft update between different topologies".into()));
    }
    if !(tau >= S::zero() && tau <= S::one()) {
        return Err(Error::Domain(format!("tau {tau} outside [0, 1]")));
    }
    if tau == S::one() {
        target.params.copy_from_slice(&online.params);
    } else if tau > S::zero() {
        // Written as an increment so that equal networks stay bit-identical.
        for (t, &o) in target.params.iter_mut().zip(&online.params) {
            *t = *t + tau * (o - *t);
        }
    }
    Ok(())
}

/// On-disk network snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: serde::de::DeserializeOwned"))]
pub struct Checkpoint<S> {
    pub format: String,
    pub scalar: String,
    pub spec: NetworkSpec,
    pub layers: Vec<LayerParams<S>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_layers: Option<Vec<LayerParams<S>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamState<S>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<S> {
    pub weights: Vec<S>,
    pub biases: Vec<S>,
}

pub const CHECKPOINT_FORMAT: &str = "bandres-qnet/1";

fn split_layers<S: Scalar>(net: &QNetwork<S>) -> Vec<LayerParams<S>> {
    net.layers
        .iter()
        .map(|l| LayerParams {
            weights: net.params[l.weights()].to_vec(),
            biases: net.params[l.biases()].to_vec(),
        })
        .collect()
}

fn join_layers<S: Scalar>(spec: &NetworkSpec, layers: Vec<LayerParams<S>>) -> Result<QNetwork<S>> {
    let shapes = spec.layers();
    if shapes.len() != layers.len() {
        return Err(Error::Shape(format!("{} layers for a spec with {}", layers.len(), shapes.len())));
    }
    let mut params = Vec::with_capacity(spec.parameter_count());
    for (shape, l) in shapes.iter().zip(layers) {
        if l.weights.len() != shape.weight_len() || l.biases.len() != shape.outputs {
            return Err(Error::Shape("layer parameter arrays do not match the spec".into()));
        }
        params.extend(l.weights);
        params.extend(l.biases);
    }
    QNetwork::from_params(spec, params)
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(online: &QNetwork<S>, target: Option<&QNetwork<S>>, optimizer: Option<&AdamState<S>>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            scalar: S::NAME.into(),
            spec: online.spec.clone(),
            layers: split_layers(online),
            target_layers: target.map(split_layers),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Serde(format!("unknown checkpoint format `{}`", ck.format)));
        }
        if ck.scalar != S::NAME {
            return Err(Error::Serde(format!("checkpoint holds {} parameters, expected {}", ck.scalar, S::NAME)));
        }
        Ok(ck)
    }

    pub fn online(&self) -> Result<QNetwork<S>> {
        join_layers(&self.spec, self.layers.clone())
    }

    pub fn target(&self) -> Result<Option<QNetwork<S>>> {
        self.target_layers.clone().map(|l| join_layers(&self.spec, l)).transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(head: Head) -> NetworkSpec {
        NetworkSpec::new(3, vec![5, 4], 4, head).unwrap()
    }

    #[test]
    fn parameter_count_default_topology() {
        let spec = NetworkSpec::for_mno(4, Head::Plain);
        assert_eq!(spec.input_width, 11);
        let expected = 11 * 128 + 128 + 3 * (128 * 128 + 128) + 128 * 4 + 4;
        assert_eq!(expected, 51_588);
        assert_eq!(spec.parameter_count(), expected);
        let dueling = NetworkSpec::for_mno(4, Head::Dueling);
        assert_eq!(dueling.parameter_count(), expected + 129);
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let spec = small(Head::Plain);
        let a: QNetwork<f64> = init_network(&spec, 5).unwrap();
        let b: QNetwork<f64> = init_network(&spec, 5).unwrap();
        assert_eq!(a, b);
        for (i, l) in a.layer_shapes().iter().enumerate() {
            assert!(a.layer_biases(i).iter().all(|&x| x == 0.0));
            let bound = init_bound(l.inputs);
            assert!(a.layer_weights(i).iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn zero_weights_zero_output() {
        let spec = small(Head::Dueling);
        let net = QNetwork::<f64>::from_params(&spec, vec![0.0; spec.parameter_count()]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn forward_width_mismatch() {
        let net: QNetwork<f64> = init_network(&small(Head::Plain), 0).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_advantage_gives_value() {
        let spec = small(Head::Dueling);
        let mut net: QNetwork<f64> = init_network(&spec, 3).unwrap();
        let adv = spec.hidden.len() + 1;
        net.layer_weights_mut(adv).fill(0.0);
        net.layer_biases_mut(adv).fill(0.7);
        let q = net.forward(&[0.2, 0.4, 0.9]).unwrap();
        let v = {
            let mut vnet = net.clone();
            vnet.layer_biases_mut(adv).fill(0.0);
            vnet.forward(&[0.2, 0.4, 0.9]).unwrap()[0]
        };
        for x in q {
            assert!((x - v).abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_invariant_to_advantage_shift() {
        let spec = small(Head::Dueling);
        let net: QNetwork<f64> = init_network(&spec, 11).unwrap();
        let mut shifted = net.clone();
        let adv = spec.hidden.len() + 1;
        for b in shifted.layer_biases_mut(adv) {
            *b += 3.25;
        }
        let argmax = |q: Vec<f64>| {
            (0..q.len()).fold(0, |best, i| if q[i] > q[best] { i } else { best })
        };
        for s in [[0.1, 0.2, 0.3], [0.9, 0.0, 0.4], [0.5, 0.5, 0.5]] {
            assert_eq!(argmax(net.forward(&s).unwrap()), argmax(shifted.forward(&s).unwrap()));
        }
    }

    #[test]
    fn batch_matches_single() {
        let net: QNetwork<f64> = init_network(&small(Head::Plain), 1).unwrap();
        let states = [0.1, 0.2, 0.3, 0.9, 0.8, 0.7];
        let q = net.forward_batch(&states).unwrap();
        assert_eq!(&q[..4], net.forward(&states[..3]).unwrap().as_slice());
        assert_eq!(&q[4..], net.forward(&states[3..]).unwrap().as_slice());
    }

    fn batch_from(net: &QNetwork<f64>, states: Vec<f64>, actions: Vec<usize>, offset: f64) -> Minibatch<f64> {
        let q = net.forward_batch(&states).unwrap();
        let targets = actions.iter().enumerate().map(|(i, &a)| q[i * 4 + a] + offset).collect();
        Minibatch { states, actions, targets }
    }

    #[test]
    fn zero_error_zero_gradient() {
        let net: QNetwork<f64> = init_network(&small(Head::Dueling), 2).unwrap();
        let b = batch_from(&net, vec![0.3, 0.1, 0.7, 0.2, 0.9, 0.4], vec![1, 3], 0.0);
        let g = net.td_grad(&b).unwrap();
        assert!(g.max_abs() < 1e-15);
        assert!(g.loss < 1e-30);
    }

    #[test]
    fn single_sample_scalar_net() {
        // No hidden layers, one input, one output: Q = w x + b.
        let spec = NetworkSpec::new(1, vec![], 1, Head::Plain).unwrap();
        let net = QNetwork::<f64>::from_params(&spec, vec![1.5, 0.25]).unwrap();
        let b = Minibatch { states: vec![2.0], actions: vec![0], targets: vec![1.0] };
        let g = net.td_grad(&b).unwrap();
        let q = 1.5 * 2.0 + 0.25;
        assert!((g.values[0] - 2.0 * (q - 1.0) * 2.0).abs() < 1e-12);
        assert!((g.values[1] - 2.0 * (q - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn analytic_matches_finite_difference() {
        for head in [Head::Plain, Head::Dueling] {
            let net: QNetwork<f64> = init_network(&small(head), 9).unwrap();
            let b = batch_from(&net, vec![0.31, 0.12, 0.77, 0.25, 0.93, 0.41, 0.6, 0.5, 0.05], vec![0, 2, 3], 0.5);
            let g = net.td_grad(&b).unwrap();
            let fd = finite_diff_grad(&net, &b, 1e-6).unwrap();
            let scale = fd.max_abs().max(1e-12);
            for (a, n) in g.values.iter().zip(&fd.values) {
                assert!((a - n).abs() / scale < 1e-6, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn adam_zero_gradient_no_decay_is_identity() {
        let net0: QNetwork<f64> = init_network(&small(Head::Plain), 4).unwrap();
        let mut net = net0.clone();
        let mut opt = AdamState::new(&net, 1e-3, 0.0);
        let g = Gradients { values: vec![0.0; net.params().len()], loss: 0.0 };
        adam_step(&mut net, &g, &mut opt).unwrap();
        assert_eq!(net, net0);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_opposes_gradient() {
        let spec = NetworkSpec::new(1, vec![], 1, Head::Plain).unwrap();
        let mut net = QNetwork::<f64>::from_params(&spec, vec![1.0, 1.0]).unwrap();
        let mut opt = AdamState::with_defaults(&net);
        let g = Gradients { values: vec![0.5, -2.0], loss: 0.0 };
        let mut twin = (net.clone(), opt.clone());
        adam_step(&mut net, &g, &mut opt).unwrap();
        assert!(net.params()[0] < 1.0);
        assert!(net.params()[1] > 1.0);
        adam_step(&mut twin.0, &g, &mut twin.1).unwrap();
        assert_eq!(net, twin.0);
        assert_eq!(opt, twin.1);
    }

    #[test]
    fn soft_update_cases() {
        let spec = NetworkSpec::new(1, vec![], 1, Head::Plain).unwrap();
        let online = QNetwork::<f64>::from_params(&spec, vec![2.0, 2.0]).unwrap();
        let mut target = QNetwork::<f64>::from_params(&spec, vec![0.0, 0.0]).unwrap();
        soft_update(&mut target, &online, 0.25).unwrap();
        assert_eq!(target.params(), &[0.5, 0.5]);
        let before = target.clone();
        soft_update(&mut target, &online, 0.0).unwrap();
        assert_eq!(target, before);
        soft_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);
        let mut same = online.clone();
        soft_update(&mut same, &online, 0.37).unwrap();
        assert_eq!(same, online);
        let other: QNetwork<f64> = init_network(&small(Head::Plain), 0).unwrap();
        assert!(matches!(soft_update(&mut target, &other, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net: QNetwork<f64> = init_network(&small(Head::Dueling), 21).unwrap();
        let opt = AdamState::with_defaults(&net);
        let text = Checkpoint::new(&net, Some(&net), Some(&opt)).to_json().unwrap();
        let ck = Checkpoint::<f64>::from_json(&text).unwrap();
        let back = ck.online().unwrap();
        assert_eq!(back, net);
        let s = [0.3, 0.6, 0.9];
        assert_eq!(back.forward(&s).unwrap(), net.forward(&s).unwrap());
        assert_eq!(ck.optimizer.unwrap(), opt);
        assert!(Checkpoint::<f32>::from_json(&text).is_err());
    }

    #[test]
    fn single_precision_runs() {
        let net: QNetwork<f32> = init_network(&small(Head::Plain), 2).unwrap();
        let q = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(q.len(), 4);
    }
}
