//! A small multilayer perceptron with hand-written backpropagation and
//! SGD with momentum.
//!
//! Hidden layers use ReLU, the output layer is linear and produces logits.
//! Given a seed, initialization, shuffling and therefore the whole training
//! run are bit-reproducible.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Group};
use crate::error::{Error, Result};
use crate::losses::{ClassStats, LossConfig, Objective};

/// One dense layer; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Parameter gradients, shaped like the network.
pub type Gradients = Mlp;

/// Momentum buffers, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(Mlp);

impl Velocity {
    pub fn zeros(params: &Mlp) -> Self {
        Velocity(params.zeros_like())
    }
}

/// Activations kept by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (the batch itself for layer 0).
    inputs: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 20,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

impl Mlp {
    /// Uniform `±sqrt(6 / fan_in)` weights, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config(format!(
                "an MLP needs at least input and output sizes, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::config(format!("zero-width layer in {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let weight =
                    Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(&mut rng));
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// `[input, hidden.., output]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weight.ncols()];
        dims.extend(self.layers.iter().map(|l| l.weight.nrows()));
        dims
    }

    pub fn num_outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        let expected = self.layers[0].weight.ncols();
        if x.ncols() != expected {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {expected}",
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Logits (`batch × K`) and the cache needed by [`Mlp::backward`].
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = current.dot(&layer.weight.t());
            out += &layer.bias;
            if i < last {
                out.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut current, out));
        }
        Ok((current, ForwardCache { inputs }))
    }

    /// Logits only.
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward(x).map(|(z, _)| z)
    }

    /// Reverse-mode pass given `∂L/∂logits` for every sample of the batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: ArrayView2<f64>,
    ) -> Result<Gradients> {
        let batch = cache.inputs[0].nrows();
        if grad_logits.dim() != (batch, self.num_outputs()) {
            return Err(Error::Shape(format!(
                "logit gradient of shape {:?} for batch {batch} and {} outputs",
                grad_logits.dim(),
                self.num_outputs()
            )));
        }
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let weight = delta.t().dot(input);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&layer.weight);
                // The stored input is the ReLU output of the previous layer;
                // it is positive exactly where the pre-activation was.
                back.zip_mut_with(input, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
            grads.push(Layer { weight, bias });
        }
        grads.reverse();
        Ok(Mlp { layers: grads })
    }

    /// Argmax of the logits, first index on ties.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok(z.rows()
            .into_iter()
            .map(|row| argmax(row.iter().copied()))
            .collect())
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// `v ← μ v − η (g + λ w)`, `w ← w + v`. Biases are not decayed.
pub fn sgd_step(params: &mut Mlp, grads: &Gradients, velocity: &mut Velocity, cfg: &SgdConfig) {
    let (lr, mu, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    for ((layer, grad), vel) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut velocity.0.layers)
    {
        ndarray::Zip::from(&mut layer.weight)
            .and(&grad.weight)
            .and(&mut vel.weight)
            .for_each(|w, &g, v| {
                *v = mu * *v - lr * (g + wd * *w);
                *w += *v;
            });
        ndarray::Zip::from(&mut layer.bias)
            .and(&grad.bias)
            .and(&mut vel.bias)
            .for_each(|b, &g, v| {
                *v = mu * *v - lr * g;
                *b += *v;
            });
    }
}

/// Mean loss and parameter gradients for one batch.
pub fn batch_gradients(
    params: &Mlp,
    objective: &Objective<'_>,
    x: ArrayView2<f64>,
    targets: &[usize],
) -> Result<(f64, Gradients)> {
    let (logits, cache) = params.forward(x)?;
    let logits = logits.as_standard_layout().into_owned();
    let mut grad = Array2::zeros(logits.raw_dim());
    let loss = objective.batch_into(
        logits.as_slice().expect("standard layout"),
        targets,
        grad.as_slice_mut().expect("standard layout"),
    )?;
    let grads = params.backward(&cache, grad.view())?;
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Mlp,
    /// Mean training loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Shuffled minibatch SGD. A non-finite loss aborts with the epoch and batch
/// index where it appeared.
pub fn train(
    mut params: Mlp,
    dataset: &Dataset,
    stats: &ClassStats,
    loss_cfg: &LossConfig,
    sgd: &SgdConfig,
) -> Result<TrainOutcome> {
    sgd.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if stats.num_classes() != params.num_outputs() || stats.num_classes() != dataset.num_classes {
        return Err(Error::Shape(format!(
            "{} classes in statistics, {} network outputs, {} dataset classes",
            stats.num_classes(),
            params.num_outputs(),
            dataset.num_classes
        )));
    }
    let objective = Objective::new(stats, *loss_cfg)?;
    let mut velocity = Velocity::zeros(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(sgd.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(sgd.epochs);

    for epoch in 0..sgd.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, idx) in order.chunks(sgd.batch_size).enumerate() {
            let x = dataset.features.select(Axis(0), idx);
            let targets: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
            let diverged = |loss| Error::Diverged { epoch, batch, loss };
            let (loss, grads) = match batch_gradients(&params, &objective, x.view(), &targets) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            epoch_loss += loss * idx.len() as f64;
            sgd_step(&mut params, &grads, &mut velocity, sgd);
        }
        trace.push(epoch_loss / dataset.len() as f64);
    }
    Ok(TrainOutcome {
        params,
        loss_trace: trace,
    })
}

/// Balanced accuracy overall and per frequency group. A group with no class
/// is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAccuracy {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub per_class: Vec<f64>,
}

impl GroupAccuracy {
    pub fn group(&self, group: Group) -> Option<f64> {
        match group {
            Group::Many => self.many,
            Group::Medium => self.medium,
            Group::Few => self.few,
        }
    }
}

/// Macro accuracy of `predictions` against `labels`; `groups[c]` tags class `c`.
pub fn evaluate_predictions(
    predictions: &[usize],
    labels: &[usize],
    groups: &[Group],
) -> Result<GroupAccuracy> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let k = groups.len();
    let mut correct = vec![0u64; k];
    let mut seen = vec![0u64; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= k {
            return Err(Error::Shape(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        seen[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    if seen.contains(&0) {
        return Err(Error::config(
            "balanced evaluation needs every class in the test set",
        ));
    }
    let per_class: Vec<f64> = correct
        .iter()
        .zip(&seen)
        .map(|(&c, &n)| c as f64 / n as f64)
        .collect();
    let mean_of = |keep: &dyn Fn(usize) -> bool| {
        let (sum, n) = per_class
            .iter()
            .enumerate()
            .filter(|(c, _)| keep(*c))
            .fold((0.0, 0usize), |(s, n), (_, &a)| (s + a, n + 1));
        (n > 0).then(|| sum / n as f64)
    };
    Ok(GroupAccuracy {
        overall: mean_of(&|_| true).expect("at least one class"),
        many: mean_of(&|c| groups[c] == Group::Many),
        medium: mean_of(&|c| groups[c] == Group::Medium),
        few: mean_of(&|c| groups[c] == Group::Few),
        per_class,
    })
}

/// Balanced accuracy of the network's argmax over raw logits.
pub fn evaluate(params: &Mlp, test: &Dataset, groups: &[Group]) -> Result<GroupAccuracy> {
    if groups.len() != test.num_classes {
        return Err(Error::Shape(format!(
            "{} group tags for {} classes",
            groups.len(),
            test.num_classes
        )));
    }
    let predictions = params.predict(test.features.view())?;
    evaluate_predictions(&predictions, &test.labels, groups)
}
