//! Mini-batch Adam on the joint `(steer, throttle)` squared error.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{sigmoid, Action, DropoutMask, PolicyParams};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub features: Vec<f64>,
    pub target: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { lr: 1e-3, epochs: 40, batch: 64, seed: 0 }
    }
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(p: &PolicyParams) -> Self {
        Self {
            weights: p.layers().iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: p.layers().iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn clear(&mut self) {
        self.weights.iter_mut().chain(self.bias.iter_mut()).for_each(|g| g.fill(0.0));
    }
}

/// Per-sample activations kept for the backward pass.
struct Scratch {
    /// `inputs[l]` is the (masked) input fed to layer `l`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
    /// Unmasked activations of hidden layers.
    act: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(p: &PolicyParams) -> Self {
        let arch = p.arch();
        Self {
            inputs: arch[..arch.len() - 1].iter().map(|&w| vec![0.0; w]).collect(),
            pre: arch[1..].iter().map(|&w| vec![0.0; w]).collect(),
            act: arch[1..].iter().map(|&w| vec![0.0; w]).collect(),
            delta: arch[1..].iter().map(|&w| vec![0.0; w]).collect(),
        }
    }
}

/// Forward then backward on one example; adds `scale * dL/dtheta` into
/// `grads` and returns the example's loss `((s - s*)^2 + (t - t*)^2) / 2`.
fn accumulate(
    p: &PolicyParams,
    ex: &TrainingExample,
    mask: Option<&DropoutMask>,
    scale: f64,
    s: &mut Scratch,
    grads: &mut Gradients,
) -> f64 {
    let layers = p.layers();
    let last = layers.len() - 1;
    let act_fn = p.activation();
    s.inputs[0].copy_from_slice(&ex.features);
    for (l, layer) in layers.iter().enumerate() {
        layer.affine_into(&s.inputs[l], &mut s.pre[l]);
        if l < last {
            for (i, &z) in s.pre[l].iter().enumerate() {
                let a = act_fn.apply(z);
                s.act[l][i] = a;
                s.inputs[l + 1][i] = match mask {
                    Some(m) => a * m.layers[l][i],
                    None => a,
                };
            }
        }
    }
    let z = &s.pre[last];
    let steer = z[0].tanh();
    let throttle = sigmoid(z[1]);
    let (es, et) = (steer - ex.target.steer, throttle - ex.target.throttle);
    let loss = 0.5 * (es * es + et * et);

    s.delta[last][0] = scale * es * (1.0 - steer * steer);
    s.delta[last][1] = scale * et * throttle * (1.0 - throttle);
    for l in (0..=last).rev() {
        let layer = &layers[l];
        let gw = &mut grads.weights[l];
        for (o, &d) in s.delta[l].iter().enumerate() {
            grads.bias[l][o] += d;
            if d != 0.0 {
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, &x) in row.iter_mut().zip(&s.inputs[l]) {
                    *g += d * x;
                }
            }
        }
        if l == 0 {
            break;
        }
        // back through layer l into hidden layer l - 1
        let (lower, upper) = s.delta.split_at_mut(l);
        let below = &mut lower[l - 1];
        below.fill(0.0);
        for (o, &d) in upper[0].iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
            for (b, &w) in below.iter_mut().zip(row) {
                *b += d * w;
            }
        }
        for (i, b) in below.iter_mut().enumerate() {
            let m = mask.map_or(1.0, |m| m.layers[l - 1][i]);
            *b *= m * act_fn.derivative(s.pre[l - 1][i], s.act[l - 1][i]);
        }
    }
    loss
}

/// Mean loss over `batch` with per-example masks, and its exact gradient.
pub fn loss_and_grad(
    p: &PolicyParams,
    batch: &[TrainingExample],
    masks: Option<&[DropoutMask]>,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    check_examples(p, batch)?;
    if let Some(m) = masks {
        if m.len() != batch.len() {
            return Err(invalid("one mask per example required"));
        }
    }
    let mut grads = Gradients::zeros_like(p);
    let mut s = Scratch::new(p);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        loss += accumulate(p, ex, masks.map(|m| &m[i]), scale, &mut s, &mut grads);
    }
    Ok((loss * scale, grads))
}

/// Maskless mean loss over a dataset.
pub fn dataset_loss(p: &PolicyParams, data: &[TrainingExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    check_examples(p, data)?;
    let mut total = 0.0;
    for ex in data {
        let a = p.forward_features(&ex.features, None)?;
        let (es, et) = (a.steer - ex.target.steer, a.throttle - ex.target.throttle);
        total += 0.5 * (es * es + et * et);
    }
    Ok(total / data.len() as f64)
}

fn check_examples(p: &PolicyParams, data: &[TrainingExample]) -> Result<()> {
    for ex in data {
        if ex.features.len() != p.input_width() {
            return Err(invalid("example feature length does not match network input"));
        }
        if !ex.target.in_bounds() {
            return Err(invalid(format!("label {:?} outside action bounds", ex.target)));
        }
    }
    Ok(())
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, p: &mut PolicyParams, g: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (l, layer) in p.layers_mut().iter_mut().enumerate() {
            let params = layer.weights.iter_mut().zip(&g.weights[l]).zip(self.m.weights[l].iter_mut().zip(self.v.weights[l].iter_mut()));
            let biases = layer.bias.iter_mut().zip(&g.bias[l]).zip(self.m.bias[l].iter_mut().zip(self.v.bias[l].iter_mut()));
            for ((w, &gi), (m, v)) in params.chain(biases) {
                *m = Self::B1 * *m + (1.0 - Self::B1) * gi;
                *v = Self::B2 * *v + (1.0 - Self::B2) * gi * gi;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains with dropout active. The returned curve holds the maskless loss
/// on the full dataset before training and after every epoch.
pub fn train(
    params: &PolicyParams,
    data: &[TrainingExample],
    hyper: &TrainHyper,
) -> Result<(PolicyParams, Vec<f64>)> {
    if data.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    if hyper.batch == 0 || !(hyper.lr > 0.0) {
        return Err(invalid("batch must be positive and lr > 0"));
    }
    let mut p = params.clone();
    let mut curve = vec![dataset_loss(&p, data)?];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = rng::stream(hyper.seed, Stream::Shuffle, &[]);
    let mut masks = rng::stream(hyper.seed, Stream::Dropout, &[]);
    let mut adam = Adam { m: Gradients::zeros_like(&p), v: Gradients::zeros_like(&p), t: 0 };
    let mut grads = Gradients::zeros_like(&p);
    let mut s = Scratch::new(&p);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(hyper.batch) {
            grads.clear();
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                let mask = (p.dropout() > 0.0).then(|| p.sample_mask(&mut masks));
                loss += accumulate(&p, &data[i], mask.as_ref(), scale, &mut s, &mut grads);
            }
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss });
            }
            adam.step(&mut p, &grads, hyper.lr);
        }
        let loss = dataset_loss(&p, data)?;
        if !loss.is_finite() || !p.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        curve.push(loss);
    }
    Ok((p, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Activation;

    fn example() -> TrainingExample {
        TrainingExample { features: vec![0.2, 0.9, 0.4, 1.0, 0.0], target: Action::new(-0.4, 0.7) }
    }

    #[test]
    fn memorizes_a_single_point() {
        let p = PolicyParams::init(&[5, 16, 2], 0.0, Activation::Tanh, 1).unwrap();
        let data = vec![example(); 32];
        let hyper = TrainHyper { lr: 1e-2, epochs: 60, batch: 8, seed: 1 };
        let (_, curve) = train(&p, &data, &hyper).unwrap();
        assert!(*curve.last().unwrap() < 1e-3, "final loss {:?}", curve.last());
        assert!(curve.last() <= curve.first());
    }

    #[test]
    fn training_is_deterministic() {
        let p = PolicyParams::init(&[5, 8, 8, 2], 0.1, Activation::Tanh, 1).unwrap();
        let data: Vec<_> = (0..20)
            .map(|i| TrainingExample {
                features: vec![i as f64 / 20.0, 0.5, 0.0, 1.0, 0.0],
                target: Action::new((i as f64 / 10.0 - 1.0).clamp(-1.0, 1.0), 0.5),
            })
            .collect();
        let hyper = TrainHyper { lr: 1e-2, epochs: 5, batch: 4, seed: 9 };
        let a = train(&p, &data, &hyper).unwrap();
        let b = train(&p, &data, &hyper).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_empty_and_out_of_bounds() {
        let p = PolicyParams::init(&[5, 8, 2], 0.1, Activation::Tanh, 1).unwrap();
        assert!(train(&p, &[], &TrainHyper::default()).is_err());
        let mut bad = example();
        bad.target.throttle = 1.5;
        assert!(train(&p, &[bad], &TrainHyper::default()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let p = PolicyParams::init(&[5, 8, 2], 0.0, Activation::Relu, 1).unwrap();
        let hyper = TrainHyper { lr: f64::MAX, epochs: 3, batch: 1, seed: 0 };
        let err = train(&p, &vec![example(); 4], &hyper).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { .. }), "{err}");
    }
}
