//! Fully connected control network with inverted dropout.
//!
//! Inputs are the ray fan, normalized speed and a one-hot route command;
//! outputs are `(steer, throttle)` squashed into `[-1, 1] x [0, 1]`.

mod checkpoint;
mod train;

pub use checkpoint::{load, read_from, save, write_to, CHECKPOINT_VERSION};
pub use train::{dataset_loss, loss_and_grad, train, Gradients, TrainHyper, TrainingExample};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{self, Stream};
use crate::uncertainty::{discretize, BinSpec, SampleSet};

pub const N_OUTPUTS: usize = 2;
pub const N_COMMANDS: usize = 4;

/// High-level route command issued by the planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Follow,
    Left,
    Right,
    Straight,
}

impl Command {
    pub const ALL: [Command; 4] = [Command::Follow, Command::Left, Command::Right, Command::Straight];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> [f64; N_COMMANDS] {
        let mut v = [0.0; N_COMMANDS];
        v[self.index()] = 1.0;
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            Command::Follow => "follow",
            Command::Left => "left",
            Command::Right => "right",
            Command::Straight => "straight",
        }
    }
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Command {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| invalid(format!("unknown command {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Normalized ray distances in `[0, 1]`.
    pub rays: Vec<f64>,
    /// Speed over `v_max`, in `[0, 1]`.
    pub speed: f64,
    pub command: Command,
}

impl Observation {
    pub fn feature_len(&self) -> usize {
        self.rays.len() + 1 + N_COMMANDS
    }

    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.feature_len());
        f.extend_from_slice(&self.rays);
        f.push(self.speed);
        f.extend_from_slice(&self.command.one_hot());
        f
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.rays.iter().all(|&r| in_unit(r)) || !in_unit(self.speed) {
            return Err(invalid("observation components must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Positive steer turns right.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub steer: f64,
    pub throttle: f64,
}

impl Action {
    pub fn new(steer: f64, throttle: f64) -> Self {
        Self { steer, throttle }
    }

    pub fn clamped(self) -> Self {
        Self { steer: self.steer.clamp(-1.0, 1.0), throttle: self.throttle.clamp(0.0, 1.0) }
    }

    pub fn in_bounds(&self) -> bool {
        (-1.0..=1.0).contains(&self.steer) && (0.0..=1.0).contains(&self.throttle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    /// Identity; used for linear-network checks.
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Linear => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Linear),
            _ => None,
        }
    }
}

/// Dense layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    #[inline]
    pub fn affine_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.weights.chunks_exact(self.inputs).zip(&self.bias)) {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: Vec<usize>,
    layers: Vec<Layer>,
    dropout: f64,
    activation: Activation,
}

/// Per-hidden-layer multiplicative mask with entries in `{0, 1/(1-p)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<Vec<f64>>,
}

fn validate_arch(arch: &[usize], p: f64) -> Result<()> {
    if arch.len() < 2 {
        return Err(invalid("architecture needs an input and an output width"));
    }
    if arch.contains(&0) {
        return Err(invalid("layer widths must be positive"));
    }
    if *arch.last().unwrap() != N_OUTPUTS {
        return Err(invalid(format!("output width must be {N_OUTPUTS}")));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(invalid(format!("dropout rate {p} outside [0, 1)")));
    }
    Ok(())
}

impl PolicyParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: &[usize], p: f64, activation: Activation, seed: u64) -> Result<Self> {
        validate_arch(arch, p)?;
        let mut rng = rng::stream(seed, Stream::Init, &[]);
        let layers = arch
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let a = (6.0 / (inputs + outputs) as f64).sqrt();
                let weights = (0..inputs * outputs).map(|_| rng.random_range(-a..a)).collect();
                Layer { inputs, outputs, weights, bias: vec![0.0; outputs] }
            })
            .collect();
        Ok(Self { arch: arch.to_vec(), layers, dropout: p, activation })
    }

    pub fn from_layers(layers: Vec<Layer>, p: f64, activation: Activation) -> Result<Self> {
        let mut arch = Vec::with_capacity(layers.len() + 1);
        if let Some(first) = layers.first() {
            arch.push(first.inputs);
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(invalid(format!("layer {i} tensor sizes do not match its shape")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(invalid(format!("layer {i} input width does not chain")));
            }
            arch.push(l.outputs);
        }
        validate_arch(&arch, p)?;
        let params = Self { arch, layers, dropout: p, activation };
        if !params.is_finite() {
            return Err(invalid("parameters must be finite"));
        }
        Ok(params)
    }

    pub fn arch(&self) -> &[usize] {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_width(&self) -> usize {
        self.arch[0]
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.arch[1..self.arch.len() - 1]
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn keep_scale(&self) -> f64 {
        1.0 / (1.0 - self.dropout)
    }

    pub fn all_keep_mask(&self) -> DropoutMask {
        let s = self.keep_scale();
        DropoutMask { layers: self.hidden_widths().iter().map(|&w| vec![s; w]).collect() }
    }

    pub fn sample_mask<R: Rng>(&self, rng: &mut R) -> DropoutMask {
        let (p, s) = (self.dropout, self.keep_scale());
        DropoutMask {
            layers: self
                .hidden_widths()
                .iter()
                .map(|&w| (0..w).map(|_| if p > 0.0 && rng.random::<f64>() < p { 0.0 } else { s }).collect())
                .collect(),
        }
    }

    fn check_mask(&self, mask: &DropoutMask) -> Result<()> {
        let widths = self.hidden_widths();
        if mask.layers.len() != widths.len() || mask.layers.iter().zip(widths).any(|(m, &w)| m.len() != w) {
            return Err(invalid("dropout mask does not match hidden widths"));
        }
        let s = self.keep_scale();
        if mask.layers.iter().flatten().any(|&m| m != 0.0 && m != s) {
            return Err(invalid("dropout mask entries must be 0 or 1/(1-p)"));
        }
        Ok(())
    }

    /// Raw (pre-squash) network outputs on a feature vector.
    pub fn forward_raw(&self, x: &[f64], mask: Option<&DropoutMask>) -> Result<[f64; N_OUTPUTS]> {
        if x.len() != self.input_width() {
            return Err(invalid(format!(
                "feature length {} does not match input width {}",
                x.len(),
                self.input_width()
            )));
        }
        if let Some(m) = mask {
            self.check_mask(m)?;
        }
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.outputs];
            layer.affine_into(&cur, &mut next);
            if i < last {
                for v in next.iter_mut() {
                    *v = self.activation.apply(*v);
                }
                if let Some(m) = mask {
                    for (v, k) in next.iter_mut().zip(&m.layers[i]) {
                        *v *= k;
                    }
                }
            }
            cur = next;
        }
        Ok([cur[0], cur[1]])
    }

    pub fn forward_features(&self, x: &[f64], mask: Option<&DropoutMask>) -> Result<Action> {
        let z = self.forward_raw(x, mask)?;
        Ok(squash(z))
    }

    /// Without a mask this is the deterministic expected-value pass.
    pub fn forward(&self, obs: &Observation, mask: Option<&DropoutMask>) -> Result<Action> {
        self.forward_features(&obs.features(), mask)
    }
}

/// `tanh` for steer, logistic for throttle.
#[inline]
pub fn squash(z: [f64; N_OUTPUTS]) -> Action {
    Action { steer: z[0].tanh(), throttle: sigmoid(z[1]) }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Output of `N` stochastic passes on one input.
#[derive(Debug, Clone, PartialEq)]
pub struct McSample {
    pub steer: SampleSet,
    pub throttle: SampleSet,
    /// Modal value of each signal, used as the executed control.
    pub action: Action,
}

/// Runs `n` forward passes, pass `i` using a mask drawn from the stream
/// `(seed, i)`, so results do not depend on evaluation order.
pub fn mc_sample(
    params: &PolicyParams,
    obs: &Observation,
    n: usize,
    bins: (BinSpec, BinSpec),
    seed: u64,
) -> Result<McSample> {
    if n < 2 {
        return Err(invalid("MC-Dropout needs at least 2 samples"));
    }
    let x = obs.features();
    let mut steer = Vec::with_capacity(n);
    let mut throttle = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng::stream(seed, Stream::Dropout, &[i as u64]);
        let mask = params.sample_mask(&mut rng);
        let a = params.forward_features(&x, Some(&mask))?;
        steer.push(a.steer);
        throttle.push(a.throttle);
    }
    let steer = discretize(&steer, bins.0)?;
    let throttle = discretize(&throttle, bins.1)?;
    let action = Action::new(steer.mode_value(), throttle.mode_value());
    Ok(McSample { steer, throttle, action })
}
