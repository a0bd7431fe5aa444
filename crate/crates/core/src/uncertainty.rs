//! Predictive-uncertainty scoring over MC-Dropout output samples.
//!
//! A continuous control signal is sampled `N` times with dropout active, the
//! samples are binned, and four statistics of the resulting histogram are
//! folded into one score per signal:
//!
//! ```text
//! U = [ TD * H * VR + lambda * SD ]^2
//! ```
//!
//! where `H` is the histogram entropy, `VR` the variational ratio, `SD` the
//! mean absolute deviation of the raw samples from the mode and `TD` the KL
//! divergence from the previous timestep's histogram. Logs are natural.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Uniform binning of a bounded scalar signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_bins: usize,
}

impl BinSpec {
    pub fn new(lo: f64, hi: f64, n_bins: usize) -> Result<Self> {
        let spec = Self { lo, hi, n_bins };
        spec.validate()?;
        Ok(spec)
    }

    /// Steering in `[-1, 1]`, 20 bins of width 0.1.
    pub fn steering() -> Self {
        Self { lo: -1.0, hi: 1.0, n_bins: 20 }
    }

    /// Throttle in `[0, 1]`, 20 bins of width 0.05.
    pub fn throttle() -> Self {
        Self { lo: 0.0, hi: 1.0, n_bins: 20 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo >= self.hi {
            return Err(invalid(format!("bin range [{}, {}] is empty", self.lo, self.hi)));
        }
        if self.n_bins < 2 {
            return Err(invalid(format!("need at least 2 bins, got {}", self.n_bins)));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n_bins as f64
    }

    /// Bin index of `v`; values outside `[lo, hi]` land in the edge bins.
    pub fn bin_of(&self, v: f64) -> usize {
        let clamped = v.clamp(self.lo, self.hi);
        let pos = (clamped - self.lo) * self.n_bins as f64 / (self.hi - self.lo);
        (pos.floor() as usize).min(self.n_bins - 1)
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.lo + (bin as f64 + 0.5) * self.width()
    }
}

/// `N` raw samples of one signal at one timestep plus their histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    raw: Vec<f64>,
    counts: Vec<u32>,
    mode_bin: usize,
    mode_center: f64,
    mode_value: f64,
    spec: BinSpec,
}

impl SampleSet {
    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn n(&self) -> usize {
        self.raw.len()
    }

    /// Index of the most populated bin (lowest index on ties).
    pub fn mode_bin(&self) -> usize {
        self.mode_bin
    }

    /// Geometric center of the modal bin.
    pub fn mode_center(&self) -> f64 {
        self.mode_center
    }

    /// Mean of the raw samples inside the modal bin. This is the value used
    /// as `c*` for the deviation statistic and as the executed control, so
    /// a unanimous sample set has exactly zero deviation.
    pub fn mode_value(&self) -> f64 {
        self.mode_value
    }

    pub fn spec(&self) -> &BinSpec {
        &self.spec
    }

    pub fn mode_count(&self) -> u32 {
        self.counts[self.mode_bin]
    }
}

pub fn discretize(samples: &[f64], spec: BinSpec) -> Result<SampleSet> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(invalid("empty sample list"));
    }
    if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(invalid(format!("non-finite sample {bad}")));
    }
    let mut counts = vec![0u32; spec.n_bins];
    for &v in samples {
        counts[spec.bin_of(v)] += 1;
    }
    let mut mode_bin = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[mode_bin] {
            mode_bin = i;
        }
    }
    // mean written as an offset from the first member so that identical
    // samples reproduce their value exactly
    let mut members = samples.iter().copied().filter(|&v| spec.bin_of(v) == mode_bin);
    let anchor = members.next().expect("modal bin is populated");
    let (offset, n) = members.fold((0.0, 1usize), |(s, n), v| (s + (v - anchor), n + 1));
    Ok(SampleSet {
        raw: samples.to_vec(),
        counts,
        mode_bin,
        mode_center: spec.center(mode_bin),
        mode_value: anchor + offset / n as f64,
        spec,
    })
}

pub fn entropy(s: &SampleSet) -> f64 {
    let n = s.n() as f64;
    let h: f64 = s
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    h.max(0.0)
}

pub fn variational_ratio(s: &SampleSet) -> f64 {
    1.0 - s.mode_count() as f64 / s.n() as f64
}

pub fn std_from_mode(s: &SampleSet) -> f64 {
    let c = s.mode_value;
    s.raw.iter().map(|y| (y - c).abs()).sum::<f64>() / s.n() as f64
}

/// Additive smoothing mass per bin: `1 / (N * n_bins)`.
pub fn smoothing_epsilon(s: &SampleSet) -> f64 {
    1.0 / (s.n() as f64 * s.spec.n_bins as f64)
}

/// Histogram normalized after adding `eps` to every bin.
pub fn smoothed_distribution(counts: &[u32], eps: f64) -> Vec<f64> {
    let total: f64 = counts.iter().map(|&c| c as f64 + eps).sum();
    counts.iter().map(|&c| (c as f64 + eps) / total).collect()
}

/// `KL[p || q]`; bins with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// KL divergence of the current histogram from the previous one.
pub fn temporal_divergence(cur: &SampleSet, prev: &SampleSet) -> Result<f64> {
    if cur.spec != prev.spec {
        return Err(invalid("temporal divergence across different bin specs"));
    }
    if cur.counts == prev.counts {
        return Ok(0.0);
    }
    let p = smoothed_distribution(&cur.counts, smoothing_epsilon(cur));
    let q = smoothed_distribution(&prev.counts, smoothing_epsilon(prev));
    Ok(kl_divergence(&p, &q).max(0.0))
}

/// Per-signal breakdown of the composite score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SignalUncertainty {
    pub h: f64,
    pub vr: f64,
    pub sd: f64,
    pub td: f64,
    pub u: f64,
}

impl SignalUncertainty {
    /// The categorical-temporal product `TD * H * VR`.
    pub fn categorical_term(&self) -> f64 {
        self.td * self.h * self.vr
    }
}

/// Composite score of `cur` given the previous timestep's samples. At the
/// first frame of an episode pass `cur` as `prev`, which makes `TD = 0`.
pub fn uncertainty_score(cur: &SampleSet, prev: &SampleSet, lambda: f64) -> Result<SignalUncertainty> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let td = temporal_divergence(cur, prev)?;
    let h = entropy(cur);
    let vr = variational_ratio(cur);
    let sd = std_from_mode(cur);
    let inner = td * h * vr + lambda * sd;
    Ok(SignalUncertainty { h, vr, sd, td, u: inner * inner })
}

pub fn combine_signals(u_steer: f64, u_throttle: f64, alpha: f64) -> Result<f64> {
    if !(u_steer >= 0.0) || !(u_throttle >= 0.0) || !(alpha >= 0.0) {
        return Err(invalid(format!(
            "combine_signals expects non-negative inputs, got ({u_steer}, {u_throttle}, {alpha})"
        )));
    }
    Ok(u_steer + alpha * u_throttle)
}

/// Sums the window and compares it to `eta` with a strict inequality.
pub fn window_should_switch(window: &[f64], eta: f64) -> (f64, bool) {
    let sum: f64 = window.iter().sum();
    (sum, sum > eta)
}

/// Ring buffer of the last `T` combined scores, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyWindow {
    slots: Vec<f64>,
}

impl UncertaintyWindow {
    pub fn new(t: usize) -> Result<Self> {
        if t == 0 {
            return Err(invalid("uncertainty window must hold at least one slot"));
        }
        Ok(Self { slots: vec![0.0; t] })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn reset(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = 0.0);
    }

    /// Stores `value` at slot `t mod T`.
    pub fn record(&mut self, t: u64, value: f64) {
        let n = self.slots.len() as u64;
        self.slots[(t % n) as usize] = value;
    }

    pub fn slots(&self) -> &[f64] {
        &self.slots
    }

    pub fn test(&self, eta: f64) -> (f64, bool) {
        window_should_switch(&self.slots, eta)
    }
}

/// Everything the switch rule saw at one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub t: u64,
    pub steer: SignalUncertainty,
    pub throttle: SignalUncertainty,
    pub combined: f64,
    pub window_sum: f64,
    pub switched: bool,
}

/// Lambda that puts `TD*H*VR` and `lambda*SD` on the same scale: the ratio of
/// their medians over a calibration rollout. Falls back to the ratio of
/// means, then to `1.0`, when the medians are degenerate.
pub fn calibrate_lambda(records: &[SignalUncertainty]) -> f64 {
    let cat: Vec<f64> = records.iter().map(SignalUncertainty::categorical_term).collect();
    let sd: Vec<f64> = records.iter().map(|r| r.sd).collect();
    let (mc, ms) = (crate::stats::median(&cat), crate::stats::median(&sd));
    if let (Some(mc), Some(ms)) = (mc, ms) {
        if mc > 1e-12 && ms > 1e-12 {
            return mc / ms;
        }
    }
    let (ac, asd) = (crate::stats::mean(&cat), crate::stats::mean(&sd));
    match (ac, asd) {
        (Some(a), Some(b)) if a > 1e-12 && b > 1e-12 => a / b,
        _ => 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_counts(counts: &[u32], spec: BinSpec) -> SampleSet {
        let mut raw = Vec::new();
        for (i, &c) in counts.iter().enumerate() {
            raw.extend(std::iter::repeat_n(spec.center(i), c as usize));
        }
        discretize(&raw, spec).unwrap()
    }

    #[test]
    fn discretize_all_equal() {
        let s = discretize(&[0.0, 0.0, 0.0], BinSpec::steering()).unwrap();
        assert_eq!(s.counts().iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(s.mode_count(), 3);
        assert_eq!(s.mode_center(), BinSpec::steering().center(s.mode_bin()));
        assert_eq!(s.mode_value(), 0.0);
    }

    #[test]
    fn discretize_clamps() {
        let s = discretize(&[-1.5, 1.5], BinSpec::steering()).unwrap();
        assert_eq!(s.counts()[0], 1);
        assert_eq!(s.counts()[19], 1);
        assert_eq!(s.counts().iter().sum::<u32>(), 2);
    }

    #[test]
    fn discretize_rejects_bad_input() {
        assert!(discretize(&[], BinSpec::steering()).is_err());
        assert!(discretize(&[0.1, f64::NAN], BinSpec::steering()).is_err());
        assert!(discretize(&[0.1], BinSpec { lo: 1.0, hi: 0.0, n_bins: 4 }).is_err());
        assert!(BinSpec::new(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn entropy_examples() {
        let spec = BinSpec::new(0.0, 1.0, 4).unwrap();
        assert_eq!(entropy(&from_counts(&[20, 0, 0, 0], spec)), 0.0);
        let two = entropy(&from_counts(&[10, 10, 0, 0], spec));
        assert!((two - 2f64.ln()).abs() < 1e-15);
        assert!((two - 0.693147).abs() < 1e-6);
        let four = entropy(&from_counts(&[5, 5, 5, 5], spec));
        assert!((four - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn variational_ratio_examples() {
        let spec = BinSpec::new(0.0, 1.0, 4).unwrap();
        assert_eq!(variational_ratio(&from_counts(&[20, 0, 0, 0], spec)), 0.0);
        assert_eq!(variational_ratio(&from_counts(&[15, 5, 0, 0], spec)), 0.25);
        let tie = from_counts(&[0, 7, 7, 6], spec);
        assert_eq!(tie.mode_bin(), 1);
        assert!((variational_ratio(&tie) - 0.65).abs() < 1e-15);
    }

    #[test]
    fn std_from_mode_examples() {
        let s = discretize(&[0.3; 5], BinSpec::steering()).unwrap();
        assert_eq!(std_from_mode(&s), 0.0);
        let s = discretize(&[0.0, 0.2, 0.0, 0.2], BinSpec::steering()).unwrap();
        assert_eq!(s.mode_value(), 0.0);
        assert!((std_from_mode(&s) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn temporal_divergence_examples() {
        let spec = BinSpec::new(0.0, 1.0, 2).unwrap();
        let a = from_counts(&[2, 2], spec);
        assert_eq!(temporal_divergence(&a, &a).unwrap(), 0.0);
        // unsmoothed two-bin case
        let kl = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]);
        assert!((kl - (0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln())).abs() < 1e-15);
        assert!((kl - 0.143841).abs() < 1e-6);

        let other = from_counts(&[0, 4], spec);
        let concentrated = from_counts(&[4, 0], spec);
        let td = temporal_divergence(&concentrated, &other).unwrap();
        assert!(td.is_finite() && td > 0.0);

        let mismatched = from_counts(&[1, 1, 2], BinSpec::new(0.0, 1.0, 3).unwrap());
        assert!(temporal_divergence(&a, &mismatched).is_err());
    }

    #[test]
    fn score_examples() {
        let s = discretize(&[0.25; 20], BinSpec::steering()).unwrap();
        let r = uncertainty_score(&s, &s, 1.0).unwrap();
        assert_eq!((r.h, r.vr, r.sd, r.td, r.u), (0.0, 0.0, 0.0, 0.0, 0.0));

        // TD = 0 so only lambda * SD survives
        let s = discretize(&[0.0, 0.2, 0.0, 0.2], BinSpec::steering()).unwrap();
        let r = uncertainty_score(&s, &s, 1.0).unwrap();
        assert_eq!(r.td, 0.0);
        assert!((r.u - 0.01).abs() < 1e-15);
        assert!(uncertainty_score(&s, &s, -1.0).is_err());
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine_signals(0.0, 0.0, 0.6).unwrap(), 0.0);
        assert!((combine_signals(1.0, 1.0, 0.6).unwrap() - 1.6).abs() < 1e-15);
        assert!((combine_signals(0.02, 0.05, 0.6).unwrap() - 0.05).abs() < 1e-15);
        assert!(combine_signals(-0.1, 0.0, 0.6).is_err());
    }

    #[test]
    fn window_examples() {
        assert_eq!(window_should_switch(&[0.0; 5], 0.1), (0.0, false));
        let (s, sw) = window_should_switch(&[0.05, 0.04, 0.03], 0.1);
        assert!((s - 0.12).abs() < 1e-15 && sw);
        let (s, sw) = window_should_switch(&[0.05, 0.05], 0.1);
        assert!((s - 0.10).abs() < 1e-15 && !sw);
    }

    #[test]
    fn ring_buffer_overwrites_oldest() {
        let mut w = UncertaintyWindow::new(3).unwrap();
        for (t, v) in [1.0, 2.0, 3.0, 4.0].into_iter().enumerate() {
            w.record(t as u64, v);
        }
        assert_eq!(w.slots(), &[4.0, 2.0, 3.0]);
        assert_eq!(w.test(8.9), (9.0, true));
        w.reset();
        assert_eq!(w.test(0.0), (0.0, false));
        assert!(UncertaintyWindow::new(0).is_err());
    }

    #[test]
    fn lambda_calibration_balances_medians() {
        let recs: Vec<SignalUncertainty> = (1..=5)
            .map(|i| SignalUncertainty { h: 1.0, vr: 0.5, td: 0.2 * i as f64, sd: 0.05 * i as f64, u: 0.0 })
            .collect();
        let lambda = calibrate_lambda(&recs);
        assert!((lambda - 0.3 / 0.15).abs() < 1e-12);
        assert_eq!(calibrate_lambda(&[]), 1.0);
    }
}
