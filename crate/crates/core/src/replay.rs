//! Re-simulates a dataset from its spawns and executed actions and checks
//! every stored state, observation and uncertainty record.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::collect::{policy_digest, Agent, AgentMemory, McAgent, McSettings};
use crate::dataset::{ControlMode, Dataset};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::sim::World;
use crate::uncertainty::{combine_signals, UncertaintyWindow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub trajectories: usize,
    pub frames: usize,
    pub records_checked: usize,
    /// Largest absolute difference over all recomputed score fields.
    pub max_abs_error: f64,
}

fn mismatch(traj: u64, tick: u64, what: impl std::fmt::Display) -> Error {
    Error::ReplayMismatch(format!("trajectory {traj} tick {tick}: {what}"))
}

/// Checks `ds` against `worlds` (keyed by track id). Uncertainty records
/// are recomputed when `policy` is given, and must match within `tol`.
pub fn replay(ds: &Dataset, worlds: &HashMap<String, World>, policy: Option<&PolicyParams>, tol: f64) -> Result<ReplayReport> {
    let agent = match (&ds.meta.uncertainty, policy) {
        (Some(u), Some(p)) => {
            let digest = policy_digest(p);
            if digest != u.policy_digest {
                return Err(Error::ReplayMismatch(format!(
                    "policy digest {digest} differs from recorded {}",
                    u.policy_digest
                )));
            }
            Some(McAgent {
                params: p.clone(),
                settings: McSettings {
                    n_samples: u.n_samples,
                    lambda: u.lambda,
                    alpha: u.alpha,
                    window: u.window,
                    steer_bins: u.steer_bins,
                    throttle_bins: u.throttle_bins,
                    shared_masks: u.shared_masks,
                },
                mc_seed: u.mc_seed,
            })
        }
        _ => None,
    };
    let mut report = ReplayReport { trajectories: 0, frames: 0, records_checked: 0, max_abs_error: 0.0 };
    for t in &ds.trajectories {
        let world = worlds
            .get(&t.track)
            .ok_or_else(|| Error::ReplayMismatch(format!("unknown track {}", t.track)))?;
        let mut st = world.spawn(t.spawn.s, t.spawn.lateral, t.spawn.heading_offset, t.spawn.speed);
        let mut memory: AgentMemory = None;
        let mut window = agent.as_ref().map(|a| UncertaintyWindow::new(a.settings.window)).transpose()?;
        let mut offline = ds
            .meta
            .uncertainty
            .as_ref()
            .map(|u| UncertaintyWindow::new(u.window))
            .transpose()?;
        for f in &t.frames {
            if f.tick != st.tick || f.pose != st.pose || f.speed != st.speed || f.progress != st.progress {
                return Err(mismatch(t.id, f.tick, "state diverged from recorded pose"));
            }
            let obs = match &ds.meta.perturbation {
                Some(p) => world.observe_perturbed(&st, p, ds.meta.seed, t.id),
                None => world.observe(&st),
            };
            if obs != f.obs {
                return Err(mismatch(t.id, f.tick, "observation differs"));
            }
            if f.control_mode == ControlMode::Expert && f.label != Some(f.action) {
                return Err(mismatch(t.id, f.tick, "expert frame executed something other than its label"));
            }
            if let (Some(rec), Some(w), Some(u)) = (&f.uncertainty, offline.as_mut(), &ds.meta.uncertainty) {
                // the switch decision must follow from the stored scores alone
                w.record(f.tick, rec.combined);
                let eta = ds.meta.collect.eta.for_command(f.obs.command);
                let (sum, fire) = w.test(eta);
                let switched = fire && ds.meta.strategy == crate::dataset::Strategy::Uail;
                if sum != rec.window_sum || switched != rec.switched {
                    return Err(mismatch(t.id, f.tick, "switch decision does not follow from stored scores"));
                }
                let c = combine_signals(rec.steer.u, rec.throttle.u, u.alpha)?;
                if (c - rec.combined).abs() > tol {
                    return Err(mismatch(t.id, f.tick, "combined score inconsistent with per-signal scores"));
                }
            }
            if let (Some(a), Some(w)) = (&agent, window.as_mut()) {
                let p = a.propose(&obs, &memory, t.id, f.tick)?;
                memory = p.memory;
                let (us, ut) = p.signals.expect("mc agent scores");
                let combined = combine_signals(us.u, ut.u, a.settings.alpha)?;
                w.record(f.tick, combined);
                let (sum, _) = w.test(f64::INFINITY);
                if let Some(rec) = &f.uncertainty {
                    let pairs = [
                        (us.h, rec.steer.h),
                        (us.vr, rec.steer.vr),
                        (us.sd, rec.steer.sd),
                        (us.td, rec.steer.td),
                        (us.u, rec.steer.u),
                        (ut.h, rec.throttle.h),
                        (ut.vr, rec.throttle.vr),
                        (ut.sd, rec.throttle.sd),
                        (ut.td, rec.throttle.td),
                        (ut.u, rec.throttle.u),
                        (combined, rec.combined),
                        (sum, rec.window_sum),
                    ];
                    for (got, want) in pairs {
                        let e = (got - want).abs();
                        report.max_abs_error = report.max_abs_error.max(e);
                        if !(e <= tol) {
                            return Err(mismatch(t.id, f.tick, format!("recomputed score {got} vs stored {want}")));
                        }
                    }
                    report.records_checked += 1;
                }
            }
            report.frames += 1;
            st = world.step(&st, f.action);
        }
        report.trajectories += 1;
    }
    Ok(report)
}
