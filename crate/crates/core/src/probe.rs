//! One-tensor-at-a-time substitution probes.
//!
//! Each probe copies a single parameter tensor from the source model into the
//! target, evaluates the target in eval mode on the validation set (no
//! gradient step, no statistic recomputation) and restores the original.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Arch, Model, ParamKey, ParamKind};
use crate::par::Exec;
use crate::train::{evaluate_with, EvalResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub layer_id: usize,
    pub kind: ParamKind,
    pub dice_per_class: [f64; 4],
    pub dice_mean: f64,
    /// Baseline mean Dice minus probed mean Dice; positive means the swap hurt.
    pub delta: f64,
}

impl ProbeRecord {
    pub fn key(&self) -> ParamKey {
        ParamKey::new(self.layer_id, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub arch: Arch,
    pub target_digest: String,
    pub source_digest: String,
    pub baseline: EvalResult,
    /// Ordered by kind, then layer.
    pub records: Vec<ProbeRecord>,
}

impl ProbeReport {
    pub fn record(&self, key: ParamKey) -> Option<&ProbeRecord> {
        self.records.iter().find(|r| r.key() == key)
    }

    pub fn deltas(&self, kind: ParamKind) -> Vec<(usize, f64)> {
        self.records.iter().filter(|r| r.kind == kind).map(|r| (r.layer_id, r.delta)).collect()
    }
}

fn check_pair(target: &Model, source: &Model) -> Result<()> {
    if target.arch() != source.arch() {
        return Err(Error::ArchMismatch(target.arch().to_string(), source.arch().to_string()));
    }
    Ok(())
}

fn record(key: ParamKey, baseline: &EvalResult, eval: EvalResult) -> ProbeRecord {
    ProbeRecord {
        layer_id: key.layer_id,
        kind: key.kind,
        dice_per_class: eval.dice_per_class,
        dice_mean: eval.dice_mean,
        delta: baseline.dice_mean - eval.dice_mean,
    }
}

/// Swaps `key` in, evaluates, and puts the original tensor back.
fn swap_eval_restore(
    exec: Exec,
    target: &mut Model,
    source: &Model,
    key: ParamKey,
    val: &Dataset,
) -> Result<EvalResult> {
    let original = target.get_param(key)?;
    target.set_param(key, source.get_param(key)?)?;
    let eval = evaluate_with(exec, target, val);
    target.set_param(key, original)?;
    eval
}

/// Probes a single key against a freshly computed baseline; `target` is
/// restored before returning.
pub fn probe_single(target: &mut Model, source: &Model, key: ParamKey, val: &Dataset) -> Result<ProbeRecord> {
    check_pair(target, source)?;
    if !target.has_key(key) {
        return Err(Error::UnknownKey(key));
    }
    let exec = Exec::default();
    let baseline = evaluate_with(exec, target, val)?;
    let eval = swap_eval_restore(exec, target, source, key, val)?;
    Ok(record(key, &baseline, eval))
}

/// Probes every layer of every requested kind.
pub fn run_probe_sweep(target: &mut Model, source: &Model, val: &Dataset, kinds: &[ParamKind]) -> Result<ProbeReport> {
    run_probe_sweep_with(Exec::default(), target, source, val, kinds)
}

/// As [`run_probe_sweep`] with an explicit policy. The parallel policy runs
/// each probe on its own clone of the target; both policies produce the same
/// report.
pub fn run_probe_sweep_with(
    exec: Exec,
    target: &mut Model,
    source: &Model,
    val: &Dataset,
    kinds: &[ParamKind],
) -> Result<ProbeReport> {
    check_pair(target, source)?;
    let kinds: BTreeSet<ParamKind> = kinds.iter().copied().collect();
    let keys = target.keys_of(&kinds.into_iter().collect::<Vec<_>>());
    let baseline = evaluate_with(exec, target, val)?;

    let evals: Vec<Result<EvalResult>> = match exec {
        Exec::Sequential => {
            let snapshot = target.clone();
            let mut out = Vec::with_capacity(keys.len());
            for &key in &keys {
                let r = swap_eval_restore(Exec::Sequential, target, source, key, val);
                if let Err(e) = r {
                    *target = snapshot;
                    return Err(e);
                }
                out.push(r);
            }
            out
        }
        Exec::Parallel => {
            let pristine: &Model = target;
            exec.map(keys.len(), |i| {
                let mut probe = pristine.clone();
                swap_eval_restore(Exec::Sequential, &mut probe, source, keys[i], val)
            })
        }
    };
    let records =
        keys.iter().zip(evals).map(|(&k, e)| e.map(|e| record(k, &baseline, e))).collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport {
        arch: target.arch(),
        target_digest: target.digest(),
        source_digest: source.digest(),
        baseline,
        records,
    })
}
