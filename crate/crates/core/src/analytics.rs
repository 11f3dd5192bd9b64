//! Kernel RMSE, batch-norm shift/scale statistics, closed-form predictions
//! of a single batch-norm parameter swap, and the reuse decision.
//!
//! Notation: the target layer supplies `w, b, mu, var`, the source layer the
//! primed values. For a swap of one field the eval-mode output becomes
//!
//! ```text
//! RM:  y' = w (x - mu) / s + w (mu - mu') / s + b          s = sqrt(var + eps)
//! RV:  y' = w (x - mu) / s * s / sqrt(var' + eps) + b
//! RW:  y' = (w' / w) w xhat + b
//! RB:  y' = w xhat + b - (b - b')
//! ```

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{reject, Error, Result};
use crate::nn::{Model, ParamKey, ParamKind};
use crate::ops::BnState;
use crate::probe::ProbeReport;
use crate::tensor::Tensor;

/// Channels with `|w| <= MRW_GUARD` are excluded from the weight ratio mean.
pub const MRW_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseRecord {
    pub layer_id: usize,
    pub kind: ParamKind,
    pub rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnShiftScaleStats {
    pub layer_id: usize,
    pub mrm: f64,
    pub mrv: f64,
    pub mrw: f64,
    pub mrb: f64,
}

/// Root-mean-square difference over all elements.
pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        reject!("rmse: shapes {:?} and {:?} differ", a.shape(), b.shape());
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let ss: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// Per-layer RMSE between corresponding conv tensors, ordered by layer then kind.
pub fn rmse_sweep(a: &Model, b: &Model, kinds: &[ParamKind]) -> Result<Vec<RmseRecord>> {
    if a.arch() != b.arch() {
        return Err(Error::ArchMismatch(a.arch().to_string(), b.arch().to_string()));
    }
    if let Some(k) = kinds.iter().find(|k| !k.is_conv()) {
        reject!("rmse compares conv parameters only, got {k}");
    }
    let mut keys = a.keys_of(kinds);
    keys.sort_by_key(|k| (k.layer_id, k.kind));
    keys.into_iter()
        .map(|k| Ok(RmseRecord { layer_id: k.layer_id, kind: k.kind, rmse: rmse(a.param(k)?, b.param(k)?)? }))
        .collect()
}

fn bn_vectors(s: &BnState) -> [Vec<f64>; 4] {
    let f = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    [f(&s.gamma), f(&s.beta), f(&s.run_mean), f(&s.run_var)]
}

/// Channel-averaged effect sizes of swapping each batch-norm field.
/// Mean and bias shifts use magnitudes `|mu - mu'|`, `|b - b'|`.
pub fn bn_stats(target: &BnState, source: &BnState) -> Result<BnShiftScaleStats> {
    target.validate()?;
    source.validate()?;
    let m = target.channels();
    if source.channels() != m {
        reject!("bn_stats: {} vs {} channels", m, source.channels());
    }
    if m == 0 {
        reject!("bn_stats: empty layer");
    }
    let eps = target.eps as f64;
    let [w, b, mu, var] = bn_vectors(target);
    let [w2, b2, mu2, var2] = bn_vectors(source);
    let mean = |f: &dyn Fn(usize) -> f64| (0..m).map(f).sum::<f64>() / m as f64;
    let mrm = mean(&|j| w[j].abs() * (mu[j] - mu2[j]).abs() / (var[j] + eps).sqrt());
    let mrv = mean(&|j| (var[j] + eps).sqrt() / (var2[j] + eps).sqrt());
    let mrb = mean(&|j| (b[j] - b2[j]).abs());
    let ratios: Vec<f64> = (0..m).filter(|&j| w[j].abs() > MRW_GUARD).map(|j| w2[j] / w[j]).collect();
    if ratios.is_empty() {
        return Err(Error::UndefinedStat("MRW: every channel has zero weight".into()));
    }
    let mrw = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(BnShiftScaleStats { layer_id: 0, mrm, mrv, mrw, mrb })
}

/// [`bn_stats`] for every batch-norm layer of two models of the same arch.
pub fn bn_stats_sweep(target: &Model, source: &Model) -> Result<Vec<BnShiftScaleStats>> {
    if target.arch() != source.arch() {
        return Err(Error::ArchMismatch(target.arch().to_string(), source.arch().to_string()));
    }
    target
        .bn_layers()
        .iter()
        .zip(source.bn_layers())
        .enumerate()
        .map(|(i, (t, s))| bn_stats(t, s).map(|st| BnShiftScaleStats { layer_id: i + 1, ..st }))
        .collect()
}

/// Eval-mode output of the target layer with one field replaced by the
/// source's, computed from the rewritten closed forms with signed
/// differences rather than by substitution.
pub fn predict_bn_swap(x: &Tensor, target: &BnState, source: &BnState, kind: ParamKind) -> Result<Tensor> {
    target.validate()?;
    source.validate()?;
    let (n, c, h, wd) = x.dims4()?;
    if c != target.channels() || c != source.channels() {
        reject!("predict_bn_swap: input has {c} channels, layers {} and {}", target.channels(), source.channels());
    }
    if kind.is_conv() {
        reject!("predict_bn_swap: {kind} is not a batch-norm parameter");
    }
    let eps = target.eps as f64;
    let [w, b, mu, var] = bn_vectors(target);
    let [w2, b2, mu2, var2] = bn_vectors(source);
    let plane = h * wd;
    let mut y = Tensor::zeros(x.shape());
    for s in 0..n {
        for j in 0..c {
            let sd = (var[j] + eps).sqrt();
            let base = (s * c + j) * plane;
            for i in base..base + plane {
                let xv = x.data()[i] as f64;
                let xhat = (xv - mu[j]) / sd;
                let out = match kind {
                    ParamKind::BnRM => {
                        let d_mu = mu[j] - mu2[j];
                        w[j] * xhat + w[j] * d_mu / sd + b[j]
                    }
                    ParamKind::BnRV => {
                        let d_var = var[j] - var2[j];
                        w[j] * xhat * sd / (var[j] - d_var + eps).sqrt() + b[j]
                    }
                    ParamKind::BnRW => {
                        if w[j].abs() > MRW_GUARD {
                            (w2[j] / w[j]) * w[j] * xhat + b[j]
                        } else {
                            w2[j] * xhat + b[j]
                        }
                    }
                    ParamKind::BnRB => {
                        let d_b = b[j] - b2[j];
                        w[j] * xhat + b[j] - d_b
                    }
                    ParamKind::ConvW | ParamKind::ConvB => unreachable!(),
                };
                y.data_mut()[i] = out as f32;
            }
        }
    }
    Ok(y)
}

/// Layers whose probe delta is at most `eps_drop`, per kind.
pub fn classify_reusability(report: &ProbeReport, eps_drop: f64) -> BTreeMap<ParamKind, BTreeSet<usize>> {
    let mut out: BTreeMap<ParamKind, BTreeSet<usize>> = BTreeMap::new();
    for r in &report.records {
        let set = out.entry(r.kind).or_default();
        if r.delta <= eps_drop {
            set.insert(r.layer_id);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub eps_drop: f64,
    pub rn_frac: f64,
    pub kappa: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { eps_drop: 0.02, rn_frac: 0.5, kappa: 0.5 }
    }
}

pub const VERDICT_REUSE: &str = "reuse recommended";
pub const VERDICT_NO_REUSE: &str = "reuse not recommended";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReuseDecision {
    pub verdict: String,
    pub is_reusable_network: bool,
    pub rmse_ok: bool,
    /// Share of probed conv kernels classified reusable.
    pub conv_w_reusable_fraction: f64,
    /// Reusable keys over probed keys, each layer and kind counted once, in percent.
    pub reuse_percentage: f64,
    pub reusable_layers: BTreeMap<ParamKind, BTreeSet<usize>>,
    pub non_reusable_keys: Vec<ParamKey>,
    pub thresholds: Thresholds,
}

impl ReuseDecision {
    pub fn reuse_recommended(&self) -> bool {
        self.is_reusable_network && self.rmse_ok
    }

    pub fn reusable_keys(&self) -> BTreeSet<ParamKey> {
        self.reusable_layers.iter().flat_map(|(&kind, ids)| ids.iter().map(move |&l| ParamKey::new(l, kind))).collect()
    }
}

fn rmse_of(records: &[RmseRecord], layer_id: usize, what: &str) -> Result<f64> {
    records
        .iter()
        .find(|r| r.layer_id == layer_id && r.kind == ParamKind::ConvW)
        .map(|r| r.rmse)
        .ok_or_else(|| Error::InvalidInput(format!("no {what} RMSE for conv layer {layer_id}")))
}

/// Both conditions must hold for reuse: the network is reusable (enough
/// conv kernels survive substitution) and every reusable kernel is close to
/// the target's, measured against the RMSE to a random initialization.
pub fn decide(
    report: &ProbeReport,
    rmse_records: &[RmseRecord],
    rmse_baseline: &[RmseRecord],
    thresholds: Thresholds,
) -> Result<ReuseDecision> {
    let reusable_layers = classify_reusability(report, thresholds.eps_drop);
    let conv_w_probed = report.records.iter().filter(|r| r.kind == ParamKind::ConvW).count();
    let conv_w_reusable = reusable_layers.get(&ParamKind::ConvW).map_or(0, |s| s.len());
    let conv_w_reusable_fraction = if conv_w_probed == 0 { 0.0 } else { conv_w_reusable as f64 / conv_w_probed as f64 };
    let is_reusable_network = conv_w_probed > 0 && conv_w_reusable_fraction >= thresholds.rn_frac;

    let mut rmse_ok = true;
    for &l in reusable_layers.get(&ParamKind::ConvW).into_iter().flatten() {
        let r = rmse_of(rmse_records, l, "pair")?;
        let base = rmse_of(rmse_baseline, l, "baseline")?;
        if r > thresholds.kappa * base {
            rmse_ok = false;
        }
    }

    let non_reusable_keys: Vec<ParamKey> = report
        .records
        .iter()
        .filter(|r| !reusable_layers.get(&r.kind).is_some_and(|s| s.contains(&r.layer_id)))
        .map(|r| r.key())
        .collect();
    let probed = report.records.len();
    let reuse_percentage =
        if probed == 0 { 0.0 } else { 100.0 * (probed - non_reusable_keys.len()) as f64 / probed as f64 };
    let recommended = is_reusable_network && rmse_ok;
    Ok(ReuseDecision {
        verdict: if recommended { VERDICT_REUSE } else { VERDICT_NO_REUSE }.to_string(),
        is_reusable_network,
        rmse_ok,
        conv_w_reusable_fraction,
        reuse_percentage,
        reusable_layers,
        non_reusable_keys,
        thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{bn_forward_eval, BN_EPS};

    fn bn(gamma: f32, beta: f32, mean: f32, var: f32) -> BnState {
        let mut s = BnState::new(1);
        s.gamma = Tensor::full(&[1], gamma);
        s.beta = Tensor::full(&[1], beta);
        s.run_mean = Tensor::full(&[1], mean);
        s.run_var = Tensor::full(&[1], var);
        s
    }

    #[test]
    fn rmse_hand_case() {
        let a = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        let b = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        assert!((rmse(&a, &b).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert!(rmse(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn bn_stats_identity() {
        let s = bn(0.7, -0.2, 0.3, 2.0);
        let st = bn_stats(&s, &s).unwrap();
        assert_eq!((st.mrm, st.mrv, st.mrw, st.mrb), (0.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn bn_stats_hand_cases() {
        let t = bn(2.0, 0.0, 1.0, 4.0 - BN_EPS);
        let s = bn(2.0, 0.0, 3.0, 4.0 - BN_EPS);
        assert!((bn_stats(&t, &s).unwrap().mrm - 2.0).abs() < 1e-6);
        let s = bn(2.0, 0.0, 1.0, 1.0 - BN_EPS);
        assert!((bn_stats(&t, &s).unwrap().mrv - 2.0).abs() < 1e-6);
    }

    #[test]
    fn bn_stats_errors() {
        let t = bn(0.0, 0.0, 0.0, 1.0);
        assert!(matches!(bn_stats(&t, &bn(1.0, 0.0, 0.0, 1.0)), Err(Error::UndefinedStat(_))));
        assert!(bn_stats(&BnState::new(2), &BnState::new(3)).is_err());
    }

    #[test]
    fn rb_swap_shifts_by_beta_difference() {
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f32);
        let t = bn(1.5, 0.25, 0.5, 2.0);
        let s = bn(-1.0, 1.0, 0.1, 0.5);
        let base = bn_forward_eval(&x, &t).unwrap();
        let y = predict_bn_swap(&x, &t, &s, ParamKind::BnRB).unwrap();
        for (a, b) in base.data().iter().zip(y.data()) {
            assert!((b - a - 0.75).abs() < 1e-6);
        }
        let same = predict_bn_swap(&x, &t, &t, ParamKind::BnRM).unwrap();
        assert!(same.max_abs_diff(&base) < 1e-6);
        assert!(predict_bn_swap(&x, &t, &s, ParamKind::ConvW).is_err());
    }

    #[test]
    fn guarded_weight_ratio() {
        let mut t = BnState::new(2);
        t.gamma = Tensor::new(&[2], vec![0.0, 2.0]).unwrap();
        let mut s = BnState::new(2);
        s.gamma = Tensor::new(&[2], vec![5.0, 1.0]).unwrap();
        assert_eq!(bn_stats(&t, &s).unwrap().mrw, 0.5);
    }
}
