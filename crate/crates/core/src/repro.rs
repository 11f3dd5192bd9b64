//! The pinned-seed end-to-end experiment: train source and target models,
//! probe and compare them, decide reusability and run the transfer table.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::analytics::{bn_stats_sweep, decide, rmse_sweep, ReuseDecision, Thresholds};
use crate::data::{generate, Dataset, Domain, DomainSpec};
use crate::error::Result;
use crate::io::{BnStatsReport, RmseReport, TransferReport};
use crate::nn::{build_model, Arch, LayerRole, Model, ParamKey, ParamKind};
use crate::par::Exec;
use crate::probe::{run_probe_sweep_with, ProbeReport};
use crate::train::{evaluate_with, run_transfer_experiment, train, EvalResult, Task, TrainConfig, TransferMode};

pub const DOMAIN_MAPPING: [(Domain, &str); 3] = [
    (Domain::A, "target domain (stands in for the cine cardiac MR target)"),
    (Domain::B, "similar source domain (stands in for the T1 source)"),
    (Domain::C, "dissimilar source domain (stands in for the RV segmentation source)"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproConfig {
    pub seed: u64,
    pub archs: Vec<Arch>,
    /// Data seeds are `data_seed + 0..5` for A-train, A-val, C-train, A-small, B-train.
    pub data_seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub small_samples: usize,
    /// Epochs and learning rate of the domain-B segmentation model.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f32,
    /// Start the domain-A and domain-C models from a domain-B pre-trained
    /// network instead of a fresh initialization.
    pub backbone: bool,
    /// Epochs and learning rate for the domain-A and domain-C models.
    pub epochs: usize,
    pub lr: f32,
    pub transfer_epochs: usize,
    pub transfer_lr: f32,
    /// The domain-C model's lineage starts from `seed + independent_offset`.
    pub independent_offset: u64,
    /// RMSE baseline partner is a fresh init from `seed + baseline_offset`.
    pub baseline_offset: u64,
    pub thresholds: Thresholds,
}

impl Default for ReproConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            archs: vec![Arch::MiniShort, Arch::MiniLong],
            data_seed: 11,
            train_samples: 256,
            val_samples: 128,
            small_samples: 32,
            pretrain_epochs: 8,
            pretrain_lr: 0.05,
            backbone: false,
            epochs: 8,
            lr: 0.05,
            transfer_epochs: 15,
            transfer_lr: 0.05,
            independent_offset: 500,
            baseline_offset: 1000,
            thresholds: Thresholds::default(),
        }
    }
}

pub struct ReproData {
    pub train_a: Dataset,
    pub val_a: Dataset,
    pub small_a: Dataset,
    pub train_b: Dataset,
    pub train_c: Dataset,
}

impl ReproData {
    pub fn generate(cfg: &ReproConfig) -> Self {
        let s = cfg.data_seed;
        let a = DomainSpec::of(Domain::A);
        Self {
            train_a: generate(&a, cfg.train_samples, s),
            val_a: generate(&a, cfg.val_samples, s + 1),
            train_c: generate(&DomainSpec::of(Domain::C), cfg.train_samples, s + 2),
            small_a: generate(&a, cfg.small_samples, s + 3),
            train_b: generate(&DomainSpec::of(Domain::B), cfg.train_samples, s + 4),
        }
    }
}

/// Everything one architecture contributes to the experiment.
pub struct ArchOutcome {
    pub arch: Arch,
    pub seg_b: Model,
    pub seg_a: Model,
    pub auto_a: Model,
    pub seg_c: Model,
    pub evals: Vec<(String, EvalResult)>,
    pub probe_auto: ProbeReport,
    pub probe_seg_c: ProbeReport,
    pub rmse_baseline: RmseReport,
    pub rmse_auto: RmseReport,
    pub rmse_seg_c: RmseReport,
    pub rmse_seg_b: RmseReport,
    pub bn_auto: BnStatsReport,
    pub bn_seg_c: BnStatsReport,
    pub decision_auto: ReuseDecision,
    pub decision_seg_c: ReuseDecision,
    pub transfer: TransferReport,
    /// Median ConvW probe delta over the layers the trend comparison uses.
    pub median_conv_w_delta: f64,
}

impl ArchOutcome {
    pub fn transfer_dice(&self, source: &str, mode: TransferMode) -> Option<f64> {
        self.transfer
            .rows
            .iter()
            .find(|r| r.mode == mode && (mode == TransferMode::Scratch || r.source == source))
            .map(|r| r.dice_mean)
    }
}

/// Seeds of the pinned end-to-end runs.
pub const REPRO_SEEDS: [u64; 3] = [1, 2, 3];

pub const SOURCE_AUTO_A: &str = "auto_A";
pub const SOURCE_SEG_C: &str = "seg_C";

/// ConvW layers whose probe deltas enter the trend median: residual branch
/// convs not flagged as feature-decomposition layers for MiniShort, every
/// conv for MiniLong.
pub fn trend_layers(m: &Model) -> Vec<usize> {
    let meta = m.conv_meta();
    match m.arch() {
        Arch::MiniLong => meta.iter().map(|c| c.layer_id).collect(),
        Arch::MiniShort => meta
            .iter()
            .filter(|c| c.role == LayerRole::ResidualBranch && !c.is_feature_decomposition())
            .map(|c| c.layer_id)
            .collect(),
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn train_cfg(seed: u64, task: Task, epochs: usize, lr: f32) -> TrainConfig {
    TrainConfig { epochs, seed, lr, task, ..TrainConfig::default() }
}

fn seg_b_from(init: &Model, seed: u64, cfg: &ReproConfig, data: &ReproData) -> Result<Model> {
    let pre = train_cfg(seed, Task::Seg, cfg.pretrain_epochs, cfg.pretrain_lr);
    Ok(train(init, &data.train_b, &data.val_a, &pre)?.0)
}

/// Starting point for models trained from `seed`: the fresh init, or that
/// init pre-trained on domain B when `cfg.backbone` is set.
fn start_from(arch: Arch, seed: u64, cfg: &ReproConfig, data: &ReproData) -> Result<Model> {
    let init = build_model(arch, seed);
    if cfg.backbone {
        seg_b_from(&init, seed, cfg, data)
    } else {
        Ok(init)
    }
}

pub fn run_arch(arch: Arch, cfg: &ReproConfig, data: &ReproData, exec: Exec) -> Result<ArchOutcome> {
    let seed = cfg.seed;
    let start = start_from(arch, seed, cfg, data)?;
    let seg_b = if cfg.backbone { start.clone() } else { seg_b_from(&start, seed, cfg, data)? };
    let seg_a = train(&start, &data.train_a, &data.val_a, &train_cfg(seed, Task::Seg, cfg.epochs, cfg.lr))?.0;
    let auto_a = train(&start, &data.train_a, &data.val_a, &train_cfg(seed, Task::Auto, cfg.epochs, cfg.lr))?.0;
    let other = start_from(arch, seed + cfg.independent_offset, cfg, data)?;
    let seg_c = train(&other, &data.train_c, &data.val_a, &train_cfg(seed, Task::Seg, cfg.epochs, cfg.lr))?.0;
    let fresh = build_model(arch, seed + cfg.baseline_offset);

    let mut evals = Vec::new();
    for (name, m) in [("seg_B", &seg_b), ("seg_A", &seg_a), ("auto_A", &auto_a), ("seg_C", &seg_c)] {
        evals.push((name.to_string(), evaluate_with(exec, m, &data.val_a)?));
    }

    let mut target = seg_a.clone();
    let probe_auto = run_probe_sweep_with(exec, &mut target, &auto_a, &data.val_a, &ParamKind::ALL)?;
    let probe_seg_c = run_probe_sweep_with(exec, &mut target, &seg_c, &data.val_a, &ParamKind::ALL)?;

    let rmse_report = |b: &Model| -> Result<RmseReport> {
        Ok(RmseReport {
            arch,
            a_digest: seg_a.digest(),
            b_digest: b.digest(),
            pairs: rmse_sweep(&seg_a, b, &ParamKind::CONV)?,
        })
    };
    let rmse_baseline = rmse_report(&fresh)?;
    let rmse_auto = rmse_report(&auto_a)?;
    let rmse_seg_c = rmse_report(&seg_c)?;
    let rmse_seg_b = rmse_report(&seg_b)?;
    let bn_report = |s: &Model| -> Result<BnStatsReport> {
        Ok(BnStatsReport {
            arch,
            target_digest: seg_a.digest(),
            source_digest: s.digest(),
            layers: bn_stats_sweep(&seg_a, s)?,
        })
    };
    let bn_auto = bn_report(&auto_a)?;
    let bn_seg_c = bn_report(&seg_c)?;

    let decision_auto = decide(&probe_auto, &rmse_auto.pairs, &rmse_baseline.pairs, cfg.thresholds)?;
    let decision_seg_c = decide(&probe_seg_c, &rmse_seg_c.pairs, &rmse_baseline.pairs, cfg.thresholds)?;

    let tcfg = train_cfg(seed, Task::Seg, cfg.transfer_epochs, cfg.transfer_lr);
    let mut rows = vec![run_transfer_experiment(
        &auto_a,
        SOURCE_AUTO_A,
        &BTreeSet::new(),
        &data.small_a,
        &data.val_a,
        TransferMode::Scratch,
        &tcfg,
    )?];
    for (label, src, keys) in [
        (SOURCE_AUTO_A, &auto_a, decision_auto.reusable_keys()),
        (SOURCE_SEG_C, &seg_c, decision_seg_c.reusable_keys()),
    ] {
        for mode in [TransferMode::Freeze, TransferMode::Finetune] {
            rows.push(run_transfer_experiment(src, label, &keys, &data.small_a, &data.val_a, mode, &tcfg)?);
        }
    }

    let layers = trend_layers(&seg_a);
    let median_conv_w_delta = median(
        probe_auto.deltas(ParamKind::ConvW).into_iter().filter(|(l, _)| layers.contains(l)).map(|(_, d)| d).collect(),
    );

    Ok(ArchOutcome {
        arch,
        seg_b,
        seg_a,
        auto_a,
        seg_c,
        evals,
        probe_auto,
        probe_seg_c,
        rmse_baseline,
        rmse_auto,
        rmse_seg_c,
        rmse_seg_b,
        bn_auto,
        bn_seg_c,
        decision_auto,
        decision_seg_c,
        transfer: TransferReport { arch, rows },
        median_conv_w_delta,
    })
}

pub fn run_repro(cfg: &ReproConfig, exec: Exec) -> Result<Vec<ArchOutcome>> {
    let data = ReproData::generate(cfg);
    cfg.archs.iter().map(|&a| run_arch(a, cfg, &data, exec)).collect()
}

fn keys_text(keys: &BTreeSet<ParamKey>) -> String {
    let mut by_kind: Vec<String> = Vec::new();
    for kind in ParamKind::ALL {
        let ids: Vec<String> = keys.iter().filter(|k| k.kind == kind).map(|k| k.layer_id.to_string()).collect();
        if !ids.is_empty() {
            by_kind.push(format!("{}: {}", kind.name(), ids.join(",")));
        }
    }
    by_kind.join("; ")
}

/// Plain-text summary. Contains only values derived from the run, so two runs
/// with the same config produce identical text.
pub fn summary(cfg: &ReproConfig, outcomes: &[ArchOutcome]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# prrm repro summary");
    let _ = writeln!(s, "# domain mapping:");
    for (d, what) in DOMAIN_MAPPING {
        let _ = writeln!(s, "#   {d} = {what}");
    }
    let _ = writeln!(s, "# config: {}", serde_json::to_string(cfg).unwrap_or_default());
    for o in outcomes {
        let _ = writeln!(s, "\n## {}", o.arch);
        for (name, e) in &o.evals {
            let _ = writeln!(s, "val dice on A, {name:<7} {:.4}", e.dice_mean);
        }
        let _ = writeln!(
            s,
            "median ConvW probe delta (auto_A -> seg_A, layers {:?}): {:.4}",
            trend_layers(&o.seg_a),
            o.median_conv_w_delta
        );
        for (label, d) in [(SOURCE_AUTO_A, &o.decision_auto), (SOURCE_SEG_C, &o.decision_seg_c)] {
            let _ = writeln!(
                s,
                "decision {label} -> seg_A: {} (reusable network {}, rmse ok {}, ConvW reusable fraction {:.3}, reuse {:.1}%)",
                d.verdict, d.is_reusable_network, d.rmse_ok, d.conv_w_reusable_fraction, d.reuse_percentage
            );
            let _ = writeln!(s, "  reusable keys: {}", keys_text(&d.reusable_keys()));
        }
        let _ = writeln!(
            s,
            "transfer on {} samples, {} epochs:",
            o.transfer.rows.first().map_or(0, |r| r.samples),
            cfg.transfer_epochs
        );
        let _ = writeln!(
            s,
            "  {:<8} {:<9} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "source", "mode", "bg", "c1", "c2", "c3", "mean"
        );
        for r in &o.transfer.rows {
            let d = r.dice_per_class;
            let _ = writeln!(
                s,
                "  {:<8} {:<9} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
                r.source,
                r.mode.to_string(),
                d[0],
                d[1],
                d[2],
                d[3],
                r.dice_mean
            );
        }
    }
    s
}
