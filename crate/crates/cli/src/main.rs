use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use prrm::analytics::{bn_stats_sweep, decide, rmse_sweep, ReuseDecision, Thresholds};
use prrm::data::{generate, Dataset, Domain, DomainSpec};
use prrm::io::{
    read_checkpoint, read_report, write_checkpoint, write_report, BnStatsReport, CheckpointMeta, RmseReport,
    TransferReport,
};
use prrm::probe::{run_probe_sweep, ProbeReport};
use prrm::repro::{run_repro, summary, ReproConfig, ReproData};
use prrm::train::{evaluate, run_transfer_experiment, train, Task, TrainConfig, TransferMode};
use prrm::{build_model, Arch, Exec, Model, ParamKind};

/// Layer-wise parameter reuse probing for small segmentation networks.
#[derive(Parser, Debug)]
#[command(name = "prrm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train a model from a fresh initialization.
    Train(TrainArgs),
    /// Substitute each source tensor into the target and record the Dice change.
    Probe(ProbeArgs),
    /// Per-layer RMSE between two checkpoints.
    Rmse(RmseArgs),
    /// Batch-norm shift and scale statistics between two checkpoints.
    BnStats(BnStatsArgs),
    /// Combine probe and RMSE reports into a reuse verdict.
    Decide(DecideArgs),
    /// Train on a small split, loading reusable parameters from a source.
    Transfer(TransferArgs),
    /// Run the pinned end-to-end experiment and write every artifact.
    Repro(ReproArgs),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    domain: Domain,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    arch: Arch,
    #[arg(long)]
    task: Task,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Domain label stored in the checkpoint metadata.
    #[arg(long, default_value = "A")]
    domain: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Comma-separated kinds, or `all`.
    #[arg(long, default_value = "all")]
    kinds: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RmseArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value = "conv_w,conv_b")]
    kinds: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BnStatsArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecideArgs {
    #[arg(long)]
    probe: PathBuf,
    #[arg(long)]
    rmse: PathBuf,
    #[arg(long)]
    baseline_rmse: PathBuf,
    #[arg(long, default_value_t = 0.02)]
    eps_drop: f64,
    #[arg(long, default_value_t = 0.5)]
    rn_frac: f64,
    #[arg(long, default_value_t = 0.5)]
    kappa: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    source: PathBuf,
    /// Decision report naming the keys to load.
    #[arg(long)]
    reusable: PathBuf,
    #[arg(long)]
    mode: TransferMode,
    #[arg(long)]
    samples: usize,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    /// Seed of the target's initialization and of batch shuffling.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Label for the source in the transfer table.
    #[arg(long, default_value = "source")]
    label: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReproArgs {
    #[arg(long)]
    outdir: PathBuf,
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Exit status for a failed run, chosen from the root cause.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<prrm::Error>() {
            return match e {
                prrm::Error::Numeric(_) | prrm::Error::UndefinedStat(_) => 3,
                prrm::Error::InvalidInput(_) | prrm::Error::InvalidState(_) => 1,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(read_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))?.0)
}

fn load_data(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).with_context(|| format!("reading dataset {}", path.display()))?;
    Dataset::from_bytes(&bytes).with_context(|| format!("parsing dataset {}", path.display()))
}

fn load_report<R: prrm::io::Report>(path: &Path) -> Result<R> {
    read_report(path).with_context(|| format!("reading report {}", path.display()))
}

fn save_report<R: prrm::io::Report>(report: &R, path: &Path) -> Result<()> {
    write_report(report, path).with_context(|| format!("writing {}", path.display()))
}

fn parse_kinds(s: &str) -> Result<Vec<ParamKind>> {
    let kinds = ParamKind::parse_list(s)?;
    if kinds.is_empty() {
        bail!(prrm::Error::InvalidInput("empty --kinds".into()));
    }
    Ok(kinds)
}

fn gen_data(a: &GenData) -> Result<()> {
    let d = generate(&DomainSpec::of(a.domain), a.n, a.seed);
    fs::write(&a.out, d.to_bytes()).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} samples of domain {} to {}", d.len(), a.domain, a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let val = load_data(&a.val)?;
    let cfg = TrainConfig { epochs: a.epochs, lr: a.lr, seed: a.seed, task: a.task, ..TrainConfig::default() };
    let (m, history) = train(&build_model(a.arch, a.seed), &data, &val, &cfg)?;
    for e in &history.epochs {
        println!("epoch {:>3}  loss {:.5}  val {:.4}", e.epoch, e.train_loss, e.val_metric);
    }
    let mut meta = CheckpointMeta::new(a.arch, a.task, a.domain.as_str(), a.seed, a.epochs);
    if a.task == Task::Seg && !val.is_empty() {
        meta.dice_per_class = Some(evaluate(&m, &val)?.dice_per_class);
    }
    write_checkpoint(&a.out, &m, &meta).with_context(|| format!("writing {}", a.out.display()))?;
    println!("model digest {}", m.digest());
    Ok(())
}

fn probe_cmd(a: &ProbeArgs) -> Result<()> {
    let mut target = load_model(&a.target)?;
    let source = load_model(&a.source)?;
    let val = load_data(&a.val)?;
    let report = run_probe_sweep(&mut target, &source, &val, &parse_kinds(&a.kinds)?)?;
    save_report(&report, &a.out)?;
    println!("baseline dice {:.4}, {} keys probed", report.baseline.dice_mean, report.records.len());
    Ok(())
}

fn rmse_cmd(a: &RmseArgs) -> Result<()> {
    let ma = load_model(&a.a)?;
    let mb = load_model(&a.b)?;
    let pairs = rmse_sweep(&ma, &mb, &parse_kinds(&a.kinds)?)?;
    let report = RmseReport { arch: ma.arch(), a_digest: ma.digest(), b_digest: mb.digest(), pairs };
    save_report(&report, &a.out)?;
    println!("{} tensors compared", report.pairs.len());
    Ok(())
}

fn bn_stats_cmd(a: &BnStatsArgs) -> Result<()> {
    let target = load_model(&a.target)?;
    let source = load_model(&a.source)?;
    let layers = bn_stats_sweep(&target, &source)?;
    let report =
        BnStatsReport { arch: target.arch(), target_digest: target.digest(), source_digest: source.digest(), layers };
    save_report(&report, &a.out)?;
    println!("{} batch-norm layers compared", report.layers.len());
    Ok(())
}

fn decide_cmd(a: &DecideArgs) -> Result<()> {
    let probe: ProbeReport = load_report(&a.probe)?;
    let rmse: RmseReport = load_report(&a.rmse)?;
    let baseline: RmseReport = load_report(&a.baseline_rmse)?;
    let thresholds = Thresholds { eps_drop: a.eps_drop, rn_frac: a.rn_frac, kappa: a.kappa };
    let d = decide(&probe, &rmse.pairs, &baseline.pairs, thresholds)?;
    save_report(&d, &a.out)?;
    println!("{} (reuse percentage {:.1}%)", d.verdict, d.reuse_percentage);
    Ok(())
}

fn transfer_cmd(a: &TransferArgs) -> Result<()> {
    let source = load_model(&a.source)?;
    let decision: ReuseDecision = load_report(&a.reusable)?;
    let data = load_data(&a.data)?;
    if a.samples > data.len() {
        bail!(prrm::Error::InvalidInput(format!("--samples {} exceeds the {} available", a.samples, data.len())));
    }
    let val = load_data(&a.val)?;
    let cfg = TrainConfig { epochs: a.epochs, lr: a.lr, seed: a.seed, ..TrainConfig::default() };
    let row = run_transfer_experiment(
        &source,
        &a.label,
        &decision.reusable_keys(),
        &data.subset(a.samples),
        &val,
        a.mode,
        &cfg,
    )?;
    println!("{} {} on {} samples: mean dice {:.4}", row.source, row.mode, row.samples, row.dice_mean);
    save_report(&TransferReport { arch: source.arch(), rows: vec![row] }, &a.out)?;
    Ok(())
}

fn repro_cmd(a: &ReproArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let mut v: serde_json::Value = serde_json::to_value(ReproConfig::default())?;
            let over: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            let Some(fields) = over.as_object() else {
                bail!(prrm::Error::Format("config must be a JSON object".into()))
            };
            for (k, val) in fields {
                if v.get(k).is_none() {
                    bail!(prrm::Error::Format(format!("unknown config field {k:?}")));
                }
                v[k] = val.clone();
            }
            serde_json::from_value(v).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ReproConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    println!("repro config: {}", serde_json::to_string(&cfg)?);

    let out = &a.outdir;
    fs::create_dir_all(out.join("data")).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let data = ReproData::generate(&cfg);
    for (name, d) in [
        ("train_A", &data.train_a),
        ("val_A", &data.val_a),
        ("small_A", &data.small_a),
        ("train_B", &data.train_b),
        ("train_C", &data.train_c),
    ] {
        fs::write(out.join("data").join(format!("{name}.prds")), d.to_bytes())?;
    }

    let outcomes = run_repro(&cfg, Exec::default())?;
    for o in &outcomes {
        let dir = out.join(o.arch.name());
        fs::create_dir_all(&dir)?;
        let c_seed = cfg.seed + cfg.independent_offset;
        for (name, m, task, domain, seed, epochs) in [
            ("seg_B", &o.seg_b, Task::Seg, "B", cfg.seed, cfg.pretrain_epochs),
            ("seg_A", &o.seg_a, Task::Seg, "A", cfg.seed, cfg.epochs),
            ("auto_A", &o.auto_a, Task::Auto, "A", cfg.seed, cfg.epochs),
            ("seg_C", &o.seg_c, Task::Seg, "C", c_seed, cfg.epochs),
        ] {
            let mut meta = CheckpointMeta::new(o.arch, task, domain, seed, epochs);
            if let Some((_, e)) = o.evals.iter().find(|(n, _)| n == name) {
                if task == Task::Seg {
                    meta.dice_per_class = Some(e.dice_per_class);
                }
            }
            write_checkpoint(&dir.join(format!("{name}.prrm")), m, &meta)?;
        }
        save_report(&o.probe_auto, &dir.join("probe_auto_A.json"))?;
        save_report(&o.probe_seg_c, &dir.join("probe_seg_C.json"))?;
        save_report(&o.rmse_baseline, &dir.join("rmse_baseline.json"))?;
        save_report(&o.rmse_auto, &dir.join("rmse_auto_A.json"))?;
        save_report(&o.rmse_seg_c, &dir.join("rmse_seg_C.json"))?;
        save_report(&o.rmse_seg_b, &dir.join("rmse_seg_B.json"))?;
        save_report(&o.bn_auto, &dir.join("bn_auto_A.json"))?;
        save_report(&o.bn_seg_c, &dir.join("bn_seg_C.json"))?;
        save_report(&o.decision_auto, &dir.join("decision_auto_A.json"))?;
        save_report(&o.decision_seg_c, &dir.join("decision_seg_C.json"))?;
        save_report(&o.transfer, &dir.join("transfer.json"))?;
    }
    let text = summary(&cfg, &outcomes);
    fs::write(out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Probe(a) => probe_cmd(a),
        Command::Rmse(a) => rmse_cmd(a),
        Command::BnStats(a) => bn_stats_cmd(a),
        Command::Decide(a) => decide_cmd(a),
        Command::Transfer(a) => transfer_cmd(a),
        Command::Repro(a) => repro_cmd(a),
    }
}

fn threads() -> Result<Option<usize>> {
    match std::env::var("PRRM_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("PRRM_THREADS={v:?} is not a count"))?;
            prrm::par::init_threads(n)?;
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = threads().and_then(|n| {
        let workers = n.map_or_else(|| "available parallelism".to_string(), |n| n.to_string());
        println!("resolved config: {:?} (workers: {workers})", cli.command);
        run(&cli)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
