//! Checkpoint, dataset and report round trips, plus committed golden files.
//!
//! Set `PRRM_BLESS=1` to rewrite the golden files after an intentional
//! format change.

use std::fs;
use std::path::PathBuf;

use prrm::data::{generate, Dataset, Domain, DomainSpec};
use prrm::io::{load_checkpoint, read_report, report_json, save_checkpoint, CheckpointMeta};
use prrm::probe::run_probe_sweep;
use prrm::probe::ProbeReport;
use prrm::train::Task;
use prrm::{build_model, Arch, ParamKind};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn blessing() -> bool {
    std::env::var("PRRM_BLESS").is_ok_and(|v| v == "1")
}

fn golden_meta() -> CheckpointMeta {
    CheckpointMeta::new(Arch::MiniShort, Task::Seg, "A", 7, 0)
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    for arch in Arch::ALL {
        for seed in [0, 1, 99] {
            let m = build_model(arch, seed);
            let meta = CheckpointMeta::new(arch, Task::Auto, "B", seed, 3);
            let bytes = save_checkpoint(&m, &meta).unwrap();
            let (back, back_meta) = load_checkpoint(&bytes).unwrap();
            assert!(back.params_bit_eq(&m));
            assert_eq!(back.digest(), m.digest());
            assert_eq!(save_checkpoint(&back, &back_meta).unwrap(), bytes);
        }
    }
}

#[test]
fn dataset_round_trip_is_byte_identical() {
    for (domain, n) in [(Domain::A, 5), (Domain::B, 1), (Domain::C, 3)] {
        let d = generate(&DomainSpec::of(domain), n, 4);
        let bytes = d.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(buf.as_slice()).unwrap(), d);
    }
    let empty = generate(&DomainSpec::of(Domain::A), 0, 1);
    assert_eq!(Dataset::from_bytes(&empty.to_bytes()).unwrap().len(), 0);
}

#[test]
fn dataset_rejects_corruption() {
    let bytes = generate(&DomainSpec::of(Domain::A), 2, 4).to_bytes();
    assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'Q';
    assert!(Dataset::from_bytes(&bad).is_err());
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] = 9;
    assert!(Dataset::from_bytes(&bad).is_err());
}

#[test]
fn golden_checkpoint() {
    let m = build_model(Arch::MiniShort, 7);
    let bytes = save_checkpoint(&m, &golden_meta()).unwrap();
    let path = fixture("mini_short_seed7.prrm");
    if blessing() {
        fs::write(&path, &bytes).unwrap();
    }
    let golden = fs::read(&path).unwrap();
    let (loaded, meta) = load_checkpoint(&golden).unwrap();
    assert_eq!(meta, golden_meta());
    assert_eq!(loaded.arch(), Arch::MiniShort);
    assert_eq!(save_checkpoint(&loaded, &meta).unwrap(), golden);
    // Initialization uses only IEEE arithmetic, so it reproduces the file exactly.
    assert_eq!(golden, bytes);
}

#[test]
fn golden_dataset() {
    let path = fixture("domain_a_n4_seed5.prds");
    if blessing() {
        fs::write(&path, generate(&DomainSpec::of(Domain::A), 4, 5).to_bytes()).unwrap();
    }
    let golden = fs::read(&path).unwrap();
    let d = Dataset::from_bytes(&golden).unwrap();
    assert_eq!((d.len(), d.height, d.width), (4, 32, 32));
    assert_eq!(d.to_bytes(), golden);
    assert!(d.samples.iter().all(|s| s.image.iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn golden_probe_report() {
    let path = fixture("probe_report.json");
    if blessing() {
        let val = generate(&DomainSpec::of(Domain::A), 4, 5);
        let mut target = build_model(Arch::MiniShort, 7);
        let source = build_model(Arch::MiniShort, 8);
        let report = run_probe_sweep(&mut target, &source, &val, &[ParamKind::ConvB, ParamKind::BnRB]).unwrap();
        fs::write(&path, report_json(&report).unwrap()).unwrap();
    }
    let report: ProbeReport = read_report(&path).unwrap();
    assert_eq!(report.arch, Arch::MiniShort);
    assert_eq!(report.records.len(), 11 + 9);
    assert_eq!(report_json(&report).unwrap(), fs::read_to_string(&path).unwrap());
}
