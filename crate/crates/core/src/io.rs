//! Checkpoint files and report emission.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "PRRM" | u32 version | u32 len | metadata JSON | u32 len | manifest JSON | payload
//! ```
//!
//! The manifest lists every parameter slot as `{name, shape, dtype, offset,
//! nbytes}` with offsets relative to the payload start; the payload is the
//! concatenation of row-major f32 tensors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analytics::{BnShiftScaleStats, ReuseDecision, RmseRecord};
use crate::error::{Error, Result};
use crate::nn::{build_model, Arch, Model, ParamKey};
use crate::ops::{BN_EPS, BN_MOMENTUM};
use crate::probe::ProbeReport;
use crate::tensor::Tensor;
use crate::train::{Task, TransferRow};

pub const MAGIC: &[u8; 4] = b"PRRM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch_id: String,
    pub task: Task,
    pub domain: String,
    pub seed: u64,
    pub epochs: usize,
    /// Final validation Dice per class; absent for auto-encoders.
    pub dice_per_class: Option<[f64; 4]>,
    pub loss: String,
    pub bn_eps: f32,
    pub bn_momentum: f32,
}

impl CheckpointMeta {
    pub fn new(arch: Arch, task: Task, domain: impl Into<String>, seed: u64, epochs: usize) -> Self {
        Self {
            arch_id: arch.name().to_string(),
            task,
            domain: domain.into(),
            seed,
            epochs,
            dice_per_class: None,
            loss: task.loss_name().to_string(),
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

fn put_section(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| Error::Format("checkpoint section exceeds 4 GiB".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

pub fn save_checkpoint(m: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if meta.arch_id != m.arch().name() {
        return Err(Error::ArchMismatch(meta.arch_id.clone(), m.arch().name().into()));
    }
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    for key in m.param_keys() {
        let t = m.param(key)?;
        let offset = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push(ManifestEntry {
            name: key.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            nbytes: payload.len() - offset,
        });
    }
    let mut out = Vec::with_capacity(payload.len() + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_section(&mut out, &serde_json::to_vec(meta)?)?;
    put_section(&mut out, &serde_json::to_vec(&manifest)?)?;
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated in {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn section(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta: CheckpointMeta = serde_json::from_slice(r.section("metadata")?)?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(r.section("manifest")?)?;
    let payload = &bytes[r.pos..];
    let arch: Arch = meta.arch_id.parse()?;
    let mut m = build_model(arch, 0);

    let keys = m.param_keys();
    if manifest.len() != keys.len() {
        return Err(Error::Format(format!("manifest has {} entries, {arch} has {} slots", manifest.len(), keys.len())));
    }
    let mut expected_offset = 0usize;
    for (entry, &key) in manifest.iter().zip(&keys) {
        let named: ParamKey = entry.name.parse()?;
        if named != key {
            return Err(Error::Format(format!("manifest entry {} where {key} was expected", entry.name)));
        }
        if entry.dtype != "f32" {
            return Err(Error::Format(format!("{}: unsupported dtype {:?}", entry.name, entry.dtype)));
        }
        let expected_shape = m.param(key)?.shape();
        if entry.shape != expected_shape {
            return Err(Error::ShapeMismatch { key, expected: expected_shape.to_vec(), got: entry.shape.clone() });
        }
        let count: usize = entry.shape.iter().product();
        if entry.nbytes != 4 * count || entry.offset != expected_offset {
            return Err(Error::Format(format!(
                "{}: offset {} / {} bytes inconsistent with manifest",
                entry.name, entry.offset, entry.nbytes
            )));
        }
        let end = entry.offset + entry.nbytes;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "payload truncated: {} needs bytes up to {end}, have {}",
                entry.name,
                payload.len()
            )));
        }
        let data = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        m.set_param(key, Tensor::new(&entry.shape, data)?)?;
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(Error::Format(format!("payload has {} trailing bytes", payload.len() - expected_offset)));
    }
    Ok((m, meta))
}

pub fn write_checkpoint(path: &Path, m: &Model, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, save_checkpoint(m, meta)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    load_checkpoint(&fs::read(path)?)
}

/// A report with a JSON form and a flat CSV form for plotting.
pub trait Report: Serialize + DeserializeOwned {
    fn csv_header(&self) -> Vec<&'static str>;
    fn csv_rows(&self) -> Vec<Vec<String>>;
}

fn class_cells(d: &[f64; 4]) -> impl Iterator<Item = String> + '_ {
    d.iter().map(|v| v.to_string())
}

impl Report for ProbeReport {
    fn csv_header(&self) -> Vec<&'static str> {
        vec!["layer_id", "kind", "dice_c0", "dice_c1", "dice_c2", "dice_c3", "dice_mean", "delta"]
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.records
            .iter()
            .map(|r| {
                let mut row = vec![r.layer_id.to_string(), r.kind.to_string()];
                row.extend(class_cells(&r.dice_per_class));
                row.extend([r.dice_mean.to_string(), r.delta.to_string()]);
                row
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub arch: Arch,
    pub a_digest: String,
    pub b_digest: String,
    pub pairs: Vec<RmseRecord>,
}

impl Report for RmseReport {
    fn csv_header(&self) -> Vec<&'static str> {
        vec!["layer_id", "kind", "rmse"]
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|r| vec![r.layer_id.to_string(), r.kind.to_string(), r.rmse.to_string()]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStatsReport {
    pub arch: Arch,
    pub target_digest: String,
    pub source_digest: String,
    pub layers: Vec<BnShiftScaleStats>,
}

impl Report for BnStatsReport {
    fn csv_header(&self) -> Vec<&'static str> {
        vec!["layer_id", "mrm", "mrv", "mrw", "mrb"]
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.layers
            .iter()
            .map(|s| {
                vec![s.layer_id.to_string(), s.mrm.to_string(), s.mrv.to_string(), s.mrw.to_string(), s.mrb.to_string()]
            })
            .collect()
    }
}

impl Report for ReuseDecision {
    fn csv_header(&self) -> Vec<&'static str> {
        vec!["layer_id", "kind", "reusable"]
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut keys: Vec<(ParamKey, bool)> = self.reusable_keys().into_iter().map(|k| (k, true)).collect();
        keys.extend(self.non_reusable_keys.iter().map(|&k| (k, false)));
        keys.sort();
        keys.into_iter().map(|(k, r)| vec![k.layer_id.to_string(), k.kind.to_string(), r.to_string()]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub arch: Arch,
    pub rows: Vec<TransferRow>,
}

impl Report for TransferReport {
    fn csv_header(&self) -> Vec<&'static str> {
        vec!["source", "mode", "samples", "dice_c0", "dice_c1", "dice_c2", "dice_c3", "dice_mean"]
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut row = vec![r.source.clone(), r.mode.to_string(), r.samples.to_string()];
                row.extend(class_cells(&r.dice_per_class));
                row.push(r.dice_mean.to_string());
                row
            })
            .collect()
    }
}

/// Path of the CSV companion written next to a JSON report.
pub fn csv_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("csv")
}

pub fn report_json<R: Report>(report: &R) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn report_csv<R: Report>(report: &R) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(report.csv_header())?;
    for row in report.csv_rows() {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes `path` as JSON and the CSV form beside it.
pub fn write_report<R: Report>(report: &R, path: &Path) -> Result<()> {
    fs::write(path, report_json(report)?)?;
    fs::write(csv_path(path), report_csv(report)?)?;
    Ok(())
}

pub fn read_report<R: Report>(path: &Path) -> Result<R> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    fn meta(arch: Arch) -> CheckpointMeta {
        CheckpointMeta::new(arch, Task::Seg, "A", 3, 0)
    }

    #[test]
    fn round_trip_bytes_and_params() {
        for arch in Arch::ALL {
            let m = build_model(arch, 9);
            let bytes = save_checkpoint(&m, &meta(arch)).unwrap();
            let (back, md) = load_checkpoint(&bytes).unwrap();
            assert!(back.params_bit_eq(&m));
            assert_eq!(md, meta(arch));
            assert_eq!(save_checkpoint(&back, &md).unwrap(), bytes);
        }
    }

    #[test]
    fn manifest_count() {
        let m = build_model(Arch::MiniLong, 0);
        let bytes = save_checkpoint(&m, &meta(Arch::MiniLong)).unwrap();
        let mut r = Reader { bytes: &bytes, pos: 8 };
        r.section("metadata").unwrap();
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(r.section("manifest").unwrap()).unwrap();
        assert_eq!(manifest.len(), 62);
        assert_eq!(manifest[0].name, "L1.conv_w");
    }

    #[test]
    fn malformed_inputs() {
        let m = build_model(Arch::MiniShort, 0);
        let bytes = save_checkpoint(&m, &meta(Arch::MiniShort)).unwrap();
        assert!(matches!(load_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(load_checkpoint(&bad), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(load_checkpoint(&extra).is_err());
        let mut md = meta(Arch::MiniShort);
        md.arch_id = "mini_long".into();
        assert!(save_checkpoint(&m, &md).is_err());
    }

    fn split(bytes: &[u8]) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let mut r = Reader { bytes, pos: 8 };
        let meta = r.section("metadata").unwrap().to_vec();
        let manifest = r.section("manifest").unwrap().to_vec();
        (meta, manifest, bytes[r.pos..].to_vec())
    }

    fn assemble(meta: &str, manifest: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = b"PRRM".to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_section(&mut out, meta.as_bytes()).unwrap();
        put_section(&mut out, manifest.as_bytes()).unwrap();
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn unknown_arch_and_shape_mismatch() {
        let m = build_model(Arch::MiniShort, 0);
        let (meta, manifest, payload) = split(&save_checkpoint(&m, &meta(Arch::MiniShort)).unwrap());
        let meta = String::from_utf8(meta).unwrap();
        let manifest = String::from_utf8(manifest).unwrap();
        assert!(load_checkpoint(&assemble(&meta, &manifest, &payload)).is_ok());

        let b = assemble(&meta.replace("mini_short", "mini_wide"), &manifest, &payload);
        assert!(matches!(load_checkpoint(&b), Err(Error::Format(e)) if e.contains("mini_wide")));
        let b = assemble(&meta, &manifest.replacen("[16,1,3,3]", "[16,3,1,3]", 1), &payload);
        assert!(matches!(load_checkpoint(&b), Err(Error::ShapeMismatch { .. })));
        let b = assemble(&meta, &manifest.replacen("L1.conv_b", "L2.conv_b", 1), &payload);
        assert!(matches!(load_checkpoint(&b), Err(Error::Format(_))));
    }

    #[test]
    fn reports_json_and_csv() {
        let report = RmseReport {
            arch: Arch::MiniShort,
            a_digest: "a".into(),
            b_digest: "b".into(),
            pairs: vec![RmseRecord { layer_id: 1, kind: ParamKind::ConvW, rmse: 0.5 }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rmse.json");
        write_report(&report, &p).unwrap();
        let back: RmseReport = read_report(&p).unwrap();
        assert_eq!(back, report);
        let csv = fs::read_to_string(csv_path(&p)).unwrap();
        assert_eq!(csv, "layer_id,kind,rmse\n1,conv_w,0.5\n");
        assert!(write_report(&report, &dir.path().join("missing/x.json")).is_err());
    }
}
