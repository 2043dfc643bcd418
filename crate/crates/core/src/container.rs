//! On-disk dataset layout: `manifest.toml` plus one `EITD` blob per record.
//! The byte layout is described in `docs/FORMATS.md`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{BoundaryTrace, ScalarField, VectorField};
use crate::grid::{CartesianGrid, ConductivitySample, IndexField, Shape};
use crate::pipeline::{generate_records, CauchyPair, DatasetConfig, TrainingRecord};

pub const RECORD_MAGIC: &[u8; 4] = b"EITD";
pub const RECORD_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FIELD_MAGIC: &[u8; 4] = b"EITI";
pub const FIELD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub config: DatasetConfig,
    pub records: Vec<RecordEntry>,
}

impl Manifest {
    /// Digest over the record digests, in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(r.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn array(&mut self, dims: &[usize], values: &[f64]) {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        self.u32(dims.len() as u32);
        for d in dims {
            self.u32(*d as u32);
        }
        for v in values {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::Format { kind: "EITD record", reason: reason.into() }
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(malformed("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn array(&mut self, dims: &[usize]) -> Result<Vec<f64>> {
        let nd = self.u32()? as usize;
        let got = (0..nd).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if got != dims {
            return Err(malformed(format!("array dims {got:?}, expected {dims:?}")));
        }
        (0..dims.iter().product::<usize>()).map(|_| self.f64()).collect()
    }
}

fn shape_params(s: &Shape) -> (u32, Vec<f64>) {
    match s {
        Shape::Circle { center, radius } => (0, vec![center[0], center[1], *radius]),
        Shape::Ellipse { center, semi_major, semi_minor, rotation } => (1, vec![center[0], center[1], *semi_major, *semi_minor, *rotation]),
        Shape::Polygon { vertices } => (2, vertices.iter().flat_map(|v| [v[0], v[1]]).collect()),
        Shape::RectAnnulus { center, outer, inner } => (3, vec![center[0], center[1], outer[0], outer[1], inner[0], inner[1]]),
    }
}

fn shape_from(tag: u32, p: &[f64]) -> Result<Shape> {
    let need = |n: usize| if p.len() == n { Ok(()) } else { Err(malformed(format!("shape {tag} with {} parameters", p.len()))) };
    Ok(match tag {
        0 => {
            need(3)?;
            Shape::Circle { center: [p[0], p[1]], radius: p[2] }
        }
        1 => {
            need(5)?;
            Shape::Ellipse { center: [p[0], p[1]], semi_major: p[2], semi_minor: p[3], rotation: p[4] }
        }
        2 => {
            if !p.len().is_multiple_of(2) {
                return Err(malformed("odd polygon coordinate count"));
            }
            Shape::Polygon { vertices: p.chunks(2).map(|c| [c[0], c[1]]).collect() }
        }
        3 => {
            need(6)?;
            Shape::RectAnnulus { center: [p[0], p[1]], outer: [p[2], p[3]], inner: [p[4], p[5]] }
        }
        _ => return Err(malformed(format!("unknown shape tag {tag}"))),
    })
}

pub fn encode_record(rec: &TrainingRecord) -> Vec<u8> {
    let g = rec.grid();
    let m = g.boundary_len();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(RECORD_MAGIC);
    w.u32(RECORD_VERSION);
    w.u32(g.n1 as u32);
    w.u32(g.n2 as u32);
    for b in [g.x_min, g.x_max, g.y_min, g.y_max] {
        w.f64(b);
    }
    w.u32(rec.pairs.len() as u32);
    w.u32(m as u32);
    w.f64(rec.sample.sigma_inclusion);
    w.f64(rec.sample.sigma_background);
    w.u32(rec.sample.shapes.len() as u32);
    for s in &rec.sample.shapes {
        let (tag, p) = shape_params(s);
        w.u32(tag);
        w.u32(p.len() as u32);
        p.iter().for_each(|v| w.f64(*v));
    }
    let plane = [g.n2, g.n1];
    w.array(&plane, &rec.sigma.values);
    w.array(&plane, &rec.truth.values);
    for (k, pair) in rec.pairs.iter().enumerate() {
        w.u32(pair.omega);
        w.array(&[m], &pair.g.values);
        w.array(&[m], &pair.f.values);
        w.array(&plane, &rec.phi[k].values);
        let mut grad = rec.grad[k].dx.clone();
        grad.extend_from_slice(&rec.grad[k].dy);
        w.array(&[2, g.n2, g.n1], &grad);
    }
    w.0
}

pub fn decode_record(bytes: &[u8]) -> Result<TrainingRecord> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != RECORD_MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = r.u32()?;
    if version != RECORD_VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let (n1, n2) = (r.u32()? as usize, r.u32()? as usize);
    let b = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
    let grid = CartesianGrid::with_bounds(n1, n2, [b[0], b[1]], [b[2], b[3]]).map_err(|e| malformed(e.to_string()))?;
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    if m != grid.boundary_len() {
        return Err(malformed("boundary length does not match the grid"));
    }
    let sigma_inclusion = r.f64()?;
    let sigma_background = r.f64()?;
    let count = r.u32()?;
    let mut shapes = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let tag = r.u32()?;
        let len = r.u32()? as usize;
        let p = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        shapes.push(shape_from(tag, &p)?);
    }
    let plane = [n2, n1];
    let sigma = ScalarField { grid: grid.clone(), values: r.array(&plane)? };
    let truth = IndexField::new(grid.clone(), r.array(&plane)?).map_err(|e| malformed(e.to_string()))?;
    let layout = grid.boundary_loop();
    let mut pairs = Vec::with_capacity(n);
    let mut phi = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n);
    for _ in 0..n {
        let omega = r.u32()?;
        let g = BoundaryTrace { layout: layout.clone(), values: r.array(&[m])? };
        let f = BoundaryTrace { layout: layout.clone(), values: r.array(&[m])? };
        pairs.push(CauchyPair { omega, g, f });
        phi.push(ScalarField { grid: grid.clone(), values: r.array(&plane)? });
        let mut d = r.array(&[2, n2, n1])?;
        let dy = d.split_off(grid.len());
        grad.push(VectorField { grid: grid.clone(), dx: d, dy });
    }
    if r.pos != bytes.len() {
        return Err(malformed("trailing bytes"));
    }
    let sample = ConductivitySample { shapes, sigma_inclusion, sigma_background };
    Ok(TrainingRecord { sample, sigma, pairs, phi, grad, truth })
}

fn record_file(index: usize) -> String {
    format!("record_{index:06}.eitd")
}

/// Writes already generated records; on failure everything written so far
/// is removed.
pub fn write_dataset(cfg: &DatasetConfig, records: &[TrainingRecord], dir: &Path) -> Result<Manifest> {
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(records.len());
        for (k, rec) in records.iter().enumerate() {
            let bytes = encode_record(rec);
            let name = record_file(cfg.first_index + k);
            let path = dir.join(&name);
            written.push(path.clone());
            fs::write(&path, &bytes)?;
            entries.push(RecordEntry { file: name, sha256: sha256_hex(&bytes) });
        }
        let manifest = Manifest { format: "EITD".into(), format_version: RECORD_VERSION, config: cfg.clone(), records: entries };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        written.push(path.clone());
        let mut f = fs::File::create(&path)?;
        f.write_all(text.as_bytes())?;
        Ok(manifest)
    })();
    if result.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
    }
    result
}

pub fn generate_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Manifest> {
    let records = generate_records(cfg)?;
    write_dataset(cfg, &records, dir)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<TrainingRecord>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Format { kind: "manifest", reason: e.to_string() })?;
    if m.format != "EITD" || m.format_version != RECORD_VERSION {
        return Err(Error::Format { kind: "manifest", reason: format!("unsupported format {} v{}", m.format, m.format_version) });
    }
    Ok(m)
}

/// Loads and digest-checks a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let records = manifest
        .records
        .par_iter()
        .map(|e| {
            let bytes = fs::read(dir.join(&e.file))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(Error::Format { kind: "EITD record", reason: format!("{}: digest mismatch", e.file) });
            }
            decode_record(&bytes)
        })
        .collect::<Result<Vec<_>>>()?;
    let (n1, n2) = (manifest.config.n1, manifest.config.n2);
    if records.iter().any(|r| r.grid().n1 != n1 || r.grid().n2 != n2 || r.pair_count() != manifest.config.pairs) {
        return Err(Error::Format { kind: "dataset", reason: "records do not match the manifest".into() });
    }
    Ok(Dataset { manifest, records })
}

/// `EITI` blob: magic, version, `n1`, `n2`, the four bounds, then the
/// nodal values.
pub fn encode_index_field(field: &IndexField) -> Vec<u8> {
    let g = &field.grid;
    let mut w = Writer(Vec::with_capacity(48 + 8 * field.values.len()));
    w.0.extend_from_slice(FIELD_MAGIC);
    w.u32(FIELD_VERSION);
    w.u32(g.n1 as u32);
    w.u32(g.n2 as u32);
    for b in [g.x_min, g.x_max, g.y_min, g.y_max] {
        w.f64(b);
    }
    for v in &field.values {
        w.f64(*v);
    }
    w.0
}

pub fn decode_index_field(bytes: &[u8]) -> Result<IndexField> {
    let bad = |r: &str| Error::Format { kind: "EITI field", reason: r.to_string() };
    if bytes.len() < 48 || &bytes[..4] != FIELD_MAGIC {
        return Err(bad("bad magic or truncated header"));
    }
    let u = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes"));
    let f = |k: usize| f64::from_le_bytes(bytes[k..k + 8].try_into().expect("8 bytes"));
    if u(4) != FIELD_VERSION {
        return Err(bad("unsupported version"));
    }
    let (n1, n2) = (u(8) as usize, u(12) as usize);
    if bytes.len() != 48 + 8 * n1 * n2 {
        return Err(bad("length does not match the grid"));
    }
    let grid = CartesianGrid::with_bounds(n1, n2, [f(16), f(24)], [f(32), f(40)]).map_err(|e| bad(&e.to_string()))?;
    let values = (0..n1 * n2).map(|k| f(48 + 8 * k)).collect();
    IndexField::new(grid, values).map_err(|e| bad(&e.to_string()))
}

pub const PREDICTIONS_FILE: &str = "predictions.toml";

/// Listing of a directory of `EITI` blobs, one per dataset record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub format: String,
    pub format_version: u32,
    pub method: String,
    /// Digest of the dataset the predictions were made for.
    pub dataset_digest: String,
    pub records: Vec<RecordEntry>,
}

impl PredictionSet {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(r.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn write_predictions(dir: &Path, method: &str, dataset: &Manifest, fields: &[IndexField]) -> Result<PredictionSet> {
    if fields.len() != dataset.records.len() {
        return Err(Error::shape(format!("{} predictions for {} records", fields.len(), dataset.records.len())));
    }
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(fields.len());
    for (k, f) in fields.iter().enumerate() {
        let bytes = encode_index_field(f);
        let name = format!("pred_{:06}.eiti", dataset.config.first_index + k);
        fs::write(dir.join(&name), &bytes)?;
        records.push(RecordEntry { file: name, sha256: sha256_hex(&bytes) });
    }
    let set = PredictionSet { format: "EITI".into(), format_version: FIELD_VERSION, method: method.into(), dataset_digest: dataset.digest(), records };
    let text = toml::to_string(&set).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(PREDICTIONS_FILE), text)?;
    Ok(set)
}

pub fn load_predictions(dir: &Path) -> Result<(PredictionSet, Vec<IndexField>)> {
    let text = fs::read_to_string(dir.join(PREDICTIONS_FILE))?;
    let set: PredictionSet = toml::from_str(&text).map_err(|e| Error::Format { kind: "prediction listing", reason: e.to_string() })?;
    if set.format != "EITI" || set.format_version != FIELD_VERSION {
        return Err(Error::Format { kind: "prediction listing", reason: format!("unsupported format {} v{}", set.format, set.format_version) });
    }
    let fields = set
        .records
        .iter()
        .map(|e| {
            let bytes = fs::read(dir.join(&e.file))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(Error::Format { kind: "EITI field", reason: format!("{}: digest mismatch", e.file) });
            }
            decode_index_field(&bytes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((set, fields))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetConfig {
        DatasetConfig { scenario: 3, samples: 2, pairs: 2, n1: 16, n2: 16, master_seed: 5, tolerance: 1e-10, first_index: 0 }
    }

    #[test]
    fn index_field_round_trips() {
        let g = CartesianGrid::new(5, 3).unwrap();
        let f = IndexField::new(g, (0..15).map(|k| k as f64 / 14.0).collect()).unwrap();
        let bytes = encode_index_field(&f);
        assert_eq!(decode_index_field(&bytes).unwrap(), f);
        assert!(decode_index_field(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_index_field(&bad).is_err());
    }

    #[test]
    fn record_round_trips_bit_exactly() {
        let recs = generate_records(&tiny()).unwrap();
        let bytes = encode_record(&recs[0]);
        assert_eq!(&bytes[..4], b"EITD");
        let back = decode_record(&bytes).unwrap();
        assert_eq!(encode_record(&back), bytes);
        assert_eq!(back.sample, recs[0].sample);
        assert_eq!(back.grad, recs[0].grad);
    }

    #[test]
    fn malformed_blobs_are_rejected() {
        let recs = generate_records(&tiny()).unwrap();
        let bytes = encode_record(&recs[1]);
        assert!(decode_record(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_record(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_record(&extra).is_err());
    }

    #[test]
    fn dataset_directory_round_trip_and_tamper_check() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&tiny(), dir.path()).unwrap();
        assert_eq!(m.records.len(), 2);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!(ds.records[1].pair_count(), 2);
        let again = tempfile::tempdir().unwrap();
        assert_eq!(generate_dataset(&tiny(), again.path()).unwrap().digest(), m.digest());
        let victim = dir.path().join(&m.records[0].file);
        let mut b = fs::read(&victim).unwrap();
        let last = b.len() - 1;
        b[last] ^= 1;
        fs::write(&victim, b).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn prediction_sets_round_trip_and_detect_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig { n1: 8, n2: 8, first_index: 3, ..DatasetConfig::desk(1, 2, 1, 9) };
        let recs = generate_records(&cfg).unwrap();
        let m = write_dataset(&cfg, &recs, &dir.path().join("d")).unwrap();
        let fields: Vec<IndexField> = recs.iter().map(|r| r.truth.clone()).collect();
        let out = dir.path().join("p");
        let set = write_predictions(&out, "truth", &m, &fields).unwrap();
        assert_eq!(set.records[0].file, "pred_000003.eiti");
        let (back, f) = load_predictions(&out).unwrap();
        assert_eq!((back, f), (set, fields.clone()));
        assert!(write_predictions(&out, "truth", &m, &fields[..1]).is_err());
        std::fs::write(out.join("pred_000004.eiti"), encode_index_field(&fields[0])).unwrap();
        assert!(matches!(load_predictions(&out), Err(Error::Format { .. })));
    }
}
