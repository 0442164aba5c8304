//! Frame preprocessing, dataset splits and dataset persistence.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::fem::{Frame, N_PATTERNS};
use crate::geometry::INNER_COUNT;
use crate::phantom::Label;
use crate::rng::rng_from_seed;

pub const SEQ_STEPS: usize = N_PATTERNS;
pub const SEQ_WIDTH: usize = INNER_COUNT;
pub const DEFAULT_GAIN: f64 = 1.0;

/// Largest f32 below one; tanh values that would round to ±1 are pulled back here.
const F32_OPEN_BOUND: f32 = 1.0 - f32::EPSILON / 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    values: Vec<f32>,
    n_steps: usize,
    width: usize,
    pub label: Label,
    pub id: String,
}

impl InputSequence {
    /// Row-major `n_steps × width` values, each strictly inside (−1, 1).
    pub fn new(values: Vec<f32>, n_steps: usize, width: usize, label: Label, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if n_steps == 0 || width == 0 || values.len() != n_steps * width {
            return Err(Error::Shape {
                expected: format!("{n_steps}x{width} sequence"),
                got: format!("{} values", values.len()),
            });
        }
        if let Some(k) = values.iter().position(|v| !(v.abs() < 1.0)) {
            return Err(Error::invalid(format!(
                "sequence {id}: value {} at step {}, column {} is outside (-1, 1)",
                values[k],
                k / width,
                k % width
            )));
        }
        Ok(Self {
            values,
            n_steps,
            width,
            label,
            id,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn step(&self, t: usize) -> &[f32] {
        &self.values[t * self.width..(t + 1) * self.width]
    }
}

fn squash(v: f64) -> f32 {
    (v.tanh() as f32).clamp(-F32_OPEN_BOUND, F32_OPEN_BOUND)
}

/// `x = tanh(gain · (|V_meas| − |V_ref|))` per cell, magnitudes in mV.
pub fn normalize(meas: &Frame, reference: &Frame, gain: f64, label: Label) -> Result<InputSequence> {
    if !gain.is_finite() {
        return Err(Error::invalid(format!("gain must be finite, got {gain}")));
    }
    if meas.pattern_order != reference.pattern_order || meas.voltages.len() != reference.voltages.len() {
        return Err(Error::Shape {
            expected: "frames with identical pattern order and shape".into(),
            got: format!("{} vs {}", meas.phantom_id, reference.phantom_id),
        });
    }
    let values = meas
        .voltages
        .iter()
        .zip(&reference.voltages)
        .map(|(m, r)| squash(gain * (m.norm() - r.norm())))
        .collect();
    InputSequence::new(values, SEQ_STEPS, SEQ_WIDTH, label, meas.phantom_id.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Validation => "validation",
            SplitKind::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitKind::Train),
            "validation" => Some(SplitKind::Validation),
            "test" => Some(SplitKind::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<InputSequence>,
    pub validation: Vec<InputSequence>,
    pub test: Vec<InputSequence>,
    pub split_seed: u64,
}

impl DatasetSplit {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    pub fn parts(&self) -> [(SplitKind, &[InputSequence]); 3] {
        [
            (SplitKind::Train, &self.train),
            (SplitKind::Validation, &self.validation),
            (SplitKind::Test, &self.test),
        ]
    }
}

/// Validation and test sizes are `round(n · fraction)`; train takes the remainder.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<(usize, usize, usize)> {
    let [tr, va, te] = fractions;
    if !(tr > 0.0 && va > 0.0 && te >= 0.0) || !fractions.iter().all(|f| f.is_finite()) {
        return Err(Error::invalid(format!(
            "split fractions must be positive (test may be 0), got {fractions:?}"
        )));
    }
    if (tr + va + te - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("split fractions sum to {}, expected 1", tr + va + te)));
    }
    let n_val = (n as f64 * va).round() as usize;
    let n_test = (n as f64 * te).round() as usize;
    if n_val + n_test > n {
        return Err(Error::invalid(format!("{n} sequences cannot fill the requested splits")));
    }
    Ok((n - n_val - n_test, n_val, n_test))
}

/// Sorts by id, shuffles with `seed`, then cuts train | validation | test.
pub fn make_splits(sequences: Vec<InputSequence>, fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if sequences.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    let (n_train, n_val, _) = split_counts(sequences.len(), fractions)?;
    let mut seqs = sequences;
    seqs.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = seqs.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::invalid(format!("duplicate sequence id {}", w[0].id)));
    }
    seqs.shuffle(&mut rng_from_seed(seed));
    let test = seqs.split_off(n_train + n_val);
    let validation = seqs.split_off(n_train);
    Ok(DatasetSplit {
        train: seqs,
        validation,
        test,
        split_seed: seed,
    })
}

const DATASET_MAGIC: &[u8; 4] = b"BZDS";
const DATASET_VERSION: u32 = 1;

/// Dataset file, little-endian:
///
/// ```text
/// magic "BZDS" | u32 version = 1 | u32 n_steps | u32 width | u64 n_records
/// per record: u32 id length | id bytes | u8 label | n_steps*width × f32 (row-major)
/// ```
pub fn save_dataset(path: &Path, sequences: &[InputSequence]) -> Result<()> {
    let (steps, width) = sequences.first().map_or((SEQ_STEPS, SEQ_WIDTH), |s| (s.n_steps, s.width));
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC)
        .u32(DATASET_VERSION)
        .u32(steps as u32)
        .u32(width as u32)
        .u64(sequences.len() as u64);
    for s in sequences {
        if (s.n_steps, s.width) != (steps, width) {
            return Err(Error::Shape {
                expected: format!("{steps}x{width}"),
                got: format!("{}x{} in {}", s.n_steps, s.width, s.id),
            });
        }
        w.str(&s.id).u8(s.label.index() as u8);
        for &v in &s.values {
            w.f32(v);
        }
    }
    w.save(path)
}

pub fn load_dataset(path: &Path) -> Result<Vec<InputSequence>> {
    let data = read_file(path)?;
    let mut r = Reader::new(&data, path);
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(r.fail(format!("unsupported dataset version {version}")));
    }
    let (steps, width) = (r.u32()? as usize, r.u32()? as usize);
    let n = r.u64()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let id = r.str()?;
        let label = Label::from_index(r.u8()? as usize).map_err(|e| r.fail(e.to_string()))?;
        let mut values = Vec::with_capacity(steps * width);
        for _ in 0..steps * width {
            values.push(r.f32()?);
        }
        out.push(InputSequence::new(values, steps, width, label, id).map_err(|e| r.fail(e.to_string()))?);
    }
    r.finish()?;
    Ok(out)
}

/// Manifest CSV `id,split,label`, rows in split order.
pub fn write_manifest(path: &Path, split: &DatasetSplit) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["id", "split", "label"]).map_err(err)?;
    for (kind, seqs) in split.parts() {
        for s in seqs {
            w.write_record([s.id.as_str(), kind.as_str(), &s.label.index().to_string()])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, SplitKind, Label)>> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => err(e),
    })?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        let bad = || Error::format(path, format!("bad manifest row {:?}", rec.iter().collect::<Vec<_>>()));
        if rec.len() != 3 {
            return Err(bad());
        }
        let kind = SplitKind::parse(&rec[1]).ok_or_else(bad)?;
        let label = rec[2].parse::<usize>().ok().and_then(|i| Label::from_index(i).ok()).ok_or_else(bad)?;
        rows.push((rec[0].to_string(), kind, label));
    }
    Ok(rows)
}

/// Rebuilds a split from a dataset and its manifest; every manifest id must be present.
pub fn assemble_split(
    sequences: Vec<InputSequence>,
    manifest: &[(String, SplitKind, Label)],
    split_seed: u64,
) -> Result<DatasetSplit> {
    let mut by_id: HashMap<String, InputSequence> = HashMap::with_capacity(sequences.len());
    for s in sequences {
        if by_id.contains_key(&s.id) {
            return Err(Error::invalid(format!("duplicate sequence id {}", s.id)));
        }
        by_id.insert(s.id.clone(), s);
    }
    let mut seen = HashSet::new();
    let mut split = DatasetSplit {
        train: vec![],
        validation: vec![],
        test: vec![],
        split_seed,
    };
    for (id, kind, label) in manifest {
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("manifest lists {id} twice")));
        }
        let s = by_id
            .remove(id)
            .ok_or_else(|| Error::invalid(format!("manifest id {id} missing from dataset")))?;
        if s.label != *label {
            return Err(Error::invalid(format!("label mismatch for {id}")));
        }
        match kind {
            SplitKind::Train => split.train.push(s),
            SplitKind::Validation => split.validation.push(s),
            SplitKind::Test => split.test.push(s),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_probe_layout, enumerate_current_patterns, GeometryConfig};
    use num_complex::Complex64;
    use proptest::prelude::*;

    fn frame(f: impl Fn(usize) -> Complex64, id: &str) -> Frame {
        let layout = build_probe_layout(&GeometryConfig::default()).unwrap();
        let v = (0..SEQ_STEPS * SEQ_WIDTH).map(f).collect();
        Frame::new(v, enumerate_current_patterns(&layout), id.into()).unwrap()
    }

    fn seqs(n: usize) -> Vec<InputSequence> {
        (0..n)
            .map(|i| {
                let v = vec![(i % 7) as f32 / 10.0; 6];
                InputSequence::new(v, 2, 3, Label::from_index(i % 2).unwrap(), format!("s{i:05}")).unwrap()
            })
            .collect()
    }

    #[test]
    fn identical_frames_give_zero() {
        let f = frame(|k| Complex64::new(k as f64, -3.0), "a");
        let x = normalize(&f, &f, 5.0, Label::Positive).unwrap();
        assert!(x.values().iter().all(|&v| v == 0.0));
        assert_eq!(x.label, Label::Positive);
        assert_eq!(x.id, "a");
    }

    #[test]
    fn tanh_cell_value() {
        let r = frame(|_| Complex64::new(0.0, 4.0), "r");
        let m = frame(|k| if k == 30 { Complex64::new(0.0, 7.0) } else { Complex64::new(0.0, 4.0) }, "m");
        let x = normalize(&m, &r, 1.0, Label::Negative).unwrap();
        assert!((x.step(1)[5] as f64 - 0.995054753687).abs() < 1e-7);
        assert_eq!(x.step(0)[0], 0.0);
    }

    #[test]
    fn saturating_inputs_stay_open() {
        let r = frame(|_| Complex64::new(1.0, 0.0), "r");
        let m = frame(|k| Complex64::new(if k % 2 == 0 { 1e6 } else { 0.0 }, 0.0), "m");
        let x = normalize(&m, &r, 1.0, Label::Negative).unwrap();
        assert!(x.values().iter().all(|v| v.abs() < 1.0));
        assert!(normalize(&m, &r, f64::NAN, Label::Negative).is_err());
    }

    #[test]
    fn split_counts_match_protocols() {
        assert_eq!(split_counts(4265, [0.5623, 0.1876, 0.2501]).unwrap(), (2398, 800, 1067));
        assert_eq!(split_counts(2988, [0.75, 0.25, 0.0]).unwrap(), (2241, 747, 0));
        assert!(split_counts(10, [0.5, 0.5, 0.5]).is_err());
        assert!(split_counts(10, [0.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn splits_are_deterministic_and_partition() {
        let a = make_splits(seqs(100), [0.6, 0.2, 0.2], 9).unwrap();
        let mut reversed = seqs(100);
        reversed.reverse();
        let b = make_splits(reversed, [0.6, 0.2, 0.2], 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counts(), (60, 20, 20));
        let mut ids: Vec<&str> = a.parts().iter().flat_map(|(_, s)| s.iter().map(|x| x.id.as_str())).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
        let c = make_splits(seqs(100), [0.6, 0.2, 0.2], 10).unwrap();
        assert_ne!(a.train, c.train);
        assert!(make_splits(vec![], [0.6, 0.2, 0.2], 1).is_err());
        let mut dup = seqs(3);
        dup.push(dup[0].clone());
        assert!(make_splits(dup, [0.5, 0.5, 0.0], 1).is_err());
    }

    #[test]
    fn dataset_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = make_splits(seqs(20), [0.5, 0.25, 0.25], 3).unwrap();
        let all: Vec<InputSequence> = split.parts().iter().flat_map(|(_, s)| s.to_vec()).collect();
        let ds = dir.path().join("d.bin");
        let mf = dir.path().join("manifest.csv");
        save_dataset(&ds, &all).unwrap();
        write_manifest(&mf, &split).unwrap();
        let loaded = load_dataset(&ds).unwrap();
        assert_eq!(loaded, all);
        let rebuilt = assemble_split(loaded, &read_manifest(&mf).unwrap(), 3).unwrap();
        assert_eq!(rebuilt, split);
        assert!(std::fs::read_to_string(&mf).unwrap().starts_with("id,split,label\n"));

        let mut bytes = std::fs::read(&ds).unwrap();
        bytes.pop();
        std::fs::write(&ds, bytes).unwrap();
        assert!(matches!(load_dataset(&ds), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(InputSequence::new(vec![1.0, 0.0], 1, 2, Label::Negative, "x").is_err());
        assert!(InputSequence::new(vec![0.0; 3], 1, 2, Label::Negative, "x").is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_bounded_and_monotone(a in 0.0f64..500.0, b in 0.0f64..500.0, r in 0.0f64..500.0, g in 0.01f64..3.0) {
            let rf = frame(|_| Complex64::new(r, 0.0), "r");
            let fa = frame(|_| Complex64::new(0.0, a), "a");
            let fb = frame(|_| Complex64::new(0.0, b), "b");
            let xa = normalize(&fa, &rf, g, Label::Negative).unwrap();
            let xb = normalize(&fb, &rf, g, Label::Negative).unwrap();
            prop_assert!(xa.values().iter().all(|v| v.abs() < 1.0));
            if a <= b {
                prop_assert!(xa.values()[0] <= xb.values()[0]);
            }
        }
    }
}
