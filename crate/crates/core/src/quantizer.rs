//! Signed fixed-point weight quantization and the bit-width sweep.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use crate::afua::{
    classify, read_header_fields, write_header_fields, IntegrationConfig, Matrix, NetworkParams, TextCursor,
    PARAM_NAMES,
};
use crate::datapipe::InputSequence;
use crate::error::{Error, Result};
use crate::phantom::Label;
use crate::trainer::{evaluate, Evaluation};

pub const MIN_BITS: u32 = 3;
pub const MAX_BITS: u32 = 16;

/// Largest code magnitude for `bits` total bits.
pub fn max_code(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i32>,
    pub scale: f64,
}

impl QuantizedMatrix {
    pub fn step(&self, bits: u32) -> f64 {
        self.scale / max_code(bits) as f64
    }

    pub fn dequantize(&self, bits: u32) -> Matrix {
        let levels = max_code(bits) as f64;
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.codes.iter().map(|&c| c as f64 * self.scale / levels).collect(),
        }
    }
}

/// Per-matrix symmetric scale `s = max|w|` (1 for an all-zero matrix), codes
/// `round_half_away(w / Δ)` with `Δ = s / (2^(N−1) − 1)`.
pub fn quantize_matrix(m: &Matrix, bits: u32) -> QuantizedMatrix {
    let peak = m.max_abs();
    let scale = if peak > 0.0 { peak } else { 1.0 };
    let levels = max_code(bits);
    let codes = m
        .data
        .iter()
        .map(|&w| ((w * levels as f64 / scale).round() as i32).clamp(-levels, levels))
        .collect();
    QuantizedMatrix {
        rows: m.rows,
        cols: m.cols,
        codes,
        scale,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedParams {
    pub bits: u32,
    /// In `PARAM_NAMES` order.
    pub matrices: Vec<QuantizedMatrix>,
    pub tau_h: f64,
}

impl QuantizedParams {
    pub fn dequantize(&self) -> NetworkParams {
        let mut it = self.matrices.iter().map(|q| q.dequantize(self.bits));
        let mut next = || it.next().expect("eight matrices");
        NetworkParams {
            w_z: next(),
            u_z: next(),
            w: next(),
            u: next(),
            tau_h: self.tau_h,
            fc1_w: next(),
            fc1_b: next(),
            fc2_w: next(),
            fc2_b: next(),
        }
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::invalid(format!("bit width {bits} outside {MIN_BITS}..={MAX_BITS}")))
    }
}

pub fn quantize(params: &NetworkParams, bits: u32) -> Result<QuantizedParams> {
    check_bits(bits)?;
    Ok(QuantizedParams {
        bits,
        matrices: params.matrices().iter().map(|m| quantize_matrix(m, bits)).collect(),
        tau_h: params.tau_h,
    })
}

pub fn quantized_forward(
    q: &QuantizedParams,
    seq: &InputSequence,
    cfg: &IntegrationConfig,
) -> Result<(Label, [f64; 2])> {
    classify(seq, &q.dequantize(), cfg)
}

pub fn evaluate_quantized(q: &QuantizedParams, sequences: &[InputSequence], cfg: &IntegrationConfig) -> Result<Evaluation> {
    evaluate(&q.dequantize(), sequences, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Bits(u32),
    Full,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Bits(n) => write!(f, "{n}"),
            Precision::Full => f.write_str("FP"),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("fp") {
            return Ok(Precision::Full);
        }
        let n: u32 = s.trim().parse().map_err(|_| Error::invalid(format!("bad bit width `{s}`")))?;
        check_bits(n)?;
        Ok(Precision::Bits(n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub precision: Precision,
    pub evaluation: Evaluation,
}

/// Accuracy at each bit width, followed by the full-precision row.
pub fn sweep(
    params: &NetworkParams,
    test_set: &[InputSequence],
    bit_list: &[u32],
    cfg: &IntegrationConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(bit_list.len() + 1);
    for &bits in bit_list {
        let q = quantize(params, bits)?;
        rows.push(SweepRow {
            precision: Precision::Bits(bits),
            evaluation: evaluate_quantized(&q, test_set, cfg)?,
        });
    }
    rows.push(SweepRow {
        precision: Precision::Full,
        evaluation: evaluate(params, test_set, cfg)?,
    });
    Ok(rows)
}

pub fn accuracy_at(rows: &[SweepRow], precision: Precision) -> Option<f64> {
    rows.iter().find(|r| r.precision == precision).map(|r| r.evaluation.accuracy)
}

/// Sweep CSV `bits,accuracy`; the full-precision row key is `FP`.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["bits", "accuracy"]).map_err(err)?;
    for r in rows {
        w.write_record([r.precision.to_string(), r.evaluation.accuracy.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const QMODEL_HEADER: &str = "afua-qmodel 1";

/// Same layout as the model file, with `bits N` after the scalar fields and
/// `qmatrix <name> <rows> <cols> <scale>` blocks of integer codes.
pub fn qmodel_to_text(q: &QuantizedParams, cfg: &IntegrationConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{QMODEL_HEADER}");
    write_header_fields(&mut s, q.tau_h, cfg);
    let _ = writeln!(s, "bits {}", q.bits);
    for (name, m) in PARAM_NAMES.iter().zip(&q.matrices) {
        let _ = writeln!(s, "qmatrix {name} {} {} {}", m.rows, m.cols, m.scale);
        for row in m.codes.chunks(m.cols) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
    }
    s.push_str("end\n");
    s
}

pub fn qmodel_from_text(text: &str, origin: &Path) -> Result<(QuantizedParams, IntegrationConfig)> {
    let mut cur = TextCursor::new(text, origin);
    if cur.next_line()? != QMODEL_HEADER {
        return Err(cur.fail(format!("missing `{QMODEL_HEADER}` header")));
    }
    let (tau_h, cfg) = read_header_fields(&mut cur)?;
    let bits: u32 = cur.field("bits")?;
    check_bits(bits).map_err(|e| cur.fail(e))?;
    let mut matrices = Vec::with_capacity(8);
    for name in PARAM_NAMES {
        let (rows, cols, extra) = cur.block_header("qmatrix", name)?;
        let scale: f64 = match extra.as_slice() {
            [s] => s.parse().map_err(|_| cur.fail("bad scale"))?,
            _ => return Err(cur.fail("qmatrix header needs a scale")),
        };
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(cur.fail(format!("scale of {name} must be positive")));
        }
        let codes: Vec<i32> = cur.rows(rows, cols)?;
        if codes.iter().any(|c| c.abs() > max_code(bits)) {
            return Err(cur.fail(format!("code out of range in {name}")));
        }
        matrices.push(QuantizedMatrix { rows, cols, codes, scale });
    }
    cur.expect_end()?;
    let q = QuantizedParams { bits, matrices, tau_h };
    q.dequantize().validate().map_err(|e| Error::format(origin, e.to_string()))?;
    Ok((q, cfg))
}

pub fn save_qmodel(path: &Path, q: &QuantizedParams, cfg: &IntegrationConfig) -> Result<()> {
    std::fs::write(path, qmodel_to_text(q, cfg)).map_err(|e| Error::io(path, e))
}

pub fn load_qmodel(path: &Path) -> Result<(QuantizedParams, IntegrationConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    qmodel_from_text(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(data: Vec<f64>) -> Matrix {
        Matrix::from_vec(1, data.len(), data).unwrap()
    }

    #[test]
    fn arithmetic_examples() {
        let q = quantize_matrix(&m(vec![0.0, 1.0, 0.3, -0.3, -1.0]), 5);
        assert_eq!(q.scale, 1.0);
        assert_eq!(q.codes, vec![0, 15, 5, -5, -15]);
        let d = q.dequantize(5);
        assert_eq!(d.data[1], 1.0);
        assert!((d.data[2] - 1.0 / 3.0).abs() < 1e-15);
        let zero = quantize_matrix(&m(vec![0.0; 3]), 8);
        assert_eq!(zero.scale, 1.0);
        assert_eq!(zero.codes, vec![0; 3]);
    }

    #[test]
    fn max_element_exact() {
        let w = m(vec![0.137, -0.42, 0.07]);
        for bits in MIN_BITS..=MAX_BITS {
            let q = quantize_matrix(&w, bits);
            assert_eq!(q.codes[1], -max_code(bits));
            assert_eq!(q.dequantize(bits).data[1], -0.42);
        }
        assert!(quantize(&NetworkParams::zeros(2, 2), 2).is_err());
        assert!(quantize(&NetworkParams::zeros(2, 2), 17).is_err());
    }

    #[test]
    fn sixteen_bits_tracks_full_precision() {
        let p = NetworkParams::paper_shape(21);
        let q = quantize(&p, 16).unwrap();
        let cfg = IntegrationConfig::default();
        let v: Vec<f32> = (0..700).map(|k| ((k as f32) * 0.013).sin() * 0.7).collect();
        let seq = InputSequence::new(v, 28, 25, Label::Positive, "s").unwrap();
        let (_, a) = classify(&seq, &p, &cfg).unwrap();
        let (_, b) = quantized_forward(&q, &seq, &cfg).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-3);
        assert!((b[0] + b[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_shape_and_csv() {
        let p = NetworkParams::init(3, 2, 1);
        let seqs: Vec<InputSequence> = (0..6)
            .map(|i| InputSequence::new(vec![0.1 * i as f32; 4], 2, 2, Label::from_index(i % 2).unwrap(), format!("q{i}")).unwrap())
            .collect();
        let cfg = IntegrationConfig::default();
        let rows = sweep(&p, &seqs, &[3, 4, 5, 6, 7, 8], &cfg).unwrap();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[6].precision, Precision::Full);
        assert_eq!(accuracy_at(&rows, Precision::Full), Some(evaluate(&p, &seqs, &cfg).unwrap().accuracy));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("bits,accuracy\n3,"));
        assert!(text.lines().last().unwrap().starts_with("FP,"));
        assert_eq!("FP".parse::<Precision>().unwrap(), Precision::Full);
        assert!("2".parse::<Precision>().is_err());
    }

    #[test]
    fn qmodel_round_trip() {
        let p = NetworkParams::paper_shape(5);
        let q = quantize(&p, 5).unwrap();
        let cfg = IntegrationConfig::default();
        let text = qmodel_to_text(&q, &cfg);
        let (r, c) = qmodel_from_text(&text, Path::new("q.afua")).unwrap();
        assert_eq!(r, q);
        assert_eq!(c, cfg);
        assert!(qmodel_from_text(&text.replace("bits 5", "bits 2"), Path::new("q")).is_err());
    }

    proptest! {
        #[test]
        fn error_bound_and_monotone(ws in proptest::collection::vec(-3.0f64..3.0, 1..40)) {
            let w = m(ws);
            let mut last = f64::INFINITY;
            for bits in MIN_BITS..=MAX_BITS {
                let q = quantize_matrix(&w, bits);
                let d = q.dequantize(bits);
                let delta = q.step(bits);
                let mut err = 0.0;
                for (a, b) in w.data.iter().zip(&d.data) {
                    prop_assert!((a - b).abs() <= delta / 2.0 + 1e-12);
                    prop_assert!(b.abs() <= q.scale * (1.0 + 1e-15));
                    err += (a - b).abs();
                }
                err /= w.data.len() as f64;
                // Grids at N and N+1 bits are not nested, so allow rounding-level slack.
                prop_assert!(err <= last + 1e-12 || err <= delta);
                last = err.min(last);
                prop_assert_eq!(quantize_matrix(&w, bits), q);
            }
        }
    }
}
