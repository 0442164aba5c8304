use std::path::Path;

use num_complex::Complex64;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::{enumerate_pairs, CurrentPattern, DEFAULT_PATTERN_AMPLITUDE_MA, FIRST_OUTER, INNER_COUNT, OUTER_COUNT};

pub const N_PATTERNS: usize = OUTER_COUNT * (OUTER_COUNT - 1) / 2;

/// 28 current patterns × 25 inner-electrode voltage phasors (mV), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub voltages: Vec<Complex64>,
    pub pattern_order: Vec<CurrentPattern>,
    pub phantom_id: String,
}

fn canonical_patterns() -> Vec<CurrentPattern> {
    enumerate_pairs(OUTER_COUNT, FIRST_OUTER)
        .into_iter()
        .map(|(source, sink)| CurrentPattern {
            source,
            sink,
            amplitude: DEFAULT_PATTERN_AMPLITUDE_MA,
        })
        .collect()
}

impl Frame {
    pub fn new(voltages: Vec<Complex64>, pattern_order: Vec<CurrentPattern>, phantom_id: String) -> Result<Self> {
        if pattern_order.len() != N_PATTERNS || voltages.len() != N_PATTERNS * INNER_COUNT {
            return Err(Error::Shape {
                expected: format!("{N_PATTERNS}x{INNER_COUNT} frame"),
                got: format!("{} patterns, {} values", pattern_order.len(), voltages.len()),
            });
        }
        if let Some(k) = voltages.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "frame {phantom_id}: non-finite voltage at pattern {}, electrode {}",
                k / INNER_COUNT,
                k % INNER_COUNT + 1
            )));
        }
        Ok(Self {
            voltages,
            pattern_order,
            phantom_id,
        })
    }

    /// Voltage for pattern `p` (0-based) at inner electrode slot `e` (0-based).
    pub fn get(&self, p: usize, e: usize) -> Complex64 {
        self.voltages[p * INNER_COUNT + e]
    }

    pub fn row(&self, p: usize) -> &[Complex64] {
        &self.voltages[p * INNER_COUNT..(p + 1) * INNER_COUNT]
    }
}

pub const FRAME_MAGIC: &[u8; 4] = b"BZFR";
const FRAME_VERSION: u32 = 1;

/// Frame file, little-endian:
///
/// ```text
/// magic "BZFR" | u32 version = 1 | u32 n_patterns = 28 | u32 n_electrodes = 25 | u32 n_frames
/// per frame: u32 id length | id bytes (UTF-8) | n_patterns*n_electrodes × (f64 re, f64 im) in mV
/// ```
///
/// Rows follow the canonical lexicographic pattern order.
pub fn save_frames(path: &Path, frames: &[Frame]) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(FRAME_MAGIC)
        .u32(FRAME_VERSION)
        .u32(N_PATTERNS as u32)
        .u32(INNER_COUNT as u32)
        .u32(frames.len() as u32);
    for f in frames {
        w.str(&f.phantom_id);
        for v in &f.voltages {
            w.f64(v.re).f64(v.im);
        }
    }
    w.save(path)
}

pub fn load_frames(path: &Path) -> Result<Vec<Frame>> {
    let data = read_file(path)?;
    let mut r = Reader::new(&data, path);
    r.expect_magic(FRAME_MAGIC)?;
    let version = r.u32()?;
    if version != FRAME_VERSION {
        return Err(r.fail(format!("unsupported frame version {version}")));
    }
    let (np, ne) = (r.u32()? as usize, r.u32()? as usize);
    if np != N_PATTERNS || ne != INNER_COUNT {
        return Err(r.fail(format!("frame shape {np}x{ne}, expected {N_PATTERNS}x{INNER_COUNT}")));
    }
    let n = r.u32()? as usize;
    let patterns = canonical_patterns();
    let mut frames = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let id = r.str()?;
        let mut v = Vec::with_capacity(np * ne);
        for _ in 0..np * ne {
            v.push(Complex64::new(r.f64()?, r.f64()?));
        }
        frames.push(Frame::new(v, patterns.clone(), id).map_err(|e| r.fail(e.to_string()))?);
    }
    r.finish()?;
    Ok(frames)
}

/// CSV export: `pattern_index,electrode_index,real_mV,imag_mV,magnitude_mV,phase_rad`
/// with 0-based pattern index and 1-based electrode number.
pub fn write_frame_csv(path: &Path, frame: &Frame) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["pattern_index", "electrode_index", "real_mV", "imag_mV", "magnitude_mV", "phase_rad"])
        .map_err(err)?;
    for p in 0..N_PATTERNS {
        for e in 0..INNER_COUNT {
            let v = frame.get(p, e);
            w.write_record([
                p.to_string(),
                (e + 1).to_string(),
                v.re.to_string(),
                v.im.to_string(),
                v.norm().to_string(),
                v.arg().to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_file_round_trip_and_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.frames");
        let mk = |id: &str, s: f64| {
            let v = (0..N_PATTERNS * INNER_COUNT)
                .map(|k| Complex64::new(k as f64 * s, -(k as f64) / 7.0))
                .collect();
            Frame::new(v, canonical_patterns(), id.to_string()).unwrap()
        };
        let frames = vec![mk("a", 1.0), mk("bovine-real-07", 0.5)];
        save_frames(&path, &frames).unwrap();
        assert_eq!(load_frames(&path).unwrap(), frames);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_frames(&path), Err(Error::Format { .. })));

        let csv_path = dir.path().join("f.csv");
        write_frame_csv(&csv_path, &frames[0]).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().count(), 1 + N_PATTERNS * INNER_COUNT);
        assert!(text.starts_with("pattern_index,electrode_index,real_mV"));
    }

    #[test]
    fn frame_shape_enforced() {
        assert!(Frame::new(vec![Complex64::new(0.0, 0.0); 10], canonical_patterns(), "x".into()).is_err());
        let mut v = vec![Complex64::new(0.0, 0.0); N_PATTERNS * INNER_COUNT];
        v[5] = Complex64::new(f64::NAN, 0.0);
        assert!(Frame::new(v, canonical_patterns(), "x".into()).is_err());
    }
}
