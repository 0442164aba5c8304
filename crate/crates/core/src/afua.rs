//! Continuous-time AFUA recurrent layer, the two-layer head and the model file.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::datapipe::{InputSequence, SEQ_WIDTH};
use crate::error::{Error, Result};
use crate::phantom::Label;
use crate::rng::rng_from_seed;

pub const HIDDEN_UNITS: usize = 16;
pub const FC1_UNITS: usize = 2;
pub const N_CLASSES: usize = 2;
pub const DEFAULT_H0: f64 = 0.5;
pub const DEFAULT_TAU_H: f64 = 1.0;

/// Dense row-major matrix. Bias vectors are stored as one column.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                expected: format!("{rows}x{cols}"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self · x`.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// `out += selfᵀ · g`.
    pub fn tmatvec_add(&self, g: &[f64], out: &mut [f64]) {
        for (row, &gi) in self.data.chunks_exact(self.cols).zip(g) {
            if gi != 0.0 {
                for (o, a) in out.iter_mut().zip(row) {
                    *o += a * gi;
                }
            }
        }
    }

    /// `self += g ⊗ x`.
    pub fn add_outer(&mut self, g: &[f64], x: &[f64]) {
        for (row, &gi) in self.data.chunks_exact_mut(self.cols).zip(g) {
            if gi != 0.0 {
                for (a, b) in row.iter_mut().zip(x) {
                    *a += gi * b;
                }
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Largest f64 below one.
const OPEN_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept inside the open interval even where it would round to 0 or 1.
pub fn sigmoid(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, OPEN_ONE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub w: Matrix,
    pub u: Matrix,
    pub tau_h: f64,
    pub fc1_w: Matrix,
    pub fc1_b: Matrix,
    pub fc2_w: Matrix,
    pub fc2_b: Matrix,
}

pub const PARAM_NAMES: [&str; 8] = ["w_z", "u_z", "w", "u", "fc1_w", "fc1_b", "fc2_w", "fc2_b"];

impl NetworkParams {
    pub fn zeros(hidden: usize, inputs: usize) -> Self {
        Self {
            w_z: Matrix::zeros(hidden, inputs),
            u_z: Matrix::zeros(hidden, hidden),
            w: Matrix::zeros(hidden, inputs),
            u: Matrix::zeros(hidden, hidden),
            tau_h: DEFAULT_TAU_H,
            fc1_w: Matrix::zeros(FC1_UNITS, hidden),
            fc1_b: Matrix::zeros(FC1_UNITS, 1),
            fc2_w: Matrix::zeros(N_CLASSES, FC1_UNITS),
            fc2_b: Matrix::zeros(N_CLASSES, 1),
        }
    }

    /// Uniform in ±1/√fan_in per layer; biases use their layer's fan-in.
    pub fn init(hidden: usize, inputs: usize, seed: u64) -> Self {
        let mut p = Self::zeros(hidden, inputs);
        let mut rng = rng_from_seed(seed);
        let fans = [inputs, hidden, inputs, hidden, hidden, hidden, FC1_UNITS, FC1_UNITS];
        for (m, fan) in p.matrices_mut().into_iter().zip(fans) {
            let a = 1.0 / (fan as f64).sqrt();
            m.data.iter_mut().for_each(|v| *v = rng.random_range(-a..=a));
        }
        p
    }

    pub fn paper_shape(seed: u64) -> Self {
        Self::init(HIDDEN_UNITS, SEQ_WIDTH, seed)
    }

    pub fn hidden(&self) -> usize {
        self.u.rows
    }

    pub fn inputs(&self) -> usize {
        self.w.cols
    }

    pub fn matrices(&self) -> [&Matrix; 8] {
        [
            &self.w_z, &self.u_z, &self.w, &self.u, &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b,
        ]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.w_z,
            &mut self.u_z,
            &mut self.w,
            &mut self.u,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    pub fn n_weights(&self) -> usize {
        self.matrices().iter().map(|m| m.data.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.hidden(), self.inputs());
        let shapes = [(h, i), (h, h), (h, i), (h, h), (FC1_UNITS, h), (FC1_UNITS, 1), (N_CLASSES, FC1_UNITS), (N_CLASSES, 1)];
        for ((m, name), (r, c)) in self.matrices().iter().zip(PARAM_NAMES).zip(shapes) {
            if (m.rows, m.cols) != (r, c) || m.data.len() != r * c {
                return Err(Error::Shape {
                    expected: format!("{name} {r}x{c}"),
                    got: format!("{}x{}", m.rows, m.cols),
                });
            }
            if m.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!("{name} has non-finite entries")));
            }
        }
        if !(self.tau_h > 0.0 && self.tau_h.is_finite()) {
            return Err(Error::invalid(format!("tau_h must be positive, got {}", self.tau_h)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrationConfig {
    pub substeps: usize,
    pub dt: f64,
    pub epsilon: f64,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            substeps: 10,
            dt: 0.1,
            epsilon: 1e-6,
        }
    }
}

impl IntegrationConfig {
    pub fn validate(&self, tau_h: f64) -> Result<()> {
        if self.substeps == 0 {
            return Err(Error::invalid("substeps must be at least 1"));
        }
        if !(self.dt >= 0.0 && self.dt <= tau_h) {
            return Err(Error::invalid(format!("dt must be in [0, tau_h = {tau_h}], got {}", self.dt)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-4) {
            return Err(Error::invalid(format!("epsilon must be in (0, 1e-4], got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AfuaState {
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub h_tilde: Vec<f64>,
}

impl AfuaState {
    pub fn uniform(n: usize, h0: f64) -> Self {
        Self {
            h: vec![h0; n],
            z: vec![0.5; n],
            h_tilde: vec![h0; n],
        }
    }
}

fn non_finite(unit: usize, what: &str) -> Error {
    Error::numerical(format!("non-finite {what} at hidden unit {unit}"))
}

/// Gates from precomputed input projections, then one Euler substep of `h` in place.
#[inline]
fn substep(
    wzx: &[f64],
    wx: &[f64],
    params: &NetworkParams,
    cfg: &IntegrationConfig,
    h: &mut [f64],
    z: &mut [f64],
    c: &mut [f64],
) -> Result<()> {
    params.u_z.matvec_into(h, z);
    params.u.matvec_into(h, c);
    let k = cfg.dt / params.tau_h;
    for j in 0..h.len() {
        z[j] = sigmoid(wzx[j] + z[j]);
        c[j] = sigmoid(wx[j] + c[j]).max(cfg.epsilon);
        let next = h[j] + k * z[j] * (1.0 - h[j] / c[j]);
        if !next.is_finite() {
            return Err(non_finite(j, "state"));
        }
        h[j] = next.clamp(cfg.epsilon, 1.0 - cfg.epsilon);
    }
    Ok(())
}

pub fn afua_step(x: &[f64], state: &AfuaState, params: &NetworkParams, cfg: &IntegrationConfig) -> Result<AfuaState> {
    let n = params.hidden();
    if x.len() != params.inputs() || state.h.len() != n {
        return Err(Error::Shape {
            expected: format!("input {} / state {n}", params.inputs()),
            got: format!("input {} / state {}", x.len(), state.h.len()),
        });
    }
    let wzx = params.w_z.matvec(x);
    let wx = params.w.matvec(x);
    let mut next = state.clone();
    substep(&wzx, &wx, params, cfg, &mut next.h, &mut next.z, &mut next.h_tilde)?;
    Ok(next)
}

fn check_sequence(seq: &InputSequence, params: &NetworkParams) -> Result<()> {
    if seq.width() != params.inputs() {
        return Err(Error::Shape {
            expected: format!("sequence width {}", params.inputs()),
            got: format!("{} in {}", seq.width(), seq.id),
        });
    }
    Ok(())
}

/// Integrates the whole sequence, calling `observe(h)` after every substep.
pub fn integrate(
    seq: &InputSequence,
    params: &NetworkParams,
    cfg: &IntegrationConfig,
    h0: f64,
    mut observe: impl FnMut(&[f64]),
) -> Result<Vec<f64>> {
    check_sequence(seq, params)?;
    let n = params.hidden();
    let mut h = vec![h0; n];
    let (mut z, mut c) = (vec![0.0; n], vec![0.0; n]);
    let (mut wzx, mut wx) = (vec![0.0; n], vec![0.0; n]);
    let mut x = vec![0.0; seq.width()];
    for t in 0..seq.n_steps() {
        x.iter_mut().zip(seq.step(t)).for_each(|(a, &b)| *a = b as f64);
        params.w_z.matvec_into(&x, &mut wzx);
        params.w.matvec_into(&x, &mut wx);
        for _ in 0..cfg.substeps {
            substep(&wzx, &wx, params, cfg, &mut h, &mut z, &mut c)
                .map_err(|e| Error::numerical(format!("step {t}: {e}")))?;
            observe(&h);
        }
    }
    Ok(h)
}

pub fn run_sequence(seq: &InputSequence, params: &NetworkParams, cfg: &IntegrationConfig, h0: f64) -> Result<Vec<f64>> {
    integrate(seq, params, cfg, h0, |_| {})
}

/// Hidden state after every substep, row per substep.
pub fn trajectory(seq: &InputSequence, params: &NetworkParams, cfg: &IntegrationConfig, h0: f64) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seq.n_steps() * cfg.substeps);
    integrate(seq, params, cfg, h0, |h| out.push(h.to_vec()))?;
    Ok(out)
}

pub fn softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Head activations: (a1, pre-ReLU fc2 output, probabilities).
pub fn head_activations(h: &[f64], params: &NetworkParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let a1: Vec<f64> = params
        .fc1_w
        .matvec(h)
        .iter()
        .zip(&params.fc1_b.data)
        .map(|(v, b)| sigmoid(v + b))
        .collect();
    let pre: Vec<f64> = params
        .fc2_w
        .matvec(&a1)
        .iter()
        .zip(&params.fc2_b.data)
        .map(|(v, b)| v + b)
        .collect();
    let a2: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let p = softmax(&a2);
    (a1, pre, p)
}

pub fn head_forward(h: &[f64], params: &NetworkParams) -> [f64; 2] {
    let p = head_activations(h, params).2;
    [p[0], p[1]]
}

/// Argmax with ties going to the negative class.
pub fn decide(p: [f64; 2]) -> Label {
    if p[1] > p[0] {
        Label::Positive
    } else {
        Label::Negative
    }
}

pub fn classify(seq: &InputSequence, params: &NetworkParams, cfg: &IntegrationConfig) -> Result<(Label, [f64; 2])> {
    let h = run_sequence(seq, params, cfg, DEFAULT_H0)?;
    let p = head_forward(&h, params);
    Ok((decide(p), p))
}

pub const MODEL_HEADER: &str = "afua-model 1";

pub(crate) fn write_matrix(s: &mut String, name: &str, m: &Matrix) {
    let _ = writeln!(s, "matrix {name} {} {}", m.rows, m.cols);
    for r in 0..m.rows {
        let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
}

pub(crate) fn write_header_fields(s: &mut String, tau_h: f64, cfg: &IntegrationConfig) {
    let _ = writeln!(s, "tau_h {tau_h}");
    let _ = writeln!(s, "substeps {}", cfg.substeps);
    let _ = writeln!(s, "dt {}", cfg.dt);
    let _ = writeln!(s, "epsilon {}", cfg.epsilon);
}

/// Model file: header line, scalar fields, then `matrix <name> <rows> <cols>`
/// blocks with one whitespace-separated row per line. Floats use the shortest
/// representation that parses back to the same bits.
pub fn model_to_text(params: &NetworkParams, cfg: &IntegrationConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MODEL_HEADER}");
    write_header_fields(&mut s, params.tau_h, cfg);
    for (name, m) in PARAM_NAMES.iter().zip(params.matrices()) {
        write_matrix(&mut s, name, m);
    }
    s.push_str("end\n");
    s
}

/// Line cursor over a structured-text file.
pub(crate) struct TextCursor<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    origin: &'a Path,
    line_no: usize,
}

impl<'a> TextCursor<'a> {
    pub(crate) fn new(text: &'a str, origin: &'a Path) -> Self {
        Self {
            lines: text.lines().enumerate(),
            origin,
            line_no: 0,
        }
    }

    pub(crate) fn fail(&self, reason: impl std::fmt::Display) -> Error {
        Error::format(self.origin, format!("line {}: {reason}", self.line_no))
    }

    pub(crate) fn next_line(&mut self) -> Result<&'a str> {
        loop {
            let Some((i, line)) = self.lines.next() else {
                self.line_no += 1;
                return Err(self.fail("unexpected end of file"));
            };
            self.line_no = i + 1;
            let line = line.trim();
            if !line.is_empty() && !line.starts_with('#') {
                return Ok(line);
            }
        }
    }

    pub(crate) fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.next_line()?;
        let mut it = line.split_whitespace();
        if it.next() != Some(key) {
            return Err(self.fail(format!("expected `{key} <value>`, found `{line}`")));
        }
        let v = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| self.fail(format!("bad value for {key}")))?;
        if it.next().is_some() {
            return Err(self.fail(format!("trailing data after {key}")));
        }
        Ok(v)
    }

    /// Reads a `<kind> <name> <rows> <cols> [extra...]` header and returns (rows, cols, extra).
    pub(crate) fn block_header(&mut self, kind: &str, name: &str) -> Result<(usize, usize, Vec<&'a str>)> {
        let line = self.next_line()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 4 || parts[0] != kind || parts[1] != name {
            return Err(self.fail(format!("expected `{kind} {name} <rows> <cols>`, found `{line}`")));
        }
        let rows = parts[2].parse().map_err(|_| self.fail("bad row count"))?;
        let cols = parts[3].parse().map_err(|_| self.fail("bad column count"))?;
        Ok((rows, cols, parts[4..].to_vec()))
    }

    pub(crate) fn rows<T: std::str::FromStr>(&mut self, rows: usize, cols: usize) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let line = self.next_line()?;
            let vals: Vec<T> = line
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| self.fail(format!("bad number `{v}`"))))
                .collect::<Result<_>>()?;
            if vals.len() != cols {
                return Err(self.fail(format!("row {r} has {} values, expected {cols}", vals.len())));
            }
            out.extend(vals);
        }
        Ok(out)
    }

    pub(crate) fn expect_end(&mut self) -> Result<()> {
        let line = self.next_line()?;
        if line != "end" {
            return Err(self.fail(format!("expected `end`, found `{line}`")));
        }
        for (_, rest) in self.lines.by_ref() {
            if !rest.trim().is_empty() {
                return Err(Error::format(self.origin, "data after `end`"));
            }
        }
        Ok(())
    }
}

pub(crate) fn read_header_fields(cur: &mut TextCursor) -> Result<(f64, IntegrationConfig)> {
    let tau_h = cur.field("tau_h")?;
    let cfg = IntegrationConfig {
        substeps: cur.field("substeps")?,
        dt: cur.field("dt")?,
        epsilon: cur.field("epsilon")?,
    };
    Ok((tau_h, cfg))
}

pub fn model_from_text(text: &str, origin: &Path) -> Result<(NetworkParams, IntegrationConfig)> {
    let mut cur = TextCursor::new(text, origin);
    if cur.next_line()? != MODEL_HEADER {
        return Err(cur.fail(format!("missing `{MODEL_HEADER}` header")));
    }
    let (tau_h, cfg) = read_header_fields(&mut cur)?;
    let mut mats = Vec::with_capacity(8);
    for name in PARAM_NAMES {
        let (rows, cols, extra) = cur.block_header("matrix", name)?;
        if !extra.is_empty() {
            return Err(cur.fail("unexpected fields in matrix header"));
        }
        mats.push(Matrix::from_vec(rows, cols, cur.rows(rows, cols)?)?);
    }
    cur.expect_end()?;
    let mut it = mats.into_iter();
    let mut next = || it.next().expect("eight matrices");
    let params = NetworkParams {
        w_z: next(),
        u_z: next(),
        w: next(),
        u: next(),
        tau_h,
        fc1_w: next(),
        fc1_b: next(),
        fc2_w: next(),
        fc2_b: next(),
    };
    params.validate().map_err(|e| Error::format(origin, e.to_string()))?;
    cfg.validate(tau_h).map_err(|e| Error::format(origin, e.to_string()))?;
    Ok((params, cfg))
}

pub fn save_model(path: &Path, params: &NetworkParams, cfg: &IntegrationConfig) -> Result<()> {
    std::fs::write(path, model_to_text(params, cfg)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(NetworkParams, IntegrationConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_text(&text, path)
}

/// Fixed point of `h = max(σ(W x + U h), ε)` by damped iteration.
pub fn equilibrium(x: &[f64], params: &NetworkParams, epsilon: f64) -> Vec<f64> {
    let wx = params.w.matvec(x);
    let mut h = vec![0.5; params.hidden()];
    for _ in 0..10_000 {
        let uh = params.u.matvec(&h);
        let next: Vec<f64> = wx.iter().zip(&uh).map(|(a, b)| sigmoid(a + b).max(epsilon)).collect();
        let delta = next.iter().zip(&h).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        h.iter_mut().zip(&next).for_each(|(a, b)| *a = 0.5 * *a + 0.5 * b);
        if delta < 1e-15 {
            break;
        }
    }
    h
}
