//! Cross-entropy training of the AFUA classifier by backpropagation through the Euler unroll.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::afua::{decide, head_activations, sigmoid, IntegrationConfig, NetworkParams, DEFAULT_H0, HIDDEN_UNITS};
use crate::datapipe::{DatasetSplit, InputSequence};
use crate::error::{Error, Result};
use crate::phantom::Label;
use crate::rng::{derive_seed, rng_from_seed};

pub const LOSS_FLOOR: f64 = 1e-12;

pub fn loss(p: [f64; 2], label: Label) -> f64 {
    -p[label.index()].max(LOSS_FLOOR).ln()
}

pub const DEFAULT_LOGIT_BIAS_OFFSET: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub hidden_units: usize,
    /// Added to both FC2 biases after init so neither ReLU-gated logit starts near zero.
    pub logit_bias_offset: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            epochs: 500,
            learning_rate: 1e-3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            hidden_units: HIDDEN_UNITS,
            logit_bias_offset: DEFAULT_LOGIT_BIAS_OFFSET,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.hidden_units == 0 {
            return Err(Error::invalid("batch_size, epochs and hidden_units must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.adam_epsilon > 0.0) {
            return Err(Error::invalid("Adam decays must lie in [0, 1) and epsilon must be positive"));
        }
        if !self.logit_bias_offset.is_finite() {
            return Err(Error::invalid("logit_bias_offset must be finite"));
        }
        Ok(())
    }
}

/// Per-substep values kept for the backward pass.
struct Tape {
    /// Hidden state entering each substep, then the final state.
    h: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    c: Vec<f64>,
}

fn forward_tape(seq: &InputSequence, params: &NetworkParams, cfg: &IntegrationConfig) -> Result<(Tape, Vec<f64>)> {
    let n = params.hidden();
    let total = seq.n_steps() * cfg.substeps;
    let mut tape = Tape {
        h: Vec::with_capacity((total + 1) * n),
        z: Vec::with_capacity(total * n),
        s: Vec::with_capacity(total * n),
        c: Vec::with_capacity(total * n),
    };
    let mut h = vec![DEFAULT_H0; n];
    let (mut wzx, mut wx) = (vec![0.0; n], vec![0.0; n]);
    let (mut uzh, mut uh) = (vec![0.0; n], vec![0.0; n]);
    let mut x = vec![0.0; seq.width()];
    let k = cfg.dt / params.tau_h;
    for t in 0..seq.n_steps() {
        x.iter_mut().zip(seq.step(t)).for_each(|(a, &b)| *a = b as f64);
        params.w_z.matvec_into(&x, &mut wzx);
        params.w.matvec_into(&x, &mut wx);
        for _ in 0..cfg.substeps {
            tape.h.extend_from_slice(&h);
            params.u_z.matvec_into(&h, &mut uzh);
            params.u.matvec_into(&h, &mut uh);
            for j in 0..n {
                let z = sigmoid(wzx[j] + uzh[j]);
                let s = sigmoid(wx[j] + uh[j]);
                let c = s.max(cfg.epsilon);
                let next = h[j] + k * z * (1.0 - h[j] / c);
                if !next.is_finite() {
                    return Err(Error::numerical(format!("{}: non-finite state at step {t}, unit {j}", seq.id)));
                }
                h[j] = next.clamp(cfg.epsilon, 1.0 - cfg.epsilon);
                tape.z.push(z);
                tape.s.push(s);
                tape.c.push(c);
            }
        }
    }
    tape.h.extend_from_slice(&h);
    Ok((tape, h))
}

/// Loss, correctness and parameter gradient for one sequence.
fn sequence_gradient(
    seq: &InputSequence,
    params: &NetworkParams,
    cfg: &IntegrationConfig,
) -> Result<(f64, bool, NetworkParams)> {
    let n = params.hidden();
    let (tape, h_final) = forward_tape(seq, params, cfg)?;
    let (a1, pre, p) = head_activations(&h_final, params);
    let y = seq.label.index();
    let l = loss([p[0], p[1]], seq.label);
    let correct = decide([p[0], p[1]]) == seq.label;

    let mut g = NetworkParams::zeros(n, params.inputs());
    g.tau_h = 0.0;
    if p[y] < LOSS_FLOOR {
        return Ok((l, correct, g));
    }
    let gpre: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| if pre[i] > 0.0 { pi - if i == y { 1.0 } else { 0.0 } } else { 0.0 })
        .collect();
    g.fc2_w.add_outer(&gpre, &a1);
    g.fc2_b.data.iter_mut().zip(&gpre).for_each(|(a, b)| *a += b);
    let mut ga1 = vec![0.0; a1.len()];
    params.fc2_w.tmatvec_add(&gpre, &mut ga1);
    let gz1: Vec<f64> = ga1.iter().zip(&a1).map(|(g, a)| g * a * (1.0 - a)).collect();
    g.fc1_w.add_outer(&gz1, &h_final);
    g.fc1_b.data.iter_mut().zip(&gz1).for_each(|(a, b)| *a += b);
    let mut gh = vec![0.0; n];
    params.fc1_w.tmatvec_add(&gz1, &mut gh);

    let k = cfg.dt / params.tau_h;
    let (mut gaz, mut gac) = (vec![0.0; n], vec![0.0; n]);
    let (mut sum_gaz, mut sum_gac) = (vec![0.0; n], vec![0.0; n]);
    let mut x = vec![0.0; seq.width()];
    let mut next_gh = vec![0.0; n];
    for t in (0..seq.n_steps()).rev() {
        sum_gaz.iter_mut().for_each(|v| *v = 0.0);
        sum_gac.iter_mut().for_each(|v| *v = 0.0);
        for sub in (0..cfg.substeps).rev() {
            let idx = t * cfg.substeps + sub;
            let hp = &tape.h[idx * n..(idx + 1) * n];
            let zs = &tape.z[idx * n..(idx + 1) * n];
            let ss = &tape.s[idx * n..(idx + 1) * n];
            let cs = &tape.c[idx * n..(idx + 1) * n];
            for j in 0..n {
                let (h, z, s, c) = (hp[j], zs[j], ss[j], cs[j]);
                let gz = gh[j] * k * (1.0 - h / c);
                let gc = gh[j] * k * z * h / (c * c);
                gaz[j] = gz * z * (1.0 - z);
                gac[j] = gc * s * (1.0 - s);
                next_gh[j] = gh[j] * (1.0 - k * z / c);
            }
            params.u_z.tmatvec_add(&gaz, &mut next_gh);
            params.u.tmatvec_add(&gac, &mut next_gh);
            g.u_z.add_outer(&gaz, hp);
            g.u.add_outer(&gac, hp);
            sum_gaz.iter_mut().zip(&gaz).for_each(|(a, b)| *a += b);
            sum_gac.iter_mut().zip(&gac).for_each(|(a, b)| *a += b);
            std::mem::swap(&mut gh, &mut next_gh);
        }
        x.iter_mut().zip(seq.step(t)).for_each(|(a, &b)| *a = b as f64);
        g.w_z.add_outer(&sum_gaz, &x);
        g.w.add_outer(&sum_gac, &x);
    }
    Ok((l, correct, g))
}

fn check_batch(batch: &[InputSequence], params: &NetworkParams) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(s) = batch.iter().find(|s| s.width() != params.inputs()) {
        return Err(Error::Shape {
            expected: format!("sequence width {}", params.inputs()),
            got: format!("{} in {}", s.width(), s.id),
        });
    }
    Ok(())
}

pub struct BatchGradient {
    pub gradient: NetworkParams,
    pub mean_loss: f64,
    pub correct: usize,
}

/// Gradient of the mean loss over `batch`. Per-sequence terms are combined in
/// batch order, so the result does not depend on the number of workers.
pub fn batch_gradient(batch: &[InputSequence], params: &NetworkParams, cfg: &IntegrationConfig) -> Result<BatchGradient> {
    check_batch(batch, params)?;
    let parts: Vec<(f64, bool, NetworkParams)> = batch
        .par_iter()
        .map(|s| sequence_gradient(s, params, cfg))
        .collect::<Result<_>>()?;
    let mut total = NetworkParams::zeros(params.hidden(), params.inputs());
    total.tau_h = 0.0;
    let (mut loss_sum, mut correct) = (0.0, 0);
    for (l, ok, g) in &parts {
        loss_sum += l;
        correct += *ok as usize;
        for (acc, gm) in total.matrices_mut().into_iter().zip(g.matrices()) {
            acc.data.iter_mut().zip(&gm.data).for_each(|(a, b)| *a += b);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for (m, name) in total.matrices_mut().into_iter().zip(crate::afua::PARAM_NAMES) {
        for v in m.data.iter_mut() {
            *v *= inv;
            if !v.is_finite() {
                return Err(Error::numerical(format!("non-finite gradient in {name}")));
            }
        }
    }
    Ok(BatchGradient {
        gradient: total,
        mean_loss: loss_sum * inv,
        correct,
    })
}

pub fn gradients(batch: &[InputSequence], params: &NetworkParams, cfg: &IntegrationConfig) -> Result<NetworkParams> {
    Ok(batch_gradient(batch, params, cfg)?.gradient)
}

/// Mean loss only, used by gradient checks.
pub fn mean_loss(batch: &[InputSequence], params: &NetworkParams, cfg: &IntegrationConfig) -> Result<f64> {
    check_batch(batch, params)?;
    let mut sum = 0.0;
    for s in batch {
        let h = crate::afua::run_sequence(s, params, cfg, DEFAULT_H0)?;
        sum += loss(crate::afua::head_forward(&h, params), s.label);
    }
    Ok(sum / batch.len() as f64)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &NetworkParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.matrices().iter().map(|m| vec![0.0; m.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut NetworkParams, grad: &NetworkParams, c: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (k, (p, g)) in params.matrices_mut().into_iter().zip(grad.matrices()).enumerate() {
            for (i, (w, &gi)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                *w -= c.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + c.adam_epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub params: NetworkParams,
    pub wall_clock_secs: f64,
}

/// Equality ignores wall-clock time.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.params == other.params
    }
}

impl TrainReport {
    pub fn best(&self) -> &EpochMetrics {
        &self.epochs[self.best_epoch - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`, 0 = negative, 1 = positive.
    pub confusion: [[usize; 2]; 2],
}

impl Evaluation {
    pub fn n(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Tallies predictions against labels.
pub fn score(pairs: impl IntoIterator<Item = (Label, Label, f64)>) -> Evaluation {
    let mut confusion = [[0usize; 2]; 2];
    let (mut loss_sum, mut n) = (0.0, 0usize);
    for (truth, pred, l) in pairs {
        confusion[truth.index()][pred.index()] += 1;
        loss_sum += l;
        n += 1;
    }
    let hits = confusion[0][0] + confusion[1][1];
    Evaluation {
        accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        mean_loss: if n == 0 { 0.0 } else { loss_sum / n as f64 },
        confusion,
    }
}

pub fn evaluate(params: &NetworkParams, sequences: &[InputSequence], cfg: &IntegrationConfig) -> Result<Evaluation> {
    if sequences.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let out: Vec<(Label, Label, f64)> = sequences
        .par_iter()
        .map(|s| {
            let (pred, p) = crate::afua::classify(s, params, cfg)?;
            Ok((s.label, pred, loss(p, s.label)))
        })
        .collect::<Result<_>>()?;
    Ok(score(out))
}

pub fn train(splits: &DatasetSplit, config: &TrainConfig, cfg: &IntegrationConfig) -> Result<(NetworkParams, TrainReport)> {
    train_with_progress(splits, config, cfg, |_| {})
}

pub fn train_with_progress(
    splits: &DatasetSplit,
    config: &TrainConfig,
    cfg: &IntegrationConfig,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<(NetworkParams, TrainReport)> {
    config.validate()?;
    if splits.train.is_empty() || splits.validation.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation sets"));
    }
    let width = splits.train[0].width();
    let mut params = NetworkParams::init(config.hidden_units, width, derive_seed(config.seed, 0));
    params.fc2_b.data.iter_mut().for_each(|b| *b += config.logit_bias_offset);
    cfg.validate(params.tau_h)?;
    let started = Instant::now();
    let mut shuffle_rng = rng_from_seed(derive_seed(config.seed, 1));
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, NetworkParams)> = None;
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| splits.train[i].clone()));
            let bg = batch_gradient(&batch, &params, cfg)
                .map_err(|e| Error::numerical(format!("epoch {epoch}: {e}")))?;
            if !bg.mean_loss.is_finite() {
                return Err(Error::numerical(format!("epoch {epoch}: training loss diverged")));
            }
            loss_sum += bg.mean_loss * chunk.len() as f64;
            correct += bg.correct;
            adam.step(&mut params, &bg.gradient, config);
        }
        let val = evaluate(&params, &splits.validation, cfg).map_err(|e| Error::numerical(format!("epoch {epoch}: {e}")))?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / splits.train.len() as f64,
            train_acc: correct as f64 / splits.train.len() as f64,
            val_loss: val.mean_loss,
            val_acc: val.accuracy,
        };
        progress(&m);
        epochs.push(m);
        if best.as_ref().is_none_or(|(acc, _, _)| val.accuracy >= *acc) {
            best = Some((val.accuracy, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let report = TrainReport {
        config: *config,
        epochs,
        best_epoch,
        params: best_params.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((best_params, report))
}

/// Training curve CSV: `epoch,train_loss,train_acc,val_loss,val_acc`.
pub fn write_curve_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]).map_err(err)?;
    for m in &report.epochs {
        w.write_record([
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.train_acc.to_string(),
            m.val_loss.to_string(),
            m.val_acc.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Confusion CSV with rows = true class and columns = predicted class.
pub fn write_confusion_csv(path: &Path, eval: &Evaluation) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["true_label", "predicted_negative", "predicted_positive"]).map_err(err)?;
    for (k, name) in ["negative", "positive"].iter().enumerate() {
        w.write_record([name.to_string(), eval.confusion[k][0].to_string(), eval.confusion[k][1].to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Relative finite-difference mismatch per parameter, `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn gradient_check(
    batch: &[InputSequence],
    params: &NetworkParams,
    cfg: &IntegrationConfig,
    step: f64,
    floor: f64,
) -> Result<Vec<(&'static str, usize, f64, f64)>> {
    let analytic = gradients(batch, params, cfg)?;
    let mut out = Vec::new();
    for (k, name) in crate::afua::PARAM_NAMES.iter().enumerate() {
        let len = params.matrices()[k].data.len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.matrices_mut()[k].data[i] += step;
            let mut minus = params.clone();
            minus.matrices_mut()[k].data[i] -= step;
            let numeric = (mean_loss(batch, &plus, cfg)? - mean_loss(batch, &minus, cfg)?) / (2.0 * step);
            let a = analytic.matrices()[k].data[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            out.push((*name, i, a, rel));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn toy_batch(n: usize, steps: usize, width: usize, seed: u64) -> Vec<InputSequence> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|i| {
                let v = (0..steps * width).map(|_| rng.random_range(-0.9f32..0.9)).collect();
                InputSequence::new(v, steps, width, Label::from_index(i % 2).unwrap(), format!("t{i}")).unwrap()
            })
            .collect()
    }

    /// A toy net whose FC2 pre-activations stay positive so the ReLU is differentiable.
    fn toy_params(seed: u64) -> NetworkParams {
        let mut p = NetworkParams::init(2, 3, seed);
        for m in [&mut p.w_z, &mut p.w, &mut p.u_z, &mut p.u] {
            m.data.iter_mut().for_each(|v| *v *= 2.0);
        }
        p.fc2_b.data = vec![1.5, 1.5];
        p
    }

    #[test]
    fn loss_values() {
        assert_eq!(loss([1.0, 0.0], Label::Negative), 0.0);
        assert!((loss([0.5, 0.5], Label::Positive) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(loss([1.0, 0.0], Label::Positive) > 0.0);
        assert!((loss([1.0, 0.0], Label::Positive) - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn finite_differences_match_bptt() {
        let cfg = IntegrationConfig { substeps: 2, ..Default::default() };
        for seed in 0..5 {
            let batch = toy_batch(3, 2, 3, 100 + seed);
            let p = toy_params(seed);
            for (name, i, a, rel) in gradient_check(&batch, &p, &cfg, 1e-5, 1e-8).unwrap() {
                assert!(rel <= 1e-4, "seed {seed} {name}[{i}]: analytic {a}, rel {rel}");
            }
        }
    }

    #[test]
    fn zero_input_kills_input_weight_gradient() {
        let batch: Vec<InputSequence> = (0..4)
            .map(|i| InputSequence::new(vec![0.0; 28 * 25], 28, 25, Label::from_index(i % 2).unwrap(), format!("z{i}")).unwrap())
            .collect();
        let p = NetworkParams::paper_shape(3);
        let g = gradients(&batch, &p, &IntegrationConfig::default()).unwrap();
        assert!(g.w.data.iter().all(|&v| v == 0.0));
        assert!(g.w_z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_same_mean_gradient() {
        let cfg = IntegrationConfig::default();
        let batch = toy_batch(4, 5, 3, 8);
        let p = toy_params(2);
        let g1 = gradients(&batch, &p, &cfg).unwrap();
        let doubled: Vec<InputSequence> = batch.iter().chain(&batch).cloned().collect();
        let g2 = gradients(&doubled, &p, &cfg).unwrap();
        for (a, b) in g1.matrices().iter().zip(g2.matrices()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-14 * x.abs().max(1e-300) + 1e-18);
            }
        }
    }

    #[test]
    fn evaluation_metrics() {
        let perfect = score([(Label::Negative, Label::Negative, 0.1), (Label::Positive, Label::Positive, 0.1)]);
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.confusion, [[1, 0], [0, 1]]);
        let constant = score((0..10).map(|i| (Label::from_index(i % 2).unwrap(), Label::Negative, 0.0)));
        assert_eq!(constant.accuracy, 0.5);
        assert_eq!(constant.confusion, [[5, 0], [5, 0]]);
    }

    #[test]
    fn training_is_deterministic_and_selects_best() {
        let data = toy_batch(40, 4, 3, 5);
        let split = crate::datapipe::make_splits(data, [0.5, 0.5, 0.0], 1).unwrap();
        let cfg = IntegrationConfig { substeps: 3, ..Default::default() };
        let tc = TrainConfig { batch_size: 8, epochs: 6, learning_rate: 1e-2, seed: 4, hidden_units: 3, ..Default::default() };
        let (p1, r1) = train(&split, &tc, &cfg).unwrap();
        let (p2, r2) = train(&split, &tc, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(p1, p2);
        assert_eq!(r1.epochs.len(), 6);
        assert!(r1.best().val_acc >= r1.epochs[0].val_acc);
        let max = r1.epochs.iter().map(|m| m.val_acc).fold(0.0, f64::max);
        assert_eq!(r1.best().val_acc, max);
        assert!(r1.epochs[r1.best_epoch..].iter().all(|m| m.val_acc < max));
        let bad = TrainConfig { epochs: 0, ..tc };
        assert!(train(&split, &bad, &cfg).is_err());
    }

    #[test]
    fn csv_exports() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_batch(10, 2, 3, 5);
        let split = crate::datapipe::make_splits(data, [0.5, 0.5, 0.0], 1).unwrap();
        let tc = TrainConfig { batch_size: 5, epochs: 2, hidden_units: 2, ..Default::default() };
        let (p, r) = train(&split, &tc, &IntegrationConfig::default()).unwrap();
        let path = dir.path().join("curve.csv");
        write_curve_csv(&path, &r).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n1,"));
        assert_eq!(text.lines().count(), 3);
        let e = evaluate(&p, &split.validation, &IntegrationConfig::default()).unwrap();
        let cpath = dir.path().join("confusion.csv");
        write_confusion_csv(&cpath, &e).unwrap();
        assert_eq!(std::fs::read_to_string(&cpath).unwrap().lines().count(), 3);
    }
}
