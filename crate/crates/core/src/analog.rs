//! Current-mode realization of the AFUA cell and the chip power/area budget.

use serde::{Deserialize, Serialize};

use crate::afua::{sigmoid, IntegrationConfig, NetworkParams};
use crate::datapipe::InputSequence;
use crate::error::{Error, Result};

/// Branch currents in nA.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentState {
    pub i_h: Vec<f64>,
    pub i_z: Vec<f64>,
    pub i_htilde: Vec<f64>,
    pub i_unit: f64,
}

impl CurrentState {
    pub fn normalized(&self) -> Vec<f64> {
        self.i_h.iter().map(|i| i / self.i_unit).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurrentTrajectory {
    /// One entry per substep.
    pub states: Vec<CurrentState>,
    /// Branch currents that hit the `I_unit·ε` floor or the `I_unit·(1−ε)` ceiling.
    pub clamped: usize,
}

/// Integrates `τ_h·dI_h/dt = I_z·(1 − I_h/I_htilde)` with the same Euler scheme as the
/// normalized cell, starting from `I_h = I_unit·h0`.
pub fn simulate_current_mode(
    seq: &InputSequence,
    params: &NetworkParams,
    i_unit: f64,
    h0: f64,
    cfg: &IntegrationConfig,
) -> Result<CurrentTrajectory> {
    if !(i_unit > 0.0 && i_unit.is_finite()) {
        return Err(Error::invalid(format!("I_unit must be positive, got {i_unit}")));
    }
    if seq.width() != params.inputs() {
        return Err(Error::Shape {
            expected: format!("sequence width {}", params.inputs()),
            got: format!("{} in {}", seq.width(), seq.id),
        });
    }
    cfg.validate(params.tau_h)?;
    let n = params.hidden();
    let k = cfg.dt / params.tau_h;
    let (floor, ceil) = (i_unit * cfg.epsilon, i_unit * (1.0 - cfg.epsilon));
    let mut i_h = vec![i_unit * h0; n];
    let mut states = Vec::with_capacity(seq.n_steps() * cfg.substeps);
    let mut clamped = 0;
    let mut x = vec![0.0; seq.width()];
    let (mut wzx, mut wx) = (vec![0.0; n], vec![0.0; n]);
    let (mut uz, mut u) = (vec![0.0; n], vec![0.0; n]);
    for t in 0..seq.n_steps() {
        x.iter_mut().zip(seq.step(t)).for_each(|(a, &b)| *a = b as f64);
        params.w_z.matvec_into(&x, &mut wzx);
        params.w.matvec_into(&x, &mut wx);
        for _ in 0..cfg.substeps {
            let h: Vec<f64> = i_h.iter().map(|i| i / i_unit).collect();
            params.u_z.matvec_into(&h, &mut uz);
            params.u.matvec_into(&h, &mut u);
            let mut i_z = vec![0.0; n];
            let mut i_ht = vec![0.0; n];
            for j in 0..n {
                i_z[j] = i_unit * sigmoid(wzx[j] + uz[j]);
                let target = i_unit * sigmoid(wx[j] + u[j]);
                if target < floor {
                    clamped += 1;
                }
                i_ht[j] = target.max(floor);
                let next = i_h[j] + k * i_z[j] * (1.0 - i_h[j] / i_ht[j]);
                if !next.is_finite() {
                    return Err(Error::numerical(format!("step {t}: current I_h[{j}] is not finite")));
                }
                if next < floor || next > ceil {
                    clamped += 1;
                }
                i_h[j] = next.clamp(floor, ceil);
            }
            states.push(CurrentState {
                i_h: i_h.clone(),
                i_z,
                i_htilde: i_ht,
                i_unit,
            });
        }
    }
    Ok(CurrentTrajectory { states, clamped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareBudget {
    pub n_current_sources: u64,
    /// mm² per source.
    pub source_area: f64,
    pub routing_factor: f64,
    pub n_amps: u64,
    /// mA per amplifier.
    pub amp_current: f64,
    /// V.
    pub supply_voltage: f64,
    /// Frames per second; informational.
    pub frame_rate: f64,
}

impl Default for HardwareBudget {
    fn default() -> Self {
        HardwareBudget {
            n_current_sources: 2592,
            source_area: 0.22 * 0.04,
            routing_factor: 1.315,
            n_amps: 25,
            amp_current: 0.47,
            supply_voltage: 3.3,
            frame_rate: 20.0,
        }
    }
}

impl HardwareBudget {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("source_area", self.source_area),
            ("amp_current", self.amp_current),
            ("supply_voltage", self.supply_voltage),
            ("frame_rate", self.frame_rate),
        ];
        for (name, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.routing_factor >= 1.0 && self.routing_factor.is_finite()) {
            return Err(Error::invalid(format!("routing_factor must be at least 1, got {}", self.routing_factor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub raw_array_area_mm2: f64,
    pub chip_area_mm2: f64,
    pub supply_current_ma: f64,
    pub power_mw: f64,
    pub frame_rate_fps: f64,
}

pub fn hardware_budget(b: &HardwareBudget) -> Result<BudgetReport> {
    b.validate()?;
    let raw = b.n_current_sources as f64 * b.source_area;
    let current = b.n_amps as f64 * b.amp_current;
    Ok(BudgetReport {
        raw_array_area_mm2: raw,
        chip_area_mm2: raw * b.routing_factor,
        supply_current_ma: current,
        power_mw: current * b.supply_voltage,
        frame_rate_fps: b.frame_rate,
    })
}

impl BudgetReport {
    pub fn table(&self) -> String {
        format!(
            "raw array area   {:>10.4} mm2\nchip area        {:>10.4} mm2\nsupply current   {:>10.4} mA\npower            {:>10.4} mW\nframe rate       {:>10.1} FPS\n",
            self.raw_array_area_mm2, self.chip_area_mm2, self.supply_current_ma, self.power_mw, self.frame_rate_fps
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::afua::{trajectory, DEFAULT_H0};
    use crate::phantom::Label;
    use proptest::prelude::*;

    fn seq(values: Vec<f32>, steps: usize, width: usize) -> InputSequence {
        InputSequence::new(values, steps, width, Label::Negative, "a").unwrap()
    }

    #[test]
    fn zero_weights_hold_half() {
        let p = NetworkParams::zeros(4, 3);
        let s = seq(vec![0.3; 6], 2, 3);
        let cfg = IntegrationConfig::default();
        let tr = simulate_current_mode(&s, &p, 40.0, DEFAULT_H0, &cfg).unwrap();
        assert_eq!(tr.states.len(), 20);
        assert!(tr.states.iter().all(|st| st.i_h.iter().all(|&i| i == 20.0)));
        assert_eq!(tr.clamped, 0);
    }

    #[test]
    fn rejects_bad_unit() {
        let p = NetworkParams::zeros(2, 1);
        let s = seq(vec![0.0], 1, 1);
        for bad in [0.0, -1.0, f64::NAN] {
            assert!(simulate_current_mode(&s, &p, bad, 0.5, &IntegrationConfig::default()).is_err());
        }
    }

    #[test]
    fn budget_defaults() {
        let r = hardware_budget(&HardwareBudget::default()).unwrap();
        assert!((r.raw_array_area_mm2 - 22.8096).abs() < 1e-9);
        assert!((r.chip_area_mm2 - 29.994624).abs() < 1e-9);
        assert!((r.supply_current_ma - 11.75).abs() < 1e-12);
        assert!((r.power_mw - 38.775).abs() < 1e-9);
        let empty = HardwareBudget {
            n_current_sources: 0,
            n_amps: 0,
            ..Default::default()
        };
        let z = hardware_budget(&empty).unwrap();
        assert_eq!((z.chip_area_mm2, z.power_mw, z.supply_current_ma), (0.0, 0.0, 0.0));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<BudgetReport>(&json).unwrap(), r);
        assert!(hardware_budget(&HardwareBudget { routing_factor: 0.9, ..Default::default() }).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn matches_normalized_cell(seed in 0u64..1000, vals in proptest::collection::vec(-0.99f32..0.99, 12)) {
            let p = NetworkParams::init(5, 3, seed);
            let s = seq(vals, 4, 3);
            let cfg = IntegrationConfig::default();
            let reference = trajectory(&s, &p, &cfg, DEFAULT_H0).unwrap();
            let a = simulate_current_mode(&s, &p, 1.0, DEFAULT_H0, &cfg).unwrap();
            let b = simulate_current_mode(&s, &p, 25.0, DEFAULT_H0, &cfg).unwrap();
            for ((h, sa), sb) in reference.iter().zip(&a.states).zip(&b.states) {
                for (x, y) in h.iter().zip(sb.normalized()) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
                prop_assert_eq!(&sa.i_h, h);
            }
        }

        #[test]
        fn budget_linear_in_counts(n in 0u64..10_000, m in 0u64..100) {
            let b = HardwareBudget { n_current_sources: n, n_amps: m, ..Default::default() };
            let b2 = HardwareBudget { n_current_sources: 2 * n, n_amps: 2 * m, ..Default::default() };
            let (r, r2) = (hardware_budget(&b).unwrap(), hardware_budget(&b2).unwrap());
            prop_assert!((r2.chip_area_mm2 - 2.0 * r.chip_area_mm2).abs() <= 1e-9 * r2.chip_area_mm2.max(1.0));
            prop_assert!((r2.power_mw - 2.0 * r.power_mw).abs() <= 1e-9 * r2.power_mw.max(1.0));
        }
    }
}
