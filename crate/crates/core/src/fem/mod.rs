//! Complete-electrode-model forward solver on the probe-face mesh.
//!
//! Unknowns are the vertex potentials `u` and one potential `U_l` per outer
//! electrode. The Galerkin system
//!
//! ```text
//! [ K   B ] [u]   [f]
//! [ Bᵀ  D ] [U] = [I]
//! ```
//!
//! has `K = A_sigma + sum_l (1/z_l) M_l` (linear-triangle stiffness with the
//! conductivity times the slice thickness, plus the contact-edge mass of each
//! electrode), `B_il = -(1/z_l) ∫ phi_i` over the contact and
//! `D_ll = |e_l| / z_l`. `K` is factored once (skyline LDLᵀ); the electrode
//! block is eliminated through its 8×8 Schur complement, bordered by the
//! zero-mean-electrode-potential grounding row.
//!
//! Units: conductivity mS/m, lengths mm, contact impedance Ω·mm, currents mA,
//! potentials mV.

mod frame;
mod skyline;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use frame::{load_frames, save_frames, write_frame_csv, Frame, FRAME_MAGIC, N_PATTERNS};
pub use skyline::Skyline;

use crate::error::{Error, Result};
use crate::geometry::{enumerate_current_patterns, CurrentPattern, Mesh, ProbeLayout, FIRST_OUTER, INNER_COUNT, OUTER_COUNT};
use crate::phantom::Phantom;

/// Thickness of the tissue slice folded into the 2D conductivity, mm.
pub const SLICE_THICKNESS_MM: f64 = 5.0;
pub const DEFAULT_CONTACT_IMPEDANCE: f64 = 10.0;
pub const DEFAULT_SALINE_SIGMA: f64 = 200.0;
const MS_PER_M_TO_S_PER_MM: f64 = 1e-6;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardConfig {
    /// Contact impedance of every outer electrode, Ω·mm.
    pub contact_impedance: Complex64,
    pub thickness_mm: f64,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            contact_impedance: Complex64::new(DEFAULT_CONTACT_IMPEDANCE, 0.0),
            thickness_mm: SLICE_THICKNESS_MM,
        }
    }
}

impl ForwardConfig {
    pub fn contact_impedances(&self) -> [Complex64; OUTER_COUNT] {
        [self.contact_impedance; OUTER_COUNT]
    }
}

/// Stiffness of one linear triangle with unit conductivity:
/// `(b_i b_j + c_i c_j) / (4 A)`.
pub fn triangle_stiffness(p: [crate::geometry::Point2; 3]) -> [[f64; 3]; 3] {
    let b = [p[1].y - p[2].y, p[2].y - p[0].y, p[0].y - p[1].y];
    let c = [p[2].x - p[1].x, p[0].x - p[2].x, p[1].x - p[0].x];
    let area = 0.5 * ((p[1].x - p[0].x) * (p[2].y - p[0].y) - (p[2].x - p[0].x) * (p[1].y - p[0].y));
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = (b[i] * b[j] + c[i] * c[j]) / (4.0 * area);
        }
    }
    k
}

/// Assembled but unfactored vertex block plus electrode coupling.
#[derive(Debug, Clone)]
pub struct CemMatrix {
    pub n_vertices: usize,
    pub k: Skyline,
    /// Sparse columns of `B`, one per electrode: `(vertex, value)`.
    pub b: Vec<Vec<(usize, Complex64)>>,
    pub d: [Complex64; OUTER_COUNT],
}

impl CemMatrix {
    pub fn dim(&self) -> usize {
        self.n_vertices + OUTER_COUNT
    }

    /// Entry of the full `(vertices + 8)`-square system matrix.
    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        let n = self.n_vertices;
        match (i < n, j < n) {
            (true, true) => self.k.get(i, j),
            (true, false) => column_entry(&self.b[j - n], i),
            (false, true) => column_entry(&self.b[i - n], j),
            (false, false) => {
                if i == j {
                    self.d[i - n]
                } else {
                    ZERO
                }
            }
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<Complex64>> {
        let m = self.dim();
        (0..m).map(|i| (0..m).map(|j| self.entry(i, j)).collect()).collect()
    }
}

fn column_entry(col: &[(usize, Complex64)], row: usize) -> Complex64 {
    col.iter().filter(|(v, _)| *v == row).map(|(_, x)| *x).sum()
}

/// Vertex-block stiffness only, `A_sigma`, for `element_sigma` in mS/m.
pub fn assemble_stiffness(mesh: &Mesh, element_sigma: &[Complex64], thickness_mm: f64) -> Result<Skyline> {
    if element_sigma.len() != mesh.n_triangles() {
        return Err(Error::Shape {
            expected: format!("{} element conductivities", mesh.n_triangles()),
            got: element_sigma.len().to_string(),
        });
    }
    if let Some(t) = element_sigma.iter().position(|s| !(s.re > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!(
            "element {t} conductivity {} must have positive real part",
            element_sigma[t]
        )));
    }
    let mut sky = Skyline::with_profile(
        mesh.n_vertices(),
        mesh.triangles
            .iter()
            .flat_map(|t| (0..3).flat_map(move |a| (0..3).map(move |b| (t[a], t[b])))),
    );
    for (tri, &sigma) in mesh.triangles.iter().zip(element_sigma) {
        let ke = triangle_stiffness(tri.map(|i| mesh.vertices[i]));
        let g = sigma * (MS_PER_M_TO_S_PER_MM * thickness_mm);
        for a in 0..3 {
            for b in 0..=a {
                let (i, j) = (tri[a], tri[b]);
                sky.add(i, j, g * ke[a][b]);
            }
        }
    }
    Ok(sky)
}

/// Full CEM matrix before factorization.
pub fn assemble_matrix(
    mesh: &Mesh,
    element_sigma: &[Complex64],
    contact_impedance: &[Complex64; OUTER_COUNT],
    thickness_mm: f64,
) -> Result<CemMatrix> {
    if let Some(l) = contact_impedance.iter().position(|z| !(z.norm() > 0.0) || !z.is_finite()) {
        return Err(Error::invalid(format!(
            "contact impedance of electrode {} must be nonzero",
            FIRST_OUTER + l
        )));
    }
    if mesh.outer_contacts.len() != OUTER_COUNT {
        return Err(Error::invalid(format!(
            "mesh must map {OUTER_COUNT} outer electrodes, has {}",
            mesh.outer_contacts.len()
        )));
    }
    let mut k = assemble_stiffness(mesh, element_sigma, thickness_mm)?;
    let mut b = vec![Vec::new(); OUTER_COUNT];
    let mut d = [ZERO; OUTER_COUNT];
    for (l, edges) in mesh.outer_contacts.iter().enumerate() {
        let y = contact_impedance[l].inv();
        for &[p, q] in edges {
            let len = mesh.vertices[p].dist(mesh.vertices[q]);
            k.add(p, p, y * (len / 3.0));
            k.add(q, q, y * (len / 3.0));
            k.add(p, q, y * (len / 6.0));
            b[l].push((p, -y * (len / 2.0)));
            b[l].push((q, -y * (len / 2.0)));
            d[l] += y * len;
        }
        // Merge duplicate vertices so each column is a proper sparse vector.
        b[l].sort_by_key(|e| e.0);
        b[l].dedup_by(|next, kept| {
            if next.0 == kept.0 {
                kept.1 += next.1;
                true
            } else {
                false
            }
        });
    }
    Ok(CemMatrix {
        n_vertices: mesh.n_vertices(),
        k,
        b,
        d,
    })
}

/// Factored CEM system, immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    matrix: CemMatrix,
    factor: Skyline,
    /// Columns of `K⁻¹ B`.
    kinv_b: Vec<Vec<Complex64>>,
    /// LU of the grounded Schur complement `[[S, 1], [1ᵀ, 0]]`.
    bordered: nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
    pub contact_impedance: [Complex64; OUTER_COUNT],
}

/// Potentials from one solve, referenced to the zero-mean electrode ground.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub vertex_potentials: Vec<Complex64>,
    pub electrode_potentials: [Complex64; OUTER_COUNT],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternSolution {
    pub electrode_potentials: [Complex64; OUTER_COUNT],
    pub inner_voltages: [Complex64; INNER_COUNT],
}

pub fn assemble(
    mesh: &Mesh,
    element_sigma: &[Complex64],
    contact_impedance: &[Complex64; OUTER_COUNT],
    thickness_mm: f64,
) -> Result<AssembledSystem> {
    let matrix = assemble_matrix(mesh, element_sigma, contact_impedance, thickness_mm)?;
    let mut factor = matrix.k.clone();
    factor.factorize()?;
    let n = matrix.n_vertices;
    let kinv_b: Vec<Vec<Complex64>> = matrix
        .b
        .iter()
        .map(|col| {
            let mut x = vec![ZERO; n];
            for &(v, val) in col {
                x[v] += val;
            }
            factor.solve_in_place(&mut x);
            x
        })
        .collect();
    // S = D - Bᵀ K⁻¹ B, bordered by the grounding constraint sum(U) = 0.
    let m = OUTER_COUNT + 1;
    let mut s = DMatrix::from_element(m, m, ZERO);
    for l in 0..OUTER_COUNT {
        for (j, kb) in kinv_b.iter().enumerate() {
            let bt_kb: Complex64 = matrix.b[l].iter().map(|&(v, val)| val * kb[v]).sum();
            s[(l, j)] = -bt_kb;
        }
        s[(l, l)] += matrix.d[l];
        s[(l, OUTER_COUNT)] = Complex64::new(1.0, 0.0);
        s[(OUTER_COUNT, l)] = Complex64::new(1.0, 0.0);
    }
    let bordered = s.lu();
    if !bordered.is_invertible() {
        return Err(Error::Singular(
            "electrode Schur complement is singular even with the zero-mean grounding constraint"
                .into(),
        ));
    }
    Ok(AssembledSystem {
        matrix,
        factor,
        kinv_b,
        bordered,
        contact_impedance: *contact_impedance,
    })
}

impl AssembledSystem {
    pub fn matrix(&self) -> &CemMatrix {
        &self.matrix
    }

    pub fn n_vertices(&self) -> usize {
        self.matrix.n_vertices
    }

    fn electrode_potentials(&self, rhs: [Complex64; OUTER_COUNT]) -> Result<[Complex64; OUTER_COUNT]> {
        let mut r = DVector::from_element(OUTER_COUNT + 1, ZERO);
        for l in 0..OUTER_COUNT {
            r[l] = rhs[l];
        }
        let x = self
            .bordered
            .solve(&r)
            .ok_or_else(|| Error::Singular("grounded electrode system could not be solved".into()))?;
        let mut out = [ZERO; OUTER_COUNT];
        for l in 0..OUTER_COUNT {
            out[l] = x[l];
            if !out[l].is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite potential on electrode {}",
                    FIRST_OUTER + l
                )));
            }
        }
        Ok(out)
    }

    /// General solve with point currents injected at vertices and currents on
    /// the outer electrodes (both in mA).
    pub fn solve_general(
        &self,
        vertex_currents: &[Complex64],
        electrode_currents: &[Complex64; OUTER_COUNT],
    ) -> Result<Solution> {
        let n = self.n_vertices();
        if vertex_currents.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} vertex currents"),
                got: vertex_currents.len().to_string(),
            });
        }
        let mut w = vertex_currents.to_vec();
        let driven = w.iter().any(|z| *z != ZERO);
        if driven {
            self.factor.solve_in_place(&mut w);
        }
        let mut rhs = *electrode_currents;
        if driven {
            for (l, col) in self.matrix.b.iter().enumerate() {
                rhs[l] -= col.iter().map(|&(v, val)| val * w[v]).sum::<Complex64>();
            }
        }
        let electrode_potentials = self.electrode_potentials(rhs)?;
        for (l, kb) in self.kinv_b.iter().enumerate() {
            let u_l = electrode_potentials[l];
            for (wi, k) in w.iter_mut().zip(kb) {
                *wi -= u_l * k;
            }
        }
        Ok(Solution {
            vertex_potentials: w,
            electrode_potentials,
        })
    }

    pub fn solve_currents(&self, electrode_currents: &[Complex64; OUTER_COUNT]) -> Result<Solution> {
        self.solve_general(&vec![ZERO; self.n_vertices()], electrode_currents)
    }

    /// Current flowing from each electrode into the tissue for a solution.
    pub fn electrode_currents(&self, sol: &Solution) -> [Complex64; OUTER_COUNT] {
        let mut out = [ZERO; OUTER_COUNT];
        for l in 0..OUTER_COUNT {
            out[l] = self.matrix.d[l] * sol.electrode_potentials[l]
                + self.matrix.b[l]
                    .iter()
                    .map(|&(v, val)| val * sol.vertex_potentials[v])
                    .sum::<Complex64>();
        }
        out
    }

    pub fn solve_pattern(&self, pattern: &CurrentPattern, probes: &[usize]) -> Result<PatternSolution> {
        let electrode_currents = pattern_currents(pattern)?;
        let electrode_potentials = self.electrode_potentials(electrode_currents)?;
        if probes.len() != INNER_COUNT {
            return Err(Error::Shape {
                expected: format!("{INNER_COUNT} probe vertices"),
                got: probes.len().to_string(),
            });
        }
        let mut inner_voltages = [ZERO; INNER_COUNT];
        for (out, &p) in inner_voltages.iter_mut().zip(probes) {
            *out = -self
                .kinv_b
                .iter()
                .zip(&electrode_potentials)
                .map(|(kb, u)| u * kb[p])
                .sum::<Complex64>();
        }
        Ok(PatternSolution {
            electrode_potentials,
            inner_voltages,
        })
    }
}

/// Electrode current vector of a pattern: +amplitude at the source, -amplitude at the sink.
pub fn pattern_currents(pattern: &CurrentPattern) -> Result<[Complex64; OUTER_COUNT]> {
    let p = CurrentPattern::new(pattern.source, pattern.sink, pattern.amplitude)?;
    let (s, t) = p.slots();
    let mut c = [ZERO; OUTER_COUNT];
    c[s] = Complex64::new(p.amplitude, 0.0);
    c[t] = Complex64::new(-p.amplitude, 0.0);
    Ok(c)
}

/// Frame for an arbitrary conductivity field: one assembly, 28 pattern solves.
pub fn simulate_field(
    element_sigma: &[Complex64],
    mesh: &Mesh,
    layout: &ProbeLayout,
    cfg: &ForwardConfig,
    id: &str,
) -> Result<Frame> {
    let system = assemble(mesh, element_sigma, &cfg.contact_impedances(), cfg.thickness_mm)?;
    let patterns = enumerate_current_patterns(layout);
    let mut voltages = Vec::with_capacity(patterns.len() * INNER_COUNT);
    for p in &patterns {
        let sol = system.solve_pattern(p, &mesh.inner_probes)?;
        voltages.extend_from_slice(&sol.inner_voltages);
    }
    Frame::new(voltages, patterns, id.to_string())
}

pub fn simulate_frame(
    phantom: &Phantom,
    mesh: &Mesh,
    layout: &ProbeLayout,
    cfg: &ForwardConfig,
) -> Result<Frame> {
    simulate_field(&phantom.element_sigma, mesh, layout, cfg, &phantom.id()).map_err(|e| Error::Phantom {
        id: phantom.id(),
        source: Box::new(e),
    })
}

pub fn reference_id(mesh: &Mesh, sigma_saline: Complex64, cfg: &ForwardConfig) -> String {
    format!(
        "saline re={} im={} z={} t={} mesh={:016x}",
        sigma_saline.re, sigma_saline.im, cfg.contact_impedance, cfg.thickness_mm,
        mesh.fingerprint()
    )
}

/// Frame of a uniform saline phantom. With `cache`, a matching cached frame is
/// reused and a fresh computation is written there.
pub fn reference_frame(
    mesh: &Mesh,
    layout: &ProbeLayout,
    sigma_saline: Complex64,
    cfg: &ForwardConfig,
    cache: Option<&Path>,
) -> Result<Frame> {
    if !(sigma_saline.re > 0.0) {
        return Err(Error::invalid("saline conductivity must have positive real part"));
    }
    let id = reference_id(mesh, sigma_saline, cfg);
    if let Some(path) = cache {
        if path.exists() {
            if let Ok(mut frames) = load_frames(path) {
                if frames.len() == 1 && frames[0].phantom_id == id {
                    return Ok(frames.remove(0));
                }
            }
        }
    }
    let field = vec![sigma_saline; mesh.n_triangles()];
    let frame = simulate_field(&field, mesh, layout, cfg, &id)?;
    if let Some(path) = cache {
        save_frames(path, std::slice::from_ref(&frame))?;
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_mesh, build_probe_layout, GeometryConfig, Point2, Region};

    fn geo(h: f64) -> (ProbeLayout, Mesh) {
        let layout = build_probe_layout(&GeometryConfig::default()).unwrap();
        let mesh = build_mesh(&layout, h).unwrap();
        (layout, mesh)
    }

    #[test]
    fn single_triangle_stiffness_matches_hand_computation() {
        // Right triangle (0,0), (2,0), (0,1): area 1,
        // b = (-1, 1, 0), c = (-2, 0, 2), K = (b bᵀ + c cᵀ) / 4.
        let v = vec![Point2::new(0.0, 0.0), Point2::new(2.0, 0.0), Point2::new(0.0, 1.0)];
        let mesh = Mesh::from_parts(v, vec![[0, 1, 2]], vec![Region::Probe], vec![], vec![]).unwrap();
        // sigma * 1e-6 * thickness = 1 S with thickness 1 and sigma 1e6 mS/m.
        let sky = assemble_stiffness(&mesh, &[Complex64::new(1e6, 0.0)], 1.0).unwrap();
        let hand = [[1.25, -0.25, -1.0], [-0.25, 0.25, 0.0], [-1.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((sky.get(i, j) - Complex64::new(hand[i][j], 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn assembly_is_symmetric_and_linear() {
        let (_, mesh) = geo(0.6);
        let sigma: Vec<Complex64> = (0..mesh.n_triangles())
            .map(|t| Complex64::new(100.0 + (t % 7) as f64, 5.0 + (t % 3) as f64))
            .collect();
        let z = [Complex64::new(10.0, 1.0); OUTER_COUNT];
        let a = assemble_matrix(&mesh, &sigma, &z, 5.0).unwrap();
        let dense = a.to_dense();
        let m = dense.len();
        assert_eq!(m, mesh.n_vertices() + 8);
        for i in 0..m {
            for j in 0..i {
                assert!((dense[i][j] - dense[j][i]).norm() <= 1e-15 * dense[i][i].norm().max(1.0));
            }
        }
        let sigma2: Vec<Complex64> = sigma.iter().map(|s| s * 2.0).collect();
        let z2 = [Complex64::new(10.0, 1.0) / 2.0; OUTER_COUNT];
        let b = assemble_matrix(&mesh, &sigma2, &z2, 5.0).unwrap().to_dense();
        for i in 0..m {
            for j in 0..m {
                assert!((b[i][j] - dense[i][j] * 2.0).norm() <= 1e-13 * (1.0 + dense[i][j].norm()));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (_, mesh) = geo(0.8);
        let good = vec![Complex64::new(100.0, 0.0); mesh.n_triangles()];
        let z = [Complex64::new(10.0, 0.0); OUTER_COUNT];
        let mut bad = good.clone();
        bad[3] = Complex64::new(-1.0, 0.0);
        assert!(assemble(&mesh, &bad, &z, 5.0).is_err());
        assert!(assemble(&mesh, &good[1..], &z, 5.0).is_err());
        let mut z0 = z;
        z0[2] = ZERO;
        assert!(assemble(&mesh, &good, &z0, 5.0).is_err());
    }

    #[test]
    fn kirchhoff_and_grounding() {
        let (layout, mesh) = geo(0.5);
        let sigma = vec![Complex64::new(126.0, 12.76); mesh.n_triangles()];
        let sys = assemble(&mesh, &sigma, &ForwardConfig::default().contact_impedances(), 5.0).unwrap();
        for p in enumerate_current_patterns(&layout) {
            let sol = sys.solve_currents(&pattern_currents(&p).unwrap()).unwrap();
            let total: Complex64 = sol.electrode_potentials.iter().sum();
            let vmax = sol.electrode_potentials.iter().map(|u| u.norm()).fold(0.0, f64::max);
            assert!(total.norm() < 1e-12 * vmax, "{total} vs {vmax}");
            let currents = sys.electrode_currents(&sol);
            let injected = pattern_currents(&p).unwrap();
            for l in 0..OUTER_COUNT {
                assert!((currents[l] - injected[l]).norm() < 1e-9 * p.amplitude);
            }
            assert!(currents.iter().sum::<Complex64>().norm() <= 1e-10 * p.amplitude);
            // Fast path agrees with the full solve.
            let fast = sys.solve_pattern(&p, &mesh.inner_probes).unwrap();
            for (k, &v) in mesh.inner_probes.iter().enumerate() {
                assert!((fast.inner_voltages[k] - sol.vertex_potentials[v]).norm() < 1e-9);
            }
        }
    }
}
