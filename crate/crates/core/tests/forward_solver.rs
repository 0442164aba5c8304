use bioz_core::fem::{
    assemble, pattern_currents, reference_frame, simulate_field, simulate_frame, ForwardConfig, Frame,
};
use bioz_core::geometry::{
    build_mesh, build_probe_layout, enumerate_current_patterns, CurrentPattern, GeometryConfig, Mesh,
    Point2, ProbeLayout, OUTER_COUNT,
};
use bioz_core::phantom::{place_inclusion, Inclusion, Label, Phantom, TissueModel};
use num_complex::Complex64;

fn geometry(h: f64) -> (ProbeLayout, Mesh) {
    let layout = build_probe_layout(&GeometryConfig::default()).unwrap();
    let mesh = build_mesh(&layout, h).unwrap();
    (layout, mesh)
}

fn uniform(mesh: &Mesh, s: Complex64) -> Vec<Complex64> {
    vec![s; mesh.n_triangles()]
}

fn rel(a: Complex64, b: Complex64) -> f64 {
    (a - b).norm() / a.norm().max(b.norm())
}

#[test]
fn reciprocity_between_outer_and_inner_pairs() {
    let (_, mesh) = geometry(0.4);
    let sigma: Vec<Complex64> = mesh
        .centroids()
        .iter()
        .map(|c| Complex64::new(120.0 + 10.0 * (c.x * 0.7).sin(), 12.0 + c.y))
        .collect();
    let cfg = ForwardConfig::default();
    let sys = assemble(&mesh, &sigma, &cfg.contact_impedances(), cfg.thickness_mm).unwrap();

    let drive = pattern_currents(&CurrentPattern::new(26, 27, 1.0).unwrap()).unwrap();
    let a = sys.solve_currents(&drive).unwrap();
    let (v1, v2) = (mesh.inner_probes[0], mesh.inner_probes[1]);
    let forward = a.vertex_potentials[v1] - a.vertex_potentials[v2];

    let mut point = vec![Complex64::new(0.0, 0.0); mesh.n_vertices()];
    point[v1] = Complex64::new(1.0, 0.0);
    point[v2] = Complex64::new(-1.0, 0.0);
    let b = sys.solve_general(&point, &[Complex64::new(0.0, 0.0); OUTER_COUNT]).unwrap();
    let backward = b.electrode_potentials[0] - b.electrode_potentials[1];
    assert!(rel(forward, backward) <= 1e-8, "{forward} vs {backward}");
}

#[test]
fn homogeneous_scaling_is_inverse() {
    let (layout, mesh) = geometry(0.5);
    let cfg = ForwardConfig::default();
    // Scaling conductivity and contact admittance together scales every voltage by 1/2.
    let s = Complex64::new(126.0, 12.76);
    let a = simulate_field(&uniform(&mesh, s), &mesh, &layout, &cfg, "a").unwrap();
    let cfg2 = ForwardConfig {
        contact_impedance: cfg.contact_impedance / 2.0,
        ..cfg
    };
    let b = simulate_field(&uniform(&mesh, s * 2.0), &mesh, &layout, &cfg2, "b").unwrap();
    let vmax = a.voltages.iter().map(|v| v.norm()).fold(0.0, f64::max);
    for (x, y) in a.voltages.iter().zip(&b.voltages) {
        assert!((x * 0.5 - y).norm() <= 1e-10 * vmax);
    }
}

#[test]
fn reference_frame_is_linear_and_cached() {
    let (layout, mesh) = geometry(0.5);
    let cfg = ForwardConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("ref.frame");
    let r1 = reference_frame(&mesh, &layout, Complex64::new(200.0, 0.0), &cfg, Some(&cache)).unwrap();
    let bytes = std::fs::read(&cache).unwrap();
    let r2 = reference_frame(&mesh, &layout, Complex64::new(200.0, 0.0), &cfg, Some(&cache)).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(std::fs::read(&cache).unwrap(), bytes);

    let cfg10 = ForwardConfig {
        contact_impedance: cfg.contact_impedance / 10.0,
        ..cfg
    };
    let r10 = reference_frame(&mesh, &layout, Complex64::new(2000.0, 0.0), &cfg10, None).unwrap();
    let vmax = r1.voltages.iter().map(|v| v.norm()).fold(0.0, f64::max);
    for (x, y) in r1.voltages.iter().zip(&r10.voltages) {
        assert!((x * 0.1 - y).norm() <= 1e-10 * vmax);
    }
}

/// Slot of the inner electrode at grid (row, col) rotated a quarter turn counter-clockwise.
fn rotate_inner(slot: usize) -> usize {
    let (row, col) = (slot / 5, slot % 5);
    // (x, y) -> (-y, x) with x = col - 2, y = 2 - row.
    let (x, y) = (col as i32 - 2, 2 - row as i32);
    let (nx, ny) = (-y, x);
    ((2 - ny) * 5 + (nx + 2)) as usize
}

#[test]
fn saline_frame_has_quarter_turn_symmetry() {
    let (layout, mesh) = geometry(0.4);
    let frame =
        reference_frame(&mesh, &layout, Complex64::new(200.0, 0.0), &ForwardConfig::default(), None).unwrap();
    let patterns = enumerate_current_patterns(&layout);
    let index_of = |a: usize, b: usize| patterns.iter().position(|p| p.source == a && p.sink == b).unwrap();
    let vmax = frame.voltages.iter().map(|v| v.norm()).fold(0.0, f64::max);
    for quarter in 1..4 {
        for (pi, p) in patterns.iter().enumerate() {
            let (mut s, mut t) = (p.source, p.sink);
            let mut slots: Vec<usize> = (0..25).collect();
            for _ in 0..quarter {
                s = 26 + (s - 26 + 2) % 8;
                t = 26 + (t - 26 + 2) % 8;
                slots = slots.iter().map(|&k| rotate_inner(k)).collect();
            }
            let (qi, sign) = if s < t { (index_of(s, t), 1.0) } else { (index_of(t, s), -1.0) };
            for (e, &slot) in slots.iter().enumerate() {
                let a = frame.get(pi, e);
                let b = frame.get(qi, slot) * sign;
                assert!((a - b).norm() <= 1e-9 * vmax, "q{quarter} pattern {pi} electrode {e}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn frames_converge_under_refinement() {
    let layout = build_probe_layout(&GeometryConfig::default()).unwrap();
    let cfg = ForwardConfig::default();
    let s = Complex64::new(126.0, 12.76);
    let coarse_mesh = build_mesh(&layout, 0.3).unwrap();
    let fine_mesh = build_mesh(&layout, 0.15).unwrap();
    let coarse = simulate_field(&uniform(&coarse_mesh, s), &coarse_mesh, &layout, &cfg, "c").unwrap();
    let fine = simulate_field(&uniform(&fine_mesh, s), &fine_mesh, &layout, &cfg, "f").unwrap();
    let mut worst = 0.0f64;
    for p in 0..28 {
        let row_max = fine.row(p).iter().map(|v| v.norm()).fold(0.0, f64::max);
        for e in 0..25 {
            let (a, b) = (coarse.get(p, e), fine.get(p, e));
            // Cells on a pattern's nodal line carry no signal; compare against the row scale there.
            let scale = b.norm().max(0.05 * row_max);
            worst = worst.max((a - b).norm() / scale);
        }
    }
    eprintln!("worst refinement change: {worst:.4}");
    assert!(worst < 0.05, "worst element-wise change {worst}");
}

#[test]
fn conductive_inclusion_is_localized() {
    let (layout, mesh) = geometry(0.3);
    let model = TissueModel::prostate();
    let cfg = ForwardConfig::default();
    let base = uniform(&mesh, model.sigma_background);
    let center = layout.inner(13);
    let inc = Inclusion { center, diameter: 2.0 };
    let with = place_inclusion(&base, &mesh, &inc, model.sigma_background * 4.0);
    let a = simulate_field(&base, &mesh, &layout, &cfg, "a").unwrap();
    let b = simulate_field(&with, &mesh, &layout, &cfg, "b").unwrap();
    let (mut best, mut at) = (0.0, 0);
    for (k, (x, y)) in a.voltages.iter().zip(&b.voltages).enumerate() {
        if (x - y).norm() > best {
            best = (x - y).norm();
            at = k % 25;
        }
    }
    let pos: Point2 = layout.inner_electrodes[at];
    assert!(pos.dist(center) <= 1.5, "max change at electrode {} ({pos:?})", at + 1);
}

#[test]
fn phantom_frame_shape_and_empty_inclusion() {
    let (layout, mesh) = geometry(0.5);
    let model = TissueModel::prostate();
    let cfg = ForwardConfig::default();
    let phantom = Phantom {
        index: 3,
        element_sigma: uniform(&mesh, model.sigma_background),
        inclusion: Inclusion { center: Point2::new(0.5, 0.5), diameter: 0.0 },
        label: Label::Negative,
        seed: 0,
    };
    let frame: Frame = simulate_frame(&phantom, &mesh, &layout, &cfg).unwrap();
    assert_eq!(frame.voltages.len(), 28 * 25);
    assert_eq!(frame.pattern_order.len(), 28);
    assert_eq!(frame.phantom_id, "phantom-00003");
    let homogeneous = simulate_field(&uniform(&mesh, model.sigma_background), &mesh, &layout, &cfg, "h").unwrap();
    assert_eq!(frame.voltages, homogeneous.voltages);

    let mut bad = phantom.clone();
    bad.element_sigma.pop();
    let err = simulate_frame(&bad, &mesh, &layout, &cfg).unwrap_err();
    assert!(err.to_string().contains("phantom-00003"));
}

#[test]
#[ignore]
fn print_magnitudes() {
    let (layout, mesh) = geometry(0.3);
    eprintln!("vertices {} triangles {}", mesh.n_vertices(), mesh.n_triangles());
    let cfg = ForwardConfig::default();
    let t = std::time::Instant::now();
    let r = reference_frame(&mesh, &layout, Complex64::new(200.0, 0.0), &cfg, None).unwrap();
    eprintln!("frame time {:?}", t.elapsed());
    let m = TissueModel::prostate();
    let p = simulate_field(&uniform(&mesh, m.sigma_background), &mesh, &layout, &cfg, "p").unwrap();
    for pi in [0usize, 3, 10] {
        let a: Vec<String> = r.row(pi).iter().map(|v| format!("{:.1}", v.norm())).collect();
        let b: Vec<String> = p.row(pi).iter().map(|v| format!("{:.1}", v.norm())).collect();
        eprintln!("ref {pi}: {}", a.join(" "));
        eprintln!("pro {pi}: {}", b.join(" "));
    }
}
