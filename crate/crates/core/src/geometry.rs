//! Probe electrode layout, current-pattern enumeration and the triangulated
//! probe-face domain.
//!
//! Electrode numbering is 1-based: inner voltage electrodes are 1..=25 laid out
//! row-major on a 5×5 grid (electrode 1 top-left, electrode 13 at the origin),
//! outer current electrodes are 26..=33 counter-clockwise from the +x axis.
//!
//! The mesh is built from concentric vertex rings whose point counts are
//! multiples of eight, so it is invariant under quarter-turn rotations and one
//! ring sits exactly on the outer electrode radius. Outer electrode contacts are
//! chains of mesh edges along that ring; inner electrodes are point probes
//! inserted as mesh vertices.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INNER_COUNT: usize = 25;
pub const OUTER_COUNT: usize = 8;
/// 1-based index of the first outer electrode.
pub const FIRST_OUTER: usize = INNER_COUNT + 1;
const GRID_SIDE: usize = 5;

/// Phasor amplitude of a 1 mA peak-to-peak drive.
pub const DEFAULT_PATTERN_AMPLITUDE_MA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Outer current electrode: an arc on the electrode ring. Angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArcElectrode {
    pub start_angle: f64,
    pub end_angle: f64,
    pub radius: f64,
}

impl ArcElectrode {
    pub fn center_angle(&self) -> f64 {
        0.5 * (self.start_angle + self.end_angle)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.end_angle - self.start_angle)
    }

    pub fn length(&self) -> f64 {
        (self.end_angle - self.start_angle) * self.radius
    }
}

/// Geometry parameters, all lengths in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub domain_radius: f64,
    pub ring_radius: f64,
    pub grid_pitch: f64,
    pub sensing_radius: f64,
    /// Angular width of each outer electrode, degrees.
    pub outer_arc_deg: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            domain_radius: 6.0,
            ring_radius: 5.0,
            grid_pitch: 1.5,
            sensing_radius: 3.75,
            outer_arc_deg: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLayout {
    pub inner_electrodes: Vec<Point2>,
    pub outer_electrodes: Vec<ArcElectrode>,
    pub sensing_radius: f64,
    pub domain_radius: f64,
}

pub fn build_probe_layout(config: &GeometryConfig) -> Result<ProbeLayout> {
    let GeometryConfig {
        domain_radius,
        ring_radius,
        grid_pitch,
        sensing_radius,
        outer_arc_deg,
    } = *config;
    for (name, v) in [
        ("domain_radius", domain_radius),
        ("ring_radius", ring_radius),
        ("grid_pitch", grid_pitch),
        ("sensing_radius", sensing_radius),
        ("outer_arc_deg", outer_arc_deg),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Geometry(format!("{name} must be positive, got {v}")));
        }
    }
    let half = (GRID_SIDE / 2) as f64;
    let corner = half * grid_pitch * std::f64::consts::SQRT_2;
    if corner >= ring_radius {
        return Err(Error::Geometry(format!(
            "5x5 grid with pitch {grid_pitch} reaches radius {corner:.3}, past the outer ring at {ring_radius}"
        )));
    }

    let inner_electrodes = (0..INNER_COUNT)
        .map(|k| {
            let (row, col) = (k / GRID_SIDE, k % GRID_SIDE);
            Point2::new(
                (col as f64 - half) * grid_pitch,
                (half - row as f64) * grid_pitch,
            )
        })
        .collect();
    let width = outer_arc_deg.to_radians();
    let outer_electrodes = (0..OUTER_COUNT)
        .map(|l| {
            let c = 2.0 * PI * l as f64 / OUTER_COUNT as f64;
            ArcElectrode {
                start_angle: c - 0.5 * width,
                end_angle: c + 0.5 * width,
                radius: ring_radius,
            }
        })
        .collect();
    let layout = ProbeLayout {
        inner_electrodes,
        outer_electrodes,
        sensing_radius,
        domain_radius,
    };
    layout.validate()?;
    Ok(layout)
}

impl ProbeLayout {
    pub fn validate(&self) -> Result<()> {
        if self.inner_electrodes.len() != INNER_COUNT || self.outer_electrodes.len() != OUTER_COUNT
        {
            return Err(Error::Geometry(format!(
                "need {INNER_COUNT} inner and {OUTER_COUNT} outer electrodes, got {} and {}",
                self.inner_electrodes.len(),
                self.outer_electrodes.len()
            )));
        }
        if !(self.sensing_radius > 0.0 && self.sensing_radius <= self.domain_radius) {
            return Err(Error::Geometry(format!(
                "sensing_radius {} must lie in (0, domain_radius {}]",
                self.sensing_radius, self.domain_radius
            )));
        }
        let ring = self.ring_radius();
        for arc in &self.outer_electrodes {
            if !(arc.end_angle > arc.start_angle) || (arc.radius - ring).abs() > 1e-12 {
                return Err(Error::Geometry(
                    "outer electrodes must be proper arcs on one ring".into(),
                ));
            }
            if ring >= self.domain_radius {
                return Err(Error::Geometry(format!(
                    "electrode ring {ring} must lie inside the domain radius {}",
                    self.domain_radius
                )));
            }
        }
        for (k, p) in self.inner_electrodes.iter().enumerate() {
            if p.norm() >= ring {
                return Err(Error::Geometry(format!(
                    "inner electrode {} at radius {:.3} is not inside the outer ring",
                    k + 1,
                    p.norm()
                )));
            }
            for (j, q) in self.inner_electrodes.iter().enumerate().skip(k + 1) {
                if p.dist(*q) <= 1e-9 {
                    return Err(Error::Geometry(format!(
                        "inner electrodes {} and {} coincide",
                        k + 1,
                        j + 1
                    )));
                }
            }
        }
        // Arcs are sorted by angle; consecutive ones (cyclically) must not overlap.
        for l in 0..OUTER_COUNT {
            let a = &self.outer_electrodes[l];
            let b = &self.outer_electrodes[(l + 1) % OUTER_COUNT];
            let mut gap = b.start_angle - a.end_angle;
            if l + 1 == OUTER_COUNT {
                gap += 2.0 * PI;
            }
            if gap <= 0.0 {
                return Err(Error::Geometry(format!(
                    "outer electrodes {} and {} overlap",
                    FIRST_OUTER + l,
                    FIRST_OUTER + (l + 1) % OUTER_COUNT
                )));
            }
        }
        Ok(())
    }

    pub fn ring_radius(&self) -> f64 {
        self.outer_electrodes.first().map_or(0.0, |a| a.radius)
    }

    pub fn sensing_area(&self) -> f64 {
        PI * self.sensing_radius * self.sensing_radius
    }

    /// Position of a (1-based) inner electrode.
    pub fn inner(&self, index: usize) -> Point2 {
        self.inner_electrodes[index - 1]
    }
}

/// One source/sink pair of outer electrodes (1-based indices, 26..=33).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentPattern {
    pub source: usize,
    pub sink: usize,
    /// Phasor amplitude, mA.
    pub amplitude: f64,
}

impl CurrentPattern {
    pub fn new(source: usize, sink: usize, amplitude: f64) -> Result<Self> {
        let range = FIRST_OUTER..FIRST_OUTER + OUTER_COUNT;
        if source == sink || !range.contains(&source) || !range.contains(&sink) {
            return Err(Error::invalid(format!(
                "current pattern ({source}, {sink}) must use two distinct outer electrodes"
            )));
        }
        if !(amplitude > 0.0 && amplitude.is_finite()) {
            return Err(Error::invalid(format!("pattern amplitude {amplitude} must be > 0")));
        }
        Ok(Self {
            source,
            sink,
            amplitude,
        })
    }

    /// 0-based slots of the source and sink on the outer ring.
    pub fn slots(&self) -> (usize, usize) {
        (self.source - FIRST_OUTER, self.sink - FIRST_OUTER)
    }
}

/// All source<sink pairs of an `n_outer`-electrode ring in lexicographic order.
pub fn enumerate_pairs(n_outer: usize, first_index: usize) -> Vec<(usize, usize)> {
    (0..n_outer)
        .flat_map(|a| (a + 1..n_outer).map(move |b| (first_index + a, first_index + b)))
        .collect()
}

pub fn enumerate_current_patterns(layout: &ProbeLayout) -> Vec<CurrentPattern> {
    enumerate_pairs(layout.outer_electrodes.len(), FIRST_OUTER)
        .into_iter()
        .map(|(source, sink)| CurrentPattern {
            source,
            sink,
            amplitude: DEFAULT_PATTERN_AMPLITUDE_MA,
        })
        .collect()
}

/// Region tag of a triangle, by centroid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    /// Inside the electrode ring.
    Probe,
    /// Annulus between the electrode ring and the domain edge.
    Skirt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point2>,
    pub triangles: Vec<[usize; 3]>,
    pub element_region: Vec<Region>,
    /// Contact edges of each outer electrode (slot 0..8).
    pub outer_contacts: Vec<Vec<[usize; 2]>>,
    /// Vertex read by each inner electrode (slot 0..25).
    pub inner_probes: Vec<usize>,
}

impl Mesh {
    /// Builds a mesh from raw parts and checks every mesh invariant.
    pub fn from_parts(
        vertices: Vec<Point2>,
        triangles: Vec<[usize; 3]>,
        element_region: Vec<Region>,
        outer_contacts: Vec<Vec<[usize; 2]>>,
        inner_probes: Vec<usize>,
    ) -> Result<Self> {
        let mesh = Self {
            vertices,
            triangles,
            element_region,
            outer_contacts,
            inner_probes,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
    }

    pub fn centroid(&self, t: usize) -> Point2 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        Point2::new((a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0)
    }

    pub fn centroids(&self) -> Vec<Point2> {
        (0..self.n_triangles()).map(|t| self.centroid(t)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        if self.element_region.len() != self.triangles.len() {
            return Err(Error::Mesh("region tag count differs from triangle count".into()));
        }
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= nv) {
                return Err(Error::Mesh(format!("triangle {t} references a missing vertex")));
            }
            let area = self.signed_area(t);
            if !(area > 0.0) {
                return Err(Error::Mesh(format!("triangle {t} has non-positive area {area:e}")));
            }
            for k in 0..3 {
                let e = (tri[k], tri[(k + 1) % 3]);
                if directed.insert(e, t).is_some() {
                    return Err(Error::Mesh(format!(
                        "edge ({}, {}) is used twice with the same orientation",
                        e.0, e.1
                    )));
                }
            }
        }
        let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
        for (slot, edges) in self.outer_contacts.iter().enumerate() {
            for &[a, b] in edges {
                if !directed.contains_key(&(a, b)) && !directed.contains_key(&(b, a)) {
                    return Err(Error::Mesh(format!(
                        "contact edge ({a}, {b}) of electrode {} is not a mesh edge",
                        FIRST_OUTER + slot
                    )));
                }
                if let Some(prev) = owner.insert((a.min(b), a.max(b)), slot) {
                    return Err(Error::Mesh(format!(
                        "electrodes {} and {} share contact edge ({a}, {b})",
                        FIRST_OUTER + prev,
                        FIRST_OUTER + slot
                    )));
                }
            }
        }
        if let Some(&v) = self.inner_probes.iter().find(|&&v| v >= nv) {
            return Err(Error::Mesh(format!("inner probe vertex {v} out of range")));
        }
        Ok(())
    }

    /// Stable 64-bit fingerprint of the mesh geometry (FNV-1a over the bit patterns).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.vertices {
            eat(p.x.to_bits());
            eat(p.y.to_bits());
        }
        for t in &self.triangles {
            t.iter().for_each(|&i| eat(i as u64));
        }
        for edges in &self.outer_contacts {
            eat(edges.len() as u64);
            edges.iter().flatten().for_each(|&i| eat(i as u64));
        }
        self.inner_probes.iter().for_each(|&i| eat(i as u64));
        h
    }
}

fn ring_counts(radii: &[f64], h: f64) -> Vec<usize> {
    radii
        .iter()
        .map(|&r| 8 * ((2.0 * PI * r / (8.0 * h)).round() as usize).max(1))
        .collect()
}

pub fn build_mesh(layout: &ProbeLayout, target_edge_length: f64) -> Result<Mesh> {
    layout.validate()?;
    let h = target_edge_length;
    let min_extent = layout
        .outer_electrodes
        .iter()
        .map(ArcElectrode::length)
        .fold(f64::INFINITY, f64::min);
    if !(h > 0.0 && h < min_extent) {
        return Err(Error::Geometry(format!(
            "target edge length {h} must be in (0, {min_extent:.4}) (smallest electrode arc)"
        )));
    }
    let ring = layout.ring_radius();
    let outer = layout.domain_radius;

    let k_in = ((ring / h).ceil() as usize).max(2);
    let k_out = (((outer - ring) / h).ceil() as usize).max(1);
    let mut radii: Vec<f64> = (1..=k_in).map(|k| ring * k as f64 / k_in as f64).collect();
    let electrode_ring = radii.len() - 1;
    radii.extend((1..=k_out).map(|k| ring + (outer - ring) * k as f64 / k_out as f64));
    let mut counts = ring_counts(&radii, h);

    // At least three vertex spacings across the narrowest arc, so every
    // contact is resolved by two or more edges.
    let narrowest = layout
        .outer_electrodes
        .iter()
        .map(|a| a.end_angle - a.start_angle)
        .fold(f64::INFINITY, f64::min);
    let needed = 8 * ((3.0 * 2.0 * PI / narrowest / 8.0).ceil() as usize);
    if counts[electrode_ring] < needed {
        counts[electrode_ring] = needed;
    }
    // Keep ring sizes non-decreasing outward.
    for k in 1..counts.len() {
        counts[k] = counts[k].max(counts[k - 1]);
    }

    let mut vertices = vec![Point2::new(0.0, 0.0)];
    let mut starts = Vec::with_capacity(radii.len());
    for (&r, &n) in radii.iter().zip(&counts) {
        starts.push(vertices.len());
        vertices.extend((0..n).map(|m| {
            let phi = 2.0 * PI * m as f64 / n as f64;
            Point2::new(r * phi.cos(), r * phi.sin())
        }));
    }

    let mut triangles = Vec::new();
    // Central fan.
    for m in 0..counts[0] {
        let next = (m + 1) % counts[0];
        triangles.push([0, starts[0] + m, starts[0] + next]);
    }
    for k in 0..radii.len() - 1 {
        let (na, nb) = (counts[k], counts[k + 1]);
        let (sa, sb) = (starts[k], starts[k + 1]);
        let (mut i, mut j) = (0usize, 0usize);
        while i < na || j < nb {
            // Compare the angular positions (i+1)/na and (j+1)/nb exactly.
            let advance_inner = i < na && (j == nb || (i + 1) * nb <= (j + 1) * na);
            if advance_inner {
                triangles.push([sa + i % na, sb + j % nb, sa + (i + 1) % na]);
                i += 1;
            } else {
                triangles.push([sa + i % na, sb + j % nb, sb + (j + 1) % nb]);
                j += 1;
            }
        }
    }

    // Inner electrodes become exact vertices. Edges on the electrode ring stay fixed.
    let on_ring = |v: Point2| (v.norm() - ring).abs() <= 1e-9 * ring;
    let mut inserter = Inserter::new(vertices, triangles, h);
    let inner_probes: Vec<usize> = layout
        .inner_electrodes
        .iter()
        .map(|&p| inserter.insert(p, &|a, b| on_ring(a) && on_ring(b)))
        .collect::<Result<_>>()?;
    let Inserter { vertices, triangles, .. } = inserter;

    let element_region = triangles
        .iter()
        .map(|t| {
            let c = t.iter().fold(Point2::new(0.0, 0.0), |acc, &i| {
                Point2::new(acc.x + vertices[i].x / 3.0, acc.y + vertices[i].y / 3.0)
            });
            if c.norm() < ring {
                Region::Probe
            } else {
                Region::Skirt
            }
        })
        .collect();

    let n_ring = counts[electrode_ring];
    let s_ring = starts[electrode_ring];
    let tol = 1e-9;
    let outer_contacts: Vec<Vec<[usize; 2]>> = layout
        .outer_electrodes
        .iter()
        .map(|arc| {
            let c = arc.center_angle();
            let hw = arc.half_width() + tol;
            let inside = |m: usize| {
                let phi = 2.0 * PI * m as f64 / n_ring as f64;
                let mut d = (phi - c).rem_euclid(2.0 * PI);
                if d > PI {
                    d -= 2.0 * PI;
                }
                d.abs() <= hw
            };
            let edges: Vec<[usize; 2]> = (0..n_ring)
                .filter(|&m| inside(m) && inside((m + 1) % n_ring))
                .map(|m| [s_ring + m, s_ring + (m + 1) % n_ring])
                .collect();
            edges
        })
        .collect();
    if let Some(slot) = outer_contacts.iter().position(|e| e.len() < 2) {
        return Err(Error::Mesh(format!(
            "electrode {} is resolved by fewer than 2 edges",
            FIRST_OUTER + slot
        )));
    }

    Mesh::from_parts(vertices, triangles, element_region, outer_contacts, inner_probes)
}

fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Positive when `d` lies strictly inside the circumcircle of counter-clockwise `a b c`.
fn incircle(a: Point2, b: Point2, c: Point2, d: Point2) -> f64 {
    let (ax, ay) = (a.x - d.x, a.y - d.y);
    let (bx, by) = (b.x - d.x, b.y - d.y);
    let (cx, cy) = (c.x - d.x, c.y - d.y);
    (ax * ax + ay * ay) * (bx * cy - cx * by) - (bx * bx + by * by) * (ax * cy - cx * ay)
        + (cx * cx + cy * cy) * (ax * by - bx * ay)
}

/// Point insertion into a conforming triangulation followed by Lawson flips.
struct Inserter {
    vertices: Vec<Point2>,
    triangles: Vec<[usize; 3]>,
    /// Directed edge to the triangle that owns it.
    owner: HashMap<(usize, usize), usize>,
    h: f64,
}

impl Inserter {
    fn new(vertices: Vec<Point2>, triangles: Vec<[usize; 3]>, h: f64) -> Self {
        let mut owner = HashMap::with_capacity(3 * triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            for k in 0..3 {
                owner.insert((tri[k], tri[(k + 1) % 3]), t);
            }
        }
        Self { vertices, triangles, owner, h }
    }

    fn set(&mut self, t: usize, tri: [usize; 3]) {
        if t < self.triangles.len() {
            let old = self.triangles[t];
            for k in 0..3 {
                self.owner.remove(&(old[k], old[(k + 1) % 3]));
            }
            self.triangles[t] = tri;
        } else {
            self.triangles.push(tri);
        }
        for k in 0..3 {
            self.owner.insert((tri[k], tri[(k + 1) % 3]), t);
        }
    }

    /// `tri` rotated so that vertex `v` comes first.
    fn rotated(tri: [usize; 3], v: usize) -> [usize; 3] {
        let k = tri.iter().position(|&x| x == v).expect("vertex in triangle");
        [tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]]
    }

    fn insert(&mut self, p: Point2, fixed: &dyn Fn(Point2, Point2) -> bool) -> Result<usize> {
        let tol = 1e-9 * self.h;
        let located = self.triangles.iter().enumerate().find_map(|(t, tri)| {
            let [a, b, c] = tri.map(|i| self.vertices[i]);
            let area = orient(a, b, c);
            let l = [orient(p, b, c) / area, orient(a, p, c) / area, orient(a, b, p) / area];
            l.iter().all(|&x| x >= -1e-12).then_some((t, *tri, l))
        });
        let Some((t, tri, l)) = located else {
            return Err(Error::Mesh(format!("point ({}, {}) lies outside the mesh", p.x, p.y)));
        };
        if let Some(&v) = tri.iter().find(|&&v| self.vertices[v].dist(p) <= tol) {
            return Ok(v);
        }
        let new = self.vertices.len();
        self.vertices.push(p);
        let mut stack = Vec::new();
        let edge_hit = (0..3).find(|&k| l[k] * 2.0 * self.h < tol.max(1e-12));
        if let Some(k) = edge_hit {
            let (w, u, v) = (tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]);
            let neighbor = self.owner.get(&(v, u)).copied();
            self.set(t, [w, u, new]);
            stack.push(t);
            stack.push(self.triangles.len());
            self.set(self.triangles.len(), [w, new, v]);
            if let Some(n) = neighbor {
                let [_, _, x] = Self::rotated(self.triangles[n], v);
                self.set(n, [x, v, new]);
                stack.push(n);
                stack.push(self.triangles.len());
                self.set(self.triangles.len(), [x, new, u]);
            }
        } else {
            let [a, b, c] = tri;
            self.set(t, [a, b, new]);
            stack.push(t);
            for tri in [[b, c, new], [c, a, new]] {
                stack.push(self.triangles.len());
                self.set(self.triangles.len(), tri);
            }
        }
        let eps = 1e-9 * self.h.powi(4);
        while let Some(t) = stack.pop() {
            let [_, a, b] = Self::rotated(self.triangles[t], new);
            let Some(&n) = self.owner.get(&(b, a)) else { continue };
            if fixed(self.vertices[a], self.vertices[b]) {
                continue;
            }
            let [_, _, x] = Self::rotated(self.triangles[n], b);
            let pts = |i: usize| self.vertices[i];
            if incircle(pts(new), pts(a), pts(b), pts(x)) > eps {
                self.set(t, [new, a, x]);
                self.set(n, [new, x, b]);
                stack.push(t);
                stack.push(n);
            }
        }
        Ok(new)
    }
}

/// Layout plus mesh, the unit persisted in geometry files.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub layout: ProbeLayout,
    pub mesh: Mesh,
}

impl Geometry {
    pub fn build(config: &GeometryConfig, target_edge_length: f64) -> Result<Self> {
        let layout = build_probe_layout(config)?;
        let mesh = build_mesh(&layout, target_edge_length)?;
        Ok(Self { layout, mesh })
    }

    /// Plain-text geometry format, version 1:
    ///
    /// ```text
    /// bioz-geometry 1
    /// domain_radius <mm>
    /// sensing_radius <mm>
    /// inner 25            followed by 25 lines "x y"
    /// outer 8             followed by 8 lines "start_rad end_rad radius"
    /// vertices <N>        followed by N lines "x y"
    /// triangles <M>       followed by M lines "a b c region" (region: probe|skirt)
    /// probes 25           followed by one line of 25 vertex indices
    /// contacts 8          followed by 8 lines "n a0 b0 a1 b1 ..."
    /// ```
    ///
    /// Floats are written in shortest round-trip form, so reloading is exact.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let l = &self.layout;
        let m = &self.mesh;
        let _ = writeln!(s, "bioz-geometry 1");
        let _ = writeln!(s, "domain_radius {}", l.domain_radius);
        let _ = writeln!(s, "sensing_radius {}", l.sensing_radius);
        let _ = writeln!(s, "inner {}", l.inner_electrodes.len());
        for p in &l.inner_electrodes {
            let _ = writeln!(s, "{} {}", p.x, p.y);
        }
        let _ = writeln!(s, "outer {}", l.outer_electrodes.len());
        for a in &l.outer_electrodes {
            let _ = writeln!(s, "{} {} {}", a.start_angle, a.end_angle, a.radius);
        }
        let _ = writeln!(s, "vertices {}", m.vertices.len());
        for p in &m.vertices {
            let _ = writeln!(s, "{} {}", p.x, p.y);
        }
        let _ = writeln!(s, "triangles {}", m.triangles.len());
        for (t, r) in m.triangles.iter().zip(&m.element_region) {
            let tag = match r {
                Region::Probe => "probe",
                Region::Skirt => "skirt",
            };
            let _ = writeln!(s, "{} {} {} {tag}", t[0], t[1], t[2]);
        }
        let _ = writeln!(s, "probes {}", m.inner_probes.len());
        let probes: Vec<String> = m.inner_probes.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", probes.join(" "));
        let _ = writeln!(s, "contacts {}", m.outer_contacts.len());
        for edges in &m.outer_contacts {
            let _ = write!(s, "{}", edges.len());
            for [a, b] in edges {
                let _ = write!(s, " {a} {b}");
            }
            let _ = writeln!(s);
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let bad = |why: String| Error::format(origin, why);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let mut next = |what: &str| {
            lines
                .next()
                .map(str::trim)
                .ok_or_else(|| bad(format!("unexpected end of file while reading {what}")))
        };
        fn nums<T: std::str::FromStr>(line: &str) -> Option<Vec<T>> {
            line.split_whitespace().map(|t| t.parse().ok()).collect()
        }
        let keyed = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .map(|r| r.trim().to_string())
                .ok_or_else(|| bad(format!("expected '{key}', found '{line}'")))
        };

        let header = next("header")?;
        if header != "bioz-geometry 1" {
            return Err(bad(format!("unsupported header '{header}'")));
        }
        let parse_f = |s: String, what: &str| -> Result<f64> {
            s.parse().map_err(|_| bad(format!("bad {what} '{s}'")))
        };
        let parse_n = |s: String, what: &str| -> Result<usize> {
            s.parse().map_err(|_| bad(format!("bad {what} count '{s}'")))
        };
        let domain_radius = parse_f(keyed(next("domain_radius")?, "domain_radius")?, "domain_radius")?;
        let sensing_radius =
            parse_f(keyed(next("sensing_radius")?, "sensing_radius")?, "sensing_radius")?;

        let n_inner = parse_n(keyed(next("inner")?, "inner")?, "inner")?;
        let mut inner_electrodes = Vec::with_capacity(n_inner);
        for _ in 0..n_inner {
            let v: Vec<f64> = nums(next("inner electrode")?)
                .filter(|v: &Vec<f64>| v.len() == 2)
                .ok_or_else(|| bad("inner electrode needs 'x y'".into()))?;
            inner_electrodes.push(Point2::new(v[0], v[1]));
        }
        let n_outer = parse_n(keyed(next("outer")?, "outer")?, "outer")?;
        let mut outer_electrodes = Vec::with_capacity(n_outer);
        for _ in 0..n_outer {
            let v: Vec<f64> = nums(next("outer electrode")?)
                .filter(|v: &Vec<f64>| v.len() == 3)
                .ok_or_else(|| bad("outer electrode needs 'start end radius'".into()))?;
            outer_electrodes.push(ArcElectrode {
                start_angle: v[0],
                end_angle: v[1],
                radius: v[2],
            });
        }
        let nv = parse_n(keyed(next("vertices")?, "vertices")?, "vertex")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let v: Vec<f64> = nums(next("vertex")?)
                .filter(|v: &Vec<f64>| v.len() == 2)
                .ok_or_else(|| bad("vertex needs 'x y'".into()))?;
            vertices.push(Point2::new(v[0], v[1]));
        }
        let nt = parse_n(keyed(next("triangles")?, "triangles")?, "triangle")?;
        let mut triangles = Vec::with_capacity(nt);
        let mut element_region = Vec::with_capacity(nt);
        for _ in 0..nt {
            let line = next("triangle")?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(bad(format!("triangle line '{line}' needs 4 fields")));
            }
            let idx: Vec<usize> = nums(&parts[..3].join(" "))
                .ok_or_else(|| bad(format!("bad triangle indices '{line}'")))?;
            triangles.push([idx[0], idx[1], idx[2]]);
            element_region.push(match parts[3] {
                "probe" => Region::Probe,
                "skirt" => Region::Skirt,
                other => return Err(bad(format!("unknown region '{other}'"))),
            });
        }
        let np = parse_n(keyed(next("probes")?, "probes")?, "probe")?;
        let inner_probes: Vec<usize> = nums(next("probe list")?)
            .filter(|v: &Vec<usize>| v.len() == np)
            .ok_or_else(|| bad("probe list length mismatch".into()))?;
        let nc = parse_n(keyed(next("contacts")?, "contacts")?, "contact")?;
        let mut outer_contacts = Vec::with_capacity(nc);
        for _ in 0..nc {
            let v: Vec<usize> = nums(next("contact")?)
                .ok_or_else(|| bad("bad contact line".into()))?;
            let n = *v.first().ok_or_else(|| bad("empty contact line".into()))?;
            if v.len() != 1 + 2 * n {
                return Err(bad("contact edge count mismatch".into()));
            }
            outer_contacts.push(v[1..].chunks(2).map(|c| [c[0], c[1]]).collect());
        }

        let layout = ProbeLayout {
            inner_electrodes,
            outer_electrodes,
            sensing_radius,
            domain_radius,
        };
        layout.validate()?;
        let mesh = Mesh::from_parts(vertices, triangles, element_region, outer_contacts, inner_probes)?;
        if mesh.inner_probes.len() != INNER_COUNT || mesh.outer_contacts.len() != OUTER_COUNT {
            return Err(bad("mesh electrode maps do not match the layout".into()));
        }
        Ok(Self { layout, mesh })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}
