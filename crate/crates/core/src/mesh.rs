//! Triangulated unit-disk meshes with boundary electrodes.
//!
//! Meshes are built ring by ring. Every ring holds a multiple of `2L` nodes
//! and the triangulation pattern between rings repeats every `2π/L` and is
//! mirror-symmetric about every electrode axis, so the mesh carries the full
//! dihedral symmetry of the electrode layout. Homogeneous forward data is
//! therefore identical across drives up to round-off.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{EitError, Result};

pub type Point = [f64; 2];

pub const DEFAULT_REFINEMENT: usize = 12;
pub const DEFAULT_COVERAGE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    nodes: Vec<Point>,
    elements: Vec<[usize; 3]>,
    boundary_edges: Vec<[usize; 2]>,
    electrode_arcs: Vec<Vec<usize>>,
    radius: f64,
}

fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

impl Mesh {
    /// Assemble a mesh from raw parts, checking orientation and electrode
    /// disjointness. Electrode arcs index into `boundary_edges`.
    pub fn from_parts(
        nodes: Vec<Point>,
        elements: Vec<[usize; 3]>,
        boundary_edges: Vec<[usize; 2]>,
        electrode_arcs: Vec<Vec<usize>>,
        radius: f64,
    ) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(EitError::invalid("mesh radius must be positive"));
        }
        let n = nodes.len();
        for (e, tri) in elements.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(EitError::invalid(format!("element {e} references a missing node")));
            }
            if signed_area(nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]) <= 0.0 {
                return Err(EitError::invalid(format!("element {e} is not counter-clockwise")));
            }
        }
        for edge in &boundary_edges {
            if edge.iter().any(|&i| i >= n) {
                return Err(EitError::invalid("boundary edge references a missing node"));
            }
        }
        let mut owner: HashMap<usize, usize> = HashMap::new();
        for (l, arc) in electrode_arcs.iter().enumerate() {
            if arc.is_empty() {
                return Err(EitError::invalid(format!("electrode {l} has no edges")));
            }
            for &edge in arc {
                let Some(&[a, b]) = boundary_edges.get(edge) else {
                    return Err(EitError::invalid(format!("electrode {l} references a missing edge")));
                };
                for node in [a, b] {
                    if let Some(&other) = owner.get(&node) {
                        if other != l {
                            return Err(EitError::invalid(format!(
                                "electrodes {other} and {l} touch at node {node}"
                            )));
                        }
                    }
                    owner.insert(node, l);
                }
            }
        }
        Ok(Mesh {
            nodes,
            elements,
            boundary_edges,
            electrode_arcs,
            radius,
        })
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn boundary_edges(&self) -> &[[usize; 2]] {
        &self.boundary_edges
    }

    pub fn electrode_arcs(&self) -> &[Vec<usize>] {
        &self.electrode_arcs
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_electrodes(&self) -> usize {
        self.electrode_arcs.len()
    }

    pub fn element_vertices(&self, e: usize) -> [Point; 3] {
        let [a, b, c] = self.elements[e];
        [self.nodes[a], self.nodes[b], self.nodes[c]]
    }

    pub fn element_area(&self, e: usize) -> f64 {
        let [a, b, c] = self.element_vertices(e);
        signed_area(a, b, c)
    }

    pub fn element_areas(&self) -> Vec<f64> {
        (0..self.n_elements()).map(|e| self.element_area(e)).collect()
    }

    /// Vertex average of each element.
    pub fn element_centroids(&self) -> Vec<Point> {
        (0..self.n_elements())
            .map(|e| {
                let [a, b, c] = self.element_vertices(e);
                [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
            })
            .collect()
    }

    /// Total length of each electrode arc.
    pub fn electrode_lengths(&self) -> Vec<f64> {
        self.electrode_arcs
            .iter()
            .map(|arc| arc.iter().map(|&e| self.edge_length(e)).sum())
            .collect()
    }

    pub fn edge_length(&self, edge: usize) -> f64 {
        let [a, b] = self.boundary_edges[edge];
        let (p, q) = (self.nodes[a], self.nodes[b]);
        (q[0] - p[0]).hypot(q[1] - p[1])
    }

    /// Angle of the midpoint between the two extreme nodes of an arc.
    ///
    /// Arcs are contiguous runs of boundary edges; the result lies in (-π, π].
    pub fn electrode_center_angle(&self, electrode: usize) -> f64 {
        let arc = &self.electrode_arcs[electrode];
        let first = self.nodes[self.boundary_edges[arc[0]][0]];
        let last = self.nodes[self.boundary_edges[*arc.last().unwrap()][1]];
        let a0 = first[1].atan2(first[0]);
        let mut a1 = last[1].atan2(last[0]);
        if a1 < a0 {
            a1 += 2.0 * PI;
        }
        let mid = 0.5 * (a0 + a1);
        if mid > PI {
            mid - 2.0 * PI
        } else {
            mid
        }
    }

    /// Writes the mesh in the plain-text interchange format.
    ///
    /// Layout: a header `nodes N elements M electrodes L`, then one `x y`
    /// line per node, one `a b c` line per element and one line per electrode
    /// listing its edges as consecutive node pairs.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "nodes {} elements {} electrodes {}",
            self.n_nodes(),
            self.n_elements(),
            self.n_electrodes()
        )?;
        for p in &self.nodes {
            writeln!(out, "{} {}", p[0], p[1])?;
        }
        for t in &self.elements {
            writeln!(out, "{} {} {}", t[0], t[1], t[2])?;
        }
        for arc in &self.electrode_arcs {
            let line: Vec<String> = arc
                .iter()
                .flat_map(|&e| self.boundary_edges[e])
                .map(|n| n.to_string())
                .collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Mesh> {
        let mut lines = input.lines();
        let mut next_line = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| EitError::Format(format!("unexpected end of mesh file reading {what}")))?
                .map_err(EitError::from)
        };
        let header = next_line("header")?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (n_nodes, n_elems, n_elec) = match fields.as_slice() {
            ["nodes", n, "elements", m, "electrodes", l] => (parse(n)?, parse(m)?, parse(l)?),
            _ => return Err(EitError::Format(format!("bad mesh header `{header}`"))),
        };
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let vals = parse_all::<f64>(&next_line("node")?)?;
            let [x, y] = vals[..] else {
                return Err(EitError::Format("node line must hold two values".into()));
            };
            nodes.push([x, y]);
        }
        let mut elements = Vec::with_capacity(n_elems);
        for _ in 0..n_elems {
            let vals = parse_all::<usize>(&next_line("element")?)?;
            let [a, b, c] = vals[..] else {
                return Err(EitError::Format("element line must hold three indices".into()));
            };
            elements.push([a, b, c]);
        }
        let boundary_edges = boundary_edges_of(&nodes, &elements);
        let lookup: HashMap<[usize; 2], usize> = boundary_edges
            .iter()
            .enumerate()
            .map(|(i, &e)| (e, i))
            .collect();
        let mut electrode_arcs = Vec::with_capacity(n_elec);
        for _ in 0..n_elec {
            let vals = parse_all::<usize>(&next_line("electrode")?)?;
            if vals.len() % 2 != 0 || vals.is_empty() {
                return Err(EitError::Format("electrode line must hold node pairs".into()));
            }
            let arc = vals
                .chunks(2)
                .map(|p| {
                    lookup
                        .get(&[p[0], p[1]])
                        .copied()
                        .ok_or_else(|| EitError::Format(format!("edge {} {} is not on the boundary", p[0], p[1])))
                })
                .collect::<Result<Vec<_>>>()?;
            electrode_arcs.push(arc);
        }
        let radius = nodes.iter().map(|p| p[0].hypot(p[1])).fold(0.0, f64::max);
        Mesh::from_parts(nodes, elements, boundary_edges, electrode_arcs, radius)
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| EitError::Format(format!("cannot parse `{s}`")))
}

fn parse_all<T: std::str::FromStr>(line: &str) -> Result<Vec<T>> {
    line.split_whitespace().map(parse).collect()
}

/// Edges used by exactly one element, oriented as in that element and sorted
/// by the polar angle of their first node.
fn boundary_edges_of(nodes: &[Point], elements: &[[usize; 3]]) -> Vec<[usize; 2]> {
    let mut count: HashMap<[usize; 2], ([usize; 2], usize)> = HashMap::new();
    for t in elements {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            let key = [a.min(b), a.max(b)];
            count.entry(key).or_insert(([a, b], 0)).1 += 1;
        }
    }
    let mut edges: Vec<[usize; 2]> = count
        .into_values()
        .filter(|&(_, c)| c == 1)
        .map(|(e, _)| e)
        .collect();
    let angle = |n: usize| {
        let a = nodes[n][1].atan2(nodes[n][0]);
        if a < 0.0 {
            a + 2.0 * PI
        } else {
            a
        }
    };
    edges.sort_by(|a, b| angle(a[0]).total_cmp(&angle(b[0])).then(a.cmp(b)));
    edges
}

/// Intervals per half-sector (`π/L` of arc) for rings `1..=rings`.
fn ring_intervals(n_electrodes: usize, rings: usize) -> Vec<usize> {
    let outer = ((PI * rings as f64 / n_electrodes as f64).round() as usize).max(2);
    (1..=rings)
        .map(|k| ((outer * k) as f64 / rings as f64).round().max(1.0) as usize)
        .collect()
}

/// Triangulate the strip between two concentric arcs spanning one
/// half-sector by sweeping both node sequences in angle order. Angles are
/// given as fractions of the half-sector; the output uses local indices
/// `(ring, j)` with ring 0 inner and ring 1 outer.
fn sweep_strip(inner: &[f64], outer: &[f64]) -> Vec<[(u8, usize); 3]> {
    let (mut i, mut o) = (0, 0);
    let mut tris = Vec::with_capacity(inner.len() + outer.len());
    while i + 1 < inner.len() || o + 1 < outer.len() {
        let advance_inner = o + 1 == outer.len() || (i + 1 < inner.len() && inner[i + 1] < outer[o + 1]);
        if advance_inner {
            tris.push([(0, i), (1, o), (0, i + 1)]);
            i += 1;
        } else {
            tris.push([(0, i), (1, o), (1, o + 1)]);
            o += 1;
        }
    }
    tris
}

/// Build a structured triangulation of the unit disk with `n_electrodes`
/// electrodes centred at angles `2πℓ/L`.
///
/// `refinement` is the number of concentric node rings. Electrode ends are
/// mesh nodes, so each electrode spans exactly `electrode_coverage · 2π/L`
/// of boundary angle whatever the refinement.
pub fn build_disk_mesh(n_electrodes: usize, refinement: usize, electrode_coverage: f64) -> Result<Mesh> {
    if n_electrodes < 4 {
        return Err(EitError::invalid("at least 4 electrodes are required"));
    }
    if !(electrode_coverage > 0.0 && electrode_coverage < 1.0) {
        return Err(EitError::invalid("electrode coverage must lie in (0, 1)"));
    }
    if refinement == 0 {
        return Err(EitError::invalid("refinement must be positive"));
    }
    let radius = 1.0;
    let l = n_electrodes;
    let half = PI / l as f64;
    let intervals = ring_intervals(l, refinement);
    let outer = *intervals.last().unwrap();
    let on_electrode = ((outer as f64 * electrode_coverage).round() as usize).clamp(1, outer - 1);

    // Node angles within one half-sector, as fractions of it; the boundary
    // ring puts a node exactly at the electrode end.
    let fractions: Vec<Vec<f64>> = intervals
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            if k + 1 == intervals.len() {
                let gap = outer - on_electrode;
                (0..=on_electrode)
                    .map(|j| electrode_coverage * j as f64 / on_electrode as f64)
                    .chain((1..=gap).map(|j| electrode_coverage + (1.0 - electrode_coverage) * j as f64 / gap as f64))
                    .collect()
            } else {
                (0..=a).map(|j| j as f64 / a as f64).collect()
            }
        })
        .collect();

    // Global node `j` of a ring with `a` intervals per half-sector sits in
    // half-sector `j / a`; odd half-sectors are mirror images.
    let angle_of = |frac: &[f64], a: usize, j: usize| -> f64 {
        let h = j / a;
        let r = j % a;
        let local = if h % 2 == 0 { frac[r] } else { 1.0 - frac[a - r] };
        (h as f64 + local) * half
    };

    let mut nodes: Vec<Point> = vec![[0.0, 0.0]];
    let mut offsets = Vec::with_capacity(intervals.len());
    for (k, &a) in intervals.iter().enumerate() {
        offsets.push(nodes.len());
        let r = radius * (k + 1) as f64 / refinement as f64;
        for j in 0..2 * l * a {
            let (s, c) = angle_of(&fractions[k], a, j).sin_cos();
            nodes.push([r * c, r * s]);
        }
    }

    let mut elements: Vec<[usize; 3]> = Vec::new();
    let mut push = |t: [usize; 3], nodes: &[Point]| {
        if signed_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]) > 0.0 {
            elements.push(t);
        } else {
            elements.push([t[0], t[2], t[1]]);
        }
    };

    let n1 = 2 * l * intervals[0];
    for j in 0..n1 {
        push([0, offsets[0] + j, offsets[0] + (j + 1) % n1], &nodes);
    }
    for k in 1..intervals.len() {
        let (ai, ao) = (intervals[k - 1], intervals[k]);
        let strip = sweep_strip(&fractions[k - 1], &fractions[k]);
        for h in 0..2 * l {
            let global = |(ring, j): (u8, usize)| {
                let (a, ring_k) = if ring == 0 { (ai, k - 1) } else { (ao, k) };
                let n = 2 * l * a;
                let g = if h % 2 == 0 { h * a + j } else { (h + 1) * a - j };
                offsets[ring_k] + g % n
            };
            for t in &strip {
                push([global(t[0]), global(t[1]), global(t[2])], &nodes);
            }
        }
    }
    if elements.len() < 64 {
        return Err(EitError::invalid(format!(
            "refinement {refinement} yields only {} elements (need at least 64)",
            elements.len()
        )));
    }

    let nb = 2 * l * outer;
    let off = *offsets.last().unwrap();
    let boundary_edges: Vec<[usize; 2]> = (0..nb).map(|j| [off + j, off + (j + 1) % nb]).collect();

    // Boundary edges 2ℓa − e .. 2ℓa + e − 1 (mod nb) lie on electrode ℓ.
    let electrode_arcs: Vec<Vec<usize>> = (0..l)
        .map(|el| {
            let center = 2 * el * outer;
            (0..2 * on_electrode)
                .map(|i| (center + nb + i - on_electrode) % nb)
                .collect()
        })
        .collect();

    Mesh::from_parts(nodes, elements, boundary_edges, electrode_arcs, radius)
}

/// A circular inclusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: Point,
    pub radius: f64,
    pub conductivity: f64,
}

/// Piecewise-constant conductivity, one positive value per element.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityField {
    values: Vec<f64>,
}

impl ConductivityField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(EitError::invalid(format!(
                "conductivity at element {i} is not a positive finite value ({})",
                values[i]
            )));
        }
        Ok(ConductivityField { values })
    }

    pub fn homogeneous(n_elements: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n_elements])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub(crate) fn check_on(&self, mesh: &Mesh) -> Result<()> {
        crate::error::check_len("conductivity field", mesh.n_elements(), self.len())
    }
}

/// Paint circular inclusions onto a mesh: each element takes the
/// conductivity of the last circle containing its centroid, otherwise the
/// background value.
pub fn paint_phantom(mesh: &Mesh, background: f64, circles: &[Circle]) -> Result<ConductivityField> {
    if !(background > 0.0) {
        return Err(EitError::invalid("background conductivity must be positive"));
    }
    if let Some(c) = circles.iter().find(|c| !(c.conductivity > 0.0)) {
        return Err(EitError::invalid(format!(
            "circle conductivity must be positive, got {}",
            c.conductivity
        )));
    }
    let values = mesh
        .element_centroids()
        .iter()
        .map(|p| {
            circles
                .iter()
                .rev()
                .find(|c| (p[0] - c.center[0]).hypot(p[1] - c.center[1]) < c.radius)
                .map_or(background, |c| c.conductivity)
        })
        .collect();
    ConductivityField::new(values)
}
