//! Complete electrode model forward solver.
//!
//! Unknowns are ordered as `[u_1..u_N, U_1..U_L, μ]`: piecewise-linear node
//! potentials, electrode potentials, and one Lagrange multiplier enforcing
//! `Σ U_ℓ = 0`. The bordered matrix is symmetric and nonsingular for
//! positive conductivity and contact impedance.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, LU};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, EitError, Result};
use crate::mesh::{ConductivityField, Mesh};

pub const DEFAULT_CONTACT_IMPEDANCE: f64 = 0.01;
pub const DEFAULT_CURRENT: f64 = 1.0;
pub const DEFAULT_BACKGROUND: f64 = 1.0;

const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drive {
    pub source: usize,
    pub sink: usize,
    pub current: f64,
}

/// Current-injection and differential-measurement pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    n_electrodes: usize,
    drives: Vec<Drive>,
    /// Per drive, `(positive, negative)` electrode pairs.
    measurement_pairs: Vec<Vec<(usize, usize)>>,
}

impl Protocol {
    pub fn n_electrodes(&self) -> usize {
        self.n_electrodes
    }

    pub fn drives(&self) -> &[Drive] {
        &self.drives
    }

    pub fn measurement_pairs(&self) -> &[Vec<(usize, usize)>] {
        &self.measurement_pairs
    }

    pub fn n_measurements(&self) -> usize {
        self.measurement_pairs.iter().map(Vec::len).sum()
    }

    /// Electrode current vector for one drive.
    pub fn currents(&self, drive: usize) -> Vec<f64> {
        let d = self.drives[drive];
        let mut c = vec![0.0; self.n_electrodes];
        c[d.source] += d.current;
        c[d.sink] -= d.current;
        c
    }

    /// Drive-major `(drive, positive, negative)` triples.
    pub fn measurements(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.measurement_pairs
            .iter()
            .enumerate()
            .flat_map(|(d, pairs)| pairs.iter().map(move |&(p, n)| (d, p, n)))
    }
}

/// Adjacent drive, adjacent measurement: drive `ℓ` injects `+I` at `ℓ` and
/// `−I` at `ℓ+1`; it is measured on every adjacent pair `(k, k+1)` that does
/// not touch a driven electrode, giving `L(L−3)` values. Pairs are listed
/// starting from the drive, `(ℓ+2, ℓ+3)` first, so the homogeneous blocks
/// coincide across drives.
pub fn build_adjacent_protocol(n_electrodes: usize, current: f64) -> Result<Protocol> {
    if n_electrodes < 4 {
        return Err(EitError::invalid("adjacent protocol needs at least 4 electrodes"));
    }
    if !(current > 0.0 && current.is_finite()) {
        return Err(EitError::invalid("current amplitude must be positive"));
    }
    let l = n_electrodes;
    let drives = (0..l)
        .map(|s| Drive {
            source: s,
            sink: (s + 1) % l,
            current,
        })
        .collect::<Vec<_>>();
    let measurement_pairs = drives
        .iter()
        .map(|d| {
            (0..l)
                .map(|i| ((d.source + i) % l, (d.source + i + 1) % l))
                .filter(|&(a, b)| ![a, b].iter().any(|&e| e == d.source || e == d.sink))
                .collect()
        })
        .collect();
    Ok(Protocol {
        n_electrodes,
        drives,
        measurement_pairs,
    })
}

/// Differential electrode voltages in drive-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector {
    values: Vec<f64>,
}

impl MeasurementVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EitError::NonFinite("measurement vector".into()));
        }
        Ok(MeasurementVector { values })
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

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// One value per line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for v in &self.values {
            writeln!(out, "{v}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut values = Vec::new();
        for line in input.lines() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            values.push(
                t.parse()
                    .map_err(|_| EitError::Format(format!("bad measurement value `{t}`")))?,
            );
        }
        Self::new(values)
    }
}

/// Node and electrode potentials for every drive.
#[derive(Debug, Clone)]
pub struct ForwardSolution {
    /// `potentials[drive][node]`
    pub potentials: Vec<Vec<f64>>,
    /// `electrode_potentials[drive][electrode]`
    pub electrode_potentials: Vec<Vec<f64>>,
}

/// The bordered CEM matrix.
#[derive(Debug, Clone)]
pub struct CemSystem {
    pub matrix: DMatrix<f64>,
    pub n_nodes: usize,
    pub n_electrodes: usize,
}

impl CemSystem {
    pub fn dim(&self) -> usize {
        self.n_nodes + self.n_electrodes + 1
    }

    /// Right-hand side for a set of electrode currents.
    pub fn rhs(&self, currents: &[f64]) -> DVector<f64> {
        let mut b = DVector::zeros(self.dim());
        for (l, &c) in currents.iter().enumerate() {
            b[self.n_nodes + l] = c;
        }
        b
    }
}

/// Gradients of the three P1 basis functions on an element (constant per element).
pub(crate) fn basis_gradients(mesh: &Mesh, e: usize) -> [[f64; 2]; 3] {
    let [p0, p1, p2] = mesh.element_vertices(e);
    let two_a = 2.0 * mesh.element_area(e);
    let p = [p0, p1, p2];
    let mut g = [[0.0; 2]; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        g[i] = [(p[j][1] - p[k][1]) / two_a, (p[k][0] - p[j][0]) / two_a];
    }
    g
}

/// `Σ_e σ_e ∫_e ∇φ_i·∇φ_j` over the node potentials.
pub fn stiffness_matrix(mesh: &Mesh, sigma: &ConductivityField) -> Result<DMatrix<f64>> {
    sigma.check_on(mesh)?;
    let n = mesh.n_nodes();
    let mut k = DMatrix::zeros(n, n);
    for (e, tri) in mesh.elements().iter().enumerate() {
        let g = basis_gradients(mesh, e);
        let w = sigma.values()[e] * mesh.element_area(e);
        for a in 0..3 {
            for b in 0..3 {
                k[(tri[a], tri[b])] += w * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
            }
        }
    }
    Ok(k)
}

fn check_impedances(mesh: &Mesh, contact_impedances: &[f64]) -> Result<()> {
    check_len("contact impedances", mesh.n_electrodes(), contact_impedances.len())?;
    if contact_impedances.iter().any(|z| !(*z > 0.0 && z.is_finite())) {
        return Err(EitError::invalid("contact impedances must be positive"));
    }
    Ok(())
}

/// Assemble the CEM weak form with the `Σ U_ℓ = 0` gauge row.
pub fn assemble_cem_system(
    mesh: &Mesh,
    sigma: &ConductivityField,
    contact_impedances: &[f64],
) -> Result<CemSystem> {
    check_impedances(mesh, contact_impedances)?;
    let n = mesh.n_nodes();
    let l = mesh.n_electrodes();
    let dim = n + l + 1;
    let mut m = DMatrix::zeros(dim, dim);
    m.view_mut((0, 0), (n, n))
        .copy_from(&stiffness_matrix(mesh, sigma)?);
    for (el, arc) in mesh.electrode_arcs().iter().enumerate() {
        let inv_z = 1.0 / contact_impedances[el];
        let u_row = n + el;
        for &edge in arc {
            let [a, b] = mesh.boundary_edges()[edge];
            let h = mesh.edge_length(edge);
            m[(a, a)] += h * inv_z / 3.0;
            m[(b, b)] += h * inv_z / 3.0;
            m[(a, b)] += h * inv_z / 6.0;
            m[(b, a)] += h * inv_z / 6.0;
            for node in [a, b] {
                m[(node, u_row)] -= h * inv_z / 2.0;
                m[(u_row, node)] -= h * inv_z / 2.0;
            }
            m[(u_row, u_row)] += h * inv_z;
        }
        m[(u_row, dim - 1)] = 1.0;
        m[(dim - 1, u_row)] = 1.0;
    }
    Ok(CemSystem {
        matrix: m,
        n_nodes: n,
        n_electrodes: l,
    })
}

/// A factorized CEM system, reusable across drives.
pub struct ForwardSolver {
    system: CemSystem,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl ForwardSolver {
    pub fn new(mesh: &Mesh, sigma: &ConductivityField, contact_impedances: &[f64]) -> Result<Self> {
        let system = assemble_cem_system(mesh, sigma, contact_impedances)?;
        let lu = LU::new(system.matrix.clone());
        if !lu.is_invertible() {
            return Err(EitError::Singular("CEM system".into()));
        }
        Ok(ForwardSolver { system, lu })
    }

    pub fn system(&self) -> &CemSystem {
        &self.system
    }

    /// Solve for one right-hand side, with a single round of iterative
    /// refinement when the first solve misses the residual tolerance.
    pub fn solve_rhs(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let a = &self.system.matrix;
        let mut x = self
            .lu
            .solve(b)
            .ok_or_else(|| EitError::Singular("CEM system".into()))?;
        let bnorm = b.norm().max(f64::MIN_POSITIVE);
        let mut res = (a * &x - b).norm() / bnorm;
        if res > RESIDUAL_TOL {
            let r = b - a * &x;
            if let Some(dx) = self.lu.solve(&r) {
                x += dx;
            }
            res = (a * &x - b).norm() / bnorm;
        }
        if !(res <= RESIDUAL_TOL) {
            return Err(EitError::SolverFailure { residual: res });
        }
        Ok(x)
    }

    pub fn solve(&self, protocol: &Protocol) -> Result<(ForwardSolution, MeasurementVector)> {
        check_len("protocol electrodes", self.system.n_electrodes, protocol.n_electrodes())?;
        let n = self.system.n_nodes;
        let l = self.system.n_electrodes;
        let mut potentials = Vec::with_capacity(protocol.drives().len());
        let mut electrode_potentials = Vec::with_capacity(protocol.drives().len());
        for d in 0..protocol.drives().len() {
            let x = self.solve_rhs(&self.system.rhs(&protocol.currents(d)))?;
            potentials.push(x.rows(0, n).iter().copied().collect::<Vec<_>>());
            electrode_potentials.push(x.rows(n, l).iter().copied().collect::<Vec<_>>());
        }
        let values = protocol
            .measurements()
            .map(|(d, p, q)| electrode_potentials[d][p] - electrode_potentials[d][q])
            .collect();
        Ok((
            ForwardSolution {
                potentials,
                electrode_potentials,
            },
            MeasurementVector::new(values)?,
        ))
    }
}

/// Noiseless forward map `F(σ)`.
pub fn solve_forward(
    mesh: &Mesh,
    sigma: &ConductivityField,
    contact_impedances: &[f64],
    protocol: &Protocol,
) -> Result<(ForwardSolution, MeasurementVector)> {
    ForwardSolver::new(mesh, sigma, contact_impedances)?.solve(protocol)
}

/// Add i.i.d. zero-mean Gaussian noise whose expected power sits `snr_db`
/// decibels below the signal power, `10·log10(Σv² / E Ση²) = snr_db`.
/// An infinite SNR returns the input unchanged.
pub fn add_measurement_noise(v: &MeasurementVector, snr_db: f64, seed: u64) -> Result<MeasurementVector> {
    if snr_db == f64::INFINITY {
        return Ok(v.clone());
    }
    if !snr_db.is_finite() {
        return Err(EitError::invalid("SNR must be finite or +inf"));
    }
    if v.is_empty() {
        return Ok(v.clone());
    }
    let power = v.values().iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    let std = (power * 10f64.powf(-snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = v
        .values()
        .iter()
        .map(|x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            x + std * z
        })
        .collect();
    MeasurementVector::new(values)
}

pub fn default_impedances(n_electrodes: usize) -> Vec<f64> {
    vec![DEFAULT_CONTACT_IMPEDANCE; n_electrodes]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_disk_mesh, paint_phantom, Circle, DEFAULT_REFINEMENT};

    fn default_setup() -> (Mesh, Protocol, Vec<f64>) {
        let mesh = build_disk_mesh(16, DEFAULT_REFINEMENT, 0.5).unwrap();
        let protocol = build_adjacent_protocol(16, 1.0).unwrap();
        (mesh, protocol, default_impedances(16))
    }

    #[test]
    fn adjacent_protocol_counts() {
        let p = build_adjacent_protocol(16, 1.0).unwrap();
        assert_eq!(p.drives().len(), 16);
        assert_eq!(p.n_measurements(), 208);
        assert!(p.measurement_pairs().iter().all(|m| m.len() == 13));
        for d in 0..16 {
            assert_eq!(p.currents(d).iter().sum::<f64>(), 0.0);
        }
        assert!(build_adjacent_protocol(3, 1.0).is_err());
    }

    #[test]
    fn adjacent_protocol_matches_enumeration() {
        let l = 8;
        let p = build_adjacent_protocol(l, 1.0).unwrap();
        let mut expected = Vec::new();
        for d in 0..l {
            let driven = [d, (d + 1) % l];
            for i in 0..l {
                let k = (d + i) % l;
                let pair = [k, (k + 1) % l];
                if pair.iter().all(|e| !driven.contains(e)) {
                    expected.push((d, k, (k + 1) % l));
                }
            }
        }
        assert_eq!(expected.len(), 40);
        assert_eq!(p.measurements().collect::<Vec<_>>(), expected);
    }

    /// Two triangles on the unit square, electrode on the bottom edge.
    fn two_element_mesh() -> Mesh {
        Mesh::from_parts(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
            vec![[0, 1], [1, 2], [2, 3], [3, 0]],
            vec![vec![0], vec![2]],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn two_element_system_matches_hand_assembly() {
        let mesh = two_element_mesh();
        let sigma = ConductivityField::new(vec![2.0, 3.0]).unwrap();
        let z = [0.5, 0.25];
        let sys = assemble_cem_system(&mesh, &sigma, &z).unwrap();
        // Element 0 (0,1,2): gradients (-1,0),(1,-1),(0,1); area 1/2.
        // Element 1 (0,2,3): gradients (0,-1),(1,0),(-1,1); area 1/2.
        let k0 = [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]];
        let k1 = [[1.0, 0.0, -1.0], [0.0, 1.0, -1.0], [-1.0, -1.0, 2.0]];
        let mut k = [[0.0; 4]; 4];
        for (i, &a) in [0, 1, 2].iter().enumerate() {
            for (j, &b) in [0, 1, 2].iter().enumerate() {
                k[a][b] += 2.0 * 0.5 * k0[i][j];
            }
        }
        for (i, &a) in [0, 2, 3].iter().enumerate() {
            for (j, &b) in [0, 2, 3].iter().enumerate() {
                k[a][b] += 3.0 * 0.5 * k1[i][j];
            }
        }
        // Electrode 0 on edge (0,1), h = 1, 1/z = 2. Electrode 1 on (2,3), 1/z = 4.
        k[0][0] += 2.0 / 3.0;
        k[1][1] += 2.0 / 3.0;
        k[0][1] += 2.0 / 6.0;
        k[1][0] += 2.0 / 6.0;
        k[2][2] += 4.0 / 3.0;
        k[3][3] += 4.0 / 3.0;
        k[2][3] += 4.0 / 6.0;
        k[3][2] += 4.0 / 6.0;
        let mut expected = DMatrix::<f64>::zeros(7, 7);
        for a in 0..4 {
            for b in 0..4 {
                expected[(a, b)] = k[a][b];
            }
        }
        for (node, el, inv_z) in [(0, 0, 2.0), (1, 0, 2.0), (2, 1, 4.0), (3, 1, 4.0)] {
            expected[(node, 4 + el)] = -inv_z / 2.0;
            expected[(4 + el, node)] = -inv_z / 2.0;
        }
        expected[(4, 4)] = 2.0;
        expected[(5, 5)] = 4.0;
        for el in 0..2 {
            expected[(4 + el, 6)] = 1.0;
            expected[(6, 4 + el)] = 1.0;
        }
        assert!((sys.matrix - expected).abs().max() < 1e-14);
    }

    #[test]
    fn system_is_symmetric_and_linear_in_sigma() {
        let (mesh, _, z) = default_setup();
        let sigma = ConductivityField::homogeneous(mesh.n_elements(), 1.0).unwrap();
        let sys = assemble_cem_system(&mesh, &sigma, &z).unwrap();
        let asym = (&sys.matrix - sys.matrix.transpose()).abs().max();
        assert!(asym <= 1e-12);
        let doubled = ConductivityField::homogeneous(mesh.n_elements(), 2.0).unwrap();
        let k1 = stiffness_matrix(&mesh, &sigma).unwrap();
        let k2 = stiffness_matrix(&mesh, &doubled).unwrap();
        assert_eq!(k2, &k1 * 2.0);
    }

    #[test]
    fn rejects_bad_impedances() {
        let (mesh, _, _) = default_setup();
        let sigma = ConductivityField::homogeneous(mesh.n_elements(), 1.0).unwrap();
        assert!(assemble_cem_system(&mesh, &sigma, &[0.01; 15]).is_err());
        let mut z = vec![0.01; 16];
        z[3] = 0.0;
        assert!(assemble_cem_system(&mesh, &sigma, &z).is_err());
    }

    #[test]
    fn homogeneous_blocks_identical_across_drives() {
        let (mesh, protocol, z) = default_setup();
        let sigma = ConductivityField::homogeneous(mesh.n_elements(), 1.0).unwrap();
        let (_, v) = solve_forward(&mesh, &sigma, &z, &protocol).unwrap();
        assert_eq!(v.len(), 208);
        let first = &v.values()[..13];
        let scale = first.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for block in v.values().chunks(13) {
            for (a, b) in block.iter().zip(first) {
                assert!((a - b).abs() <= 1e-6 * scale, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gauge_holds_per_drive() {
        let (mesh, protocol, z) = default_setup();
        let c = Circle { center: [0.2, 0.3], radius: 0.2, conductivity: 2.0 };
        let sigma = paint_phantom(&mesh, 1.0, &[c]).unwrap();
        let (sol, _) = solve_forward(&mesh, &sigma, &z, &protocol).unwrap();
        for u in &sol.electrode_potentials {
            assert!(u.iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn scaling_sigma_and_impedance() {
        let (mesh, protocol, z) = default_setup();
        let c = Circle { center: [-0.3, 0.1], radius: 0.25, conductivity: 0.5 };
        let sigma = paint_phantom(&mesh, 1.0, &[c]).unwrap();
        let (_, v) = solve_forward(&mesh, &sigma, &z, &protocol).unwrap();
        let sigma2 = ConductivityField::new(sigma.values().iter().map(|s| 2.0 * s).collect()).unwrap();
        let z2: Vec<f64> = z.iter().map(|z| z / 2.0).collect();
        let (_, v2) = solve_forward(&mesh, &sigma2, &z2, &protocol).unwrap();
        for (a, b) in v.values().iter().zip(v2.values()) {
            assert!((a / 2.0 - b).abs() <= 1e-9 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn reciprocity_on_inhomogeneous_phantom() {
        let (mesh, protocol, z) = default_setup();
        let circles = [
            Circle { center: [0.3, 0.2], radius: 0.2, conductivity: 0.5 },
            Circle { center: [-0.25, -0.35], radius: 0.15, conductivity: 1.5 },
        ];
        let sigma = paint_phantom(&mesh, 1.0, &circles).unwrap();
        let (sol, _) = solve_forward(&mesh, &sigma, &z, &protocol).unwrap();
        let u = &sol.electrode_potentials;
        let l = 16;
        for a in 0..l {
            for c in 0..l {
                let m_ac = u[a][c] - u[a][(c + 1) % l];
                let m_ca = u[c][a] - u[c][(a + 1) % l];
                assert!((m_ac - m_ca).abs() <= 1e-8 * m_ac.abs().max(m_ca.abs()).max(1e-12));
            }
        }
    }

    #[test]
    fn grid_convergence_is_cauchy() {
        let protocol = build_adjacent_protocol(16, 1.0).unwrap();
        let z = default_impedances(16);
        let meas = |r| {
            let mesh = build_disk_mesh(16, r, 0.5).unwrap();
            let sigma = ConductivityField::homogeneous(mesh.n_elements(), 1.0).unwrap();
            solve_forward(&mesh, &sigma, &z, &protocol).unwrap().1
        };
        let (a, b, c) = (meas(9), meas(10), meas(11));
        let diff = |x: &MeasurementVector, y: &MeasurementVector| {
            x.values().iter().zip(y.values()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
        };
        assert!(diff(&b, &c) < diff(&a, &b));
    }

    #[test]
    fn noise_infinite_snr_is_identity() {
        let v = MeasurementVector::new(vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(add_measurement_noise(&v, f64::INFINITY, 1).unwrap(), v);
        assert!(add_measurement_noise(&v, f64::NAN, 1).is_err());
    }

    #[test]
    fn noise_snr_monte_carlo() {
        let (mesh, protocol, z) = default_setup();
        let sigma = ConductivityField::homogeneous(mesh.n_elements(), 1.0).unwrap();
        let (_, v) = solve_forward(&mesh, &sigma, &z, &protocol).unwrap();
        let signal: f64 = v.values().iter().map(|x| x * x).sum();
        let mut mean_snr = 0.0;
        let mut mean_ratio = 0.0;
        for seed in 0..1000 {
            let noisy = add_measurement_noise(&v, 25.0, seed).unwrap();
            let noise: f64 = noisy.values().iter().zip(v.values()).map(|(a, b)| (a - b).powi(2)).sum();
            mean_snr += 10.0 * (signal / noise).log10() / 1000.0;
            mean_ratio += noise / signal / 1000.0;
        }
        assert!((mean_snr - 25.0).abs() < 0.5, "{mean_snr}");
        assert!((mean_ratio / 10f64.powf(-2.5) - 1.0).abs() < 0.02);
        // Deterministic per seed.
        assert_eq!(add_measurement_noise(&v, 40.0, 7).unwrap(), add_measurement_noise(&v, 40.0, 7).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let v = MeasurementVector::new(vec![0.1, -1e-7, 3.25]).unwrap();
        let mut buf = Vec::new();
        v.write_csv(&mut buf).unwrap();
        assert_eq!(MeasurementVector::read_csv(&buf[..]).unwrap(), v);
    }
}
