//! Jacobian and damped Gauss-Newton reconstruction.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{check_len, EitError, Result};
use crate::fem::{basis_gradients, ForwardSolver, MeasurementVector, Protocol};
use crate::mesh::{ConductivityField, Mesh};

pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_MAX_ITERS: usize = 20;
pub const DEFAULT_MISFIT_TOL: f64 = 1e-6;
pub const POSITIVITY_FLOOR: f64 = 1e-6;
const MAX_HALVINGS: usize = 10;

/// `∂ measurement / ∂ element conductivity`, one row per measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    entries: DMatrix<f64>,
}

impl JacobianMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(EitError::NonFinite("Jacobian".into()));
        }
        Ok(JacobianMatrix { entries })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn n_measurements(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_elements(&self) -> usize {
        self.entries.ncols()
    }
}

/// Jacobian by the adjoint method, together with the forward data it was
/// linearized at.
///
/// For a measurement `U_p − U_q` under drive `d`,
/// `∂/∂σ_e = −∫_e ∇u_d · ∇w_pq`, where `w_pq` is the field of a unit current
/// driven from `p` to `q`. Adjacent protocols measure on driven pairs, so
/// the adjoint fields are the drive fields rescaled; other pairs cost one
/// extra solve each.
pub fn jacobian_and_forward(
    mesh: &Mesh,
    sigma: &ConductivityField,
    contact_impedances: &[f64],
    protocol: &Protocol,
) -> Result<(JacobianMatrix, MeasurementVector)> {
    let solver = ForwardSolver::new(mesh, sigma, contact_impedances)?;
    let (solution, forward) = solver.solve(protocol)?;
    let n_el = mesh.n_elements();

    // Per-element gradient of every drive field.
    let field_grads = |u: &[f64]| -> Vec<[f64; 2]> {
        (0..n_el)
            .map(|e| {
                let g = basis_gradients(mesh, e);
                let tri = mesh.elements()[e];
                let mut acc = [0.0; 2];
                for k in 0..3 {
                    acc[0] += u[tri[k]] * g[k][0];
                    acc[1] += u[tri[k]] * g[k][1];
                }
                acc
            })
            .collect()
    };
    let drive_grads: Vec<Vec<[f64; 2]>> = solution.potentials.iter().map(|u| field_grads(u)).collect();

    let mut adjoint: HashMap<(usize, usize), Vec<[f64; 2]>> = HashMap::new();
    for (_, p, q) in protocol.measurements() {
        if adjoint.contains_key(&(p, q)) {
            continue;
        }
        let found = protocol.drives().iter().enumerate().find_map(|(d, dr)| {
            if (dr.source, dr.sink) == (p, q) {
                Some((d, 1.0 / dr.current))
            } else if (dr.source, dr.sink) == (q, p) {
                Some((d, -1.0 / dr.current))
            } else {
                None
            }
        });
        let grads = match found {
            Some((d, scale)) => drive_grads[d].iter().map(|g| [g[0] * scale, g[1] * scale]).collect(),
            None => {
                let mut currents = vec![0.0; mesh.n_electrodes()];
                currents[p] += 1.0;
                currents[q] -= 1.0;
                let x = solver.solve_rhs(&solver.system().rhs(&currents))?;
                field_grads(&x.as_slice()[..mesh.n_nodes()])
            }
        };
        adjoint.insert((p, q), grads);
    }

    let areas = mesh.element_areas();
    let m = protocol.n_measurements();
    let mut j = DMatrix::zeros(m, n_el);
    for (row, (d, p, q)) in protocol.measurements().enumerate() {
        let w = &adjoint[&(p, q)];
        let u = &drive_grads[d];
        for e in 0..n_el {
            j[(row, e)] = -areas[e] * (u[e][0] * w[e][0] + u[e][1] * w[e][1]);
        }
    }
    Ok((JacobianMatrix::new(j)?, forward))
}

pub fn compute_jacobian(
    mesh: &Mesh,
    sigma: &ConductivityField,
    contact_impedances: &[f64],
    protocol: &Protocol,
) -> Result<JacobianMatrix> {
    jacobian_and_forward(mesh, sigma, contact_impedances, protocol).map(|(j, _)| j)
}

fn normal_equations(j: &JacobianMatrix, data_residual: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_len("residual", j.n_measurements(), data_residual.len())?;
    let jt = j.entries.transpose();
    let jtj = &jt * &j.entries;
    let rhs = &jt * DVector::from_column_slice(data_residual);
    Ok((jtj, rhs))
}

/// Undamped Gauss-Newton step: solves `JᵀJ d = Jᵀ r` with `r = v − F(σ)`.
///
/// Fails with [`EitError::Singular`] when `JᵀJ` is numerically rank
/// deficient, which is the normal state of affairs for full EIT Jacobians.
pub fn gn_direction(j: &JacobianMatrix, data_residual: &[f64]) -> Result<Vec<f64>> {
    let (jtj, rhs) = normal_equations(j, data_residual)?;
    let eig = SymmetricEigen::new(jtj.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(EitError::Singular(format!(
            "JᵀJ is rank deficient (eigenvalue ratio {:e}); use a damped step",
            if max > 0.0 { min / max } else { 0.0 }
        )));
    }
    let chol = Cholesky::new(jtj).ok_or_else(|| EitError::Singular("JᵀJ".into()))?;
    Ok(chol.solve(&rhs).as_slice().to_vec())
}

/// Levenberg-Marquardt step: `(JᵀJ + λ·diag(JᵀJ)) d = Jᵀ r` with `r = v − F(σ)`.
pub fn lm_direction(j: &JacobianMatrix, data_residual: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(EitError::invalid("damping must be a nonnegative finite value"));
    }
    let (mut a, rhs) = normal_equations(j, data_residual)?;
    for i in 0..a.nrows() {
        a[(i, i)] *= 1.0 + lambda;
    }
    let chol = Cholesky::new(a.clone());
    let d = match chol {
        Some(c) => c.solve(&rhs),
        None => a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| EitError::Singular("damped normal equations".into()))?,
    };
    if d.iter().any(|v| !v.is_finite()) {
        return Err(EitError::Singular("damped normal equations".into()));
    }
    Ok(d.as_slice().to_vec())
}

#[derive(Debug, Clone)]
pub struct InverseConfig {
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once `‖v − F(σ)‖ / ‖v‖` falls to this level.
    pub misfit_tol: f64,
    pub initial_sigma: ConductivityField,
    pub positivity_floor: f64,
}

impl InverseConfig {
    pub fn new(initial_sigma: ConductivityField) -> Self {
        InverseConfig {
            lambda: DEFAULT_LAMBDA,
            max_iters: DEFAULT_MAX_ITERS,
            misfit_tol: DEFAULT_MISFIT_TOL,
            initial_sigma,
            positivity_floor: POSITIVITY_FLOOR,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(EitError::invalid("max_iters must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(EitError::invalid("lambda must be nonnegative"));
        }
        if !(self.misfit_tol >= 0.0) {
            return Err(EitError::invalid("misfit tolerance must be nonnegative"));
        }
        if !(self.positivity_floor > 0.0) {
            return Err(EitError::invalid("positivity floor must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub sigma: ConductivityField,
    /// Relative misfit before the first step and after every accepted step.
    pub trace: Vec<f64>,
}

fn relative_misfit(v: &MeasurementVector, f: &MeasurementVector) -> f64 {
    let num: f64 = v.values().iter().zip(f.values()).map(|(a, b)| (a - b).powi(2)).sum();
    num.sqrt() / v.norm().max(f64::MIN_POSITIVE)
}

/// Iterate `σ ← σ + d_LM` from `config.initial_sigma`.
///
/// A step that increases the misfit, or whose forward solve breaks down, is
/// halved up to ten times; if none of the shortened steps helps the
/// iteration stops at the current estimate.
pub fn reconstruct(
    v: &MeasurementVector,
    mesh: &Mesh,
    contact_impedances: &[f64],
    protocol: &Protocol,
    config: &InverseConfig,
) -> Result<Reconstruction> {
    config.validate()?;
    config.initial_sigma.check_on(mesh)?;
    check_len("measurements", protocol.n_measurements(), v.len())?;

    let mut trace = Vec::with_capacity(config.max_iters + 1);
    let abort = |iteration: usize, trace: &Vec<f64>, e: EitError| EitError::ReconstructionAborted {
        iteration,
        trace: trace.clone(),
        source: Box::new(e),
    };

    let mut sigma = config.initial_sigma.clone();
    let (mut jac, mut forward) =
        jacobian_and_forward(mesh, &sigma, contact_impedances, protocol).map_err(|e| abort(0, &trace, e))?;
    let mut misfit = relative_misfit(v, &forward);
    trace.push(misfit);

    for iteration in 1..=config.max_iters {
        if misfit <= config.misfit_tol {
            break;
        }
        let residual: Vec<f64> = v.values().iter().zip(forward.values()).map(|(a, b)| a - b).collect();
        let d = lm_direction(&jac, &residual, config.lambda).map_err(|e| abort(iteration, &trace, e))?;

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = sigma
                .values()
                .iter()
                .zip(&d)
                .map(|(s, di)| (s + step * di).max(config.positivity_floor))
                .collect();
            let candidate = ConductivityField::new(candidate).map_err(|e| abort(iteration, &trace, e))?;
            let (j_try, f_try) = match jacobian_and_forward(mesh, &candidate, contact_impedances, protocol) {
                Ok(r) => r,
                Err(EitError::SolverFailure { .. } | EitError::Singular(_) | EitError::NonFinite(_)) => {
                    step *= 0.5;
                    continue;
                }
                Err(e) => return Err(abort(iteration, &trace, e)),
            };
            let m_try = relative_misfit(v, &f_try);
            if m_try <= misfit {
                accepted = Some((candidate, j_try, f_try, m_try));
                break;
            }
            step *= 0.5;
        }
        let Some((s, j_new, f_new, m_new)) = accepted else {
            break;
        };
        sigma = s;
        jac = j_new;
        forward = f_new;
        misfit = m_new;
        trace.push(misfit);
    }
    Ok(Reconstruction { sigma, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{build_adjacent_protocol, default_impedances, solve_forward};
    use crate::mesh::{build_disk_mesh, paint_phantom, Circle};
    use rand::SeedableRng;

    fn toy_j() -> JacobianMatrix {
        // Orthogonal columns.
        JacobianMatrix::new(DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0])).unwrap()
    }

    #[test]
    fn zero_residual_gives_zero_step() {
        let d = gn_direction(&toy_j(), &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
        let d = lm_direction(&toy_j(), &[0.0, 0.0, 0.0], 0.3).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn gn_orthogonal_columns_project() {
        // Column projections: <c1, r>/|c1|² = 1, <c2, r>/|c2|² = 2/4.
        let d = gn_direction(&toy_j(), &[1.0, 1.0, 1.0]).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-14);
        assert!((d[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn lm_matches_hand_solution() {
        // J = [[1,2],[3,4],[5,6]], r = (1,0,1), λ = 1.
        // JᵀJ = [[35,44],[44,56]], Jᵀr = (6, 8).
        // (JᵀJ + diag) = [[70,44],[44,112]], det = 7840 − 1936 = 5904.
        // d = (112·6 − 44·8, −44·6 + 70·8) / 5904 = (320, 296) / 5904.
        let j = JacobianMatrix::new(DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let d = lm_direction(&j, &[1.0, 0.0, 1.0], 1.0).unwrap();
        assert!((d[0] - 320.0 / 5904.0).abs() < 1e-12);
        assert!((d[1] - 296.0 / 5904.0).abs() < 1e-12);
    }

    #[test]
    fn lm_reduces_to_gn_without_damping() {
        let j = JacobianMatrix::new(DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let r = [0.3, -1.0, 2.0];
        let a = lm_direction(&j, &r, 0.0).unwrap();
        let b = gn_direction(&j, &r).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn heavy_damping_shrinks_step() {
        let j = JacobianMatrix::new(DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let d = lm_direction(&j, &[1.0, 1.0, 1.0], 1e12).unwrap();
        assert!(d.iter().all(|x| x.abs() < 1e-10));
        assert!(lm_direction(&j, &[1.0, 1.0, 1.0], -1.0).is_err());
    }

    #[test]
    fn full_jacobian_is_singular_for_gn() {
        let mesh = build_disk_mesh(16, 8, 0.5).unwrap();
        let protocol = build_adjacent_protocol(16, 1.0).unwrap();
        let sigma = ConductivityField::homogeneous(mesh.n_elements(), 1.0).unwrap();
        let j = compute_jacobian(&mesh, &sigma, &default_impedances(16), &protocol).unwrap();
        assert_eq!(j.n_measurements(), 208);
        let r = vec![1.0; 208];
        assert!(matches!(gn_direction(&j, &r), Err(EitError::Singular(_))));
        assert!(lm_direction(&j, &r, 0.01).is_ok());
    }

    #[test]
    fn converges_immediately_on_consistent_data() {
        let mesh = build_disk_mesh(16, 8, 0.5).unwrap();
        let protocol = build_adjacent_protocol(16, 1.0).unwrap();
        let z = default_impedances(16);
        let sigma = ConductivityField::homogeneous(mesh.n_elements(), 1.0).unwrap();
        let (_, v) = solve_forward(&mesh, &sigma, &z, &protocol).unwrap();
        let rec = reconstruct(&v, &mesh, &z, &protocol, &InverseConfig::new(sigma.clone())).unwrap();
        assert_eq!(rec.trace.len(), 1);
        assert!(rec.trace[0] <= DEFAULT_MISFIT_TOL);
        assert_eq!(rec.sigma, sigma);
    }

    #[test]
    fn trace_is_non_increasing_and_floor_holds() {
        let mesh = build_disk_mesh(16, 8, 0.5).unwrap();
        let protocol = build_adjacent_protocol(16, 1.0).unwrap();
        let z = default_impedances(16);
        let truth = paint_phantom(
            &mesh,
            1.0,
            &[Circle { center: [0.4, 0.1], radius: 0.25, conductivity: 0.05 }],
        )
        .unwrap();
        let (_, v) = solve_forward(&mesh, &truth, &z, &protocol).unwrap();
        let init = ConductivityField::homogeneous(mesh.n_elements(), 1.0).unwrap();
        let mut cfg = InverseConfig::new(init);
        cfg.max_iters = 6;
        let rec = reconstruct(&v, &mesh, &z, &protocol, &cfg).unwrap();
        for w in rec.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(rec.sigma.values().iter().all(|&s| s >= POSITIVITY_FLOOR));
    }

    #[test]
    fn rejects_invalid_config() {
        let mesh = build_disk_mesh(16, 8, 0.5).unwrap();
        let protocol = build_adjacent_protocol(16, 1.0).unwrap();
        let z = default_impedances(16);
        let init = ConductivityField::homogeneous(mesh.n_elements(), 1.0).unwrap();
        let v = MeasurementVector::new(vec![1.0; 208]).unwrap();
        let mut cfg = InverseConfig::new(init);
        cfg.max_iters = 0;
        assert!(reconstruct(&v, &mesh, &z, &protocol, &cfg).is_err());
    }

    fn setup(r: usize) -> (Mesh, Protocol, Vec<f64>) {
        (build_disk_mesh(16, r, 0.5).unwrap(), build_adjacent_protocol(16, 1.0).unwrap(), default_impedances(16))
    }

    #[test]
    fn adjoint_matches_central_differences() {
        let (mesh, protocol, z) = setup(6);
        let sigma = paint_phantom(
            &mesh,
            1.0,
            &[Circle { center: [-0.2, 0.3], radius: 0.3, conductivity: 1.7 }],
        )
        .unwrap();
        let j = compute_jacobian(&mesh, &sigma, &z, &protocol).unwrap();
        assert_eq!(j.n_measurements(), 208);
        assert_eq!(j.n_elements(), mesh.n_elements());
        let h = 1e-6;
        // A few interior elements picked by a fixed stride.
        for e in (7..mesh.n_elements() / 2).step_by(mesh.n_elements() / 7) {
            let mut plus = sigma.values().to_vec();
            let mut minus = plus.clone();
            plus[e] += h;
            minus[e] -= h;
            let fp = solve_forward(&mesh, &ConductivityField::new(plus).unwrap(), &z, &protocol).unwrap().1;
            let fm = solve_forward(&mesh, &ConductivityField::new(minus).unwrap(), &z, &protocol).unwrap().1;
            let fd: Vec<f64> = fp.values().iter().zip(fm.values()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let col = j.entries().column(e);
            let err: f64 = fd.iter().zip(col.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(err / scale < 1e-4, "element {e}: relative error {}", err / scale);
        }
    }

    #[test]
    fn sensitivity_is_highest_near_electrodes() {
        let (mesh, protocol, z) = setup(8);
        let sigma = ConductivityField::homogeneous(mesh.n_elements(), 1.0).unwrap();
        let j = compute_jacobian(&mesh, &sigma, &z, &protocol).unwrap();
        let centroids = mesh.element_centroids();
        let areas = mesh.element_areas();
        let closest = |target: [f64; 2]| {
            (0..mesh.n_elements())
                .min_by(|&a, &b| {
                    let da = (centroids[a][0] - target[0]).hypot(centroids[a][1] - target[1]);
                    let db = (centroids[b][0] - target[0]).hypot(centroids[b][1] - target[1]);
                    da.total_cmp(&db)
                })
                .unwrap()
        };
        let centre = closest([0.0, 0.0]);
        let edge = closest([1.0, 0.0]);
        // Per unit area, so elements of different size compare fairly.
        let density = |e: usize| j.entries().column(e).norm() / areas[e];
        assert!(density(edge) > 2.0 * density(centre), "{} vs {}", density(edge), density(centre));
    }

    proptest::proptest! {
        #[test]
        fn lm_scaled_step_shrinks_with_damping(
            vals in proptest::collection::vec(-3.0f64..3.0, 12),
            r in proptest::collection::vec(-1.0f64..1.0, 4),
            scales in proptest::collection::vec(-2.0f64..2.0, 3),
            l1 in 0.0f64..5.0,
            dl in 0.0f64..5.0,
        ) {
            let mut m = DMatrix::from_row_slice(4, 3, &vals);
            for (c, s) in scales.iter().enumerate() {
                m.column_mut(c).scale_mut(10f64.powf(*s));
            }
            let diag: Vec<f64> = m.column_iter().map(|c| c.norm_squared()).collect();
            proptest::prop_assume!(diag.iter().all(|d| *d > 1e-9));
            let j = JacobianMatrix::new(m).unwrap();
            let scaled = |d: &[f64]| d.iter().zip(&diag).map(|(x, w)| w * x * x).sum::<f64>().sqrt();
            let a = lm_direction(&j, &r, l1).unwrap();
            let b = lm_direction(&j, &r, l1 + dl).unwrap();
            proptest::prop_assert!(scaled(&b) <= scaled(&a) * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn lm_step_shrinks_with_damping_for_equal_columns(
            vals in proptest::collection::vec(-3.0f64..3.0, 12),
            r in proptest::collection::vec(-1.0f64..1.0, 4),
            l1 in 0.0f64..5.0,
            dl in 0.0f64..5.0,
        ) {
            let mut m = DMatrix::from_row_slice(4, 3, &vals);
            for mut c in m.column_iter_mut() {
                let n = c.norm();
                proptest::prop_assume!(n > 1e-6);
                c /= n;
            }
            let j = JacobianMatrix::new(m).unwrap();
            let norm = |d: &[f64]| d.iter().map(|x| x * x).sum::<f64>().sqrt();
            let a = lm_direction(&j, &r, l1).unwrap();
            let b = lm_direction(&j, &r, l1 + dl).unwrap();
            proptest::prop_assert!(norm(&b) <= norm(&a) * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn lm_ignores_measurement_order(
            vals in proptest::collection::vec(-3.0f64..3.0, 15),
            r in proptest::collection::vec(-1.0f64..1.0, 5),
            seed in 0u64..1000,
            lambda in 0.01f64..2.0,
        ) {
            use rand::seq::SliceRandom;
            let m = DMatrix::from_row_slice(5, 3, &vals);
            proptest::prop_assume!(m.column_iter().all(|c| c.norm() > 1e-3));
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mp = DMatrix::from_fn(5, 3, |i, k| m[(perm[i], k)]);
            let rp: Vec<f64> = perm.iter().map(|&i| r[i]).collect();
            let a = lm_direction(&JacobianMatrix::new(m).unwrap(), &r, lambda).unwrap();
            let b = lm_direction(&JacobianMatrix::new(mp).unwrap(), &rp, lambda).unwrap();
            for (x, y) in a.iter().zip(&b) {
                proptest::prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }
    }
}
