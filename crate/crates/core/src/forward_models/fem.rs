//! P1 finite elements for `−∇·(E(x, m) ∇u) = f` on a triangle mesh.
//!
//! The input `x` is a per-element design density `ρ`; the element coefficient
//! is `ρ_e^p · E(c_e, m)` with the modulus `E` from the KL basis at the element
//! centroid `c_e`. Dirichlet nodes are eliminated and the reduced system is
//! factored densely. The observation is the full nodal vector with zeros on
//! the fixed nodes.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, Vector3};

use super::mesh::Mesh;
use super::ForwardModel;
use crate::kl_field::KlBasis;
use crate::{linalg, Error, Result};

#[derive(Debug, Clone)]
pub struct FemProblem {
    mesh: Mesh,
    dirichlet: Vec<usize>,
    /// Reduced index of each node, `None` for fixed ones.
    free_index: Vec<Option<usize>>,
    free: Vec<usize>,
    load: DVector<f64>,
    element_stiffness: Vec<Matrix3<f64>>,
    kl: Arc<KlBasis>,
    simp_exponent: f64,
}

/// Reduced factorization plus the pieces the sensitivities need.
struct Solution {
    chol: Cholesky<f64, Dyn>,
    u: DVector<f64>,
    moduli: Vec<f64>,
    design_factor: Vec<f64>,
}

impl FemProblem {
    pub fn new(mesh: Mesh, dirichlet: Vec<usize>, load: DVector<f64>, kl: Arc<KlBasis>) -> Result<Self> {
        if load.len() != mesh.n_nodes() {
            return Err(Error::DimensionMismatch { context: "load vector", expected: mesh.n_nodes(), actual: load.len() });
        }
        if kl.n_elements() != mesh.n_elements() {
            return Err(Error::DimensionMismatch {
                context: "KL basis rows",
                expected: mesh.n_elements(),
                actual: kl.n_elements(),
            });
        }
        let mut dirichlet = dirichlet;
        dirichlet.sort_unstable();
        dirichlet.dedup();
        if let Some(&bad) = dirichlet.iter().find(|&&n| n >= mesh.n_nodes()) {
            return Err(Error::InvalidArgument(format!("Dirichlet node {bad} out of range")));
        }
        if dirichlet.is_empty() {
            return Err(Error::InvalidArgument("at least one Dirichlet node is required".into()));
        }
        let mut free_index = vec![None; mesh.n_nodes()];
        let mut free = Vec::with_capacity(mesh.n_nodes() - dirichlet.len());
        for (n, slot) in free_index.iter_mut().enumerate() {
            if dirichlet.binary_search(&n).is_err() {
                *slot = Some(free.len());
                free.push(n);
            }
        }
        let element_stiffness = (0..mesh.n_elements()).map(|e| mesh.element_stiffness(e)).collect();
        Ok(Self { mesh, dirichlet, free_index, free, load, element_stiffness, kl, simp_exponent: 1.0 })
    }

    /// Sets the exponent `p` in `ρ_e^p`.
    pub fn with_simp_exponent(mut self, p: f64) -> Result<Self> {
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::InvalidArgument(format!("SIMP exponent must be positive, got {p}")));
        }
        self.simp_exponent = p;
        Ok(self)
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn kl(&self) -> &KlBasis {
        &self.kl
    }

    pub fn dirichlet(&self) -> &[usize] {
        &self.dirichlet
    }

    pub fn load(&self) -> &DVector<f64> {
        &self.load
    }

    pub fn simp_exponent(&self) -> f64 {
        self.simp_exponent
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    /// Nodes with `x ≤ tol`.
    pub fn left_edge_nodes(mesh: &Mesh, tol: f64) -> Vec<usize> {
        (0..mesh.n_nodes()).filter(|&n| mesh.nodes[n][0] <= tol).collect()
    }

    /// A single nodal load of size `magnitude` at the node nearest `point`.
    pub fn point_load(mesh: &Mesh, point: [f64; 2], magnitude: f64) -> DVector<f64> {
        let mut f = DVector::zeros(mesh.n_nodes());
        f[mesh.nearest_node(point)] = magnitude;
        f
    }

    /// Consistent nodal load of a uniform flux `q` through the boundary edges
    /// lying on `x = 1`.
    pub fn right_edge_flux(mesh: &Mesh, q: f64) -> DVector<f64> {
        let on_edge = |n: usize| (mesh.nodes[n][0] - 1.0).abs() <= 1e-12;
        let mut f = DVector::zeros(mesh.n_nodes());
        for tri in &mesh.elements {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                if on_edge(a) && on_edge(b) {
                    let len = (mesh.nodes[a][1] - mesh.nodes[b][1]).abs();
                    f[a] += 0.5 * q * len;
                    f[b] += 0.5 * q * len;
                }
            }
        }
        f
    }

    fn check_inputs(&self, design: &DVector<f64>, m: &DVector<f64>) -> Result<()> {
        if design.len() != self.mesh.n_elements() {
            return Err(Error::DimensionMismatch {
                context: "design densities",
                expected: self.mesh.n_elements(),
                actual: design.len(),
            });
        }
        if let Some(e) = design.iter().position(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument(format!("design density at element {e} must be positive")));
        }
        if m.len() != self.kl.dim() {
            return Err(Error::DimensionMismatch { context: "KL coefficients", expected: self.kl.dim(), actual: m.len() });
        }
        Ok(())
    }

    fn moduli(&self, m: &DVector<f64>) -> Result<Vec<f64>> {
        (0..self.mesh.n_elements()).map(|e| self.kl.modulus_field(m, e)).collect()
    }

    fn design_factor(&self, design: &DVector<f64>) -> Vec<f64> {
        design.iter().map(|r| r.powf(self.simp_exponent)).collect()
    }

    fn scatter_reduced(&self, k: &mut DMatrix<f64>, e: usize, scale: f64) {
        let tri = self.mesh.elements[e];
        let ke = &self.element_stiffness[e];
        for a in 0..3 {
            let Some(ra) = self.free_index[tri[a]] else { continue };
            for b in 0..3 {
                if let Some(rb) = self.free_index[tri[b]] {
                    k[(ra, rb)] += scale * ke[(a, b)];
                }
            }
        }
    }

    /// Full `n_nodes × n_nodes` matrix `Σ_e K_e ρ_e^p E(c_e, m)` before
    /// constraint elimination.
    pub fn assemble_full(&self, design: &DVector<f64>, m: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_inputs(design, m)?;
        let moduli = self.moduli(m)?;
        let rho = self.design_factor(design);
        let n = self.mesh.n_nodes();
        let mut k = DMatrix::zeros(n, n);
        for (e, tri) in self.mesh.elements.iter().enumerate() {
            let ke = &self.element_stiffness[e] * (rho[e] * moduli[e]);
            for a in 0..3 {
                for b in 0..3 {
                    k[(tri[a], tri[b])] += ke[(a, b)];
                }
            }
        }
        Ok(k)
    }

    /// Stiffness restricted to the free nodes.
    pub fn assemble(&self, design: &DVector<f64>, m: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_inputs(design, m)?;
        let moduli = self.moduli(m)?;
        let rho = self.design_factor(design);
        Ok(self.assemble_with(&moduli, &rho))
    }

    fn assemble_with(&self, moduli: &[f64], rho: &[f64]) -> DMatrix<f64> {
        let nf = self.free.len();
        let mut k = DMatrix::zeros(nf, nf);
        for e in 0..self.mesh.n_elements() {
            self.scatter_reduced(&mut k, e, rho[e] * moduli[e]);
        }
        k
    }

    fn factor_and_solve(&self, design: &DVector<f64>, m: &DVector<f64>) -> Result<Solution> {
        self.check_inputs(design, m)?;
        let moduli = self.moduli(m)?;
        let design_factor = self.design_factor(design);
        let k = self.assemble_with(&moduli, &design_factor);
        let chol = linalg::cholesky(k, "finite-element stiffness")?;
        let f_free = DVector::from_iterator(self.free.len(), self.free.iter().map(|&n| self.load[n]));
        let u_free = chol.solve(&f_free);
        Ok(Solution { chol, u: self.expand(&u_free), moduli, design_factor })
    }

    fn expand(&self, reduced: &DVector<f64>) -> DVector<f64> {
        let mut full = DVector::zeros(self.mesh.n_nodes());
        for (r, &n) in self.free.iter().enumerate() {
            full[n] = reduced[r];
        }
        full
    }

    fn restrict(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&n| full[n]))
    }

    /// Nodal solution; fixed nodes are zero.
    pub fn solve(&self, design: &DVector<f64>, m: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.factor_and_solve(design, m)?.u)
    }

    /// `K_e u_e` for every element, reused by all sensitivity columns.
    fn element_forces(&self, u: &DVector<f64>) -> Vec<Vector3<f64>> {
        self.mesh
            .elements
            .iter()
            .zip(&self.element_stiffness)
            .map(|(tri, ke)| ke * Vector3::new(u[tri[0]], u[tri[1]], u[tri[2]]))
            .collect()
    }

    /// `∂E_e/∂m_i · ρ_e^p = √λ_i Ê_i(c_e) E_e ρ_e^p`.
    fn coefficient_derivative(&self, sol: &Solution, e: usize, i: usize) -> f64 {
        self.kl.sqrt_eigenvalues()[i] * self.kl.basis()[(e, i)] * sol.moduli[e] * sol.design_factor[e]
    }

    fn direct_jacobian(&self, sol: &Solution) -> DMatrix<f64> {
        let d = self.kl.dim();
        let forces = self.element_forces(&sol.u);
        let mut rhs = DMatrix::zeros(self.free.len(), d);
        for (e, tri) in self.mesh.elements.iter().enumerate() {
            for i in 0..d {
                let scale = self.coefficient_derivative(sol, e, i);
                if scale == 0.0 {
                    continue;
                }
                for a in 0..3 {
                    if let Some(r) = self.free_index[tri[a]] {
                        rhs[(r, i)] -= scale * forces[e][a];
                    }
                }
            }
        }
        let reduced = sol.chol.solve(&rhs);
        let mut jac = DMatrix::zeros(self.mesh.n_nodes(), d);
        for (r, &n) in self.free.iter().enumerate() {
            jac.row_mut(n).copy_from(&reduced.row(r));
        }
        jac
    }

    /// `∂u/∂m` by direct differentiation: column `i` is `−K⁻¹ (∂K/∂m_i) u`,
    /// all columns sharing one factorization.
    pub fn jacobian(&self, design: &DVector<f64>, m: &DVector<f64>) -> Result<DMatrix<f64>> {
        let sol = self.factor_and_solve(design, m)?;
        Ok(self.direct_jacobian(&sol))
    }

    /// `(∂u/∂m)ᵀ w` through one adjoint solve `K λ = w`:
    /// entry `i` is `−λᵀ (∂K/∂m_i) u`.
    pub fn adjoint_product(&self, design: &DVector<f64>, m: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        if w.len() != self.mesh.n_nodes() {
            return Err(Error::DimensionMismatch { context: "adjoint weights", expected: self.mesh.n_nodes(), actual: w.len() });
        }
        let sol = self.factor_and_solve(design, m)?;
        let lambda = self.expand(&sol.chol.solve(&self.restrict(w)));
        let forces = self.element_forces(&sol.u);
        let d = self.kl.dim();
        let mut grad = DVector::zeros(d);
        for (e, tri) in self.mesh.elements.iter().enumerate() {
            let le = Vector3::new(lambda[tri[0]], lambda[tri[1]], lambda[tri[2]]);
            let work = le.dot(&forces[e]);
            for i in 0..d {
                grad[i] -= self.coefficient_derivative(&sol, e, i) * work;
            }
        }
        Ok(grad)
    }
}

/// [`FemProblem`] behind an `Arc`, so one assembled problem can be shared by
/// every worker in a parallel inversion.
#[derive(Debug, Clone)]
pub struct FemModel {
    problem: Arc<FemProblem>,
}

impl FemModel {
    pub fn new(problem: FemProblem) -> Self {
        Self { problem: Arc::new(problem) }
    }

    pub fn problem(&self) -> &FemProblem {
        &self.problem
    }
}

impl ForwardModel for FemModel {
    fn input_dim(&self) -> usize {
        self.problem.mesh.n_elements()
    }

    fn latent_dim(&self) -> usize {
        self.problem.kl.dim()
    }

    fn output_dim(&self) -> usize {
        self.problem.mesh.n_nodes()
    }

    fn evaluate(&self, x: &DVector<f64>, m: &DVector<f64>) -> Result<DVector<f64>> {
        self.problem.solve(x, m)
    }

    fn jacobian(&self, x: &DVector<f64>, m: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.problem.jacobian(x, m)
    }

    fn evaluate_with_jacobian(&self, x: &DVector<f64>, m: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let sol = self.problem.factor_and_solve(x, m)?;
        let jac = self.problem.direct_jacobian(&sol);
        Ok((sol.u, jac))
    }

    fn jacobian_transpose_product(&self, x: &DVector<f64>, m: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.problem.adjoint_product(x, m, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_models::{finite_difference_jacobian, Circle};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn problem(nx: usize, d: usize, transform: bool, hole: bool) -> FemProblem {
        let mut mesh = Mesh::unit_square(nx, nx).unwrap();
        if hole {
            mesh = mesh.with_hole(&Circle { center: [0.5, 0.5], radius: 0.2 }).unwrap();
        }
        let kl = KlBasis::new(&mesh.centroids(), d, 1.0, transform).unwrap();
        let fixed = FemProblem::left_edge_nodes(&mesh, 1e-12);
        let load = FemProblem::right_edge_flux(&mesh, 1.0);
        FemProblem::new(mesh, fixed, load, Arc::new(kl)).unwrap()
    }

    fn max_abs(a: &DMatrix<f64>) -> f64 {
        a.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    #[test]
    fn patch_test_reproduces_linear_field() {
        // unit modulus, unit flux on x = 1, u = 0 on x = 0: exact solution u = x
        let p = problem(6, 3, false, false);
        let rho = DVector::from_element(p.mesh().n_elements(), 1.0);
        let u = p.solve(&rho, &DVector::zeros(3)).unwrap();
        for (n, node) in p.mesh().nodes.iter().enumerate() {
            assert!((u[n] - node[0]).abs() <= 1e-10, "node {n}: {} vs {}", u[n], node[0]);
        }
    }

    #[test]
    fn unit_field_assembly_matches_unit_modulus_sum() {
        let p = problem(3, 2, false, false);
        let rho = DVector::from_element(p.mesh().n_elements(), 1.0);
        let k = p.assemble_full(&rho, &DVector::zeros(2)).unwrap();
        let mut reference = DMatrix::zeros(p.mesh().n_nodes(), p.mesh().n_nodes());
        for e in 0..p.mesh().n_elements() {
            let tri = p.mesh().elements[e];
            let ke = p.mesh().element_stiffness(e);
            for a in 0..3 {
                for b in 0..3 {
                    reference[(tri[a], tri[b])] += ke[(a, b)];
                }
            }
        }
        assert_eq!(k, reference);
    }

    #[test]
    fn single_triangle_is_scaled_element_matrix() {
        let mesh = Mesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap();
        let kl = KlBasis::from_parts(vec![0.25], DMatrix::from_element(1, 1, 0.8), false).unwrap();
        let p = FemProblem::new(mesh, vec![0], DVector::zeros(3), Arc::new(kl)).unwrap();
        let m = DVector::from_element(1, 1.5);
        let k = p.assemble_full(&DVector::from_element(1, 1.0), &m).unwrap();
        let e = (0.5f64 * 0.8 * 1.5).exp();
        let hand = DMatrix::from_row_slice(3, 3, &[1.0, -0.5, -0.5, -0.5, 0.5, 0.0, -0.5, 0.0, 0.5]) * e;
        assert!(max_abs(&(k - hand)) <= 1e-14);
    }

    #[test]
    fn patch_assembly_is_symmetric_and_definite() {
        let p = problem(1, 4, true, false);
        assert_eq!(p.mesh().n_elements(), 2);
        let mut rng = crate::rng::seeded(1);
        let rho = DVector::from_fn(2, |_, _| rng.random_range(0.001..1.0));
        let m = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
        let k = p.assemble_full(&rho, &m).unwrap();
        assert_eq!(max_abs(&(&k - k.transpose())), 0.0);

        let p = problem(2, 4, true, false);
        let rho = DVector::from_fn(p.mesh().n_elements(), |_, _| rng.random_range(0.001..1.0));
        let k = p.assemble_full(&rho, &m).unwrap();
        assert_eq!(max_abs(&(&k - k.transpose())), 0.0);
        assert!(linalg::is_spd(&p.assemble(&rho, &m).unwrap()));
    }

    #[test]
    fn doubling_modulus_halves_solution() {
        let mesh = Mesh::unit_square(4, 4).unwrap();
        let n_ele = mesh.n_elements();
        let kl = KlBasis::from_parts(vec![1.0], DMatrix::from_element(n_ele, 1, 1.0), false).unwrap();
        let fixed = FemProblem::left_edge_nodes(&mesh, 1e-12);
        let load = FemProblem::point_load(&mesh, [1.0, 0.5], 1.0);
        let p = FemProblem::new(mesh, fixed, load, Arc::new(kl)).unwrap();
        let rho = DVector::from_element(n_ele, 1.0);
        let u1 = p.solve(&rho, &DVector::from_element(1, 0.0)).unwrap();
        let u2 = p.solve(&rho, &DVector::from_element(1, 2f64.ln())).unwrap();
        assert!((u1 - u2 * 2.0).amax() <= 1e-12);
    }

    #[test]
    fn energy_identity() {
        let p = problem(5, 4, true, true);
        let mut rng = crate::rng::seeded(7);
        let rho = DVector::from_fn(p.mesh().n_elements(), |_, _| rng.random_range(0.05..1.0));
        let m = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let u = p.solve(&rho, &m).unwrap();
        let k = p.assemble_full(&rho, &m).unwrap();
        let u_free = p.restrict(&u);
        let f_free = p.restrict(p.load());
        assert_relative_eq!(u.dot(&(&k * &u)), u_free.dot(&f_free), max_relative = 1e-12);
        for &n in p.dirichlet() {
            assert_eq!(u[n], 0.0);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = problem(8, 6, true, true);
        assert!(p.mesh().n_nodes() <= 100);
        let model = FemModel::new(p);
        let mut rng = crate::rng::seeded(21);
        let rho = DVector::from_fn(model.input_dim(), |_, _| rng.random_range(0.1..1.0));
        let m = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let jac = model.jacobian(&rho, &m).unwrap();
        let fd = finite_difference_jacobian(&model, &rho, &m, 1e-5).unwrap();
        for i in 0..6 {
            let err = (jac.column(i) - fd.column(i)).norm() / fd.column(i).norm();
            assert!(err <= 1e-4, "column {i}: {err}");
        }
    }

    #[test]
    fn uniform_mode_column_is_scaled_solution() {
        let mesh = Mesh::unit_square(5, 5).unwrap();
        let n_ele = mesh.n_elements();
        let (c, lambda) = (0.7, 0.36);
        let kl = KlBasis::from_parts(vec![lambda], DMatrix::from_element(n_ele, 1, c), false).unwrap();
        let fixed = FemProblem::left_edge_nodes(&mesh, 1e-12);
        let load = FemProblem::right_edge_flux(&mesh, 1.0);
        let model = FemModel::new(FemProblem::new(mesh, fixed, load, Arc::new(kl)).unwrap());
        let rho = DVector::from_element(n_ele, 0.6);
        let m = DVector::from_element(1, 0.4);
        let (u, jac) = model.evaluate_with_jacobian(&rho, &m).unwrap();
        let expected = &u * (-c * lambda.sqrt());
        assert!((jac.column(0) - &expected).amax() <= 1e-12);
        let fd = finite_difference_jacobian(&model, &rho, &m, 1e-5).unwrap();
        assert!((fd.column(0) - expected).amax() <= 1e-8);
    }

    #[test]
    fn zero_basis_column_gives_zero_jacobian_column() {
        let mesh = Mesh::unit_square(3, 3).unwrap();
        let n_ele = mesh.n_elements();
        let mut basis = DMatrix::from_fn(n_ele, 3, |e, i| ((e + 1) as f64 * 0.37 + i as f64).sin());
        basis.column_mut(1).fill(0.0);
        let kl = KlBasis::from_parts(vec![0.5, 0.2, 0.1], basis, false).unwrap();
        let fixed = FemProblem::left_edge_nodes(&mesh, 1e-12);
        let load = FemProblem::right_edge_flux(&mesh, 1.0);
        let p = FemProblem::new(mesh, fixed, load, Arc::new(kl)).unwrap();
        let jac = p.jacobian(&DVector::from_element(n_ele, 1.0), &DVector::from_element(3, 0.3)).unwrap();
        assert!(jac.column(1).iter().all(|&v| v == 0.0));
        assert!(jac.column(0).amax() > 0.0);
    }

    #[test]
    fn adjoint_product_equals_direct_transpose_product() {
        let p = problem(6, 5, true, true);
        assert!(p.mesh().n_nodes() <= 50, "{} nodes", p.mesh().n_nodes());
        let model = FemModel::new(p);
        let mut rng = crate::rng::seeded(5);
        let rho = DVector::from_fn(model.input_dim(), |_, _| rng.random_range(0.001..1.0));
        let m = DVector::from_fn(5, |_, _| rng.random_range(-1.5..1.5));
        let w = DVector::from_fn(model.output_dim(), |_, _| rng.random_range(-1.0..1.0));
        let adjoint = model.jacobian_transpose_product(&rho, &m, &w).unwrap();
        let direct = model.jacobian(&rho, &m).unwrap().transpose() * &w;
        assert!((adjoint - &direct).amax() <= 1e-10 * direct.amax().max(1.0));
    }

    #[test]
    fn modulus_overflow_names_element() {
        let mesh = Mesh::unit_square(1, 1).unwrap();
        let kl = KlBasis::from_parts(vec![1.0], DMatrix::from_column_slice(2, 1, &[0.0, 1.0]), false).unwrap();
        let p = FemProblem::new(mesh, vec![0], DVector::zeros(4), Arc::new(kl)).unwrap();
        let err = p.solve(&DVector::from_element(2, 1.0), &DVector::from_element(1, 701.0)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteModulus { element: 1, .. }));
    }

    #[test]
    fn design_length_is_checked() {
        let p = problem(2, 2, false, false);
        let err = p.solve(&DVector::from_element(3, 1.0), &DVector::zeros(2)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn simp_exponent_scales_coefficient() {
        let p = problem(3, 2, false, false).with_simp_exponent(3.0).unwrap();
        let n_ele = p.mesh().n_elements();
        let u_half = p.solve(&DVector::from_element(n_ele, 0.5), &DVector::zeros(2)).unwrap();
        let u_one = p.solve(&DVector::from_element(n_ele, 1.0), &DVector::zeros(2)).unwrap();
        assert!((u_half - u_one * 8.0).amax() <= 1e-10);
    }
}
