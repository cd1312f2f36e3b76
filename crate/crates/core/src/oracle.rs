//! Dense ground truth for the tree problem.
//!
//! Coordinate convention: controls are flattened in node-id order into
//! `u ∈ ℝ^{m·#non-leaf}` and leaf vectors into `ℝ^{ℓ·#leaves}`. Flattened
//! vectors carry no weights; the probability weights live in the diagonal
//! matrices `W_u = diag(p·dt)` and `W_λ = diag(p)`.
//!
//! * `J(u) = ½ uᵀ H u + gᵀ u + c0` (weights folded into `H`, `g`, `c0`).
//! * `Γ u = M X^{0,u}(T)` per leaf, `β = b − M X^{x,0}(T)`, so feasibility is `Γ u = β`.
//! * `L(u, λ) = J(u) + λᵀ W_λ (Γ u − β)`; with `μ = W_λ λ` the KKT system is
//!   the symmetric saddle system `[H Γᵀ; Γ 0] (u, μ) = (−g, β)`.
//! * The weighted adjoint is `Γ* = W_u⁻¹ Γᵀ W_λ`, and `Γ* λ` equals the
//!   adjoint coupling `Bᵀφ_λ + Dᵀψ_λ` of the zero-Riccati recursion.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{self, ControlProcess, Multiplier, ProblemData};
use crate::riccati;
use crate::tree::{NodeProcess, ScenarioTree};

/// Largest number of flattened control variables the dense oracle accepts.
pub const MAX_DENSE_CONTROLS: usize = 200_000;

/// Default threshold on `σ_min` for declaring the terminal map surjective.
pub const SURJECTIVITY_TOL: f64 = 1e-10;

pub const CONVENTION: &str = "controls flattened in node-id order; leaf vectors flattened in leaf order; \
weights W_u = diag(p*dt), W_lambda = diag(p) kept outside Gamma; lambda = W_lambda^{-1} mu";

#[derive(Debug, Clone)]
pub struct DenseProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c0: f64,
    pub gamma: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub control_weights: DVector<f64>,
    pub leaf_weights: DVector<f64>,
}

impl DenseProblem {
    pub fn cost(&self, u: &DVector<f64>) -> f64 {
        0.5 * (&self.h * u).dot(u) + self.g.dot(u) + self.c0
    }

    /// `Γ u − β`, equal to `M X^{x,u}(T) − b` per leaf.
    pub fn residual(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.gamma * u - &self.beta
    }

    /// Weighted adjoint `Γ* λ = W_u⁻¹ Γᵀ W_λ λ`.
    pub fn adjoint(&self, lambda: &DVector<f64>) -> DVector<f64> {
        (self.gamma.transpose() * lambda.component_mul(&self.leaf_weights)).component_div(&self.control_weights)
    }

    pub fn control_norm_sq(&self, u: &DVector<f64>) -> f64 {
        u.component_mul(u).dot(&self.control_weights)
    }

    pub fn leaf_norm_sq(&self, x: &DVector<f64>) -> f64 {
        x.component_mul(x).dot(&self.leaf_weights)
    }

    /// Minimum-`W_u`-norm `v` with `Γ v = r`; `None` if `Γ W_u⁻¹ Γᵀ` is singular.
    pub fn min_norm_solution(&self, r: &DVector<f64>) -> Option<DVector<f64>> {
        let gram = self.weighted_gram();
        let chol = Cholesky::new(gram)?;
        let mu = chol.solve(r);
        Some((self.gamma.transpose() * mu).component_div(&self.control_weights))
    }

    /// `Γ W_u⁻¹ Γᵀ`.
    pub fn weighted_gram(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.gamma.nrows(), self.gamma.ncols(), |i, j| self.gamma[(i, j)] / self.control_weights[j]);
        let gram = &scaled * self.gamma.transpose();
        (&gram + gram.transpose()) * 0.5
    }
}

/// Flattens the tree problem into a dense equality-constrained QP.
pub fn assemble_dense(tree: &ScenarioTree, data: &ProblemData) -> Result<DenseProblem> {
    let cols = data.control_dim * tree.non_leaf_count();
    if cols > MAX_DENSE_CONTROLS {
        return Err(Error::SizeGuard(cols, MAX_DENSE_CONTROLS));
    }
    let phi = model::state_response(tree, data);
    let h = model::control_hessian_from_response(tree, data, &phi);

    let zero = data.zero_control(tree);
    let free = model::simulate_forward(tree, data, &data.x0, &zero)?;
    let c0 = model::cost(tree, data, &free, &zero)?;
    let dt = tree.dt();
    let mut g = DVector::zeros(cols);
    for id in tree.non_leaves() {
        g += phi[id].transpose() * (data.q.get(id) * free.get(id)) * (tree.node(id).prob * dt);
    }
    for id in tree.leaves() {
        g += phi[id].transpose() * (data.g.get(id) * free.get(id)) * tree.node(id).prob;
    }

    let ell = data.constraint_dim;
    let mut gamma = DMatrix::zeros(ell * tree.leaf_count(), cols);
    let mut beta = DVector::zeros(ell * tree.leaf_count());
    for (i, id) in tree.leaves().enumerate() {
        let mm = data.m.get(id);
        gamma.view_mut((i * ell, 0), (ell, cols)).copy_from(&(mm * &phi[id]));
        beta.rows_mut(i * ell, ell).copy_from(&(data.target.get(id) - mm * free.get(id)));
    }

    Ok(DenseProblem {
        h,
        g,
        c0,
        gamma,
        beta,
        control_weights: model::control_weights(tree, data.control_dim),
        leaf_weights: model::leaf_weights(tree, ell),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SurjectivityCertificate {
    /// Smallest singular value of `W_λ^{1/2} Γ W_u^{-1/2}` counted over its rows.
    pub sigma_min: f64,
    /// Sharp constant of the observability inequality `‖Γ*λ‖² ≥ ĉ·E|λ|²`.
    pub c_hat: f64,
    pub surjective: bool,
    /// `(rows, cols)` of `Γ`.
    pub dims: (usize, usize),
    /// Multiplier attaining `c_hat`, normalized to `E|λ|² = 1` (flattened).
    #[serde(skip)]
    pub worst_direction: DVector<f64>,
}

/// Smallest singular value of the weighted constraint map and the resulting verdict.
pub fn surjectivity_certificate(tree: &ScenarioTree, data: &ProblemData) -> Result<SurjectivityCertificate> {
    let dense = assemble_dense(tree, data)?;
    Ok(certificate_from_dense(&dense, SURJECTIVITY_TOL))
}

pub fn certificate_from_dense(dense: &DenseProblem, tol: f64) -> SurjectivityCertificate {
    let (rows, cols) = dense.gamma.shape();
    let width = rows.max(cols);
    let mut scaled = DMatrix::zeros(rows, width);
    for i in 0..rows {
        let wl = dense.leaf_weights[i].sqrt();
        for j in 0..cols {
            scaled[(i, j)] = wl * dense.gamma[(i, j)] / dense.control_weights[j].sqrt();
        }
    }
    // Padding with zero columns keeps a full left singular basis when rows > cols.
    let svd = scaled.svd(true, false);
    let sv = &svd.singular_values;
    let (imin, sigma_min) = sv.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let u = svd.u.expect("left singular vectors requested");
    let nu = u.column(imin).into_owned();
    let worst_direction = nu.component_div(&dense.leaf_weights.map(f64::sqrt));
    let sigma_min = if rows > cols { 0.0 } else { sigma_min };
    SurjectivityCertificate {
        sigma_min,
        c_hat: sigma_min * sigma_min,
        surjective: sigma_min > tol && rows <= cols,
        dims: (rows, cols),
        worst_direction,
    }
}

#[derive(Debug, Clone)]
pub struct KktSolution {
    pub control: ControlProcess,
    pub multiplier: Multiplier,
    /// Residual norm of the saddle system.
    pub kkt_residual: f64,
    /// Norm of the right-hand side `(−g, β)`.
    pub rhs_norm: f64,
}

/// Solves the saddle system by the range-space method: `H` and the Schur
/// complement `Γ H⁻¹ Γᵀ` are both factored by Cholesky.
pub fn kkt_solve(tree: &ScenarioTree, data: &ProblemData) -> Result<KktSolution> {
    let dense = assemble_dense(tree, data)?;
    kkt_solve_dense(tree, data, &dense)
}

pub fn kkt_solve_dense(tree: &ScenarioTree, data: &ProblemData, dense: &DenseProblem) -> Result<KktSolution> {
    let (u, mu) = solve_saddle(dense)?;
    let rhs_norm = (dense.g.norm_squared() + dense.beta.norm_squared()).sqrt();
    let r1 = &dense.h * &u + dense.gamma.transpose() * &mu + &dense.g;
    let r2 = &dense.gamma * &u - &dense.beta;
    let kkt_residual = (r1.norm_squared() + r2.norm_squared()).sqrt();
    let lambda = mu.component_div(&dense.leaf_weights);
    let steps = tree.steps();
    Ok(KktSolution {
        control: NodeProcess::unflatten(tree, 0, steps - 1, data.control_dim, &u)?,
        multiplier: NodeProcess::unflatten(tree, steps, steps, data.constraint_dim, &lambda)?,
        kkt_residual,
        rhs_norm,
    })
}

fn solve_saddle(dense: &DenseProblem) -> Result<(DVector<f64>, DVector<f64>)> {
    let h_chol: Cholesky<f64, Dyn> = Cholesky::new(dense.h.clone()).ok_or_else(|| Error::NotUniformlyConvex(smallest_eigenvalue(&dense.h)))?;
    if dense.gamma.iter().all(|&v| v == 0.0) && dense.beta.iter().all(|&v| v == 0.0) {
        // Vacuous constraint: the unconstrained minimizer with a zero multiplier.
        return Ok((-h_chol.solve(&dense.g), DVector::zeros(dense.gamma.nrows())));
    }
    let hinv_gt = h_chol.solve(&dense.gamma.transpose());
    let schur = &dense.gamma * &hinv_gt;
    let schur = (&schur + schur.transpose()) * 0.5;
    let hinv_g = h_chol.solve(&dense.g);
    let s_chol = Cholesky::new(schur).ok_or_else(|| {
        let cert = certificate_from_dense(dense, SURJECTIVITY_TOL);
        Error::NotSurjective(cert.sigma_min)
    })?;
    // Γ u = β with u = −H⁻¹(g + Γᵀ μ)  ⇒  (Γ H⁻¹ Γᵀ) μ = −β − Γ H⁻¹ g
    let rhs = -(&dense.beta + &dense.gamma * &hinv_g);
    let mu = s_chol.solve(&rhs);
    let u = -(hinv_g + hinv_gt * &mu);
    Ok((u, mu))
}

fn smallest_eigenvalue(h: &DMatrix<f64>) -> f64 {
    nalgebra::SymmetricEigen::new(h.clone()).eigenvalues.min()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DualityGap {
    /// `J(u) − d(λ)`.
    pub gap: f64,
    pub primal: f64,
    pub dual: f64,
    /// `sqrt(E|M X(T) − b|²)` of `u`.
    pub residual_norm: f64,
    pub feasible: bool,
}

/// Feasibility threshold on the residual norm used by [`duality_gap`].
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// `J(u) − d(λ)`; non-negative whenever `u` is feasible.
pub fn duality_gap(tree: &ScenarioTree, data: &ProblemData, u: &ControlProcess, lambda: &Multiplier) -> Result<DualityGap> {
    let x = model::simulate_forward(tree, data, &data.x0, u)?;
    let primal = model::cost(tree, data, &x, u)?;
    let res = model::constraint_residual(tree, data, &x)?;
    let residual_norm = model::leaf_norm(tree, &res);
    let dual = riccati::dual_value(tree, data, lambda)?;
    Ok(DualityGap {
        gap: primal - dual,
        primal,
        dual,
        residual_norm,
        feasible: residual_norm <= FEASIBILITY_TOL * (1.0 + model::leaf_norm(tree, &data.target)),
    })
}

#[derive(Debug, Clone)]
pub struct MinNormSolution {
    pub control: ControlProcess,
    pub multiplier: Multiplier,
}

/// Minimum-energy control steering `M X^{x0,u}(T)` onto `target`.
///
/// Solves the dual normal equations `(Γ W_u⁻¹ Γᵀ) μ = −(target − M X^{x0,0}(T))`,
/// sets `λ̄ = W_λ⁻¹ μ`, and builds `ū = −(Bᵀφ_λ̄ + Dᵀψ_λ̄)` through the
/// zero-Riccati adjoint recursion of the energy problem.
pub fn min_norm_control(tree: &ScenarioTree, data: &ProblemData, x0: &DVector<f64>, target: &Multiplier) -> Result<MinNormSolution> {
    data.check_multiplier(tree, target)?;
    let mut np = data.norm_optimal_view();
    np.x0 = x0.clone();
    np.target = target.clone();
    let dense = assemble_dense(tree, &np)?;
    let cert = certificate_from_dense(&dense, SURJECTIVITY_TOL);
    if !cert.surjective {
        return Err(Error::NotSurjective(cert.sigma_min));
    }
    let chol = Cholesky::new(dense.weighted_gram()).ok_or(Error::NotSurjective(cert.sigma_min))?;
    let mu = chol.solve(&(-&dense.beta));
    let lambda_flat = mu.component_div(&dense.leaf_weights);
    let steps = tree.steps();
    let lambda = NodeProcess::unflatten(tree, steps, steps, data.constraint_dim, &lambda_flat)?;

    let ric = riccati::riccati_backward(tree, &np, 0.0)?;
    let adj = riccati::adjoint_backward(tree, &np, &ric, &lambda, 0.0)?;
    let (control, _) = riccati::feedback_control(tree, &np, &ric, &adj)?;
    Ok(MinNormSolution { control, multiplier: lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn instance(tree: &ScenarioTree) -> ProblemData {
        let a = DMatrix::from_row_slice(2, 2, &[0.1, 0.3, -0.2, 0.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.7]);
        let c = DMatrix::from_row_slice(2, 2, &[0.0, 0.2, 0.1, -0.1]);
        let d = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -0.3, 0.2]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 0.5]);
        let g = DMatrix::from_row_slice(2, 2, &[0.4, 0.0, 0.0, 0.2]);
        ProblemData::constant(tree, a, b, c, d, q, DMatrix::identity(2, 2), g, DMatrix::from_row_slice(1, 2, &[1.0, 0.5]), DVector::from_element(1, 0.3), DVector::from_vec(vec![0.5, -1.0])).unwrap()
    }

    #[test]
    fn vacuous_constraint_has_zero_gamma() {
        let tree = ScenarioTree::build(1.0, 3, 2).unwrap();
        let mut data = instance(&tree);
        data.m = data.m.map(|_, m| m * 0.0);
        let dense = assemble_dense(&tree, &data).unwrap();
        assert_eq!(dense.gamma.amax(), 0.0);
        let cert = certificate_from_dense(&dense, SURJECTIVITY_TOL);
        assert_eq!(cert.sigma_min, 0.0);
        assert!(!cert.surjective);
    }

    #[test]
    fn vacuous_constraint_gives_unconstrained_minimizer() {
        let tree = ScenarioTree::build(1.0, 3, 2).unwrap();
        let mut data = instance(&tree);
        data.m = data.m.map(|_, m| m * 0.0);
        data.target = data.target.map(|_, b| b * 0.0);
        let dense = assemble_dense(&tree, &data).unwrap();
        let kkt = kkt_solve_dense(&tree, &data, &dense).unwrap();
        assert!(kkt.multiplier.values().iter().all(|l| l.iter().all(|&v| v == 0.0)));
        let u = kkt.control.flatten();
        let grad = &dense.h * &u + &dense.g;
        assert!(grad.amax() < 1e-12);
    }

    #[test]
    fn energy_hessian_is_weight_matrix() {
        let tree = ScenarioTree::build(1.0, 3, 2).unwrap();
        let data = instance(&tree).norm_optimal_view();
        let dense = assemble_dense(&tree, &data).unwrap();
        let w = DMatrix::from_diagonal(&dense.control_weights);
        assert_abs_diff_eq!(dense.h, w, epsilon = 1e-15);
    }

    #[test]
    fn no_control_authority_is_not_surjective() {
        let tree = ScenarioTree::build(1.0, 3, 2).unwrap();
        let mut data = instance(&tree);
        data.b = data.b.map(|_, b| b * 0.0);
        data.d = data.d.map(|_, d| d * 0.0);
        let cert = surjectivity_certificate(&tree, &data).unwrap();
        assert_eq!(cert.sigma_min, 0.0);
        assert!(!cert.surjective);
    }

    #[test]
    fn size_guard_refuses_huge_trees() {
        let tree = ScenarioTree::build(1.0, 17, 2).unwrap();
        let z = DMatrix::zeros(1, 1);
        let one = DMatrix::identity(1, 1);
        let data = ProblemData::constant(&tree, z.clone(), DMatrix::identity(1, 2), z.clone(), DMatrix::zeros(1, 2), z.clone(), DMatrix::identity(2, 2), z, one, DVector::zeros(1), DVector::zeros(1)).unwrap();
        assert!(matches!(assemble_dense(&tree, &data), Err(Error::SizeGuard(_, MAX_DENSE_CONTROLS))));
    }

    #[test]
    fn kkt_solution_is_feasible_and_stationary() {
        let tree = ScenarioTree::build(1.0, 3, 2).unwrap();
        let data = instance(&tree);
        let sol = kkt_solve(&tree, &data).unwrap();
        assert!(sol.kkt_residual <= 1e-10 * (1.0 + sol.rhs_norm));
        let x = model::simulate_forward(&tree, &data, &data.x0, &sol.control).unwrap();
        let res = model::constraint_residual(&tree, &data, &x).unwrap();
        assert!(res.values().iter().all(|r| r.amax() < 1e-9));
    }

    #[test]
    fn kkt_reports_non_surjective_instances() {
        let tree = ScenarioTree::build(1.0, 3, 2).unwrap();
        let mut data = instance(&tree);
        data.d = data.d.map(|_, d| d * 0.0);
        data.b = data.b.map(|_, b| b * 0.0);
        assert!(matches!(kkt_solve(&tree, &data), Err(Error::NotSurjective(_))));
    }

    #[test]
    fn min_norm_control_at_free_target_is_zero() {
        let tree = ScenarioTree::build(1.0, 3, 2).unwrap();
        let data = instance(&tree);
        let zero = data.zero_control(&tree);
        let x = model::simulate_forward(&tree, &data, &data.x0, &zero).unwrap();
        let target = NodeProcess::from_fn(&tree, 3, 3, |id| data.m.get(id) * x.get(id));
        let sol = min_norm_control(&tree, &data, &data.x0, &target).unwrap();
        assert!(sol.control.values().iter().all(|v| v.amax() < 1e-12));
        assert!(sol.multiplier.values().iter().all(|v| v.amax() < 1e-12));
    }
}
