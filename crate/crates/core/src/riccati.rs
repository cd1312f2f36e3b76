//! Backward dynamic programming on the tree.
//!
//! For a multiplier `λ` and penalty `ρ ≥ 0` the unconstrained subproblem
//! `min_u L_ρ(u, λ)` has the value function
//! `V(node, x) = ½⟨P x, x⟩ + ⟨φ, x⟩ + c`. At the leaves
//! `P = G + ρMᵀM`, `φ = Mᵀλ − ρMᵀb` and `c = −⟨λ, b⟩ + ½ρ|b|²`.
//! At a non-leaf node, with `π_c` the conditional child probabilities and
//! `(T_c, S_c)` the edge maps of [`ProblemData::edge_maps`]:
//!
//! ```text
//! K = R·dt + Σ π_c S_cᵀ P_c S_c          L = Σ π_c S_cᵀ P_c T_c
//! P = Q·dt + Σ π_c T_cᵀ P_c T_c − Lᵀ K⁻¹ L
//! h = Σ π_c S_cᵀ φ_c                     (= dt·(Bᵀ E[φ_c] + Dᵀ ψ))
//! φ = Σ π_c T_cᵀ φ_c − Lᵀ K⁻¹ h
//! c = Σ π_c c_c − ½ hᵀ K⁻¹ h
//! u = −K⁻¹ (L x + h)
//! ```
//!
//! `ψ` is the martingale coefficient of `φ` across the edge,
//! `φ_c = E[φ_c | node] + ψ·ΔW_c`, stored on the child. On a binary tree
//! both siblings carry the same `ψ`. `K`, `L` and `h` are the `dt`-scaled
//! counterparts of the continuous-time `K`, `L` and `Bᵀφ + Dᵀψ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{self, ControlProcess, MatrixProcess, Multiplier, ProblemData, StateProcess, VectorProcess};
use crate::tree::{NodeProcess, ScenarioTree};

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub rho: f64,
    /// Value matrices on levels `0..=N`.
    pub p: MatrixProcess,
    /// Control Hessians `K` on levels `0..N`.
    pub k: MatrixProcess,
    /// Cross terms `L` on levels `0..N`.
    pub l: MatrixProcess,
    k_factor: NodeProcess<Cholesky<f64, Dyn>>,
    /// Smallest eigenvalue of `K` over all nodes.
    pub min_k_eigenvalue: f64,
    /// Largest spectral norm of the feedback gain `K⁻¹L` over all nodes.
    pub max_gain_norm: f64,
}

impl RiccatiSolution {
    /// Solves `K_node · y = rhs`.
    pub fn solve_k(&self, node: usize, rhs: &DVector<f64>) -> DVector<f64> {
        self.k_factor.get(node).solve(rhs)
    }
}

#[derive(Debug, Clone)]
pub struct AdjointPair {
    pub rho: f64,
    /// Affine part of the value function on levels `0..=N`.
    pub phi: VectorProcess,
    /// Martingale coefficient per child edge, levels `1..=N`.
    pub psi: VectorProcess,
    /// `Bᵀ E[φ_c] + Dᵀ ψ` at each non-leaf node.
    pub coupling: VectorProcess,
    /// Constant part of the value function on levels `0..=N`.
    pub constant: NodeProcess<f64>,
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(Error::InvalidConfig(format!("penalty must be finite and non-negative, got {rho}")));
    }
    Ok(())
}

/// `ρ`-perturbed Riccati recursion; `ρ = 0` gives the plain recursion.
pub fn riccati_backward(tree: &ScenarioTree, data: &ProblemData, rho: f64) -> Result<RiccatiSolution> {
    check_rho(rho)?;
    let n = data.state_dim;
    let m = data.control_dim;
    let steps = tree.steps();
    let dt = tree.dt();

    let mut p = NodeProcess::from_fn(tree, 0, steps, |_| DMatrix::zeros(n, n));
    for id in tree.leaves() {
        let mm = data.m.get(id);
        let pt = data.g.get(id) + mm.transpose() * mm * rho;
        *p.get_mut(id) = (&pt + pt.transpose()) * 0.5;
    }
    let mut k = NodeProcess::from_fn(tree, 0, steps - 1, |_| DMatrix::zeros(m, m));
    let mut l = NodeProcess::from_fn(tree, 0, steps - 1, |_| DMatrix::zeros(m, n));
    let mut factors: Vec<Option<Cholesky<f64, Dyn>>> = vec![None; tree.non_leaf_count()];
    let mut min_eig = f64::INFINITY;
    let mut max_gain = 0.0f64;

    for level in (0..steps).rev() {
        for id in tree.level(level) {
            let mut kk = data.r.get(id) * dt;
            let mut ll = DMatrix::zeros(m, n);
            let mut pp = data.q.get(id) * dt;
            for &c in &tree.node(id).children {
                let pi = tree.transition_prob(c);
                let (t, s) = data.edge_maps(tree, c);
                let pc = p.get(c);
                let st_p = s.transpose() * pc;
                kk += &st_p * &s * pi;
                ll += &st_p * &t * pi;
                pp += t.transpose() * pc * &t * pi;
            }
            kk = (&kk + kk.transpose()) * 0.5;
            let eig = SymmetricEigen::new(kk.clone()).eigenvalues.min();
            if !eig.is_finite() {
                return Err(Error::NonFinite(format!("K at node {id}")));
            }
            if eig <= 0.0 {
                return Err(Error::IndefiniteGain { node: id, min_eig: eig });
            }
            let chol = Cholesky::new(kk.clone()).ok_or(Error::IndefiniteGain { node: id, min_eig: eig })?;
            let gain = chol.solve(&ll);
            pp -= ll.transpose() * &gain;
            min_eig = min_eig.min(eig);
            max_gain = max_gain.max(gain.norm_spectral_or_frobenius());
            *p.get_mut(id) = (&pp + pp.transpose()) * 0.5;
            *k.get_mut(id) = kk;
            *l.get_mut(id) = ll;
            factors[id] = Some(chol);
        }
    }

    let factors: Vec<_> = factors.into_iter().map(|f| f.expect("every non-leaf node factored")).collect();
    Ok(RiccatiSolution {
        rho,
        p,
        k,
        l,
        k_factor: NodeProcess::from_values(tree, 0, steps - 1, factors)?,
        min_k_eigenvalue: min_eig,
        max_gain_norm: max_gain,
    })
}

trait SpectralNorm {
    fn norm_spectral_or_frobenius(&self) -> f64;
}

impl SpectralNorm for DMatrix<f64> {
    fn norm_spectral_or_frobenius(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.clone().svd(false, false).singular_values.max()
    }
}

/// Affine backward recursion for `(φ, ψ)` and the value-function constant.
pub fn adjoint_backward(tree: &ScenarioTree, data: &ProblemData, ric: &RiccatiSolution, lambda: &Multiplier, rho: f64) -> Result<AdjointPair> {
    check_rho(rho)?;
    if (ric.rho - rho).abs() > 1e-15 * ric.rho.abs().max(1.0) {
        return Err(Error::PenaltyMismatch { ric: ric.rho, call: rho });
    }
    data.check_multiplier(tree, lambda)?;
    let n = data.state_dim;
    let m = data.control_dim;
    let steps = tree.steps();
    let dt = tree.dt();

    let mut phi = NodeProcess::zeros(tree, 0, steps, n);
    let mut constant = NodeProcess::from_fn(tree, 0, steps, |_| 0.0);
    for id in tree.leaves() {
        let mt = data.m.get(id).transpose();
        let (lam, b) = (lambda.get(id), data.target.get(id));
        *phi.get_mut(id) = &mt * lam - &mt * b * rho;
        *constant.get_mut(id) = -lam.dot(b) + 0.5 * rho * b.norm_squared();
    }
    let mut psi = NodeProcess::zeros(tree, 1, steps, n);
    let mut coupling = NodeProcess::zeros(tree, 0, steps - 1, m);

    for level in (0..steps).rev() {
        for id in tree.level(level) {
            let mut h = DVector::zeros(m);
            let mut transported = DVector::zeros(n);
            let mut mean_phi = DVector::zeros(n);
            let mut mean_c = 0.0;
            for &c in &tree.node(id).children {
                let pi = tree.transition_prob(c);
                let (t, s) = data.edge_maps(tree, c);
                let pc = phi.get(c);
                h += s.transpose() * pc * pi;
                transported += t.transpose() * pc * pi;
                mean_phi += pc * pi;
                mean_c += constant.get(c) * pi;
            }
            for &c in &tree.node(id).children {
                *psi.get_mut(c) = (phi.get(c) - &mean_phi) / tree.node(c).increment;
            }
            let kinv_h = ric.solve_k(id, &h);
            *phi.get_mut(id) = transported - ric.l.get(id).transpose() * &kinv_h;
            *constant.get_mut(id) = mean_c - 0.5 * h.dot(&kinv_h);
            *coupling.get_mut(id) = h / dt;
        }
    }
    Ok(AdjointPair {
        rho,
        phi,
        psi,
        coupling,
        constant,
    })
}

/// `½⟨P x, x⟩ + ⟨φ, x⟩ + c` at `node`.
pub fn value_function(ric: &RiccatiSolution, adj: &AdjointPair, node: usize, x: &DVector<f64>) -> f64 {
    0.5 * (ric.p.get(node) * x).dot(x) + adj.phi.get(node).dot(x) + adj.constant.get(node)
}

/// Applies the affine feedback `u = −K⁻¹(L X + dt·(Bᵀφ + Dᵀψ))` forward from `data.x0`.
pub fn feedback_control(tree: &ScenarioTree, data: &ProblemData, ric: &RiccatiSolution, adj: &AdjointPair) -> Result<(ControlProcess, StateProcess)> {
    let steps = tree.steps();
    let dt = tree.dt();
    let mut u = NodeProcess::zeros(tree, 0, steps - 1, data.control_dim);
    let mut x = NodeProcess::zeros(tree, 0, steps, data.state_dim);
    *x.get_mut(0) = data.x0.clone();
    for id in tree.non_leaves() {
        let xi = x.get(id).clone();
        let rhs = ric.l.get(id) * &xi + adj.coupling.get(id) * dt;
        let ui = -ric.solve_k(id, &rhs);
        for &c in &tree.node(id).children {
            let (t, s) = data.edge_maps(tree, c);
            *x.get_mut(c) = &t * &xi + &s * &ui;
        }
        *u.get_mut(id) = ui;
    }
    if !u.is_finite() || !x.is_finite() {
        return Err(Error::NonFinite("feedback control".into()));
    }
    Ok((u, x))
}

/// Minimizer of `u ↦ L_ρ(u, λ)` (of `L(u, λ)` when `ρ = 0`).
pub fn solve_subproblem(tree: &ScenarioTree, data: &ProblemData, lambda: &Multiplier, rho: f64) -> Result<(ControlProcess, StateProcess)> {
    let ric = riccati_backward(tree, data, rho)?;
    solve_subproblem_with(tree, data, &ric, lambda)
}

/// [`solve_subproblem`] reusing a precomputed Riccati solution.
pub fn solve_subproblem_with(tree: &ScenarioTree, data: &ProblemData, ric: &RiccatiSolution, lambda: &Multiplier) -> Result<(ControlProcess, StateProcess)> {
    let adj = adjoint_backward(tree, data, ric, lambda, ric.rho)?;
    feedback_control(tree, data, ric, &adj)
}

/// Dual functional `d(λ) = inf_u L(u, λ)` in closed form.
pub fn dual_value(tree: &ScenarioTree, data: &ProblemData, lambda: &Multiplier) -> Result<f64> {
    let ric = riccati_backward(tree, data, 0.0)?;
    dual_value_with(tree, data, &ric, lambda)
}

/// [`dual_value`] with a precomputed `ρ = 0` Riccati solution.
///
/// Evaluates
/// `½⟨P(0)x,x⟩ + ⟨φ(0),x⟩ − E⟨b,λ⟩ − ½ Σ p·dt·|(K/dt)^{-1/2}(Bᵀφ + Dᵀψ)|²`
/// and cross-checks it against `L(u_λ, λ)` at the feedback minimizer.
pub fn dual_value_with(tree: &ScenarioTree, data: &ProblemData, ric: &RiccatiSolution, lambda: &Multiplier) -> Result<f64> {
    if ric.rho != 0.0 {
        return Err(Error::PenaltyMismatch { ric: ric.rho, call: 0.0 });
    }
    let adj = adjoint_backward(tree, data, ric, lambda, 0.0)?;
    let x0 = &data.x0;
    let dt = tree.dt();
    let b_lambda: f64 = tree.leaves().map(|id| tree.node(id).prob * data.target.get(id).dot(lambda.get(id))).sum();
    let energy: f64 = tree
        .non_leaves()
        .map(|id| {
            let w = adj.coupling.get(id);
            // (K/dt)^{-1} w = dt · K^{-1} w
            tree.node(id).prob * dt * w.dot(&(ric.solve_k(id, w) * dt))
        })
        .sum();
    let closed = 0.5 * (ric.p.get(0) * x0).dot(x0) + adj.phi.get(0).dot(x0) - b_lambda - 0.5 * energy;

    let (u, _) = feedback_control(tree, data, ric, &adj)?;
    let direct = model::lagrangian(tree, data, &u, lambda)?;
    if !closed.is_finite() || !direct.is_finite() {
        return Err(Error::NonFinite("dual value".into()));
    }
    if (closed - direct).abs() > 1e-10 * (1.0 + direct.abs()) {
        return Err(Error::Consistency(format!("dual value closed form {closed:e} disagrees with L(u_λ, λ) = {direct:e}")));
    }
    Ok(closed)
}
