//! Problem data, forward dynamics and the cost/Lagrangian functionals of the
//! tree problem.
//!
//! The state follows the Euler–Maruyama recursion
//! `X_c = X + (A X + B u)·dt + (C X + D u)·ΔW_c`, written per edge as
//! `X_c = T_c X + S_c u` with `T_c = I + A·dt + C·ΔW_c`, `S_c = B·dt + D·ΔW_c`.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{dim_err, Error, Result};
use crate::tree::{NodeProcess, ScenarioTree};

pub type MatrixProcess = NodeProcess<DMatrix<f64>>;
pub type VectorProcess = NodeProcess<DVector<f64>>;
/// State on levels `0..=N`.
pub type StateProcess = VectorProcess;
/// Control on levels `0..N`.
pub type ControlProcess = VectorProcess;
/// Terminal multiplier, one `ℝ^ℓ` value per leaf.
pub type Multiplier = VectorProcess;

/// Coefficients of the controlled system, the quadratic cost and the
/// terminal constraint `M X(T) = b`, all indexed by tree node.
#[derive(Debug, Clone)]
pub struct ProblemData {
    pub state_dim: usize,
    pub control_dim: usize,
    pub constraint_dim: usize,
    pub a: MatrixProcess,
    pub b: MatrixProcess,
    pub c: MatrixProcess,
    pub d: MatrixProcess,
    pub q: MatrixProcess,
    pub r: MatrixProcess,
    pub g: MatrixProcess,
    pub m: MatrixProcess,
    /// Terminal target `b`, per leaf.
    pub target: VectorProcess,
    pub x0: DVector<f64>,
}

const ASYMMETRY_WARN: f64 = 1e-9;

impl ProblemData {
    /// Builds an instance from node processes, checking shapes and
    /// symmetrizing the weights.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tree: &ScenarioTree,
        a: MatrixProcess,
        b: MatrixProcess,
        c: MatrixProcess,
        d: MatrixProcess,
        q: MatrixProcess,
        r: MatrixProcess,
        g: MatrixProcess,
        m: MatrixProcess,
        target: VectorProcess,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let n = x0.len();
        let steps = tree.steps();
        let first = b.values().first().ok_or_else(|| Error::InvalidData("empty B".into()))?;
        let mdim = first.ncols();
        let ell = m.values().first().map_or(0, |mm| mm.nrows());
        if n == 0 || mdim == 0 || ell == 0 {
            return Err(Error::InvalidData(format!("dimensions must be positive: n={n}, m={mdim}, l={ell}")));
        }
        if ell > n {
            return Err(Error::InvalidData(format!("constraint dimension {ell} exceeds state dimension {n}")));
        }

        let running = [("A", &a, n, n), ("B", &b, n, mdim), ("C", &c, n, n), ("D", &d, n, mdim), ("Q", &q, n, n), ("R", &r, mdim, mdim)];
        for (name, p, rows, cols) in running {
            check_band(name, p, 0, steps - 1)?;
            check_shapes(name, p, rows, cols)?;
        }
        check_band("G", &g, steps, steps)?;
        check_shapes("G", &g, n, n)?;
        check_band("M", &m, steps, steps)?;
        check_shapes("M", &m, ell, n)?;
        if target.first_level() != steps || target.last_level() != steps {
            return Err(Error::InvalidData("target b must live on the leaves".into()));
        }
        for (_, v) in target.iter() {
            if v.len() != ell {
                return Err(dim_err("target b", ell, v.len()));
            }
        }

        let all = [&a, &b, &c, &d, &q, &r, &g, &m];
        if all.iter().any(|p| p.values().iter().any(|x| x.iter().any(|v| !v.is_finite())))
            || target.values().iter().any(|v| v.iter().any(|x| !x.is_finite()))
            || x0.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("problem data".into()));
        }

        Ok(Self {
            state_dim: n,
            control_dim: mdim,
            constraint_dim: ell,
            q: symmetrize_process("Q", q),
            r: symmetrize_process("R", r),
            g: symmetrize_process("G", g),
            a,
            b,
            c,
            d,
            m,
            target,
            x0,
        })
    }

    /// Instance with deterministic, time-invariant coefficients and constant terminal data.
    #[allow(clippy::too_many_arguments)]
    pub fn constant(
        tree: &ScenarioTree,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        g: DMatrix<f64>,
        m: DMatrix<f64>,
        target: DVector<f64>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let last = tree.steps() - 1;
        let leaf = tree.steps();
        let run = |x: DMatrix<f64>| NodeProcess::from_fn(tree, 0, last, |_| x.clone());
        let term = |x: DMatrix<f64>| NodeProcess::from_fn(tree, leaf, leaf, |_| x.clone());
        Self::new(
            tree,
            run(a),
            run(b),
            run(c),
            run(d),
            run(q),
            run(r),
            term(g),
            term(m),
            NodeProcess::constant(tree, leaf, leaf, &target),
            x0,
        )
    }

    /// Same dynamics and constraint with `Q = 0`, `G = 0`, `R = I`: the
    /// minimum-energy problem.
    pub fn norm_optimal_view(&self) -> Self {
        let n = self.state_dim;
        let m = self.control_dim;
        Self {
            q: self.q.map(|_, _| DMatrix::zeros(n, n)),
            r: self.r.map(|_, _| DMatrix::identity(m, m)),
            g: self.g.map(|_, _| DMatrix::zeros(n, n)),
            ..self.clone()
        }
    }

    /// Same instance with terminal weight `G + ρ MᵀM`.
    pub fn with_penalized_terminal(&self, rho: f64) -> Self {
        Self {
            g: self.g.map(|id, g| g + self.m.get(id).transpose() * self.m.get(id) * rho),
            ..self.clone()
        }
    }

    /// Per-edge maps `(T_c, S_c)` from the parent state and control to the child state.
    pub fn edge_maps(&self, tree: &ScenarioTree, child: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let node = tree.node(child);
        let parent = node.parent.expect("edge maps requested for the root");
        let dt = tree.dt();
        let dw = node.increment;
        let n = self.state_dim;
        let t = DMatrix::identity(n, n) + self.a.get(parent) * dt + self.c.get(parent) * dw;
        let s = self.b.get(parent) * dt + self.d.get(parent) * dw;
        (t, s)
    }

    /// Largest row-sum norm of `G` over the leaves.
    pub fn terminal_weight_norm(&self) -> f64 {
        self.g
            .values()
            .iter()
            .map(|g| g.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }

    pub fn check_control(&self, tree: &ScenarioTree, u: &ControlProcess) -> Result<()> {
        if u.first_level() != 0 || u.last_level() + 1 != tree.steps() {
            return Err(Error::LevelMismatch {
                expected: tree.steps() - 1,
                got: u.last_level(),
            });
        }
        if let Some((_, v)) = u.iter().find(|(_, v)| v.len() != self.control_dim) {
            return Err(dim_err("control", self.control_dim, v.len()));
        }
        Ok(())
    }

    pub fn check_multiplier(&self, tree: &ScenarioTree, lambda: &Multiplier) -> Result<()> {
        if lambda.first_level() != tree.steps() || lambda.last_level() != tree.steps() {
            return Err(Error::LevelMismatch {
                expected: tree.steps(),
                got: lambda.first_level(),
            });
        }
        if let Some((_, v)) = lambda.iter().find(|(_, v)| v.len() != self.constraint_dim) {
            return Err(dim_err("multiplier", self.constraint_dim, v.len()));
        }
        Ok(())
    }

    fn check_state(&self, tree: &ScenarioTree, x: &StateProcess) -> Result<()> {
        if x.first_level() != 0 || x.last_level() != tree.steps() {
            return Err(Error::LevelMismatch {
                expected: tree.steps(),
                got: x.last_level(),
            });
        }
        if let Some((_, v)) = x.iter().find(|(_, v)| v.len() != self.state_dim) {
            return Err(dim_err("state", self.state_dim, v.len()));
        }
        Ok(())
    }

    pub fn zero_control(&self, tree: &ScenarioTree) -> ControlProcess {
        NodeProcess::zeros(tree, 0, tree.steps() - 1, self.control_dim)
    }

    pub fn zero_multiplier(&self, tree: &ScenarioTree) -> Multiplier {
        NodeProcess::zeros(tree, tree.steps(), tree.steps(), self.constraint_dim)
    }

    /// `M ≡ 0` and `b ≡ 0`: the constraint holds for every control.
    pub fn vacuous_constraint(&self) -> bool {
        self.m.values().iter().all(|m| m.iter().all(|&v| v == 0.0)) && self.target.values().iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

fn check_band(name: &str, p: &MatrixProcess, first: usize, last: usize) -> Result<()> {
    if p.first_level() != first || p.last_level() != last {
        return Err(Error::InvalidData(format!(
            "{name} must cover levels {first}..={last}, got {}..={}",
            p.first_level(),
            p.last_level()
        )));
    }
    Ok(())
}

fn check_shapes(name: &str, p: &MatrixProcess, rows: usize, cols: usize) -> Result<()> {
    for (id, x) in p.iter() {
        if x.shape() != (rows, cols) {
            return Err(dim_err(&format!("{name} at node {id}"), format!("{rows}x{cols}"), format!("{}x{}", x.nrows(), x.ncols())));
        }
    }
    Ok(())
}

fn symmetrize_process(name: &str, p: MatrixProcess) -> MatrixProcess {
    let worst = p.values().iter().map(|x| (x - x.transpose()).amax()).fold(0.0, f64::max);
    if worst > ASYMMETRY_WARN {
        warn!("{name} is not symmetric (max |X - Xᵀ| = {worst:e}); using (X + Xᵀ)/2");
    }
    p.map(|_, x| (x + x.transpose()) * 0.5)
}

/// Forward Euler–Maruyama simulation on the tree from `x0` under control `u`.
pub fn simulate_forward(tree: &ScenarioTree, data: &ProblemData, x0: &DVector<f64>, u: &ControlProcess) -> Result<StateProcess> {
    data.check_control(tree, u)?;
    if x0.len() != data.state_dim {
        return Err(dim_err("x0", data.state_dim, x0.len()));
    }
    let mut x = NodeProcess::zeros(tree, 0, tree.steps(), data.state_dim);
    *x.get_mut(0) = x0.clone();
    for id in tree.non_leaves() {
        let dt = tree.dt();
        let xi = x.get(id).clone();
        let ui = u.get(id);
        let drift = (data.a.get(id) * &xi + data.b.get(id) * ui) * dt;
        let diffusion = data.c.get(id) * &xi + data.d.get(id) * ui;
        for &c in &tree.node(id).children {
            *x.get_mut(c) = &xi + &drift + &diffusion * tree.node(c).increment;
        }
    }
    Ok(x)
}

/// `J = ½ Σ_{non-leaf} p·dt·(⟨QX,X⟩ + ⟨Ru,u⟩) + ½ Σ_leaf p·⟨GX,X⟩`.
pub fn cost(tree: &ScenarioTree, data: &ProblemData, x: &StateProcess, u: &ControlProcess) -> Result<f64> {
    data.check_state(tree, x)?;
    data.check_control(tree, u)?;
    let dt = tree.dt();
    let mut running = 0.0;
    for id in tree.non_leaves() {
        let (xi, ui) = (x.get(id), u.get(id));
        running += tree.node(id).prob * dt * ((data.q.get(id) * xi).dot(xi) + (data.r.get(id) * ui).dot(ui));
    }
    let terminal: f64 = tree
        .leaves()
        .map(|id| tree.node(id).prob * (data.g.get(id) * x.get(id)).dot(x.get(id)))
        .sum();
    Ok(0.5 * (running + terminal))
}

/// Per-leaf `M X(T) − b`.
pub fn constraint_residual(tree: &ScenarioTree, data: &ProblemData, x: &StateProcess) -> Result<Multiplier> {
    if x.last_level() != tree.steps() || !x.contains(tree.leaves().start) {
        return Err(Error::LevelMismatch {
            expected: tree.steps(),
            got: x.last_level(),
        });
    }
    let leaf = tree.steps();
    let mut out = Vec::with_capacity(tree.leaf_count());
    for id in tree.leaves() {
        let xi = x.get(id);
        if xi.len() != data.state_dim {
            return Err(dim_err("terminal state", data.state_dim, xi.len()));
        }
        out.push(data.m.get(id) * xi - data.target.get(id));
    }
    NodeProcess::from_values(tree, leaf, leaf, out)
}

/// `sqrt(E|ξ|²)` of a leaf process.
pub fn leaf_norm(tree: &ScenarioTree, xi: &Multiplier) -> f64 {
    tree.leaf_inner(xi, xi).map(f64::sqrt).unwrap_or(f64::NAN)
}

/// `L(u, λ) = J(u) + E⟨λ, M X(T) − b⟩` with the state started from `data.x0`.
pub fn lagrangian(tree: &ScenarioTree, data: &ProblemData, u: &ControlProcess, lambda: &Multiplier) -> Result<f64> {
    data.check_multiplier(tree, lambda)?;
    let x = simulate_forward(tree, data, &data.x0, u)?;
    let res = constraint_residual(tree, data, &x)?;
    Ok(cost(tree, data, &x, u)? + tree.leaf_inner(lambda, &res)?)
}

/// `L_ρ(u, λ) = L(u, λ) + (ρ/2)·E|M X(T) − b|²`.
pub fn augmented_lagrangian(tree: &ScenarioTree, data: &ProblemData, u: &ControlProcess, lambda: &Multiplier, rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::NonPositivePenalty(rho));
    }
    data.check_multiplier(tree, lambda)?;
    let x = simulate_forward(tree, data, &data.x0, u)?;
    let res = constraint_residual(tree, data, &x)?;
    Ok(cost(tree, data, &x, u)? + tree.leaf_inner(lambda, &res)? + 0.5 * rho * tree.leaf_inner(&res, &res)?)
}

/// Linear response of the state to the flattened control vector.
///
/// Entry `id` is the `n × (m·#non-leaf)` matrix `Φ_id` with
/// `X^{0,u}(id) = Φ_id · u_flat`; controls are flattened in node-id order.
pub fn state_response(tree: &ScenarioTree, data: &ProblemData) -> Vec<DMatrix<f64>> {
    let n = data.state_dim;
    let m = data.control_dim;
    let cols = m * tree.non_leaf_count();
    let mut phi = vec![DMatrix::zeros(n, cols); tree.node_count()];
    for id in tree.non_leaves() {
        for &c in &tree.node(id).children {
            let (t, s) = data.edge_maps(tree, c);
            let mut next = &t * &phi[id];
            let mut block = next.columns_mut(id * m, m);
            block += s;
            phi[c] = next;
        }
    }
    phi
}

/// Hessian of `u ↦ J(u)` over flattened controls (Euclidean coordinates,
/// probability weights included).
pub fn control_hessian(tree: &ScenarioTree, data: &ProblemData) -> DMatrix<f64> {
    let phi = state_response(tree, data);
    control_hessian_from_response(tree, data, &phi)
}

pub(crate) fn control_hessian_from_response(tree: &ScenarioTree, data: &ProblemData, phi: &[DMatrix<f64>]) -> DMatrix<f64> {
    let m = data.control_dim;
    let cols = m * tree.non_leaf_count();
    let dt = tree.dt();
    let mut h = DMatrix::zeros(cols, cols);
    for id in tree.non_leaves() {
        let w = tree.node(id).prob * dt;
        h += phi[id].transpose() * (data.q.get(id) * &phi[id]) * w;
        let mut block = h.view_mut((id * m, id * m), (m, m));
        block += data.r.get(id) * w;
    }
    for id in tree.leaves() {
        let w = tree.node(id).prob;
        h += phi[id].transpose() * (data.g.get(id) * &phi[id]) * w;
    }
    (&h + h.transpose()) * 0.5
}

/// Diagonal of the control-space weight `W = diag(p·dt)` in flattened coordinates.
pub fn control_weights(tree: &ScenarioTree, m: usize) -> DVector<f64> {
    let dt = tree.dt();
    DVector::from_iterator(
        m * tree.non_leaf_count(),
        tree.non_leaves().flat_map(|id| std::iter::repeat_n(tree.node(id).prob * dt, m)),
    )
}

/// Diagonal of the leaf weight `diag(p)` in flattened multiplier coordinates.
pub fn leaf_weights(tree: &ScenarioTree, ell: usize) -> DVector<f64> {
    DVector::from_iterator(
        ell * tree.leaf_count(),
        tree.leaves().flat_map(|id| std::iter::repeat_n(tree.node(id).prob, ell)),
    )
}

/// Smallest eigenvalue of `W^{-1/2} H₀ W^{-1/2}`, so that
/// `2·J⁰(v) ≥ δ̂·E∫|v|²dt` for every control `v`. Positive values certify
/// uniform convexity of the tree problem.
pub fn uniform_convexity_delta(tree: &ScenarioTree, data: &ProblemData) -> Result<f64> {
    let cols = data.control_dim * tree.non_leaf_count();
    if cols > crate::oracle::MAX_DENSE_CONTROLS {
        return Err(Error::SizeGuard(cols, crate::oracle::MAX_DENSE_CONTROLS));
    }
    let h = control_hessian(tree, data);
    let w = control_weights(tree, data.control_dim);
    let s = w.map(|x| 1.0 / x.sqrt());
    let scaled = DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)] * s[i] * s[j]);
    Ok(SymmetricEigen::new(scaled).eigenvalues.min())
}
