//! Augmented Lagrangian iteration (method of multipliers) for the
//! terminally constrained problem, with per-iteration diagnostics.
//!
//! Each iteration minimizes `L_ρ(·, λᵏ)` exactly through the Riccati
//! feedback of [`crate::riccati`] and then moves the multiplier along the
//! terminal residual: `λᵏ⁺¹ = λᵏ + rᵏ (M X^{x,uᵏ⁺¹}(T) − b)`.
//! Convergence needs `0 < r⁰ ≤ rᵏ ≤ 2ρ`, which is enforced at validation.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ControlProcess, Multiplier, ProblemData};
use crate::oracle;
use crate::riccati;
use crate::tree::{NodeProcess, ScenarioTree};

/// Multiplier step sizes `rᵏ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant(f64),
    /// Linear ramp from `start` to `end` over `iterations` steps, then held at `end`.
    Ramp { start: f64, end: f64, iterations: usize },
}

impl StepSchedule {
    pub fn rate(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant(r) => r,
            StepSchedule::Ramp { start, end, iterations } => {
                if iterations == 0 || k >= iterations {
                    end
                } else {
                    start + (end - start) * k as f64 / iterations as f64
                }
            }
        }
    }

    /// Checks `0 < r⁰ ≤ rᵏ ≤ 2ρ` for every `k`.
    pub fn validate(&self, rho: f64) -> Result<()> {
        let (lo, hi) = match *self {
            StepSchedule::Constant(r) => (r, r),
            StepSchedule::Ramp { start, end, .. } => {
                if end < start {
                    return Err(Error::InvalidConfig(format!("ramp must be nondecreasing so that r^k >= r^0, got {start} -> {end}")));
                }
                (start, end)
            }
        };
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0) {
            return Err(Error::InvalidConfig(format!("step size r^0 = {lo} must be positive")));
        }
        if hi > 2.0 * rho {
            return Err(Error::InvalidConfig(format!("step size r^k = {hi} outside the admissible window (0, 2*rho] = (0, {}]", 2.0 * rho)));
        }
        Ok(())
    }
}

/// Reference solution used to record distances along the iteration.
#[derive(Debug, Clone)]
pub struct Reference {
    pub control: ControlProcess,
    pub multiplier: Multiplier,
}

#[derive(Debug, Clone)]
pub struct AlmConfig {
    pub rho: f64,
    /// `None` means `rᵏ = ρ`.
    pub schedule: Option<StepSchedule>,
    pub lambda0: Option<Multiplier>,
    pub u0: Option<ControlProcess>,
    pub tol_residual: f64,
    pub tol_control: f64,
    pub max_iter: usize,
    /// Evaluate `d(λᵏ)` each iteration; `None` enables it for trees with at most 8 steps.
    pub track_dual: Option<bool>,
    pub reference: Option<Reference>,
    /// Skip the surjectivity certificate. Vacuous constraints skip it regardless.
    pub waive_surjectivity: bool,
    /// Instances with `δ̂` at or below this value are refused.
    pub convexity_tol: f64,
    /// Compute `δ̂` and the surjectivity certificate before iterating.
    /// Both are dense computations, so very large trees need this off.
    pub certify: bool,
}

/// `10·(1 + ‖G‖∞)`.
pub fn default_rho(data: &ProblemData) -> f64 {
    10.0 * (1.0 + data.terminal_weight_norm())
}

impl AlmConfig {
    pub fn new(rho: f64) -> Self {
        Self {
            rho,
            schedule: None,
            lambda0: None,
            u0: None,
            tol_residual: 1e-8,
            tol_control: 1e-9,
            max_iter: 500,
            track_dual: None,
            reference: None,
            waive_surjectivity: false,
            convexity_tol: 1e-10,
            certify: true,
        }
    }

    pub fn for_instance(data: &ProblemData) -> Self {
        Self::new(default_rho(data))
    }

    pub fn schedule(&self) -> StepSchedule {
        self.schedule.unwrap_or(StepSchedule::Constant(self.rho))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::NonPositivePenalty(self.rho));
        }
        self.schedule().validate(self.rho)?;
        if !(self.tol_residual >= 0.0 && self.tol_control >= 0.0) {
            return Err(Error::InvalidConfig("tolerances must be non-negative".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub k: usize,
    pub step: f64,
    /// `sqrt(E|M X^{uᵏ⁺¹}(T) − b|²)`.
    pub residual_norm: f64,
    /// `‖uᵏ⁺¹ − uᵏ‖` in the weighted L² norm.
    pub control_change: f64,
    /// `J(uᵏ⁺¹)`.
    pub primal_value: f64,
    /// `d(λᵏ⁺¹)`.
    pub dual_value: Option<f64>,
    pub duality_gap: Option<f64>,
    /// `sqrt(E|λᵏ⁺¹ − λ̄|²)`.
    pub multiplier_distance: Option<f64>,
    /// `‖uᵏ⁺¹ − ū‖`.
    pub control_distance: Option<f64>,
    /// Stationarity residual of `uᵏ⁺¹` for `L_ρ(·, λᵏ)`.
    pub first_order_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Converged,
    MaxIter,
    Aborted(String),
}

#[derive(Debug, Clone)]
pub struct AlmReport {
    pub iterations: Vec<IterationRecord>,
    pub verdict: Verdict,
    pub final_control: ControlProcess,
    pub final_multiplier: Multiplier,
    /// `None` when certification was skipped.
    pub delta_hat: Option<f64>,
    pub rho: f64,
    /// `sqrt(E|λ⁰ − λ̄|²)` when a reference was supplied.
    pub initial_multiplier_distance: Option<f64>,
}

impl AlmReport {
    pub fn converged(&self) -> bool {
        self.verdict == Verdict::Converged
    }
}

fn weighted_distance(tree: &ScenarioTree, a: &ControlProcess, b: &ControlProcess) -> f64 {
    let d = a.axpy(-1.0, b);
    tree.l2_inner(&d, &d).map(f64::sqrt).unwrap_or(f64::NAN)
}

fn leaf_distance(tree: &ScenarioTree, a: &Multiplier, b: &Multiplier) -> f64 {
    model::leaf_norm(tree, &a.axpy(-1.0, b))
}

/// Runs the method of multipliers until the residual and the successive
/// control change both fall below their tolerances.
pub fn alm_solve(tree: &ScenarioTree, data: &ProblemData, config: &AlmConfig) -> Result<AlmReport> {
    config.validate()?;
    let delta_hat = if config.certify {
        let delta_hat = model::uniform_convexity_delta(tree, data)?;
        if !(delta_hat > config.convexity_tol) {
            return Err(Error::NotUniformlyConvex(delta_hat));
        }
        Some(delta_hat)
    } else {
        None
    };
    if config.certify && !config.waive_surjectivity && !data.vacuous_constraint() {
        let cert = oracle::surjectivity_certificate(tree, data)?;
        if !cert.surjective {
            return Err(Error::NotSurjective(cert.sigma_min));
        }
    }

    let rho = config.rho;
    let schedule = config.schedule();
    let ric = riccati::riccati_backward(tree, data, rho)?;
    let track_dual = config.track_dual.unwrap_or(tree.steps() <= 8);
    let ric0 = if track_dual { Some(riccati::riccati_backward(tree, data, 0.0)?) } else { None };

    let mut lambda = match &config.lambda0 {
        Some(l) => {
            data.check_multiplier(tree, l)?;
            l.clone()
        }
        None => data.zero_multiplier(tree),
    };
    let mut u_prev = match &config.u0 {
        Some(u) => {
            data.check_control(tree, u)?;
            u.clone()
        }
        None => data.zero_control(tree),
    };
    let initial_multiplier_distance = config.reference.as_ref().map(|r| leaf_distance(tree, &lambda, &r.multiplier));

    let mut iterations = Vec::new();
    let mut verdict = Verdict::MaxIter;
    for k in 0..config.max_iter {
        let (u, x) = match riccati::solve_subproblem_with(tree, data, &ric, &lambda) {
            Ok(sol) => sol,
            Err(e) => {
                verdict = Verdict::Aborted(e.to_string());
                break;
            }
        };
        let res = model::constraint_residual(tree, data, &x)?;
        let residual_norm = model::leaf_norm(tree, &res);
        let control_change = weighted_distance(tree, &u, &u_prev);
        let first_order = first_order_residual(tree, data, &u, &lambda, rho)?;
        let step = schedule.rate(k);
        let next_lambda = lambda.axpy(step, &res);
        let primal_value = model::cost(tree, data, &x, &u)?;
        let dual_value = match &ric0 {
            Some(r0) => match riccati::dual_value_with(tree, data, r0, &next_lambda) {
                Ok(v) => Some(v),
                Err(e) => {
                    verdict = Verdict::Aborted(e.to_string());
                    break;
                }
            },
            None => None,
        };
        let record = IterationRecord {
            k,
            step,
            residual_norm,
            control_change,
            primal_value,
            dual_value,
            duality_gap: dual_value.map(|d| primal_value - d),
            multiplier_distance: config.reference.as_ref().map(|r| leaf_distance(tree, &next_lambda, &r.multiplier)),
            control_distance: config.reference.as_ref().map(|r| weighted_distance(tree, &u, &r.control)),
            first_order_residual: first_order,
        };
        let finite = [residual_norm, control_change, primal_value, first_order].iter().all(|v| v.is_finite()) && next_lambda.is_finite();
        iterations.push(record);
        if !finite {
            verdict = Verdict::Aborted(format!("non-finite values at iteration {k}"));
            break;
        }
        // An exactly zero residual leaves λ unchanged, so the next subproblem
        // reproduces u: the iterate is a fixed point.
        let fixed_point = res.values().iter().all(|r| r.iter().all(|&v| v == 0.0));
        lambda = next_lambda;
        u_prev = u;
        if residual_norm <= config.tol_residual && (control_change <= config.tol_control || fixed_point) {
            verdict = Verdict::Converged;
            break;
        }
    }

    Ok(AlmReport {
        iterations,
        verdict,
        final_control: u_prev,
        final_multiplier: lambda,
        delta_hat,
        rho,
        initial_multiplier_distance,
    })
}

/// Weighted L² norm of the stationarity residual `R u − Bᵀp − Dᵀq`.
///
/// `(p, q)` is the pure adjoint of the dynamics along the state of `u`:
/// `p(T) = −(G + ρMᵀM) X(T) − Mᵀλ + ρMᵀb`, `p = Σ π_c T_cᵀ p_c − Q X·dt`,
/// and at each node `Bᵀp + Dᵀq` is realized as `Σ π_c S_cᵀ p_c / dt`.
/// The residual equals the `W_u`-gradient of `L_ρ(·, λ)` up to sign.
pub fn first_order_residual(tree: &ScenarioTree, data: &ProblemData, u: &ControlProcess, lambda: &Multiplier, rho: f64) -> Result<f64> {
    data.check_multiplier(tree, lambda)?;
    let x = model::simulate_forward(tree, data, &data.x0, u)?;
    let steps = tree.steps();
    let dt = tree.dt();
    let mut p = NodeProcess::zeros(tree, 0, steps, data.state_dim);
    for id in tree.leaves() {
        let mm = data.m.get(id);
        let mt = mm.transpose();
        let xt = x.get(id);
        *p.get_mut(id) = -(data.g.get(id) * xt + &mt * (mm * xt) * rho) - &mt * lambda.get(id) + &mt * data.target.get(id) * rho;
    }
    let mut total = 0.0;
    for level in (0..steps).rev() {
        for id in tree.level(level) {
            let mut transported = DVector::zeros(data.state_dim);
            let mut coupling = DVector::zeros(data.control_dim);
            for &c in &tree.node(id).children {
                let pi = tree.transition_prob(c);
                let (t, s) = data.edge_maps(tree, c);
                transported += t.transpose() * p.get(c) * pi;
                coupling += s.transpose() * p.get(c) * pi;
            }
            *p.get_mut(id) = transported - data.q.get(id) * x.get(id) * dt;
            let r = data.r.get(id) * u.get(id) - coupling / dt;
            total += tree.node(id).prob * dt * r.norm_squared();
        }
    }
    Ok(total.sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct SaddleReport {
    pub is_saddle: bool,
    pub worst_violation: f64,
    pub residual_norm: f64,
    pub stationarity: f64,
    /// Largest observed `L_ρ(u, λ) − L_ρ(u + v, λ)` over sampled `v`.
    pub max_descent: f64,
}

/// Tolerance on the feasibility and stationarity parts of [`saddle_point_check`].
pub const SADDLE_TOL: f64 = 1e-8;

/// Samples the saddle property of `(u, λ)` for `L_ρ`: feasibility of `u`,
/// no descent of `L_ρ(·, λ)` along `n_samples` random directions, and
/// stationarity.
pub fn saddle_point_check<R: Rng>(tree: &ScenarioTree, data: &ProblemData, u: &ControlProcess, lambda: &Multiplier, rho: f64, n_samples: usize, rng: &mut R) -> Result<SaddleReport> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("saddle check needs at least one sample".into()));
    }
    let x = model::simulate_forward(tree, data, &data.x0, u)?;
    let res = model::constraint_residual(tree, data, &x)?;
    let residual_norm = model::leaf_norm(tree, &res);
    let base = model::augmented_lagrangian(tree, data, u, lambda, rho)?;
    let scale = 1e-10 * (1.0 + base.abs());
    let mut max_descent = f64::NEG_INFINITY;
    for i in 0..n_samples {
        let v = NodeProcess::from_fn(tree, 0, tree.steps() - 1, |_| DVector::from_fn(data.control_dim, |_, _| rng.gen_range(-1.0..1.0)));
        let norm = tree.l2_inner(&v, &v)?.sqrt().max(f64::MIN_POSITIVE);
        let amplitude = if i % 2 == 0 { 1.0 } else { 1e-2 };
        let trial = u.axpy(amplitude / norm, &v);
        let value = model::augmented_lagrangian(tree, data, &trial, lambda, rho)?;
        max_descent = max_descent.max(base - value);
    }
    let stationarity = first_order_residual(tree, data, u, lambda, rho)?;
    let descent_violation = (max_descent / (1.0 + base.abs())).max(0.0);
    let is_saddle = residual_norm <= SADDLE_TOL && stationarity <= SADDLE_TOL && max_descent <= scale;
    Ok(SaddleReport {
        is_saddle,
        worst_violation: residual_norm.max(stationarity).max(descent_violation),
        residual_norm,
        stationarity,
        max_descent,
    })
}
