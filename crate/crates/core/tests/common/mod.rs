#![allow(dead_code)]

use cslq::instance::{random_instance, GeneratorBounds};
use cslq::model::{self, ControlProcess, Multiplier, ProblemData};
use cslq::tree::{NodeProcess, ScenarioTree};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn random(seed: u64) -> (ScenarioTree, ProblemData) {
    let inst = random_instance(seed, &GeneratorBounds::default()).unwrap().load().unwrap();
    (inst.tree, inst.data)
}

pub fn control_len(tree: &ScenarioTree, data: &ProblemData) -> usize {
    data.control_dim * tree.non_leaf_count()
}

pub fn unflatten_control(tree: &ScenarioTree, data: &ProblemData, v: &DVector<f64>) -> ControlProcess {
    NodeProcess::unflatten(tree, 0, tree.steps() - 1, data.control_dim, v).unwrap()
}

pub fn unflatten_multiplier(tree: &ScenarioTree, data: &ProblemData, v: &DVector<f64>) -> Multiplier {
    NodeProcess::unflatten(tree, tree.steps(), tree.steps(), data.constraint_dim, v).unwrap()
}

pub fn random_control<R: Rng>(tree: &ScenarioTree, data: &ProblemData, rng: &mut R) -> ControlProcess {
    NodeProcess::from_fn(tree, 0, tree.steps() - 1, |_| DVector::from_fn(data.control_dim, |_, _| rng.gen_range(-1.0..1.0)))
}

pub fn random_multiplier<R: Rng>(tree: &ScenarioTree, data: &ProblemData, rng: &mut R) -> Multiplier {
    NodeProcess::from_fn(tree, tree.steps(), tree.steps(), |_| DVector::from_fn(data.constraint_dim, |_, _| rng.gen_range(-1.0..1.0)))
}

pub fn norm(tree: &ScenarioTree, u: &ControlProcess) -> f64 {
    tree.l2_inner(u, u).unwrap().sqrt()
}

/// `f(v) = ½vᵀHv + gᵀv + c`, recovered exactly from values of `f`.
pub struct Quadratic {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: f64,
}

impl Quadratic {
    pub fn minimizer(&self) -> DVector<f64> {
        self.h.clone().lu().solve(&(-&self.g)).unwrap()
    }

    pub fn eval(&self, v: &DVector<f64>) -> f64 {
        0.5 * (&self.h * v).dot(v) + self.g.dot(v) + self.c
    }
}

/// Polarization of a quadratic: `H_ij = f(eᵢ+eⱼ) − f(eᵢ) − f(eⱼ) + f(0)`,
/// `H_ii = f(2eᵢ) − 2f(eᵢ) + f(0)`.
pub fn polarize(k: usize, f: impl Fn(&DVector<f64>) -> f64) -> Quadratic {
    let unit = |i: usize, s: f64| {
        let mut v = DVector::zeros(k);
        v[i] = s;
        v
    };
    let c = f(&DVector::zeros(k));
    let fi: Vec<f64> = (0..k).map(|i| f(&unit(i, 1.0))).collect();
    let mut h = DMatrix::zeros(k, k);
    for i in 0..k {
        h[(i, i)] = f(&unit(i, 2.0)) - 2.0 * fi[i] + c;
        for j in 0..i {
            let mut v = unit(i, 1.0);
            v[j] = 1.0;
            let hij = f(&v) - fi[i] - fi[j] + c;
            h[(i, j)] = hij;
            h[(j, i)] = hij;
        }
    }
    let g = DVector::from_fn(k, |i, _| fi[i] - c - 0.5 * h[(i, i)]);
    Quadratic { h, g, c }
}

/// `J` as a function of the flattened control, through forward simulation.
pub fn cost_quadratic(tree: &ScenarioTree, data: &ProblemData) -> Quadratic {
    polarize(control_len(tree, data), |v| {
        let u = unflatten_control(tree, data, v);
        let x = model::simulate_forward(tree, data, &data.x0, &u).unwrap();
        model::cost(tree, data, &x, &u).unwrap()
    })
}

pub fn augmented_quadratic(tree: &ScenarioTree, data: &ProblemData, lambda: &Multiplier, rho: f64) -> Quadratic {
    polarize(control_len(tree, data), |v| {
        let u = unflatten_control(tree, data, v);
        if rho == 0.0 {
            model::lagrangian(tree, data, &u, lambda).unwrap()
        } else {
            model::augmented_lagrangian(tree, data, &u, lambda, rho).unwrap()
        }
    })
}

/// Terminal map `u ↦ M X^{0,u}(T)` column by column, and `β = b − M X^{x0,0}(T)`.
pub fn constraint_map(tree: &ScenarioTree, data: &ProblemData) -> (DMatrix<f64>, DVector<f64>) {
    let k = control_len(tree, data);
    let ell = data.constraint_dim;
    let rows = ell * tree.leaf_count();
    let zero_x = DVector::zeros(data.state_dim);
    let terminal = |x0: &DVector<f64>, v: &DVector<f64>| {
        let x = model::simulate_forward(tree, data, x0, &unflatten_control(tree, data, v)).unwrap();
        let mut out = DVector::zeros(rows);
        for (i, id) in tree.leaves().enumerate() {
            out.rows_mut(i * ell, ell).copy_from(&(data.m.get(id) * x.get(id)));
        }
        out
    };
    let mut gamma = DMatrix::zeros(rows, k);
    for j in 0..k {
        let mut e = DVector::zeros(k);
        e[j] = 1.0;
        gamma.set_column(j, &terminal(&zero_x, &e));
    }
    let free = terminal(&data.x0, &DVector::zeros(k));
    let mut b = DVector::zeros(rows);
    for (i, id) in tree.leaves().enumerate() {
        b.rows_mut(i * ell, ell).copy_from(data.target.get(id));
    }
    (gamma, b - free)
}

pub fn leaf_probs(tree: &ScenarioTree, ell: usize) -> DVector<f64> {
    DVector::from_iterator(ell * tree.leaf_count(), tree.leaves().flat_map(|id| std::iter::repeat_n(tree.node(id).prob, ell)))
}

pub fn control_probs(tree: &ScenarioTree, m: usize) -> DVector<f64> {
    DVector::from_iterator(m * tree.non_leaf_count(), tree.non_leaves().flat_map(|id| std::iter::repeat_n(tree.node(id).prob * tree.dt(), m)))
}

/// Saddle point of `J(u) + E⟨λ, M X(T) − b⟩` from a full LU solve of the
/// KKT matrix. Returns `(u, λ)` flattened.
pub fn lu_saddle(tree: &ScenarioTree, data: &ProblemData) -> (DVector<f64>, DVector<f64>) {
    let q = cost_quadratic(tree, data);
    let (gamma, beta) = constraint_map(tree, data);
    let k = q.h.nrows();
    let r = gamma.nrows();
    let mut kkt = DMatrix::zeros(k + r, k + r);
    kkt.view_mut((0, 0), (k, k)).copy_from(&q.h);
    kkt.view_mut((0, k), (k, r)).copy_from(&gamma.transpose());
    kkt.view_mut((k, 0), (r, k)).copy_from(&gamma);
    let mut rhs = DVector::zeros(k + r);
    rhs.rows_mut(0, k).copy_from(&(-&q.g));
    rhs.rows_mut(k, r).copy_from(&beta);
    let sol = kkt.full_piv_lu().solve(&rhs).unwrap();
    let mu = sol.rows(k, r).into_owned();
    let p = leaf_probs(tree, data.constraint_dim);
    (sol.rows(0, k).into_owned(), mu.component_div(&p))
}

pub fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / (1.0 + b.norm())
}
