//! Binary scenario tree carrying a discrete Brownian filtration.
//!
//! Level `k` of the tree holds the `2^k` atoms of the information available at
//! time `k·dt`. Every edge carries a Wiener increment `±√dt` taken with
//! conditional probability one half, which matches the first two conditional
//! moments of the continuous increment exactly. Node ids are assigned
//! breadth-first, so level `k` occupies the contiguous id range
//! `2^k − 1 .. 2^{k+1} − 1` and node `i` has children `2i + 1` (up move) and
//! `2i + 2` (down move).

use std::ops::{Add, Mul, Range};

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Uniform time grid on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::InvalidGrid("number of steps must be at least 1".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Step length, always derived as `T / N`.
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: usize,
    pub depth: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Wiener increment on the edge from the parent; zero at the root.
    pub increment: f64,
    /// Path probability of reaching this node.
    pub prob: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioTree {
    grid: TimeGrid,
    branching: usize,
    nodes: Vec<TreeNode>,
}

impl ScenarioTree {
    /// Builds the binary tree with `steps` levels of branching over `[0, horizon]`.
    pub fn build(horizon: f64, steps: usize, branching: usize) -> Result<Self> {
        let grid = TimeGrid::new(horizon, steps)?;
        if branching != 2 {
            return Err(Error::UnsupportedBranching(branching));
        }
        if steps > 24 {
            return Err(Error::InvalidGrid(format!("{steps} steps would need 2^{steps} leaves")));
        }
        let sqrt_dt = grid.dt().sqrt();
        let total = (1usize << (steps + 1)) - 1;
        let non_leaf = (1usize << steps) - 1;
        let mut nodes = Vec::with_capacity(total);
        for id in 0..total {
            let depth = level_of(id);
            let (parent, increment) = if id == 0 {
                (None, 0.0)
            } else {
                let parent = (id - 1) / 2;
                let inc = if id % 2 == 1 { sqrt_dt } else { -sqrt_dt };
                (Some(parent), inc)
            };
            let children = if id < non_leaf {
                vec![2 * id + 1, 2 * id + 2]
            } else {
                Vec::new()
            };
            nodes.push(TreeNode {
                id,
                depth,
                parent,
                children,
                increment,
                prob: 0.5f64.powi(depth as i32),
            });
        }
        Ok(Self {
            grid,
            branching,
            nodes,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Node ids at depth `level`.
    pub fn level(&self, level: usize) -> Range<usize> {
        assert!(level <= self.steps(), "level {level} beyond horizon");
        (1 << level) - 1..(1 << (level + 1)) - 1
    }

    /// Ids of nodes at depths `first..=last`.
    pub fn levels(&self, first: usize, last: usize) -> Range<usize> {
        self.level(first).start..self.level(last).end
    }

    /// Ids of all nodes that carry a control (depths `0..N`).
    pub fn non_leaves(&self) -> Range<usize> {
        self.levels(0, self.steps() - 1)
    }

    pub fn leaves(&self) -> Range<usize> {
        self.level(self.steps())
    }

    pub fn non_leaf_count(&self) -> usize {
        self.non_leaves().len()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves().len()
    }

    /// Conditional probability of moving from the parent into `id`.
    pub fn transition_prob(&self, id: usize) -> f64 {
        match self.nodes[id].parent {
            Some(p) => self.nodes[id].prob / self.nodes[p].prob,
            None => 1.0,
        }
    }

    /// Conditional expectation `E[y | F_k]` of a process living on level `k + 1`.
    pub fn conditional_expectation<T>(&self, y: &NodeProcess<T>) -> Result<NodeProcess<T>>
    where
        T: Clone + Add<Output = T> + Mul<f64, Output = T>,
    {
        if y.first_level != y.last_level || y.first_level == 0 {
            return Err(Error::InvalidData(
                "conditional expectation needs a single-level process below the root".into(),
            ));
        }
        let child_level = y.first_level;
        let parent_level = child_level - 1;
        let values = self
            .level(parent_level)
            .map(|id| self.expect_children(id, |c| y.get(c).clone()))
            .collect();
        NodeProcess::from_values(self, parent_level, parent_level, values)
    }

    /// `Σ_c P(c | id) · f(c)` over the children of `id`.
    pub fn expect_children<T, F>(&self, id: usize, mut f: F) -> T
    where
        T: Add<Output = T> + Mul<f64, Output = T>,
        F: FnMut(usize) -> T,
    {
        let node = &self.nodes[id];
        let mut iter = node.children.iter();
        let first = *iter.next().expect("expectation over children of a leaf");
        let mut acc = f(first) * self.transition_prob(first);
        for &c in iter {
            acc = acc + f(c) * self.transition_prob(c);
        }
        acc
    }

    /// Weighted inner product `Σ_{non-leaf} p·dt·⟨u, v⟩`, the discrete `E∫⟨u,v⟩dt`.
    pub fn l2_inner(&self, u: &NodeProcess<DVector<f64>>, v: &NodeProcess<DVector<f64>>) -> Result<f64> {
        let nl = self.non_leaves();
        for p in [u, v] {
            if p.first_level != 0 || p.last_level + 1 != self.steps() {
                return Err(Error::LevelMismatch {
                    expected: self.steps() - 1,
                    got: p.last_level,
                });
            }
        }
        let dt = self.dt();
        let mut acc = 0.0;
        for id in nl {
            let (a, b) = (u.get(id), v.get(id));
            if a.len() != b.len() {
                return Err(crate::error::dim_err("l2_inner", a.len(), b.len()));
            }
            acc += self.nodes[id].prob * dt * a.dot(b);
        }
        Ok(acc)
    }

    /// Probability-weighted `Σ_leaf p·⟨x, y⟩`, the discrete `E⟨ξ, η⟩` at maturity.
    pub fn leaf_inner(&self, x: &NodeProcess<DVector<f64>>, y: &NodeProcess<DVector<f64>>) -> Result<f64> {
        let n = self.steps();
        if x.first_level != n || y.first_level != n {
            return Err(Error::LevelMismatch {
                expected: n,
                got: x.first_level.min(y.first_level),
            });
        }
        let mut acc = 0.0;
        for id in self.leaves() {
            let (a, b) = (x.get(id), y.get(id));
            if a.len() != b.len() {
                return Err(crate::error::dim_err("leaf_inner", a.len(), b.len()));
            }
            acc += self.nodes[id].prob * a.dot(b);
        }
        Ok(acc)
    }

    /// Probability-weighted mean of a scalar function of the nodes at `level`.
    pub fn level_expectation<F: FnMut(usize) -> f64>(&self, level: usize, mut f: F) -> f64 {
        self.level(level).map(|id| self.nodes[id].prob * f(id)).sum()
    }
}

fn level_of(id: usize) -> usize {
    (usize::BITS - 1 - (id + 1).leading_zeros()) as usize
}

/// Adapted process: one value per node on a contiguous band of levels.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeProcess<T> {
    first_level: usize,
    last_level: usize,
    offset: usize,
    values: Vec<T>,
}

impl<T> NodeProcess<T> {
    pub fn from_values(tree: &ScenarioTree, first_level: usize, last_level: usize, values: Vec<T>) -> Result<Self> {
        if first_level > last_level || last_level > tree.steps() {
            return Err(Error::InvalidData(format!(
                "invalid level band {first_level}..={last_level} for a tree with {} steps",
                tree.steps()
            )));
        }
        let ids = tree.levels(first_level, last_level);
        if values.len() != ids.len() {
            return Err(crate::error::dim_err("node process", ids.len(), values.len()));
        }
        Ok(Self {
            first_level,
            last_level,
            offset: ids.start,
            values,
        })
    }

    pub fn from_fn<F: FnMut(usize) -> T>(tree: &ScenarioTree, first_level: usize, last_level: usize, f: F) -> Self {
        let ids = tree.levels(first_level, last_level);
        Self {
            first_level,
            last_level,
            offset: ids.start,
            values: ids.map(f).collect(),
        }
    }

    pub fn first_level(&self) -> usize {
        self.first_level
    }

    pub fn last_level(&self) -> usize {
        self.last_level
    }

    /// Node ids covered by this process.
    pub fn ids(&self) -> Range<usize> {
        self.offset..self.offset + self.values.len()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids().contains(&id)
    }

    pub fn get(&self, id: usize) -> &T {
        &self.values[id - self.offset]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut T {
        &mut self.values[id - self.offset]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &T)> {
        self.values.iter().enumerate().map(move |(i, v)| (i + self.offset, v))
    }

    pub fn map<U, F: FnMut(usize, &T) -> U>(&self, mut f: F) -> NodeProcess<U> {
        NodeProcess {
            first_level: self.first_level,
            last_level: self.last_level,
            offset: self.offset,
            values: self.iter().map(|(id, v)| f(id, v)).collect(),
        }
    }
}

impl NodeProcess<DVector<f64>> {
    pub fn constant(tree: &ScenarioTree, first_level: usize, last_level: usize, v: &DVector<f64>) -> Self {
        Self::from_fn(tree, first_level, last_level, |_| v.clone())
    }

    pub fn zeros(tree: &ScenarioTree, first_level: usize, last_level: usize, dim: usize) -> Self {
        Self::from_fn(tree, first_level, last_level, |_| DVector::zeros(dim))
    }

    /// Stacks the node vectors in id order.
    pub fn flatten(&self) -> DVector<f64> {
        let total: usize = self.values.iter().map(|v| v.len()).sum();
        let mut out = DVector::zeros(total);
        let mut pos = 0;
        for v in &self.values {
            out.rows_mut(pos, v.len()).copy_from(v);
            pos += v.len();
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) for a fixed per-node dimension.
    pub fn unflatten(tree: &ScenarioTree, first_level: usize, last_level: usize, dim: usize, flat: &DVector<f64>) -> Result<Self> {
        let ids = tree.levels(first_level, last_level);
        if flat.len() != ids.len() * dim {
            return Err(crate::error::dim_err("unflatten", ids.len() * dim, flat.len()));
        }
        Ok(Self::from_fn(tree, first_level, last_level, |id| {
            let i = id - ids.start;
            flat.rows(i * dim, dim).into_owned()
        }))
    }

    pub fn axpy(&self, alpha: f64, other: &Self) -> Self {
        assert_eq!(self.ids(), other.ids(), "axpy on processes with different supports");
        self.map(|id, v| v + other.get(id) * alpha)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|_, v| v * alpha)
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}
