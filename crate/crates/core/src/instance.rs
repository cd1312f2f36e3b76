//! JSON instance files and a seeded generator of certified random instances.
//!
//! Matrices are written row-major as arrays of rows. A running coefficient
//! is either one matrix, `{"per_level": [...]}` with one matrix per time
//! level, or `{"per_node": [...]}` with one matrix per non-leaf node in
//! breadth-first order. Terminal data is one value or `{"per_leaf": [...]}`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alm::{AlmConfig, StepSchedule};
use crate::error::{Error, Result};
use crate::model::{MatrixProcess, ProblemData, VectorProcess};
use crate::oracle;
use crate::tree::{NodeProcess, ScenarioTree};

pub const SCHEMA_VERSION: u32 = 1;

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub l: usize,
}

fn default_branching() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: usize,
    #[serde(default = "default_branching")]
    pub branching: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoefficientSpec {
    Constant(Rows),
    PerLevel { per_level: Vec<Rows> },
    PerNode { per_node: Vec<Rows> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LeafMatrixSpec {
    Constant(Rows),
    PerLeaf { per_leaf: Vec<Rows> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LeafVectorSpec {
    Constant(Vec<f64>),
    PerLeaf { per_leaf: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSet {
    #[serde(rename = "A")]
    pub a: CoefficientSpec,
    #[serde(rename = "B")]
    pub b: CoefficientSpec,
    #[serde(rename = "C")]
    pub c: CoefficientSpec,
    #[serde(rename = "D")]
    pub d: CoefficientSpec,
    #[serde(rename = "Q")]
    pub q: CoefficientSpec,
    #[serde(rename = "R")]
    pub r: CoefficientSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSpec {
    #[serde(rename = "G")]
    pub g: LeafMatrixSpec,
    #[serde(rename = "M")]
    pub m: LeafMatrixSpec,
    pub b: LeafVectorSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_schedule: Option<StepSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_control: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_dual: Option<bool>,
    #[serde(default)]
    pub waive_surjectivity: bool,
}

fn default_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub dims: Dims,
    pub grid: GridSpec,
    pub coefficients: CoefficientSet,
    pub terminal: TerminalSpec,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub seed: u64,
}

/// A loaded instance ready for the solvers.
#[derive(Debug, Clone)]
pub struct Instance {
    pub tree: ScenarioTree,
    pub data: ProblemData,
    pub alm: AlmConfig,
    pub seed: u64,
}

fn to_matrix(name: &str, rows: &Rows, nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        let got_cols = rows.first().map_or(0, Vec::len);
        return Err(Error::InvalidData(format!("{name} must be {nrows}x{ncols}, got {}x{got_cols}", rows.len())));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn to_vector(name: &str, v: &[f64], len: usize) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(Error::InvalidData(format!("{name} must have length {len}, got {}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl CoefficientSpec {
    fn process(&self, name: &str, tree: &ScenarioTree, rows: usize, cols: usize) -> Result<MatrixProcess> {
        let last = tree.steps() - 1;
        match self {
            CoefficientSpec::Constant(m) => {
                let m = to_matrix(name, m, rows, cols)?;
                Ok(NodeProcess::from_fn(tree, 0, last, |_| m.clone()))
            }
            CoefficientSpec::PerLevel { per_level } => {
                if per_level.len() != tree.steps() {
                    return Err(Error::InvalidData(format!("{name}.per_level needs {} entries, got {}", tree.steps(), per_level.len())));
                }
                let mats = per_level
                    .iter()
                    .enumerate()
                    .map(|(k, m)| to_matrix(&format!("{name}.per_level[{k}]"), m, rows, cols))
                    .collect::<Result<Vec<_>>>()?;
                Ok(NodeProcess::from_fn(tree, 0, last, |id| mats[tree.node(id).depth].clone()))
            }
            CoefficientSpec::PerNode { per_node } => {
                let values = per_node
                    .iter()
                    .enumerate()
                    .map(|(i, m)| to_matrix(&format!("{name}.per_node[{i}]"), m, rows, cols))
                    .collect::<Result<Vec<_>>>()?;
                NodeProcess::from_values(tree, 0, last, values).map_err(|e| Error::InvalidData(format!("{name}.per_node: {e}")))
            }
        }
    }
}

impl LeafMatrixSpec {
    fn process(&self, name: &str, tree: &ScenarioTree, rows: usize, cols: usize) -> Result<MatrixProcess> {
        let n = tree.steps();
        match self {
            LeafMatrixSpec::Constant(m) => {
                let m = to_matrix(name, m, rows, cols)?;
                Ok(NodeProcess::from_fn(tree, n, n, |_| m.clone()))
            }
            LeafMatrixSpec::PerLeaf { per_leaf } => {
                let values = per_leaf
                    .iter()
                    .enumerate()
                    .map(|(i, m)| to_matrix(&format!("{name}.per_leaf[{i}]"), m, rows, cols))
                    .collect::<Result<Vec<_>>>()?;
                NodeProcess::from_values(tree, n, n, values).map_err(|e| Error::InvalidData(format!("{name}.per_leaf: {e}")))
            }
        }
    }
}

impl LeafVectorSpec {
    fn process(&self, name: &str, tree: &ScenarioTree, len: usize) -> Result<VectorProcess> {
        let n = tree.steps();
        match self {
            LeafVectorSpec::Constant(v) => {
                let v = to_vector(name, v, len)?;
                Ok(NodeProcess::constant(tree, n, n, &v))
            }
            LeafVectorSpec::PerLeaf { per_leaf } => {
                let values = per_leaf
                    .iter()
                    .enumerate()
                    .map(|(i, v)| to_vector(&format!("{name}.per_leaf[{i}]"), v, len))
                    .collect::<Result<Vec<_>>>()?;
                NodeProcess::from_values(tree, n, n, values).map_err(|e| Error::InvalidData(format!("{name}.per_leaf: {e}")))
            }
        }
    }
}

impl InstanceConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance configs always serialize")
    }

    /// Builds the tree, the problem data and the solver settings, applying
    /// every validation the solvers rely on.
    pub fn load(&self) -> Result<Instance> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported schema version {}", self.version)));
        }
        let Dims { n, m, l } = self.dims;
        let tree = ScenarioTree::build(self.grid.horizon, self.grid.steps, self.grid.branching)?;
        let c = &self.coefficients;
        let t = &self.terminal;
        let data = ProblemData::new(
            &tree,
            c.a.process("A", &tree, n, n)?,
            c.b.process("B", &tree, n, m)?,
            c.c.process("C", &tree, n, n)?,
            c.d.process("D", &tree, n, m)?,
            c.q.process("Q", &tree, n, n)?,
            c.r.process("R", &tree, m, m)?,
            t.g.process("G", &tree, n, n)?,
            t.m.process("M", &tree, l, n)?,
            t.b.process("b", &tree, l)?,
            to_vector("x0", &self.x0, n)?,
        )?;
        let s = &self.solver;
        let mut alm = AlmConfig::for_instance(&data);
        if let Some(rho) = s.rho {
            alm.rho = rho;
        }
        alm.schedule = s.r_schedule;
        if let Some(v) = s.tol_residual {
            alm.tol_residual = v;
        }
        if let Some(v) = s.tol_control {
            alm.tol_control = v;
        }
        if let Some(v) = s.max_iter {
            alm.max_iter = v;
        }
        alm.track_dual = s.track_dual;
        alm.waive_surjectivity = s.waive_surjectivity;
        alm.validate()?;
        Ok(Instance { tree, data, alm, seed: self.seed })
    }
}

/// Ranges for the random instance generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorBounds {
    pub max_n: usize,
    pub max_m: usize,
    pub max_l: usize,
    pub max_steps: usize,
    pub horizon: f64,
    /// Shift in `Q = qqᵀ + εI`.
    pub q_shift: f64,
}

impl Default for GeneratorBounds {
    fn default() -> Self {
        Self { max_n: 4, max_m: 3, max_l: 2, max_steps: 5, horizon: 1.0, q_shift: 0.1 }
    }
}

const MAX_DRAWS: usize = 200;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn gram(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let f = uniform(rng, n, n);
    &f * f.transpose() + DMatrix::identity(n, n) * shift
}

fn running(rng: &mut ChaCha8Rng, count: Option<usize>, mut draw: impl FnMut(&mut ChaCha8Rng) -> DMatrix<f64>) -> CoefficientSpec {
    match count {
        None => CoefficientSpec::Constant(matrix_rows(&draw(rng))),
        Some(k) => CoefficientSpec::PerNode { per_node: (0..k).map(|_| matrix_rows(&draw(rng))).collect() },
    }
}

/// Draws a random instance whose terminal map is certified surjective.
///
/// Odd seeds give node-dependent (random) coefficients, even seeds constant
/// ones. `M` is redrawn until the tree certificate passes; if that keeps
/// failing the whole instance is redrawn.
pub fn random_instance(seed: u64, bounds: &GeneratorBounds) -> Result<InstanceConfig> {
    if bounds.max_l == 0 || bounds.max_m <= bounds.max_l.min(bounds.max_n) || bounds.max_steps == 0 {
        return Err(Error::InvalidConfig("generator bounds admit no surjective instance".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let time_varying = seed % 2 == 1;
    for _ in 0..MAX_DRAWS {
        let n = rng.gen_range(1..=bounds.max_n);
        let l = rng.gen_range(1..=bounds.max_l.min(n));
        let m = rng.gen_range(l + 1..=bounds.max_m);
        let steps = rng.gen_range(1..=bounds.max_steps);
        let tree = ScenarioTree::build(bounds.horizon, steps, 2)?;
        let per_node = time_varying.then(|| tree.non_leaf_count());
        let coefficients = CoefficientSet {
            a: running(&mut rng, per_node, |r| uniform(r, n, n)),
            b: running(&mut rng, per_node, |r| uniform(r, n, m)),
            c: running(&mut rng, per_node, |r| uniform(r, n, n)),
            d: running(&mut rng, per_node, |r| uniform(r, n, m)),
            q: running(&mut rng, per_node, |r| gram(r, n, bounds.q_shift)),
            r: running(&mut rng, per_node, |r| gram(r, m, 1.0)),
        };
        let g = LeafMatrixSpec::Constant(matrix_rows(&gram(&mut rng, n, 0.0)));
        let b = LeafVectorSpec::PerLeaf { per_leaf: (0..tree.leaf_count()).map(|_| (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect() };
        let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..20 {
            let config = InstanceConfig {
                version: SCHEMA_VERSION,
                dims: Dims { n, m, l },
                grid: GridSpec { horizon: bounds.horizon, steps, branching: 2 },
                coefficients: coefficients.clone(),
                terminal: TerminalSpec { g: g.clone(), m: LeafMatrixSpec::Constant(matrix_rows(&uniform(&mut rng, l, n))), b: b.clone() },
                x0: x0.clone(),
                solver: SolverSpec::default(),
                seed,
            };
            let inst = config.load()?;
            if oracle::surjectivity_certificate(&inst.tree, &inst.data)?.surjective {
                return Ok(config);
            }
        }
    }
    Err(Error::InvalidConfig(format!("no certified instance found for seed {seed}")))
}
