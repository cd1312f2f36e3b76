//! Rank conditions for surjectivity of `u ↦ M X^{0,u}(T)` with
//! deterministic, time-invariant coefficients.
//!
//! `rank(MD) = ℓ` is necessary. When it holds, the reduced system
//! `A₁ = A + B K₂`, `A₂ = B K₁ᵃ M`, `B₁ = B K₁ᵇ` is formed from any `K₁`, `K₂`
//! with `M D K₁ = [I_ℓ | 0]` and `M D K₂ = −M C`, and full rank of the span
//! generated from `B₁` by words in `{A₁, A₂}` is sufficient.

use nalgebra::{DMatrix, SVD};
use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::model::ProblemData;

/// Relative singular value cutoff used for every rank decision here.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MdRank {
    pub rank: usize,
    pub ok: bool,
}

/// Numerical rank of `a`: singular values above `RANK_TOL·σ_max`.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    numerical_rank_scaled(a, 0.0)
}

/// Numerical rank with cutoff `RANK_TOL·max(σ_max, scale)`. A product such
/// as `MD` that cancels to rounding level is rank zero relative to `‖M‖‖D‖`,
/// not relative to its own tiny `σ_max`.
pub fn numerical_rank_scaled(a: &DMatrix<f64>, scale: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let cutoff = RANK_TOL * sv.max().max(scale);
    if !(cutoff > 0.0) {
        return 0;
    }
    sv.iter().filter(|&&s| s > cutoff).count()
}

fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

pub fn check_md_rank(m: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<MdRank> {
    if m.ncols() != d.nrows() {
        return Err(dim_err("M D", m.ncols(), d.nrows()));
    }
    let ell = m.nrows();
    let rank = numerical_rank_scaled(&(m * d), spectral_norm(m) * spectral_norm(d));
    Ok(MdRank { rank, ok: d.ncols() >= ell && rank == ell })
}

#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub k1: DMatrix<f64>,
    pub k2: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub md_rank: usize,
}

impl ReducedSystem {
    /// `K₁ᵃ`, the first `ℓ` columns of `K₁`.
    pub fn k1a(&self) -> DMatrix<f64> {
        let ell = self.k1.ncols() - self.b1.ncols();
        self.k1.columns(0, ell).into_owned()
    }

    /// `K₁ᵇ`, the trailing `m − ℓ` columns of `K₁`.
    pub fn k1b(&self) -> DMatrix<f64> {
        let ell = self.k1.ncols() - self.b1.ncols();
        self.k1.columns(ell, self.b1.ncols()).into_owned()
    }
}

struct Coefficients<'a> {
    a: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
    c: &'a DMatrix<f64>,
    d: &'a DMatrix<f64>,
    m: &'a DMatrix<f64>,
}

impl Coefficients<'_> {
    fn check(&self) -> Result<(usize, usize, usize)> {
        let n = self.a.nrows();
        let mdim = self.b.ncols();
        let ell = self.m.nrows();
        let shapes = [
            ("A", self.a.shape(), (n, n)),
            ("B", self.b.shape(), (n, mdim)),
            ("C", self.c.shape(), (n, n)),
            ("D", self.d.shape(), (n, mdim)),
            ("M", self.m.shape(), (ell, n)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::InvalidData(format!("{name} has shape {got:?}, expected {want:?}")));
            }
        }
        Ok((n, mdim, ell))
    }
}

/// Orthonormal basis of `ker(md)` as columns, from an SVD of `md` padded to square.
fn kernel_basis(md: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let m = md.ncols();
    let mut padded = DMatrix::zeros(m.max(md.nrows()), m);
    padded.view_mut((0, 0), (md.nrows(), m)).copy_from(md);
    let svd = SVD::new(padded, false, true);
    let vt = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let mut basis = DMatrix::zeros(m, dim);
    for (col, &i) in order.iter().take(dim).enumerate() {
        basis.set_column(col, &vt.row(i).transpose());
    }
    basis
}

fn reduce(coef: &Coefficients<'_>, kernel_mix: Option<&DMatrix<f64>>) -> Result<ReducedSystem> {
    let (n, mdim, ell) = coef.check()?;
    let md = coef.m * coef.d;
    let rank = check_md_rank(coef.m, coef.d)?;
    if !rank.ok {
        return Err(Error::RankDeficient { rank: rank.rank, needed: ell });
    }
    let pinv = md.clone().pseudo_inverse(RANK_TOL).map_err(|e| Error::InvalidData(e.to_string()))?;
    let mut kernel = kernel_basis(&md, mdim - ell);
    if let Some(mix) = kernel_mix {
        if mix.shape() != (mdim - ell, mdim - ell) {
            return Err(Error::InvalidData(format!("kernel mixing matrix must be {0}x{0}", mdim - ell)));
        }
        kernel = &kernel * mix;
    }
    let mut k1 = DMatrix::zeros(mdim, mdim);
    k1.view_mut((0, 0), (mdim, ell)).copy_from(&pinv);
    k1.view_mut((0, ell), (mdim, mdim - ell)).copy_from(&kernel);
    let k2 = -(&pinv * coef.m * coef.c);
    let a1 = coef.a + coef.b * &k2;
    let a2 = coef.b * &pinv * coef.m;
    let b1 = coef.b * &kernel;
    debug_assert_eq!(a1.shape(), (n, n));
    Ok(ReducedSystem { k1, k2, a1, a2, b1, md_rank: rank.rank })
}

/// Reduced system with `K₁ = [(MD)⁺ | orthonormal kernel basis of MD]` and `K₂ = −(MD)⁺ M C`.
pub fn build_reduced_system(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<ReducedSystem> {
    reduce(&Coefficients { a, b, c, d, m }, None)
}

/// Same as [`build_reduced_system`] with the kernel block replaced by
/// `kernel · mix` for an invertible `(m−ℓ)×(m−ℓ)` matrix `mix`.
pub fn build_reduced_system_with_kernel_mix(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>, m: &DMatrix<f64>, mix: &DMatrix<f64>) -> Result<ReducedSystem> {
    reduce(&Coefficients { a, b, c, d, m }, Some(mix))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RankStatus {
    /// `rank(MD) < ℓ`: the map cannot be onto.
    NotSurjective,
    /// Both rank conditions hold.
    Surjective,
    /// `rank(MD) = ℓ` but the word span is deficient; the test says nothing.
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankVerdict {
    pub md_rank: usize,
    pub md_ok: bool,
    pub word_rank: usize,
    pub word_basis_dim_history: Vec<usize>,
    pub sufficient: bool,
    pub status: RankStatus,
    pub certificate_note: String,
}

/// Orthonormal basis of the column span of `a`.
fn orthonormal_span(a: &DMatrix<f64>) -> DMatrix<f64> {
    let rank = numerical_rank(a);
    if rank == 0 {
        return DMatrix::zeros(a.nrows(), 0);
    }
    let svd = SVD::new(a.clone(), true, false);
    let u = svd.u.expect("requested left singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut basis = DMatrix::zeros(a.nrows(), rank);
    for (col, &i) in order.iter().take(rank).enumerate() {
        basis.set_column(col, &u.column(i));
    }
    basis
}

/// Dimension of the smallest subspace containing `colspan(B₁)` and invariant
/// under `A₁` and `A₂`, by span growth `S ← S + A₁S + A₂S` to a fixpoint.
/// The returned history lists `dim S` after each growth step.
pub fn word_rank(a1: &DMatrix<f64>, a2: &DMatrix<f64>, b1: &DMatrix<f64>, n: usize) -> Result<(usize, Vec<usize>)> {
    for (name, got, want) in [("A1", a1.shape(), (n, n)), ("A2", a2.shape(), (n, n))] {
        if got != want {
            return Err(Error::InvalidData(format!("{name} has shape {got:?}, expected {want:?}")));
        }
    }
    if b1.nrows() != n {
        return Err(dim_err("B1 rows", n, b1.nrows()));
    }
    let mut basis = orthonormal_span(b1);
    let mut history = vec![basis.ncols()];
    while basis.ncols() > 0 && basis.ncols() < n {
        let k = basis.ncols();
        let mut grown = DMatrix::zeros(n, 3 * k);
        grown.view_mut((0, 0), (n, k)).copy_from(&basis);
        grown.view_mut((0, k), (n, k)).copy_from(&(a1 * &basis));
        grown.view_mut((0, 2 * k), (n, k)).copy_from(&(a2 * &basis));
        let next = orthonormal_span(&grown);
        if next.ncols() <= k {
            break;
        }
        basis = next;
        history.push(basis.ncols());
    }
    Ok((basis.ncols(), history))
}

/// Combined verdict from the necessary and the sufficient rank condition.
pub fn surjectivity_verdict(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<RankVerdict> {
    let coef = Coefficients { a, b, c, d, m };
    let (n, mdim, ell) = coef.check()?;
    let md = check_md_rank(m, d)?;
    if !md.ok {
        return Ok(RankVerdict {
            md_rank: md.rank,
            md_ok: false,
            word_rank: 0,
            word_basis_dim_history: Vec::new(),
            sufficient: false,
            status: RankStatus::NotSurjective,
            certificate_note: format!("necessary condition failed: rank(MD) = {} < l = {ell} (m = {mdim}); definitely not surjective", md.rank),
        });
    }
    let reduced = reduce(&coef, None)?;
    let (rank, history) = word_rank(&reduced.a1, &reduced.a2, &reduced.b1, n)?;
    let sufficient = rank == n;
    let (status, note) = if sufficient {
        (RankStatus::Surjective, format!("rank(MD) = {ell} and word rank = {n}; surjective"))
    } else if reduced.b1.ncols() == 0 {
        (RankStatus::Inconclusive, format!("rank(MD) = {ell} holds but B1 is empty (m = l); sufficient condition fails, rank test is inconclusive"))
    } else {
        (RankStatus::Inconclusive, format!("rank(MD) = {ell} holds but word rank = {rank} < n = {n}; sufficient condition fails, rank test is inconclusive"))
    };
    Ok(RankVerdict {
        md_rank: md.rank,
        md_ok: true,
        word_rank: rank,
        word_basis_dim_history: history,
        sufficient,
        status,
        certificate_note: note,
    })
}

/// Time-invariant coefficients `(A, B, C, D, M)` of an instance, or an error
/// if any of them varies over the tree.
pub fn constant_coefficients(data: &ProblemData) -> Result<[DMatrix<f64>; 5]> {
    fn uniform(name: &str, values: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
        let first = values.first().ok_or_else(|| Error::InvalidData(format!("{name} has no values")))?;
        if values.iter().any(|v| v != first) {
            return Err(Error::InvalidData(format!("{name} varies over the tree; rank conditions need deterministic constant coefficients")));
        }
        Ok(first.clone())
    }
    Ok([
        uniform("A", data.a.values())?,
        uniform("B", data.b.values())?,
        uniform("C", data.c.values())?,
        uniform("D", data.d.values())?,
        uniform("M", data.m.values())?,
    ])
}

/// [`surjectivity_verdict`] on the coefficients of `data`.
pub fn verdict_for(data: &ProblemData) -> Result<RankVerdict> {
    let [a, b, c, d, m] = constant_coefficients(data)?;
    surjectivity_verdict(&a, &b, &c, &d, &m)
}
