//! Kernel functions and Gram construction over feature blocks.
//!
//! Both supported kernels split along features. For the linear kernel the
//! global Gram matrix is the sum of the per-block Gram matrices; for the RBF
//! kernel, as long as every block uses the same width, it is their Hadamard
//! product. That identity is what lets the fusion center work from local
//! summaries alone.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::GramMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Rbf,
}

impl KernelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::Linear => "linear",
            KernelKind::Rbf => "rbf",
        }
    }
}

/// A kernel and its parameters. The RBF width is shared by every agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    Linear,
    Rbf { sigma: f64 },
}

impl KernelSpec {
    pub fn rbf(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::input(format!("RBF width must be positive and finite, got {sigma}")));
        }
        Ok(KernelSpec::Rbf { sigma })
    }

    /// RBF with `σ = √M / 3`.
    pub fn rbf_default(total_features: usize) -> Result<Self> {
        KernelSpec::rbf((total_features as f64).sqrt() / 3.0)
    }

    pub fn kind(&self) -> KernelKind {
        match self {
            KernelSpec::Linear => KernelKind::Linear,
            KernelSpec::Rbf { .. } => KernelKind::Rbf,
        }
    }

    /// The width for RBF, 0 for linear.
    pub fn sigma(&self) -> f64 {
        match *self {
            KernelSpec::Linear => 0.0,
            KernelSpec::Rbf { sigma } => sigma,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Rbf { sigma } => KernelSpec::rbf(sigma).map(|_| ()),
        }
    }

    /// Kernel value from the per-block inner product or squared distance.
    fn eval(&self, inner: f64, sq_dist: f64) -> f64 {
        match *self {
            KernelSpec::Linear => inner,
            KernelSpec::Rbf { sigma } => (-sq_dist.max(0.0) / (2.0 * sigma * sigma)).exp(),
        }
    }
}

/// One agent's private slice of the data: `M_j` features by `T` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub agent_id: u32,
    /// `M_j × T`; column `i` is sample `i` restricted to this block.
    pub values: DMatrix<f64>,
    /// Set once every feature row has been mean-centered.
    pub centered: bool,
}

impl FeatureBlock {
    pub fn new(agent_id: u32, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::input(format!("feature block {agent_id} is empty ({}x{})", values.nrows(), values.ncols())));
        }
        check_finite(&values, "feature block")?;
        Ok(FeatureBlock { agent_id, values, centered: false })
    }

    pub fn features(&self) -> usize {
        self.values.nrows()
    }

    pub fn samples(&self) -> usize {
        self.values.ncols()
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    match m.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::input(format!("{what} has non-finite value {v}"))),
        None => Ok(()),
    }
}

fn column_terms(x: &DMatrix<f64>, p: usize, y: &DMatrix<f64>, q: usize) -> (f64, f64) {
    let (mut inner, mut sq) = (0.0, 0.0);
    for (a, b) in x.column(p).iter().zip(y.column(q).iter()) {
        inner += a * b;
        let diff = a - b;
        sq += diff * diff;
    }
    (inner, sq)
}

/// Gram matrix of the columns of `values` (features × samples).
pub fn gram_of(values: &DMatrix<f64>, spec: &KernelSpec) -> Result<GramMatrix> {
    spec.validate()?;
    check_finite(values, "data")?;
    let t = values.ncols();
    if t == 0 {
        return Err(Error::input("no samples"));
    }
    let mut out = DMatrix::zeros(t, t);
    for p in 0..t {
        for q in p..t {
            let k = if p == q && spec.kind() == KernelKind::Rbf {
                1.0
            } else {
                let (inner, sq) = column_terms(values, p, values, q);
                spec.eval(inner, sq)
            };
            out[(p, q)] = k;
            out[(q, p)] = k;
        }
    }
    GramMatrix::new(out)
}

/// Local Gram matrix `K^(j)` of one block.
pub fn gram(block: &FeatureBlock, spec: &KernelSpec) -> Result<GramMatrix> {
    gram_of(&block.values, spec)
}

/// Entrywise product of two Gram matrices of the same order.
pub fn hadamard(a: &GramMatrix, b: &GramMatrix) -> Result<GramMatrix> {
    if a.order() != b.order() {
        return Err(Error::input(format!("hadamard order mismatch: {} vs {}", a.order(), b.order())));
    }
    GramMatrix::new(a.as_matrix().component_mul(b.as_matrix()))
}

/// Partial cross-kernel between the block's samples and `query`
/// (`M_j × S`, same feature rows). Returns `T × S`.
pub fn cross_kernel(block: &FeatureBlock, query: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if query.nrows() != block.features() {
        return Err(Error::input(format!(
            "query has {} features but block {} has {}",
            query.nrows(),
            block.agent_id,
            block.features()
        )));
    }
    check_finite(query, "query")?;
    let (t, s) = (block.samples(), query.ncols());
    Ok(DMatrix::from_fn(t, s, |i, k| {
        let (inner, sq) = column_terms(&block.values, i, query, k);
        spec.eval(inner, sq)
    }))
}

/// Folds per-block kernel pieces into the full-data kernel: sum for linear,
/// entrywise product for RBF. Pieces are combined in the order given.
pub fn combine_partials<'a, I>(parts: I, kind: KernelKind) -> Option<DMatrix<f64>>
where
    I: IntoIterator<Item = &'a DMatrix<f64>>,
{
    let mut iter = parts.into_iter();
    let mut acc = iter.next()?.clone();
    for part in iter {
        match kind {
            KernelKind::Linear => acc += part,
            KernelKind::Rbf => acc.component_mul_assign(part),
        }
    }
    Some(acc)
}
