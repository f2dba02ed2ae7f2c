//! Fusion-center side: rebuild an approximate global Gram matrix from the
//! agents' spectral summaries and extract its leading eigenvectors.

use nalgebra::DMatrix;

use crate::agent::AgentMessage;
use crate::kernels::{combine_partials, KernelKind, KernelSpec};
use crate::linalg::{sym_eig_topd, GramMatrix};
use crate::{Error, Result};

/// Gaps at or below this fraction of `λ₁(K)` make the error bound vacuous.
pub const GAP_TOL: f64 = 1e-12;

/// Estimated eigenvalues at or below `NORMALIZE_TOL · max(1, λ̂₁)` cannot be
/// used to normalize projections.
pub const NORMALIZE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetadata {
    pub kernel: KernelSpec,
    pub samples: usize,
    pub rank: usize,
    /// `(agent_id, d_j)` in ascending agent-id order. Empty when the
    /// estimate was not built from agent messages.
    pub agent_ranks: Vec<(u32, usize)>,
}

impl RunMetadata {
    pub fn agents(&self) -> usize {
        self.agent_ranks.len()
    }

    /// `Σ_j d_j`, the number of local eigenvectors transmitted.
    pub fn transmitted_vectors(&self) -> usize {
        self.agent_ranks.iter().map(|&(_, d)| d).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub k_hat: GramMatrix,
    /// `T × D`, orthonormal.
    pub v_hat: DMatrix<f64>,
    /// Non-increasing, length `D`.
    pub lambda_hat: Vec<f64>,
    pub meta: RunMetadata,
}

/// Sorts messages by agent id after checking they are non-empty, share `T`
/// and come from distinct agents.
fn canonical_order(messages: &[AgentMessage]) -> Result<Vec<&AgentMessage>> {
    let first = messages.first().ok_or_else(|| Error::input("no agent messages to aggregate"))?;
    let t = first.samples();
    if let Some(bad) = messages.iter().find(|m| m.samples() != t) {
        return Err(Error::input(format!("agent {} reports T = {} but agent {} reports T = {t}", bad.agent_id, bad.samples(), first.agent_id)));
    }
    let mut sorted: Vec<&AgentMessage> = messages.iter().collect();
    sorted.sort_by_key(|m| m.agent_id);
    if let Some(dup) = sorted.windows(2).find(|w| w[0].agent_id == w[1].agent_id) {
        return Err(Error::Protocol(format!("duplicate message from agent {}", dup[0].agent_id)));
    }
    Ok(sorted)
}

/// `K̂`: sum of local reconstructions for the linear kernel, their Hadamard
/// product for RBF. Messages are folded in ascending agent-id order and the
/// result is symmetrized.
pub fn aggregate(messages: &[AgentMessage], spec: &KernelSpec) -> Result<GramMatrix> {
    spec.validate()?;
    let sorted = canonical_order(messages)?;
    let locals: Vec<DMatrix<f64>> = sorted.iter().map(|m| m.reconstruct()).collect();
    let k_hat = combine_partials(&locals, spec.kind()).expect("at least one message");
    GramMatrix::symmetrized(k_hat)
}

/// Leading `d` eigenvectors of `k_hat`. The metadata carries no agent ranks.
pub fn global_truncation(k_hat: GramMatrix, d: usize, spec: KernelSpec) -> Result<FusionResult> {
    let top = sym_eig_topd(&k_hat, d)?;
    let samples = k_hat.order();
    Ok(FusionResult {
        k_hat,
        v_hat: top.eigenvectors,
        lambda_hat: top.eigenvalues,
        meta: RunMetadata { kernel: spec, samples, rank: d, agent_ranks: Vec::new() },
    })
}

/// Aggregation followed by global truncation, with per-agent ranks recorded.
pub fn fuse(messages: &[AgentMessage], spec: &KernelSpec, d: usize) -> Result<FusionResult> {
    let k_hat = aggregate(messages, spec)?;
    let mut result = global_truncation(k_hat, d, *spec)?;
    let mut ranks: Vec<(u32, usize)> = messages.iter().map(|m| (m.agent_id, m.rank())).collect();
    ranks.sort_unstable();
    result.meta.agent_ranks = ranks;
    Ok(result)
}

/// Worst-case subspace error bound for the one-shot estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub kind: KernelKind,
    pub agents: usize,
    pub samples: usize,
    pub rank: usize,
    /// `max_j` of each agent's first discarded local eigenvalue.
    pub max_local_tail: f64,
    /// `λ_D(K) − λ_{D+1}(K)`.
    pub gap: f64,
    /// Upper bound on `‖sin Θ(V, V̂)‖_F`; infinite when the gap is degenerate.
    pub bound_value: f64,
}

impl BoundReport {
    pub fn is_vacuous(&self) -> bool {
        self.bound_value.is_infinite()
    }
}

/// `J · √(T − D) · max_tail / gap` for linear kernels, `J · √T · max_tail /
/// gap` for RBF.
///
/// `local_tails[j]` is the largest eigenvalue agent `j` left out (0 for an
/// agent that sent its full spectrum). `global_spectrum` is `λ(K)`,
/// descending, with at least `D + 1` entries.
pub fn subspace_bound(local_tails: &[f64], global_spectrum: &[f64], agents: usize, samples: usize, rank: usize, kind: KernelKind) -> Result<BoundReport> {
    if rank == 0 || rank + 1 > samples {
        return Err(Error::input(format!("bound needs 1 <= D < T, got D = {rank}, T = {samples}")));
    }
    if global_spectrum.len() < rank + 1 {
        return Err(Error::input(format!("global spectrum has {} entries, need {}", global_spectrum.len(), rank + 1)));
    }
    if let Some(bad) = local_tails.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::input(format!("local tail eigenvalues must be non-negative, got {bad}")));
    }
    let max_local_tail = local_tails.iter().copied().fold(0.0, f64::max);
    let gap = global_spectrum[rank - 1] - global_spectrum[rank];
    let scale = GAP_TOL * global_spectrum[0].abs();
    let bound_value = if gap <= scale || gap <= 0.0 {
        f64::INFINITY
    } else {
        let width = match kind {
            KernelKind::Linear => (samples - rank) as f64,
            KernelKind::Rbf => samples as f64,
        };
        agents as f64 * width.sqrt() * max_local_tail / gap
    };
    Ok(BoundReport { kind, agents, samples, rank, max_local_tail, gap, bound_value })
}

/// Projects `S` query points onto the estimated components.
///
/// `partials` holds one `T × S` partial cross-kernel per agent, keyed by
/// agent id. They are combined in agent-id order into `k(X, y)` and the
/// result is `V̂ᵀ k(X, y)`, optionally scaled row-wise by `1/√λ̂_d`.
pub fn project(result: &FusionResult, partials: &[(u32, DMatrix<f64>)], normalize: bool) -> Result<DMatrix<f64>> {
    let t = result.meta.samples;
    let d = result.meta.rank;
    let mut sorted: Vec<&(u32, DMatrix<f64>)> = partials.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    if let Some(dup) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Protocol(format!("duplicate partial kernel from agent {}", dup[0].0)));
    }
    if !result.meta.agent_ranks.is_empty() {
        for &(id, _) in &result.meta.agent_ranks {
            if !sorted.iter().any(|(pid, _)| *pid == id) {
                return Err(Error::Protocol(format!("missing partial kernel from agent {id}")));
            }
        }
        if let Some((extra, _)) = sorted.iter().find(|(pid, _)| !result.meta.agent_ranks.iter().any(|&(id, _)| id == *pid)) {
            return Err(Error::Protocol(format!("partial kernel from unknown agent {extra}")));
        }
    }
    let first = sorted.first().ok_or_else(|| Error::Protocol("no partial kernels supplied".into()))?;
    let s = first.1.ncols();
    if let Some((id, m)) = sorted.iter().map(|p| (&p.0, &p.1)).find(|(_, m)| m.nrows() != t || m.ncols() != s) {
        return Err(Error::input(format!("partial kernel from agent {id} is {}x{}, expected {t}x{s}", m.nrows(), m.ncols())));
    }
    if s == 0 {
        return Ok(DMatrix::zeros(d, 0));
    }
    let cross = combine_partials(sorted.iter().map(|p| &p.1), result.meta.kernel.kind()).expect("non-empty");
    let mut out = result.v_hat.transpose() * cross;
    if normalize {
        let tol = NORMALIZE_TOL * result.lambda_hat.first().copied().unwrap_or(0.0).max(1.0);
        for (k, &lambda) in result.lambda_hat.iter().enumerate() {
            if lambda <= tol {
                return Err(Error::Numerical {
                    message: format!("component {} has eigenvalue {lambda:.3e}, too small to normalize", k + 1),
                    iterations: 0,
                });
            }
            out.row_mut(k).scale_mut(1.0 / lambda.sqrt());
        }
    }
    Ok(out)
}
