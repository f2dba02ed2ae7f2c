//! Local-agent side of the one-shot exchange.
//!
//! An agent turns its private feature block into a spectral summary of its
//! local Gram matrix. Only eigenvalues and eigenvectors leave the agent.

use nalgebra::DMatrix;

use crate::kernels::{gram, FeatureBlock, KernelSpec};
use crate::linalg::{low_rank_product, sym_eig_full, SpectralTruncation};
use crate::{Error, Result};

/// How many local eigenpairs an agent transmits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankPolicy {
    Fixed(usize),
    /// Send every pair whose eigenvalue exceeds `eps_ratio · λ₁` of the
    /// agent's own spectrum (at least one pair).
    Adaptive { eps_ratio: f64 },
}

/// Smallest `D` such that every discarded eigenvalue is `≤ epsilon`, capped
/// at the spectrum length and floored at 1.
///
/// `eigenvalues` must be the full local spectrum in non-increasing order.
pub fn adaptive_d(eigenvalues: &[f64], epsilon: f64) -> Result<usize> {
    if eigenvalues.is_empty() {
        return Err(Error::input("adaptive rank needs a non-empty spectrum"));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::input(format!("adaptive threshold must be positive, got {epsilon}")));
    }
    if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::input("spectrum must be sorted non-increasing"));
    }
    // λ_{D+1} ≤ ε first holds at the first index whose eigenvalue is ≤ ε.
    let d = eigenvalues.iter().position(|&l| l <= epsilon).unwrap_or(eigenvalues.len());
    Ok(d.max(1))
}

/// Subtracts each feature's mean over the samples.
pub fn center_features(block: &FeatureBlock) -> Result<FeatureBlock> {
    let mut values = block.values.clone();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::input(format!("feature block {} has non-finite values", block.agent_id)));
    }
    for mut row in values.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    Ok(FeatureBlock { agent_id: block.agent_id, values, centered: true })
}

/// The one-shot payload: the leading local eigenpairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentMessage {
    pub agent_id: u32,
    /// Non-increasing, length `d_j`.
    pub eigenvalues: Vec<f64>,
    /// `T × d_j` with orthonormal columns.
    pub eigenvectors: DMatrix<f64>,
}

impl AgentMessage {
    pub fn samples(&self) -> usize {
        self.eigenvectors.nrows()
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Scalars carried: `d_j · (T + 1)`.
    pub fn scalar_count(&self) -> usize {
        self.rank() * (self.samples() + 1)
    }

    /// The implied local approximation `V diag(λ) Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        low_rank_product(&self.eigenvectors, &self.eigenvalues)
    }
}

/// What an agent computes locally. The message is what gets transmitted;
/// the other fields stay on the agent and are used for diagnostics only.
#[derive(Debug, Clone)]
pub struct LocalSolution {
    pub message: AgentMessage,
    /// `λ₁` of the local Gram matrix.
    pub leading_eigenvalue: f64,
    /// First discarded eigenvalue `λ_{d_j+1}`, clamped at 0; 0 when every pair was sent.
    pub first_discarded: f64,
    /// The threshold used by an adaptive policy.
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub block: FeatureBlock,
    pub spec: KernelSpec,
    pub policy: RankPolicy,
    /// Mean-center the block before building the local Gram matrix unless it
    /// is already flagged as centered.
    pub center: bool,
}

impl AgentState {
    pub fn new(block: FeatureBlock, spec: KernelSpec, policy: RankPolicy) -> Result<Self> {
        spec.validate()?;
        let t = block.samples();
        match policy {
            RankPolicy::Fixed(d) if d == 0 || d > t => {
                return Err(Error::input(format!("agent {}: fixed rank {d} outside 1..={t}", block.agent_id)));
            }
            RankPolicy::Adaptive { eps_ratio } if !(eps_ratio.is_finite() && eps_ratio > 0.0) => {
                return Err(Error::input(format!("agent {}: adaptive ratio must be positive, got {eps_ratio}", block.agent_id)));
            }
            _ => {}
        }
        Ok(AgentState { block, spec, policy, center: true })
    }

    pub fn agent_id(&self) -> u32 {
        self.block.agent_id
    }

    pub fn without_centering(mut self) -> Self {
        self.center = false;
        self
    }

    /// Local Gram matrix, full eigendecomposition, rank selection.
    pub fn solve(&self) -> Result<LocalSolution> {
        let centered;
        let block = if self.center && !self.block.centered {
            centered = center_features(&self.block)?;
            &centered
        } else {
            &self.block
        };
        let local = gram(block, &self.spec)?;
        let full = sym_eig_full(&local)?;
        let leading = full.eigenvalues[0];

        let (d, epsilon) = match self.policy {
            RankPolicy::Fixed(d) => (d, None),
            RankPolicy::Adaptive { eps_ratio } => {
                if leading <= 0.0 {
                    (1, None)
                } else {
                    let eps = eps_ratio * leading;
                    (adaptive_d(&full.eigenvalues, eps)?, Some(eps))
                }
            }
        };
        let first_discarded = full.eigenvalues.get(d).map_or(0.0, |l| l.max(0.0));
        let SpectralTruncation { eigenvalues, eigenvectors } = full.truncate(d)?;
        Ok(LocalSolution {
            message: AgentMessage { agent_id: self.agent_id(), eigenvalues, eigenvectors },
            leading_eigenvalue: leading,
            first_discarded,
            epsilon,
        })
    }
}

/// Builds the message agent `state` sends to the fusion center.
pub fn local_truncation(state: &AgentState) -> Result<AgentMessage> {
    state.solve().map(|s| s.message)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::gram_of;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_values(m: usize, t: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, t, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn adaptive_examples() {
        assert_eq!(adaptive_d(&[5.0, 3.0, 0.01], 0.02).unwrap(), 2);
        assert_eq!(adaptive_d(&[5.0, 3.0, 1.0], 0.5).unwrap(), 3);
        assert_eq!(adaptive_d(&[0.001, 0.0001], 0.01).unwrap(), 1);
    }

    #[test]
    fn adaptive_errors() {
        assert!(matches!(adaptive_d(&[], 0.1), Err(Error::Input(_))));
        assert!(matches!(adaptive_d(&[1.0], 0.0), Err(Error::Input(_))));
        assert!(matches!(adaptive_d(&[1.0, 2.0], 0.1), Err(Error::Input(_))));
    }

    #[test]
    fn centering() {
        let b = FeatureBlock::new(0, DMatrix::from_row_slice(1, 2, &[1.0, 3.0])).unwrap();
        let c = center_features(&b).unwrap();
        assert!(c.centered);
        assert_eq!(c.values, DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]));
        let again = center_features(&c).unwrap();
        assert!((&again.values - &c.values).amax() <= 1e-12);

        let r = center_features(&FeatureBlock::new(3, random_values(5, 11, 4)).unwrap()).unwrap();
        for row in r.values.row_iter() {
            assert!(row.mean().abs() <= 1e-10);
        }
    }

    #[test]
    fn full_rank_message_reconstructs_local_gram() {
        let block = FeatureBlock::new(2, random_values(3, 6, 1)).unwrap();
        for spec in [KernelSpec::Linear, KernelSpec::rbf(1.0).unwrap()] {
            let state = AgentState::new(block.clone(), spec, RankPolicy::Fixed(6)).unwrap();
            let sol = state.solve().unwrap();
            let local = gram(&center_features(&block).unwrap(), &spec).unwrap();
            let err = (sol.message.reconstruct() - local.as_matrix()).norm();
            assert!(err <= 1e-8 * local.frobenius_norm());
            assert_eq!(sol.first_discarded, 0.0);
            assert_eq!(sol.message.agent_id, 2);
        }
    }

    #[test]
    fn fixed_two_on_diagonal_spectrum() {
        // Samples are scaled coordinate vectors, so the linear local Gram is diag(9, 4, 1, 0).
        let values = DMatrix::from_row_slice(3, 4, &[3.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let block = FeatureBlock::new(0, values).unwrap();
        let state = AgentState::new(block, KernelSpec::Linear, RankPolicy::Fixed(2)).unwrap().without_centering();
        let sol = state.solve().unwrap();
        assert!((sol.message.eigenvalues[0] - 9.0).abs() < 1e-12);
        assert!((sol.message.eigenvalues[1] - 4.0).abs() < 1e-12);
        assert!((sol.message.eigenvectors[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((sol.message.eigenvectors[(1, 1)].abs() - 1.0).abs() < 1e-12);
        assert!((sol.first_discarded - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_policy_on_planted_spectrum() {
        // Orthogonal samples with squared norms 5, 3, 0.01 give that exact local spectrum.
        let values = DMatrix::from_row_slice(3, 3, &[5f64.sqrt(), 0.0, 0.0, 0.0, 3f64.sqrt(), 0.0, 0.0, 0.0, 0.1]);
        let block = FeatureBlock::new(0, values).unwrap();
        // threshold 0.02 = ratio · λ₁ with λ₁ = 5
        let state = AgentState::new(block, KernelSpec::Linear, RankPolicy::Adaptive { eps_ratio: 0.004 }).unwrap().without_centering();
        let sol = state.solve().unwrap();
        assert_eq!(sol.message.rank(), 2);
        assert!((sol.epsilon.unwrap() - 0.02).abs() < 1e-12);
    }

    #[test]
    fn state_validation() {
        let block = FeatureBlock::new(0, random_values(2, 4, 0)).unwrap();
        assert!(AgentState::new(block.clone(), KernelSpec::Linear, RankPolicy::Fixed(0)).is_err());
        assert!(AgentState::new(block.clone(), KernelSpec::Linear, RankPolicy::Fixed(5)).is_err());
        assert!(AgentState::new(block.clone(), KernelSpec::Linear, RankPolicy::Adaptive { eps_ratio: 0.0 }).is_err());
        assert!(AgentState::new(block, KernelSpec::Rbf { sigma: -1.0 }, RankPolicy::Fixed(1)).is_err());
    }

    #[test]
    fn message_size_and_lossless_above_rank() {
        let block = FeatureBlock::new(1, random_values(3, 10, 7)).unwrap();
        let state = AgentState::new(block.clone(), KernelSpec::Linear, RankPolicy::Fixed(4)).unwrap();
        let msg = local_truncation(&state).unwrap();
        assert_eq!(msg.scalar_count(), 4 * 11);
        // three centered features: rank ≤ 3 < 4
        let local = gram_of(&center_features(&block).unwrap().values, &KernelSpec::Linear).unwrap();
        assert!((msg.reconstruct() - local.as_matrix()).norm() <= 1e-8 * local.frobenius_norm());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn spectrum() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0f64..10.0, 1..12).prop_map(|mut v| {
                v.sort_by(|a, b| b.total_cmp(a));
                v
            })
        }

        proptest! {
            #[test]
            fn monotone_in_epsilon(l in spectrum(), e1 in 1e-6f64..5.0, e2 in 1e-6f64..5.0) {
                let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
                let d_lo = adaptive_d(&l, lo).unwrap();
                let d_hi = adaptive_d(&l, hi).unwrap();
                prop_assert!(d_hi <= d_lo);
                prop_assert!(d_lo >= 1 && d_lo <= l.len());
            }

            #[test]
            fn monotone_in_spectrum(l in spectrum(), bump in proptest::collection::vec(0.0f64..2.0, 12), eps in 1e-3f64..3.0) {
                // adding a non-increasing bump keeps the spectrum sorted
                let mut bump: Vec<f64> = bump[..l.len()].to_vec();
                bump.sort_by(|a, b| b.total_cmp(a));
                let raised: Vec<f64> = l.iter().zip(&bump).map(|(a, b)| a + b).collect();
                prop_assert!(adaptive_d(&raised, eps).unwrap() >= adaptive_d(&l, eps).unwrap());
            }
        }
    }
}
