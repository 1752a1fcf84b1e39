//! Training objective: reconstruction plus a β-weighted, free-bit hinged KL.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::Session;

/// Scalar components of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub rec_nats: f64,
    /// Σᵢ KLᵢ before the hinge.
    pub kl_raw: f64,
    pub kl_hinged: f64,
    pub beta: f64,
    pub total: f64,
    pub token_count: usize,
}

/// `max(λ, Σᵢ klᵢ)` on plain values.
pub fn free_bit_kl(kl_per_dim: &[f64], lambda: f64) -> f64 {
    debug_assert!(lambda >= 0.0);
    kl_per_dim.iter().sum::<f64>().max(lambda)
}

/// Hinge on the whole KL term. At the tie the gradient passes through.
pub fn free_bit_kl_var(s: &mut Session, kl_per_dim: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("free-bit threshold must be >= 0, got {lambda}")));
    }
    let total = s.graph.sum(kl_per_dim)?;
    s.graph.hinge_max(total, lambda)
}

/// `rec + β·max(λ, Σ KL)` with every component reported.
pub fn total_loss(rec_nats: f64, kl_per_dim: &[f64], beta: f64, lambda: f64, token_count: usize) -> LossBreakdown {
    let kl_raw = kl_per_dim.iter().sum::<f64>();
    let kl_hinged = kl_raw.max(lambda);
    LossBreakdown {
        rec_nats,
        kl_raw,
        kl_hinged,
        beta,
        total: rec_nats + beta * kl_hinged,
        token_count,
    }
}

/// Exact negative ELBO for one sentence with a single posterior sample:
/// `total_loss` at β = 1, λ = 0.
pub fn neg_elbo(rec_nats: f64, kl_per_dim: &[f64]) -> f64 {
    total_loss(rec_nats, kl_per_dim, 1.0, 0.0, 0).total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn hinge_values() {
        assert_eq!(free_bit_kl(&[0.1, 0.2], 0.5), 0.5);
        assert_eq!(free_bit_kl(&[0.3, 0.5], 0.5), 0.8);
    }

    #[test]
    fn total_arithmetic() {
        let b = total_loss(2.0, &[0.5, 0.3], 0.5, 0.5, 7);
        assert!((b.total - 2.4).abs() < 1e-12);
        assert!((b.kl_raw - 0.8).abs() < 1e-12);
        assert_eq!(total_loss(2.0, &[5.0], 0.0, 0.5, 1).total, 2.0);
        assert_eq!(neg_elbo(1.5, &[0.25, 0.25]), 2.0);
    }

    #[test]
    fn hinge_gradient_below_above_and_at_tie() {
        let st = ParamStore::new();
        for (kl, lambda, want) in [
            (vec![0.1, 0.2], 0.5, 0.0),
            (vec![0.3, 0.5], 0.5, 1.0),
            (vec![0.25, 0.25], 0.5, 1.0),
        ] {
            let mut s = Session::new(&st, None);
            let x = s.graph.variable(Tensor::row(kl));
            let h = free_bit_kl_var(&mut s, x, lambda).unwrap();
            let g = s.graph.backward(h).unwrap();
            assert_eq!(g.get(x).unwrap(), &[want, want]);
        }
    }
}
