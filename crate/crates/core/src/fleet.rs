//! Fleet composition and the cost side of the utility objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients of the training-cost model.
///
/// Twin construction costs `alpha * exp(beta * delta)`; with `beta <= 0` a
/// more accurate twin (smaller `delta`) is more expensive. Every physical UAV
/// costs `zeta` (hardware, flight energy and synchronization traffic lumped
/// together). `eta` converts rate into utility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwinEconomics {
    pub alpha: f64,
    pub beta: f64,
    pub zeta: f64,
    pub eta: f64,
}

impl Default for TwinEconomics {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            beta: -1.0,
            zeta: 10.0,
            eta: 1.0,
        }
    }
}

impl TwinEconomics {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.beta, self.zeta, self.eta]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain("economics coefficients must be finite"));
        }
        if self.alpha < 0.0 {
            return Err(Error::domain(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.beta > 0.0 {
            return Err(Error::domain(format!("beta must be <= 0, got {}", self.beta)));
        }
        if self.zeta < 0.0 {
            return Err(Error::domain(format!("zeta must be >= 0, got {}", self.zeta)));
        }
        if self.eta <= 0.0 {
            return Err(Error::domain(format!("eta must be > 0, got {}", self.eta)));
        }
        Ok(())
    }

    /// Scales both cost coefficients (`alpha` and `zeta`) by `weight`.
    pub fn with_cost_weight(&self, weight: f64) -> Self {
        Self {
            alpha: self.alpha * weight,
            zeta: self.zeta * weight,
            ..*self
        }
    }
}

/// How many of the `total` UAVs fly physically, and how noisy the twin is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub total: usize,
    pub physical: usize,
    pub twin_noise: f64,
}

impl DeploymentPlan {
    pub fn new(total: usize, physical: usize, twin_noise: f64) -> Result<Self> {
        let plan = Self {
            total,
            physical,
            twin_noise,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Every UAV physical; the twin noise is irrelevant and set to zero.
    pub fn all_physical(total: usize) -> Self {
        Self {
            total,
            physical: total,
            twin_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.physical > self.total {
            return Err(Error::domain(format!(
                "physical UAV count {} exceeds fleet size {}",
                self.physical, self.total
            )));
        }
        if !(self.twin_noise >= 0.0 && self.twin_noise.is_finite()) {
            return Err(Error::domain(format!(
                "twin noise variance must be finite and >= 0, got {}",
                self.twin_noise
            )));
        }
        Ok(())
    }

    pub fn virtual_count(&self) -> usize {
        self.total - self.physical
    }

    pub fn uses_twin(&self) -> bool {
        self.physical < self.total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UavKind {
    Physical,
    Virtual,
}

pub fn construction_cost(econ: &TwinEconomics, plan: &DeploymentPlan) -> f64 {
    // An all-physical fleet builds no twin.
    if !plan.uses_twin() {
        return 0.0;
    }
    econ.alpha * (econ.beta * plan.twin_noise).exp()
}

pub fn deployment_cost(econ: &TwinEconomics, plan: &DeploymentPlan) -> f64 {
    econ.zeta * plan.physical as f64
}

/// Rate benefit minus construction and deployment costs.
///
/// `mean_sum_rate` is the time-averaged sum rate measured with the trained
/// policy flying physically.
pub fn utility(econ: &TwinEconomics, plan: &DeploymentPlan, mean_sum_rate: f64) -> f64 {
    econ.eta * mean_sum_rate - construction_cost(econ, plan) - deployment_cost(econ, plan)
}

/// Labels UAVs physical-first: indices `0..K` fly, the rest live in the twin.
pub fn split_fleet(plan: &DeploymentPlan) -> Vec<UavKind> {
    (0..plan.total)
        .map(|j| {
            if j < plan.physical {
                UavKind::Physical
            } else {
                UavKind::Virtual
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;
    use UavKind::{Physical as P, Virtual as V};

    fn econ(alpha: f64, beta: f64, zeta: f64, eta: f64) -> TwinEconomics {
        TwinEconomics {
            alpha,
            beta,
            zeta,
            eta,
        }
    }

    fn plan(m: usize, k: usize, delta: f64) -> DeploymentPlan {
        DeploymentPlan::new(m, k, delta).unwrap()
    }

    #[test]
    fn construction_cost_examples() {
        assert_eq!(construction_cost(&econ(2.0, -1.0, 0.0, 1.0), &plan(4, 1, 0.0)), 2.0);
        assert_relative_eq!(
            construction_cost(&econ(1.0, -0.5, 0.0, 1.0), &plan(4, 0, 0.8)),
            0.670_320_046_035_639_3,
            max_relative = 1e-14
        );
        assert_eq!(construction_cost(&econ(5.0, -0.3, 1.0, 1.0), &plan(4, 4, 0.2)), 0.0);
    }

    #[test]
    fn deployment_cost_examples() {
        assert_eq!(deployment_cost(&econ(0.0, 0.0, 3.0, 1.0), &plan(4, 2, 0.0)), 6.0);
        assert_eq!(deployment_cost(&econ(0.0, 0.0, 3.0, 1.0), &plan(4, 0, 0.0)), 0.0);
        assert_eq!(deployment_cost(&econ(0.0, 0.0, 0.5, 1.0), &plan(4, 4, 0.0)), 2.0);
    }

    #[test]
    fn utility_examples() {
        assert_relative_eq!(
            utility(&econ(2.0, -1.0, 3.0, 1.0), &plan(4, 2, 1.0), 100.0),
            93.264_241_117_657_12,
            max_relative = 1e-14
        );
        assert_eq!(utility(&econ(0.0, -1.0, 0.0, 1.0), &plan(4, 0, 0.3), 0.0), 0.0);
        assert_eq!(utility(&econ(7.0, -1.0, 3.0, 2.0), &plan(4, 4, 0.5), 50.0), 100.0 - 12.0);
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_fleet(&plan(4, 4, 0.0)), vec![P, P, P, P]);
        assert_eq!(split_fleet(&plan(4, 0, 0.0)), vec![V, V, V, V]);
        assert_eq!(split_fleet(&plan(5, 3, 0.0)), vec![P, P, P, V, V]);
    }

    #[test]
    fn invalid_plans_rejected() {
        assert!(DeploymentPlan::new(4, 5, 0.0).is_err());
        assert!(DeploymentPlan::new(4, 2, -0.1).is_err());
        assert!(econ(1.0, 0.5, 1.0, 1.0).validate().is_err());
        assert!(econ(-1.0, -0.5, 1.0, 1.0).validate().is_err());
        assert!(econ(1.0, -0.5, 1.0, 0.0).validate().is_err());
    }

    proptest! {
        #[test]
        fn construction_cost_non_increasing(alpha in 0.0..50.0f64, beta in -5.0..-1e-3f64, d in 0.0..5.0f64, dd in 0.0..5.0f64) {
            let e = econ(alpha, beta, 1.0, 1.0);
            prop_assert!(construction_cost(&e, &plan(4, 1, d + dd)) <= construction_cost(&e, &plan(4, 1, d)));
        }

        #[test]
        fn utility_monotone(rate in 0.0..1e4f64, extra in 1e-3..100.0f64, k in 0usize..3, zeta in 1e-3..10.0f64) {
            // K + 1 < M: the all-physical plan drops the construction term.
            let e = econ(1.0, -1.0, zeta, 1.0);
            prop_assert!(utility(&e, &plan(4, k + 1, 0.5), rate) < utility(&e, &plan(4, k, 0.5), rate));
            prop_assert!(utility(&e, &plan(4, k, 0.5), rate + extra) > utility(&e, &plan(4, k, 0.5), rate));
        }

        #[test]
        fn split_counts(m in 0usize..12, k_frac in 0.0..=1.0f64) {
            let k = (m as f64 * k_frac).floor() as usize;
            let labels = split_fleet(&plan(m, k, 0.0));
            prop_assert_eq!(labels.iter().filter(|l| **l == P).count(), k);
            prop_assert_eq!(labels.iter().filter(|l| **l == V).count(), m - k);
        }
    }
}
