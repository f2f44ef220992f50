//! Splitting one request's (ε, δ) across the mechanisms of a plan.

use serde::Serialize;

use crate::accountant::MechanismEvent;
use crate::catalog::{PrivacyPolicy, WeightStrategy};
use crate::mechanisms::{
    calibrate_sigma, granularity_for, optimize_weights, pilot_from_bounds, sensitivity_for, AggregateKind,
    EstimatorWeights, NoiseSpec, Quantity, SensitivityProfile,
};
use crate::thresholding::{calibrate_tau, ThresholdParams};
use crate::validator::QueryPlanSummary;

use super::{EngineError, EngineOptions};

/// One Gaussian mechanism.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseReport {
    pub label: String,
    pub quantity: Quantity,
    pub epsilon: f64,
    pub delta: f64,
    pub sigma: f64,
    pub sensitivity: SensitivityProfile,
    pub granularity: f64,
}

impl NoiseReport {
    pub(crate) fn spec(&self) -> NoiseSpec {
        NoiseSpec::new(self.sigma, self.granularity).expect("calibrated sigma is positive")
    }

    fn event(&self) -> MechanismEvent {
        MechanismEvent::gaussian(self.sigma, self.sensitivity.global_l2, self.label.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub k: u32,
    /// `None` when only the exact rule applies.
    pub tau: Option<f64>,
    pub delta_threshold: f64,
    /// Noisy count of distinct users per partition.
    pub count: NoiseReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub alias: String,
    pub kind: AggregateKind,
    /// Budget shares of the noisy quantities, in estimator order.
    pub weights: Vec<f64>,
    pub noise: Vec<NoiseReport>,
    /// Released as the thresholding count; costs nothing extra.
    pub reuses_threshold_count: bool,
}

/// Noise parameters of one request. Contains no data values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MechanismReport {
    pub epsilon: f64,
    pub delta: f64,
    pub threshold: Option<ThresholdReport>,
    pub aggregates: Vec<AggregateReport>,
}

impl MechanismReport {
    /// Everything the ledger is charged for this request.
    pub fn events(&self) -> Vec<MechanismEvent> {
        let mut out = Vec::new();
        if let Some(t) = &self.threshold {
            out.push(t.count.event().with_delta_infinity(t.delta_threshold));
        }
        for a in &self.aggregates {
            out.extend(a.noise.iter().map(NoiseReport::event));
        }
        out
    }

    pub fn threshold_params(&self, policy: &PrivacyPolicy) -> ThresholdParams {
        match &self.threshold {
            Some(t) => match t.tau {
                Some(tau) => ThresholdParams {
                    k: t.k,
                    tau,
                    sigma_count: t.count.sigma,
                    delta_threshold: t.delta_threshold,
                    c_part: policy.max_partitions_per_user,
                },
                None => ThresholdParams::exact_only(t.k, policy.max_partitions_per_user),
            },
            None => ThresholdParams::exact_only(policy.k_min, policy.max_partitions_per_user),
        }
    }

    /// Sum of the ε shares of every charged mechanism.
    pub fn epsilon_total(&self) -> f64 {
        let t = self.threshold.as_ref().map_or(0.0, |t| t.count.epsilon);
        t + self.aggregates.iter().flat_map(|a| &a.noise).map(|n| n.epsilon).sum::<f64>()
    }

    /// Gaussian δ shares plus the thresholding δ.
    pub fn delta_total(&self) -> f64 {
        let t = self.threshold.as_ref().map_or(0.0, |t| t.count.delta + t.delta_threshold);
        t + self.aggregates.iter().flat_map(|a| &a.noise).map(|n| n.delta).sum::<f64>()
    }
}

fn reuses_count(kind: AggregateKind, args: usize, policy: &PrivacyPolicy) -> bool {
    // With one row per user and partition, the row count is the user count.
    kind == AggregateKind::Count && args == 0 && policy.max_rows_per_user_per_partition == 1
}

/// Grouped queries spend `f_count` of ε on the distinct-user count that
/// drives thresholding and split the rest equally across aggregates, then
/// across each aggregate's quantities by its weights. δ goes
/// `delta_noise_frac` to the Gaussians (equally) and the rest to the
/// threshold. Scalar queries have a single public partition, so they skip
/// the noisy threshold and give everything to the aggregates.
pub fn plan_mechanisms(
    summary: &QueryPlanSummary,
    policy: &PrivacyPolicy,
    epsilon: f64,
    delta: f64,
    options: &EngineOptions,
) -> Result<MechanismReport, EngineError> {
    let caps = policy.caps();
    let grouped = !summary.group_keys.is_empty();
    let split = policy.budget_split;

    let own: Vec<usize> = summary
        .aggregates
        .iter()
        .enumerate()
        .filter(|(_, a)| !(grouped && reuses_count(a.kind, a.args.len(), policy)))
        .map(|(i, _)| i)
        .collect();
    let gaussians =
        usize::from(grouped) + own.iter().map(|&i| summary.aggregates[i].kind.quantities().len()).sum::<usize>();

    let (eps_count, delta_noise) = match (grouped, own.is_empty()) {
        (false, _) => (0.0, delta),
        (true, true) => (epsilon, delta * split.delta_noise_frac),
        (true, false) => (epsilon * split.f_count, delta * split.delta_noise_frac),
    };
    let eps_agg = epsilon - eps_count;
    let delta_each = delta_noise / gaussians.max(1) as f64;

    let internal = |e: crate::mechanisms::MechanismError| EngineError::InvalidRequest(e.to_string());
    let noise = |label: String, quantity: Quantity, sensitivity: SensitivityProfile, eps: f64| {
        let sigma = match options.fixed_sigma {
            Some(s) => s,
            None => calibrate_sigma(eps, delta_each, sensitivity.global_l2).map_err(internal)?,
        };
        Ok::<_, EngineError>(NoiseReport {
            label,
            quantity,
            epsilon: eps,
            delta: delta_each,
            sigma,
            sensitivity,
            granularity: granularity_for(sensitivity.per_partition_l2, policy.granularity_exponent),
        })
    };

    let threshold = if grouped {
        let sensitivity = SensitivityProfile::new(caps.partitions, 1.0);
        let count = noise("threshold.users".into(), Quantity::Count, sensitivity, eps_count)?;
        let delta_threshold = delta - delta_noise;
        let tau = if options.exact_threshold {
            None
        } else {
            Some(
                calibrate_tau(policy.k_min, count.sigma, delta_threshold, caps.partitions)
                    .map_err(|e| EngineError::InvalidRequest(e.to_string()))?,
            )
        };
        Some(ThresholdReport {
            k: policy.k_min,
            tau,
            delta_threshold,
            count,
        })
    } else {
        None
    };

    let per_aggregate = eps_agg / own.len().max(1) as f64;
    let mut aggregates = Vec::with_capacity(summary.aggregates.len());
    for (i, a) in summary.aggregates.iter().enumerate() {
        if !own.contains(&i) {
            aggregates.push(AggregateReport {
                alias: a.alias.clone(),
                kind: a.kind,
                weights: Vec::new(),
                noise: Vec::new(),
                reuses_threshold_count: true,
            });
            continue;
        }
        let quantities = a.kind.quantities();
        let weights = if a.kind.is_quadratic() && policy.estimator_weights == WeightStrategy::Optimized {
            optimize_weights(a.kind, &a.bounds, caps, &pilot_from_bounds(&a.bounds)).map_err(internal)?
        } else {
            EstimatorWeights::uniform(quantities.len())
        };
        let mut reports = Vec::with_capacity(quantities.len());
        for (q, w) in quantities.iter().zip(weights.as_slice()) {
            let sensitivity = sensitivity_for(*q, &a.bounds, caps).map_err(internal)?;
            reports.push(noise(format!("{}.{}", a.alias, q.label()), *q, sensitivity, per_aggregate * w)?);
        }
        aggregates.push(AggregateReport {
            alias: a.alias.clone(),
            kind: a.kind,
            weights: weights.0,
            noise: reports,
            reuses_threshold_count: false,
        });
    }
    Ok(MechanismReport {
        epsilon,
        delta,
        threshold,
        aggregates,
    })
}
