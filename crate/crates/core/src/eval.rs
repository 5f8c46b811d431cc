//! Evaluation machinery: top-k accuracy, confusion matrices, and Student-t
//! confidence intervals over repeated stochastic evaluation runs.

use crate::autograd::Graph;
use crate::data::Dataset;
use crate::env::EnvConfig;
use crate::policies::{NetworkConfig, PolicyParams};
use crate::trainer::{argmax, predict, Mode, NetHandles};
use crate::{derive_seed, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Aggregated results of `runs` stochastic passes over a dataset.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub runs: usize,
    pub top1_mean: f64,
    pub top1_half_width: f64,
    pub top2_mean: f64,
    pub top2_half_width: f64,
    pub per_run_top1: Vec<f64>,
    pub per_run_top2: Vec<f64>,
    /// Rows are true labels, columns predicted labels, averaged over runs.
    pub confusion: Vec<Vec<f64>>,
}

/// True when `label` is among the `k` most probable classes (ties broken by
/// class index, ascending).
pub fn top_k_hit(probs: &[f64], label: usize, k: usize) -> bool {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });
    order[..k.min(order.len())].contains(&label)
}

/// Two-sided Student-t quantile at confidence `1 - alpha` (e.g. 2.093 for
/// alpha 0.05 and 19 degrees of freedom).
pub fn t_quantile(alpha: f64, dof: f64) -> Result<f64> {
    let dist = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::Usage(format!("bad t-distribution dof {dof}: {e}")))?;
    Ok(dist.inverse_cdf(1.0 - alpha / 2.0))
}

/// Half-width of the t confidence interval for the mean of `values`.
pub fn confidence_half_width(values: &[f64], alpha: f64) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Ok(f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = t_quantile(alpha, (n - 1) as f64)?;
    Ok(t * (var / n as f64).sqrt())
}

/// Repeated stochastic evaluation of the full pipeline: each run draws one
/// rollout per sample (fresh poses, goals, actions) and scores top-1/top-2
/// accuracy plus a confusion matrix.
pub fn evaluate_policy(
    params: &PolicyParams,
    dataset: &Dataset,
    env_cfg: &EnvConfig,
    net_cfg: &NetworkConfig,
    mode: Mode,
    runs: usize,
    alpha: f64,
    seed: u64,
) -> Result<EvalReport> {
    if runs == 0 || dataset.is_empty() {
        return Err(Error::Usage("evaluation needs runs >= 1 and a non-empty dataset".into()));
    }
    let classes = net_cfg.classes;
    let mut per_run_top1 = Vec::with_capacity(runs);
    let mut per_run_top2 = Vec::with_capacity(runs);
    let mut confusion = vec![vec![0.0f64; classes]; classes];

    for run in 0..runs {
        let outcomes: Result<Vec<(usize, usize, bool)>> = (0..dataset.len())
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                    seed,
                    &[0xe7a1, run as u64, i as u64],
                ));
                let probs = predict(params, dataset.image(i), env_cfg, net_cfg, mode, &mut rng)?;
                let label = dataset.label(i);
                Ok((label, argmax(&probs), top_k_hit(&probs, label, 2)))
            })
            .collect();
        let outcomes = outcomes?;

        let mut top1 = 0usize;
        let mut top2 = 0usize;
        for (label, predicted, top2_hit) in &outcomes {
            if label == predicted {
                top1 += 1;
            }
            if *top2_hit {
                top2 += 1;
            }
            confusion[*label][*predicted] += 1.0;
        }
        per_run_top1.push(top1 as f64 / outcomes.len() as f64);
        per_run_top2.push(top2 as f64 / outcomes.len() as f64);
    }

    for row in &mut confusion {
        for cell in row.iter_mut() {
            *cell /= runs as f64;
        }
    }

    Ok(EvalReport {
        runs,
        top1_mean: per_run_top1.iter().sum::<f64>() / runs as f64,
        top1_half_width: confidence_half_width(&per_run_top1, alpha)?,
        top2_mean: per_run_top2.iter().sum::<f64>() / runs as f64,
        top2_half_width: confidence_half_width(&per_run_top2, alpha)?,
        per_run_top1,
        per_run_top2,
        confusion,
    })
}

/// Deterministic evaluation of the classifier head alone on complete,
/// unmasked images (the environment is bypassed entirely).
pub fn evaluate_classifier_full(
    params: &PolicyParams,
    dataset: &Dataset,
    env_cfg: &EnvConfig,
    net_cfg: &NetworkConfig,
) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::Usage("evaluation dataset is empty".into()));
    }
    let outcomes: Result<Vec<(bool, bool)>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let mut graph = Graph::new();
            let nets = NetHandles::insert(
                &mut graph,
                params,
                env_cfg,
                net_cfg,
                Mode::ClassifierOnly,
                false,
            );
            let input = graph.constant(dataset.image(i).clone());
            let probs = nets
                .classifier_arch
                .forward(&mut graph, input, &nets.classifier_ids)?;
            let values = graph.value(probs).data();
            let label = dataset.label(i);
            Ok((argmax(values) == label, top_k_hit(values, label, 2)))
        })
        .collect();
    let outcomes = outcomes?;
    let total = outcomes.len() as f64;
    let top1 = outcomes.iter().filter(|(hit, _)| *hit).count() as f64 / total;
    let top2 = outcomes.iter().filter(|(_, hit)| *hit).count() as f64 / total;
    Ok((top1, top2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_is_monotone_in_k() {
        let probs = [0.1, 0.4, 0.3, 0.2];
        for label in 0..4 {
            if top_k_hit(&probs, label, 1) {
                assert!(top_k_hit(&probs, label, 2));
            }
        }
        assert!(top_k_hit(&probs, 1, 1));
        assert!(!top_k_hit(&probs, 2, 1));
        assert!(top_k_hit(&probs, 2, 2));
    }

    #[test]
    fn t_quantile_matches_integration_oracle() {
        // Independent route: bisect the CDF computed by Simpson integration
        // of the t density.
        fn t_pdf(x: f64, dof: f64) -> f64 {
            // ln Gamma via Stirling series with argument shifting.
            fn ln_gamma(mut z: f64) -> f64 {
                let mut acc = 0.0;
                while z < 8.0 {
                    acc -= z.ln();
                    z += 1.0;
                }
                acc + 0.5 * ((2.0 * std::f64::consts::PI).ln() - z.ln())
                    + z * (z.ln() - 1.0)
                    + 1.0 / (12.0 * z)
                    - 1.0 / (360.0 * z.powi(3))
                    + 1.0 / (1260.0 * z.powi(5))
            }
            let log_norm = ln_gamma((dof + 1.0) / 2.0)
                - ln_gamma(dof / 2.0)
                - 0.5 * (dof * std::f64::consts::PI).ln();
            (log_norm - (dof + 1.0) / 2.0 * (1.0 + x * x / dof).ln()).exp()
        }
        fn t_cdf_above_zero(x: f64, dof: f64) -> f64 {
            // Simpson's rule on [0, x].
            let steps = 20_000;
            let h = x / steps as f64;
            let mut acc = t_pdf(0.0, dof) + t_pdf(x, dof);
            for i in 1..steps {
                let xi = i as f64 * h;
                acc += t_pdf(xi, dof) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        }
        let dof = 19.0;
        let target = 0.475; // P(0 < T < q) for the 0.975 quantile
        let (mut lo, mut hi) = (0.0f64, 10.0f64);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if t_cdf_above_zero(mid, dof) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        let implementation = t_quantile(0.05, dof).unwrap();
        assert!(
            (implementation - oracle).abs() < 1e-3,
            "statrs {implementation} vs integration {oracle}"
        );
        assert!((implementation - 2.093).abs() < 1e-3);
    }

    #[test]
    fn half_width_uses_t_scaling() {
        let values = [0.9, 0.92, 0.91, 0.89, 0.93];
        let hw = confidence_half_width(&values, 0.05).unwrap();
        let mean = values.iter().sum::<f64>() / 5.0;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        let expected = t_quantile(0.05, 4.0).unwrap() * (var / 5.0).sqrt();
        assert!((hw - expected).abs() < 1e-12);
    }
}
