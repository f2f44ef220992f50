use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MreOutcome {
    /// Percent; `None` when no component could be scored.
    pub mre: Option<f64>,
    /// Components whose exact value is zero (or not finite).
    pub unscorable: Vec<usize>,
    /// (trial, component) cells missing from the output.
    pub suppressed: usize,
    pub suppressed_fraction: f64,
}

/// Per-trial mean relative error in percent over the components released in
/// that trial. Trials with nothing scorable are skipped.
pub fn relative_errors(truth: &[f64], estimates: &[Vec<Option<f64>>]) -> Vec<f64> {
    estimates
        .iter()
        .filter_map(|trial| {
            let errs: Vec<f64> = truth
                .iter()
                .zip(trial)
                .filter(|(t, _)| t.is_finite() && **t != 0.0)
                .filter_map(|(t, s)| s.map(|s| (s - t).abs() / t.abs()))
                .collect();
            (!errs.is_empty()).then(|| 100.0 * errs.iter().sum::<f64>() / errs.len() as f64)
        })
        .collect()
}

/// `100 / (N n) · Σ_i Σ_j |S_ij − T_j| / |T_j|`. Suppressed cells drop out of
/// their trial's average and zero-valued truths out of every trial.
pub fn mre(truth: &[f64], estimates: &[Vec<Option<f64>>]) -> MreOutcome {
    let unscorable: Vec<usize> = truth
        .iter()
        .enumerate()
        .filter(|(_, t)| !(t.is_finite() && **t != 0.0))
        .map(|(j, _)| j)
        .collect();
    let suppressed = estimates.iter().flatten().filter(|s| s.is_none()).count();
    let cells = estimates.len() * truth.len();
    let per_trial = relative_errors(truth, estimates);
    MreOutcome {
        mre: (!per_trial.is_empty()).then(|| per_trial.iter().sum::<f64>() / per_trial.len() as f64),
        unscorable,
        suppressed,
        suppressed_fraction: if cells == 0 { 0.0 } else { suppressed as f64 / cells as f64 },
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_scalar_ten_percent() {
        assert_eq!(mre(&[100.0], &[vec![Some(110.0)]]).mre, Some(10.0));
    }

    #[test]
    fn exact_trials_score_zero() {
        let out = mre(&[3.0, 4.0], &vec![vec![Some(3.0), Some(4.0)]; 5]);
        assert_eq!(out.mre, Some(0.0));
        assert_eq!(out.suppressed, 0);
    }

    #[test]
    fn suppressed_cells_are_excluded_and_counted() {
        let out = mre(&[10.0, 20.0], &[vec![Some(11.0), None], vec![Some(10.0), Some(22.0)]]);
        // Trial 1: 10%. Trial 2: (0 + 10) / 2 = 5%.
        assert!((out.mre.unwrap() - 7.5).abs() < 1e-12);
        assert_eq!(out.suppressed, 1);
        assert_eq!(out.suppressed_fraction, 0.25);
    }

    #[test]
    fn zero_truth_is_unscorable() {
        let out = mre(&[0.0], &[vec![Some(1.0)]]);
        assert_eq!(out.mre, None);
        assert_eq!(out.unscorable, vec![0]);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
