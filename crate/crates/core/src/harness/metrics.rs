use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Ordinary least-squares fit of `predicted` on `true_values`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    /// Squared Pearson correlation, equal to the fit's coefficient of
    /// determination.
    pub r2: f64,
    pub slope: f64,
    pub intercept: f64,
}

pub fn linear_fit(true_values: &[f64], predicted: &[f64]) -> Result<LinearFit> {
    if true_values.len() != predicted.len() {
        return Err(Error::InvalidTensor(format!(
            "{} true values vs {} predictions",
            true_values.len(),
            predicted.len()
        )));
    }
    let n = true_values.len();
    if n < 2 {
        return Err(Error::TooFewValues { needed: 2, got: n });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(true_values), mean(predicted));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in true_values.iter().zip(predicted) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("true values are constant"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("predictions are constant"));
    }
    let slope = sxy / sxx;
    Ok(LinearFit {
        r2: (sxy * sxy / (sxx * syy)).min(1.0),
        slope,
        intercept: my - slope * mx,
    })
}

/// `(R², slope)` of the least-squares line through (true, predicted).
pub fn r_squared(true_values: &[f64], predicted: &[f64]) -> Result<(f64, f64)> {
    linear_fit(true_values, predicted).map(|f| (f.r2, f.slope))
}

/// Two-sided 97.5% quantile of Student's t with `df` degrees of freedom.
/// Closed forms for one and two degrees of freedom.
pub fn t_quantile_975(df: usize) -> Result<f64> {
    match df {
        0 => Err(Error::TooFewValues { needed: 2, got: 1 }),
        1 => Ok((0.475 * std::f64::consts::PI).tan()),
        2 => {
            let p: f64 = 0.975;
            Ok((2.0 * p - 1.0) / (2.0 * p * (1.0 - p)).sqrt())
        }
        _ => {
            let t = StudentsT::new(0.0, 1.0, df as f64)
                .map_err(|e| Error::Experiment(format!("t distribution: {e}")))?;
            Ok(t.inverse_cdf(0.975))
        }
    }
}

/// Mean and 95% t-interval halfwidth `t(0.975, k−1) · s / √k` with the
/// sample standard deviation `s`.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    let k = values.len();
    if k < 2 {
        return Err(Error::TooFewValues { needed: 2, got: k });
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let s = (ss / (k - 1) as f64).sqrt();
    Ok((mean, t_quantile_975(k - 1)? * s / (k as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_affine() {
        let x = [0.5, 1.0, 2.0, 4.5];
        assert_eq!(r_squared(&x, &x).unwrap(), (1.0, 1.0));
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        let (r2, slope) = r_squared(&x, &y).unwrap();
        assert!((r2 - 1.0).abs() < 1e-15 && (slope - 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_inputs_are_flagged() {
        assert!(matches!(r_squared(&[1.0; 3], &[0.0, 1.0, 2.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(r_squared(&[0.0, 1.0, 2.0], &[4.0; 3]), Err(Error::UndefinedCorrelation(_))));
        assert!(r_squared(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn quantiles_match_tables() {
        assert!((t_quantile_975(1).unwrap() - 12.706_204_736_174_7).abs() < 1e-12);
        assert!((t_quantile_975(2).unwrap() - 4.302_652_729_749_464).abs() < 1e-12);
        assert!((t_quantile_975(4).unwrap() - 2.776_445_105_197_793).abs() < 1e-9);
        assert!((t_quantile_975(30).unwrap() - 2.042_272_456_301_238).abs() < 1e-9);
    }

    #[test]
    fn identical_trials_have_zero_width() {
        assert_eq!(confidence_interval(&[0.8; 4]).unwrap(), (0.8, 0.0));
        assert!(confidence_interval(&[0.8]).is_err());
    }
}
