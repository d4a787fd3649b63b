//! One-sided paired t-test used to gate baseline refreshes.

use statrs::distribution::{ContinuousCDF, StudentsT};

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedTTest {
    pub mean_diff: f64,
    /// `NaN` when the differences have zero variance.
    pub t: f64,
    pub df: usize,
    /// Probability of a mean difference this negative under equal means.
    pub p: f64,
}

/// Tests whether `actor` lengths are on average below `baseline` lengths.
///
/// Zero-variance differences are decided by their sign: all negative gives
/// `p = 0`, otherwise `p = 1`.
pub fn paired_ttest(actor: &[f64], baseline: &[f64]) -> Result<PairedTTest, TrainError> {
    if actor.len() != baseline.len() {
        return Err(TrainError::Argument(format!(
            "paired samples differ in length: {} vs {}",
            actor.len(),
            baseline.len()
        )));
    }
    let n = actor.len();
    if n < 2 {
        return Err(TrainError::Argument("paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = actor.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    // rounding residue of identical differences is not real spread
    let tiny = 1e-12 * diffs.iter().fold(0.0f64, |m, d| m.max(d.abs())).max(f64::MIN_POSITIVE);
    if var.sqrt() <= tiny {
        let p = if mean < 0.0 { 0.0 } else { 1.0 };
        return Ok(PairedTTest { mean_diff: mean, t: f64::NAN, df, p });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    Ok(PairedTTest { mean_diff: mean, t, df, p: dist.cdf(t) })
}
