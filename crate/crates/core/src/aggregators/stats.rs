use crate::error::{Error, Result};
use crate::fl::ClientUpdate;
use crate::nn::ParamVector;
use crate::par::{self, ExecMode};

/// Median of a slice; even lengths take the midpoint of the two central values.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn per_coordinate<F>(updates: &[ClientUpdate], exec: ExecMode, f: F) -> Result<ParamVector>
where
    F: Fn(&mut Vec<f64>) -> f64 + Sync + Send,
{
    let first = updates
        .first()
        .ok_or_else(|| Error::Aggregation("no updates".into()))?;
    for u in &updates[1..] {
        first.delta.check_same_layout(&u.delta)?;
    }
    let values = par::map_range(exec, first.delta.len(), |j| {
        let mut column: Vec<f64> = updates.iter().map(|u| u.delta.values()[j]).collect();
        f(&mut column)
    });
    ParamVector::from_values(first.delta.layout().clone(), values)
}

pub fn coordinate_median(updates: &[ClientUpdate]) -> Result<ParamVector> {
    coordinate_median_with(updates, ExecMode::Serial)
}

pub fn coordinate_median_with(updates: &[ClientUpdate], exec: ExecMode) -> Result<ParamVector> {
    per_coordinate(updates, exec, |c| median(c))
}

/// Drops `floor(trim_fraction * n)` values from each tail per coordinate and
/// averages the rest (unweighted).
pub fn trimmed_mean(updates: &[ClientUpdate], trim_fraction: f64) -> Result<ParamVector> {
    trimmed_mean_with(updates, trim_fraction, ExecMode::Serial)
}

pub fn trimmed_mean_with(
    updates: &[ClientUpdate],
    trim_fraction: f64,
    exec: ExecMode,
) -> Result<ParamVector> {
    if !(0.0..0.5).contains(&trim_fraction) {
        return Err(Error::Aggregation(format!(
            "trim fraction {trim_fraction} outside [0, 0.5)"
        )));
    }
    let n = updates.len();
    let k = (trim_fraction * n as f64).floor() as usize;
    if n <= 2 * k {
        return Err(Error::Aggregation(format!(
            "trimming {k} from each tail of {n} updates leaves nothing"
        )));
    }
    per_coordinate(updates, exec, move |c| {
        c.sort_by(f64::total_cmp);
        let kept = &c[k..c.len() - k];
        kept.iter().sum::<f64>() / kept.len() as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregators::raw_updates;

    #[test]
    fn median_odd_and_even() {
        let u = raw_updates(&[vec![1.0], vec![2.0], vec![100.0]], &[1, 1, 1]);
        assert_eq!(coordinate_median(&u).unwrap().values(), &[2.0]);
        let u = raw_updates(&[vec![1.0], vec![3.0]], &[1, 1]);
        assert_eq!(coordinate_median(&u).unwrap().values(), &[2.0]);
    }

    #[test]
    fn trim_zero_is_plain_mean() {
        let u = raw_updates(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![6.0, 3.0]], &[1, 5, 9]);
        assert_eq!(trimmed_mean(&u, 0.0).unwrap().values(), &[3.0, 2.0]);
    }

    #[test]
    fn trim_third_keeps_middle() {
        let u = raw_updates(&[vec![0.0], vec![5.0], vec![100.0]], &[1, 1, 1]);
        assert_eq!(trimmed_mean(&u, 1.0 / 3.0).unwrap().values(), &[5.0]);
    }

    #[test]
    fn over_trimming_fails() {
        let u = raw_updates(&[vec![0.0], vec![5.0]], &[1, 1]);
        assert!(trimmed_mean(&u, 0.5).is_err());
        assert!(trimmed_mean(&u, 0.49).is_ok());
    }
}
