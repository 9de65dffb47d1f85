//! Average accuracy, forgetting, and closed-form parameter counting.

use crate::error::{ItlError, Result};

/// Lower-triangular record `a[t][j]`: test accuracy of task `j` measured
/// after training task `t` (both 1-based, `j <= t`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Append the row measured after training stage `t = current + 1`;
    /// must contain exactly `t` entries in `[0, 1]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len() + 1;
        if row.len() != t {
            return Err(ItlError::shape(
                "accuracy matrix",
                format!("row {t} has {} entries, expected {t}", row.len()),
            ));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(ItlError::invalid("accuracy", format!("row {t} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of completed training stages.
    pub fn num_stages(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.rows.get(t.checked_sub(1)?)?.get(j.checked_sub(1)?).copied()
    }

    pub fn row(&self, t: usize) -> Option<&[f64]> {
        self.rows.get(t.checked_sub(1)?).map(|r| r.as_slice())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Average accuracy after stage `t`: mean of row `t`.
    pub fn avg_accuracy(&self, t: usize) -> Result<f64> {
        let row = self.row(t).ok_or(ItlError::UnknownTask {
            task: t,
            detail: format!("matrix has {} rows", self.rows.len()),
        })?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Forgetting after stage `t`: mean over `j < t` of `a[j][j] - a[t][j]`.
    /// Signed; negative values mean later training improved old tasks.
    pub fn forgetting(&self, t: usize) -> Result<f64> {
        if t < 2 {
            return Err(ItlError::invalid("t", "forgetting needs t >= 2"));
        }
        let row = self.row(t).ok_or(ItlError::UnknownTask {
            task: t,
            detail: format!("matrix has {} rows", self.rows.len()),
        })?;
        let mut total = 0.0;
        for j in 1..t {
            total += self.rows[j - 1][j - 1] - row[j - 1];
        }
        Ok(total / (t - 1) as f64)
    }
}

/// Exact per-component parameter counts for a factorized multi-head MLP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCountReport {
    pub factor_entries: u64,
    pub selector_entries: u64,
    pub hidden_bias_entries: u64,
    pub head_entries: u64,
    pub total: u64,
    /// Total after each task `1..=T`.
    pub cumulative_per_task: Vec<u64>,
}

/// Closed-form count for `T` tasks of a net with the given architecture and
/// rank schedule. With `R_t = r1 + (t-1) * r_inc`:
/// factors `sum_layers (in+out) * R_T`, selectors `sum_layers sum_t R_t`,
/// hidden biases `T * sum(hidden)`, heads `sum_t classes_t * (last_hidden+1)`.
pub fn count_params(
    input_dim: usize,
    hidden_dims: &[usize],
    head_classes: &[usize],
    r1: usize,
    r_inc: usize,
    tasks: usize,
) -> Result<ParamCountReport> {
    if hidden_dims.is_empty() {
        return Err(ItlError::invalid("hidden_dims", "must be non-empty"));
    }
    if head_classes.len() != tasks {
        return Err(ItlError::invalid(
            "head_classes",
            format!("{} class counts for {tasks} tasks", head_classes.len()),
        ));
    }
    if input_dim == 0 || r1 == 0 || r_inc == 0 || tasks == 0 || hidden_dims.contains(&0) {
        return Err(ItlError::invalid("count_params", "all arguments must be positive"));
    }

    let rank_at = |t: usize| (r1 + (t - 1) * r_inc) as u64;
    let mut layer_dims = Vec::with_capacity(hidden_dims.len());
    let mut prev = input_dim;
    for &h in hidden_dims {
        layer_dims.push((prev as u64, h as u64));
        prev = h;
    }
    let last_hidden = *hidden_dims.last().unwrap() as u64;
    let hidden_sum: u64 = hidden_dims.iter().map(|&h| h as u64).sum();

    let mut cumulative = Vec::with_capacity(tasks);
    let mut report = ParamCountReport {
        factor_entries: 0,
        selector_entries: 0,
        hidden_bias_entries: 0,
        head_entries: 0,
        total: 0,
        cumulative_per_task: Vec::new(),
    };
    for t in 1..=tasks {
        let factors: u64 = layer_dims.iter().map(|&(i, o)| (i + o) * rank_at(t)).sum();
        let selectors: u64 = layer_dims.len() as u64 * (1..=t).map(rank_at).sum::<u64>();
        let biases = t as u64 * hidden_sum;
        let heads: u64 = head_classes[..t]
            .iter()
            .map(|&c| c as u64 * (last_hidden + 1))
            .sum();
        let total = factors + selectors + biases + heads;
        cumulative.push(total);
        if t == tasks {
            report.factor_entries = factors;
            report.selector_entries = selectors;
            report.hidden_bias_entries = biases;
            report.head_entries = heads;
            report.total = total;
        }
    }
    report.cumulative_per_task = cumulative;
    Ok(report)
}

/// Display a parameter count in megaparams the way the rank-study tables
/// format it: rounded to two decimals, trailing zeros trimmed.
pub fn format_mega(total: u64) -> String {
    let rounded = (total as f64 / 1e6 * 100.0).round() / 100.0;
    format!("{rounded}M")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        AccuracyMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn avg_accuracy_basics() {
        let m = matrix(&[&[1.0]]);
        assert_eq!(m.avg_accuracy(1).unwrap(), 1.0);

        let m = matrix(&[&[1.0], &[0.8, 0.9]]);
        assert!((m.avg_accuracy(2).unwrap() - 0.85).abs() < 1e-15);
        assert!(m.avg_accuracy(3).is_err());
    }

    #[test]
    fn forgetting_basics() {
        let m = matrix(&[&[1.0], &[0.8, 0.9]]);
        assert!((m.forgetting(2).unwrap() - 0.2).abs() < 1e-15);
        assert!(m.forgetting(1).is_err());
    }

    #[test]
    fn forgetting_zero_when_diagonal_preserved() {
        let m = matrix(&[&[0.9], &[0.9, 0.7], &[0.9, 0.7, 0.95]]);
        assert_eq!(m.forgetting(2).unwrap(), 0.0);
        assert_eq!(m.forgetting(3).unwrap(), 0.0);
    }

    #[test]
    fn forgetting_constant_matrix_is_zero() {
        let m = matrix(&[&[0.5], &[0.5, 0.5], &[0.5, 0.5, 0.5]]);
        for t in 2..=3 {
            assert_eq!(m.forgetting(t).unwrap(), 0.0);
        }
    }

    #[test]
    fn push_row_validates() {
        let mut m = AccuracyMatrix::new();
        assert!(m.push_row(vec![0.5, 0.5]).is_err());
        m.push_row(vec![0.5]).unwrap();
        assert!(m.push_row(vec![1.5, 0.0]).is_err());
    }

    #[test]
    fn count_params_hand_example() {
        // Minimal net, T=1, rank 1, one 2->2 hidden layer, one 2-class head:
        // U (2x1) + V (2x1) = 4 factor scalars, 1 selector, 2 bias, 2*2+2 head.
        let r = count_params(2, &[2], &[2], 1, 1, 1).unwrap();
        assert_eq!(r.factor_entries, 4);
        assert_eq!(r.selector_entries, 1);
        assert_eq!(r.hidden_bias_entries, 2);
        assert_eq!(r.head_entries, 6);
        assert_eq!(r.total, 13);
    }

    #[test]
    fn count_params_mnist_rank_study() {
        let classes = vec![10usize; 20];
        let cases = [
            ((1usize, 1usize), 93_100u64, "0.09M"),
            ((6, 1), 101_060, "0.1M"),
            ((11, 1), 109_020, "0.11M"),
            ((11, 2), 138_888, "0.14M"),
            ((11, 4), 198_624, "0.2M"),
        ];
        for ((r1, ri), total, display) in cases {
            let r = count_params(784, &[256, 256], &classes, r1, ri, 20).unwrap();
            assert_eq!(r.total, total, "({r1},{ri})");
            assert_eq!(format_mega(r.total), display, "({r1},{ri})");
        }
    }

    #[test]
    fn cumulative_counts_strictly_increase() {
        let classes = vec![10usize; 20];
        let r = count_params(784, &[256, 256], &classes, 11, 1, 20).unwrap();
        assert_eq!(r.cumulative_per_task.len(), 20);
        for w in r.cumulative_per_task.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert_eq!(*r.cumulative_per_task.last().unwrap(), r.total);
    }

    #[test]
    fn count_params_matches_constructed_network() {
        use crate::network::MultiHeadNet;
        // Enumeration oracle: build the real thing and count stored scalars.
        let (r1, ri, tasks) = (3usize, 2usize, 4usize);
        let mut net = MultiHeadNet::build_mlp(12, &[10, 8], r1, 77).unwrap();
        for _ in 0..tasks {
            net.add_task(5, ri, 77).unwrap();
        }
        let closed = count_params(12, &[10, 8], &[5, 5, 5, 5], r1, ri, tasks).unwrap();
        assert_eq!(closed.total, net.param_count());
    }

    #[test]
    fn format_mega_rounding() {
        assert_eq!(format_mega(93_100), "0.09M");
        assert_eq!(format_mega(101_060), "0.1M");
        assert_eq!(format_mega(1_234_567), "1.23M");
        assert_eq!(format_mega(0), "0M");
    }
}
