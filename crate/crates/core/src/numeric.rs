//! Small numerical helpers shared by the statistic, estimator and harness.

/// Kahan–Babuška (Neumaier) compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = KahanSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// Compensated sum of an iterator.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<KahanSum>().value()
}

/// Linear-interpolation quantile (type 7) of unsorted data. `None` on empty input.
pub fn quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

pub fn mean(values: &[f64]) -> f64 {
    kahan_sum(values.iter().copied()) / values.len() as f64
}

/// Ordinary least-squares line `y = intercept + slope·x`; returns `(slope, intercept)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let mx = mean(x);
    let my = mean(y);
    let sxy = kahan_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = kahan_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Least-squares quadratic `y = c0 + c1·x + c2·x²`; returns `[c0, c1, c2]`.
pub fn fit_quadratic(x: &[f64], y: &[f64]) -> [f64; 3] {
    assert_eq!(x.len(), y.len());
    assert!(x.len() >= 3, "quadratic fit needs at least three points");
    // Centre x for conditioning, then map the coefficients back.
    let shift = mean(x);
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for (&xi, &yi) in x.iter().zip(y) {
        let u = xi - shift;
        let row = [1.0, u, u * u];
        for i in 0..3 {
            aty[i] += row[i] * yi;
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let c = solve3(ata, aty);
    // y = c0 + c1 (x - s) + c2 (x - s)^2
    [
        c[0] - c[1] * shift + c[2] * shift * shift,
        c[1] - 2.0 * c[2] * shift,
        c[2],
    ]
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kahan_recovers_small_terms() {
        let mut values = vec![1.0e16];
        values.extend(std::iter::repeat_n(1.0, 1000));
        values.push(-1.0e16);
        assert_eq!(kahan_sum(values.iter().copied()), 1000.0);
        assert_ne!(values.iter().sum::<f64>(), 1000.0);
    }

    #[test]
    fn quantiles() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(median(&v), Some(2.5));
        assert_eq!(quantile(&v, 0.0), Some(1.0));
        assert_eq!(quantile(&v, 1.0), Some(4.0));
        assert_relative_eq!(quantile(&v, 0.9).unwrap(), 3.7, epsilon = 1e-12);
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn line_and_quadratic_fits_are_exact_on_exact_data() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let (s, i) = fit_line(&x, &y);
        assert_relative_eq!(s, -0.5, epsilon = 1e-12);
        assert_relative_eq!(i, 2.0, epsilon = 1e-12);

        let x = [-3.0, -2.0, -1.5, -0.1];
        let y: Vec<f64> = x.iter().map(|v| 0.3 - 1.2 * v + 0.7 * v * v).collect();
        let c = fit_quadratic(&x, &y);
        assert_relative_eq!(c[0], 0.3, epsilon = 1e-10);
        assert_relative_eq!(c[1], -1.2, epsilon = 1e-10);
        assert_relative_eq!(c[2], 0.7, epsilon = 1e-10);
    }
}
