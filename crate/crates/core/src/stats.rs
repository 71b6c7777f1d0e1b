//! Small summary statistics used by the protocol logs and acceptance checks.

use alloc::vec;

/// Least-squares slope of `ys` against their indices; 0 for fewer than two points.
pub fn ls_slope(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let xm = (n - 1) as f64 / 2.0;
    let ym = mean(ys);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (y - ym);
        sxx += dx * dx;
    }
    sxy / sxx
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Most frequent value in `0..n`; ties go to the lowest value.
pub fn mode(values: impl IntoIterator<Item = usize>, n: usize) -> Option<usize> {
    let mut counts = vec![0usize; n];
    let mut any = false;
    for v in values {
        if v < n {
            counts[v] += 1;
            any = true;
        }
    }
    any.then(|| {
        let mut best = 0;
        for (i, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = i;
            }
        }
        best
    })
}
