//! Interpolation on sorted one-dimensional tables.

/// Index `k` with `xs[k] ≤ x ≤ xs[k+1]`, clamped to the table.
pub fn bracket(xs: &[f64], x: f64) -> usize {
    debug_assert!(xs.len() >= 2);
    xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1) - 1
}

/// Start of the (up to) four-point stencil around interval `k`.
pub fn stencil_start(len: usize, k: usize) -> usize {
    if len < 4 {
        0
    } else {
        k.saturating_sub(1).min(len - 4)
    }
}

/// Lagrange weights and their derivatives for nodes `xs` at `x`.
pub fn lagrange_weights(xs: &[f64], x: f64) -> (Vec<f64>, Vec<f64>) {
    let n = xs.len();
    let mut w = vec![0.0; n];
    let mut dw = vec![0.0; n];
    for i in 0..n {
        let mut num = 1.0;
        let mut den = 1.0;
        let mut dnum = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            den *= xs[i] - xs[j];
            // product rule on Π (x - x_j)
            dnum = dnum * (x - xs[j]) + num;
            num *= x - xs[j];
        }
        w[i] = num / den;
        dw[i] = dnum / den;
    }
    (w, dw)
}

/// Piecewise-cubic Lagrange interpolant of `ys` over the sorted nodes `xs`,
/// with its derivative.
pub fn lagrange4(xs: &[f64], ys: &[f64], x: f64) -> (f64, f64) {
    let k = bracket(xs, x);
    let s = stencil_start(xs.len(), k);
    let e = (s + 4).min(xs.len());
    let (w, dw) = lagrange_weights(&xs[s..e], x);
    let v = w.iter().zip(&ys[s..e]).map(|(a, b)| a * b).sum();
    let d = dw.iter().zip(&ys[s..e]).map(|(a, b)| a * b).sum();
    (v, d)
}

/// Monotone piecewise-cubic Hermite interpolation (Fritsch–Carlson slopes).
pub fn pchip(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if n == 2 {
        let t = (x - xs[0]) / (xs[1] - xs[0]);
        return ys[0] + t * (ys[1] - ys[0]);
    }
    let k = bracket(xs, x);
    let delta = |i: usize| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
    let slope = |i: usize| -> f64 {
        if i == 0 {
            return end_slope(xs[1] - xs[0], xs[2] - xs[1], delta(0), delta(1));
        }
        if i == n - 1 {
            return end_slope(
                xs[n - 1] - xs[n - 2],
                xs[n - 2] - xs[n - 3],
                delta(n - 2),
                delta(n - 3),
            );
        }
        let (d0, d1) = (delta(i - 1), delta(i));
        if d0 * d1 <= 0.0 {
            return 0.0;
        }
        let (h0, h1) = (xs[i] - xs[i - 1], xs[i + 1] - xs[i]);
        let w1 = 2.0 * h1 + h0;
        let w2 = h1 + 2.0 * h0;
        (w1 + w2) / (w1 / d0 + w2 / d1)
    };
    let h = xs[k + 1] - xs[k];
    let t = (x - xs[k]) / h;
    let (m0, m1) = (slope(k), slope(k + 1));
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * ys[k]
        + (t3 - 2.0 * t2 + t) * h * m0
        + (-2.0 * t3 + 3.0 * t2) * ys[k + 1]
        + (t3 - t2) * h * m1
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lagrange_reproduces_cubics() {
        let xs: Vec<f64> = (0..9).map(|i| -1.0 + 0.3 * i as f64 + 0.01 * (i * i) as f64).collect();
        let f = |x: f64| 2.0 * x * x * x - x + 0.5;
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        for x in [-0.95, 0.0, 0.77, 1.5] {
            let (v, d) = lagrange4(&xs, &ys, x);
            assert!((v - f(x)).abs() < 1e-12);
            assert!((d - (6.0 * x * x - 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn pchip_is_monotone_and_interpolating() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let ys = [0.0, 0.1, 0.2, 3.0, 3.05];
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=400 {
            let x = 4.0 * i as f64 / 400.0;
            let v = pchip(&xs, &ys, x);
            assert!(v >= prev - 1e-15);
            prev = v;
        }
        for (x, y) in xs.iter().zip(ys) {
            assert!((pchip(&xs, &ys, *x) - y).abs() < 1e-14);
        }
    }
}
