//! One-dimensional quadrature used by the Lévy-measure integrals and the H-transform.

use crate::error::{Error, Result};

const GL8_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL8_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Eight-point Gauss–Legendre rule on `[a, b]`.
pub fn gauss_legendre_8(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (x, w) in GL8_NODES.iter().zip(GL8_WEIGHTS) {
        acc += w * (f(mid - half * x) + f(mid + half * x));
    }
    acc * half
}

/// Composite eight-point Gauss–Legendre over consecutive breakpoints, each
/// panel split into `splits` equal parts.
pub fn composite_gauss(f: &mut impl FnMut(f64) -> f64, breaks: &[f64], splits: usize) -> f64 {
    let splits = splits.max(1);
    let mut acc = 0.0;
    for w in breaks.windows(2) {
        let h = (w[1] - w[0]) / splits as f64;
        for k in 0..splits {
            let a = w[0] + k as f64 * h;
            acc += gauss_legendre_8(f, a, a + h);
        }
    }
    acc
}

/// Breakpoints `lo = b_0 < … < b_n = hi` with `b_{k+1} / b_k ≤ ratio`; suited to
/// integrands with a power-law singularity at the origin. Requires `0 < lo < hi`.
pub fn geometric_breaks(lo: f64, hi: f64, ratio: f64) -> Vec<f64> {
    debug_assert!(lo > 0.0 && hi > lo && ratio > 1.0);
    let n = ((hi / lo).ln() / ratio.ln()).ceil().max(1.0) as usize;
    let q = (hi / lo).powf(1.0 / n as f64);
    let mut out: Vec<f64> = (0..n).map(|k| lo * q.powi(k as i32)).collect();
    out.push(hi);
    out
}

/// Merges extra breakpoints lying strictly inside `(breaks[0], breaks[last])`.
pub fn with_extra_breaks(mut breaks: Vec<f64>, extra: &[f64]) -> Vec<f64> {
    let (lo, hi) = (breaks[0], *breaks.last().unwrap());
    breaks.extend(extra.iter().copied().filter(|&e| e > lo && e < hi));
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    breaks
}

/// Adaptive Simpson on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(
    f: &mut impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    max_depth: u32,
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, max_depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &mut impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if !delta.is_finite() {
        return Err(Error::Divergence {
            context: format!("integrand non-finite on [{a}, {b}]"),
        });
    }
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::Tolerance {
            tolerance: tol,
            estimate: delta.abs() / 15.0,
        });
    }
    Ok(simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_exact_for_degree_15() {
        let v = gauss_legendre_8(&mut |x: f64| x.powi(15) + x.powi(14), -1.0, 1.0);
        assert!((v - 2.0 / 15.0).abs() < 1e-14);
    }

    #[test]
    fn geometric_breaks_cover_interval() {
        let b = geometric_breaks(1e-3, 1.0, 2.0);
        assert_eq!(b[0], 1e-3);
        assert_eq!(*b.last().unwrap(), 1.0);
        assert!(b.windows(2).all(|w| w[1] / w[0] <= 2.0 + 1e-12));
    }

    #[test]
    fn power_law_integral() {
        // ∫_{1e-3}^1 z^{0.25 - 1} dz = 4 (1 - 1e-3^{0.25})
        let breaks = geometric_breaks(1e-3, 1.0, 2.0);
        let v = composite_gauss(&mut |z: f64| z.powf(-0.75), &breaks, 2);
        let exact = 4.0 * (1.0 - 1e-3f64.powf(0.25));
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn simpson_matches_log() {
        let v = adaptive_simpson(&mut |y: f64| 1.0 / y, 1.0, 5.0, 1e-12, 50).unwrap();
        assert!((v - 5f64.ln()).abs() < 1e-10);
    }
}
