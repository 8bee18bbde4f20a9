//! Scalar special functions used by the kernels.

use std::f64::consts::PI;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of |Γ(x)| (Lanczos, g = 7, nine terms).
pub fn ln_gamma(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.5 {
        // reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let s = (PI * x).sin();
        if s == 0.0 {
            return f64::INFINITY;
        }
        return (PI / s.abs()).ln() - ln_gamma(1.0 - x);
    }
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// ln(k!) for a nonnegative integer-valued `k`.
pub fn ln_factorial(k: f64) -> f64 {
    if k < 2.0 {
        0.0
    } else if k <= 20.0 {
        (2..=k as u64).map(|i| (i as f64).ln()).sum()
    } else {
        ln_gamma(k + 1.0)
    }
}

/// ln C(n, k).
pub fn ln_choose(n: f64, k: f64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// ln Γ(a + y) − ln Γ(a) for integer y ≥ 0 and a > 0, stable for very large a.
pub fn ln_rising(a: f64, y: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    if y <= 32.0 {
        let mut s = 0.0;
        let mut k = 0.0;
        while k < y {
            s += (a + k).ln();
            k += 1.0;
        }
        return s;
    }
    if a > 1e4 * y {
        // Σ ln(a + k) = y ln a + Σ ln(1 + k/a), expanded to second order
        let s1 = y * (y - 1.0) / 2.0;
        let s2 = (y - 1.0) * y * (2.0 * y - 1.0) / 6.0;
        return y * a.ln() + s1 / a - s2 / (2.0 * a * a);
    }
    ln_gamma(a + y) - ln_gamma(a)
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// log Σ exp(v_i); returns −∞ for an empty slice or all −∞ entries.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}
