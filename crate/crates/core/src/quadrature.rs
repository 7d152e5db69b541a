//! Adaptive 15-point Gauss–Kronrod quadrature.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("quadrature on [{lo}, {hi}] did not reach tolerance {tolerance:e} (estimated error {estimate:e})")]
pub struct QuadratureError {
    pub lo: f64,
    pub hi: f64,
    pub tolerance: f64,
    pub estimate: f64,
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];

// Gauss weights for the nodes XGK[1], XGK[3], XGK[5] and the centre.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_DEPTH: u32 = 48;

const RELATIVE_FLOOR: f64 = 1e-12;

fn kronrod<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> (f64, f64) {
    let centre = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let fc = f(centre);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (j, (&x, &wk)) in XGK[..7].iter().zip(&WGK[..7]).enumerate() {
        let dx = half * x;
        let pair = f(centre - dx) + f(centre + dx);
        kronrod += wk * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

fn adapt<F: Fn(f64) -> f64>(
    f: &F,
    lo: f64,
    hi: f64,
    tolerance: f64,
    depth: u32,
) -> Result<f64, QuadratureError> {
    let (value, error) = kronrod(f, lo, hi);
    // Below this floor the estimate is dominated by rounding in the
    // integrand itself, not truncation.
    let roundoff = RELATIVE_FLOOR * value.abs();
    if error <= tolerance.max(roundoff) {
        return Ok(value);
    }
    if depth >= MAX_DEPTH {
        return Err(QuadratureError {
            lo,
            hi,
            tolerance,
            estimate: error,
        });
    }
    let mid = 0.5 * (lo + hi);
    Ok(adapt(f, lo, mid, 0.5 * tolerance, depth + 1)? + adapt(f, mid, hi, 0.5 * tolerance, depth + 1)?)
}

/// Integrates `f` over `[lo, hi]` to absolute tolerance `tolerance`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tolerance: f64) -> Result<f64, QuadratureError> {
    adapt(&f, lo, hi, tolerance, 0)
}

/// Integrates over `[lo, hi]` split into `pieces` equal panels, each to
/// `tolerance / pieces`.
pub fn integrate_panels<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    pieces: usize,
    tolerance: f64,
) -> Result<f64, QuadratureError> {
    let pieces = pieces.max(1);
    let width = (hi - lo) / pieces as f64;
    let per_panel = tolerance / pieces as f64;
    let mut total = 0.0;
    for k in 0..pieces {
        let a = lo + width * k as f64;
        let b = if k + 1 == pieces { hi } else { a + width };
        total += adapt(&f, a, b, per_panel, 0)?;
    }
    Ok(total)
}
