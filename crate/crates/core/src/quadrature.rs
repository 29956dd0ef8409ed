//! Adaptive Gauss–Kronrod (7/15) integration, used by the numerical
//! effective-capacity oracle.

use crate::error::{Error, Result};

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
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd-indexed Kronrod nodes (1, 3, 5) and the centre.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[i] * s;
        if i % 2 == 1 {
            gauss += WG[i / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Integrates `f` over `[lo, hi]` by bisecting the worst interval until the
/// summed error estimate is below `max(abs_tol, rel_tol·|I|)`.
pub fn integrate(
    f: &dyn Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_intervals: usize,
) -> Result<f64> {
    let (v, e) = gk15(f, lo, hi);
    let mut intervals = vec![(lo, hi, v, e)];
    loop {
        let total: f64 = intervals.iter().map(|iv| iv.2).sum();
        let err: f64 = intervals.iter().map(|iv| iv.3).sum();
        if !total.is_finite() {
            return Err(Error::Quadrature { lo, hi, error: err });
        }
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok(total);
        }
        if intervals.len() >= max_intervals {
            return Err(Error::Quadrature { lo, hi, error: err });
        }
        let worst = intervals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .3.total_cmp(&b.1 .3))
            .map(|(i, _)| i)
            .expect("non-empty");
        let (a, b, _, _) = intervals.swap_remove(worst);
        let m = 0.5 * (a + b);
        let (v1, e1) = gk15(f, a, m);
        let (v2, e2) = gk15(f, m, b);
        intervals.push((a, m, v1, e1));
        intervals.push((m, b, v2, e2));
    }
}
