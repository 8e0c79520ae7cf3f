//! Globally adaptive Gauss–Kronrod (7/15) quadrature for vector-valued
//! integrands.

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
// Gauss weights for the odd Kronrod nodes (indices 1, 3, 5, 7).
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_INTERVALS: usize = 5_000;

struct Panel {
    a: f64,
    b: f64,
    value: Vec<f64>,
    error: f64,
}

fn gk15<F: Fn(f64) -> Vec<f64>>(f: &F, a: f64, b: f64) -> Panel {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let m = fc.len();
    let mut kron: Vec<f64> = fc.iter().map(|v| v * WGK[7]).collect();
    let mut gauss: Vec<f64> = fc.iter().map(|v| v * WG[3]).collect();
    for j in 0..7 {
        let dx = h * XGK[j];
        let f1 = f(c - dx);
        let f2 = f(c + dx);
        for i in 0..m {
            let s = f1[i] + f2[i];
            kron[i] += WGK[j] * s;
            if j % 2 == 1 {
                gauss[i] += WG[j / 2] * s;
            }
        }
    }
    let mut error: f64 = 0.0;
    for i in 0..m {
        kron[i] *= h;
        gauss[i] *= h;
        error = error.max((kron[i] - gauss[i]).abs());
    }
    Panel {
        a,
        b,
        value: kron,
        error,
    }
}

/// Integrates `f` over `[a, b]` until the summed panel error is below
/// `max(abs_tol, rel_tol * |I|_inf)`.
pub fn integrate<F: Fn(f64) -> Vec<f64>>(f: F, a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> Result<Vec<f64>> {
    if a == b {
        return Ok(vec![0.0; f(a).len()]);
    }
    let mut panels = vec![gk15(&f, a, b)];
    loop {
        let m = panels[0].value.len();
        let mut total = vec![0.0; m];
        let mut err = 0.0;
        for p in &panels {
            for (t, v) in total.iter_mut().zip(&p.value) {
                *t += v;
            }
            err += p.error;
        }
        let norm = total.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if err <= abs_tol.max(rel_tol * norm) {
            return Ok(total);
        }
        if panels.len() >= MAX_INTERVALS || !err.is_finite() {
            return Err(Error::Numerical {
                context: "adaptive quadrature".into(),
                detail: format!("error estimate {err:.3e} after {} panels on [{a}, {b}]", panels.len()),
            });
        }
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .map(|(i, _)| i)
            .unwrap();
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        panels.push(gk15(&f, p.a, mid));
        panels.push(gk15(&f, mid, p.b));
    }
}

/// Scalar convenience wrapper.
pub fn integrate_scalar<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    integrate(|x| vec![f(x)], a, b, rel_tol, 1e-300).map(|v| v[0])
}
