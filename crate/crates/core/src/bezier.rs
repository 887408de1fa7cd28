//! Bernstein-form polynomials on `s` (evaluated without clamping).

/// Bernstein basis of the given degree at `s`.
pub fn basis(degree: usize, s: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(degree + 1);
    let mut binom = 1.0;
    for k in 0..=degree {
        out.push(binom * s.powi(k as i32) * (1.0 - s).powi((degree - k) as i32));
        binom = binom * (degree - k) as f64 / (k + 1) as f64;
    }
    out
}

/// Basis functions and their first two derivatives: `(b, db/ds, d2b/ds2)`.
pub fn basis_with_derivatives(degree: usize, s: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let b = basis(degree, s);
    let m = degree as f64;
    let mut d1 = vec![0.0; degree + 1];
    if degree >= 1 {
        let lower = basis(degree - 1, s);
        for (k, v) in lower.iter().enumerate() {
            d1[k] -= m * v;
            d1[k + 1] += m * v;
        }
    }
    let mut d2 = vec![0.0; degree + 1];
    if degree >= 2 {
        let lower = basis(degree - 2, s);
        let f = m * (m - 1.0);
        for (k, v) in lower.iter().enumerate() {
            d2[k] += f * v;
            d2[k + 1] -= 2.0 * f * v;
            d2[k + 2] += f * v;
        }
    }
    (b, d1, d2)
}

/// Value and first two derivatives of a Bezier curve with the given coefficients.
pub fn eval(coeffs: &[f64], s: f64) -> (f64, f64, f64) {
    let (b, d1, d2) = basis_with_derivatives(coeffs.len() - 1, s);
    let dot = |w: &[f64]| w.iter().zip(coeffs).map(|(a, c)| a * c).sum::<f64>();
    (dot(&b), dot(&d1), dot(&d2))
}

/// Least-squares fit of Bezier coefficients to samples `(s_i, v_i)`.
pub fn fit(degree: usize, samples: &[(f64, f64)]) -> Vec<f64> {
    let n = degree + 1;
    let a = nalgebra::DMatrix::from_fn(samples.len(), n, |i, k| basis(degree, samples[i].0)[k]);
    let b = nalgebra::DVector::from_iterator(samples.len(), samples.iter().map(|p| p.1));
    let svd = a.svd(true, true);
    svd.solve(&b, 1e-12)
        .map(|x| x.iter().copied().collect())
        .unwrap_or_else(|_| vec![0.0; n])
}
