//! Quadrature and finite-difference oracles for the closed-form Laplace
//! transforms of the B1 basis.

use polyct_core::spectrum::{b1_laplace, build_knots, output_matrix, KnotGrid};

/// Adaptive Simpson quadrature, independent of the closed-form path.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(f, a, m, fa, flm, fm);
        let right = simpson(f, m, b, fm, frm, fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(f, a, b, fa, fm, fb);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}

fn hat(grid: &KnotGrid, j: usize, kappa: f64) -> f64 {
    polyct_core::spectrum::b1_eval(grid, j, kappa).unwrap()
}

/// Quadrature value of `∫ (-κ)^m b_j(κ) e^{-sκ} dκ`, split at the peak knot
/// where the integrand has a kink.
fn laplace_by_quadrature(grid: &KnotGrid, j: usize, s: f64, m: usize) -> f64 {
    let k = grid.knots();
    let integrand = move |kappa: f64| (-kappa).powi(m as i32) * hat(grid, j, kappa) * (-s * kappa).exp();
    let scale = ((k[j + 1] - k[j - 1]) / 2.0) * k[j].powi(m as i32);
    let tol = 1e-13 * scale.max(1e-300);
    adaptive_simpson(&integrand, k[j - 1], k[j], tol) + adaptive_simpson(&integrand, k[j], k[j + 1], tol)
}

fn lcg(state: &mut u64) -> f64 {
    // splitmix64 step; plenty for test point generation
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z = z ^ (z >> 31);
    (z >> 11) as f64 / (1u64 << 53) as f64
}

#[test]
fn laplace_matches_quadrature_on_random_pairs() {
    let grid = build_knots(1e3, 1.0, 30).unwrap();
    let mut state = 0x5EED_u64;
    for _ in 0..100 {
        let j = 1 + (lcg(&mut state) * 30.0) as usize;
        let j = j.min(30);
        // s spanning both the series and closed-form branches
        let s = 6.0 * lcg(&mut state) / grid.knots()[j];
        for (m, tol) in [(0usize, 1e-8), (1, 1e-8), (2, 1e-6)] {
            let closed = b1_laplace(&grid, j, s, m).unwrap();
            let quad = laplace_by_quadrature(&grid, j, s, m);
            let rel = (closed - quad).abs() / quad.abs().max(1e-300);
            assert!(
                rel <= tol,
                "m={m} j={j} s={s}: closed={closed:.17e} quad={quad:.17e} rel={rel:.3e}"
            );
        }
    }
}

#[test]
fn laplace_derivative_matches_finite_difference() {
    let grid = build_knots(1e3, 1.0, 30).unwrap();
    let mut state = 0xABCD_u64;
    for _ in 0..60 {
        let j = 1 + (lcg(&mut state) * 30.0) as usize;
        let j = j.min(30);
        let s = 0.05 + 4.0 * lcg(&mut state) / grid.knots()[j];
        let h = 1e-6 * (1.0 + s);
        let fd = (b1_laplace(&grid, j, s + h, 0).unwrap() - b1_laplace(&grid, j, s - h, 0).unwrap())
            / (2.0 * h);
        let analytic = b1_laplace(&grid, j, s, 1).unwrap();
        let rel = (fd - analytic).abs() / analytic.abs().max(1e-300);
        assert!(rel <= 1e-6, "j={j} s={s}: fd={fd:.12e} analytic={analytic:.12e} rel={rel:.3e}");
    }
}

#[test]
fn output_matrix_matches_quadrature_entrywise() {
    let grid = build_knots(40.0, 1.0, 4).unwrap();
    let mut state = 7_u64;
    let s: Vec<f64> = (0..12).map(|_| 3.0 * lcg(&mut state)).collect();
    let a = output_matrix(&grid, &s).unwrap();
    for (n, &sn) in s.iter().enumerate() {
        for j in 1..=4 {
            let quad = laplace_by_quadrature(&grid, j, sn, 0);
            let rel = (a.row(n)[j - 1] - quad).abs() / quad.abs();
            assert!(rel <= 1e-8, "entry ({n},{j}) rel={rel:.3e}");
        }
    }
}
