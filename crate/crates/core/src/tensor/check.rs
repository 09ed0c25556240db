/// Central difference `(f(x + h·e_i) − f(x − h·e_i)) / 2h` at coordinate `i`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let plus = f(&probe);
    probe[i] = x[i] - h;
    let minus = f(&probe);
    (plus - minus) / (2.0 * h)
}

/// Max over `coords` of `|analytic − central| / (|analytic| + 1e-12)`.
///
/// `analytic` holds the full gradient at `x`; only the listed coordinates are probed.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> f64 {
    coords
        .iter()
        .map(|&i| {
            let numeric = central_difference(&mut f, x, i, h);
            (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-12)
        })
        .fold(0.0, f64::max)
}
