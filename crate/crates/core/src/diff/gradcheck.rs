//! Central finite-difference gradient checking, used throughout the test
//! suites as the independent oracle for reverse-mode gradients.

/// Central finite differences of a scalar function at `x`, step `h` per
/// coordinate, in f64.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central finite differences over a subset of coordinates.
pub fn finite_diff_subset(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut g = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

/// Whether `a` and `b` agree within relative tolerance `rtol` (with a small
/// absolute floor so near-zero gradients do not amplify FD noise).
pub fn grads_close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * a.abs().max(b.abs())
}

/// Max relative mismatch between two gradient vectors, under the
/// `atol + rtol*max` acceptance rule. Returns the first failing index.
pub fn first_mismatch(ad: &[f64], fd: &[f64], rtol: f64, atol: f64) -> Option<(usize, f64, f64)> {
    ad.iter()
        .zip(fd)
        .enumerate()
        .find(|(_, (&a, &b))| !grads_close(a, b, rtol, atol))
        .map(|(i, (&a, &b))| (i, a, b))
}
