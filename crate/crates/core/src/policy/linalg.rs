//! Dense row-major kernels used by the hand-written forward/backward passes.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `out = W x + b`, `W` is `rows x cols`.
#[inline]
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = b[r] + dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `out += W x`.
#[inline]
pub fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `dx += W^T dy`.
#[inline]
pub fn matvec_t_add(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (d, wv) in dx.iter_mut().zip(row) {
            *d += g * wv;
        }
    }
}

/// `G += dy x^T`.
#[inline]
pub fn outer_add(g: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for (gv, xv) in row.iter_mut().zip(x) {
            *gv += d * xv;
        }
    }
}

#[inline]
pub fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_match_naive() {
        let w: Vec<f64> = (0..15).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x = [1.0, -2.0, 0.5, 0.25, 3.0];
        let b = [0.1, 0.2, 0.3];
        let mut out = [0.0; 3];
        affine(&w, &b, &x, &mut out);
        for r in 0..3 {
            let naive: f64 = b[r] + (0..5).map(|c| w[r * 5 + c] * x[c]).sum::<f64>();
            assert!((out[r] - naive).abs() < 1e-12);
        }
        let dy = [1.0, 0.5, -1.0];
        let mut dx = [0.0; 5];
        matvec_t_add(&w, &dy, &mut dx);
        for c in 0..5 {
            let naive: f64 = (0..3).map(|r| w[r * 5 + c] * dy[r]).sum();
            assert!((dx[c] - naive).abs() < 1e-12);
        }
        let mut g = vec![0.0; 15];
        outer_add(&mut g, &dy, &x);
        assert_eq!(g[7], dy[1] * x[2]);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
