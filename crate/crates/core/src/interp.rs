//! Shape-preserving (Fritsch–Carlson) cubic Hermite interpolation.

/// Monotone cubic interpolant with flat extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    /// `xs` must be strictly increasing and non-empty.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        assert!(!xs.is_empty() && xs.len() == ys.len());
        debug_assert!(xs.windows(2).all(|w| w[1] > w[0]));
        let slopes = pchip_slopes(&xs, &ys);
        Self { xs, ys, slopes }
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let i = self.xs.partition_point(|&v| v <= x) - 1;
        hermite(
            self.xs[i],
            self.xs[i + 1],
            self.ys[i],
            self.ys[i + 1],
            self.slopes[i],
            self.slopes[i + 1],
            x,
        )
    }
}

fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64, x: f64) -> f64 {
    let h = x1 - x0;
    let t = (x - x0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + t) * h * d0 + (-2.0 * t3 + 3.0 * t2) * y1 + (t3 - t2) * h * d1
}

/// Node derivatives per Fritsch–Carlson: weighted harmonic mean of the
/// adjacent secants, zero at local extrema; one-sided three-point ends.
fn pchip_slopes(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut d = vec![0.0; n];
    if n < 2 {
        return d;
    }
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
    if n == 2 {
        d[0] = delta[0];
        d[1] = delta[0];
        return d;
    }
    for i in 1..n - 1 {
        if delta[i - 1] * delta[i] <= 0.0 {
            d[i] = 0.0;
        } else {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
        }
    }
    d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

fn end_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if d.signum() != del0.signum() {
        0.0
    } else if del0.signum() != del1.signum() && d.abs() > 3.0 * del0.abs() {
        3.0 * del0
    } else {
        d
    }
}

/// Monotone cubic evaluation on a uniform grid using only the local
/// four-point stencil; matches [`MonotoneCubic`] away from the ends.
pub fn uniform_pchip(x0: f64, dx: f64, ys: &[f64], x: f64) -> f64 {
    let n = ys.len();
    let last = x0 + dx * (n - 1) as f64;
    if x <= x0 {
        return ys[0];
    }
    if x >= last {
        return ys[n - 1];
    }
    let i = (((x - x0) / dx) as usize).min(n - 2);
    let secant = |j: usize| (ys[j + 1] - ys[j]) / dx;
    let slope_at = |j: usize| -> f64 {
        if j == 0 || j == n - 1 {
            let s = if j == 0 { secant(0) } else { secant(n - 2) };
            return s;
        }
        let (a, b) = (secant(j - 1), secant(j));
        if a * b <= 0.0 {
            0.0
        } else {
            2.0 * a * b / (a + b)
        }
    };
    let xi = x0 + dx * i as f64;
    hermite(xi, xi + dx, ys[i], ys[i + 1], slope_at(i), slope_at(i + 1), x)
}
