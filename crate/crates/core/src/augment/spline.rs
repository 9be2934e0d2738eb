//! Natural cubic spline interpolation.

/// Cubic spline with zero second derivative at both ends.
pub struct NaturalSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalSpline {
    /// `xs` must be strictly increasing with at least two knots.
    pub fn new(xs: &[f64], ys: &[f64]) -> Self {
        assert_eq!(xs.len(), ys.len());
        assert!(xs.len() >= 2, "spline needs two knots");
        let n = xs.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations.
            let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                upper[i] = h[i + 1];
                rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h[i + 1] - (ys[i + 1] - ys[i]) / h[i]);
            }
            for i in 1..k {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            m,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.xs.len();
        let seg = match self.xs.iter().rposition(|&x| x <= t) {
            None => 0,
            Some(i) => i.min(n - 2),
        };
        let (x0, x1) = (self.xs[seg], self.xs[seg + 1]);
        let h = x1 - x0;
        let a = (x1 - t) / h;
        let b = (t - x0) / h;
        a * self.ys[seg]
            + b * self.ys[seg + 1]
            + ((a * a * a - a) * self.m[seg] + (b * b * b - b) * self.m[seg + 1]) * h * h / 6.0
    }
}

/// Spline through `knots` placed evenly on `[0, len - 1]`, sampled at every index.
pub fn spline_curve(knots: &[f64], len: usize) -> Vec<f64> {
    if len == 1 || knots.len() == 1 {
        return vec![knots[0]; len];
    }
    let span = (len - 1) as f64;
    let xs: Vec<f64> = (0..knots.len())
        .map(|j| span * j as f64 / (knots.len() - 1) as f64)
        .collect();
    let s = NaturalSpline::new(&xs, knots);
    (0..len).map(|t| s.eval(t as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_knots_and_linear_data() {
        let xs = [0.0, 1.0, 2.5, 4.0];
        let ys = [1.0, 3.0, 6.0, 9.0];
        let s = NaturalSpline::new(&xs, &ys);
        for (x, y) in xs.iter().zip(ys) {
            assert!((s.eval(*x) - y).abs() < 1e-12);
        }
        let line = NaturalSpline::new(&[0.0, 1.0, 2.0], &[0.0, 2.0, 4.0]);
        assert!((line.eval(1.5) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn natural_boundary_three_knots() {
        // Knots (0,0), (1,1), (2,0): M1 = 6*(-1 - 1)/4 = -3.
        let s = NaturalSpline::new(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]);
        // On [0,1]: S(t) = t + (t^3 - t) * M1 / 6 at t = 0.5
        let want = 0.5 + (0.125 - 0.5) * -3.0 / 6.0;
        assert!((s.eval(0.5) - want).abs() < 1e-12);
    }

    #[test]
    fn two_knot_curve_is_linear() {
        assert_eq!(spline_curve(&[1.0, 2.0], 3), vec![1.0, 1.5, 2.0]);
    }
}
