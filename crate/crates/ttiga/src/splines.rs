//! Univariate B-spline spaces on [0,1] and their tensor products.
//!
//! A space is described by an open knot vector and a degree. Evaluation uses
//! the Cox-de Boor recursion restricted to the local nonzero window; the basis
//! is right-continuous with the right endpoint special-cased so that the last
//! basis function takes the value one at x = 1.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Univariate B-spline space: open knot vector on [0,1] plus degree.
#[derive(Debug, Clone, PartialEq)]
pub struct UnivariateSpline<T> {
    knots: Vec<T>,
    degree: usize,
}

impl<T: Scalar> UnivariateSpline<T> {
    pub fn new(knots: Vec<T>, degree: usize) -> Result<Self> {
        let p = degree;
        if knots.len() < 2 * (p + 1) {
            return Err(Error::Invalid(format!(
                "knot vector too short: {} entries for degree {p}",
                knots.len()
            )));
        }
        let n = knots.len() - p - 1;
        if n < p + 1 {
            return Err(Error::Invalid(format!("basis count {n} below degree+1 = {}", p + 1)));
        }
        for w in knots.windows(2) {
            if w[1] < w[0] {
                return Err(Error::Invalid("knots must be nondecreasing".into()));
            }
        }
        let zero = T::zero();
        let one = T::one();
        if knots[0] < zero || *knots.last().unwrap() > one {
            return Err(Error::Invalid("knots must lie in [0,1]".into()));
        }
        for i in 0..=p {
            if knots[i] != zero {
                return Err(Error::Invalid(format!("open knot form: first {} entries must be 0", p + 1)));
            }
            if knots[knots.len() - 1 - i] != one {
                return Err(Error::Invalid(format!("open knot form: last {} entries must be 1", p + 1)));
            }
        }
        if knots[p + 1] == zero || knots[n - 1] == one {
            return Err(Error::Invalid("boundary knot multiplicity exceeds degree+1".into()));
        }
        // Interior multiplicities.
        let mut i = p + 1;
        while i < n {
            let mut j = i;
            while j < n && knots[j] == knots[i] {
                j += 1;
            }
            if j - i > p.max(1) {
                return Err(Error::Invalid(format!(
                    "interior knot {} has multiplicity {} > degree {}",
                    knots[i], j - i, p
                )));
            }
            i = j;
        }
        Ok(Self { knots, degree })
    }

    /// Single span [0,1] of the given degree.
    pub fn single_span(degree: usize) -> Self {
        let mut knots = vec![T::zero(); degree + 1];
        knots.extend(std::iter::repeat(T::one()).take(degree + 1));
        Self { knots, degree }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Distinct knot values in increasing order.
    pub fn breakpoints(&self) -> Vec<T> {
        let mut out: Vec<T> = Vec::new();
        for &k in &self.knots {
            if out.last().map_or(true, |&l| k > l) {
                out.push(k);
            }
        }
        out
    }

    /// Nonempty spans as (left, right) pairs.
    pub fn spans(&self) -> Vec<(T, T)> {
        self.breakpoints().windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn span_count(&self) -> usize {
        self.breakpoints().len() - 1
    }

    /// Knot index mu with knots[mu] <= x < knots[mu+1]; x = 1 maps to the last
    /// nonempty span so that [0,1] is closed.
    fn find_span(&self, x: T) -> usize {
        let n = self.len();
        let p = self.degree;
        if x >= T::one() {
            return n - 1;
        }
        let mut lo = p;
        let mut hi = n; // valid span start indices are p..n-1
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    fn check_domain(&self, x: T) -> Result<()> {
        if x < T::zero() || x > T::one() {
            return Err(Error::Domain(format!("evaluation point {x} outside [0,1]")));
        }
        Ok(())
    }

    /// Cox-de Boor triangle for the degree-q basis on this knot vector
    /// (q <= degree). Returns values of basis functions mu-q ..= mu.
    fn window_values_of_degree(&self, x: T, mu: usize, q: usize) -> Vec<T> {
        let t = &self.knots;
        let mut vals = vec![T::zero(); q + 1];
        vals[0] = T::one();
        let mut left = vec![T::zero(); q + 1];
        let mut right = vec![T::zero(); q + 1];
        for j in 1..=q {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = T::zero();
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != T::zero() { vals[r] / denom } else { T::zero() };
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        vals
    }

    /// Values of the degree-p basis functions that are nonzero at x:
    /// (first index, p+1 values).
    pub fn basis_window(&self, x: T) -> Result<(usize, Vec<T>)> {
        self.check_domain(x)?;
        let mu = self.find_span(x);
        Ok((mu - self.degree, self.window_values_of_degree(x, mu, self.degree)))
    }

    /// Order-th derivative of the nonzero basis functions at x:
    /// (first index, p+1 values). Orders above the degree give zeros.
    pub fn deriv_window(&self, x: T, order: usize) -> Result<(usize, Vec<T>)> {
        self.check_domain(x)?;
        let p = self.degree;
        let mu = self.find_span(x);
        if order > p {
            return Ok((mu - p, vec![T::zero(); p + 1]));
        }
        let q = p - order;
        // Degree-q values, then `order` difference steps up the degree ladder.
        let mut vals = self.window_values_of_degree(x, mu, q);
        let t = &self.knots;
        for s in q + 1..=p {
            let s_t = T::from_f64_lossy(s as f64);
            let mut out = vec![T::zero(); s + 1];
            // out[w] = derivative step for basis index i = mu - s + w;
            // vals holds degree-(s-1) data for indices mu-s+1 ..= mu.
            for (w, slot) in out.iter_mut().enumerate() {
                let i = mu - s + w;
                let b_i = if w >= 1 { vals[w - 1] } else { T::zero() };
                let b_i1 = if w < vals.len() { vals[w] } else { T::zero() };
                let d1 = t[i + s] - t[i];
                let d2 = t[i + s + 1] - t[i + 1];
                let term1 = if d1 != T::zero() { b_i / d1 } else { T::zero() };
                let term2 = if d2 != T::zero() { b_i1 / d2 } else { T::zero() };
                *slot = s_t * (term1 - term2);
            }
            vals = out;
        }
        Ok((mu - p, vals))
    }

    /// All n basis values at x.
    pub fn eval_basis_all(&self, x: T) -> Result<Vec<T>> {
        let (start, window) = self.basis_window(x)?;
        let mut out = vec![T::zero(); self.len()];
        for (off, v) in window.into_iter().enumerate() {
            out[start + off] = v;
        }
        Ok(out)
    }

    /// All n order-th derivatives at x.
    pub fn eval_basis_deriv(&self, x: T, order: usize) -> Result<Vec<T>> {
        let (start, window) = self.deriv_window(x, order)?;
        let mut out = vec![T::zero(); self.len()];
        for (off, v) in window.into_iter().enumerate() {
            out[start + off] = v;
        }
        Ok(out)
    }

    /// Inserts k equispaced knots strictly inside every nonempty span.
    pub fn refine_knots(&self, k: usize) -> Self {
        if k == 0 {
            return self.clone();
        }
        let mut knots = self.knots.clone();
        for (a, b) in self.spans() {
            for j in 1..=k {
                let ratio = T::from_f64_lossy(j as f64) / T::from_f64_lossy((k + 1) as f64);
                knots.push(a + (b - a) * ratio);
            }
        }
        knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Self { knots, degree: self.degree }
    }

    /// Greville abscissae: one collocation point per basis function.
    pub fn greville(&self) -> Result<Vec<T>> {
        let p = self.degree;
        let n = self.len();
        let mut out = Vec::with_capacity(n);
        if p == 0 {
            let half = T::from_f64_lossy(0.5);
            for i in 0..n {
                out.push((self.knots[i] + self.knots[i + 1]) * half);
            }
        } else {
            let inv_p = T::one() / T::from_f64_lossy(p as f64);
            for i in 0..n {
                let mut acc = T::zero();
                for j in 1..=p {
                    acc += self.knots[i + j];
                }
                out.push(acc * inv_p);
            }
        }
        for w in out.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Invalid(format!(
                    "duplicate Greville abscissa {}: collocation matrix would be singular",
                    w[0]
                )));
            }
        }
        Ok(out)
    }

    /// Square collocation matrix B[i,j] = beta_j(x_i) at the given points.
    pub fn collocation_matrix(&self, points: &[T]) -> Result<Array2<T>> {
        let n = self.len();
        let mut b = Array2::zeros((points.len(), n));
        for (row, &x) in points.iter().enumerate() {
            let (start, window) = self.basis_window(x)?;
            for (off, v) in window.into_iter().enumerate() {
                b[[row, start + off]] = v;
            }
        }
        Ok(b)
    }

    /// Transfer matrix onto a refined space sharing this knot vector: the
    /// coefficients c of a spline here become T*c on `fine`. Built by chained
    /// single-knot insertion, so the represented function is unchanged to
    /// machine precision.
    pub fn insertion_matrix(&self, fine: &Self) -> Result<Array2<T>> {
        if fine.degree != self.degree {
            return Err(Error::Invalid("insertion requires equal degrees".into()));
        }
        // Multiset difference fine - coarse.
        let mut extra: Vec<T> = Vec::new();
        let mut ci = 0;
        for &fk in &fine.knots {
            if ci < self.knots.len() && self.knots[ci] == fk {
                ci += 1;
            } else {
                extra.push(fk);
            }
        }
        if ci != self.knots.len() {
            return Err(Error::Invalid("refined knot vector must contain the coarse knots".into()));
        }
        let p = self.degree;
        let mut knots = self.knots.clone();
        let n0 = self.len();
        let mut m = Array2::from_shape_fn((n0, n0), |(i, j)| if i == j { T::one() } else { T::zero() });
        for &u in &extra {
            let cur = Self { knots: knots.clone(), degree: p };
            let mu = cur.find_span(u);
            let n_cur = cur.len();
            let mut next = Array2::zeros((n_cur + 1, m.ncols()));
            for i in 0..=n_cur {
                if i <= mu - p {
                    for j in 0..m.ncols() {
                        next[[i, j]] = m[[i, j]];
                    }
                } else if i > mu {
                    for j in 0..m.ncols() {
                        next[[i, j]] = m[[i - 1, j]];
                    }
                } else {
                    let denom = knots[i + p] - knots[i];
                    let alpha = if denom != T::zero() { (u - knots[i]) / denom } else { T::zero() };
                    for j in 0..m.ncols() {
                        next[[i, j]] = alpha * m[[i, j]] + (T::one() - alpha) * m[[i - 1, j]];
                    }
                }
            }
            m = next;
            let pos = knots.iter().position(|&k| k > u).unwrap_or(knots.len());
            knots.insert(pos, u);
        }
        if knots != fine.knots {
            return Err(Error::Invalid("refined knot vector mismatch after insertion".into()));
        }
        Ok(m)
    }
}

/// Tensor-product spline space.
#[derive(Debug, Clone)]
pub struct TensorSpace<T> {
    factors: Vec<UnivariateSpline<T>>,
}

impl<T: Scalar> TensorSpace<T> {
    pub fn new(factors: Vec<UnivariateSpline<T>>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Invalid("tensor space needs at least one factor".into()));
        }
        Ok(Self { factors })
    }

    pub fn dim(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[UnivariateSpline<T>] {
        &self.factors
    }

    pub fn factor(&self, d: usize) -> &UnivariateSpline<T> {
        &self.factors[d]
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.len()).collect()
    }

    pub fn total_len(&self) -> usize {
        self.dims().iter().product()
    }

    /// Per-dimension Greville abscissae.
    pub fn greville_grid(&self) -> Result<Vec<Vec<T>>> {
        self.factors.iter().map(|f| f.greville()).collect()
    }

    pub fn refine_knots(&self, k: usize) -> Self {
        Self { factors: self.factors.iter().map(|f| f.refine_knots(k)).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn hat_spline() -> UnivariateSpline<f64> {
        UnivariateSpline::new(vec![0.0, 0.0, 0.5, 1.0, 1.0], 1).unwrap()
    }

    #[test]
    fn linear_hats() {
        let s = hat_spline();
        let v = s.eval_basis_all(0.25).unwrap();
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(v[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn bernstein_quadratic() {
        let s = UnivariateSpline::<f64>::single_span(2);
        let v = s.eval_basis_all(0.5).unwrap();
        assert_abs_diff_eq!(v[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(v[2], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn partition_of_unity() {
        let s = UnivariateSpline::new(
            vec![0.0, 0.0, 0.0, 0.2, 0.2, 0.55, 0.8, 1.0, 1.0, 1.0],
            2,
        )
        .unwrap();
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            let sum: f64 = s.eval_basis_all(x).unwrap().iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn right_endpoint_interpolates() {
        let s = UnivariateSpline::new(vec![0.0, 0.0, 0.0, 0.4, 1.0, 1.0, 1.0], 2).unwrap();
        let v = s.eval_basis_all(1.0).unwrap();
        assert_abs_diff_eq!(*v.last().unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[..v.len() - 1].iter().sum::<f64>(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn hat_slopes() {
        let s = hat_spline();
        let d = s.eval_basis_deriv(0.25, 1).unwrap();
        assert_abs_diff_eq!(d[0], -2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d[1], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d[2], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn derivative_sums_to_zero() {
        let s = UnivariateSpline::new(
            vec![0.0, 0.0, 0.0, 0.25, 0.5, 0.75, 1.0, 1.0, 1.0],
            2,
        )
        .unwrap();
        for &x in &[0.1, 0.25, 0.3, 0.6, 0.97] {
            let sum: f64 = s.eval_basis_deriv(x, 1).unwrap().iter().sum();
            assert_abs_diff_eq!(sum, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bernstein_endpoint_derivative() {
        let s = UnivariateSpline::<f64>::single_span(2);
        let d = s.eval_basis_deriv(0.0, 1).unwrap();
        assert_abs_diff_eq!(d[0], -2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d[1], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d[2], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn order_above_degree_is_zero() {
        let s = hat_spline();
        let d = s.eval_basis_deriv(0.3, 2).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refinement_inserts_equispaced_knots() {
        let s = UnivariateSpline::new(vec![0.0, 0.0, 1.0, 1.0], 1).unwrap();
        let r = s.refine_knots(4);
        let interior: Vec<f64> = r.knots().iter().copied().filter(|&k| k > 0.0 && k < 1.0).collect();
        assert_eq!(interior, vec![0.2, 0.4, 0.6, 0.8]);
        assert_eq!(r.len(), s.len() + 4);
        assert_eq!(r.span_count(), 5);
    }

    #[test]
    fn refinement_zero_is_identity() {
        let s = hat_spline();
        assert_eq!(s.refine_knots(0), s);
    }

    #[test]
    fn refinement_midpoints() {
        let s = hat_spline();
        let r = s.refine_knots(1);
        let interior: Vec<f64> = r.knots().iter().copied().filter(|&k| k > 0.0 && k < 1.0).collect();
        assert_eq!(interior, vec![0.25, 0.5, 0.75]);
    }

    #[test]
    fn greville_points() {
        let s = hat_spline();
        assert_eq!(s.greville().unwrap(), vec![0.0, 0.5, 1.0]);
        let b = UnivariateSpline::<f64>::single_span(2);
        assert_eq!(b.greville().unwrap(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn domain_errors() {
        let s = hat_spline();
        assert!(s.eval_basis_all(-0.1).is_err());
        assert!(s.eval_basis_all(1.1).is_err());
    }

    #[test]
    fn rejects_bad_knot_vectors() {
        assert!(UnivariateSpline::new(vec![0.0, 0.5, 1.0, 1.0], 1).is_err()); // not open
        assert!(UnivariateSpline::new(vec![0.0, 0.0, 0.6, 0.4, 1.0, 1.0], 1).is_err()); // decreasing
        assert!(UnivariateSpline::new(vec![0.0, 0.0, 0.5, 0.5, 1.0, 1.0], 1).is_err()); // mult > p
    }

    #[test]
    fn insertion_matrix_preserves_values() {
        let coarse = UnivariateSpline::new(vec![0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0], 2).unwrap();
        let fine = coarse.refine_knots(3);
        let t = coarse.insertion_matrix(&fine).unwrap();
        assert_eq!(t.dim(), (fine.len(), coarse.len()));
        // Coefficients of some spline in the coarse space.
        let c: Vec<f64> = (0..coarse.len()).map(|i| (i as f64 * 0.7).sin() + 1.3).collect();
        let cf = t.dot(&ndarray::Array1::from_vec(c.clone()));
        for i in 0..=50 {
            let x = i as f64 / 50.0;
            let vc = coarse.eval_basis_all(x).unwrap();
            let vf = fine.eval_basis_all(x).unwrap();
            let coarse_val: f64 = vc.iter().zip(&c).map(|(b, c)| b * c).sum();
            let fine_val: f64 = vf.iter().zip(cf.iter()).map(|(b, c)| b * c).sum();
            assert_abs_diff_eq!(coarse_val, fine_val, epsilon = 1e-13);
        }
    }
}
