//! Dense linear algebra kernels: Householder QR, one-sided Jacobi SVD with a
//! deterministic sign convention, LU with partial pivoting, and MINRES.
//!
//! Everything here is hand-rolled so that results are bitwise reproducible
//! across runs and platforms for a fixed scalar type; the SVD sign convention
//! (largest-magnitude entry of each left singular vector positive) makes the
//! tensor-train cores built on top of it reproducible as well.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Column-major storage so that the QR/Jacobi inner loops run on contiguous
/// slices.
#[derive(Clone)]
struct ColMat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> ColMat<T> {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    fn from_array(a: &Array2<T>) -> Self {
        let (rows, cols) = a.dim();
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(a[[i, j]]);
            }
        }
        Self { rows, cols, data }
    }

    fn col(&self, j: usize) -> &[T] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn col_mut(&mut self, j: usize) -> &mut [T] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// Two mutable columns at once (p < q).
    fn col_pair_mut(&mut self, p: usize, q: usize) -> (&mut [T], &mut [T]) {
        debug_assert!(p < q);
        let (a, b) = self.data.split_at_mut(q * self.rows);
        (&mut a[p * self.rows..(p + 1) * self.rows], &mut b[..self.rows])
    }

    fn to_array(&self) -> Array2<T> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for j in 0..self.cols {
            let c = self.col(j);
            for i in 0..self.rows {
                out[[i, j]] = c[i];
            }
        }
        out
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[inline]
fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// Householder QR
// ---------------------------------------------------------------------------

/// Compact thin QR factorization. Each reflector's tail is stored below the
/// diagonal of `mat`; its leading entry is kept in `v0`. The upper triangle
/// holds R.
pub struct QrFactor<T> {
    mat: ColMat<T>,
    betas: Vec<T>,
    v0: Vec<T>,
    k: usize,
}

impl<T: Scalar> QrFactor<T> {
    pub fn factor(a: &Array2<T>) -> Self {
        let mut m = ColMat::from_array(a);
        let cols = m.cols;
        let k = m.rows.min(cols);
        let mut betas = vec![T::zero(); k];
        let mut v0 = vec![T::zero(); k];

        for j in 0..k {
            // Build the reflector from column j, rows j..; v replaces x in place.
            let (alpha, beta) = {
                let col = &mut m.col_mut(j)[j..];
                let xnorm = norm2(col);
                if xnorm == T::zero() {
                    (T::zero(), T::zero())
                } else {
                    let alpha = if col[0] >= T::zero() { -xnorm } else { xnorm };
                    col[0] -= alpha;
                    let vnorm2 = dot(col, col);
                    let beta = if vnorm2 > T::zero() { T::from_f64_lossy(2.0) / vnorm2 } else { T::zero() };
                    (alpha, beta)
                }
            };
            betas[j] = beta;
            if beta != T::zero() {
                for l in j + 1..cols {
                    let (vj, cl) = m.col_pair_mut(j, l);
                    let v = &vj[j..];
                    let c = &mut cl[j..];
                    let w = beta * dot(v, c);
                    for i in 0..v.len() {
                        c[i] -= w * v[i];
                    }
                }
            }
            // Diagonal of R takes the slot where v0 currently sits.
            v0[j] = m.col(j)[j];
            m.col_mut(j)[j] = alpha;
        }

        QrFactor { mat: m, betas, v0, k }
    }

    /// Upper-triangular factor, k x n.
    pub fn r(&self) -> Array2<T> {
        let n = self.mat.cols;
        let mut r = Array2::zeros((self.k, n));
        for j in 0..n {
            let c = self.mat.col(j);
            for i in 0..self.k.min(j + 1) {
                r[[i, j]] = c[i];
            }
        }
        r
    }

    /// y = Q_thin * b where b is (k x p). Applies the stored reflectors in
    /// reverse to [b; 0].
    pub fn q_mul(&self, b: &Array2<T>) -> Array2<T> {
        let (bk, p) = b.dim();
        assert_eq!(bk, self.k, "q_mul: row count must equal min(m,n)");
        let rows = self.mat.rows;
        let mut y = ColMat::zeros(rows, p);
        for l in 0..p {
            let c = y.col_mut(l);
            for i in 0..self.k {
                c[i] = b[[i, l]];
            }
        }
        for j in (0..self.k).rev() {
            let beta = self.betas[j];
            if beta == T::zero() {
                continue;
            }
            let v = self.reflector(j);
            for l in 0..p {
                let c = &mut y.col_mut(l)[j..];
                let w = beta * dot(&v, c);
                for i in 0..v.len() {
                    c[i] -= w * v[i];
                }
            }
        }
        y.to_array()
    }

    /// Thin orthogonal factor, m x k.
    pub fn q_thin(&self) -> Array2<T> {
        let eye = Array2::from_shape_fn((self.k, self.k), |(i, j)| {
            if i == j {
                T::one()
            } else {
                T::zero()
            }
        });
        self.q_mul(&eye)
    }

    fn reflector(&self, j: usize) -> Vec<T> {
        let rows = self.mat.rows;
        let c = self.mat.col(j);
        let mut v = Vec::with_capacity(rows - j);
        v.push(self.v0[j]);
        v.extend_from_slice(&c[j + 1..]);
        v
    }
}

/// Thin QR convenience wrapper: a (m x n) -> (Q m x k, R k x n).
pub fn qr_thin<T: Scalar>(a: &Array2<T>) -> (Array2<T>, Array2<T>) {
    let f = QrFactor::factor(a);
    (f.q_thin(), f.r())
}

// ---------------------------------------------------------------------------
// One-sided Jacobi SVD
// ---------------------------------------------------------------------------

/// Thin SVD result: `a = u * diag(s) * vt` with `s` descending.
pub struct Svd<T> {
    pub u: Array2<T>,
    pub s: Vec<T>,
    pub vt: Array2<T>,
}

const JACOBI_MAX_SWEEPS: usize = 60;

/// One-sided Jacobi on an m x n matrix with m >= n: returns (w, v) with
/// a * v = w, w having pairwise orthogonal columns.
fn jacobi_orthogonalize<T: Scalar>(a: &Array2<T>) -> (ColMat<T>, ColMat<T>) {
    let (rows, n) = a.dim();
    let mut w = ColMat::from_array(a);
    let mut v = ColMat::zeros(n, n);
    for j in 0..n {
        v.col_mut(j)[j] = T::one();
    }
    if n <= 1 {
        return (w, v);
    }
    let eps = T::epsilon();
    let _ = rows;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (app, aqq, apq) = {
                    let cp = w.col(p);
                    let cq = w.col(q);
                    (dot(cp, cp), dot(cq, cq), dot(cp, cq))
                };
                if app == T::zero() || aqq == T::zero() {
                    continue;
                }
                if apq.abs() <= eps * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let two = T::from_f64_lossy(2.0);
                let zeta = (aqq - app) / (two * apq);
                let t = {
                    let denom = zeta.abs() + (T::one() + zeta * zeta).sqrt();
                    if zeta >= T::zero() {
                        T::one() / denom
                    } else {
                        -T::one() / denom
                    }
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                {
                    let (cp, cq) = w.col_pair_mut(p, q);
                    for i in 0..cp.len() {
                        let xp = cp[i];
                        let xq = cq[i];
                        cp[i] = c * xp - s * xq;
                        cq[i] = s * xp + c * xq;
                    }
                }
                {
                    let (vp, vq) = v.col_pair_mut(p, q);
                    for i in 0..vp.len() {
                        let xp = vp[i];
                        let xq = vq[i];
                        vp[i] = c * xp - s * xq;
                        vq[i] = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (w, v)
}

/// Deterministic thin SVD. Tall inputs are QR-reduced first; wide inputs go
/// through the transpose. The sign convention fixes the largest-magnitude
/// entry of each left singular vector to be positive (first index wins ties).
pub fn svd<T: Scalar>(a: &Array2<T>) -> Svd<T> {
    let (m, n) = a.dim();
    if m < n {
        let t = svd(&a.t().to_owned());
        let mut out = Svd { u: t.vt.t().to_owned(), s: t.s, vt: t.u.t().to_owned() };
        fix_signs(&mut out);
        return out;
    }
    // m >= n: QR first, Jacobi on the small R factor.
    let qr = QrFactor::factor(a);
    let r = qr.r();
    let (w, v) = jacobi_orthogonalize(&r);
    let k = n;
    let mut order: Vec<usize> = (0..k).collect();
    let norms: Vec<T> = (0..k).map(|j| norm2(w.col(j))).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));

    let mut u_r = Array2::zeros((k, k));
    let mut s = Vec::with_capacity(k);
    let mut vt = Array2::zeros((k, n));
    for (slot, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > T::zero() {
            let col = w.col(j);
            for i in 0..k {
                u_r[[i, slot]] = col[i] / sigma;
            }
        }
        let vc = v.col(j);
        for i in 0..n {
            vt[[slot, i]] = vc[i];
        }
    }
    let u = qr.q_mul(&u_r);
    let mut out = Svd { u, s, vt };
    fix_signs(&mut out);
    out
}

fn fix_signs<T: Scalar>(svd: &mut Svd<T>) {
    let (m, k) = svd.u.dim();
    for j in 0..k {
        let mut best = T::zero();
        let mut best_i = 0usize;
        for i in 0..m {
            let a = svd.u[[i, j]].abs();
            if a > best {
                best = a;
                best_i = i;
            }
        }
        if svd.u[[best_i, j]] < T::zero() {
            for i in 0..m {
                svd.u[[i, j]] = -svd.u[[i, j]];
            }
            for i in 0..svd.vt.ncols() {
                svd.vt[[j, i]] = -svd.vt[[j, i]];
            }
        }
    }
}

/// Smallest kept rank so that the discarded tail satisfies
/// sqrt(sum of squares) <= delta. `delta = 0` drops exact zeros only.
pub fn rank_for_tolerance<T: Scalar>(s: &[T], delta: T) -> usize {
    let mut tail = T::zero();
    let mut r = s.len();
    while r > 0 {
        let cand = tail + s[r - 1] * s[r - 1];
        if cand.sqrt() <= delta {
            tail = cand;
            r -= 1;
        } else {
            break;
        }
    }
    r
}

// ---------------------------------------------------------------------------
// LU with partial pivoting
// ---------------------------------------------------------------------------

pub struct LuFactor<T> {
    lu: Array2<T>,
    piv: Vec<usize>,
}

impl<T: Scalar> LuFactor<T> {
    pub fn factor(a: &Array2<T>) -> Result<Self> {
        let (m, n) = a.dim();
        if m != n {
            return Err(Error::Shape(format!("LU requires a square matrix, got {m}x{n}")));
        }
        let mut lu = a.clone();
        let mut piv = Vec::with_capacity(n);
        for col in 0..n {
            let mut p = col;
            let mut best = lu[[col, col]].abs();
            for i in col + 1..n {
                let v = lu[[i, col]].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == T::zero() {
                return Err(Error::Linalg(format!("singular matrix in LU at column {col}")));
            }
            piv.push(p);
            if p != col {
                for j in 0..n {
                    let tmp = lu[[col, j]];
                    lu[[col, j]] = lu[[p, j]];
                    lu[[p, j]] = tmp;
                }
            }
            let d = lu[[col, col]];
            for i in col + 1..n {
                let l = lu[[i, col]] / d;
                lu[[i, col]] = l;
                if l != T::zero() {
                    // Contiguous trailing-row update.
                    let pivot_row: Vec<T> = (col + 1..n).map(|j| lu[[col, j]]).collect();
                    for (off, j) in (col + 1..n).enumerate() {
                        lu[[i, j]] -= l * pivot_row[off];
                    }
                }
            }
        }
        Ok(LuFactor { lu, piv })
    }

    pub fn solve(&self, b: &Array1<T>) -> Array1<T> {
        let n = self.lu.nrows();
        assert_eq!(b.len(), n);
        let mut x = b.clone();
        for i in 0..n {
            let p = self.piv[i];
            if p != i {
                x.swap(i, p);
            }
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[[i, j]] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= self.lu[[i, j]] * x[j];
            }
            x[i] = acc / self.lu[[i, i]];
        }
        x
    }

    pub fn solve_mat(&self, b: &Array2<T>) -> Array2<T> {
        let mut out = Array2::zeros(b.dim());
        for j in 0..b.ncols() {
            let col = self.solve(&b.column(j).to_owned());
            for i in 0..b.nrows() {
                out[[i, j]] = col[i];
            }
        }
        out
    }

    /// Cheap condition proxy: ratio of extreme |U_ii|. Good enough to detect
    /// collocation matrices drifting toward singularity.
    pub fn cond_estimate(&self) -> f64 {
        let n = self.lu.nrows();
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..n {
            let d = self.lu[[i, i]].abs().to_f64_lossy();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

pub fn solve_dense<T: Scalar>(a: &Array2<T>, b: &Array1<T>) -> Result<Array1<T>> {
    Ok(LuFactor::factor(a)?.solve(b))
}

/// Explicit inverse (used for small collocation factors after a conditioning
/// check).
pub fn inverse<T: Scalar>(a: &Array2<T>) -> Result<Array2<T>> {
    let n = a.nrows();
    let f = LuFactor::factor(a)?;
    let eye = Array2::from_shape_fn((n, n), |(i, j)| if i == j { T::one() } else { T::zero() });
    Ok(f.solve_mat(&eye))
}

// ---------------------------------------------------------------------------
// MINRES
// ---------------------------------------------------------------------------

/// MINRES for symmetric (possibly indefinite) systems, with an optional
/// symmetric diagonal scaling supplied by the caller.
pub fn minres<T: Scalar, F>(apply: F, b: &Array1<T>, tol: T, max_iter: usize) -> (Array1<T>, usize, T)
where
    F: Fn(&Array1<T>) -> Array1<T>,
{
    let n = b.len();
    let mut x = Array1::zeros(n);
    let b_norm = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    if b_norm == T::zero() {
        return (x, 0, T::zero());
    }

    let mut v_prev: Array1<T> = Array1::zeros(n);
    let mut v = b.clone();
    let mut beta = b_norm;
    v.mapv_inplace(|e| e / beta);

    let mut w: Array1<T> = Array1::zeros(n);
    let mut w_prev: Array1<T> = Array1::zeros(n);
    let (mut c, mut s) = (T::one(), T::zero());
    let (mut c_prev, mut s_prev) = (T::one(), T::zero());
    let mut eta = beta;
    let mut rel = T::one();

    for it in 1..=max_iter {
        // Lanczos step.
        let mut av = apply(&v);
        let alpha = v.iter().zip(av.iter()).map(|(&a, &b)| a * b).sum::<T>();
        for i in 0..n {
            av[i] = av[i] - alpha * v[i] - beta * v_prev[i];
        }
        let beta_next = av.iter().map(|&e| e * e).sum::<T>().sqrt();

        // Previous rotations applied to the new column of T.
        let delta = c * alpha - c_prev * s * beta;
        let rho2 = s * alpha + c_prev * c * beta;
        let rho3 = s_prev * beta;

        // New rotation.
        let rho1 = (delta * delta + beta_next * beta_next).sqrt();
        if rho1 == T::zero() {
            break;
        }
        let c_new = delta / rho1;
        let s_new = beta_next / rho1;

        // Update solution.
        let mut w_new = Array1::zeros(n);
        for i in 0..n {
            w_new[i] = (v[i] - rho2 * w[i] - rho3 * w_prev[i]) / rho1;
        }
        let step = c_new * eta;
        for i in 0..n {
            x[i] += step * w_new[i];
        }
        eta = -s_new * eta;

        w_prev = w;
        w = w_new;
        c_prev = c;
        s_prev = s;
        c = c_new;
        s = s_new;
        v_prev = v;
        if beta_next == T::zero() {
            rel = T::zero();
            return (x, it, rel);
        }
        v = av;
        let bn = beta_next;
        v.mapv_inplace(|e| e / bn);
        beta = beta_next;

        rel = eta.abs() / b_norm;
        if rel <= tol {
            return (x, it, rel);
        }
    }
    (x, max_iter, rel)
}

/// Dense Kronecker product, used by oracles and tests.
pub fn kron_dense<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    let (am, an) = a.dim();
    let (bm, bn) = b.dim();
    let mut out = Array2::zeros((am * bm, an * bn));
    for i in 0..am {
        for j in 0..an {
            let aij = a[[i, j]];
            if aij == T::zero() {
                continue;
            }
            for k in 0..bm {
                for l in 0..bn {
                    out[[i * bm + k, j * bn + l]] = aij * b[[k, l]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_matrix(m: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        Array2::from_shape_fn((m, n), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn qr_reconstructs() {
        for (m, n, seed) in [(8, 5, 1u64), (5, 8, 2), (6, 6, 3), (30, 4, 4)] {
            let a = random_matrix(m, n, seed);
            let (q, r) = qr_thin(&a);
            let qr = q.dot(&r);
            let err = (&qr - &a).iter().map(|e| e * e).sum::<f64>().sqrt();
            assert!(err < 1e-12, "QR reconstruction error {err} for {m}x{n}");
            let qtq = q.t().dot(&q);
            for i in 0..q.ncols() {
                for j in 0..q.ncols() {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((qtq[[i, j]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn svd_reconstructs_and_orders() {
        for (m, n, seed) in [(7, 4, 10u64), (4, 7, 11), (6, 6, 12)] {
            let a = random_matrix(m, n, seed);
            let f = svd(&a);
            let k = m.min(n);
            assert_eq!(f.s.len(), k);
            for i in 1..k {
                assert!(f.s[i - 1] >= f.s[i]);
            }
            let mut us = f.u.clone();
            for j in 0..k {
                for i in 0..m {
                    us[[i, j]] *= f.s[j];
                }
            }
            let rec = us.dot(&f.vt);
            let err = (&rec - &a).iter().map(|e| e * e).sum::<f64>().sqrt();
            assert!(err < 1e-12, "SVD reconstruction error {err}");
        }
    }

    #[test]
    fn svd_sign_convention_deterministic() {
        let a = random_matrix(6, 5, 99);
        let f1 = svd(&a);
        let f2 = svd(&a.clone());
        assert_eq!(f1.u, f2.u);
        for j in 0..f1.s.len() {
            let col = f1.u.column(j);
            let mut best = 0.0;
            let mut best_v = 0.0;
            for &v in col.iter() {
                if v.abs() > best {
                    best = v.abs();
                    best_v = v;
                }
            }
            assert!(best_v >= 0.0);
        }
    }

    #[test]
    fn svd_rank_deficient() {
        // rank 2 by construction
        let b = random_matrix(6, 2, 5);
        let c = random_matrix(2, 5, 6);
        let a = b.dot(&c);
        let f = svd(&a);
        assert!(f.s[2] < 1e-12 * f.s[0]);
        assert_eq!(rank_for_tolerance(&f.s, 1e-10), 2);
    }

    #[test]
    fn lu_solves() {
        let a = array![[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]];
        let b = array![1.0, 2.0, 3.0];
        let x = solve_dense(&a, &b).unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().map(|e| e * e).sum::<f64>().sqrt() < 1e-13);
    }

    #[test]
    fn lu_rejects_singular() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(LuFactor::factor(&a).is_err());
    }

    #[test]
    fn minres_symmetric_indefinite() {
        // Saddle-like symmetric matrix.
        let a = array![
            [2.0, 0.0, 1.0],
            [0.0, 3.0, -1.0],
            [1.0, -1.0, 0.0]
        ];
        let b = array![1.0, -2.0, 0.5];
        let (x, _it, rel) = minres(|v| a.dot(v), &b, 1e-12, 200);
        assert!(rel < 1e-10);
        let r = a.dot(&x) - &b;
        assert!(r.iter().map(|e| e * e).sum::<f64>().sqrt() < 1e-9);
    }

    #[test]
    fn rank_tolerance_rules() {
        let s = [3.0, 2.0, 1e-16, 0.0];
        assert_eq!(rank_for_tolerance(&s, 0.0), 3); // exact zeros only
        assert_eq!(rank_for_tolerance(&s, 1e-12), 2);
        assert_eq!(rank_for_tolerance(&s, 10.0), 0);
    }
}
