//! Operators stored as sums of Kronecker products of small per-dimension
//! factor matrices. This is the compressed format for mass, stiffness and the
//! KKT blocks: applying or projecting such an operator never materializes the
//! full matrix.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::linalg::kron_dense;
use crate::scalar::Scalar;

/// Sum of Kronecker products; term t represents ⊗_d terms[t][d].
#[derive(Debug, Clone)]
pub struct KroneckerSum<T> {
    terms: Vec<Vec<Array2<T>>>,
}

impl<T: Scalar> KroneckerSum<T> {
    pub fn new(terms: Vec<Vec<Array2<T>>>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Invalid("Kronecker sum needs at least one term".into()));
        }
        let ndims = terms[0].len();
        if ndims == 0 {
            return Err(Error::Invalid("Kronecker terms need at least one factor".into()));
        }
        for (t, term) in terms.iter().enumerate() {
            if term.len() != ndims {
                return Err(Error::Shape(format!("term {t} has {} factors, expected {ndims}", term.len())));
            }
            for d in 0..ndims {
                if term[d].dim() != terms[0][d].dim() {
                    return Err(Error::Shape(format!(
                        "term {t} factor {d} has shape {:?}, expected {:?}",
                        term[d].dim(),
                        terms[0][d].dim()
                    )));
                }
            }
        }
        Ok(Self { terms })
    }

    pub fn from_single(factors: Vec<Array2<T>>) -> Result<Self> {
        Self::new(vec![factors])
    }

    /// Identity operator on the given mode sizes.
    pub fn identity(dims: &[usize]) -> Self {
        let factors = dims
            .iter()
            .map(|&n| Array2::from_shape_fn((n, n), |(i, j)| if i == j { T::one() } else { T::zero() }))
            .collect();
        Self { terms: vec![factors] }
    }

    pub fn ndims(&self) -> usize {
        self.terms[0].len()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[Vec<Array2<T>>] {
        &self.terms
    }

    pub fn term(&self, t: usize) -> &[Array2<T>] {
        &self.terms[t]
    }

    pub fn row_dims(&self) -> Vec<usize> {
        self.terms[0].iter().map(|f| f.nrows()).collect()
    }

    pub fn col_dims(&self) -> Vec<usize> {
        self.terms[0].iter().map(|f| f.ncols()).collect()
    }

    pub fn nrows(&self) -> usize {
        self.row_dims().iter().product()
    }

    pub fn ncols(&self) -> usize {
        self.col_dims().iter().product()
    }

    /// Scales the operator by folding alpha into the first factor of each term.
    pub fn scale(&self, alpha: T) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|term| {
                let mut term = term.clone();
                term[0] = term[0].mapv(|v| v * alpha);
                term
            })
            .collect();
        Self { terms }
    }

    /// Per-factor transpose; transposes the represented matrix.
    pub fn transpose(&self) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|term| term.iter().map(|f| f.t().to_owned()).collect())
            .collect();
        Self { terms }
    }

    /// Concatenates the terms of two operators of identical shape (their sum).
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.ndims() != other.ndims() || self.row_dims() != other.row_dims() || self.col_dims() != other.col_dims() {
            return Err(Error::Shape("Kronecker sums must agree in shape to be added".into()));
        }
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Ok(Self { terms })
    }

    /// Adds a new leading dimension with the given factor on every term
    /// (e.g. a time factor in front of a spatial operator).
    pub fn prepend_factor(&self, factor: &Array2<T>) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|term| {
                let mut t = Vec::with_capacity(term.len() + 1);
                t.push(factor.clone());
                t.extend(term.iter().cloned());
                t
            })
            .collect();
        Self { terms }
    }

    /// Applies a per-dimension transformation to every factor.
    pub fn map_factors(&self, f: impl Fn(usize, &Array2<T>) -> Array2<T>) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|term| term.iter().enumerate().map(|(d, m)| f(d, m)).collect())
            .collect();
        Self { terms }
    }

    /// y = A x without forming the Kronecker products: mode-d contractions per
    /// term, summed in fixed term order. `x` must be shaped like the column
    /// dims.
    pub fn apply_dense(&self, x: &ArrayD<T>) -> Result<ArrayD<T>> {
        if x.shape() != self.col_dims().as_slice() {
            return Err(Error::Shape(format!(
                "operand has shape {:?}, operator expects {:?}",
                x.shape(),
                self.col_dims()
            )));
        }
        let mut out = ArrayD::zeros(IxDyn(&self.row_dims()));
        for term in &self.terms {
            let mut cur = x.to_owned();
            for (d, f) in term.iter().enumerate() {
                cur = mode_apply(&cur, d, f);
            }
            out += &cur;
        }
        Ok(out)
    }

    /// Flat-vector variant of [`apply_dense`].
    pub fn apply_flat(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.ncols() {
            return Err(Error::Shape(format!("vector length {} != {}", x.len(), self.ncols())));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&self.col_dims()), x.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let out = self.apply_dense(&tensor)?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Materializes the full matrix; guarded against desk-scale abuse.
    pub fn materialize(&self, cap: usize) -> Result<Array2<T>> {
        let size = self.nrows() * self.ncols();
        if size > cap {
            return Err(Error::SizeCap { what: "materialized Kronecker sum", size, cap });
        }
        let mut out = Array2::zeros((self.nrows(), self.ncols()));
        for term in &self.terms {
            let mut acc = term[0].clone();
            for f in &term[1..] {
                acc = kron_dense(&acc, f);
            }
            out += &acc;
        }
        Ok(out)
    }

    /// Storage footprint: total number of nonzero factor entries.
    pub fn storage_nnz(&self) -> usize {
        self.terms
            .iter()
            .map(|term| term.iter().map(|f| f.iter().filter(|&&v| v != T::zero()).count()).sum::<usize>())
            .sum()
    }

    /// Entry (i,j) by multi-indices, summed over terms.
    pub fn entry(&self, i: &[usize], j: &[usize]) -> T {
        let mut acc = T::zero();
        for term in &self.terms {
            let mut prod = T::one();
            for (d, f) in term.iter().enumerate() {
                prod *= f[[i[d], j[d]]];
                if prod == T::zero() {
                    break;
                }
            }
            acc += prod;
        }
        acc
    }

    /// Frobenius norm squared via per-dimension factor inner products.
    pub fn frobenius_norm_sq(&self) -> T {
        let mut acc = T::zero();
        for a in &self.terms {
            for b in &self.terms {
                let mut prod = T::one();
                for d in 0..self.ndims() {
                    let mut ip = T::zero();
                    for (x, y) in a[d].iter().zip(b[d].iter()) {
                        ip += *x * *y;
                    }
                    prod *= ip;
                }
                acc += prod;
            }
        }
        acc
    }
}

/// Contracts matrix `m` with mode `d` of tensor `x`.
pub(crate) fn mode_apply<T: Scalar>(x: &ArrayD<T>, d: usize, m: &Array2<T>) -> ArrayD<T> {
    let nd = x.ndim();
    let mut perm: Vec<usize> = (0..nd).collect();
    perm.remove(d);
    perm.insert(0, d);
    let xp = x.view().permuted_axes(IxDyn(&perm));
    let xp = xp.as_standard_layout();
    let n_d = xp.shape()[0];
    let rest: usize = xp.shape()[1..].iter().product();
    let flat = xp
        .to_owned()
        .into_shape_with_order((n_d, rest))
        .expect("mode unfold");
    let y = m.dot(&flat);
    let mut new_shape: Vec<usize> = Vec::with_capacity(nd);
    new_shape.push(m.nrows());
    new_shape.extend(xp.shape()[1..].iter().copied());
    let y = y.into_shape_with_order(IxDyn(&new_shape)).expect("mode fold");
    // Undo the permutation.
    let mut inv = vec![0usize; nd];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    y.permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rnd(m: usize, n: usize, rng: &mut StdRng) -> Array2<f64> {
        Array2::from_shape_fn((m, n), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_sum_is_identity() {
        let a = KroneckerSum::<f64>::identity(&[2, 3]);
        let x = ArrayD::from_shape_vec(IxDyn(&[2, 3]), (0..6).map(|v| v as f64).collect()).unwrap();
        let y = a.apply_dense(&x).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn matches_dense_kronecker_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = rnd(4, 4, &mut rng);
        let b = rnd(4, 4, &mut rng);
        let op = KroneckerSum::from_single(vec![a.clone(), b.clone()]).unwrap();
        let x = Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0));
        let y = op.apply_flat(x.as_slice().unwrap()).unwrap();
        // Row-major flattening: (A ⊗ B) vec(X) = vec(A X Bᵀ).
        let xm = x.clone().into_shape_with_order((4, 4)).unwrap();
        let expect = a.dot(&xm).dot(&b.t());
        for (i, &v) in expect.iter().enumerate() {
            assert_abs_diff_eq!(y[i], v, epsilon = 1e-12);
        }
        let dense = op.materialize(1 << 20).unwrap();
        let oracle = kron_dense(&a, &b);
        assert_abs_diff_eq!(
            (&dense - &oracle).iter().map(|e| e * e).sum::<f64>().sqrt(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn two_term_sum_matches_materialized() {
        let mut rng = StdRng::seed_from_u64(9);
        let terms = vec![
            vec![rnd(3, 3, &mut rng), rnd(3, 3, &mut rng), rnd(3, 3, &mut rng)],
            vec![rnd(3, 3, &mut rng), rnd(3, 3, &mut rng), rnd(3, 3, &mut rng)],
        ];
        let op = KroneckerSum::new(terms).unwrap();
        let dense = op.materialize(1 << 20).unwrap();
        let x: Vec<f64> = (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = op.apply_flat(&x).unwrap();
        let yd = dense.dot(&Array1::from_vec(x));
        let num = y.iter().zip(yd.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den = yd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-12);
    }

    #[test]
    fn transpose_and_scale() {
        let mut rng = StdRng::seed_from_u64(12);
        let op = KroneckerSum::new(vec![vec![rnd(2, 3, &mut rng), rnd(3, 2, &mut rng)]]).unwrap();
        let dense = op.materialize(1 << 20).unwrap();
        let dt = op.transpose().materialize(1 << 20).unwrap();
        assert_eq!(dt, dense.t().to_owned());
        let ds = op.scale(2.5).materialize(1 << 20).unwrap();
        assert_abs_diff_eq!(
            (&ds - &dense.mapv(|v| 2.5 * v)).iter().map(|e| e * e).sum::<f64>(),
            0.0,
            epsilon = 1e-20
        );
    }

    #[test]
    fn frobenius_inner_matches_dense() {
        let mut rng = StdRng::seed_from_u64(21);
        let op = KroneckerSum::new(vec![
            vec![rnd(3, 3, &mut rng), rnd(2, 2, &mut rng)],
            vec![rnd(3, 3, &mut rng), rnd(2, 2, &mut rng)],
        ])
        .unwrap();
        let dense = op.materialize(1 << 20).unwrap();
        let expect: f64 = dense.iter().map(|v| v * v).sum();
        assert_abs_diff_eq!(op.frobenius_norm_sq(), expect, epsilon = 1e-10);
    }

    #[test]
    fn shape_mismatch_errors() {
        let op = KroneckerSum::<f64>::identity(&[2, 2]);
        assert!(op.apply_flat(&[1.0, 2.0, 3.0]).is_err());
        let bad = KroneckerSum::new(vec![
            vec![array![[1.0_f64]]],
            vec![array![[1.0, 0.0], [0.0, 1.0]]],
        ]);
        assert!(bad.is_err());
    }
}
