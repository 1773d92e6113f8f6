//! Spline and NURBS geometry mappings from the unit cube and the derived
//! weight functions: the Jacobian determinant magnitude and the scaled
//! inverse metric that appear in pulled-back mass/stiffness integrals.

use ndarray::{Array2, ArrayD};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::splines::TensorSpace;

/// Iterates all multi-indices below `dims`, last index fastest.
pub(crate) fn for_each_multi(dims: &[usize], mut f: impl FnMut(&[usize])) {
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return;
    }
    let mut idx = vec![0usize; dims.len()];
    'outer: loop {
        f(&idx);
        for k in (0..dims.len()).rev() {
            idx[k] += 1;
            if idx[k] < dims[k] {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
}

/// Geometry mapping G from [0,1]^D onto a physical domain, given by a control
/// point tensor over a tensor-product spline space, optionally rationalized by
/// positive NURBS weights.
#[derive(Debug, Clone)]
pub struct GeometryMap<T> {
    space: TensorSpace<T>,
    control_points: ArrayD<T>,
    weights: Option<ArrayD<T>>,
}

impl<T: Scalar> GeometryMap<T> {
    pub fn new(space: TensorSpace<T>, control_points: ArrayD<T>, weights: Option<ArrayD<T>>) -> Result<Self> {
        let d = space.dim();
        if !(2..=3).contains(&d) {
            return Err(Error::Invalid(format!("geometry dimension must be 2 or 3, got {d}")));
        }
        let dims = space.dims();
        let mut expect = dims.clone();
        expect.push(d);
        if control_points.shape() != expect.as_slice() {
            return Err(Error::Shape(format!(
                "control point tensor has shape {:?}, expected {:?}",
                control_points.shape(),
                expect
            )));
        }
        if let Some(w) = &weights {
            if w.shape() != dims.as_slice() {
                return Err(Error::Shape(format!(
                    "weight tensor has shape {:?}, expected {:?}",
                    w.shape(),
                    dims
                )));
            }
            if w.iter().any(|&v| v <= T::zero()) {
                return Err(Error::Invalid("NURBS weights must be strictly positive".into()));
            }
        }
        let control_points = control_points.as_standard_layout().to_owned();
        let weights = weights.map(|w| w.as_standard_layout().to_owned());
        Ok(Self { space, control_points, weights })
    }

    /// Identity map: control points on the Greville grid (linear precision).
    pub fn greville_identity(space: TensorSpace<T>) -> Result<Self> {
        let d = space.dim();
        let grid = space.greville_grid()?;
        let dims = space.dims();
        let mut shape = dims.clone();
        shape.push(d);
        let mut cp = ArrayD::zeros(ndarray::IxDyn(&shape));
        for_each_multi(&dims, |idx| {
            let mut full = idx.to_vec();
            full.push(0);
            for a in 0..d {
                full[dims.len()] = a;
                cp[full.as_slice()] = grid[a][idx[a]];
            }
        });
        Self::new(space, cp, None)
    }

    pub fn space(&self) -> &TensorSpace<T> {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn control_points(&self) -> &ArrayD<T> {
        &self.control_points
    }

    pub fn nurbs_weights(&self) -> Option<&ArrayD<T>> {
        self.weights.as_ref()
    }

    pub fn is_rational(&self) -> bool {
        self.weights.is_some()
    }

    fn point_check(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "parameter point has {} coordinates, geometry is {}-dimensional",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// G(x̂).
    pub fn eval(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.eval_with_jacobian(x)?.0)
    }

    /// ∇G(x̂): column d holds ∂G/∂x̂_d.
    pub fn jacobian(&self, x: &[T]) -> Result<Array2<T>> {
        Ok(self.eval_with_jacobian(x)?.1)
    }

    /// Evaluates G and ∇G together from the local basis windows.
    pub fn eval_with_jacobian(&self, x: &[T]) -> Result<(Vec<T>, Array2<T>)> {
        self.point_check(x)?;
        let d = self.dim();
        let mut starts = Vec::with_capacity(d);
        let mut vals = Vec::with_capacity(d);
        let mut ders = Vec::with_capacity(d);
        for (dim, &xd) in x.iter().enumerate() {
            let f = self.space.factor(dim);
            let (s, v) = f.basis_window(xd)?;
            let (_, dv) = f.deriv_window(xd, 1)?;
            starts.push(s);
            vals.push(v);
            ders.push(dv);
        }
        let val_slices: Vec<&[T]> = vals.iter().map(|v| v.as_slice()).collect();
        let der_slices: Vec<&[T]> = ders.iter().map(|v| v.as_slice()).collect();
        Ok(self.eval_from_windows(&starts, &val_slices, &der_slices))
    }

    /// Kernel shared by point evaluation and grid sampling: all window slices
    /// must have length degree+1 in their dimension.
    pub(crate) fn eval_from_windows(
        &self,
        starts: &[usize],
        vals: &[&[T]],
        ders: &[&[T]],
    ) -> (Vec<T>, Array2<T>) {
        let d = self.dim();
        let dims = self.space.dims();
        let window_dims: Vec<usize> = vals.iter().map(|v| v.len()).collect();
        let cp = self.control_points.as_slice().expect("standard layout");
        let w = self.weights.as_ref().map(|w| w.as_slice().expect("standard layout"));

        // Strides of the control tensor (last axis = component, fastest).
        let mut strides = vec![0usize; d];
        let mut acc = d;
        for dim in (0..d).rev() {
            strides[dim] = acc;
            acc *= dims[dim];
        }

        // Accumulate the homogeneous numerators and the denominator together
        // with all first derivatives; for plain B-splines the denominator
        // stays identically one.
        let mut num = vec![T::zero(); d];
        let mut num_d = vec![vec![T::zero(); d]; d]; // [deriv dir][component]
        let mut den = T::zero();
        let mut den_d = vec![T::zero(); d];

        for_each_multi(&window_dims, |idx| {
            let mut offset = 0usize;
            for dim in 0..d {
                offset += (starts[dim] + idx[dim]) * strides[dim];
            }
            let wgt = match w {
                Some(ws) => ws[offset / d],
                None => T::one(),
            };
            let mut prod_val = T::one();
            for dim in 0..d {
                prod_val *= vals[dim][idx[dim]];
            }
            let base = wgt * prod_val;
            den += base;
            for a in 0..d {
                num[a] += base * cp[offset + a];
            }
            for b in 0..d {
                let mut prod_b = T::one();
                for dim in 0..d {
                    prod_b *= if dim == b { ders[dim][idx[dim]] } else { vals[dim][idx[dim]] };
                }
                let base_b = wgt * prod_b;
                den_d[b] += base_b;
                for a in 0..d {
                    num_d[b][a] += base_b * cp[offset + a];
                }
            }
        });

        let mut g = vec![T::zero(); d];
        let mut jac = Array2::zeros((d, d));
        if self.weights.is_some() {
            let inv_den = T::one() / den;
            for a in 0..d {
                g[a] = num[a] * inv_den;
            }
            for b in 0..d {
                for a in 0..d {
                    jac[[a, b]] = (num_d[b][a] - g[a] * den_d[b]) * inv_den;
                }
            }
        } else {
            for a in 0..d {
                g[a] = num[a];
            }
            for b in 0..d {
                for a in 0..d {
                    jac[[a, b]] = num_d[b][a];
                }
            }
        }
        (g, jac)
    }

    /// ω(x̂) = |det ∇G(x̂)|.
    pub fn omega(&self, x: &[T]) -> Result<T> {
        let jac = self.jacobian(x)?;
        Ok(det_small(&jac).abs())
    }

    /// Q(x̂) = (∇Gᵀ∇G)⁻¹ |det ∇G(x̂)|, symmetric positive definite where the
    /// Jacobian is nonsingular.
    pub fn weight_q(&self, x: &[T]) -> Result<Array2<T>> {
        let jac = self.jacobian(x)?;
        weight_q_from_jacobian(&jac).ok_or_else(|| Error::SingularJacobian {
            point: x.iter().map(|v| v.to_f64_lossy()).collect(),
        })
    }
}

/// Determinant of a 2x2 or 3x3 matrix.
pub(crate) fn det_small<T: Scalar>(a: &Array2<T>) -> T {
    match a.nrows() {
        2 => a[[0, 0]] * a[[1, 1]] - a[[0, 1]] * a[[1, 0]],
        3 => {
            a[[0, 0]] * (a[[1, 1]] * a[[2, 2]] - a[[1, 2]] * a[[2, 1]])
                - a[[0, 1]] * (a[[1, 0]] * a[[2, 2]] - a[[1, 2]] * a[[2, 0]])
                + a[[0, 2]] * (a[[1, 0]] * a[[2, 1]] - a[[1, 1]] * a[[2, 0]])
        }
        n => panic!("det_small supports 2x2/3x3, got {n}x{n}"),
    }
}

/// Q from a Jacobian: adj(JᵀJ)/|det J|. Returns None for singular J.
pub(crate) fn weight_q_from_jacobian<T: Scalar>(jac: &Array2<T>) -> Option<Array2<T>> {
    let d = jac.nrows();
    let det = det_small(jac);
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    let s = jac.t().dot(jac);
    let adj = match d {
        2 => {
            let mut m = Array2::zeros((2, 2));
            m[[0, 0]] = s[[1, 1]];
            m[[1, 1]] = s[[0, 0]];
            m[[0, 1]] = -s[[0, 1]];
            m[[1, 0]] = -s[[1, 0]];
            m
        }
        3 => {
            let mut m = Array2::zeros((3, 3));
            for i in 0..3 {
                for j in 0..3 {
                    let r = [(i + 1) % 3, (i + 2) % 3];
                    let c = [(j + 1) % 3, (j + 2) % 3];
                    // Cofactor transpose: adj[j][i] = cofactor(i,j); S symmetric.
                    m[[j, i]] = s[[r[0], c[0]]] * s[[r[1], c[1]]] - s[[r[0], c[1]]] * s[[r[1], c[0]]];
                }
            }
            m
        }
        n => panic!("weight_q supports 2x2/3x3, got {n}x{n}"),
    };
    Some(adj.mapv(|v| v / det.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splines::UnivariateSpline;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;

    fn cube(degree: usize, refine: usize) -> GeometryMap<f64> {
        let s = UnivariateSpline::<f64>::single_span(degree).refine_knots(refine);
        let space = TensorSpace::new(vec![s.clone(), s.clone(), s]).unwrap();
        GeometryMap::greville_identity(space).unwrap()
    }

    #[test]
    fn identity_cube_linear_precision() {
        let g = cube(2, 2);
        for &x in &[[0.0, 0.0, 0.0], [0.3, 0.7, 0.1], [1.0, 1.0, 1.0], [0.5, 0.25, 0.99]] {
            let y = g.eval(&x).unwrap();
            for a in 0..3 {
                assert_abs_diff_eq!(y[a], x[a], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn identity_cube_jacobian_and_weights() {
        let g = cube(2, 1);
        let x = [0.4, 0.6, 0.2];
        let jac = g.jacobian(&x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(jac[[i, j]], expect, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(g.omega(&x).unwrap(), 1.0, epsilon = 1e-12);
        let q = g.weight_q(&x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(q[[i, j]], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn scaling_map_weights() {
        // G(x) = s*x via scaled Greville control points.
        let s = 2.5f64;
        let mut g = cube(1, 1);
        g.control_points.mapv_inplace(|v| v * s);
        let x = [0.35, 0.8, 0.1];
        assert_abs_diff_eq!(g.omega(&x).unwrap(), s * s * s, epsilon = 1e-12);
        let q = g.weight_q(&x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { s } else { 0.0 };
                assert_abs_diff_eq!(q[[i, j]], expect, epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn corner_hits_last_control_point() {
        let mut g = cube(2, 1);
        // Perturb interior control points; the corner value must still be the
        // last control point by open-knot interpolation.
        let shape = g.control_points.shape().to_vec();
        g.control_points[IxDyn(&[1, 1, 1, 0])] += 0.2;
        let last = [shape[0] - 1, shape[1] - 1, shape[2] - 1];
        let expect: Vec<f64> = (0..3).map(|a| g.control_points[IxDyn(&[last[0], last[1], last[2], a])]).collect();
        let y = g.eval(&[1.0, 1.0, 1.0]).unwrap();
        for a in 0..3 {
            assert_abs_diff_eq!(y[a], expect[a], epsilon = 1e-13);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(7);
        let mut g = cube(2, 1);
        // Random smooth perturbation of the control net.
        for v in g.control_points.iter_mut() {
            *v += 0.05 * rng.gen_range(-1.0..1.0);
        }
        let h = 1e-5;
        for _ in 0..5 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..0.95)).collect();
            let jac = g.jacobian(&x).unwrap();
            for b in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[b] += h;
                xm[b] -= h;
                let yp = g.eval(&xp).unwrap();
                let ym = g.eval(&xm).unwrap();
                for a in 0..3 {
                    let fd = (yp[a] - ym[a]) / (2.0 * h);
                    assert_abs_diff_eq!(jac[[a, b]], fd, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn unit_weights_match_bspline() {
        let g = cube(2, 1);
        let dims = g.space().dims();
        let w = ArrayD::from_elem(IxDyn(&dims), 3.0);
        let gr = GeometryMap::new(g.space().clone(), g.control_points.clone(), Some(w)).unwrap();
        for &x in &[[0.1, 0.9, 0.4], [0.66, 0.2, 0.8]] {
            let a = g.eval(&x).unwrap();
            let b = gr.eval(&x).unwrap();
            for c in 0..3 {
                assert_abs_diff_eq!(a[c], b[c], epsilon = 1e-14);
            }
            let ja = g.jacobian(&x).unwrap();
            let jb = gr.jacobian(&x).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(ja[[i, j]], jb[[i, j]], epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn rejects_nonpositive_weights() {
        let g = cube(1, 0);
        let dims = g.space().dims();
        let mut w = ArrayD::from_elem(IxDyn(&dims), 1.0);
        w[IxDyn(&[0, 0, 0])] = -0.5;
        assert!(GeometryMap::new(g.space().clone(), g.control_points.clone(), Some(w)).is_err());
    }
}
