//! Tensor-train compression and block tensor trains.
//!
//! A [`TtTensor`] is a chain of order-3 cores; the represented tensor entry is
//! the product of the per-dimension core slices. [`BlockTt`] carries an extra
//! component axis on exactly one core so that several same-shaped tensors
//! (state, control, adjoint) share one set of frames. The frame projections at
//! the bottom of this module reduce Kronecker-sum operators onto a single core
//! without ever materializing the frame matrix.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::kron::KroneckerSum;
use crate::linalg::{qr_thin, rank_for_tolerance, svd};
use crate::scalar::Scalar;

/// Refusal cap for densifying a train (number of entries).
pub const DENSIFY_CAP: usize = 1 << 24;

/// Tensor train: core d has shape (R_{d-1}, n_d, R_d) with R_0 = R_D = 1.
#[derive(Debug, Clone)]
pub struct TtTensor<T> {
    cores: Vec<Array3<T>>,
}

impl<T: Scalar> TtTensor<T> {
    pub fn new(cores: Vec<Array3<T>>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::Invalid("tensor train needs at least one core".into()));
        }
        if cores[0].dim().0 != 1 || cores.last().unwrap().dim().2 != 1 {
            return Err(Error::Shape("boundary TT ranks must be 1".into()));
        }
        for w in cores.windows(2) {
            if w[0].dim().2 != w[1].dim().0 {
                return Err(Error::Shape(format!(
                    "rank chain broken: {} vs {}",
                    w[0].dim().2,
                    w[1].dim().0
                )));
            }
        }
        Ok(Self { cores })
    }

    /// Rank-one train from per-dimension vectors.
    pub fn from_rank_one(vectors: &[Vec<T>]) -> Self {
        let cores = vectors
            .iter()
            .map(|v| {
                Array3::from_shape_vec((1, v.len(), 1), v.clone()).expect("rank-1 core")
            })
            .collect();
        Self { cores }
    }

    /// All-zero rank-one train.
    pub fn zeros(dims: &[usize]) -> Self {
        Self::from_rank_one(&dims.iter().map(|&n| vec![T::zero(); n]).collect::<Vec<_>>())
    }

    pub fn constant(dims: &[usize], value: T) -> Self {
        let mut vectors: Vec<Vec<T>> = dims.iter().map(|&n| vec![T::one(); n]).collect();
        for v in vectors[0].iter_mut() {
            *v = value;
        }
        Self::from_rank_one(&vectors)
    }

    pub fn ndims(&self) -> usize {
        self.cores.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.dim().1).collect()
    }

    /// Interior ranks R_1..R_{D-1}.
    pub fn ranks(&self) -> Vec<usize> {
        self.cores[..self.cores.len() - 1].iter().map(|c| c.dim().2).collect()
    }

    pub fn max_rank(&self) -> usize {
        self.ranks().into_iter().max().unwrap_or(1)
    }

    pub fn cores(&self) -> &[Array3<T>] {
        &self.cores
    }

    pub fn core(&self, d: usize) -> &Array3<T> {
        &self.cores[d]
    }

    pub fn storage_len(&self) -> usize {
        self.cores.iter().map(|c| c.len()).sum()
    }

    pub fn entry(&self, idx: &[usize]) -> T {
        let mut v: Array1<T> = self.cores[0].index_axis(ndarray::Axis(1), idx[0]).row(0).to_owned();
        for (d, core) in self.cores.iter().enumerate().skip(1) {
            let slice = core.index_axis(ndarray::Axis(1), idx[d]);
            v = slice.t().dot(&v);
        }
        v[0]
    }

    pub fn scale(mut self, alpha: T) -> Self {
        self.cores[0].mapv_inplace(|v| v * alpha);
        self
    }

    /// TT inner product via left-to-right environment contraction.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.dims() != other.dims() {
            return Err(Error::Shape("TT dot requires equal mode sizes".into()));
        }
        let mut env = Array2::from_shape_fn((1, 1), |_| T::one());
        for (x, y) in self.cores.iter().zip(other.cores.iter()) {
            env = env_advance(&env, x, y);
        }
        Ok(env[[0, 0]])
    }

    pub fn norm(&self) -> T {
        let sq = self.dot(self).expect("self dot");
        sq.max(T::zero()).sqrt()
    }

    /// Structured sum: ranks add.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::Shape("TT add requires equal mode sizes".into()));
        }
        let d = self.ndims();
        if d == 1 {
            let mut core = self.cores[0].clone();
            core += &other.cores[0];
            return Ok(Self { cores: vec![core] });
        }
        let mut cores = Vec::with_capacity(d);
        for k in 0..d {
            let a = &self.cores[k];
            let b = &other.cores[k];
            let (a0, n, a1) = a.dim();
            let (b0, _, b1) = b.dim();
            let core = if k == 0 {
                let mut c = Array3::zeros((1, n, a1 + b1));
                for i in 0..n {
                    for r in 0..a1 {
                        c[[0, i, r]] = a[[0, i, r]];
                    }
                    for r in 0..b1 {
                        c[[0, i, a1 + r]] = b[[0, i, r]];
                    }
                }
                c
            } else if k == d - 1 {
                let mut c = Array3::zeros((a0 + b0, n, 1));
                for i in 0..n {
                    for r in 0..a0 {
                        c[[r, i, 0]] = a[[r, i, 0]];
                    }
                    for r in 0..b0 {
                        c[[a0 + r, i, 0]] = b[[r, i, 0]];
                    }
                }
                c
            } else {
                let mut c = Array3::zeros((a0 + b0, n, a1 + b1));
                for i in 0..n {
                    for r in 0..a0 {
                        for s in 0..a1 {
                            c[[r, i, s]] = a[[r, i, s]];
                        }
                    }
                    for r in 0..b0 {
                        for s in 0..b1 {
                            c[[a0 + r, i, a1 + s]] = b[[r, i, s]];
                        }
                    }
                }
                c
            };
            cores.push(core);
        }
        Ok(Self { cores })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.clone().scale(-T::one()))
    }

    /// Applies one matrix per mode to the corresponding core fibers.
    pub fn apply_mode_maps(&self, mats: &[Array2<T>]) -> Result<Self> {
        if mats.len() != self.ndims() {
            return Err(Error::Shape("one mode map per dimension required".into()));
        }
        let mut cores = Vec::with_capacity(self.ndims());
        for (core, m) in self.cores.iter().zip(mats.iter()) {
            let (a, n, b) = core.dim();
            if m.ncols() != n {
                return Err(Error::Shape(format!("mode map expects {} columns, core has {n}", m.ncols())));
            }
            // (a,n,b) -> (n, a*b), multiply, fold back.
            let perm = core
                .view()
                .permuted_axes([1, 0, 2])
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((n, a * b))
                .expect("core unfold");
            let mapped = m.dot(&perm);
            let m_out = m.nrows();
            let folded = mapped
                .into_shape_with_order((m_out, a, b))
                .expect("core fold")
                .permuted_axes([1, 0, 2])
                .as_standard_layout()
                .to_owned();
            cores.push(folded);
        }
        Ok(Self { cores })
    }

    /// Dense tensor, guarded by an entry-count cap.
    pub fn to_full_capped(&self, cap: usize) -> Result<ArrayD<T>> {
        let total: usize = self.dims().iter().product();
        if total > cap {
            return Err(Error::SizeCap { what: "densified tensor train", size: total, cap });
        }
        let mut acc: Array2<T> = Array2::from_shape_fn((1, 1), |_| T::one());
        for core in &self.cores {
            let (a, n, b) = core.dim();
            let unf = core
                .view()
                .to_owned()
                .into_shape_with_order((a, n * b))
                .expect("unfold");
            let next = acc.dot(&unf); // (prod, n*b)
            let prod = next.nrows();
            acc = next.into_shape_with_order((prod * n, b)).expect("fold");
        }
        let flat = acc.into_shape_with_order(self.dims().iter().product::<usize>()).expect("flatten");
        Ok(ArrayD::from_shape_vec(IxDyn(&self.dims()), flat.to_vec()).expect("reshape"))
    }

    pub fn to_full(&self) -> Result<ArrayD<T>> {
        self.to_full_capped(DENSIFY_CAP)
    }

    /// TT-SVD of a dense tensor with relative Frobenius accuracy `tol`; the
    /// truncation budget is split uniformly over the D-1 unfoldings.
    pub fn from_dense(full: &ArrayD<T>, tol: T) -> Result<Self> {
        if tol < T::zero() {
            return Err(Error::Invalid("TT-SVD tolerance must be nonnegative".into()));
        }
        let dims = full.shape().to_vec();
        if dims.is_empty() || dims.iter().any(|&n| n == 0) {
            return Err(Error::Invalid("TT-SVD needs a nonempty tensor".into()));
        }
        let d = dims.len();
        let norm = full.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm == T::zero() {
            return Ok(Self::zeros(&dims));
        }
        if d == 1 {
            let core = Array3::from_shape_vec((1, dims[0], 1), full.iter().copied().collect())
                .expect("single core");
            return Ok(Self { cores: vec![core] });
        }
        let delta = tol * norm / T::from_f64_lossy(((d - 1) as f64).sqrt());
        let mut buffer: Vec<T> = full.as_standard_layout().iter().copied().collect();
        let mut rows = 1usize;
        let mut cores = Vec::with_capacity(d);
        for k in 0..d - 1 {
            let m = rows * dims[k];
            let cols = buffer.len() / m;
            let mat = Array2::from_shape_vec((m, cols), buffer).expect("unfolding");
            let f = svd(&mat);
            let mut r = rank_for_tolerance(&f.s, delta);
            r = r.clamp(1, f.s.len());
            let mut core = Array3::zeros((rows, dims[k], r));
            for i in 0..m {
                for j in 0..r {
                    core[[i / dims[k], i % dims[k], j]] = f.u[[i, j]];
                }
            }
            cores.push(core);
            let mut next = Vec::with_capacity(r * cols);
            for i in 0..r {
                for j in 0..cols {
                    next.push(f.s[i] * f.vt[[i, j]]);
                }
            }
            buffer = next;
            rows = r;
        }
        let core = Array3::from_shape_vec((rows, dims[d - 1], 1), buffer).expect("last core");
        cores.push(core);
        Ok(Self { cores })
    }

    /// Rank truncation at relative accuracy `tol`; `tol = 0` removes exact
    /// zero modes only.
    pub fn round(&self, tol: T) -> Self {
        let d = self.ndims();
        if d == 1 {
            return self.clone();
        }
        // Right-to-left orthogonalization.
        let mut cores = self.cores.clone();
        for k in (1..d).rev() {
            let (a, n, b) = cores[k].dim();
            let unf = cores[k]
                .view()
                .to_owned()
                .into_shape_with_order((a, n * b))
                .expect("unfold")
                .t()
                .to_owned();
            let (q, r) = qr_thin(&unf); // (n*b, kk), (kk, a)
            let kk = q.ncols();
            cores[k] = q
                .t()
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((kk, n, b))
                .expect("fold");
            let (pa, pn, _) = cores[k - 1].dim();
            let prev = cores[k - 1]
                .view()
                .to_owned()
                .into_shape_with_order((pa * pn, a))
                .expect("prev unfold");
            cores[k - 1] = prev
                .dot(&r.t())
                .into_shape_with_order((pa, pn, kk))
                .expect("prev fold");
        }
        let norm = cores[0].iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm == T::zero() {
            return Self::zeros(&self.dims());
        }
        let delta = tol * norm / T::from_f64_lossy(((d - 1) as f64).sqrt());
        // Left-to-right truncation.
        for k in 0..d - 1 {
            let (a, n, b) = cores[k].dim();
            let unf = cores[k]
                .view()
                .to_owned()
                .into_shape_with_order((a * n, b))
                .expect("unfold");
            let f = svd(&unf);
            let mut r = rank_for_tolerance(&f.s, delta);
            r = r.clamp(1, f.s.len());
            let mut u = Array2::zeros((a * n, r));
            for i in 0..a * n {
                for j in 0..r {
                    u[[i, j]] = f.u[[i, j]];
                }
            }
            cores[k] = u.into_shape_with_order((a, n, r)).expect("fold");
            let mut sv = Array2::zeros((r, b));
            for i in 0..r {
                for j in 0..b {
                    sv[[i, j]] = f.s[i] * f.vt[[i, j]];
                }
            }
            let (nb, nn, nc) = cores[k + 1].dim();
            let next = cores[k + 1]
                .view()
                .to_owned()
                .into_shape_with_order((nb, nn * nc))
                .expect("next unfold");
            cores[k + 1] = sv
                .dot(&next)
                .into_shape_with_order((r, nn, nc))
                .expect("next fold");
        }
        Self { cores }
    }

    /// Contracts each mode with a vector (e.g. basis values at a point),
    /// collapsing the train to a scalar.
    pub fn contract_modes(&self, vectors: &[Vec<T>]) -> Result<T> {
        if vectors.len() != self.ndims() {
            return Err(Error::Shape("one contraction vector per dimension required".into()));
        }
        let mut acc = Array2::from_shape_fn((1, 1), |_| T::one());
        for (core, v) in self.cores.iter().zip(vectors.iter()) {
            let (a, n, b) = core.dim();
            if v.len() != n {
                return Err(Error::Shape(format!("contraction vector length {} != mode size {n}", v.len())));
            }
            let mut mat = Array2::zeros((a, b));
            for i in 0..n {
                let vi = v[i];
                if vi == T::zero() {
                    continue;
                }
                for r in 0..a {
                    for c in 0..b {
                        mat[[r, c]] += vi * core[[r, i, c]];
                    }
                }
            }
            acc = acc.dot(&mat);
        }
        Ok(acc[[0, 0]])
    }

    /// Enumerates the train as a canonical sum of rank-one terms: one term per
    /// interior rank combination (lexicographic, last rank fastest). Summing
    /// the outer products of the returned per-dimension vectors reproduces the
    /// represented tensor; the term count is the product of the TT ranks.
    pub fn canonical_slices(&self) -> Vec<Vec<Array1<T>>> {
        let d = self.ndims();
        let ranks: Vec<usize> = self.ranks();
        let mut out = Vec::new();
        let mut idx = vec![0usize; ranks.len()];
        loop {
            let mut term = Vec::with_capacity(d);
            for k in 0..d {
                let left = if k == 0 { 0 } else { idx[k - 1] };
                let right = if k == d - 1 { 0 } else { idx[k] };
                let core = &self.cores[k];
                let n = core.dim().1;
                let mut v = Array1::zeros(n);
                for i in 0..n {
                    v[i] = core[[left, i, right]];
                }
                term.push(v);
            }
            out.push(term);
            // Odometer over interior ranks.
            let mut k = ranks.len();
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < ranks[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
    }
}

/// Environment advance for inner products: env'[α,β] = Σ x[a,i,α] env[a,b] y[b,i,β].
fn env_advance<T: Scalar>(env: &Array2<T>, x: &Array3<T>, y: &Array3<T>) -> Array2<T> {
    let (_a, n, alpha) = x.dim();
    let (b, _, beta) = y.dim();
    // t[a, i, β] = Σ_b env[a,b] y[b,i,β]
    let y_unf = y.view().to_owned().into_shape_with_order((b, n * beta)).expect("y unfold");
    let t = env.dot(&y_unf); // (a, n*β)
    // env'[α, β] = Σ_{a,i} x[a,i,α] t[a,i,β]
    let a_dim = x.dim().0;
    let x_unf = x
        .view()
        .to_owned()
        .into_shape_with_order((a_dim * n, alpha))
        .expect("x unfold");
    let t_unf = t.into_shape_with_order((a_dim * n, beta)).expect("t fold");
    x_unf.t().dot(&t_unf)
}

/// Applies a Kronecker-sum operator to a TT vector: per-term mode products,
/// fixed-order summation, then one rounding pass at `round_tol` (relative).
pub fn kron_apply_tt<T: Scalar>(a: &KroneckerSum<T>, v: &TtTensor<T>, round_tol: T) -> Result<TtTensor<T>> {
    if a.col_dims() != v.dims() {
        return Err(Error::Shape(format!(
            "operator expects mode sizes {:?}, TT has {:?}",
            a.col_dims(),
            v.dims()
        )));
    }
    let mut acc: Option<TtTensor<T>> = None;
    for term in a.terms() {
        let mapped = v.apply_mode_maps(term)?;
        acc = Some(match acc {
            None => mapped,
            Some(cur) => cur.add(&mapped)?,
        });
    }
    let sum = acc.expect("at least one term");
    Ok(sum.round(round_tol))
}

// ---------------------------------------------------------------------------
// Block tensor trains
// ---------------------------------------------------------------------------

/// Tensor train whose core at `pos` carries an extra component axis of length
/// L, representing L same-shaped tensors in shared frames.
#[derive(Debug, Clone)]
pub struct BlockTt<T> {
    /// Cores for all dimensions except the block one, in dimension order.
    plain: Vec<Array3<T>>,
    /// Block core, shape (R_{pos-1}, n_pos, L, R_pos).
    block: Array4<T>,
    pos: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveDirection {
    Left,
    Right,
}

impl<T: Scalar> BlockTt<T> {
    pub fn new(plain: Vec<Array3<T>>, block: Array4<T>, pos: usize) -> Result<Self> {
        let d = plain.len() + 1;
        if pos >= d {
            return Err(Error::Invalid(format!("block position {pos} out of range for {d} dims")));
        }
        let b = Self { plain, block, pos };
        // Validate the rank chain.
        let mut prev = 1usize;
        for dim in 0..d {
            let (a, _, _, r) = b.core_dims(dim);
            if a != prev {
                return Err(Error::Shape(format!("rank chain broken entering dimension {dim}")));
            }
            prev = r;
        }
        if prev != 1 {
            return Err(Error::Shape("final TT rank must be 1".into()));
        }
        Ok(b)
    }

    /// (left rank, mode size, components (1 for plain cores), right rank).
    fn core_dims(&self, dim: usize) -> (usize, usize, usize, usize) {
        if dim == self.pos {
            let (a, n, l, r) = self.block.dim();
            (a, n, l, r)
        } else {
            let idx = if dim < self.pos { dim } else { dim - 1 };
            let (a, n, r) = self.plain[idx].dim();
            (a, n, 1, r)
        }
    }

    /// Core of a non-block dimension.
    pub(crate) fn plain_core(&self, dim: usize) -> &Array3<T> {
        debug_assert!(dim != self.pos);
        let idx = if dim < self.pos { dim } else { dim - 1 };
        &self.plain[idx]
    }

    pub fn ndims(&self) -> usize {
        self.plain.len() + 1
    }

    pub fn num_components(&self) -> usize {
        self.block.dim().2
    }

    pub fn block_position(&self) -> usize {
        self.pos
    }

    pub fn block_core(&self) -> &Array4<T> {
        &self.block
    }

    pub fn dims(&self) -> Vec<usize> {
        (0..self.ndims()).map(|d| self.core_dims(d).1).collect()
    }

    pub fn ranks(&self) -> Vec<usize> {
        (0..self.ndims() - 1).map(|d| self.core_dims(d).3).collect()
    }

    pub fn max_rank(&self) -> usize {
        self.ranks().into_iter().max().unwrap_or(1)
    }

    pub fn storage_len(&self) -> usize {
        self.plain.iter().map(|c| c.len()).sum::<usize>() + self.block.len()
    }

    /// Extracts component ℓ as a plain train (shares no storage).
    pub fn component(&self, l: usize) -> TtTensor<T> {
        let (a, n, _, r) = self.block.dim();
        let mut slice = Array3::zeros((a, n, r));
        for i in 0..a {
            for j in 0..n {
                for k in 0..r {
                    slice[[i, j, k]] = self.block[[i, j, l, k]];
                }
            }
        }
        let mut cores = Vec::with_capacity(self.ndims());
        cores.extend(self.plain[..self.pos].iter().cloned());
        cores.push(slice);
        cores.extend(self.plain[self.pos..].iter().cloned());
        TtTensor::new(cores).expect("component train")
    }

    /// Block train whose component ℓ equals `tt` and all others are zero; the
    /// component axis sits on the first core.
    pub fn from_single_component(l: usize, num_components: usize, tt: &TtTensor<T>) -> Self {
        let first = tt.core(0);
        let (_, n, r) = first.dim();
        let mut block = Array4::zeros((1, n, num_components, r));
        for i in 0..n {
            for k in 0..r {
                block[[0, i, l, k]] = first[[0, i, k]];
            }
        }
        Self { plain: tt.cores()[1..].to_vec(), block, pos: 0 }
    }

    /// Direct-sum construction from one train per component (block on core 0).
    pub fn from_components(components: &[TtTensor<T>]) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Invalid("need at least one component".into()));
        }
        let dims = components[0].dims();
        for c in components {
            if c.dims() != dims {
                return Err(Error::Shape("components must share mode sizes".into()));
            }
        }
        let l_count = components.len();
        let d = dims.len();
        if d == 1 {
            let mut block = Array4::zeros((1, dims[0], l_count, 1));
            for (l, c) in components.iter().enumerate() {
                for i in 0..dims[0] {
                    block[[0, i, l, 0]] = c.core(0)[[0, i, 0]];
                }
            }
            return Self::new(vec![], block, 0);
        }
        // First core: components stacked along the component axis with their
        // right ranks concatenated; remaining cores block-diagonal.
        let r_totals: Vec<usize> = (0..d - 1)
            .map(|k| components.iter().map(|c| c.cores()[k].dim().2).sum())
            .collect();
        let mut block = Array4::zeros((1, dims[0], l_count, r_totals[0]));
        let mut offset = 0usize;
        for (l, c) in components.iter().enumerate() {
            let core = c.core(0);
            let r = core.dim().2;
            for i in 0..dims[0] {
                for k in 0..r {
                    block[[0, i, l, offset + k]] = core[[0, i, k]];
                }
            }
            offset += r;
        }
        let mut plain = Vec::with_capacity(d - 1);
        for k in 1..d {
            let rl = if k == 1 { r_totals[0] } else { r_totals[k - 1] };
            let _ = rl;
            let left_total = r_totals[k - 1];
            let right_total = if k == d - 1 { 1 } else { r_totals[k] };
            let mut core = Array3::zeros((left_total, dims[k], right_total));
            let mut lo = 0usize;
            let mut ro = 0usize;
            for c in components.iter() {
                let cc = c.core(k);
                let (a, n, b) = cc.dim();
                for i in 0..a {
                    for j in 0..n {
                        for m in 0..b {
                            let col = if k == d - 1 { 0 } else { ro + m };
                            core[[lo + i, j, col]] += cc[[i, j, m]];
                        }
                    }
                }
                lo += a;
                if k != d - 1 {
                    ro += b;
                }
            }
            plain.push(core);
        }
        Self::new(plain, block, 0)
    }

    /// Frobenius norm over all components.
    pub fn norm(&self) -> T {
        let mut acc = T::zero();
        for l in 0..self.num_components() {
            let c = self.component(l);
            acc += c.dot(&c).expect("component dot");
        }
        acc.max(T::zero()).sqrt()
    }

    /// Orthogonalizes every non-block core toward the block position (left
    /// cores left-orthogonal, right cores right-orthogonal), absorbing the
    /// factors into the block core. The represented components are unchanged.
    pub fn canonicalize(&self) -> Self {
        let mut plain = self.plain.clone();
        let mut block = self.block.clone();
        let pos = self.pos;
        // Left side.
        for idx in 0..pos {
            let (a, n, b) = plain[idx].dim();
            let unf = plain[idx]
                .view()
                .to_owned()
                .into_shape_with_order((a * n, b))
                .expect("unfold");
            let (q, r) = qr_thin(&unf);
            let k = q.ncols();
            plain[idx] = q.into_shape_with_order((a, n, k)).expect("fold");
            if idx + 1 < pos {
                let (na, nn, nb) = plain[idx + 1].dim();
                let next = plain[idx + 1]
                    .view()
                    .to_owned()
                    .into_shape_with_order((na, nn * nb))
                    .expect("next unfold");
                plain[idx + 1] = r.dot(&next).into_shape_with_order((k, nn, nb)).expect("next fold");
            } else {
                let (ba, bn, bl, bb) = block.dim();
                let next = block
                    .view()
                    .to_owned()
                    .into_shape_with_order((ba, bn * bl * bb))
                    .expect("block unfold");
                block = r.dot(&next).into_shape_with_order((k, bn, bl, bb)).expect("block fold");
            }
        }
        // Right side.
        for dim in (pos + 1..self.ndims()).rev() {
            let idx = dim - 1; // index in plain
            let (a, n, b) = plain[idx].dim();
            let unf = plain[idx]
                .view()
                .to_owned()
                .into_shape_with_order((a, n * b))
                .expect("unfold")
                .t()
                .to_owned();
            let (q, r) = qr_thin(&unf); // (n*b, k), (k, a)
            let k = q.ncols();
            plain[idx] = q
                .t()
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((k, n, b))
                .expect("fold");
            if idx > pos {
                let (na, nn, nb) = plain[idx - 1].dim();
                let prev = plain[idx - 1]
                    .view()
                    .to_owned()
                    .into_shape_with_order((na * nn, nb))
                    .expect("prev unfold");
                plain[idx - 1] = prev.dot(&r.t()).into_shape_with_order((na, nn, k)).expect("prev fold");
            } else {
                let (ba, bn, bl, bb) = block.dim();
                let prev = block
                    .view()
                    .to_owned()
                    .into_shape_with_order((ba * bn * bl, bb))
                    .expect("block unfold");
                block = prev.dot(&r.t()).into_shape_with_order((ba, bn, bl, k)).expect("block fold");
            }
        }
        Self { plain, block, pos }
    }

    /// Replaces the block core (shape must match).
    pub fn with_block_core(&self, block: Array4<T>) -> Result<Self> {
        if block.dim() != self.block.dim() {
            return Err(Error::Shape(format!(
                "block core shape {:?} does not match {:?}",
                block.dim(),
                self.block.dim()
            )));
        }
        Ok(Self { plain: self.plain.clone(), block, pos: self.pos })
    }

    /// Moves the component axis one core over; the vacated core becomes left-
    /// (move right) or right- (move left) orthogonal. Components are preserved
    /// up to the SVD truncation at relative `tol` (`tol = 0` keeps everything
    /// but exact zeros).
    pub fn block_core_move(&self, direction: MoveDirection, tol: T) -> Result<Self> {
        match direction {
            MoveDirection::Right => self.move_right(tol),
            MoveDirection::Left => self.move_left(tol),
        }
    }

    fn move_right(&self, tol: T) -> Result<Self> {
        let d = self.ndims();
        if self.pos + 1 >= d {
            return Err(Error::Invalid("cannot move block index past the last core".into()));
        }
        let (a, n, l, b) = self.block.dim();
        // Matricize as (a*n) x (l*b): component axis goes with the right ranks.
        let mat = self
            .block
            .view()
            .to_owned()
            .into_shape_with_order((a * n, l * b))
            .expect("block unfold");
        let f = svd(&mat);
        let norm = f.s.iter().map(|&s| s * s).sum::<T>().sqrt();
        let mut r = rank_for_tolerance(&f.s, tol * norm);
        r = r.clamp(1, f.s.len());
        let mut u = Array2::zeros((a * n, r));
        for i in 0..a * n {
            for j in 0..r {
                u[[i, j]] = f.u[[i, j]];
            }
        }
        let new_plain_core = u.into_shape_with_order((a, n, r)).expect("fold U");
        // carry[r', l, b] = s[r'] * vt[r', (l,b)]
        let mut carry = Array3::zeros((r, l, b));
        for i in 0..r {
            for cl in 0..l {
                for cb in 0..b {
                    carry[[i, cl, cb]] = f.s[i] * f.vt[[i, cl * b + cb]];
                }
            }
        }
        // Absorb into the next plain core (dimension pos+1).
        let next = self.plain_core(self.pos + 1).clone();
        let (nb, nn, nc) = next.dim();
        debug_assert_eq!(nb, b);
        let mut new_block = Array4::zeros((r, nn, l, nc));
        let next_unf = next.into_shape_with_order((nb, nn * nc)).expect("next unfold");
        for cl in 0..l {
            // carry_l (r x b) * next (b x nn*nc)
            let mut cl_mat = Array2::zeros((r, b));
            for i in 0..r {
                for j in 0..b {
                    cl_mat[[i, j]] = carry[[i, cl, j]];
                }
            }
            let prod = cl_mat.dot(&next_unf); // (r, nn*nc)
            for i in 0..r {
                for j in 0..nn {
                    for k in 0..nc {
                        new_block[[i, j, cl, k]] = prod[[i, j * nc + k]];
                    }
                }
            }
        }
        let mut plain = Vec::with_capacity(self.plain.len());
        plain.extend(self.plain[..self.pos].iter().cloned());
        plain.push(new_plain_core);
        plain.extend(self.plain[self.pos + 1..].iter().cloned());
        Ok(Self { plain, block: new_block, pos: self.pos + 1 })
    }

    fn move_left(&self, tol: T) -> Result<Self> {
        if self.pos == 0 {
            return Err(Error::Invalid("cannot move block index before the first core".into()));
        }
        let (a, n, l, b) = self.block.dim();
        // Matricize as (a*l) x (n*b): component axis goes with the left ranks.
        let perm = self
            .block
            .view()
            .permuted_axes([0, 2, 1, 3])
            .as_standard_layout()
            .to_owned();
        let mat = perm.into_shape_with_order((a * l, n * b)).expect("block unfold");
        let f = svd(&mat);
        let norm = f.s.iter().map(|&s| s * s).sum::<T>().sqrt();
        let mut r = rank_for_tolerance(&f.s, tol * norm);
        r = r.clamp(1, f.s.len());
        // New right-orthogonal plain core from Vᵀ rows.
        let mut vt = Array2::zeros((r, n * b));
        for i in 0..r {
            for j in 0..n * b {
                vt[[i, j]] = f.vt[[i, j]];
            }
        }
        let new_plain_core = vt.into_shape_with_order((r, n, b)).expect("fold Vt");
        // carry[(a,l), r'] = u * s
        let mut carry = Array3::zeros((a, l, r));
        for i in 0..a {
            for cl in 0..l {
                for j in 0..r {
                    carry[[i, cl, j]] = f.u[[i * l + cl, j]] * f.s[j];
                }
            }
        }
        // Absorb into the previous plain core (dimension pos-1).
        let prev = self.plain_core(self.pos - 1).clone();
        let (pa, pn, pb) = prev.dim();
        debug_assert_eq!(pb, a);
        let prev_unf = prev.into_shape_with_order((pa * pn, pb)).expect("prev unfold");
        let mut new_block = Array4::zeros((pa, pn, l, r));
        for cl in 0..l {
            let mut cl_mat = Array2::zeros((a, r));
            for i in 0..a {
                for j in 0..r {
                    cl_mat[[i, j]] = carry[[i, cl, j]];
                }
            }
            let prod = prev_unf.dot(&cl_mat); // (pa*pn, r)
            for i in 0..pa {
                for j in 0..pn {
                    for k in 0..r {
                        new_block[[i, j, cl, k]] = prod[[i * pn + j, k]];
                    }
                }
            }
        }
        let mut plain = Vec::with_capacity(self.plain.len());
        plain.extend(self.plain[..self.pos - 1].iter().cloned());
        plain.push(new_plain_core);
        plain.extend(self.plain[self.pos..].iter().cloned());
        Ok(Self { plain, block: new_block, pos: self.pos - 1 })
    }

    /// Left frame environments against a Kronecker term: returns the
    /// (R_{pos-1} x R_{pos-1}) partial projection of ⊗ factors over dims < pos.
    fn env_left_op(&self, factors: &[Array2<T>]) -> Array2<T> {
        let mut env = Array2::from_shape_fn((1, 1), |_| T::one());
        for dim in 0..self.pos {
            env = env_update_op(&env, self.plain_core(dim), &factors[dim]);
        }
        env
    }

    fn env_right_op(&self, factors: &[Array2<T>]) -> Array2<T> {
        let mut env = Array2::from_shape_fn((1, 1), |_| T::one());
        for dim in (self.pos + 1..self.ndims()).rev() {
            env = env_update_op_right(&env, self.plain_core(dim), &factors[dim]);
        }
        env
    }
}

/// env'[α,β] = Σ_{a,b,i,j} X[a,i,α] env[a,b] A[i,j] X[b,j,β] (left sweep).
fn env_update_op<T: Scalar>(env: &Array2<T>, x: &Array3<T>, a_mat: &Array2<T>) -> Array2<T> {
    let (b_dim, n, beta) = x.dim();
    // y[i, b, β] = Σ_j A[i,j] x[b,j,β]
    let x_perm = x
        .view()
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((n, b_dim * beta))
        .expect("x perm");
    let y = a_mat.dot(&x_perm); // (n, b*β)
    // t[a, i, β] = Σ_b env[a,b] y[i,b,β]
    let y3 = y.into_shape_with_order((n, b_dim, beta)).expect("y fold");
    let y_perm = y3
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((b_dim, n * beta))
        .expect("y perm");
    let t = env.dot(&y_perm); // (a, n*β)
    // env'[α,β] = Σ_{a,i} x[a,i,α] t[a,i,β]
    let (a_dim, _, alpha) = x.dim();
    let x_unf = x
        .view()
        .to_owned()
        .into_shape_with_order((a_dim * n, alpha))
        .expect("x unfold");
    let t_unf = t.into_shape_with_order((a_dim * n, beta)).expect("t fold");
    x_unf.t().dot(&t_unf)
}

/// env'[α,β] = Σ_{b,b',i,j} X[α,i,b] env[b,b'] A[i,j] X[β,j,b'] (right sweep).
fn env_update_op_right<T: Scalar>(env: &Array2<T>, x: &Array3<T>, a_mat: &Array2<T>) -> Array2<T> {
    let (alpha, n, b_dim) = x.dim();
    // y[i, β, b'] = Σ_j A[i,j] x[β,j,b']
    let x_perm = x
        .view()
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((n, alpha * b_dim))
        .expect("x perm");
    let y = a_mat.dot(&x_perm); // (n, α*b')
    let y3 = y.into_shape_with_order((n, alpha, b_dim)).expect("y fold");
    // t[α, i, b'] = Σ_b x[α,i,b] env[b,b']
    let x_unf = x
        .view()
        .to_owned()
        .into_shape_with_order((alpha * n, b_dim))
        .expect("x unfold");
    let t = x_unf.dot(env); // (α*n, b')
    // env'[α,β] = Σ_{i,b'} t[α,(i,b')] y[β,(i,b')]
    let y_perm = y3
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .to_owned(); // (i? ...) -> actually (α?, ...)
    // y3 is (i, β, b'); permuted [1,0,2] gives (β, i, b').
    let y_unf = y_perm
        .into_shape_with_order((alpha, n * b_dim))
        .expect("y unfold");
    let t3 = t.into_shape_with_order((alpha, n, b_dim)).expect("t fold");
    let t_unf = t3
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((alpha, n * b_dim))
        .expect("t unfold");
    t_unf.dot(&y_unf.t())
}

/// Vector environments between a block train's frames and a plain TT.
fn env_left_vec<T: Scalar>(b: &BlockTt<T>, v: &TtTensor<T>) -> Array2<T> {
    let mut env = Array2::from_shape_fn((1, 1), |_| T::one());
    for dim in 0..b.block_position() {
        env = env_advance(&env, b.plain_core(dim), v.core(dim));
    }
    env
}

fn env_right_vec<T: Scalar>(b: &BlockTt<T>, v: &TtTensor<T>) -> Array2<T> {
    let mut env = Array2::from_shape_fn((1, 1), |_| T::one());
    for dim in (b.block_position() + 1..b.ndims()).rev() {
        let x = b.plain_core(dim);
        let y = v.core(dim);
        // env'[α,β] = Σ x[α,i,b] env[b, s] y[β,i,s]
        let (alpha, n, b_dim) = x.dim();
        let (beta, _, s_dim) = y.dim();
        let x_unf = x
            .view()
            .to_owned()
            .into_shape_with_order((alpha * n, b_dim))
            .expect("x unfold");
        let t = x_unf.dot(&env); // (α*n, s)
        let t3 = t.into_shape_with_order((alpha, n, s_dim)).expect("t fold");
        let t_perm = t3
            .permuted_axes([0, 1, 2])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((alpha, n * s_dim))
            .expect("t unfold");
        let y_unf = y
            .view()
            .to_owned()
            .into_shape_with_order((beta * n, s_dim))
            .expect("y unfold");
        // y as (β, n*s)
        let y_perm = y_unf.into_shape_with_order((beta, n * s_dim)).expect("y fold");
        env = t_perm.dot(&y_perm.t());
    }
    env
}

/// Projection of the Kronecker-sum operator onto the frame of core `d` of a
/// block train: F_{≠d}ᵀ A F_{≠d}, assembled term by term from the left/right
/// environments. All non-block cores must be orthogonal toward `d`
/// ([`BlockTt::canonicalize`] establishes this). The result is the dense
/// (R_{d-1} n_d R_d)² matrix in row-major (r_{d-1}, i_d, r_d) vec order.
pub fn frame_project<T: Scalar>(b: &BlockTt<T>, d: usize, a: &KroneckerSum<T>) -> Result<Array2<T>> {
    if d != b.block_position() {
        return Err(Error::Invalid(format!(
            "frame projection requires the block index at core {d}, found {}",
            b.block_position()
        )));
    }
    if a.ndims() != b.ndims() {
        return Err(Error::Shape("operator order must match the train order".into()));
    }
    let (rl, n, _, rr) = b.block.dim();
    let m = rl * n * rr;
    let mut out = Array2::zeros((m, m));
    for term in a.terms() {
        let left = b.env_left_op(term);
        let right = b.env_right_op(term);
        let mid = &term[d];
        for al in 0..rl {
            for bl in 0..rl {
                let lv = left[[al, bl]];
                if lv == T::zero() {
                    continue;
                }
                for i in 0..n {
                    for j in 0..n {
                        let av = mid[[i, j]];
                        if av == T::zero() {
                            continue;
                        }
                        let c = lv * av;
                        for ar in 0..rr {
                            for br in 0..rr {
                                out[[(al * n + i) * rr + ar, (bl * n + j) * rr + br]] += c * right[[ar, br]];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// F_{≠d}ᵀ vec(v) for a plain TT `v`, in the same vec order as
/// [`frame_project`].
pub fn frame_project_vec<T: Scalar>(b: &BlockTt<T>, d: usize, v: &TtTensor<T>) -> Result<Array1<T>> {
    if d != b.block_position() {
        return Err(Error::Invalid("frame projection requires the block index at core d".into()));
    }
    if v.ndims() != b.ndims() {
        return Err(Error::Shape("vector order must match the train order".into()));
    }
    let left = env_left_vec(b, v); // (R_{d-1}, S_{d-1})
    let right = env_right_vec(b, v); // (R_d, S_d)
    let (rl, n, _, rr) = b.block.dim();
    let vc = v.core(d); // (S_{d-1}, n, S_d)
    let (sl, _, sr) = vc.dim();
    let mut out = Array1::zeros(rl * n * rr);
    // t[α, i, s'] = Σ_s left[α,s] v[s,i,s']
    let v_unf = vc
        .view()
        .to_owned()
        .into_shape_with_order((sl, n * sr))
        .expect("v unfold");
    let t = left.dot(&v_unf); // (rl, n*sr)
    for al in 0..rl {
        for i in 0..n {
            for ar in 0..rr {
                let mut acc = T::zero();
                for s in 0..sr {
                    acc += t[[al, i * sr + s]] * right[[ar, s]];
                }
                out[(al * n + i) * rr + ar] = acc;
            }
        }
    }
    Ok(out)
}

/// Densified frame matrix F_{≠d} (rows: full multi-index, cols: core vec
/// order). Desk-scale oracle, guarded by the densify cap.
pub fn frame_matrix_dense<T: Scalar>(b: &BlockTt<T>, d: usize) -> Result<Array2<T>> {
    if d != b.block_position() {
        return Err(Error::Invalid("dense frame requires the block index at core d".into()));
    }
    let dims = b.dims();
    let total: usize = dims.iter().product();
    let (rl, n, _, rr) = b.block.dim();
    let m = rl * n * rr;
    if total * m > DENSIFY_CAP {
        return Err(Error::SizeCap { what: "dense frame matrix", size: total * m, cap: DENSIFY_CAP });
    }
    // Left chain: (prod dims < d) x R_{d-1}.
    let mut lmat = Array2::from_shape_fn((1, 1), |_| T::one());
    for dim in 0..d {
        let core = b.plain_core(dim);
        let (a, nd, r) = core.dim();
        let unf = core
            .view()
            .to_owned()
            .into_shape_with_order((a, nd * r))
            .expect("unfold");
        let next = lmat.dot(&unf); // (P, nd*r)
        let p = next.nrows();
        lmat = next.into_shape_with_order((p * nd, r)).expect("fold");
    }
    // Right chain: R_d x (prod dims > d).
    let mut rmat = Array2::from_shape_fn((1, 1), |_| T::one());
    for dim in (d + 1..b.ndims()).rev() {
        let core = b.plain_core(dim);
        let (a, nd, r) = core.dim();
        let unf = core
            .view()
            .to_owned()
            .into_shape_with_order((a * nd, r))
            .expect("unfold");
        let next = unf.dot(&rmat); // (a*nd, Q)
        let q = next.ncols();
        rmat = next.into_shape_with_order((a, nd * q)).expect("fold");
    }
    let pl = lmat.nrows();
    let qr = rmat.ncols();
    let mut f = Array2::zeros((pl * n * qr, m));
    for il in 0..pl {
        for i in 0..n {
            for ir in 0..qr {
                let row = (il * n + i) * qr + ir;
                for al in 0..rl {
                    for ar in 0..rr {
                        let col = (al * n + i) * rr + ar;
                        f[[row, col]] = lmat[[il, al]] * rmat[[ar, ir]];
                    }
                }
            }
        }
    }
    Ok(f)
}

/// Enrichment helper used by the alternating solver: projection of a plain TT
/// `z` onto (left frame of `b`) ⊗ I_{n_d} ⊗ (right cores of `z`); the result
/// columns live on the (R_{d-1} n_d) x S_d interface of the bond d -> d+1.
pub(crate) fn enrich_directions_right<T: Scalar>(b: &BlockTt<T>, z: &TtTensor<T>) -> Array2<T> {
    let d = b.block_position();
    let left = env_left_vec(b, z); // (R_{d-1}, S_{d-1})
    let zc = z.core(d); // (S_{d-1}, n, S_d)
    let (sl, n, sr) = zc.dim();
    let rl = left.nrows();
    let z_unf = zc
        .view()
        .to_owned()
        .into_shape_with_order((sl, n * sr))
        .expect("z unfold");
    let t = left.dot(&z_unf); // (rl, n*sr)
    t.into_shape_with_order((rl * n, sr)).expect("fold")
}

/// Mirror of [`enrich_directions_right`] for the bond d-1 -> d: rows live on
/// the S_{d-1} x (n_d R_d) interface.
pub(crate) fn enrich_directions_left<T: Scalar>(b: &BlockTt<T>, z: &TtTensor<T>) -> Array2<T> {
    let d = b.block_position();
    let right = env_right_vec(b, z); // (R_d, S_d)
    let zc = z.core(d);
    let (sl, n, sr) = zc.dim();
    let rr = right.nrows();
    // out[s, (i, ar)] = Σ_{s'} z[s,i,s'] right[ar, s']
    let z_unf = zc
        .view()
        .to_owned()
        .into_shape_with_order((sl * n, sr))
        .expect("z unfold");
    let t = z_unf.dot(&right.t()); // (sl*n, rr)
    let t3 = t.into_shape_with_order((sl, n, rr)).expect("fold");
    t3.as_standard_layout()
        .to_owned()
        .into_shape_with_order((sl, n * rr))
        .expect("unfold")
}
