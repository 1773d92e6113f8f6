//! Low-rank isogeometric analysis toolkit.
//!
//! Mass and stiffness operators on spline geometries are assembled as short
//! sums of Kronecker products of univariate matrices. The geometry weight
//! functions (Jacobian determinant and scaled inverse metric) are interpolated
//! in a higher-degree spline space and compressed with a tensor-train SVD; the
//! canonical slices of the resulting trains drive the univariate assembly.
//! On top of that sits a time-discretized PDE-constrained optimal control
//! problem whose KKT saddle system is solved entirely in block tensor-train
//! format by an alternating scheme with residual-based rank enrichment.
//!
//! All numerical kernels are generic over the scalar type (`f32`/`f64`) via
//! [`Scalar`]; concrete `f64` aliases live at the crate root.

pub mod assembly;
pub mod error;
pub mod geometry;
pub mod kron;
pub mod linalg;
pub mod optctl;
pub mod quadrature;
pub mod splines;
pub mod tt;
pub mod ttio;

mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar used by the CLI and the concrete aliases below.
pub type DefaultScalar = f64;

pub type Spline64 = splines::UnivariateSpline<f64>;
pub type TensorSpace64 = splines::TensorSpace<f64>;
pub type Geometry64 = geometry::GeometryMap<f64>;
pub type Rule64 = quadrature::QuadratureRule<f64>;
pub type Tt64 = tt::TtTensor<f64>;
pub type BlockTt64 = tt::BlockTt<f64>;
pub type KronSum64 = kron::KroneckerSum<f64>;
pub type Weights64 = assembly::WeightTt<f64>;
pub type Operator64 = assembly::OperatorLr<f64>;
