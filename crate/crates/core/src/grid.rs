//! Differentiable grid kernels shared by the transforms and losses:
//! coordinate grids, bilinear sampling, cubic B-spline interpolation,
//! Gaussian smoothing, bilinear upsampling and Sobel filtering.
//!
//! All operations build nodes on a [`Graph`] so gradients flow through them;
//! eager helpers for the common no-gradient case are provided alongside.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use crate::kernels::{border_taper, identity_grid};

/// A 3×3 homogeneous 2D transform with affine last row (0, 0, 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<S>(pub [[S; 3]; 3]);

impl<S: Scalar> Mat3<S> {
    pub fn identity() -> Self {
        let z = S::zero();
        let o = S::one();
        Mat3([[o, z, z], [z, o, z], [z, z, o]])
    }

    /// Validate the affine last row.
    pub fn try_new(rows: [[S; 3]; 3]) -> Result<Self> {
        if rows[2] != [S::zero(), S::zero(), S::one()] {
            return Err(Error::invalid("matrix last row must be (0, 0, 1)"));
        }
        Ok(Mat3(rows))
    }

    pub fn matmul(&self, other: &Mat3<S>) -> Mat3<S> {
        let a = &self.0;
        let b = &other.0;
        let mut m = [[S::zero(); 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).fold(S::zero(), |s, t| s + t);
            }
        }
        Mat3(m)
    }

    /// The first two rows flattened to the `[6]` layout used on the graph.
    pub fn rows6(&self) -> Tensor<S> {
        let r = &self.0;
        Tensor::new(
            vec![6],
            vec![r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2]],
        )
        .unwrap()
    }

    pub fn from_rows6(m: &[S]) -> Self {
        Mat3([
            [m[0], m[1], m[2]],
            [m[3], m[4], m[5]],
            [S::zero(), S::zero(), S::one()],
        ])
    }

    pub fn max_abs_diff(&self, other: &Mat3<S>) -> S {
        let mut d = S::zero();
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((self.0[i][j] - other.0[i][j]).abs());
            }
        }
        d
    }
}

/// Bilinear sampling of an image, probability map or vector field at a
/// coordinate grid. Locations outside [-1, 1] read as zero.
pub fn bilinear_sample<S: Scalar>(g: &mut Graph<S>, input: Var, grid: Var) -> Result<Var> {
    g.bilinear_sample(input, grid)
}

/// Map the identity grid through an affine matrix (graph form: `[6]` rows).
pub fn make_affine_grid<S: Scalar>(g: &mut Graph<S>, mat: Var, h: usize, w: usize) -> Result<Var> {
    g.affine_grid(mat, h, w)
}

/// Eager variant taking a validated [`Mat3`].
pub fn make_affine_grid_eager<S: Scalar>(mat: &Mat3<S>, h: usize, w: usize) -> Tensor<S> {
    kernels::affine_grid_forward(mat.rows6().data(), h, w)
}

/// Cubic B-spline tensor-product interpolation of a `[1,b,b]` control
/// lattice onto an `h` × `w` field. Requires b ≥ 4.
pub fn bspline_interpolate<S: Scalar>(
    g: &mut Graph<S>,
    control: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    g.bspline(control, h, w)
}

/// Separable Gaussian smoothing, kernel truncated at radius ⌈3σ⌉ and
/// normalized, reflected boundaries. Requires sigma > 0.
pub fn gaussian_smooth<S: Scalar>(g: &mut Graph<S>, field: Var, sigma: S) -> Result<Var> {
    g.gaussian_smooth(field, sigma)
}

/// Bilinear upsampling of a low-resolution field by integer factor `ds`.
pub fn upsample_bilinear<S: Scalar>(g: &mut Graph<S>, field: Var, ds: usize) -> Result<Var> {
    if ds == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let (_, h, w) = g.value(field).chw()?;
    if ds == 1 {
        // identity; still materialize a node so callers can treat it uniformly
        return g.resize_bilinear(field, h, w);
    }
    g.resize_bilinear(field, h * ds, w * ds)
}

/// Standard 3×3 Sobel x and y responses with reflected boundaries.
pub fn sobel_gradients<S: Scalar>(g: &mut Graph<S>, map: Var) -> Result<(Var, Var)> {
    let sx = g.sobel(map, 0)?;
    let sy = g.sobel(map, 1)?;
    Ok((sx, sy))
}

/// Eager Sobel responses for test oracles and metrics.
pub fn sobel_gradients_eager<S: Scalar>(map: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let (_, h, w) = map.chw()?;
    if h < 3 || w < 3 {
        return Err(Error::shape(format!("sobel needs at least 3x3, got {}x{}", h, w)));
    }
    Ok((kernels::sobel_forward(map, 0), kernels::sobel_forward(map, 1)))
}

/// Eager bilinear sampling for the no-gradient paths.
pub fn bilinear_sample_eager<S: Scalar>(input: &Tensor<S>, grid: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, h, w) = input.chw()?;
    let (gc, gh, gw) = grid.chw()?;
    if gc != 2 || gh != h || gw != w {
        return Err(Error::shape("grid does not match input"));
    }
    Ok(kernels::bilinear_forward(input, grid))
}

/// Eager Gaussian smoothing.
pub fn gaussian_smooth_eager<S: Scalar>(field: &Tensor<S>, sigma: S) -> Result<Tensor<S>> {
    if sigma <= S::zero() {
        return Err(Error::invalid("gaussian sigma must be > 0"));
    }
    field.chw()?;
    Ok(kernels::gaussian_forward(field, sigma))
}
