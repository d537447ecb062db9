//! The four differentiable, constraint-bounded transformation families:
//! additive noise, multiplicative bias field, affine warping and
//! diffeomorphic deformation.
//!
//! Parameters are plain tensors; applying a transform builds graph nodes so
//! gradients reach the parameters. Projection enforces each family's
//! constraint set:
//! - noise: ‖r‖₂ ≤ ε via L2-ball projection,
//! - bias: ‖Φ−1‖∞ ≤ ε via clamping log-space control points (the dense
//!   field is a convex combination of them),
//! - affine: per-parameter interval clamp,
//! - morph: ‖v'‖₂ rescaled to exactly ε.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grid::Mat3;
use crate::kernels::{self, border_taper, identity_grid};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Noise,
    Bias,
    Affine,
    Morph,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 4] = [
        FamilyKind::Noise,
        FamilyKind::Bias,
        FamilyKind::Affine,
        FamilyKind::Morph,
    ];

    pub fn is_geometric(self) -> bool {
        matches!(self, FamilyKind::Affine | FamilyKind::Morph)
    }

    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Noise => "noise",
            FamilyKind::Bias => "bias",
            FamilyKind::Affine => "affine",
            FamilyKind::Morph => "morph",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(FamilyKind::Noise),
            "bias" => Ok(FamilyKind::Bias),
            "affine" => Ok(FamilyKind::Affine),
            "morph" => Ok(FamilyKind::Morph),
            other => Err(Error::invalid(format!("unknown family '{}'", other))),
        }
    }
}

/// Magnitude bounds for every family (the transformation-constraint table).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ConstraintTable {
    pub noise_epsilon: f64,
    pub bias_epsilon: f64,
    pub bias_grid: usize,
    pub affine_translate: f64,
    pub affine_rotate: f64,
    pub affine_scale: f64,
    pub morph_epsilon: f64,
    pub morph_downsample: usize,
    pub morph_sigma: f64,
    pub morph_squaring: usize,
}

impl Default for ConstraintTable {
    fn default() -> Self {
        ConstraintTable {
            noise_epsilon: 1.0,
            bias_epsilon: 0.3,
            bias_grid: 4,
            affine_translate: 0.1,
            affine_rotate: 15.0 / 180.0,
            affine_scale: 0.2,
            morph_epsilon: 1.5,
            morph_downsample: 8,
            morph_sigma: 1.0,
            morph_squaring: 8,
        }
    }
}

/// Relative slack used to keep projection idempotent in floating point.
const PROJ_SLACK: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseParams<S> {
    /// Additive perturbation `[1, H, W]`.
    pub r: Tensor<S>,
    pub epsilon: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasParams<S> {
    /// Log-space control points `[1, b, b]`.
    pub ctrl: Tensor<S>,
    /// Max multiplicative deviation of the dense field from 1.
    pub epsilon: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<S> {
    /// `[t_x, t_y, rot, s_x, s_y]`; rotation is a fraction of π radians.
    pub params: Tensor<S>,
    pub translate_bound: S,
    pub rotate_bound: S,
    pub scale_bound: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MorphParams<S> {
    /// Low-resolution stationary velocity field `[2, H/ds, W/ds]`.
    pub v_low: Tensor<S>,
    pub epsilon: S,
    pub downsample: usize,
    pub sigma: S,
    pub squaring_steps: usize,
}

impl<S: Scalar> MorphParams<S> {
    pub fn full_shape(&self) -> (usize, usize) {
        let (_, h, w) = self.v_low.chw().unwrap();
        (h * self.downsample, w * self.downsample)
    }
}

/// Tagged union over the four families.
#[derive(Clone, Debug, PartialEq)]
pub enum TransformParams<S> {
    Noise(NoiseParams<S>),
    Bias(BiasParams<S>),
    Affine(AffineParams<S>),
    Morph(MorphParams<S>),
}

impl<S: Scalar> TransformParams<S> {
    pub fn family(&self) -> FamilyKind {
        match self {
            TransformParams::Noise(_) => FamilyKind::Noise,
            TransformParams::Bias(_) => FamilyKind::Bias,
            TransformParams::Affine(_) => FamilyKind::Affine,
            TransformParams::Morph(_) => FamilyKind::Morph,
        }
    }

    pub fn is_geometric(&self) -> bool {
        self.family().is_geometric()
    }

    pub fn param_tensor(&self) -> &Tensor<S> {
        match self {
            TransformParams::Noise(p) => &p.r,
            TransformParams::Bias(p) => &p.ctrl,
            TransformParams::Affine(p) => &p.params,
            TransformParams::Morph(p) => &p.v_low,
        }
    }

    /// Same configuration with a replaced parameter tensor (PGD update).
    pub fn with_param_tensor(&self, t: Tensor<S>) -> Result<Self> {
        if t.dims() != self.param_tensor().dims() {
            return Err(Error::shape("parameter tensor shape changed"));
        }
        let mut out = self.clone();
        match &mut out {
            TransformParams::Noise(p) => p.r = t,
            TransformParams::Bias(p) => p.ctrl = t,
            TransformParams::Affine(p) => p.params = t,
            TransformParams::Morph(p) => p.v_low = t,
        }
        Ok(out)
    }

    /// Insert the parameter tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph<S>, requires_grad: bool) -> Var {
        g.leaf(self.param_tensor().clone(), requires_grad)
    }

    /// Randomly initialize a family so its constraint holds.
    pub fn random_init(
        kind: FamilyKind,
        h: usize,
        w: usize,
        table: &ConstraintTable,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        match kind {
            FamilyKind::Noise => {
                let r = Tensor::from_fn(&[1, h, w], |_| {
                    S::c(rng.sample::<f64, _>(StandardNormal))
                });
                let p = TransformParams::Noise(NoiseParams {
                    r,
                    epsilon: S::c(table.noise_epsilon),
                });
                p.project(rng)
            }
            FamilyKind::Bias => {
                let lo = (1.0 - table.bias_epsilon).ln();
                let hi = (1.0 + table.bias_epsilon).ln();
                let b = table.bias_grid;
                let ctrl = Tensor::from_fn(&[1, b, b], |_| S::c(rng.gen_range(lo..hi)));
                TransformParams::Bias(BiasParams {
                    ctrl,
                    epsilon: S::c(table.bias_epsilon),
                })
            }
            FamilyKind::Affine => {
                let t = table.affine_translate;
                let r = table.affine_rotate;
                let s = table.affine_scale;
                let vals = vec![
                    S::c(rng.gen_range(-t..t)),
                    S::c(rng.gen_range(-t..t)),
                    S::c(rng.gen_range(-r..r)),
                    S::c(rng.gen_range(-s..s)),
                    S::c(rng.gen_range(-s..s)),
                ];
                TransformParams::Affine(AffineParams {
                    params: Tensor::new(vec![5], vals).unwrap(),
                    translate_bound: S::c(t),
                    rotate_bound: S::c(r),
                    scale_bound: S::c(s),
                })
            }
            FamilyKind::Morph => {
                let ds = table.morph_downsample;
                let (hl, wl) = ((h / ds).max(1), (w / ds).max(1));
                loop {
                    let v = Tensor::from_fn(&[2, hl, wl], |_| {
                        S::c(rng.sample::<f64, _>(StandardNormal))
                    });
                    let n = v.l2_norm();
                    if n > S::c(1e-12) {
                        let v = v.scale(S::c(table.morph_epsilon) / n);
                        return TransformParams::Morph(MorphParams {
                            v_low: v,
                            epsilon: S::c(table.morph_epsilon),
                            downsample: ds,
                            sigma: S::c(table.morph_sigma),
                            squaring_steps: table.morph_squaring,
                        });
                    }
                }
            }
        }
    }

    /// Project onto the family's constraint set. The RNG is consumed only in
    /// the degenerate zero-norm morph case, which cannot be normalized.
    pub fn project(&self, rng: &mut ChaCha8Rng) -> Self {
        match self {
            TransformParams::Noise(p) => {
                let n = p.r.l2_norm();
                if n > p.epsilon * (S::one() + S::c(PROJ_SLACK)) {
                    TransformParams::Noise(NoiseParams {
                        r: p.r.scale(p.epsilon / n),
                        epsilon: p.epsilon,
                    })
                } else {
                    self.clone()
                }
            }
            TransformParams::Bias(p) => {
                let lo = (S::one() - p.epsilon).ln();
                let hi = (S::one() + p.epsilon).ln();
                TransformParams::Bias(BiasParams {
                    ctrl: p.ctrl.map(|v| v.max(lo).min(hi)),
                    epsilon: p.epsilon,
                })
            }
            TransformParams::Affine(p) => {
                let d = p.params.data();
                let clamp = |v: S, b: S| v.max(-b).min(b);
                let vals = vec![
                    clamp(d[0], p.translate_bound),
                    clamp(d[1], p.translate_bound),
                    clamp(d[2], p.rotate_bound),
                    clamp(d[3], p.scale_bound),
                    clamp(d[4], p.scale_bound),
                ];
                TransformParams::Affine(AffineParams {
                    params: Tensor::new(vec![5], vals).unwrap(),
                    ..p.clone()
                })
            }
            TransformParams::Morph(p) => {
                let n = p.v_low.l2_norm();
                if n <= S::c(1e-12) {
                    // cannot normalize a zero field; draw a fresh one
                    let (h, w) = p.full_shape();
                    let table = ConstraintTable {
                        morph_epsilon: p.epsilon.to_f64_lossy(),
                        morph_downsample: p.downsample,
                        morph_sigma: p.sigma.to_f64_lossy(),
                        morph_squaring: p.squaring_steps,
                        ..ConstraintTable::default()
                    };
                    Self::random_init(FamilyKind::Morph, h, w, &table, rng)
                } else if (n - p.epsilon).abs() > p.epsilon * S::c(PROJ_SLACK) {
                    TransformParams::Morph(MorphParams {
                        v_low: p.v_low.scale(p.epsilon / n),
                        ..p.clone()
                    })
                } else {
                    self.clone()
                }
            }
        }
    }

    /// Whether the constraint holds (up to floating-point slack).
    pub fn satisfies_constraint(&self) -> bool {
        let slack = S::c(1e-4);
        match self {
            TransformParams::Noise(p) => p.r.l2_norm() <= p.epsilon * (S::one() + slack),
            TransformParams::Bias(p) => {
                let lo = (S::one() - p.epsilon).ln();
                let hi = (S::one() + p.epsilon).ln();
                p.ctrl
                    .data()
                    .iter()
                    .all(|&v| v >= lo - slack && v <= hi + slack)
            }
            TransformParams::Affine(p) => {
                let d = p.params.data();
                d[0].abs() <= p.translate_bound * (S::one() + slack)
                    && d[1].abs() <= p.translate_bound * (S::one() + slack)
                    && d[2].abs() <= p.rotate_bound * (S::one() + slack)
                    && d[3].abs() <= p.scale_bound * (S::one() + slack)
                    && d[4].abs() <= p.scale_bound * (S::one() + slack)
            }
            TransformParams::Morph(p) => {
                (p.v_low.l2_norm() - p.epsilon).abs() <= p.epsilon * slack
            }
        }
    }

    /// Apply the transform to an image (graph form; `param` from [`bind`]).
    pub fn apply_image(&self, g: &mut Graph<S>, param: Var, x: Var) -> Result<Var> {
        match self {
            TransformParams::Noise(_) => g.add(x, param),
            TransformParams::Bias(_) => {
                let (c, h, w) = g.value(x).chw()?;
                if c != 1 {
                    return Err(Error::shape("bias applies to single-channel images"));
                }
                let field = g.bspline(param, h, w)?;
                let phi = g.exp(field);
                g.mul(x, phi)
            }
            TransformParams::Affine(p) => {
                let d = g.value(param).data();
                if S::one() + d[3] <= S::zero() || S::one() + d[4] <= S::zero() {
                    return Err(Error::Numerical("degenerate affine scale".into()));
                }
                let _ = p;
                let (_, h, w) = g.value(x).chw()?;
                let m = g.affine_mat(param, false)?;
                let grid = g.affine_grid(m, h, w)?;
                g.bilinear_sample(x, grid)
            }
            TransformParams::Morph(p) => {
                let (_, h, w) = g.value(x).chw()?;
                let (mh, mw) = p.full_shape();
                if (h, w) != (mh, mw) {
                    return Err(Error::shape(format!(
                        "morph field is for {}x{}, image is {}x{}",
                        mh, mw, h, w
                    )));
                }
                let phi = self.integrate(g, param, false)?;
                warp_with_displacement(g, x, phi)
            }
        }
    }

    /// Apply a geometric transform to a probability map (warp + per-pixel
    /// renormalization). Photometric families act on intensities, not
    /// coordinates, and are rejected here.
    pub fn apply_probmap(&self, g: &mut Graph<S>, param: Var, p: Var) -> Result<Var> {
        match self {
            TransformParams::Affine(_) | TransformParams::Morph(_) => {
                let warped = self.apply_image_like(g, param, p, false)?;
                renormalize_probmap(g, warped)
            }
            _ => Err(Error::invalid(
                "photometric transforms do not apply to probability maps",
            )),
        }
    }

    /// Warp a probability map through the inverse transform (pull-back step).
    pub fn inverse_warp_probmap(&self, g: &mut Graph<S>, param: Var, p: Var) -> Result<Var> {
        match self {
            TransformParams::Affine(_) | TransformParams::Morph(_) => {
                let warped = self.apply_image_like(g, param, p, true)?;
                renormalize_probmap(g, warped)
            }
            _ => Err(Error::invalid(
                "photometric transforms have no spatial inverse",
            )),
        }
    }

    fn apply_image_like(
        &self,
        g: &mut Graph<S>,
        param: Var,
        x: Var,
        inverse: bool,
    ) -> Result<Var> {
        match self {
            TransformParams::Affine(_) => {
                let (_, h, w) = g.value(x).chw()?;
                let m = g.affine_mat(param, inverse)?;
                let grid = g.affine_grid(m, h, w)?;
                g.bilinear_sample(x, grid)
            }
            TransformParams::Morph(p) => {
                let (_, h, w) = g.value(x).chw()?;
                let (mh, mw) = p.full_shape();
                if (h, w) != (mh, mw) {
                    return Err(Error::shape("morph field / map size mismatch"));
                }
                let phi = self.integrate(g, param, inverse)?;
                warp_with_displacement(g, x, phi)
            }
            _ => unreachable!("photometric families rejected by callers"),
        }
    }

    /// Integrate the stationary velocity field by scaling and squaring
    /// (negated field when `backward`), returning the displacement `[2,H,W]`
    /// in normalized coordinates.
    pub fn integrate(&self, g: &mut Graph<S>, param: Var, backward: bool) -> Result<Var> {
        let p = match self {
            TransformParams::Morph(p) => p,
            _ => return Err(Error::invalid("integrate is only defined for morph")),
        };
        let (h, w) = p.full_shape();
        // Smooth the low-resolution field, then upsample; smoothing at the
        // coarse scale is what keeps the dense velocity slowly varying.
        let smoothed = g.gaussian_smooth(param, p.sigma)?;
        let mut v = if p.downsample > 1 {
            g.resize_bilinear(smoothed, h, w)?
        } else {
            smoothed
        };
        // Taper the velocity to zero at the border so the deformation stays
        // inside the field of view and remains invertible there.
        let taper = g.constant(border_taper::<S>(h, w, taper_margin(h, w)));
        v = g.mul(v, taper)?;
        if backward {
            v = g.scale(v, -S::one());
        }
        let mut phi = g.scale(v, S::one() / S::c((1u64 << p.squaring_steps) as f64));
        let id = g.constant(identity_grid::<S>(h, w));
        for _ in 0..p.squaring_steps {
            let grid = g.add(id, phi)?;
            let moved = g.bilinear_sample(phi, grid)?;
            phi = g.add(phi, moved)?;
        }
        g.gaussian_smooth(phi, p.sigma)
    }

    /// Eager convenience: apply to an image without tracking gradients.
    pub fn apply_image_eager(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = self.bind(&mut g, false);
        let out = self.apply_image(&mut g, pv, xv)?;
        Ok(g.value(out).clone())
    }

    /// Eager integrated displacement field for a morph transform.
    pub fn integrate_eager(&self, backward: bool) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let phi = self.integrate(&mut g, pv, backward)?;
        Ok(g.value(phi).clone())
    }

    /// Human-readable structured representation (family tag + arrays).
    pub fn to_json(&self) -> Value {
        let values: Vec<f64> = self
            .param_tensor()
            .data()
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect();
        match self {
            TransformParams::Noise(p) => json!({
                "family": "noise",
                "epsilon": p.epsilon.to_f64_lossy(),
                "shape": p.r.dims(),
                "values": values,
            }),
            TransformParams::Bias(p) => json!({
                "family": "bias",
                "epsilon": p.epsilon.to_f64_lossy(),
                "shape": p.ctrl.dims(),
                "values": values,
            }),
            TransformParams::Affine(p) => json!({
                "family": "affine",
                "bounds": {
                    "translate": p.translate_bound.to_f64_lossy(),
                    "rotate": p.rotate_bound.to_f64_lossy(),
                    "scale": p.scale_bound.to_f64_lossy(),
                },
                "values": values,
            }),
            TransformParams::Morph(p) => json!({
                "family": "morph",
                "epsilon": p.epsilon.to_f64_lossy(),
                "downsample": p.downsample,
                "sigma": p.sigma.to_f64_lossy(),
                "squaring": p.squaring_steps,
                "shape": p.v_low.dims(),
                "values": values,
            }),
        }
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let family = v["family"]
            .as_str()
            .ok_or_else(|| Error::invalid("missing family tag"))?;
        let values = |v: &Value| -> Result<Vec<S>> {
            v["values"]
                .as_array()
                .ok_or_else(|| Error::invalid("missing values"))?
                .iter()
                .map(|x| {
                    x.as_f64()
                        .map(S::c)
                        .ok_or_else(|| Error::invalid("non-numeric value"))
                })
                .collect()
        };
        let shape = |v: &Value| -> Result<Vec<usize>> {
            v["shape"]
                .as_array()
                .ok_or_else(|| Error::invalid("missing shape"))?
                .iter()
                .map(|x| {
                    x.as_u64()
                        .map(|u| u as usize)
                        .ok_or_else(|| Error::invalid("bad shape entry"))
                })
                .collect()
        };
        match family {
            "noise" => Ok(TransformParams::Noise(NoiseParams {
                r: Tensor::new(shape(v)?, values(v)?)?,
                epsilon: S::c(v["epsilon"].as_f64().unwrap_or(1.0)),
            })),
            "bias" => Ok(TransformParams::Bias(BiasParams {
                ctrl: Tensor::new(shape(v)?, values(v)?)?,
                epsilon: S::c(v["epsilon"].as_f64().unwrap_or(0.3)),
            })),
            "affine" => Ok(TransformParams::Affine(AffineParams {
                params: Tensor::new(vec![5], values(v)?)?,
                translate_bound: S::c(v["bounds"]["translate"].as_f64().unwrap_or(0.1)),
                rotate_bound: S::c(v["bounds"]["rotate"].as_f64().unwrap_or(15.0 / 180.0)),
                scale_bound: S::c(v["bounds"]["scale"].as_f64().unwrap_or(0.2)),
            })),
            "morph" => Ok(TransformParams::Morph(MorphParams {
                v_low: Tensor::new(shape(v)?, values(v)?)?,
                epsilon: S::c(v["epsilon"].as_f64().unwrap_or(1.5)),
                downsample: v["downsample"].as_u64().unwrap_or(8) as usize,
                sigma: S::c(v["sigma"].as_f64().unwrap_or(1.0)),
                squaring_steps: v["squaring"].as_u64().unwrap_or(8) as usize,
            })),
            other => Err(Error::invalid(format!("unknown family '{}'", other))),
        }
    }
}

impl<S: Scalar> AffineParams<S> {
    /// Forward homogeneous matrix T·R·S.
    pub fn forward_matrix(&self) -> Mat3<S> {
        Mat3::from_rows6(&kernels::affine_mat_forward(self.params.data(), false))
    }

    /// Inverse matrix S⁻¹·R⁻¹·T⁻¹.
    pub fn inverse_matrix(&self) -> Mat3<S> {
        Mat3::from_rows6(&kernels::affine_mat_forward(self.params.data(), true))
    }
}

/// Inverse of an affine transform as a 3×3 homogeneous matrix.
pub fn invert_affine<S: Scalar>(p: &AffineParams<S>) -> Mat3<S> {
    p.inverse_matrix()
}

/// Warp `x` by a displacement field: sample at (identity + phi).
pub fn warp_with_displacement<S: Scalar>(g: &mut Graph<S>, x: Var, phi: Var) -> Result<Var> {
    let (_, h, w) = g.value(x).chw()?;
    let id = g.constant(identity_grid::<S>(h, w));
    let grid = g.add(id, phi)?;
    g.bilinear_sample(x, grid)
}

/// Clamp to ≥ 0 and renormalize each pixel's channel distribution; pixels
/// whose mass vanished (e.g. warped in from outside the field of view) fall
/// back to the uniform distribution.
pub fn renormalize_probmap<S: Scalar>(g: &mut Graph<S>, p: Var) -> Result<Var> {
    let (c, _, _) = g.value(p).chw()?;
    let eps = S::c(1e-8);
    let clamped = g.max_scalar(p, S::zero());
    let num = g.add_scalar(clamped, eps);
    let sums = g.sum_channels(num)?;
    let den = g.broadcast_channels(sums, c)?;
    g.div(num, den)
}

fn taper_margin(h: usize, w: usize) -> usize {
    (h.min(w) / 8).max(2)
}

/// Smallest finite-difference Jacobian determinant of the map
/// (identity + phi) over interior pixels, in pixel units.
pub fn min_jacobian_det<S: Scalar>(phi: &Tensor<S>) -> S {
    let (_, h, w) = phi.chw().unwrap();
    let d = phi.data();
    let half_w = S::c((w - 1) as f64 / 2.0);
    let half_h = S::c((h - 1) as f64 / 2.0);
    let mut min_det = S::infinity();
    // pixel-space coordinates of the mapped grid
    let px = |y: usize, x: usize| -> (S, S) {
        let u = d[y * w + x];
        let v = d[h * w + y * w + x];
        (
            S::c(x as f64) + u * half_w,
            S::c(y as f64) + v * half_h,
        )
    };
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let (xr, yr) = px(y, x + 1);
            let (xl, yl) = px(y, x - 1);
            let (xd, yd) = px(y + 1, x);
            let (xu, yu) = px(y - 1, x);
            let a = (xr - xl) * S::c(0.5); // dx/dcol
            let c_ = (yr - yl) * S::c(0.5); // dy/dcol
            let b = (xd - xu) * S::c(0.5); // dx/drow
            let dd = (yd - yu) * S::c(0.5); // dy/drow
            let det = a * dd - b * c_;
            min_det = min_det.min(det);
        }
    }
    min_det
}
