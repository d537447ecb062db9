//! Central finite-difference verification of analytic gradients.
//!
//! Every differentiable operation in the crate is checked against central
//! differences on small random instances. The harness re-evaluates the whole
//! computation with perturbed leaves, so it is independent of the backward
//! implementation it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Settings for one finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct FdSettings<S> {
    /// Central-difference step.
    pub step: S,
    /// Relative-error tolerance (L2 over all checked coordinates).
    pub tolerance: S,
    /// Cap on coordinates checked per leaf; larger blocks are subsampled.
    pub max_coords: usize,
    /// Seed for the coordinate subsample.
    pub seed: u64,
}

impl<S: Scalar> FdSettings<S> {
    /// Step/tolerance appropriate for the precision: 1e-4 / 1e-5 in f64,
    /// a coarser step and 1e-3 in f32 where rounding noise dominates.
    pub fn recommended() -> Self {
        if S::BYTES == 8 {
            FdSettings {
                step: S::c(1e-4),
                tolerance: S::c(1e-5),
                max_coords: 48,
                seed: 0,
            }
        } else {
            FdSettings {
                step: S::c(2e-2),
                tolerance: S::c(1e-3),
                max_coords: 48,
                seed: 0,
            }
        }
    }

    pub fn with_tolerance(mut self, tol: S) -> Self {
        self.tolerance = tol;
        self
    }

    /// Settings for pipelines that re-sample the output of another warp.
    /// Such compositions are only piecewise-C¹ in the warp parameters, so a
    /// smaller step keeps the central-difference oracle away from the
    /// interpolation kinks it would otherwise straddle.
    pub fn composed() -> Self {
        if S::BYTES == 8 {
            FdSettings {
                step: S::c(1e-6),
                ..Self::recommended()
            }
        } else {
            FdSettings {
                step: S::c(3e-4),
                ..Self::recommended()
            }
        }
    }
}

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
    pub coords_checked: usize,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.rel_error.is_finite() && self.rel_error < self.tolerance
    }
}

fn subset_coords(n: usize, max_coords: usize, seed: u64) -> Vec<usize> {
    if n <= max_coords {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < max_coords {
            picked.insert(rng.gen_range(0..n));
        }
        picked.into_iter().collect()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let denom = l2(a).max(l2(b));
    if denom < 1e-12 {
        0.0
    } else {
        l2(&diff) / denom
    }
}

/// One check's analytic gradient (at the checked coordinate subset) plus the
/// finite-difference comparison when it was run.
pub struct CheckOutcome {
    pub report: CheckReport,
    /// Analytic gradient values at the checked coordinates, as f64.
    pub analytic: Vec<f64>,
}

fn check_gradients_inner<S, F>(
    name: &str,
    leaves: &[Tensor<S>],
    build: F,
    settings: &FdSettings<S>,
    run_fd: bool,
) -> Result<CheckOutcome>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<S>]| -> Result<(Graph<S>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g, vars, loss))
    };

    let (g, vars, loss) = eval(leaves)?;
    let grads = g.backward(loss)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let two_h = S::c(2.0) * settings.step;

    for (li, leaf) in leaves.iter().enumerate() {
        let ga = grads.get(vars[li]);
        let coords = subset_coords(leaf.len(), settings.max_coords, settings.seed);
        for &ci in &coords {
            let a = ga.map(|t| t.data()[ci]).unwrap_or(S::zero());
            analytic.push(a.to_f64_lossy());
            if run_fd {
                let mut perturbed = leaves.to_vec();
                perturbed[li].data_mut()[ci] = leaf.data()[ci] + settings.step;
                let (gp, _, lp) = eval(&perturbed)?;
                let fplus = gp.value(lp).item();
                perturbed[li].data_mut()[ci] = leaf.data()[ci] - settings.step;
                let (gm, _, lm) = eval(&perturbed)?;
                let fminus = gm.value(lm).item();
                numeric.push(((fplus - fminus) / two_h).to_f64_lossy());
            }
        }
    }

    let rel = if run_fd {
        relative_error(&analytic, &numeric)
    } else {
        f64::NAN
    };
    Ok(CheckOutcome {
        report: CheckReport {
            name: name.to_string(),
            rel_error: rel,
            tolerance: settings.tolerance.to_f64_lossy(),
            coords_checked: analytic.len(),
        },
        analytic,
    })
}

/// Compare analytic gradients of `build` (a scalar-valued graph program over
/// the given leaves) against central finite differences.
pub fn check_gradients<S, F>(
    name: &str,
    leaves: &[Tensor<S>],
    build: F,
    settings: &FdSettings<S>,
) -> Result<CheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    Ok(check_gradients_inner(name, leaves, build, settings, true)?.report)
}

/// Options for the standard verification suite.
#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    /// Random instances per checked operation.
    pub instances: usize,
    pub seed: u64,
    /// Tolerance override (None keeps the per-precision recommendation).
    pub tolerance: Option<f64>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            instances: 5,
            seed: 0,
            tolerance: None,
        }
    }
}

/// Run finite-difference checks over every differentiable operation: the
/// grid kernels, the four transforms through their full pipelines, chain
/// composition, all distance variants, the predictor and the consistency
/// loss. One report per (operation, instance).
pub fn standard_suite<S: Scalar>(opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    Ok(standard_suite_entries::<S>(opts, true)?
        .into_iter()
        .map(|o| o.report)
        .collect())
}

/// Verify single-precision gradients against the double-precision
/// finite-difference anchor: the same seeded programs are built at both
/// precisions and the f32 analytic gradients are compared, coordinate for
/// coordinate, against the f64 gradients that the direct FD suite certifies.
/// (A finite-difference quotient evaluated in f32 cannot resolve 1e-3 for
/// composed warps: interpolation-kink noise is step-independent while f32
/// rounding forbids smaller steps.)
pub fn single_precision_suite(opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    // anchor soundness is judged at the recommended tolerances regardless of
    // any reporting override
    let anchor_opts = SuiteOptions {
        tolerance: None,
        ..*opts
    };
    let anchor = standard_suite_entries::<f64>(&anchor_opts, true)?;
    let single = standard_suite_entries::<f32>(opts, false)?;
    let tol = opts.tolerance.unwrap_or(1e-3);
    anchor
        .into_iter()
        .zip(single)
        .map(|(a, s)| {
            if !a.report.pass() {
                return Err(Error::Numerical(format!(
                    "f64 anchor {} failed its own FD check (rel {:.3e})",
                    a.report.name, a.report.rel_error
                )));
            }
            if a.analytic.len() != s.analytic.len() {
                return Err(Error::Numerical("precision suites diverged".into()));
            }
            Ok(CheckReport {
                name: format!("{} (f32)", s.report.name),
                rel_error: relative_error(&s.analytic, &a.analytic),
                tolerance: tol,
                coords_checked: s.analytic.len(),
            })
        })
        .collect()
}

fn standard_suite_entries<S: Scalar>(opts: &SuiteOptions, run_fd: bool) -> Result<Vec<CheckOutcome>> {
    use crate::chain::{BoundChain, Chain};
    use crate::losses::{composite_distance, consistency_loss_cached, supervised_loss};
    use crate::losses::{DistanceConfig, DistanceVariant, SupervisedLossConfig};
    use crate::predictor::{Predictor, TinyPredictor};
    use crate::segnet::{NetConfig, SegNet};
    use crate::transforms::{ConstraintTable, FamilyKind, NoiseParams, TransformParams};

    let mut simple = FdSettings::<S>::recommended();
    let mut composed = FdSettings::<S>::composed();
    // the consistency pipeline routes chain gradients through a predictor
    // and the pull-back inverses; its contract is the looser 1e-3 bound,
    // and a finer step keeps the oracle off resampling kinks
    let mut consistency = FdSettings::<S> {
        tolerance: S::c(1e-3),
        step: if S::BYTES == 8 { S::c(1e-7) } else { composed.step },
        ..composed
    };
    if let Some(tol) = opts.tolerance {
        simple.tolerance = S::c(tol);
        composed.tolerance = S::c(tol);
        consistency.tolerance = S::c(tol);
    }
    let (h, w) = (16usize, 16usize);
    let table = ConstraintTable::default();
    let mut reports = Vec::new();

    for inst in 0..opts.instances {
        let seed = opts.seed.wrapping_add(inst as u64).wrapping_mul(0x2545_f491);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = fixtures::smooth_image::<S>(h, w, &mut rng);
        let tag = |name: &str| format!("{}[{}]", name, inst);

        // -- grid kernels ---------------------------------------------------
        {
            let grid = fixtures::offset_grid::<S>(h, w, &mut rng);
            let img = img.clone();
            reports.push(check_gradients_inner(
                &tag("grid/bilinear_sample"),
                &[img, grid],
                |g, vars| {
                    let s = g.bilinear_sample(vars[0], vars[1])?;
                    let sq = g.mul(s, s)?;
                    Ok(g.mean(sq))
                },
                &simple,
                run_fd,
            )?);
        }
        {
            let mat = Tensor::new(
                vec![6],
                vec![
                    S::c(1.0 + rng.gen_range(-0.1..0.1)),
                    S::c(rng.gen_range(-0.1..0.1)),
                    S::c(rng.gen_range(-0.1..0.1)),
                    S::c(rng.gen_range(-0.1..0.1)),
                    S::c(1.0 + rng.gen_range(-0.1..0.1)),
                    S::c(rng.gen_range(-0.1..0.1)),
                ],
            )
            .unwrap();
            let img = img.clone();
            reports.push(check_gradients_inner(
                &tag("grid/make_affine_grid"),
                &[mat],
                move |g, vars| {
                    let grid = g.affine_grid(vars[0], 16, 16)?;
                    let x = g.constant(img.clone());
                    let s = g.bilinear_sample(x, grid)?;
                    let sq = g.mul(s, s)?;
                    Ok(g.mean(sq))
                },
                &composed,
                run_fd,
            )?);
        }
        {
            let ctrl = Tensor::from_fn(&[1, 4, 4], |_| S::c(rng.gen_range(-0.3..0.3)));
            reports.push(check_gradients_inner(
                &tag("grid/bspline_interpolate"),
                &[ctrl],
                |g, vars| {
                    let f = g.bspline(vars[0], 16, 16)?;
                    let e = g.exp(f);
                    Ok(g.mean(e))
                },
                &simple,
                run_fd,
            )?);
        }
        {
            let field = Tensor::from_fn(&[2, h, w], |_| S::c(rng.gen_range(-0.5..0.5)));
            reports.push(check_gradients_inner(
                &tag("grid/gaussian_smooth"),
                std::slice::from_ref(&field),
                |g, vars| {
                    let s = g.gaussian_smooth(vars[0], S::one())?;
                    let sq = g.mul(s, s)?;
                    Ok(g.mean(sq))
                },
                &simple,
                run_fd,
            )?);
            let low = Tensor::from_fn(&[2, 4, 4], |_| S::c(rng.gen_range(-0.5..0.5)));
            reports.push(check_gradients_inner(
                &tag("grid/upsample_bilinear"),
                &[low],
                |g, vars| {
                    let up = crate::grid::upsample_bilinear(g, vars[0], 4)?;
                    let sq = g.mul(up, up)?;
                    Ok(g.mean(sq))
                },
                &simple,
                run_fd,
            )?);
        }
        {
            let img = img.clone();
            reports.push(check_gradients_inner(
                &tag("grid/sobel_gradients"),
                &[img],
                |g, vars| {
                    let (sx, sy) = crate::grid::sobel_gradients(g, vars[0])?;
                    let a = g.mul(sx, sx)?;
                    let b = g.mul(sy, sy)?;
                    let s = g.add(a, b)?;
                    Ok(g.mean(s))
                },
                &simple,
                run_fd,
            )?);
        }

        // -- transforms through full pipelines -------------------------------
        for kind in FamilyKind::ALL {
            let member = TransformParams::<S>::random_init(kind, h, w, &table, &mut rng);
            let img = img.clone();
            let settings = if kind.is_geometric() { &composed } else { &simple };
            reports.push(check_gradients_inner(
                &format!("transform/{}[{}]", kind.name(), inst),
                &[member.param_tensor().clone()],
                move |g, vars| {
                    let live = member.with_param_tensor(g.value(vars[0]).clone())?;
                    let xv = g.constant(img.clone());
                    let out = live.apply_image(g, vars[0], xv)?;
                    let sq = g.mul(out, out)?;
                    Ok(g.mean(sq))
                },
                settings,
                run_fd,
            )?);
        }
        {
            // inverse warp path (pull-back gradients stay live)
            let member = TransformParams::<S>::random_init(FamilyKind::Affine, h, w, &table, &mut rng);
            let pmap = fixtures::smooth_probmap::<S>(3, h, w, &mut rng);
            reports.push(check_gradients_inner(
                &tag("transform/affine_inverse"),
                &[member.param_tensor().clone()],
                move |g, vars| {
                    let live = member.with_param_tensor(g.value(vars[0]).clone())?;
                    let pv = g.constant(pmap.clone());
                    let out = live.inverse_warp_probmap(g, vars[0], pv)?;
                    let sq = g.mul(out, out)?;
                    Ok(g.mean(sq))
                },
                &composed,
                run_fd,
            )?);
        }

        // -- chain composition ------------------------------------------------
        {
            let chain = Chain::<S>::sample(&mut rng, 1.0, &FamilyKind::ALL, h, w, &table)?;
            let mut proj_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let members = chain
                .members
                .iter()
                .map(|m| match m {
                    TransformParams::Noise(p) => {
                        let smoothed = crate::kernels::gaussian_forward(&p.r, S::c(2.0));
                        TransformParams::Noise(NoiseParams {
                            r: smoothed,
                            epsilon: p.epsilon,
                        })
                        .project(&mut proj_rng)
                    }
                    other => other.clone(),
                })
                .collect();
            let chain = Chain::new(members)?;
            let leaves: Vec<Tensor<S>> = chain
                .members
                .iter()
                .map(|m| m.param_tensor().clone())
                .collect();
            let img = img.clone();
            reports.push(check_gradients_inner(
                &tag("chain/all_members"),
                &leaves,
                move |g, vars| {
                    let mut cur = g.constant(img.clone());
                    for (m, &p) in chain.members.iter().zip(vars) {
                        let live = m.with_param_tensor(g.value(p).clone())?;
                        cur = live.apply_image(g, p, cur)?;
                    }
                    let sq = g.mul(cur, cur)?;
                    Ok(g.mean(sq))
                },
                &composed,
                run_fd,
            )?);
        }

        // -- distances ----------------------------------------------------------
        let p = fixtures::smooth_probmap::<S>(3, h, w, &mut rng);
        let q = fixtures::smooth_probmap::<S>(3, h, w, &mut rng);
        for variant in [
            DistanceVariant::Mse,
            DistanceVariant::Kl,
            DistanceVariant::MseContour,
            DistanceVariant::KlContour,
        ] {
            let cfg = DistanceConfig {
                variant,
                contour_weight: 0.5,
            };
            let p = p.clone();
            reports.push(check_gradients_inner(
                &format!("distance/{:?}[{}]", variant, inst),
                std::slice::from_ref(&q),
                move |g, vars| {
                    let pv = g.constant(p.clone());
                    composite_distance(g, pv, vars[0], &cfg)
                },
                &simple,
                run_fd,
            )?);
        }

        // -- predictor -----------------------------------------------------------
        {
            let net = SegNet::<S>::init(
                NetConfig {
                    classes: 3,
                    base_width: 4,
                },
                seed,
            );
            let labels: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..3u8)).collect();
            let sup = SupervisedLossConfig::for_classes(3);
            let leaves: Vec<Tensor<S>> = net.params().iter().map(|p| p.tensor.clone()).collect();
            let img2 = img.clone();
            let netc = net.clone();
            let labels2 = labels.clone();
            let settings = FdSettings {
                max_coords: 20,
                ..simple
            };
            reports.push(check_gradients_inner(
                &tag("predictor/theta"),
                &leaves,
                move |g, vars| {
                    let xv = g.constant(img2.clone());
                    let out = netc.forward(g, vars, xv)?;
                    supervised_loss(g, out, &labels2, &sup)
                },
                &settings,
                run_fd,
            )?);
            let netc = net.clone();
            reports.push(check_gradients_inner(
                &tag("predictor/input"),
                std::slice::from_ref(&img),
                move |g, vars| {
                    let params = netc.bind(g, false);
                    let out = netc.forward(g, &params, vars[0])?;
                    let ch = g.slice_channels(out, 1, 2)?;
                    Ok(g.mean(ch))
                },
                &simple,
                run_fd,
            )?);
        }
        {
            // supervised loss w.r.t. logits (through softmax)
            let logits = Tensor::from_fn(&[3, h, w], |_| S::c(rng.gen_range(-1.0..1.0)));
            let labels: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..3u8)).collect();
            let sup = SupervisedLossConfig::for_classes(3);
            reports.push(check_gradients_inner(
                &tag("loss/supervised"),
                &[logits],
                move |g, vars| {
                    let pm = g.softmax(vars[0])?;
                    supervised_loss(g, pm, &labels, &sup)
                },
                &simple,
                run_fd,
            )?);
        }

        // -- consistency through chain and predictor ------------------------------
        {
            let predictor = TinyPredictor::<S>::new(3, 4, &mut rng);
            let sub_table = ConstraintTable {
                morph_squaring: 6,
                ..ConstraintTable::default()
            };
            let chain = Chain::new(vec![
                TransformParams::<S>::random_init(FamilyKind::Bias, h, w, &sub_table, &mut rng),
                TransformParams::<S>::random_init(FamilyKind::Affine, h, w, &sub_table, &mut rng),
                TransformParams::<S>::random_init(FamilyKind::Morph, h, w, &sub_table, &mut rng),
            ])?;
            let original = predictor.predict(&img)?;
            let leaves: Vec<Tensor<S>> = chain
                .members
                .iter()
                .map(|m| m.param_tensor().clone())
                .collect();
            let cfg = DistanceConfig::default();
            let img = img.clone();
            reports.push(check_gradients_inner(
                &tag("consistency/chain_params"),
                &leaves,
                move |g, vars| {
                    let members = chain
                        .members
                        .iter()
                        .zip(vars)
                        .map(|(m, &v)| m.with_param_tensor(g.value(v).clone()))
                        .collect::<Result<Vec<_>>>()?;
                    let live = Chain::new(members)?;
                    let bound = BoundChain {
                        params: vars.to_vec(),
                    };
                    let xv = g.constant(img.clone());
                    let params = predictor.bind(g, false);
                    consistency_loss_cached(
                        g, &original, xv, &predictor, &params, &live, &bound, &cfg,
                    )
                },
                &consistency,
                run_fd,
            )?);
        }
    }
    Ok(reports)
}

/// Deterministic test fixtures shared by the verification suite.
pub mod fixtures {
    use super::*;

    /// Band-limited random image in roughly [0, 1], tapered to zero near the
    /// border so geometric perturbations do not create sampling kinks at the
    /// field-of-view boundary.
    pub fn smooth_image<S: Scalar>(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
        let noise = Tensor::from_fn(&[1, h, w], |_| S::c(rng.gen_range(0.0..1.0)));
        let sm = crate::kernels::gaussian_forward(&noise, S::c(2.0));
        let taper = crate::kernels::border_taper::<S>(h, w, (h.min(w) / 4).max(2));
        Tensor::from_fn(&[1, h, w], |i| {
            let centered = (sm.data()[i] - S::c(0.5)) * S::c(2.0);
            // tapered to zero at the border: the zero-padding boundary of the
            // sampler must not be a jump for warped finite differences
            (S::c(0.5) + S::c(0.45) * centered) * taper.data()[i]
        })
    }

    /// Smooth random probability map `[c,h,w]` (softmax of smoothed logits),
    /// blended toward uniform near the border.
    pub fn smooth_probmap<S: Scalar>(
        c: usize,
        h: usize,
        w: usize,
        rng: &mut ChaCha8Rng,
    ) -> Tensor<S> {
        let mut logits = Vec::with_capacity(c);
        let taper = crate::kernels::border_taper::<S>(h, w, (h.min(w) / 4).max(2));
        for _ in 0..c {
            let noise = Tensor::from_fn(&[1, h, w], |_| S::c(rng.gen_range(-2.0..2.0)));
            let sm = crate::kernels::gaussian_forward(&noise, S::c(2.0));
            logits.push(sm);
        }
        let mut data = vec![S::zero(); c * h * w];
        for p in 0..h * w {
            let t = taper.data()[p];
            let mut mx = S::neg_infinity();
            for l in &logits {
                mx = mx.max(l.data()[p] * t);
            }
            let mut z = S::zero();
            for ch in 0..c {
                let e = (logits[ch].data()[p] * t - mx).exp();
                data[ch * h * w + p] = e;
                z = z + e;
            }
            for ch in 0..c {
                data[ch * h * w + p] = data[ch * h * w + p] / z;
            }
        }
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    /// A sampling grid near identity whose pixel-space fractional parts stay
    /// away from the bilinear lattice (keeps finite differences clean).
    pub fn offset_grid<S: Scalar>(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
        let id = crate::kernels::identity_grid::<S>(h, w);
        let half_w = S::c((w.max(2) - 1) as f64 / 2.0);
        let half_h = S::c((h.max(2) - 1) as f64 / 2.0);
        Tensor::from_fn(&[2, h, w], |i| {
            let plane = i / (h * w);
            let half = if plane == 0 { half_w } else { half_h };
            let base = id.data()[i];
            // fractional offset in [0.25, 0.75] pixels, safely inside a cell
            let off = S::c(rng.gen_range(0.25..0.75)) / half;
            let v = base + off;
            if v > S::one() {
                base - off
            } else {
                v
            }
        })
    }
}
