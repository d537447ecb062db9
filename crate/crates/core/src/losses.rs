//! Distances between probability maps, the consistency regularizer, the
//! supervised segmentation loss and the Dice evaluation metric.
//!
//! The composite distance is a mean-squared term plus a weighted contour
//! term built from Sobel responses of every foreground class. The KL
//! variants mirror the distances commonly used by consistency-regularized
//! semi-supervised methods.

use crate::chain::{BoundChain, Chain};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::predictor::Predictor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceVariant {
    Mse,
    Kl,
    MseContour,
    KlContour,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DistanceConfig {
    pub variant: DistanceVariant,
    /// Weight of the contour term (w).
    pub contour_weight: f64,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        DistanceConfig {
            variant: DistanceVariant::MseContour,
            contour_weight: 0.5,
        }
    }
}

/// Probability floor inside the KL term.
const KL_FLOOR: f64 = 1e-8;

/// Mean over all pixels and channels of the squared difference.
pub fn mse_distance<S: Scalar>(g: &mut Graph<S>, p: Var, q: Var) -> Result<Var> {
    let d = g.sub(p, q)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Sum over foreground classes and both Sobel directions of the mean squared
/// difference of filter responses. Class 0 is background and excluded.
pub fn contour_distance<S: Scalar>(g: &mut Graph<S>, p: Var, q: Var) -> Result<Var> {
    let (c, _, _) = g.value(p).chw()?;
    if c < 2 {
        return Err(Error::invalid("contour distance needs at least 2 classes"));
    }
    let pf = g.slice_channels(p, 1, c)?;
    let qf = g.slice_channels(q, 1, c)?;
    let mut total: Option<Var> = None;
    for axis in [0usize, 1] {
        let sp = g.sobel(pf, axis)?;
        let sq = g.sobel(qf, axis)?;
        let d = g.sub(sp, sq)?;
        let d2 = g.mul(d, d)?;
        // per-class pixel mean, summed over classes == overall mean × (C−1)
        let m = g.mean(d2);
        let m = g.scale(m, S::c((c - 1) as f64));
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(total.unwrap())
}

/// Mean over pixels of Σ_c p log(p / max(q, floor)).
pub fn kl_distance<S: Scalar>(g: &mut Graph<S>, p: Var, q: Var) -> Result<Var> {
    let (_, h, w) = g.value(p).chw()?;
    let qf = g.max_scalar(q, S::c(KL_FLOOR));
    let lp = g.ln(p);
    let lq = g.ln(qf);
    let d = g.sub(lp, lq)?;
    let m = g.mul(p, d)?;
    let s = g.sum(m);
    Ok(g.scale(s, S::one() / S::c((h * w) as f64)))
}

/// Variant-selected base distance plus `w`·contour.
pub fn composite_distance<S: Scalar>(
    g: &mut Graph<S>,
    p: Var,
    q: Var,
    cfg: &DistanceConfig,
) -> Result<Var> {
    let base = match cfg.variant {
        DistanceVariant::Mse | DistanceVariant::MseContour => mse_distance(g, p, q)?,
        DistanceVariant::Kl | DistanceVariant::KlContour => kl_distance(g, p, q)?,
    };
    match cfg.variant {
        DistanceVariant::Mse | DistanceVariant::Kl => Ok(base),
        DistanceVariant::MseContour | DistanceVariant::KlContour => {
            let contour = contour_distance(g, p, q)?;
            let weighted = g.scale(contour, S::c(cfg.contour_weight));
            g.add(base, weighted)
        }
    }
}

/// Consistency regularizer for one image with a pre-computed original
/// prediction: R = D(p, pull_back(chain, f(apply_chain(chain, x)))).
///
/// The original prediction enters as a constant, so gradients reach the
/// chain parameters (when their leaves require grad) and the predictor
/// parameters (when bound with grad), but never the original branch.
#[allow(clippy::too_many_arguments)]
pub fn consistency_loss_cached<S: Scalar, P: Predictor<S>>(
    g: &mut Graph<S>,
    original_prediction: &Tensor<S>,
    x: Var,
    predictor: &P,
    predictor_params: &[Var],
    chain: &Chain<S>,
    bound: &BoundChain,
    cfg: &DistanceConfig,
) -> Result<Var> {
    let perturbed_input = chain.apply_image(g, bound, x)?;
    let perturbed_pred = predictor.forward(g, predictor_params, perturbed_input)?;
    if g.value(perturbed_pred).dims() != original_prediction.dims() {
        return Err(Error::shape("predictor output shape changed under the chain"));
    }
    let pulled_back = chain.pull_back(g, bound, perturbed_pred)?;
    let p_const = g.constant(original_prediction.clone());
    composite_distance(g, p_const, pulled_back, cfg)
}

/// Evaluation-only consistency loss: computes the original prediction
/// internally and returns the scalar value.
pub fn consistency_loss<S: Scalar, P: Predictor<S>>(
    x: &Tensor<S>,
    predictor: &P,
    chain: &Chain<S>,
    cfg: &DistanceConfig,
) -> Result<S> {
    let original = predictor.predict(x)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let params = predictor.bind(&mut g, false);
    let bound = chain.bind(&mut g, false);
    let loss = consistency_loss_cached(&mut g, &original, xv, predictor, &params, chain, &bound, cfg)?;
    Ok(g.value(loss).item())
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SupervisedLossConfig {
    /// Per-class cross-entropy weights (length C).
    pub class_weights: Vec<f64>,
    /// Smoothing constant inside the soft Dice ratio.
    pub dice_smooth: f64,
}

impl SupervisedLossConfig {
    pub fn for_classes(c: usize) -> Self {
        // background down-weighted, foreground classes equal
        let mut w = vec![0.33; c];
        w[0] = 0.01;
        SupervisedLossConfig {
            class_weights: w,
            dice_smooth: 1e-5,
        }
    }
}

/// Weighted cross-entropy plus soft Dice over foreground classes.
pub fn supervised_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred: Var,
    labels: &[u8],
    cfg: &SupervisedLossConfig,
) -> Result<Var> {
    let (c, _, _) = g.value(pred).chw()?;
    if cfg.class_weights.len() != c {
        return Err(Error::invalid(format!(
            "{} class weights for {} classes",
            cfg.class_weights.len(),
            c
        )));
    }
    if cfg.class_weights.iter().any(|w| *w < 0.0) {
        return Err(Error::invalid("class weights must be nonnegative"));
    }
    let weights: Vec<S> = cfg.class_weights.iter().map(|&w| S::c(w)).collect();
    let ce = g.weighted_ce(pred, labels, &weights)?;
    let dice = g.soft_dice(pred, labels, S::c(cfg.dice_smooth))?;
    g.add(ce, dice)
}

/// Hard-label Dice overlap 2|A∩B| / (|A|+|B|); 1.0 when both sets are empty.
pub fn dice_score(pred_labels: &[u8], true_labels: &[u8], class_id: u8) -> f64 {
    debug_assert_eq!(pred_labels.len(), true_labels.len());
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &t) in pred_labels.iter().zip(true_labels) {
        let pa = p == class_id;
        let tb = t == class_id;
        a += pa as usize;
        b += tb as usize;
        inter += (pa && tb) as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fixtures::{smooth_image, smooth_probmap};
    use crate::predictor::{ConstantPredictor, TinyPredictor};
    use crate::transforms::{
        AffineParams, ConstraintTable, FamilyKind, MorphParams, NoiseParams, TransformParams,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn eval2<S: Scalar>(
        p: &Tensor<S>,
        q: &Tensor<S>,
        f: impl FnOnce(&mut Graph<S>, Var, Var) -> Result<Var>,
    ) -> S {
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let qv = g.constant(q.clone());
        let out = f(&mut g, pv, qv).unwrap();
        g.value(out).item()
    }

    #[test]
    fn distances_vanish_on_identical_inputs() {
        let p = smooth_probmap::<f64>(3, 16, 16, &mut rng(1));
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
            let v = eval2(&p, &p, |g, a, b| composite_distance(g, a, b, &cfg));
            assert!(v.abs() < 1e-12, "{:?} on identical inputs: {}", variant, v);
        }
    }

    #[test]
    fn mse_single_pixel_flip_is_one() {
        let p = Tensor::new(vec![2, 1, 1], vec![1.0f64, 0.0]).unwrap();
        let q = Tensor::new(vec![2, 1, 1], vec![0.0f64, 1.0]).unwrap();
        let v = eval2(&p, &q, mse_distance);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mse_is_symmetric() {
        let mut r = rng(2);
        let p = smooth_probmap::<f64>(3, 12, 12, &mut r);
        let q = smooth_probmap::<f64>(3, 12, 12, &mut r);
        let a = eval2(&p, &q, mse_distance);
        let b = eval2(&q, &p, mse_distance);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn contour_ignores_per_channel_constant_offsets() {
        let p = smooth_probmap::<f64>(3, 16, 16, &mut rng(3));
        let q = Tensor::from_fn(&[3, 16, 16], |i| {
            let c = i / 256;
            p.data()[i] + 0.07 * (c as f64 + 1.0)
        });
        let v = eval2(&p, &q, contour_distance);
        assert!(v.abs() < 1e-12, "constant offsets must not register: {}", v);
        assert!(eval2(&p, &p, contour_distance).abs() < 1e-15);
    }

    #[test]
    fn contour_on_shifted_mask_matches_direct_convolution() {
        // square mask and its one-pixel shift; oracle computes the Sobel
        // responses by direct convolution with reflected borders
        let (h, w) = (16usize, 16usize);
        let sq = |y0: usize| {
            Tensor::from_fn(&[2, h, w], |i| {
                let c = i / (h * w);
                let y = (i / w) % h;
                let x = i % w;
                let inside = (y0..y0 + 5).contains(&y) && (5..10).contains(&x);
                match (c, inside) {
                    (1, true) => 1.0f64,
                    (1, false) => 0.0,
                    (0, v) => 1.0 - v as i32 as f64,
                    _ => unreachable!(),
                }
            })
        };
        let p = sq(4);
        let q = sq(5);

        let got = eval2(&p, &q, contour_distance);

        // direct convolution oracle over the single foreground class
        let reflect = crate::kernels::reflect;
        let sobel = |t: &Tensor<f64>, kx: [f64; 3], ky: [f64; 3]| -> Vec<f64> {
            let d = &t.data()[h * w..]; // class 1 plane
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (dy, wy) in ky.iter().enumerate() {
                        for (dx, wx) in kx.iter().enumerate() {
                            let yy = reflect(y as isize + dy as isize - 1, h);
                            let xx = reflect(x as isize + dx as isize - 1, w);
                            acc += wy * wx * d[yy * w + xx];
                        }
                    }
                    out[y * w + x] = acc;
                }
            }
            out
        };
        let mut expect = 0.0;
        for (kx, ky) in [([-1.0, 0.0, 1.0], [1.0, 2.0, 1.0]), ([1.0, 2.0, 1.0], [-1.0, 0.0, 1.0])] {
            let sp = sobel(&p, kx, ky);
            let sq_ = sobel(&q, kx, ky);
            let mse: f64 = sp
                .iter()
                .zip(&sq_)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / (h * w) as f64;
            expect += mse;
        }
        assert!(got > 0.0);
        assert!((got - expect).abs() < 1e-9, "{} vs {}", got, expect);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal() {
        let mut r = rng(4);
        for _ in 0..20 {
            let p = smooth_probmap::<f64>(4, 8, 8, &mut r);
            let q = smooth_probmap::<f64>(4, 8, 8, &mut r);
            let v = eval2(&p, &q, kl_distance);
            assert!(v >= -1e-12, "KL went negative: {}", v);
        }
        let p = smooth_probmap::<f64>(4, 8, 8, &mut r);
        let v = eval2(&p, &p, kl_distance);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn composite_with_zero_weight_equals_mse() {
        let mut r = rng(5);
        let p = smooth_probmap::<f64>(3, 12, 12, &mut r);
        let q = smooth_probmap::<f64>(3, 12, 12, &mut r);
        let cfg = DistanceConfig {
            variant: DistanceVariant::MseContour,
            contour_weight: 0.0,
        };
        let a = eval2(&p, &q, |g, x, y| composite_distance(g, x, y, &cfg));
        let b = eval2(&p, &q, mse_distance);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn composite_gradients_match_fd() {
        use crate::gradcheck::{check_gradients, FdSettings};
        let mut r = rng(6);
        let p = smooth_probmap::<f64>(3, 16, 16, &mut r);
        let q = smooth_probmap::<f64>(3, 16, 16, &mut r);
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
            let report = check_gradients(
                "composite",
                std::slice::from_ref(&q),
                move |g, vars| {
                    let pv = g.constant(p.clone());
                    composite_distance(g, pv, vars[0], &cfg)
                },
                &FdSettings::<f64>::recommended().with_tolerance(1e-4),
            )
            .unwrap();
            assert!(
                report.pass(),
                "{:?}: rel err {:.3e}",
                variant,
                report.rel_error
            );
        }
    }

    #[test]
    fn consistency_identity_chain_vanishes_for_photometric() {
        let mut r = rng(7);
        let x = smooth_image::<f64>(16, 16, &mut r);
        let predictor = TinyPredictor::<f64>::new(3, 4, &mut r);
        let chain = Chain::new(vec![TransformParams::Noise(NoiseParams {
            r: Tensor::zeros(&[1, 16, 16]),
            epsilon: 1.0,
        })])
        .unwrap();
        let v = consistency_loss(&x, &predictor, &chain, &DistanceConfig::default()).unwrap();
        assert!(v.abs() < 1e-10, "identity photometric chain: {}", v);
    }

    #[test]
    fn consistency_identity_geometric_chain_within_interpolation_tolerance() {
        let mut r = rng(8);
        let x = smooth_image::<f64>(16, 16, &mut r);
        let predictor = TinyPredictor::<f64>::new(3, 4, &mut r);
        let chain = Chain::new(vec![TransformParams::Affine(AffineParams {
            params: Tensor::zeros(&[5]),
            translate_bound: 0.1,
            rotate_bound: 15.0 / 180.0,
            scale_bound: 0.2,
        })])
        .unwrap();
        let v = consistency_loss(&x, &predictor, &chain, &DistanceConfig::default()).unwrap();
        assert!(v.abs() < 1e-6, "identity affine chain: {}", v);
    }

    #[test]
    fn consistency_constant_predictor_is_invariant() {
        let mut r = rng(9);
        let x = smooth_image::<f64>(16, 16, &mut r);
        let out = smooth_probmap::<f64>(3, 16, 16, &mut r);
        let predictor = ConstantPredictor { output: out };
        let table = ConstraintTable::default();
        let chain = Chain::new(vec![TransformParams::<f64>::random_init(
            FamilyKind::Noise,
            16,
            16,
            &table,
            &mut r,
        )])
        .unwrap();
        let v = consistency_loss(&x, &predictor, &chain, &DistanceConfig::default()).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn consistency_matches_manual_worked_form_for_affine_noise() {
        // chain [noise, affine]: R must equal D(p, T_affine⁻¹(p')) with
        // p' = f(T_affine(T_noise(x)))
        let mut r = rng(10);
        let x = smooth_image::<f64>(16, 16, &mut r);
        let predictor = TinyPredictor::<f64>::new(3, 4, &mut r);
        let table = ConstraintTable::default();
        let noise = TransformParams::<f64>::random_init(FamilyKind::Noise, 16, 16, &table, &mut r);
        let affine = TransformParams::<f64>::random_init(FamilyKind::Affine, 16, 16, &table, &mut r);
        let chain = Chain::new(vec![noise.clone(), affine.clone()]).unwrap();
        let cfg = DistanceConfig::default();
        let got = consistency_loss(&x, &predictor, &chain, &cfg).unwrap();

        // manual composition
        let p = predictor.predict(&x).unwrap();
        let x_noise = noise.apply_image_eager(&x).unwrap();
        let x_adv = affine.apply_image_eager(&x_noise).unwrap();
        let p_prime = predictor.predict(&x_adv).unwrap();
        let mut g = Graph::<f64>::new();
        let ppv = g.constant(p_prime);
        let av = affine.bind(&mut g, false);
        let pulled = affine.inverse_warp_probmap(&mut g, av, ppv).unwrap();
        let pv = g.constant(p);
        let manual = composite_distance(&mut g, pv, pulled, &cfg).unwrap();
        let manual = g.value(manual).item();
        assert!(
            (got - manual).abs() < 1e-9,
            "chain {} vs manual {}",
            got,
            manual
        );
    }

    #[test]
    fn consistency_invariant_to_extra_identity_geometric_member() {
        let mut r = rng(11);
        let x = smooth_image::<f64>(16, 16, &mut r);
        let predictor = TinyPredictor::<f64>::new(3, 4, &mut r);
        let table = ConstraintTable::default();
        let noise = TransformParams::<f64>::random_init(FamilyKind::Noise, 16, 16, &table, &mut r);
        let cfg = DistanceConfig::default();
        let base = Chain::new(vec![noise.clone()]).unwrap();
        let with_identity = Chain::new(vec![
            noise,
            TransformParams::Morph(MorphParams {
                v_low: Tensor::zeros(&[2, 2, 2]),
                epsilon: 1.5,
                downsample: 8,
                sigma: 1.0,
                squaring_steps: 8,
            }),
        ])
        .unwrap();
        let a = consistency_loss(&x, &predictor, &base, &cfg).unwrap();
        let b = consistency_loss(&x, &predictor, &with_identity, &cfg).unwrap();
        assert!((a - b).abs() < 1e-3, "{} vs {}", a, b);
    }

    #[test]
    fn consistency_gradients_reach_chain_members_through_predictor() {
        use crate::gradcheck::{check_gradients, FdSettings};
        let mut r = rng(12);
        let x = smooth_image::<f64>(16, 16, &mut r);
        let predictor = TinyPredictor::<f64>::new(3, 4, &mut r);
        let table = ConstraintTable {
            morph_squaring: 4,
            ..ConstraintTable::default()
        };
        let chain = Chain::new(vec![
            TransformParams::<f64>::random_init(FamilyKind::Bias, 16, 16, &table, &mut r),
            TransformParams::<f64>::random_init(FamilyKind::Affine, 16, 16, &table, &mut r),
            TransformParams::<f64>::random_init(FamilyKind::Morph, 16, 16, &table, &mut r),
        ])
        .unwrap();
        let original = predictor.predict(&x).unwrap();
        let leaves: Vec<_> = chain
            .members
            .iter()
            .map(|m| m.param_tensor().clone())
            .collect();
        let cfg = DistanceConfig::default();
        let report = check_gradients(
            "consistency_chain",
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
                let xv = g.constant(x.clone());
                let params = predictor.bind(g, false);
                consistency_loss_cached(g, &original, xv, &predictor, &params, &live, &bound, &cfg)
            },
            &FdSettings::composed(),
        )
        .unwrap();
        assert!(
            report.pass(),
            "consistency grads: rel err {:.3e} (tol {:.0e})",
            report.rel_error,
            report.tolerance
        );
    }

    #[test]
    fn supervised_loss_identities() {
        // near-one-hot perfect prediction
        let (h, w) = (8usize, 8usize);
        let labels: Vec<u8> = (0..h * w).map(|i| if i % w >= 4 { 1 } else { 0 }).collect();
        let eps = 1e-6;
        let perfect = Tensor::from_fn(&[2, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            if labels[p] as usize == c {
                1.0 - eps
            } else {
                eps
            }
        });
        let cfg = SupervisedLossConfig {
            class_weights: vec![0.5, 0.5],
            dice_smooth: 1e-5,
        };
        let mut g = Graph::<f64>::new();
        let pv = g.constant(perfect);
        let l = supervised_loss(&mut g, pv, &labels, &cfg).unwrap();
        assert!(g.value(l).item() < 1e-3);

        // uniform prediction, C = 2: CE term = mean weight × ln 2
        let uniform = Tensor::full(&[2, h, w], 0.5f64);
        let mut g = Graph::<f64>::new();
        let pv = g.constant(uniform);
        let wts = vec![0.25f64, 0.75];
        let ce = g.weighted_ce(pv, &labels, &wts).unwrap();
        let mean_w: f64 = labels.iter().map(|&l| wts[l as usize]).sum::<f64>() / (h * w) as f64;
        assert!((g.value(ce).item() - mean_w * 2.0f64.ln()).abs() < 1e-12);

        // all-background prediction against foreground labels: dice term ≈ 1
        let bg = Tensor::from_fn(&[2, h, w], |i| if i < h * w { 1.0 - 1e-9 } else { 1e-9 });
        let fg_labels = vec![1u8; h * w];
        let mut g = Graph::<f64>::new();
        let pv = g.constant(bg);
        let d = g.soft_dice(pv, &fg_labels, 1e-5).unwrap();
        assert!((g.value(d).item() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn supervised_loss_rejects_bad_labels() {
        let mut g = Graph::<f64>::new();
        let pv = g.constant(Tensor::full(&[2, 4, 4], 0.5));
        let bad = vec![3u8; 16];
        let cfg = SupervisedLossConfig::for_classes(2);
        assert!(supervised_loss(&mut g, pv, &bad, &cfg).is_err());
    }

    #[test]
    fn supervised_loss_descends_monotonically_under_gd() {
        // gradient descent on logits of a single fixed example
        let mut r = rng(13);
        let (h, w) = (8usize, 8usize);
        let labels: Vec<u8> = (0..h * w).map(|_| r.gen_range(0..3u8)).collect();
        let mut logits = Tensor::from_fn(&[3, h, w], |_| r.gen_range(-0.5..0.5));
        let cfg = SupervisedLossConfig::for_classes(3);
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let mut g = Graph::<f64>::new();
            let z = g.leaf(logits.clone(), true);
            let p = g.softmax(z).unwrap();
            let l = supervised_loss(&mut g, p, &labels, &cfg).unwrap();
            let v = g.value(l).item();
            assert!(v < prev + 1e-12, "step {}: {} !< {}", step, v, prev);
            prev = v;
            let grads = g.backward(l).unwrap();
            let gz = grads.get(z).unwrap();
            let lr = 0.5;
            logits = Tensor::new(
                logits.dims().to_vec(),
                logits
                    .data()
                    .iter()
                    .zip(gz.data())
                    .map(|(&a, &b)| a - lr * b)
                    .collect(),
            )
            .unwrap();
        }
    }

    #[test]
    fn dice_score_set_arithmetic() {
        let a = vec![1u8, 1, 1, 1, 0, 0, 0, 0];
        assert_eq!(dice_score(&a, &a, 1), 1.0);
        let b = vec![0u8, 0, 0, 0, 1, 1, 1, 1];
        assert_eq!(dice_score(&a, &b, 1), 0.0);
        // half-overlapping equal-size masks
        let c = vec![0u8, 0, 1, 1, 1, 1, 0, 0];
        let d = vec![1u8, 1, 1, 1, 0, 0, 0, 0];
        assert_eq!(dice_score(&c, &d, 1), 0.5);
        // both empty
        let e = vec![0u8; 8];
        assert_eq!(dice_score(&e, &e, 1), 1.0);
    }
}
