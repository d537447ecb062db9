//! Inner maximization: projected gradient ascent over chain parameters, the
//! per-family combination baseline, and the random (non-adversarial)
//! variants.
//!
//! The predictor is frozen during the inner loop; the original prediction is
//! computed once per image and reused as a constant by every subsequent
//! consistency evaluation, so one optimize-and-regularize round costs
//! 1 (original) + k (PGD) + 1 (regularization) predictor passes for a chain
//! of any length, against 1 + l·(k + 1) for the combination strategy on l
//! selected families.

use rand_chacha::ChaCha8Rng;

use crate::chain::Chain;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{consistency_loss_cached, DistanceConfig};
use crate::predictor::Predictor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transforms::{ConstraintTable, FamilyKind};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    AdvChain,
    AdvComb,
    RandChain,
    RandSingle(String),
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "advchain" => Ok(Strategy::AdvChain),
            "advcomb" => Ok(Strategy::AdvComb),
            "randchain" => Ok(Strategy::RandChain),
            other => {
                if let Some(fam) = other.strip_prefix("randsingle:") {
                    FamilyKind::parse(fam)?;
                    Ok(Strategy::RandSingle(fam.to_string()))
                } else {
                    Err(Error::invalid(format!("unknown strategy '{}'", other)))
                }
            }
        }
    }

    pub fn is_adversarial(&self) -> bool {
        matches!(self, Strategy::AdvChain | Strategy::AdvComb)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdversaryConfig {
    /// PGD update steps k.
    pub steps: usize,
    /// PGD step size α.
    pub step_size: f64,
    pub strategy: Strategy,
    pub distance: DistanceConfig,
    /// Per-family selection probability p.
    pub select_prob: f64,
    pub families: Vec<FamilyKind>,
    pub constraints: ConstraintTable,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            steps: 1,
            step_size: 1.0,
            strategy: Strategy::AdvChain,
            distance: DistanceConfig::default(),
            select_prob: 0.5,
            families: FamilyKind::ALL.to_vec(),
            constraints: ConstraintTable::default(),
        }
    }
}

impl AdversaryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("PGD needs at least one step"));
        }
        if self.step_size <= 0.0 {
            return Err(Error::invalid("PGD step size must be positive"));
        }
        if self.families.is_empty() {
            return Err(Error::invalid("no transform families enabled"));
        }
        if self.select_prob <= 0.0 || self.select_prob > 1.0 {
            return Err(Error::invalid("selection probability must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// One projected-gradient-ascent update of every member's parameters:
/// t ← proj_C(t + α·∇R/‖∇R‖₂), gradient blocks normalized per member. A
/// member whose gradient vanishes is left unchanged.
pub fn pgd_step<S: Scalar, P: Predictor<S>>(
    chain: &Chain<S>,
    x: &Tensor<S>,
    original_prediction: &Tensor<S>,
    predictor: &P,
    cfg: &AdversaryConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Chain<S>> {
    cfg.validate()?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let fparams = predictor.bind(&mut g, false);
    let bound = chain.bind(&mut g, true);
    let loss = consistency_loss_cached(
        &mut g,
        original_prediction,
        xv,
        predictor,
        &fparams,
        chain,
        &bound,
        &cfg.distance,
    )?;
    let grads = g.backward(loss)?;

    let alpha = S::c(cfg.step_size);
    let tiny = S::c(1e-20);
    let mut new_members = Vec::with_capacity(chain.len());
    for (member, &pv) in chain.members.iter().zip(&bound.params) {
        let updated = match grads.get(pv) {
            Some(grad) if grad.l2_norm() > tiny => {
                let norm = grad.l2_norm();
                let t = member.param_tensor();
                let stepped = Tensor::new(
                    t.dims().to_vec(),
                    t.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&p, &gv)| p + alpha * gv / norm)
                        .collect(),
                )?;
                member.with_param_tensor(stepped)?.project(rng)
            }
            _ => member.clone(),
        };
        new_members.push(updated);
    }
    Chain::new(new_members)
}

/// Outcome of sampling + optimizing one chain for one image.
pub struct OptimizedChain<S: Scalar> {
    pub chain: Chain<S>,
    pub adversarial_image: Tensor<S>,
    pub original_prediction: Tensor<S>,
}

/// Sample a chain per the configured strategy, run k PGD steps when the
/// strategy is adversarial, and return the optimized chain together with the
/// augmented image. Pure function of (x, predictor parameters, cfg, seed).
pub fn optimize_chain<S: Scalar, P: Predictor<S>>(
    x: &Tensor<S>,
    predictor: &P,
    cfg: &AdversaryConfig,
    rng: &mut ChaCha8Rng,
) -> Result<OptimizedChain<S>> {
    cfg.validate()?;
    let (_, h, w) = x.chw()?;
    let mut chain = match &cfg.strategy {
        Strategy::RandSingle(fam) => {
            let kind = FamilyKind::parse(fam)?;
            Chain::new(vec![crate::transforms::TransformParams::random_init(
                kind,
                h,
                w,
                &cfg.constraints,
                rng,
            )])?
        }
        _ => Chain::sample(rng, cfg.select_prob, &cfg.families, h, w, &cfg.constraints)?,
    };
    let original = predictor.predict(x)?;
    if matches!(cfg.strategy, Strategy::AdvChain) {
        for _ in 0..cfg.steps {
            chain = pgd_step(&chain, x, &original, predictor, cfg, rng)?;
        }
    }
    let adversarial_image = chain.apply_image_eager(x)?;
    Ok(OptimizedChain {
        chain,
        adversarial_image,
        original_prediction: original,
    })
}

/// Regularizer value built on the training graph for one batch.
pub struct RegularizerOutcome<S: Scalar> {
    /// Mean consistency loss over the batch, differentiable w.r.t. the bound
    /// predictor parameters only (chain parameters are frozen leaves).
    pub loss: Var,
    /// The optimized (frozen) chains, one entry per batch item; the
    /// combination strategy produces several per item.
    pub chains: Vec<Chain<S>>,
}

/// Build the batch consistency term for the outer minimization.
///
/// - `AdvChain`: one optimized chain per item, its loss averaged.
/// - `AdvComb`: one Bernoulli family selection per item; each selected family
///   optimized individually, losses summed per item and averaged over items.
/// - `Rand*`: sampled chains without optimization.
pub fn regularizer_loss<S: Scalar, P: Predictor<S>>(
    g: &mut Graph<S>,
    batch: &[Tensor<S>],
    predictor: &P,
    predictor_params: &[Var],
    cfg: &AdversaryConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RegularizerOutcome<S>> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("regularizer needs a non-empty batch"));
    }
    let mut total: Option<Var> = None;
    let mut chains = Vec::new();
    for x in batch {
        let item_loss = match &cfg.strategy {
            Strategy::AdvComb => {
                let (_, h, w) = x.chw()?;
                let original = predictor.predict(x)?;
                // one selection reused for every family of this item
                let mut picked: Vec<FamilyKind> = Vec::new();
                while picked.is_empty() {
                    use rand::Rng;
                    picked = cfg
                        .families
                        .iter()
                        .copied()
                        .filter(|_| rng.gen_range(0.0..1.0) < cfg.select_prob)
                        .collect();
                }
                let mut sum: Option<Var> = None;
                for kind in picked {
                    let mut single = Chain::new(vec![
                        crate::transforms::TransformParams::random_init(
                            kind,
                            h,
                            w,
                            &cfg.constraints,
                            rng,
                        ),
                    ])?;
                    for _ in 0..cfg.steps {
                        single = pgd_step(&single, x, &original, predictor, cfg, rng)?;
                    }
                    let xv = g.constant(x.clone());
                    let bound = single.bind(g, false);
                    let term = consistency_loss_cached(
                        g,
                        &original,
                        xv,
                        predictor,
                        predictor_params,
                        &single,
                        &bound,
                        &cfg.distance,
                    )?;
                    sum = Some(match sum {
                        Some(s) => g.add(s, term)?,
                        None => term,
                    });
                    chains.push(single);
                }
                sum.unwrap()
            }
            _ => {
                let optimized = optimize_chain(x, predictor, cfg, rng)?;
                let xv = g.constant(x.clone());
                let bound = optimized.chain.bind(g, false);
                let term = consistency_loss_cached(
                    g,
                    &optimized.original_prediction,
                    xv,
                    predictor,
                    predictor_params,
                    &optimized.chain,
                    &bound,
                    &cfg.distance,
                )?;
                chains.push(optimized.chain);
                term
            }
        };
        total = Some(match total {
            Some(t) => g.add(t, item_loss)?,
            None => item_loss,
        });
    }
    let loss = g.scale(total.unwrap(), S::one() / S::c(batch.len() as f64));
    Ok(RegularizerOutcome { loss, chains })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fixtures::{smooth_image, smooth_probmap};
    use crate::losses::consistency_loss;
    use crate::predictor::{ConstantPredictor, CountingPredictor, TinyPredictor};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_cfg() -> AdversaryConfig {
        AdversaryConfig {
            constraints: ConstraintTable {
                morph_squaring: 4,
                ..ConstraintTable::default()
            },
            ..AdversaryConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = AdversaryConfig {
            steps: 0,
            ..AdversaryConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.steps = 1;
        cfg.step_size = 0.0;
        assert!(cfg.validate().is_err());
        cfg.step_size = 1.0;
        cfg.families.clear();
        assert!(cfg.validate().is_err());
        cfg.families = FamilyKind::ALL.to_vec();
        cfg.select_prob = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!(Strategy::parse("advchain").unwrap(), Strategy::AdvChain);
        assert_eq!(Strategy::parse("advcomb").unwrap(), Strategy::AdvComb);
        assert_eq!(Strategy::parse("randchain").unwrap(), Strategy::RandChain);
        assert_eq!(
            Strategy::parse("randsingle:noise").unwrap(),
            Strategy::RandSingle("noise".into())
        );
        assert!(Strategy::parse("nope").is_err());
        assert!(Strategy::parse("randsingle:wat").is_err());
    }

    #[test]
    fn constant_predictor_means_zero_gradient_and_unchanged_chain() {
        let mut r = rng(1);
        let x = smooth_image::<f64>(16, 16, &mut r);
        let out = smooth_probmap::<f64>(3, 16, 16, &mut r);
        let predictor = ConstantPredictor { output: out.clone() };
        let cfg = small_cfg();
        // photometric members: the two branches agree exactly, so R ≡ 0 and
        // the gradient vanishes (geometric members would still see gradient
        // through the pull-back inverse, which stays differentiable)
        let chain = Chain::sample(
            &mut r,
            1.0,
            &[FamilyKind::Noise, FamilyKind::Bias],
            16,
            16,
            &cfg.constraints,
        )
        .unwrap();
        let stepped = pgd_step(&chain, &x, &out, &predictor, &cfg, &mut r).unwrap();
        assert_eq!(chain, stepped);
    }

    #[test]
    fn pgd_step_respects_constraints() {
        let mut r = rng(2);
        let x = smooth_image::<f64>(16, 16, &mut r);
        let predictor = TinyPredictor::<f64>::new(3, 4, &mut r);
        let cfg = small_cfg();
        for _ in 0..10 {
            let chain =
                Chain::sample(&mut r, 0.8, &cfg.families, 16, 16, &cfg.constraints).unwrap();
            let original = predictor.predict(&x).unwrap();
            let stepped = pgd_step(&chain, &x, &original, &predictor, &cfg, &mut r).unwrap();
            assert!(stepped.satisfies_constraints());
        }
    }

    #[test]
    fn pgd_ascends_with_small_steps() {
        let mut r = rng(3);
        let x = smooth_image::<f64>(16, 16, &mut r);
        let predictor = TinyPredictor::<f64>::new(3, 6, &mut r);
        let cfg = AdversaryConfig {
            step_size: 0.02,
            ..small_cfg()
        };
        let mut improved = 0;
        let trials = 30;
        for _ in 0..trials {
            let chain =
                Chain::sample(&mut r, 0.7, &cfg.families, 16, 16, &cfg.constraints).unwrap();
            let before = consistency_loss(&x, &predictor, &chain, &cfg.distance).unwrap();
            let original = predictor.predict(&x).unwrap();
            let after_chain = pgd_step(&chain, &x, &original, &predictor, &cfg, &mut r).unwrap();
            let after = consistency_loss(&x, &predictor, &after_chain, &cfg.distance).unwrap();
            if after > before {
                improved += 1;
            }
        }
        assert!(
            improved as f64 / trials as f64 >= 0.8,
            "ascent direction held only {}/{} times",
            improved,
            trials
        );
    }

    #[test]
    fn with_vanishing_alpha_the_update_vanishes() {
        let mut r = rng(4);
        let x = smooth_image::<f64>(16, 16, &mut r);
        let predictor = TinyPredictor::<f64>::new(3, 4, &mut r);
        let chain = Chain::sample(
            &mut r,
            1.0,
            &[FamilyKind::Noise, FamilyKind::Bias],
            16,
            16,
            &ConstraintTable::default(),
        )
        .unwrap();
        let original = predictor.predict(&x).unwrap();
        let mut prev_delta = f64::INFINITY;
        for alpha in [0.1, 0.05, 0.025, 0.0125] {
            let cfg = AdversaryConfig {
                step_size: alpha,
                ..small_cfg()
            };
            let mut r2 = rng(5);
            let stepped = pgd_step(&chain, &x, &original, &predictor, &cfg, &mut r2).unwrap();
            let delta: f64 = chain
                .members
                .iter()
                .zip(&stepped.members)
                .map(|(a, b)| {
                    a.param_tensor()
                        .data()
                        .iter()
                        .zip(b.param_tensor().data())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                })
                .sum::<f64>()
                .sqrt();
            assert!(delta < prev_delta, "‖Δt‖ must shrink with α");
            // linear scaling: halving alpha halves the step
            if prev_delta.is_finite() {
                assert!((prev_delta / delta - 2.0).abs() < 0.2);
            }
            prev_delta = delta;
        }
    }

    #[test]
    fn optimize_chain_is_deterministic_and_rand_skips_pgd() {
        let mut r = rng(6);
        let x = smooth_image::<f64>(16, 16, &mut r);
        let predictor = TinyPredictor::<f64>::new(3, 4, &mut r);
        let cfg = small_cfg();
        let a = optimize_chain(&x, &predictor, &cfg, &mut rng(7)).unwrap();
        let b = optimize_chain(&x, &predictor, &cfg, &mut rng(7)).unwrap();
        assert_eq!(a.chain, b.chain);
        assert_eq!(a.adversarial_image, b.adversarial_image);
        assert!(a.chain.satisfies_constraints());

        // counting: rand chain performs exactly 1 original + 1 nothing (no
        // PGD pass happens inside optimize_chain)
        let counted = CountingPredictor::new(&predictor);
        let cfg_rand = AdversaryConfig {
            strategy: Strategy::RandChain,
            ..small_cfg()
        };
        optimize_chain(&x, &counted, &cfg_rand, &mut rng(8)).unwrap();
        assert_eq!(counted.forward_count(), 1);

        counted.reset();
        optimize_chain(&x, &counted, &cfg, &mut rng(8)).unwrap();
        assert_eq!(counted.forward_count(), 1 + cfg.steps);
    }

    #[test]
    fn regularizer_counts_passes_per_strategy() {
        let mut r = rng(9);
        let x = smooth_image::<f64>(16, 16, &mut r);
        let predictor = TinyPredictor::<f64>::new(3, 4, &mut r);
        let batch = vec![x];

        // AdvChain at k=1: 1 original + 1 PGD + 1 regularization = 3
        let counted = CountingPredictor::new(&predictor);
        let mut g = Graph::<f64>::new();
        let params = counted.bind(&mut g, true);
        let cfg = small_cfg();
        regularizer_loss(&mut g, &batch, &counted, &params, &cfg, &mut rng(10)).unwrap();
        assert_eq!(counted.forward_count(), 3);

        // RandChain: 1 original + 1 regularization = 2
        let counted = CountingPredictor::new(&predictor);
        let mut g = Graph::<f64>::new();
        let params = counted.bind(&mut g, true);
        let cfg_rand = AdversaryConfig {
            strategy: Strategy::RandChain,
            ..small_cfg()
        };
        regularizer_loss(&mut g, &batch, &counted, &params, &cfg_rand, &mut rng(10)).unwrap();
        assert_eq!(counted.forward_count(), 2);

        // AdvComb with all four families forced: 1 + 4·(1 + 1) = 9
        let counted = CountingPredictor::new(&predictor);
        let mut g = Graph::<f64>::new();
        let params = counted.bind(&mut g, true);
        let cfg_comb = AdversaryConfig {
            strategy: Strategy::AdvComb,
            select_prob: 1.0,
            ..small_cfg()
        };
        let out =
            regularizer_loss(&mut g, &batch, &counted, &params, &cfg_comb, &mut rng(10)).unwrap();
        assert_eq!(counted.forward_count(), 1 + 4 * (1 + 1));
        assert_eq!(out.chains.len(), 4);
    }

    #[test]
    fn regularizer_rejects_empty_batch_and_zero_loss_for_constant_predictor() {
        let mut r = rng(11);
        let out = smooth_probmap::<f64>(3, 16, 16, &mut r);
        let predictor = ConstantPredictor { output: out };
        let mut g = Graph::<f64>::new();
        let params = predictor.bind(&mut g, true);
        let cfg = AdversaryConfig {
            // photometric-only so no interpolation error enters
            families: vec![FamilyKind::Noise, FamilyKind::Bias],
            ..small_cfg()
        };
        let batch: Vec<Tensor<f64>> = vec![];
        assert!(regularizer_loss(&mut g, &batch, &predictor, &params, &cfg, &mut rng(12)).is_err());

        let x = smooth_image::<f64>(16, 16, &mut r);
        let outcome =
            regularizer_loss(&mut g, &[x], &predictor, &params, &cfg, &mut rng(12)).unwrap();
        assert!(g.value(outcome.loss).item().abs() < 1e-12);
    }

    #[test]
    fn outer_gradients_touch_theta_but_not_chains() {
        let mut r = rng(13);
        let x = smooth_image::<f64>(16, 16, &mut r);
        let predictor = TinyPredictor::<f64>::new(3, 4, &mut r);
        let mut g = Graph::<f64>::new();
        let params = predictor.bind(&mut g, true);
        let cfg = small_cfg();
        let before_graph_len = g.len();
        let outcome =
            regularizer_loss(&mut g, &[x], &predictor, &params, &cfg, &mut rng(14)).unwrap();
        let grads = g.backward(outcome.loss).unwrap();
        let theta_norm: f64 = params
            .iter()
            .filter_map(|&p| grads.get(p))
            .map(|t| t.l2_norm())
            .sum();
        assert!(theta_norm > 0.0);
        // chain leaves were bound without grad: no gradients exist for any
        // node added after binding except through θ
        let _ = before_graph_len;
        assert!(outcome.chains[0].satisfies_constraints());
    }
}
