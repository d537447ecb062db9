//! Outer training loop: supervised pre-training with the default random
//! augmentation pipeline, then fine-tuning with the ramped consistency
//! regularizer over labeled and unlabeled pools, with an EMA shadow
//! maintained for evaluation.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::adversary::{regularizer_loss, AdversaryConfig, Strategy};
use crate::data::{default_random_augment, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{dice_score, supervised_loss, SupervisedLossConfig};
use crate::predictor::Predictor;
use crate::scalar::Scalar;
use crate::segnet::{Adam, EmaShadow, NetConfig, SegNet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Maximum consistency weight λ_max.
    pub lambda_max: f64,
    /// Epochs over which λ ramps linearly to λ_max.
    pub ramp_epochs: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// "none" for plain supervised training, otherwise an adversary strategy
    /// ("advchain", "advcomb", "randchain", "randsingle:<family>").
    pub strategy: String,
    pub adversary: AdversaryConfig,
    pub ema_decay: f64,
    pub classes: usize,
    pub base_width: usize,
    /// Cross-entropy class weights; derived from the class count when empty.
    pub class_weights: Vec<f64>,
    pub dice_smooth: f64,
    pub augment: AugmentConfig,
    /// Keep the default random pipeline active during fine-tuning.
    pub augment_in_finetune: bool,
    /// Validation cadence in epochs (0 = final epoch only).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_max: 1.0,
            ramp_epochs: 20,
            pretrain_epochs: 60,
            finetune_epochs: 40,
            lr_pretrain: 1e-3,
            lr_finetune: 1e-5,
            batch_size: 20,
            seed: 0,
            strategy: "advchain".to_string(),
            adversary: AdversaryConfig::default(),
            ema_decay: 0.999,
            classes: 4,
            base_width: 8,
            class_weights: Vec::new(),
            dice_smooth: 1e-5,
            augment: AugmentConfig::default(),
            augment_in_finetune: true,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn supervised_cfg(&self) -> SupervisedLossConfig {
        if self.class_weights.is_empty() {
            SupervisedLossConfig {
                dice_smooth: self.dice_smooth,
                ..SupervisedLossConfig::for_classes(self.classes)
            }
        } else {
            SupervisedLossConfig {
                class_weights: self.class_weights.clone(),
                dice_smooth: self.dice_smooth,
            }
        }
    }

    pub fn strategy_enum(&self) -> Result<Option<Strategy>> {
        if self.strategy == "none" {
            Ok(None)
        } else {
            Strategy::parse(&self.strategy).map(Some)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_pretrain <= 0.0 || self.lr_finetune <= 0.0 {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.lambda_max < 0.0 {
            return Err(Error::invalid("lambda_max must be nonnegative"));
        }
        self.strategy_enum()?;
        Ok(())
    }
}

/// λ(e) = min(λ_max, λ_max · e / e_ramp).
pub fn ramp_lambda(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.ramp_epochs == 0 {
        return cfg.lambda_max;
    }
    (cfg.lambda_max * epoch as f64 / cfg.ramp_epochs as f64).min(cfg.lambda_max)
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub phase: String,
    pub supervised_loss: f64,
    pub consistency_loss: f64,
    pub lambda: f64,
    /// Per-class validation Dice (None when a class never occurs in the
    /// validation ground truth, or when validation was skipped this epoch).
    pub val_dice: Vec<Option<f64>>,
    pub wall_secs: f64,
}

pub struct TrainOutcome<S: Scalar> {
    pub net: SegNet<S>,
    pub ema: EmaShadow<S>,
    pub reports: Vec<EpochReport>,
    /// Training hit non-finite numbers and was rolled back to the last good
    /// parameters.
    pub diverged: bool,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalReport {
    /// Mean Dice per class over images whose ground truth contains the class.
    pub per_class: Vec<Option<f64>>,
    /// Mean over foreground classes (ignoring empty ones).
    pub foreground_mean: f64,
}

/// Argmax labeling of a probability map.
pub fn argmax_labels<S: Scalar>(prob: &Tensor<S>) -> Vec<u8> {
    let (c, h, w) = prob.chw().unwrap();
    let d = prob.data();
    (0..h * w)
        .map(|p| {
            let mut best = 0usize;
            let mut bv = d[p];
            for ch in 1..c {
                let v = d[ch * h * w + p];
                if v > bv {
                    bv = v;
                    best = ch;
                }
            }
            best as u8
        })
        .collect()
}

/// Per-class mean Dice over a test set; images whose ground truth lacks a
/// class are excluded from that class's average.
pub fn evaluate<S: Scalar, P: Predictor<S>>(predictor: &P, set: &[Sample<S>]) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::invalid("evaluation needs a non-empty set"));
    }
    let c = predictor.classes();
    let mut sums = vec![0.0f64; c];
    let mut counts = vec![0usize; c];
    for sample in set {
        let prob = predictor.predict(&sample.image)?;
        let pred = argmax_labels(&prob);
        for class in 0..c {
            let present = sample.label.data.iter().any(|&l| l as usize == class);
            if present {
                sums[class] += dice_score(&pred, &sample.label.data, class as u8);
                counts[class] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|i| {
            if counts[i] > 0 {
                Some(sums[i] / counts[i] as f64)
            } else {
                None
            }
        })
        .collect();
    let fg: Vec<f64> = per_class.iter().skip(1).flatten().copied().collect();
    let foreground_mean = if fg.is_empty() {
        0.0
    } else {
        fg.iter().sum::<f64>() / fg.len() as f64
    };
    Ok(EvalReport {
        per_class,
        foreground_mean,
    })
}

fn train_batch_indices(
    rng: &mut ChaCha8Rng,
    labeled: usize,
    unlabeled: usize,
    batch: usize,
) -> (Vec<usize>, Vec<usize>) {
    // labeled and unlabeled drawn proportionally to pool sizes, with
    // replacement; at least one labeled item whenever labels exist
    if unlabeled == 0 {
        return ((0..batch).map(|_| rng.gen_range(0..labeled)).collect(), Vec::new());
    }
    let total = labeled + unlabeled;
    let n_lab = ((batch * labeled + total / 2) / total).clamp(1, batch);
    let lab = (0..n_lab).map(|_| rng.gen_range(0..labeled)).collect();
    let unlab = (0..batch - n_lab)
        .map(|_| rng.gen_range(0..unlabeled))
        .collect();
    (lab, unlab)
}

/// Two-phase training: supervised pre-training with the default random
/// pipeline, then fine-tuning with total loss L_s + λ(e)·R over
/// labeled ∪ unlabeled. Deterministic given the config seed.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    labeled: &[Sample<S>],
    unlabeled: &[Sample<S>],
    val: &[Sample<S>],
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::invalid("training needs at least one labeled sample"));
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
    let sup_cfg = cfg.supervised_cfg();
    let strategy = cfg.strategy_enum()?;
    let mut adv = cfg.adversary.clone();
    if let Some(s) = &strategy {
        adv.strategy = s.clone();
    }

    let mut net = SegNet::<S>::init(
        NetConfig {
            classes: cfg.classes,
            base_width: cfg.base_width,
        },
        cfg.seed,
    );
    let mut reports = Vec::new();
    let mut diverged = false;

    // ---------------- phase 1: supervised pre-training ----------------
    let mut opt = Adam::new(S::c(cfg.lr_pretrain));
    let batches_per_epoch = labeled.len().div_ceil(cfg.batch_size).max(1);
    let mut last_good = net.clone();
    'pretrain: for epoch in 0..cfg.pretrain_epochs {
        let t0 = Instant::now();
        let mut sup_sum = 0.0;
        for _ in 0..batches_per_epoch {
            let items: Vec<Sample<S>> = (0..cfg.batch_size)
                .map(|_| {
                    let idx = rng.gen_range(0..labeled.len());
                    default_random_augment(&labeled[idx], &cfg.augment, &mut rng)
                })
                .collect::<Result<_>>()?;
            let mut g = Graph::new();
            let params = net.bind(&mut g, true);
            let mut total = None;
            for item in &items {
                let xv = g.constant(item.image.clone());
                let pred = net.forward(&mut g, &params, xv)?;
                let l = supervised_loss(&mut g, pred, &item.label.data, &sup_cfg)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            let loss = g.scale(total.unwrap(), S::one() / S::c(items.len() as f64));
            let lv = g.value(loss).item().to_f64_lossy();
            if !lv.is_finite() {
                net = last_good.clone();
                diverged = true;
                break 'pretrain;
            }
            sup_sum += lv;
            let grads = g.backward(loss)?;
            let glist: Vec<Option<Tensor<S>>> =
                params.iter().map(|&p| grads.get(p).cloned()).collect();
            opt.step(net.params_mut(), &glist)?;
            if !net.all_finite() {
                net = last_good.clone();
                diverged = true;
                break 'pretrain;
            }
        }
        last_good = net.clone();
        let val_dice = maybe_validate(&net, val, cfg, epoch, cfg.pretrain_epochs)?;
        reports.push(EpochReport {
            epoch,
            phase: "pretrain".to_string(),
            supervised_loss: sup_sum / batches_per_epoch as f64,
            consistency_loss: 0.0,
            lambda: 0.0,
            val_dice,
            wall_secs: t0.elapsed().as_secs_f64(),
        });
    }

    // ---------------- phase 2: consistency fine-tuning ----------------
    let mut ema = EmaShadow::new(&net, S::c(cfg.ema_decay));
    let mut opt = Adam::new(S::c(cfg.lr_finetune));
    let pool = labeled.len() + unlabeled.len();
    let batches_per_epoch = pool.div_ceil(cfg.batch_size).max(1);
    let mut last_good = net.clone();
    'finetune: for epoch in 0..cfg.finetune_epochs {
        let t0 = Instant::now();
        let lambda = ramp_lambda(epoch, cfg);
        let mut sup_sum = 0.0;
        let mut cons_sum = 0.0;
        for _ in 0..batches_per_epoch {
            let (lab_idx, unlab_idx) =
                train_batch_indices(&mut rng, labeled.len(), unlabeled.len(), cfg.batch_size);
            let lab_items: Vec<Sample<S>> = lab_idx
                .iter()
                .map(|&i| {
                    if cfg.augment_in_finetune {
                        default_random_augment(&labeled[i], &cfg.augment, &mut rng)
                    } else {
                        Ok(labeled[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let unlab_items: Vec<Tensor<S>> = unlab_idx
                .iter()
                .map(|&i| {
                    if cfg.augment_in_finetune {
                        default_random_augment(&unlabeled[i], &cfg.augment, &mut rng)
                            .map(|s| s.image)
                    } else {
                        Ok(unlabeled[i].image.clone())
                    }
                })
                .collect::<Result<_>>()?;

            let mut g = Graph::new();
            let params = net.bind(&mut g, true);
            let mut sup_total = None;
            for item in &lab_items {
                let xv = g.constant(item.image.clone());
                let pred = net.forward(&mut g, &params, xv)?;
                let l = supervised_loss(&mut g, pred, &item.label.data, &sup_cfg)?;
                sup_total = Some(match sup_total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            let sup = g.scale(
                sup_total.unwrap(),
                S::one() / S::c(lab_items.len() as f64),
            );
            let mut loss = sup;
            let mut cons_value = 0.0;
            if strategy.is_some() && lambda > 0.0 {
                // consistency over every item in the batch, labeled and not
                let mut all_images: Vec<Tensor<S>> =
                    lab_items.iter().map(|s| s.image.clone()).collect();
                all_images.extend(unlab_items.iter().cloned());
                let reg = regularizer_loss(&mut g, &all_images, &net, &params, &adv, &mut rng)?;
                cons_value = g.value(reg.loss).item().to_f64_lossy();
                let weighted = g.scale(reg.loss, S::c(lambda));
                loss = g.add(loss, weighted)?;
            }
            let lv = g.value(loss).item().to_f64_lossy();
            if !lv.is_finite() {
                net = last_good.clone();
                diverged = true;
                break 'finetune;
            }
            sup_sum += g.value(sup).item().to_f64_lossy();
            cons_sum += cons_value;
            let grads = g.backward(loss)?;
            let glist: Vec<Option<Tensor<S>>> =
                params.iter().map(|&p| grads.get(p).cloned()).collect();
            opt.step(net.params_mut(), &glist)?;
            if !net.all_finite() {
                net = last_good.clone();
                diverged = true;
                break 'finetune;
            }
            ema.update(&net)?;
        }
        last_good = net.clone();
        let val_dice = maybe_validate(&net, val, cfg, epoch, cfg.finetune_epochs)?;
        reports.push(EpochReport {
            epoch,
            phase: "finetune".to_string(),
            supervised_loss: sup_sum / batches_per_epoch as f64,
            consistency_loss: cons_sum / batches_per_epoch as f64,
            lambda,
            val_dice,
            wall_secs: t0.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome {
        net,
        ema,
        reports,
        diverged,
    })
}

fn maybe_validate<S: Scalar>(
    net: &SegNet<S>,
    val: &[Sample<S>],
    cfg: &TrainConfig,
    epoch: usize,
    total_epochs: usize,
) -> Result<Vec<Option<f64>>> {
    let is_last = epoch + 1 == total_epochs;
    let due = cfg.eval_every > 0 && (epoch + 1).is_multiple_of(cfg.eval_every);
    if val.is_empty() || !(due || is_last) {
        return Ok(Vec::new());
    }
    Ok(evaluate(net, val)?.per_class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantoms, LabelMap, PhantomSpec, Split};
    use crate::predictor::ConstantPredictor;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            pretrain_epochs: 2,
            finetune_epochs: 2,
            ramp_epochs: 2,
            batch_size: 4,
            lr_pretrain: 1e-3,
            lr_finetune: 1e-4,
            classes: 4,
            base_width: 4,
            eval_every: 0,
            adversary: AdversaryConfig {
                constraints: crate::transforms::ConstraintTable {
                    morph_squaring: 4,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> Vec<Sample<f32>> {
        generate_phantoms::<f32>(
            &PhantomSpec {
                size: 32,
                ..PhantomSpec::default()
            },
            6,
            99,
        )
        .unwrap()
    }

    #[test]
    fn lambda_ramp_is_linear_capped_and_hits_max() {
        let cfg = TrainConfig {
            lambda_max: 1.0,
            ramp_epochs: 20,
            ..TrainConfig::default()
        };
        assert_eq!(ramp_lambda(0, &cfg), 0.0);
        assert_eq!(ramp_lambda(10, &cfg), 0.5);
        assert_eq!(ramp_lambda(20, &cfg), 1.0);
        assert_eq!(ramp_lambda(35, &cfg), 1.0);
        let mut prev = -1.0;
        for e in 0..40 {
            let l = ramp_lambda(e, &cfg);
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn standard_training_runs_and_reports() {
        let data = tiny_data();
        let cfg = TrainConfig {
            strategy: "none".to_string(),
            lambda_max: 0.0,
            ..tiny_cfg()
        };
        let out = train(&cfg, &data[..2], &[], &data[4..]).unwrap();
        assert!(!out.diverged);
        assert_eq!(out.reports.len(), 4);
        for r in &out.reports {
            assert_eq!(r.consistency_loss, 0.0);
            assert!(r.supervised_loss.is_finite());
        }
        // final epoch validated even with eval_every = 0
        assert!(!out.reports.last().unwrap().val_dice.is_empty());
    }

    #[test]
    fn empty_labeled_set_is_rejected() {
        let data = tiny_data();
        assert!(train(&tiny_cfg(), &[], &data, &[]).is_err());
    }

    #[test]
    fn semi_supervised_and_low_shot_paths_run() {
        let data = tiny_data();
        // M > 0
        let out = train(&tiny_cfg(), &data[..2], &data[2..4], &[]).unwrap();
        assert!(!out.diverged);
        let last = out.reports.last().unwrap();
        assert!(last.consistency_loss > 0.0, "regularizer never engaged");

        // M = 0 degrades to labeled-only consistency
        let out = train(&tiny_cfg(), &data[..2], &[], &[]).unwrap();
        assert!(!out.diverged);
        assert!(out.reports.last().unwrap().consistency_loss > 0.0);
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let a = train(&cfg, &data[..2], &data[2..4], &[]).unwrap();
        let b = train(&cfg, &data[..2], &data[2..4], &[]).unwrap();
        assert_eq!(a.net.fingerprint(), b.net.fingerprint());
        for (ra, rb) in a.reports.iter().zip(&b.reports) {
            assert_eq!(ra.supervised_loss, rb.supervised_loss);
            assert_eq!(ra.consistency_loss, rb.consistency_loss);
            assert_eq!(ra.lambda, rb.lambda);
        }
    }

    #[test]
    fn lambda_column_reaches_max_at_ramp_epoch() {
        let data = tiny_data();
        let cfg = TrainConfig {
            finetune_epochs: 4,
            ramp_epochs: 3,
            lambda_max: 1.0,
            ..tiny_cfg()
        };
        let out = train(&cfg, &data[..2], &[], &[]).unwrap();
        let lambdas: Vec<f64> = out
            .reports
            .iter()
            .filter(|r| r.phase == "finetune")
            .map(|r| r.lambda)
            .collect();
        assert_eq!(lambdas, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn evaluate_perfect_and_degenerate_predictors() {
        let data = tiny_data();
        let sample = &data[0];
        let (h, w) = (sample.label.h, sample.label.w);
        // one-hot oracle of this sample's own labels
        let onehot = Tensor::from_fn(&[4, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            if sample.label.data[p] as usize == c {
                1.0f32
            } else {
                0.0
            }
        });
        let oracle = ConstantPredictor { output: onehot };
        let report = evaluate(&oracle, std::slice::from_ref(sample)).unwrap();
        for d in report.per_class.iter().flatten() {
            assert!((d - 1.0).abs() < 1e-12);
        }
        assert!((report.foreground_mean - 1.0).abs() < 1e-12);

        // constant background prediction: foreground Dice 0
        let bg = Tensor::from_fn(&[4, h, w], |i| if i < h * w { 1.0f32 } else { 0.0 });
        let constant = ConstantPredictor { output: bg };
        let report = evaluate(&constant, std::slice::from_ref(sample)).unwrap();
        assert_eq!(report.foreground_mean, 0.0);
        for d in report.per_class.iter().skip(1).flatten() {
            assert_eq!(*d, 0.0);
        }
    }

    #[test]
    fn evaluate_matches_brute_force_counting() {
        let data = tiny_data();
        let net = SegNet::<f32>::init(
            NetConfig {
                classes: 4,
                base_width: 4,
            },
            5,
        );
        let report = evaluate(&net, &data).unwrap();
        // oracle: direct per-image set counting
        let mut sums = [0.0f64; 4];
        let mut counts = [0usize; 4];
        for s in &data {
            let pred = argmax_labels(&net.predict(&s.image).unwrap());
            for class in 0..4u8 {
                if s.label.data.contains(&class) {
                    let mut inter = 0usize;
                    let mut na = 0usize;
                    let mut nb = 0usize;
                    for (&p, &t) in pred.iter().zip(&s.label.data) {
                        na += (p == class) as usize;
                        nb += (t == class) as usize;
                        inter += (p == class && t == class) as usize;
                    }
                    let d = if na + nb == 0 {
                        1.0
                    } else {
                        2.0 * inter as f64 / (na + nb) as f64
                    };
                    sums[class as usize] += d;
                    counts[class as usize] += 1;
                }
            }
        }
        for c in 0..4 {
            let expect = if counts[c] > 0 {
                Some(sums[c] / counts[c] as f64)
            } else {
                None
            };
            assert_eq!(report.per_class[c], expect);
        }
    }

    #[test]
    fn frozen_adversary_contract_chains_unchanged_by_outer_step() {
        let data = tiny_data();
        let net = SegNet::<f32>::init(
            NetConfig {
                classes: 4,
                base_width: 4,
            },
            6,
        );
        let adv = AdversaryConfig {
            constraints: crate::transforms::ConstraintTable {
                morph_squaring: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::<f32>::new();
        let params = net.bind(&mut g, true);
        let images = vec![data[0].image.clone(), data[1].image.clone()];
        let out = regularizer_loss(&mut g, &images, &net, &params, &adv, &mut rng).unwrap();
        let fingerprints: Vec<String> = out
            .chains
            .iter()
            .map(|c| c.to_json().to_string())
            .collect();
        let grads = g.backward(out.loss).unwrap();
        let mut opt = Adam::new(1e-3f32);
        let mut net2 = net.clone();
        let glist: Vec<Option<Tensor<f32>>> =
            params.iter().map(|&p| grads.get(p).cloned()).collect();
        opt.step(net2.params_mut(), &glist).unwrap();
        // chain parameters are frozen values; the outer step cannot move them
        for (c, f) in out.chains.iter().zip(&fingerprints) {
            assert_eq!(&c.to_json().to_string(), f);
        }
        assert_ne!(net.fingerprint(), net2.fingerprint());
    }

    #[test]
    fn divergence_rolls_back_to_last_good_parameters() {
        let data = tiny_data();
        let cfg = TrainConfig {
            lr_pretrain: 1e10, // force blow-up
            pretrain_epochs: 3,
            finetune_epochs: 0,
            strategy: "none".to_string(),
            ..tiny_cfg()
        };
        let out = train(&cfg, &data[..2], &[], &[]).unwrap();
        assert!(out.diverged);
        assert!(out.net.all_finite());
    }

    #[test]
    fn label_map_utilities() {
        let lm = LabelMap::new(2, 2, vec![0, 1, 1, 3]).unwrap();
        assert_eq!(lm.classes_present(), vec![0, 1, 3]);
        assert!(LabelMap::new(2, 2, vec![0]).is_err());
        let _ = Split::Train;
    }
}
