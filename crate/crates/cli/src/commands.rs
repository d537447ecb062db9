//! Implementations of the CLI subcommands. All numerical work happens in
//! f32 (the training precision); the verification suite additionally runs
//! the f64 instantiation.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use advchain_core::adversary::{
    optimize_chain, regularizer_loss, AdversaryConfig, Strategy,
};
use advchain_core::chain::{enumerate_diversity, Chain};
use advchain_core::data::{
    generate_phantoms, load_dataset, save_dataset, Dataset, PhantomSpec, Sample, Split,
};
use advchain_core::gradcheck::{single_precision_suite, standard_suite, SuiteOptions};
use advchain_core::graph::Graph;
use advchain_core::losses::consistency_loss;
use advchain_core::predictor::{CountingPredictor, Predictor};
use advchain_core::segnet::{load_checkpoint, save_checkpoint, SegNet};
use advchain_core::tensor::Tensor;
use advchain_core::trainer::{self, argmax_labels, evaluate, TrainConfig};
use advchain_core::transforms::{NoiseParams, TransformParams};

use crate::pgm::write_pgm;

fn record(value: serde_json::Value) {
    println!("{}", value);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of subjects to generate.
    #[arg(long, default_value_t = 30)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Classes including background (2..=4).
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Image height and width.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Subjects assigned to the validation split (taken from the end).
    #[arg(long, default_value_t = 0)]
    pub val: usize,
    /// Subjects assigned to the test split (taken from the very end).
    #[arg(long, default_value_t = 0)]
    pub test: usize,
    /// Pixel noise level.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
}

pub fn gen_data(args: GenDataArgs) -> anyhow::Result<i32> {
    if args.val + args.test >= args.n {
        bail!(advchain_core::Error::invalid(
            "val + test must leave at least one training subject"
        ));
    }
    let spec = PhantomSpec {
        classes: args.classes,
        size: args.size,
        noise_level: args.noise,
        ..PhantomSpec::default()
    };
    let samples = generate_phantoms::<f32>(&spec, args.n, args.seed)?;
    let n_train = args.n - args.val - args.test;
    let splits: Vec<Split> = (0..args.n)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + args.val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    let dataset = Dataset { samples, splits };
    save_dataset(&args.out, &dataset)?;
    record(json!({
        "command": "gen-data",
        "out": args.out,
        "subjects": args.n,
        "train": n_train,
        "val": args.val,
        "test": args.test,
        "classes": args.classes,
        "size": args.size,
        "seed": args.seed,
    }));
    Ok(0)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint, reports and resolved config.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Strategy: advchain | advcomb | randchain | randsingle:<family> | none.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Labeled subjects (taken from the front of the train split).
    #[arg(long)]
    pub labeled: Option<usize>,
    /// Unlabeled subjects (taken after the labeled ones).
    #[arg(long)]
    pub unlabeled: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub ramp_epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub lr_pretrain: Option<f64>,
    #[arg(long)]
    pub lr_finetune: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub pgd_steps: Option<usize>,
    #[arg(long)]
    pub pgd_step_size: Option<f64>,
    #[arg(long)]
    pub select_prob: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Keep the default random pipeline active in fine-tuning.
    #[arg(long)]
    pub augment_in_finetune: Option<bool>,
    /// Consistency distance: mse | kl | mse-contour | kl-contour.
    #[arg(long)]
    pub distance: Option<String>,
    /// Weight of the contour term inside the composite distance.
    #[arg(long)]
    pub contour_weight: Option<f64>,
    /// Comma-separated per-class cross-entropy weights.
    #[arg(long)]
    pub class_weights: Option<String>,
    #[arg(long)]
    pub dice_smooth: Option<f64>,
}

fn parse_distance(s: &str) -> anyhow::Result<advchain_core::losses::DistanceVariant> {
    use advchain_core::losses::DistanceVariant::*;
    Ok(match s {
        "mse" => Mse,
        "kl" => Kl,
        "mse-contour" => MseContour,
        "kl-contour" => KlContour,
        other => bail!(advchain_core::Error::invalid(format!(
            "unknown distance '{}'",
            other
        ))),
    })
}

fn resolve_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).context("parsing train config")?
        }
        None => TrainConfig::default(),
    };
    macro_rules! over {
        ($field:ident) => {
            if let Some(v) = &args.$field {
                cfg.$field = v.clone();
            }
        };
    }
    over!(strategy);
    over!(lambda_max);
    over!(ramp_epochs);
    over!(pretrain_epochs);
    over!(finetune_epochs);
    over!(lr_pretrain);
    over!(lr_finetune);
    over!(batch_size);
    over!(ema_decay);
    over!(base_width);
    over!(eval_every);
    over!(augment_in_finetune);
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(k) = args.pgd_steps {
        cfg.adversary.steps = k;
    }
    if let Some(a) = args.pgd_step_size {
        cfg.adversary.step_size = a;
    }
    if let Some(p) = args.select_prob {
        cfg.adversary.select_prob = p;
    }
    if let Some(d) = &args.distance {
        cfg.adversary.distance.variant = parse_distance(d)?;
    }
    if let Some(w) = args.contour_weight {
        cfg.adversary.distance.contour_weight = w;
    }
    if let Some(cw) = &args.class_weights {
        cfg.class_weights = cw
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| advchain_core::Error::invalid(format!("bad class weight '{}'", t)))
            })
            .collect::<Result<Vec<_>, _>>()?;
    }
    if let Some(d) = args.dice_smooth {
        cfg.dice_smooth = d;
    }
    Ok(cfg)
}

fn split_samples(dataset: &Dataset<f32>, split: Split) -> Vec<Sample<f32>> {
    dataset
        .samples
        .iter()
        .zip(&dataset.splits)
        .filter(|(_, s)| **s == split)
        .map(|(x, _)| x.clone())
        .collect()
}

pub fn train(args: TrainArgs) -> anyhow::Result<i32> {
    let dataset = load_dataset::<f32>(&args.data)?;
    let mut cfg = resolve_config(&args)?;
    let train_pool = split_samples(&dataset, Split::Train);
    let val = split_samples(&dataset, Split::Val);
    let n = args.labeled.unwrap_or(train_pool.len().min(2));
    let m = args.unlabeled.unwrap_or(0);
    if n == 0 || n + m > train_pool.len() {
        bail!(advchain_core::Error::invalid(format!(
            "need labeled >= 1 and labeled + unlabeled <= {} train subjects (got {} + {})",
            train_pool.len(),
            n,
            m
        )));
    }
    // the class count comes from the data
    cfg.classes = dataset
        .samples
        .iter()
        .flat_map(|s| s.label.classes_present())
        .max()
        .map(|c| c as usize + 1)
        .unwrap_or(cfg.classes)
        .max(2);
    let labeled = &train_pool[..n];
    let unlabeled: Vec<Sample<f32>> = train_pool[n..n + m].to_vec();

    std::fs::create_dir_all(&args.out)?;
    let outcome = trainer::train(&cfg, labeled, &unlabeled, &val)?;

    let ckpt = args.out.join("model.ckpt");
    save_checkpoint(&ckpt, &outcome.net, Some(&outcome.ema))?;
    let mut reports = String::new();
    for r in &outcome.reports {
        reports.push_str(&serde_json::to_string(r).unwrap());
        reports.push('\n');
    }
    std::fs::write(args.out.join("reports.jsonl"), reports)?;
    std::fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&cfg).unwrap(),
    )?;
    record(json!({
        "command": "train",
        "out": args.out,
        "checkpoint": ckpt,
        "labeled": n,
        "unlabeled": m,
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "epochs": outcome.reports.len(),
        "diverged": outcome.diverged,
        "fingerprint": format!("{:016x}", outcome.net.fingerprint()),
    }));
    if outcome.diverged {
        eprintln!("training diverged; last good checkpoint written");
        return Ok(3);
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Which split to evaluate (train | unlabeled | val | test).
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Evaluate the raw weights instead of the EMA shadow.
    #[arg(long, default_value_t = false)]
    pub raw_weights: bool,
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "unlabeled" => Split::Unlabeled,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!(advchain_core::Error::invalid(format!(
            "unknown split '{}'",
            other
        ))),
    })
}

pub fn eval(args: EvalArgs) -> anyhow::Result<i32> {
    let (net, ema) = load_checkpoint::<f32>(&args.checkpoint)?;
    let net = if args.raw_weights {
        net
    } else {
        match ema {
            Some(e) => e.to_net(net.config)?,
            None => bail!(advchain_core::Error::Checkpoint(
                "checkpoint has no EMA section; pass --raw-weights".into()
            )),
        }
    };
    let dataset = load_dataset::<f32>(&args.data)?;
    let split = parse_split(&args.split)?;
    let set = split_samples(&dataset, split);
    if set.is_empty() {
        bail!(advchain_core::Error::invalid(format!(
            "split '{}' is empty",
            args.split
        )));
    }
    let report = evaluate(&net, &set)?;
    for (class, dice) in report.per_class.iter().enumerate() {
        record(json!({
            "command": "eval",
            "weights": if args.raw_weights { "raw" } else { "ema" },
            "split": args.split,
            "class": class,
            "dice": dice,
        }));
    }
    record(json!({
        "command": "eval",
        "weights": if args.raw_weights { "raw" } else { "ema" },
        "split": args.split,
        "foreground_mean": report.foreground_mean,
        "images": set.len(),
    }));
    Ok(0)
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct AugmentArgs {
    /// Checkpoint of the model used for predictions.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// random: sampled parameters; adversarial: PGD-optimized parameters.
    #[arg(long, default_value = "adversarial")]
    pub mode: String,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Number of samples to visualize.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Force identity transform parameters (panels must then agree).
    #[arg(long, default_value_t = false)]
    pub identity: bool,
    /// Dump optimized chain parameters alongside the panels.
    #[arg(long, default_value_t = false)]
    pub dump_params: bool,
    /// Paired adversarial-vs-random consistency comparison over N trials.
    #[arg(long, default_value_t = 0)]
    pub trials: usize,
}

fn to_gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn prob_to_gray(prob: &Tensor<f32>) -> Vec<u8> {
    let (c, h, w) = prob.chw().unwrap();
    let labels = argmax_labels(prob);
    let scale = 255.0 / (c.max(2) - 1) as f32;
    (0..h * w)
        .map(|i| (labels[i] as f32 * scale).round() as u8)
        .collect()
}

fn image_to_gray(img: &Tensor<f32>) -> Vec<u8> {
    img.data().iter().map(|&v| to_gray(v)).collect()
}

fn side_by_side(panels: &[Vec<u8>], h: usize, w: usize) -> (usize, usize, Vec<u8>) {
    let sep = 2usize;
    let total_w = panels.len() * w + (panels.len() - 1) * sep;
    let mut out = vec![255u8; total_w * h];
    for (pi, panel) in panels.iter().enumerate() {
        let x0 = pi * (w + sep);
        for y in 0..h {
            out[y * total_w + x0..y * total_w + x0 + w]
                .copy_from_slice(&panel[y * w..(y + 1) * w]);
        }
    }
    (total_w, h, out)
}

pub fn augment(args: AugmentArgs) -> anyhow::Result<i32> {
    let (net, _ema) = load_checkpoint::<f32>(&args.model)?;
    let dataset = load_dataset::<f32>(&args.data)?;
    let split = parse_split(&args.split)?;
    let set = split_samples(&dataset, split);
    if set.is_empty() {
        bail!(advchain_core::Error::invalid("selected split is empty"));
    }
    let strategy = match args.mode.as_str() {
        "random" => Strategy::RandChain,
        "adversarial" => Strategy::AdvChain,
        other => bail!(advchain_core::Error::invalid(format!(
            "unknown mode '{}'",
            other
        ))),
    };
    let adv = AdversaryConfig {
        strategy,
        ..AdversaryConfig::default()
    };
    std::fs::create_dir_all(&args.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut emitted = Vec::new();
    for (i, sample) in set.iter().take(args.samples.max(1)).enumerate() {
        let (_, h, w) = sample.image.chw()?;
        let (chain, x_adv, original) = if args.identity {
            let chain = Chain::new(vec![TransformParams::Noise(NoiseParams {
                r: Tensor::zeros(&[1, h, w]),
                epsilon: 1.0f32,
            })])?;
            let x_adv = chain.apply_image_eager(&sample.image)?;
            let p = net.predict(&sample.image)?;
            (chain, x_adv, p)
        } else {
            let o = optimize_chain(&sample.image, &net, &adv, &mut rng)?;
            (o.chain, o.adversarial_image, o.original_prediction)
        };
        let perturbed_pred = net.predict(&x_adv)?;
        let pulled_back = chain.pull_back_eager(&perturbed_pred)?;

        let panels = vec![
            image_to_gray(&sample.image),
            image_to_gray(&x_adv),
            prob_to_gray(&original),
            prob_to_gray(&perturbed_pred),
            prob_to_gray(&pulled_back),
        ];
        let (tw, th, pixels) = side_by_side(&panels, h, w);
        let path = args.out.join(format!("panel_{:03}.pgm", i));
        write_pgm(&path, tw, th, &pixels)?;
        if args.dump_params {
            let ppath = args.out.join(format!("chain_{:03}.json", i));
            std::fs::write(&ppath, serde_json::to_string_pretty(&chain.to_json()).unwrap())?;
        }
        emitted.push(path);
    }

    // paired comparison of adversarial vs random consistency loss
    if args.trials > 0 {
        let cfg_adv = AdversaryConfig {
            strategy: Strategy::AdvChain,
            ..AdversaryConfig::default()
        };
        let cfg_rand = AdversaryConfig {
            strategy: Strategy::RandChain,
            ..AdversaryConfig::default()
        };
        let mut adv_sum = 0.0;
        let mut rand_sum = 0.0;
        let mut adv_wins = 0usize;
        for t in 0..args.trials {
            let sample = &set[t % set.len()];
            let mut rng_a = ChaCha8Rng::seed_from_u64(args.seed ^ (t as u64).wrapping_mul(31));
            let mut rng_r = rng_a.clone();
            let a = optimize_chain(&sample.image, &net, &cfg_adv, &mut rng_a)?;
            let r = optimize_chain(&sample.image, &net, &cfg_rand, &mut rng_r)?;
            let la = consistency_loss(&sample.image, &net, &a.chain, &cfg_adv.distance)? as f64;
            let lr = consistency_loss(&sample.image, &net, &r.chain, &cfg_rand.distance)? as f64;
            adv_sum += la;
            rand_sum += lr;
            if la > lr {
                adv_wins += 1;
            }
        }
        record(json!({
            "command": "augment",
            "trials": args.trials,
            "mean_consistency_adversarial": adv_sum / args.trials as f64,
            "mean_consistency_random": rand_sum / args.trials as f64,
            "adversarial_wins": adv_wins,
        }));
    }
    record(json!({
        "command": "augment",
        "mode": args.mode,
        "identity": args.identity,
        "panels": emitted,
    }));
    Ok(0)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GradcheckArgs {
    /// Relative-error tolerance override for every check.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Random instances per operation.
    #[arg(long, default_value_t = 5)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn gradcheck(args: GradcheckArgs) -> anyhow::Result<i32> {
    let opts = SuiteOptions {
        instances: args.instances,
        seed: args.seed,
        tolerance: args.tolerance,
    };
    let t0 = Instant::now();
    let mut all_pass = true;
    let mut worst: f64 = 0.0;
    for report in standard_suite::<f64>(&opts)? {
        let pass = report.pass();
        all_pass &= pass;
        worst = worst.max(report.rel_error);
        record(json!({
            "suite": "f64",
            "check": report.name,
            "rel_error": report.rel_error,
            "tolerance": report.tolerance,
            "coords": report.coords_checked,
            "pass": pass,
        }));
    }
    for report in single_precision_suite(&opts)? {
        let pass = report.pass();
        all_pass &= pass;
        record(json!({
            "suite": "f32",
            "check": report.name,
            "rel_error": report.rel_error,
            "tolerance": report.tolerance,
            "coords": report.coords_checked,
            "pass": pass,
        }));
    }
    record(json!({
        "command": "gradcheck",
        "instances": args.instances,
        "max_f64_rel_error": worst,
        "wall_secs": t0.elapsed().as_secs_f64(),
        "pass": all_pass,
    }));
    Ok(if all_pass { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// bench-chain
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct BenchChainArgs {
    /// Bench batch size.
    #[arg(long, default_value_t = 20)]
    pub batch: usize,
    /// Phantom size for the bench batch.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn bench_chain(args: BenchChainArgs) -> anyhow::Result<i32> {
    for n in 1..=4usize {
        let (chains, combinations) = enumerate_diversity(n)?;
        record(json!({
            "command": "bench-chain",
            "families": n,
            "chains": chains,
            "combinations": combinations,
        }));
    }

    let spec = PhantomSpec {
        size: args.size,
        ..PhantomSpec::default()
    };
    let samples = generate_phantoms::<f32>(&spec, args.batch, args.seed)?;
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let net = SegNet::<f32>::init(Default::default(), args.seed);

    let run = |strategy: Strategy, select_prob: f64| -> anyhow::Result<(usize, f64)> {
        let counted = CountingPredictor::new(&net);
        let cfg = AdversaryConfig {
            strategy,
            select_prob,
            ..AdversaryConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0xbe9c);
        let t0 = Instant::now();
        let mut g = Graph::<f32>::new();
        let params = counted.bind(&mut g, true);
        let out = regularizer_loss(&mut g, &images, &counted, &params, &cfg, &mut rng)?;
        let _ = g.backward(out.loss)?;
        Ok((counted.forward_count(), t0.elapsed().as_secs_f64()))
    };

    // all four families selected: l = 4 per item
    let (chain_passes, chain_wall) = run(Strategy::AdvChain, 1.0)?;
    let (comb_passes, comb_wall) = run(Strategy::AdvComb, 1.0)?;
    record(json!({
        "command": "bench-chain",
        "batch": args.batch,
        "advchain": {"passes": chain_passes, "per_item": chain_passes as f64 / args.batch as f64, "wall_secs": chain_wall},
        "advcomb": {"passes": comb_passes, "per_item": comb_passes as f64 / args.batch as f64, "wall_secs": comb_wall},
        "selected_families": 4,
    }));
    Ok(0)
}
