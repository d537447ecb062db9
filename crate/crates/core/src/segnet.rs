//! Compact trainable encoder-decoder segmentation network with a softmax
//! head, an Adam optimizer, an exponential-moving-average shadow copy and a
//! bit-exact checkpoint format.
//!
//! The network is deliberately small (two pooling stages, ~10k parameters at
//! the default width): CPU training in minutes, with the gradient contract
//! enforced by the finite-difference suite rather than network size.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::predictor::Predictor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<S> {
    pub name: String,
    pub tensor: Tensor<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub classes: usize,
    pub base_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            classes: 4,
            base_width: 8,
        }
    }
}

/// Encoder-decoder predictor: two 2× poolings, skip connections by channel
/// concatenation, SiLU activations, softmax over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet<S> {
    pub config: NetConfig,
    params: Vec<NamedTensor<S>>,
}

fn conv_spec(classes: usize, w: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("enc1.weight", vec![w, 1, 3, 3]),
        ("enc1.bias", vec![w]),
        ("enc2.weight", vec![2 * w, w, 3, 3]),
        ("enc2.bias", vec![2 * w]),
        ("bottleneck.weight", vec![2 * w, 2 * w, 3, 3]),
        ("bottleneck.bias", vec![2 * w]),
        ("dec2.weight", vec![2 * w, 4 * w, 3, 3]),
        ("dec2.bias", vec![2 * w]),
        ("dec1.weight", vec![w, 3 * w, 3, 3]),
        ("dec1.bias", vec![w]),
        ("head.weight", vec![classes, w, 1, 1]),
        ("head.bias", vec![classes]),
    ]
}

impl<S: Scalar> SegNet<S> {
    pub fn init(config: NetConfig, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = conv_spec(config.classes, config.base_width)
            .into_iter()
            .map(|(name, dims)| {
                let tensor = if dims.len() == 4 {
                    let fan_in = dims[1] * dims[2] * dims[3];
                    let mut std = (2.0 / fan_in as f64).sqrt();
                    if name.starts_with("head") {
                        // keep initial logits small so fresh outputs are
                        // near-uniform
                        std *= 0.2;
                    }
                    Tensor::from_fn(&dims, |_| {
                        S::c(rng.sample::<f64, _>(StandardNormal) * std)
                    })
                } else {
                    Tensor::zeros(&dims)
                };
                NamedTensor {
                    name: name.to_string(),
                    tensor,
                }
            })
            .collect();
        SegNet { config, params }
    }

    pub fn params(&self) -> &[NamedTensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<S>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn from_params(config: NetConfig, params: Vec<NamedTensor<S>>) -> Result<Self> {
        let spec = conv_spec(config.classes, config.base_width);
        if params.len() != spec.len() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        for (p, (name, dims)) in params.iter().zip(&spec) {
            if p.name != *name || p.tensor.dims() != dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has unexpected shape {:?}",
                    p.name,
                    p.tensor.dims()
                )));
            }
        }
        Ok(SegNet { config, params })
    }

    /// FNV-1a fingerprint of all parameter bytes (frozen-state assertions
    /// and bit-identical-run checks).
    pub fn fingerprint(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        let mut buf = Vec::new();
        for p in &self.params {
            for v in p.tensor.data() {
                v.write_le(&mut buf);
            }
        }
        for b in buf {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.all_finite())
    }
}

impl<S: Scalar> Predictor<S> for SegNet<S> {
    fn classes(&self) -> usize {
        self.config.classes
    }

    fn bind(&self, g: &mut Graph<S>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.tensor.clone(), requires_grad))
            .collect()
    }

    fn forward(&self, g: &mut Graph<S>, params: &[Var], x: Var) -> Result<Var> {
        let (c, h, w) = g.value(x).chw()?;
        if c != 1 {
            return Err(Error::shape("segnet expects a single-channel image"));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "input {}x{} not divisible by 4 (two pooling stages)",
                h, w
            )));
        }
        let e1 = {
            let c1 = g.conv2d(x, params[0], params[1])?;
            g.silu(c1)
        };
        let p1 = g.avg_pool2(e1)?;
        let e2 = {
            let c2 = g.conv2d(p1, params[2], params[3])?;
            g.silu(c2)
        };
        let p2 = g.avg_pool2(e2)?;
        let b = {
            let cb = g.conv2d(p2, params[4], params[5])?;
            g.silu(cb)
        };
        let u2 = g.resize_bilinear(b, h / 2, w / 2)?;
        let cat2 = g.concat_channels(u2, e2)?;
        let d2 = {
            let cd = g.conv2d(cat2, params[6], params[7])?;
            g.silu(cd)
        };
        let u1 = g.resize_bilinear(d2, h, w)?;
        let cat1 = g.concat_channels(u1, e1)?;
        let d1 = {
            let cd = g.conv2d(cat1, params[8], params[9])?;
            g.silu(cd)
        };
        let logits = g.conv2d(d1, params[10], params[11])?;
        g.softmax(logits)
    }
}

/// Adam with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Self {
        Adam {
            lr,
            beta1: S::c(0.9),
            beta2: S::c(0.999),
            eps: S::c(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over the parameter list; `grads[i] = None` means zero
    /// gradient for that tensor.
    pub fn step(
        &mut self,
        params: &mut [NamedTensor<S>],
        grads: &[Option<Tensor<S>>],
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid("gradient list does not match parameters"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.tensor.dims())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.tensor.dims())).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let zero;
            let grad = match &grads[i] {
                Some(gt) => gt,
                None => {
                    zero = Tensor::zeros(p.tensor.dims());
                    &zero
                }
            };
            if !grad.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for {}",
                    p.name
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((pv, gv), (mv, vv)) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (S::one() - self.beta1) * *gv;
                *vv = self.beta2 * *vv + (S::one() - self.beta2) * *gv * *gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv = *pv - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Exponential-moving-average copy of the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaShadow<S> {
    pub decay: S,
    shadow: Vec<NamedTensor<S>>,
}

impl<S: Scalar> EmaShadow<S> {
    pub fn new(net: &SegNet<S>, decay: S) -> Self {
        EmaShadow {
            decay,
            shadow: net.params().to_vec(),
        }
    }

    /// shadow ← decay·shadow + (1−decay)·θ
    pub fn update(&mut self, net: &SegNet<S>) -> Result<()> {
        if self.shadow.len() != net.params().len() {
            return Err(Error::shape("shadow/parameter list mismatch"));
        }
        for (s, p) in self.shadow.iter_mut().zip(net.params()) {
            if s.tensor.dims() != p.tensor.dims() {
                return Err(Error::shape(format!("shadow shape mismatch for {}", s.name)));
            }
            for (sv, pv) in s.tensor.data_mut().iter_mut().zip(p.tensor.data()) {
                *sv = self.decay * *sv + (S::one() - self.decay) * *pv;
            }
        }
        Ok(())
    }

    pub fn params(&self) -> &[NamedTensor<S>] {
        &self.shadow
    }

    /// Materialize a network using the shadow parameters.
    pub fn to_net(&self, config: NetConfig) -> Result<SegNet<S>> {
        SegNet::from_params(config, self.shadow.clone())
    }

    pub fn max_distance_to(&self, net: &SegNet<S>) -> S {
        let mut d = S::zero();
        for (s, p) in self.shadow.iter().zip(net.params()) {
            for (sv, pv) in s.tensor.data().iter().zip(p.tensor.data()) {
                d = d.max((*sv - *pv).abs());
            }
        }
        d
    }
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: one file, text manifest followed by a raw parameter blob.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &str = "ADVCHAIN-CKPT1";

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    dtype: String,
    endian: String,
    config: NetConfig,
    ema_decay: Option<f64>,
    model: Vec<TensorEntry>,
    ema: Vec<TensorEntry>,
    blob_len: usize,
}

/// Write network (and optional EMA shadow) to `path`; bit-exact round trip.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    net: &SegNet<S>,
    ema: Option<&EmaShadow<S>>,
) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let describe = |list: &[NamedTensor<S>], blob: &mut Vec<u8>| -> Vec<TensorEntry> {
        list.iter()
            .map(|p| {
                let offset = blob.len();
                for v in p.tensor.data() {
                    v.write_le(blob);
                }
                TensorEntry {
                    name: p.name.clone(),
                    dims: p.tensor.dims().to_vec(),
                    offset,
                    len: p.tensor.len(),
                }
            })
            .collect()
    };
    let model = describe(net.params(), &mut blob);
    let ema_entries = match ema {
        Some(e) => describe(e.params(), &mut blob),
        None => Vec::new(),
    };
    let manifest = Manifest {
        dtype: S::DTYPE.to_string(),
        endian: "little".to_string(),
        config: net.config,
        ema_decay: ema.map(|e| e.decay.to_f64_lossy()),
        model,
        ema: ema_entries,
        blob_len: blob.len(),
    };
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", CKPT_MAGIC)?;
    writeln!(f, "{}", serde_json::to_string(&manifest).unwrap())?;
    f.write_all(&blob)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(SegNet<S>, Option<EmaShadow<S>>)> {
    let f = std::fs::File::open(path)?;
    let mut reader = BufReader::new(f);
    let mut magic = String::new();
    reader.read_line(&mut magic)?;
    if magic.trim_end() != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic.trim_end(),
            CKPT_MAGIC
        )));
    }
    let mut manifest_line = String::new();
    reader.read_line(&mut manifest_line)?;
    let manifest: Manifest = serde_json::from_str(manifest_line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {}", e)))?;
    if manifest.dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {} but runtime expects {}",
            manifest.dtype,
            S::DTYPE
        )));
    }
    if manifest.endian != "little" {
        return Err(Error::Checkpoint("unsupported endianness".into()));
    }
    let mut blob = Vec::new();
    reader.read_to_end(&mut blob)?;
    if blob.len() != manifest.blob_len {
        return Err(Error::Checkpoint(format!(
            "blob truncated: {} bytes of {}",
            blob.len(),
            manifest.blob_len
        )));
    }
    let read_list = |entries: &[TensorEntry]| -> Result<Vec<NamedTensor<S>>> {
        entries
            .iter()
            .map(|e| {
                let bytes = e.len * S::BYTES;
                let start = e.offset;
                if start + bytes > blob.len() {
                    return Err(Error::Checkpoint(format!("entry {} out of range", e.name)));
                }
                let data: Vec<S> = (0..e.len)
                    .map(|i| S::read_le(&blob[start + i * S::BYTES..]))
                    .collect();
                Ok(NamedTensor {
                    name: e.name.clone(),
                    tensor: Tensor::new(e.dims.clone(), data)?,
                })
            })
            .collect()
    };
    let net = SegNet::from_params(manifest.config, read_list(&manifest.model)?)?;
    let ema = if manifest.ema.is_empty() {
        None
    } else {
        Some(EmaShadow {
            decay: S::c(manifest.ema_decay.unwrap_or(0.999)),
            shadow: read_list(&manifest.ema)?,
        })
    };
    Ok((net, ema))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fixtures::smooth_image;
    use crate::losses::{supervised_loss, SupervisedLossConfig};
    use rand::SeedableRng;

    #[test]
    fn predict_outputs_simplex_and_rejects_bad_shapes() {
        let net = SegNet::<f64>::init(NetConfig::default(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = smooth_image::<f64>(16, 16, &mut rng);
        let out = net.predict(&x).unwrap();
        assert_eq!(out.dims(), &[4, 16, 16]);
        for p in 0..256 {
            let s: f64 = (0..4).map(|c| out.data()[c * 256 + p]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }

        let odd = Tensor::full(&[1, 10, 10], 0.5);
        assert!(net.predict(&odd).is_err());
    }

    #[test]
    fn fresh_nets_output_near_uniform_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..20 {
            let net = SegNet::<f64>::init(NetConfig::default(), seed);
            let x = smooth_image::<f64>(16, 16, &mut rng);
            let out = net.predict(&x).unwrap();
            for v in out.data() {
                assert!(
                    (*v - 0.25).abs() < 0.2,
                    "seed {}: class prob {} strays from uniform",
                    seed,
                    v
                );
            }
        }
    }

    #[test]
    fn parameter_count_stays_compact() {
        let net = SegNet::<f64>::init(NetConfig::default(), 0);
        assert!(net.param_count() < 100_000, "{} params", net.param_count());
    }

    #[test]
    fn full_backprop_matches_fd_on_sampled_parameters() {
        use crate::gradcheck::{check_gradients, FdSettings};
        let net = SegNet::<f64>::init(
            NetConfig {
                classes: 2,
                base_width: 4,
            },
            3,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = smooth_image::<f64>(16, 16, &mut rng);
        let labels: Vec<u8> = (0..256).map(|i| (i % 7 == 0) as u8).collect();
        let cfg = SupervisedLossConfig::for_classes(2);
        let leaves: Vec<Tensor<f64>> = net.params().iter().map(|p| p.tensor.clone()).collect();
        let settings = FdSettings::<f64> {
            max_coords: 20,
            ..FdSettings::recommended()
        };
        let netc = net.clone();
        let report = check_gradients(
            "segnet_theta",
            &leaves,
            move |g, vars| {
                let xv = g.constant(x.clone());
                let out = netc.forward(g, vars, xv)?;
                supervised_loss(g, out, &labels, &cfg)
            },
            &settings,
        )
        .unwrap();
        assert!(report.pass(), "theta grads rel err {:.3e}", report.rel_error);
    }

    #[test]
    fn input_gradient_matches_fd() {
        use crate::gradcheck::{check_gradients, FdSettings};
        let net = SegNet::<f64>::init(
            NetConfig {
                classes: 3,
                base_width: 4,
            },
            5,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = smooth_image::<f64>(16, 16, &mut rng);
        let netc = net.clone();
        let report = check_gradients(
            "segnet_input",
            &[x],
            move |g, vars| {
                let params = netc.bind(g, false);
                let out = netc.forward(g, &params, vars[0])?;
                // mean of one output channel exposes input sensitivity
                let ch = g.slice_channels(out, 1, 2)?;
                Ok(g.mean(ch))
            },
            &FdSettings::recommended(),
        )
        .unwrap();
        assert!(report.pass(), "input grads rel err {:.3e}", report.rel_error);
    }

    #[test]
    fn adam_zero_or_scaled_updates() {
        let mut net = SegNet::<f64>::init(NetConfig::default(), 8);
        let before = net.fingerprint();
        let grads: Vec<Option<Tensor<f64>>> = net.params().iter().map(|_| None).collect();
        let mut opt = Adam::new(1e-3);
        opt.step(net.params_mut(), &grads).unwrap();
        assert_eq!(net.fingerprint(), before, "zero gradient moved parameters");

        // lr = 0 leaves parameters unchanged even with gradients
        let mut opt = Adam::new(0.0);
        let grads: Vec<Option<Tensor<f64>>> = net
            .params()
            .iter()
            .map(|p| Some(Tensor::full(p.tensor.dims(), 0.1)))
            .collect();
        opt.step(net.params_mut(), &grads).unwrap();
        assert_eq!(net.fingerprint(), before);
    }

    #[test]
    fn overfit_one_example_halves_the_loss() {
        let mut net = SegNet::<f64>::init(NetConfig::default(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = smooth_image::<f64>(16, 16, &mut rng);
        let labels: Vec<u8> = (0..256)
            .map(|i| {
                let (y, xx) = (i / 16, i % 16);
                match ((4..12).contains(&y), (4..12).contains(&xx)) {
                    (true, true) => 1,
                    (true, false) => 2,
                    (false, true) => 3,
                    (false, false) => 0,
                }
            })
            .collect();
        let cfg = SupervisedLossConfig::for_classes(4);
        let mut opt = Adam::new(1e-2);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let mut g = Graph::<f64>::new();
            let params = net.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let out = net.forward(&mut g, &params, xv).unwrap();
            let loss = supervised_loss(&mut g, out, &labels, &cfg).unwrap();
            last = g.value(loss).item();
            first.get_or_insert(last);
            let grads = g.backward(loss).unwrap();
            let glist: Vec<Option<Tensor<f64>>> =
                params.iter().map(|&p| grads.get(p).cloned()).collect();
            opt.step(net.params_mut(), &glist).unwrap();
        }
        let first = first.unwrap();
        assert!(
            first / last > 2.0,
            "loss {} -> {} did not halve",
            first,
            last
        );
        assert!(net.all_finite());

        // translation-consistency sanity: soft property, logged not asserted
        let shift = 2usize;
        let shifted = Tensor::from_fn(&[1, 16, 16], |i| {
            let (y, xx) = (i / 16, i % 16);
            x.data()[y * 16 + (xx + 16 - shift) % 16]
        });
        let base = net.predict(&x).unwrap();
        let moved = net.predict(&shifted).unwrap();
        let argmax = |t: &Tensor<f64>| -> Vec<u8> {
            (0..256)
                .map(|p| {
                    (0..4)
                        .max_by(|&a, &b| {
                            t.data()[a * 256 + p]
                                .partial_cmp(&t.data()[b * 256 + p])
                                .unwrap()
                        })
                        .unwrap() as u8
                })
                .collect()
        };
        let base_l = argmax(&base);
        let shifted_back: Vec<u8> = (0..256)
            .map(|i| {
                let (y, xx) = (i / 16, i % 16);
                let src = y * 16 + (xx + 16 - shift) % 16;
                base_l[src]
            })
            .collect();
        let dice = crate::losses::dice_score(&argmax(&moved), &shifted_back, 1);
        println!("translation-consistency dice (soft check): {:.3}", dice);
    }

    #[test]
    fn ema_updates_follow_decay_geometry() {
        let net = SegNet::<f64>::init(NetConfig::default(), 11);
        let other = SegNet::<f64>::init(NetConfig::default(), 12);

        let mut ema = EmaShadow::new(&other, 0.0);
        ema.update(&net).unwrap();
        assert!(ema.max_distance_to(&net) == 0.0, "decay 0 must copy θ");

        let mut ema = EmaShadow::new(&other, 1.0);
        ema.update(&net).unwrap();
        let frozen = other.params()[0].tensor.clone();
        assert_eq!(ema.params()[0].tensor, frozen, "decay 1 must never change");

        // constant θ: distance shrinks by decayⁿ
        let mut ema = EmaShadow::new(&other, 0.9);
        let d0 = ema.max_distance_to(&net);
        for _ in 0..10 {
            ema.update(&net).unwrap();
        }
        let d10 = ema.max_distance_to(&net);
        let expect = d0 * 0.9f64.powi(10);
        assert!(
            (d10 - expect).abs() / expect < 1e-9,
            "{} vs {}",
            d10,
            expect
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("advchain_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let net = SegNet::<f32>::init(NetConfig::default(), 13);
        let mut ema = EmaShadow::new(&net, 0.999f32);
        let other = SegNet::<f32>::init(NetConfig::default(), 14);
        ema.update(&other).unwrap();
        save_checkpoint(&path, &net, Some(&ema)).unwrap();
        let (net2, ema2) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(net.fingerprint(), net2.fingerprint());
        assert_eq!(ema.params(), ema2.as_ref().unwrap().params());

        // dtype mismatch is refused
        assert!(load_checkpoint::<f64>(&path).is_err());

        // truncation is detected
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());

        // corrupt magic is refused
        std::fs::write(&path, b"NOTACKPT\n{}\n").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn gradients_flow_into_both_chain_and_theta() {
        use crate::chain::Chain;
        use crate::losses::{consistency_loss_cached, DistanceConfig};
        use crate::transforms::{ConstraintTable, FamilyKind, TransformParams};
        let net = SegNet::<f64>::init(
            NetConfig {
                classes: 3,
                base_width: 4,
            },
            15,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = smooth_image::<f64>(16, 16, &mut rng);
        let table = ConstraintTable {
            morph_squaring: 4,
            ..ConstraintTable::default()
        };
        let chain = Chain::new(vec![
            TransformParams::<f64>::random_init(FamilyKind::Noise, 16, 16, &table, &mut rng),
            TransformParams::<f64>::random_init(FamilyKind::Affine, 16, 16, &table, &mut rng),
        ])
        .unwrap();
        let original = net.predict(&x).unwrap();

        let mut g = Graph::<f64>::new();
        let params = net.bind(&mut g, true);
        let bound = chain.bind(&mut g, true);
        let xv = g.constant(x);
        let loss = consistency_loss_cached(
            &mut g,
            &original,
            xv,
            &net,
            &params,
            &chain,
            &bound,
            &DistanceConfig::default(),
        )
        .unwrap();
        let grads = g.backward(loss).unwrap();
        for &p in &bound.params {
            let gp = grads.get(p).expect("chain member missing gradient");
            assert!(gp.l2_norm() > 0.0);
        }
        let theta_norm: f64 = params
            .iter()
            .filter_map(|&p| grads.get(p))
            .map(|t| t.l2_norm())
            .sum();
        assert!(theta_norm > 0.0, "no gradient reached θ");
    }
}
