//! Define-by-run reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] is a tape of nodes; every operation evaluates eagerly and
//! records enough to run one backward pass. Graphs are cheap and rebuilt per
//! evaluation, which keeps higher-level code (PGD inner loops, training
//! steps, finite-difference checks) straightforward: perturb the leaf
//! tensors, rebuild, re-evaluate.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, S),
    AddScalar(Var, S),
    MaxScalar(Var, S),
    Exp(Var),
    Ln(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    SumChannels(Var),
    BroadcastChannels(Var, usize),
    ConcatChannels(Var, Var),
    SliceChannels(Var, usize, usize),
    BilinearSample(Var, Var),
    AffineMat(Var, bool),
    AffineGrid(Var, usize, usize),
    BSpline(Var),
    Gaussian(Var, S),
    Resize(Var),
    AvgPool2(Var),
    Conv2d(Var, Var, Var),
    Softmax(Var),
    Sobel(Var, usize),
    WeightedCe {
        pred: Var,
        labels: Vec<u8>,
        weights: Vec<S>,
    },
    SoftDice {
        pred: Var,
        labels: Vec<u8>,
        smooth: S,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Insert a leaf tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::shape(format!(
                "{}: {:?} vs {:?}",
                what,
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        Ok(())
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "sub")?;
        let v = Tensor::new(
            self.value(a).dims().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x - y)
                .collect(),
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let v = Tensor::new(
            self.value(a).dims().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "div")?;
        let v = Tensor::new(
            self.value(a).dims().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x / y)
                .collect(),
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let v = self.value(a).scale(k);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: S) -> Var {
        let v = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a, k), rg)
    }

    /// Elementwise max(x, k); gradient passes where x >= k.
    pub fn max_scalar(&mut self, a: Var, k: S) -> Var {
        let v = self.value(a).map(|x| if x > k { x } else { k });
        let rg = self.rg(a);
        self.push(v, Op::MaxScalar(a, k), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    // -- reductions / broadcasts --------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = stable_sum(self.value(a).data().iter().copied());
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = S::c(self.value(a).len() as f64);
        let s = stable_sum(self.value(a).data().iter().copied());
        let rg = self.rg(a);
        self.push(Tensor::scalar(s / n), Op::Mean(a), rg)
    }

    /// `[C,H,W]` -> `[1,H,W]` summing across channels.
    pub fn sum_channels(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        let d = self.value(a).data();
        let mut out = vec![S::zero(); h * w];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&d[ch * h * w..(ch + 1) * h * w]) {
                *o = *o + *v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![1, h, w], out)?,
            Op::SumChannels(a),
            rg,
        ))
    }

    /// `[1,H,W]` -> `[C,H,W]` by repetition.
    pub fn broadcast_channels(&mut self, a: Var, c: usize) -> Result<Var> {
        let (c1, h, w) = self.value(a).chw()?;
        if c1 != 1 {
            return Err(Error::shape("broadcast_channels expects [1,H,W]"));
        }
        let plane = self.value(a).data().to_vec();
        let mut out = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            out.extend_from_slice(&plane);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![c, h, w], out)?,
            Op::BroadcastChannels(a, c),
            rg,
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, h, w) = self.value(a).chw()?;
        let (cb, hb, wb) = self.value(b).chw()?;
        if (h, w) != (hb, wb) {
            return Err(Error::shape("concat_channels spatial mismatch"));
        }
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![ca + cb, h, w], data)?,
            Op::ConcatChannels(a, b),
            rg,
        ))
    }

    pub fn slice_channels(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        if from >= to || to > c {
            return Err(Error::invalid(format!(
                "slice_channels {}..{} of {}",
                from, to, c
            )));
        }
        let data = self.value(a).data()[from * h * w..to * h * w].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![to - from, h, w], data)?,
            Op::SliceChannels(a, from, to),
            rg,
        ))
    }

    // -- spatial -------------------------------------------------------------

    pub fn bilinear_sample(&mut self, input: Var, grid: Var) -> Result<Var> {
        let (_, h, w) = self.value(input).chw()?;
        let (gc, gh, gw) = self.value(grid).chw()?;
        if gc != 2 || gh != h || gw != w {
            return Err(Error::shape(format!(
                "bilinear_sample: grid {:?} does not match input {:?}",
                self.value(grid).dims(),
                self.value(input).dims()
            )));
        }
        let v = kernels::bilinear_forward(self.value(input), self.value(grid));
        let rg = self.rg(input) || self.rg(grid);
        Ok(self.push(v, Op::BilinearSample(input, grid), rg))
    }

    /// Five affine parameters `[5]` -> matrix rows `[6]` of T·R·S, or of
    /// S⁻¹·R⁻¹·T⁻¹ when `inverse`.
    pub fn affine_mat(&mut self, params: Var, inverse: bool) -> Result<Var> {
        if self.value(params).dims() != [5] {
            return Err(Error::shape("affine_mat expects [5] parameters"));
        }
        let m = kernels::affine_mat_forward(self.value(params).data(), inverse);
        let rg = self.rg(params);
        Ok(self.push(
            Tensor::new(vec![6], m.to_vec())?,
            Op::AffineMat(params, inverse),
            rg,
        ))
    }

    pub fn affine_grid(&mut self, mat: Var, h: usize, w: usize) -> Result<Var> {
        if self.value(mat).dims() != [6] {
            return Err(Error::shape("affine_grid expects [6] matrix rows"));
        }
        let v = kernels::affine_grid_forward(self.value(mat).data(), h, w);
        let rg = self.rg(mat);
        Ok(self.push(v, Op::AffineGrid(mat, h, w), rg))
    }

    pub fn bspline(&mut self, ctrl: Var, h: usize, w: usize) -> Result<Var> {
        let (c, b, b2) = self.value(ctrl).chw()?;
        if c != 1 || b != b2 {
            return Err(Error::shape("bspline expects [1,b,b] control lattice"));
        }
        if b < 4 {
            return Err(Error::invalid(format!(
                "bspline needs b >= 4 control points per axis, got {}",
                b
            )));
        }
        let v = kernels::bspline_forward(self.value(ctrl), h, w);
        let rg = self.rg(ctrl);
        Ok(self.push(v, Op::BSpline(ctrl), rg))
    }

    pub fn gaussian_smooth(&mut self, a: Var, sigma: S) -> Result<Var> {
        if sigma <= S::zero() {
            return Err(Error::invalid(format!("gaussian sigma must be > 0: {}", sigma)));
        }
        self.value(a).chw()?;
        let v = kernels::gaussian_forward(self.value(a), sigma);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Gaussian(a, sigma), rg))
    }

    pub fn resize_bilinear(&mut self, a: Var, ho: usize, wo: usize) -> Result<Var> {
        self.value(a).chw()?;
        let v = kernels::resize_forward(self.value(a), ho, wo);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Resize(a), rg))
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (_, h, w) = self.value(a).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("avg_pool2 needs even dims, got {}x{}", h, w)));
        }
        let v = kernels::avgpool2_forward(self.value(a));
        let rg = self.rg(a);
        Ok(self.push(v, Op::AvgPool2(a), rg))
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ci, _, _) = self.value(x).chw()?;
        let wd = self.value(weight).dims().to_vec();
        if wd.len() != 4 || wd[1] != ci || wd[2] != wd[3] || wd[2].is_multiple_of(2) {
            return Err(Error::shape(format!(
                "conv2d weight {:?} incompatible with input channels {}",
                wd, ci
            )));
        }
        if self.value(bias).dims() != [wd[0]] {
            return Err(Error::shape("conv2d bias must be [Cout]"));
        }
        let v = kernels::conv2d_forward(self.value(x), self.value(weight), self.value(bias));
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        Ok(self.push(v, Op::Conv2d(x, weight, bias), rg))
    }

    /// Channel softmax of `[C,H,W]` logits.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        let d = self.value(a).data();
        let mut out = vec![S::zero(); c * h * w];
        for p in 0..h * w {
            let mut mx = S::neg_infinity();
            for ch in 0..c {
                mx = mx.max(d[ch * h * w + p]);
            }
            let mut z = S::zero();
            for ch in 0..c {
                let e = (d[ch * h * w + p] - mx).exp();
                out[ch * h * w + p] = e;
                z = z + e;
            }
            for ch in 0..c {
                out[ch * h * w + p] = out[ch * h * w + p] / z;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::Softmax(a), rg))
    }

    pub fn sobel(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (_, h, w) = self.value(a).chw()?;
        if h < 3 || w < 3 {
            return Err(Error::shape(format!("sobel needs at least 3x3, got {}x{}", h, w)));
        }
        let v = kernels::sobel_forward(self.value(a), axis);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Sobel(a, axis), rg))
    }

    // -- losses over hard labels ----------------------------------------------

    /// Mean over pixels of  w[y]·(−ln p[y]); `pred` must be `[C,H,W]`
    /// probabilities.
    pub fn weighted_ce(&mut self, pred: Var, labels: &[u8], weights: &[S]) -> Result<Var> {
        let (c, h, w) = self.value(pred).chw()?;
        if labels.len() != h * w {
            return Err(Error::shape("weighted_ce: label size mismatch"));
        }
        if weights.len() != c {
            return Err(Error::shape("weighted_ce: weights must have C entries"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::invalid(format!(
                "weighted_ce: label {} out of range for {} classes",
                bad, c
            )));
        }
        let d = self.value(pred).data();
        let floor = S::c(1e-12);
        let mut acc = 0.0f64;
        for (p, &l) in labels.iter().enumerate() {
            let pv = d[l as usize * h * w + p].max(floor);
            acc -= (weights[l as usize] * pv.ln()).to_f64_lossy();
        }
        let acc = S::c(acc);
        let n = S::c((h * w) as f64);
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(acc / n),
            Op::WeightedCe {
                pred,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// 1 − mean over foreground classes of (2·|p∩y| + s) / (|p| + |y| + s).
    pub fn soft_dice(&mut self, pred: Var, labels: &[u8], smooth: S) -> Result<Var> {
        let (c, h, w) = self.value(pred).chw()?;
        if labels.len() != h * w {
            return Err(Error::shape("soft_dice: label size mismatch"));
        }
        if c < 2 {
            return Err(Error::invalid("soft_dice needs at least 2 classes"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::invalid(format!(
                "soft_dice: label {} out of range for {} classes",
                bad, c
            )));
        }
        let d = self.value(pred).data();
        let mut acc = 0.0f64;
        for ch in 1..c {
            let plane = &d[ch * h * w..(ch + 1) * h * w];
            let mut inter = 0.0f64;
            let mut psum = 0.0f64;
            let mut ysum = 0.0f64;
            for (p, &l) in labels.iter().enumerate() {
                psum += plane[p].to_f64_lossy();
                if l as usize == ch {
                    inter += plane[p].to_f64_lossy();
                    ysum += 1.0;
                }
            }
            acc += (2.0 * inter + smooth.to_f64_lossy()) / (psum + ysum + smooth.to_f64_lossy());
        }
        let acc = S::c(acc);
        let fg = S::c((c - 1) as f64);
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(S::one() - acc / fg),
            Op::SoftDice {
                pred,
                labels: labels.to_vec(),
                smooth,
            },
            rg,
        ))
    }

    // -- backward --------------------------------------------------------------

    /// Reverse pass from a scalar `[1]` node. Gradients accumulate only into
    /// nodes on a grad-requiring path.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward expects a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<S>>], v: Var, delta: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                let sum = g.add(&delta).expect("gradient shape mismatch");
                *g = sum;
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.scale(-S::one()));
            }
            Op::Mul(a, b) => {
                let ga = Tensor::new(
                    g.dims().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect(),
                )
                .unwrap();
                let gb = Tensor::new(
                    g.dims().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect(),
                )
                .unwrap();
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga = Tensor::new(
                    g.dims().to_vec(),
                    g.data().iter().zip(bv).map(|(&gv, &b_)| gv / b_).collect(),
                )
                .unwrap();
                let gb = Tensor::new(
                    g.dims().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&gv, (&a_, &b_))| -gv * a_ / (b_ * b_))
                        .collect(),
                )
                .unwrap();
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Scale(a, k) => self.accum(grads, *a, g.scale(*k)),
            Op::AddScalar(a, _) => self.accum(grads, *a, g.clone()),
            Op::MaxScalar(a, k) => {
                let mask = Tensor::new(
                    g.dims().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &av)| if av >= *k { gv } else { S::zero() })
                        .collect(),
                )
                .unwrap();
                self.accum(grads, *a, mask);
            }
            Op::Exp(a) => {
                let ga = Tensor::new(
                    g.dims().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(&gv, &yv)| gv * yv)
                        .collect(),
                )
                .unwrap();
                self.accum(grads, *a, ga);
            }
            Op::Ln(a) => {
                let ga = Tensor::new(
                    g.dims().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &av)| gv / av)
                        .collect(),
                )
                .unwrap();
                self.accum(grads, *a, ga);
            }
            Op::Silu(a) => {
                let ga = Tensor::new(
                    g.dims().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * s * (S::one() + xv * (S::one() - s))
                        })
                        .collect(),
                )
                .unwrap();
                self.accum(grads, *a, ga);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accum(grads, *a, Tensor::full(self.value(*a).dims(), gv));
            }
            Op::Mean(a) => {
                let n = S::c(self.value(*a).len() as f64);
                let gv = g.item() / n;
                self.accum(grads, *a, Tensor::full(self.value(*a).dims(), gv));
            }
            Op::SumChannels(a) => {
                let (c, h, w) = self.value(*a).chw().unwrap();
                let mut out = Vec::with_capacity(c * h * w);
                for _ in 0..c {
                    out.extend_from_slice(g.data());
                }
                self.accum(grads, *a, Tensor::new(vec![c, h, w], out).unwrap());
            }
            Op::BroadcastChannels(a, c) => {
                let (_, h, w) = self.value(*a).chw().unwrap();
                let mut out = vec![S::zero(); h * w];
                for ch in 0..*c {
                    for (o, v) in out.iter_mut().zip(&g.data()[ch * h * w..(ch + 1) * h * w]) {
                        *o = *o + *v;
                    }
                }
                self.accum(grads, *a, Tensor::new(vec![1, h, w], out).unwrap());
            }
            Op::ConcatChannels(a, b) => {
                let (ca, h, w) = self.value(*a).chw().unwrap();
                let ga = Tensor::new(vec![ca, h, w], g.data()[..ca * h * w].to_vec()).unwrap();
                let (cb, _, _) = self.value(*b).chw().unwrap();
                let gb = Tensor::new(vec![cb, h, w], g.data()[ca * h * w..].to_vec()).unwrap();
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::SliceChannels(a, from, to) => {
                let (c, h, w) = self.value(*a).chw().unwrap();
                let mut out = vec![S::zero(); c * h * w];
                out[from * h * w..to * h * w].copy_from_slice(g.data());
                self.accum(grads, *a, Tensor::new(vec![c, h, w], out).unwrap());
            }
            Op::BilinearSample(input, grid) => {
                let (gi, gg) = kernels::bilinear_backward(self.value(*input), self.value(*grid), g);
                self.accum(grads, *input, gi);
                self.accum(grads, *grid, gg);
            }
            Op::AffineMat(p, inverse) => {
                let gp = kernels::affine_mat_backward(self.value(*p).data(), *inverse, g.data());
                self.accum(grads, *p, Tensor::new(vec![5], gp.to_vec()).unwrap());
            }
            Op::AffineGrid(m, h, w) => {
                let gm = kernels::affine_grid_backward(g, *h, *w);
                self.accum(grads, *m, Tensor::new(vec![6], gm.to_vec()).unwrap());
            }
            Op::BSpline(ctrl) => {
                let (_, b, _) = self.value(*ctrl).chw().unwrap();
                self.accum(grads, *ctrl, kernels::bspline_backward(g, b));
            }
            Op::Gaussian(a, sigma) => {
                self.accum(grads, *a, kernels::gaussian_backward(g, *sigma));
            }
            Op::Resize(a) => {
                let (_, hi, wi) = self.value(*a).chw().unwrap();
                self.accum(grads, *a, kernels::resize_backward(g, hi, wi));
            }
            Op::AvgPool2(a) => {
                let (_, h, w) = self.value(*a).chw().unwrap();
                self.accum(grads, *a, kernels::avgpool2_backward(g, h, w));
            }
            Op::Conv2d(x, wt, b) => {
                let (gx, gw, gb) = kernels::conv2d_backward(self.value(*x), self.value(*wt), g);
                self.accum(grads, *x, gx);
                self.accum(grads, *wt, gw);
                self.accum(grads, *b, gb);
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let (c, h, w) = self.nodes[i].value.chw().unwrap();
                let gd = g.data();
                let mut out = vec![S::zero(); c * h * w];
                for p in 0..h * w {
                    let mut dot = S::zero();
                    for ch in 0..c {
                        dot = dot + gd[ch * h * w + p] * y[ch * h * w + p];
                    }
                    for ch in 0..c {
                        out[ch * h * w + p] = y[ch * h * w + p] * (gd[ch * h * w + p] - dot);
                    }
                }
                self.accum(grads, *a, Tensor::new(vec![c, h, w], out).unwrap());
            }
            Op::Sobel(a, axis) => {
                self.accum(grads, *a, kernels::sobel_backward(g, *axis));
            }
            Op::WeightedCe {
                pred,
                labels,
                weights,
            } => {
                let (c, h, w) = self.value(*pred).chw().unwrap();
                let d = self.value(*pred).data();
                let floor = S::c(1e-12);
                let n = S::c((h * w) as f64);
                let gs = g.item();
                let mut out = vec![S::zero(); c * h * w];
                for (p, &l) in labels.iter().enumerate() {
                    let ch = l as usize;
                    let pv = d[ch * h * w + p];
                    if pv > floor {
                        out[ch * h * w + p] = -gs * weights[ch] / (pv * n);
                    }
                }
                self.accum(grads, *pred, Tensor::new(vec![c, h, w], out).unwrap());
            }
            Op::SoftDice {
                pred,
                labels,
                smooth,
            } => {
                let (c, h, w) = self.value(*pred).chw().unwrap();
                let d = self.value(*pred).data();
                let gs = g.item();
                let fg = S::c((c - 1) as f64);
                let mut out = vec![S::zero(); c * h * w];
                for ch in 1..c {
                    let plane = &d[ch * h * w..(ch + 1) * h * w];
                    let mut inter = S::zero();
                    let mut psum = S::zero();
                    let mut ysum = S::zero();
                    for (p, &l) in labels.iter().enumerate() {
                        psum = psum + plane[p];
                        if l as usize == ch {
                            inter = inter + plane[p];
                            ysum = ysum + S::one();
                        }
                    }
                    let num = S::c(2.0) * inter + *smooth;
                    let den = psum + ysum + *smooth;
                    for (p, &l) in labels.iter().enumerate() {
                        let y = if l as usize == ch { S::one() } else { S::zero() };
                        // d(1 - num/den)/dp = -(2·y·den - num) / den²  (scaled by 1/|fg|)
                        out[ch * h * w + p] =
                            -gs * (S::c(2.0) * y * den - num) / (den * den * fg);
                    }
                }
                self.accum(grads, *pred, Tensor::new(vec![c, h, w], out).unwrap());
            }
        }
    }
}

/// Sum with an f64 accumulator: keeps scalar reductions stable in f32 so
/// loss values are reproducible to near per-element rounding.
#[inline]
fn stable_sum<S: Scalar>(v: impl Iterator<Item = S>) -> S {
    S::c(v.map(|x| x.to_f64_lossy()).sum::<f64>())
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_scalar<F: FnMut(&[f64]) -> f64>(x: &[f64], mut f: F, i: usize, h: f64) -> f64 {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    #[test]
    fn mul_exp_mean_gradients_match_fd() {
        let a0 = vec![0.3, -0.2, 0.7, 1.1];
        let b0 = vec![0.5, 0.25, -0.4, 0.9];
        let eval = |av: &[f64], bv: &[f64]| -> f64 {
            let mut g = Graph::<f64>::new();
            let a = g.leaf(Tensor::new(vec![1, 2, 2], av.to_vec()).unwrap(), true);
            let b = g.leaf(Tensor::new(vec![1, 2, 2], bv.to_vec()).unwrap(), true);
            let m = g.mul(a, b).unwrap();
            let e = g.exp(m);
            let l = g.mean(e);
            g.value(l).item()
        };
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![1, 2, 2], a0.clone()).unwrap(), true);
        let b = g.leaf(Tensor::new(vec![1, 2, 2], b0.clone()).unwrap(), true);
        let m = g.mul(a, b).unwrap();
        let e = g.exp(m);
        let l = g.mean(e);
        let grads = g.backward(l).unwrap();
        let ga = grads.get(a).unwrap();
        for i in 0..4 {
            let fd = fd_scalar(&a0, |av| eval(av, &b0), i, 1e-6);
            assert!(
                (ga.data()[i] - fd).abs() < 1e-8,
                "grad mismatch at {}: {} vs {}",
                i,
                ga.data()[i],
                fd
            );
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_matches_fd() {
        let x0 = vec![0.1, -0.4, 0.8, 0.2, 0.05, -0.6];
        let eval = |xv: &[f64]| -> f64 {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::new(vec![3, 1, 2], xv.to_vec()).unwrap(), true);
            let y = g.softmax(x).unwrap();
            // weighted sum picks out asymmetric structure
            let wts = Tensor::from_fn(&[3, 1, 2], |i| (i as f64) * 0.3 - 0.5);
            let w = g.constant(wts);
            let m = g.mul(y, w).unwrap();
            let l = g.sum(m);
            g.value(l).item()
        };
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3, 1, 2], x0.clone()).unwrap(), true);
        let y = g.softmax(x).unwrap();
        let yv = g.value(y);
        for p in 0..2 {
            let s: f64 = (0..3).map(|c| yv.data()[c * 2 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let wts = Tensor::from_fn(&[3, 1, 2], |i| (i as f64) * 0.3 - 0.5);
        let w = g.constant(wts);
        let m = g.mul(y, w).unwrap();
        let l = g.sum(m);
        let grads = g.backward(l).unwrap();
        let gx = grads.get(x).unwrap();
        for i in 0..6 {
            let fd = fd_scalar(&x0, &eval, i, 1e-6);
            assert!((gx.data()[i] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[1, 2, 2]), true);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn no_grad_leaves_are_skipped() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full(&[1, 2, 2], 2.0), false);
        let b = g.leaf(Tensor::full(&[1, 2, 2], 3.0), true);
        let m = g.mul(a, b).unwrap();
        let l = g.sum(m);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }
}
