//! Chains of transformations: random selection and ordering, forward
//! application, pull-back of perturbed predictions to original coordinates,
//! and enumeration of chain/combination diversity counts.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::transforms::{ConstraintTable, FamilyKind, TransformParams};

/// An ordered list of distinct transform families with live parameters.
/// Members apply left to right.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain<S> {
    pub members: Vec<TransformParams<S>>,
}

/// Graph leaves for every member of a chain, in chain order.
pub struct BoundChain {
    pub params: Vec<Var>,
}

impl<S: Scalar> Chain<S> {
    pub fn new(members: Vec<TransformParams<S>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("a chain needs at least one member"));
        }
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                if members[i].family() == members[j].family() {
                    return Err(Error::invalid(format!(
                        "family {} appears twice in chain",
                        members[i].family().name()
                    )));
                }
            }
        }
        Ok(Chain { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn families(&self) -> Vec<FamilyKind> {
        self.members.iter().map(|m| m.family()).collect()
    }

    pub fn has_geometric(&self) -> bool {
        self.members.iter().any(|m| m.is_geometric())
    }

    /// Select each allowed family independently with probability `p`, shuffle
    /// the selection into a random order and randomly initialize every
    /// member. An empty selection is resampled.
    pub fn sample(
        rng: &mut ChaCha8Rng,
        select_prob: f64,
        allowed: &[FamilyKind],
        h: usize,
        w: usize,
        table: &ConstraintTable,
    ) -> Result<Self> {
        if allowed.is_empty() {
            return Err(Error::invalid("no families to sample from"));
        }
        if select_prob <= 0.0 {
            return Err(Error::invalid("selection probability must be positive"));
        }
        let mut picked: Vec<FamilyKind> = Vec::new();
        while picked.is_empty() {
            picked = allowed
                .iter()
                .copied()
                .filter(|_| rng.gen_range(0.0..1.0) < select_prob)
                .collect();
        }
        picked.shuffle(rng);
        let members = picked
            .into_iter()
            .map(|k| TransformParams::random_init(k, h, w, table, rng))
            .collect();
        Chain::new(members)
    }

    /// Insert every member's parameter tensor as graph leaves.
    pub fn bind(&self, g: &mut Graph<S>, requires_grad: bool) -> BoundChain {
        BoundChain {
            params: self.members.iter().map(|m| m.bind(g, requires_grad)).collect(),
        }
    }

    /// Apply members left-to-right to an image.
    pub fn apply_image(&self, g: &mut Graph<S>, bound: &BoundChain, x: Var) -> Result<Var> {
        let mut cur = x;
        for (m, &p) in self.members.iter().zip(&bound.params) {
            cur = m.apply_image(g, p, cur)?;
        }
        if !g.value(cur).all_finite() {
            return Err(Error::Numerical("chain produced non-finite values".into()));
        }
        Ok(cur)
    }

    /// Warp a probability map through the chain's geometric members in chain
    /// order (photometric members act on intensities and are skipped).
    pub fn warp_probmap_forward(
        &self,
        g: &mut Graph<S>,
        bound: &BoundChain,
        p: Var,
    ) -> Result<Var> {
        let mut cur = p;
        for (m, &pv) in self.members.iter().zip(&bound.params) {
            if m.is_geometric() {
                cur = m.apply_probmap(g, pv, cur)?;
            }
        }
        Ok(cur)
    }

    /// Map a perturbed prediction back to original coordinates: inverses of
    /// the geometric members in reverse chain order, renormalizing the
    /// per-pixel distribution after each warp.
    pub fn pull_back(&self, g: &mut Graph<S>, bound: &BoundChain, p: Var) -> Result<Var> {
        let mut cur = p;
        for (m, &pv) in self.members.iter().zip(&bound.params).rev() {
            if m.is_geometric() {
                cur = m.inverse_warp_probmap(g, pv, cur)?;
            }
        }
        Ok(cur)
    }

    /// Eager forward application without gradient tracking.
    pub fn apply_image_eager(&self, x: &crate::tensor::Tensor<S>) -> Result<crate::tensor::Tensor<S>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let bound = self.bind(&mut g, false);
        let out = self.apply_image(&mut g, &bound, xv)?;
        Ok(g.value(out).clone())
    }

    /// Eager pull-back without gradient tracking.
    pub fn pull_back_eager(&self, p: &crate::tensor::Tensor<S>) -> Result<crate::tensor::Tensor<S>> {
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let bound = self.bind(&mut g, false);
        let out = self.pull_back(&mut g, &bound, pv)?;
        Ok(g.value(out).clone())
    }

    /// Project every member onto its constraint set.
    pub fn project(&self, rng: &mut ChaCha8Rng) -> Self {
        Chain {
            members: self.members.iter().map(|m| m.project(rng)).collect(),
        }
    }

    pub fn satisfies_constraints(&self) -> bool {
        self.members.iter().all(|m| m.satisfies_constraint())
    }

    /// Serialization: order field plus each member's document.
    pub fn to_json(&self) -> Value {
        json!({
            "order": self.families().iter().map(|f| f.name()).collect::<Vec<_>>(),
            "members": self.members.iter().map(|m| m.to_json()).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let members = v["members"]
            .as_array()
            .ok_or_else(|| Error::invalid("chain document missing members"))?
            .iter()
            .map(TransformParams::from_json)
            .collect::<Result<Vec<_>>>()?;
        Chain::new(members)
    }
}

/// Number of distinct non-empty ordered selections (chains) and unordered
/// selections (combinations) of `n` families, computed by explicit
/// enumeration and cross-checked against the closed forms
/// Σ n!/(n−k)! and Σ C(n,k).
pub fn enumerate_diversity(n_families: usize) -> Result<(u64, u64)> {
    if n_families == 0 || n_families > 8 {
        return Err(Error::invalid("enumerate_diversity expects 1..=8 families"));
    }
    // enumeration: walk all non-empty subsets; count each subset once for
    // combinations and once per permutation for chains
    let mut combinations = 0u64;
    let mut chains = 0u64;
    for mask in 1u32..(1 << n_families) {
        combinations += 1;
        let k = mask.count_ones() as u64;
        let mut perms = 1u64;
        for i in 2..=k {
            perms *= i;
        }
        chains += perms;
    }

    // closed forms
    let factorial = |m: u64| (1..=m).product::<u64>().max(1);
    let n = n_families as u64;
    let mut chains_formula = 0u64;
    let mut comb_formula = 0u64;
    for k in 1..=n {
        chains_formula += factorial(n) / factorial(n - k);
        comb_formula += factorial(n) / (factorial(k) * factorial(n - k));
    }
    debug_assert_eq!(chains, chains_formula);
    debug_assert_eq!(combinations, comb_formula);
    if chains != chains_formula || combinations != comb_formula {
        return Err(Error::Numerical(
            "diversity enumeration disagrees with closed form".into(),
        ));
    }
    Ok((chains, combinations))
}

/// Exact per-family inclusion probability conditioned on a non-empty
/// selection, computed by enumerating all subsets.
pub fn conditional_inclusion_probability(n_families: usize, p: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for mask in 1u32..(1 << n_families) {
        let k = mask.count_ones() as i32;
        let prob = p.powi(k) * (1.0 - p).powi(n_families as i32 - k);
        den += prob;
        if mask & 1 != 0 {
            num += prob;
        }
    }
    num / den
}
