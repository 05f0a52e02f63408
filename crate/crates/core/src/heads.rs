//! Prediction heads and the joint training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_linear, Bound, ParamStore};

/// Sensitive attributes with dedicated probe/adversary heads.
pub const ATTRIBUTES: [&str; 2] = ["race", "gender"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 2.0,
            lambda: 0.8,
            eta: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("eta", self.eta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Shapes of the heads. `groups[a]` is the group count of `ATTRIBUTES[a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsConfig {
    pub d: usize,
    pub classes: usize,
    pub hidden: bool,
    pub groups: Vec<usize>,
}

/// Classifier `head.c.*`, probes `probe.<attr>.*`, adversaries `adv.<attr>.*`.
#[derive(Debug, Clone)]
pub struct Heads {
    pub cfg: HeadsConfig,
}

impl Heads {
    pub fn init(cfg: HeadsConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if cfg.groups.len() != ATTRIBUTES.len() || cfg.groups.iter().any(|g| *g == 0) {
            return Err(Error::Config(format!("need a positive group count per attribute, got {:?}", cfg.groups)));
        }
        let d = cfg.d;
        if cfg.hidden {
            store.insert("head.c.w1", uniform_linear(d, d, rng));
            store.insert("head.c.b1", Tensor::zeros(&[d]));
        }
        store.insert("head.c.w", uniform_linear(d, cfg.classes, rng));
        store.insert("head.c.b", Tensor::zeros(&[cfg.classes]));
        for prefix in ["probe", "adv"] {
            for (attr, g) in ATTRIBUTES.iter().zip(&cfg.groups) {
                store.insert(&format!("{prefix}.{attr}.w"), uniform_linear(d, *g, rng));
                store.insert(&format!("{prefix}.{attr}.b"), Tensor::zeros(&[*g]));
            }
        }
        Ok(Self { cfg })
    }

    pub fn classify(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let mut h = z;
        if self.cfg.hidden {
            h = tape.matmul(h, bound.var("head.c.w1")?)?;
            h = tape.add(h, bound.var("head.c.b1")?)?;
            h = tape.relu(h)?;
        }
        linear(tape, bound, "head.c", h)
    }

    /// Probe logits for attribute `attr`. Unless `coupled`, the input is
    /// detached so the probe never trains the encoder.
    pub fn probe(&self, tape: &mut Tape, bound: &Bound, z: Var, attr: &str, coupled: bool) -> Result<Var> {
        let input = if coupled { z } else { tape.detach(z) };
        linear(tape, bound, &format!("probe.{attr}"), input)
    }

    /// Adversary logits; gradients reaching `z` are scaled by `-gamma`.
    pub fn adversary(&self, tape: &mut Tape, bound: &Bound, z: Var, attr: &str, gamma: f64) -> Result<Var> {
        let reversed = tape.gradient_reversal(z, gamma)?;
        linear(tape, bound, &format!("adv.{attr}"), reversed)
    }
}

fn linear(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, bound.var(&format!("{prefix}.w"))?)?;
    tape.add(h, bound.var(&format!("{prefix}.b"))?)
}

/// Loss components of one step. Absent terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub classification: Var,
    pub got: Option<Var>,
    pub probe: Option<Var>,
    pub confusion: Option<Var>,
    pub sparsity: Option<Var>,
}

/// Scalar values of each term, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_got: f64,
    pub l_s: f64,
    pub l_conf: f64,
    pub l_sparsity: f64,
    pub l_total: f64,
}

/// `L_c + α·L_GOT + β·L_s + 1[γ>0]·L_conf + η·L_sparsity`.
///
/// The confusion term enters positively: its sign flip and the `γ` scale
/// are applied once, inside the adversary's gradient reversal. Any
/// non-finite term aborts with its name.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let value = |tape: &Tape, v: Option<Var>| v.map(|v| tape.value(v).item()).unwrap_or(0.0);
    let mut out = LossBreakdown {
        l_c: tape.value(terms.classification).item(),
        l_got: value(tape, terms.got),
        l_s: value(tape, terms.probe),
        l_conf: value(tape, terms.confusion),
        l_sparsity: value(tape, terms.sparsity),
        l_total: 0.0,
    };
    for (name, v) in [
        ("L_c", out.l_c),
        ("L_GOT", out.l_got),
        ("L_s", out.l_s),
        ("L_conf", out.l_conf),
        ("L_sparsity", out.l_sparsity),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    let conf_weight = if w.gamma > 0.0 { 1.0 } else { 0.0 };
    let mut total = terms.classification;
    for (term, coef) in [
        (terms.got, w.alpha),
        (terms.probe, w.beta),
        (terms.confusion, conf_weight),
        (terms.sparsity, w.eta),
    ] {
        if let Some(t) = term {
            if coef != 0.0 {
                let scaled = tape.scale(t, coef)?;
                total = tape.add(total, scaled)?;
            }
        }
    }
    out.l_total = tape.value(total).item();
    Ok((total, out))
}

/// Mean over attributes of the cross-entropy of `logits[a]` against
/// `targets[a]`, optionally with per-row weights `weights[a]`.
pub fn mean_attribute_ce(tape: &mut Tape, logits: &[Var], targets: &[Vec<i64>], weights: Option<&[Vec<f64>]>) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (a, (l, t)) in logits.iter().zip(targets).enumerate() {
        let w = weights.map(|w| w[a].as_slice());
        let ce = tape.weighted_cross_entropy(*l, t, w, i64::MIN)?;
        acc = Some(match acc {
            None => ce,
            Some(a) => tape.add(a, ce)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::Usage("no attributes".into()))?;
    tape.scale(acc, 1.0 / logits.len() as f64)
}
