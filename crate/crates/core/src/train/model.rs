//! The full network: encoder, label embeddings, mask and heads.

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::UNCERTAIN;
use crate::embed::{LabelEmbeddings, PatchEncoder, BINARY_LABELS};
use crate::error::Result;
use crate::got::{cost_matrix, got_loss, sinkhorn_cost, GotConfig, GroupBatch, PatchMarginal, NORM_FLOOR};
use crate::heads::{mean_attribute_ce, total_loss, Heads, HeadsConfig, LossBreakdown, LossTerms, LossWeights, ATTRIBUTES};
use crate::params::{Bound, ParamStore};
use crate::rng;
use crate::stride::{init_mask, mask_sparsity_penalty, mask_var, relevance_scores, stride_select, StrideConfig};

use super::config::TrainConfig;

/// Floor added to stride weights before they serve as transport marginals.
const MARGINAL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: PatchEncoder,
    pub heads: Heads,
    pub num_labels: usize,
}

/// One mini-batch in tensor form.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, P, patch²]`.
    pub patches: Tensor,
    pub y: Vec<i64>,
    pub race: Vec<usize>,
    pub gender: Vec<usize>,
    /// Per-attribute row weights for the adversary loss.
    pub adv_weights: Option<Vec<Vec<f64>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Alignment-solver diagnostics of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GotDiagnostics {
    pub iterations: usize,
    pub unconverged: usize,
    pub max_violation: f64,
    pub transport: f64,
    pub single_group: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub got: Option<GotDiagnostics>,
}

/// Inference outputs for a batch.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub weights: Var,
    pub pooled: Var,
    pub ep: Var,
    pub el: Var,
}

impl Model {
    /// Registers every parameter in a fixed order from the `init` stream,
    /// regardless of mode, so runs that differ only in loss weights start
    /// from identical parameters.
    pub fn init(cfg: &TrainConfig, groups: [usize; 2], labels: &LabelEmbeddings) -> Result<(Self, ParamStore)> {
        let mut rng = rng::stream(cfg.seed, "init");
        let mut store = ParamStore::new();
        let encoder = PatchEncoder::init(cfg.encoder(), &mut store, &mut rng)?;
        labels.register(cfg.d, &mut store, &mut rng);
        init_mask(cfg.encoder().num_patches(), labels.len(), &mut store);
        let heads = Heads::init(
            HeadsConfig {
                d: cfg.d,
                classes: 2,
                hidden: cfg.hidden,
                groups: groups.to_vec(),
            },
            &mut store,
            &mut rng,
        )?;
        Ok((
            Self {
                encoder,
                heads,
                num_labels: labels.len(),
            },
            store,
        ))
    }

    /// Rebuilds the structure for a stored parameter set.
    pub fn from_store(cfg: &TrainConfig, store: &ParamStore) -> Result<Self> {
        let groups: Vec<usize> = ATTRIBUTES
            .iter()
            .map(|a| store.get(&format!("probe.{a}.b")).map(|t| t.numel()))
            .collect::<Result<_>>()?;
        let num_labels = store.get("label.base")?.shape()[0];
        Ok(Self {
            encoder: PatchEncoder { cfg: cfg.encoder() },
            heads: Heads {
                cfg: HeadsConfig {
                    d: cfg.d,
                    classes: 2,
                    hidden: cfg.hidden,
                    groups,
                },
            },
            num_labels,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, patches: Tensor, stride: &StrideConfig) -> Result<Forward> {
        let x = tape.constant(patches);
        let ep = self.encoder.forward(tape, bound, x)?;
        let el = LabelEmbeddings::forward(tape, bound)?;
        let m = mask_var(bound)?;
        let r = relevance_scores(tape, ep, el, m, stride.tau)?;
        let z = stride_select(tape, ep, r, stride.k, stride.mode)?;
        let logits = self.heads.classify(tape, bound, z.pooled)?;
        Ok(Forward {
            logits,
            weights: z.weights,
            pooled: z.pooled,
            ep,
            el,
        })
    }

    /// Builds the joint objective for one batch.
    pub fn training_step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &Batch,
        weights: &LossWeights,
        stride: &StrideConfig,
        got: &GotConfig,
        cfg: &TrainConfig,
    ) -> Result<StepOutput> {
        let f = self.forward(tape, bound, batch.patches.clone(), stride)?;
        let targets: Vec<i64> = batch
            .y
            .iter()
            .map(|&y| if y == UNCERTAIN && cfg.uncertain_as_negative { 0 } else { y })
            .collect();
        let l_c = tape.cross_entropy(f.logits, &targets, UNCERTAIN)?;

        let attr_targets: Vec<Vec<i64>> = vec![
            batch.race.iter().map(|&g| g as i64).collect(),
            batch.gender.iter().map(|&g| g as i64).collect(),
        ];

        let mut diag = None;
        let l_got = if weights.alpha > 0.0 {
            let cost = cost_matrix(tape, f.ep, f.el, NORM_FLOOR)?;
            let (b, p) = (batch.len(), self.encoder.cfg.num_patches());
            let a = if got.weighted_marginals {
                let w = tape.value(f.weights).data();
                let mut rows = Vec::with_capacity(b * p);
                for row in w.chunks(p) {
                    let total: f64 = row.iter().map(|v| v + MARGINAL_FLOOR).sum();
                    rows.extend(row.iter().map(|v| (v + MARGINAL_FLOOR) / total));
                }
                PatchMarginal::PerSample(rows)
            } else {
                PatchMarginal::Shared(vec![1.0 / p as f64; p])
            };
            let b_marg = vec![1.0 / self.num_labels as f64; self.num_labels];
            let transport = sinkhorn_cost(tape, cost, &a, &b_marg, got.eps, got.max_iter, got.tol)?;
            let mut groups = [
                GroupBatch::new(ATTRIBUTES[0], batch.race.clone()),
                GroupBatch::new(ATTRIBUTES[1], batch.gender.clone()),
            ];
            if cfg.class_conditional_got {
                groups = groups.map(|g| g.within(targets.clone()));
            }
            let terms = got_loss(tape, &transport, f.pooled, &groups, weights.lambda)?;
            diag = Some(GotDiagnostics {
                iterations: terms.iterations,
                unconverged: terms.unconverged,
                max_violation: terms.max_violation,
                transport: tape.value(terms.transport).item(),
                single_group: terms.single_group.iter().any(|a| a == ATTRIBUTES[0]),
            });
            Some(terms.loss)
        } else {
            None
        };

        let l_s = if weights.beta > 0.0 {
            let logits = ATTRIBUTES
                .iter()
                .map(|a| self.heads.probe(tape, bound, f.pooled, a, cfg.probe_coupled))
                .collect::<Result<Vec<_>>>()?;
            Some(mean_attribute_ce(tape, &logits, &attr_targets, None)?)
        } else {
            None
        };

        let l_conf = if weights.gamma > 0.0 {
            let logits = ATTRIBUTES
                .iter()
                .map(|a| self.heads.adversary(tape, bound, f.pooled, a, weights.gamma))
                .collect::<Result<Vec<_>>>()?;
            Some(mean_attribute_ce(tape, &logits, &attr_targets, batch.adv_weights.as_deref())?)
        } else {
            None
        };

        let l_sparse = if weights.eta > 0.0 {
            Some(mask_sparsity_penalty(tape, f.weights)?)
        } else {
            None
        };

        let terms = LossTerms {
            classification: l_c,
            got: l_got,
            probe: l_s,
            confusion: l_conf,
            sparsity: l_sparse,
        };
        let (loss, breakdown) = total_loss(tape, &terms, weights)?;
        Ok(StepOutput {
            loss,
            breakdown,
            got: diag,
        })
    }
}

/// Pseudo-embeddings stand in for fixed pretrained vectors, so they do not
/// vary with the run seed.
pub const LABEL_SEED: u64 = 0;

/// Default label set for the binary task.
pub fn binary_labels(cfg: &TrainConfig) -> Result<LabelEmbeddings> {
    match &cfg.label_embeddings {
        Some(path) => crate::embed::load_label_embeddings(path, &BINARY_LABELS),
        None => crate::embed::pseudo_label_embeddings(&BINARY_LABELS, cfg.d_text, LABEL_SEED),
    }
}
