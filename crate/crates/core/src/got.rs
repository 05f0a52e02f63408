//! Entropic optimal transport between patch and label embeddings, and the
//! pairwise group-consistency regularizer built on top of it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Norm floor for cosine costs.
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GotConfig {
    /// Weight on the transport term; `1 - lambda` goes to the regularizer.
    pub lambda: f64,
    pub eps: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Use the stride weights (renormalized) as patch marginals.
    pub weighted_marginals: bool,
}

impl Default for GotConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            eps: 0.05,
            max_iter: 200,
            tol: 1e-6,
            weighted_marginals: false,
        }
    }
}

impl GotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.eps)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// `C[.., i, j] = 1 - cos(ep_i, el_j)`, with row norms floored at `floor`.
/// `ep` is `[P, d]` or `[B, P, d]`; `el` is `[L, d]`.
pub fn cost_matrix(tape: &mut Tape, ep: Var, el: Var, floor: f64) -> Result<Var> {
    let epn = tape.l2_normalize(ep, floor)?;
    let eln = tape.l2_normalize(el, floor)?;
    let elt = tape.transpose(eln)?;
    let cos = tape.matmul(epn, elt)?;
    let one = tape.constant(Tensor::scalar(1.0));
    tape.sub(one, cos)
}

/// Result of a plain (non-differentiable) Sinkhorn solve.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// Row-major `P × L` plan.
    pub plan: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub eps: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `max_i |Σ_j T_ij - a_i|` after the last column update.
    pub marginal_violation: f64,
    /// `⟨T, C⟩`.
    pub cost: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.plan[i * self.cols + j]).sum())
            .collect()
    }
}

fn check_marginal(name: &str, m: &[f64]) -> Result<()> {
    let total: f64 = m.iter().sum();
    if m.is_empty() || m.iter().any(|v| !(*v > 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain {
            op: "sinkhorn",
            msg: format!("marginal {name} must be strictly positive and sum to 1 (sum = {total})"),
        });
    }
    Ok(())
}

fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn on a row-major `rows × cols` cost.
///
/// Alternates `f = ε log a − ε LSE_j((g_j − C_ij)/ε)` and the symmetric
/// column update, stopping once the row-marginal violation drops below
/// `tol` or after `max_iter` rounds.
pub fn sinkhorn(cost: &[f64], a: &[f64], b: &[f64], eps: f64, max_iter: usize, tol: f64) -> Result<TransportPlan> {
    check_marginal("a", a)?;
    check_marginal("b", b)?;
    if !(eps > 0.0) {
        return Err(Error::Domain {
            op: "sinkhorn",
            msg: format!("epsilon must be positive, got {eps}"),
        });
    }
    let (n, m) = (a.len(), b.len());
    if cost.len() != n * m {
        return Err(Error::shape("sinkhorn", &[cost.len()], &[n, m]));
    }
    let (mut f, mut g) = (vec![0.0; n], vec![0.0; m]);
    let (mut iterations, mut violation) = (0, f64::INFINITY);
    while iterations < max_iter {
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            f[i] = eps * a[i].ln() - eps * lse((0..m).map(|j| (g[j] - row[j]) / eps));
        }
        for j in 0..m {
            g[j] = eps * b[j].ln() - eps * lse((0..n).map(|i| (f[i] - cost[i * m + j]) / eps));
        }
        iterations += 1;
        violation = row_violation(cost, &f, &g, a, eps);
        if violation < tol {
            break;
        }
    }
    let plan: Vec<f64> = (0..n * m)
        .map(|idx| ((f[idx / m] + g[idx % m] - cost[idx]) / eps).exp())
        .collect();
    let total = plan.iter().zip(cost).map(|(t, c)| t * c).sum();
    Ok(TransportPlan {
        plan,
        rows: n,
        cols: m,
        a: a.to_vec(),
        b: b.to_vec(),
        eps,
        iterations,
        converged: violation < tol,
        marginal_violation: violation,
        cost: total,
    })
}

fn row_violation(cost: &[f64], f: &[f64], g: &[f64], a: &[f64], eps: f64) -> f64 {
    let m = g.len();
    f.iter()
        .enumerate()
        .map(|(i, fi)| {
            let s: f64 = (0..m).map(|j| ((fi + g[j] - cost[i * m + j]) / eps).exp()).sum();
            (s - a[i]).abs()
        })
        .fold(0.0, f64::max)
}

/// Patch marginals for the batched solver.
#[derive(Debug, Clone)]
pub enum PatchMarginal {
    /// One distribution over `P` patches shared by the batch.
    Shared(Vec<f64>),
    /// Row-major `[B, P]`, one distribution per sample.
    PerSample(Vec<f64>),
}

/// Differentiable batched transport cost.
#[derive(Debug, Clone)]
pub struct TransportCosts {
    /// Per-sample `⟨T, C⟩`, shape `[B]`.
    pub costs: Var,
    pub iterations: usize,
    pub converged: Vec<bool>,
    pub violations: Vec<f64>,
}

/// Runs log-domain Sinkhorn on `cost[B, P, L]` directly on the tape, so
/// the gradient of `⟨T, C⟩` flows through every unrolled iteration. The
/// unroll count is the number of rounds needed for all samples to meet
/// `tol` (at most `max_iter`).
pub fn sinkhorn_cost(
    tape: &mut Tape,
    cost: Var,
    a: &PatchMarginal,
    b: &[f64],
    eps: f64,
    max_iter: usize,
    tol: f64,
) -> Result<TransportCosts> {
    let shape = tape.shape(cost).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("sinkhorn_cost", &shape, &[]));
    }
    let (bsz, p, l) = (shape[0], shape[1], shape[2]);
    check_marginal("b", b)?;
    if b.len() != l {
        return Err(Error::shape("sinkhorn_cost", &shape, &[b.len()]));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain {
            op: "sinkhorn",
            msg: format!("epsilon must be positive, got {eps}"),
        });
    }
    let a_rows: Vec<f64> = match a {
        PatchMarginal::Shared(v) => {
            check_marginal("a", v)?;
            if v.len() != p {
                return Err(Error::shape("sinkhorn_cost", &shape, &[v.len()]));
            }
            (0..bsz).flat_map(|_| v.iter().copied()).collect()
        }
        PatchMarginal::PerSample(v) => {
            if v.len() != bsz * p {
                return Err(Error::shape("sinkhorn_cost", &shape, &[v.len()]));
            }
            for row in v.chunks(p) {
                check_marginal("a", row)?;
            }
            v.clone()
        }
    };
    let eps_log_a = tape.constant(Tensor::new(
        vec![bsz, p, 1],
        a_rows.iter().map(|v| eps * v.ln()).collect(),
    )?);
    let eps_log_b = tape.constant(Tensor::new(vec![1, l], b.iter().map(|v| eps * v.ln()).collect())?);
    let mut g = tape.constant(Tensor::zeros(&[bsz, 1, l]));
    let mut f;
    let mut iterations = 0;
    let mut violations;
    loop {
        let x = tape.sub(g, cost)?;
        let x = tape.scale(x, 1.0 / eps)?;
        let x = tape.logsumexp(x)?;
        let x = tape.scale(x, eps)?;
        f = tape.sub(eps_log_a, x)?;

        let y = tape.sub(f, cost)?;
        let y = tape.scale(y, 1.0 / eps)?;
        let y = tape.transpose(y)?;
        let y = tape.logsumexp(y)?;
        let y = tape.transpose(y)?;
        let y = tape.scale(y, eps)?;
        g = tape.sub(eps_log_b, y)?;
        iterations += 1;

        let (cv, fv, gv) = (tape.value(cost).data(), tape.value(f).data(), tape.value(g).data());
        violations = (0..bsz)
            .map(|s| {
                row_violation(
                    &cv[s * p * l..(s + 1) * p * l],
                    &fv[s * p..(s + 1) * p],
                    &gv[s * l..(s + 1) * l],
                    &a_rows[s * p..(s + 1) * p],
                    eps,
                )
            })
            .collect::<Vec<f64>>();
        if iterations >= max_iter || violations.iter().all(|v| *v < tol) {
            break;
        }
    }
    let z = tape.add(f, g)?;
    let z = tape.sub(z, cost)?;
    let z = tape.scale(z, 1.0 / eps)?;
    let plan = tape.exp(z)?;
    let weighted = tape.mul(plan, cost)?;
    let per_row = tape.sum_axis(weighted, 2)?;
    let per_sample = tape.sum_axis(per_row, 1)?;
    let costs = tape.reshape(per_sample, &[bsz])?;
    Ok(TransportCosts {
        costs,
        iterations,
        converged: violations.iter().map(|v| *v < tol).collect(),
        violations,
    })
}

/// Group membership of each batch row for one sensitive attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupBatch {
    pub attribute: String,
    pub group_of: Vec<usize>,
    /// Optional per-row stratum (the class label). When set, groups are only
    /// compared within a stratum and rows with a negative stratum are left
    /// out.
    pub strata: Option<Vec<i64>>,
}

impl GroupBatch {
    pub fn new(attribute: impl Into<String>, group_of: Vec<usize>) -> Self {
        Self {
            attribute: attribute.into(),
            group_of,
            strata: None,
        }
    }

    pub fn within(mut self, strata: Vec<i64>) -> Self {
        self.strata = Some(strata);
        self
    }

    /// Distinct groups present, ascending.
    pub fn present(&self) -> Vec<usize> {
        let mut g = self.group_of.clone();
        g.sort_unstable();
        g.dedup();
        g
    }

    /// Distinct `(stratum, group)` cells present, ascending.
    fn cells(&self) -> Vec<(i64, usize)> {
        let mut c: Vec<(i64, usize)> = (0..self.group_of.len())
            .filter_map(|r| self.cell_of(r))
            .collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    fn cell_of(&self, row: usize) -> Option<(i64, usize)> {
        let stratum = self.strata.as_ref().map_or(0, |s| s[row]);
        (stratum >= 0).then_some((stratum, self.group_of[row]))
    }
}

/// Regularizer value plus whether it degenerated to a single group.
#[derive(Debug, Clone, Copy)]
pub struct GroupTerm {
    pub value: Var,
    pub single_group: bool,
}

/// Mean over unordered group pairs of `(c̄_a − c̄_b)² + ‖μ_a − μ_b‖²`, where
/// `c̄` is the group-mean transport cost and `μ` the group-mean pooled
/// embedding. With strata, pairs are formed inside each stratum only. A
/// batch without any pair yields 0 and sets the flag.
pub fn group_regularizer(tape: &mut Tape, costs: Var, pooled: Var, groups: &GroupBatch) -> Result<GroupTerm> {
    let bsz = tape.shape(costs)[0];
    let strata_ok = groups.strata.as_ref().is_none_or(|s| s.len() == bsz);
    if groups.group_of.len() != bsz || tape.shape(pooled)[0] != bsz || !strata_ok {
        return Err(Error::shape("group_regularizer", tape.shape(pooled), &[groups.group_of.len()]));
    }
    let cells = groups.cells();
    let n_cells = cells.len();
    let pairs: Vec<(usize, usize)> = (0..n_cells)
        .flat_map(|i| (i + 1..n_cells).map(move |j| (i, j)))
        .filter(|&(i, j)| cells[i].0 == cells[j].0)
        .collect();
    if pairs.is_empty() {
        return Ok(GroupTerm {
            value: tape.constant(Tensor::scalar(0.0)),
            single_group: true,
        });
    }
    let mut avg = Tensor::zeros(&[n_cells, bsz]);
    for (ci, cell) in cells.iter().enumerate() {
        let members: Vec<usize> = (0..bsz).filter(|&r| groups.cell_of(r) == Some(*cell)).collect();
        for r in &members {
            avg.data_mut()[ci * bsz + r] = 1.0 / members.len() as f64;
        }
    }
    let mut diff = Tensor::zeros(&[pairs.len(), n_cells]);
    for (pi, &(i, j)) in pairs.iter().enumerate() {
        diff.data_mut()[pi * n_cells + i] = 1.0;
        diff.data_mut()[pi * n_cells + j] = -1.0;
    }
    let avg = tape.constant(avg);
    let diff = tape.constant(diff);
    let c = tape.reshape(costs, &[bsz, 1])?;
    let cbar = tape.matmul(avg, c)?;
    let mu = tape.matmul(avg, pooled)?;
    let dc = tape.matmul(diff, cbar)?;
    let dmu = tape.matmul(diff, mu)?;
    let dc2 = tape.mul(dc, dc)?;
    let dmu2 = tape.mul(dmu, dmu)?;
    let s1 = tape.sum(dc2)?;
    let s2 = tape.sum(dmu2)?;
    let total = tape.add(s1, s2)?;
    Ok(GroupTerm {
        value: tape.scale(total, 1.0 / pairs.len() as f64)?,
        single_group: false,
    })
}

/// Components of the alignment loss.
#[derive(Debug, Clone)]
pub struct GotTerms {
    pub loss: Var,
    pub transport: Var,
    pub regularizer: Var,
    /// Attributes whose batch slice held a single group.
    pub single_group: Vec<String>,
    pub iterations: usize,
    pub unconverged: usize,
    pub max_violation: f64,
}

/// `lambda · mean transport cost + (1 − lambda) · regularizer`, the
/// regularizer averaged over attributes with at least two groups present.
pub fn got_loss(
    tape: &mut Tape,
    transport: &TransportCosts,
    pooled: Var,
    groups: &[GroupBatch],
    lambda: f64,
) -> Result<GotTerms> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let mean_cost = tape.mean(transport.costs)?;
    let mut regs = Vec::new();
    let mut single_group = Vec::new();
    for gb in groups {
        let term = group_regularizer(tape, transport.costs, pooled, gb)?;
        if term.single_group {
            single_group.push(gb.attribute.clone());
        } else {
            regs.push(term.value);
        }
    }
    let regularizer = match regs.split_first() {
        None => tape.constant(Tensor::scalar(0.0)),
        Some((first, rest)) => {
            let mut acc = *first;
            for r in rest {
                acc = tape.add(acc, *r)?;
            }
            tape.scale(acc, 1.0 / regs.len() as f64)?
        }
    };
    let lhs = tape.scale(mean_cost, lambda)?;
    let rhs = tape.scale(regularizer, 1.0 - lambda)?;
    let loss = tape.add(lhs, rhs)?;
    Ok(GotTerms {
        loss,
        transport: mean_cost,
        regularizer,
        single_group,
        iterations: transport.iterations,
        unconverged: transport.converged.iter().filter(|c| !**c).count(),
        max_violation: transport.violations.iter().copied().fold(0.0, f64::max),
    })
}
