//! Optimal-transport pieces: pairwise costs, entropic row plans, log-domain
//! Sinkhorn, exact small-case optima, hard nearest matches and the
//! attention-derived cross-modal patch weights.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax_in_place, Tensor};

/// Smallest accepted magnitude for the feature-mean scale factors.
pub const SCALE_FLOOR: f64 = 1e-9;
/// Value substituted when a scale factor falls under [`SCALE_FLOOR`].
pub const SCALE_FALLBACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SquaredEuclidean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub values: Tensor,
    pub metric: Metric,
}

impl CostMatrix {
    pub fn from_values(values: Tensor) -> Result<Self> {
        values.dims2()?;
        if !values.all_finite() {
            return Err(Error::Numeric("cost matrix has non-finite entries".into()));
        }
        Ok(CostMatrix {
            values,
            metric: Metric::SquaredEuclidean,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.data()[i * self.cols() + j]
    }
}

/// `c[i][j] = ‖x_i − y_j‖²` for row sets `x: [m, d]`, `y: [n, d]`.
pub fn cost_matrix(x: &Tensor, y: &Tensor) -> Result<CostMatrix> {
    let [m, d] = x.dims2()?;
    let [n, d2] = y.dims2()?;
    if d != d2 {
        return Err(Error::dim(format!("cost matrix: feature dims {d} vs {d2}")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let xi = x.row(i);
        for j in 0..n {
            out[i * n + j] = xi
                .iter()
                .zip(y.row(j))
                .fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b));
        }
    }
    CostMatrix::from_values(Tensor::new(vec![m, n], out)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub pi: Tensor,
    pub row_marginal: Tensor,
    pub col_marginal: Tensor,
    pub epsilon: f64,
}

impl TransportPlan {
    fn from_pi(pi: Tensor, epsilon: f64) -> Self {
        let [m, n] = pi.dims2().expect("plan is a matrix");
        let mut rows = vec![0.0; m];
        let mut cols = vec![0.0; n];
        for i in 0..m {
            for (j, &v) in pi.row(i).iter().enumerate() {
                rows[i] += v;
                cols[j] += v;
            }
        }
        TransportPlan {
            pi,
            row_marginal: Tensor::from_vec(rows),
            col_marginal: Tensor::from_vec(cols),
            epsilon,
        }
    }

    /// `Σ π_ij c_ij`.
    pub fn cost(&self, c: &CostMatrix) -> f64 {
        self.pi.dot(&c.values)
    }

    /// Shannon entropy (nats) of each row after normalizing it to sum 1.
    pub fn row_entropies(&self) -> Vec<f64> {
        let n = self.pi.shape()[1];
        self.pi
            .data()
            .chunks(n)
            .map(|row| {
                let s: f64 = row.iter().sum();
                row.iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| {
                        let q = p / s;
                        -q * q.ln()
                    })
                    .sum()
            })
            .collect()
    }
}

/// Whether the matrix fed to [`entropic_row_plan`] is a cost to be avoided
/// or a similarity to be followed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanSign {
    /// Rows are `softmax(−c/ε)`.
    Cost,
    /// Rows are `softmax(+c/ε)`.
    Similarity,
}

impl PlanSign {
    fn factor(self) -> f64 {
        match self {
            PlanSign::Cost => -1.0,
            PlanSign::Similarity => 1.0,
        }
    }
}

/// Row-wise Gibbs plan: every row is an independent softmax of `±c/ε`.
pub fn entropic_row_plan(c: &CostMatrix, eps: f64, sign: PlanSign) -> Result<TransportPlan> {
    let log_pi = entropic_row_log_plan(c, eps, sign)?;
    Ok(TransportPlan::from_pi(log_pi.map(f64::exp), eps))
}

/// `ln π` of [`entropic_row_plan`], computed without underflow.
pub fn entropic_row_log_plan(c: &CostMatrix, eps: f64, sign: PlanSign) -> Result<Tensor> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::param(format!("entropic plan needs epsilon > 0, got {eps}")));
    }
    let s = sign.factor() / eps;
    let mut logits = c.values.map(|v| s * v);
    let n = c.cols();
    logits.data_mut().chunks_mut(n).for_each(log_softmax_in_place);
    Ok(logits)
}

/// Stationarity residual of the per-row Lagrangian at the plan whose
/// logarithm is `log_pi`. Each row of the result is constant (equal to that
/// row's multiplier) exactly when the plan is stationary.
///
/// For the similarity sign the Lagrangian is
/// `Σ π c − Σ αᵢ(Σⱼ πᵢⱼ − 1) − ε Σ π ln π`, giving `c − ε(1 + ln π)`; the cost
/// sign minimizes `Σ π c + ε Σ π ln π`, giving `c + ε(1 + ln π)`.
pub fn stationarity_residual(c: &CostMatrix, log_pi: &Tensor, eps: f64, sign: PlanSign) -> Result<Tensor> {
    let s = -sign.factor();
    c.values.zip_map(log_pi, |cij, lp| cij + s * eps * (1.0 + lp))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    /// Regularization; `None` means `0.05 · mean(C)`.
    pub epsilon: Option<f64>,
    pub max_iters: usize,
    /// Tolerance on the L1 marginal error.
    pub tol: f64,
    /// Anneal ε geometrically from `max(C)` down to the target, warm
    /// starting each stage from the previous potentials.
    pub eps_scaling: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: None,
            max_iters: 1000,
            tol: 1e-6,
            eps_scaling: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornResult {
    pub plan: TransportPlan,
    /// `W_ε = Σ π_ij c_ij`.
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    /// L1 distance of both marginals from `a` and `b`, summed.
    pub marginal_error: f64,
}

pub fn default_epsilon(c: &CostMatrix) -> f64 {
    let e = 0.05 * c.values.mean();
    if e > 0.0 {
        e
    } else {
        1.0
    }
}

fn lse(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_marginal(v: &[f64], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::dim(format!("{what} has {} entries, expected {n}", v.len())));
    }
    let s: f64 = v.iter().sum();
    if v.iter().any(|&x| !(x > 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("{what} must be a positive probability vector (sum {s})")));
    }
    Ok(())
}

struct Potentials<'a> {
    c: &'a CostMatrix,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

impl Potentials<'_> {
    fn sweep(&mut self, eps: f64) {
        let (m, n) = (self.c.rows(), self.c.cols());
        for i in 0..m {
            let g = &self.g;
            let row = self.c.values.row(i);
            let l = lse((0..n).map(|j| (g[j] - row[j]) / eps));
            self.f[i] = eps * (self.log_a[i] - l);
        }
        for j in 0..n {
            let f = &self.f;
            let c = self.c;
            let l = lse((0..m).map(|i| (f[i] - c.get(i, j)) / eps));
            self.g[j] = eps * (self.log_b[j] - l);
        }
    }

    fn plan(&self, eps: f64) -> Tensor {
        let (m, n) = (self.c.rows(), self.c.cols());
        let mut pi = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                pi[i * n + j] = ((self.f[i] + self.g[j] - self.c.get(i, j)) / eps).exp();
            }
        }
        Tensor::new(vec![m, n], pi).expect("sized")
    }
}

fn marginal_error(plan: &TransportPlan, a: &[f64], b: &[f64]) -> f64 {
    let r: f64 = plan.row_marginal.data().iter().zip(a).map(|(x, y)| (x - y).abs()).sum();
    let c: f64 = plan.col_marginal.data().iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    r + c
}

/// Entropic OT between marginals `a` and `b` by alternating log-domain
/// scaling. If the tolerance is not met within `max_iters` sweeps of the
/// final stage, the iterate with the smallest marginal error is returned
/// with `converged = false`.
pub fn sinkhorn(c: &CostMatrix, a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    let (m, n) = (c.rows(), c.cols());
    if m == 0 || n == 0 {
        return Err(Error::dim("sinkhorn on an empty cost matrix"));
    }
    check_marginal(a, m, "row marginal")?;
    check_marginal(b, n, "column marginal")?;
    let target = cfg.epsilon.unwrap_or_else(|| default_epsilon(c));
    if !(target > 0.0) {
        return Err(Error::param(format!("sinkhorn needs epsilon > 0, got {target}")));
    }
    let mut pot = Potentials {
        c,
        log_a: a.iter().map(|x| x.ln()).collect(),
        log_b: b.iter().map(|x| x.ln()).collect(),
        f: vec![0.0; m],
        g: vec![0.0; n],
    };
    let mut iterations = 0;
    if cfg.eps_scaling {
        let cmax = c.values.data().iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
        let mut eps = cmax;
        while eps > 2.0 * target {
            for _ in 0..10 {
                pot.sweep(eps);
                iterations += 1;
            }
            eps *= 0.5;
        }
    }
    let mut best: Option<(f64, TransportPlan)> = None;
    let mut converged = false;
    for _ in 0..cfg.max_iters.max(1) {
        pot.sweep(target);
        iterations += 1;
        let plan = TransportPlan::from_pi(pot.plan(target), target);
        let err = marginal_error(&plan, a, b);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, plan));
        }
        if err < cfg.tol {
            converged = true;
            break;
        }
    }
    let (marginal_error, plan) = best.expect("at least one sweep");
    if !converged {
        log::warn!("sinkhorn stopped after {iterations} sweeps with marginal error {marginal_error:.3e}");
    }
    Ok(SinkhornResult {
        cost: plan.cost(c),
        plan,
        converged,
        iterations,
        marginal_error,
    })
}

/// Entropic Wasserstein cost between two equally weighted point clouds
/// under squared-euclidean cost.
pub fn wasserstein_uniform(x: &Tensor, y: &Tensor, cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    let c = cost_matrix(x, y)?;
    let a = vec![1.0 / c.rows() as f64; c.rows()];
    let b = vec![1.0 / c.cols() as f64; c.cols()];
    sinkhorn(&c, &a, &b, cfg)
}

pub const BRUTEFORCE_MAX: usize = 7;

/// `(1/n) · min_perm Σᵢ C[i][perm(i)]` by exhaustive enumeration.
pub fn exact_ot_bruteforce(c: &CostMatrix) -> Result<f64> {
    let n = c.rows();
    if n != c.cols() {
        return Err(Error::dim(format!("exact OT needs a square matrix, got {n}x{}", c.cols())));
    }
    if n > BRUTEFORCE_MAX {
        return Err(Error::param(format!("exact OT refuses n = {n} > {BRUTEFORCE_MAX}")));
    }
    if n == 0 {
        return Err(Error::dim("exact OT on an empty matrix"));
    }
    fn search(c: &CostMatrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        let n = used.len();
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                search(c, row + 1, used, acc + c.get(row, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    search(c, 0, &mut vec![false; n], 0.0, &mut best);
    Ok(best / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardMatch {
    pub assignment: Vec<usize>,
    /// Mean matched squared distance.
    pub matched_cost: f64,
}

/// Nearest teacher row for every student row (ties go to the lowest index).
pub fn hard_match_plan(xs: &Tensor, xt: &Tensor) -> Result<HardMatch> {
    let c = cost_matrix(xs, xt)?;
    if c.cols() == 0 {
        return Err(Error::dim("hard match against an empty teacher set"));
    }
    let mut assignment = Vec::with_capacity(c.rows());
    let mut total = 0.0;
    for i in 0..c.rows() {
        let row = c.values.row(i);
        let mut k = 0;
        for (j, &v) in row.iter().enumerate() {
            if v < row[k] {
                k = j;
            }
        }
        total += row[k];
        assignment.push(k);
    }
    let matched_cost = if assignment.is_empty() {
        0.0
    } else {
        total / assignment.len() as f64
    };
    Ok(HardMatch {
        assignment,
        matched_cost,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossPlanWeights {
    /// `[H, N_T]`
    pub w_t: Tensor,
    /// `[H, N_S]`
    pub w_s: Tensor,
    pub eps_t: f64,
    pub eps_s: f64,
}

/// Mean of all entries, floored away from zero.
pub fn scale_factor(p: &Tensor) -> f64 {
    let e = p.mean();
    if e.abs() < SCALE_FLOOR || !e.is_finite() {
        log::warn!("patch mean {e:e} too close to zero; using {SCALE_FALLBACK:e}");
        SCALE_FALLBACK
    } else {
        e
    }
}

/// Per-head patch weights from teacher and student attention maps.
///
/// With `u` the column means of each attention map and `M = u_T ⊗ u_S`,
/// the teacher weight is the mean of `M` over student patches divided by
/// `ε_T`, and the student weight the mean over teacher patches divided by
/// `ε_S`, where `ε` is the mean entry of the corresponding patch features.
pub fn cross_modal_plans(a_t: &Tensor, a_s: &Tensor, p_t: &Tensor, p_s: &Tensor) -> Result<CrossPlanWeights> {
    let (h, nt) = square_stack(a_t, "teacher attention")?;
    let (hs, ns) = square_stack(a_s, "student attention")?;
    if h != hs {
        return Err(Error::dim(format!("head counts differ: {h} vs {hs}")));
    }
    let eps_t = scale_factor(p_t);
    let eps_s = scale_factor(p_s);
    let col_means = |a: &Tensor, head: usize, n: usize| -> Vec<f64> {
        let block = &a.data()[head * n * n..(head + 1) * n * n];
        (0..n)
            .map(|j| (0..n).map(|i| block[i * n + j]).sum::<f64>() / n as f64)
            .collect()
    };
    let mut w_t = Vec::with_capacity(h * nt);
    let mut w_s = Vec::with_capacity(h * ns);
    for head in 0..h {
        let ut = col_means(a_t, head, nt);
        let us = col_means(a_s, head, ns);
        let outer: Vec<Vec<f64>> = ut.iter().map(|&x| us.iter().map(|&y| x * y).collect()).collect();
        for row in &outer {
            w_t.push(row.iter().sum::<f64>() / ns as f64 / eps_t);
        }
        for j in 0..ns {
            w_s.push(outer.iter().map(|r| r[j]).sum::<f64>() / nt as f64 / eps_s);
        }
    }
    Ok(CrossPlanWeights {
        w_t: Tensor::new(vec![h, nt], w_t)?,
        w_s: Tensor::new(vec![h, ns], w_s)?,
        eps_t,
        eps_s,
    })
}

fn square_stack(a: &Tensor, what: &str) -> Result<(usize, usize)> {
    match a.shape() {
        &[h, n, m] if n == m && n > 0 => Ok((h, n)),
        s => Err(Error::dim(format!("{what} must be [H, N, N] with N > 0, got {s:?}"))),
    }
}

/// `D[:, n] = z[:, n] · w̄[n]` with `w̄` the head-mean of `w`.
pub fn apply_plan(z: &Tensor, w: &Tensor) -> Result<Tensor> {
    let [cf, n] = z.dims2()?;
    let [h, nw] = w.dims2()?;
    if n != nw || h == 0 {
        return Err(Error::dim(format!("apply_plan: z {:?} vs w {:?}", z.shape(), w.shape())));
    }
    let wbar: Vec<f64> = (0..n)
        .map(|j| (0..h).map(|k| w.data()[k * n + j]).sum::<f64>() / h as f64)
        .collect();
    let mut out = z.clone();
    for c in 0..cf {
        for j in 0..n {
            out.data_mut()[c * n + j] *= wbar[j];
        }
    }
    Ok(out)
}

/// Batched, differentiable form of [`cross_modal_plans`]. `a_t: [B,H,N_T,N_T]`
/// and `a_s: [B,H,N_S,N_S]`; `eps_t`, `eps_s` hold one scale per sample and
/// enter as constants. Returns `(w_t: [B,H,N_T], w_s: [B,H,N_S])`.
pub fn cross_modal_plans_graph(
    g: &mut Graph,
    a_t: Var,
    a_s: Var,
    eps_t: &[f64],
    eps_s: &[f64],
) -> Result<(Var, Var)> {
    let st = g.shape(a_t).to_vec();
    let ss = g.shape(a_s).to_vec();
    if st.len() != 4 || ss.len() != 4 || st[0] != ss[0] || st[1] != ss[1] || st[2] != st[3] || ss[2] != ss[3] {
        return Err(Error::dim(format!("cross-modal plans: {st:?} vs {ss:?}")));
    }
    let (b, h, nt, ns) = (st[0], st[1], st[2], ss[2]);
    if eps_t.len() != b || eps_s.len() != b {
        return Err(Error::dim("one scale factor per sample is required"));
    }
    let ut = g.mean_axis(a_t, 2)?;
    let ut = g.reshape(ut, &[b, h, nt, 1])?;
    let us = g.mean_axis(a_s, 2)?;
    let outer = g.mul(ut, us)?;
    let wt = g.mean_axis(outer, 3)?;
    let wt = g.reshape(wt, &[b, h, nt])?;
    let ws = g.mean_axis(outer, 2)?;
    let ws = g.reshape(ws, &[b, h, ns])?;
    let et = g.constant(Tensor::new(vec![b, 1, 1], eps_t.to_vec())?);
    let es = g.constant(Tensor::new(vec![b, 1, 1], eps_s.to_vec())?);
    Ok((g.div(wt, et)?, g.div(ws, es)?))
}

/// Batched, differentiable form of [`apply_plan`]: `z: [B,C,N]`, `w: [B,H,N]`.
pub fn apply_plan_graph(g: &mut Graph, z: Var, w: Var) -> Result<Var> {
    let sz = g.shape(z).to_vec();
    let sw = g.shape(w).to_vec();
    if sz.len() != 3 || sw.len() != 3 || sz[0] != sw[0] || sz[2] != sw[2] {
        return Err(Error::dim(format!("apply_plan: z {sz:?} vs w {sw:?}")));
    }
    let wbar = g.mean_axis(w, 1)?;
    g.mul(z, wbar)
}
