//! Training objectives built on the autodiff graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the distillation term; the alignment terms get `1 − lambda1`.
    pub lambda1: f64,
    pub kd_temperature: f64,
    /// Temperature of the prediction-agreement score used for re-matching.
    pub match_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.4,
            kd_temperature: 4.0,
            match_temperature: 3.0,
        }
    }
}

impl LossWeights {
    pub fn lambda2(&self) -> f64 {
        1.0 - self.lambda1
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda1) {
            return Err(Error::Config(format!("lambda1 must lie in [0, 1], got {}", self.lambda1)));
        }
        for (name, t) in [("kd_temperature", self.kd_temperature), ("match_temperature", self.match_temperature)] {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Denominator of the covariance-alignment loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoralNorm {
    /// `‖C_s − C_t‖² / (4d²)`
    #[default]
    Squared,
    /// `‖C_s − C_t‖² / (4d)`
    Linear,
}

pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

pub fn binary_cross_entropy(g: &mut Graph, logits: Var, multihot: &Tensor) -> Result<Var> {
    g.bce_with_logits(logits, multihot)
}

fn check_temperature(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("temperature must be positive, got {gamma}")))
    }
}

/// Batch mean of `KL(softmax(a/γ) ‖ softmax(b/γ))` over rows of `[B, C]`.
pub fn kl_temperature(g: &mut Graph, p_a: Var, p_b: Var, gamma: f64) -> Result<Var> {
    check_temperature(gamma)?;
    if g.shape(p_a) != g.shape(p_b) || g.shape(p_a).len() != 2 {
        return Err(Error::dim(format!("kl: {:?} vs {:?}", g.shape(p_a), g.shape(p_b))));
    }
    let rows = g.shape(p_a)[0] as f64;
    let a = g.scale(p_a, 1.0 / gamma);
    let b = g.scale(p_b, 1.0 / gamma);
    let la = g.log_softmax(a);
    let lb = g.log_softmax(b);
    let qa = g.exp(la);
    let d = g.sub(la, lb)?;
    let t = g.mul(qa, d)?;
    let s = g.sum(t);
    Ok(g.scale(s, 1.0 / rows))
}

/// `KL(softmax(a/γ) ‖ softmax(b/γ))` for a single pair of logit vectors.
pub fn kl_divergence(a: &[f64], b: &[f64], gamma: f64) -> Result<f64> {
    check_temperature(gamma)?;
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(format!("kl: lengths {} and {}", a.len(), b.len())));
    }
    let mut la: Vec<f64> = a.iter().map(|x| x / gamma).collect();
    let mut lb: Vec<f64> = b.iter().map(|x| x / gamma).collect();
    log_softmax_in_place(&mut la);
    log_softmax_in_place(&mut lb);
    Ok(la.iter().zip(&lb).map(|(x, y)| x.exp() * (x - y)).sum())
}

/// Inputs handed to a distillation loss.
#[derive(Clone, Copy, Debug)]
pub struct KdInputs {
    /// `[B, C]`, constant.
    pub teacher_logits: Var,
    /// `[B, C]`
    pub student_logits: Var,
    /// `[B, C_t, N]`, constant.
    pub teacher_features: Var,
    /// `[B, C_s, N]`
    pub student_features: Var,
}

/// Pluggable logit/feature distillation objective.
pub trait DistillationLoss: Send + Sync {
    fn name(&self) -> &'static str;
    fn loss(&self, g: &mut Graph, x: &KdInputs) -> Result<Var>;
}

/// `γ² · KL(teacher ‖ student)` at temperature `γ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VanillaKd {
    pub temperature: f64,
}

impl DistillationLoss for VanillaKd {
    fn name(&self) -> &'static str {
        "vanilla"
    }

    fn loss(&self, g: &mut Graph, x: &KdInputs) -> Result<Var> {
        vanilla_kd(g, x.teacher_logits, x.student_logits, self.temperature)
    }
}

pub fn vanilla_kd(g: &mut Graph, teacher_logits: Var, student_logits: Var, gamma: f64) -> Result<Var> {
    let kl = kl_temperature(g, teacher_logits, student_logits, gamma)?;
    Ok(g.scale(kl, gamma * gamma))
}

/// Symmetric InfoNCE over positives on the diagonal of `scale · V Gᵀ`.
/// `scale` is a graph scalar so the temperature can be learned.
pub fn infonce_symmetric(g: &mut Graph, v: Var, gt: Var, scale: Var) -> Result<Var> {
    let sv = g.shape(v).to_vec();
    if sv.len() != 2 || g.shape(gt) != sv.as_slice() {
        return Err(Error::dim(format!("infonce: {sv:?} vs {:?}", g.shape(gt))));
    }
    let n = sv[0];
    if n < 2 {
        return Err(Error::param("infonce needs at least two pairs"));
    }
    if g.value(scale).len() != 1 {
        return Err(Error::dim("infonce scale must be a scalar"));
    }
    let labels: Vec<usize> = (0..n).collect();
    let gtt = g.transpose(gt)?;
    let sim = g.matmul(v, gtt)?;
    let logits = g.mul(sim, scale)?;
    let l_vg = g.cross_entropy(logits, &labels)?;
    let back = g.transpose(logits)?;
    let l_gv = g.cross_entropy(back, &labels)?;
    let s = g.add(l_vg, l_gv)?;
    Ok(g.scale(s, 0.5))
}

fn covariance(g: &mut Graph, r: Var) -> Result<Var> {
    let b = g.shape(r)[0] as f64;
    let mu = g.mean_axis(r, 0)?;
    let xc = g.sub(r, mu)?;
    let xt = g.transpose(xc)?;
    let c = g.matmul(xt, xc)?;
    Ok(g.scale(c, 1.0 / (b - 1.0)))
}

/// Squared Frobenius distance between the feature covariances of two
/// `[B, d]` batches.
pub fn coral(g: &mut Graph, rs: Var, rt: Var, norm: CoralNorm) -> Result<Var> {
    let ss = g.shape(rs).to_vec();
    if ss.len() != 2 || g.shape(rt) != ss.as_slice() {
        return Err(Error::dim(format!("coral: {ss:?} vs {:?}", g.shape(rt))));
    }
    let (b, d) = (ss[0], ss[1] as f64);
    if b < 2 {
        return Err(Error::param(format!("coral needs a batch of at least 2, got {b}")));
    }
    let cs = covariance(g, rs)?;
    let ct = covariance(g, rt)?;
    let diff = g.sub(cs, ct)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    let denom = match norm {
        CoralNorm::Squared => 4.0 * d * d,
        CoralNorm::Linear => 4.0 * d,
    };
    Ok(g.scale(s, 1.0 / denom))
}

/// `(CORAL(D_T, D_S), CORAL(z̄_T, z̄_S))` with the plan-weighted patch
/// features flattened per sample.
pub fn ot_alignment_losses(
    g: &mut Graph,
    d_t: Var,
    d_s: Var,
    zbar_t: Var,
    zbar_s: Var,
    norm: CoralNorm,
) -> Result<(Var, Var)> {
    let st = g.shape(d_t).to_vec();
    if st.len() != 3 || g.shape(d_s) != st.as_slice() {
        return Err(Error::dim(format!(
            "weighted features differ: teacher {st:?}, student {:?}",
            g.shape(d_s)
        )));
    }
    let flat = [st[0], st[1] * st[2]];
    let ft = g.reshape(d_t, &flat)?;
    let fs = g.reshape(d_s, &flat)?;
    let l1 = coral(g, fs, ft, norm)?;
    let l2 = coral(g, zbar_s, zbar_t, norm)?;
    Ok((l1, l2))
}

/// `L_task + λ1·L_kd + (1 − λ1)·(L_ot1 + L_ot2)`; absent terms contribute 0.
pub fn total_loss(
    g: &mut Graph,
    task: Var,
    kd: Option<Var>,
    ot1: Option<Var>,
    ot2: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = task;
    if let Some(kd) = kd {
        let t = g.scale(kd, w.lambda1);
        total = g.add(total, t)?;
    }
    for term in [ot1, ot2].into_iter().flatten() {
        let t = g.scale(term, w.lambda2());
        total = g.add(total, t)?;
    }
    Ok(total)
}
