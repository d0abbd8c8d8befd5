//! Loss terms: BPR ranking, RBF/HSIC bottleneck, InfoNCE alignment.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::diff::{DiffError, Tape, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{op}: length mismatch {a} vs {b}")]
    Length { op: &'static str, a: usize, b: usize },
    #[error("hsic needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("zero-norm representation in contrastive term")]
    ZeroNorm,
    #[error("non-finite {0} loss")]
    NonFinite(&'static str),
}

/// `mean(-ln σ(pos - neg))`.
pub fn bpr_loss(tape: &mut Tape, pos: Var, neg: Var) -> Result<Var, LossError> {
    let (a, b) = (tape.shape(pos).0, tape.shape(neg).0);
    if a != b {
        return Err(LossError::Length { op: "bpr", a, b });
    }
    if a == 0 {
        return Err(LossError::Empty("bpr"));
    }
    let d = tape.sub(pos, neg)?;
    let ls = tape.log_sigmoid(d);
    let m = tape.mean(ls)?;
    Ok(tape.scale(m, -1.0))
}

/// `K[i][j] = exp(-‖x_i - x_j‖² / 2σ²)`.
pub fn rbf_gram(tape: &mut Tape, x: Var, sigma: f64) -> Result<Var, LossError> {
    if !(sigma > 0.0) {
        return Err(LossError::NonPositive("sigma"));
    }
    let d = tape.pairwise_sq_dist(x);
    let s = tape.scale(d, -1.0 / (2.0 * sigma * sigma));
    Ok(tape.exp(s))
}

/// `(n-1)^-2 Tr(K_X H K_Y H)`, computed as the sum of `(H K_X H) ⊙ K_Y`.
pub fn hsic_empirical(tape: &mut Tape, x: Var, y: Var, sigma: f64) -> Result<Var, LossError> {
    let (n, m) = (tape.shape(x).0, tape.shape(y).0);
    if n != m {
        return Err(LossError::Length { op: "hsic", a: n, b: m });
    }
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    let kx = rbf_gram(tape, x, sigma)?;
    let ky = rbf_gram(tape, y, sigma)?;
    let c = tape.double_center(kx)?;
    let p = tape.mul(c, ky)?;
    let s = tape.sum(p);
    let k = (n - 1) as f64;
    Ok(tape.scale(s, 1.0 / (k * k)))
}

/// Mean over behaviors of HSIC between gated and raw representations on
/// the sampled `nodes`.
pub fn ib_loss(tape: &mut Tape, pairs: &[(Var, Var)], nodes: &[usize], sigma: f64) -> Result<Var, LossError> {
    if pairs.is_empty() {
        return Err(LossError::Empty("ib"));
    }
    if nodes.len() < 2 {
        return Err(LossError::TooFewSamples(nodes.len()));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for &(gated, raw) in pairs {
        let a = tape.gather_rows(gated, nodes)?;
        let b = tape.gather_rows(raw, nodes)?;
        let h = hsic_empirical(tape, a, b, sigma)?;
        terms.push(h);
    }
    Ok(tape.mean_of(&terms)?)
}

/// Who competes with each anchor's positive in the InfoNCE denominator.
#[derive(Clone, Copy, Debug)]
pub enum Negatives<'a> {
    /// Every other anchor.
    InBatch,
    /// Explicit node set per anchor (aligned with `anchors`).
    Explicit(&'a [Vec<usize>]),
}

fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var, LossError> {
    tape.l2_norm_rows(x).map_err(|e| match e {
        DiffError::Domain { .. } => LossError::ZeroNorm,
        other => other.into(),
    })
}

/// InfoNCE between the two views of `anchors`:
/// mean over anchors of `-ln softmax(cos/τ)` at the anchor's own counterpart.
pub fn infonce_loss(
    tape: &mut Tape,
    z_tgt: Var,
    z_aux: Var,
    anchors: &[usize],
    negatives: Negatives<'_>,
    tau: f64,
) -> Result<Var, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::NonPositive("tau"));
    }
    if anchors.is_empty() {
        return Err(LossError::Empty("infonce"));
    }
    let (cands, mask): (Vec<usize>, Option<Vec<f64>>) = match negatives {
        Negatives::InBatch => (anchors.to_vec(), None),
        Negatives::Explicit(sets) => {
            if sets.len() != anchors.len() {
                return Err(LossError::Length {
                    op: "infonce negatives",
                    a: sets.len(),
                    b: anchors.len(),
                });
            }
            let all: BTreeSet<usize> = anchors.iter().chain(sets.iter().flatten()).copied().collect();
            let cands: Vec<usize> = all.into_iter().collect();
            let mut mask = vec![f64::NEG_INFINITY; anchors.len() * cands.len()];
            for (r, (&a, set)) in anchors.iter().zip(sets).enumerate() {
                for node in std::iter::once(a).chain(set.iter().copied()) {
                    let c = cands.binary_search(&node).unwrap();
                    mask[r * cands.len() + c] = 0.0;
                }
            }
            (cands, Some(mask))
        }
    };
    let t = tape.gather_rows(z_tgt, anchors)?;
    let t = normalize_rows(tape, t)?;
    let a = tape.gather_rows(z_aux, &cands)?;
    let a = normalize_rows(tape, a)?;
    let pos_aux = tape.gather_rows(z_aux, anchors)?;
    let pos_aux = normalize_rows(tape, pos_aux)?;

    let sim = tape.matmul_nt(t, a)?;
    let mut logits = tape.scale(sim, 1.0 / tau);
    if let Some(mask) = mask {
        let m = tape.constant(Tensor::new(anchors.len(), cands.len(), mask)?);
        logits = tape.add(logits, m)?;
    }
    let lse = tape.logsumexp_rows(logits)?;
    let pos = tape.row_dot(t, pos_aux)?;
    let pos = tape.scale(pos, 1.0 / tau);
    let per = tape.sub(lse, pos)?;
    Ok(tape.mean(per)?)
}

/// `½ (user-side + item-side)` in-batch InfoNCE. Item anchors are node rows.
pub fn contrastive_loss(
    tape: &mut Tape,
    z_tgt: Var,
    z_aux: Var,
    user_anchors: &[usize],
    item_anchors: &[usize],
    tau: f64,
) -> Result<Var, LossError> {
    let u = infonce_loss(tape, z_tgt, z_aux, user_anchors, Negatives::InBatch, tau)?;
    let i = infonce_loss(tape, z_tgt, z_aux, item_anchors, Negatives::InBatch, tau)?;
    let s = tape.add(u, i)?;
    Ok(tape.scale(s, 0.5))
}

/// Values of each term after a forward pass; disabled terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub bpr: f64,
    pub ib: f64,
    pub cl: f64,
    pub reg: f64,
    pub total: f64,
}

/// `bpr + β·ib + λ·cl + γ·Σθ²`. Terms passed as `None` are not computed.
pub fn total_loss(
    tape: &mut Tape,
    bpr: Var,
    ib: Option<Var>,
    cl: Option<Var>,
    params: &[Var],
    beta: f64,
    lambda: f64,
    gamma: f64,
) -> Result<(Var, LossTerms), LossError> {
    let mut terms = LossTerms {
        bpr: tape.value(bpr).item(),
        ..LossTerms::default()
    };
    if !terms.bpr.is_finite() {
        return Err(LossError::NonFinite("bpr"));
    }
    let mut total = bpr;
    if let Some(ib) = ib.filter(|_| beta != 0.0) {
        terms.ib = tape.value(ib).item();
        if !terms.ib.is_finite() {
            return Err(LossError::NonFinite("ib"));
        }
        let w = tape.scale(ib, beta);
        total = tape.add(total, w)?;
    }
    if let Some(cl) = cl.filter(|_| lambda != 0.0) {
        terms.cl = tape.value(cl).item();
        if !terms.cl.is_finite() {
            return Err(LossError::NonFinite("cl"));
        }
        let w = tape.scale(cl, lambda);
        total = tape.add(total, w)?;
    }
    if gamma != 0.0 && !params.is_empty() {
        let mut sq = Vec::with_capacity(params.len());
        for &p in params {
            let s = tape.square(p);
            sq.push(tape.sum(s));
        }
        let mut reg = sq[0];
        for &s in &sq[1..] {
            reg = tape.add(reg, s)?;
        }
        terms.reg = tape.value(reg).item();
        if !terms.reg.is_finite() {
            return Err(LossError::NonFinite("reg"));
        }
        let w = tape.scale(reg, gamma);
        total = tape.add(total, w)?;
    }
    terms.total = tape.value(total).item();
    if !terms.total.is_finite() {
        return Err(LossError::NonFinite("total"));
    }
    Ok((total, terms))
}
