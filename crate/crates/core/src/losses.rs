//! Training objectives. Batch losses return sums over instances; callers
//! decide how to normalize.

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::batching::{AnchorSets, PositiveMode, PositiveSets};
use crate::encoder::ClassifierPass;
use crate::error::{dim_err, PalError, Result};
use crate::numeric::{cross_entropy, entropy, softmax_temperature};
use crate::tensor::{pairwise_dot, pairwise_sum};

/// Floor applied to student probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const UNIT_TOL: f64 = 1e-6;

/// A scalar loss node plus bookkeeping about skipped instances.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub value: Var,
    /// Instances dropped because their positive set was empty.
    pub skipped: usize,
    /// Instances that contributed a term.
    pub terms: usize,
}

/// Features, positives and temperature for a contrastive loss.
#[derive(Clone, Debug)]
pub struct ContrastiveBatchView {
    /// `2B x d`, unit rows.
    pub features: Var,
    pub positives: PositiveSets,
    pub tau: f64,
}

impl ContrastiveBatchView {
    pub fn supervised(features: Var, labels: &[usize], tau: f64) -> Self {
        Self { features, positives: PositiveSets::from_labels(labels), tau }
    }

    pub fn unsupervised(features: Var, rows: usize, tau: f64) -> Result<Self> {
        Ok(Self { features, positives: PositiveSets::view_pairs(rows)?, tau })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(PalError::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

/// Rows must be unit vectors, or exactly zero for degenerate embeddings.
fn check_unit_rows(op: &str, values: &[f64], dim: usize) -> Result<()> {
    for (i, row) in values.chunks_exact(dim).enumerate() {
        let n = pairwise_dot(row, row).sqrt();
        if (n - 1.0).abs() > UNIT_TOL && n != 0.0 {
            return Err(PalError::Contract(format!("{op}: row {i} has norm {n}, expected unit")));
        }
    }
    Ok(())
}

/// Shared contrastive core over a similarity matrix `sims` (`n x p`, already
/// divided by the temperature):
/// `sum_i -1/|P_i| sum_{j in P_i} (sims_ij - lse_{a in C_i} sims_ia)`.
fn contrastive_from_sims(
    g: &mut Graph,
    sims: Var,
    candidates: &[Vec<usize>],
    positives: &[Vec<usize>],
) -> Result<LossValue> {
    let (n, p) = g.shape(sims);
    let mut mask = vec![false; n * p];
    let mut lse_w = vec![0.0; n];
    let mut pos_w = vec![0.0; n * p];
    let mut skipped = 0;
    for i in 0..n {
        let row_mask = &mut mask[i * p..(i + 1) * p];
        if positives[i].is_empty() {
            skipped += 1;
            // Keeps the masked log-sum-exp well defined; the row has zero weight.
            row_mask.fill(true);
            continue;
        }
        for &a in &candidates[i] {
            row_mask[a] = true;
        }
        lse_w[i] = 1.0;
        let w = 1.0 / positives[i].len() as f64;
        for &j in &positives[i] {
            pos_w[i * p + j] += w;
        }
    }
    let lse = g.log_sum_exp_rows(sims, Some(Arc::from(mask)))?;
    let denom = g.weighted_sum(lse, Arc::from(lse_w))?;
    let numer = g.weighted_sum(sims, Arc::from(pos_w))?;
    let value = g.sub(denom, numer)?;
    Ok(LossValue { value, skipped, terms: n - skipped })
}

fn contrastive(g: &mut Graph, view: &ContrastiveBatchView) -> Result<LossValue> {
    check_tau(view.tau)?;
    let (n, d) = g.shape(view.features);
    if view.positives.len() != n {
        return Err(dim_err("contrastive", format!("{} positive sets for {n} rows", view.positives.len())));
    }
    check_unit_rows("contrastive", g.value(view.features), d)?;
    let raw = g.matmul_nt(view.features, view.features)?;
    let sims = g.scale(raw, 1.0 / view.tau);
    let candidates: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&a| a != i).collect()).collect();
    let positives: Vec<Vec<usize>> = view.positives.iter().map(<[usize]>::to_vec).collect();
    contrastive_from_sims(g, sims, &candidates, &positives)
}

/// Supervised contrastive loss, summed over instances. Instances without
/// positives are skipped and counted.
pub fn supct_loss(g: &mut Graph, view: &ContrastiveBatchView) -> Result<LossValue> {
    contrastive(g, view)
}

/// Unsupervised contrastive loss: the only positive is the other view.
pub fn ct_loss(g: &mut Graph, view: &ContrastiveBatchView) -> Result<LossValue> {
    if view.positives.mode() != PositiveMode::Unsupervised {
        return Err(PalError::Contract("ct_loss needs view-pair positives".into()));
    }
    contrastive(g, view)
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(dim_err("ce_loss", format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(PalError::Index { label, classes });
    }
    Ok(())
}

/// Hard-label cross-entropy summed over rows of `logits`.
pub fn ce_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = g.shape(logits);
    check_labels(labels, n, c)?;
    let mut w = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        w[i * c + y] = -1.0;
    }
    let ls = g.log_softmax_rows(logits);
    g.weighted_sum(ls, Arc::from(w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSource {
    Partner,
    Main,
}

/// A probability vector over base classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel {
    probs: Vec<f64>,
    source: LabelSource,
}

impl SoftLabel {
    pub fn new(probs: Vec<f64>, source: LabelSource) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(PalError::Domain("soft label entries must be non-negative".into()));
        }
        let s = pairwise_sum(&probs);
        if (s - 1.0).abs() > 1e-9 {
            return Err(PalError::Domain(format!("soft label sums to {s}")));
        }
        Ok(Self { probs, source })
    }

    /// `softmax(logits / tau)`.
    pub fn from_logits(logits: &[f64], tau: f64, source: LabelSource) -> Result<Self> {
        Ok(Self { probs: softmax_temperature(logits, tau)?, source })
    }

    pub fn one_hot(label: usize, classes: usize, source: LabelSource) -> Result<Self> {
        if label >= classes {
            return Err(PalError::Index { label, classes });
        }
        let mut probs = vec![0.0; classes];
        probs[label] = 1.0;
        Ok(Self { probs, source })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn source(&self) -> LabelSource {
        self.source
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.probs)
    }
}

fn stack_targets(targets: &[SoftLabel], rows: usize, classes: usize) -> Result<Vec<f64>> {
    if targets.len() != rows {
        return Err(dim_err("soft_cross_entropy", format!("{} targets for {rows} rows", targets.len())));
    }
    if let Some(t) = targets.iter().find(|t| t.classes() != classes) {
        return Err(dim_err(
            "soft_cross_entropy",
            format!("target over {} classes, logits over {classes}", t.classes()),
        ));
    }
    Ok(targets.iter().flat_map(|t| t.probs.iter().copied()).collect())
}

/// `sum_rows H(p_target, softmax(logits))`. Targets are constants.
pub fn soft_cross_entropy(g: &mut Graph, targets: &[SoftLabel], logits: Var) -> Result<Var> {
    let (n, c) = g.shape(logits);
    let p = stack_targets(targets, n, c)?;
    let ls = g.log_softmax_rows(logits);
    let w: Vec<f64> = p.iter().map(|x| -x).collect();
    g.weighted_sum(ls, Arc::from(w))
}

/// KL divergence with constant teachers and a student given by logits:
/// `sum_rows sum_c p_t(c) (log p_t(c) - log softmax(logits)(c))`.
#[derive(Clone, Copy, Debug)]
pub struct KlValue {
    pub value: Var,
    /// Entries where the teacher has mass but the student probability is
    /// below [`PROB_FLOOR`].
    pub floored: usize,
}

pub fn kl_loss(g: &mut Graph, teachers: &[SoftLabel], student_logits: Var) -> Result<KlValue> {
    let (n, c) = g.shape(student_logits);
    let p = stack_targets(teachers, n, c)?;
    let ls = g.log_softmax_rows(student_logits);
    let floored = p.iter().zip(g.value(ls)).filter(|(&pt, &lq)| pt > 0.0 && lq < PROB_FLOOR.ln()).count();
    // The student side is computed in log space, which is exact where the
    // probability form would need the floor.
    let log_pt: Vec<f64> = p.iter().map(|&x| if x > 0.0 { x.ln() } else { 0.0 }).collect();
    let lt = g.constant(n, c, log_pt)?;
    let diff = g.sub(lt, ls)?;
    let value = g.weighted_sum(diff, Arc::from(p))?;
    Ok(KlValue { value, floored })
}

/// Probability-space KL with the student floored at [`PROB_FLOOR`].
/// Returns the value and the number of floored entries.
pub fn kl_divergence(p_t: &SoftLabel, p_s: &SoftLabel) -> Result<(f64, usize)> {
    if p_t.classes() != p_s.classes() {
        return Err(dim_err("kl_divergence", format!("{} vs {} classes", p_t.classes(), p_s.classes())));
    }
    let mut floored = 0;
    let terms: Vec<f64> = p_t
        .probs
        .iter()
        .zip(&p_s.probs)
        .map(|(&t, &s)| {
            if t == 0.0 {
                return 0.0;
            }
            if s < PROB_FLOOR {
                floored += 1;
            }
            t * (t.ln() - s.max(PROB_FLOOR).ln())
        })
        .collect();
    Ok((pairwise_sum(&terms), floored))
}

/// `H(p, q)` on soft labels.
pub fn soft_label_cross_entropy(p: &SoftLabel, q: &SoftLabel) -> Result<f64> {
    Ok(cross_entropy(&p.probs, &q.probs, PROB_FLOOR)?.0)
}

/// Partner soft labels: `softmax(cosine_logits(z_partner) / tau)` read from
/// the shared classifier pass, detached from the graph.
pub fn partner_soft_labels(
    g: &Graph,
    clf: &ClassifierPass,
    z_partner: &[f64],
    rows: usize,
    tau: f64,
) -> Result<Vec<SoftLabel>> {
    let logits = clf.logits_detached(g, z_partner, rows)?;
    let classes = logits.len() / rows;
    logits.chunks_exact(classes).map(|l| SoftLabel::from_logits(l, tau, LabelSource::Partner)).collect()
}

fn check_aligned_rows(what: &'static str, n: usize, partner_labels: &[usize], main_labels: &[usize]) -> Result<()> {
    if partner_labels.len() != n || main_labels.len() != n {
        return Err(dim_err(
            what,
            format!("{n} main rows, {} partner labels, {} main labels", partner_labels.len(), main_labels.len()),
        ));
    }
    if let Some(i) = (0..n).find(|&i| partner_labels[i] != main_labels[i]) {
        return Err(PalError::Contract(format!(
            "{what} pairs row {i} of class {} with a partner view of class {}",
            main_labels[i], partner_labels[i]
        )));
    }
    Ok(())
}

/// Tempered log-probabilities and probabilities of the partner embeddings
/// under the shared classifier pass. The embeddings are constants; the
/// classifier weights are not.
fn teacher_distribution(
    g: &mut Graph,
    clf: &ClassifierPass,
    z_partner: &[f64],
    n: usize,
    tau: f64,
) -> Result<(Var, Var)> {
    let d = z_partner.len() / n.max(1);
    let zp = g.constant(n, d, z_partner.to_vec())?;
    let teacher_logits = clf.logits(g, zp)?;
    let scaled = g.scale(teacher_logits, 1.0 / tau);
    let lt = g.log_softmax_rows(scaled);
    let pt = g.exp(lt);
    Ok((lt, pt))
}

/// Logit-level alignment: cross-entropy `H(p_t, p_s)` between the partner's
/// soft labels for `x'` and the main prediction for `x`, summed over rows.
/// Row `i` of `z_partner` must share its class with row `i` of `logits_main`.
///
/// The partner embeddings are constant, but `p_t` is read through the shared
/// classifier, so the classifier weights receive gradient from both sides.
#[allow(clippy::too_many_arguments)]
pub fn logit_align_loss(
    g: &mut Graph,
    clf: &ClassifierPass,
    z_partner: &[f64],
    partner_labels: &[usize],
    logits_main: Var,
    main_labels: &[usize],
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let (n, _) = g.shape(logits_main);
    check_aligned_rows("logit_align", n, partner_labels, main_labels)?;
    let (_, pt) = teacher_distribution(g, clf, z_partner, n, tau)?;
    let ls = g.log_softmax_rows(logits_main);
    let prod = g.mul(pt, ls)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0))
}

/// KL logit alignment `KL(p_t || p_s) = -H(p_t) + H(p_t, p_s)`, with the
/// partner's distribution read through the shared classifier as in
/// [`logit_align_loss`]. The extra `-H(p_t)` term pushes the classifier
/// towards confident partner predictions.
#[allow(clippy::too_many_arguments)]
pub fn kl_align_loss(
    g: &mut Graph,
    clf: &ClassifierPass,
    z_partner: &[f64],
    partner_labels: &[usize],
    logits_main: Var,
    main_labels: &[usize],
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let (n, _) = g.shape(logits_main);
    check_aligned_rows("kl_align", n, partner_labels, main_labels)?;
    let (lt, pt) = teacher_distribution(g, clf, z_partner, n, tau)?;
    let ls = g.log_softmax_rows(logits_main);
    let diff = g.sub(lt, ls)?;
    let prod = g.mul(pt, diff)?;
    Ok(g.sum(prod))
}

/// Feature-level alignment of main embeddings `z_main` (`n x d`, unit rows)
/// against constant partner anchors, summed over rows.
pub fn feat_align_loss(g: &mut Graph, z_main: Var, anchors: &AnchorSets, tau: f64) -> Result<LossValue> {
    check_tau(tau)?;
    let (n, d) = g.shape(z_main);
    if anchors.len() != n || anchors.dim() != d {
        return Err(dim_err(
            "feat_align",
            format!("{n}x{d} main features vs {} anchor rows of dim {}", anchors.len(), anchors.dim()),
        ));
    }
    check_unit_rows("feat_align", g.value(z_main), d)?;
    check_unit_rows("feat_align anchors", anchors.pool(), d)?;
    let pool = g.constant(anchors.pool_len(), d, anchors.pool().to_vec())?;
    let raw = g.matmul_nt(z_main, pool)?;
    let sims = g.scale(raw, 1.0 / tau);
    let candidates: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut c: Vec<usize> = anchors.positive_indices(i).to_vec();
            c.extend(anchors.negative_indices(i));
            c
        })
        .collect();
    let positives: Vec<Vec<usize>> = (0..n).map(|i| anchors.positive_indices(i).to_vec()).collect();
    contrastive_from_sims(g, sims, &candidates, &positives)
}
