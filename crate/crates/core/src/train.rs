//! Optimizer, schedules, and the two-stage training pipeline with every
//! ablation variant.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::batching::{build_batch, sample_anchor_sets, AnchorCount, AugmentConfig, AugmentedBatch, RawItem};
use crate::data::Dataset;
use crate::encoder::{ClassifierPass, CosineClassifier, Encoder, EncoderConfig, EncoderPass};
use crate::error::{PalError, Result};
use crate::losses::{
    ce_loss, ct_loss, feat_align_loss, kl_align_loss, kl_loss, logit_align_loss, supct_loss, ContrastiveBatchView,
    LabelSource, SoftLabel,
};
use crate::tensor::Tensor;

/// Scale `s` of the cosine classifier.
pub const COSINE_SCALE: f64 = 10.0;

/// Training scheme for one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// SupCT partner, then CE main with feature and logit alignment.
    #[serde(rename = "PAL")]
    Pal,
    #[serde(rename = "CE_only")]
    CeOnly,
    #[serde(rename = "SupCT_only")]
    SupCtOnly,
    #[serde(rename = "MultiTask")]
    MultiTask,
    #[serde(rename = "Mutual")]
    Mutual,
    #[serde(rename = "Reverse")]
    Reverse,
    #[serde(rename = "Partner_CT")]
    PartnerCt,
    #[serde(rename = "Partner_CE")]
    PartnerCe,
    #[serde(rename = "PAL_logit_only")]
    PalLogitOnly,
    #[serde(rename = "PAL_feat_only")]
    PalFeatOnly,
    #[serde(rename = "PAL_KL_logit")]
    PalKlLogit,
    #[serde(rename = "PAL_feat_KL")]
    PalFeatKl,
}

impl Variant {
    pub const ALL: [Variant; 12] = [
        Variant::Pal,
        Variant::CeOnly,
        Variant::SupCtOnly,
        Variant::MultiTask,
        Variant::Mutual,
        Variant::Reverse,
        Variant::PartnerCt,
        Variant::PartnerCe,
        Variant::PalLogitOnly,
        Variant::PalFeatOnly,
        Variant::PalKlLogit,
        Variant::PalFeatKl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pal => "PAL",
            Variant::CeOnly => "CE_only",
            Variant::SupCtOnly => "SupCT_only",
            Variant::MultiTask => "MultiTask",
            Variant::Mutual => "Mutual",
            Variant::Reverse => "Reverse",
            Variant::PartnerCt => "Partner_CT",
            Variant::PartnerCe => "Partner_CE",
            Variant::PalLogitOnly => "PAL_logit_only",
            Variant::PalFeatOnly => "PAL_feat_only",
            Variant::PalKlLogit => "PAL_KL_logit",
            Variant::PalFeatKl => "PAL_feat_KL",
        }
    }

    /// Objective used to train the partner, for variants that have one.
    pub fn partner_objective(self) -> Option<PartnerObjective> {
        match self {
            Variant::Pal | Variant::PalLogitOnly | Variant::PalFeatOnly | Variant::PalKlLogit | Variant::PalFeatKl => {
                Some(PartnerObjective::SupCt)
            }
            Variant::PartnerCt => Some(PartnerObjective::Ct),
            Variant::PartnerCe | Variant::Reverse => Some(PartnerObjective::Ce),
            _ => None,
        }
    }

    /// Alignment terms added to the main cross-entropy objective.
    pub fn alignment(self) -> Option<Alignment> {
        let (feat, logit) = match self {
            Variant::Pal | Variant::PartnerCt | Variant::PartnerCe => (true, LogitAlign::SoftLabel),
            Variant::PalLogitOnly => (false, LogitAlign::SoftLabel),
            Variant::PalFeatOnly => (true, LogitAlign::None),
            Variant::PalKlLogit => (false, LogitAlign::Kl),
            Variant::PalFeatKl => (true, LogitAlign::Kl),
            _ => return None,
        };
        Some(Alignment { feat, logit })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = PalError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            PalError::Parameter(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartnerObjective {
    SupCt,
    Ct,
    Ce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogitAlign {
    None,
    SoftLabel,
    Kl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub feat: bool,
    pub logit: LogitAlign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epoch: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Positive anchors per instance; all available when unset.
    pub n_pos: Option<usize>,
    pub n_neg: Option<usize>,
    /// Temperature of the partner soft labels; `tau` when unset.
    pub logit_tau: Option<f64>,
    /// Temperature of the KL teacher; `tau` when unset.
    pub kl_tau: Option<f64>,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            lr: 0.03,
            lr_decay_factor: 10.0,
            lr_decay_epoch: 60,
            batch_size: 64,
            tau: 0.5,
            warmup_epochs: 30,
            weight_decay: 5e-4,
            momentum: 0.0,
            n_pos: None,
            n_neg: None,
            logit_tau: None,
            kl_tau: None,
            seed: 0,
            variant: Variant::Pal,
        }
    }
}

impl TrainConfig {
    /// Shortened schedule used on the synthetic benchmark.
    pub fn desk() -> Self {
        Self { epochs: 30, lr: 0.3, lr_decay_epoch: 20, warmup_epochs: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PalError::Parameter(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad(format!("lr_decay_factor must be > 0, got {}", self.lr_decay_factor));
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.lr_decay_epoch > self.epochs {
            return bad(format!("lr_decay_epoch {} exceeds epochs {}", self.lr_decay_epoch, self.epochs));
        }
        if !(self.tau > 0.0) || [self.kl_tau, self.logit_tau].iter().flatten().any(|&t| !(t > 0.0)) {
            return bad("temperatures must be > 0".into());
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight_decay must be >= 0 and momentum in [0, 1)".into());
        }
        if self.n_pos == Some(0) || self.n_neg == Some(0) {
            return bad("n_pos and n_neg must be >= 1".into());
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: `lr` before the decay epoch, `lr / factor` after.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lr_decay_epoch || cfg.lr_decay_epoch >= cfg.epochs {
        cfg.lr
    } else {
        cfg.lr / cfg.lr_decay_factor
    }
}

/// Linear ramp of the logit-alignment weight from 0 to 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WarmupSchedule {
    pub warmup_epochs: usize,
}

impl WarmupSchedule {
    pub fn weight(&self, epoch: usize) -> f64 {
        if epoch >= self.warmup_epochs {
            1.0
        } else {
            epoch as f64 / self.warmup_epochs as f64
        }
    }
}

/// Plain SGD: `p <- p - lr * (g + weight_decay * p)`.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64, weight_decay: f64) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(PalError::Contract(format!("parameter {i} has no gradient")));
    }
    for p in params.iter_mut() {
        let g = p.take_grad().expect("checked");
        for (v, gv) in p.values_mut().iter_mut().zip(g) {
            *v -= lr * (gv + weight_decay * *v);
        }
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum over a fixed parameter list.
#[derive(Clone, Debug, Default)]
struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    fn step(&mut self, params: &mut [&mut Tensor], lr: f64, cfg: &TrainConfig) -> Result<()> {
        if cfg.momentum == 0.0 {
            return sgd_step(params, lr, cfg.weight_decay);
        }
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(PalError::Contract(format!("parameter {i} has no gradient")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            let g = p.take_grad().expect("checked");
            for ((v, gv), m) in p.values_mut().iter_mut().zip(g).zip(vel.iter_mut()) {
                *m = cfg.momentum * *m + gv + cfg.weight_decay * *v;
                *v -= lr * *m;
            }
        }
        Ok(())
    }
}

/// An encoder with an optional cosine classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub encoder: Encoder,
    pub classifier: Option<CosineClassifier>,
}

impl Network {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut ps: Vec<&mut Tensor> = self.encoder.params_mut().collect();
        if let Some(c) = &mut self.classifier {
            ps.push(c.weights_mut());
        }
        ps
    }
}

struct Trainable {
    net: Network,
    opt: Sgd,
}

impl Trainable {
    fn new(net: Network) -> Self {
        Self { net, opt: Sgd::default() }
    }

    fn absorb(&mut self, pass: &EncoderPass, clf: Option<&ClassifierPass>, grads: &mut crate::autodiff::Gradients) {
        self.net.encoder.absorb_grads(pass, grads);
        if let (Some(c), Some(p)) = (&mut self.net.classifier, clf) {
            c.absorb_grads(p, grads);
        }
    }

    fn step(&mut self, lr: f64, cfg: &TrainConfig) -> Result<()> {
        let mut ps = self.net.params_mut();
        self.opt.step(&mut ps, lr, cfg)?;
        if let Some(c) = &mut self.net.classifier {
            c.renormalize();
        }
        Ok(())
    }
}

/// One logged optimization step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_feat: f64,
    pub loss_logit: f64,
    pub w_logit: f64,
    pub skipped_positive_instances: usize,
    /// Supervised or unsupervised contrastive term.
    pub loss_con: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str =
        "epoch,step,lr,loss_total,loss_ce,loss_feat,loss_logit,w_logit,skipped_positive_instances,loss_con";

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.step,
                r.lr,
                r.loss_total,
                r.loss_ce,
                r.loss_feat,
                r.loss_logit,
                r.w_logit,
                r.skipped_positive_instances,
                r.loss_con
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Mean total loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.rows {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.loss_total;
            out[r.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 }).collect()
    }

    /// Last-epoch means of each component.
    pub fn final_components(&self) -> FinalLosses {
        let Some(last) = self.rows.last().map(|r| r.epoch) else {
            return FinalLosses::default();
        };
        let rows: Vec<&MetricsRow> = self.rows.iter().filter(|r| r.epoch == last).collect();
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        FinalLosses {
            total: mean(|r| r.loss_total),
            ce: mean(|r| r.loss_ce),
            con: mean(|r| r.loss_con),
            feat: mean(|r| r.loss_feat),
            logit: mean(|r| r.loss_logit),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FinalLosses {
    pub total: f64,
    pub ce: f64,
    pub con: f64,
    pub feat: f64,
    pub logit: f64,
}

/// Independent generator roles derived from the run seed. Variants that
/// share a role see identical streams, so comparisons are paired.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
enum Role {
    PartnerInit = 1,
    PartnerClassifier = 2,
    PartnerOrder = 3,
    PartnerAugment = 4,
    MainInit = 5,
    MainClassifier = 6,
    MainOrder = 7,
    MainAugment = 8,
    Anchors = 9,
    PeerInit = 10,
    PeerClassifier = 11,
}

fn role_rng(seed: u64, role: Role) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role as u64);
    rng
}

fn role_seed(seed: u64, role: Role) -> u64 {
    role_rng(seed, role).next_u64()
}

/// Builds an untrained network whose weights come from `seed` and `role`s.
fn fresh_network(enc: &EncoderConfig, classes: Option<usize>, seed: u64, init: Role, clf: Role) -> Result<Network> {
    let encoder = Encoder::new(EncoderConfig { seed: role_seed(seed, init), ..enc.clone() })?;
    let classifier =
        classes.map(|c| CosineClassifier::new(c, enc.embed_dim, COSINE_SCALE, role_seed(seed, clf))).transpose()?;
    Ok(Network { encoder, classifier })
}

/// Shuffled mini-batches over a split, plus the augmentation stream.
struct BatchStream<'a> {
    data: &'a Dataset,
    order_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    aug: AugmentConfig,
    batch_size: usize,
}

impl<'a> BatchStream<'a> {
    fn new(data: &'a Dataset, cfg: &TrainConfig, aug: AugmentConfig, order: Role, augment: Role) -> Self {
        Self {
            data,
            order_rng: role_rng(cfg.seed, order),
            aug_rng: role_rng(cfg.seed, augment),
            aug,
            batch_size: cfg.batch_size,
        }
    }

    fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        let mut ids: Vec<usize> = (0..self.data.len()).collect();
        ids.shuffle(&mut self.order_rng);
        ids.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn build(&mut self, ids: &[usize]) -> Result<AugmentedBatch> {
        let lo = self.data.label_min();
        let raw: Vec<RawItem<'_>> = ids
            .iter()
            .map(|&id| RawItem { id, input: self.data.input(id), label: self.data.labels()[id] - lo })
            .collect();
        build_batch(&raw, &mut self.aug_rng, &self.aug)
    }
}

/// Everything a training run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub metrics: MetricsLog,
    pub warnings: Vec<String>,
}

fn check_base(data: &Dataset) -> Result<Vec<String>> {
    if data.is_empty() {
        return Err(PalError::Parameter("training split is empty".into()));
    }
    let mut warnings = Vec::new();
    if data.num_classes_present() < 2 {
        warnings.push("training split has a single class; every pair in a batch is positive".into());
    }
    Ok(warnings)
}

/// Scalar handles of one step's loss terms.
#[derive(Default)]
struct StepTerms {
    ce: Option<Var>,
    con: Option<Var>,
    feat: Option<Var>,
    logit: Option<Var>,
    w_logit: f64,
    skipped: usize,
}

impl StepTerms {
    fn total(&self, g: &mut Graph) -> Result<Var> {
        let mut parts: Vec<Var> = [self.ce, self.con, self.feat].into_iter().flatten().collect();
        if let Some(l) = self.logit {
            parts.push(g.scale(l, self.w_logit));
        }
        let mut acc = *parts.first().ok_or_else(|| PalError::Contract("step has no loss term".into()))?;
        for &p in &parts[1..] {
            acc = g.add(acc, p)?;
        }
        Ok(acc)
    }

    fn row(&self, g: &Graph, total: Var, epoch: usize, step: usize, lr: f64) -> MetricsRow {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
        MetricsRow {
            epoch,
            step,
            lr,
            loss_total: g.scalar(total),
            loss_ce: val(self.ce),
            loss_feat: val(self.feat),
            loss_logit: val(self.logit),
            w_logit: self.w_logit,
            skipped_positive_instances: self.skipped,
            loss_con: val(self.con),
        }
    }
}

fn mean_of(g: &mut Graph, sum: Var, count: usize) -> Var {
    g.scale(sum, 1.0 / count.max(1) as f64)
}

/// CE of `logits` against batch labels, averaged over rows.
fn ce_term(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = ce_loss(g, logits, labels)?;
    Ok(mean_of(g, s, labels.len()))
}

fn contrastive_term(
    g: &mut Graph,
    z: Var,
    batch: &AugmentedBatch,
    objective: PartnerObjective,
    tau: f64,
    skipped: &mut usize,
) -> Result<Var> {
    let lv = match objective {
        PartnerObjective::SupCt => supct_loss(g, &ContrastiveBatchView::supervised(z, batch.labels(), tau))?,
        PartnerObjective::Ct => ct_loss(g, &ContrastiveBatchView::unsupervised(z, batch.len(), tau)?)?,
        PartnerObjective::Ce => return Err(PalError::Contract("cross-entropy is not a contrastive objective".into())),
    };
    *skipped += lv.skipped;
    Ok(mean_of(g, lv.value, lv.terms))
}

fn input_node(g: &mut Graph, batch: &AugmentedBatch) -> Result<Var> {
    g.constant(batch.len(), batch.dim(), batch.inputs().to_vec())
}

fn classes_of(data: &Dataset) -> usize {
    data.label_count()
}

/// Trains an encoder under a single objective: SupCT, CT, or CE with its
/// own cosine classifier. Used for partners and single-objective baselines.
fn train_single(
    data: &Dataset,
    enc: &EncoderConfig,
    aug: AugmentConfig,
    cfg: &TrainConfig,
    objective: PartnerObjective,
    roles: [Role; 4],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let warnings = check_base(data)?;
    let [init, clf_role, order, augment] = roles;
    let classes = (objective == PartnerObjective::Ce).then(|| classes_of(data));
    let mut model = Trainable::new(fresh_network(enc, classes, cfg.seed, init, clf_role)?);
    let mut stream = BatchStream::new(data, cfg, aug, order, augment);
    let mut metrics = MetricsLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        for ids in stream.epoch_batches() {
            let batch = stream.build(&ids)?;
            let mut g = Graph::new();
            let x = input_node(&mut g, &batch)?;
            let pass = model.net.encoder.forward(&mut g, x)?;
            let mut terms = StepTerms::default();
            let clf_pass = model.net.classifier.as_ref().map(|c| c.forward(&mut g));
            if let Some(cp) = &clf_pass {
                let logits = cp.logits(&mut g, pass.embeddings)?;
                terms.ce = Some(ce_term(&mut g, logits, batch.labels())?);
            } else {
                terms.con =
                    Some(contrastive_term(&mut g, pass.embeddings, &batch, objective, cfg.tau, &mut terms.skipped)?);
            }
            let total = terms.total(&mut g)?;
            metrics.rows.push(terms.row(&g, total, epoch, step, lr));
            let mut grads = g.backward(total)?;
            model.absorb(&pass, clf_pass.as_ref(), &mut grads);
            model.step(lr, cfg)?;
            step += 1;
        }
    }
    Ok(TrainOutcome { network: model.net, metrics, warnings })
}

/// Trains the partner encoder, rounds it to checkpoint precision, and
/// freezes it. CE partners keep their classifier.
pub fn train_partner(
    data: &Dataset,
    enc: &EncoderConfig,
    aug: AugmentConfig,
    cfg: &TrainConfig,
    objective: PartnerObjective,
) -> Result<TrainOutcome> {
    let roles = [Role::PartnerInit, Role::PartnerClassifier, Role::PartnerOrder, Role::PartnerAugment];
    let mut out = train_single(data, enc, aug, cfg, objective, roles)?;
    out.network.encoder.round_to_f32();
    out.network.encoder.freeze();
    Ok(out)
}

/// Partner embeddings of the other view of every batch row, with labels.
fn other_view(partner_pool: &[f64], dim: usize, batch: &AugmentedBatch) -> (Vec<f64>, Vec<usize>) {
    let map = batch.view_map();
    let z = map.iter().flat_map(|&j| partner_pool[j * dim..(j + 1) * dim].iter().copied()).collect();
    let labels = map.iter().map(|&j| batch.labels()[j]).collect();
    (z, labels)
}

/// Main-encoder objective `L_CE + [L_feat] + w(epoch) [L_logit]`. With no
/// alignment this is the CE-only baseline.
pub fn train_main(
    data: &Dataset,
    partner: Option<&Encoder>,
    enc: &EncoderConfig,
    aug: AugmentConfig,
    cfg: &TrainConfig,
    align: Alignment,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let warnings = check_base(data)?;
    let needs_partner = align.feat || align.logit != LogitAlign::None;
    let partner = match partner {
        Some(p) if !p.is_frozen() => {
            return Err(PalError::Contract("main training requires a frozen partner encoder".into()))
        }
        Some(p) if p.embed_dim() != enc.embed_dim => {
            return Err(PalError::Contract(format!(
                "partner embed_dim {} differs from main embed_dim {}",
                p.embed_dim(),
                enc.embed_dim
            )))
        }
        None if needs_partner => return Err(PalError::Contract("alignment needs a partner encoder".into())),
        p => p,
    };
    let classes = classes_of(data);
    let mut model = Trainable::new(fresh_network(enc, Some(classes), cfg.seed, Role::MainInit, Role::MainClassifier)?);
    let mut stream = BatchStream::new(data, cfg, aug, Role::MainOrder, Role::MainAugment);
    let mut anchor_rng = role_rng(cfg.seed, Role::Anchors);
    let warmup = WarmupSchedule { warmup_epochs: cfg.warmup_epochs };
    let (n_pos, n_neg) = (AnchorCount::from_option(cfg.n_pos), AnchorCount::from_option(cfg.n_neg));
    let kl_tau = cfg.kl_tau.unwrap_or(cfg.tau);
    let logit_tau = cfg.logit_tau.unwrap_or(cfg.tau);
    let dim = enc.embed_dim;
    let mut metrics = MetricsLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let w = warmup.weight(epoch);
        for ids in stream.epoch_batches() {
            let batch = stream.build(&ids)?;
            let n = batch.len();
            let mut g = Graph::new();
            let x = input_node(&mut g, &batch)?;
            let pass = model.net.encoder.forward(&mut g, x)?;
            let cp = model.net.classifier.as_ref().expect("main has a classifier").forward(&mut g);
            let logits = cp.logits(&mut g, pass.embeddings)?;
            let mut terms =
                StepTerms { ce: Some(ce_term(&mut g, logits, batch.labels())?), w_logit: w, ..StepTerms::default() };

            let mut pool = None;
            if align.feat {
                let p = partner.expect("checked");
                let anchors = sample_anchor_sets(p, &batch, n_pos, n_neg, &mut anchor_rng)?;
                let lv = feat_align_loss(&mut g, pass.embeddings, &anchors, cfg.tau)?;
                terms.skipped += lv.skipped;
                terms.feat = Some(mean_of(&mut g, lv.value, lv.terms));
                pool = Some(anchors.pool().to_vec());
            }
            if align.logit != LogitAlign::None {
                let p = partner.expect("checked");
                let pool = match pool {
                    Some(v) => v,
                    None => p.embed_batch(batch.inputs(), n)?,
                };
                let (zp, lp) = other_view(&pool, dim, &batch);
                let s = match align.logit {
                    LogitAlign::SoftLabel => {
                        logit_align_loss(&mut g, &cp, &zp, &lp, logits, batch.labels(), logit_tau)?
                    }
                    LogitAlign::Kl => kl_align_loss(&mut g, &cp, &zp, &lp, logits, batch.labels(), kl_tau)?,
                    LogitAlign::None => unreachable!(),
                };
                terms.logit = Some(mean_of(&mut g, s, n));
            }
            let total = terms.total(&mut g)?;
            metrics.rows.push(terms.row(&g, total, epoch, step, lr));
            let mut grads = g.backward(total)?;
            model.absorb(&pass, Some(&cp), &mut grads);
            model.step(lr, cfg)?;
            step += 1;
        }
    }
    Ok(TrainOutcome { network: model.net, metrics, warnings })
}

/// CE and SupCT on one network and classifier.
fn train_multitask(data: &Dataset, enc: &EncoderConfig, aug: AugmentConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let warnings = check_base(data)?;
    let mut model =
        Trainable::new(fresh_network(enc, Some(classes_of(data)), cfg.seed, Role::MainInit, Role::MainClassifier)?);
    let mut stream = BatchStream::new(data, cfg, aug, Role::MainOrder, Role::MainAugment);
    let mut metrics = MetricsLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        for ids in stream.epoch_batches() {
            let batch = stream.build(&ids)?;
            let mut g = Graph::new();
            let x = input_node(&mut g, &batch)?;
            let pass = model.net.encoder.forward(&mut g, x)?;
            let cp = model.net.classifier.as_ref().expect("classifier").forward(&mut g);
            let logits = cp.logits(&mut g, pass.embeddings)?;
            let mut terms = StepTerms { ce: Some(ce_term(&mut g, logits, batch.labels())?), ..StepTerms::default() };
            terms.con = Some(contrastive_term(
                &mut g,
                pass.embeddings,
                &batch,
                PartnerObjective::SupCt,
                cfg.tau,
                &mut terms.skipped,
            )?);
            let total = terms.total(&mut g)?;
            metrics.rows.push(terms.row(&g, total, epoch, step, lr));
            let mut grads = g.backward(total)?;
            model.absorb(&pass, Some(&cp), &mut grads);
            model.step(lr, cfg)?;
            step += 1;
        }
    }
    Ok(TrainOutcome { network: model.net, metrics, warnings })
}

/// Detached class distributions of `logits` (rows) at temperature 1.
fn detached_probs(g: &Graph, logits: Var) -> Result<Vec<SoftLabel>> {
    let (_, c) = g.shape(logits);
    g.value(logits).chunks_exact(c).map(|l| SoftLabel::from_logits(l, 1.0, LabelSource::Partner)).collect()
}

/// Outcome of jointly trained peer networks.
#[derive(Clone, Debug)]
pub struct MutualOutcome {
    /// The SupCT peer.
    pub contrastive: Network,
    /// The CE peer, used for evaluation.
    pub ce: TrainOutcome,
}

/// Two networks trained from scratch on the same batches: a SupCT peer and a
/// CE peer, each pulled toward the other's class distribution with a KL term.
pub fn train_mutual(
    data: &Dataset,
    enc: &EncoderConfig,
    aug: AugmentConfig,
    cfg: &TrainConfig,
) -> Result<MutualOutcome> {
    cfg.validate()?;
    let warnings = check_base(data)?;
    let classes = classes_of(data);
    let mut ce_net = Trainable::new(fresh_network(enc, Some(classes), cfg.seed, Role::MainInit, Role::MainClassifier)?);
    let mut con_net =
        Trainable::new(fresh_network(enc, Some(classes), cfg.seed, Role::PeerInit, Role::PeerClassifier)?);
    let mut stream = BatchStream::new(data, cfg, aug, Role::MainOrder, Role::MainAugment);
    let mut metrics = MetricsLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        for ids in stream.epoch_batches() {
            let batch = stream.build(&ids)?;
            let n = batch.len();
            let mut g = Graph::new();
            let x = input_node(&mut g, &batch)?;

            let pa = con_net.net.encoder.forward(&mut g, x)?;
            let ca = con_net.net.classifier.as_ref().expect("classifier").forward(&mut g);
            let la = ca.logits(&mut g, pa.embeddings)?;
            let pb = ce_net.net.encoder.forward(&mut g, x)?;
            let cb = ce_net.net.classifier.as_ref().expect("classifier").forward(&mut g);
            let lb = cb.logits(&mut g, pb.embeddings)?;
            let (prob_a, prob_b) = (detached_probs(&g, la)?, detached_probs(&g, lb)?);

            let mut terms = StepTerms { w_logit: 1.0, ..StepTerms::default() };
            terms.con = Some(contrastive_term(
                &mut g,
                pa.embeddings,
                &batch,
                PartnerObjective::SupCt,
                cfg.tau,
                &mut terms.skipped,
            )?);
            terms.ce = Some(ce_term(&mut g, lb, batch.labels())?);
            let kl_a = kl_loss(&mut g, &prob_b, la)?.value;
            let kl_b = kl_loss(&mut g, &prob_a, lb)?.value;
            let kl = g.add(kl_a, kl_b)?;
            terms.logit = Some(mean_of(&mut g, kl, n));
            let total = terms.total(&mut g)?;
            metrics.rows.push(terms.row(&g, total, epoch, step, lr));
            let mut grads = g.backward(total)?;
            con_net.absorb(&pa, Some(&ca), &mut grads);
            ce_net.absorb(&pb, Some(&cb), &mut grads);
            con_net.step(lr, cfg)?;
            ce_net.step(lr, cfg)?;
            step += 1;
        }
    }
    Ok(MutualOutcome { contrastive: con_net.net, ce: TrainOutcome { network: ce_net.net, metrics, warnings } })
}

/// SupCT training guided by feature alignment to a frozen CE-trained partner.
fn train_reverse_main(
    data: &Dataset,
    partner: &Encoder,
    enc: &EncoderConfig,
    aug: AugmentConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let warnings = check_base(data)?;
    if !partner.is_frozen() {
        return Err(PalError::Contract("reverse training requires a frozen partner encoder".into()));
    }
    let mut model = Trainable::new(fresh_network(enc, None, cfg.seed, Role::MainInit, Role::MainClassifier)?);
    let mut stream = BatchStream::new(data, cfg, aug, Role::MainOrder, Role::MainAugment);
    let mut anchor_rng = role_rng(cfg.seed, Role::Anchors);
    let (n_pos, n_neg) = (AnchorCount::from_option(cfg.n_pos), AnchorCount::from_option(cfg.n_neg));
    let mut metrics = MetricsLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        for ids in stream.epoch_batches() {
            let batch = stream.build(&ids)?;
            let mut g = Graph::new();
            let x = input_node(&mut g, &batch)?;
            let pass = model.net.encoder.forward(&mut g, x)?;
            let mut terms = StepTerms::default();
            terms.con = Some(contrastive_term(
                &mut g,
                pass.embeddings,
                &batch,
                PartnerObjective::SupCt,
                cfg.tau,
                &mut terms.skipped,
            )?);
            let anchors = sample_anchor_sets(partner, &batch, n_pos, n_neg, &mut anchor_rng)?;
            let lv = feat_align_loss(&mut g, pass.embeddings, &anchors, cfg.tau)?;
            terms.skipped += lv.skipped;
            terms.feat = Some(mean_of(&mut g, lv.value, lv.terms));
            let total = terms.total(&mut g)?;
            metrics.rows.push(terms.row(&g, total, epoch, step, lr));
            let mut grads = g.backward(total)?;
            model.absorb(&pass, None, &mut grads);
            model.step(lr, cfg)?;
            step += 1;
        }
    }
    Ok(TrainOutcome { network: model.net, metrics, warnings })
}

/// Result of [`train_variant`]: the evaluated network and, for two-stage
/// variants, the frozen partner.
#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub main: TrainOutcome,
    pub partner: Option<TrainOutcome>,
}

impl VariantOutcome {
    /// The encoder used at inference.
    pub fn encoder(&self) -> &Encoder {
        &self.main.network.encoder
    }
}

/// Runs `cfg.variant` end to end. When `partner` is given it is used instead
/// of training one.
pub fn train_variant(
    data: &Dataset,
    enc: &EncoderConfig,
    aug: AugmentConfig,
    cfg: &TrainConfig,
    partner: Option<&Encoder>,
) -> Result<VariantOutcome> {
    cfg.validate()?;
    aug.validate()?;
    let variant = cfg.variant;
    let mut trained_partner = None;
    let partner_enc = match (variant.partner_objective(), partner) {
        (Some(_), Some(p)) => Some(p.clone()),
        (Some(obj), None) => {
            let out = train_partner(data, enc, aug, cfg, obj)?;
            let e = out.network.encoder.clone();
            trained_partner = Some(out);
            Some(e)
        }
        (None, _) => None,
    };
    let main = match variant {
        Variant::CeOnly => train_main(data, None, enc, aug, cfg, Alignment { feat: false, logit: LogitAlign::None })?,
        Variant::SupCtOnly => {
            let roles = [Role::MainInit, Role::MainClassifier, Role::MainOrder, Role::MainAugment];
            train_single(data, enc, aug, cfg, PartnerObjective::SupCt, roles)?
        }
        Variant::MultiTask => train_multitask(data, enc, aug, cfg)?,
        Variant::Mutual => train_mutual(data, enc, aug, cfg)?.ce,
        Variant::Reverse => train_reverse_main(data, partner_enc.as_ref().expect("partner"), enc, aug, cfg)?,
        v => {
            let align = v.alignment().expect("alignment variants");
            train_main(data, partner_enc.as_ref(), enc, aug, cfg, align)?
        }
    };
    Ok(VariantOutcome { variant, main, partner: trained_partner })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.03);
        assert_abs_diff_eq!(lr_at(60, &cfg), 0.003, epsilon = 1e-15);
        assert_eq!(lr_at(59, &cfg), 0.03);
        let flat = TrainConfig { lr_decay_epoch: 90, ..cfg };
        assert!((0..90).all(|e| lr_at(e, &flat) == 0.03));
    }

    #[test]
    fn warmup_shape() {
        let w = WarmupSchedule { warmup_epochs: 30 };
        assert_eq!(w.weight(0), 0.0);
        assert_eq!(w.weight(15), 0.5);
        assert_eq!(w.weight(30), 1.0);
        assert_eq!(w.weight(80), 1.0);
        assert_eq!(WarmupSchedule { warmup_epochs: 0 }.weight(0), 1.0);
    }

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::scalar(1.0).with_grad();
        p.set_grad(vec![2.0]).unwrap();
        sgd_step(&mut [&mut p], 0.1, 0.0).unwrap();
        assert_abs_diff_eq!(p.values()[0], 0.8, epsilon = 1e-15);

        let mut q = Tensor::vector(vec![0.3, -0.7]).unwrap().with_grad();
        q.set_grad(vec![5.0, 5.0]).unwrap();
        sgd_step(&mut [&mut q], 0.0, 0.0).unwrap();
        assert_eq!(q.values(), &[0.3, -0.7]);

        let err = sgd_step(&mut [&mut q], 0.1, 0.0).unwrap_err();
        assert!(matches!(err, PalError::Contract(_)));
    }

    #[test]
    fn sgd_contracts_a_quadratic_bowl() {
        let mut p = Tensor::vector(vec![3.0, -4.0]).unwrap().with_grad();
        for _ in 0..50 {
            let g: Vec<f64> = p.values().iter().map(|v| 2.0 * v).collect();
            p.set_grad(g).unwrap();
            sgd_step(&mut [&mut p], 0.1, 0.0).unwrap();
        }
        let norm = p.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 5.0 * 0.8f64.powi(50), epsilon = 1e-6);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("PAL+".parse::<Variant>(), Err(PalError::Parameter(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { warmup_epochs: 31, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { lr_decay_epoch: 31, ..TrainConfig::desk() }.validate().is_err());
    }
}
