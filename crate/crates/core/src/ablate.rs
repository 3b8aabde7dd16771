//! Ablation grids: training-scheme, partner-objective and alignment-loss
//! tables, each row trained and evaluated on 1-shot and 5-shot episodes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::batching::AugmentConfig;
use crate::data::Dataset;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{PalError, Result};
use crate::eval::{evaluate, EpisodeSpec};
use crate::par::{map_indexed_jobs, Exec};
use crate::train::{train_partner, train_variant, FinalLosses, PartnerObjective, TrainConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationTable {
    /// Ways of combining the contrastive and cross-entropy objectives.
    Schemes,
    /// Objective used to train the partner.
    Partners,
    /// Alignment losses on the main encoder.
    Alignments,
}

impl AblationTable {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            3 => Ok(Self::Schemes),
            4 => Ok(Self::Partners),
            5 => Ok(Self::Alignments),
            _ => Err(PalError::Parameter(format!("unknown ablation table {n}; expected 3, 4 or 5"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Self::Schemes => 3,
            Self::Partners => 4,
            Self::Alignments => 5,
        }
    }

    pub fn variants(self) -> &'static [Variant] {
        use Variant::*;
        match self {
            Self::Schemes => &[CeOnly, SupCtOnly, MultiTask, Mutual, Reverse, Pal],
            Self::Partners => &[CeOnly, PartnerCt, PartnerCe, Pal],
            Self::Alignments => &[CeOnly, PalLogitOnly, PalKlLogit, PalFeatOnly, Pal, PalFeatKl],
        }
    }
}

/// One trained and evaluated variant.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub acc_1shot: f64,
    pub ci_1shot: f64,
    pub acc_5shot: f64,
    pub ci_5shot: f64,
    pub losses: FinalLosses,
}

/// Shared inputs of an ablation run.
#[derive(Clone, Debug)]
pub struct AblationSetup<'a> {
    pub base: &'a Dataset,
    pub novel: &'a Dataset,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    /// Episode shape; `k` is replaced by 1 and 5.
    pub episodes: EpisodeSpec,
    pub eval_seed: u64,
}

fn evaluate_row(setup: &AblationSetup<'_>, variant: Variant, partner: Option<&Encoder>) -> Result<AblationRow> {
    let cfg = TrainConfig { variant, ..setup.train.clone() };
    let out = train_variant(setup.base, &setup.encoder, setup.augment, &cfg, partner)?;
    let enc = out.encoder();
    let one = evaluate(enc, setup.novel, &EpisodeSpec { k: 1, ..setup.episodes }, setup.eval_seed, Exec::Sequential)?;
    let five = evaluate(enc, setup.novel, &EpisodeSpec { k: 5, ..setup.episodes }, setup.eval_seed, Exec::Sequential)?;
    Ok(AblationRow {
        variant,
        acc_1shot: one.mean_accuracy,
        ci_1shot: one.ci95,
        acc_5shot: five.mean_accuracy,
        ci_5shot: five.ci95,
        losses: out.main.metrics.final_components(),
    })
}

/// Trains every row of `table`, up to `jobs` at a time. Partners are
/// trained once per objective and shared by the rows that use them.
pub fn run_table(table: AblationTable, setup: &AblationSetup<'_>, jobs: usize) -> Result<Vec<AblationRow>> {
    let variants = table.variants();
    let mut objectives: Vec<PartnerObjective> = Vec::new();
    for v in variants {
        if let Some(o) = v.partner_objective() {
            if !objectives.contains(&o) {
                objectives.push(o);
            }
        }
    }
    let partners = map_indexed_jobs(jobs, objectives.len(), |i| {
        train_partner(setup.base, &setup.encoder, setup.augment, &setup.train, objectives[i]).map(|o| o.network.encoder)
    });
    let mut by_objective = BTreeMap::new();
    for (o, p) in objectives.iter().zip(partners) {
        by_objective.insert(format!("{o:?}"), p?);
    }
    let rows = map_indexed_jobs(jobs, variants.len(), |i| {
        let v = variants[i];
        let partner = v.partner_objective().map(|o| &by_objective[&format!("{o:?}")]);
        evaluate_row(setup, v, partner)
    });
    rows.into_iter().collect()
}

pub const CSV_HEADER: &str =
    "variant,acc_1shot,ci95_1shot,acc_5shot,ci95_5shot,loss_total,loss_ce,loss_con,loss_feat,loss_logit";

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.losses;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant, r.acc_1shot, r.ci_1shot, r.acc_5shot, r.ci_5shot, l.total, l.ce, l.con, l.feat, l.logit
        );
    }
    s
}

pub fn write_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, rows_to_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_list_their_variants() {
        assert_eq!(AblationTable::from_number(3).unwrap().variants().len(), 6);
        assert_eq!(AblationTable::from_number(4).unwrap().variants().len(), 4);
        let five: Vec<&str> = AblationTable::Alignments.variants().iter().map(|v| v.name()).collect();
        assert_eq!(five, ["CE_only", "PAL_logit_only", "PAL_KL_logit", "PAL_feat_only", "PAL", "PAL_feat_KL"]);
        assert!(AblationTable::from_number(6).is_err());
    }
}
