//! One question end to end: maps, proposals, ranking, plan.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PixelRect;
use crate::inference_plan::{plan_type1, plan_type2, InferencePlan, PlanConfig, PlanError};
use crate::metrics::EvalRecord;
use crate::ranking::{
    fp_report, rank_and_select_type1, select_type2, ExistenceOracle, FpReport, MergedRegion,
    QuerySession, RankingConfig, RankingError,
};
use crate::relevance_map::{build_object_map, MapError, RelevanceConfig, RelevanceMap};
use crate::roi_proposal::{propose, ProposalConfig, ProposalConfigError, RoiProposal};
use crate::tensor_io::{DumpHeader, QuestionType, TokenDump};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub relevance: RelevanceConfig,
    pub proposal: ProposalConfig,
    pub ranking: RankingConfig,
    pub plan: PlanConfig,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("relevance map: {0}")]
    Map(#[from] MapError),
    #[error("proposal config: {0}")]
    Proposal(#[from] ProposalConfigError),
    #[error("ranking: {0}")]
    Ranking(#[from] RankingError),
    #[error("plan: {0}")]
    Plan(#[from] PlanError),
    #[error("no relevance map for target {0}")]
    MissingMap(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSearch {
    pub target_id: u32,
    pub surface_text: String,
    pub proposals: Vec<RoiProposal>,
    /// Proposals that were shown to the oracle, in query order.
    pub scored: Vec<RoiProposal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected: Option<RoiProposal>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub merged: Vec<MergedRegion>,
    pub overran: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub question_type: QuestionType,
    pub targets: Vec<TargetSearch>,
    pub plan: InferencePlan,
    pub fp: FpReport,
}

impl SearchOutcome {
    /// Every rect the oracle saw, plus the selections.
    pub fn examined_rects(&self) -> Vec<PixelRect> {
        let mut out: Vec<PixelRect> = Vec::new();
        for t in &self.targets {
            out.extend(t.scored.iter().map(|p| p.pixel_rect));
            out.extend(t.merged.iter().map(|m| m.rect));
        }
        out.sort();
        out.dedup();
        out
    }

    pub fn eval_record(&self, question_id: &str, header: &DumpHeader) -> EvalRecord {
        EvalRecord {
            question_id: question_id.to_string(),
            predicted: String::new(),
            gt_answer: header.question.gt_answer.clone().unwrap_or_default(),
            fp_total: self.fp.total,
            fp_breakdown: Some(self.fp),
            proposed_pixel_rects: self.examined_rects(),
            gt_boxes: header.question.gt_boxes.clone(),
        }
    }
}

/// Relevance map of every target in the dump.
pub fn build_maps(
    dump: &TokenDump,
    config: &RelevanceConfig,
) -> Result<BTreeMap<u32, RelevanceMap>, MapError> {
    dump.header
        .targets
        .iter()
        .map(|t| Ok((t.target_id, build_object_map(dump, t.target_id, config)?)))
        .collect()
}

pub fn search(
    dump: &TokenDump,
    oracle: &mut dyn ExistenceOracle,
    config: &SearchConfig,
) -> Result<SearchOutcome, PipelineError> {
    let maps = build_maps(dump, &config.relevance)?;
    search_with_maps(&dump.header, &maps, oracle, config)
}

/// Runs the search on precomputed maps. Map construction is billed as one
/// forward pass whatever the number of targets; unknown question types are
/// treated as single-instance.
pub fn search_with_maps(
    header: &DumpHeader,
    maps: &BTreeMap<u32, RelevanceMap>,
    oracle: &mut dyn ExistenceOracle,
    config: &SearchConfig,
) -> Result<SearchOutcome, PipelineError> {
    config.proposal.validate()?;
    config.ranking.validate()?;
    let question_type = match header.question.question_type {
        QuestionType::Type2 => QuestionType::Type2,
        QuestionType::Type1 | QuestionType::Unknown => QuestionType::Type1,
    };
    let mut session = QuerySession::new(oracle);
    session.record_map_construction();
    let mut targets = Vec::new();
    for t in &header.targets {
        let map = maps
            .get(&t.target_id)
            .ok_or(PipelineError::MissingMap(t.target_id))?;
        let proposals = propose(map, &config.proposal, header.image_size)?;
        let mut result = TargetSearch {
            target_id: t.target_id,
            surface_text: t.surface_text.clone(),
            proposals,
            scored: Vec::new(),
            selected: None,
            merged: Vec::new(),
            overran: false,
        };
        match question_type {
            QuestionType::Type2 => {
                result.merged = select_type2(
                    &result.proposals,
                    &t.surface_text,
                    &mut session,
                    &config.ranking,
                )?;
                // every proposal was queried; the cache makes these lookups free
                let mut scored = result.proposals.clone();
                for p in &mut scored {
                    p.confidence = Some(
                        session
                            .confidence(&p.pixel_rect, &t.surface_text)
                            .map_err(RankingError::from)?,
                    );
                }
                result.scored = scored;
            }
            _ => {
                let sel = rank_and_select_type1(
                    &result.proposals,
                    &t.surface_text,
                    &mut session,
                    &config.ranking,
                )?;
                result.selected = Some(sel.best_proposal().clone());
                result.overran = sel.overran;
                result.scored = sel.scored;
            }
        }
        log::debug!(
            "target {} `{}`: {} proposals, {} queried",
            t.target_id,
            t.surface_text,
            result.proposals.len(),
            result.scored.len()
        );
        targets.push(result);
    }
    let plan = match question_type {
        QuestionType::Type2 => {
            let mut merged: Vec<&MergedRegion> = targets.iter().flat_map(|t| &t.merged).collect();
            merged.sort_by(|a, b| b.max_confidence.total_cmp(&a.max_confidence));
            let rects: Vec<PixelRect> = merged.iter().map(|m| m.rect).collect();
            plan_type2(&rects, header.image_size, header.view_kind, &config.plan)
        }
        _ => {
            let selected: BTreeMap<u32, RoiProposal> = targets
                .iter()
                .filter_map(|t| t.selected.clone().map(|s| (t.target_id, s)))
                .collect();
            plan_type1(&selected, header.image_size, header.view_kind, &config.plan)?
        }
    };
    Ok(SearchOutcome {
        question_type,
        targets,
        plan,
        fp: fp_report(session.counter()),
    })
}
