//! Existence-confidence reranking under a forward-pass budget.
//!
//! Every oracle invocation is one forward pass (FP). Map construction is billed
//! once per question; the final VQA pass never goes through the counter.

mod stdio;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{bounding_box, PixelRect};
use crate::roi_proposal::RoiProposal;

pub use stdio::{OracleRequest, OracleResponse, StdioOracle};

/// Raw first-token logits for "Yes" and "No" to the existence prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Logits {
    pub l_yes: f64,
    pub l_no: f64,
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle process failed: {message}{}", stderr_suffix(.stderr))]
    Process { message: String, stderr: String },
    #[error("oracle protocol error: {0}")]
    Protocol(String),
    #[error("oracle returned error `{code}`: {message}")]
    Remote { code: String, message: String },
    #[error("oracle has no answer for {0}")]
    Unavailable(String),
}

fn stderr_suffix(stderr: &str) -> String {
    let s = stderr.trim();
    if s.is_empty() {
        String::new()
    } else {
        format!("\n--- oracle stderr ---\n{s}")
    }
}

/// Answers "Is there a {target} in the image?" for a pixel region.
pub trait ExistenceOracle {
    fn query(&mut self, rect: &PixelRect, target: &str) -> Result<Logits, OracleError>;

    /// Whether one instance may serve several questions at once.
    fn concurrent_safe(&self) -> bool {
        false
    }
}

impl<O: ExistenceOracle + ?Sized> ExistenceOracle for Box<O> {
    fn query(&mut self, rect: &PixelRect, target: &str) -> Result<Logits, OracleError> {
        (**self).query(rect, target)
    }

    fn concurrent_safe(&self) -> bool {
        (**self).concurrent_safe()
    }
}

/// `2·(softmax([l_yes, l_no])_yes − 0.5)`, in `[-1, 1]`.
pub fn existence_confidence(l_yes: f64, l_no: f64) -> f64 {
    let m = l_yes.max(l_no);
    let ey = (l_yes - m).exp();
    let en = (l_no - m).exp();
    2.0 * (ey / (ey + en) - 0.5)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpCounter {
    pub map_construction: u64,
    pub existence_queries: u64,
}

impl FpCounter {
    pub fn count(&self) -> u64 {
        self.map_construction + self.existence_queries
    }

    pub fn record_map_construction(&mut self) {
        self.map_construction += 1;
    }

    pub fn record_query(&mut self) {
        self.existence_queries += 1;
    }
}

/// Search-phase forward passes of one question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpReport {
    pub total: u64,
    pub map_construction: u64,
    pub existence_queries: u64,
}

pub fn fp_report(counter: &FpCounter) -> FpReport {
    FpReport {
        total: counter.count(),
        map_construction: counter.map_construction,
        existence_queries: counter.existence_queries,
    }
}

/// Oracle access for one question: bills each real invocation once and
/// serves repeated `(rect, target)` queries from a cache.
pub struct QuerySession<'a> {
    oracle: &'a mut dyn ExistenceOracle,
    cache: HashMap<(PixelRect, String), Logits>,
    counter: FpCounter,
}

impl<'a> QuerySession<'a> {
    pub fn new(oracle: &'a mut dyn ExistenceOracle) -> Self {
        Self {
            oracle,
            cache: HashMap::new(),
            counter: FpCounter::default(),
        }
    }

    pub fn counter(&self) -> &FpCounter {
        &self.counter
    }

    pub fn record_map_construction(&mut self) {
        self.counter.record_map_construction();
    }

    pub fn logits(&mut self, rect: &PixelRect, target: &str) -> Result<Logits, OracleError> {
        let key = (*rect, target.to_string());
        if let Some(hit) = self.cache.get(&key) {
            return Ok(*hit);
        }
        let logits = self.oracle.query(rect, target)?;
        self.counter.record_query();
        self.cache.insert(key, logits);
        Ok(logits)
    }

    pub fn confidence(&mut self, rect: &PixelRect, target: &str) -> Result<f64, OracleError> {
        let l = self.logits(rect, target)?;
        Ok(existence_confidence(l.l_yes, l.l_no))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingConfig {
    pub n_steps: usize,
    pub overrun: bool,
    pub t_type2: f64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self {
            n_steps: 8,
            overrun: true,
            t_type2: 0.6,
        }
    }
}

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("no proposals to rank")]
    NoProposals,
    #[error("n_steps must be at least 1")]
    ZeroSteps,
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

impl RankingConfig {
    pub fn validate(&self) -> Result<(), RankingError> {
        if self.n_steps == 0 {
            return Err(RankingError::ZeroSteps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Type1Selection {
    /// Index of the winner in the input proposal list.
    pub best: usize,
    /// The queried prefix of the proposals, confidences filled in.
    pub scored: Vec<RoiProposal>,
    /// Whether the overrun extension queried past `n_steps`.
    pub overran: bool,
}

impl Type1Selection {
    pub fn best_proposal(&self) -> &RoiProposal {
        &self.scored[self.best]
    }
}

/// Queries the top `n_steps` proposals and picks the most confident one.
///
/// With overrun enabled, if every queried confidence is negative the search
/// keeps going one proposal at a time until one is non-negative. Ties keep the
/// earlier (more relevant) proposal.
pub fn rank_and_select_type1(
    proposals: &[RoiProposal],
    target: &str,
    session: &mut QuerySession<'_>,
    config: &RankingConfig,
) -> Result<Type1Selection, RankingError> {
    config.validate()?;
    if proposals.is_empty() {
        return Err(RankingError::NoProposals);
    }
    let mut scored = Vec::new();
    let budget = config.n_steps.min(proposals.len());
    for p in &proposals[..budget] {
        let mut p = p.clone();
        p.confidence = Some(session.confidence(&p.pixel_rect, target)?);
        scored.push(p);
    }
    let mut overran = false;
    if config.overrun && scored.iter().all(|p| p.confidence < Some(0.0)) {
        for p in &proposals[budget..] {
            overran = true;
            let mut p = p.clone();
            let c = session.confidence(&p.pixel_rect, target)?;
            p.confidence = Some(c);
            scored.push(p);
            if c >= 0.0 {
                break;
            }
        }
    }
    let mut best = 0;
    for (i, p) in scored.iter().enumerate() {
        if p.confidence > scored[best].confidence {
            best = i;
        }
    }
    Ok(Type1Selection {
        best,
        scored,
        overran,
    })
}

/// A union of overlapping positive proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedRegion {
    pub rect: PixelRect,
    pub max_confidence: f64,
    /// Indices into the input proposal list.
    pub members: Vec<usize>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Queries every proposal, keeps those above `t_type2`, and merges kept rects
/// that overlap (transitively) into their bounding boxes.
pub fn select_type2(
    proposals: &[RoiProposal],
    target: &str,
    session: &mut QuerySession<'_>,
    config: &RankingConfig,
) -> Result<Vec<MergedRegion>, RankingError> {
    let mut positives = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        let c = session.confidence(&p.pixel_rect, target)?;
        if c > config.t_type2 {
            positives.push((i, c));
        }
    }
    Ok(merge_overlapping(proposals, &positives))
}

fn merge_overlapping(proposals: &[RoiProposal], positives: &[(usize, f64)]) -> Vec<MergedRegion> {
    let n = positives.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for a in 0..n {
        for b in a + 1..n {
            let ra = proposals[positives[a].0].pixel_rect;
            let rb = proposals[positives[b].0].pixel_rect;
            if ra.intersection_area(&rb) > 0 {
                let (x, y) = (find(&mut parent, a), find(&mut parent, b));
                parent[x.max(y)] = x.min(y);
            }
        }
    }
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        match groups.iter_mut().find(|(r, _)| *r == root) {
            Some((_, members)) => members.push(i),
            None => groups.push((root, vec![i])),
        }
    }
    let mut regions: Vec<MergedRegion> = groups
        .into_iter()
        .map(|(_, members)| {
            let rects: Vec<PixelRect> = members
                .iter()
                .map(|&m| proposals[positives[m].0].pixel_rect)
                .collect();
            MergedRegion {
                rect: bounding_box(&rects).expect("non-empty group"),
                max_confidence: members
                    .iter()
                    .map(|&m| positives[m].1)
                    .fold(f64::NEG_INFINITY, f64::max),
                members: members.iter().map(|&m| positives[m].0).collect(),
            }
        })
        .collect();
    // stable: equal confidences keep relevance order of their first member
    regions.sort_by(|a, b| b.max_confidence.total_cmp(&a.max_confidence));
    regions
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridRect;
    use crate::roi_proposal::Anchor;

    /// Answers from a fixed table keyed by proposal x0.
    struct Scripted {
        answers: HashMap<u32, f64>,
        calls: u64,
    }

    impl ExistenceOracle for Scripted {
        fn query(&mut self, rect: &PixelRect, _target: &str) -> Result<Logits, OracleError> {
            self.calls += 1;
            let c = self.answers.get(&rect.x0).copied().unwrap_or(-4.0);
            Ok(Logits {
                l_yes: c,
                l_no: 0.0,
            })
        }
    }

    fn scripted(pairs: &[(u32, f64)]) -> Scripted {
        Scripted {
            answers: pairs.iter().copied().collect(),
            calls: 0,
        }
    }

    fn proposal(i: u32) -> RoiProposal {
        let px = PixelRect::new(i * 100, 0, i * 100 + 50, 50);
        RoiProposal {
            rect: GridRect::new(0, i as usize, 0, i as usize),
            anchor: Anchor {
                row: 0,
                col: i as usize,
                score: 1.0 - f64::from(i) / 100.0,
            },
            mean_relevance: 0.5,
            pixel_rect: px,
            confidence: None,
        }
    }

    fn proposals(n: u32) -> Vec<RoiProposal> {
        (0..n).map(proposal).collect()
    }

    #[test]
    fn confidence_values() {
        assert_eq!(existence_confidence(3.0, 3.0), 0.0);
        assert!(existence_confidence(10.0, 0.0) > 0.999);
        assert!((existence_confidence(1.0, 0.0) - 0.462117).abs() < 1e-6);
        assert!((existence_confidence(1000.0, -1000.0) - 1.0).abs() < 1e-12);
        assert!((existence_confidence(-1000.0, 1000.0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_step_selects_first() {
        let mut oracle = scripted(&[(0, 5.0)]);
        let mut s = QuerySession::new(&mut oracle);
        let cfg = RankingConfig {
            n_steps: 1,
            overrun: false,
            ..RankingConfig::default()
        };
        let sel = rank_and_select_type1(&proposals(4), "cat", &mut s, &cfg).unwrap();
        assert_eq!(sel.best, 0);
        assert_eq!(s.counter().existence_queries, 1);
    }

    #[test]
    fn overrun_continues_until_a_yes() {
        let mut oracle = scripted(&[(200, 4.0)]);
        let mut s = QuerySession::new(&mut oracle);
        s.record_map_construction();
        let cfg = RankingConfig {
            n_steps: 2,
            overrun: true,
            ..RankingConfig::default()
        };
        let sel = rank_and_select_type1(&proposals(6), "cat", &mut s, &cfg).unwrap();
        assert_eq!(sel.best, 2);
        assert!(sel.overran);
        assert_eq!(sel.scored.len(), 3);
        assert_eq!(fp_report(s.counter()).total, 4);
        assert_eq!(fp_report(s.counter()).existence_queries, 3);
    }

    #[test]
    fn overrun_exhausts_list_when_never_positive() {
        let mut oracle = scripted(&[]);
        let mut s = QuerySession::new(&mut oracle);
        let cfg = RankingConfig {
            n_steps: 2,
            overrun: true,
            ..RankingConfig::default()
        };
        let sel = rank_and_select_type1(&proposals(5), "cat", &mut s, &cfg).unwrap();
        assert_eq!(sel.scored.len(), 5);
        assert_eq!(sel.best, 0);
    }

    #[test]
    fn without_overrun_best_of_negatives_wins() {
        // confidences -0.4 and -0.1
        let l = |c: f64| ((1.0 + c) / (1.0 - c)).ln();
        let mut oracle = scripted(&[(0, l(-0.4)), (100, l(-0.1))]);
        let mut s = QuerySession::new(&mut oracle);
        let cfg = RankingConfig {
            n_steps: 2,
            overrun: false,
            ..RankingConfig::default()
        };
        let sel = rank_and_select_type1(&proposals(5), "cat", &mut s, &cfg).unwrap();
        assert_eq!(sel.best, 1);
        assert!((sel.best_proposal().confidence.unwrap() + 0.1).abs() < 1e-12);
        assert_eq!(s.counter().count(), 2);
    }

    #[test]
    fn ties_keep_earlier_rank() {
        let mut oracle = scripted(&[(0, 2.0), (100, 2.0)]);
        let mut s = QuerySession::new(&mut oracle);
        let sel =
            rank_and_select_type1(&proposals(2), "cat", &mut s, &RankingConfig::default()).unwrap();
        assert_eq!(sel.best, 0);
    }

    #[test]
    fn empty_list_is_an_error() {
        let mut oracle = scripted(&[]);
        let mut s = QuerySession::new(&mut oracle);
        assert!(matches!(
            rank_and_select_type1(&[], "cat", &mut s, &RankingConfig::default()),
            Err(RankingError::NoProposals)
        ));
    }

    #[test]
    fn cache_bills_repeat_queries_once() {
        let mut oracle = scripted(&[]);
        let mut s = QuerySession::new(&mut oracle);
        let r = PixelRect::new(0, 0, 5, 5);
        s.confidence(&r, "cat").unwrap();
        s.confidence(&r, "cat").unwrap();
        s.confidence(&r, "dog").unwrap();
        assert_eq!(s.counter().existence_queries, 2);
        drop(s);
        assert_eq!(oracle.calls, 2);
    }

    #[test]
    fn type2_without_positives_is_empty() {
        let mut oracle = scripted(&[]);
        let mut s = QuerySession::new(&mut oracle);
        let out = select_type2(&proposals(4), "cat", &mut s, &RankingConfig::default()).unwrap();
        assert!(out.is_empty());
        assert_eq!(s.counter().existence_queries, 4);
        let out = select_type2(&[], "cat", &mut s, &RankingConfig::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn type2_keeps_disjoint_positives_apart() {
        let mut oracle = scripted(&[(0, 3.0), (300, 5.0)]);
        let mut s = QuerySession::new(&mut oracle);
        let out = select_type2(&proposals(4), "cat", &mut s, &RankingConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].rect, proposal(3).pixel_rect);
        assert_eq!(out[1].rect, proposal(0).pixel_rect);
    }

    #[test]
    fn type2_merges_overlap_chains() {
        let mut ps = proposals(3);
        ps[0].pixel_rect = PixelRect::new(0, 0, 10, 10);
        ps[1].pixel_rect = PixelRect::new(8, 8, 20, 20);
        ps[2].pixel_rect = PixelRect::new(19, 0, 30, 9);
        // ps[0] and ps[2] do not touch; ps[1] bridges them
        struct Yes;
        impl ExistenceOracle for Yes {
            fn query(&mut self, _: &PixelRect, _: &str) -> Result<Logits, OracleError> {
                Ok(Logits {
                    l_yes: 5.0,
                    l_no: 0.0,
                })
            }
        }
        let mut oracle = Yes;
        let mut s = QuerySession::new(&mut oracle);
        let out = select_type2(&ps, "cat", &mut s, &RankingConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].rect, PixelRect::new(0, 0, 30, 20));
        assert_eq!(out[0].members, vec![0, 1, 2]);
    }

    #[test]
    fn touching_edges_do_not_merge() {
        let mut ps = proposals(2);
        ps[0].pixel_rect = PixelRect::new(0, 0, 10, 10);
        ps[1].pixel_rect = PixelRect::new(10, 0, 20, 10);
        let merged = merge_overlapping(&ps, &[(0, 0.9), (1, 0.8)]);
        assert_eq!(merged.len(), 2);
    }
}
