//! Evaluation protocol: coreference link metrics and event/argument
//! precision/recall/F1 in the text, video, and multimedia settings.
//!
//! Matching rules:
//! - text mention: trigger offsets and event type both match;
//! - text argument: offsets, event type, and role type all match;
//! - video mention: segment and event type match;
//! - video argument: event type, role type, and keyframe match, with
//!   box IoU strictly greater than 0.3;
//! - multimedia mention: event type and trigger offsets (or the video
//!   segment) match — correct if either modality's rule fires;
//! - multimedia argument: either a correct textual or a correct visual
//!   argument mention.
//!
//! Matching is greedy one-to-one in document order: predictions claim
//! unmatched gold items in order; for video arguments, among qualifying
//! candidates the highest-IoU gold is claimed. `brute_force_score`
//! recomputes counts with an exhaustive matching and bounds greedy's
//! error in tests. All metrics are micro-averaged from integer counts.
//! Empty-vs-empty scores P = R = F1 = 1 by convention.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{BoundingBox, DocPredictions, MultimediaDocument, Span};
use crate::error::{Error, Result};

/// Strict IoU threshold for visual argument localization.
pub const IOU_THRESHOLD: f64 = 0.3;

/// Evaluation setting selecting the matching rules above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Text,
    Video,
    Multimedia,
    Coref,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Setting::Text => "text",
            Setting::Video => "video",
            Setting::Multimedia => "multimedia",
            Setting::Coref => "coref",
        };
        f.write_str(s)
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Setting> {
        match s {
            "text" => Ok(Setting::Text),
            "video" => Ok(Setting::Video),
            "multimedia" => Ok(Setting::Multimedia),
            "coref" => Ok(Setting::Coref),
            other => Err(Error::Input(format!(
                "unknown setting {other:?} (expected text, video, multimedia, or coref)"
            ))),
        }
    }
}

/// Micro counts for one measurement level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Counts {
        Counts { tp, fp, fn_ }
    }

    /// tp/(tp+fp); 1 when no predictions were made.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// tp/(tp+fn); 1 when there is nothing to recover.
    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Scores for one setting: mention-level and argument-level counts, and
/// for the coreference setting additionally true negatives (link
/// prediction is evaluated over the full candidate pair grid, so
/// accuracy is defined). For coreference the link counts live in
/// `mention` and `argument` stays empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub setting: Setting,
    pub mention: Counts,
    pub argument: Counts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tn: Option<usize>,
}

impl ScoreReport {
    /// (tp+tn)/all_pairs; only defined for the coreference setting.
    pub fn accuracy(&self) -> Option<f64> {
        self.tn.map(|tn| {
            let m = self.mention;
            let all = m.tp + m.fp + m.fn_ + tn;
            if all == 0 {
                1.0
            } else {
                (m.tp + tn) as f64 / all as f64
            }
        })
    }

    /// Flat machine-readable record with both counts and derived rates.
    pub fn record(&self) -> ScoreRecord {
        ScoreRecord {
            setting: self.setting,
            mention: self.mention,
            mention_precision: self.mention.precision(),
            mention_recall: self.mention.recall(),
            mention_f1: self.mention.f1(),
            argument: self.argument,
            argument_precision: self.argument.precision(),
            argument_recall: self.argument.recall(),
            argument_f1: self.argument.f1(),
            tn: self.tn,
            accuracy: self.accuracy(),
        }
    }
}

/// Serializable view of a [`ScoreReport`] with derived rates included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub setting: Setting,
    pub mention: Counts,
    pub mention_precision: f64,
    pub mention_recall: f64,
    pub mention_f1: f64,
    pub argument: Counts,
    pub argument_precision: f64,
    pub argument_recall: f64,
    pub argument_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tn: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Intersection-over-union of two boxes; 0 when disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Link prediction metrics over a candidate grid of `all_pairs` pairs.
pub fn score_coref(
    gold: &[crate::corpus::CorefLink],
    pred: &[crate::corpus::CorefLink],
    all_pairs: usize,
) -> Result<ScoreReport> {
    let gold: BTreeSet<_> = gold.iter().collect();
    let pred: BTreeSet<_> = pred.iter().collect();
    let union = gold.union(&pred).count();
    if all_pairs < union {
        return Err(Error::Input(format!(
            "all_pairs {all_pairs} smaller than |gold ∪ pred| = {union}"
        )));
    }
    let tp = gold.intersection(&pred).count();
    let fp = pred.len() - tp;
    let fn_ = gold.len() - tp;
    Ok(ScoreReport {
        setting: Setting::Coref,
        mention: Counts::new(tp, fp, fn_),
        argument: Counts::default(),
        tn: Some(all_pairs - tp - fp - fn_),
    })
}

// ---------------------------------------------------------------------
// Extraction scoring
// ---------------------------------------------------------------------

/// One bipartite matching instance: `compat[p][g]` is `Some(weight)`
/// when prediction `p` may match gold `g` (weight = IoU for video
/// arguments, 0 elsewhere).
struct MatchProblem {
    n_gold: usize,
    compat: Vec<Vec<Option<f64>>>,
}

impl MatchProblem {
    /// Predictions claim golds in document order; among admissible
    /// unmatched golds the highest weight wins, ties to the earliest.
    fn greedy_tp(&self) -> usize {
        let mut taken = vec![false; self.n_gold];
        let mut tp = 0;
        for row in &self.compat {
            let mut best: Option<(f64, usize)> = None;
            for (g, w) in row.iter().enumerate() {
                if let Some(w) = *w {
                    if !taken[g] && best.map_or(true, |(bw, _)| w > bw) {
                        best = Some((w, g));
                    }
                }
            }
            if let Some((_, g)) = best {
                taken[g] = true;
                tp += 1;
            }
        }
        tp
    }

    /// Maximum-cardinality matching by exhaustive enumeration.
    fn exhaustive_tp(&self) -> Result<usize> {
        if self.n_gold > 5 || self.compat.len() > 5 {
            return Err(Error::Precondition(format!(
                "brute-force matching limited to 5x5 instances, got {} gold x {} pred",
                self.n_gold,
                self.compat.len()
            )));
        }
        fn recurse(compat: &[Vec<Option<f64>>], p: usize, taken: &mut Vec<bool>) -> usize {
            if p == compat.len() {
                return 0;
            }
            let mut best = recurse(compat, p + 1, taken);
            for (g, w) in compat[p].iter().enumerate() {
                if w.is_some() && !taken[g] {
                    taken[g] = true;
                    best = best.max(1 + recurse(compat, p + 1, taken));
                    taken[g] = false;
                }
            }
            best
        }
        let mut taken = vec![false; self.n_gold];
        Ok(recurse(&self.compat, 0, &mut taken))
    }

    fn counts(&self, tp: usize) -> Counts {
        Counts::new(tp, self.compat.len() - tp, self.n_gold - tp)
    }
}

/// Mention- and argument-level matching instances for one document.
struct DocProblems {
    mention: MatchProblem,
    argument: MatchProblem,
}

fn empty_predictions() -> DocPredictions {
    DocPredictions::default()
}

fn doc_problems(
    doc: &MultimediaDocument,
    pred: &DocPredictions,
    setting: Setting,
) -> Result<DocProblems> {
    match setting {
        Setting::Text => Ok(text_problems(doc, pred)),
        Setting::Video => Ok(video_problems(doc, pred)),
        Setting::Multimedia => Ok(multimedia_problems(doc, pred)),
        Setting::Coref => Err(Error::Input(
            "coref setting is scored with score_coref, not score_extraction".into(),
        )),
    }
}

fn score_with<F>(
    gold_docs: &[MultimediaDocument],
    pred_docs: &[DocPredictions],
    setting: Setting,
    mut solve: F,
) -> Result<ScoreReport>
where
    F: FnMut(&MatchProblem) -> Result<usize>,
{
    let by_id: BTreeMap<&str, &MultimediaDocument> =
        gold_docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let mut pred_by_id: BTreeMap<&str, &DocPredictions> = BTreeMap::new();
    for p in pred_docs {
        if !by_id.contains_key(p.doc_id.as_str()) {
            return Err(Error::Input(format!(
                "predictions reference unknown document {:?}",
                p.doc_id
            )));
        }
        if pred_by_id.insert(p.doc_id.as_str(), p).is_some() {
            return Err(Error::Input(format!(
                "duplicate predictions for document {:?}",
                p.doc_id
            )));
        }
    }
    let empty = empty_predictions();
    let mut mention = Counts::default();
    let mut argument = Counts::default();
    for doc in gold_docs {
        let pred = pred_by_id.get(doc.doc_id.as_str()).copied().unwrap_or(&empty);
        let problems = doc_problems(doc, pred, setting)?;
        mention.add(problems.mention.counts(solve(&problems.mention)?));
        argument.add(problems.argument.counts(solve(&problems.argument)?));
    }
    Ok(ScoreReport {
        setting,
        mention,
        argument,
        tn: None,
    })
}

/// Micro P/R/F1 under the selected setting's rules, greedy one-to-one
/// matching in document order.
pub fn score_extraction(
    gold_docs: &[MultimediaDocument],
    pred_docs: &[DocPredictions],
    setting: Setting,
) -> Result<ScoreReport> {
    score_with(gold_docs, pred_docs, setting, |p| Ok(p.greedy_tp()))
}

/// Exhaustive-matching oracle for tiny instances (at most 5 golds and 5
/// predictions per document and level); maximizes true positives.
pub fn brute_force_score(
    gold_docs: &[MultimediaDocument],
    pred_docs: &[DocPredictions],
    setting: Setting,
) -> Result<ScoreReport> {
    score_with(gold_docs, pred_docs, setting, |p| p.exhaustive_tp())
}

// --- text setting ----------------------------------------------------

fn text_problems(doc: &MultimediaDocument, pred: &DocPredictions) -> DocProblems {
    let mention = MatchProblem {
        n_gold: doc.text_events.len(),
        compat: pred
            .pred_text_events
            .iter()
            .map(|p| {
                doc.text_events
                    .iter()
                    .map(|g| {
                        (p.sentence_id == g.sentence_id
                            && p.trigger == g.trigger
                            && p.event_type == g.event_type)
                            .then_some(0.0)
                    })
                    .collect()
            })
            .collect(),
    };
    // Argument items: one per (event, arg), keyed by sentence, event
    // type, span, and role.
    let flatten = |events: &[crate::corpus::TextEventAnn]| -> Vec<(String, String, Span, String)> {
        events
            .iter()
            .flat_map(|e| {
                e.args.iter().map(|a| {
                    (
                        e.sentence_id.clone(),
                        e.event_type.clone(),
                        a.span,
                        a.role.clone(),
                    )
                })
            })
            .collect()
    };
    let gold_args = flatten(&doc.text_events);
    let pred_args = flatten(&pred.pred_text_events);
    let argument = MatchProblem {
        n_gold: gold_args.len(),
        compat: pred_args
            .iter()
            .map(|p| gold_args.iter().map(|g| (p == g).then_some(0.0)).collect())
            .collect(),
    };
    DocProblems { mention, argument }
}

// --- video setting ---------------------------------------------------

fn video_problems(doc: &MultimediaDocument, pred: &DocPredictions) -> DocProblems {
    let mention = MatchProblem {
        n_gold: doc.video_events.len(),
        compat: pred
            .pred_video_events
            .iter()
            .map(|p| {
                doc.video_events
                    .iter()
                    .map(|g| {
                        (p.segment_id == g.segment_id && p.event_type == g.event_type)
                            .then_some(0.0)
                    })
                    .collect()
            })
            .collect(),
    };
    struct VArg<'a> {
        segment_id: &'a str,
        event_type: &'a str,
        role: &'a str,
        keyframe_id: usize,
        bbox: BoundingBox,
    }
    fn flatten(events: &[crate::corpus::VideoEventAnn]) -> Vec<VArg<'_>> {
        events
            .iter()
            .flat_map(|e| {
                e.args.iter().map(|a| VArg {
                    segment_id: &e.segment_id,
                    event_type: &e.event_type,
                    role: &a.role,
                    keyframe_id: a.keyframe_id,
                    bbox: a.bbox,
                })
            })
            .collect()
    }
    let gold_args = flatten(&doc.video_events);
    let pred_args = flatten(&pred.pred_video_events);
    let argument = MatchProblem {
        n_gold: gold_args.len(),
        compat: pred_args
            .iter()
            .map(|p| {
                gold_args
                    .iter()
                    .map(|g| {
                        if p.segment_id == g.segment_id
                            && p.event_type == g.event_type
                            && p.role == g.role
                            && p.keyframe_id == g.keyframe_id
                        {
                            let v = iou(&p.bbox, &g.bbox);
                            (v > IOU_THRESHOLD).then_some(v)
                        } else {
                            None
                        }
                    })
                    .collect()
            })
            .collect(),
    };
    DocProblems { mention, argument }
}

// --- multimedia setting ----------------------------------------------

/// A multimodal event: coreference-linked same-type text and video
/// mentions merged into one unit (unlinked mentions form singletons).
struct Cluster<'a> {
    event_type: &'a str,
    text: Vec<&'a crate::corpus::TextEventAnn>,
    video: Vec<&'a crate::corpus::VideoEventAnn>,
}

/// (role -> argument mentions of that role across the cluster)
struct ClusterArgs<'a> {
    event_type: &'a str,
    role: &'a str,
    text_spans: Vec<(&'a str, Span)>,
    video_boxes: Vec<(&'a str, usize, BoundingBox)>,
}

fn find(parent: &mut Vec<usize>, i: usize) -> usize {
    if parent[i] != i {
        let root = find(parent, parent[i]);
        parent[i] = root;
    }
    parent[i]
}

fn clusters<'a>(
    text_events: &'a [crate::corpus::TextEventAnn],
    video_events: &'a [crate::corpus::VideoEventAnn],
    links: &[crate::corpus::CorefLink],
) -> Vec<Cluster<'a>> {
    // Nodes 0..n_text are text events, the rest video events.
    let n_text = text_events.len();
    let n = n_text + video_events.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for link in links {
        for (ti, te) in text_events.iter().enumerate() {
            if te.sentence_id != link.sentence_id {
                continue;
            }
            for (vi, ve) in video_events.iter().enumerate() {
                if ve.segment_id == link.segment_id && ve.event_type == te.event_type {
                    let (a, b) = (find(&mut parent, ti), find(&mut parent, n_text + vi));
                    parent[a] = b;
                }
            }
        }
    }
    let mut by_root: BTreeMap<usize, Cluster<'a>> = BTreeMap::new();
    let mut order: Vec<usize> = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        let entry = by_root.entry(root).or_insert_with(|| {
            order.push(root);
            Cluster {
                event_type: if i < n_text {
                    &text_events[i].event_type
                } else {
                    &video_events[i - n_text].event_type
                },
                text: Vec::new(),
                video: Vec::new(),
            }
        });
        if i < n_text {
            entry.text.push(&text_events[i]);
        } else {
            entry.video.push(&video_events[i - n_text]);
        }
    }
    order.into_iter().map(|r| by_root.remove(&r).unwrap()).collect()
}

fn cluster_args<'a>(cluster: &Cluster<'a>) -> Vec<ClusterArgs<'a>> {
    let mut by_role: BTreeMap<&'a str, ClusterArgs<'a>> = BTreeMap::new();
    let mut order: Vec<&'a str> = Vec::new();
    for te in &cluster.text {
        for arg in &te.args {
            let entry = by_role.entry(&arg.role).or_insert_with(|| {
                order.push(&arg.role);
                ClusterArgs {
                    event_type: cluster.event_type,
                    role: &arg.role,
                    text_spans: Vec::new(),
                    video_boxes: Vec::new(),
                }
            });
            entry.text_spans.push((&te.sentence_id, arg.span));
        }
    }
    for ve in &cluster.video {
        for arg in &ve.args {
            let entry = by_role.entry(&arg.role).or_insert_with(|| {
                order.push(&arg.role);
                ClusterArgs {
                    event_type: cluster.event_type,
                    role: &arg.role,
                    text_spans: Vec::new(),
                    video_boxes: Vec::new(),
                }
            });
            entry
                .video_boxes
                .push((&ve.segment_id, arg.keyframe_id, arg.bbox));
        }
    }
    order.into_iter().map(|r| by_role.remove(r).unwrap()).collect()
}

fn multimedia_problems(doc: &MultimediaDocument, pred: &DocPredictions) -> DocProblems {
    let gold = clusters(&doc.text_events, &doc.video_events, &doc.coref_links);
    let predicted = clusters(
        &pred.pred_text_events,
        &pred.pred_video_events,
        &pred.pred_coref_links,
    );
    let mention = MatchProblem {
        n_gold: gold.len(),
        compat: predicted
            .iter()
            .map(|p| {
                gold.iter()
                    .map(|g| {
                        if p.event_type != g.event_type {
                            return None;
                        }
                        let text_hit = p.text.iter().any(|pt| {
                            g.text.iter().any(|gt| {
                                pt.sentence_id == gt.sentence_id && pt.trigger == gt.trigger
                            })
                        });
                        let video_hit = p.video.iter().any(|pv| {
                            g.video.iter().any(|gv| pv.segment_id == gv.segment_id)
                        });
                        (text_hit || video_hit).then_some(0.0)
                    })
                    .collect()
            })
            .collect(),
    };
    let gold_args: Vec<ClusterArgs<'_>> = gold.iter().flat_map(cluster_args).collect();
    let pred_args: Vec<ClusterArgs<'_>> = predicted.iter().flat_map(cluster_args).collect();
    let argument = MatchProblem {
        n_gold: gold_args.len(),
        compat: pred_args
            .iter()
            .map(|p| {
                gold_args
                    .iter()
                    .map(|g| {
                        if p.event_type != g.event_type || p.role != g.role {
                            return None;
                        }
                        let text_hit = p.text_spans.iter().any(|(sid, span)| {
                            g.text_spans
                                .iter()
                                .any(|(gsid, gspan)| sid == gsid && span == gspan)
                        });
                        let video_hit = p.video_boxes.iter().any(|(seg, kf, bb)| {
                            g.video_boxes.iter().any(|(gseg, gkf, gbb)| {
                                seg == gseg && kf == gkf && iou(bb, gbb) > IOU_THRESHOLD
                            })
                        });
                        (text_hit || video_hit).then_some(0.0)
                    })
                    .collect()
            })
            .collect(),
    };
    DocProblems { mention, argument }
}

// ---------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------

/// Structured text table, one row per setting, mention and argument
/// P/R/F1 columns (plus accuracy for coreference rows).
pub fn render_table(reports: &[ScoreReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} | {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7} | {:>7}\n",
        "Setting", "Men P", "Men R", "Men F1", "Arg P", "Arg R", "Arg F1", "Acc"
    ));
    out.push_str(&format!("{}\n", "-".repeat(12 + 3 + 8 * 3 + 3 + 8 * 3 + 3 + 8)));
    for r in reports {
        let acc = r
            .accuracy()
            .map(|a| format!("{a:>7.4}"))
            .unwrap_or_else(|| format!("{:>7}", "-"));
        out.push_str(&format!(
            "{:<12} | {:>7.4} {:>7.4} {:>7.4} | {:>7.4} {:>7.4} {:>7.4} | {}\n",
            r.setting.to_string(),
            r.mention.precision(),
            r.mention.recall(),
            r.mention.f1(),
            r.argument.precision(),
            r.argument.recall(),
            r.argument.f1(),
            acc
        ));
    }
    out
}
