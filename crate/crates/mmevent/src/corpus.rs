//! Data model and serialization for multimedia documents: sentences with
//! precomputed features, video segments with keyframes and detected
//! regions, gold annotations, and predictions.
//!
//! Documents live in a line-delimited JSON file, one document per line.
//! Feature vectors are stored inline as decimal arrays; a binary sidecar
//! format (little-endian f32 with a JSON shape descriptor) is available
//! for larger corpora.

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{validate_annotation, AnnotationView, Ontology, Violation};

/// Axis-aligned box in normalized [0,1] coordinates, (x1,y1) top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<BoundingBox> {
        let b = BoundingBox { x1, y1, x2, y2 };
        b.check()?;
        Ok(b)
    }

    pub fn check(&self) -> Result<()> {
        let ok = 0.0 <= self.x1
            && self.x1 < self.x2
            && self.x2 <= 1.0
            && 0.0 <= self.y1
            && self.y1 < self.y2
            && self.y2 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid bounding box {self:?}")))
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: String,
    pub confidence: f64,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame_id: usize,
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSegment {
    pub segment_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub clip_feature: Vec<f64>,
    pub keyframes: Vec<Keyframe>,
}

/// Token span with exclusive end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub sentence_id: String,
    pub tokens: Vec<String>,
    pub sentence_feature: Vec<f64>,
    pub entity_candidates: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextArg {
    pub span: Span,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEventAnn {
    pub sentence_id: String,
    pub trigger: Span,
    pub event_type: String,
    pub args: Vec<TextArg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoArg {
    pub role: String,
    pub keyframe_id: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEventAnn {
    pub segment_id: String,
    pub event_type: String,
    pub args: Vec<VideoArg>,
}

/// Assertion that a sentence and a video segment describe the same event.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CorefLink {
    pub sentence_id: String,
    pub segment_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimediaDocument {
    pub doc_id: String,
    pub sentences: Vec<Sentence>,
    pub segments: Vec<VideoSegment>,
    pub text_events: Vec<TextEventAnn>,
    pub video_events: Vec<VideoEventAnn>,
    pub coref_links: Vec<CorefLink>,
}

/// Per-document predictions, mirroring the gold schema with `pred_` keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DocPredictions {
    pub doc_id: String,
    #[serde(default)]
    pub pred_coref_links: Vec<CorefLink>,
    #[serde(default)]
    pub pred_text_events: Vec<TextEventAnn>,
    #[serde(default)]
    pub pred_video_events: Vec<VideoEventAnn>,
}

impl MultimediaDocument {
    pub fn sentence(&self, id: &str) -> Option<&Sentence> {
        self.sentences.iter().find(|s| s.sentence_id == id)
    }

    pub fn segment(&self, id: &str) -> Option<&VideoSegment> {
        self.segments.iter().find(|s| s.segment_id == id)
    }

    /// Structural validation: unique ids, resolvable references, span and
    /// box invariants, uniform feature dimensions.
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Error::Load {
            doc_id: self.doc_id.clone(),
            field: field.to_string(),
            msg,
        };

        let mut sent_ids = HashSet::new();
        let mut d_x: Option<usize> = None;
        for s in &self.sentences {
            if !sent_ids.insert(&s.sentence_id) {
                return Err(err("sentences", format!("duplicate id {}", s.sentence_id)));
            }
            match d_x {
                None => d_x = Some(s.sentence_feature.len()),
                Some(d) if d != s.sentence_feature.len() => {
                    return Err(err(
                        "sentences.sentence_feature",
                        format!("dimension {} != {}", s.sentence_feature.len(), d),
                    ))
                }
                _ => {}
            }
            for span in &s.entity_candidates {
                if span.start >= span.end || span.end > s.tokens.len() {
                    return Err(err(
                        "sentences.entity_candidates",
                        format!("span {span:?} out of range in {}", s.sentence_id),
                    ));
                }
            }
        }

        let mut seg_ids = HashSet::new();
        let mut d_y: Option<usize> = None;
        let mut d_z: Option<usize> = None;
        for seg in &self.segments {
            if !seg_ids.insert(&seg.segment_id) {
                return Err(err("segments", format!("duplicate id {}", seg.segment_id)));
            }
            if seg.start_s >= seg.end_s {
                return Err(err(
                    "segments",
                    format!("{}: start_s >= end_s", seg.segment_id),
                ));
            }
            match d_y {
                None => d_y = Some(seg.clip_feature.len()),
                Some(d) if d != seg.clip_feature.len() => {
                    return Err(err(
                        "segments.clip_feature",
                        format!("dimension {} != {}", seg.clip_feature.len(), d),
                    ))
                }
                _ => {}
            }
            let mut frame_ids = HashSet::new();
            for kf in &seg.keyframes {
                if !frame_ids.insert(kf.frame_id) {
                    return Err(err(
                        "segments.keyframes",
                        format!("{}: duplicate frame_id {}", seg.segment_id, kf.frame_id),
                    ));
                }
                for r in &kf.regions {
                    r.bbox.check().map_err(|e| {
                        err("segments.keyframes.regions", format!("{}: {e}", seg.segment_id))
                    })?;
                    if !(0.0..=1.0).contains(&r.confidence) {
                        return Err(err(
                            "segments.keyframes.regions",
                            format!("{}: confidence {} out of range", seg.segment_id, r.confidence),
                        ));
                    }
                    match d_z {
                        None => d_z = Some(r.feature.len()),
                        Some(d) if d != r.feature.len() => {
                            return Err(err(
                                "segments.keyframes.regions.feature",
                                format!("dimension {} != {}", r.feature.len(), d),
                            ))
                        }
                        _ => {}
                    }
                }
            }
        }

        for ev in &self.text_events {
            let s = self.sentence(&ev.sentence_id).ok_or_else(|| {
                err(
                    "text_events.sentence_id",
                    format!("unknown sentence {}", ev.sentence_id),
                )
            })?;
            if ev.trigger.start >= ev.trigger.end || ev.trigger.end > s.tokens.len() {
                return Err(err(
                    "text_events.trigger",
                    format!("span {:?} out of range in {}", ev.trigger, ev.sentence_id),
                ));
            }
            for a in &ev.args {
                if a.span.start >= a.span.end || a.span.end > s.tokens.len() {
                    return Err(err(
                        "text_events.args",
                        format!("span {:?} out of range in {}", a.span, ev.sentence_id),
                    ));
                }
            }
        }

        for ev in &self.video_events {
            let seg = self.segment(&ev.segment_id).ok_or_else(|| {
                err(
                    "video_events.segment_id",
                    format!("unknown segment {}", ev.segment_id),
                )
            })?;
            for a in &ev.args {
                if !seg.keyframes.iter().any(|kf| kf.frame_id == a.keyframe_id) {
                    return Err(err(
                        "video_events.args.keyframe_id",
                        format!("{}: no keyframe {}", ev.segment_id, a.keyframe_id),
                    ));
                }
                a.bbox
                    .check()
                    .map_err(|e| err("video_events.args.box", e.to_string()))?;
            }
        }

        for link in &self.coref_links {
            if self.sentence(&link.sentence_id).is_none() {
                return Err(err(
                    "coref_links.sentence_id",
                    format!("unknown sentence {}", link.sentence_id),
                ));
            }
            if self.segment(&link.segment_id).is_none() {
                return Err(err(
                    "coref_links.segment_id",
                    format!("unknown segment {}", link.segment_id),
                ));
            }
        }
        Ok(())
    }

    /// Schema validation of all annotations against an ontology.
    pub fn schema_violations(&self, ontology: &Ontology) -> Vec<Violation> {
        let mut out = Vec::new();
        for ev in &self.text_events {
            out.extend(validate_annotation(
                &AnnotationView {
                    event_type: &ev.event_type,
                    roles: ev.args.iter().map(|a| a.role.as_str()).collect(),
                },
                ontology,
            ));
        }
        for ev in &self.video_events {
            out.extend(validate_annotation(
                &AnnotationView {
                    event_type: &ev.event_type,
                    roles: ev.args.iter().map(|a| a.role.as_str()).collect(),
                },
                ontology,
            ));
        }
        out
    }
}

/// Load a line-delimited corpus file, validating every document.
pub fn load_corpus(path: &Path) -> Result<Vec<MultimediaDocument>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: MultimediaDocument = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn save_corpus(docs: &[MultimediaDocument], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for doc in docs {
        serde_json::to_writer(&mut w, doc)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<DocPredictions>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: DocPredictions = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn save_predictions(preds: &[DocPredictions], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// All (sentence_id, segment_id) pairs of a document, sentence-major.
pub fn candidate_pairs(doc: &MultimediaDocument) -> Vec<(String, String)> {
    let mut out = Vec::with_capacity(doc.sentences.len() * doc.segments.len());
    for s in &doc.sentences {
        for v in &doc.segments {
            out.push((s.sentence_id.clone(), v.segment_id.clone()));
        }
    }
    out
}

/// Indices (into `segment.keyframes`) of up to `frames_t` uniformly
/// sampled keyframes, always including the first.
pub fn sample_keyframe_indices(n_keyframes: usize, frames_t: usize) -> Vec<usize> {
    let m = frames_t.min(n_keyframes);
    (0..m).map(|i| i * n_keyframes / m).collect()
}

/// Top-confidence regions from uniformly sampled keyframes. Ties on
/// confidence break by ascending box area, then insertion order.
pub fn select_regions<'a>(
    segment: &'a VideoSegment,
    frames_t: usize,
    per_frame_k: usize,
) -> Vec<&'a Region> {
    assert!(frames_t >= 1 && per_frame_k >= 1);
    let mut out = Vec::new();
    for &fi in &sample_keyframe_indices(segment.keyframes.len(), frames_t) {
        let kf = &segment.keyframes[fi];
        let mut order: Vec<usize> = (0..kf.regions.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = &kf.regions[a];
            let rb = &kf.regions[b];
            rb.confidence
                .partial_cmp(&ra.confidence)
                .unwrap()
                .then(ra.bbox.area().partial_cmp(&rb.bbox.area()).unwrap())
                .then(a.cmp(&b))
        });
        // re-sort the chosen top-k back into insertion order so the output
        // stays a subsequence of the segment's region list
        let mut chosen: Vec<usize> = order.into_iter().take(per_frame_k).collect();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|i| &kf.regions[i]));
    }
    out
}

/// Write feature rows as little-endian f32 with a JSON shape descriptor
/// at `<path>.shape.json`.
pub fn write_feature_sidecar(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let cols = rows.first().map(|r| r.len()).unwrap_or(0);
    for r in rows {
        if r.len() != cols {
            return Err(Error::Input("ragged feature rows".into()));
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        for &v in r {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()?;
    let desc = serde_json::json!({"rows": rows.len(), "cols": cols, "dtype": "f32le"});
    std::fs::write(
        path.with_extension("shape.json"),
        serde_json::to_string(&desc)?,
    )?;
    Ok(())
}

pub fn read_feature_sidecar(path: &Path) -> Result<Vec<Vec<f64>>> {
    let desc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("shape.json"))?)?;
    let rows = desc["rows"].as_u64().ok_or_else(|| Error::Input("bad descriptor".into()))? as usize;
    let cols = desc["cols"].as_u64().ok_or_else(|| Error::Input("bad descriptor".into()))? as usize;
    let mut rdr = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut row = Vec::with_capacity(cols);
        for _ in 0..cols {
            row.push(rdr.read_f32::<LittleEndian>()? as f64);
        }
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(conf: f64, area_side: f64) -> Region {
        Region {
            bbox: BoundingBox::new(0.0, 0.0, area_side, area_side).unwrap(),
            label: "obj".into(),
            confidence: conf,
            feature: vec![0.0, 1.0],
        }
    }

    fn tiny_doc() -> MultimediaDocument {
        MultimediaDocument {
            doc_id: "d0".into(),
            sentences: vec![
                Sentence {
                    sentence_id: "s0".into(),
                    tokens: vec!["a".into(), "b".into()],
                    sentence_feature: vec![1.0, 0.0],
                    entity_candidates: vec![Span { start: 0, end: 1 }],
                },
                Sentence {
                    sentence_id: "s1".into(),
                    tokens: vec!["c".into()],
                    sentence_feature: vec![0.0, 1.0],
                    entity_candidates: vec![],
                },
            ],
            segments: vec![VideoSegment {
                segment_id: "v0".into(),
                start_s: 0.0,
                end_s: 2.0,
                clip_feature: vec![1.0, 0.0, 0.0],
                keyframes: vec![Keyframe {
                    frame_id: 0,
                    regions: vec![region(0.9, 0.5)],
                }],
            }],
            text_events: vec![],
            video_events: vec![],
            coref_links: vec![CorefLink {
                sentence_id: "s0".into(),
                segment_id: "v0".into(),
            }],
        }
    }

    #[test]
    fn round_trip_byte_equivalent() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("c.jsonl");
        let p2 = dir.path().join("c2.jsonl");
        let docs = vec![tiny_doc()];
        save_corpus(&docs, &p1).unwrap();
        let loaded = load_corpus(&p1).unwrap();
        assert_eq!(docs, loaded);
        save_corpus(&loaded, &p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap()
        );
    }

    #[test]
    fn dangling_link_rejected() {
        let mut doc = tiny_doc();
        doc.coref_links.push(CorefLink {
            sentence_id: "s0".into(),
            segment_id: "missing".into(),
        });
        let err = doc.validate().unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    #[test]
    fn candidate_pairs_cartesian() {
        let doc = tiny_doc();
        let pairs = candidate_pairs(&doc);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0], ("s0".into(), "v0".into()));
        assert_eq!(pairs[1], ("s1".into(), "v0".into()));

        let mut empty = doc.clone();
        empty.coref_links.clear();
        empty.text_events.clear();
        empty.sentences.clear();
        assert!(candidate_pairs(&empty).is_empty());
    }

    #[test]
    fn select_regions_top_k_and_truncation() {
        let mut seg = VideoSegment {
            segment_id: "v0".into(),
            start_s: 0.0,
            end_s: 1.0,
            clip_feature: vec![0.0],
            keyframes: vec![],
        };
        // zero keyframes -> empty
        assert!(select_regions(&seg, 3, 5).is_empty());

        // top-k by confidence
        seg.keyframes.push(Keyframe {
            frame_id: 0,
            regions: vec![region(0.7, 0.2), region(0.9, 0.2)],
        });
        let sel = select_regions(&seg, 3, 1);
        assert_eq!(sel.len(), 1);
        assert!((sel[0].confidence - 0.9).abs() < 1e-12);

        // 2 keyframes, t=3 -> regions from both frames only
        seg.keyframes.push(Keyframe {
            frame_id: 1,
            regions: vec![region(0.5, 0.1)],
        });
        let sel = select_regions(&seg, 3, 5);
        assert_eq!(sel.len(), 3);
    }

    #[test]
    fn select_regions_full_budget() {
        let kfs: Vec<Keyframe> = (0..4)
            .map(|f| Keyframe {
                frame_id: f,
                regions: (0..6).map(|i| region(0.5 + 0.05 * i as f64, 0.3)).collect(),
            })
            .collect();
        let seg = VideoSegment {
            segment_id: "v".into(),
            start_s: 0.0,
            end_s: 1.0,
            clip_feature: vec![0.0],
            keyframes: kfs,
        };
        assert_eq!(select_regions(&seg, 3, 5).len(), 15);
    }

    #[test]
    fn confidence_tie_breaks_by_area() {
        let seg = VideoSegment {
            segment_id: "v".into(),
            start_s: 0.0,
            end_s: 1.0,
            clip_feature: vec![0.0],
            keyframes: vec![Keyframe {
                frame_id: 0,
                regions: vec![region(0.8, 0.6), region(0.8, 0.2)],
            }],
        };
        let sel = select_regions(&seg, 1, 1);
        assert!((sel[0].bbox.area() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("feat.bin");
        let rows = vec![vec![1.0, -0.5], vec![0.25, 3.0]];
        write_feature_sidecar(&p, &rows).unwrap();
        let back = read_feature_sidecar(&p).unwrap();
        assert_eq!(rows, back);
    }
}
