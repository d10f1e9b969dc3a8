//! Synthetic corpora with planted latent structure. Every sentence and
//! segment carries a latent event type; features are noisy unit-norm type
//! prototypes, so learning and scoring can be checked against known
//! ground truth. In multi-instance mode the clip feature is type-agnostic
//! noise and the type signal lives in exactly one region per segment,
//! which is what the multi-instance loss is supposed to exploit.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    BoundingBox, CorefLink, Keyframe, MultimediaDocument, Region, Sentence, Span, TextArg,
    TextEventAnn, VideoArg, VideoEventAnn, VideoSegment,
};
use crate::error::{Error, Result};
use crate::ontology::Ontology;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub sentences_per_doc: usize,
    pub segments_per_doc: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub d_z: usize,
    pub noise_sigma: f64,
    pub distractor_regions_per_frame: usize,
    /// When true, clip features carry no type information; the signal
    /// lives in one region per segment.
    pub multi_instance_mode: bool,
    pub keyframes_per_segment: usize,
    /// Number of event types each document draws from (small pools make
    /// repeated types, and therefore n-to-n links, common).
    pub types_per_doc: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 10,
            sentences_per_doc: 3,
            segments_per_doc: 3,
            d_x: 32,
            d_y: 32,
            d_z: 32,
            noise_sigma: 0.1,
            distractor_regions_per_frame: 4,
            multi_instance_mode: false,
            keyframes_per_segment: 3,
            types_per_doc: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_x < 2 || self.d_y < 2 || self.d_z < 2 {
            return Err(Error::Config("feature dimensions must be >= 2".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.keyframes_per_segment == 0 {
            return Err(Error::Config("keyframes_per_segment must be >= 1".into()));
        }
        if self.types_per_doc == 0 {
            return Err(Error::Config("types_per_doc must be >= 1".into()));
        }
        Ok(())
    }
}

fn unit_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-12);
    for t in v.iter_mut() {
        *t /= norm;
    }
}

fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic unit prototype for (seed, event type, dimension). Types
/// with the same name share a prototype across modalities whenever the
/// requested dimensions agree.
pub fn prototype(seed: u64, type_index: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(
        seed ^ (type_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (dim as u64) << 32,
    );
    let mut v: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
    unit_normalize(&mut v);
    v
}

fn noisy_prototype(proto: &[f64], sigma: f64, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let mut v: Vec<f64> = proto.iter().map(|&p| p + sigma * gaussian(rng)).collect();
    unit_normalize(&mut v);
    v
}

fn noise_vector(dim: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    unit_normalize(&mut v);
    v
}

fn distractor_box(rng: &mut ChaCha20Rng) -> BoundingBox {
    let x1 = rng.gen_range(0.0..0.6);
    let y1 = rng.gen_range(0.0..0.6);
    let w = rng.gen_range(0.1..0.35);
    let h = rng.gen_range(0.1..0.35);
    BoundingBox::new(x1, y1, (x1 + w).min(1.0), (y1 + h).min(1.0)).expect("valid box")
}

/// The box where every planted signal region (and thus every gold video
/// argument) lives.
pub fn signal_box() -> BoundingBox {
    BoundingBox::new(0.3, 0.3, 0.7, 0.7).expect("valid box")
}

/// Generate a corpus with known gold structure. Pure function of the
/// config (seed included).
pub fn generate_corpus(cfg: &SynthConfig, ontology: &Ontology) -> Result<Vec<MultimediaDocument>> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let n_types = ontology.event_types.len();
    let mut docs = Vec::with_capacity(cfg.n_docs);

    for di in 0..cfg.n_docs {
        // per-doc pool of event types
        let pool_size = cfg.types_per_doc.min(n_types);
        let mut all: Vec<usize> = (0..n_types).collect();
        for k in 0..pool_size {
            let j = rng.gen_range(k..all.len());
            all.swap(k, j);
        }
        let pool = &all[..pool_size];

        let n_shared = cfg.sentences_per_doc.min(cfg.segments_per_doc);
        let slots = cfg.sentences_per_doc.max(cfg.segments_per_doc);
        let mut sent_types = Vec::with_capacity(cfg.sentences_per_doc);
        let mut seg_types = Vec::with_capacity(cfg.segments_per_doc);
        for i in 0..slots {
            let t = pool[rng.gen_range(0..pool.len())];
            // co-occurring sentence/segment pairs share their type
            if i < n_shared {
                sent_types.push(t);
                seg_types.push(t);
            } else {
                if i < cfg.sentences_per_doc {
                    sent_types.push(t);
                }
                if i < cfg.segments_per_doc {
                    seg_types.push(pool[rng.gen_range(0..pool.len())]);
                }
            }
        }

        let mut sentences = Vec::new();
        let mut text_events = Vec::new();
        for (si, &ti) in sent_types.iter().enumerate() {
            let ty = &ontology.event_types[ti];
            let sentence_id = format!("s{si}");
            let trigger_word = format!("trig_{}", ty.name);
            let arg_word = format!("arg_{}", ty.name);
            let tokens = vec![
                "the".to_string(),
                trigger_word,
                "of".to_string(),
                arg_word,
                "happened".to_string(),
            ];
            let proto = prototype(cfg.seed, ti, cfg.d_x);
            let feature = noisy_prototype(&proto, cfg.noise_sigma, &mut rng);
            let candidates = vec![Span { start: 3, end: 4 }, Span { start: 0, end: 1 }];
            text_events.push(TextEventAnn {
                sentence_id: sentence_id.clone(),
                trigger: Span { start: 1, end: 2 },
                event_type: ty.name.clone(),
                args: vec![TextArg {
                    span: Span { start: 3, end: 4 },
                    role: ty.roles[0].clone(),
                }],
            });
            sentences.push(Sentence {
                sentence_id,
                tokens,
                sentence_feature: feature,
                entity_candidates: candidates,
            });
        }

        let mut segments = Vec::new();
        let mut video_events = Vec::new();
        for (vi, &ti) in seg_types.iter().enumerate() {
            let ty = &ontology.event_types[ti];
            let segment_id = format!("v{vi}");
            let proto_y = prototype(cfg.seed, ti, cfg.d_y);
            let proto_z = prototype(cfg.seed, ti, cfg.d_z);
            let clip_feature = if cfg.multi_instance_mode {
                noise_vector(cfg.d_y, &mut rng)
            } else {
                noisy_prototype(&proto_y, cfg.noise_sigma, &mut rng)
            };
            let signal_frames: Vec<usize> = if cfg.multi_instance_mode {
                vec![0]
            } else {
                (0..cfg.keyframes_per_segment).collect()
            };
            let mut keyframes = Vec::new();
            let mut args = Vec::new();
            for fi in 0..cfg.keyframes_per_segment {
                let mut regions = Vec::new();
                if signal_frames.contains(&fi) {
                    regions.push(Region {
                        bbox: signal_box(),
                        label: format!("obj_{}", ty.name),
                        confidence: 0.95,
                        feature: noisy_prototype(&proto_z, cfg.noise_sigma, &mut rng),
                    });
                    args.push(VideoArg {
                        role: ty.roles[0].clone(),
                        keyframe_id: fi,
                        bbox: signal_box(),
                    });
                }
                for _ in 0..cfg.distractor_regions_per_frame {
                    regions.push(Region {
                        bbox: distractor_box(&mut rng),
                        label: "obj_background".to_string(),
                        confidence: rng.gen_range(0.3..0.9),
                        feature: noise_vector(cfg.d_z, &mut rng),
                    });
                }
                keyframes.push(Keyframe {
                    frame_id: fi,
                    regions,
                });
            }
            video_events.push(VideoEventAnn {
                segment_id: segment_id.clone(),
                event_type: ty.name.clone(),
                args,
            });
            segments.push(VideoSegment {
                segment_id,
                start_s: vi as f64 * 5.0,
                end_s: vi as f64 * 5.0 + 4.0,
                clip_feature,
                keyframes,
            });
        }

        // gold links: every same-type sentence/segment pair
        let mut coref_links = Vec::new();
        for (si, &st) in sent_types.iter().enumerate() {
            for (vi, &vt) in seg_types.iter().enumerate() {
                if st == vt {
                    coref_links.push(CorefLink {
                        sentence_id: format!("s{si}"),
                        segment_id: format!("v{vi}"),
                    });
                }
            }
        }

        let doc = MultimediaDocument {
            doc_id: format!("d{di}"),
            sentences,
            segments,
            text_events,
            video_events,
            coref_links,
        };
        doc.validate().expect("generated document is valid");
        docs.push(doc);
    }
    Ok(docs)
}

/// Arity class of one connected component of coreference links.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkArity {
    OneToOne,
    OneToN,
    NToOne,
    NToN,
}

impl std::fmt::Display for LinkArity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LinkArity::OneToOne => "1-to-1",
            LinkArity::OneToN => "1-to-n",
            LinkArity::NToOne => "n-to-1",
            LinkArity::NToN => "n-to-n",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlantReport {
    /// Link count per arity class of the link's connected component.
    pub arity_histogram: BTreeMap<LinkArity, usize>,
    /// Gold event count per event type (text and video combined).
    pub type_histogram: BTreeMap<String, usize>,
    pub total_links: usize,
}

/// Classify every link by the arity of its connected component: a
/// sentence linked to n segments is 1-to-n, and so on.
pub fn plant_report(docs: &[MultimediaDocument]) -> PlantReport {
    let mut report = PlantReport::default();
    for doc in docs {
        // union-find over sentence/segment nodes of this document
        let mut nodes: Vec<String> = Vec::new();
        let mut index = BTreeMap::new();
        let id_of = |name: String, nodes: &mut Vec<String>, index: &mut BTreeMap<String, usize>| {
            *index.entry(name.clone()).or_insert_with(|| {
                nodes.push(name);
                nodes.len() - 1
            })
        };
        let mut parent: Vec<usize> = Vec::new();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let mut edges = Vec::new();
        for link in &doc.coref_links {
            let a = id_of(format!("s:{}", link.sentence_id), &mut nodes, &mut index);
            while parent.len() < nodes.len() {
                parent.push(parent.len());
            }
            let b = id_of(format!("v:{}", link.segment_id), &mut nodes, &mut index);
            while parent.len() < nodes.len() {
                parent.push(parent.len());
            }
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
            edges.push((a, b));
        }
        // component -> (distinct sentences, distinct segments)
        let mut comp_sent: BTreeMap<usize, std::collections::BTreeSet<usize>> = BTreeMap::new();
        let mut comp_seg: BTreeMap<usize, std::collections::BTreeSet<usize>> = BTreeMap::new();
        for &(a, b) in &edges {
            let root = find(&mut parent, a);
            comp_sent.entry(root).or_default().insert(a);
            comp_seg.entry(root).or_default().insert(b);
        }
        for &(a, _) in &edges {
            let root = find(&mut parent, a);
            let ns = comp_sent[&root].len();
            let nv = comp_seg[&root].len();
            let arity = match (ns > 1, nv > 1) {
                (false, false) => LinkArity::OneToOne,
                (false, true) => LinkArity::OneToN,
                (true, false) => LinkArity::NToOne,
                (true, true) => LinkArity::NToN,
            };
            *report.arity_histogram.entry(arity).or_insert(0) += 1;
            report.total_links += 1;
        }
        for ev in &doc.text_events {
            *report.type_histogram.entry(ev.event_type.clone()).or_insert(0) += 1;
        }
        for ev in &doc.video_events {
            *report.type_histogram.entry(ev.event_type.clone()).or_insert(0) += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::save_corpus;

    #[test]
    fn generation_is_deterministic() {
        let ont = Ontology::bundled();
        let cfg = SynthConfig {
            seed: 7,
            ..Default::default()
        };
        let a = generate_corpus(&cfg, &ont).unwrap();
        let b = generate_corpus(&cfg, &ont).unwrap();
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        save_corpus(&a, &p1).unwrap();
        save_corpus(&b, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn zero_noise_shared_prototype_cosine_is_one() {
        let ont = Ontology::bundled();
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            d_x: 16,
            d_y: 16,
            multi_instance_mode: false,
            seed: 3,
            ..Default::default()
        };
        let docs = generate_corpus(&cfg, &ont).unwrap();
        for doc in &docs {
            for link in &doc.coref_links {
                let s = doc.sentence(&link.sentence_id).unwrap();
                let v = doc.segment(&link.segment_id).unwrap();
                let cos: f64 = s
                    .sentence_feature
                    .iter()
                    .zip(&v.clip_feature)
                    .map(|(a, b)| a * b)
                    .sum();
                assert!((cos - 1.0).abs() < 1e-9, "cos = {cos}");
            }
        }
    }

    #[test]
    fn annotations_conform_to_ontology() {
        let ont = Ontology::bundled();
        let docs = generate_corpus(&SynthConfig::default(), &ont).unwrap();
        for doc in &docs {
            assert!(doc.schema_violations(&ont).is_empty());
        }
    }

    #[test]
    fn nearest_prototype_recovers_planted_types() {
        // pre-training sanity oracle: at low noise, clip features classify
        // to their planted type with accuracy 1.0
        let ont = Ontology::bundled();
        let cfg = SynthConfig {
            noise_sigma: 0.05,
            n_docs: 20,
            seed: 5,
            ..Default::default()
        };
        let docs = generate_corpus(&cfg, &ont).unwrap();
        for doc in &docs {
            for (seg, ev) in doc.segments.iter().zip(&doc.video_events) {
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for ti in 0..ont.event_types.len() {
                    let proto = prototype(cfg.seed, ti, cfg.d_y);
                    let cos: f64 = seg
                        .clip_feature
                        .iter()
                        .zip(&proto)
                        .map(|(a, b)| a * b)
                        .sum();
                    if cos > best.0 {
                        best = (cos, ti);
                    }
                }
                assert_eq!(ont.event_types[best.1].name, ev.event_type);
            }
        }
    }

    #[test]
    fn multi_instance_clips_carry_no_type_signal() {
        // clip features in multi-instance mode are drawn independently of
        // the type, so nearest-prototype classification is at chance; the
        // signal region still aligns with its type prototype
        let ont = Ontology::bundled();
        let cfg = SynthConfig {
            multi_instance_mode: true,
            noise_sigma: 0.05,
            n_docs: 30,
            seed: 11,
            ..Default::default()
        };
        let docs = generate_corpus(&cfg, &ont).unwrap();
        let mut clip_correct = 0;
        let mut total = 0;
        for doc in &docs {
            for (seg, ev) in doc.segments.iter().zip(&doc.video_events) {
                let ti_gold = ont.type_index(&ev.event_type).unwrap();
                let best_clip = (0..ont.event_types.len())
                    .max_by(|&a, &b| {
                        let ca: f64 = seg
                            .clip_feature
                            .iter()
                            .zip(&prototype(cfg.seed, a, cfg.d_y))
                            .map(|(x, y)| x * y)
                            .sum();
                        let cb: f64 = seg
                            .clip_feature
                            .iter()
                            .zip(&prototype(cfg.seed, b, cfg.d_y))
                            .map(|(x, y)| x * y)
                            .sum();
                        ca.partial_cmp(&cb).unwrap()
                    })
                    .unwrap();
                if best_clip == ti_gold {
                    clip_correct += 1;
                }
                total += 1;
                // exactly one region carries the signal label
                let signal_count: usize = seg
                    .keyframes
                    .iter()
                    .flat_map(|kf| &kf.regions)
                    .filter(|r| r.label.starts_with("obj_") && r.label != "obj_background")
                    .count();
                assert_eq!(signal_count, 1);
            }
        }
        // well below perfect; chance over a 3-type pool would be ~1/3
        assert!((clip_correct as f64) < 0.7 * total as f64);
    }

    #[test]
    fn plant_report_single_link() {
        let ont = Ontology::bundled();
        let cfg = SynthConfig {
            n_docs: 1,
            sentences_per_doc: 1,
            segments_per_doc: 1,
            types_per_doc: 1,
            seed: 2,
            ..Default::default()
        };
        let docs = generate_corpus(&cfg, &ont).unwrap();
        let report = plant_report(&docs);
        assert_eq!(report.total_links, 1);
        assert_eq!(report.arity_histogram.get(&LinkArity::OneToOne), Some(&1));

        assert_eq!(plant_report(&[]), PlantReport::default());
    }

    #[test]
    fn plant_report_arity_classes() {
        use crate::corpus::*;
        // hand-built doc: s0-v0 (1-1), s1-{v1,v2} (1-n), {s2,s3}-v3 (n-1)
        let sent = |id: &str| Sentence {
            sentence_id: id.into(),
            tokens: vec!["w".into()],
            sentence_feature: vec![0.0, 1.0],
            entity_candidates: vec![],
        };
        let seg = |id: &str| VideoSegment {
            segment_id: id.into(),
            start_s: 0.0,
            end_s: 1.0,
            clip_feature: vec![1.0, 0.0],
            keyframes: vec![],
        };
        let link = |s: &str, v: &str| CorefLink {
            sentence_id: s.into(),
            segment_id: v.into(),
        };
        let doc = MultimediaDocument {
            doc_id: "d".into(),
            sentences: vec![sent("s0"), sent("s1"), sent("s2"), sent("s3")],
            segments: vec![seg("v0"), seg("v1"), seg("v2"), seg("v3")],
            text_events: vec![],
            video_events: vec![],
            coref_links: vec![
                link("s0", "v0"),
                link("s1", "v1"),
                link("s1", "v2"),
                link("s2", "v3"),
                link("s3", "v3"),
            ],
        };
        doc.validate().unwrap();
        let report = plant_report(&[doc]);
        assert_eq!(report.arity_histogram.get(&LinkArity::OneToOne), Some(&1));
        assert_eq!(report.arity_histogram.get(&LinkArity::OneToN), Some(&2));
        assert_eq!(report.arity_histogram.get(&LinkArity::NToOne), Some(&2));
        assert_eq!(report.total_links, 5);
    }
}
