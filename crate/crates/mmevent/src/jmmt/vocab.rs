//! Shared token vocabulary for the joint multimodal transformer and the
//! target-sequence codec for the video decoding head.
//!
//! Id layout (dense, deterministic given ontology, text vocabulary and
//! bin count): specials, then one token per ontology event type, one per
//! distinct role name (first-appearance order over the schema), `B`
//! coordinate tokens, then the text words in the order given.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{BoundingBox, VideoEventAnn};
use crate::error::{Error, Result};
use crate::ontology::Ontology;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const NULL_BOX: usize = 4;
pub const UNK: usize = 5;
const N_SPECIALS: usize = 6;

/// Interpreted kind of a token id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Sep,
    NullBox,
    Unk,
    /// Index into the ontology's event type list.
    Event(usize),
    /// Index into the distinct role list.
    Role(usize),
    /// Quantization bin.
    Coord(usize),
    /// Index into the word list.
    Word(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub bins: usize,
    event_types: Vec<String>,
    roles: Vec<String>,
    words: Vec<String>,
    #[serde(skip)]
    event_ids: BTreeMap<String, usize>,
    #[serde(skip)]
    role_ids: BTreeMap<String, usize>,
    #[serde(skip)]
    word_ids: BTreeMap<String, usize>,
}

/// Deterministic id assignment covering all ontology types and roles.
pub fn build_vocab(ontology: &Ontology, text_vocab: &[String], bins_b: usize) -> Result<Vocabulary> {
    if bins_b < 2 {
        return Err(Error::Config(format!(
            "coordinate bin count must be at least 2, got {bins_b}"
        )));
    }
    let event_types: Vec<String> = ontology.event_types.iter().map(|t| t.name.clone()).collect();
    let roles = ontology.distinct_roles();
    let mut words = Vec::new();
    let mut seen = BTreeMap::new();
    for w in text_vocab {
        if seen.insert(w.clone(), ()).is_none() {
            words.push(w.clone());
        }
    }
    let mut v = Vocabulary {
        bins: bins_b,
        event_types,
        roles,
        words,
        event_ids: BTreeMap::new(),
        role_ids: BTreeMap::new(),
        word_ids: BTreeMap::new(),
    };
    v.rebuild_index();
    Ok(v)
}

impl Vocabulary {
    /// Rebuilds the lookup maps (needed after deserialization, which
    /// skips them).
    pub fn rebuild_index(&mut self) {
        self.event_ids = self
            .event_types
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        self.role_ids = self
            .roles
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        self.word_ids = self
            .words
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }

    pub fn event_base(&self) -> usize {
        N_SPECIALS
    }

    pub fn role_base(&self) -> usize {
        self.event_base() + self.event_types.len()
    }

    pub fn coord_base(&self) -> usize {
        self.role_base() + self.roles.len()
    }

    pub fn word_base(&self) -> usize {
        self.coord_base() + self.bins
    }

    pub fn len(&self) -> usize {
        self.word_base() + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_event_types(&self) -> usize {
        self.event_types.len()
    }

    pub fn n_roles(&self) -> usize {
        self.roles.len()
    }

    pub fn event_names(&self) -> &[String] {
        &self.event_types
    }

    pub fn role_names(&self) -> &[String] {
        &self.roles
    }

    pub fn event_id(&self, name: &str) -> Result<usize> {
        self.event_ids
            .get(name)
            .map(|i| self.event_base() + i)
            .ok_or_else(|| Error::UnknownEventType(name.to_string()))
    }

    pub fn role_id(&self, name: &str) -> Result<usize> {
        self.role_ids
            .get(name)
            .map(|i| self.role_base() + i)
            .ok_or_else(|| Error::Validation(format!("unknown role {name:?}")))
    }

    /// Global role index (0-based into the distinct role list).
    pub fn role_index(&self, name: &str) -> Option<usize> {
        self.role_ids.get(name).copied()
    }

    pub fn coord_id(&self, bin: usize) -> usize {
        debug_assert!(bin < self.bins);
        self.coord_base() + bin
    }

    /// Word token id; unknown words map to [`UNK`].
    pub fn word_id(&self, word: &str) -> usize {
        match self.word_ids.get(word) {
            Some(i) => self.word_base() + i,
            None => UNK,
        }
    }

    pub fn kind(&self, id: usize) -> TokenKind {
        match id {
            PAD => TokenKind::Pad,
            BOS => TokenKind::Bos,
            EOS => TokenKind::Eos,
            SEP => TokenKind::Sep,
            NULL_BOX => TokenKind::NullBox,
            UNK => TokenKind::Unk,
            _ if id < self.role_base() => TokenKind::Event(id - self.event_base()),
            _ if id < self.coord_base() => TokenKind::Role(id - self.role_base()),
            _ if id < self.word_base() => TokenKind::Coord(id - self.coord_base()),
            _ => TokenKind::Word(id - self.word_base()),
        }
    }
}

/// Bin index for a coordinate in [0,1]; out-of-range values clamp and
/// set the warning flag.
pub fn quantize_coord(c: f64, bins_b: usize) -> (usize, bool) {
    let out_of_range = !(0.0..=1.0).contains(&c) || c.is_nan();
    let c = if c.is_nan() { 0.0 } else { c.clamp(0.0, 1.0) };
    let bin = ((c * bins_b as f64).floor() as usize).min(bins_b - 1);
    (bin, out_of_range)
}

/// Bin center.
pub fn dequantize_coord(bin: usize, bins_b: usize) -> f64 {
    (bin as f64 + 0.5) / bins_b as f64
}

/// Decoded video-head output: event type (or none) and per-role boxes on
/// each of the `t` sampled keyframes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEventPrediction {
    pub event_type: Option<String>,
    /// (role, exactly `t` per-keyframe boxes, absent frames `None`).
    pub args: Vec<(String, Vec<Option<BoundingBox>>)>,
}

/// Target token sequence for one video event annotation:
/// `[bos, EVT, (ROLE, t box groups)…, eos]` where a box group is four
/// coordinate tokens or a single null-box token. Roles follow the
/// ontology's schema order for the event type.
pub fn serialize_target(
    ann: &VideoEventAnn,
    ontology: &Ontology,
    vocab: &Vocabulary,
    frames_t: usize,
) -> Result<Vec<usize>> {
    let schema_roles = ontology.roles_for(&ann.event_type)?;
    let mut out = vec![BOS, vocab.event_id(&ann.event_type)?];
    for arg in &ann.args {
        if !schema_roles.contains(&arg.role) {
            return Err(Error::Validation(format!(
                "role {:?} not licensed for event type {:?}",
                arg.role, ann.event_type
            )));
        }
        if arg.keyframe_id >= frames_t {
            return Err(Error::Validation(format!(
                "keyframe id {} out of range for t={frames_t}",
                arg.keyframe_id
            )));
        }
    }
    for role in schema_roles {
        let args: Vec<_> = ann.args.iter().filter(|a| &a.role == role).collect();
        if args.is_empty() {
            continue;
        }
        out.push(vocab.role_id(role)?);
        for kf in 0..frames_t {
            let boxes: Vec<_> = args.iter().filter(|a| a.keyframe_id == kf).collect();
            match boxes.as_slice() {
                [] => out.push(NULL_BOX),
                [a] => {
                    for c in [a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2] {
                        let (bin, _) = quantize_coord(c, vocab.bins);
                        out.push(vocab.coord_id(bin));
                    }
                }
                _ => {
                    return Err(Error::Validation(format!(
                        "role {role:?} has multiple boxes on keyframe {kf}"
                    )))
                }
            }
        }
    }
    out.push(EOS);
    Ok(out)
}

/// Total inverse of [`serialize_target`]: parses greedily, drops
/// malformed tails with a recorded warning, never fails on arbitrary
/// decoder output.
pub fn deserialize_target(
    tokens: &[usize],
    vocab: &Vocabulary,
    frames_t: usize,
) -> (VideoEventPrediction, Vec<String>) {
    let mut warnings = Vec::new();
    let mut pred = VideoEventPrediction {
        event_type: None,
        args: Vec::new(),
    };
    let mut it = tokens
        .iter()
        .copied()
        .filter(|&t| t != PAD)
        .take_while(|&t| t != EOS)
        .peekable();
    if it.peek() == Some(&BOS) {
        it.next();
    } else {
        warnings.push("sequence does not start with bos".into());
    }
    match it.next() {
        None => return (pred, warnings), // no event sentinel
        Some(tok) => match vocab.kind(tok) {
            TokenKind::Event(i) => pred.event_type = Some(vocab.event_names()[i].clone()),
            _ => {
                warnings.push(format!("expected event token, got id {tok}; no event decoded"));
                return (pred, warnings);
            }
        },
    }
    'roles: while let Some(tok) = it.next() {
        let role = match vocab.kind(tok) {
            TokenKind::Role(i) => vocab.role_names()[i].clone(),
            _ => {
                warnings.push(format!("expected role token, got id {tok}; tail dropped"));
                break;
            }
        };
        let mut boxes: Vec<Option<BoundingBox>> = Vec::with_capacity(frames_t);
        for kf in 0..frames_t {
            match it.peek().copied() {
                Some(NULL_BOX) => {
                    it.next();
                    boxes.push(None);
                }
                Some(tok) if matches!(vocab.kind(tok), TokenKind::Coord(_)) => {
                    let mut coords = [0.0; 4];
                    for coord in coords.iter_mut() {
                        match it.next().map(|t| vocab.kind(t)) {
                            Some(TokenKind::Coord(bin)) => {
                                *coord = dequantize_coord(bin, vocab.bins);
                            }
                            _ => {
                                warnings.push(format!(
                                    "truncated coordinate group for role {role:?} \
                                     on keyframe {kf}; role dropped"
                                ));
                                break 'roles;
                            }
                        }
                    }
                    match BoundingBox::new(coords[0], coords[1], coords[2], coords[3]) {
                        Ok(b) => boxes.push(Some(b)),
                        Err(_) => {
                            warnings.push(format!(
                                "degenerate box for role {role:?} on keyframe {kf}; \
                                 box dropped"
                            ));
                            boxes.push(None);
                        }
                    }
                }
                _ => {
                    warnings.push(format!(
                        "role {role:?} is missing box groups for keyframe {kf}; role dropped"
                    ));
                    break 'roles;
                }
            }
        }
        pred.args.push((role, boxes));
    }
    (pred, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::VideoArg;

    fn vocab() -> Vocabulary {
        let words: Vec<String> = ["the", "man", "ran"].iter().map(|s| s.to_string()).collect();
        build_vocab(&Ontology::bundled(), &words, 1000).unwrap()
    }

    #[test]
    fn vocab_layout_is_dense_and_deterministic() {
        let v = vocab();
        assert_eq!(v.n_event_types(), 16);
        assert_eq!(v.event_base(), 6);
        assert_eq!(v.role_base(), 6 + 16);
        assert_eq!(v.coord_base(), v.role_base() + v.n_roles());
        assert_eq!(v.len(), v.word_base() + 3);
        let v2 = vocab();
        assert_eq!(v, v2);
        // B=10 gives exactly 10 coordinate tokens.
        let small = build_vocab(&Ontology::bundled(), &[], 10).unwrap();
        assert_eq!(small.word_base() - small.coord_base(), 10);
        assert!(build_vocab(&Ontology::bundled(), &[], 1).is_err());
    }

    #[test]
    fn word_lookup_falls_back_to_unk() {
        let v = vocab();
        assert_eq!(v.kind(v.word_id("man")), TokenKind::Word(1));
        assert_eq!(v.word_id("zebra"), UNK);
    }

    #[test]
    fn quantization_formula_and_bounds() {
        assert_eq!(quantize_coord(0.1, 1000), (100, false));
        assert_eq!(quantize_coord(1.0, 1000), (999, false));
        assert_eq!(quantize_coord(0.0, 1000), (0, false));
        assert_eq!(quantize_coord(1.2, 1000), (999, true));
        assert_eq!(quantize_coord(-0.5, 1000), (0, true));
        for i in 0..=100 {
            let c = i as f64 / 100.0;
            let (bin, warn) = quantize_coord(c, 1000);
            assert!(!warn);
            assert!((dequantize_coord(bin, 1000) - c).abs() <= 0.5 / 1000.0 + 1e-12);
        }
    }

    #[test]
    fn serialize_worked_example() {
        let v = vocab();
        let ann = VideoEventAnn {
            segment_id: "v0".into(),
            event_type: "Justice.ArrestJail".into(),
            args: (0..3)
                .map(|kf| VideoArg {
                    role: "Jailer".into(),
                    keyframe_id: kf,
                    bbox: BoundingBox::new(0.1, 0.2, 0.5, 0.8).unwrap(),
                })
                .collect(),
        };
        let toks = serialize_target(&ann, &Ontology::bundled(), &v, 3).unwrap();
        let group = [
            v.coord_id(100),
            v.coord_id(200),
            v.coord_id(500),
            v.coord_id(800),
        ];
        let mut expect = vec![BOS, v.event_id("Justice.ArrestJail").unwrap(), v.role_id("Jailer").unwrap()];
        for _ in 0..3 {
            expect.extend_from_slice(&group);
        }
        expect.push(EOS);
        assert_eq!(toks, expect);
    }

    #[test]
    fn serialize_no_args_and_null_box_frames() {
        let v = vocab();
        let ann = VideoEventAnn {
            segment_id: "v0".into(),
            event_type: "Conflict.Attack".into(),
            args: vec![],
        };
        let toks = serialize_target(&ann, &Ontology::bundled(), &v, 3).unwrap();
        assert_eq!(toks, vec![BOS, v.event_id("Conflict.Attack").unwrap(), EOS]);

        let ann = VideoEventAnn {
            segment_id: "v0".into(),
            event_type: "Conflict.Attack".into(),
            args: vec![VideoArg {
                role: "Attacker".into(),
                keyframe_id: 1,
                bbox: BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap(),
            }],
        };
        let toks = serialize_target(&ann, &Ontology::bundled(), &v, 3).unwrap();
        // bos, EVT, ROLE, null, 4 coords, null, eos
        assert_eq!(toks.len(), 3 + 1 + 4 + 1 + 1);
        assert_eq!(toks[3], NULL_BOX);
        assert_eq!(toks[8], NULL_BOX);
    }

    #[test]
    fn serialize_rejects_bad_annotations() {
        let v = vocab();
        let bad_role = VideoEventAnn {
            segment_id: "v0".into(),
            event_type: "Conflict.Attack".into(),
            args: vec![VideoArg {
                role: "Jailer".into(),
                keyframe_id: 0,
                bbox: BoundingBox::new(0.1, 0.1, 0.2, 0.2).unwrap(),
            }],
        };
        assert!(serialize_target(&bad_role, &Ontology::bundled(), &v, 3).is_err());
        let bad_type = VideoEventAnn {
            segment_id: "v0".into(),
            event_type: "Nope.Nope".into(),
            args: vec![],
        };
        assert!(serialize_target(&bad_type, &Ontology::bundled(), &v, 3).is_err());
    }

    #[test]
    fn round_trip_recovers_within_half_bin() {
        let v = vocab();
        let ann = VideoEventAnn {
            segment_id: "v0".into(),
            event_type: "Movement.Transport".into(),
            args: vec![
                VideoArg {
                    role: "Transporter".into(),
                    keyframe_id: 0,
                    bbox: BoundingBox::new(0.123, 0.456, 0.654, 0.987).unwrap(),
                },
                VideoArg {
                    role: "PassengerArtifact".into(),
                    keyframe_id: 2,
                    bbox: BoundingBox::new(0.01, 0.02, 0.98, 0.99).unwrap(),
                },
            ],
        };
        let toks = serialize_target(&ann, &Ontology::bundled(), &v, 3).unwrap();
        let (pred, warnings) = deserialize_target(&toks, &v, 3);
        assert!(warnings.is_empty());
        assert_eq!(pred.event_type.as_deref(), Some("Movement.Transport"));
        assert_eq!(pred.args.len(), 2);
        let (role, boxes) = &pred.args[0];
        assert_eq!(role, "Transporter");
        let b = boxes[0].unwrap();
        for (got, want) in [
            (b.x1, 0.123),
            (b.y1, 0.456),
            (b.x2, 0.654),
            (b.y2, 0.987),
        ] {
            assert!((got - want).abs() <= 0.5 / 1000.0 + 1e-12);
        }
        assert!(boxes[1].is_none() && boxes[2].is_none());
        let (role, boxes) = &pred.args[1];
        assert_eq!(role, "PassengerArtifact");
        assert!(boxes[0].is_none() && boxes[1].is_none() && boxes[2].is_some());
    }

    #[test]
    fn deserialize_is_total_on_malformed_input() {
        let v = vocab();
        // Truncated coordinate group: role dropped, one warning.
        let toks = vec![
            BOS,
            v.event_id("Conflict.Attack").unwrap(),
            v.role_id("Attacker").unwrap(),
            v.coord_id(10),
            EOS,
        ];
        let (pred, warnings) = deserialize_target(&toks, &v, 3);
        assert_eq!(pred.event_type.as_deref(), Some("Conflict.Attack"));
        assert!(pred.args.is_empty());
        assert_eq!(warnings.len(), 1);

        // Bare [bos, eos]: the no-event sentinel.
        let (pred, warnings) = deserialize_target(&[BOS, EOS], &v, 3);
        assert!(pred.event_type.is_none() && warnings.is_empty());

        // Garbage never panics.
        for t in 0..v.len() {
            let _ = deserialize_target(&[t, t, t, t], &v, 3);
        }
    }
}
