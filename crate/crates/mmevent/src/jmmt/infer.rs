//! Inference for the joint multimodal transformer: greedy and beam
//! decoding of the video head, BIO decoding plus role classification for
//! the text head, and the combined per-pair prediction entry point.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::{Sentence, Span, VideoSegment};
use crate::error::{Error, Result};
use crate::jmmt::model::{
    build_input, decoder_graph, encode, max_decode_len, none_role, role_logits_graph,
    role_pairs, trigger_logits_graph, Binder, JmmtModel, MultimodalInput,
};
use crate::jmmt::vocab::{deserialize_target, TokenKind, VideoEventPrediction, BOS, EOS};
use crate::ontology::Ontology;

/// Extracted text-side event: trigger span, type, and role-labeled
/// entity candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEventPrediction {
    pub trigger: Span,
    pub event_type: String,
    pub args: Vec<(Span, String)>,
}

/// A decoded hypothesis with its cumulative log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logp: f64,
}

impl Hypothesis {
    /// Length-normalized score (normalization exponent 1.0 over the
    /// number of generated tokens).
    pub fn score(&self) -> f64 {
        self.logp / (self.tokens.len().saturating_sub(1).max(1)) as f64
    }

    pub fn done(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Next-token log-probabilities after the given prefix.
fn step_logprobs(
    model: &JmmtModel,
    enc: &Array2<f64>,
    enc_is_pad: &[bool],
    prefix: &[usize],
) -> Vec<f64> {
    let mut g = Graph::new();
    let mut b = Binder::new(false);
    let enc_var = g.constant(enc.clone());
    let logits = decoder_graph(&mut g, &mut b, model, enc_var, enc_is_pad, prefix);
    let row = g.value(logits).row(prefix.len() - 1).to_owned();
    log_softmax(row.as_slice().unwrap())
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&x| x - lse).collect()
}

/// Top `k` (logprob, token) extensions, ties to the smaller token id.
fn top_k(logprobs: &[f64], k: usize) -> Vec<(f64, usize)> {
    let mut idx: Vec<usize> = (0..logprobs.len()).collect();
    idx.sort_by(|&a, &b| {
        logprobs[b]
            .partial_cmp(&logprobs[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.into_iter().take(k).map(|i| (logprobs[i], i)).collect()
}

/// Greedy decoding: argmax token per step (ties to the smaller id)
/// until eos or the length cap.
pub fn greedy_decode(
    model: &JmmtModel,
    enc: &Array2<f64>,
    enc_is_pad: &[bool],
    max_len: usize,
) -> Hypothesis {
    let mut h = Hypothesis {
        tokens: vec![BOS],
        logp: 0.0,
    };
    while !h.done() && h.tokens.len() < max_len {
        let lp = step_logprobs(model, enc, enc_is_pad, &h.tokens);
        let (p, t) = top_k(&lp, 1)[0];
        h.tokens.push(t);
        h.logp += p;
    }
    h
}

/// Length-normalized beam search. Beams are pruned by cumulative
/// log-probability (ties broken lexicographically by token sequence);
/// every hypothesis that emits eos enters a finished pool, and the final
/// answer maximizes the normalized score over that pool plus any
/// unfinished beams at the length cap and the greedy hypothesis (so a
/// wider beam never scores below greedy). Width 1 reduces exactly to
/// greedy decoding.
pub fn beam_search(
    model: &JmmtModel,
    enc: &Array2<f64>,
    enc_is_pad: &[bool],
    width: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if max_len < 2 {
        return Err(Error::Config("max decode length must be at least 2".into()));
    }
    let mut beams = vec![Hypothesis {
        tokens: vec![BOS],
        logp: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while beams.iter().any(|h| !h.done()) {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for h in &beams {
            if h.done() {
                candidates.push(h.clone());
                continue;
            }
            let lp = step_logprobs(model, enc, enc_is_pad, &h.tokens);
            for (p, t) in top_k(&lp, width) {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                let cand = Hypothesis {
                    tokens,
                    logp: h.logp + p,
                };
                if cand.done() {
                    finished.push(cand.clone());
                }
                candidates.push(cand);
            }
        }
        candidates.sort_by(|a, b| {
            b.logp
                .partial_cmp(&a.logp)
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(width);
        beams = candidates;
        if beams.iter().all(|h| h.tokens.len() >= max_len || h.done()) {
            break;
        }
    }
    let mut pool = finished;
    pool.extend(beams);
    if width > 1 {
        // Greedy fallback: pruning by cumulative log-probability can
        // evict the greedy path even though it would win under length
        // normalization, so keep it in the pool. Widening the beam then
        // never scores below greedy decoding.
        pool.push(greedy_decode(model, enc, enc_is_pad, max_len));
    }
    pool.sort_by(|a, b| {
        b.score()
            .partial_cmp(&a.score())
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    pool.dedup_by(|a, b| a.tokens == b.tokens);
    Ok(pool.remove(0))
}

/// Normalized score the decoder assigns to a full token sequence
/// (starting with bos); used to compare beam and greedy outputs under
/// identical normalization.
pub fn sequence_score(
    model: &JmmtModel,
    enc: &Array2<f64>,
    enc_is_pad: &[bool],
    tokens: &[usize],
) -> f64 {
    assert!(tokens.len() >= 2 && tokens[0] == BOS);
    let mut g = Graph::new();
    let mut b = Binder::new(false);
    let enc_var = g.constant(enc.clone());
    let logits = decoder_graph(
        &mut g,
        &mut b,
        model,
        enc_var,
        enc_is_pad,
        &tokens[..tokens.len() - 1],
    );
    let values = g.value(logits);
    let mut logp = 0.0;
    for (i, &t) in tokens[1..].iter().enumerate() {
        let row = values.row(i).to_owned();
        logp += log_softmax(row.as_slice().unwrap())[t];
    }
    logp / (tokens.len() - 1) as f64
}

/// Decodes BIO trigger tags and classifies roles for each predicted
/// trigger over the sentence's entity candidates.
pub fn predict_text(
    model: &JmmtModel,
    ontology: &Ontology,
    enc: &Array2<f64>,
    input: &MultimodalInput,
    sentence: &Sentence,
) -> Vec<TextEventPrediction> {
    let n_words = input.n_words;
    if n_words == 0 {
        return Vec::new();
    }
    let mut g = Graph::new();
    let mut b = Binder::new(false);
    let enc_var = g.constant(enc.clone());
    let (words_var, logits) = trigger_logits_graph(&mut g, &mut b, model, enc_var, n_words);
    let tag_logits = g.value(logits).clone();
    let tags: Vec<usize> = (0..n_words)
        .map(|i| {
            let row = tag_logits.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();

    // BIO decode: B-t opens a span, following I-t tokens extend it.
    let mut events: Vec<TextEventPrediction> = Vec::new();
    let mut i = 0;
    while i < n_words {
        let tag = tags[i];
        if tag == 0 || tag % 2 == 0 {
            i += 1;
            continue;
        }
        let type_index = (tag - 1) / 2;
        let start = i;
        let mut end = i + 1;
        while end < n_words && tags[end] == tag + 1 {
            end += 1;
        }
        events.push(TextEventPrediction {
            trigger: Span { start, end },
            event_type: model.vocab.event_names()[type_index].clone(),
            args: Vec::new(),
        });
        i = end;
    }

    if events.is_empty() || sentence.entity_candidates.is_empty() {
        return events;
    }
    // Role classification per (predicted trigger, candidate) pair, with
    // logits masked to the predicted type's licensed roles.
    let gold_like: Vec<crate::corpus::TextEventAnn> = events
        .iter()
        .map(|e| crate::corpus::TextEventAnn {
            sentence_id: sentence.sentence_id.clone(),
            trigger: e.trigger,
            event_type: e.event_type.clone(),
            args: Vec::new(),
        })
        .collect();
    let pairs = role_pairs(sentence, &gold_like, &model.vocab, false);
    let logits = role_logits_graph(&mut g, &mut b, model, words_var, n_words, &pairs, ontology);
    let role_logits = g.value(logits).clone();
    for (pi, pair) in pairs.iter().enumerate() {
        let row = role_logits.row(pi);
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == none_role(&model.vocab) {
            continue;
        }
        let role = model.vocab.role_names()[best].clone();
        if let Some(e) = events
            .iter_mut()
            .find(|e| e.trigger == pair.trigger && e.event_type == pair.event_type)
        {
            e.args.push((pair.candidate, role));
        }
    }
    events
}

/// Full prediction for one coreferential (sentence, segment) pair: text
/// head decode plus beam-searched, deserialized video head output.
pub fn predict(
    model: &JmmtModel,
    ontology: &Ontology,
    sentence: &Sentence,
    segment: &VideoSegment,
    beam_width: usize,
) -> Result<(Vec<TextEventPrediction>, VideoEventPrediction, Vec<String>)> {
    let input = build_input(sentence, segment, &model.vocab, &model.cfg);
    let (enc, is_pad) = encode(model, &input);
    let text = predict_text(model, ontology, &enc, &input, sentence);
    let max_len = max_decode_len(&model.vocab, model.cfg.frames_t);
    let best = beam_search(model, &enc, &is_pad, beam_width, max_len)?;
    let (video, mut warnings) = deserialize_target(&best.tokens, &model.vocab, model.cfg.frames_t);
    warnings.extend(input.warnings.iter().cloned());
    Ok((text, video, warnings))
}

/// Event-type name decoded from a hypothesis, if any (used by tests and
/// reporting).
pub fn decoded_event_type(model: &JmmtModel, tokens: &[usize]) -> Option<String> {
    tokens.iter().find_map(|&t| match model.vocab.kind(t) {
        TokenKind::Event(i) => Some(model.vocab.event_names()[i].clone()),
        _ => None,
    })
}
