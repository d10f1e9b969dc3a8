//! Joint multimodal transformer: multimodal token construction, shared
//! pre-LN encoder, text decoding head (trigger tagging + role
//! classification) and autoregressive video decoding head, with the
//! joint loss L = L_text + L_video.

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::{select_regions, Sentence, Span, TextEventAnn, VideoSegment};
use crate::error::{Error, Result};
use crate::jmmt::vocab::{Vocabulary, PAD, SEP};
use crate::ontology::Ontology;
use crate::optim::{grad_map_add, GradMap, ParamStore};

/// Architecture and input-construction hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JmmtConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub d_clip: usize,
    pub d_region: usize,
    /// Maximum encoder positions; longer inputs lose their visual tail.
    pub max_len: usize,
    pub frames_t: usize,
    pub per_frame_k: usize,
    pub seed: u64,
}

impl Default for JmmtConfig {
    fn default() -> JmmtConfig {
        JmmtConfig {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ff_dim: 128,
            d_clip: 32,
            d_region: 32,
            max_len: 512,
            frames_t: 3,
            per_frame_k: 5,
            seed: 0,
        }
    }
}

impl JmmtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::Config("layers, heads, model_dim must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.frames_t == 0 || self.per_frame_k == 0 {
            return Err(Error::Config("frames_t and per_frame_k must be positive".into()));
        }
        Ok(())
    }
}

/// One encoder position before embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum InputItem {
    /// Word, separator, object-label, or coordinate token.
    Token(usize),
    /// Clip-level feature vector.
    Clip(Vec<f64>),
    /// Region feature vector.
    Region(Vec<f64>),
    /// Padding (masked out of attention).
    Pad,
}

/// Ordered multimodal encoder input for one (sentence, segment) pair:
/// word tokens, a separator, one clip token, then per selected region an
/// object-label token, a region-feature token, and four coordinate
/// tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalInput {
    pub items: Vec<InputItem>,
    pub n_words: usize,
    pub warnings: Vec<String>,
}

/// Builds the encoder input; inputs longer than `max_len` lose their
/// visual tail with a warning.
pub fn build_input(
    sentence: &Sentence,
    segment: &VideoSegment,
    vocab: &Vocabulary,
    cfg: &JmmtConfig,
) -> MultimodalInput {
    let mut items: Vec<InputItem> = sentence
        .tokens
        .iter()
        .map(|w| InputItem::Token(vocab.word_id(w)))
        .collect();
    let n_words = items.len();
    items.push(InputItem::Token(SEP));
    items.push(InputItem::Clip(segment.clip_feature.clone()));
    for region in select_regions(segment, cfg.frames_t, cfg.per_frame_k) {
        items.push(InputItem::Token(vocab.word_id(&region.label)));
        items.push(InputItem::Region(region.feature.clone()));
        for c in [
            region.bbox.x1,
            region.bbox.y1,
            region.bbox.x2,
            region.bbox.y2,
        ] {
            let (bin, _) = crate::jmmt::vocab::quantize_coord(c, vocab.bins);
            items.push(InputItem::Token(vocab.coord_id(bin)));
        }
    }
    let mut warnings = Vec::new();
    if items.len() > cfg.max_len {
        warnings.push(format!(
            "input length {} exceeds {}; visual tail truncated",
            items.len(),
            cfg.max_len
        ));
        items.truncate(cfg.max_len);
    }
    MultimodalInput {
        items,
        n_words,
        warnings,
    }
}

/// The transformer with its parameters and vocabulary.
#[derive(Debug, Clone)]
pub struct JmmtModel {
    pub cfg: JmmtConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

/// Trigger tag layout: O, then B/I per event type.
pub fn n_trigger_tags(vocab: &Vocabulary) -> usize {
    1 + 2 * vocab.n_event_types()
}

pub fn b_tag(type_index: usize) -> usize {
    1 + 2 * type_index
}

pub fn i_tag(type_index: usize) -> usize {
    2 + 2 * type_index
}

/// NONE class index for the role classifier.
pub fn none_role(vocab: &Vocabulary) -> usize {
    vocab.n_roles()
}

impl JmmtModel {
    pub fn new(cfg: JmmtConfig, vocab: Vocabulary) -> Result<JmmtModel> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let d = cfg.model_dim;
        let v = vocab.len();
        let mut p = ParamStore::new();
        p.insert_glorot("tok_emb", v, d, &mut rng);
        p.insert_glorot("pos_emb", cfg.max_len, d, &mut rng);
        p.insert_glorot("clip_proj.w", cfg.d_clip, d, &mut rng);
        p.insert_zeros("clip_proj.b", 1, d);
        p.insert_glorot("region_proj.w", cfg.d_region, d, &mut rng);
        p.insert_zeros("region_proj.b", 1, d);
        for l in 0..cfg.layers {
            insert_ln(&mut p, &format!("enc{l}.ln1"), d);
            insert_attn(&mut p, &format!("enc{l}.attn"), d, &mut rng);
            insert_ln(&mut p, &format!("enc{l}.ln2"), d);
            insert_ff(&mut p, &format!("enc{l}.ff"), d, cfg.ff_dim, &mut rng);
        }
        insert_ln(&mut p, "enc_ln", d);
        let max_dec = max_decode_len(&vocab, cfg.frames_t);
        p.insert_glorot("dec_pos_emb", max_dec, d, &mut rng);
        for l in 0..cfg.layers {
            insert_ln(&mut p, &format!("dec{l}.ln1"), d);
            insert_attn(&mut p, &format!("dec{l}.self"), d, &mut rng);
            insert_ln(&mut p, &format!("dec{l}.ln2"), d);
            insert_attn(&mut p, &format!("dec{l}.cross"), d, &mut rng);
            insert_ln(&mut p, &format!("dec{l}.ln3"), d);
            insert_ff(&mut p, &format!("dec{l}.ff"), d, cfg.ff_dim, &mut rng);
        }
        insert_ln(&mut p, "dec_ln", d);
        p.insert_glorot("out.w", d, v, &mut rng);
        p.insert_zeros("out.b", 1, v);
        p.insert_glorot("trig.w", d, n_trigger_tags(&vocab), &mut rng);
        p.insert_zeros("trig.b", 1, n_trigger_tags(&vocab));
        p.insert_glorot("role.w", 2 * d, vocab.n_roles() + 1, &mut rng);
        p.insert_zeros("role.b", 1, vocab.n_roles() + 1);
        Ok(JmmtModel {
            cfg,
            vocab,
            params: p,
        })
    }
}

/// Default cap on decoded sequence length: the longest well-formed
/// target plus slack.
pub fn max_decode_len(vocab: &Vocabulary, frames_t: usize) -> usize {
    4 + vocab.n_roles() * (1 + 4 * frames_t) + 2
}

fn insert_ln(p: &mut ParamStore, name: &str, d: usize) {
    p.insert_ones(&format!("{name}.g"), 1, d);
    p.insert_zeros(&format!("{name}.b"), 1, d);
}

fn insert_attn(p: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha20Rng) {
    for w in ["wq", "wk", "wv", "wo"] {
        p.insert_glorot(&format!("{name}.{w}"), d, d, rng);
    }
    for b in ["bq", "bk", "bv", "bo"] {
        p.insert_zeros(&format!("{name}.{b}"), 1, d);
    }
}

fn insert_ff(p: &mut ParamStore, name: &str, d: usize, f: usize, rng: &mut ChaCha20Rng) {
    p.insert_glorot(&format!("{name}.w1"), d, f, rng);
    p.insert_zeros(&format!("{name}.b1"), 1, f);
    p.insert_glorot(&format!("{name}.w2"), f, d, rng);
    p.insert_zeros(&format!("{name}.b2"), 1, d);
}

// ---------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------

const MASK_NEG: f64 = -1e9;

/// Binds parameters into a graph as leaves, remembering which graph node
/// holds which parameter so gradients can be routed back by name. In
/// inference mode parameters enter as constants and no gradients are
/// tracked.
pub(crate) struct Binder {
    trainable: bool,
    bound: Vec<(String, Var)>,
}

impl Binder {
    pub fn new(trainable: bool) -> Binder {
        Binder {
            trainable,
            bound: Vec::new(),
        }
    }

    pub fn leaf(&mut self, g: &mut Graph, params: &ParamStore, name: &str) -> Var {
        let value = params.get(name).clone();
        if self.trainable {
            let v = g.leaf(value);
            self.bound.push((name.to_string(), v));
            v
        } else {
            g.constant(value)
        }
    }

    /// Accumulates the gradients of every bound parameter into `acc`.
    pub fn collect(&self, grads: &[Array2<f64>], acc: &mut GradMap) {
        for (name, var) in &self.bound {
            grad_map_add(acc, name, &grads[var.0]);
        }
    }
}

/// Encoder forward pass; returns contextual embeddings (one per input
/// position) and the pad mask used.
pub(crate) fn encode_graph(
    g: &mut Graph,
    b: &mut Binder,
    model: &JmmtModel,
    input: &MultimodalInput,
    pad_to: usize,
) -> (Var, Vec<bool>) {
    let d = model.cfg.model_dim;
    let n = input.items.len().max(pad_to);
    assert!(n <= model.cfg.max_len, "input exceeds max_len after truncation");

    let mut ids = Vec::with_capacity(n);
    let mut is_pad = Vec::with_capacity(n);
    let mut tok_mask = Array2::<f64>::zeros((n, d));
    let mut clips: Vec<(usize, &[f64])> = Vec::new();
    let mut regions: Vec<(usize, &[f64])> = Vec::new();
    for i in 0..n {
        match input.items.get(i) {
            Some(InputItem::Token(t)) => {
                ids.push(*t);
                is_pad.push(false);
                tok_mask.row_mut(i).fill(1.0);
            }
            Some(InputItem::Clip(f)) => {
                ids.push(PAD);
                is_pad.push(false);
                clips.push((i, f));
            }
            Some(InputItem::Region(f)) => {
                ids.push(PAD);
                is_pad.push(false);
                regions.push((i, f));
            }
            Some(InputItem::Pad) | None => {
                ids.push(PAD);
                is_pad.push(true);
            }
        }
    }

    let tok_emb = b.leaf(g, &model.params, "tok_emb");
    let gathered = g.gather_rows(tok_emb, &ids);
    let mask_c = g.constant(tok_mask);
    let mut x = g.mul(gathered, mask_c);

    for (kind, rows, w_name, b_name) in [
        (&clips, model.cfg.d_clip, "clip_proj.w", "clip_proj.b"),
        (&regions, model.cfg.d_region, "region_proj.w", "region_proj.b"),
    ] {
        if kind.is_empty() {
            continue;
        }
        let mut feats = Array2::<f64>::zeros((kind.len(), rows));
        let mut scatter = Array2::<f64>::zeros((n, kind.len()));
        for (j, (pos, f)) in kind.iter().enumerate() {
            assert_eq!(f.len(), rows, "feature dimension mismatch");
            for (k, &v) in f.iter().enumerate() {
                feats[[j, k]] = v;
            }
            scatter[[*pos, j]] = 1.0;
        }
        let fc = g.constant(feats);
        let w = b.leaf(g, &model.params, w_name);
        let bb = b.leaf(g, &model.params, b_name);
        let lin = g.matmul(fc, w);
        let proj = g.add_row(lin, bb);
        let sc = g.constant(scatter);
        let placed = g.matmul(sc, proj);
        x = g.add(x, placed);
    }

    let pos_emb = b.leaf(g, &model.params, "pos_emb");
    let positions: Vec<usize> = (0..n).collect();
    let pos = g.gather_rows(pos_emb, &positions);
    x = g.add(x, pos);

    let mask = pad_mask(n, &is_pad);
    for l in 0..model.cfg.layers {
        let normed = layer_norm(g, b, model, &format!("enc{l}.ln1"), x);
        let attn = attention(
            g,
            b,
            model,
            &format!("enc{l}.attn"),
            normed,
            normed,
            mask.clone(),
        );
        x = g.add(x, attn);
        let normed = layer_norm(g, b, model, &format!("enc{l}.ln2"), x);
        let ff = feed_forward(g, b, model, &format!("enc{l}.ff"), normed);
        x = g.add(x, ff);
    }
    let out = layer_norm(g, b, model, "enc_ln", x);
    (out, is_pad)
}

/// Additive attention mask hiding pad key positions; `None` when
/// nothing is masked.
fn pad_mask(n_q: usize, key_is_pad: &[bool]) -> Option<Array2<f64>> {
    if !key_is_pad.iter().any(|&p| p) {
        return None;
    }
    let mut m = Array2::<f64>::zeros((n_q, key_is_pad.len()));
    for (j, &p) in key_is_pad.iter().enumerate() {
        if p {
            for i in 0..n_q {
                m[[i, j]] = MASK_NEG;
            }
        }
    }
    Some(m)
}

fn causal_mask(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| if j > i { MASK_NEG } else { 0.0 })
}

fn layer_norm(g: &mut Graph, b: &mut Binder, model: &JmmtModel, name: &str, x: Var) -> Var {
    let gain = b.leaf(g, &model.params, &format!("{name}.g"));
    let bias = b.leaf(g, &model.params, &format!("{name}.b"));
    g.layer_norm_rows(x, gain, bias)
}

fn attention(
    g: &mut Graph,
    b: &mut Binder,
    model: &JmmtModel,
    name: &str,
    q_in: Var,
    kv_in: Var,
    mask: Option<Array2<f64>>,
) -> Var {
    let h = model.cfg.heads;
    let dh = model.cfg.model_dim / h;
    let mk = |g: &mut Graph, b: &mut Binder, w: &str, bias: &str, x: Var| {
        let wv = b.leaf(g, &model.params, &format!("{name}.{w}"));
        let bv = b.leaf(g, &model.params, &format!("{name}.{bias}"));
        let lin = g.matmul(x, wv);
        g.add_row(lin, bv)
    };
    let q = mk(g, b, "wq", "bq", q_in);
    let k = mk(g, b, "wk", "bk", kv_in);
    let v = mk(g, b, "wv", "bv", kv_in);
    let mask_c = mask.map(|m| g.constant(m));
    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        let (lo, hi) = (i * dh, (i + 1) * dh);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(mc) = mask_c {
            scores = g.add(scores, mc);
        }
        let a = g.softmax_rows(scores);
        heads.push(g.matmul(a, vh));
    }
    let ctx = g.concat_cols(&heads);
    let wo = b.leaf(g, &model.params, &format!("{name}.wo"));
    let bo = b.leaf(g, &model.params, &format!("{name}.bo"));
    let out = g.matmul(ctx, wo);
    g.add_row(out, bo)
}

fn feed_forward(g: &mut Graph, b: &mut Binder, model: &JmmtModel, name: &str, x: Var) -> Var {
    let w1 = b.leaf(g, &model.params, &format!("{name}.w1"));
    let b1 = b.leaf(g, &model.params, &format!("{name}.b1"));
    let w2 = b.leaf(g, &model.params, &format!("{name}.w2"));
    let b2 = b.leaf(g, &model.params, &format!("{name}.b2"));
    let lin = g.matmul(x, w1);
    let lin = g.add_row(lin, b1);
    let act = g.relu(lin);
    let out = g.matmul(act, w2);
    g.add_row(out, b2)
}

/// Decoder forward pass over a teacher-forced (or partial) token prefix;
/// returns next-token logits, one row per prefix position.
pub(crate) fn decoder_graph(
    g: &mut Graph,
    b: &mut Binder,
    model: &JmmtModel,
    enc: Var,
    enc_is_pad: &[bool],
    tokens: &[usize],
) -> Var {
    let n = tokens.len();
    let tok_emb = b.leaf(g, &model.params, "tok_emb");
    let gathered = g.gather_rows(tok_emb, tokens);
    let dec_pos = b.leaf(g, &model.params, "dec_pos_emb");
    let positions: Vec<usize> = (0..n).collect();
    let pos = g.gather_rows(dec_pos, &positions);
    let mut y = g.add(gathered, pos);

    let self_mask = Some(causal_mask(n));
    let cross = pad_mask(n, enc_is_pad);
    for l in 0..model.cfg.layers {
        let normed = layer_norm(g, b, model, &format!("dec{l}.ln1"), y);
        let attn = attention(
            g,
            b,
            model,
            &format!("dec{l}.self"),
            normed,
            normed,
            self_mask.clone(),
        );
        y = g.add(y, attn);
        let normed = layer_norm(g, b, model, &format!("dec{l}.ln2"), y);
        let attn = attention(
            g,
            b,
            model,
            &format!("dec{l}.cross"),
            normed,
            enc,
            cross.clone(),
        );
        y = g.add(y, attn);
        let normed = layer_norm(g, b, model, &format!("dec{l}.ln3"), y);
        let ff = feed_forward(g, b, model, &format!("dec{l}.ff"), normed);
        y = g.add(y, ff);
    }
    let y = layer_norm(g, b, model, "dec_ln", y);
    let w = b.leaf(g, &model.params, "out.w");
    let bo = b.leaf(g, &model.params, "out.b");
    let logits = g.matmul(y, w);
    g.add_row(logits, bo)
}

// ---------------------------------------------------------------------
// Text head
// ---------------------------------------------------------------------

/// Gold BIO trigger tags for a sentence.
pub fn trigger_tags(
    sentence_len: usize,
    events: &[TextEventAnn],
    ontology: &Ontology,
) -> Result<Vec<usize>> {
    let mut tags = vec![0; sentence_len];
    for e in events {
        let ti = ontology
            .type_index(&e.event_type)
            .ok_or_else(|| Error::UnknownEventType(e.event_type.clone()))?;
        if e.trigger.start >= e.trigger.end || e.trigger.end > sentence_len {
            return Err(Error::Validation(format!(
                "trigger span {:?} out of range for sentence of {sentence_len} words",
                e.trigger
            )));
        }
        tags[e.trigger.start] = b_tag(ti);
        for t in tags
            .iter_mut()
            .take(e.trigger.end)
            .skip(e.trigger.start + 1)
        {
            *t = i_tag(ti);
        }
    }
    Ok(tags)
}

/// A (trigger, candidate) classification instance for the role head.
#[derive(Debug, Clone)]
pub struct RolePair {
    pub trigger: Span,
    pub candidate: Span,
    pub event_type: String,
    /// Gold class: global role index, or NONE.
    pub label: Option<usize>,
}

/// Builds role-classification pairs from gold events and the sentence's
/// entity candidates (training: label filled in; inference: label None).
pub fn role_pairs(
    sentence: &Sentence,
    events: &[TextEventAnn],
    vocab: &Vocabulary,
    with_labels: bool,
) -> Vec<RolePair> {
    let mut pairs = Vec::new();
    for e in events {
        for cand in &sentence.entity_candidates {
            let label = if with_labels {
                let role = e
                    .args
                    .iter()
                    .find(|a| a.span == *cand)
                    .and_then(|a| vocab.role_index(&a.role));
                Some(role.unwrap_or_else(|| none_role(vocab)))
            } else {
                None
            };
            pairs.push(RolePair {
                trigger: e.trigger,
                candidate: *cand,
                event_type: e.event_type.clone(),
                label,
            });
        }
    }
    pairs
}

/// Mean-pooling selector: row per span, 1/len over the span's words.
fn span_selector(spans: &[Span], n_words: usize) -> Array2<f64> {
    let mut s = Array2::<f64>::zeros((spans.len(), n_words));
    for (i, sp) in spans.iter().enumerate() {
        let len = (sp.end - sp.start) as f64;
        for j in sp.start..sp.end.min(n_words) {
            s[[i, j]] = 1.0 / len;
        }
    }
    s
}

/// Additive mask restricting each pair's role logits to the roles
/// licensed by its event type, plus NONE.
fn role_logit_mask(pairs: &[RolePair], vocab: &Vocabulary, ontology: &Ontology) -> Array2<f64> {
    let n_classes = vocab.n_roles() + 1;
    let mut m = Array2::<f64>::from_elem((pairs.len(), n_classes), MASK_NEG);
    for (i, p) in pairs.iter().enumerate() {
        m[[i, none_role(vocab)]] = 0.0;
        if let Ok(roles) = ontology.roles_for(&p.event_type) {
            for r in roles {
                if let Some(idx) = vocab.role_index(r) {
                    m[[i, idx]] = 0.0;
                }
            }
        }
    }
    m
}

/// Per-word representations (the first `n_words` encoder positions) and
/// trigger-tag logits.
pub(crate) fn trigger_logits_graph(
    g: &mut Graph,
    b: &mut Binder,
    model: &JmmtModel,
    enc: Var,
    n_words: usize,
) -> (Var, Var) {
    let idx: Vec<usize> = (0..n_words).collect();
    let words = g.gather_rows(enc, &idx);
    let w = b.leaf(g, &model.params, "trig.w");
    let bo = b.leaf(g, &model.params, "trig.b");
    let lin = g.matmul(words, w);
    let logits = g.add_row(lin, bo);
    (words, logits)
}

/// Masked role logits for a batch of (trigger, candidate) pairs.
pub(crate) fn role_logits_graph(
    g: &mut Graph,
    b: &mut Binder,
    model: &JmmtModel,
    words: Var,
    n_words: usize,
    pairs: &[RolePair],
    ontology: &Ontology,
) -> Var {
    let trig_sel = span_selector(
        &pairs.iter().map(|p| p.trigger).collect::<Vec<_>>(),
        n_words,
    );
    let cand_sel = span_selector(
        &pairs.iter().map(|p| p.candidate).collect::<Vec<_>>(),
        n_words,
    );
    let ts = g.constant(trig_sel);
    let cs = g.constant(cand_sel);
    let trig_rep = g.matmul(ts, words);
    let cand_rep = g.matmul(cs, words);
    let rep = g.concat_cols(&[trig_rep, cand_rep]);
    let w = b.leaf(g, &model.params, "role.w");
    let bo = b.leaf(g, &model.params, "role.b");
    let lin = g.matmul(rep, w);
    let logits = g.add_row(lin, bo);
    let mask = g.constant(role_logit_mask(pairs, &model.vocab, ontology));
    g.add(logits, mask)
}

/// One supervised training example: a coreferential (sentence, segment)
/// pair with its text annotations and serialized video target.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub input: MultimodalInput,
    pub sentence: Sentence,
    pub text_events: Vec<TextEventAnn>,
    pub target: Vec<usize>,
}

/// Loss components for one example.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: f64,
    pub text: f64,
    pub video: f64,
}

/// L_text + L_video for one example, with exact parameter gradients
/// accumulated into `grads`. `with_video = false` evaluates the
/// empty-video case where L = L_text.
pub fn example_loss(
    model: &JmmtModel,
    ontology: &Ontology,
    ex: &TrainExample,
    with_video: bool,
    grads: &mut GradMap,
) -> Result<LossParts> {
    if with_video && ex.target.len() < 2 {
        return Err(Error::Precondition(
            "video target must contain at least [bos, eos]".into(),
        ));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(true);
    let (enc, is_pad) = encode_graph(&mut g, &mut b, model, &ex.input, 0);

    // Text head: trigger tagging plus role classification.
    let n_words = ex.input.n_words;
    let tags = trigger_tags(n_words, &ex.text_events, ontology)?;
    let (words, trig_logits) = trigger_logits_graph(&mut g, &mut b, model, enc, n_words);
    let targets: Vec<Option<usize>> = tags.into_iter().map(Some).collect();
    let mut text_loss = g.cross_entropy_rows(trig_logits, &targets);

    let pairs = role_pairs(&ex.sentence, &ex.text_events, &model.vocab, true);
    if !pairs.is_empty() {
        let logits = role_logits_graph(&mut g, &mut b, model, words, n_words, &pairs, ontology);
        let labels: Vec<Option<usize>> = pairs.iter().map(|p| p.label).collect();
        let role_loss = g.cross_entropy_rows(logits, &labels);
        text_loss = g.add(text_loss, role_loss);
    }

    let total = if with_video {
        let dec_in = &ex.target[..ex.target.len() - 1];
        let logits = decoder_graph(&mut g, &mut b, model, enc, &is_pad, dec_in);
        let targets: Vec<Option<usize>> = ex.target[1..].iter().map(|&t| Some(t)).collect();
        let video_loss = g.cross_entropy_rows(logits, &targets);
        g.add(text_loss, video_loss)
    } else {
        text_loss
    };

    let all_grads = g.backward(total);
    b.collect(&all_grads, grads);

    let total_v = g.scalar_value(total);
    let text_v = g.scalar_value(text_loss);
    if !total_v.is_finite() {
        return Err(Error::Numeric {
            epoch: 0,
            step: 0,
            msg: "non-finite joint loss".into(),
        });
    }
    Ok(LossParts {
        total: total_v,
        text: text_v,
        video: total_v - text_v,
    })
}

/// Inference-mode encoder pass: contextual embeddings as plain values.
pub fn encode(model: &JmmtModel, input: &MultimodalInput) -> (Array2<f64>, Vec<bool>) {
    let mut g = Graph::new();
    let mut b = Binder::new(false);
    let (enc, is_pad) = encode_graph(&mut g, &mut b, model, input, 0);
    (g.value(enc).clone(), is_pad)
}
