//! Self-supervised multimodal coreference: three gated projection heads
//! map sentence, clip, and region features into one common unit-sphere
//! space; a noise-contrastive loss over co-occurring sentence/clip pairs
//! and a multi-instance loss over candidate regions train the heads
//! without annotated links. Link prediction thresholds dot-product
//! similarity in the learned space.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Graph, Var};
use crate::corpus::{select_regions, CorefLink, MultimediaDocument};
use crate::error::{Error, Result};
use crate::optim::{grad_map_add, Adam, GradMap, ParamStore};

/// Borrowed view of one gated projection head's parameters.
///
/// `project` computes `u = W1 v + b1`, gates it with `u ⊙ sigmoid(W2 u + b2)`,
/// and L2-normalizes the result (a vanishing norm is stabilized by +1e-12).
#[derive(Clone, Copy)]
pub struct GatedHead<'a> {
    pub w1: &'a Array2<f64>, // d_in x d_out
    pub b1: &'a Array2<f64>, // 1 x d_out
    pub w2: &'a Array2<f64>, // d_out x d_out
    pub b2: &'a Array2<f64>, // 1 x d_out
}

/// The three projection heads over a shared common dimension.
#[derive(Debug, Clone)]
pub struct CorefModel {
    pub params: ParamStore,
    pub d_x: usize,
    pub d_y: usize,
    pub d_z: usize,
    pub common_dim: usize,
}

const HEAD_NAMES: [&str; 3] = ["f", "g", "h"];

impl CorefModel {
    pub fn new(d_x: usize, d_y: usize, d_z: usize, common_dim: usize, seed: u64) -> CorefModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, d_in) in HEAD_NAMES.iter().zip([d_x, d_y, d_z]) {
            params.insert_glorot(&format!("{name}.w1"), d_in, common_dim, &mut rng);
            params.insert_zeros(&format!("{name}.b1"), 1, common_dim);
            params.insert_glorot(&format!("{name}.w2"), common_dim, common_dim, &mut rng);
            params.insert_zeros(&format!("{name}.b2"), 1, common_dim);
        }
        CorefModel {
            params,
            d_x,
            d_y,
            d_z,
            common_dim,
        }
    }

    pub fn head(&self, name: &str) -> GatedHead<'_> {
        GatedHead {
            w1: self.params.get(&format!("{name}.w1")),
            b1: self.params.get(&format!("{name}.b1")),
            w2: self.params.get(&format!("{name}.w2")),
            b2: self.params.get(&format!("{name}.b2")),
        }
    }

    pub fn f_head(&self) -> GatedHead<'_> {
        self.head("f")
    }
    pub fn g_head(&self) -> GatedHead<'_> {
        self.head("g")
    }
    pub fn h_head(&self) -> GatedHead<'_> {
        self.head("h")
    }
}

/// Project one feature vector into the common space (unit norm).
pub fn project(head: GatedHead, v: &[f64]) -> Vec<f64> {
    let x = Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("shape");
    let u1 = x.dot(head.w1) + head.b1;
    let gate = (u1.dot(head.w2) + head.b2).mapv(|t| 1.0 / (1.0 + (-t).exp()));
    let u = &u1 * &gate;
    let norm = u.iter().map(|t| t * t).sum::<f64>().sqrt() + 1e-12;
    u.iter().map(|t| t / norm).collect()
}

/// One co-occurring training item: a sentence feature, its clip feature,
/// and the candidate region features that co-occur with the sentence.
#[derive(Debug, Clone)]
pub struct CorefItem {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub positive_regions: Vec<Vec<f64>>,
}

/// A batch plus sampled region negatives (per item, regions drawn from
/// other items in the batch, paired against the item's own sentence).
#[derive(Debug, Clone)]
pub struct CorefBatch {
    pub items: Vec<CorefItem>,
    pub region_negatives: Vec<Vec<Vec<f64>>>,
}

impl CorefBatch {
    /// Sample up to `max_negatives` region negatives per item, uniformly
    /// without replacement from other items' regions.
    pub fn build(items: Vec<CorefItem>, max_negatives: usize, rng: &mut ChaCha20Rng) -> CorefBatch {
        let mut region_negatives = Vec::with_capacity(items.len());
        for i in 0..items.len() {
            let mut pool: Vec<Vec<f64>> = items
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, it)| it.positive_regions.iter().cloned())
                .collect();
            let take = max_negatives.min(pool.len());
            // partial Fisher-Yates: the first `take` entries are a uniform
            // sample without replacement
            for k in 0..take {
                let j = rng.gen_range(k..pool.len());
                pool.swap(k, j);
            }
            pool.truncate(take);
            region_negatives.push(pool);
        }
        CorefBatch {
            items,
            region_negatives,
        }
    }
}

struct HeadVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

fn bind_head(g: &mut Graph, params: &ParamStore, name: &str) -> HeadVars {
    HeadVars {
        w1: g.leaf(params.get(&format!("{name}.w1")).clone()),
        b1: g.leaf(params.get(&format!("{name}.b1")).clone()),
        w2: g.leaf(params.get(&format!("{name}.w2")).clone()),
        b2: g.leaf(params.get(&format!("{name}.b2")).clone()),
    }
}

fn project_var(g: &mut Graph, head: &HeadVars, x: Var) -> Var {
    let lin = g.matmul(x, head.w1);
    let u1 = g.add_row(lin, head.b1);
    let gate_lin = g.matmul(u1, head.w2);
    let gate_aff = g.add_row(gate_lin, head.b2);
    let gate = g.sigmoid(gate_aff);
    let u = g.mul(u1, gate);
    g.row_normalize(u)
}

fn rows_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut out = Array2::zeros((n, d));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::Input("ragged feature rows".into()));
        }
        for (j, &v) in r.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Input(format!("non-finite feature at item {i}")));
            }
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

fn collect_head_grads(
    out: &mut GradMap,
    grads: &[Array2<f64>],
    head: &HeadVars,
    name: &str,
) {
    grad_map_add(out, &format!("{name}.w1"), &grads[head.w1.0]);
    grad_map_add(out, &format!("{name}.b1"), &grads[head.b1.0]);
    grad_map_add(out, &format!("{name}.w2"), &grads[head.w2.0]);
    grad_map_add(out, &format!("{name}.b2"), &grads[head.b2.0]);
}

/// Per-item noise-contrastive term from raw similarities:
/// `log(1 + sum_neg exp(s' - s_pos))`.
pub fn nce_term(positive: f64, negatives: &[f64]) -> f64 {
    negatives
        .iter()
        .map(|s| (s - positive).exp())
        .sum::<f64>()
        .ln_1p()
}

/// Per-item multi-instance term: `log((P + N) / P)` with
/// `P = sum exp(pos sims)`, `N = sum exp(neg sims)`.
pub fn milo_term(positives: &[f64], negatives: &[f64]) -> f64 {
    let p: f64 = positives.iter().map(|s| s.exp()).sum();
    let n: f64 = negatives.iter().map(|s| s.exp()).sum();
    (n / p).ln_1p()
}

/// Build the NCE loss sub-graph. Negatives for item i are every
/// mismatched in-batch pairing in both directions: (x_i, y_j) and
/// (x_j, y_i) for j != i.
fn nce_graph(g: &mut Graph, f_emb: Var, g_emb: Var) -> Var {
    let gt = g.transpose(g_emb);
    let sims = g.matmul(f_emb, gt);
    let e = g.exp(sims);
    let row_sums = g.row_sum(e);
    let et = g.transpose(e);
    let col_sums = g.row_sum(et);
    let pos = g.diag(e);
    let both = g.add(row_sums, col_sums);
    let twice_pos = g.scale(pos, 2.0);
    let neg_mass = g.sub(both, twice_pos);
    let ratio = g.div(neg_mass, pos);
    let per_item = g.log1p(ratio);
    g.mean_all(per_item)
}

/// Build the MILO loss sub-graph over items that have positive regions.
/// `pos_mask[i][p] = 1` if positive region p belongs to item i; likewise
/// for negatives (paired against the item's own projected sentence).
fn milo_graph(
    g: &mut Graph,
    f_emb: Var,
    h_pos: Var,
    pos_mask: Array2<f64>,
    h_neg: Option<(Var, Array2<f64>)>,
) -> Var {
    let n = pos_mask.nrows();
    let hp_t = g.transpose(h_pos);
    let sims_p = g.matmul(f_emb, hp_t);
    let ep = g.exp(sims_p);
    let mask_p = g.constant(pos_mask);
    let masked_p = g.mul(ep, mask_p);
    let p_mass = g.row_sum(masked_p);
    let n_mass = match h_neg {
        Some((h_neg, neg_mask)) => {
            let hn_t = g.transpose(h_neg);
            let sims_n = g.matmul(f_emb, hn_t);
            let en = g.exp(sims_n);
            let mask_n = g.constant(neg_mask);
            let masked_n = g.mul(en, mask_n);
            g.row_sum(masked_n)
        }
        None => g.constant(Array2::zeros((n, 1))),
    };
    let ratio = g.div(n_mass, p_mass);
    let per_item = g.log1p(ratio);
    g.mean_all(per_item)
}

fn build_losses(
    model: &CorefModel,
    batch: &CorefBatch,
    with_nce: bool,
    with_milo: bool,
) -> Result<(f64, f64, GradMap)> {
    let n = batch.items.len();
    if n == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    let x = rows_matrix(&batch.items.iter().map(|i| i.x.clone()).collect::<Vec<_>>())?;
    let y = rows_matrix(&batch.items.iter().map(|i| i.y.clone()).collect::<Vec<_>>())?;

    let mut g = Graph::new();
    let f_vars = bind_head(&mut g, &model.params, "f");
    let g_vars = bind_head(&mut g, &model.params, "g");
    let h_vars = bind_head(&mut g, &model.params, "h");
    let xc = g.constant(x);
    let f_emb = project_var(&mut g, &f_vars, xc);

    let mut nce = None;
    if with_nce {
        let yc = g.constant(y);
        let g_emb = project_var(&mut g, &g_vars, yc);
        nce = Some(nce_graph(&mut g, f_emb, g_emb));
    }

    let mut milo = None;
    if with_milo {
        for (i, item) in batch.items.iter().enumerate() {
            if item.positive_regions.is_empty() {
                return Err(Error::Precondition(format!(
                    "item {i} has no positive regions"
                )));
            }
        }
        let mut pos_rows = Vec::new();
        let mut pos_owner = Vec::new();
        for (i, item) in batch.items.iter().enumerate() {
            for r in &item.positive_regions {
                pos_rows.push(r.clone());
                pos_owner.push(i);
            }
        }
        let mut neg_rows = Vec::new();
        let mut neg_owner = Vec::new();
        for (i, negs) in batch.region_negatives.iter().enumerate() {
            for r in negs {
                neg_rows.push(r.clone());
                neg_owner.push(i);
            }
        }
        let zp = rows_matrix(&pos_rows)?;
        let mut pos_mask = Array2::zeros((n, pos_rows.len()));
        for (p, &i) in pos_owner.iter().enumerate() {
            pos_mask[[i, p]] = 1.0;
        }
        let zpc = g.constant(zp);
        let h_pos = project_var(&mut g, &h_vars, zpc);
        let h_neg = if neg_rows.is_empty() {
            None
        } else {
            let zn = rows_matrix(&neg_rows)?;
            let mut neg_mask = Array2::zeros((n, neg_rows.len()));
            for (p, &i) in neg_owner.iter().enumerate() {
                neg_mask[[i, p]] = 1.0;
            }
            let znc = g.constant(zn);
            Some((project_var(&mut g, &h_vars, znc), neg_mask))
        };
        milo = Some(milo_graph(&mut g, f_emb, h_pos, pos_mask, h_neg));
    }

    let total = match (nce, milo) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return Err(Error::Precondition("no loss selected".into())),
    };

    let grads = g.backward(total);
    let mut out = GradMap::new();
    collect_head_grads(&mut out, &grads, &f_vars, "f");
    collect_head_grads(&mut out, &grads, &g_vars, "g");
    collect_head_grads(&mut out, &grads, &h_vars, "h");
    let nce_val = nce.map(|v| g.scalar_value(v)).unwrap_or(0.0);
    let milo_val = milo.map(|v| g.scalar_value(v)).unwrap_or(0.0);
    Ok((nce_val, milo_val, out))
}

/// Batch NCE loss (mean over items) and exact gradients for all heads
/// it touches.
pub fn nce_loss(model: &CorefModel, batch: &CorefBatch) -> Result<(f64, GradMap)> {
    let (nce, _, grads) = build_losses(model, batch, true, false)?;
    Ok((nce, grads))
}

/// Batch MILO loss (mean over items) and exact gradients.
pub fn milo_loss(model: &CorefModel, batch: &CorefBatch) -> Result<(f64, GradMap)> {
    let (_, milo, grads) = build_losses(model, batch, false, true)?;
    Ok((milo, grads))
}

/// Combined loss: exact sum of the NCE and MILO terms; gradients are the
/// sums of the component gradients.
pub fn mmcoref_loss(model: &CorefModel, batch: &CorefBatch) -> Result<(f64, GradMap)> {
    let (nce, milo, grads) = build_losses(model, batch, true, true)?;
    Ok((nce + milo, grads))
}

#[derive(Debug, Clone)]
pub struct CorefTrainConfig {
    pub common_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub frames_t: usize,
    pub per_frame_k: usize,
    pub max_region_negatives: usize,
    pub use_milo: bool,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<usize>,
}

impl Default for CorefTrainConfig {
    fn default() -> Self {
        CorefTrainConfig {
            common_dim: 32,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: 0,
            frames_t: 3,
            per_frame_k: 5,
            max_region_negatives: 16,
            use_milo: true,
            max_steps: None,
        }
    }
}

/// Extract co-occurring training items from a corpus. Sentence i and
/// segment i of each document are treated as co-occurring in time.
pub fn training_items(docs: &[MultimediaDocument], cfg: &CorefTrainConfig) -> Vec<CorefItem> {
    let mut items = Vec::new();
    for doc in docs {
        let n = doc.sentences.len().min(doc.segments.len());
        for i in 0..n {
            let seg = &doc.segments[i];
            let regions = select_regions(seg, cfg.frames_t, cfg.per_frame_k)
                .iter()
                .map(|r| r.feature.clone())
                .collect();
            items.push(CorefItem {
                x: doc.sentences[i].sentence_feature.clone(),
                y: seg.clip_feature.clone(),
                positive_regions: regions,
            });
        }
    }
    items
}

/// Train projection heads on co-occurrence supervision. Deterministic
/// given the config seed; returns the model and the per-step loss trace.
pub fn train_coref(
    docs: &[MultimediaDocument],
    cfg: &CorefTrainConfig,
) -> Result<(CorefModel, Vec<f64>)> {
    let items = training_items(docs, cfg);
    if items.is_empty() {
        return Err(Error::Precondition("no training items in corpus".into()));
    }
    let d_x = items[0].x.len();
    let d_y = items[0].y.len();
    let d_z = items
        .iter()
        .flat_map(|i| i.positive_regions.first())
        .map(|r| r.len())
        .next()
        .unwrap_or(1);

    let mut model = CorefModel::new(d_x, d_y, d_z, cfg.common_dim, cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut trace = Vec::new();
    let mut steps = 0usize;

    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch_items: Vec<CorefItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let (with_regions, without): (Vec<CorefItem>, Vec<CorefItem>) = batch_items
                .iter()
                .cloned()
                .partition(|i| !i.positive_regions.is_empty());

            let mut total_loss = 0.0;
            let mut grads = GradMap::new();

            // NCE over the full batch
            {
                let nce_batch = CorefBatch {
                    items: batch_items.clone(),
                    region_negatives: vec![Vec::new(); batch_items.len()],
                };
                let (l, g) = nce_loss(&model, &nce_batch)?;
                total_loss += l;
                for (k, v) in g {
                    grad_map_add(&mut grads, &k, &v);
                }
            }
            // MILO over the items that have regions
            if cfg.use_milo && !with_regions.is_empty() {
                let milo_batch =
                    CorefBatch::build(with_regions, cfg.max_region_negatives, &mut rng);
                let (l, g) = milo_loss(&model, &milo_batch)?;
                total_loss += l;
                for (k, v) in g {
                    grad_map_add(&mut grads, &k, &v);
                }
            }
            let _ = without;

            if !total_loss.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    step: steps,
                    msg: "loss diverged (non-finite)".into(),
                });
            }
            opt.step(&mut model.params, &grads);
            trace.push(total_loss);
            steps += 1;
            if let Some(max) = cfg.max_steps {
                if steps >= max {
                    break 'outer;
                }
            }
        }
    }
    Ok((model, trace))
}

/// M x N similarity matrix: `S[i][j] = f(x_i) . g(y_j)` over projected
/// (unit-norm) embeddings.
pub fn score_pairs(model: &CorefModel, doc: &MultimediaDocument) -> Result<Array2<f64>> {
    let m = doc.sentences.len();
    let n = doc.segments.len();
    let mut s = Array2::zeros((m, n));
    for (i, sent) in doc.sentences.iter().enumerate() {
        if sent.sentence_feature.len() != model.d_x {
            return Err(Error::Config(format!(
                "sentence feature dim {} != model d_x {}",
                sent.sentence_feature.len(),
                model.d_x
            )));
        }
        let fx = project(model.f_head(), &sent.sentence_feature);
        for (j, seg) in doc.segments.iter().enumerate() {
            if seg.clip_feature.len() != model.d_y {
                return Err(Error::Config(format!(
                    "clip feature dim {} != model d_y {}",
                    seg.clip_feature.len(),
                    model.d_y
                )));
            }
            let gy = project(model.g_head(), &seg.clip_feature);
            s[[i, j]] = fx.iter().zip(&gy).map(|(a, b)| a * b).sum();
        }
    }
    Ok(s)
}

/// Links whose similarity strictly exceeds the threshold.
pub fn predict_links(s: &Array2<f64>, threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for ((i, j), &v) in s.indexed_iter() {
        if v > threshold {
            out.push((i, j));
        }
    }
    out
}

/// Predicted links as id pairs for a document.
pub fn predict_links_doc(
    model: &CorefModel,
    doc: &MultimediaDocument,
    threshold: f64,
) -> Result<Vec<CorefLink>> {
    let s = score_pairs(model, doc)?;
    Ok(predict_links(&s, threshold)
        .into_iter()
        .map(|(i, j)| CorefLink {
            sentence_id: doc.sentences[i].sentence_id.clone(),
            segment_id: doc.segments[j].segment_id.clone(),
        })
        .collect())
}

fn gold_index_links(doc: &MultimediaDocument) -> Vec<(usize, usize)> {
    doc.coref_links
        .iter()
        .filter_map(|l| {
            let i = doc
                .sentences
                .iter()
                .position(|s| s.sentence_id == l.sentence_id)?;
            let j = doc
                .segments
                .iter()
                .position(|s| s.segment_id == l.segment_id)?;
            Some((i, j))
        })
        .collect()
}

/// Micro link F1 of thresholded predictions over a document set.
pub fn link_f1(model: &CorefModel, docs: &[MultimediaDocument], threshold: f64) -> Result<f64> {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for doc in docs {
        let s = score_pairs(model, doc)?;
        let pred: std::collections::BTreeSet<(usize, usize)> =
            predict_links(&s, threshold).into_iter().collect();
        let gold: std::collections::BTreeSet<(usize, usize)> =
            gold_index_links(doc).into_iter().collect();
        tp += pred.intersection(&gold).count();
        fp += pred.difference(&gold).count();
        fn_ += gold.difference(&pred).count();
    }
    let p = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Scan thresholds over [-1, 1] in steps of 0.01 and return the one
/// maximizing link F1 on the validation documents (ties: smallest).
pub fn tune_threshold(model: &CorefModel, validation: &[MultimediaDocument]) -> Result<f64> {
    let gold_total: usize = validation.iter().map(|d| d.coref_links.len()).sum();
    if gold_total == 0 {
        return Err(Error::Precondition(
            "validation set has no gold links".into(),
        ));
    }
    let mut best_thr = -1.0;
    let mut best_f1 = f64::NEG_INFINITY;
    for i in 0..=200 {
        let thr = -1.0 + i as f64 * 0.01;
        let f1 = link_f1(model, validation, thr)?;
        if f1 > best_f1 {
            best_f1 = f1;
            best_thr = thr;
        }
    }
    Ok(best_thr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn rand_vec(rng: &mut ChaCha20Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_batch(rng: &mut ChaCha20Rng, n: usize, d: usize, max_regions: usize) -> CorefBatch {
        let items: Vec<CorefItem> = (0..n)
            .map(|_| CorefItem {
                x: rand_vec(rng, d),
                y: rand_vec(rng, d),
                positive_regions: (0..rng.gen_range(1..=max_regions))
                    .map(|_| rand_vec(rng, d))
                    .collect(),
            })
            .collect();
        CorefBatch::build(items, 16, rng)
    }

    #[test]
    fn project_is_unit_norm() {
        let model = CorefModel::new(5, 4, 3, 8, 7);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..10 {
            let v = rand_vec(&mut rng, 5);
            let out = project(model.f_head(), &v);
            let norm: f64 = out.iter().map(|t| t * t).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            // scaling the input does not break the unit-norm contract
            let scaled: Vec<f64> = v.iter().map(|t| t * 37.5).collect();
            let out2 = project(model.f_head(), &scaled);
            let norm2: f64 = out2.iter().map(|t| t * t).sum::<f64>().sqrt();
            assert!((norm2 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gate_halves_affine_output() {
        // W2 = 0, b2 = 0 -> gate is 0.5 everywhere, so the output is
        // proportional to W1 v + b1
        let mut model = CorefModel::new(3, 3, 3, 4, 0);
        model.params.get_mut("f.w2").fill(0.0);
        model.params.get_mut("f.b2").fill(0.0);
        let v = vec![0.3, -0.7, 1.1];
        let out = project(model.f_head(), &v);
        let x = Array2::from_shape_vec((1, 3), v).unwrap();
        let u1 = x.dot(model.params.get("f.w1")) + model.params.get("f.b1");
        let norm = u1.iter().map(|t| t * t).sum::<f64>().sqrt();
        for (o, u) in out.iter().zip(u1.iter()) {
            assert_abs_diff_eq!(*o, u / norm, epsilon = 1e-9);
        }
    }

    #[test]
    fn project_matches_scalar_oracle() {
        // independent per-element evaluation of the gated-unit formula
        let model = CorefModel::new(4, 3, 3, 5, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let v = rand_vec(&mut rng, 4);
        let head = model.f_head();
        let d = 5;
        let mut u1 = vec![0.0; d];
        for j in 0..d {
            let mut s = head.b1[[0, j]];
            for (i, &vi) in v.iter().enumerate() {
                s += vi * head.w1[[i, j]];
            }
            u1[j] = s;
        }
        let mut gated = vec![0.0; d];
        for j in 0..d {
            let mut s = head.b2[[0, j]];
            for (i, &u) in u1.iter().enumerate() {
                s += u * head.w2[[i, j]];
            }
            gated[j] = u1[j] * (1.0 / (1.0 + (-s).exp()));
        }
        let norm = gated.iter().map(|t| t * t).sum::<f64>().sqrt() + 1e-12;
        let expected: Vec<f64> = gated.iter().map(|t| t / norm).collect();
        let got = project(head, &v);
        for (a, b) in got.iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn nce_single_item_is_exactly_zero() {
        let model = CorefModel::new(4, 4, 4, 6, 1);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let batch = CorefBatch {
            items: vec![CorefItem {
                x: rand_vec(&mut rng, 4),
                y: rand_vec(&mut rng, 4),
                positive_regions: vec![],
            }],
            region_negatives: vec![vec![]],
        };
        let (loss, _) = nce_loss(&model, &batch).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn nce_uniform_similarity_is_log3() {
        // zeroed W1 makes every projection identical, so all pairwise
        // similarities are equal; n=2 gives per-item loss log(1+2)
        let mut model = CorefModel::new(3, 3, 3, 4, 5);
        model.params.get_mut("f.w1").fill(0.0);
        model.params.get_mut("g.w1").fill(0.0);
        *model.params.get_mut("f.b1") = array![[0.5, -0.2, 0.8, 0.1]];
        *model.params.get_mut("g.b1") = array![[-0.3, 0.9, 0.4, -0.6]];
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let batch = CorefBatch {
            items: vec![
                CorefItem {
                    x: rand_vec(&mut rng, 3),
                    y: rand_vec(&mut rng, 3),
                    positive_regions: vec![],
                },
                CorefItem {
                    x: rand_vec(&mut rng, 3),
                    y: rand_vec(&mut rng, 3),
                    positive_regions: vec![],
                },
            ],
            region_negatives: vec![vec![], vec![]],
        };
        let (loss, _) = nce_loss(&model, &batch).unwrap();
        assert_abs_diff_eq!(loss, 3.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn scalar_terms_match_worked_examples() {
        assert_abs_diff_eq!(
            nce_term(1.0, &[0.0]),
            (1.0 + (-1.0f64).exp()).ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            milo_term(&[1.0, 0.0], &[0.0]),
            ((1.0f64.exp() + 2.0) / (1.0f64.exp() + 1.0)).ln(),
            epsilon = 1e-12
        );
        // one positive region, no negatives
        assert_eq!(milo_term(&[0.7], &[]), 0.0);
        // a duplicate negative strictly increases the loss
        assert!(milo_term(&[1.0], &[0.2, 0.2]) > milo_term(&[1.0], &[0.2]));
    }

    #[test]
    fn milo_empty_positives_is_precondition_error() {
        let model = CorefModel::new(3, 3, 3, 4, 0);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let batch = CorefBatch {
            items: vec![
                CorefItem {
                    x: rand_vec(&mut rng, 3),
                    y: rand_vec(&mut rng, 3),
                    positive_regions: vec![rand_vec(&mut rng, 3)],
                },
                CorefItem {
                    x: rand_vec(&mut rng, 3),
                    y: rand_vec(&mut rng, 3),
                    positive_regions: vec![],
                },
            ],
            region_negatives: vec![vec![], vec![]],
        };
        let err = milo_loss(&model, &batch).unwrap_err();
        assert!(err.to_string().contains("item 1"));
    }

    #[test]
    fn non_finite_feature_rejected() {
        let model = CorefModel::new(3, 3, 3, 4, 0);
        let batch = CorefBatch {
            items: vec![CorefItem {
                x: vec![0.1, f64::NAN, 0.2],
                y: vec![0.0, 0.0, 0.0],
                positive_regions: vec![],
            }],
            region_negatives: vec![vec![]],
        };
        assert!(matches!(nce_loss(&model, &batch), Err(Error::Input(_))));
    }

    #[test]
    fn sum_loss_equals_component_sum_and_grads_are_linear() {
        let model = CorefModel::new(5, 4, 3, 8, 13);
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let items: Vec<CorefItem> = (0..4)
            .map(|_| CorefItem {
                x: rand_vec(&mut rng, 5),
                y: rand_vec(&mut rng, 4),
                positive_regions: (0..2).map(|_| rand_vec(&mut rng, 3)).collect(),
            })
            .collect();
        let batch = CorefBatch::build(items, 16, &mut rng);
        let (l_nce, g_nce) = nce_loss(&model, &batch).unwrap();
        let (l_milo, g_milo) = milo_loss(&model, &batch).unwrap();
        let (l_sum, g_sum) = mmcoref_loss(&model, &batch).unwrap();
        assert_abs_diff_eq!(l_sum, l_nce + l_milo, epsilon = 1e-12);
        for name in model.params.names() {
            let a = &g_nce[name] + &g_milo[name];
            let b = &g_sum[name];
            for (x, y) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn losses_nonnegative_and_permutation_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let model = CorefModel::new(6, 6, 6, 8, 17);
        for trial in 0..5 {
            let batch = rand_batch(&mut rng, 4, 6, 3);
            let (l_nce, _) = nce_loss(&model, &batch).unwrap();
            let (l_milo, _) = milo_loss(&model, &batch).unwrap();
            assert!(l_nce >= 0.0 && l_milo >= 0.0, "trial {trial}");

            // permute items (carrying their negatives along)
            let perm = [2usize, 0, 3, 1];
            let permuted = CorefBatch {
                items: perm.iter().map(|&i| batch.items[i].clone()).collect(),
                region_negatives: perm
                    .iter()
                    .map(|&i| batch.region_negatives[i].clone())
                    .collect(),
            };
            let (l_nce2, _) = nce_loss(&model, &permuted).unwrap();
            let (l_milo2, _) = milo_loss(&model, &permuted).unwrap();
            assert_abs_diff_eq!(l_nce, l_nce2, epsilon = 1e-10);
            assert_abs_diff_eq!(l_milo, l_milo2, epsilon = 1e-10);
        }
    }

    /// Central finite differences over every head parameter.
    fn fd_check_loss<F>(model: &CorefModel, batch: &CorefBatch, loss_fn: F, tol: f64)
    where
        F: Fn(&CorefModel, &CorefBatch) -> Result<(f64, GradMap)>,
    {
        let (_, grads) = loss_fn(model, batch).unwrap();
        let step = 1e-5;
        for name in model.params.names() {
            let shape = model.params.get(name).dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let mut eval = |delta: f64| {
                        let mut m2 = model.clone();
                        m2.params.get_mut(name)[[r, c]] += delta;
                        loss_fn(&m2, batch).unwrap().0
                    };
                    let fd = (eval(step) - eval(-step)) / (2.0 * step);
                    let an = grads[name][[r, c]];
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        (fd - an).abs() / denom < tol,
                        "{name}[{r},{c}]: fd={fd} analytic={an}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let model = CorefModel::new(8, 8, 8, 8, 23);
        let batch = rand_batch(&mut rng, 4, 8, 3);
        fd_check_loss(&model, &batch, nce_loss, 1e-4);
        fd_check_loss(&model, &batch, milo_loss, 1e-4);
        fd_check_loss(&model, &batch, mmcoref_loss, 1e-4);
    }

    #[test]
    fn predict_links_threshold_semantics() {
        let s = array![[0.5]];
        assert_eq!(predict_links(&s, 0.13), vec![(0, 0)]);
        let s = array![[0.13]];
        assert!(predict_links(&s, 0.13).is_empty());
        let s = array![[0.9, 0.99]];
        assert!(predict_links(&s, 1.01).is_empty());
        // monotone: raising the threshold never adds links
        let s = array![[0.2, 0.5], [0.7, -0.1]];
        let lo = predict_links(&s, 0.1);
        let hi = predict_links(&s, 0.4);
        assert!(hi.iter().all(|l| lo.contains(l)));
    }
}
