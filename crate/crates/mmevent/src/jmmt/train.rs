//! Training loop for the joint multimodal transformer and conversion of
//! model output back into the corpus prediction schema.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    CorefLink, DocPredictions, MultimediaDocument, TextArg, TextEventAnn, VideoArg, VideoEventAnn,
};
use crate::error::{Error, Result};
use crate::jmmt::infer::predict;
use crate::jmmt::model::{build_input, example_loss, JmmtConfig, JmmtModel, TrainExample};
use crate::jmmt::vocab::{build_vocab, serialize_target, BOS, EOS};
use crate::ontology::Ontology;
use crate::optim::{Adam, GradMap};

/// Training hyperparameters. The learning-rate and beam-width defaults
/// follow the reference constants (1e-4, width 5, batch 6).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JmmtTrainConfig {
    pub model: JmmtConfig,
    pub bins: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beam_width: usize,
    pub seed: u64,
}

impl Default for JmmtTrainConfig {
    fn default() -> JmmtTrainConfig {
        JmmtTrainConfig {
            model: JmmtConfig::default(),
            bins: 1000,
            epochs: 50,
            batch_size: 6,
            learning_rate: 1e-4,
            beam_width: 5,
            seed: 0,
        }
    }
}

/// Sorted distinct word list over sentence tokens and region labels.
pub fn corpus_text_vocab(docs: &[MultimediaDocument]) -> Vec<String> {
    let mut words = BTreeSet::new();
    for doc in docs {
        for s in &doc.sentences {
            words.extend(s.tokens.iter().cloned());
        }
        for seg in &doc.segments {
            for kf in &seg.keyframes {
                words.extend(kf.regions.iter().map(|r| r.label.clone()));
            }
        }
    }
    words.into_iter().collect()
}

/// One training example per (gold coreference link, video event in the
/// linked segment); a linked segment without video events contributes a
/// single example with the empty target `[bos, eos]`.
pub fn training_examples(
    docs: &[MultimediaDocument],
    ontology: &Ontology,
    model: &JmmtModel,
) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for doc in docs {
        for link in &doc.coref_links {
            let sentence = doc.sentence(&link.sentence_id).ok_or_else(|| {
                Error::Input(format!("link references unknown sentence {:?}", link.sentence_id))
            })?;
            let segment = doc.segment(&link.segment_id).ok_or_else(|| {
                Error::Input(format!("link references unknown segment {:?}", link.segment_id))
            })?;
            let text_events: Vec<TextEventAnn> = doc
                .text_events
                .iter()
                .filter(|e| e.sentence_id == link.sentence_id)
                .cloned()
                .collect();
            let input = build_input(sentence, segment, &model.vocab, &model.cfg);
            let video_events: Vec<&VideoEventAnn> = doc
                .video_events
                .iter()
                .filter(|e| e.segment_id == link.segment_id)
                .collect();
            if video_events.is_empty() {
                out.push(TrainExample {
                    input,
                    sentence: sentence.clone(),
                    text_events,
                    target: vec![BOS, EOS],
                });
                continue;
            }
            for ve in video_events {
                out.push(TrainExample {
                    input: input.clone(),
                    sentence: sentence.clone(),
                    text_events: text_events.clone(),
                    target: serialize_target(ve, ontology, &model.vocab, model.cfg.frames_t)?,
                });
            }
        }
    }
    Ok(out)
}

/// Trains on the corpus's gold coreferential pairs with Adam; returns
/// the model and the per-epoch mean joint loss trace. Deterministic
/// given the seed; aborts with diagnostics if the loss goes non-finite.
pub fn train_jmmt(
    docs: &[MultimediaDocument],
    ontology: &Ontology,
    cfg: &JmmtTrainConfig,
) -> Result<(JmmtModel, Vec<f64>)> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be positive".into()));
    }
    let vocab = build_vocab(ontology, &corpus_text_vocab(docs), cfg.bins)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = cfg.seed;
    let model = JmmtModel::new(model_cfg, vocab)?;
    let examples = training_examples(docs, ontology, &model)?;
    if examples.is_empty() {
        return Err(Error::Precondition(
            "corpus contains no coreferential training pairs".into(),
        ));
    }
    train_jmmt_on(model, &examples, ontology, cfg)
}

/// Training loop over pre-built examples (used directly by overfitting
/// tests).
pub fn train_jmmt_on(
    mut model: JmmtModel,
    examples: &[TrainExample],
    ontology: &Ontology,
    cfg: &JmmtTrainConfig,
) -> Result<(JmmtModel, Vec<f64>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = GradMap::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &examples[i];
                let parts =
                    example_loss(&model, ontology, ex, true, &mut grads).map_err(|e| match e {
                        Error::Numeric { msg, .. } => Error::Numeric { epoch, step, msg },
                        other => other,
                    })?;
                batch_loss += parts.total;
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                g.mapv_inplace(|x| x * scale);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    step,
                    msg: "non-finite batch loss".into(),
                });
            }
            adam.step(&mut model.params, &grads);
            epoch_loss += batch_loss;
        }
        trace.push(epoch_loss / examples.len() as f64);
    }
    Ok((model, trace))
}

/// Runs the model over the given (sentence, segment) links of one
/// document and assembles predictions in the corpus schema; duplicate
/// events produced by overlapping links are emitted once.
pub fn predict_for_links(
    model: &JmmtModel,
    ontology: &Ontology,
    doc: &MultimediaDocument,
    links: &[CorefLink],
    beam_width: usize,
) -> Result<DocPredictions> {
    let mut out = DocPredictions {
        doc_id: doc.doc_id.clone(),
        pred_coref_links: links.to_vec(),
        ..Default::default()
    };
    for link in links {
        let sentence = doc.sentence(&link.sentence_id).ok_or_else(|| {
            Error::Input(format!("link references unknown sentence {:?}", link.sentence_id))
        })?;
        let segment = doc.segment(&link.segment_id).ok_or_else(|| {
            Error::Input(format!("link references unknown segment {:?}", link.segment_id))
        })?;
        let (text, video, _warnings) = predict(model, ontology, sentence, segment, beam_width)?;
        for t in text {
            let ann = TextEventAnn {
                sentence_id: link.sentence_id.clone(),
                trigger: t.trigger,
                event_type: t.event_type,
                args: t
                    .args
                    .into_iter()
                    .map(|(span, role)| TextArg { span, role })
                    .collect(),
            };
            if !out.pred_text_events.contains(&ann) {
                out.pred_text_events.push(ann);
            }
        }
        if let Some(event_type) = video.event_type {
            let ann = VideoEventAnn {
                segment_id: link.segment_id.clone(),
                event_type,
                args: video
                    .args
                    .iter()
                    .flat_map(|(role, boxes)| {
                        boxes.iter().enumerate().filter_map(|(kf, b)| {
                            b.map(|bbox| VideoArg {
                                role: role.clone(),
                                keyframe_id: kf,
                                bbox,
                            })
                        })
                    })
                    .collect(),
            };
            if !out.pred_video_events.contains(&ann) {
                out.pred_video_events.push(ann);
            }
        }
    }
    Ok(out)
}
