//! Joint multimodal transformer (JMMT): a shared encoder over text and
//! visual tokens feeding a text decoding head (trigger tagging + role
//! classification) and an autoregressive video decoding head that emits
//! event, role, and quantized bounding-box tokens.

pub mod infer;
pub mod model;
pub mod train;
pub mod vocab;

pub use infer::{
    beam_search, decoded_event_type, greedy_decode, predict, predict_text, sequence_score,
    Hypothesis, TextEventPrediction,
};
pub use model::{
    build_input, encode, example_loss, max_decode_len, trigger_tags, InputItem, JmmtConfig,
    JmmtModel, LossParts, MultimodalInput, TrainExample,
};
pub use train::{
    corpus_text_vocab, predict_for_links, train_jmmt, train_jmmt_on, training_examples,
    JmmtTrainConfig,
};
pub use vocab::{
    build_vocab, dequantize_coord, deserialize_target, quantize_coord, serialize_target,
    TokenKind, VideoEventPrediction, Vocabulary,
};

#[cfg(test)]
mod tests {
    use super::model::*;
    use super::*;
    use crate::corpus::{
        BoundingBox, Keyframe, Region, Sentence, Span, TextArg, TextEventAnn, VideoArg,
        VideoEventAnn, VideoSegment,
    };
    use crate::ontology::Ontology;
    use crate::optim::GradMap;

    fn tiny_cfg() -> JmmtConfig {
        JmmtConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ff_dim: 16,
            d_clip: 4,
            d_region: 4,
            max_len: 64,
            frames_t: 3,
            per_frame_k: 2,
            seed: 7,
        }
    }

    fn tiny_model() -> JmmtModel {
        let words: Vec<String> = ["the", "man", "trig_x", "arg_y", "obj"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let vocab = build_vocab(&Ontology::bundled(), &words, 8).unwrap();
        JmmtModel::new(tiny_cfg(), vocab).unwrap()
    }

    fn tiny_sentence() -> Sentence {
        Sentence {
            sentence_id: "s0".into(),
            tokens: ["the", "trig_x", "the", "arg_y", "man"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            sentence_feature: vec![0.0; 4],
            entity_candidates: vec![Span { start: 3, end: 4 }, Span { start: 4, end: 5 }],
        }
    }

    fn tiny_segment() -> VideoSegment {
        let region = |x: f64, label: &str, conf: f64| Region {
            bbox: BoundingBox::new(x, 0.2, x + 0.3, 0.6).unwrap(),
            label: label.into(),
            confidence: conf,
            feature: vec![0.1, -0.2, 0.3, 0.4],
        };
        VideoSegment {
            segment_id: "v0".into(),
            start_s: 0.0,
            end_s: 3.0,
            clip_feature: vec![0.5, -0.5, 0.25, 0.0],
            keyframes: (0..3)
                .map(|f| Keyframe {
                    frame_id: f,
                    regions: vec![region(0.1, "obj", 0.9), region(0.4, "man", 0.7)],
                })
                .collect(),
        }
    }

    fn tiny_example(model: &JmmtModel) -> TrainExample {
        let sentence = tiny_sentence();
        let segment = tiny_segment();
        let input = build_input(&sentence, &segment, &model.vocab, &model.cfg);
        let text_events = vec![TextEventAnn {
            sentence_id: "s0".into(),
            trigger: Span { start: 1, end: 2 },
            event_type: "Conflict.Attack".into(),
            args: vec![TextArg {
                span: Span { start: 3, end: 4 },
                role: "Attacker".into(),
            }],
        }];
        let video = VideoEventAnn {
            segment_id: "v0".into(),
            event_type: "Conflict.Attack".into(),
            args: vec![VideoArg {
                role: "Attacker".into(),
                keyframe_id: 1,
                bbox: BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap(),
            }],
        };
        let target =
            serialize_target(&video, &Ontology::bundled(), &model.vocab, model.cfg.frames_t)
                .unwrap();
        TrainExample {
            input,
            sentence,
            text_events,
            target,
        }
    }

    #[test]
    fn input_construction_layout() {
        let model = tiny_model();
        let input = build_input(&tiny_sentence(), &tiny_segment(), &model.vocab, &model.cfg);
        assert_eq!(input.n_words, 5);
        // words + sep + clip + t*k regions x 6 positions each
        assert_eq!(input.items.len(), 5 + 2 + 3 * 2 * 6);
        assert!(input.warnings.is_empty());
        match &input.items[6] {
            InputItem::Clip(f) => assert_eq!(f.len(), 4),
            other => panic!("expected clip token, got {other:?}"),
        }
        // Over-length inputs lose the visual tail with a warning.
        let mut cfg = model.cfg.clone();
        cfg.max_len = 10;
        let truncated = build_input(&tiny_sentence(), &tiny_segment(), &model.vocab, &cfg);
        assert_eq!(truncated.items.len(), 10);
        assert_eq!(truncated.warnings.len(), 1);
    }

    #[test]
    fn encode_is_deterministic_with_matching_length() {
        let model = tiny_model();
        let input = build_input(&tiny_sentence(), &tiny_segment(), &model.vocab, &model.cfg);
        let (a, _) = encode(&model, &input);
        let (b, _) = encode(&model, &input);
        assert_eq!(a.nrows(), input.items.len());
        assert_eq!(a.ncols(), model.cfg.model_dim);
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_output_invariant_to_padding() {
        use crate::autodiff::Graph;
        let model = tiny_model();
        let input = build_input(&tiny_sentence(), &tiny_segment(), &model.vocab, &model.cfg);
        let (plain, _) = encode(&model, &input);
        let mut g = Graph::new();
        let mut b = Binder::new(false);
        let (enc, is_pad) = encode_graph(&mut g, &mut b, &model, &input, input.items.len() + 5);
        let padded = g.value(enc);
        assert_eq!(is_pad.iter().filter(|&&p| p).count(), 5);
        for i in 0..input.items.len() {
            for j in 0..model.cfg.model_dim {
                assert!(
                    (plain[[i, j]] - padded[[i, j]]).abs() < 1e-12,
                    "content row {i} changed under padding"
                );
            }
        }
    }

    #[test]
    fn joint_loss_is_sum_of_heads() {
        let model = tiny_model();
        let ex = tiny_example(&model);
        let ont = Ontology::bundled();
        let mut grads = GradMap::new();
        let with = example_loss(&model, &ont, &ex, true, &mut grads).unwrap();
        let mut grads2 = GradMap::new();
        let without = example_loss(&model, &ont, &ex, false, &mut grads2).unwrap();
        assert!(with.total > 0.0 && with.video > 0.0);
        assert!((with.total - (with.text + with.video)).abs() < 1e-12);
        assert!((without.total - without.text).abs() < 1e-12);
        assert!((with.text - without.text).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_video_loss_is_log_vocab() {
        let mut model = tiny_model();
        // Zeroing the output projection makes every next-token
        // distribution uniform, so teacher-forced cross-entropy is
        // exactly log |V|.
        model.params.get_mut("out.w").fill(0.0);
        model.params.get_mut("out.b").fill(0.0);
        let ex = tiny_example(&model);
        let ont = Ontology::bundled();
        let mut grads = GradMap::new();
        let parts = example_loss(&model, &ont, &ex, true, &mut grads).unwrap();
        let expect = (model.vocab.len() as f64).ln();
        assert!(
            (parts.video - expect).abs() < 1e-9,
            "video loss {} vs log|V| {expect}",
            parts.video
        );
    }

    #[test]
    fn both_heads_reach_the_shared_encoder() {
        let model = tiny_model();
        let ex = tiny_example(&model);
        let ont = Ontology::bundled();
        let mut with_video = GradMap::new();
        example_loss(&model, &ont, &ex, true, &mut with_video).unwrap();
        let mut text_only = GradMap::new();
        example_loss(&model, &ont, &ex, false, &mut text_only).unwrap();
        let name = "enc0.attn.wq";
        let a = &with_video[name];
        let b = &text_only[name];
        let diff: f64 = (a - b).iter().map(|x| x.abs()).sum();
        assert!(
            diff > 1e-10,
            "removing the video head left encoder gradients unchanged"
        );
        // The decoder is only reached by the video head.
        assert!(with_video.contains_key("dec0.self.wq"));
        assert!(!text_only.contains_key("dec0.self.wq") || {
            let z = &text_only["dec0.self.wq"];
            z.iter().all(|&x| x == 0.0)
        });
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let model = tiny_model();
        let ex = tiny_example(&model);
        let ont = Ontology::bundled();
        let mut grads = GradMap::new();
        let base = example_loss(&model, &ont, &ex, true, &mut grads).unwrap();
        assert!(base.total.is_finite());
        let step = 1e-4;
        // A spread of parameters across embeddings, encoder, decoder,
        // and both heads; a few entries each.
        let names = [
            "tok_emb",
            "pos_emb",
            "clip_proj.w",
            "region_proj.w",
            "enc0.attn.wq",
            "enc0.attn.wo",
            "enc0.ff.w1",
            "enc0.ln1.g",
            "enc_ln.b",
            "dec0.self.wv",
            "dec0.cross.wk",
            "dec0.ff.w2",
            "out.w",
            "trig.w",
            "role.w",
        ];
        for name in names {
            let g = &grads[name];
            let (rows, cols) = g.dim();
            for &(ri, ci) in &[(0usize, 0usize), (rows / 2, cols / 2), (rows - 1, cols - 1)] {
                let mut plus = model.clone();
                plus.params.get_mut(name)[[ri, ci]] += step;
                let mut minus = model.clone();
                minus.params.get_mut(name)[[ri, ci]] -= step;
                let mut sink = GradMap::new();
                let lp = example_loss(&plus, &ont, &ex, true, &mut sink).unwrap().total;
                let lm = example_loss(&minus, &ont, &ex, true, &mut sink).unwrap().total;
                let fd = (lp - lm) / (2.0 * step);
                let an = g[[ri, ci]];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-3,
                    "{name}[{ri},{ci}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn beam_width_one_is_greedy_and_beam_five_dominates() {
        let model = tiny_model();
        let input = build_input(&tiny_sentence(), &tiny_segment(), &model.vocab, &model.cfg);
        let (enc, is_pad) = encode(&model, &input);
        let max_len = 24;
        let greedy = greedy_decode(&model, &enc, &is_pad, max_len);
        let beam1 = beam_search(&model, &enc, &is_pad, 1, max_len).unwrap();
        assert_eq!(greedy.tokens, beam1.tokens);
        let beam5 = beam_search(&model, &enc, &is_pad, 5, max_len).unwrap();
        let gs = sequence_score(&model, &enc, &is_pad, &greedy.tokens);
        let bs = sequence_score(&model, &enc, &is_pad, &beam5.tokens);
        assert!(bs >= gs - 1e-12, "beam score {bs} below greedy {gs}");
        // Deterministic across runs.
        let again = beam_search(&model, &enc, &is_pad, 5, max_len).unwrap();
        assert_eq!(beam5.tokens, again.tokens);
        assert!(beam_search(&model, &enc, &is_pad, 0, max_len).is_err());
    }

    #[test]
    fn short_training_reduces_loss_deterministically() {
        let model = tiny_model();
        let ex = tiny_example(&model);
        let ont = Ontology::bundled();
        let cfg = JmmtTrainConfig {
            model: tiny_cfg(),
            bins: 8,
            epochs: 10,
            batch_size: 2,
            learning_rate: 3e-3,
            beam_width: 2,
            seed: 7,
        };
        let examples = vec![ex.clone(), ex];
        let (_, trace_a) = train_jmmt_on(model.clone(), &examples, &ont, &cfg).unwrap();
        let (_, trace_b) = train_jmmt_on(model, &examples, &ont, &cfg).unwrap();
        assert_eq!(trace_a.len(), 10);
        assert!(trace_a.last().unwrap() < trace_a.first().unwrap());
        for (a, b) in trace_a.iter().zip(&trace_b) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn trigger_tag_helpers() {
        let ont = Ontology::bundled();
        let events = vec![TextEventAnn {
            sentence_id: "s0".into(),
            trigger: Span { start: 1, end: 3 },
            event_type: "Conflict.Attack".into(),
            args: vec![],
        }];
        let tags = trigger_tags(5, &events, &ont).unwrap();
        let ti = ont.type_index("Conflict.Attack").unwrap();
        assert_eq!(tags[0], 0);
        assert_eq!(tags[1], 1 + 2 * ti);
        assert_eq!(tags[2], 2 + 2 * ti);
        assert_eq!(tags[3], 0);
        assert!(trigger_tags(2, &events, &ont).is_err());
    }
}
