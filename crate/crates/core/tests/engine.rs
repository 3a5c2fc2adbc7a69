use fastv_core::costmodel::verify_against_counter;
use fastv_core::model::{GenerateOptions, InferenceMode, Model, ModelConfig};
use fastv_core::pruning::{masked_reference_forward, PruneConfig, PruneDecision, StreamingMask};
use fastv_core::segments::{SegmentKind, SegmentedSequence, SequenceSpec, Span};
use fastv_core::{Error, MacCounter};

fn config(layers: usize, d: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        layers,
        d_model: d,
        n_heads: heads,
        d_ff: 4 * d,
        vocab: 64,
        max_seq: 160,
    }
}

fn sequence(cfg: &ModelConfig, n_sys: usize, n_img: usize, n_ins: usize) -> SegmentedSequence {
    let text = cfg.text_ids();
    let img = cfg.image_ids();
    let pick =
        |r: &std::ops::Range<u32>, i: usize| r.start + (i as u32 * 7 + 3) % (r.end - r.start);
    let spec = SequenceSpec {
        sys_ids: (0..n_sys).map(|i| pick(&text, i)).collect(),
        img_ids: (0..n_img).map(|i| pick(&img, i * 5 + 1)).collect(),
        ins_ids: (0..n_ins).map(|i| pick(&text, i + 11)).collect(),
    };
    SegmentedSequence::from_spec(&spec, cfg.vocab).unwrap()
}

fn rel_err(a: &[f32], b: &[f32]) -> f32 {
    let num: f32 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max);
    let den: f32 = b.iter().map(|v| v.abs()).fold(0.0, f32::max).max(1e-12);
    num / den
}

/// Sequence of `seq` with `extra` tokens appended to its instruction span.
fn extended(seq: &SegmentedSequence, extra: &[u32], vocab: usize) -> SegmentedSequence {
    let mut spec = seq.to_spec();
    spec.ins_ids.extend_from_slice(extra);
    SegmentedSequence::from_spec(&spec, vocab).unwrap()
}

#[test]
fn baseline_keeps_every_position_live() {
    let cfg = config(3, 16, 2);
    let model = Model::synthetic(cfg, 1).unwrap();
    let seq = sequence(&cfg, 4, 20, 6);
    let pre = model
        .prefill(&seq, &InferenceMode::Baseline, &mut MacCounter::new())
        .unwrap();
    for j in 1..=3 {
        assert_eq!(pre.cache.live_positions(j), (0..30).collect::<Vec<_>>());
    }
    assert!(pre.decision.is_none());
}

#[test]
fn pruning_at_last_layer_leaves_logits_untouched() {
    let cfg = config(4, 16, 2);
    let model = Model::synthetic(cfg, 2).unwrap();
    let seq = sequence(&cfg, 4, 24, 6);
    let base = model
        .prefill(&seq, &InferenceMode::Baseline, &mut MacCounter::new())
        .unwrap();
    let pruned = model
        .prefill(
            &seq,
            &InferenceMode::FastV(PruneConfig::attention(4, 50)),
            &mut MacCounter::new(),
        )
        .unwrap();
    assert_eq!(base.logits, pruned.logits);
    assert_eq!(pruned.decision.unwrap().dropped.len(), 12);
}

#[test]
fn live_counts_after_k() {
    let cfg = ModelConfig {
        max_seq: 128,
        ..config(5, 16, 2)
    };
    let model = Model::synthetic(cfg, 3).unwrap();
    let seq = sequence(&cfg, 4, 64, 12);
    let pre = model
        .prefill(
            &seq,
            &InferenceMode::FastV(PruneConfig::attention(2, 50)),
            &mut MacCounter::new(),
        )
        .unwrap();
    assert_eq!(pre.cache.live_counts(), vec![80, 80, 48, 48, 48]);
    let d = pre.decision.unwrap();
    assert_eq!(d.dropped.len(), 32);
    assert!(d.dropped.iter().all(|p| (4..68).contains(p)));
    assert_eq!(pre.cache.live_positions(3), d.kept.as_slice());
}

#[test]
fn decode_matches_full_reforward() {
    let cfg = config(3, 32, 4);
    let model = Model::synthetic(cfg, 4).unwrap();
    let seq = sequence(&cfg, 3, 16, 5);
    let mut counter = MacCounter::new();
    let pre = model
        .prefill(&seq, &InferenceMode::Baseline, &mut counter)
        .unwrap();
    let mut cache = pre.cache;
    let mut extra = Vec::new();
    for (step, tok) in [7u32, 40, 2, 9].into_iter().enumerate() {
        let out = model
            .decode_step(&mut cache, tok, seq.n_input() + step, &mut counter)
            .unwrap();
        extra.push(tok);
        let ext = extended(&seq, &extra, cfg.vocab);
        let full = model
            .prefill(&ext, &InferenceMode::Baseline, &mut MacCounter::new())
            .unwrap();
        assert!(rel_err(&out.logits, &full.logits) < 1e-4, "step {step}");
    }
}

#[test]
fn pruned_decode_matches_masked_reforward() {
    let cfg = config(4, 32, 4);
    let model = Model::synthetic(cfg, 5).unwrap();
    let seq = sequence(&cfg, 3, 20, 5);
    let prune = PruneConfig::attention(2, 50);
    let mut counter = MacCounter::new();
    let pre = model
        .prefill(&seq, &InferenceMode::FastV(prune), &mut counter)
        .unwrap();
    let decision = pre.decision.unwrap();
    let mut cache = pre.cache;
    let mut extra = Vec::new();
    for (step, tok) in [11u32, 3, 50].into_iter().enumerate() {
        let out = model
            .decode_step(&mut cache, tok, seq.n_input() + step, &mut counter)
            .unwrap();
        extra.push(tok);
        let ext = extended(&seq, &extra, cfg.vocab);
        let mut ext_decision = decision.clone();
        ext_decision.kept.extend(seq.n_input()..ext.n_input());
        let reference = model
            .prefill(
                &ext,
                &InferenceMode::Masked {
                    layer: 2,
                    decision: ext_decision,
                },
                &mut MacCounter::new(),
            )
            .unwrap();
        assert!(
            rel_err(&out.logits, &reference.logits) < 1e-4,
            "step {step}"
        );
    }
}

#[test]
fn dropping_every_image_token_removes_their_mass() {
    let cfg = config(4, 16, 2);
    let model = Model::synthetic(cfg, 6).unwrap();
    let seq = sequence(&cfg, 4, 16, 4);
    let opts = GenerateOptions {
        record_attention: true,
        ..GenerateOptions::new(5)
    };
    let gen = model
        .generate(
            &seq,
            &InferenceMode::FastV(PruneConfig::attention(2, 100)),
            &opts,
        )
        .unwrap();
    let img = seq.span(SegmentKind::Img);
    for step in &gen.steps {
        for (l, row) in step.iter().enumerate() {
            let touches_img = row.positions.iter().any(|p| img.contains(*p));
            assert_eq!(touches_img, l < 2, "layer {}", l + 1);
            for head in &row.heads {
                assert!((head.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn disabled_pruning_is_identity() {
    let cfg = config(4, 32, 4);
    let model = Model::synthetic(cfg, 7).unwrap();
    let seq = sequence(&cfg, 4, 40, 8);
    let base = model.generate_greedy(&seq, None, 12, None).unwrap();
    let r0 = model
        .generate_greedy(&seq, Some(PruneConfig::attention(2, 0)), 12, None)
        .unwrap();
    let kt = model
        .generate_greedy(&seq, Some(PruneConfig::attention(4, 75)), 12, None)
        .unwrap();
    assert_eq!(base.output_ids, r0.output_ids);
    assert_eq!(base.output_ids, kt.output_ids);
    assert_eq!(base.output_ids.len(), 12);

    let again = model.generate_greedy(&seq, None, 12, None).unwrap();
    assert_eq!(base.output_ids, again.output_ids);
    assert_eq!(base.counter, again.counter);
}

#[test]
fn attention_is_causal_in_every_layer() {
    let cfg = config(3, 16, 2);
    let model = Model::synthetic(cfg, 8).unwrap();
    let seq = sequence(&cfg, 3, 10, 3);
    for mode in [
        InferenceMode::Baseline,
        InferenceMode::FastV(PruneConfig::attention(1, 50)),
    ] {
        let pre = model
            .prefill_with(&seq, &mode, &mut MacCounter::new(), &[1, 2, 3])
            .unwrap();
        for (_, map) in &pre.captured {
            for q in 0..map.rows() {
                assert!(map.row(q)[q + 1..].iter().all(|v| *v == 0.0));
            }
        }
    }
}

#[test]
fn masking_oracle_matches_removal() {
    let cfg = config(5, 32, 4);
    let model = Model::synthetic(cfg, 9).unwrap();
    let seq = sequence(&cfg, 4, 32, 6);
    for prune in [
        PruneConfig::attention(1, 25),
        PruneConfig::attention(2, 75),
        PruneConfig::random(3, 50, 11),
        PruneConfig::random(0, 50, 12),
        PruneConfig::attention(4, 100),
    ] {
        let pre = model
            .prefill(&seq, &InferenceMode::FastV(prune), &mut MacCounter::new())
            .unwrap();
        let decision = pre.decision.unwrap();
        let masked =
            masked_reference_forward(&model, &seq, &decision, prune.layer, &mut MacCounter::new())
                .unwrap();
        assert!(rel_err(&pre.logits, &masked) < 1e-4, "{prune}");
    }
}

#[test]
fn masking_with_nothing_dropped_is_bitwise_plain() {
    let cfg = config(3, 16, 2);
    let model = Model::synthetic(cfg, 10).unwrap();
    let seq = sequence(&cfg, 4, 8, 4);
    let plain = model
        .prefill(&seq, &InferenceMode::Baseline, &mut MacCounter::new())
        .unwrap();
    let none = PruneDecision::keep_all(seq.n_input(), seq.span(SegmentKind::Img));
    let masked = masked_reference_forward(&model, &seq, &none, 1, &mut MacCounter::new()).unwrap();
    assert_eq!(plain.logits, masked);
}

#[test]
fn counter_matches_formula_unpruned() {
    let cfg = ModelConfig {
        layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab: 32,
        max_seq: 16,
    };
    let model = Model::synthetic(cfg, 11).unwrap();
    let seq = sequence(&cfg, 2, 1, 2);
    let mut counter = MacCounter::new();
    let pre = model
        .prefill(&seq, &InferenceMode::Baseline, &mut counter)
        .unwrap();
    let report = verify_against_counter(&cfg, &pre.cache.live_counts(), &counter);
    for l in &report.layers {
        assert_eq!(l.expected, [1280, 400, 1280]);
        assert_eq!(l.actual, l.expected);
    }
    assert_eq!(report.excluded["lm_head"], (8 * 32) as u64);
}

#[test]
fn counter_matches_formula_pruned() {
    let cfg = ModelConfig {
        layers: 3,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab: 32,
        max_seq: 16,
    };
    let model = Model::synthetic(cfg, 12).unwrap();
    let seq = sequence(&cfg, 1, 6, 1);
    let mut counter = MacCounter::new();
    let pre = model
        .prefill(
            &seq,
            &InferenceMode::FastV(PruneConfig::attention(1, 100)),
            &mut counter,
        )
        .unwrap();
    assert_eq!(pre.cache.live_counts(), vec![8, 2, 2]);
    let report = verify_against_counter(&cfg, &pre.cache.live_counts(), &counter)
        .into_result()
        .unwrap();
    assert_eq!(
        report.layers[1].expected,
        [4 * 2 * 64, 2 * 4 * 8, 2 * 2 * 8 * 16]
    );
}

#[test]
fn streaming_mask_patterns() {
    let cfg = config(2, 16, 2);
    let model = Model::synthetic(cfg, 13).unwrap();
    let seq = sequence(&cfg, 4, 10, 4);
    let base = model
        .prefill(&seq, &InferenceMode::Baseline, &mut MacCounter::new())
        .unwrap();
    let wide = model
        .prefill(
            &seq,
            &InferenceMode::Streaming(StreamingMask::new(seq.n_input(), 1)),
            &mut MacCounter::new(),
        )
        .unwrap();
    assert_eq!(base.logits, wide.logits);

    let opts = GenerateOptions {
        record_attention: true,
        eos_id: None,
        ..GenerateOptions::new(3)
    };
    let gen = model
        .generate(
            &seq,
            &InferenceMode::Streaming(StreamingMask::new(0, 1)),
            &opts,
        )
        .unwrap();
    for (i, step) in gen.steps.iter().enumerate() {
        for row in step {
            assert_eq!(row.positions, vec![seq.n_input() + i]);
        }
    }
}

#[test]
fn prefill_errors() {
    let cfg = config(2, 16, 2);
    let model = Model::synthetic(cfg, 14).unwrap();
    let seq = sequence(&cfg, 4, 10, 4);
    let err = model
        .prefill(
            &seq,
            &InferenceMode::FastV(PruneConfig::attention(3, 50)),
            &mut MacCounter::new(),
        )
        .unwrap_err();
    assert!(err.is_usage());
    let err = model
        .prefill(
            &seq,
            &InferenceMode::FastV(PruneConfig::attention(0, 50)),
            &mut MacCounter::new(),
        )
        .unwrap_err();
    assert!(matches!(err, Error::Prune(_)));

    let long = sequence(&cfg, 100, 50, 20);
    assert!(matches!(
        model.prefill(&long, &InferenceMode::Baseline, &mut MacCounter::new()),
        Err(Error::SequenceTooLong { .. })
    ));
}

#[test]
fn empty_image_span_prunes_nothing() {
    let cfg = config(3, 16, 2);
    let model = Model::synthetic(cfg, 15).unwrap();
    let seq = sequence(&cfg, 4, 0, 4);
    let pre = model
        .prefill(
            &seq,
            &InferenceMode::FastV(PruneConfig::attention(1, 75)),
            &mut MacCounter::new(),
        )
        .unwrap();
    let d = pre.decision.unwrap();
    assert!(d.dropped.is_empty());
    assert_eq!(d.candidate, Span::new(SegmentKind::Img, 4, 4));
}

#[test]
fn decode_step_contract() {
    let cfg = ModelConfig {
        max_seq: 10,
        ..config(2, 16, 2)
    };
    let model = Model::synthetic(cfg, 16).unwrap();
    let seq = sequence(&cfg, 2, 5, 2);
    let pre = model
        .prefill(&seq, &InferenceMode::Baseline, &mut MacCounter::new())
        .unwrap();
    let mut cache = pre.cache;
    let mut counter = MacCounter::new();
    assert!(matches!(
        model.decode_step(&mut cache, 1, 3, &mut counter),
        Err(Error::Position {
            expected: 9,
            got: 3
        })
    ));
    model.decode_step(&mut cache, 1, 9, &mut counter).unwrap();
    assert!(matches!(
        model.decode_step(&mut cache, 1, 10, &mut counter),
        Err(Error::LengthCap { .. })
    ));

    let gen = model.generate_greedy(&seq, None, 8, None).unwrap();
    assert!(gen.output_ids.len() <= 2);
    assert_eq!(gen.stop, fastv_core::model::StopReason::MaxSeq);
}
