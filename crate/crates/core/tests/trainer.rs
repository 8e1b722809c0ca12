use seca_core::datastream::{gen_synthetic, SyntheticSpec, TaskStream};
use seca_core::encoder::EncoderConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seca_core::numkernel::ops::{cosine_sim, softmax_temp};
use seca_core::numkernel::Tensor;
use seca_core::sevpr::{
    affinity_matrix, classifier_variant, loss_reg, refine_prototypes, ClassifierInputs, ClassifierVariant,
};
use seca_core::sgakt::{
    aggregate, loss_sgakt, pooled_views, relevance_scores, semantic_vectors, DistillStrategy, SemanticProjectors,
};
use seca_core::trainer::checkpoint;
use seca_core::trainer::*;
use seca_core::{FormatErrorKind, SecaError};

fn small(distill: DistillStrategy, classifier: ClassifierVariant) -> RunConfig {
    let data = SyntheticSpec {
        num_tasks: 3,
        classes_per_task: 3,
        dim: 8,
        superclasses: 3,
        train_per_class: 6,
        test_per_class: 4,
        seed: 11,
        ..SyntheticSpec::default()
    };
    RunConfig {
        epochs: 2,
        batch_size: 8,
        distill,
        classifier,
        tau_prime: 0.5,
        encoder: EncoderConfig {
            d_v: 8,
            d_t: 8,
            layers: 2,
            width: 4,
            prompt_tokens: 2,
            seed: 3,
        },
        data: DataSource::Synthetic(data),
        ..RunConfig::default()
    }
}

fn stream_of(cfg: &RunConfig) -> TaskStream {
    load_stream(cfg).unwrap()
}

fn run(cfg: &RunConfig) -> (TrainState, Metrics) {
    run_stream(cfg.clone(), &stream_of(cfg), |_, _, _| {}).unwrap()
}

fn pseudo_for(st: &TrainState, ctx: &TaskContext) -> Option<(Tensor, Vec<usize>)> {
    ctx.replay_active().then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        st.replay.sample_batch(5, &mut rng).unwrap()
    })
}

#[test]
fn total_loss_is_the_sum_of_its_terms() {
    for d in DistillStrategy::ALL {
        for c in [ClassifierVariant::Sevpr, ClassifierVariant::Linear, ClassifierVariant::CentroidAdapted] {
            let mut cfg = small(d, c);
            cfg.replay = true;
            let stream = stream_of(&cfg);
            let mut st = TrainState::new(cfg, &stream).unwrap();
            st.train_task(&stream.tasks[0]).unwrap();
            st.train_task(&stream.tasks[1]).unwrap();
            let ctx = st.begin_task(&stream.tasks[2]).unwrap();
            assert!(ctx.replay_active());
            let pseudo = pseudo_for(&st, &ctx);
            let l = st.batch_losses(&ctx, &[0, 3, 5, 9], pseudo.as_ref()).unwrap();
            assert!((l.total - l.component_sum()).abs() <= 1e-12 * l.total.abs().max(1.0), "{l:?}");
            assert_eq!(l.beta, 3.0);
            assert!(l.replay_text > 0.0);
            assert!(st.batch_losses(&ctx, &[0], None).is_err());
            if d != DistillStrategy::Seq {
                assert!(l.agg >= 0.0 && l.kl >= -1e-6, "{l:?}");
            } else {
                assert_eq!((l.agg, l.kl), (0.0, 0.0));
            }
        }
    }
}

/// Mean cross-entropy from value-level cosine logits, computed sample by sample.
fn ce_oracle(feats: &Tensor, rows: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let logits: Vec<f64> = (0..rows.rows())
            .map(|k| cosine_sim(feats.row(i), rows.row(k)).unwrap() / tau)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    total / labels.len() as f64
}

#[test]
fn total_loss_matches_independent_components() {
    for replay in [false, true] {
        let mut cfg = small(DistillStrategy::SgAkt, ClassifierVariant::Sevpr);
        cfg.replay = replay;
        let stream = stream_of(&cfg);
        let mut st = TrainState::new(cfg.clone(), &stream).unwrap();
        st.train_task(&stream.tasks[0]).unwrap();
        st.train_task(&stream.tasks[1]).unwrap();
        let task = &stream.tasks[2];
        let ctx = st.begin_task(task).unwrap();
        let batch = [1usize, 4, 7, 10, 16];
        let pseudo = pseudo_for(&st, &ctx);
        let got = st.batch_losses(&ctx, &batch, pseudo.as_ref()).unwrap();

        let xs = task.train.xs.select_rows(&batch);
        let labels: Vec<usize> = batch.iter().map(|&i| task.train.labels[i]).collect();
        let seen = ctx.seen.clone();
        let prompt = st.prompts.get(3).unwrap();
        let support: &[usize] = if replay { &seen } else { &task.classes };
        let pos = |ys: &[usize], within: &[usize]| -> Vec<usize> {
            ys.iter().map(|y| within.iter().position(|c| c == y).unwrap()).collect()
        };
        let f = st.encoder.visual_features(&xs, Some(&st.adapters)).unwrap();
        let t_support = st.encoder.text_features(support, prompt).unwrap();
        let t_task = st.encoder.text_features(&task.classes, prompt).unwrap();
        let ce_t = ce_oracle(&f, &t_support, &pos(&labels, support), cfg.tau);

        let views = pooled_views(&st.encoder, &xs, &st.pool).unwrap();
        let sem = semantic_vectors(&st.encoder, &labels, &st.prompts, 3).unwrap();
        let alpha = relevance_scores(&sem, &views, &st.projectors).unwrap();
        let agg = aggregate(&views, &alpha, cfg.lambda).unwrap();
        let l_agg = ce_oracle(&agg.aggregated, &t_task, &pos(&labels, &task.classes), cfg.tau);
        let kl = loss_sgakt(&agg.aggregated, &f, &t_task, cfg.tau_prime, cfg.kl_eps).unwrap();

        let z = st.encoder.text_features(&seen, prompt).unwrap();
        let m = affinity_matrix(&z, &st.affinity.h, cfg.gamma).unwrap();
        let refined = refine_prototypes(&m, &st.prototypes.raw_matrix(&seen).unwrap()).unwrap();
        let sup_rows = pos(support, &seen);
        let ce_v = ce_oracle(&f, &refined.select_rows(&sup_rows), &pos(&labels, support), cfg.tau);
        let old = &seen[..6];
        let reg = loss_reg(&refined, &st.prototypes.snapshot_matrix(old).unwrap()).unwrap();

        let mut expect = ce_t + l_agg + 3.0 * kl + ce_v + reg;
        if let Some((pf, py)) = &pseudo {
            let t_seen = st.encoder.text_features(&seen, prompt).unwrap();
            let idx = pos(py, &seen);
            expect += ce_oracle(pf, &t_seen, &idx, cfg.tau) + ce_oracle(pf, &refined, &idx, cfg.tau);
        }
        assert!((got.total - expect).abs() <= 1e-9 * expect.abs().max(1.0), "replay {replay}: {} vs {expect}", got.total);
    }
}

#[test]
fn first_task_has_no_distillation_or_anchor_terms() {
    let cfg = small(DistillStrategy::SgAkt, ClassifierVariant::Sevpr);
    let stream = stream_of(&cfg);
    let mut st = TrainState::new(cfg.clone(), &stream).unwrap();
    let ctx = st.begin_task(&stream.tasks[0]).unwrap();
    let l = st.batch_losses(&ctx, &[0, 1, 2], None).unwrap();
    assert_eq!(l.total, l.ce_text + l.ce_visual);
    assert_eq!((l.agg, l.kl, l.reg), (0.0, 0.0, 0.0));
    let projectors = st.projectors.clone();
    for _ in 0..3 {
        st.step(&ctx, &[0, 1, 2, 3]).unwrap();
    }
    assert_eq!(st.projectors, projectors);
    assert!(st.adam.slot("w_s").is_none());
}

#[test]
fn zero_epochs_only_do_bookkeeping() {
    let mut cfg = small(DistillStrategy::SgAkt, ClassifierVariant::Sevpr);
    cfg.epochs = 0;
    let stream = stream_of(&cfg);
    let mut st = TrainState::new(cfg, &stream).unwrap();
    let adapters = st.adapters.clone();
    let h = st.affinity.h.clone();
    st.train_task(&stream.tasks[0]).unwrap();
    st.train_task(&stream.tasks[1]).unwrap();
    assert_eq!(st.adapters, adapters);
    assert_eq!(st.affinity.h, h);
    assert_eq!(st.pool.len(), 2);
    assert_eq!(st.prototypes.raw_classes().len(), 6);
    assert!(st.prototypes.snapshot_matrix(&st.seen()).is_ok());
}

#[test]
fn separable_two_task_stream_is_learned_perfectly() {
    let mut cfg = small(DistillStrategy::SgAkt, ClassifierVariant::Sevpr);
    if let DataSource::Synthetic(spec) = &mut cfg.data {
        spec.num_tasks = 2;
        spec.sigma = 0.0;
        spec.rho = 0.0;
        spec.superclasses = 6;
        spec.dim = 32;
    }
    // room for two tasks without the adapters trading one off for the other
    cfg.encoder.d_v = 32;
    cfg.encoder.d_t = 32;
    cfg.encoder.width = 16;
    cfg.epochs = 10;
    let (_, m) = run(&cfg);
    assert_eq!(m.last, 100.0);
    assert_eq!(m.avg, 100.0);
}

#[test]
fn identical_configs_give_identical_runs() {
    let cfg = small(DistillStrategy::SgAkt, ClassifierVariant::Sevpr);
    let (a, ma) = run(&cfg);
    let (b, mb) = run(&cfg);
    assert_eq!(ma, mb);
    assert!(a == b);
    let (c, _) = run(&cfg.trial(1));
    assert_ne!(a.adapters.checksum(), c.adapters.checksum());
}

#[test]
fn replay_knobs_are_inert_when_replay_is_off() {
    let cfg = small(DistillStrategy::SgAkt, ClassifierVariant::Sevpr);
    let mut other = cfg.clone();
    other.replay_batch = Some(3);
    other.full_covariance = true;
    let (a, ma) = run(&cfg);
    let (b, mb) = run(&other);
    assert_eq!(ma, mb);
    assert_eq!(a.adapters, b.adapters);
    assert_eq!(a.prompts, b.prompts);
    assert!(a.replay.is_empty() && b.replay.is_empty());
}

#[test]
fn zero_projectors_reduce_to_uniform_averaging() {
    let sg = small(DistillStrategy::SgAkt, ClassifierVariant::Sevpr);
    let avg = small(DistillStrategy::AvgKd, ClassifierVariant::Sevpr);
    let stream = stream_of(&sg);
    let mut a = TrainState::new(sg, &stream).unwrap();
    a.projectors = SemanticProjectors::zeros(8, 8);
    let mut b = TrainState::new(avg, &stream).unwrap();
    for task in &stream.tasks {
        a.train_task(task).unwrap();
        b.train_task(task).unwrap();
        assert_eq!(a.adapters, b.adapters);
        assert_eq!(a.prompts, b.prompts);
        assert_eq!(a.pool.utilities(), b.pool.utilities());
        assert_eq!(a.affinity, b.affinity);
    }
}

#[test]
fn single_entry_pool_averaging_is_previous_model_distillation() {
    let mut avg = small(DistillStrategy::AvgKd, ClassifierVariant::OnlyText);
    avg.pool_max = PoolMax::Bounded(1);
    let mut van = avg.clone();
    van.distill = DistillStrategy::Vanilla;
    let (a, ma) = run(&avg);
    let (b, mb) = run(&van);
    assert_eq!(ma, mb);
    assert_eq!(a.adapters, b.adapters);
}

#[test]
fn frozen_parts_never_change() {
    let cfg = small(DistillStrategy::SgAkt, ClassifierVariant::Sevpr);
    let stream = stream_of(&cfg);
    let mut st = TrainState::new(cfg, &stream).unwrap();
    let enc = st.encoder.checksum();
    let mut admitted = Vec::new();
    let mut frozen_prompts = Vec::new();
    for task in &stream.tasks {
        st.train_task(task).unwrap();
        admitted.push(st.adapters.checksum());
        assert_eq!(st.encoder.checksum(), enc);
        for e in st.pool.entries() {
            assert!(admitted.contains(&e.adapters.checksum()));
        }
        for (i, p) in frozen_prompts.iter().enumerate() {
            assert_eq!(&st.prompts.all()[i], p);
        }
        frozen_prompts = st.prompts.all().to_vec();
    }
}

#[test]
fn overlapping_classes_are_rejected() {
    let cfg = small(DistillStrategy::Seq, ClassifierVariant::OnlyText);
    let stream = stream_of(&cfg);
    let mut st = TrainState::new(cfg, &stream).unwrap();
    st.train_task(&stream.tasks[0]).unwrap();
    let e = st.train_task(&stream.tasks[0]).unwrap_err();
    assert!(matches!(e, SecaError::ProtocolViolation(_)), "{e}");
}

#[test]
fn prediction_is_the_hybrid_argmax() {
    for c in ClassifierVariant::ALL {
        let cfg = small(DistillStrategy::SgAkt, c);
        let (st, _) = run(&cfg);
        let stream = stream_of(&cfg);
        let test = union_test(&stream, 3).unwrap();
        let pred = st.predict(&test.xs).unwrap();
        let seen = st.seen();
        let feats = st.encoder.visual_features(&test.xs, Some(&st.adapters)).unwrap();
        let raw = st.prototypes.raw_matrix(&seen).unwrap();
        let refined = st.prototypes.current_matrix(&seen).unwrap_or_else(|_| raw.clone());
        let centroids = st.prototypes.adapted_matrix(&seen).ok();
        let texts: Vec<_> = (1..=3)
            .map(|i| st.encoder.text_features(&seen, st.prompts.get(i).unwrap()).unwrap())
            .collect();
        for i in 0..test.len() {
            let f = feats.row(i);
            // per-sample oracle: cosine logits, per-prompt softmax, mean
            let mut avg = vec![0.0; seen.len()];
            for t in &texts {
                let logits: Vec<f64> = (0..seen.len())
                    .map(|k| cosine_sim(f, t.row(k)).unwrap() / st.config.tau_prime)
                    .collect();
                let p = softmax_temp(&logits, 1.0).unwrap();
                for k in 0..seen.len() {
                    avg[k] += p.probs()[k] / 3.0;
                }
            }
            let text_avg = seca_core::numkernel::ProbVector::new(avg.clone()).unwrap();
            let inp = ClassifierInputs {
                adapted: f,
                text_avg: &text_avg,
                raw: &raw,
                refined: &refined,
                adapted_centroids: centroids.as_ref().unwrap_or(&raw),
                linear: &st.linear,
                tau: st.config.tau_prime,
            };
            let v = classifier_variant(c, &inp).unwrap();
            let score: Vec<f64> = if c == ClassifierVariant::OnlyText {
                avg.clone()
            } else {
                avg.iter().zip(v.probs()).map(|(a, b)| a + b).collect()
            };
            let best = seca_core::numkernel::argmax(&score);
            assert_eq!(pred[i], seen[best], "variant {}, sample {i}", c.name());
        }
    }
}

#[test]
fn checkpoints_round_trip_and_resume() {
    let mut cfg = small(DistillStrategy::SgAkt, ClassifierVariant::Sevpr);
    cfg.replay = true;
    cfg.full_covariance = true;
    let stream = stream_of(&cfg);
    let mut st = TrainState::new(cfg, &stream).unwrap();
    st.train_task(&stream.tasks[0]).unwrap();
    st.train_task(&stream.tasks[1]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    checkpoint::save(&st, &path).unwrap();
    let mut back = checkpoint::load(&path).unwrap();
    assert!(back == st);
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());
    st.train_task(&stream.tasks[2]).unwrap();
    back.train_task(&stream.tasks[2]).unwrap();
    assert!(back == st);

    let bytes = checkpoint::to_bytes(&st).unwrap();
    let kind = |b: &[u8]| match checkpoint::from_bytes(b) {
        Err(SecaError::Format { kind, .. }) => kind,
        other => panic!("expected a format error, got {:?}", other.map(|_| ())),
    };
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(kind(&bad), FormatErrorKind::BadMagic);
    let mut bad = bytes.clone();
    bad[9] = 99;
    assert_eq!(kind(&bad), FormatErrorKind::VersionMismatch);
    assert_eq!(kind(&bytes[..bytes.len() - 5]), FormatErrorKind::Truncated);
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(kind(&long), FormatErrorKind::TrailingBytes);
}

#[test]
fn checkpoints_refuse_mid_task_states() {
    let cfg = small(DistillStrategy::Seq, ClassifierVariant::OnlyText);
    let stream = stream_of(&cfg);
    let mut st = TrainState::new(cfg, &stream).unwrap();
    let _ctx = st.begin_task(&stream.tasks[0]).unwrap();
    assert!(matches!(checkpoint::to_bytes(&st), Err(SecaError::ProtocolViolation(_))));
}

#[test]
fn synthetic_config_matches_stream_generator() {
    let cfg = small(DistillStrategy::Seq, ClassifierVariant::OnlyText);
    let DataSource::Synthetic(spec) = &cfg.data else { unreachable!() };
    let direct = gen_synthetic(spec).unwrap();
    let via = stream_of(&cfg);
    assert_eq!(direct.tasks.len(), via.tasks.len());
    assert_eq!(direct.tasks[2].test.labels, via.tasks[2].test.labels);
}

#[test]
fn metrics_follow_the_protocol() {
    let cfg = small(DistillStrategy::Seq, ClassifierVariant::OnlyText);
    let (_, m) = run(&cfg);
    assert_eq!(m.per_task.len(), 3);
    assert_eq!(m.per_task[1].seen_classes, 6);
    assert_eq!(m.last, m.per_task[2].acc);
    let mean = m.per_task.iter().map(|t| t.acc).sum::<f64>() / 3.0;
    assert_eq!(m.avg, mean);
}
