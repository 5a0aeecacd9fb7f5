#[path = "common/world.rs"]
mod world;

use std::fs;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tacoxfer::adapt::*;
use tacoxfer::data::Corpus;
use tacoxfer::gradcore::{adam_step, AdamHyper, AdamState, FreezePlan, ParamGroup, ParamStore, Tensor};
use tacoxfer::inventory::SpeakerStatus;
use tacoxfer::metrics::{embedding_spread, evaluate_scenario};
use tacoxfer::model::{encode_values, infer, teacher_forced, ModelConfig, StopRule, PHONEME_TABLE, SPEAKER_TABLE};
use tacoxfer::Error;
use world::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        phoneme_dim: 8,
        encoder_conv_layers: 1,
        encoder_channels: 8,
        encoder_hidden: 8,
        speaker_dim: 4,
        prenet_dims: vec![8],
        decoder_hidden: 16,
        attention_dim: 8,
        postnet_layers: 1,
        postnet_channels: 8,
        prenet_dropout: 0.5,
        ..ModelConfig::default()
    }
}

fn hyper() -> TrainHyper {
    TrainHyper { batch_size: 4, mcd_interval: 20, ..TrainHyper::default() }
}

fn cross_world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| World::new("de", 3))
}

fn base() -> &'static Checkpoint {
    static B: OnceLock<Checkpoint> = OnceLock::new();
    B.get_or_init(|| {
        let c = cross_world().corpus(&[SPK_EN, SPK_ES], 6, 10);
        pretrain(&c, &tiny(), &hyper(), 4, 60, "ENES").unwrap()
    })
}

fn de_corpus() -> Corpus {
    cross_world().corpus(&[SPK_NEW], 5, 20)
}

fn de_scenario(steps: u64) -> AdaptScenario {
    let mut s = AdaptScenario::new(
        AdaptKind::Cross,
        vec![NewSpeaker { speaker_id: SPK_NEW, language_id: "de".into() }],
        steps,
        "DE",
    );
    s.hyper.batch_size = 4;
    s
}

fn rows_equal(a: &Tensor<f32>, b: &Tensor<f32>, r: usize) -> bool {
    a.row_slice(r).iter().zip(b.row_slice(r)).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn pretraining_lowers_training_loss_and_mcd() {
    let b = base();
    let c = cross_world().corpus(&[SPK_EN, SPK_ES], 6, 10);
    let mut fresh = b.clone();
    fresh.params = tacoxfer::model::init_params(&tiny(), 4).unwrap();
    assert!(corpus_loss(b, &c.utterances).unwrap() < corpus_loss(&fresh, &c.utterances).unwrap());
    let mcd: Vec<f64> = b.log.iter().filter_map(|e| e.mcd_db).collect();
    assert!(mcd.len() >= 3);
    assert!(mcd.last().unwrap() < mcd.first().unwrap());
    assert_eq!(b.log.first().unwrap().step, 0);
    assert_eq!(b.log.last().unwrap().step, 59);
    assert_eq!(b.total_steps(), 60);
    assert_eq!(b.registry.len(), 2);
    assert!(b.registry.entries().iter().all(|e| e.status == SpeakerStatus::Trainable));
}

#[test]
fn mono_adaptation_freezes_encoder_and_phoneme_table() {
    let w = World::new("en", 3);
    let b = base();
    let corpus = w.corpus(&[SPK_NEW], 5, 30);
    let mut s = AdaptScenario::new(
        AdaptKind::Mono,
        vec![NewSpeaker { speaker_id: SPK_NEW, language_id: "en".into() }],
        15,
        "EN",
    );
    s.hyper.batch_size = 4;
    let after = adapt(b, &corpus, &s, 9).unwrap();
    for name in b.params.names_in(ParamGroup::Encoder).iter().chain([&PHONEME_TABLE.to_string()]) {
        assert!(b.params.get(name).unwrap().bit_eq(after.params.get(name).unwrap()), "{name}");
    }
    let (ws0, ws1) = (b.params.get(SPEAKER_TABLE).unwrap(), after.params.get(SPEAKER_TABLE).unwrap());
    assert!(rows_equal(ws0, ws1, 0) && rows_equal(ws0, ws1, 1));
    assert!(!rows_equal(ws0, ws1, 2));
    let dec = b.params.names_in(ParamGroup::Decoder);
    assert!(dec.iter().any(|n| b.params.get(n).unwrap() != after.params.get(n).unwrap()));

    let model = b.model().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let x: Vec<usize> = (0..rng.random_range(1..12)).map(|_| rng.random_range(0..b.inventory.len())).collect();
        let e0 = encode_values(&model, &b.params, &x).unwrap();
        let e1 = encode_values(&model, &after.params, &x).unwrap();
        assert!(e0.bit_eq(&e1));
    }
    assert_eq!(after.stages.len(), 2);
    assert_eq!(after.stages[0], b.stages[0]);
    assert_eq!(after.scenario_label(), "ENES2EN");
    assert!(after.optimizer.is_some());
}

#[test]
fn mono_adaptation_rejects_unseen_phonemes() {
    let err = adapt(base(), &de_corpus(), &AdaptScenario { kind: AdaptKind::Mono, ..de_scenario(5) }, 1).unwrap_err();
    assert!(matches!(err, Error::Validation(m) if m.contains("unseen")));
}

#[test]
fn bad_scenarios_are_rejected() {
    let b = base();
    assert!(matches!(adapt(b, &de_corpus(), &de_scenario(0), 1), Err(Error::Validation(_))));
    let mut wrong_id = de_scenario(3);
    wrong_id.new_speakers[0].speaker_id = 5;
    assert!(matches!(adapt(b, &de_corpus(), &wrong_id, 1), Err(Error::Validation(_))));
    let old = cross_world().corpus(&[SPK_EN, SPK_NEW], 2, 40);
    let r = adapt(b, &old, &de_scenario(3), 1);
    assert!(matches!(r, Err(Error::Validation(_))), "{:?}", r.map(|_| ()));
    let mut mixed_new = de_scenario(3);
    mixed_new.old_data = Some(de_corpus());
    assert!(matches!(adapt(b, &de_corpus(), &mixed_new, 1), Err(Error::Validation(_))));
    let c = cross_world().corpus(&[SPK_EN, SPK_ES], 2, 10);
    assert!(matches!(pretrain(&c, &tiny(), &hyper(), 1, 0, "X"), Err(Error::Validation(_))));
}

#[test]
fn cross_then_chain_keeps_every_frozen_row() {
    let b = base();
    let w = cross_world();
    let de = adapt(b, &de_corpus(), &de_scenario(15), 5).unwrap();
    let (ws0, ws1) = (b.params.get(SPEAKER_TABLE).unwrap(), de.params.get(SPEAKER_TABLE).unwrap());
    assert!(rows_equal(ws0, ws1, 0) && rows_equal(ws0, ws1, 1));
    let novel = w.novel_rows("de", &["en", "es"]);
    let (wp0, wp1) = (b.params.get(PHONEME_TABLE).unwrap(), de.params.get(PHONEME_TABLE).unwrap());
    assert!(novel.iter().any(|&r| !rows_equal(wp0, wp1, r)));
    assert!(embedding_spread(wp1, &novel).unwrap() != embedding_spread(wp0, &novel).unwrap());
    // rows of phonemes no language uses never see a gradient
    let unused = w.inventory.len() + 3;
    assert!(rows_equal(wp0, wp1, unused));
    let enc = b.params.names_in(ParamGroup::Encoder);
    assert!(enc.iter().any(|n| b.params.get(n).unwrap() != de.params.get(n).unwrap()));

    let ko_corpus = w.corpus(&[SPK_KO], 5, 50);
    let mut s = AdaptScenario::new(
        AdaptKind::Cross,
        vec![NewSpeaker { speaker_id: SPK_KO, language_id: "ko".into() }],
        10,
        "KO",
    );
    s.hyper.batch_size = 4;
    let ko = adapt(&de, &ko_corpus, &s, 6).unwrap();
    let ws2 = ko.params.get(SPEAKER_TABLE).unwrap();
    for r in 0..3 {
        assert!(rows_equal(ws1, ws2, r));
    }
    assert!(de.registry.frozen_ids().is_subset(&ko.registry.frozen_ids()));
    assert_eq!(ko.registry.frozen_ids(), [0, 1, 2].into());
    assert_eq!(ko.stages[..2], de.stages[..]);
    assert_eq!(ko.freeze_history().len(), 3);
    assert_eq!(ko.scenario_label(), "ENES2DE2KO");
    assert_eq!(ko.total_steps(), 85);
    assert_eq!(ko.languages.iter().map(|l| l.language_id.as_str()).collect::<Vec<_>>(), ["en", "es", "de", "ko"]);

    let mut probes = w.utterances(&[SPK_EN, SPK_ES, SPK_NEW, SPK_KO], 2, 70);
    probes.truncate(8);
    let report = evaluate_scenario(&ko, &probes, &w.spec).unwrap();
    assert_eq!(report.scenario, "ENES2DE2KO");
    let row = report.csv_row();
    let cells: Vec<&str> = row.split(',').collect();
    assert_eq!(cells[1], "85");
    for c in &cells[2..] {
        assert_eq!(c.split('/').count(), 4, "{row}");
    }
}

#[test]
fn adaptation_with_old_data_is_deterministic() {
    let b = base();
    let mut s = de_scenario(6);
    s.old_data = Some(cross_world().corpus(&[SPK_EN, SPK_ES], 3, 10));
    let x = adapt(b, &de_corpus(), &s, 2).unwrap();
    let y = adapt(b, &de_corpus(), &s, 2).unwrap();
    assert_eq!(x.params, y.params);
    let z = adapt(b, &de_corpus(), &de_scenario(6), 2).unwrap();
    assert_ne!(x.params, z.params);
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let b = base();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(b, dir.path()).unwrap();
    let l = load_checkpoint(dir.path()).unwrap();
    assert_eq!(l.params, b.params);
    assert_eq!(l.optimizer, b.optimizer);
    assert!(!l.optimizer_reinitialized);
    assert_eq!(l.inventory, b.inventory);
    assert_eq!(l.registry, b.registry);
    assert_eq!(l.stages, b.stages);
    assert_eq!(l.log, b.log);
    let u = &cross_world().corpus(&[SPK_ES], 1, 90).utterances[0];
    let (m0, m1) = (b.model().unwrap(), l.model().unwrap());
    let a = infer(&m0, &b.params, &u.phonemes, 1, 30, StopRule::Predictor, None).unwrap();
    let c = infer(&m1, &l.params, &u.phonemes, 1, 30, StopRule::Predictor, None).unwrap();
    assert!(a.y_post.bit_eq(&c.y_post) && a.alignment.bit_eq(&c.alignment));
    let (t0, s0) = teacher_forced(&m0, &b.params, &u.phonemes, u.speaker_id, &u.mel).unwrap();
    let (t1, s1) = teacher_forced(&m1, &l.params, &u.phonemes, u.speaker_id, &u.mel).unwrap();
    assert!(t0.y_pre.bit_eq(&t1.y_pre));
    assert_eq!(s0.to_bits(), s1.to_bits());

    let dir2 = tempfile::tempdir().unwrap();
    save_checkpoint(&l, dir2.path()).unwrap();
    for f in [CHECKPOINT_MANIFEST, CHECKPOINT_TENSORS] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(dir2.path().join(f)).unwrap());
    }
}

#[test]
fn missing_optimizer_state_loads_as_reinitialized() {
    let mut b = base().clone();
    b.optimizer = None;
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&b, dir.path()).unwrap();
    let l = load_checkpoint(dir.path()).unwrap();
    assert!(l.optimizer.is_none());
    assert!(l.optimizer_reinitialized);
    assert_eq!(l.params, b.params);
    adapt(&l, &de_corpus(), &de_scenario(2), 1).unwrap();
}

#[test]
fn damaged_checkpoints_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(base(), dir.path()).unwrap();
    let bin = dir.path().join(CHECKPOINT_TENSORS);
    let blob = fs::read(&bin).unwrap();

    let mut flipped = blob.clone();
    flipped[blob.len() / 2] ^= 0x10;
    fs::write(&bin, &flipped).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::ChecksumMismatch(_))));

    fs::write(&bin, &blob[..blob.len() - 4]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::TruncatedTensor { .. })));

    fs::write(&bin, &blob).unwrap();
    let manifest = dir.path().join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replacen("\"format_version\": 1", "\"format_version\": 2", 1)).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::VersionMismatch { expected: 1, found: 2 })));

    fs::write(&manifest, text.replacen("\"decoder_hidden\": 16", "\"decoder_hidden\": 17", 1)).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frozen_entries_never_move(
        seed in 0u64..10_000,
        freeze_a in any::<bool>(),
        rows in prop::collection::btree_set(0usize..5, 0..5),
        steps in 1usize..30,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |r: usize, c: usize| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0f64..1.0)).collect()).unwrap()
        };
        let mut params = ParamStore::new();
        params.insert("a", ParamGroup::Encoder, rand_t(3, 2));
        params.insert("t", ParamGroup::PhonemeTable, rand_t(5, 3));
        let mut plan = FreezePlan::default();
        if freeze_a {
            plan.frozen_tensors.insert("a".into());
        }
        plan.frozen_rows.insert("t".into(), rows.clone());
        let before = params.clone();
        let mut state = AdamState::new(&params);
        for _ in 0..steps {
            let mut grads = params.zeros_like();
            grads.get_mut("a").unwrap().clone_from(&rand_t(3, 2));
            grads.get_mut("t").unwrap().clone_from(&rand_t(5, 3));
            adam_step(&mut params, &grads, &plan, &mut state, &AdamHyper::default()).unwrap();
        }
        let (t0, t1) = (before.get("t").unwrap(), params.get("t").unwrap());
        for r in 0..5 {
            let same = t0.row_slice(r).iter().zip(t1.row_slice(r)).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert_eq!(same, rows.contains(&r));
            let m = state.m.get("t").unwrap();
            prop_assert_eq!(m.row_slice(r).iter().all(|&x| x == 0.0), rows.contains(&r));
        }
        prop_assert_eq!(before.get("a").unwrap().bit_eq(params.get("a").unwrap()), freeze_a);
    }
}
