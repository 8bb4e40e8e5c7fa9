//! Training loop: schedule algebra, phase interleaving, zero-weight
//! degeneration, checkpoint resume, partition isolation of the
//! unsupervised step, and a small end-to-end learning check.

use asmd::losses::{LossWeights, Phase};
use asmd::model::{self, ModelConfig, AOT_HEAD, SHARED};
use asmd::trainer::{
    config_hash, phase_of, run_schedule, schedule_trace, supervised_iteration, train_variant,
    unsupervised_iteration, TrainConfig, TrainError, TrainState, Variant,
};
use asmd::video::{generate_sequence, DomainSpec, Sequence, ShapeKind};

fn spec(domain_id: usize, accelerated: bool) -> DomainSpec {
    DomainSpec {
        domain_id,
        shape: ShapeKind::Square,
        texture_freq: 0.25,
        target_intensity: 0.9,
        background_intensity: 0.1,
        target_size: 6.0,
        velocity_range: (0.5, 1.5),
        acceleration: if accelerated { (0.0, 0.15) } else { (0.0, 0.0) },
        clutter_density: 0.0,
        noise_level: 0.01,
        start_center: None,
        start_velocity: None,
    }
}

fn domains(k: usize, t_len: usize, seed: u64) -> Vec<Sequence> {
    (0..k)
        .map(|i| {
            generate_sequence(&spec(i, i % 2 == 0), t_len, 24, 24, seed + i as u64).unwrap()
        })
        .collect()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        k_domains: 2,
        shared_dim: 8,
        private_dim: 4,
        head_hidden: 8,
        disc_hidden: 8,
        track_hidden: 8,
        input_size: 8,
        frame_stack: 2,
        ..ModelConfig::default()
    }
}

fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        weights: LossWeights::equal_alpha(2, 0.08, 0.01, 0.6).unwrap(),
        supervised_block: 5,
        unsupervised_block: 3,
        supervised_total: 10,
        clips_each_way: 2,
        clip_len: 4,
        collect_pos: 10,
        collect_neg: 20,
        batch_pos: 6,
        batch_neg: 12,
        neg_pool_cap: 64,
        seed,
        ..TrainConfig::default()
    }
}

fn weights2(l1: f64, l2: f64, l3: f64) -> LossWeights {
    LossWeights::equal_alpha(2, l1, l2, l3).unwrap()
}

// -------------------------------------------------------- schedule algebra --

#[test]
fn phase_function_follows_the_block_interleave() {
    // fresh run starts supervised
    assert_eq!(phase_of(0, 0, 100, 1000), Phase::Supervised);
    // mid-block stays supervised regardless of the unsupervised counter
    assert_eq!(phase_of(50, 0, 100, 1000), Phase::Supervised);
    assert_eq!(phase_of(150, 1000, 100, 1000), Phase::Supervised);
    // a finished supervised block owes a full unsupervised block
    assert_eq!(phase_of(100, 0, 100, 1000), Phase::Unsupervised);
    assert_eq!(phase_of(100, 999, 100, 1000), Phase::Unsupervised);
    assert_eq!(phase_of(100, 1000, 100, 1000), Phase::Supervised);
    assert_eq!(phase_of(200, 1000, 100, 1000), Phase::Unsupervised);
    assert_eq!(phase_of(200, 2000, 100, 1000), Phase::Supervised);
}

#[test]
fn schedule_trace_expands_the_budget() {
    let trace = schedule_trace(250, 100, 1000, true);
    assert_eq!(
        trace,
        vec![
            (Phase::Supervised, 100),
            (Phase::Unsupervised, 1000),
            (Phase::Supervised, 100),
            (Phase::Unsupervised, 1000),
            (Phase::Supervised, 50),
        ]
    );
    // no reservoir: supervised blocks only
    assert_eq!(
        schedule_trace(250, 100, 1000, false),
        vec![
            (Phase::Supervised, 100),
            (Phase::Supervised, 100),
            (Phase::Supervised, 50),
        ]
    );
    assert_eq!(schedule_trace(0, 100, 1000, true), vec![]);
    // exact multiple leaves no trailing unsupervised block
    assert_eq!(
        schedule_trace(200, 100, 1000, true),
        vec![
            (Phase::Supervised, 100),
            (Phase::Unsupervised, 1000),
            (Phase::Supervised, 100),
        ]
    );
}

// ---------------------------------------------------------------- running --

#[test]
fn run_schedule_interleaves_logs_and_checkpoints() {
    let model_cfg = tiny_model();
    let cfg = tiny_train(11);
    let doms = domains(2, 12, 100);
    let reservoir = domains(2, 12, 900);
    let dir = tempfile::tempdir().unwrap();

    let state = TrainState::new(&cfg, &model_cfg, false, &doms).unwrap();
    let arts =
        run_schedule(state, &cfg, &model_cfg, &doms, &reservoir, Some(dir.path())).unwrap();

    assert_eq!(arts.trace, schedule_trace(10, 5, 3, true));
    // one log row per iteration, supervised and unsupervised alike
    assert_eq!(arts.log_rows.len(), 10 + 3);
    // initial, s5, u3, s10
    assert_eq!(arts.checkpoints.len(), 4);
    for p in &arts.checkpoints {
        assert!(p.exists(), "missing checkpoint {}", p.display());
    }
    let log = std::fs::read_to_string(dir.path().join("training_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), asmd::losses::LOG_HEADER);
    assert_eq!(lines.count(), 13);
    assert!(arts.log_rows[0].starts_with("1,supervised,"));
    assert!(arts.log_rows[5].starts_with("1,unsupervised,"));
}

#[test]
fn budget_zero_writes_only_the_initial_checkpoint() {
    let model_cfg = tiny_model();
    let mut cfg = tiny_train(3);
    cfg.supervised_total = 0;
    let doms = domains(2, 12, 7);
    let dir = tempfile::tempdir().unwrap();

    let state = TrainState::new(&cfg, &model_cfg, false, &doms).unwrap();
    let arts = run_schedule(state, &cfg, &model_cfg, &doms, &[], Some(dir.path())).unwrap();
    assert!(arts.log_rows.is_empty());
    assert!(arts.trace.is_empty());
    assert_eq!(arts.checkpoints.len(), 1);
}

#[test]
fn empty_reservoir_runs_supervised_blocks_only() {
    let model_cfg = tiny_model();
    let cfg = tiny_train(5);
    let doms = domains(2, 12, 40);

    let state = TrainState::new(&cfg, &model_cfg, false, &doms).unwrap();
    let arts = run_schedule(state, &cfg, &model_cfg, &doms, &[], None).unwrap();
    assert_eq!(arts.trace, vec![(Phase::Supervised, 5), (Phase::Supervised, 5)]);
    assert_eq!(arts.log_rows.len(), 10);
}

// ----------------------------------------------------------- degeneration --

#[test]
fn zero_weight_variants_degenerate_bitwise() {
    let model_cfg = tiny_model();
    let doms = domains(2, 12, 55);
    let mut cfg = tiny_train(21);
    cfg.supervised_total = 6;
    cfg.weights = weights2(0.0, 0.0, 0.0);

    // with every lambda zero the full variant must reduce to plain
    // cross-entropy training, bitwise: no stray rng draws, no stray grads
    let aps = train_variant(&cfg, &model_cfg, Variant::Aps, &doms, &[], None).unwrap();
    let ps = train_variant(&cfg, &model_cfg, Variant::Ps, &doms, &[], None).unwrap();
    let aps_minus = train_variant(&cfg, &model_cfg, Variant::ApsMinus, &doms, &[], None).unwrap();
    let ps_dif = train_variant(&cfg, &model_cfg, Variant::PsDif, &doms, &[], None).unwrap();
    assert_eq!(aps.store, ps.store);
    assert_eq!(aps.store, aps_minus.store);
    assert_eq!(aps.store, ps_dif.store);

    // sanity: a live direction term draws clips, so the stream diverges
    let mut live = cfg.clone();
    live.weights = weights2(0.0, 0.0, 0.6);
    let with_aot = train_variant(&live, &model_cfg, Variant::Aps, &doms, &[], None).unwrap();
    assert_ne!(aps.store, with_aot.store);
}

#[test]
fn fs_variant_never_allocates_private_trunks() {
    let model_cfg = tiny_model();
    let doms = domains(2, 12, 60);
    let mut cfg = tiny_train(31);
    cfg.supervised_total = 2;

    let fs = train_variant(&cfg, &model_cfg, Variant::Fs, &doms, &[], None).unwrap();
    assert!(!fs.store.has_partition(&model::private_name(0)));
    assert!(!fs.store.has_partition(&model::private_name(1)));
    assert!(fs.store.has_partition(&model::head_name(0)));

    let ps = train_variant(&cfg, &model_cfg, Variant::Ps, &doms, &[], None).unwrap();
    assert!(ps.store.has_partition(&model::private_name(0)));
}

// -------------------------------------------------------------- isolation --

#[test]
fn unsupervised_iteration_touches_only_shared_and_direction_head() {
    let model_cfg = tiny_model();
    let cfg = tiny_train(41);
    let doms = domains(2, 12, 70);
    let reservoir = domains(2, 12, 71);

    let mut state = TrainState::new(&cfg, &model_cfg, false, &doms).unwrap();
    supervised_iteration(&mut state, &cfg, &model_cfg, &doms).unwrap();
    let before = state.store.clone();

    unsupervised_iteration(&mut state, &cfg, &model_cfg, &reservoir).unwrap();

    for name in [
        model::private_name(0),
        model::private_name(1),
        model::head_name(0),
        model::head_name(1),
    ] {
        let a = before.partition(&name).unwrap();
        let b = state.store.partition(&name).unwrap();
        for (i, (ta, tb)) in a.tensors.iter().zip(&b.tensors).enumerate() {
            assert_eq!(
                ta.data(),
                tb.data(),
                "{name}[{i}] moved during an unsupervised iteration"
            );
        }
    }
    assert_ne!(
        before.partition(SHARED).unwrap().tensors[0].data(),
        state.store.partition(SHARED).unwrap().tensors[0].data(),
        "shared trunk did not move"
    );
    assert_ne!(
        before.partition(AOT_HEAD).unwrap().tensors[0].data(),
        state.store.partition(AOT_HEAD).unwrap().tensors[0].data(),
        "direction head did not move"
    );
}

// ------------------------------------------------------------- negatives --

#[test]
fn negative_pools_fill_refresh_and_evict() {
    let model_cfg = tiny_model();
    let cfg = tiny_train(51);
    let doms = domains(2, 12, 80);

    let mut state = TrainState::new(&cfg, &model_cfg, false, &doms).unwrap();
    supervised_iteration(&mut state, &cfg, &model_cfg, &doms).unwrap();
    assert_eq!(state.neg_pool_len(0), cfg.collect_neg);
    assert_eq!(state.neg_pool_len(1), cfg.collect_neg);
    // mined entries carry the forward scores; the rest still sit at 0.5
    let scores = state.neg_pool_scores(0);
    assert!(scores.iter().any(|&s| s != 0.5), "no pool score was refreshed");
    assert!(scores.iter().all(|&s| s > 0.0 && s < 1.0));

    for _ in 0..3 {
        supervised_iteration(&mut state, &cfg, &model_cfg, &doms).unwrap();
    }
    // 4 x 20 collected, capped at 64 with oldest-first eviction
    assert_eq!(state.neg_pool_len(0), cfg.neg_pool_cap);
}

// ---------------------------------------------------------------- resume --

#[test]
fn resume_from_a_boundary_is_bitwise_identical() {
    let model_cfg = tiny_model();
    let cfg = tiny_train(61);
    let doms = domains(2, 12, 90);
    let reservoir = domains(2, 12, 91);
    let dir = tempfile::tempdir().unwrap();

    let state = TrainState::new(&cfg, &model_cfg, false, &doms).unwrap();
    let full =
        run_schedule(state, &cfg, &model_cfg, &doms, &reservoir, Some(dir.path())).unwrap();

    // continue from the mid-run boundary (after block one and its
    // unsupervised block) without any checkpoint output
    let mid = dir.path().join("ckpt_s000005_u000003.ckpt");
    assert!(mid.exists(), "expected boundary checkpoint at {}", mid.display());
    let resumed_state = TrainState::resume(&cfg, &model_cfg, &doms, &mid).unwrap();
    assert_eq!(resumed_state.supervised_done, 5);
    assert_eq!(resumed_state.unsupervised_done, 3);
    let resumed =
        run_schedule(resumed_state, &cfg, &model_cfg, &doms, &reservoir, None).unwrap();

    assert_eq!(resumed.store, full.store);
    assert_eq!(resumed.log_rows, full.log_rows[8..].to_vec());
}

#[test]
fn resume_rejects_a_mismatched_run() {
    let model_cfg = tiny_model();
    let cfg = tiny_train(71);
    let doms = domains(2, 12, 95);
    let dir = tempfile::tempdir().unwrap();

    let state = TrainState::new(&cfg, &model_cfg, false, &doms).unwrap();
    let arts = run_schedule(state, &cfg, &model_cfg, &doms, &[], Some(dir.path())).unwrap();
    let ckpt = arts.checkpoints.last().unwrap();

    let mut other_seed = cfg.clone();
    other_seed.seed = 72;
    let err = TrainState::resume(&other_seed, &model_cfg, &doms, ckpt).unwrap_err();
    assert!(matches!(err, TrainError::ResumeMismatch(_)), "got {err}");

    let mut other_model = model_cfg.clone();
    other_model.shared_dim = 16;
    let err = TrainState::resume(&cfg, &other_model, &doms, ckpt).unwrap_err();
    assert!(matches!(err, TrainError::ResumeMismatch(_)), "got {err}");
}

#[test]
fn identical_configs_train_bitwise_identically() {
    let model_cfg = tiny_model();
    let mut cfg = tiny_train(81);
    cfg.supervised_total = 5;
    let doms = domains(2, 12, 99);

    let run = |seed: u64| {
        let mut c = cfg.clone();
        c.seed = seed;
        let state = TrainState::new(&c, &model_cfg, false, &doms).unwrap();
        run_schedule(state, &c, &model_cfg, &doms, &[], None).unwrap()
    };
    let a = run(81);
    let b = run(81);
    assert_eq!(a.store, b.store);
    assert_eq!(a.log_rows, b.log_rows);

    let c = run(82);
    assert_ne!(a.store, c.store);
}

#[test]
fn config_hash_tracks_every_knob() {
    let model_cfg = tiny_model();
    let cfg = tiny_train(1);
    let base = config_hash(&cfg, &model_cfg, false);
    assert_eq!(base, config_hash(&cfg.clone(), &model_cfg.clone(), false));
    assert_ne!(base, config_hash(&cfg, &model_cfg, true));

    let mut other = cfg.clone();
    other.seed = 2;
    assert_ne!(base, config_hash(&other, &model_cfg, false));

    let mut other_model = model_cfg.clone();
    other_model.shared_dim = 16;
    assert_ne!(base, config_hash(&cfg, &other_model, false));
}

// ----------------------------------------------------------------- guards --

#[test]
fn poisoned_parameters_abort_before_the_step() {
    let model_cfg = tiny_model();
    let cfg = tiny_train(91);
    let doms = domains(2, 12, 101);

    let mut state = TrainState::new(&cfg, &model_cfg, false, &doms).unwrap();
    // a poisoned head output bias reaches the logits unconditionally (a
    // poisoned conv weight may be masked: relu sends NaN to 0)
    let head = model::head_name(0);
    let last = state.store.partition(&head).unwrap().tensors.len() - 1;
    state.store.tensor_mut(&head, last).unwrap().data_mut()[0] = f64::NAN;
    let before = state.store.clone();

    let err = supervised_iteration(&mut state, &cfg, &model_cfg, &doms).unwrap_err();
    let msg = format!("{err}");
    assert!(
        msg.contains("finite") && msg.contains("l_dom"),
        "error does not name the poisoned term: {msg}"
    );
    // the guard fires before sgd_step, so nothing moved (NaN != NaN, so
    // compare everything except the poisoned slot)
    assert!(state.store.tensor(&head, last).unwrap().data()[0].is_nan());
    for name in [SHARED, model::private_name(1).as_str(), model::head_name(1).as_str()] {
        assert_eq!(
            before.partition(name).unwrap().tensors,
            state.store.partition(name).unwrap().tensors,
            "{name} moved despite the abort"
        );
    }
    assert_eq!(state.supervised_done, 0);
}

#[test]
fn short_reservoir_sequences_are_skipped() {
    let model_cfg = tiny_model();
    let cfg = tiny_train(95);
    let doms = domains(2, 12, 103);

    let mut short = domains(1, 12, 104).remove(0);
    short.frames.truncate(3);
    short.truth.truncate(3);

    let mut state = TrainState::new(&cfg, &model_cfg, false, &doms).unwrap();
    let err =
        unsupervised_iteration(&mut state, &cfg, &model_cfg, std::slice::from_ref(&short))
            .unwrap_err();
    assert!(matches!(err, TrainError::NoUsableReservoir { need: 4 }), "got {err}");

    // a usable companion rescues the iteration
    let long = domains(1, 12, 105).remove(0);
    unsupervised_iteration(&mut state, &cfg, &model_cfg, &[short, long]).unwrap();
    assert_eq!(state.unsupervised_done, 1);
}

#[test]
fn config_validation_names_the_offending_knob() {
    let model_cfg = tiny_model();
    let doms = domains(2, 12, 107);

    let mut cfg = tiny_train(1);
    cfg.batch_pos = cfg.collect_pos + 1;
    let err = TrainState::new(&cfg, &model_cfg, false, &doms).unwrap_err();
    assert!(format!("{err}").contains("batch_pos"), "got {err}");

    let mut cfg = tiny_train(1);
    cfg.clip_len = 1;
    let err = TrainState::new(&cfg, &model_cfg, false, &doms).unwrap_err();
    assert!(format!("{err}").contains("clip_len"), "got {err}");

    let mut cfg = tiny_train(1);
    cfg.weights = LossWeights::equal_alpha(3, 0.0, 0.0, 0.0).unwrap();
    let err = TrainState::new(&cfg, &model_cfg, false, &doms).unwrap_err();
    assert!(format!("{err}").contains("alpha"), "got {err}");

    // domain order is part of the contract
    let mut swapped = domains(2, 12, 108);
    swapped.swap(0, 1);
    let err = TrainState::new(&tiny_train(1), &model_cfg, false, &swapped).unwrap_err();
    assert!(matches!(err, TrainError::BadConfig(_)), "got {err}");
}

// ---------------------------------------------------------------- learning --

#[test]
fn supervised_training_reduces_the_tracking_loss() {
    let model_cfg = tiny_model();
    let mut cfg = tiny_train(7);
    // plain cross-entropy training, all regularizers off
    cfg.weights = weights2(0.0, 0.0, 0.0);
    cfg.supervised_total = 400;
    cfg.supervised_block = 400;
    let doms = domains(2, 12, 500);

    let mut state = TrainState::new(&cfg, &model_cfg, false, &doms).unwrap();
    let mut trained = Vec::with_capacity(cfg.supervised_total);
    for _ in 0..cfg.supervised_total {
        let report = supervised_iteration(&mut state, &cfg, &model_cfg, &doms).unwrap();
        trained.push(report.l_dom_trained);
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let head = mean(&trained[..20]);
    let tail = mean(&trained[380..]);
    assert!(
        tail < 0.8 * head,
        "tracking loss did not fall: first 20 mean {head:.4}, last 20 mean {tail:.4}"
    );
}
