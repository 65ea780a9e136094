//! Training-loop tests: bitwise determinism, phase isolation, update reach,
//! checkpoint integrity and resume, log cadence, and the non-finite abort.

use std::collections::BTreeMap;

use liet::autodiff::Tape;
use liet::feature::{FeatureMap, LidarMap, PairedSample};
use liet::nets::NetConfig;
use liet::pipeline::{discriminator_loss, training_forward};
use liet::trainer::{
    fit, load_checkpoint, save_checkpoint, train_step, TrainConfig, TrainState,
};
use liet::Error;
use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 8;

fn random_map(rng: &mut ChaCha8Rng, channels: usize) -> FeatureMap<f32> {
    FeatureMap::new(Array3::from_shape_fn((channels, SIZE, SIZE), |_| {
        rng.gen_range(0.0..1.0)
    }))
}

fn dataset(seed: u64, n: usize) -> Vec<PairedSample<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let image = random_map(&mut rng, 3);
            let intensity = random_map(&mut rng, 1);
            let mask = FeatureMap::new(Array3::from_shape_fn((1, SIZE, SIZE), |(_, y, _)| {
                if y % 2 == 0 {
                    1.0
                } else {
                    0.0
                }
            }));
            PairedSample {
                id: format!("s{i}"),
                image,
                lidar: LidarMap::new(intensity, mask).unwrap(),
            }
        })
        .collect()
}

fn pool(seed: u64, n: usize) -> Vec<FeatureMap<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_map(&mut rng, 3)).collect()
}

fn small_config(max_iters: u64) -> TrainConfig {
    TrainConfig {
        max_iters,
        checkpoint_every: 100,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn snapshot(state: &TrainState<f32>) -> BTreeMap<String, ArrayD<f32>> {
    let store = &state.model.store;
    store
        .ids()
        .map(|id| (store.name(id).to_string(), store.value(id).clone()))
        .collect()
}

fn report_bits(r: &liet::losses::LossReport) -> Vec<u64> {
    [
        r.adv_d, r.adv_g, r.img, r.sty, r.cnt, r.kld, r.vgg, r.phy, r.aa, r.smooth, r.total,
    ]
    .iter()
    .map(|v| v.to_bits())
    .collect()
}

#[test]
fn ten_step_loss_stream_is_bitwise_deterministic() {
    let data = dataset(1, 3);
    let albedo = pool(2, 2);
    let shade = pool(3, 2);
    let run = || {
        let mut state = TrainState::<f32>::new(NetConfig::default(), small_config(10)).unwrap();
        fit(&mut state, &data, &albedo, &shade, None).unwrap().reports
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), 10);
    for (ra, rb) in a.iter().zip(&b) {
        assert_eq!(ra.iter, rb.iter);
        assert_eq!(report_bits(ra), report_bits(rb), "iter {}", ra.iter);
    }
}

#[test]
fn one_step_updates_every_trainable_component_and_freezes_the_extractor() {
    let mut state = TrainState::<f32>::new(NetConfig::default(), small_config(1)).unwrap();
    let data = dataset(4, 2);
    let albedo = pool(5, 2);
    let shade = pool(6, 2);
    let before = snapshot(&state);
    train_step(&mut state, &data, &albedo, &shade).unwrap();
    let after = snapshot(&state);

    let families = [
        "style_enc.i.",
        "style_enc.l.",
        "style_enc.r.",
        "style_enc.s.",
        "content_enc.i.",
        "content_enc.l.",
        "content_enc.r.",
        "content_enc.s.",
        "gen.i.",
        "gen.l.",
        "gen.r.",
        "gen.s.",
        "disc.i.",
        "disc.l.",
        "disc.r.",
        "disc.s.",
        "mapper.image.",
        "mapper.lidar.",
    ];
    for family in families {
        let moved = before
            .iter()
            .filter(|(name, _)| name.starts_with(family))
            .any(|(name, old)| old != &after[name]);
        assert!(moved, "no parameter in `{family}` was updated");
    }
    for (name, old) in &before {
        if name.starts_with("extractor.") {
            assert_eq!(old, &after[name], "frozen `{name}` moved");
        }
    }
}

#[test]
fn disabling_cross_translation_freezes_its_discriminators() {
    let mut config = small_config(1);
    config.no_ilc = true;
    let mut state = TrainState::<f32>::new(NetConfig::default(), config).unwrap();
    let data = dataset(7, 2);
    let albedo = pool(8, 2);
    let shade = pool(9, 2);
    let before = snapshot(&state);
    train_step(&mut state, &data, &albedo, &shade).unwrap();
    let after = snapshot(&state);

    for (name, old) in &before {
        if name.starts_with("disc.l.") || name.starts_with("disc.i.") {
            assert_eq!(old, &after[name], "`{name}` should be untouched without ILC");
        }
    }
    for family in ["disc.r.", "disc.s.", "gen.r.", "mapper.image."] {
        let moved = before
            .iter()
            .filter(|(name, _)| name.starts_with(family))
            .any(|(name, old)| old != &after[name]);
        assert!(moved, "`{family}` should still train without ILC");
    }
}

#[test]
fn discriminator_phase_gradients_stay_inside_the_discriminators() {
    let state = TrainState::<f32>::new(NetConfig::default(), small_config(1)).unwrap();
    let data = dataset(10, 2);
    let albedo = pool(11, 2);
    let shade = pool(12, 2);
    let mut tape = Tape::new();
    let bundle = training_forward(
        &state.model,
        &mut tape,
        &data,
        &albedo,
        &shade,
        state.config.ablations(),
    )
    .unwrap();
    let d_loss = discriminator_loss(&state.model, &mut tape, &bundle);
    let grads = tape.backward(d_loss);
    let by_param = tape.param_grads(&grads);
    assert!(!by_param.is_empty());
    for id in by_param.keys() {
        let name = state.model.store.name(*id);
        assert!(
            name.starts_with("disc."),
            "`{name}` received gradient in the discriminator phase"
        );
    }
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::<f32>::new(NetConfig::default(), small_config(3)).unwrap();
    let data = dataset(13, 3);
    let albedo = pool(14, 2);
    let shade = pool(15, 2);
    fit(&mut state, &data, &albedo, &shade, None).unwrap();

    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    save_checkpoint(&state, &first).unwrap();
    let restored = load_checkpoint::<f32>(&first).unwrap();
    save_checkpoint(&restored, &second).unwrap();

    let a = std::fs::read(&first).unwrap();
    let b = std::fs::read(&second).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "save -> load -> save changed bytes");
    assert_eq!(restored.iter, 3);
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_loss_stream() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(16, 3);
    let albedo = pool(17, 2);
    let shade = pool(18, 2);

    let mut straight = TrainState::<f32>::new(NetConfig::default(), small_config(6)).unwrap();
    let full = fit(&mut straight, &data, &albedo, &shade, None).unwrap().reports;

    let mut first_half = TrainState::<f32>::new(NetConfig::default(), small_config(3)).unwrap();
    let mut reports = fit(&mut first_half, &data, &albedo, &shade, None).unwrap().reports;
    let ckpt = dir.path().join("half.ckpt");
    save_checkpoint(&first_half, &ckpt).unwrap();

    let mut resumed = load_checkpoint::<f32>(&ckpt).unwrap();
    resumed.config.max_iters = 6;
    reports.extend(fit(&mut resumed, &data, &albedo, &shade, None).unwrap().reports);

    assert_eq!(full.len(), 6);
    assert_eq!(reports.len(), 6);
    for (ra, rb) in full.iter().zip(&reports) {
        assert_eq!(ra.iter, rb.iter);
        assert_eq!(
            report_bits(ra),
            report_bits(rb),
            "resume diverged at iter {}",
            ra.iter
        );
    }
}

#[test]
fn checkpoint_cadence_and_log_follow_the_run_directory_contract() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(5);
    config.checkpoint_every = 2;
    let mut state = TrainState::<f32>::new(NetConfig::default(), config).unwrap();
    let data = dataset(19, 3);
    let albedo = pool(20, 2);
    let shade = pool(21, 2);
    let out = fit(&mut state, &data, &albedo, &shade, Some(dir.path())).unwrap();

    // ceil(5 / 2) = 3 checkpoints: iterations 2, 4 and the final 5.
    let names: Vec<String> = out
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(
        names,
        [
            "checkpoint_000002.ckpt",
            "checkpoint_000004.ckpt",
            "checkpoint_000005.ckpt"
        ]
    );
    for p in &out.checkpoints {
        assert!(p.exists());
    }

    let log = std::fs::read_to_string(dir.path().join("train_log.ndjson")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 5);
    let keys = [
        "\"iter\"", "\"adv_d\"", "\"adv_g\"", "\"img\"", "\"sty\"", "\"cnt\"", "\"kld\"",
        "\"vgg\"", "\"phy\"", "\"aa\"", "\"smooth\"", "\"total\"",
    ];
    for line in &lines {
        let positions: Vec<usize> = keys
            .iter()
            .map(|k| line.find(k).unwrap_or_else(|| panic!("missing {k}")))
            .collect();
        assert!(
            positions.windows(2).all(|w| w[0] < w[1]),
            "log keys out of order: {line}"
        );
    }
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first["iter"], 1);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::<f32>::new(NetConfig::default(), small_config(1)).unwrap();
    let data = dataset(22, 2);
    fit(&mut state, &data, &pool(23, 2), &pool(24, 2), None).unwrap();
    let path = dir.path().join("good.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let expect_err = |bytes: Vec<u8>, needle: &str| {
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, bytes).unwrap();
        let err = match load_checkpoint::<f32>(&bad) {
            Err(e) => e,
            Ok(_) => panic!("loaded a damaged checkpoint"),
        };
        match err {
            Error::Checkpoint(msg) => {
                assert!(msg.contains(needle), "`{msg}` lacks `{needle}`")
            }
            other => panic!("expected checkpoint error, got {other}"),
        }
    };

    let mut wrong_magic = good.clone();
    wrong_magic[0] = b'X';
    expect_err(wrong_magic, "magic");

    let mut wrong_version = good.clone();
    wrong_version[4] = 99;
    expect_err(wrong_version, "version");

    expect_err(good[..good.len() / 2].to_vec(), "truncated");

    let mut trailing = good.clone();
    trailing.extend_from_slice(b"junk");
    expect_err(trailing, "trailing");
}

#[test]
fn non_finite_loss_aborts_and_names_the_term() {
    let mut state = TrainState::<f32>::new(NetConfig::default(), small_config(1)).unwrap();
    let poisoned: Vec<_> = state
        .model
        .store
        .ids()
        .filter(|&id| state.model.store.name(id).starts_with("gen.r."))
        .collect();
    assert!(!poisoned.is_empty());
    for id in poisoned {
        state.model.store.value_mut(id).fill(f32::NAN);
    }
    let data = dataset(25, 2);
    let err = train_step(&mut state, &data, &pool(26, 2), &pool(27, 2)).unwrap_err();
    match err {
        Error::NonFiniteLoss { term, iter } => {
            assert_eq!(term, "adv_d");
            assert_eq!(iter, 1);
        }
        other => panic!("expected non-finite abort, got {other}"),
    }
    // The failed step must not count as completed.
    assert_eq!(state.iter, 0);
}

#[test]
fn fit_rejects_empty_inputs() {
    let mut state = TrainState::<f32>::new(NetConfig::default(), small_config(1)).unwrap();
    let data = dataset(28, 2);
    let err = fit(&mut state, &[], &pool(29, 2), &pool(30, 2), None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = fit(&mut state, &data, &[], &pool(31, 2), None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
