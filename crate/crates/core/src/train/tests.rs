use super::*;
use crate::data::synth_generate;

fn lite64() -> ScanetConfig {
    ScanetConfig::lite().with_input_size(64)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 2, eval_every: 1, seed: 11, ..Default::default() }
}

#[test]
fn schedule_values() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 1e-3);
    assert!((lr_at(1, &cfg) - 9.5e-4).abs() < 1e-18);
    let expect = 1e-3 * (100.0 * 0.95f64.ln()).exp();
    assert!((lr_at(100, &cfg) - expect).abs() < 1e-15 && (lr_at(100, &cfg) - 5.92e-6).abs() < 1e-8);
    assert!((0..200).all(|e| lr_at(e + 1, &cfg) < lr_at(e, &cfg)));
}

#[test]
fn scalar_adam_matches_hand_iteration() {
    let cfg = AdamConfig::default();
    let (mut th, mut m, mut v) = ([0.0f64], [0.0f64], [0.0f64]);
    // written out: m_t = 1 - 0.9^t, v_t = 1 - 0.999^t, so m_hat = v_hat = 1
    let mut reference = 0.0f64;
    for t in 1..=3u64 {
        adam_update(&mut th, &[1.0], &mut m, &mut v, t, 1e-3, &cfg);
        let m_t = 1.0 - 0.9f64.powi(t as i32);
        let v_t = 1.0 - 0.999f64.powi(t as i32);
        reference -= 1e-3 * (m_t / (1.0 - 0.9f64.powi(t as i32))) / ((v_t / (1.0 - 0.999f64.powi(t as i32))).sqrt() + 1e-8);
        assert!((th[0] - reference).abs() < 1e-10);
    }
}

#[test]
fn config_validation_and_json() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { eval_every: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { lr0: -1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { alpha: [0.0; 4], ..Default::default() }.validate().is_err());
    let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "seed": 5}"#).unwrap();
    assert_eq!((cfg.epochs, cfg.seed, cfg.batch_size), (3, 5, 16));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
}

#[test]
fn one_epoch_smoke_writes_artifacts() {
    let samples = synth_generate(2, 64, 1).unwrap();
    let data = TrainData { train: samples, test: vec![] };
    let (model, mut store) = Scanet::build(lite64(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut seen = 0;
    let h = train(&model, &mut store, &data, &quick(1), Some(dir.path()), |_| seen += 1).unwrap();
    assert_eq!((seen, h.records.len()), (1, 1));
    assert!(h.records[0].loss.is_finite());
    assert!(h.records[0].eval.is_some());
    let csv = std::fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(csv.lines().next().unwrap(), HISTORY_HEADER);
    for f in [BEST_CHECKPOINT, FINAL_CHECKPOINT] {
        let ck = load_checkpoint(&dir.path().join(f)).unwrap();
        let (_, mut fresh) = model_from_checkpoint(&ck).unwrap();
        assert_eq!(fresh.get("scam4.out.weight").unwrap().data(), store.get("scam4.out.weight").unwrap().data());
        let _ = fresh.get_mut("backbone.stem.bn.gamma").unwrap();
    }
    // learnable tensors all received a step, and gradients are zeroed afterwards
    let (_, init) = Scanet::build(lite64(), 0).unwrap();
    for (name, t) in store.learnable() {
        assert_ne!(t.data(), init.get(name).unwrap().data(), "{name} did not move");
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
    }
}

#[test]
fn eval_cadence_follows_config() {
    let data = TrainData { train: synth_generate(2, 32, 4).unwrap(), test: vec![] };
    let (model, mut store) = Scanet::build(ScanetConfig::lite().with_input_size(32), 0).unwrap();
    let cfg = TrainConfig { epochs: 7, eval_every: 3, batch_size: 4, ..quick(7) };
    let h = train(&model, &mut store, &data, &cfg, None, |_| {}).unwrap();
    let evals: Vec<usize> = h.records.iter().filter(|r| r.eval.is_some()).map(|r| r.epoch).collect();
    assert_eq!(evals, vec![3, 6, 7]);
    assert!(h.records.iter().all(|r| r.lr == lr_at(r.epoch - 1, &cfg)));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = TrainData { train: synth_generate(3, 32, 2).unwrap(), test: synth_generate(1, 32, 3).unwrap() };
    let run = |dir: &Path| {
        let (model, mut store) = Scanet::build(ScanetConfig::lite().with_input_size(32), 5).unwrap();
        train(&model, &mut store, &data, &quick(3), Some(dir), |_| {}).unwrap();
        (
            std::fs::read(dir.join(HISTORY_FILE)).unwrap(),
            std::fs::read(dir.join(FINAL_CHECKPOINT)).unwrap(),
        )
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn nan_loss_aborts_with_context() {
    let data = TrainData { train: synth_generate(4, 32, 2).unwrap(), test: vec![] };
    let (model, mut store) = Scanet::build(ScanetConfig::lite().with_input_size(32), 5).unwrap();
    store.get_mut("scam4.head.bias").unwrap().data_mut()[0] = f32::NAN;
    let err = train(&model, &mut store, &data, &quick(2), None, |_| {}).unwrap_err();
    assert!(matches!(err, ScanetError::Diverged { epoch: 1, batch: 1 }), "{err}");
    let empty = TrainData::default();
    assert!(train(&model, &mut store, &empty, &quick(1), None, |_| {}).is_err());
}

fn toy_patches(n: usize) -> Vec<PatchSample> {
    (0..n)
        .map(|i| {
            let bright = i % 2 == 0;
            let level = if bright { 0.4 } else { -0.4 };
            let wobble = (i as f32 * 0.37).sin() * 0.05;
            PatchSample {
                patch: Tensor::full(Shape::new(1, 3, 16, 16), level + wobble),
                label: if bright { PatchLabel::Positive } else { PatchLabel::Negative },
                rate: if bright { 1.0 } else { 0.0 },
                index: i % 16,
            }
        })
        .collect()
}

#[test]
fn pretraining_separates_bright_and_dark() {
    let (model, mut store) = Scanet::build(lite64(), 1).unwrap();
    let before: Vec<(String, Shape)> = store.iter().map(|(n, t, _)| (n.to_string(), t.shape())).collect();
    let init_stem = store.get("backbone.stem.weight").unwrap().clone();
    let init_head = store.get("scam4.head.weight").unwrap().clone();
    let cfg = PretrainConfig { epochs: 50, batch_size: 8, ..Default::default() };
    let report = pretrain_swpt(&model, &mut store, &toy_patches(16), &cfg).unwrap();
    assert!(report.accuracy >= 0.95, "{report:?}");
    assert!(report.output_range.0 > 0.0 && report.output_range.1 < 1.0);
    assert_eq!((report.positives, report.negatives), (8, 8));
    let after: Vec<(String, Shape)> = store.iter().map(|(n, t, _)| (n.to_string(), t.shape())).collect();
    assert_eq!(before, after);
    assert!(!store.contains(HEAD_WEIGHT));
    assert_ne!(store.get("backbone.stem.weight").unwrap(), &init_stem);
    assert_eq!(store.get("scam4.head.weight").unwrap(), &init_head);
}

#[test]
fn pretraining_rejects_single_class() {
    let (model, mut store) = Scanet::build(lite64(), 1).unwrap();
    let only_pos: Vec<PatchSample> = toy_patches(8).into_iter().filter(|p| p.label == PatchLabel::Positive).collect();
    let err = pretrain_swpt(&model, &mut store, &only_pos, &PretrainConfig::default()).unwrap_err();
    assert!(err.to_string().contains("single class"));
}
