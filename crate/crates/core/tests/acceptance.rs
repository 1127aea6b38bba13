//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test -p scanet-core --test acceptance`. The process exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scanet::bench::{forward_checked, mask_agreement, prepare_store, BenchPrecision};
use scanet::data::{patch_cloud_counts, swpt_extract, synth_generate, PatchLabel, Sample, PATCH_GRID};
use scanet::model::{param_count, Scam, Scanet, ScanetConfig};
use scanet::nn::{ParamStore, Session};
use scanet::objective::{
    bce_loss, confusion_from_masks, f_measure_curve, iou_loss, metrics_from_counts, pr_curve, total_loss, write_f_csv,
    write_pr_csv, LossWeights,
};
use scanet::tensor::{finite_diff_report, BatchNormParams, ConvParams, Shape, Tape, Tensor, Var};
use scanet::train::{
    adam_update, decode_checkpoint as decode, encode_checkpoint as encode, evaluate, load_checkpoint, lr_at, save_checkpoint, train, AdamConfig, AdamState,
    Checkpoint, Moments, TrainConfig, TrainData, FINAL_CHECKPOINT, HISTORY_FILE,
};

const GRAD_STEP: f32 = 1e-3;
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
// the criterion is stated against this rounded value
#[allow(clippy::approx_constant)]
const BCE_HALF: f64 = 0.693147;
const LN2_TOL: f64 = 1e-5;
const IOU_TOL: f64 = 1e-6;
const TOTAL_LOSS_TOL: f64 = 1e-6;
const METRIC_TOL: f64 = 1e-9;
const DESK_ACCURACY: f64 = 0.95;
const DESK_MIOU: f64 = 0.85;
const PARAM_BUDGET: usize = 120_000;
const ADAM_TOL: f64 = 1e-10;
const FP16_AGREEMENT: f64 = 0.99;
const CURVE_TOL: f64 = 1e-9;
// the curve files carry 6 decimals; 2PR/(P+R) has slope at most 2 in each
// argument, so recomputing from the rounded columns moves it by < 2 * 5e-7
// and the rounded F column adds another 5e-7
const CURVE_FILE_TOL: f64 = 1.5e-6 + 1e-12;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

// ---------------------------------------------------------------- gradients

fn check_grad(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> scanet::Result<Var>) -> Result<String, String> {
    let r = finite_diff_report(f, inputs, GRAD_STEP).map_err(err)?;
    ensure(r.checked > 0 && r.skipped * 10 <= r.checked + r.skipped, || format!("{name}: too few coordinates checked {r:?}"))?;
    ensure(r.max_rel_error < GRAD_TOL, || format!("{name}: max rel error {:.3e}", r.max_rel_error))?;
    Ok(format!("{name} {:.1e}", r.max_rel_error))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(Shape::new(2, 4, 8, 8), &mut rng, -1.0, 1.0);
    let y = rand_tensor(Shape::new(2, 4, 8, 8), &mut rng, -1.0, 1.0);
    let mask1 = rand_tensor(Shape::new(2, 1, 8, 8), &mut rng, -1.0, 1.0);
    let w3 = rand_tensor(Shape::new(4, 4, 3, 3), &mut rng, -0.5, 0.5);
    let wg = rand_tensor(Shape::new(4, 2, 3, 3), &mut rng, -0.5, 0.5);
    let wd = rand_tensor(Shape::new(4, 1, 3, 3), &mut rng, -0.5, 0.5);
    let b4 = rand_tensor(Shape::new(1, 4, 1, 1), &mut rng, -0.5, 0.5);
    let small = rand_tensor(Shape::new(2, 4, 4, 4), &mut rng, -1.0, 1.0);
    let prob = rand_tensor(Shape::new(2, 1, 8, 8), &mut rng, 0.05, 0.95);
    let target = Tensor::from_fn(Shape::new(2, 1, 8, 8), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let fc_w = rand_tensor(Shape::new(3, 4, 1, 1), &mut rng, -1.0, 1.0);
    let fc_b = rand_tensor(Shape::new(1, 3, 1, 1), &mut rng, -1.0, 1.0);
    let gamma = rand_tensor(Shape::new(1, 4, 1, 1), &mut rng, 0.5, 1.5);
    let beta = rand_tensor(Shape::new(1, 4, 1, 1), &mut rng, -0.5, 0.5);
    let x1 = x.clone();

    let mut lines = vec![
        check_grad("conv", &[x.clone(), w3.clone(), b4.clone()], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), ConvParams::new(1, 1, 1))
        })?,
        check_grad("conv_strided", &[x.clone(), w3], |t, v| t.conv2d(v[0], v[1], None, ConvParams::new(2, 1, 1)))?,
        check_grad("conv_grouped", &[x.clone(), wg], |t, v| t.conv2d(v[0], v[1], None, ConvParams::new(1, 1, 2)))?,
        check_grad("conv_depthwise", &[x.clone(), wd], |t, v| t.conv2d(v[0], v[1], None, ConvParams::new(2, 1, 4)))?,
        check_grad("batch_norm", &[x.clone(), gamma, beta], |t, v| {
            let (mut rm, mut rv) = (vec![0.0f32; 4], vec![1.0f32; 4]);
            t.batch_norm(v[0], v[1], v[2], &mut rm, &mut rv, BatchNormParams::new(true))
        })?,
        check_grad("relu", std::slice::from_ref(&x), |t, v| Ok(t.relu(v[0])))?,
        check_grad("relu6", &[x.map(|v| v * 8.0)], |t, v| Ok(t.relu6(v[0])))?,
        check_grad("sigmoid", std::slice::from_ref(&x), |t, v| Ok(t.sigmoid(v[0])))?,
        check_grad("one_minus", std::slice::from_ref(&x), |t, v| Ok(t.one_minus(v[0])))?,
        check_grad("scale", std::slice::from_ref(&x), |t, v| Ok(t.scale(v[0], -2.5)))?,
        check_grad("upsample", &[small], |t, v| t.upsample_bilinear(v[0], 2))?,
        check_grad("add", &[x.clone(), y.clone()], |t, v| t.add(v[0], v[1]))?,
        check_grad("mul", &[x.clone(), y.clone()], |t, v| t.mul(v[0], v[1]))?,
        check_grad("mul_broadcast_channel", &[x.clone(), mask1], |t, v| t.mul(v[0], v[1]))?,
        check_grad("concat", &[x.clone(), y], |t, v| t.concat_channels(v[0], v[1]))?,
        check_grad("global_avg_pool", std::slice::from_ref(&x), |t, v| t.global_avg_pool(v[0]))?,
        check_grad("fully_connected", &[x.clone(), fc_w, fc_b], |t, v| {
            let g = t.global_avg_pool(v[0])?;
            t.fully_connected(g, v[1], v[2])
        })?,
        check_grad("sum", &[x1], |t, v| Ok(t.sum(v[0])))?,
        // targets are labels, not differentiated
        check_grad("bce", std::slice::from_ref(&prob), |t, v| {
            let y = t.constant(target.clone());
            bce_loss(t, v[0], y)
        })?,
        check_grad("iou", &[prob], |t, v| {
            let y = t.constant(target.clone());
            iou_loss(t, v[0], y)
        })?,
    ];
    lines.push(scam_gradient()?);
    let elapsed = start.elapsed();
    ensure(elapsed < GRAD_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{} checks in {:.1}s; {}", lines.len(), elapsed.as_secs_f64(), lines.join(", ")))
}

fn scam_gradient() -> Result<String, String> {
    let scam = Scam::new("scam", 4, 4, 3, 2).map_err(err)?;
    let mut store = ParamStore::new();
    scam.register(&mut store, &mut ChaCha8Rng::seed_from_u64(2)).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let names: Vec<String> = store.learnable().map(|(n, _)| n.to_string()).collect();
    for n in &names {
        // biases start at zero; random values make every term visible
        if n.ends_with(".bias") || n.ends_with(".beta") {
            store.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    let c = rand_tensor(Shape::new(2, 4, 4, 4), &mut rng, -1.0, 1.0);
    let sp = rand_tensor(Shape::new(2, 1, 4, 4), &mut rng, 0.1, 0.9);
    let mut inputs = vec![c, sp];
    inputs.extend(names.iter().map(|n| store.get(n).unwrap().clone()));
    check_grad(&format!("scam({} tensors)", inputs.len()), &inputs, |t, v| {
        let mut st = store.clone();
        let mut s = Session::new(&mut st, true);
        std::mem::swap(&mut s.tape, t);
        for (i, n) in names.iter().enumerate() {
            s.bind(n, v[i + 2]);
        }
        let out = scam.forward_traced(&mut s, v[0], v[1]).map(|tr| tr.s);
        std::mem::swap(&mut s.tape, t);
        out
    })
}

// ------------------------------------------------------------ SCAM structure

fn scam_identities() -> Outcome {
    let scam = Scam::new("scam", 6, 4, 5, 2).map_err(err)?;
    let mut store = ParamStore::new();
    scam.register(&mut store, &mut ChaCha8Rng::seed_from_u64(4)).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = rand_tensor(Shape::new(2, 6, 8, 8), &mut rng, -2.0, 2.0);
    let run = |fill: f32| -> Result<(Tensor, Tensor), String> {
        let mut st = store.clone();
        let mut s = Session::new(&mut st, false);
        let cv = s.input(c.clone());
        let sv = s.input(Tensor::full(Shape::new(2, 1, 8, 8), fill));
        let tr = scam.forward_traced(&mut s, cv, sv).map_err(err)?;
        Ok((s.value(tr.fg_input).clone(), s.value(tr.bg_input).clone()))
    };
    let (fg1, bg1) = run(1.0)?;
    ensure(bg1.data().iter().all(|&v| v == 0.0), || "s_prev = 1 leaves a nonzero background-conv input".into())?;
    ensure(fg1.data() == c.data(), || "s_prev = 1 changes the foreground-conv input".into())?;
    let (fg0, bg0) = run(0.0)?;
    ensure(fg0.data().iter().all(|&v| v == 0.0), || "s_prev = 0 leaves a nonzero foreground-conv input".into())?;
    ensure(bg0.data() == c.data(), || "s_prev = 0 changes the background-conv input".into())?;

    let size = 320;
    let (model, mut store) = Scanet::build(ScanetConfig::lite().with_input_size(size), 0).map_err(err)?;
    let mut s = Session::new(&mut store, false);
    let x = s.input(Tensor::zeros(Shape::new(1, 3, size, size)));
    let out = model.forward(&mut s, x).map_err(err)?;
    let sides = |vs: &[Var]| vs.iter().map(|&v| s.tape.shape(v)).map(|sh| (sh.c, sh.h, sh.w)).collect::<Vec<_>>();
    let (sv, mv) = (sides(&out.s), sides(&out.m));
    ensure(sv == [(1, 40, 40), (1, 80, 80), (1, 160, 160), (1, 320, 320)], || format!("prediction ladder {sv:?}"))?;
    ensure(mv.iter().map(|t| (t.1, t.2)).eq([(40, 40), (80, 80), (160, 160)]), || format!("mask ladder {mv:?}"))?;
    Ok(format!("exact zeros on both branches; at {size}: s {sv:?}, m {mv:?}"))
}

// ------------------------------------------------------------------- losses

fn scalar(t: &Tape, v: Var) -> f64 {
    t.value_f64(v)[0]
}

fn loss_correctness() -> Outcome {
    let sh = Shape::new(2, 1, 16, 16);
    let mut t = Tape::new();
    let half = t.constant(Tensor::full(sh, 0.5));
    let ones = t.constant(Tensor::ones(sh));
    let zeros = t.constant(Tensor::zeros(sh));
    let v = bce_loss(&mut t, half, ones).map_err(err)?;
    let bce = scalar(&t, v);
    ensure((bce - BCE_HALF).abs() <= LN2_TOL, || format!("bce(0.5, 1) = {bce}"))?;
    let v = iou_loss(&mut t, ones, ones).map_err(err)?;
    let perfect = scalar(&t, v);
    ensure(perfect.abs() <= IOU_TOL, || format!("iou perfect = {perfect}"))?;
    let v = iou_loss(&mut t, zeros, ones).map_err(err)?;
    let miss = scalar(&t, v);
    ensure((miss - 1.0).abs() <= IOU_TOL, || format!("iou total miss = {miss}"))?;

    // the mask is constant on 8x8 blocks, so every nearest resampling of it
    // to 8, 16, 32 or 64 pixels per side is unambiguous
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let blocks: Vec<f32> = (0..2 * 64).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let gt = Tensor::from_fn(Shape::new(2, 1, 64, 64), |i| {
        let (n, y, x) = (i / 4096, (i / 64) % 64, i % 64);
        blocks[n * 64 + (y / 8) * 8 + x / 8]
    });
    let sides = [8usize, 16, 32, 64];
    let preds: Vec<Tensor> = sides.iter().map(|&s| rand_tensor(Shape::new(2, 1, s, s), &mut rng, 0.01, 0.99)).collect();
    let weights = LossWeights { alpha: [0.25, 0.5, 1.0, 2.0] };
    let mut t = Tape::new();
    let pv: Vec<Var> = preds.iter().map(|p| t.constant(p.clone())).collect();
    let v = total_loss(&mut t, &[pv[0], pv[1], pv[2], pv[3]], &gt, &weights).map_err(err)?;
    let got = scalar(&t, v);

    let mut expect = 0.0f64;
    for ((p, &side), &a) in preds.iter().zip(&sides).zip(&weights.alpha) {
        let (mut b, mut i) = (0.0f64, 0.0f64);
        for (k, &pk) in p.data().iter().enumerate() {
            let (n, y, x) = (k / (side * side), (k / side) % side, k % side);
            let f = 64 / side;
            let yk = blocks[n * 64 + (y * f / 8) * 8 + x * f / 8] as f64;
            let pk = (pk as f64).clamp(1e-7, 1.0 - 1e-7);
            b -= yk * pk.ln() + (1.0 - yk) * (1.0 - pk).ln();
            i += yk * pk / (yk + pk - yk * pk + 1e-7);
        }
        let m = p.numel() as f64;
        expect += a as f64 * (b / m + 1.0 - i / m);
    }
    ensure((got - expect).abs() <= TOTAL_LOSS_TOL, || format!("total_loss {got} vs recomputed {expect}"))?;
    Ok(format!("bce {bce:.6}, iou perfect {perfect:.1e}, miss {miss:.6}, total {got:.6} vs {expect:.6}"))
}

// ------------------------------------------------------------------ metrics

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let mut counts = [0usize; 4];
        for c in counts.iter_mut() {
            *c = rng.gen_range(0..2000);
        }
        // every fifth table empties one cell so the 0/0 conventions are exercised
        if case % 5 == 0 {
            counts[case / 5 % 4] = 0;
        }
        let [tp, fp, fn_, tn] = counts;
        let mut pixels: Vec<(bool, bool)> = Vec::new();
        pixels.extend(std::iter::repeat_n((true, true), tp));
        pixels.extend(std::iter::repeat_n((true, false), fp));
        pixels.extend(std::iter::repeat_n((false, true), fn_));
        pixels.extend(std::iter::repeat_n((false, false), tn));
        if pixels.is_empty() {
            pixels.push((false, false));
        }
        pixels.shuffle(&mut rng);
        let n = pixels.len();
        let pred = Tensor::from_fn(Shape::new(1, 1, 1, n), |i| if pixels[i].0 { rng.gen_range(0.5..1.0) } else { rng.gen_range(0.0..0.5) });
        let gt = Tensor::from_fn(Shape::new(1, 1, 1, n), |i| if pixels[i].1 { 1.0 } else { 0.0 });

        // brute force over pixels, independent of the count path
        let count = |f: &dyn Fn(bool, bool) -> bool| pixels.iter().filter(|&&(p, g)| f(p, g)).count() as f64;
        let ratio = |a: f64, b: f64| if b == 0.0 { 1.0 } else { a / b };
        let inter = count(&|p, g| p && g);
        let accuracy = count(&|p, g| p == g) / n as f64;
        let error_rate = count(&|p, g| p != g) / n as f64;
        let precision = ratio(inter, count(&|p, _| p));
        let recall = ratio(inter, count(&|_, g| g));
        let f_score = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        let iou_cloud = ratio(inter, count(&|p, g| p || g));
        let iou_sky = ratio(count(&|p, g| !p && !g), count(&|p, g| !p || !g));
        let miou = (iou_cloud + iou_sky) / 2.0;

        let c = confusion_from_masks(&pred, &gt, 0.5).map_err(err)?;
        let m = metrics_from_counts(&c).map_err(err)?;
        for (name, got, want) in [
            ("accuracy", m.accuracy, accuracy),
            ("precision", m.precision, precision),
            ("recall", m.recall, recall),
            ("f_score", m.f_score, f_score),
            ("error_rate", m.error_rate, error_rate),
            ("miou", m.miou, miou),
        ] {
            let d = (got - want).abs();
            worst = worst.max(d);
            ensure(d <= METRIC_TOL, || format!("table {case} {c:?}: {name} {got} vs {want}"))?;
        }
        ensure(m.accuracy + m.error_rate == 1.0, || format!("table {case}: accuracy + error_rate != 1"))?;
    }
    Ok(format!("50 tables, max deviation {worst:.1e}, accuracy + error_rate == 1"))
}

// --------------------------------------------------------------------- SWPT

fn swpt_extractor() -> Outcome {
    // 80x80 masks give 20x20 tiles of 400 pixels, where 80 and 320 cloud
    // pixels sit exactly on the 0.2 and 0.8 rates
    let side = 80;
    let tile = side / PATCH_GRID;
    let targets = [0usize, 1, 79, 80, 81, 200, 319, 320, 321, 399, 400, 160, 240, 79, 321, 80];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cases: Vec<Vec<usize>> = vec![targets.to_vec()];
    for _ in 0..20 {
        cases.push((0..16).map(|_| rng.gen_range(0..=400)).collect());
    }
    let mut checked = 0;
    for counts in &cases {
        let mut mask = vec![0.0f32; side * side];
        for (k, &want) in counts.iter().enumerate() {
            let (ty, tx) = (k / PATCH_GRID, k % PATCH_GRID);
            let mut cells: Vec<usize> = (0..tile * tile).collect();
            cells.shuffle(&mut rng);
            for &cell in &cells[..want] {
                mask[(ty * tile + cell / tile) * side + tx * tile + cell % tile] = 1.0;
            }
        }
        let mask = Tensor::from_vec(Shape::new(1, 1, side, side), mask).map_err(err)?;
        let image = rand_tensor(Shape::new(1, 3, side, side), &mut rng, -0.5, 0.5);

        let tallies = patch_cloud_counts(&mask).map_err(err)?;
        let total: usize = tallies.iter().map(|t| t.0).sum();
        let mask_total = mask.data().iter().filter(|&&v| v == 1.0).count();
        ensure(total == mask_total, || format!("patch totals {total} vs mask {mask_total}"))?;
        ensure(tallies.iter().map(|t| t.0).eq(counts.iter().copied()), || format!("tallies {tallies:?} vs {counts:?}"))?;

        let patches = swpt_extract(&image, &mask).map_err(err)?;
        let mut seen = [None; 16];
        for p in &patches {
            seen[p.index] = Some(p.label);
            let (ty, tx) = (p.index / PATCH_GRID, p.index % PATCH_GRID);
            let same = (0..3 * tile * tile).all(|i| {
                let (c, y, x) = (i / (tile * tile), (i / tile) % tile, i % tile);
                p.patch.data()[i] == image.at(0, c, ty * tile + y, tx * tile + x)
            });
            ensure(same, || format!("patch {} pixels differ from the image tile", p.index))?;
        }
        for (k, &want) in counts.iter().enumerate() {
            let expect = if want > 320 {
                Some(PatchLabel::Positive)
            } else if want < 80 {
                Some(PatchLabel::Negative)
            } else {
                None
            };
            ensure(seen[k] == expect, || format!("tile {k} with {want}/400 cloud labelled {:?}", seen[k]))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} tiles over {} masks, boundary rates 0.2 and 0.8 ignored, totals conserved", cases.len()))
}

// ---------------------------------------------------------------- training

fn desk_config() -> TrainConfig {
    TrainConfig { epochs: 150, batch_size: 16, eval_every: 50, seed: 0, augment: false, ..Default::default() }
}

struct DeskRun {
    model: Scanet,
    store: ParamStore,
    train_set: Vec<Sample>,
    seconds: f64,
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let train_set = synth_generate(8, 64, 0).expect("synthetic set");
        let (model, mut store) = Scanet::build(ScanetConfig::lite().with_input_size(64), 0).expect("lite model");
        let data = TrainData { train: train_set.clone(), test: vec![] };
        train(&model, &mut store, &data, &desk_config(), None, |_| {}).expect("training");
        DeskRun { model, store, train_set, seconds: start.elapsed().as_secs_f64() }
    })
}

fn desk_scale_learning() -> Outcome {
    let run = desk_run();
    let mut store = run.store.clone();
    let m = evaluate(&run.model, &mut store, &run.train_set).map_err(err)?;
    ensure(m.accuracy >= DESK_ACCURACY && m.miou >= DESK_MIOU, || format!("accuracy {:.4}, miou {:.4}", m.accuracy, m.miou))?;
    Ok(format!("accuracy {:.4}, miou {:.4} after 150 epochs in {:.0}s", m.accuracy, m.miou, run.seconds))
}

fn parameter_budget() -> Outcome {
    let (_, store) = Scanet::build(ScanetConfig::lite(), 0).map_err(err)?;
    let n = param_count(&store);
    ensure(n <= PARAM_BUDGET, || format!("{n} parameters"))?;
    Ok(format!("{n} learnable parameters"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let samples = synth_generate(12, 32, 3).map_err(err)?;
    let data = TrainData { train: samples[..10].to_vec(), test: samples[10..].to_vec() };
    let cfg = TrainConfig { epochs: 6, batch_size: 4, eval_every: 2, seed: 9, ..Default::default() };
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let (model, mut store) = Scanet::build(ScanetConfig::lite().with_input_size(32), cfg.seed).map_err(err)?;
        train(&model, &mut store, &data, &cfg, Some(&out), |_| {}).map_err(err)?;
        let history = std::fs::read(out.join(HISTORY_FILE)).map_err(err)?;
        let ckpt = std::fs::read(out.join(FINAL_CHECKPOINT)).map_err(err)?;
        outputs.push((history, ckpt));
    }
    ensure(outputs[0].0 == outputs[1].0, || "history CSVs differ".into())?;
    ensure(outputs[0].1 == outputs[1].1, || "final checkpoints differ".into())?;
    Ok(format!("6-epoch runs with flips: history {} B and checkpoint {} B identical", outputs[0].0.len(), outputs[0].1.len()))
}

fn adam_oracle() -> Outcome {
    let cfg = AdamConfig::default();
    let (lr, g, theta0) = (1e-3f64, 0.3f64, 0.7f64);
    let (mut th, mut m, mut v) = ([theta0], [0.0f64], [0.0f64]);
    // reference iteration with its own moment bookkeeping
    let (mut rt, mut rm, mut rv) = (theta0, 0.0f64, 0.0f64);
    let mut worst = 0.0f64;
    for t in 1..=3u64 {
        adam_update(&mut th, &[g], &mut m, &mut v, t, lr, &cfg);
        rm = 0.9 * rm + 0.1 * g;
        rv = 0.999 * rv + 0.001 * g * g;
        let mh = rm / (1.0 - 0.9f64.powf(t as f64));
        let vh = rv / (1.0 - 0.999f64.powf(t as f64));
        rt -= lr * mh / (vh.sqrt() + 1e-8);
        worst = worst.max((th[0] - rt).abs());
    }
    ensure(worst <= ADAM_TOL, || format!("trajectory deviates by {worst:e}"))?;
    let lr1 = lr_at(1, &TrainConfig::default());
    ensure((lr1 - 9.5e-4).abs() < 1e-15, || format!("lr_at(1) = {lr1}"))?;
    Ok(format!("3-step deviation {worst:.1e}, theta_3 = {:.9}, lr_at(1) = {lr1}", th[0]))
}

fn fp16_emulation() -> Outcome {
    let run = desk_run();
    let images = synth_generate(16, 64, 100).map_err(err)?;
    let mut st32 = prepare_store(&run.store, BenchPrecision::Fp32);
    let mut st16 = prepare_store(&run.store, BenchPrecision::Fp16);
    let mut agree = 0.0;
    for s in &images {
        let (a, ok32) = forward_checked(&run.model, &mut st32, &s.image, BenchPrecision::Fp32).map_err(err)?;
        let (b, ok16) = forward_checked(&run.model, &mut st16, &s.image, BenchPrecision::Fp16).map_err(err)?;
        ensure(ok32 && ok16, || format!("non-finite activation on image {}", s.id))?;
        agree += mask_agreement(&a, &b).map_err(err)?;
    }
    let agree = agree / images.len() as f64;
    ensure(agree >= FP16_AGREEMENT, || format!("agreement {agree:.5}"))?;
    Ok(format!("{:.3}% of pixels agree over 16 images, every activation finite", agree * 100.0))
}

fn checkpoint_round_trip() -> Outcome {
    let (model, mut store) = Scanet::build(ScanetConfig::lite().with_input_size(64), 5).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut adam = AdamState::new();
    adam.t = 7;
    for (name, t, _) in store.iter_mut() {
        // include values that only survive a bit-exact encoding
        t.data_mut().iter_mut().for_each(|v| *v = f32::from_bits(rng.gen_range(0..0x7f00_0000)) * if rng.gen() { -1.0 } else { 1.0 });
        let n = t.numel();
        adam.moments.insert(name.to_string(), Moments { m: (0..n).map(|_| rng.gen()).collect(), v: (0..n).map(|_| rng.gen()).collect() });
    }
    let ck = Checkpoint::from_store(&store, Some(&model.config), 3, Some(&adam));
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("c.sckp");
    save_checkpoint(&path, &ck).map_err(err)?;
    let back = load_checkpoint(&path).map_err(err)?;
    let loaded = back.to_store().map_err(err)?;
    ensure(loaded.len() == store.len(), || format!("{} of {} tensors", loaded.len(), store.len()))?;
    for (name, t, kind) in store.iter() {
        let u = loaded.get(name).map_err(err)?;
        let same = t.shape() == u.shape() && t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same && loaded.kind(name) == Some(kind), || format!("{name} changed"))?;
    }
    let opt = back.optimizer.as_ref().ok_or("optimizer state lost")?;
    ensure(opt == &adam, || "optimizer state changed".into())?;
    let bytes = std::fs::read(&path).map_err(err)?;
    ensure(encode(&back).map_err(err)? == bytes, || "re-encoding differs".into())?;

    let mut rejected = 0;
    for (what, corrupt) in [
        ("magic", { let mut b = bytes.clone(); b[0] ^= 0x20; b }),
        ("version", { let mut b = bytes.clone(); b[4] = 2; b }),
        ("count", { let mut b = bytes.clone(); b[8] = b[8].wrapping_add(1); b }),
        ("truncated", bytes[..bytes.len() - 1].to_vec()),
        ("short header", bytes[..6].to_vec()),
    ] {
        ensure(decode(&corrupt).is_err(), || format!("corrupted {what} accepted"))?;
        rejected += 1;
    }
    Ok(format!("{} tensors bit-identical, {rejected} corruptions rejected", store.len()))
}

fn curves() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gts: Vec<Tensor> = (0..6)
        .map(|_| Tensor::from_fn(Shape::new(1, 1, 32, 32), |_| if rng.gen_bool(0.45) { 1.0 } else { 0.0 }))
        .collect();
    // noisy scores correlated with the truth
    let preds: Vec<Tensor> = gts
        .iter()
        .map(|g| Tensor::from_fn(g.shape(), |i| (0.3 + 0.4 * g.data()[i] + rng.gen_range(-0.35f32..0.35)).clamp(0.0, 1.0)))
        .collect();
    let pr = pr_curve(&preds, &gts, 256).map_err(err)?;
    let f = f_measure_curve(&preds, &gts, 256).map_err(err)?;
    ensure(pr.len() == 256 && f.len() == 256, || format!("{} and {} points", pr.len(), f.len()))?;
    ensure(pr.windows(2).all(|w| w[1].recall <= w[0].recall), || "recall increases".into())?;
    let mut worst = 0.0f64;
    for (a, b) in pr.iter().zip(&f) {
        ensure(a.threshold == b.threshold, || "thresholds differ".into())?;
        let expect = if a.precision + a.recall > 0.0 { 2.0 * a.precision * a.recall / (a.precision + a.recall) } else { 0.0 };
        worst = worst.max((expect - b.f_score).abs());
    }
    ensure(worst <= CURVE_TOL, || format!("F deviates from 2PR/(P+R) by {worst:e}"))?;

    let dir = tempfile::tempdir().map_err(err)?;
    let (pp, fp) = (dir.path().join("pr.csv"), dir.path().join("f.csv"));
    write_pr_csv(&pp, &pr).map_err(err)?;
    write_f_csv(&fp, &f).map_err(err)?;
    let rows = |p: &std::path::Path| -> Vec<Vec<f64>> {
        std::fs::read_to_string(p).unwrap().lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
    };
    let (prr, fr) = (rows(&pp), rows(&fp));
    ensure(prr.windows(2).all(|w| w[1][2] <= w[0][2]), || "recall column increases in the CSV".into())?;
    let mut file_worst = 0.0f64;
    for (a, b) in prr.iter().zip(&fr) {
        let expect = if a[1] + a[2] > 0.0 { 2.0 * a[1] * a[2] / (a[1] + a[2]) } else { 0.0 };
        file_worst = file_worst.max((expect - b[1]).abs());
    }
    ensure(file_worst <= CURVE_FILE_TOL, || format!("CSV F deviates by {file_worst:e}"))?;
    Ok(format!("recall non-increasing; F vs 2PR/(P+R) {worst:.1e} on values, {file_worst:.1e} from 6-decimal CSVs"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient correctness", gradient_correctness),
        ("SCAM structural identities", scam_identities),
        ("loss correctness", loss_correctness),
        ("metric oracle", metric_oracle),
        ("SWPT extractor", swpt_extractor),
        ("desk-scale learning", desk_scale_learning),
        ("parameter budget", parameter_budget),
        ("determinism", determinism),
        ("Adam oracle", adam_oracle),
        ("FP16 emulation", fp16_emulation),
        ("checkpoint round trip", checkpoint_round_trip),
        ("curves", curves),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

