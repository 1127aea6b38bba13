//! FLOP counting and single-image latency measurement.
//!
//! FLOP convention: one multiply-accumulate is 2 FLOPs. Convolution bias,
//! elementwise ops and reductions add one per element, batch norm two,
//! bilinear upsampling six per output element.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Result, ScanetError};
use crate::model::{Scanet, ScanetConfig};
use crate::nn::{ParamStore, Session};
use crate::tensor::{Precision, Shape, Tensor};

pub const FLOP_CONVENTION: &str = "1 MAC = 2 FLOPs; bias/elementwise 1, batch norm 2, bilinear upsample 6 per element";

/// FLOPs of one inference forward pass of a single image at the configured size.
pub fn count_flops(config: &ScanetConfig) -> Result<u64> {
    let (model, mut store) = Scanet::build(config.clone(), 0)?;
    let size = config.input_size;
    let mut s = Session::new(&mut store, false);
    let x = s.input(Tensor::zeros(Shape::new(1, 3, size, size)));
    model.forward(&mut s, x)?;
    Ok(s.tape.flops())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchPrecision {
    Fp32,
    /// Weights and every op output rounded through binary16.
    Fp16,
}

impl BenchPrecision {
    pub fn label(self) -> &'static str {
        match self {
            BenchPrecision::Fp32 => "fp32",
            BenchPrecision::Fp16 => "fp16-emulated",
        }
    }

    pub fn tape_precision(self) -> Precision {
        match self {
            BenchPrecision::Fp32 => Precision::F32,
            BenchPrecision::Fp16 => Precision::F16,
        }
    }
}

impl std::str::FromStr for BenchPrecision {
    type Err = ScanetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(BenchPrecision::Fp32),
            "fp16" => Ok(BenchPrecision::Fp16),
            other => Err(ScanetError::invalid(format!("unknown precision `{other}` (expected fp32 or fp16)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub variant: String,
    pub precision: &'static str,
    pub input_size: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub throughput: f64,
    pub flops: u64,
    pub flop_convention: &'static str,
}

impl BenchReport {
    pub fn csv_header() -> &'static str {
        "variant,precision,input_size,iterations,warmup,mean_ms,p50_ms,p95_ms,throughput_img_s,flops"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.3},{}",
            self.variant,
            self.precision,
            self.input_size,
            self.iterations,
            self.warmup,
            self.mean_ms,
            self.p50_ms,
            self.p95_ms,
            self.throughput,
            self.flops
        )
    }
}

/// Nearest-rank percentile of sorted values, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Store prepared for a precision mode: fp16 rounds every weight once.
pub fn prepare_store(store: &ParamStore, precision: BenchPrecision) -> ParamStore {
    let mut out = store.clone();
    if precision == BenchPrecision::Fp16 {
        out.cast_f16();
    }
    out
}

/// Final probability map plus whether every recorded value was finite.
pub fn forward_checked(model: &Scanet, store: &mut ParamStore, image: &Tensor, precision: BenchPrecision) -> Result<(Tensor, bool)> {
    let mut s = match precision {
        BenchPrecision::Fp32 => Session::new(store, false),
        BenchPrecision::Fp16 => Session::fp16(store),
    };
    let x = s.input(image.clone());
    let out = model.forward(&mut s, x)?;
    let finite = s.tape.vars().all(|v| s.tape.value(v).all_finite());
    Ok((s.value(out.s[3]).clone(), finite))
}

/// Random image in `[-0.5, 0.5]` at the model input size.
pub fn random_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(1, 3, size, size), |_| rng.gen_range(-0.5..0.5))
}

/// Times `iters` single-image forward passes after `warmup` untimed ones, on
/// a one-thread pool. The clock covers the forward call only.
pub fn run_bench(model: &Scanet, store: &ParamStore, precision: BenchPrecision, iters: usize, warmup: usize) -> Result<BenchReport> {
    if iters == 0 {
        return Err(ScanetError::invalid("iterations must be at least 1"));
    }
    let mut store = prepare_store(store, precision);
    let size = model.config.input_size;
    let image = random_image(size, 0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| ScanetError::invalid(format!("cannot build bench thread pool: {e}")))?;
    let mut times = pool.install(|| -> Result<Vec<f64>> {
        let run = |store: &mut ParamStore| -> Result<f64> {
            let start = Instant::now();
            let mut s = match precision {
                BenchPrecision::Fp32 => Session::new(store, false),
                BenchPrecision::Fp16 => Session::fp16(store),
            };
            let x = s.input(image.clone());
            std::hint::black_box(model.forward(&mut s, x)?);
            Ok(start.elapsed().as_secs_f64() * 1e3)
        };
        for _ in 0..warmup {
            run(&mut store)?;
        }
        (0..iters).map(|_| run(&mut store)).collect()
    })?;
    let mean = times.iter().sum::<f64>() / iters as f64;
    times.sort_by(f64::total_cmp);
    Ok(BenchReport {
        variant: model.config.variant.clone(),
        precision: precision.label(),
        input_size: size,
        iterations: iters,
        warmup,
        mean_ms: mean,
        p50_ms: percentile(&times, 0.5),
        p95_ms: percentile(&times, 0.95),
        throughput: 1e3 / mean,
        flops: count_flops(&model.config)?,
        flop_convention: FLOP_CONVENTION,
    })
}

/// Fraction of pixels whose `>= 0.5` decision matches between two maps.
pub fn mask_agreement(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(ScanetError::shape("mask_agreement", format!("{} vs {}", a.shape(), b.shape())));
    }
    let same = a.data().iter().zip(b.data()).filter(|(x, y)| (**x >= 0.5) == (**y >= 0.5)).count();
    Ok(same as f64 / a.numel() as f64)
}
