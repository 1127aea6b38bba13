//! The full segmentation network: backbone, stage-1 decoder and three
//! segregation-attention decoders with one supervised prediction per stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScanetError};
use crate::nn::{Activation, BlockSpec, Conv, ConvBnAct, InvertedResidual, ParamStore, Session, UpsampleBlock};
use crate::tensor::Var;

/// Architecture description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanetConfig {
    pub variant: String,
    /// Channels of the taps at strides 1/2, 1/4, 1/8 and 1/16.
    pub tap_widths: [usize; 4],
    /// Output channels of the stage-1 decoder and of SCAM stages 2..4.
    pub decoder_channels: [usize; 4],
    /// Width of the segregated features inside each SCAM.
    pub scam_channels: usize,
    pub expansion: usize,
    /// Inverted-residual units per backbone stage.
    pub units_per_stage: [usize; 4],
    pub input_size: usize,
}

impl ScanetConfig {
    pub fn lite() -> Self {
        ScanetConfig {
            variant: "lite".into(),
            tap_widths: [8, 16, 24, 32],
            decoder_channels: [24, 16, 12, 8],
            scam_channels: 24,
            expansion: 2,
            units_per_stage: [2, 2, 2, 2],
            input_size: 320,
        }
    }

    /// MobileNetV2-style widths without pretrained weights.
    pub fn base() -> Self {
        ScanetConfig {
            variant: "base".into(),
            tap_widths: [16, 24, 32, 96],
            decoder_channels: [64, 32, 24, 16],
            scam_channels: 32,
            expansion: 6,
            units_per_stage: [2, 3, 3, 4],
            input_size: 320,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "lite" => Ok(Self::lite()),
            "base" => Ok(Self::base()),
            other => Err(ScanetError::invalid(format!("unknown variant `{other}` (expected lite or base)"))),
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.tap_widths.iter().chain(&self.decoder_channels).chain(&self.units_per_stage);
        if widths.copied().any(|w| w == 0) || self.expansion == 0 {
            return Err(ScanetError::invalid(format!("config `{}` has a zero width, unit count or expansion", self.variant)));
        }
        if self.scam_channels == 0 || !self.scam_channels.is_multiple_of(2) {
            return Err(ScanetError::invalid(format!(
                "scam_channels must be positive and even, got {}",
                self.scam_channels
            )));
        }
        check_resolution(self.input_size)
    }
}

fn check_resolution(size: usize) -> Result<()> {
    if size == 0 || !size.is_multiple_of(16) {
        return Err(ScanetError::invalid(format!("input resolution {size} is not a positive multiple of 16")));
    }
    Ok(())
}

/// Stem plus four stacked inverted-residual stages, tapped after each stage.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: ConvBnAct,
    pub stages: [Vec<InvertedResidual>; 4],
}

impl Backbone {
    pub fn new(cfg: &ScanetConfig) -> Result<Self> {
        let w = cfg.tap_widths;
        let stem = ConvBnAct::new("backbone.stem", 3, w[0], 3, 2, 1, Activation::Relu6);
        let mut stages: [Vec<InvertedResidual>; 4] = Default::default();
        for (k, stage) in stages.iter_mut().enumerate() {
            // the stem already halves the input, later stages downsample in their first unit
            let (mut cin, stride) = if k == 0 { (w[0], 1) } else { (w[k - 1], 2) };
            for u in 0..cfg.units_per_stage[k] {
                let spec = BlockSpec::new(cin, w[k], if u == 0 { stride } else { 1 }, cfg.expansion);
                stage.push(InvertedResidual::new(&format!("backbone.stage{}.{u}", k + 1), spec)?);
                cin = w[k];
            }
        }
        Ok(Backbone { stem, stages })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.stem.register(store, rng)?;
        self.stages.iter().flatten().try_for_each(|b| b.register(store, rng))
    }

    /// Taps `t1..t4` at strides 1/2, 1/4, 1/8, 1/16.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<[Var; 4]> {
        let shape = s.tape.shape(image);
        if shape.h != shape.w {
            return Err(ScanetError::shape("backbone", format!("input {shape} is not square")));
        }
        check_resolution(shape.h)?;
        let mut x = self.stem.forward(s, image)?;
        let mut taps = [x; 4];
        for (k, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(s, x)?;
            }
            taps[k] = x;
        }
        Ok(taps)
    }
}

/// Upsample block on the deepest tap followed by a 1x1 prediction head.
#[derive(Clone, Debug)]
pub struct Stage1Decoder {
    pub up: UpsampleBlock,
    pub head: Conv,
}

impl Stage1Decoder {
    pub fn new(cfg: &ScanetConfig) -> Result<Self> {
        let d1 = cfg.decoder_channels[0];
        Ok(Stage1Decoder {
            up: UpsampleBlock::new("decoder1.up", BlockSpec::new(cfg.tap_widths[3], d1, 1, cfg.expansion))?,
            head: Conv::new("decoder1.head", d1, 1, 1),
        })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.up.register(store, rng)?;
        self.head.register(store, rng)
    }

    /// Returns `(o_1, s_1)`.
    pub fn forward(&self, s: &mut Session, t4: Var) -> Result<(Var, Var)> {
        let o = self.up.forward(s, t4)?;
        let logits = self.head.forward(s, o)?;
        Ok((o, s.tape.sigmoid(logits)))
    }
}

/// Values inside one SCAM pass, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct ScamTrace {
    /// `c * s`, the input of the foreground conv.
    pub fg_input: Var,
    /// `c * (1 - s)`, the input of the mask conv.
    pub bg_input: Var,
    pub f: Var,
    pub m: Var,
    pub b: Var,
    pub o: Var,
    pub s: Var,
}

/// Segregation-attention decoder stage.
#[derive(Clone, Debug)]
pub struct Scam {
    pub in_channels: usize,
    pub plain: Conv,
    pub fg: Conv,
    pub bg: Conv,
    pub res_b: InvertedResidual,
    pub res_f: InvertedResidual,
    pub out: Conv,
    pub head: Conv,
}

impl Scam {
    pub fn new(prefix: &str, in_channels: usize, inner: usize, out_channels: usize, expansion: usize) -> Result<Self> {
        if inner == 0 || !inner.is_multiple_of(2) {
            return Err(ScanetError::invalid(format!("SCAM inner width must be positive and even, got {inner}")));
        }
        let half = inner / 2;
        let res = |name: &str| InvertedResidual::new(&format!("{prefix}.{name}"), BlockSpec::new(inner, inner, 1, expansion));
        Ok(Scam {
            in_channels,
            plain: Conv::new(format!("{prefix}.plain"), in_channels, half, 1),
            fg: Conv::new(format!("{prefix}.fg"), in_channels, half, 1),
            bg: Conv::new(format!("{prefix}.bg"), in_channels, inner, 1),
            res_b: res("res_b")?,
            res_f: res("res_f")?,
            out: Conv::new(format!("{prefix}.out"), inner, out_channels, 3),
            head: Conv::new(format!("{prefix}.head"), out_channels, 1, 1),
        })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.plain.register(store, rng)?;
        self.fg.register(store, rng)?;
        self.bg.register(store, rng)?;
        self.res_b.register(store, rng)?;
        self.res_f.register(store, rng)?;
        self.out.register(store, rng)?;
        self.head.register(store, rng)
    }

    pub fn forward_traced(&self, s: &mut Session, c: Var, s_prev: Var) -> Result<ScamTrace> {
        let (cs, ss) = (s.tape.shape(c), s.tape.shape(s_prev));
        if ss.c != 1 || (cs.n, cs.h, cs.w) != (ss.n, ss.h, ss.w) {
            return Err(ScanetError::shape("scam", format!("features {cs} with prediction {ss}")));
        }
        let fg_input = s.tape.mul(c, s_prev)?;
        let inv = s.tape.one_minus(s_prev);
        let bg_input = s.tape.mul(c, inv)?;

        let plain = self.plain.forward(s, c)?;
        let fg = self.fg.forward(s, fg_input)?;
        let f = s.tape.concat_channels(plain, fg)?;
        let m_logits = self.bg.forward(s, bg_input)?;
        let m = s.tape.sigmoid(m_logits);
        let b = s.tape.mul(f, m)?;

        let rb = self.res_b.forward(s, b)?;
        let rf = self.res_f.forward(s, f)?;
        let sum = s.tape.add(rb, rf)?;
        let up = s.tape.upsample_bilinear(sum, 2)?;
        let o = self.out.forward(s, up)?;
        let logits = self.head.forward(s, o)?;
        let pred = s.tape.sigmoid(logits);
        Ok(ScamTrace { fg_input, bg_input, f, m, b, o, s: pred })
    }

    /// Returns `(o_i, s_i, m_i)`.
    pub fn forward(&self, s: &mut Session, c: Var, s_prev: Var) -> Result<(Var, Var, Var)> {
        let t = self.forward_traced(s, c, s_prev)?;
        Ok((t.o, t.s, t.m))
    }
}

/// Stage predictions `s_1..s_4` (coarse to fine), features `o_1..o_4` and
/// background masks `m_2..m_4`.
#[derive(Clone, Copy, Debug)]
pub struct StageOutputs {
    pub s: [Var; 4],
    pub o: [Var; 4],
    pub m: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct Scanet {
    pub config: ScanetConfig,
    pub backbone: Backbone,
    pub decoder1: Stage1Decoder,
    pub scams: [Scam; 3],
}

impl Scanet {
    pub fn new(config: ScanetConfig) -> Result<Self> {
        config.validate()?;
        let w = config.tap_widths;
        let d = config.decoder_channels;
        // stage i concatenates tap t_{5-i} with o_{i-1}
        let scam = |i: usize| {
            Scam::new(&format!("scam{i}"), w[4 - i] + d[i - 2], config.scam_channels, d[i - 1], config.expansion)
        };
        Ok(Scanet {
            backbone: Backbone::new(&config)?,
            decoder1: Stage1Decoder::new(&config)?,
            scams: [scam(2)?, scam(3)?, scam(4)?],
            config,
        })
    }

    /// Model plus freshly initialised parameters; equal seeds give equal stores.
    pub fn build(config: ScanetConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let model = Scanet::new(config)?;
        let mut store = ParamStore::new();
        model.register(&mut store, seed)?;
        Ok((model, store))
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.backbone.register(store, &mut rng)?;
        self.decoder1.register(store, &mut rng)?;
        self.scams.iter().try_for_each(|m| m.register(store, &mut rng))
    }

    pub fn forward(&self, s: &mut Session, image: Var) -> Result<StageOutputs> {
        Ok(self.forward_traced(s, image)?.0)
    }

    /// Forward pass that also returns the three SCAM traces.
    pub fn forward_traced(&self, s: &mut Session, image: Var) -> Result<(StageOutputs, [ScamTrace; 3])> {
        let taps = self.backbone.forward(s, image)?;
        let (o1, s1) = self.decoder1.forward(s, taps[3])?;
        let mut out = StageOutputs { s: [s1; 4], o: [o1; 4], m: [s1; 3] };
        let mut traces = Vec::with_capacity(3);
        for i in 2..=4 {
            let c = s.tape.concat_channels(taps[4 - i], out.o[i - 2])?;
            let t = self.scams[i - 2].forward_traced(s, c, out.s[i - 2])?;
            out.o[i - 1] = t.o;
            out.s[i - 1] = t.s;
            out.m[i - 2] = t.m;
            traces.push(t);
        }
        let traces: [ScamTrace; 3] = traces.try_into().expect("three SCAM stages");
        Ok((out, traces))
    }
}

/// Number of learnable scalars (buffers excluded).
pub fn param_count(store: &ParamStore) -> usize {
    store.param_count()
}
