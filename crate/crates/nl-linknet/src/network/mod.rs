//! The full road-extraction network: a ResNet34-style local-block encoder,
//! LinkNet decoder with additive skips, an upsampling head, and non-local
//! blocks inserted after the 128- and/or 256-channel encoder stages
//! depending on the variant.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_into, save_checkpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nonlocal::{nonlocal_block, NonLocalVars, PairwiseKind};
use crate::tensor::{ConvSpec, PoolSpec, Scalar, Shape, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Where non-local blocks sit in the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Nl3,
    Nl4,
    Nl34,
}

impl Variant {
    pub fn has_nl3(self) -> bool {
        matches!(self, Variant::Nl3 | Variant::Nl34)
    }

    pub fn has_nl4(self) -> bool {
        matches!(self, Variant::Nl4 | Variant::Nl34)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "nl3" => Ok(Variant::Nl3),
            "nl4" => Ok(Variant::Nl4),
            "nl34" => Ok(Variant::Nl34),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected baseline, nl3, nl4 or nl34)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Nl3 => "nl3",
            Variant::Nl4 => "nl4",
            Variant::Nl34 => "nl34",
        }
    }
}

/// Rational width multiplier; 1/1 is paper scale, 1/8 the usual toy scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Width {
    pub num: u32,
    pub den: u32,
}

impl Width {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::Config(format!(
                "width multiplier must be in (0, 1], got {num}/{den}"
            )));
        }
        Ok(Width { num, den })
    }

    pub const ONE: Width = Width { num: 1, den: 1 };

    pub fn parse(s: &str) -> Result<Self> {
        if let Some((n, d)) = s.split_once('/') {
            let num = n
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad width '{s}'")))?;
            let den = d
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad width '{s}'")))?;
            Width::new(num, den)
        } else {
            let num = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad width '{s}'")))?;
            Width::new(num, 1)
        }
    }

    pub fn scale(&self, base: usize) -> Result<usize> {
        let scaled = base * self.num as usize;
        if scaled % self.den as usize != 0 {
            return Err(Error::Config(format!(
                "channel count {base} does not scale by {}/{} to an integer",
                self.num, self.den
            )));
        }
        Ok(scaled / self.den as usize)
    }
}

impl std::fmt::Display for Width {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub variant: Variant,
    pub kind: PairwiseKind,
    pub width: Width,
    pub in_channels: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, kind: PairwiseKind, width: Width, seed: u64) -> Self {
        ModelConfig {
            variant,
            kind,
            width,
            in_channels: 3,
            out_channels: 1,
            seed,
        }
    }

    /// Every derived channel count must be an even integer >= 2 so that
    /// non-local inner widths and decoder bottlenecks stay valid.
    pub fn validate(&self) -> Result<()> {
        for base in [16usize, 32, 64, 128, 256, 512] {
            let c = self.width.scale(base)?;
            if c < 2 || c % 2 != 0 {
                return Err(Error::Config(format!(
                    "width {} scales {base} channels to {c}; all channel counts must be even and >= 2",
                    self.width
                )));
            }
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("zero input or output channels".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct NamedTensor<E: Scalar> {
    pub name: String,
    pub value: Tensor<E>,
    /// Learnable weights/biases/affine parameters, as opposed to batch-norm
    /// running statistics (saved in checkpoints but never counted or
    /// optimized).
    pub learnable: bool,
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Builder-side parameter table. Initialization is keyed on
/// `(seed, parameter name)`, so identically named parameters are
/// identical across variants built from the same seed.
struct ParamStore<E: Scalar> {
    seed: u64,
    params: Vec<NamedTensor<E>>,
}

impl<E: Scalar> ParamStore<E> {
    fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: Vec::new(),
        }
    }

    fn rng_for(&self, name: &str) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(splitmix64(self.seed ^ fnv1a(name)))
    }

    fn push(&mut self, name: String, value: Tensor<E>, learnable: bool) -> usize {
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(NamedTensor {
            name,
            value,
            learnable,
        });
        self.params.len() - 1
    }

    fn kaiming(&mut self, name: String, shape: Shape, fan_in: usize) -> usize {
        let mut rng = self.rng_for(&name);
        let t = Tensor::kaiming(shape, fan_in, &mut rng);
        self.push(name, t, true)
    }

    fn constant(&mut self, name: String, shape: Shape, v: E, learnable: bool) -> usize {
        self.push(name, Tensor::full(shape, v), learnable)
    }
}

// ---------------------------------------------------------------------------
// layers (indices into the parameter table)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: usize,
    bias: Option<usize>,
    spec: ConvSpec,
    transpose: bool,
}

impl ConvLayer {
    fn conv<E: Scalar>(
        store: &mut ParamStore<E>,
        name: &str,
        spec: ConvSpec,
    ) -> Self {
        let (kh, kw) = spec.kernel;
        let shape = Shape::new(spec.out_channels, spec.in_channels, kh, kw);
        let weight = store.kaiming(format!("{name}.weight"), shape, spec.in_channels * kh * kw);
        let bias = spec.bias.then(|| {
            store.constant(
                format!("{name}.bias"),
                Shape::chan(spec.out_channels),
                E::zero(),
                true,
            )
        });
        ConvLayer {
            weight,
            bias,
            spec,
            transpose: false,
        }
    }

    fn conv_transpose<E: Scalar>(
        store: &mut ParamStore<E>,
        name: &str,
        spec: ConvSpec,
    ) -> Self {
        let (kh, kw) = spec.kernel;
        let shape = Shape::new(spec.in_channels, spec.out_channels, kh, kw);
        let weight = store.kaiming(format!("{name}.weight"), shape, spec.in_channels * kh * kw);
        let bias = spec.bias.then(|| {
            store.constant(
                format!("{name}.bias"),
                Shape::chan(spec.out_channels),
                E::zero(),
                true,
            )
        });
        ConvLayer {
            weight,
            bias,
            spec,
            transpose: true,
        }
    }
}

#[derive(Debug, Clone)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

impl BnLayer {
    fn new<E: Scalar>(store: &mut ParamStore<E>, name: &str, c: usize) -> Self {
        BnLayer {
            gamma: store.constant(format!("{name}.gamma"), Shape::chan(c), E::one(), true),
            beta: store.constant(format!("{name}.beta"), Shape::chan(c), E::zero(), true),
            running_mean: store.constant(
                format!("{name}.running_mean"),
                Shape::chan(c),
                E::zero(),
                false,
            ),
            running_var: store.constant(
                format!("{name}.running_var"),
                Shape::chan(c),
                E::one(),
                false,
            ),
        }
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvLayer,
    bn1: BnLayer,
    conv2: ConvLayer,
    bn2: BnLayer,
    shortcut: Option<(ConvLayer, BnLayer)>,
}

#[derive(Debug, Clone)]
struct NonLocalLayer {
    query: Option<(usize, usize)>,
    key: Option<(usize, usize)>,
    value: (usize, usize),
    output: (usize, usize),
}

impl NonLocalLayer {
    fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        name: &str,
        c1: usize,
        kind: PairwiseKind,
    ) -> Self {
        let c2 = c1 / 2;
        let mut embed = |part: &str, in_c: usize, out_c: usize, zero: bool| {
            let wname = format!("{name}.{part}.weight");
            let w = if zero {
                store.constant(wname, Shape::new(out_c, in_c, 1, 1), E::zero(), true)
            } else {
                store.kaiming(wname, Shape::new(out_c, in_c, 1, 1), in_c)
            };
            let b = store.constant(format!("{name}.{part}.bias"), Shape::chan(out_c), E::zero(), true);
            (w, b)
        };
        let (query, key) = if kind.uses_embeddings() {
            (
                Some(embed("query", c1, c2, false)),
                Some(embed("key", c1, c2, false)),
            )
        } else {
            (None, None)
        };
        let value = embed("value", c1, c2, false);
        // zero-initialized residual projection: the block starts as identity
        let output = embed("output", c2, c1, true);
        NonLocalLayer {
            query,
            key,
            value,
            output,
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    reduce: ConvLayer,
    bn1: BnLayer,
    up: ConvLayer,
    bn2: BnLayer,
    expand: ConvLayer,
    bn3: BnLayer,
}

impl DecoderBlock {
    fn new<E: Scalar>(store: &mut ParamStore<E>, name: &str, in_c: usize, out_c: usize) -> Self {
        let mid = in_c / 4;
        DecoderBlock {
            reduce: ConvLayer::conv(store, &format!("{name}.reduce"), ConvSpec::new(in_c, mid, 1)),
            bn1: BnLayer::new(store, &format!("{name}.bn1"), mid),
            up: ConvLayer::conv_transpose(
                store,
                &format!("{name}.up"),
                ConvSpec::new(mid, mid, 3).stride(2).padding(1).output_padding(1),
            ),
            bn2: BnLayer::new(store, &format!("{name}.bn2"), mid),
            expand: ConvLayer::conv(store, &format!("{name}.expand"), ConvSpec::new(mid, out_c, 1)),
            bn3: BnLayer::new(store, &format!("{name}.bn3"), out_c),
        }
    }
}

#[derive(Debug, Clone)]
struct Head {
    up: ConvLayer,
    mid: ConvLayer,
    out: ConvLayer,
}

// ---------------------------------------------------------------------------
// the model
// ---------------------------------------------------------------------------

pub struct Model<E: Scalar> {
    config: ModelConfig,
    params: Vec<NamedTensor<E>>,
    stem_conv: ConvLayer,
    stem_bn: BnLayer,
    stages: Vec<Vec<BasicBlock>>,
    nl3: Option<NonLocalLayer>,
    nl4: Option<NonLocalLayer>,
    decoders: Vec<DecoderBlock>,
    head: Head,
}

/// Tape handles for the learnable parameters of one forward pass.
pub struct ModelBinding {
    vars: Vec<Option<Var>>,
}

/// Result of a forward pass: the output probabilities plus batch-norm
/// running-statistic updates to apply back to the model (train mode only).
pub struct ForwardOutput<E: Scalar> {
    pub output: Var,
    pub stat_updates: Vec<(usize, Tensor<E>)>,
}

/// Stage block counts and base widths of the 34-layer residual encoder.
const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const STAGE_CHANNELS: [usize; 4] = [64, 128, 256, 512];

pub fn build_model<E: Scalar>(config: &ModelConfig) -> Result<Model<E>> {
    config.validate()?;
    let w = &config.width;
    let mut store = ParamStore::new(config.seed);

    let stem_c = w.scale(64)?;
    let stem_conv = ConvLayer::conv(
        &mut store,
        "stem.conv",
        ConvSpec::new(config.in_channels, stem_c, 7)
            .stride(2)
            .padding(3)
            .with_bias(false),
    );
    let stem_bn = BnLayer::new(&mut store, "stem.bn", stem_c);

    let mut stages = Vec::with_capacity(4);
    let mut in_c = stem_c;
    for (si, (&blocks, &base)) in STAGE_BLOCKS.iter().zip(&STAGE_CHANNELS).enumerate() {
        let out_c = w.scale(base)?;
        let mut stage = Vec::with_capacity(blocks);
        for bi in 0..blocks {
            let name = format!("encoder{}.block{bi}", si + 1);
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let conv1 = ConvLayer::conv(
                &mut store,
                &format!("{name}.conv1"),
                ConvSpec::new(in_c, out_c, 3)
                    .stride(stride)
                    .padding(1)
                    .with_bias(false),
            );
            let bn1 = BnLayer::new(&mut store, &format!("{name}.bn1"), out_c);
            let conv2 = ConvLayer::conv(
                &mut store,
                &format!("{name}.conv2"),
                ConvSpec::new(out_c, out_c, 3).padding(1).with_bias(false),
            );
            let bn2 = BnLayer::new(&mut store, &format!("{name}.bn2"), out_c);
            let shortcut = (stride != 1 || in_c != out_c).then(|| {
                let sc_conv = ConvLayer::conv(
                    &mut store,
                    &format!("{name}.shortcut.conv"),
                    ConvSpec::new(in_c, out_c, 1).stride(stride).with_bias(false),
                );
                let sc_bn = BnLayer::new(&mut store, &format!("{name}.shortcut.bn"), out_c);
                (sc_conv, sc_bn)
            });
            stage.push(BasicBlock {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            });
            in_c = out_c;
        }
        stages.push(stage);
    }

    let nl3 = config
        .variant
        .has_nl3()
        .then(|| NonLocalLayer::new(&mut store, "nl3", w.scale(128).expect("validated"), config.kind));
    let nl4 = config
        .variant
        .has_nl4()
        .then(|| NonLocalLayer::new(&mut store, "nl4", w.scale(256).expect("validated"), config.kind));

    // decoder4 ... decoder1, deepest first
    let enc = [
        w.scale(64)?,
        w.scale(128)?,
        w.scale(256)?,
        w.scale(512)?,
    ];
    let dec_io = [
        (enc[3], enc[2]),
        (enc[2], enc[1]),
        (enc[1], enc[0]),
        (enc[0], enc[0]),
    ];
    let mut decoders = Vec::with_capacity(4);
    for (i, (dec_in, dec_out)) in dec_io.iter().enumerate() {
        decoders.push(DecoderBlock::new(
            &mut store,
            &format!("decoder{}", 4 - i),
            *dec_in,
            *dec_out,
        ));
    }

    let head_mid = w.scale(32)?;
    let head = Head {
        up: ConvLayer::conv_transpose(
            &mut store,
            "head.up",
            ConvSpec::new(enc[0], head_mid, 4).stride(2).padding(1),
        ),
        mid: ConvLayer::conv(
            &mut store,
            "head.mid",
            ConvSpec::new(head_mid, head_mid, 3).padding(1),
        ),
        out: ConvLayer::conv(
            &mut store,
            "head.out",
            ConvSpec::new(head_mid, config.out_channels, 3).padding(1),
        ),
    };

    Ok(Model {
        config: config.clone(),
        params: store.params,
        stem_conv,
        stem_bn,
        stages,
        nl3,
        nl4,
        decoders,
        head,
    })
}

impl<E: Scalar> Model<E> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor<E>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn set_param(&mut self, index: usize, value: Tensor<E>) -> Result<()> {
        let slot = &mut self.params[index];
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {}, got {}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    /// Total learnable parameters (weights, biases, batch-norm affine).
    pub fn param_count(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.learnable)
            .map(|p| p.value.numel() as u64)
            .sum()
    }

    /// Indices of learnable parameters, in declaration order.
    pub fn learnable_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.learnable)
            .map(|(i, _)| i)
            .collect()
    }

    /// Register every learnable parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<E>, requires_grad: bool) -> ModelBinding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                p.learnable
                    .then(|| tape.leaf(p.value.clone(), requires_grad))
            })
            .collect();
        ModelBinding { vars }
    }

    /// Build a binding from externally created leaves (one per learnable
    /// parameter, in `learnable_indices` order); used by gradient checks.
    pub fn binding_from_vars(&self, vars: &[Var]) -> Result<ModelBinding> {
        let idx = self.learnable_indices();
        if vars.len() != idx.len() {
            return Err(Error::Usage(format!(
                "expected {} leaves, got {}",
                idx.len(),
                vars.len()
            )));
        }
        let mut slots = vec![None; self.params.len()];
        for (i, v) in idx.into_iter().zip(vars) {
            slots[i] = Some(*v);
        }
        Ok(ModelBinding { vars: slots })
    }

    /// Apply running-statistic updates produced by a train-mode forward.
    pub fn apply_stat_updates(&mut self, updates: Vec<(usize, Tensor<E>)>) {
        for (i, t) in updates {
            self.params[i].value = t;
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        binding: &ModelBinding,
        input: Var,
        mode: Mode,
    ) -> Result<ForwardOutput<E>> {
        let shape = tape.shape(input);
        for (what, extent) in [("height", shape.height()), ("width", shape.width())] {
            if extent == 0 || extent % 32 != 0 {
                return Err(Error::Config(format!(
                    "input {what} {extent} is not divisible by 32"
                )));
            }
        }
        if shape.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, model expects {}",
                shape.channels(),
                self.config.in_channels
            )));
        }

        let mut ctx = Forward {
            model: self,
            tape,
            binding,
            mode,
            stat_updates: Vec::new(),
        };

        // stem: /4 resolution
        let x = ctx.conv(&self.stem_conv, input)?;
        let x = ctx.bn(&self.stem_bn, x)?;
        let x = ctx.tape.relu(x)?;
        let x = ctx.tape.maxpool2d(x, PoolSpec::new(3, 2, 1))?;

        // encoder with in-line non-local blocks
        let mut feats = x;
        let mut skips = Vec::with_capacity(4);
        for (si, stage) in self.stages.iter().enumerate() {
            for block in stage {
                feats = ctx.basic_block(block, feats)?;
            }
            if si == 1 {
                if let Some(nl) = &self.nl3 {
                    feats = ctx.nonlocal(nl, feats)?;
                }
            }
            if si == 2 {
                if let Some(nl) = &self.nl4 {
                    feats = ctx.nonlocal(nl, feats)?;
                }
            }
            skips.push(feats);
        }

        // decoder with additive skips from the three shallower stages
        let mut d = skips[3];
        for (i, dec) in self.decoders.iter().enumerate() {
            d = ctx.decoder(dec, d)?;
            if i < 3 {
                d = ctx.tape.add(d, skips[2 - i])?;
            }
        }

        // head back to input resolution
        let h = ctx.conv(&self.head.up, d)?;
        let h = ctx.tape.relu(h)?;
        let h = ctx.conv(&self.head.mid, h)?;
        let h = ctx.tape.relu(h)?;
        let h = ctx.conv(&self.head.out, h)?;
        let out = ctx.tape.sigmoid(h)?;

        let stat_updates = ctx.stat_updates;
        Ok(ForwardOutput {
            output: out,
            stat_updates,
        })
    }

    /// Inference on plain tensors: eval-mode batch norm, no gradients.
    pub fn predict(&self, image: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone(), false);
        let binding = self.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &binding, x, Mode::Eval)?;
        Ok(tape.value(fwd.output).clone())
    }

    /// Copy every identically named, identically shaped parameter from
    /// `other`; returns how many were copied.
    pub fn copy_matching_params(&mut self, other: &Model<E>) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = other.params.iter().find(|q| q.name == p.name) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// One forward pass in flight.
struct Forward<'a, E: Scalar> {
    model: &'a Model<E>,
    tape: &'a mut Tape<E>,
    binding: &'a ModelBinding,
    mode: Mode,
    stat_updates: Vec<(usize, Tensor<E>)>,
}

impl<E: Scalar> Forward<'_, E> {
    fn var(&self, index: usize) -> Var {
        self.binding.vars[index].expect("learnable parameter bound")
    }

    fn conv(&mut self, layer: &ConvLayer, x: Var) -> Result<Var> {
        let w = self.var(layer.weight);
        let b = layer.bias.map(|i| self.var(i));
        if layer.transpose {
            self.tape.conv_transpose2d(x, w, b, layer.spec)
        } else {
            self.tape.conv2d(x, w, b, layer.spec)
        }
    }

    fn bn(&mut self, layer: &BnLayer, x: Var) -> Result<Var> {
        let gamma = self.var(layer.gamma);
        let beta = self.var(layer.beta);
        let rm = &self.model.params[layer.running_mean].value;
        let rv = &self.model.params[layer.running_var].value;
        match self.mode {
            Mode::Train => {
                let (out, new_rm, new_rv) = self
                    .tape
                    .batchnorm2d_train(x, gamma, beta, rm, rv, BN_EPS, BN_MOMENTUM)?;
                self.stat_updates.push((layer.running_mean, new_rm));
                self.stat_updates.push((layer.running_var, new_rv));
                Ok(out)
            }
            Mode::Eval => self
                .tape
                .batchnorm2d_eval(x, gamma, beta, rm, rv, BN_EPS),
        }
    }

    fn basic_block(&mut self, block: &BasicBlock, x: Var) -> Result<Var> {
        let y = self.conv(&block.conv1, x)?;
        let y = self.bn(&block.bn1, y)?;
        let y = self.tape.relu(y)?;
        let y = self.conv(&block.conv2, y)?;
        let y = self.bn(&block.bn2, y)?;
        let residual = match &block.shortcut {
            Some((conv, bn)) => {
                let s = self.conv(conv, x)?;
                self.bn(bn, s)?
            }
            None => x,
        };
        let sum = self.tape.add(y, residual)?;
        self.tape.relu(sum)
    }

    fn nonlocal(&mut self, layer: &NonLocalLayer, x: Var) -> Result<Var> {
        let pair = |p: (usize, usize), this: &Self| (this.var(p.0), this.var(p.1));
        let vars = NonLocalVars {
            query: layer.query.map(|p| pair(p, self)),
            key: layer.key.map(|p| pair(p, self)),
            value: pair(layer.value, self),
            output: pair(layer.output, self),
        };
        nonlocal_block(self.tape, x, self.model.config.kind, &vars)
    }

    fn decoder(&mut self, dec: &DecoderBlock, x: Var) -> Result<Var> {
        let y = self.conv(&dec.reduce, x)?;
        let y = self.bn(&dec.bn1, y)?;
        let y = self.tape.relu(y)?;
        let y = self.conv(&dec.up, y)?;
        let y = self.bn(&dec.bn2, y)?;
        let y = self.tape.relu(y)?;
        let y = self.conv(&dec.expand, y)?;
        let y = self.bn(&dec.bn3, y)?;
        self.tape.relu(y)
    }
}
