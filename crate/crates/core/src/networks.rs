//! Parametric building blocks: translation generators with encoder/decoder
//! split and feature taps, projection heads, negative generators, and patch
//! discriminators.
//!
//! The generator follows the residual translation backbone: a 7x7 stem, two
//! stride-2 downsampling convolutions, a chain of residual blocks (the
//! encoder), then two nearest-upsample convolutions and a 7x7 tanh output
//! head (the decoder). Encoder layers are counted 1-based in execution order
//! (conv / norm / activation / residual block each count as one layer), so
//! with nine residual blocks the encoder is 18 layers deep and taps
//! `[1,5,9,13,17]` are valid.
//!
//! The latent factor category is pathway-implicit: the hazy->clear generator
//! targets the task-relevant factor, the clear->hazy generator reintroduces
//! the task-irrelevant one. Noise enters only through the negative
//! generators, which map `[mean tap feature ; noise]` through a two-layer
//! perceptron onto the unit sphere to produce hard contrastive negatives.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Arr, PadMode, Tape, TensorId};

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;

/// A flat, ordered collection of named parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arr>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    fn add(&mut self, name: &str, value: Arr) {
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Arr {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Arr {
        &mut self.values[i]
    }

    /// Mutable iteration over all tensors in registration order.
    pub fn values_mut(&mut self) -> std::slice::IterMut<'_, Arr> {
        self.values.iter_mut()
    }

    pub fn total_elems(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Insert every tensor into a tape, as gradient leaves when `trainable`.
    pub fn insert_into(&self, tape: &mut Tape, trainable: bool) -> Vec<TensorId> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

fn normal_init(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
    let dist = Normal::new(0.0, INIT_STD).unwrap();
    Arr::from_shape_fn(ndarray::IxDyn(shape), |_| dist.sample(rng))
}

fn conv_params(set: &mut ParamSet, name: &str, o: usize, c: usize, k: usize, rng: &mut ChaCha8Rng) {
    set.add(&format!("{name}.w"), normal_init(&[o, c, k, k], rng));
    set.add(&format!("{name}.b"), Arr::zeros(ndarray::IxDyn(&[o])));
}

fn linear_params(set: &mut ParamSet, name: &str, o: usize, i: usize, rng: &mut ChaCha8Rng) {
    set.add(&format!("{name}.w"), normal_init(&[o, i], rng));
    set.add(&format!("{name}.b"), Arr::zeros(ndarray::IxDyn(&[o])));
}

/// Walks a parameter id list in construction order.
struct Cursor<'a> {
    ids: &'a [TensorId],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(ids: &'a [TensorId]) -> Self {
        Cursor { ids, pos: 0 }
    }

    fn pair(&mut self) -> (TensorId, TensorId) {
        let p = (self.ids[self.pos], self.ids[self.pos + 1]);
        self.pos += 2;
        p
    }
}

// ── generator ──────────────────────────────────────────────────────────

/// Architecture of one translation generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorSpec {
    /// Channel width after the stem convolution.
    pub base_width: usize,
    /// Number of residual blocks (all at 4x base width).
    pub resblocks: usize,
    /// 1-based encoder layer indices whose activations are tapped.
    pub taps: Vec<usize>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            base_width: 64,
            resblocks: 9,
            taps: vec![1, 5, 9, 13, 17],
        }
    }
}

impl GeneratorSpec {
    /// Encoder layer count: stem (conv, norm, relu) + two downsampling
    /// triples + one layer per residual block.
    pub fn encoder_depth(&self) -> usize {
        9 + self.resblocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width < 2 {
            return Err(Error::InvalidInput("base_width must be >= 2".into()));
        }
        if self.resblocks < 1 {
            return Err(Error::InvalidInput("resblocks must be >= 1".into()));
        }
        if self.taps.is_empty() {
            return Err(Error::InvalidInput("at least one tap layer".into()));
        }
        let depth = self.encoder_depth();
        for pair in self.taps.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::InvalidInput(
                    "tap indices must be strictly increasing".into(),
                ));
            }
        }
        if self.taps[0] < 1 || *self.taps.last().unwrap() > depth {
            return Err(Error::InvalidInput(format!(
                "tap indices must lie in [1, {depth}]"
            )));
        }
        Ok(())
    }

    /// Channel count of the activation at encoder layer `tap`.
    pub fn tap_channels(&self, tap: usize) -> usize {
        match tap {
            1..=3 => self.base_width,
            4..=6 => 2 * self.base_width,
            _ => 4 * self.base_width,
        }
    }

    /// Spatial downscale factor of the activation at encoder layer `tap`.
    pub fn tap_scale(&self, tap: usize) -> usize {
        match tap {
            1..=3 => 1,
            4..=6 => 2,
            _ => 4,
        }
    }
}

/// Ordered per-tap feature grids from one encoder pass.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub taps: Vec<Array3<f64>>,
}

/// Per-tap query/positive embedding matrices, rows unit-norm.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub queries: Vec<Array2<f64>>,
    pub positives: Vec<Array2<f64>>,
}

impl EmbeddingSet {
    pub fn new(queries: Vec<Array2<f64>>, positives: Vec<Array2<f64>>) -> Result<Self> {
        if queries.len() != positives.len() || queries.is_empty() {
            return Err(Error::InvalidInput(
                "queries/positives must cover the same non-empty tap list".into(),
            ));
        }
        for (q, p) in queries.iter().zip(&positives) {
            if q.dim() != p.dim() || q.dim().0 == 0 {
                return Err(Error::InvalidInput("embedding matrix shape mismatch".into()));
            }
        }
        Ok(EmbeddingSet { queries, positives })
    }
}

/// Per-tap adversarial negative matrices `[N, d]`, rows unit-norm.
#[derive(Debug, Clone)]
pub struct NegativeBank {
    pub negatives: Vec<Array2<f64>>,
}

/// Which disentangled factor a latent code addresses. The translation
/// pathways realise this implicitly: the hazy->clear direction carries the
/// task-relevant factor, the reverse direction the task-irrelevant one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorCategory {
    TaskRelevant,
    TaskIrrelevant,
}

/// Latent code: factor category plus a standard-normal noise vector.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub category: FactorCategory,
    pub noise: Array1<f64>,
}

impl LatentCode {
    pub fn sample(category: FactorCategory, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, 1.0).unwrap();
        LatentCode {
            category,
            noise: Array1::from_shape_fn(dim, |_| dist.sample(rng)),
        }
    }
}

/// Residual translation generator with encoder feature taps.
#[derive(Debug, Clone)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub params: ParamSet,
}

impl Generator {
    pub fn init(spec: GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let w = spec.base_width;
        let mut params = ParamSet::new();
        conv_params(&mut params, "enc.conv1", w, 3, 7, rng);
        conv_params(&mut params, "enc.conv2", 2 * w, w, 3, rng);
        conv_params(&mut params, "enc.conv3", 4 * w, 2 * w, 3, rng);
        for i in 0..spec.resblocks {
            conv_params(&mut params, &format!("enc.res{i}.conv1"), 4 * w, 4 * w, 3, rng);
            conv_params(&mut params, &format!("enc.res{i}.conv2"), 4 * w, 4 * w, 3, rng);
        }
        conv_params(&mut params, "dec.up1", 2 * w, 4 * w, 3, rng);
        conv_params(&mut params, "dec.up2", w, 2 * w, 3, rng);
        conv_params(&mut params, "dec.out", 3, w, 7, rng);
        Ok(Generator { spec, params })
    }

    /// Validate an input for this generator: two stride-2 stages need the
    /// spatial size divisible by 4, and the stem's reflect pad needs >= 8.
    pub fn check_input(&self, shape: (usize, usize, usize)) -> Result<()> {
        let (c, h, w) = shape;
        if c != 3 {
            return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
        }
        if h < 8 || w < 8 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidInput(format!(
                "spatial size {h}x{w} must be >= 8 and divisible by 4"
            )));
        }
        Ok(())
    }

    /// Encoder pass, collecting tapped activations. Stops early once the
    /// deepest requested tap has been produced when `stop_at_last_tap`.
    fn encode(
        &self,
        tape: &mut Tape,
        cur: &mut Cursor,
        x: TensorId,
        stop_at_last_tap: bool,
    ) -> (TensorId, Vec<TensorId>) {
        let last_tap = *self.spec.taps.last().unwrap();
        let mut taps = Vec::with_capacity(self.spec.taps.len());
        let mut layer = 0usize;
        let mut h = x;

        macro_rules! emit {
            ($val:expr) => {{
                layer += 1;
                h = $val;
                if self.spec.taps.contains(&layer) {
                    taps.push(h);
                }
                if stop_at_last_tap && layer == last_tap && taps.len() == self.spec.taps.len() {
                    return (h, taps);
                }
            }};
        }

        // stem
        let (w1, b1) = cur.pair();
        let p = tape.pad(h, 3, PadMode::Reflect);
        emit!(tape.conv2d(p, w1, b1, 1));
        emit!(tape.instance_norm(h, NORM_EPS));
        emit!(tape.relu(h));
        // downsample x2
        for _ in 0..2 {
            let (w, b) = cur.pair();
            let p = tape.pad(h, 1, PadMode::Zero);
            emit!(tape.conv2d(p, w, b, 2));
            emit!(tape.instance_norm(h, NORM_EPS));
            emit!(tape.relu(h));
        }
        // residual chain
        for _ in 0..self.spec.resblocks {
            let skip = h;
            let (wa, ba) = cur.pair();
            let p1 = tape.pad(h, 1, PadMode::Reflect);
            let c1 = tape.conv2d(p1, wa, ba, 1);
            let n1 = tape.instance_norm(c1, NORM_EPS);
            let r1 = tape.relu(n1);
            let (wb, bb) = cur.pair();
            let p2 = tape.pad(r1, 1, PadMode::Reflect);
            let c2 = tape.conv2d(p2, wb, bb, 1);
            let n2 = tape.instance_norm(c2, NORM_EPS);
            emit!(tape.add(skip, n2));
        }
        (h, taps)
    }

    /// Full forward pass on a tape. Returns the `[-1,1]` output image tensor
    /// and one tapped activation per configured tap layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ids: &[TensorId],
        x: TensorId,
    ) -> (TensorId, Vec<TensorId>) {
        let mut cur = Cursor::new(ids);
        let (mut h, taps) = self.encode(tape, &mut cur, x, false);
        // decoder
        for _ in 0..2 {
            let (w, b) = cur.pair();
            let up = tape.upsample_nearest2(h);
            let p = tape.pad(up, 1, PadMode::Zero);
            let c = tape.conv2d(p, w, b, 1);
            let n = tape.instance_norm(c, NORM_EPS);
            h = tape.relu(n);
        }
        let (wo, bo) = cur.pair();
        let p = tape.pad(h, 3, PadMode::Reflect);
        let c = tape.conv2d(p, wo, bo, 1);
        let out = tape.tanh(c);
        (out, taps)
    }

    /// Encoder-only pass (stops after the deepest tap).
    pub fn forward_encoder(&self, tape: &mut Tape, ids: &[TensorId], x: TensorId) -> Vec<TensorId> {
        let mut cur = Cursor::new(ids);
        let (_, taps) = self.encode(tape, &mut cur, x, true);
        taps
    }
}

/// Encoder-only tapped features without gradients.
pub fn encoder_features(gen: &Generator, input: &Array3<f64>) -> Result<FeatureStack> {
    gen.check_input(input.dim())?;
    let mut tape = Tape::new();
    let ids = gen.params.insert_into(&mut tape, false);
    let x = tape.constant(input.clone().into_dyn());
    let taps = gen.forward_encoder(&mut tape, &ids, x);
    Ok(FeatureStack {
        taps: taps
            .iter()
            .map(|&t| {
                tape.value(t)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .to_owned()
            })
            .collect(),
    })
}

/// Run a generator without recording gradients, on an internal-range image.
pub fn generator_forward(gen: &Generator, input: &Array3<f64>) -> Result<(Array3<f64>, FeatureStack)> {
    gen.check_input(input.dim())?;
    if input.iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
        return Err(Error::InvalidInput(
            "generator input must lie in [-1,1]".into(),
        ));
    }
    let mut tape = Tape::new();
    let ids = gen.params.insert_into(&mut tape, false);
    let x = tape.constant(input.clone().into_dyn());
    let (out, taps) = gen.forward(&mut tape, &ids, x);
    let out3 = tape
        .value(out)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned();
    let stack = FeatureStack {
        taps: taps
            .iter()
            .map(|&t| {
                tape.value(t)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .to_owned()
            })
            .collect(),
    };
    Ok((out3, stack))
}

// ── projection heads ───────────────────────────────────────────────────

/// Per-tap two-layer perceptrons mapping tapped features at sampled
/// locations onto unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct ProjectionHeads {
    pub embed_dim: usize,
    pub tap_channels: Vec<usize>,
    pub params: ParamSet,
}

impl ProjectionHeads {
    pub fn init(spec: &GeneratorSpec, embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let tap_channels: Vec<usize> = spec.taps.iter().map(|&t| spec.tap_channels(t)).collect();
        let mut params = ParamSet::new();
        for (i, &c) in tap_channels.iter().enumerate() {
            linear_params(&mut params, &format!("head{i}.fc1"), embed_dim, c, rng);
            linear_params(&mut params, &format!("head{i}.fc2"), embed_dim, embed_dim, rng);
        }
        ProjectionHeads {
            embed_dim,
            tap_channels,
            params,
        }
    }

    /// Project gathered features `[Q, C_tap]` of tap `tap_idx` onto the
    /// embedding sphere.
    pub fn project_tap(
        &self,
        tape: &mut Tape,
        ids: &[TensorId],
        tap_idx: usize,
        rows: TensorId,
    ) -> TensorId {
        let base = tap_idx * 4;
        let h = tape.linear(rows, ids[base], ids[base + 1]);
        let r = tape.relu(h);
        let o = tape.linear(r, ids[base + 2], ids[base + 3]);
        tape.normalize_rows(o)
    }
}

/// Project a feature stack at given per-tap locations without gradients.
/// Returns one `[Q, d]` unit-norm matrix per tap.
pub fn project(
    heads: &ProjectionHeads,
    fs: &FeatureStack,
    locations: &[Vec<(usize, usize)>],
) -> Result<Vec<Array2<f64>>> {
    if locations.len() != fs.taps.len() || fs.taps.len() != heads.tap_channels.len() {
        return Err(Error::InvalidInput(
            "locations must give one list per tap".into(),
        ));
    }
    for (feat, locs) in fs.taps.iter().zip(locations) {
        let (_, h, w) = feat.dim();
        if locs.iter().any(|&(y, x)| y >= h || x >= w) {
            return Err(Error::InvalidInput("location outside tap grid".into()));
        }
    }
    let mut tape = Tape::new();
    let ids = heads.params.insert_into(&mut tape, false);
    let mut out = Vec::with_capacity(fs.taps.len());
    for (i, (feat, locs)) in fs.taps.iter().zip(locations).enumerate() {
        let f = tape.constant(feat.clone().into_dyn());
        let rows = tape.gather_locs(f, locs);
        let e = heads.project_tap(&mut tape, &ids, i, rows);
        out.push(
            tape.value(e)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned(),
        );
    }
    Ok(out)
}

// ── negative generators ────────────────────────────────────────────────

/// Per-tap two-layer perceptrons that turn `[mean tap feature ; noise]` into
/// unit-norm negative embeddings. These parameters are the adversary's side
/// of the minimax game.
#[derive(Debug, Clone)]
pub struct NegativeGenerator {
    pub embed_dim: usize,
    pub noise_dim: usize,
    pub tap_channels: Vec<usize>,
    pub params: ParamSet,
}

impl NegativeGenerator {
    pub fn init(
        spec: &GeneratorSpec,
        embed_dim: usize,
        noise_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let tap_channels: Vec<usize> = spec.taps.iter().map(|&t| spec.tap_channels(t)).collect();
        let mut params = ParamSet::new();
        for (i, &c) in tap_channels.iter().enumerate() {
            linear_params(&mut params, &format!("neg{i}.fc1"), embed_dim, c + noise_dim, rng);
            linear_params(&mut params, &format!("neg{i}.fc2"), embed_dim, embed_dim, rng);
        }
        NegativeGenerator {
            embed_dim,
            noise_dim,
            tap_channels,
            params,
        }
    }

    /// Map a `[N, C_tap + noise_dim]` batch for tap `tap_idx` onto `[N, d]`
    /// unit-norm negatives.
    pub fn forward_tap(
        &self,
        tape: &mut Tape,
        ids: &[TensorId],
        tap_idx: usize,
        input: TensorId,
    ) -> TensorId {
        let base = tap_idx * 4;
        let h = tape.linear(input, ids[base], ids[base + 1]);
        let r = tape.relu(h);
        let o = tape.linear(r, ids[base + 2], ids[base + 3]);
        tape.normalize_rows(o)
    }
}

/// One negative embedding per tap from a single noise draw, no gradients.
pub fn negative_forward(
    gen: &NegativeGenerator,
    mean_feats: &[Array1<f64>],
    noise: &Array1<f64>,
) -> Result<Vec<Array1<f64>>> {
    if noise.len() != gen.noise_dim {
        return Err(Error::InvalidInput(format!(
            "noise dimension {} != configured {}",
            noise.len(),
            gen.noise_dim
        )));
    }
    if mean_feats.len() != gen.tap_channels.len() {
        return Err(Error::InvalidInput("one mean feature per tap".into()));
    }
    for (f, &c) in mean_feats.iter().zip(&gen.tap_channels) {
        if f.len() != c {
            return Err(Error::InvalidInput(format!(
                "mean feature length {} != tap channels {c}",
                f.len()
            )));
        }
    }
    let mut tape = Tape::new();
    let ids = gen.params.insert_into(&mut tape, false);
    let mut out = Vec::with_capacity(mean_feats.len());
    for (i, mf) in mean_feats.iter().enumerate() {
        let mut row = Vec::with_capacity(mf.len() + noise.len());
        row.extend(mf.iter().copied());
        row.extend(noise.iter().copied());
        let input = tape.constant(
            Array2::from_shape_vec((1, row.len()), row)
                .unwrap()
                .into_dyn(),
        );
        let e = gen.forward_tap(&mut tape, &ids, i, input);
        let v = tape.value(e);
        out.push(Array1::from_iter(v.iter().copied()));
    }
    Ok(out)
}

/// Standard-normal noise matrix for a bank of `n` draws.
pub fn bank_noise(n: usize, noise_dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((n, noise_dim), |_| dist.sample(rng))
}

/// `[mean_feat ; noise]` input rows for one tap's negative generator.
pub fn bank_inputs(mean_feat: &Array1<f64>, noise: &Array2<f64>) -> Array2<f64> {
    let (n, zd) = noise.dim();
    let c = mean_feat.len();
    let mut input = Array2::<f64>::zeros((n, c + zd));
    for r in 0..n {
        for (j, &v) in mean_feat.iter().enumerate() {
            input[(r, j)] = v;
        }
        for j in 0..zd {
            input[(r, c + j)] = noise[(r, j)];
        }
    }
    input
}

/// Assemble a bank of negatives per tap from an explicit noise matrix.
pub fn negative_bank_from_noise(
    gen: &NegativeGenerator,
    mean_feats: &[Array1<f64>],
    noise: &Array2<f64>,
) -> Result<NegativeBank> {
    if noise.dim().0 == 0 {
        return Err(Error::InvalidInput("bank size must be >= 1".into()));
    }
    if noise.dim().1 != gen.noise_dim {
        return Err(Error::InvalidInput("bank noise dimension mismatch".into()));
    }
    let mut tape = Tape::new();
    let ids = gen.params.insert_into(&mut tape, false);
    let mut negatives = Vec::with_capacity(mean_feats.len());
    for (i, mf) in mean_feats.iter().enumerate() {
        let inp = tape.constant(bank_inputs(mf, noise).into_dyn());
        let e = gen.forward_tap(&mut tape, &ids, i, inp);
        negatives.push(
            tape.value(e)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned(),
        );
    }
    Ok(NegativeBank { negatives })
}

/// Assemble a bank of `n` negatives per tap from independent noise draws.
pub fn negative_bank(
    gen: &NegativeGenerator,
    mean_feats: &[Array1<f64>],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NegativeBank> {
    if n == 0 {
        return Err(Error::InvalidInput("bank size must be >= 1".into()));
    }
    let noise = bank_noise(n, gen.noise_dim, rng);
    negative_bank_from_noise(gen, mean_feats, &noise)
}

// ── discriminator ──────────────────────────────────────────────────────

/// 70x70-receptive-field patch discriminator: four stride-2/1 conv blocks
/// and a 1-channel score head. No normalization layers: patch scores depend
/// only on their receptive field, so they are exactly shift-equivariant away
/// from the padded borders.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub base_width: usize,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn init(base_width: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = base_width;
        let mut params = ParamSet::new();
        conv_params(&mut params, "d.conv1", w, 3, 4, rng);
        conv_params(&mut params, "d.conv2", 2 * w, w, 4, rng);
        conv_params(&mut params, "d.conv3", 4 * w, 2 * w, 4, rng);
        conv_params(&mut params, "d.conv4", 8 * w, 4 * w, 4, rng);
        conv_params(&mut params, "d.out", 1, 8 * w, 4, rng);
        Discriminator { base_width, params }
    }

    /// Patch score grid for an internal-range image.
    pub fn forward(&self, tape: &mut Tape, ids: &[TensorId], x: TensorId) -> TensorId {
        let mut cur = Cursor::new(ids);
        let mut h = x;
        for stride in [2usize, 2, 2, 1] {
            let (w, b) = cur.pair();
            let p = tape.pad(h, 1, PadMode::Zero);
            let c = tape.conv2d(p, w, b, stride);
            h = tape.leaky_relu(c, LEAKY_SLOPE);
        }
        let (w, b) = cur.pair();
        let p = tape.pad(h, 1, PadMode::Zero);
        tape.conv2d(p, w, b, 1)
    }
}

/// Discriminator scores without gradients.
pub fn discriminator_forward(disc: &Discriminator, input: &Array3<f64>) -> Result<Array2<f64>> {
    let (c, h, w) = input.dim();
    if c != 3 {
        return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
    }
    if h < 32 || w < 32 {
        return Err(Error::InvalidInput(
            "discriminator input must be at least 32x32".into(),
        ));
    }
    let mut tape = Tape::new();
    let ids = disc.params.insert_into(&mut tape, false);
    let x = tape.constant(input.clone().into_dyn());
    let s = disc.forward(&mut tape, &ids, x);
    let v = tape.value(s);
    let v3 = v.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    Ok(v3.index_axis(ndarray::Axis(0), 0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_spec() -> GeneratorSpec {
        GeneratorSpec {
            base_width: 4,
            resblocks: 9,
            taps: vec![1, 5, 9, 13, 17],
        }
    }

    fn random_internal(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_fn((3, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn spec_validation() {
        assert!(small_spec().validate().is_ok());
        let mut bad = small_spec();
        bad.taps = vec![5, 5];
        assert!(bad.validate().is_err());
        let mut deep = small_spec();
        deep.taps = vec![1, 19];
        assert!(deep.validate().is_err()); // depth is 18
        let mut shallow = small_spec();
        shallow.resblocks = 4;
        shallow.taps = vec![1, 5, 9, 13, 17];
        assert!(shallow.validate().is_err()); // depth 13 < 17
    }

    #[test]
    fn generator_shape_taps_bounds_determinism() {
        let gen = Generator::init(small_spec(), &mut rng(1)).unwrap();
        let mut r = rng(2);
        let x = random_internal(64, 64, &mut r);
        let (out, stack) = generator_forward(&gen, &x).unwrap();
        assert_eq!(out.dim(), (3, 64, 64));
        assert_eq!(stack.taps.len(), 5);
        assert!(out.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        // tap shapes follow the downsampling schedule
        assert_eq!(stack.taps[0].dim(), (4, 64, 64)); // layer 1
        assert_eq!(stack.taps[1].dim(), (8, 32, 32)); // layer 5
        assert_eq!(stack.taps[2].dim(), (16, 16, 16)); // layer 9
        assert_eq!(stack.taps[3].dim(), (16, 16, 16)); // layer 13
        assert_eq!(stack.taps[4].dim(), (16, 16, 16)); // layer 17

        let (out2, _) = generator_forward(&gen, &x).unwrap();
        assert_eq!(out, out2);

        // not divisible by 4
        let bad = random_internal(66, 64, &mut r);
        assert!(generator_forward(&gen, &bad).is_err());
    }

    #[test]
    fn encoder_taps_match_full_forward() {
        let gen = Generator::init(small_spec(), &mut rng(3)).unwrap();
        let x = random_internal(32, 32, &mut rng(4));
        let (_, stack) = generator_forward(&gen, &x).unwrap();
        let mut tape = Tape::new();
        let ids = gen.params.insert_into(&mut tape, false);
        let xi = tape.constant(x.into_dyn());
        let taps = gen.forward_encoder(&mut tape, &ids, xi);
        assert_eq!(taps.len(), 5);
        for (t, full) in taps.iter().zip(&stack.taps) {
            assert_eq!(tape.value(*t), &full.clone().into_dyn());
        }
    }

    #[test]
    fn projection_unit_norm_cardinality_determinism() {
        let spec = small_spec();
        let gen = Generator::init(spec.clone(), &mut rng(5)).unwrap();
        let heads = ProjectionHeads::init(&spec, 32, &mut rng(6));
        let x = random_internal(32, 32, &mut rng(7));
        let (_, stack) = generator_forward(&gen, &x).unwrap();
        let mut r = rng(8);
        let locations: Vec<Vec<(usize, usize)>> = stack
            .taps
            .iter()
            .map(|t| {
                let (_, h, w) = t.dim();
                (0..64)
                    .map(|_| (r.gen_range(0..h), r.gen_range(0..w)))
                    .collect()
            })
            .collect();
        let embs = project(&heads, &stack, &locations).unwrap();
        assert_eq!(embs.len(), 5);
        for e in &embs {
            assert_eq!(e.dim(), (64, 32));
            for row in e.rows() {
                assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
            }
        }
        let embs2 = project(&heads, &stack, &locations).unwrap();
        assert_eq!(embs, embs2);

        // out-of-range location
        let mut bad = locations.clone();
        bad[0][0] = (1000, 0);
        assert!(project(&heads, &stack, &bad).is_err());
    }

    #[test]
    fn negative_generator_unit_norm_distinct_deterministic() {
        let spec = small_spec();
        let neg = NegativeGenerator::init(&spec, 32, 16, &mut rng(9));
        let mean_feats: Vec<Array1<f64>> = spec
            .taps
            .iter()
            .map(|&t| {
                let c = spec.tap_channels(t);
                Array1::from_shape_fn(c, |i| (i as f64 * 0.1).sin())
            })
            .collect();

        let mut r = rng(10);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let z1 = Array1::from_shape_fn(16, |_| dist.sample(&mut r));
        let out1 = negative_forward(&neg, &mean_feats, &z1).unwrap();
        assert_eq!(out1.len(), 5);
        for e in &out1 {
            assert!((e.dot(e).sqrt() - 1.0).abs() < 1e-5);
        }
        // fixed noise and parameters reproduce exactly
        let out1b = negative_forward(&neg, &mean_feats, &z1).unwrap();
        assert_eq!(out1, out1b);

        // distinct noises give distinct outputs, checked over 100 draws
        let mut distinct = 0;
        for _ in 0..100 {
            let z2 = Array1::from_shape_fn(16, |_| dist.sample(&mut r));
            let out2 = negative_forward(&neg, &mean_feats, &z2).unwrap();
            let gap: f64 = out1[0]
                .iter()
                .zip(out2[0].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if gap > 1e-8 {
                distinct += 1;
            }
        }
        assert!(distinct >= 99);

        // wrong noise dimension
        let zbad = Array1::zeros(8);
        assert!(negative_forward(&neg, &mean_feats, &zbad).is_err());

        // a 256-draw bank has 256 rows per tap
        let bank = negative_bank(&neg, &mean_feats, 256, &mut rng(11)).unwrap();
        assert_eq!(bank.negatives.len(), 5);
        for b in &bank.negatives {
            assert_eq!(b.dim().0, 256);
            for row in b.rows() {
                assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn discriminator_grid_and_receptive_field() {
        let disc = Discriminator::init(8, &mut rng(12));
        let x = random_internal(64, 64, &mut rng(13));
        let s = discriminator_forward(&disc, &x).unwrap();
        // receptive field from the layer stack: k=4 at strides 2,2,2,1,1
        let mut rf = 1usize;
        let mut stride_prod = 1usize;
        for s in [2usize, 2, 2, 1, 1] {
            rf += 3 * stride_prod;
            stride_prod *= s;
        }
        assert_eq!(rf, 70);
        assert_eq!(s.dim(), (6, 6));
        assert!(s.iter().all(|v| v.is_finite()));
        let s2 = discriminator_forward(&disc, &x).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn discriminator_shift_equivariance_interior() {
        let disc = Discriminator::init(4, &mut rng(14));
        let mut r = rng(15);
        // canvas wider than the input so both views share pixels
        let canvas = Array3::from_shape_fn((3, 96, 104), |_| r.gen_range(-1.0..1.0));
        let a = canvas.slice(ndarray::s![.., .., 0..96]).to_owned();
        let b = canvas.slice(ndarray::s![.., .., 8..104]).to_owned();
        let sa = discriminator_forward(&disc, &a).unwrap();
        let sb = discriminator_forward(&disc, &b).unwrap();
        // total stride is 8: shifting input by 8 shifts scores by one cell
        let (gh, gw) = sa.dim();
        for y in 3..gh - 3 {
            for x in 3..gw - 4 {
                assert!(
                    (sa[(y, x + 1)] - sb[(y, x)]).abs() < 1e-12,
                    "scores not shift-equivariant at ({y},{x})"
                );
            }
        }
    }

    #[test]
    fn init_reproducible_and_bounded() {
        let spec = small_spec();
        let g1 = Generator::init(spec.clone(), &mut rng(77)).unwrap();
        let g2 = Generator::init(spec.clone(), &mut rng(77)).unwrap();
        for i in 0..g1.params.len() {
            assert_eq!(g1.params.value(i), g2.params.value(i));
        }
        let g3 = Generator::init(spec, &mut rng(78)).unwrap();
        let mut any_diff = false;
        for i in 0..g1.params.len() {
            if g1.params.value(i) != g3.params.value(i) {
                any_diff = true;
            }
        }
        assert!(any_diff);
        for i in 0..g1.params.len() {
            for &v in g1.params.value(i).iter() {
                assert!(v.is_finite() && v.abs() < 1.0);
            }
        }
    }

    #[test]
    fn gradients_reach_generator_parameters() {
        // every parameter must receive some gradient from a loss touching
        // both the output image and the tapped features
        let spec = GeneratorSpec {
            base_width: 3,
            resblocks: 2,
            taps: vec![1, 5, 9, 11],
        };
        let gen = Generator::init(spec, &mut rng(20)).unwrap();
        let x = random_internal(16, 16, &mut rng(21));
        let mut tape = Tape::new();
        let ids = gen.params.insert_into(&mut tape, true);
        let xi = tape.constant(x.into_dyn());
        let (out, taps) = gen.forward(&mut tape, &ids, xi);
        let mut loss = tape.mean_all(out);
        for t in taps {
            let m = tape.mean_all(t);
            loss = tape.add(loss, m);
        }
        let grads = tape.backward(loss);
        for (i, &id) in ids.iter().enumerate() {
            let g = grads.wrt(&tape, id);
            let nonzero = g.iter().filter(|v| **v != 0.0).count();
            assert!(
                nonzero > 0,
                "parameter {} received no gradient",
                gen.params.name(i)
            );
        }
    }

    #[test]
    fn latent_code_sampling() {
        let mut r = rng(30);
        let code = LatentCode::sample(FactorCategory::TaskRelevant, 16, &mut r);
        assert_eq!(code.noise.len(), 16);
        assert_eq!(code.category, FactorCategory::TaskRelevant);
        // standard normal noise is not all equal
        let spread = code
            .noise
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        assert!(spread.1 > spread.0);
    }

    #[test]
    fn feature_stack_channel_axis_check() {
        let spec = small_spec();
        for &t in &spec.taps {
            let c = spec.tap_channels(t);
            let s = spec.tap_scale(t);
            assert!(c >= spec.base_width);
            assert!([1, 2, 4].contains(&s));
        }
        let es = EmbeddingSet::new(
            vec![Array2::zeros((4, 8))],
            vec![Array2::zeros((4, 8))],
        );
        assert!(es.is_ok());
        assert!(EmbeddingSet::new(vec![Array2::zeros((4, 8))], vec![]).is_err());
    }
}
