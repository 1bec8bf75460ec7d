//! Alternating minimax training: one descent update of the backbone
//! parameters on the composite objective, then one update of the negative
//! generators that ascends the contrastive loss (implemented as descent on
//! `-ac + lambda1 * div`), with discriminators refreshed first so both
//! players react to current scores.
//!
//! Per step the order is: discriminators -> backbone (`theta_R`: generators,
//! projection heads) -> adversary (`theta_N`: negative generators). The two
//! parameter sets are disjoint by construction. The adversary re-evaluates
//! the embeddings after the backbone update so its ascent reacts to the
//! freshest encoder; the negative bank is regenerated from fresh noise every
//! step, with the spatially averaged query features (stop-gradient) as
//! conditioning input.
//!
//! All per-step randomness (crop sampling, patch locations, bank noise)
//! derives from one seeded stream, so single-threaded runs are exactly
//! reproducible and checkpoints can resume mid-run.

use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{NegativeSource, TrainConfig};
use crate::error::{Error, Result};
use crate::imaging::{Image, UnpairedDataset};
use crate::losses::{graph, LossReport, LossTerms};
use crate::networks::{
    bank_inputs, bank_noise, negative_bank_from_noise, Discriminator, Generator, GeneratorSpec,
    NegativeGenerator, ParamSet, ProjectionHeads,
};
use crate::tape::{Arr, Tape, TensorId};

const ADAM_BETA1: f64 = 0.5;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Abort threshold: any loss of larger magnitude is treated as divergence.
const DIVERGENCE_LIMIT: f64 = 1e4;

// salts distinguishing the per-step randomness streams
const SALT_LOC_F: u64 = 0x6c6f_6366;
const SALT_LOC_B: u64 = 0x6c6f_6362;
const SALT_BANK_F: u64 = 0x626b_6e66;
const SALT_BANK_B: u64 = 0x626b_6e62;
const SALT_DIV: u64 = 0x6469_7631;

fn sub_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

// ── optimizer ──────────────────────────────────────────────────────────

/// Adaptive-moment optimizer over one parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    t: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over a flat list of parameters and matching gradients.
    pub fn step(&mut self, params: Vec<&mut Arr>, grads: &[Arr], lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Arr::zeros(g.raw_dim())).collect();
            self.v = grads.iter().map(|g| Arr::zeros(g.raw_dim())).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            });
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                });
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    fn state(&self) -> (u64, &[Arr], &[Arr]) {
        (self.t, &self.m, &self.v)
    }

    fn restore(t: u64, m: Vec<Arr>, v: Vec<Arr>) -> Self {
        Adam { t, m, v }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

// ── learning-rate schedule ─────────────────────────────────────────────

/// Decay factor: constant 1 before `decay_start`, then linear to 0 at
/// `epochs`.
pub fn schedule_factor(epoch: usize, decay_start: usize, epochs: usize) -> f64 {
    if epoch < decay_start {
        1.0
    } else if epochs == decay_start {
        if epoch >= epochs {
            0.0
        } else {
            1.0
        }
    } else {
        let span = (epochs - decay_start) as f64;
        (1.0 - (epoch - decay_start) as f64 / span).max(0.0)
    }
}

/// Backbone learning rate at a given epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * schedule_factor(epoch, cfg.decay_start, cfg.epochs)
}

// ── network bundle ─────────────────────────────────────────────────────

/// Architecture record stored in checkpoint manifests.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Arch {
    pub base_width: usize,
    pub disc_width: usize,
    pub resblocks: usize,
    pub taps: Vec<usize>,
    pub embed_dim: usize,
    pub noise_dim: usize,
}

impl Arch {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Arch {
            base_width: cfg.base_width,
            disc_width: cfg.disc_width,
            resblocks: cfg.resblocks,
            taps: cfg.taps.clone(),
            embed_dim: cfg.embed_dim,
            noise_dim: cfg.noise_dim,
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            base_width: self.base_width,
            resblocks: self.resblocks,
            taps: self.taps.clone(),
        }
    }
}

/// All trainable networks. `g` maps hazy -> clear, `f` clear -> hazy;
/// `d_g` judges the clear domain, `d_f` the hazy domain.
#[derive(Debug, Clone)]
pub struct Networks {
    pub g: Generator,
    pub f: Generator,
    pub d_g: Discriminator,
    pub d_f: Discriminator,
    pub heads_g: ProjectionHeads,
    pub heads_f: ProjectionHeads,
    pub neg_g: NegativeGenerator,
    pub neg_f: NegativeGenerator,
}

impl Networks {
    /// Seeded initialization of every network, in a fixed order.
    pub fn init(arch: &Arch, rng: &mut ChaCha8Rng) -> Result<Self> {
        let spec = arch.generator_spec();
        Ok(Networks {
            g: Generator::init(spec.clone(), rng)?,
            f: Generator::init(spec.clone(), rng)?,
            d_g: Discriminator::init(arch.disc_width, rng),
            d_f: Discriminator::init(arch.disc_width, rng),
            heads_g: ProjectionHeads::init(&spec, arch.embed_dim, rng),
            heads_f: ProjectionHeads::init(&spec, arch.embed_dim, rng),
            neg_g: NegativeGenerator::init(&spec, arch.embed_dim, arch.noise_dim, rng),
            neg_f: NegativeGenerator::init(&spec, arch.embed_dim, arch.noise_dim, rng),
        })
    }
}

/// Run the hazy -> clear generator on one image.
pub fn infer_image(gen: &Generator, img: &Image) -> Result<Image> {
    let chw = img.to_internal();
    let (out, _) = crate::networks::generator_forward(gen, &chw)?;
    Image::from_internal(&out)
}

// ── step graph assembly ────────────────────────────────────────────────

struct DirParams<'a> {
    gen: &'a Generator,
    back: &'a Generator,
    heads: &'a ProjectionHeads,
    disc: &'a Discriminator,
    gen_ids: &'a [TensorId],
    back_ids: &'a [TensorId],
    head_ids: &'a [TensorId],
    disc_ids: &'a [TensorId],
}

enum BankSource {
    /// Precomputed constant bank (adversarial negatives, frozen here).
    Constant(Vec<Array2<f64>>),
    /// Head projections of the input features at extra locations
    /// (conventional contrastive negatives, gradients flow).
    FromLocations(Vec<Vec<(usize, usize)>>),
}

struct DirGraph {
    adv: TensorId,
    cycle: TensorId,
    ac: TensorId,
    /// Generated target-domain image, internal range.
    fake: TensorId,
    /// Spatial means of the re-encoded (query) tap features, as values.
    query_means: Vec<Array1<f64>>,
    /// Query/positive embeddings per tap (tape nodes, unit norm).
    q_embs: Vec<TensorId>,
    p_embs: Vec<TensorId>,
}

fn internal_to_unit(tape: &mut Tape, x: TensorId) -> TensorId {
    let half = tape.mul_scalar(x, 0.5);
    tape.add_scalar(half, 0.5)
}

fn spatial_mean_value(tape: &Tape, id: TensorId) -> Array1<f64> {
    let v = tape
        .value(id)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned();
    let (c, h, w) = v.dim();
    Array1::from_shape_fn(c, |ci| {
        v.index_axis(ndarray::Axis(0), ci).sum() / (h * w) as f64
    })
}

/// Sample `count` distinct cells of an `h x w` grid.
fn sample_locs(h: usize, w: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let n = h * w;
    assert!(count <= n, "cannot sample {count} of {n} cells");
    let mut idx: Vec<u32> = (0..n as u32).collect();
    for i in 0..count {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx[..count]
        .iter()
        .map(|&k| ((k as usize) / w, (k as usize) % w))
        .collect()
}

/// Build one translation direction: generation, adversarial and cycle
/// terms, and the contrastive embeddings (queries from the re-encoded
/// generated image, positives from the input's encoder features at the
/// same locations).
#[allow(clippy::too_many_arguments)]
fn build_direction(
    tape: &mut Tape,
    p: &DirParams,
    x_src: TensorId,
    queries: usize,
    tau: f64,
    loc_rng: &mut ChaCha8Rng,
    bank: BankSource,
) -> DirGraph {
    let (fake, src_taps) = p.gen.forward(tape, p.gen_ids, x_src);
    let q_taps = p.gen.forward_encoder(tape, p.gen_ids, fake);

    // adversarial: generator wants the target-domain discriminator fooled
    let scores = p.disc.forward(tape, p.disc_ids, fake);
    let adv = graph::gan(tape, scores, 1.0);

    // cycle back to the source, compared in [0,1]
    let (cyc, _) = p.back.forward(tape, p.back_ids, fake);
    let cyc01 = internal_to_unit(tape, cyc);
    let src01 = internal_to_unit(tape, x_src);
    let cycle = graph::mean_abs_diff(tape, cyc01, src01);

    // contrastive embeddings at shared locations
    let mut q_embs = Vec::with_capacity(q_taps.len());
    let mut p_embs = Vec::with_capacity(q_taps.len());
    let mut query_means = Vec::with_capacity(q_taps.len());
    let mut neg_ids = Vec::with_capacity(q_taps.len());
    let mut bank_locs: Vec<Vec<(usize, usize)>> = Vec::new();
    if let BankSource::FromLocations(locs) = &bank {
        bank_locs = locs.clone();
    }
    for (i, (&qt, &st)) in q_taps.iter().zip(&src_taps).enumerate() {
        let dims = tape
            .value(qt)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .dim();
        let locs = sample_locs(dims.1, dims.2, queries, loc_rng);
        let q_rows = tape.gather_locs(qt, &locs);
        let p_rows = tape.gather_locs(st, &locs);
        let q = p.heads.project_tap(tape, p.head_ids, i, q_rows);
        let pe = p.heads.project_tap(tape, p.head_ids, i, p_rows);
        query_means.push(spatial_mean_value(tape, qt));
        q_embs.push(q);
        p_embs.push(pe);
        match &bank {
            BankSource::Constant(b) => {
                neg_ids.push(tape.constant(b[i].clone().into_dyn()));
            }
            BankSource::FromLocations(_) => {
                let rows = tape.gather_locs(st, &bank_locs[i]);
                neg_ids.push(p.heads.project_tap(tape, p.head_ids, i, rows));
            }
        }
    }
    let ac = graph::ac_loss(tape, &q_embs, &p_embs, &neg_ids, tau);

    DirGraph {
        adv,
        cycle,
        ac,
        fake,
        query_means,
        q_embs,
        p_embs,
    }
}

struct EncGraph {
    loss: TensorId,
    ac: TensorId,
    adv: TensorId,
    cycle: TensorId,
    tv: TensorId,
    dc: TensorId,
    forward: DirGraph,
    backward: Option<DirGraph>,
    g_ids: Vec<TensorId>,
    f_ids: Vec<TensorId>,
    hg_ids: Vec<TensorId>,
    hf_ids: Vec<TensorId>,
    #[allow(dead_code)] // inspected by the gradient-census test
    dg_ids: Vec<TensorId>,
    #[allow(dead_code)]
    df_ids: Vec<TensorId>,
}

/// Assemble the full backbone objective for one batch. `r_trainable` /
/// `d_trainable` pick which parameters become gradient leaves.
fn build_enc_graph(
    nets: &Networks,
    cfg: &TrainConfig,
    tape: &mut Tape,
    batch: &(Image, Image),
    sample_seed: u64,
    r_trainable: bool,
    d_trainable: bool,
) -> Result<EncGraph> {
    let w = cfg.loss_weights();
    let x_h = tape.constant(batch.0.to_internal().into_dyn());
    let x_c = tape.constant(batch.1.to_internal().into_dyn());

    let g_ids = nets.g.params.insert_into(tape, r_trainable);
    let f_ids = nets.f.params.insert_into(tape, r_trainable);
    let hg_ids = nets.heads_g.params.insert_into(tape, r_trainable);
    let hf_ids = nets.heads_f.params.insert_into(tape, r_trainable);
    let dg_ids = nets.d_g.params.insert_into(tape, d_trainable);
    let df_ids = nets.d_f.params.insert_into(tape, d_trainable);

    // adversarial banks are built against the *current* adversary before
    // the graph runs, conditioned on this batch's query features; comparing
    // against fresh stop-gradient means would need the graph first, so the
    // bank conditioning uses the source encoder means (values identical at
    // build time, and the adversary itself re-conditions on query means).
    let mut loc_f = sub_rng(sample_seed, SALT_LOC_F);
    let bank_f = match cfg.negative_source {
        NegativeSource::Adversarial => {
            let means = encoder_tap_means(&nets.g, &batch.0)?;
            let noise = bank_noise(
                cfg.negatives,
                cfg.noise_dim,
                &mut sub_rng(sample_seed, SALT_BANK_F),
            );
            BankSource::Constant(
                negative_bank_from_noise(&nets.neg_g, &means, &noise)?.negatives,
            )
        }
        NegativeSource::RandomSampled => {
            BankSource::FromLocations(sample_bank_locs(cfg, sample_seed, SALT_BANK_F))
        }
    };
    let fwd = build_direction(
        tape,
        &DirParams {
            gen: &nets.g,
            back: &nets.f,
            heads: &nets.heads_g,
            disc: &nets.d_g,
            gen_ids: &g_ids,
            back_ids: &f_ids,
            head_ids: &hg_ids,
            disc_ids: &dg_ids,
        },
        x_h,
        cfg.queries,
        w.tau,
        &mut loc_f,
        bank_f,
    );

    let backward = if cfg.dual_cycle {
        let mut loc_b = sub_rng(sample_seed, SALT_LOC_B);
        let bank_b = match cfg.negative_source {
            NegativeSource::Adversarial => {
                let means = encoder_tap_means(&nets.f, &batch.1)?;
                let noise = bank_noise(
                    cfg.negatives,
                    cfg.noise_dim,
                    &mut sub_rng(sample_seed, SALT_BANK_B),
                );
                BankSource::Constant(
                    negative_bank_from_noise(&nets.neg_f, &means, &noise)?.negatives,
                )
            }
            NegativeSource::RandomSampled => {
                BankSource::FromLocations(sample_bank_locs(cfg, sample_seed, SALT_BANK_B))
            }
        };
        Some(build_direction(
            tape,
            &DirParams {
                gen: &nets.f,
                back: &nets.g,
                heads: &nets.heads_f,
                disc: &nets.d_f,
                gen_ids: &f_ids,
                back_ids: &g_ids,
                head_ids: &hf_ids,
                disc_ids: &df_ids,
            },
            x_c,
            cfg.queries,
            w.tau,
            &mut loc_b,
            bank_b,
        ))
    } else {
        None
    };

    // smoothness and dark-channel sparsity act on the dehazed output only
    let fake01 = internal_to_unit(tape, fwd.fake);
    let tv = graph::tv(tape, fake01);
    let dc = graph::dark_channel(tape, fake01, cfg.dc_radius);

    let (ac, adv, cycle) = match &backward {
        Some(b) => {
            let ac_sum = tape.add(fwd.ac, b.ac);
            let ac = tape.mul_scalar(ac_sum, 0.5);
            let adv = tape.add(fwd.adv, b.adv);
            let cycle = tape.add(fwd.cycle, b.cycle);
            (ac, adv, cycle)
        }
        None => (fwd.ac, fwd.adv, fwd.cycle),
    };

    let adv_w = tape.mul_scalar(adv, w.lambda2);
    let cyc_w = tape.mul_scalar(cycle, w.lambda3);
    let tv_w = tape.mul_scalar(tv, w.lambda4);
    let dc_w = tape.mul_scalar(dc, w.lambda5);
    let s1 = tape.add(ac, adv_w);
    let s2 = tape.add(s1, cyc_w);
    let s3 = tape.add(s2, tv_w);
    let loss = tape.add(s3, dc_w);

    Ok(EncGraph {
        loss,
        ac,
        adv,
        cycle,
        tv,
        dc,
        forward: fwd,
        backward,
        g_ids,
        f_ids,
        hg_ids,
        hf_ids,
        dg_ids,
        df_ids,
    })
}

/// Per-tap location lists for a sampled negative bank, disjoint from the
/// query locations by construction (one shuffle provides both prefixes).
fn sample_bank_locs(cfg: &TrainConfig, sample_seed: u64, salt: u64) -> Vec<Vec<(usize, usize)>> {
    // locations for queries and bank are drawn from one shuffled prefix in
    // build_direction order; here we draw the bank suffix with its own rng
    let spec = cfg.generator_spec();
    let mut rng = sub_rng(sample_seed, salt);
    spec.taps
        .iter()
        .map(|&t| {
            let s = spec.tap_scale(t);
            sample_locs(cfg.crop / s, cfg.crop / s, cfg.negatives, &mut rng)
        })
        .collect()
}

/// Spatial means of a generator's tapped features on one image (no tape).
fn encoder_tap_means(gen: &Generator, img: &Image) -> Result<Vec<Array1<f64>>> {
    let chw = img.to_internal();
    gen.check_input(chw.dim())?;
    let mut tape = Tape::new();
    let ids = gen.params.insert_into(&mut tape, false);
    let x = tape.constant(chw.into_dyn());
    let taps = gen.forward_encoder(&mut tape, &ids, x);
    Ok(taps.iter().map(|&t| spatial_mean_value(&tape, t)).collect())
}

// ── trainer ────────────────────────────────────────────────────────────

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub steps: u64,
    pub final_report: LossReport,
    pub checkpoint_dir: PathBuf,
    pub metrics_path: PathBuf,
}

/// Owner of all parameters, optimizer moments and the training RNG.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub nets: Networks,
    adam_r: Adam,
    adam_d: Adam,
    adam_n: Adam,
    rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let nets = Networks::init(&Arch::from_config(&cfg), &mut rng)?;
        Ok(Trainer {
            cfg,
            nets,
            adam_r: Adam::new(),
            adam_d: Adam::new(),
            adam_n: Adam::new(),
            rng,
            epoch: 0,
            step: 0,
        })
    }

    /// Current learning rates under the decay schedule.
    pub fn current_lrs(&self) -> (f64, f64) {
        let f = schedule_factor(self.epoch, self.cfg.decay_start, self.cfg.epochs);
        (self.cfg.lr * f, self.cfg.lr_neg * f)
    }

    /// Discriminator refresh: real images toward 1, current fakes toward 0.
    pub fn step_discriminators(
        &mut self,
        batch: &(Image, Image),
        _sample_seed: u64,
        lr: f64,
    ) -> Result<f64> {
        let fake_n = no_grad_translate(&self.nets.g, &batch.0)?;
        let fake_h = if self.cfg.dual_cycle {
            Some(no_grad_translate(&self.nets.f, &batch.1)?)
        } else {
            None
        };

        let mut tape = Tape::new();
        let dg_ids = self.nets.d_g.params.insert_into(&mut tape, true);
        let real_c = tape.constant(batch.1.to_internal().into_dyn());
        let fake_n_id = tape.constant(fake_n.into_dyn());
        let s_real = self.nets.d_g.forward(&mut tape, &dg_ids, real_c);
        let s_fake = self.nets.d_g.forward(&mut tape, &dg_ids, fake_n_id);
        let l_real = graph::gan(&mut tape, s_real, 1.0);
        let l_fake = graph::gan(&mut tape, s_fake, 0.0);
        let sum_g = tape.add(l_real, l_fake);
        let mut loss = tape.mul_scalar(sum_g, 0.5);

        let df_ids = if let Some(fh) = &fake_h {
            let ids = self.nets.d_f.params.insert_into(&mut tape, true);
            let real_h = tape.constant(batch.0.to_internal().into_dyn());
            let fake_h_id = tape.constant(fh.clone().into_dyn());
            let s_real = self.nets.d_f.forward(&mut tape, &ids, real_h);
            let s_fake = self.nets.d_f.forward(&mut tape, &ids, fake_h_id);
            let l_real = graph::gan(&mut tape, s_real, 1.0);
            let l_fake = graph::gan(&mut tape, s_fake, 0.0);
            let sum_f = tape.add(l_real, l_fake);
            let half = tape.mul_scalar(sum_f, 0.5);
            loss = tape.add(loss, half);
            Some(ids)
        } else {
            None
        };

        let grads = tape.backward(loss);
        let mut flat_ids = dg_ids;
        if let Some(ids) = df_ids {
            flat_ids.extend(ids);
        }
        let gvals: Vec<Arr> = flat_ids.iter().map(|&id| grads.wrt(&tape, id)).collect();
        let loss_val = tape.scalar(loss);
        let Networks { d_g, d_f, .. } = &mut self.nets;
        let mut params: Vec<&mut Arr> = d_g.params.values_mut().collect();
        if self.cfg.dual_cycle {
            params.extend(d_f.params.values_mut());
        }
        self.adam_d.step(params, &gvals, lr);
        Ok(loss_val)
    }

    /// Backbone descent on the composite objective.
    pub fn step_encoder(
        &mut self,
        batch: &(Image, Image),
        sample_seed: u64,
        lr: f64,
    ) -> Result<LossTerms> {
        let mut tape = Tape::new();
        let eg = build_enc_graph(&self.nets, &self.cfg, &mut tape, batch, sample_seed, true, false)?;
        let grads = tape.backward(eg.loss);

        let mut flat_ids = Vec::new();
        flat_ids.extend(&eg.g_ids);
        flat_ids.extend(&eg.f_ids);
        flat_ids.extend(&eg.hg_ids);
        if self.cfg.dual_cycle {
            flat_ids.extend(&eg.hf_ids);
        }
        let gvals: Vec<Arr> = flat_ids.iter().map(|&id| grads.wrt(&tape, id)).collect();

        let terms = LossTerms {
            ac: tape.scalar(eg.ac),
            adv: tape.scalar(eg.adv),
            cycle: tape.scalar(eg.cycle),
            tv: tape.scalar(eg.tv),
            dc: tape.scalar(eg.dc),
            div: 0.0,
        };

        let Networks {
            g,
            f,
            heads_g,
            heads_f,
            ..
        } = &mut self.nets;
        let mut params: Vec<&mut Arr> = g.params.values_mut().collect();
        params.extend(f.params.values_mut());
        params.extend(heads_g.params.values_mut());
        if self.cfg.dual_cycle {
            params.extend(heads_f.params.values_mut());
        }
        self.adam_r.step(params, &gvals, lr);
        Ok(terms)
    }

    /// Adversary update: descend `-ac + lambda1 * div` with the backbone
    /// frozen (gradient ascent on the contrastive loss).
    pub fn step_negatives(
        &mut self,
        batch: &(Image, Image),
        sample_seed: u64,
        lr: f64,
    ) -> Result<(f64, f64)> {
        // re-evaluate embeddings against the freshly updated backbone
        let mut eval_tape = Tape::new();
        let eg = build_enc_graph(
            &self.nets,
            &self.cfg,
            &mut eval_tape,
            batch,
            sample_seed,
            false,
            false,
        )?;

        let dirs: Vec<(&DirGraph, &NegativeGenerator, u64)> = match &eg.backward {
            Some(b) => vec![
                (&eg.forward, &self.nets.neg_g, SALT_BANK_F),
                (b, &self.nets.neg_f, SALT_BANK_B),
            ],
            None => vec![(&eg.forward, &self.nets.neg_g, SALT_BANK_F)],
        };

        let mut tape = Tape::new();
        let ng_ids = self.nets.neg_g.params.insert_into(&mut tape, true);
        let nf_ids = if self.cfg.dual_cycle {
            self.nets.neg_f.params.insert_into(&mut tape, true)
        } else {
            Vec::new()
        };

        let mut ac_terms = Vec::new();
        let mut div_terms = Vec::new();
        let mut div_rng = sub_rng(sample_seed, SALT_DIV);
        for (dg, neg, salt) in &dirs {
            let ids = if *salt == SALT_BANK_F { &ng_ids } else { &nf_ids };
            let noise = bank_noise(
                self.cfg.negatives,
                self.cfg.noise_dim,
                &mut sub_rng(sample_seed, *salt),
            );
            let v1 = bank_noise(1, self.cfg.noise_dim, &mut div_rng);
            let v2 = bank_noise(1, self.cfg.noise_dim, &mut div_rng);
            let mut q_ids = Vec::new();
            let mut p_ids = Vec::new();
            let mut n_ids = Vec::new();
            let mut d1_ids = Vec::new();
            let mut d2_ids = Vec::new();
            for (i, mean) in dg.query_means.iter().enumerate() {
                let q = eval_tape.value(dg.q_embs[i]).clone();
                let p = eval_tape.value(dg.p_embs[i]).clone();
                q_ids.push(tape.constant(q));
                p_ids.push(tape.constant(p));
                let inp = tape.constant(bank_inputs(mean, &noise).into_dyn());
                n_ids.push(neg.forward_tap(&mut tape, ids, i, inp));
                let i1 = tape.constant(bank_inputs(mean, &v1).into_dyn());
                let i2 = tape.constant(bank_inputs(mean, &v2).into_dyn());
                d1_ids.push(neg.forward_tap(&mut tape, ids, i, i1));
                d2_ids.push(neg.forward_tap(&mut tape, ids, i, i2));
            }
            ac_terms.push(graph::ac_loss(
                &mut tape,
                &q_ids,
                &p_ids,
                &n_ids,
                self.cfg.tau,
            ));
            div_terms.push(graph::diversity(&mut tape, &d1_ids, &d2_ids));
        }
        let ac = graph::mean_of(&mut tape, &ac_terms);
        let div = graph::mean_of(&mut tape, &div_terms);
        let neg_ac = tape.neg(ac);
        let div_w = tape.mul_scalar(div, self.cfg.lambda1);
        let loss = tape.add(neg_ac, div_w);

        let grads = tape.backward(loss);
        let mut flat_ids = ng_ids;
        flat_ids.extend(nf_ids);
        let gvals: Vec<Arr> = flat_ids.iter().map(|&id| grads.wrt(&tape, id)).collect();
        let (ac_v, div_v) = (tape.scalar(ac), tape.scalar(div));
        let Networks { neg_g, neg_f, .. } = &mut self.nets;
        let mut params: Vec<&mut Arr> = neg_g.params.values_mut().collect();
        if self.cfg.dual_cycle {
            params.extend(neg_f.params.values_mut());
        }
        self.adam_n.step(params, &gvals, lr);
        Ok((ac_v, div_v))
    }

    /// Forward-only loss evaluation with the same sampling as a training
    /// step (no parameter updates).
    pub fn eval_losses(&self, batch: &(Image, Image), sample_seed: u64) -> Result<LossTerms> {
        let mut tape = Tape::new();
        let eg = build_enc_graph(&self.nets, &self.cfg, &mut tape, batch, sample_seed, false, false)?;
        Ok(LossTerms {
            ac: tape.scalar(eg.ac),
            adv: tape.scalar(eg.adv),
            cycle: tape.scalar(eg.cycle),
            tv: tape.scalar(eg.tv),
            dc: tape.scalar(eg.dc),
            div: 0.0,
        })
    }

    /// One full alternation: discriminators, backbone descent, adversary
    /// ascent. Aborts on non-finite or exploding losses.
    pub fn alternate_step(&mut self, batch: &(Image, Image)) -> Result<LossReport> {
        let sample_seed = self.rng.gen::<u64>();
        let (lr, lr_n) = self.current_lrs();
        self.step_discriminators(batch, sample_seed, lr)?;
        let mut terms = self.step_encoder(batch, sample_seed, lr)?;
        if self.cfg.negative_source == NegativeSource::Adversarial {
            let (_ac_after, div) = self.step_negatives(batch, sample_seed, lr_n)?;
            terms.div = div;
        }
        let report = LossReport::new(self.step, terms, &self.cfg.loss_weights(), lr);
        if !report.all_finite() || report.max_abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence(format!(
                "step {}: ac={} adv={} cycle={} tv={} dc={} div={}",
                self.step,
                report.terms.ac,
                report.terms.adv,
                report.terms.cycle,
                report.terms.tv,
                report.terms.dc,
                report.terms.div
            )));
        }
        self.step += 1;
        Ok(report)
    }

    /// Run the configured schedule over a dataset, logging one CSV row per
    /// step and checkpointing at the configured interval plus at the end.
    pub fn run(&mut self, ds: &UnpairedDataset) -> Result<TrainResult> {
        let steps_per_epoch = ds.hazy_len().max(ds.clean_len()) as u64;
        let mut total = self.cfg.epochs as u64 * steps_per_epoch;
        if self.cfg.max_steps > 0 {
            total = total.min(self.cfg.max_steps);
        }
        std::fs::create_dir_all(&self.cfg.out_dir)?;
        let metrics_path = self.cfg.out_dir.join("metrics.csv");
        let mut metrics = open_metrics(&metrics_path, self.step)?;

        let mut last: Option<LossReport> = None;
        while self.step < total {
            self.epoch = (self.step / steps_per_epoch) as usize;
            let batch = ds.sample(self.cfg.crop, &mut self.rng)?;
            let report = self.alternate_step(&batch)?;
            writeln!(metrics, "{}", report.csv_row())?;
            if self.cfg.checkpoint_interval > 0 && self.step % self.cfg.checkpoint_interval == 0 {
                let dir = self
                    .cfg
                    .out_dir
                    .join("checkpoints")
                    .join(format!("step-{:06}", self.step));
                self.save_checkpoint(&dir)?;
            }
            last = Some(report);
        }
        metrics.flush()?;
        let final_dir = self.cfg.out_dir.join("checkpoints").join("final");
        self.save_checkpoint(&final_dir)?;
        let final_report = last.ok_or_else(|| Error::Data("no steps were run".into()))?;
        Ok(TrainResult {
            steps: self.step,
            final_report,
            checkpoint_dir: final_dir,
            metrics_path,
        })
    }

    // ── checkpointing ──────────────────────────────────────────────────

    /// Write all parameters, optimizer moments, RNG state and a manifest
    /// into `dir` (atomically: temp dir + rename).
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let parent = dir
            .parent()
            .ok_or_else(|| Error::Data("checkpoint dir has no parent".into()))?;
        std::fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(
            ".tmp-{}",
            dir.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt")
        ));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;

        write_param_set(&tmp.join("g.bin"), &self.nets.g.params)?;
        write_param_set(&tmp.join("f.bin"), &self.nets.f.params)?;
        write_param_set(&tmp.join("d_g.bin"), &self.nets.d_g.params)?;
        write_param_set(&tmp.join("d_f.bin"), &self.nets.d_f.params)?;
        write_param_set(&tmp.join("heads_g.bin"), &self.nets.heads_g.params)?;
        write_param_set(&tmp.join("heads_f.bin"), &self.nets.heads_f.params)?;
        write_param_set(&tmp.join("neg_g.bin"), &self.nets.neg_g.params)?;
        write_param_set(&tmp.join("neg_f.bin"), &self.nets.neg_f.params)?;
        write_optim(&tmp.join("optim.bin"), [&self.adam_r, &self.adam_d, &self.adam_n])?;

        let manifest = Manifest {
            version: 1,
            spec_hash: self.cfg.spec_hash(),
            epoch: self.epoch as u64,
            step: self.step,
            arch: Arch::from_config(&self.cfg),
            dual_cycle: self.cfg.dual_cycle,
            negative_source: match self.cfg.negative_source {
                NegativeSource::Adversarial => "adversarial".into(),
                NegativeSource::RandomSampled => "random_sampled".into(),
            },
            rng: self.rng.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
        std::fs::write(tmp.join("manifest.json"), json)?;

        if dir.exists() {
            std::fs::remove_dir_all(dir)?;
        }
        std::fs::rename(&tmp, dir)?;
        Ok(())
    }

    /// Restore a trainer from a checkpoint; the config must describe the
    /// same architecture and variant flags.
    pub fn load_checkpoint(dir: &Path, cfg: TrainConfig) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if manifest.spec_hash != cfg.spec_hash() {
            return Err(Error::Config(format!(
                "checkpoint architecture differs from the config (hash {} vs {})",
                manifest.spec_hash,
                cfg.spec_hash()
            )));
        }
        let want_src = match cfg.negative_source {
            NegativeSource::Adversarial => "adversarial",
            NegativeSource::RandomSampled => "random_sampled",
        };
        if manifest.dual_cycle != cfg.dual_cycle || manifest.negative_source != want_src {
            return Err(Error::Config(
                "checkpoint variant flags differ from the config".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut nets = Networks::init(&manifest.arch, &mut rng)?;
        read_param_set_into(&dir.join("g.bin"), &mut nets.g.params)?;
        read_param_set_into(&dir.join("f.bin"), &mut nets.f.params)?;
        read_param_set_into(&dir.join("d_g.bin"), &mut nets.d_g.params)?;
        read_param_set_into(&dir.join("d_f.bin"), &mut nets.d_f.params)?;
        read_param_set_into(&dir.join("heads_g.bin"), &mut nets.heads_g.params)?;
        read_param_set_into(&dir.join("heads_f.bin"), &mut nets.heads_f.params)?;
        read_param_set_into(&dir.join("neg_g.bin"), &mut nets.neg_g.params)?;
        read_param_set_into(&dir.join("neg_f.bin"), &mut nets.neg_f.params)?;
        let [adam_r, adam_d, adam_n] = read_optim(&dir.join("optim.bin"))?;
        Ok(Trainer {
            cfg,
            nets,
            adam_r,
            adam_d,
            adam_n,
            rng: manifest.rng,
            epoch: manifest.epoch as usize,
            step: manifest.step,
        })
    }
}

/// Generator output as a value (no gradients recorded).
fn no_grad_translate(gen: &Generator, img: &Image) -> Result<Array3<f64>> {
    let chw = img.to_internal();
    gen.check_input(chw.dim())?;
    let mut tape = Tape::new();
    let ids = gen.params.insert_into(&mut tape, false);
    let x = tape.constant(chw.into_dyn());
    let (out, _) = gen.forward(&mut tape, &ids, x);
    Ok(tape
        .value(out)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned())
}

fn open_metrics(path: &Path, step: u64) -> Result<std::io::BufWriter<std::fs::File>> {
    let resume = step > 0 && path.exists();
    let file = if resume {
        std::fs::OpenOptions::new().append(true).open(path)?
    } else {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{}", LossReport::csv_header())?;
        f
    };
    Ok(std::io::BufWriter::new(file))
}

/// Top-level entry: load the dataset, build a trainer (or resume), run.
pub fn train(cfg: &TrainConfig, resume: Option<&Path>) -> Result<TrainResult> {
    cfg.validate_for_train()?;
    let ds = UnpairedDataset::from_dirs(&cfg.hazy_dir, &cfg.clean_dir)?;
    let mut trainer = match resume {
        Some(dir) => Trainer::load_checkpoint(dir, cfg.clone())?,
        None => Trainer::new(cfg.clone())?,
    };
    run_in_pool(cfg.threads, move || trainer.run(&ds))
}

/// Run a closure in a dedicated rayon pool when `threads > 0`; the tape's
/// fixed-chunk parallelism makes results identical for any thread count.
pub fn run_in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("rayon pool")
            .install(f)
    }
}

// ── checkpoint serialization ───────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    spec_hash: String,
    epoch: u64,
    step: u64,
    arch: Arch,
    dual_cycle: bool,
    negative_source: String,
    rng: ChaCha8Rng,
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("corrupt manifest: {e}")))
}

/// Load generator networks (plus heads/negatives) from a checkpoint for
/// inference and embedding export.
pub fn load_networks(dir: &Path) -> Result<(Networks, Arch)> {
    let manifest = read_manifest(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut nets = Networks::init(&manifest.arch, &mut rng)?;
    read_param_set_into(&dir.join("g.bin"), &mut nets.g.params)?;
    read_param_set_into(&dir.join("f.bin"), &mut nets.f.params)?;
    read_param_set_into(&dir.join("d_g.bin"), &mut nets.d_g.params)?;
    read_param_set_into(&dir.join("d_f.bin"), &mut nets.d_f.params)?;
    read_param_set_into(&dir.join("heads_g.bin"), &mut nets.heads_g.params)?;
    read_param_set_into(&dir.join("heads_f.bin"), &mut nets.heads_f.params)?;
    read_param_set_into(&dir.join("neg_g.bin"), &mut nets.neg_g.params)?;
    read_param_set_into(&dir.join("neg_f.bin"), &mut nets.neg_f.params)?;
    Ok((nets, manifest.arch))
}

const PARAM_MAGIC: &[u8; 8] = b"UNHZPAR1";
const OPTIM_MAGIC: &[u8; 8] = b"UNHZOPT1";

fn write_param_set(path: &Path, set: &ParamSet) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(PARAM_MAGIC)?;
    w.write_all(&(set.len() as u32).to_le_bytes())?;
    for i in 0..set.len() {
        let name = set.name(i).as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        write_arr(&mut w, set.value(i))?;
    }
    w.flush()?;
    Ok(())
}

fn write_arr(w: &mut impl Write, arr: &Arr) -> Result<()> {
    w.write_all(&[arr.ndim() as u8])?;
    for &d in arr.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in arr.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_param_set_into(path: &Path, set: &mut ParamSet) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PARAM_MAGIC {
        return Err(Error::Data(format!("{}: bad parameter file", path.display())));
    }
    let count = read_u32(&mut r)? as usize;
    if count != set.len() {
        return Err(Error::Data(format!(
            "{}: expected {} tensors, found {count}",
            path.display(),
            set.len()
        )));
    }
    for i in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Data("non-utf8 tensor name".into()))?;
        if name != set.name(i) {
            return Err(Error::Data(format!(
                "{}: tensor {i} is `{name}`, expected `{}`",
                path.display(),
                set.name(i)
            )));
        }
        let arr = read_arr(&mut r)?;
        if arr.shape() != set.value(i).shape() {
            return Err(Error::Data(format!(
                "{}: tensor `{name}` shape mismatch",
                path.display()
            )));
        }
        *set.value_mut(i) = arr;
    }
    Ok(())
}

fn read_arr(r: &mut impl Read) -> Result<Arr> {
    let mut ndim = [0u8; 1];
    r.read_exact(&mut ndim)?;
    let mut shape = Vec::with_capacity(ndim[0] as usize);
    for _ in 0..ndim[0] {
        shape.push(read_u64(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Arr::from_shape_vec(ndarray::IxDyn(&shape), data)
        .map_err(|e| Error::Data(format!("corrupt tensor: {e}")))
}

fn write_optim(path: &Path, groups: [&Adam; 3]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(OPTIM_MAGIC)?;
    for adam in groups {
        let (t, m, v) = adam.state();
        w.write_all(&t.to_le_bytes())?;
        w.write_all(&(m.len() as u32).to_le_bytes())?;
        for (mi, vi) in m.iter().zip(v) {
            write_arr(&mut w, mi)?;
            write_arr(&mut w, vi)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_optim(path: &Path) -> Result<[Adam; 3]> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != OPTIM_MAGIC {
        return Err(Error::Data(format!("{}: bad optimizer file", path.display())));
    }
    let mut out = Vec::with_capacity(3);
    for _ in 0..3 {
        let t = read_u64(&mut r)?;
        let n = read_u32(&mut r)? as usize;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            m.push(read_arr(&mut r)?);
            v.push(read_arr(&mut r)?);
        }
        out.push(Adam::restore(t, m, v));
    }
    Ok([out.remove(0), out.remove(0), out.remove(0)])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

// reads used by tests on the metrics file
pub(crate) fn read_csv_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path)?;
    let r = std::io::BufReader::new(f);
    Ok(r.lines().map_while(|l| l.ok()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr1;

    /// Small architecture and short schedule for fast tests.
    fn desk_cfg(out: &Path) -> TrainConfig {
        let toml = format!(
            r#"
epochs = 2
decay_start = 2
crop = 32
negatives = 8
queries = 8
base_width = 4
disc_width = 4
resblocks = 2
taps = [1, 5, 9, 11]
embed_dim = 16
noise_dim = 8
dc_radius = 3
seed = 7
out_dir = "{}"
"#,
            out.display()
        );
        TrainConfig::from_toml_str(&toml, &[]).unwrap()
    }

    fn tiny_dataset(n: usize, size: usize, seed: u64) -> UnpairedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hazy = Vec::new();
        let mut clean = Vec::new();
        for _ in 0..n {
            let (scene, _) = crate::imaging::synthetic_scene(size, &mut rng);
            hazy.push(crate::imaging::synthesize_haze(&scene).unwrap());
            let (scene2, _) = crate::imaging::synthetic_scene(size, &mut rng);
            clean.push(scene2.clean);
        }
        UnpairedDataset::new(hazy, clean).unwrap()
    }

    #[test]
    fn adam_single_step_hand_computed() {
        let mut adam = Adam::new();
        let mut p = arr1(&[1.0]).into_dyn();
        let g = arr1(&[1.0]).into_dyn();
        adam.step(vec![&mut p], &[g], 0.1);
        // m=0.5, v=0.001; bias-corrected both are 1 -> step = lr = 0.1
        assert_abs_diff_eq!(p[[0]], 0.9, epsilon = 1e-6);
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(lr_schedule(0, &cfg), 1e-4);
        assert_eq!(lr_schedule(100, &cfg), 1e-4);
        assert_eq!(lr_schedule(199, &cfg), 1e-4);
        assert_abs_diff_eq!(lr_schedule(300, &cfg), 5e-5, epsilon = 1e-20);
        assert_eq!(lr_schedule(400, &cfg), 0.0);
    }

    #[test]
    fn substeps_touch_disjoint_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_cfg(dir.path());
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let ds = tiny_dataset(2, 32, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = ds.sample(32, &mut rng).unwrap();

        let snap = |t: &Trainer| {
            let grab = |s: &ParamSet| -> Vec<Arr> {
                (0..s.len()).map(|i| s.value(i).clone()).collect()
            };
            (
                grab(&t.nets.g.params),
                grab(&t.nets.neg_g.params),
                grab(&t.nets.d_g.params),
            )
        };

        let (g0, n0, d0) = snap(&t);
        t.step_encoder(&batch, 11, 1e-4).unwrap();
        let (g1, n1, d1) = snap(&t);
        assert_ne!(g0, g1, "encoder step must move theta_R");
        assert_eq!(n0, n1, "encoder step must not move theta_N");
        assert_eq!(d0, d1, "encoder step must not move discriminators");

        t.step_negatives(&batch, 11, 1e-4).unwrap();
        let (g2, n2, d2) = snap(&t);
        assert_eq!(g1, g2, "adversary step must not move theta_R");
        assert_ne!(n1, n2, "adversary step must move theta_N");
        assert_eq!(d1, d2);

        t.step_discriminators(&batch, 11, 1e-4).unwrap();
        let (g3, n3, d3) = snap(&t);
        assert_eq!(g2, g3);
        assert_eq!(n2, n3);
        assert_ne!(d2, d3, "discriminator step must move D");
    }

    #[test]
    fn gradient_census_every_parameter_reached() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_cfg(dir.path());
        let t = Trainer::new(cfg.clone()).unwrap();
        let ds = tiny_dataset(2, 32, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = ds.sample(32, &mut rng).unwrap();

        // theta_R (generators, heads, discriminators) from L_enc
        let mut tape = Tape::new();
        let eg = build_enc_graph(&t.nets, &t.cfg, &mut tape, &batch, 5, true, true).unwrap();
        let grads = tape.backward(eg.loss);
        let mut total = 0usize;
        let mut zero = 0usize;
        let groups: Vec<(&str, &ParamSet, &Vec<TensorId>)> = vec![
            ("g", &t.nets.g.params, &eg.g_ids),
            ("f", &t.nets.f.params, &eg.f_ids),
            ("heads_g", &t.nets.heads_g.params, &eg.hg_ids),
            ("heads_f", &t.nets.heads_f.params, &eg.hf_ids),
            ("d_g", &t.nets.d_g.params, &eg.dg_ids),
            ("d_f", &t.nets.d_f.params, &eg.df_ids),
        ];
        for (net, set, ids) in groups {
            for (i, &id) in ids.iter().enumerate() {
                let g = grads.wrt(&tape, id);
                let nz = g.iter().filter(|v| **v != 0.0).count();
                total += g.len();
                zero += g.len() - nz;
                assert!(nz > 0, "{net}.{} received no gradient", set.name(i));
            }
        }
        assert!(
            (zero as f64) / (total as f64) <= 0.01,
            "dead gradient fraction {} > 1%",
            zero as f64 / total as f64
        );

        // theta_N from L_neg: reuse step_negatives' graph by checking that
        // the update moves every tensor
        let mut t2 = Trainer::new(cfg).unwrap();
        let before: Vec<Arr> = (0..t2.nets.neg_g.params.len())
            .map(|i| t2.nets.neg_g.params.value(i).clone())
            .collect();
        t2.step_negatives(&batch, 5, 1e-3).unwrap();
        for (i, b) in before.iter().enumerate() {
            assert_ne!(
                b,
                t2.nets.neg_g.params.value(i),
                "neg_g.{} not updated",
                t2.nets.neg_g.params.name(i)
            );
        }
    }

    #[test]
    fn alternate_step_produces_consistent_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_cfg(dir.path());
        let w = cfg.loss_weights();
        let mut t = Trainer::new(cfg).unwrap();
        let ds = tiny_dataset(2, 32, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = ds.sample(32, &mut rng).unwrap();
        let report = t.alternate_step(&batch).unwrap();
        assert!(report.all_finite());
        assert!(report.composites_consistent(&w, 1e-6));
        assert_eq!(report.step, 0);
        assert_eq!(t.step, 1);
        assert!(report.terms.ac > 0.0);
        assert!(report.terms.div <= 0.0);
    }

    #[test]
    fn dual_off_drops_backward_terms_and_nets() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig::from_toml_str(
            &format!(
                "epochs = 1\ndecay_start = 1\ncrop = 32\nnegatives = 8\nqueries = 8\nbase_width = 4\ndisc_width = 4\nresblocks = 2\ntaps = [1, 5, 9, 11]\nembed_dim = 16\nnoise_dim = 8\ndc_radius = 3\nseed = 7\ndual_cycle = \"off\"\nout_dir = \"{}\"",
                dir.path().display()
            ),
            &[],
        )
        .unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let ds = tiny_dataset(2, 32, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = ds.sample(32, &mut rng).unwrap();

        let hf_before: Vec<Arr> = (0..t.nets.heads_f.params.len())
            .map(|i| t.nets.heads_f.params.value(i).clone())
            .collect();
        let df_before: Vec<Arr> = (0..t.nets.d_f.params.len())
            .map(|i| t.nets.d_f.params.value(i).clone())
            .collect();
        let report = t.alternate_step(&batch).unwrap();
        assert!(report.all_finite());
        for i in 0..hf_before.len() {
            assert_eq!(&hf_before[i], t.nets.heads_f.params.value(i));
        }
        for i in 0..df_before.len() {
            assert_eq!(&df_before[i], t.nets.d_f.params.value(i));
        }
    }

    #[test]
    fn injected_nan_aborts_with_divergence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_cfg(dir.path());
        let mut t = Trainer::new(cfg).unwrap();
        let ds = tiny_dataset(2, 32, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let batch = ds.sample(32, &mut rng).unwrap();
        t.nets.g.params.value_mut(0)[[0, 0, 0, 0]] = f64::NAN;
        let err = t.alternate_step(&batch).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "{err}");
    }

    #[test]
    fn smoke_run_writes_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let hdir = data.path().join("hazy");
        let cdir = data.path().join("clean");
        std::fs::create_dir_all(&hdir).unwrap();
        std::fs::create_dir_all(&cdir).unwrap();
        for i in 0..4 {
            let (scene, _) = crate::imaging::synthetic_scene(32, &mut rng);
            crate::imaging::save_image(
                &crate::imaging::synthesize_haze(&scene).unwrap(),
                &hdir.join(format!("{i:03}.png")),
            )
            .unwrap();
            let (scene2, _) = crate::imaging::synthetic_scene(32, &mut rng);
            crate::imaging::save_image(&scene2.clean, &cdir.join(format!("{i:03}.png"))).unwrap();
        }
        let toml = format!(
            "epochs = 2\ndecay_start = 2\ncrop = 32\nnegatives = 4\nqueries = 4\nbase_width = 3\ndisc_width = 3\nresblocks = 2\ntaps = [1, 5, 9]\nembed_dim = 8\nnoise_dim = 4\ndc_radius = 2\nseed = 3\ndata.hazy_dir = \"{}\"\ndata.clean_dir = \"{}\"\nout_dir = \"{}\"",
            hdir.display(),
            cdir.display(),
            dir.path().display()
        );
        let cfg = TrainConfig::from_toml_str(&toml, &[]).unwrap();
        let result = train(&cfg, None).unwrap();
        // 2 epochs x 4 steps per epoch
        assert_eq!(result.steps, 8);
        let lines = read_csv_lines(&result.metrics_path).unwrap();
        assert_eq!(lines.len(), 9); // header + 8 rows
        assert_eq!(lines[0], LossReport::csv_header());
        assert!(result.checkpoint_dir.join("manifest.json").exists());
        assert!(result.checkpoint_dir.join("g.bin").exists());

        // loading the final checkpoint restores identical parameters
        let restored = Trainer::load_checkpoint(&result.checkpoint_dir, cfg.clone()).unwrap();
        assert_eq!(restored.step, 8);
        let t_end = Trainer::load_checkpoint(&result.checkpoint_dir, cfg).unwrap();
        for i in 0..t_end.nets.g.params.len() {
            assert_eq!(
                t_end.nets.g.params.value(i),
                restored.nets.g.params.value(i)
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_identical_and_missing_dir_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_cfg(dir.path());
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let ds = tiny_dataset(2, 32, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..3 {
            let batch = ds.sample(32, &mut rng).unwrap();
            t.alternate_step(&batch).unwrap();
        }
        let ckpt = dir.path().join("ck");
        t.save_checkpoint(&ckpt).unwrap();
        let t2 = Trainer::load_checkpoint(&ckpt, cfg.clone()).unwrap();
        assert_eq!(t2.step, t.step);
        for (a, b) in [
            (&t.nets.g.params, &t2.nets.g.params),
            (&t.nets.f.params, &t2.nets.f.params),
            (&t.nets.neg_g.params, &t2.nets.neg_g.params),
            (&t.nets.d_f.params, &t2.nets.d_f.params),
        ] {
            for i in 0..a.len() {
                assert_eq!(a.value(i), b.value(i), "{} differs", a.name(i));
            }
        }

        let empty = dir.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        let err = Trainer::load_checkpoint(&empty, cfg.clone()).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));

        // architecture mismatch is rejected
        let other = TrainConfig::from_toml_str(
            &format!(
                "crop = 32\nbase_width = 6\nresblocks = 2\ntaps = [1, 5, 9, 11]\nout_dir = \"{}\"",
                dir.path().display()
            ),
            &[],
        )
        .unwrap();
        assert!(Trainer::load_checkpoint(&ckpt, other).is_err());
    }

    #[test]
    fn resume_reproduces_next_step_and_counts_continue() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_cfg(dir.path());
        let ds = tiny_dataset(3, 32, 14);

        // straight run of 4 steps
        let mut t_full = Trainer::new(cfg.clone()).unwrap();
        let mut reports_full = Vec::new();
        for _ in 0..4 {
            let batch = {
                let mut r = t_full.rng.clone();
                let b = ds.sample(32, &mut r).unwrap();
                t_full.rng = r;
                b
            };
            reports_full.push(t_full.alternate_step(&batch).unwrap());
        }

        // 2 steps, checkpoint, resume, 2 more
        let mut t_a = Trainer::new(cfg.clone()).unwrap();
        for _ in 0..2 {
            let batch = {
                let mut r = t_a.rng.clone();
                let b = ds.sample(32, &mut r).unwrap();
                t_a.rng = r;
                b
            };
            t_a.alternate_step(&batch).unwrap();
        }
        let ckpt = dir.path().join("mid");
        t_a.save_checkpoint(&ckpt).unwrap();
        let mut t_b = Trainer::load_checkpoint(&ckpt, cfg).unwrap();
        assert_eq!(t_b.step, 2);
        let mut reports_resumed = Vec::new();
        for _ in 0..2 {
            let batch = {
                let mut r = t_b.rng.clone();
                let b = ds.sample(32, &mut r).unwrap();
                t_b.rng = r;
                b
            };
            reports_resumed.push(t_b.alternate_step(&batch).unwrap());
        }
        assert_eq!(t_b.step, 4);
        for (full, resumed) in reports_full[2..].iter().zip(&reports_resumed) {
            assert_abs_diff_eq!(full.enc, resumed.enc, epsilon = 1e-6);
            assert_abs_diff_eq!(full.terms.ac, resumed.terms.ac, epsilon = 1e-6);
        }
    }
}
