//! Scalar objectives: similarity kernel, adversarial contrastive loss,
//! diversity, total variation, dark channel, GAN and cycle losses, and the
//! two composite objectives.
//!
//! Every loss exists twice: as a pure `f64` function here (the reference
//! route used for reporting and as the finite-difference oracle) and as a
//! tape builder in [`graph`] (the differentiable route used for training).
//! Reductions: total variation sums over pixels and channels; dark channel,
//! cycle and diversity use means; the contrastive loss averages over queries
//! and then over tap layers.
//!
//! Image-space losses (cycle, tv, dark channel) are defined on the external
//! `[0,1]` intensity convention.

use ndarray::{Array2, ArrayView1, ArrayView3};

use crate::error::{Error, Result};
use crate::imaging::{dark_channel, Image};
use crate::networks::{negative_forward, EmbeddingSet, NegativeBank, NegativeGenerator};

/// Balance weights and temperature for the composite objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// Diversity weight inside the adversary's objective.
    pub lambda1: f64,
    /// GAN weight.
    pub lambda2: f64,
    /// Cycle-consistency weight.
    pub lambda3: f64,
    /// Total-variation weight.
    pub lambda4: f64,
    /// Dark-channel weight.
    pub lambda5: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.1,
            lambda4: 1e-3,
            lambda5: 1e-2,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::InvalidInput(format!(
                "temperature must be > 0, got {}",
                self.tau
            )));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Exponentiated cosine similarity: `exp(u.v / (|u||v| tau))`.
pub fn similarity(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::InvalidInput("temperature must be > 0".into()));
    }
    if u.len() != v.len() {
        return Err(Error::InvalidInput("similarity dimension mismatch".into()));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        return Err(Error::InvalidInput("similarity of zero vector".into()));
    }
    Ok((u.dot(&v) / (nu * nv * tau)).exp())
}

/// Contrastive loss against a generated negative bank: per query
/// `-log(sim(f,f+) / (sim(f,f+) + sum_i sim(f,f-_i)))`, averaged over
/// queries, then over tap layers.
pub fn adversarial_contrastive_loss(
    embeddings: &EmbeddingSet,
    bank: &NegativeBank,
    tau: f64,
) -> Result<f64> {
    if bank.negatives.len() != embeddings.queries.len() {
        return Err(Error::InvalidInput(
            "bank must cover the same taps as the embeddings".into(),
        ));
    }
    let mut tap_sum = 0.0;
    for ((q, p), negs) in embeddings
        .queries
        .iter()
        .zip(&embeddings.positives)
        .zip(&bank.negatives)
    {
        if negs.dim().0 == 0 {
            return Err(Error::InvalidInput("empty negative bank".into()));
        }
        if negs.dim().1 != q.dim().1 {
            return Err(Error::InvalidInput(
                "negative embedding dimension mismatch".into(),
            ));
        }
        let mut query_sum = 0.0;
        for (qr, pr) in q.rows().into_iter().zip(p.rows()) {
            let s_pos = similarity(qr, pr, tau)?;
            let mut denom = s_pos;
            for nr in negs.rows() {
                denom += similarity(qr, nr, tau)?;
            }
            query_sum += -(s_pos / denom).ln();
        }
        tap_sum += query_sum / q.dim().0 as f64;
    }
    Ok(tap_sum / embeddings.queries.len() as f64)
}

/// Negated mean absolute difference between two negative-generator outputs.
pub fn diversity_from_outputs(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidInput("diversity shape mismatch".into()));
    }
    let n = a.len() as f64;
    Ok(-(a - b).mapv(f64::abs).sum() / n)
}

/// Diversity of a negative generator under two noise draws, averaged over
/// taps. Always <= 0; more negative means more diverse.
pub fn diversity_loss(
    gen: &NegativeGenerator,
    mean_feats: &[ndarray::Array1<f64>],
    v1: &ndarray::Array1<f64>,
    v2: &ndarray::Array1<f64>,
) -> Result<f64> {
    if v1.len() != v2.len() {
        return Err(Error::InvalidInput("noise dimension mismatch".into()));
    }
    let o1 = negative_forward(gen, mean_feats, v1)?;
    let o2 = negative_forward(gen, mean_feats, v2)?;
    let mut sum = 0.0;
    for (a, b) in o1.iter().zip(&o2) {
        let n = a.len() as f64;
        sum += -(a - b).mapv(f64::abs).sum() / n;
    }
    Ok(sum / o1.len() as f64)
}

/// Total variation on a `(C,H,W)` grid: L1 norm of horizontal plus vertical
/// forward differences, summed over pixels and channels.
pub fn tv_grid(x: &ArrayView3<'_, f64>) -> f64 {
    let (c, h, w) = x.dim();
    let mut sum = 0.0;
    for ci in 0..c {
        for y in 0..h {
            for xw in 0..w.saturating_sub(1) {
                sum += (x[(ci, y, xw + 1)] - x[(ci, y, xw)]).abs();
            }
        }
        for y in 0..h.saturating_sub(1) {
            for xw in 0..w {
                sum += (x[(ci, y + 1, xw)] - x[(ci, y, xw)]).abs();
            }
        }
    }
    sum
}

/// Total variation of an image (1x1 images have no differences: 0).
pub fn tv_loss(img: &Image) -> f64 {
    let (h, w, _) = img.data().dim();
    let mut sum = 0.0;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                sum += (img.data()[(y, x + 1, c)] - img.data()[(y, x, c)]).abs();
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                sum += (img.data()[(y + 1, x, c)] - img.data()[(y, x, c)]).abs();
            }
        }
    }
    sum
}

/// Mean of the dark channel, encouraging its sparsity on dehazed outputs.
pub fn dark_channel_loss(img: &Image, radius: usize) -> f64 {
    let d = dark_channel(img, radius);
    d.sum() / d.len() as f64
}

/// Label a patch-score grid should match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanTarget {
    Real,
    Fake,
}

impl GanTarget {
    pub fn value(self) -> f64 {
        match self {
            GanTarget::Real => 1.0,
            GanTarget::Fake => 0.0,
        }
    }
}

/// Least-squares GAN loss: mean squared deviation from the target label.
pub fn gan_loss(scores: &Array2<f64>, target: GanTarget) -> f64 {
    let t = target.value();
    scores.mapv(|s| (s - t) * (s - t)).sum() / scores.len() as f64
}

/// Cycle-consistency: mean absolute difference between two images.
pub fn cycle_loss(a: &Image, b: &Image) -> Result<f64> {
    a.mean_abs_diff(b)
}

/// Raw loss terms entering the composites.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub ac: f64,
    pub adv: f64,
    pub cycle: f64,
    pub tv: f64,
    pub dc: f64,
    pub div: f64,
}

/// Backbone objective: `ac + l2*adv + l3*cycle + l4*tv + l5*dc`.
pub fn encoder_objective(terms: &LossTerms, w: &LossWeights) -> f64 {
    terms.ac
        + w.lambda2 * terms.adv
        + w.lambda3 * terms.cycle
        + w.lambda4 * terms.tv
        + w.lambda5 * terms.dc
}

/// Adversary objective: `-ac + l1*div`.
pub fn negative_objective(ac: f64, div: f64, w: &LossWeights) -> f64 {
    -ac + w.lambda1 * div
}

/// One training step's named losses and composites.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub terms: LossTerms,
    pub enc: f64,
    pub neg: f64,
    pub lr: f64,
}

impl LossReport {
    /// Assemble a report; composites are derived from the terms.
    pub fn new(step: u64, terms: LossTerms, w: &LossWeights, lr: f64) -> Self {
        LossReport {
            step,
            terms,
            enc: encoder_objective(&terms, w),
            neg: negative_objective(terms.ac, terms.div, w),
            lr,
        }
    }

    pub fn csv_header() -> &'static str {
        "step,ac,adv,cycle,tv,dc,div,enc,neg,lr"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.terms.ac,
            self.terms.adv,
            self.terms.cycle,
            self.terms.tv,
            self.terms.dc,
            self.terms.div,
            self.enc,
            self.neg,
            self.lr
        )
    }

    /// Recompute the composites from the stored terms and compare.
    pub fn composites_consistent(&self, w: &LossWeights, tol: f64) -> bool {
        (self.enc - encoder_objective(&self.terms, w)).abs() <= tol
            && (self.neg - negative_objective(self.terms.ac, self.terms.div, w)).abs() <= tol
    }

    /// All terms and composites finite.
    pub fn all_finite(&self) -> bool {
        [
            self.terms.ac,
            self.terms.adv,
            self.terms.cycle,
            self.terms.tv,
            self.terms.dc,
            self.terms.div,
            self.enc,
            self.neg,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Largest magnitude among terms and composites (divergence guard).
    pub fn max_abs(&self) -> f64 {
        [
            self.terms.ac,
            self.terms.adv,
            self.terms.cycle,
            self.terms.tv,
            self.terms.dc,
            self.terms.div,
            self.enc,
            self.neg,
        ]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Tape builders for the differentiable route of each loss.
pub mod graph {
    use crate::tape::{Tape, TensorId};

    /// Contrastive loss from raw (pre-normalization) embedding matrices.
    /// `queries`/`positives` are per-tap `[Q,d]`, `negatives` per-tap `[N,d]`.
    pub fn ac_loss(
        tape: &mut Tape,
        queries: &[TensorId],
        positives: &[TensorId],
        negatives: &[TensorId],
        tau: f64,
    ) -> TensorId {
        assert_eq!(queries.len(), positives.len());
        assert_eq!(queries.len(), negatives.len());
        let mut tap_losses = Vec::with_capacity(queries.len());
        for ((&q, &p), &n) in queries.iter().zip(positives).zip(negatives) {
            let qn = tape.normalize_rows(q);
            let pn = tape.normalize_rows(p);
            let nn = tape.normalize_rows(n);
            // s_pos[q] = exp(<q,p>/tau)
            let dot_pos = tape.row_dot(qn, pn);
            let scaled_pos = tape.mul_scalar(dot_pos, 1.0 / tau);
            let s_pos = tape.exp(scaled_pos);
            // s_neg[q,i] = exp(<q, n_i>/tau)
            let nt = tape.transpose2(nn);
            let dots = tape.matmul(qn, nt);
            let scaled = tape.mul_scalar(dots, 1.0 / tau);
            let s_neg = tape.exp(scaled);
            let neg_sum = tape.sum_axis1(s_neg);
            // loss[q] = ln(s_pos + neg_sum) - ln(s_pos)
            let denom = tape.add(s_pos, neg_sum);
            let ln_denom = tape.ln(denom);
            let ln_pos = tape.ln(s_pos);
            let per_query = tape.sub(ln_denom, ln_pos);
            tap_losses.push(tape.mean_all(per_query));
        }
        mean_of(tape, &tap_losses)
    }

    /// Diversity from raw embedding matrices: normalize each, then the
    /// negated mean absolute difference, averaged over taps.
    pub fn diversity(tape: &mut Tape, a: &[TensorId], b: &[TensorId]) -> TensorId {
        assert_eq!(a.len(), b.len());
        let mut per_tap = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(b) {
            let xn = tape.normalize_rows(x);
            let yn = tape.normalize_rows(y);
            let d = tape.sub(xn, yn);
            let ad = tape.abs(d);
            let m = tape.mean_all(ad);
            per_tap.push(tape.neg(m));
        }
        mean_of(tape, &per_tap)
    }

    /// Total variation of a `(C,H,W)` tensor (sum reduction).
    pub fn tv(tape: &mut Tape, x: TensorId) -> TensorId {
        let dh = tape.diff_h(x);
        let dv = tape.diff_v(x);
        let ah = tape.abs(dh);
        let av = tape.abs(dv);
        let sh = tape.sum_all(ah);
        let sv = tape.sum_all(av);
        tape.add(sh, sv)
    }

    /// Mean dark channel of a `(C,H,W)` tensor in `[0,1]`.
    pub fn dark_channel(tape: &mut Tape, x: TensorId, radius: usize) -> TensorId {
        let d = tape.min_pool_channels(x, radius);
        tape.mean_all(d)
    }

    /// Least-squares GAN loss of a score grid against a constant label.
    pub fn gan(tape: &mut Tape, scores: TensorId, target: f64) -> TensorId {
        let d = tape.add_scalar(scores, -target);
        let sq = tape.mul(d, d);
        tape.mean_all(sq)
    }

    /// Mean absolute difference of two same-shape tensors.
    pub fn mean_abs_diff(tape: &mut Tape, a: TensorId, b: TensorId) -> TensorId {
        let d = tape.sub(a, b);
        let ad = tape.abs(d);
        tape.mean_all(ad)
    }

    /// Mean of scalar nodes.
    pub fn mean_of(tape: &mut Tape, xs: &[TensorId]) -> TensorId {
        assert!(!xs.is_empty());
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = tape.add(acc, x);
        }
        tape.mul_scalar(acc, 1.0 / xs.len() as f64)
    }
}
