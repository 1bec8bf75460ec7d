//! Quality metrics, folder evaluation and embedding export for
//! disentanglement inspection.
//!
//! PSNR uses peak 1 and is capped at 99 dB so identical images stay
//! CSV-friendly. SSIM uses the windowed formulation with an 11-tap Gaussian
//! window (sigma 1.5), constants `C1 = 0.01^2`, `C2 = 0.03^2`, valid-mode
//! filtering, channels averaged. Embedding dumps pair every row with its
//! domain label; the 2D projection is PCA by default (deterministic) with
//! exact t-SNE as an option, and cluster separation is quantified with the
//! silhouette score.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{list_images, load_image, Image};
use crate::networks::{encoder_features, project, Generator, ProjectionHeads};

const PSNR_CAP: f64 = 99.0;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Peak signal-to-noise ratio in dB between two same-size images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::InvalidInput("psnr size mismatch".into()));
    }
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter of one channel plane.
fn filter_valid(plane: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut horiz = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * plane[(y, x + i)];
            }
            horiz[(y, x)] = s;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * horiz[(y + i, x)];
            }
            out[(y, x)] = s;
        }
    }
    out
}

/// Structural similarity, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::InvalidInput("ssim size mismatch".into()));
    }
    let (h, w, _) = a.data().dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images"
        )));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..3 {
        let x = Array2::from_shape_fn((h, w), |(y, xx)| a.data()[(y, xx, c)]);
        let y = Array2::from_shape_fn((h, w), |(yy, xx)| b.data()[(yy, xx, c)]);
        let mu_x = filter_valid(&x, &k);
        let mu_y = filter_valid(&y, &k);
        let xx = filter_valid(&x.mapv(|v| v * v), &k);
        let yy = filter_valid(&y.mapv(|v| v * v), &k);
        let xy = filter_valid(&(&x * &y), &k);
        let mut sum = 0.0;
        for ((&mx, &my), ((&sxx, &syy), &sxy)) in mu_x
            .iter()
            .zip(mu_y.iter())
            .zip(xx.iter().zip(yy.iter()).zip(xy.iter()))
        {
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let val = ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            sum += val;
        }
        total += sum / mu_x.len() as f64;
    }
    Ok(total / 3.0)
}

/// One evaluated image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Evaluate matching filenames across two directories; returns per-image
/// rows plus a final `mean` row, optionally writing a CSV.
pub fn evaluate_dir(pred_dir: &Path, gt_dir: &Path, csv_out: Option<&Path>) -> Result<Vec<MetricRow>> {
    let preds = list_images(pred_dir)?;
    let gts = list_images(gt_dir)?;
    let gt_names: std::collections::BTreeMap<String, &std::path::PathBuf> = gts
        .iter()
        .map(|p| (file_name(p), p))
        .collect();
    let mut rows = Vec::new();
    for pred_path in &preds {
        let name = file_name(pred_path);
        let gt_path = gt_names.get(&name).ok_or_else(|| {
            Error::Data(format!("no ground-truth counterpart for `{name}`"))
        })?;
        let pred = load_image(pred_path)?;
        let gt = load_image(gt_path)?;
        rows.push(MetricRow {
            id: name,
            psnr_db: psnr(&pred, &gt)?,
            ssim: ssim(&pred, &gt)?,
        });
    }
    let mean_psnr = rows.iter().map(|r| r.psnr_db).sum::<f64>() / rows.len() as f64;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
    rows.push(MetricRow {
        id: "mean".into(),
        psnr_db: mean_psnr,
        ssim: mean_ssim,
    });
    if let Some(path) = csv_out {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "id,psnr_db,ssim")?;
        for r in &rows {
            writeln!(f, "{},{},{}", r.id, r.psnr_db, r.ssim)?;
        }
        f.flush()?;
    }
    Ok(rows)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string()
}

// ── embedding export ───────────────────────────────────────────────────

/// Domain an embedding row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Hazy,
    Clean,
}

impl Domain {
    pub fn label(self) -> &'static str {
        match self {
            Domain::Hazy => "hazy",
            Domain::Clean => "clean",
        }
    }
}

/// Labelled embedding rows from both domains.
#[derive(Debug, Clone)]
pub struct EmbeddingDump {
    pub dim: usize,
    pub rows: Vec<(Domain, usize, Vec<f64>)>,
    /// Set when the exported embeddings carry (numerically) no variance.
    pub zero_variance: bool,
}

/// Export embeddings: hazy images through the hazy->clear encoder and its
/// heads, clean images through the reverse pathway. `queries` locations are
/// sampled per tap per image.
pub fn export_embeddings(
    gen_g: &Generator,
    heads_g: &ProjectionHeads,
    gen_f: &Generator,
    heads_f: &ProjectionHeads,
    hazy: &[Image],
    clean: &[Image],
    queries: usize,
    seed: u64,
) -> Result<EmbeddingDump> {
    if hazy.is_empty() || clean.is_empty() {
        return Err(Error::Data("need images from both domains".into()));
    }
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = 0;
    for (domain, images, gen, heads) in [
        (Domain::Hazy, hazy, gen_g, heads_g),
        (Domain::Clean, clean, gen_f, heads_f),
    ] {
        for img in images {
            let chw = img.to_internal();
            let stack = encoder_features(gen, &chw)?;
            let locations: Vec<Vec<(usize, usize)>> = stack
                .taps
                .iter()
                .map(|t| {
                    let (_, h, w) = t.dim();
                    (0..queries)
                        .map(|_| (rng.gen_range(0..h), rng.gen_range(0..w)))
                        .collect()
                })
                .collect();
            let embs = project(heads, &stack, &locations)?;
            for (tap_idx, e) in embs.iter().enumerate() {
                dim = e.dim().1;
                for row in e.rows() {
                    rows.push((domain, tap_idx, row.to_vec()));
                }
            }
        }
    }
    let zero_variance = max_dimension_variance(&rows) < 1e-12;
    Ok(EmbeddingDump {
        dim,
        rows,
        zero_variance,
    })
}

fn max_dimension_variance(rows: &[(Domain, usize, Vec<f64>)]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let d = rows[0].2.len();
    let n = rows.len() as f64;
    let mut max_var = 0.0f64;
    for j in 0..d {
        let mean = rows.iter().map(|r| r.2[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r.2[j] - mean).powi(2)).sum::<f64>() / n;
        max_var = max_var.max(var);
    }
    max_var
}

/// Write the dump as CSV: `domain,tap,dim0..dimD`.
pub fn write_dump_csv(dump: &EmbeddingDump, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("domain,tap");
    for j in 0..dump.dim {
        header.push_str(&format!(",dim{j}"));
    }
    writeln!(f, "{header}")?;
    for (domain, tap, vec) in &dump.rows {
        let mut line = format!("{},{tap}", domain.label());
        for v in vec {
            line.push_str(&format!(",{v}"));
        }
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

// ── 2D projection ──────────────────────────────────────────────────────

/// Projection method for the 2D scatter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Pca,
    Tsne,
}

/// Project the dump onto 2D coordinates (row order preserved).
pub fn project_2d(dump: &EmbeddingDump, method: Projection, seed: u64) -> Vec<(f64, f64)> {
    let n = dump.rows.len();
    let d = dump.dim;
    let mut data = Array2::<f64>::zeros((n, d));
    for (i, (_, _, v)) in dump.rows.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            data[(i, j)] = x;
        }
    }
    match method {
        Projection::Pca => pca_2d(&data),
        Projection::Tsne => tsne_2d(&data, seed),
    }
}

/// Deterministic PCA to two components via power iteration with deflation.
pub fn pca_2d(data: &Array2<f64>) -> Vec<(f64, f64)> {
    let (n, d) = data.dim();
    let mut centered = data.clone();
    for j in 0..d {
        let mean = centered.column(j).sum() / n as f64;
        centered.column_mut(j).mapv_inplace(|v| v - mean);
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = centered.t().dot(&centered) / denom;
    let v1 = top_eigenvector(&cov, None);
    let l1 = v1.dot(&cov.dot(&v1));
    let v2 = top_eigenvector(&cov, Some((&v1, l1)));
    let c1 = centered.dot(&v1);
    let c2 = centered.dot(&v2);
    c1.iter().zip(c2.iter()).map(|(&x, &y)| (x, y)).collect()
}

fn top_eigenvector(cov: &Array2<f64>, deflate: Option<(&Array1<f64>, f64)>) -> Array1<f64> {
    let d = cov.dim().0;
    // fixed, slightly asymmetric start so convergence is deterministic
    let mut v = Array1::from_shape_fn(d, |i| 1.0 + 0.001 * (i as f64 + 1.0));
    let norm = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / norm);
    for _ in 0..300 {
        let mut w = cov.dot(&v);
        if let Some((u, lambda)) = deflate {
            let proj = u.dot(&w);
            w = &w - &(u * (proj));
            let _ = lambda;
        }
        let norm = w.dot(&w).sqrt();
        if norm < 1e-300 {
            break;
        }
        v = w.mapv(|x| x / norm);
    }
    // canonical sign: largest-magnitude component positive
    let mut max_idx = 0;
    for i in 0..d {
        if v[i].abs() > v[max_idx].abs() {
            max_idx = i;
        }
    }
    if v[max_idx] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
    v
}

/// Exact t-SNE (quadratic in point count); intended for small desk-scale
/// dumps. Seeded and deterministic.
pub fn tsne_2d(data: &Array2<f64>, seed: u64) -> Vec<(f64, f64)> {
    let n = data.dim().0;
    if n < 4 {
        return (0..n).map(|i| (i as f64, 0.0)).collect();
    }
    let perplexity = 30.0f64.min((n as f64 - 2.0) / 3.0).max(2.0);
    // squared distances
    let mut d2 = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let diff = &data.row(i) - &data.row(j);
            let dist = diff.dot(&diff);
            d2[(i, j)] = dist;
            d2[(j, i)] = dist;
        }
    }
    // per-point precision by binary search on perplexity
    let target = perplexity.ln();
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let (mut lo, mut hi) = (1e-12f64, 1e12f64);
        let mut beta = 1.0f64;
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut dsum = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let e = (-beta * d2[(i, j)]).exp();
                sum += e;
                dsum += d2[(i, j)] * e;
            }
            let sum = sum.max(1e-300);
            let entropy = beta * dsum / sum + sum.ln();
            if (entropy - target).abs() < 1e-5 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi >= 1e12 { beta * 2.0 } else { (beta + hi) / 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                p[(i, j)] = (-beta * d2[(i, j)]).exp();
                sum += p[(i, j)];
            }
        }
        for j in 0..n {
            if j != i {
                p[(i, j)] /= sum.max(1e-300);
            }
        }
    }
    // symmetrize
    let mut ps = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            ps[(i, j)] = ((p[(i, j)] + p[(j, i)]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.gen_range(-1e-4..1e-4), rng.gen_range(-1e-4..1e-4)])
        .collect();
    let mut vel = vec![[0.0f64; 2]; n];
    let iters = 400;
    let exaggeration_until = 100;
    let lr = 100.0;
    for it in 0..iters {
        let exag = if it < exaggeration_until { 12.0 } else { 1.0 };
        // q distribution
        let mut qnum = Array2::<f64>::zeros((n, n));
        let mut qsum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                qnum[(i, j)] = v;
                qnum[(j, i)] = v;
                qsum += 2.0 * v;
            }
        }
        let qsum = qsum.max(1e-300);
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        for i in 0..n {
            let mut g = [0.0f64; 2];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let q = (qnum[(i, j)] / qsum).max(1e-12);
                let coeff = 4.0 * (exag * ps[(i, j)] - q) * qnum[(i, j)];
                g[0] += coeff * (y[i][0] - y[j][0]);
                g[1] += coeff * (y[i][1] - y[j][1]);
            }
            vel[i][0] = momentum * vel[i][0] - lr * g[0];
            vel[i][1] = momentum * vel[i][1] - lr * g[1];
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
    }
    y.into_iter().map(|p| (p[0], p[1])).collect()
}

/// Write projected coordinates as CSV: `domain,x,y`.
pub fn write_projection_csv(
    dump: &EmbeddingDump,
    coords: &[(f64, f64)],
    path: &Path,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "domain,x,y")?;
    for ((domain, _, _), (x, y)) in dump.rows.iter().zip(coords) {
        writeln!(f, "{},{x},{y}", domain.label())?;
    }
    f.flush()?;
    Ok(())
}

/// Mean silhouette score of 2-cluster labelled 2D points (Euclidean).
pub fn silhouette(coords: &[(f64, f64)], labels: &[usize]) -> f64 {
    assert_eq!(coords.len(), labels.len());
    let n = coords.len();
    if n < 2 {
        return 0.0;
    }
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let mut same_sum = 0.0;
        let mut same_cnt = 0usize;
        let mut other_sum = 0.0;
        let mut other_cnt = 0usize;
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = dist(coords[i], coords[j]);
            if labels[i] == labels[j] {
                same_sum += d;
                same_cnt += 1;
            } else {
                other_sum += d;
                other_cnt += 1;
            }
        }
        if same_cnt == 0 || other_cnt == 0 {
            continue; // singleton cluster contributes 0
        }
        let a = same_sum / same_cnt as f64;
        let b = other_sum / other_cnt as f64;
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

/// Render a labelled scatter to a PNG (hazy red, clean blue).
pub fn plot_projection(
    dump: &EmbeddingDump,
    coords: &[(f64, f64)],
    path: &Path,
) -> Result<()> {
    let size = 800u32;
    let margin = 20.0;
    let mut img = image::RgbImage::from_pixel(size, size, image::Rgb([255, 255, 255]));
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in coords {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let xspan = (xmax - xmin).max(1e-12);
    let yspan = (ymax - ymin).max(1e-12);
    let scale = (size as f64 - 2.0 * margin) / xspan.max(yspan);
    for ((domain, _, _), &(x, y)) in dump.rows.iter().zip(coords) {
        let px = margin + (x - xmin) * scale;
        let py = margin + (y - ymin) * scale;
        let color = match domain {
            Domain::Hazy => image::Rgb([200, 40, 40]),
            Domain::Clean => image::Rgb([40, 60, 200]),
        };
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let ix = (px as i32 + dx).clamp(0, size as i32 - 1) as u32;
                let iy = (py as i32 + dy).clamp(0, size as i32 - 1) as u32;
                img.put_pixel(ix, iy, color);
            }
        }
    }
    img.save(path)?;
    Ok(())
}
