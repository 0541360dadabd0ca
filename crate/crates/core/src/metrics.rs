//! Full-reference (MSE, PSNR, SSIM) and no-reference (UICM, UISM, UIConM,
//! UIQM) image quality measures.
//!
//! All measures work on the 8-bit scale: planes in `[0, 1]` are multiplied
//! by 255 first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;

const PEAK: f64 = 255.0;

fn same_dims(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::validation(format!(
            "images differ in size: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `(mse, psnr)` on the 0–255 scale. Identical images give `psnr = +∞`.
pub fn mse_psnr(a: &ImagePlane, b: &ImagePlane) -> Result<(f64, f64)> {
    same_dims(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) * PEAK).powi(2))
        .sum::<f64>()
        / n;
    Ok((mse, psnr_from_mse(mse)))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - centre).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering: output is `(h − k + 1) × (w − k + 1)`.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| plane[y * w + x + i] * kernel[i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| rows[(y + i) * ow + x] * kernel[i]).sum();
        }
    }
    out
}

/// Mean SSIM of the luma planes, Gaussian-windowed.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

pub fn ssim_with(a: &ImagePlane, b: &ImagePlane, cfg: &SsimConfig) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    if h < cfg.window || w < cfg.window {
        return Err(Error::validation(format!(
            "image {h}×{w} is smaller than the {0}×{0} SSIM window",
            cfg.window
        )));
    }
    let la: Vec<f64> = a.luma().into_iter().map(|v| v * PEAK).collect();
    let lb: Vec<f64> = b.luma().into_iter().map(|v| v * PEAK).collect();
    let kernel = gaussian_kernel(cfg.window, cfg.sigma);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&la, h, w, &kernel);
    let mu_b = filter_valid(&lb, h, w, &kernel);
    let e_aa = filter_valid(&prod(&la, &la), h, w, &kernel);
    let e_bb = filter_valid(&prod(&lb, &lb), h, w, &kernel);
    let e_ab = filter_valid(&prod(&la, &lb), h, w, &kernel);
    let c1 = (cfg.k1 * PEAK).powi(2);
    let c2 = (cfg.k2 * PEAK).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Parameters of the no-reference underwater measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UiqmConfig {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Fraction trimmed from the low end of the sorted opponent values.
    pub trim_low: f64,
    /// Fraction trimmed from the high end.
    pub trim_high: f64,
    /// Side of the square blocks used by the sharpness and contrast terms.
    pub block: usize,
}

impl Default for UiqmConfig {
    fn default() -> Self {
        Self {
            c1: 0.0282,
            c2: 0.2953,
            c3: 3.5753,
            trim_low: 0.1,
            trim_high: 0.1,
            block: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UiqmScores {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub uiqm: f64,
}

/// `c1·uicm + c2·uism + c3·uiconm`.
pub fn combine_uiqm(uicm: f64, uism: f64, uiconm: f64, cfg: &UiqmConfig) -> UiqmScores {
    UiqmScores {
        uicm,
        uism,
        uiconm,
        uiqm: cfg.c1 * uicm + cfg.c2 * uism + cfg.c3 * uiconm,
    }
}

pub fn uiqm(img: &ImagePlane) -> Result<UiqmScores> {
    uiqm_with(img, &UiqmConfig::default())
}

pub fn uiqm_with(img: &ImagePlane, cfg: &UiqmConfig) -> Result<UiqmScores> {
    let (h, w) = img.dims();
    if h < cfg.block || w < cfg.block || cfg.block == 0 {
        return Err(Error::validation(format!(
            "image {h}×{w} is smaller than one {0}×{0} block",
            cfg.block
        )));
    }
    let scaled: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            img.channel(c)
                .iter()
                .map(|v| v.clamp(0.0, 1.0) * PEAK)
                .collect()
        })
        .collect();
    let uicm = colorfulness(&scaled, cfg);
    let uism = sharpness(&scaled, h, w, cfg.block);
    let uiconm = contrast(&scaled, h, w, cfg.block);
    Ok(combine_uiqm(uicm, uism, uiconm, cfg))
}

/// Asymmetric alpha-trimmed mean over sorted values.
fn trimmed_mean(sorted: &[f64], low: f64, high: f64) -> f64 {
    let k = sorted.len();
    let t_low = (low * k as f64).ceil() as usize;
    let t_high = (high * k as f64).floor() as usize;
    if t_low + t_high >= k {
        return 0.0;
    }
    let kept = &sorted[t_low..k - t_high];
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn colorfulness(rgb: &[Vec<f64>], cfg: &UiqmConfig) -> f64 {
    let (r, g, b) = (&rgb[0], &rgb[1], &rgb[2]);
    let mut rg: Vec<f64> = r.iter().zip(g).map(|(r, g)| r - g).collect();
    let mut yb: Vec<f64> = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| (r + g) / 2.0 - b)
        .collect();
    rg.sort_by(f64::total_cmp);
    yb.sort_by(f64::total_cmp);
    let mu_rg = trimmed_mean(&rg, cfg.trim_low, cfg.trim_high);
    let mu_yb = trimmed_mean(&yb, cfg.trim_low, cfg.trim_high);
    let var =
        |xs: &[f64], mu: f64| xs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / xs.len() as f64;
    let spread = (var(&rg, mu_rg) + var(&yb, mu_yb)).sqrt();
    -0.0268 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + 0.1586 * spread
}

fn reflect(i: isize, n: usize) -> usize {
    // half-sample symmetric boundary: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
    if i < 0 {
        (-i - 1) as usize
    } else if i as usize >= n {
        2 * n - 1 - i as usize
    } else {
        i as usize
    }
}

/// Sobel gradient magnitude rescaled so its maximum is 255 (all-zero stays zero).
fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| plane[reflect(y, h) * w + reflect(x, w)];
    let mut mag = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            // derivative across rows, smoothing along columns, and vice versa
            let dy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let dx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            mag[y as usize * w + x as usize] = dx.hypot(dy);
        }
    }
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        for v in &mut mag {
            *v *= PEAK / peak;
        }
    }
    mag
}

/// Calls `f(min, max)` on every complete `block×block` tile (over all given planes).
fn for_each_block(
    planes: &[&[f64]],
    h: usize,
    w: usize,
    block: usize,
    mut f: impl FnMut(f64, f64),
) -> usize {
    let (by, bx) = (h / block, w / block);
    for ty in 0..by {
        for tx in 0..bx {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for plane in planes {
                for y in ty * block..(ty + 1) * block {
                    for &v in &plane[y * w + tx * block..y * w + (tx + 1) * block] {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            f(lo, hi);
        }
    }
    by * bx
}

/// Enhancement measure: `2/(k1·k2) Σ log(max/min)` over blocks with non-zero extrema.
fn eme(plane: &[f64], h: usize, w: usize, block: usize) -> f64 {
    let mut acc = 0.0;
    let blocks = for_each_block(&[plane], h, w, block, |lo, hi| {
        if lo > 0.0 && hi > 0.0 {
            acc += (hi / lo).ln();
        }
    });
    2.0 * acc / blocks as f64
}

fn sharpness(rgb: &[Vec<f64>], h: usize, w: usize, block: usize) -> f64 {
    const WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];
    (0..3)
        .map(|c| {
            let edges = sobel_magnitude(&rgb[c], h, w);
            let edge_map: Vec<f64> = edges.iter().zip(&rgb[c]).map(|(e, v)| e * v).collect();
            WEIGHTS[c] * eme(&edge_map, h, w, block)
        })
        .sum()
}

/// Log-AMEE block contrast over all three channels.
fn contrast(rgb: &[Vec<f64>], h: usize, w: usize, block: usize) -> f64 {
    let mut acc = 0.0;
    let planes: Vec<&[f64]> = rgb.iter().map(Vec::as_slice).collect();
    let blocks = for_each_block(&planes, h, w, block, |lo, hi| {
        let top = hi - lo;
        let bot = hi + lo;
        if top > 0.0 && bot > 0.0 {
            let ratio = top / bot;
            acc += ratio * ratio.ln();
        }
    });
    -acc / blocks as f64
}

/// JSON has no infinity; identical images get `"inf"` instead of `null`.
mod infinite_as_text {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() => s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" }),
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Number(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) => match t.as_str() {
                "inf" => Ok(Some(f64::INFINITY)),
                "-inf" => Ok(Some(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!(
                    "bad psnr value '{other}'"
                ))),
            },
        }
    }
}

/// All metrics for one image. Full-reference fields are `None` without a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub mse: Option<f64>,
    #[serde(with = "infinite_as_text")]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub uiqm: f64,
}

pub fn evaluate_image(
    name: &str,
    img: &ImagePlane,
    reference: Option<&ImagePlane>,
) -> Result<ImageMetrics> {
    let nr = uiqm(img)?;
    let (mse, psnr, ssim) = match reference {
        Some(r) => {
            let (m, p) = mse_psnr(img, r)?;
            (Some(m), Some(p), Some(ssim(img, r)?))
        }
        None => (None, None, None),
    };
    Ok(ImageMetrics {
        name: name.to_string(),
        mse,
        psnr,
        ssim,
        uicm: nr.uicm,
        uism: nr.uism,
        uiconm: nr.uiconm,
        uiqm: nr.uiqm,
    })
}

/// Per-image rows and their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub mean: Option<ImageMetrics>,
}

impl MetricsReport {
    pub fn from_images(images: Vec<ImageMetrics>) -> Self {
        let mean = mean_row(&images);
        Self { images, mean }
    }

    /// Plain-text table, one row per image plus the mean.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<28} {:>10} {:>8} {:>7} {:>8} {:>8} {:>8} {:>8}\n",
            "image", "MSE", "PSNR", "SSIM", "UICM", "UISM", "UIConM", "UIQM"
        );
        for row in self.images.iter().chain(self.mean.as_ref()) {
            out.push_str(&format_row(row));
        }
        out
    }
}

pub fn format_row(row: &ImageMetrics) -> String {
    let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |v| format!("{v:.prec$}"));
    format!(
        "{:<28} {:>10} {:>8} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
        row.name,
        opt(row.mse, 2),
        opt(row.psnr, 2),
        opt(row.ssim, 4),
        row.uicm,
        row.uism,
        row.uiconm,
        row.uiqm
    )
}

/// Mean of each metric over the rows that have it.
fn mean_row(rows: &[ImageMetrics]) -> Option<ImageMetrics> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let mean_opt = |f: fn(&ImageMetrics) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Some(ImageMetrics {
        name: "mean".into(),
        mse: mean_opt(|r| r.mse),
        psnr: mean_opt(|r| r.psnr),
        ssim: mean_opt(|r| r.ssim),
        uicm: rows.iter().map(|r| r.uicm).sum::<f64>() / n,
        uism: rows.iter().map(|r| r.uism).sum::<f64>() / n,
        uiconm: rows.iter().map(|r| r.uiconm).sum::<f64>() / n,
        uiqm: rows.iter().map(|r| r.uiqm).sum::<f64>() / n,
    })
}
