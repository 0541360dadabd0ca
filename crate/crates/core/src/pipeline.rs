//! Directory-level workflows built on the library: enhancement, paired
//! evaluation and the ablation sweep.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{SkippedSource, SyntheticQuad};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::metrics::{evaluate_image, ImageMetrics, MetricsReport};
use crate::models::Generator;
use crate::tensor::Tensor;
use crate::training::{train_loop, TrainConfig, TrainState, TrainingPair, Variant};

/// Anything that maps an image to an enhanced image of the same size.
pub trait Enhancer {
    fn enhance(&self, image: &ImagePlane) -> Result<ImagePlane>;
}

impl Enhancer for Generator<f32> {
    fn enhance(&self, image: &ImagePlane) -> Result<ImagePlane> {
        Generator::enhance(self, image)
    }
}

/// Returns its input, clipped.
pub struct IdentityEnhancer;

impl Enhancer for IdentityEnhancer {
    fn enhance(&self, image: &ImagePlane) -> Result<ImagePlane> {
        Ok(image.clipped())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnhanceReport {
    pub written: Vec<String>,
    pub skipped: Vec<SkippedSource>,
}

pub const ENHANCED_SUFFIX: &str = "_enhanced";

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension()
                        .and_then(|e| e.to_str())
                        .map(str::to_ascii_lowercase)
                        .as_deref(),
                    Some("png" | "jpg" | "jpeg")
                )
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Enhances every image in `input` into `output` as `<stem>_enhanced.png`.
/// Unreadable images are skipped and reported.
pub fn enhance_dir(enhancer: &dyn Enhancer, input: &Path, output: &Path) -> Result<EnhanceReport> {
    let files = image_files(input)?;
    fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let mut report = EnhanceReport::default();
    for path in files {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let img = match ImagePlane::load(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                report.skipped.push(SkippedSource {
                    path: name,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let out = enhancer.enhance(&img)?;
        let stem = path.file_stem().unwrap().to_string_lossy();
        let file = format!("{stem}{ENHANCED_SUFFIX}.png");
        out.save_png(&output.join(&file))?;
        report.written.push(file);
    }
    Ok(report)
}

/// Scores every image in `images`. With `reference`, each image is paired
/// with the reference file of the same stem (an `_enhanced` suffix is
/// ignored); unmatched images get no full-reference metrics.
pub fn evaluate_dirs(
    images: &Path,
    reference: Option<&Path>,
) -> Result<(MetricsReport, Vec<SkippedSource>)> {
    let refs: Vec<PathBuf> = match reference {
        Some(dir) => image_files(dir)?,
        None => Vec::new(),
    };
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for path in image_files(images)? {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let key = stem
            .strip_suffix(ENHANCED_SUFFIX)
            .unwrap_or(&stem)
            .to_string();
        let img = match ImagePlane::load(&path) {
            Ok(img) => img,
            Err(e) => {
                skipped.push(SkippedSource {
                    path: name,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let matched = refs
            .iter()
            .find(|r| r.file_stem().is_some_and(|s| s.to_string_lossy() == key));
        let reference = match matched {
            Some(r) => {
                let r = ImagePlane::load(r)?;
                if r.dims() != img.dims() {
                    return Err(Error::validation(format!(
                        "{name} is {:?} but its reference is {:?}",
                        img.dims(),
                        r.dims()
                    )));
                }
                Some(r)
            }
            None => None,
        };
        rows.push(evaluate_image(&name, &img, reference.as_ref())?);
    }
    Ok((MetricsReport::from_images(rows), skipped))
}

/// Metrics of an enhancer's outputs against the ground truth of each quad.
pub fn evaluate_quads(
    enhancer: &dyn Enhancer,
    quads: &[(String, SyntheticQuad)],
) -> Result<MetricsReport> {
    let rows = quads
        .iter()
        .map(|(id, q)| {
            let out = enhancer.enhance(&q.underwater)?;
            evaluate_image(id, &out, Some(&q.ground_truth))
        })
        .collect::<Result<Vec<ImageMetrics>>>()?;
    Ok(MetricsReport::from_images(rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub disable_da: bool,
    pub disable_feedback: bool,
    pub disable_pixel: bool,
    pub metrics: ImageMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<8} {:>5} {:>5} {:>5} {:>10} {:>8} {:>7} {:>8}\n",
            "variant", "DA", "PF", "PL", "MSE", "PSNR", "SSIM", "UIQM"
        );
        let on = |disabled: bool| if disabled { "off" } else { "on" };
        let opt = |v: Option<f64>, p: usize| v.map_or("-".into(), |v| format!("{v:.p$}"));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<8} {:>5} {:>5} {:>5} {:>10} {:>8} {:>7} {:>8.4}\n",
                r.variant,
                on(r.disable_da),
                on(r.disable_feedback),
                on(r.disable_pixel),
                opt(r.metrics.mse, 2),
                opt(r.metrics.psnr, 2),
                opt(r.metrics.ssim, 4),
                r.metrics.uiqm
            ));
        }
        out
    }
}

/// Trains the full model and each leave-one-out variant from the same seed,
/// each into its own subdirectory, and scores them on `eval`.
pub fn run_ablation(
    base: &TrainConfig,
    train: &[TrainingPair],
    real: &[(String, Tensor<f32>)],
    eval: &[(String, SyntheticQuad)],
    out_dir: &Path,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let cfg = variant.apply(base);
        let dir = out_dir.join(variant.slug());
        let state = TrainState::new(&cfg)?;
        let summary = train_loop(&cfg, train, real, state, &dir)?;
        let report = evaluate_quads(&summary.state.generator, eval)?;
        let mut metrics = report
            .mean
            .ok_or_else(|| Error::validation("ablation needs at least one evaluation quad"))?;
        metrics.name = variant.label().into();
        rows.push(AblationRow {
            variant: variant.label().into(),
            disable_da: cfg.disable_da,
            disable_feedback: cfg.disable_feedback,
            disable_pixel: cfg.disable_pixel,
            metrics,
        });
    }
    Ok(AblationReport { rows })
}
