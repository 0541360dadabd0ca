//! Synthetic training data: water-type parameter sampling, quad synthesis,
//! on-disk persistence and the dataset manifest; plus the unpaired pool of
//! real underwater photographs.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthMap, ImagePlane};
use crate::physics::{compute_transmission, degrade, DegradationParams, Rgb, TransmissionMap};

/// Water types with published parameter ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaterType {
    B,
    C,
    D,
}

impl WaterType {
    pub const ALL: [WaterType; 3] = [WaterType::B, WaterType::C, WaterType::D];

    pub fn id(self) -> &'static str {
        match self {
            WaterType::B => "b",
            WaterType::C => "c",
            WaterType::D => "d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "b" => Ok(WaterType::B),
            "c" => Ok(WaterType::C),
            "d" => Ok(WaterType::D),
            other => Err(Error::Config(format!(
                "unknown water type '{other}' (expected b, c or d)"
            ))),
        }
    }

    /// `base + span · rand()` ranges per channel (red, green, blue).
    pub fn spec(self) -> WaterTypeSpec {
        match self {
            WaterType::B => WaterTypeSpec {
                water_type: self,
                nrer_base: [0.79, 0.92, 0.94],
                nrer_span: [0.06, 0.06, 0.05],
                bg_base: [0.05, 0.60, 0.70],
                bg_span: [0.15, 0.30, 0.29],
            },
            WaterType::C => WaterTypeSpec {
                water_type: self,
                nrer_base: [0.71, 0.82, 0.80],
                nrer_span: [0.04, 0.06, 0.07],
                bg_base: [0.05, 0.60, 0.70],
                bg_span: [0.15, 0.30, 0.29],
            },
            WaterType::D => WaterTypeSpec {
                water_type: self,
                nrer_base: [0.67, 0.73, 0.67],
                nrer_span: [0.0; 3],
                bg_base: [0.15, 0.80, 0.70],
                bg_span: [0.0; 3],
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterTypeSpec {
    pub water_type: WaterType,
    pub nrer_base: Rgb,
    pub nrer_span: Rgb,
    pub bg_base: Rgb,
    pub bg_span: Rgb,
}

impl WaterTypeSpec {
    pub fn validate(&self) -> Result<()> {
        for c in 0..3 {
            let (nb, ns) = (self.nrer_base[c], self.nrer_span[c]);
            if !(nb > 0.0 && ns >= 0.0 && nb + ns <= 1.0) {
                return Err(Error::validation(format!(
                    "type {} nrer channel {c}: need 0 < {nb} <= {nb} + {ns} <= 1",
                    self.water_type.id()
                )));
            }
            let (bb, bs) = (self.bg_base[c], self.bg_span[c]);
            if !(bb >= 0.0 && bs >= 0.0 && bb + bs <= 1.0) {
                return Err(Error::validation(format!(
                    "type {} background channel {c}: need 0 <= {bb} <= {bb} + {bs} <= 1",
                    self.water_type.id()
                )));
            }
        }
        Ok(())
    }
}

/// Source of `rand()` draws in `[0, 1)`.
pub trait UnitDraw {
    fn draw(&mut self) -> f64;
}

impl<R: Rng> UnitDraw for R {
    fn draw(&mut self) -> f64 {
        self.random::<f64>()
    }
}

/// Constant draw, for pinning samples to an interval end.
#[derive(Clone, Copy, Debug)]
pub struct FixedDraw(pub f64);

impl UnitDraw for FixedDraw {
    fn draw(&mut self) -> f64 {
        self.0
    }
}

/// One parameter set per image: `base + span · rand()` for each channel,
/// red-green-blue nrer first, then background.
pub fn sample_params(
    spec: &WaterTypeSpec,
    draw: &mut dyn UnitDraw,
    depth_scale: f64,
) -> Result<DegradationParams> {
    spec.validate()?;
    let mut nrer = [0.0; 3];
    let mut background = [0.0; 3];
    for c in 0..3 {
        nrer[c] = spec.nrer_base[c] + spec.nrer_span[c] * draw.draw();
    }
    for c in 0..3 {
        background[c] = spec.bg_base[c] + spec.bg_span[c] * draw.draw();
    }
    let params = DegradationParams {
        nrer,
        background,
        depth_scale,
    };
    params.validate()?;
    Ok(params)
}

/// A clear scene with per-pixel depth in raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdSample {
    pub id: String,
    pub image: ImagePlane,
    pub depth: DepthMap,
}

impl RgbdSample {
    pub fn validate(&self) -> Result<()> {
        if self.image.dims() != self.depth.dims() {
            return Err(Error::validation(format!(
                "sample {}: image {:?} and depth {:?} differ in size",
                self.id,
                self.image.dims(),
                self.depth.dims()
            )));
        }
        let bad = self
            .depth
            .data()
            .iter()
            .filter(|d| !(d.is_finite() && **d >= 0.0))
            .count();
        if bad > 0 {
            return Err(Error::validation(format!(
                "sample {}: {bad} negative or non-finite depth value(s)",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub water_type: WaterType,
    pub params: DegradationParams,
    pub seed: u64,
}

/// Degraded image, ground truth, transmission and background light.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticQuad {
    pub underwater: ImagePlane,
    pub ground_truth: ImagePlane,
    pub transmission: TransmissionMap,
    pub background: Rgb,
    pub provenance: Provenance,
}

impl SyntheticQuad {
    /// Largest deviation of `underwater` from the formation model applied to
    /// the other three fields.
    pub fn consistency_error(&self) -> Result<f64> {
        if self.underwater.dims() != self.ground_truth.dims() {
            return Err(Error::validation("quad images differ in size"));
        }
        let rebuilt = degrade(&self.ground_truth, &self.transmission, &self.background)?;
        Ok(rebuilt.max_abs_diff(&self.underwater))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.ground_truth.dims()
    }
}

/// Maps raw depth to attenuation units: `min(raw, max_depth) / max_depth · range`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthNormalization {
    pub max_depth: f64,
    pub range: f64,
}

impl Default for DepthNormalization {
    fn default() -> Self {
        Self {
            max_depth: 10.0,
            range: 3.0,
        }
    }
}

impl DepthNormalization {
    pub fn apply(&self, depth: &DepthMap) -> DepthMap {
        let (max, range) = (self.max_depth, self.range);
        depth.map(|d| d.min(max) / max * range)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthesisOptions {
    /// Output size; `None` keeps the native size.
    pub resolution: Option<(usize, usize)>,
    pub depth: DepthNormalization,
    pub depth_scale: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            resolution: None,
            depth: DepthNormalization::default(),
            depth_scale: 1.0,
        }
    }
}

/// Samples parameters and applies the formation model to one RGB-D sample.
pub fn synthesize_quad(
    sample: &RgbdSample,
    spec: &WaterTypeSpec,
    draw: &mut dyn UnitDraw,
    seed: u64,
    opts: &SynthesisOptions,
) -> Result<SyntheticQuad> {
    sample.validate()?;
    let params = sample_params(spec, draw, opts.depth_scale)?;
    let depth = opts.depth.apply(&sample.depth);
    let (clear, depth) = match opts.resolution {
        Some((h, w)) => (
            sample.image.resize_bilinear(h, w),
            depth.resize_nearest(h, w),
        ),
        None => (sample.image.clone(), depth),
    };
    let transmission = compute_transmission(&depth, &params)?;
    let underwater = degrade(&clear, &transmission, &params.background)?;
    Ok(SyntheticQuad {
        underwater,
        ground_truth: clear,
        transmission,
        background: params.background,
        provenance: Provenance {
            source_id: sample.id.clone(),
            water_type: spec.water_type,
            params,
            seed,
        },
    })
}

const SIDECAR_MAGIC: &[u8; 4] = b"UWTB";
const SIDECAR_VERSION: u32 = 1;

/// Writes transmission and background as little-endian `f32`.
pub fn write_sidecar(path: &Path, t: &TransmissionMap, background: &Rgb) -> Result<()> {
    let (h, w) = t.dims();
    let mut buf = Vec::with_capacity(24 + 12 * h * w);
    buf.extend_from_slice(SIDECAR_MAGIC);
    buf.write_u32::<LittleEndian>(SIDECAR_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(h as u32).unwrap();
    buf.write_u32::<LittleEndian>(w as u32).unwrap();
    for &b in background {
        buf.write_f32::<LittleEndian>(b as f32).unwrap();
    }
    for &v in t.data() {
        buf.write_f32::<LittleEndian>(v as f32).unwrap();
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(path: &Path) -> Result<(TransmissionMap, Rgb)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 28 || &bytes[..4] != SIDECAR_MAGIC {
        return Err(malformed("not a transmission sidecar"));
    }
    let mut r = &bytes[4..];
    let version = r.read_u32::<LittleEndian>().unwrap();
    if version != SIDECAR_VERSION {
        return Err(malformed(&format!("unsupported sidecar version {version}")));
    }
    let h = r.read_u32::<LittleEndian>().unwrap() as usize;
    let w = r.read_u32::<LittleEndian>().unwrap() as usize;
    if r.len() != 12 + 12 * h * w {
        return Err(malformed("truncated sidecar"));
    }
    let mut background = [0.0; 3];
    for b in &mut background {
        *b = r.read_f32::<LittleEndian>().unwrap() as f64;
    }
    let data = (0..3 * h * w)
        .map(|_| r.read_f32::<LittleEndian>().unwrap() as f64)
        .collect();
    let t = TransmissionMap::from_planar(h, w, data).map_err(|e| malformed(&e.to_string()))?;
    Ok((t, background))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    /// Paths relative to the manifest's directory.
    pub underwater: String,
    pub ground_truth: String,
    pub sidecar: String,
    pub height: usize,
    pub width: usize,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedSource {
    pub path: String,
    pub reason: String,
}

pub const MANIFEST_FORMAT: &str = "uwgan-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    /// Canonical training resolution `[height, width]`.
    pub train_resolution: [usize; 2],
    pub records: Vec<ManifestRecord>,
    pub skipped: Vec<SkippedSource>,
}

impl DatasetManifest {
    pub fn empty(seed: u64, train_resolution: [usize; 2]) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            seed,
            train_resolution,
            records: Vec::new(),
            skipped: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported manifest format '{}'", manifest.format),
            });
        }
        Ok(manifest)
    }

    /// Unique ids and every referenced file present.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::validation(format!("duplicate record id {}", r.id)));
            }
            for f in [&r.underwater, &r.ground_truth, &r.sidecar] {
                if !root.join(f).is_file() {
                    return Err(Error::validation(format!(
                        "record {} references missing file {f}",
                        r.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Loads a persisted quad (8-bit images plus float sidecar).
pub fn load_quad(root: &Path, record: &ManifestRecord) -> Result<SyntheticQuad> {
    let underwater = ImagePlane::load(&root.join(&record.underwater))?;
    let ground_truth = ImagePlane::load(&root.join(&record.ground_truth))?;
    let (transmission, background) = read_sidecar(&root.join(&record.sidecar))?;
    if underwater.dims() != ground_truth.dims() || transmission.dims() != ground_truth.dims() {
        return Err(Error::Format {
            path: root.join(&record.sidecar),
            reason: format!("quad {} fields differ in size", record.id),
        });
    }
    Ok(SyntheticQuad {
        underwater,
        ground_truth,
        transmission,
        background,
        provenance: record.provenance.clone(),
    })
}

/// Loads a manifest file and all of its records.
pub fn load_dataset(
    manifest_path: &Path,
) -> Result<(DatasetManifest, Vec<(ManifestRecord, SyntheticQuad)>)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    manifest.validate(root)?;
    let quads = manifest
        .records
        .iter()
        .map(|r| Ok((r.clone(), load_quad(root, r)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, quads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub types: Vec<WaterType>,
    /// Relative share of each entry of `types`; equal shares when empty.
    #[serde(default)]
    pub proportions: Vec<f64>,
    pub count: usize,
    pub seed: u64,
    /// Canonical training resolution `[height, width]`.
    pub train_resolution: [usize; 2],
    /// Fraction of quads kept at native size as the test split.
    pub test_fraction: f64,
    /// Units per step of 16-bit depth PNGs (millimetres to metres by default).
    pub depth_png_scale: f64,
    pub depth_scale: f64,
    pub depth: DepthNormalization,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            types: WaterType::ALL.to_vec(),
            proportions: Vec::new(),
            count: 200,
            seed: 0,
            train_resolution: [256, 256],
            test_fraction: 0.0,
            depth: DepthNormalization::default(),
            depth_png_scale: 1e-3,
            depth_scale: 1.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::Config("at least one water type is required".into()));
        }
        if !self.proportions.is_empty()
            && (self.proportions.len() != self.types.len()
                || self
                    .proportions
                    .iter()
                    .any(|p| !(p.is_finite() && *p >= 0.0))
                || self.proportions.iter().sum::<f64>() <= 0.0)
        {
            return Err(Error::Config(
                "proportions must be non-negative, one per type, not all zero".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction {} outside [0, 1]",
                self.test_fraction
            )));
        }
        if self.train_resolution.contains(&0) {
            return Err(Error::Config("train_resolution must be positive".into()));
        }
        if !(self.depth.max_depth > 0.0 && self.depth.range > 0.0 && self.depth_png_scale > 0.0) {
            return Err(Error::Config(
                "depth normalisation constants must be positive".into(),
            ));
        }
        for t in &self.types {
            t.spec().validate()?;
        }
        Ok(())
    }

    /// Quads per type: largest-remainder rounding of `count · share`.
    pub fn per_type_counts(&self) -> Vec<usize> {
        let shares: Vec<f64> = if self.proportions.is_empty() {
            vec![1.0; self.types.len()]
        } else {
            self.proportions.clone()
        };
        let total: f64 = shares.iter().sum();
        let exact: Vec<f64> = shares
            .iter()
            .map(|s| s / total * self.count as f64)
            .collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .total_cmp(&(exact[a] - exact[a].floor()))
                .then(a.cmp(&b))
        });
        let mut left = self.count - counts.iter().sum::<usize>();
        for i in order {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

/// Stable 64-bit mix of a seed and a string key.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    // FNV-1a over the key, then a splitmix64 finaliser with the seed folded in
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Where a source sample lives on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub image: PathBuf,
    pub depth: PathBuf,
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Pairs `<stem>.png|jpg` with `<stem>.depth.png` (16-bit) or
/// `<stem>.depth.f32` (raw little-endian floats, image-sized). Images without
/// depth are reported as skipped.
pub fn scan_corpus(dir: &Path) -> Result<(Vec<CorpusEntry>, Vec<SkippedSource>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for path in &paths {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        if name.contains(".depth.") || !is_image_file(path) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let depth = [format!("{stem}.depth.png"), format!("{stem}.depth.f32")]
            .into_iter()
            .map(|n| dir.join(n))
            .find(|p| p.is_file());
        match depth {
            Some(depth) => entries.push(CorpusEntry {
                id: stem,
                image: path.clone(),
                depth,
            }),
            None => skipped.push(SkippedSource {
                path: name.to_string(),
                reason: "no matching depth file".into(),
            }),
        }
    }
    Ok((entries, skipped))
}

/// Decodes one corpus entry; depth comes back in raw units.
pub fn load_sample(entry: &CorpusEntry, depth_png_scale: f64) -> Result<RgbdSample> {
    let image = ImagePlane::load(&entry.image)?;
    let (h, w) = image.dims();
    let is_png = entry.depth.extension().is_some_and(|e| e == "png");
    let depth = if is_png {
        let img = ::image::open(&entry.depth).map_err(|source| Error::Image {
            path: entry.depth.clone(),
            source,
        })?;
        let gray = img.to_luma16();
        DepthMap::new(
            gray.height() as usize,
            gray.width() as usize,
            gray.pixels()
                .map(|p| p[0] as f64 * depth_png_scale)
                .collect(),
        )
    } else {
        let mut bytes = Vec::new();
        fs::File::open(&entry.depth)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&entry.depth, e))?;
        if bytes.len() != 4 * h * w {
            return Err(Error::Format {
                path: entry.depth.clone(),
                reason: format!("expected {} float32 values for a {h}×{w} image", h * w),
            });
        }
        let mut r = bytes.as_slice();
        DepthMap::new(
            h,
            w,
            (0..h * w)
                .map(|_| r.read_f32::<LittleEndian>().unwrap() as f64)
                .collect(),
        )
    };
    let sample = RgbdSample {
        id: entry.id.clone(),
        image,
        depth,
    };
    sample.validate()?;
    Ok(sample)
}

struct QuadJob {
    index: usize,
    water_type: WaterType,
    source: usize,
    split: Split,
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Builds and persists a synthetic dataset. The manifest is written last,
/// so a failed run never leaves a manifest behind.
pub fn build_dataset(
    cfg: &DatasetConfig,
    corpus_dir: &Path,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let (entries, mut skipped) = scan_corpus(corpus_dir)?;
    let mut manifest = DatasetManifest::empty(cfg.seed, cfg.train_resolution);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if cfg.count == 0 {
        manifest.skipped = skipped;
        write_atomic(&out_dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
        return Ok(manifest);
    }

    // Decode every source once up front so corrupt files are reported, not sampled.
    let mut usable = Vec::new();
    for entry in &entries {
        match load_sample(entry, cfg.depth_png_scale) {
            Ok(_) => usable.push(entry.clone()),
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.image.display());
                skipped.push(SkippedSource {
                    path: entry
                        .image
                        .file_name()
                        .unwrap()
                        .to_string_lossy()
                        .into_owned(),
                    reason: e.to_string(),
                });
            }
        }
    }
    if usable.is_empty() {
        return Err(Error::validation(format!(
            "corpus {} has no usable RGB-D samples",
            corpus_dir.display()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "layout"));
    let mut sources: Vec<usize> = (0..usable.len()).collect();
    sources.shuffle(&mut rng);
    let mut test_slots: Vec<usize> = (0..cfg.count).collect();
    test_slots.shuffle(&mut rng);
    let n_test = (cfg.test_fraction * cfg.count as f64).round() as usize;
    let test: BTreeSet<usize> = test_slots.into_iter().take(n_test).collect();

    let mut jobs = Vec::with_capacity(cfg.count);
    for (water_type, n) in cfg.types.iter().zip(cfg.per_type_counts()) {
        for _ in 0..n {
            let index = jobs.len();
            jobs.push(QuadJob {
                index,
                water_type: *water_type,
                source: sources[index % sources.len()],
                split: if test.contains(&index) {
                    Split::Test
                } else {
                    Split::Train
                },
            });
        }
    }

    let results: Vec<Result<ManifestRecord>> = jobs
        .par_iter()
        .map(|job| {
            let entry = &usable[job.source];
            let id = format!("{:05}_{}_{}", job.index, job.water_type.id(), entry.id);
            let seed = derive_seed(cfg.seed, &id);
            let sample = load_sample(entry, cfg.depth_png_scale)?;
            let opts = SynthesisOptions {
                resolution: match job.split {
                    Split::Train => Some((cfg.train_resolution[0], cfg.train_resolution[1])),
                    Split::Test => None,
                },
                depth: cfg.depth,
                depth_scale: cfg.depth_scale,
            };
            let mut draw = ChaCha8Rng::seed_from_u64(seed);
            let quad = synthesize_quad(&sample, &job.water_type.spec(), &mut draw, seed, &opts)?;
            let record = ManifestRecord {
                underwater: format!("{id}_y.png"),
                ground_truth: format!("{id}_x.png"),
                sidecar: format!("{id}_tb.bin"),
                height: quad.dims().0,
                width: quad.dims().1,
                split: job.split,
                provenance: quad.provenance.clone(),
                id,
            };
            quad.underwater
                .save_png(&out_dir.join(&record.underwater))?;
            quad.ground_truth
                .save_png(&out_dir.join(&record.ground_truth))?;
            write_sidecar(
                &out_dir.join(&record.sidecar),
                &quad.transmission,
                &quad.background,
            )?;
            Ok(record)
        })
        .collect();
    manifest.records = results.into_iter().collect::<Result<Vec<_>>>()?;
    manifest.skipped = skipped;
    write_atomic(&out_dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

/// Unpaired real underwater photographs.
#[derive(Clone, Debug, Default)]
pub struct RealPool {
    pub images: Vec<(String, ImagePlane)>,
    pub warnings: Vec<SkippedSource>,
}

impl RealPool {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// An empty pool is a configuration error when domain alignment is on.
    pub fn require(&self, domain_adaptation: bool) -> Result<()> {
        if domain_adaptation && self.is_empty() {
            return Err(Error::Config(
                "domain adaptation is enabled but the real-image pool is empty".into(),
            ));
        }
        Ok(())
    }
}

/// Decodes every image in `dir`; undecodable files become warnings.
pub fn load_real_pool(dir: &Path, resize: Option<(usize, usize)>) -> Result<RealPool> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();
    let mut pool = RealPool::default();
    for path in paths {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        match ImagePlane::load(&path) {
            Ok(img) => {
                let img = match resize {
                    Some((h, w)) => img.resize_bilinear(h, w),
                    None => img,
                };
                pool.images.push((name, img));
            }
            Err(e) => {
                log::warn!("skipping real image {name}: {e}");
                pool.warnings.push(SkippedSource {
                    path: name,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(pool)
}

/// Procedurally generated RGB-D scenes, for demos and tests when no real
/// corpus is at hand.
pub mod procedural {
    use super::*;
    use image::{ImageBuffer, Luma};

    /// A smooth coloured scene with a few blobs, and a tilted-plane depth
    /// with blob-shaped bumps, in metres.
    pub fn scene(height: usize, width: usize, seed: u64) -> RgbdSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: [f64; 3] = [
            rng.random_range(0.2..0.9),
            rng.random_range(0.2..0.9),
            rng.random_range(0.2..0.9),
        ];
        let blobs: Vec<(f64, f64, f64, [f64; 3], f64)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.08..0.3),
                    [
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    ],
                    rng.random_range(-2.0..0.0),
                )
            })
            .collect();
        let tilt = rng.random_range(2.0..8.0);
        let freq = rng.random_range(3.0..9.0);
        let weight = |y: usize, x: usize, (cy, cx, r, _, _): &(f64, f64, f64, [f64; 3], f64)| {
            let dy = y as f64 / height as f64 - cy;
            let dx = x as f64 / width as f64 - cx;
            (-(dx * dx + dy * dy) / (2.0 * r * r)).exp()
        };
        let image = ImagePlane::from_fn(height, width, |c, y, x| {
            let stripes = 0.08 * ((x as f64 / width as f64 * freq * std::f64::consts::TAU).sin());
            let mut v = base[c] + stripes;
            for b in &blobs {
                let wgt = weight(y, x, b);
                v = v * (1.0 - wgt) + b.3[c] * wgt;
            }
            v.clamp(0.0, 1.0)
        });
        let depth: Vec<f64> = (0..height * width)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                let mut d = 1.0 + tilt * (1.0 - y as f64 / height as f64);
                for b in &blobs {
                    d += b.4 * weight(y, x, b);
                }
                d.max(0.0)
            })
            .collect();
        RgbdSample {
            id: format!("scene{seed:04}"),
            image,
            depth: DepthMap::new(height, width, depth),
        }
    }

    /// Writes `count` scenes as `<id>.png` plus 16-bit millimetre `<id>.depth.png`.
    pub fn write_corpus(
        dir: &Path,
        count: usize,
        height: usize,
        width: usize,
        seed: u64,
    ) -> Result<Vec<String>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut ids = Vec::new();
        for i in 0..count {
            let s = scene(height, width, derive_seed(seed, &i.to_string()) % 10_000);
            let id = format!("scene{i:04}");
            s.image.save_png(&dir.join(format!("{id}.png")))?;
            let depth: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
                    Luma([(s.depth.get(y as usize, x as usize) * 1000.0)
                        .round()
                        .min(65535.0) as u16])
                });
            let path = dir.join(format!("{id}.depth.png"));
            depth
                .save(&path)
                .map_err(|source| Error::Image { path, source })?;
            ids.push(id);
        }
        Ok(ids)
    }

    /// Writes `count` "real" underwater-looking photographs (procedural scenes
    /// pushed through a random water type).
    pub fn write_real_pool(
        dir: &Path,
        count: usize,
        height: usize,
        width: usize,
        seed: u64,
    ) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for i in 0..count {
            let s = scene(
                height,
                width,
                derive_seed(seed ^ 0x5eed, &i.to_string()) % 10_000,
            );
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("real{i}")));
            let wt = WaterType::ALL[i % 3];
            let opts = SynthesisOptions::default();
            let quad = synthesize_quad(&s, &wt.spec(), &mut rng, 0, &opts)?;
            quad.underwater
                .save_png(&dir.join(format!("real{i:04}.png")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type_d_is_deterministic() {
        let spec = WaterType::D.spec();
        for seed in [0, 1, 99] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sample_params(&spec, &mut rng, 1.0).unwrap();
            assert_eq!(p.nrer, [0.67, 0.73, 0.67]);
            assert_eq!(p.background, [0.15, 0.80, 0.70]);
        }
    }

    #[test]
    fn type_b_interval_ends() {
        let spec = WaterType::B.spec();
        let lo = sample_params(&spec, &mut FixedDraw(0.0), 1.0).unwrap();
        assert_eq!(lo.nrer, [0.79, 0.92, 0.94]);
        assert_eq!(lo.background, [0.05, 0.60, 0.70]);
        let hi = sample_params(&spec, &mut FixedDraw(1.0), 1.0).unwrap();
        let expect = [0.85, 0.98, 0.99];
        for c in 0..3 {
            assert!((hi.nrer[c] - expect[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = WaterType::B.spec();
        spec.nrer_span[0] = 0.5;
        assert!(spec.validate().is_err());
        let mut spec = WaterType::C.spec();
        spec.bg_base[2] = -0.1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_depth_leaves_scene_untouched() {
        let sample = RgbdSample {
            id: "flat".into(),
            image: ImagePlane::from_fn(4, 4, |c, y, x| (c + y + x) as f64 / 9.0),
            depth: DepthMap::filled(4, 4, 0.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = synthesize_quad(
            &sample,
            &WaterType::B.spec(),
            &mut rng,
            5,
            &SynthesisOptions::default(),
        )
        .unwrap();
        assert_eq!(q.underwater, q.ground_truth);
    }

    #[test]
    fn type_d_unit_depth_blend() {
        // raw depth equal to max_depth / range normalises to exactly one attenuation unit
        let opts = SynthesisOptions::default();
        let raw = opts.depth.max_depth / opts.depth.range;
        let sample = RgbdSample {
            id: "u".into(),
            image: ImagePlane::filled(2, 3, [0.9, 0.2, 0.4]),
            depth: DepthMap::filled(2, 3, raw),
        };
        let q =
            synthesize_quad(&sample, &WaterType::D.spec(), &mut FixedDraw(0.3), 0, &opts).unwrap();
        let t = [0.67, 0.73, 0.67];
        let b = [0.15, 0.80, 0.70];
        let j = [0.9, 0.2, 0.4];
        for c in 0..3 {
            let expect = j[c] * t[c] + b[c] * (1.0 - t[c]);
            assert!((q.underwater.get(c, 1, 2) - expect).abs() < 1e-12);
            assert!((q.transmission.get(c, 0, 0) - t[c]).abs() < 1e-12);
        }
        assert!(q.consistency_error().unwrap() < 1e-12);
    }

    #[test]
    fn mismatched_sample_is_rejected() {
        let sample = RgbdSample {
            id: "bad".into(),
            image: ImagePlane::new(4, 4),
            depth: DepthMap::filled(4, 5, 1.0),
        };
        assert!(synthesize_quad(
            &sample,
            &WaterType::D.spec(),
            &mut FixedDraw(0.0),
            0,
            &SynthesisOptions::default()
        )
        .is_err());
    }

    #[test]
    fn sidecar_roundtrip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let t =
            TransmissionMap::from_planar(2, 2, (0..12).map(|i| 0.1 + i as f64 * 0.07).collect())
                .unwrap();
        let path = dir.path().join("q.bin");
        write_sidecar(&path, &t, &[0.1, 0.2, 0.3]).unwrap();
        let (back, b) = read_sidecar(&path).unwrap();
        assert!(back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| (a - b).abs() < 1e-7));
        assert!((b[2] - 0.3).abs() < 1e-7);
        fs::write(&path, b"UWTBjunk").unwrap();
        assert!(matches!(read_sidecar(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn per_type_counts_sum_to_count() {
        let mut cfg = DatasetConfig {
            count: 12,
            ..Default::default()
        };
        assert_eq!(cfg.per_type_counts(), vec![4, 4, 4]);
        cfg.count = 13;
        assert_eq!(cfg.per_type_counts().iter().sum::<usize>(), 13);
        cfg.proportions = vec![2.0, 1.0, 1.0];
        cfg.count = 8;
        assert_eq!(cfg.per_type_counts(), vec![4, 2, 2]);
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "abc"), derive_seed(7, "abc"));
        assert_ne!(derive_seed(7, "abc"), derive_seed(8, "abc"));
        assert_ne!(derive_seed(7, "abc"), derive_seed(7, "abd"));
    }

    #[test]
    fn empty_pool_is_only_an_error_with_domain_adaptation() {
        let dir = tempfile::tempdir().unwrap();
        let pool = load_real_pool(dir.path(), None).unwrap();
        assert!(pool.is_empty());
        pool.require(false).unwrap();
        assert!(matches!(pool.require(true), Err(Error::Config(_))));
    }

    #[test]
    fn real_pool_skips_corrupt_images() {
        let dir = tempfile::tempdir().unwrap();
        procedural::write_real_pool(dir.path(), 4, 12, 16, 1).unwrap();
        fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let pool = load_real_pool(dir.path(), Some((8, 8))).unwrap();
        assert_eq!(pool.len(), 4);
        assert_eq!(pool.warnings.len(), 1);
        assert_eq!(pool.warnings[0].path, "broken.png");
        for (_, img) in &pool.images {
            assert_eq!(img.dims(), (8, 8));
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    proptest::proptest! {
        #[test]
        fn sampled_params_stay_in_their_intervals(seed in 0u64..u64::MAX) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for wt in WaterType::ALL {
                let s = wt.spec();
                let p = sample_params(&s, &mut rng, 1.0).unwrap();
                for c in 0..3 {
                    proptest::prop_assert!(p.nrer[c] >= s.nrer_base[c]);
                    proptest::prop_assert!(p.nrer[c] <= s.nrer_base[c] + s.nrer_span[c]);
                    proptest::prop_assert!(p.background[c] >= s.bg_base[c]);
                    proptest::prop_assert!(p.background[c] <= s.bg_base[c] + s.bg_span[c]);
                }
            }
        }
    }
}
