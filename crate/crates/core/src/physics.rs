//! Underwater image formation: `I = J·t + B·(1 − t)` with `t = nrer^depth`.
//!
//! Everything here is a pure function of its inputs. Outputs are returned
//! unclipped; clipping happens only when an image is exported.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthMap, ImagePlane};

pub type Rgb = [f64; 3];

/// Per-channel residual energy ratios, background light and depth scaling
/// for one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub nrer: Rgb,
    pub background: Rgb,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
}

fn default_depth_scale() -> f64 {
    1.0
}

impl DegradationParams {
    pub fn new(nrer: Rgb, background: Rgb) -> Self {
        Self {
            nrer,
            background,
            depth_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = (0..3).find(|&c| !(self.nrer[c] > 0.0 && self.nrer[c] <= 1.0)) {
            return Err(Error::validation(format!(
                "nrer[{c}] = {} outside (0, 1]",
                self.nrer[c]
            )));
        }
        validate_background(&self.background)?;
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return Err(Error::validation(format!(
                "depth_scale = {} must be positive",
                self.depth_scale
            )));
        }
        Ok(())
    }
}

fn validate_background(background: &Rgb) -> Result<()> {
    match (0..3).find(|&c| !(0.0..=1.0).contains(&background[c])) {
        Some(c) => Err(Error::validation(format!(
            "background[{c}] = {} outside [0, 1]",
            background[c]
        ))),
        None => Ok(()),
    }
}

/// Per-pixel, per-channel fraction of scene radiance surviving the water path.
/// Stored planar like [`ImagePlane`]; every element lies in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl TransmissionMap {
    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::validation(format!(
                "transmission buffer has {} values, expected {}",
                data.len(),
                3 * height * width
            )));
        }
        let bad = data.iter().filter(|v| !(**v > 0.0 && **v <= 1.0)).count();
        if bad > 0 {
            return Err(Error::validation(format!(
                "{bad} transmission value(s) outside (0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn uniform(height: usize, width: usize, t: Rgb) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for value in t {
            data.extend(std::iter::repeat_n(value, height * width));
        }
        Self::from_planar(height, width, data)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Bilinear resampling; values stay in `(0, 1]` because bilinear weights are convex.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let as_image = ImagePlane::from_planar(self.height, self.width, self.data.clone());
        let data = as_image.resize_bilinear(height, width).data().to_vec();
        Self {
            height,
            width,
            data,
        }
    }
}

/// `t[c] = nrer[c] ^ (depth_scale · depth)`.
pub fn compute_transmission(
    depth: &DepthMap,
    params: &DegradationParams,
) -> Result<TransmissionMap> {
    params.validate()?;
    let bad = depth
        .data()
        .iter()
        .filter(|d| !(d.is_finite() && **d >= 0.0))
        .count();
    if bad > 0 {
        return Err(Error::validation(format!(
            "depth map has {bad} negative or non-finite pixel(s)"
        )));
    }
    let (h, w) = depth.dims();
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let base = params.nrer[c];
        data.extend(
            depth
                .data()
                .iter()
                .map(|&d| base.powf(params.depth_scale * d)),
        );
    }
    // nrer^large can underflow to zero; keep the strictly-positive invariant
    for v in &mut data {
        if *v <= 0.0 {
            *v = f64::MIN_POSITIVE;
        }
    }
    TransmissionMap::from_planar(h, w, data)
}

fn check_shapes(image: &ImagePlane, t: &TransmissionMap) -> Result<()> {
    if image.dims() != t.dims() {
        return Err(Error::validation(format!(
            "image is {:?} but transmission map is {:?}",
            image.dims(),
            t.dims()
        )));
    }
    Ok(())
}

fn blend(scene: &ImagePlane, t: &TransmissionMap, background: &Rgb) -> Result<ImagePlane> {
    check_shapes(scene, t)?;
    validate_background(background)?;
    let n = scene.height() * scene.width();
    let data = scene
        .data()
        .iter()
        .zip(t.data())
        .enumerate()
        .map(|(i, (&j, &tv))| {
            let b = background[i / n];
            j * tv + b * (1.0 - tv)
        })
        .collect();
    Ok(ImagePlane::from_planar(scene.height(), scene.width(), data))
}

/// Forward formation model. The result is not clipped.
pub fn degrade(clear: &ImagePlane, t: &TransmissionMap, background: &Rgb) -> Result<ImagePlane> {
    blend(clear, t, background)
}

/// Re-applies the formation model to an enhanced image using the stored
/// transmission and background light of its training record.
pub fn regenerate(
    enhanced: &ImagePlane,
    t: &TransmissionMap,
    background: &Rgb,
) -> Result<ImagePlane> {
    blend(enhanced, t, background)
}

/// Smallest transmission [`invert_physics`] accepts by default.
pub const DEFAULT_INVERSE_FLOOR: f64 = 1e-4;

/// Analytic inverse `J = (I − B(1 − t)) / t`.
pub fn invert_physics(
    degraded: &ImagePlane,
    t: &TransmissionMap,
    background: &Rgb,
    floor: f64,
) -> Result<ImagePlane> {
    check_shapes(degraded, t)?;
    let count = t.data().iter().filter(|&&v| v < floor).count();
    if count > 0 {
        return Err(Error::Singular { floor, count });
    }
    let n = degraded.height() * degraded.width();
    let data = degraded
        .data()
        .iter()
        .zip(t.data())
        .enumerate()
        .map(|(i, (&iv, &tv))| {
            let b = background[i / n];
            (iv - b * (1.0 - tv)) / tv
        })
        .collect();
    Ok(ImagePlane::from_planar(
        degraded.height(),
        degraded.width(),
        data,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TYPE_D_NRER: Rgb = [0.67, 0.73, 0.67];

    #[test]
    fn zero_depth_gives_unit_transmission() {
        let t = compute_transmission(
            &DepthMap::filled(2, 3, 0.0),
            &DegradationParams::new(TYPE_D_NRER, [0.1; 3]),
        )
        .unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unit_depth_returns_nrer_and_depth_two_squares_it() {
        let p = DegradationParams::new(TYPE_D_NRER, [0.15, 0.80, 0.70]);
        let t1 = compute_transmission(&DepthMap::filled(1, 1, 1.0), &p).unwrap();
        for c in 0..3 {
            assert!((t1.get(c, 0, 0) - TYPE_D_NRER[c]).abs() < 1e-15);
        }
        let t2 = compute_transmission(&DepthMap::filled(1, 1, 2.0), &p).unwrap();
        let expect = [0.4489, 0.5329, 0.4489];
        for c in 0..3 {
            assert!((t2.get(c, 0, 0) - expect[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_scale_multiplies_the_exponent() {
        let mut p = DegradationParams::new(TYPE_D_NRER, [0.5; 3]);
        p.depth_scale = 2.0;
        let t = compute_transmission(&DepthMap::filled(1, 1, 1.0), &p).unwrap();
        assert!((t.get(0, 0, 0) - 0.4489).abs() < 1e-12);
    }

    #[test]
    fn bad_depth_is_rejected_with_pixel_count() {
        let p = DegradationParams::new(TYPE_D_NRER, [0.5; 3]);
        let d = DepthMap::new(1, 4, vec![1.0, -1.0, f64::NAN, 0.0]);
        let err = compute_transmission(&d, &p).unwrap_err().to_string();
        assert!(err.contains("2 negative or non-finite"), "{err}");
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(DegradationParams::new([0.0, 0.5, 0.5], [0.5; 3])
            .validate()
            .is_err());
        assert!(DegradationParams::new([1.1, 0.5, 0.5], [0.5; 3])
            .validate()
            .is_err());
        assert!(DegradationParams::new([1.0, 0.5, 0.5], [0.5, 1.5, 0.5])
            .validate()
            .is_err());
        let mut p = DegradationParams::new([1.0; 3], [0.5; 3]);
        p.depth_scale = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn degrade_arithmetic() {
        let j = ImagePlane::filled(1, 1, [0.5; 3]);
        let t = TransmissionMap::uniform(1, 1, [0.5; 3]).unwrap();
        let i = degrade(&j, &t, &[0.8; 3]).unwrap();
        assert!((i.get(0, 0, 0) - 0.65).abs() < 1e-15);

        let one = TransmissionMap::uniform(1, 1, [1.0; 3]).unwrap();
        assert_eq!(degrade(&j, &one, &[0.8; 3]).unwrap(), j);

        let tiny = TransmissionMap::uniform(1, 1, [1e-12; 3]).unwrap();
        let b = degrade(&j, &tiny, &[0.8, 0.1, 0.3]).unwrap();
        assert!(b.max_abs_diff(&ImagePlane::filled(1, 1, [0.8, 0.1, 0.3])) < 1e-11);
    }

    #[test]
    fn regenerate_black_scene_is_half_background() {
        let t = TransmissionMap::uniform(1, 1, [0.5; 3]).unwrap();
        let y = regenerate(&ImagePlane::new(1, 1), &t, &[0.15, 0.80, 0.70]).unwrap();
        let expect = [0.075, 0.40, 0.35];
        for c in 0..3 {
            assert!((y.get(c, 0, 0) - expect[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let t = TransmissionMap::uniform(2, 2, [0.5; 3]).unwrap();
        assert!(degrade(&ImagePlane::new(2, 3), &t, &[0.5; 3]).is_err());
        assert!(
            invert_physics(&ImagePlane::new(3, 2), &t, &[0.5; 3], DEFAULT_INVERSE_FLOOR).is_err()
        );
    }

    #[test]
    fn inverse_cases() {
        let t = TransmissionMap::uniform(1, 1, [0.5; 3]).unwrap();
        let j = invert_physics(
            &ImagePlane::filled(1, 1, [0.65; 3]),
            &t,
            &[0.8; 3],
            DEFAULT_INVERSE_FLOOR,
        )
        .unwrap();
        assert!((j.get(1, 0, 0) - 0.5).abs() < 1e-15);

        let bg = [0.2, 0.6, 0.9];
        let j = invert_physics(
            &ImagePlane::filled(1, 1, bg),
            &t,
            &bg,
            DEFAULT_INVERSE_FLOOR,
        )
        .unwrap();
        assert!(j.max_abs_diff(&ImagePlane::filled(1, 1, bg)) < 1e-15);

        let thin = TransmissionMap::uniform(1, 2, [1e-5, 0.5, 0.5]).unwrap();
        match invert_physics(&ImagePlane::new(1, 2), &thin, &bg, DEFAULT_INVERSE_FLOOR) {
            Err(Error::Singular { count, .. }) => assert_eq!(count, 2),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn transmission_composes_over_depth() {
        let p = DegradationParams::new([0.81, 0.93, 0.97], [0.5; 3]);
        for (d1, d2) in [(0.3, 1.2), (2.0, 0.5), (0.0, 3.0)] {
            let a = compute_transmission(&DepthMap::filled(1, 1, d1), &p).unwrap();
            let b = compute_transmission(&DepthMap::filled(1, 1, d2), &p).unwrap();
            let ab = compute_transmission(&DepthMap::filled(1, 1, d1 + d2), &p).unwrap();
            for c in 0..3 {
                assert!((a.get(c, 0, 0) * b.get(c, 0, 0) - ab.get(c, 0, 0)).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn roundtrip_recovers_scene(
            j in prop::collection::vec(0.0f64..=1.0, 12),
            t in prop::collection::vec(0.01f64..=1.0, 12),
            b in prop::array::uniform3(0.0f64..=1.0),
        ) {
            let scene = ImagePlane::from_planar(2, 2, j);
            let tm = TransmissionMap::from_planar(2, 2, t).unwrap();
            let i = degrade(&scene, &tm, &b).unwrap();
            let back = invert_physics(&i, &tm, &b, DEFAULT_INVERSE_FLOOR).unwrap();
            prop_assert!(back.max_abs_diff(&scene) < 1e-5);
        }

        #[test]
        fn deeper_pixels_move_toward_background(
            j in prop::array::uniform3(0.0f64..=1.0),
            b in prop::array::uniform3(0.0f64..=1.0),
            nrer in prop::array::uniform3(0.05f64..0.999),
            d1 in 0.0f64..3.0,
            extra in 0.01f64..3.0,
        ) {
            let p = DegradationParams::new(nrer, b);
            let depth = DepthMap::new(1, 2, vec![d1, d1 + extra]);
            let t = compute_transmission(&depth, &p).unwrap();
            let scene = ImagePlane::from_fn(1, 2, |c, _, _| j[c]);
            let i = degrade(&scene, &t, &b).unwrap();
            for c in 0..3 {
                prop_assert!(t.get(c, 0, 1) < t.get(c, 0, 0));
                let near = (i.get(c, 0, 0) - b[c]).abs();
                let far = (i.get(c, 0, 1) - b[c]).abs();
                prop_assert!(far <= near + 1e-15);
            }
        }

        #[test]
        fn unit_nrer_is_depth_invariant(d in 0.0f64..100.0) {
            let p = DegradationParams::new([1.0; 3], [0.3; 3]);
            let t = compute_transmission(&DepthMap::filled(1, 1, d), &p).unwrap();
            prop_assert!(t.data().iter().all(|&v| v == 1.0));
        }
    }
}
