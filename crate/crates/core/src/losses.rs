//! Objective terms: adversarial (two discriminators), pixel, cycle and
//! covariance alignment, plus their weighted combination.
//!
//! Each term exists twice: as a graph builder used during training and as a
//! plain function on tensors used for evaluation and tests. The plain
//! functions run the same graph ops on constant inputs.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Weights of the cycle, pixel and covariance terms. A zero weight removes
/// the term from the objective entirely.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cycle: f64,
    pub lambda_pixel: f64,
    pub lambda_coral: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cycle: 10.0,
            lambda_pixel: 10.0,
            lambda_coral: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cycle", self.lambda_cycle),
            ("lambda_pixel", self.lambda_pixel),
            ("lambda_coral", self.lambda_coral),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// Adversarial criterion. Least squares is an escape hatch, off by default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    #[default]
    Bce,
    LeastSquares,
}

/// Generator-side objective terms of one step. Terms that were not part of
/// the objective are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_a: f64,
    pub l_g: Option<f64>,
    pub l_m: Option<f64>,
    pub l_cycle: Option<f64>,
    pub l_coral: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_a: f64,
    pub l_g: Option<f64>,
    pub l_m: Option<f64>,
    pub l_pixel: Option<f64>,
    pub l_cycle: Option<f64>,
    pub l_coral: Option<f64>,
    pub total: f64,
}

/// Pixel term from its parts: the mean of `l_g` and `l_m`, or `l_g` alone
/// when the feedback path is off.
pub fn pixel_term(l_g: Option<f64>, l_m: Option<f64>) -> Option<f64> {
    match (l_g, l_m) {
        (Some(g), Some(m)) => Some((g + m) / 2.0),
        (Some(g), None) => Some(g),
        (None, Some(m)) => Some(m),
        (None, None) => None,
    }
}

/// `total = l_a + λ1·l_cycle + λ2·l_pixel + λ3·l_coral` over present terms.
pub fn total_loss(c: &LossComponents, weights: &LossWeights) -> Result<LossBreakdown> {
    let values = [Some(c.l_a), c.l_g, c.l_m, c.l_cycle, c.l_coral];
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: None,
            reason: format!("non-finite loss component in {c:?}"),
            last_finite: None,
        });
    }
    let l_pixel = pixel_term(c.l_g, c.l_m);
    let total = c.l_a
        + c.l_cycle.map_or(0.0, |v| weights.lambda_cycle * v)
        + l_pixel.map_or(0.0, |v| weights.lambda_pixel * v)
        + c.l_coral.map_or(0.0, |v| weights.lambda_coral * v);
    Ok(LossBreakdown {
        l_a: c.l_a,
        l_g: c.l_g,
        l_m: c.l_m,
        l_pixel,
        l_cycle: c.l_cycle,
        l_coral: c.l_coral,
        total,
    })
}

/// Scalar criterion of patch logits against a constant label.
pub fn gan_criterion<T: Real>(g: &mut Graph<T>, logits: Var, real: bool, mode: GanMode) -> Var {
    let label = if real { T::one() } else { T::zero() };
    match mode {
        GanMode::Bce => g.bce_with_logits(logits, label),
        GanMode::LeastSquares => g.mean_squared_to(logits, label),
    }
}

/// Discriminator objective: score `real` as 1 and `fake` as 0.
pub fn discriminator_objective<T: Real>(
    g: &mut Graph<T>,
    real: Var,
    fake: Var,
    mode: GanMode,
) -> Var {
    let r = gan_criterion(g, real, true, mode);
    let f = gan_criterion(g, fake, false, mode);
    g.weighted_sum(&[(r, T::one()), (f, T::one())])
}

fn same_shape<T: Real>(pairs: &[(&Tensor<T>, &Tensor<T>)]) -> Result<()> {
    for (a, b) in pairs {
        if a.shape() != b.shape() {
            return Err(Error::validation(format!(
                "loss inputs differ in shape: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

fn eval<T: Real>(build: impl FnOnce(&mut Graph<T>) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = build(&mut g);
    g.value(v).item().f64()
}

/// `(l_g, l_m, l_pixel)`: mean absolute differences of enhanced vs truth and
/// regenerated vs observed, and their average.
pub fn pixel_losses<T: Real>(
    enhanced: &Tensor<T>,
    truth: &Tensor<T>,
    regenerated: &Tensor<T>,
    observed: &Tensor<T>,
) -> Result<(f64, f64, f64)> {
    same_shape(&[
        (enhanced, truth),
        (regenerated, observed),
        (enhanced, observed),
    ])?;
    let l_g = mean_abs(enhanced, truth);
    let l_m = mean_abs(regenerated, observed);
    Ok((l_g, l_m, (l_g + l_m) / 2.0))
}

/// Mean absolute difference between the generator's output on the
/// regenerated image and the ground truth.
pub fn cycle_loss<T: Real>(re_enhanced: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    same_shape(&[(re_enhanced, truth)])?;
    Ok(mean_abs(re_enhanced, truth))
}

fn mean_abs<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    eval(|g: &mut Graph<T>| {
        let a = g.input(a.clone());
        let b = g.input(b.clone());
        g.mean_abs_diff(a, b)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialLosses {
    /// Loss of `D_g` (truth scored real, enhanced scored fake).
    pub d_g: f64,
    /// Loss of `D_p` (observed scored real, regenerated scored fake).
    pub d_p: f64,
    /// Non-saturating generator loss: both fakes scored real.
    pub generator: f64,
}

pub fn adversarial_losses<T: Real>(
    dg_real: &Tensor<T>,
    dg_fake: &Tensor<T>,
    dp_real: &Tensor<T>,
    dp_fake: &Tensor<T>,
    mode: GanMode,
) -> Result<AdversarialLosses> {
    for (name, t) in [
        ("dg_real", dg_real),
        ("dg_fake", dg_fake),
        ("dp_real", dp_real),
        ("dp_fake", dp_fake),
    ] {
        if !t.all_finite() {
            let bad = t.data().iter().filter(|v| !v.is_finite()).count();
            return Err(Error::Divergence {
                step: None,
                reason: format!("{bad} non-finite logit(s) in {name}"),
                last_finite: None,
            });
        }
    }
    let disc = |real: &Tensor<T>, fake: &Tensor<T>| {
        eval(|g: &mut Graph<T>| {
            let r = g.input(real.clone());
            let f = g.input(fake.clone());
            discriminator_objective(g, r, f, mode)
        })
    };
    let generator = eval(|g: &mut Graph<T>| {
        let a = g.input(dg_fake.clone());
        let b = g.input(dp_fake.clone());
        let la = gan_criterion(g, a, true, mode);
        let lb = gan_criterion(g, b, true, mode);
        g.weighted_sum(&[(la, T::one()), (lb, T::one())])
    });
    Ok(AdversarialLosses {
        d_g: disc(dg_real, dg_fake),
        d_p: disc(dp_real, dp_fake),
        generator,
    })
}

/// Covariance alignment between source and target feature tensors
/// (`N×d×h×w`, each spatial position a `d`-dimensional descriptor).
pub fn coral_loss<T: Real>(source: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_coral_inputs(source.shape(), target.shape())?;
    Ok(eval(|g: &mut Graph<T>| {
        let s = g.input(source.clone());
        let t = g.input(target.clone());
        g.coral(s, t)
    }))
}

pub(crate) fn check_coral_inputs(source: &[usize], target: &[usize]) -> Result<()> {
    let (s, t) = match (source, target) {
        ([sn, sc, sh, sw], [tn, tc, th, tw]) => ((sn * sh * sw, *sc), (tn * th * tw, *tc)),
        _ => return Err(Error::validation("feature tensors must be N×C×H×W")),
    };
    if s.1 != t.1 {
        return Err(Error::validation(format!(
            "feature channel mismatch: source {}, target {}",
            s.1, t.1
        )));
    }
    if s.0 < 2 || t.0 < 2 {
        return Err(Error::validation(format!(
            "covariance needs at least 2 descriptors, got {} and {}",
            s.0, t.0
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::bce_with_logits_mean;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Descriptor rows to a `1×d×n×1` feature tensor.
    fn features(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        let n = rows.len();
        Tensor::from_fn(&[1, d, n, 1], |i| rows[i % n][i / n])
    }

    /// Brute-force unbiased covariance from descriptor rows.
    fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = rows.len() as f64;
        let d = rows[0].len();
        let mean: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        (0..d)
            .map(|a| {
                (0..d)
                    .map(|b| {
                        rows.iter()
                            .map(|r| (r[a] - mean[a]) * (r[b] - mean[b]))
                            .sum::<f64>()
                            / (n - 1.0)
                    })
                    .collect()
            })
            .collect()
    }

    fn coral_oracle(s: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
        let (cs, ct) = (covariance(s), covariance(t));
        let d = cs.len();
        let mut frob = 0.0;
        for a in 0..d {
            for b in 0..d {
                frob += (cs[a][b] - ct[a][b]).powi(2);
            }
        }
        frob / (4.0 * (d * d) as f64)
    }

    #[test]
    fn coral_hand_case_matches_brute_force_covariances() {
        let s = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let t = vec![vec![0.0, 0.0], vec![1.0, -1.0]];
        assert_eq!(covariance(&s), vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(covariance(&t), vec![vec![0.5, -0.5], vec![-0.5, 0.5]]);
        let oracle = coral_oracle(&s, &t);
        assert!((oracle - 0.125).abs() < 1e-15);
        let got = coral_loss(
            &features(&[&[0.0, 0.0], &[1.0, 1.0]]),
            &features(&[&[0.0, 0.0], &[1.0, -1.0]]),
        )
        .unwrap();
        assert!((got - oracle).abs() < 1e-15);
    }

    #[test]
    fn coral_matches_oracle_on_random_features_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let t: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..3.0)).collect())
            .collect();
        let fs = features(&s.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let ft = features(&t.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let got = coral_loss(&fs, &ft).unwrap();
        assert!((got - coral_oracle(&s, &t)).abs() < 1e-12);
        assert!((coral_loss(&ft, &fs).unwrap() - got).abs() < 1e-15);
    }

    #[test]
    fn coral_vanishes_on_identical_and_permuted_descriptors() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![i as f64, (i * i) as f64 * 0.1, (i as f64).sin()])
            .collect();
        let mut perm = rows.clone();
        perm.reverse();
        perm.swap(0, 3);
        let a = features(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let b = features(&perm.iter().map(Vec::as_slice).collect::<Vec<_>>());
        assert_eq!(coral_loss(&a, &a).unwrap(), 0.0);
        assert!(coral_loss(&a, &b).unwrap().abs() < 1e-24);
    }

    #[test]
    fn coral_rejects_bad_inputs() {
        let one = Tensor::<f64>::zeros(&[1, 3, 1, 1]);
        let ok = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert!(coral_loss(&one, &ok).is_err());
        assert!(coral_loss(&ok, &Tensor::zeros(&[1, 4, 2, 2])).is_err());
    }

    #[test]
    fn pixel_terms() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| (i as f64 * 0.013) % 0.8);
        let y = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| (i as f64 * 0.029) % 0.7);
        assert_eq!(pixel_losses(&x, &x, &y, &y).unwrap(), (0.0, 0.0, 0.0));
        let shifted = x.map(|v| v + 0.1);
        let (lg, lm, lp) = pixel_losses(&shifted, &x, &y, &y).unwrap();
        assert!((lg - 0.1).abs() < 1e-12 && lm == 0.0 && (lp - 0.05).abs() < 1e-12);
        let y_shift = y.map(|v| v + 0.1);
        let (_, _, swapped) = pixel_losses(&x, &x, &y_shift, &y).unwrap();
        assert!((swapped - lp).abs() < 1e-12);
        assert!(pixel_losses(&x, &Tensor::zeros(&[1, 3, 4, 3]), &y, &y).is_err());
    }

    #[test]
    fn cycle_terms() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 2, 2], |i| i as f64 / 12.0);
        assert_eq!(cycle_loss(&x, &x).unwrap(), 0.0);
        assert!((cycle_loss(&x.map(|v| v + 0.2), &x).unwrap() - 0.2).abs() < 1e-12);
        assert!((cycle_loss(&x.map(|v| v - 0.2), &x).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_logits_give_ln2_per_term() {
        let z = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let l = adversarial_losses(&z, &z, &z, &z, GanMode::Bce).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((l.d_g - 2.0 * ln2).abs() < 1e-12);
        assert!((l.d_p - 2.0 * ln2).abs() < 1e-12);
        assert!((l.generator - 2.0 * ln2).abs() < 1e-12);
    }

    #[test]
    fn confident_discriminators_approach_zero_loss() {
        let hi = Tensor::<f64>::full(&[1, 1, 2, 2], 40.0);
        let lo = Tensor::<f64>::full(&[1, 1, 2, 2], -40.0);
        let l = adversarial_losses(&hi, &lo, &hi, &lo, GanMode::Bce).unwrap();
        assert!(l.d_g < 1e-15 && l.d_p < 1e-15);
        assert!(l.generator > 79.0);
    }

    #[test]
    fn adversarial_matches_per_patch_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut logits = || Tensor::<f64>::from_fn(&[1, 1, 5, 5], |_| rng.random_range(-4.0..4.0));
        let (a, b, c, d) = (logits(), logits(), logits(), logits());
        let per_patch = |t: &Tensor<f64>, label: f64| {
            let mut acc = 0.0;
            for &z in t.data() {
                let p = 1.0 / (1.0 + (-z).exp());
                acc += -(label * p.ln() + (1.0 - label) * (1.0 - p).ln());
            }
            acc / t.len() as f64
        };
        let l = adversarial_losses(&a, &b, &c, &d, GanMode::Bce).unwrap();
        assert!((l.d_g - (per_patch(&a, 1.0) + per_patch(&b, 0.0))).abs() < 1e-6);
        assert!((l.d_p - (per_patch(&c, 1.0) + per_patch(&d, 0.0))).abs() < 1e-6);
        assert!((l.generator - (per_patch(&b, 1.0) + per_patch(&d, 1.0))).abs() < 1e-6);
        assert!((bce_with_logits_mean(a.data(), 1.0) - per_patch(&a, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_are_divergence() {
        let z = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let mut bad = z.clone();
        bad.data_mut()[1] = f64::NAN;
        match adversarial_losses(&z, &bad, &z, &z, GanMode::Bce) {
            Err(Error::Divergence { reason, .. }) => assert!(reason.contains("dg_fake")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn total_loss_composition() {
        let ones = LossComponents {
            l_a: 1.0,
            l_g: Some(1.0),
            l_m: Some(1.0),
            l_cycle: Some(1.0),
            l_coral: Some(1.0),
        };
        let unit = LossWeights {
            lambda_cycle: 1.0,
            lambda_pixel: 1.0,
            lambda_coral: 1.0,
        };
        assert_eq!(total_loss(&ones, &unit).unwrap().total, 4.0);
        let zero = LossWeights {
            lambda_cycle: 0.0,
            lambda_pixel: 0.0,
            lambda_coral: 0.0,
        };
        assert_eq!(total_loss(&ones, &zero).unwrap().total, 1.0);

        let c = LossComponents {
            l_a: 0.7,
            l_g: Some(0.3),
            l_m: Some(0.1),
            l_cycle: Some(0.25),
            l_coral: Some(0.05),
        };
        let w = LossWeights::default();
        let base = total_loss(&c, &w).unwrap();
        assert!((base.l_pixel.unwrap() - 0.2).abs() < 1e-15);
        let doubled = total_loss(
            &c,
            &LossWeights {
                lambda_pixel: 2.0 * w.lambda_pixel,
                ..w
            },
        )
        .unwrap();
        assert!(
            (doubled.total - base.total - w.lambda_pixel * base.l_pixel.unwrap()).abs() < 1e-12
        );

        let nan = LossComponents {
            l_cycle: Some(f64::NAN),
            ..c
        };
        assert!(matches!(
            total_loss(&nan, &w),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn absent_terms_stay_absent() {
        let c = LossComponents {
            l_a: 0.5,
            l_g: Some(0.2),
            ..Default::default()
        };
        let b = total_loss(&c, &LossWeights::default()).unwrap();
        assert_eq!(b.l_m, None);
        assert_eq!(b.l_cycle, None);
        assert_eq!(b.l_pixel, Some(0.2));
        assert!((b.total - (0.5 + 10.0 * 0.2)).abs() < 1e-12);
    }
}
