//! Masked gradient attack and the binary-to-binary crafting pipeline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cnn::{CnnModel, Workspace};
use crate::error::{Error, Result};
use crate::gadgets::{insert_gadgets, GadgetKind, PayloadMap};
use crate::imaging::{classify_transform, crafting_transform, upsample_apply, DownsampleRecord, GreyImage};
use crate::scalar::Scalar;
use crate::wasm::parse_module;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub tau: f64,
    pub max_iterations: usize,
    /// Class the crafted image should be assigned; 0 is benign.
    pub target_class: u8,
    #[serde(default)]
    pub clamp: ClampMode,
    /// Stop early, counted as stalled, when the logit has not moved toward
    /// the target by at least `min_delta` within this many iterations.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
}

fn default_min_delta() -> f64 {
    1e-3
}

/// Interval each editable pixel of the crafting image is clamped to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClampMode {
    /// `[0, 1]`.
    #[default]
    Unit,
    /// The group means the payload bytes of each group can actually produce.
    Reachable,
}

impl std::str::FromStr for ClampMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Self::Unit),
            "reachable" => Ok(Self::Reachable),
            other => Err(Error::InvalidConfig(format!("unknown clamp mode {other:?}"))),
        }
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            tau: 1e-13,
            max_iterations: 10_000,
            target_class: 0,
            clamp: ClampMode::Unit,
            patience: None,
            min_delta: default_min_delta(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tau > 0.0 && self.tau < 0.5) {
            return Err(Error::InvalidConfig(format!("tau must lie in (0, 0.5), got {}", self.tau)));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::InvalidConfig(format!("min_delta must be non-negative, got {}", self.min_delta)));
        }
        if self.target_class > 1 {
            return Err(Error::InvalidTarget(self.target_class));
        }
        Ok(())
    }

    /// True once `score` is within `tau` of the target class.
    pub fn reached(&self, score: f64) -> bool {
        match self.target_class {
            0 => score <= self.tau,
            _ => score >= 1.0 - self.tau,
        }
    }
}

/// Editable pixels and the per-pixel interval each may move within.
#[derive(Debug, Clone, PartialEq)]
pub struct EditMask<S> {
    editable: Vec<bool>,
    lower: Vec<S>,
    upper: Vec<S>,
}

impl<S: Scalar> EditMask<S> {
    /// Mask with every editable pixel free in `[0, 1]`.
    pub fn unit(editable: Vec<bool>) -> Self {
        let n = editable.len();
        Self {
            editable,
            lower: vec![S::zero(); n],
            upper: vec![S::one(); n],
        }
    }

    pub fn with_bounds(editable: Vec<bool>, lower: Vec<S>, upper: Vec<S>) -> Result<Self> {
        if lower.len() != editable.len() || upper.len() != editable.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bounds", editable.len()),
                found: format!("{}/{}", lower.len(), upper.len()),
            });
        }
        Ok(Self { editable, lower, upper })
    }

    /// `M1` of a downsampled binary, bounded by the group means its payload
    /// bytes can actually produce.
    pub fn from_record(record: &DownsampleRecord, instrumented: &[u8]) -> Result<Self> {
        let (lower, upper) = record.reachable_ranges::<S>(instrumented)?;
        Self::with_bounds(record.mask_m1.clone(), lower, upper)
    }

    pub fn for_mode(mode: ClampMode, record: &DownsampleRecord, instrumented: &[u8]) -> Result<Self> {
        match mode {
            ClampMode::Unit => Ok(Self::unit(record.mask_m1.clone())),
            ClampMode::Reachable => Self::from_record(record, instrumented),
        }
    }

    pub fn editable(&self) -> &[bool] {
        &self.editable
    }

    pub fn editable_count(&self) -> usize {
        self.editable.iter().filter(|&&m| m).count()
    }
}

/// Result of [`craft`].
#[derive(Debug, Clone)]
pub struct Crafted<S> {
    pub image: GreyImage<S>,
    pub iterations_used: usize,
    pub initial_score: f64,
    pub final_score: f64,
    pub reached_tau: bool,
    /// No update could move the image any further; `iterations_used` is
    /// then reported as the iteration cap.
    pub stalled: bool,
}

/// Iterates `x <- clamp(x - M1 * eps * g / max|M1 * g|)` with `g` the input
/// gradient of the BCE loss toward the target class, until the score is
/// within `tau` of the target or the iteration cap is hit.
pub fn craft<S: Scalar>(
    model: &CnnModel<S>,
    image: &GreyImage<S>,
    mask: &EditMask<S>,
    config: &AttackConfig,
) -> Result<Crafted<S>> {
    config.validate()?;
    if mask.editable.len() != image.pixels().len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} mask entries", image.pixels().len()),
            found: format!("{}", mask.editable.len()),
        });
    }
    if mask.editable_count() == 0 {
        return Err(Error::NothingEditable);
    }
    let mut ws = Workspace::new();
    let mut x = image.clone();
    let mut initial_score = None;
    let mut score;
    let mut iterations = 0;
    let mut stalled = false;
    let eps = S::of(config.epsilon);
    // signed so that larger means closer to the target class
    let progress = |logit: f64| if config.target_class == 0 { -logit } else { logit };
    let mut best = f64::NEG_INFINITY;
    let mut best_at = 0;

    loop {
        let want_grad = iterations < config.max_iterations;
        let eval = model.evaluate(&x, config.target_class, want_grad, &mut ws)?;
        score = eval.score.as_f64();
        initial_score.get_or_insert(score);
        if config.reached(score) || !want_grad {
            break;
        }
        let p = progress(eval.logit.as_f64());
        if p >= best + config.min_delta || best == f64::NEG_INFINITY {
            best = p;
            best_at = iterations;
        } else if config.patience.is_some_and(|n| iterations - best_at >= n) {
            stalled = true;
            break;
        }
        let grad = eval.input_gradient.expect("requested");
        let g = grad.data();
        let px = x.pixels();
        let free = |i: usize| {
            mask.editable[i]
                && !(g[i] > S::zero() && px[i] <= mask.lower[i])
                && !(g[i] < S::zero() && px[i] >= mask.upper[i])
        };
        let norm = (0..g.len())
            .filter(|&i| free(i))
            .fold(S::zero(), |acc, i| acc.max(g[i].abs()));
        if norm == S::zero() || !norm.is_finite() {
            stalled = true;
            break;
        }
        let scale = eps / norm;
        let mut moved = false;
        let px = x.pixels_mut();
        for i in 0..px.len() {
            if !mask.editable[i] {
                continue;
            }
            let next = (px[i] - scale * g[i]).max(mask.lower[i]).min(mask.upper[i]);
            if next != px[i] {
                px[i] = next;
                moved = true;
            }
        }
        iterations += 1;
        if !moved {
            stalled = true;
            break;
        }
    }
    let initial_score = initial_score.expect("evaluated at least once");
    let reached_tau = config.reached(score);
    if stalled && !reached_tau {
        iterations = config.max_iterations;
    }
    Ok(Crafted {
        image: x,
        iterations_used: iterations,
        initial_score,
        final_score: score,
        reached_tau,
        stalled: stalled && !reached_tau,
    })
}

/// Everything recorded about one crafted binary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub iterations_used: usize,
    pub initial_substitute_score: f64,
    /// Substitute score of the crafting-path image at exit.
    pub final_substitute_score: f64,
    /// Substitute score of the reconstructed binary through the
    /// classification transform.
    pub inference_score: f64,
    pub reached_tau: bool,
    pub stalled: bool,
    /// Payload bytes whose target value had to be clamped into `[0, 255]`.
    pub clamp_deviation_count: usize,
    pub editable_pixels: usize,
    pub groups_updated: usize,
    pub gadget_count: usize,
    pub density: f64,
    pub kind: GadgetKind,
    pub insertion_seed: u64,
    pub model_seed: u64,
    pub model_epochs: usize,
    pub config: AttackConfig,
    pub output_path: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub instrumented: Vec<u8>,
    pub adversarial: Vec<u8>,
    pub payload_map: PayloadMap,
    pub report: AttackReport,
}

/// Instrument, downsample, craft and write the result back into the binary.
pub fn attack_binary<S: Scalar>(
    bytes: &[u8],
    model: &CnnModel<S>,
    kind: GadgetKind,
    density: f64,
    seed: u64,
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    config.validate()?;
    let module = parse_module(bytes)?;
    let (instrumented, payload_map) = insert_gadgets(&module, kind, density, seed)?;
    let instrumented = instrumented.encode();
    let (image, record) = crafting_transform::<S>(&instrumented, &payload_map.offsets)?;
    let mask = EditMask::for_mode(config.clamp, &record, &instrumented)?;
    let crafted = craft(model, &image, &mask, config)?;
    let rebuilt = upsample_apply(&record, &crafted.image, &instrumented)?;
    let inference_score = model.forward(&classify_transform::<S>(&rebuilt.bytes)?)?.as_f64();
    let report = AttackReport {
        iterations_used: crafted.iterations_used,
        initial_substitute_score: crafted.initial_score,
        final_substitute_score: crafted.final_score,
        inference_score,
        reached_tau: crafted.reached_tau,
        stalled: crafted.stalled,
        clamp_deviation_count: rebuilt.clamped_bytes,
        editable_pixels: mask.editable_count(),
        groups_updated: rebuilt.groups_updated,
        gadget_count: payload_map.gadget_count,
        density,
        kind,
        insertion_seed: seed,
        model_seed: model.seed,
        model_epochs: model.epochs_trained,
        config: config.clone(),
        output_path: None,
    };
    Ok(AttackOutcome {
        instrumented,
        adversarial: rebuilt.bytes,
        payload_map,
        report,
    })
}

/// One malicious sample as seen by the transfer evaluation.
#[derive(Debug, Clone)]
pub struct TransferSample {
    pub kind: GadgetKind,
    pub density: f64,
    pub original: Vec<u8>,
    pub instrumented: Vec<u8>,
    /// Adversarial binaries keyed by series name, e.g. the crafting substitute.
    pub adversarial: Vec<(String, Vec<u8>)>,
}

/// Fraction of malicious samples the target scores below 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub kind: GadgetKind,
    pub density: f64,
    /// `original`, `instrumented` or an adversarial tag.
    pub series: String,
    pub rate: f64,
    pub n: usize,
}

/// Misclassification rates per (kind, density, series) on the target.
pub fn transfer_evaluate<S: Scalar>(samples: &[TransferSample], target: &CnnModel<S>) -> Result<Vec<RateRow>> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let evades = |bytes: &[u8]| -> Result<bool> {
        Ok(target.forward(&classify_transform::<S>(bytes)?)?.as_f64() < 0.5)
    };
    // (kind, density bits, series) -> (evaded, total)
    let mut tally: BTreeMap<(GadgetKind, u64, String), (usize, usize)> = BTreeMap::new();
    let mut bump = |kind, density: f64, series: String, hit: bool| {
        let e = tally.entry((kind, density.to_bits(), series)).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    };
    for s in samples {
        bump(s.kind, s.density, "original".into(), evades(&s.original)?);
        bump(s.kind, s.density, "instrumented".into(), evades(&s.instrumented)?);
        for (tag, adv) in &s.adversarial {
            bump(s.kind, s.density, tag.clone(), evades(adv)?);
        }
    }
    Ok(tally
        .into_iter()
        .map(|((kind, bits, series), (hit, n))| RateRow {
            kind,
            density: f64::from_bits(bits),
            series,
            rate: hit as f64 / n as f64,
            n,
        })
        .collect())
}

/// Byte positions where two equally long binaries differ.
pub fn diff_offsets(a: &[u8], b: &[u8]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "binaries differ in length");
    (0..a.len()).filter(|&i| a[i] != b[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::Architecture;
    use crate::imaging::IMAGE_DIM;

    fn small_model(seed: u64) -> CnnModel<f64> {
        CnnModel::init(
            Architecture {
                input_dim: IMAGE_DIM,
                kernel: 3,
                pool: 2,
                filters: vec![2, 2, 2],
            },
            seed,
        )
        .unwrap()
    }

    fn grey(v: f64) -> GreyImage<f64> {
        GreyImage::new(IMAGE_DIM, IMAGE_DIM, vec![v; IMAGE_DIM * IMAGE_DIM]).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        for bad in [
            AttackConfig { epsilon: 0.0, ..Default::default() },
            AttackConfig { tau: 0.5, ..Default::default() },
            AttackConfig { tau: 0.0, ..Default::default() },
            AttackConfig { max_iterations: 0, ..Default::default() },
            AttackConfig { target_class: 2, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        let m = small_model(1);
        let mask = EditMask::unit(vec![false; IMAGE_DIM * IMAGE_DIM]);
        assert!(matches!(
            craft(&m, &grey(0.5), &mask, &AttackConfig::default()),
            Err(Error::NothingEditable)
        ));
    }

    #[test]
    fn already_benign_input_exits_immediately() {
        let mut m = CnnModel::zeros(small_model(1).architecture().clone()).unwrap();
        // bias alone drives the score far below tau
        let n = m.param_count();
        m.params_mut()[n - 1] = -40.0;
        let img = grey(0.3);
        let mask = EditMask::unit(vec![true; IMAGE_DIM * IMAGE_DIM]);
        let out = craft(&m, &img, &mask, &AttackConfig::default()).unwrap();
        assert_eq!(out.iterations_used, 0);
        assert!(out.reached_tau);
        assert_eq!(out.image, img);
    }

    #[test]
    fn masked_pixels_never_move() {
        let m = small_model(3);
        let img = GreyImage::new(
            IMAGE_DIM,
            IMAGE_DIM,
            (0..IMAGE_DIM * IMAGE_DIM).map(|i| (i % 97) as f64 / 97.0).collect(),
        )
        .unwrap();
        let editable: Vec<bool> = (0..IMAGE_DIM * IMAGE_DIM).map(|i| i % 7 == 0).collect();
        let mask = EditMask::unit(editable.clone());
        let cfg = AttackConfig { max_iterations: 5, ..Default::default() };
        let out = craft(&m, &img, &mask, &cfg).unwrap();
        assert!(out.iterations_used <= 5);
        for i in 0..editable.len() {
            if !editable[i] {
                assert_eq!(out.image.pixels()[i].to_bits(), img.pixels()[i].to_bits());
            } else {
                assert!((0.0..=1.0).contains(&out.image.pixels()[i]));
            }
        }
    }

    #[test]
    fn zero_gradient_stalls_at_the_cap() {
        let m = CnnModel::zeros(small_model(1).architecture().clone()).unwrap();
        let mask = EditMask::unit(vec![true; IMAGE_DIM * IMAGE_DIM]);
        let out = craft(&m, &grey(0.5), &mask, &AttackConfig::default()).unwrap();
        assert!(out.stalled && !out.reached_tau);
        assert_eq!(out.iterations_used, 10_000);
        assert_eq!(out.final_score, 0.5);
    }

    #[test]
    fn descent_lowers_the_score() {
        let m = small_model(5);
        let img = grey(0.6);
        let mask = EditMask::unit(vec![true; IMAGE_DIM * IMAGE_DIM]);
        let cfg = AttackConfig { max_iterations: 20, ..Default::default() };
        let out = craft(&m, &img, &mask, &cfg).unwrap();
        assert!(out.final_score < out.initial_score, "{} -> {}", out.initial_score, out.final_score);
    }

    #[test]
    fn plateau_counts_as_stalled() {
        let m = small_model(5);
        let mask = EditMask::unit(vec![true; IMAGE_DIM * IMAGE_DIM]);
        let cfg = AttackConfig {
            max_iterations: 50,
            patience: Some(3),
            min_delta: 1e9,
            ..Default::default()
        };
        let out = craft(&m, &grey(0.6), &mask, &cfg).unwrap();
        assert!(out.stalled);
        assert_eq!(out.iterations_used, 50);
        assert!(AttackConfig { patience: Some(0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn clamp_mode_parses() {
        assert_eq!("unit".parse::<ClampMode>().unwrap(), ClampMode::Unit);
        assert_eq!("reachable".parse::<ClampMode>().unwrap(), ClampMode::Reachable);
        assert!("box".parse::<ClampMode>().is_err());
    }

    #[test]
    fn transfer_requires_samples() {
        assert!(matches!(transfer_evaluate::<f64>(&[], &small_model(1)), Err(Error::EmptyCorpus)));
    }
}
