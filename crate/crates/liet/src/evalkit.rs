//! Decomposition quality metrics: weighted human-disagreement rate (WHDR)
//! and precision/recall/F-score over pairwise reflectance judgments, plus
//! physical-consistency and shadow-flatness diagnostics.
//!
//! Predicted relations come from the gray-albedo ratio with the same
//! threshold convention the annotations use, so a prediction equal to the
//! ground-truth albedo scores perfectly by construction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature::{DecompositionResult, FeatureMap, GRAY_WEIGHTS};
use crate::nets::Model;
use crate::num::Scalar;
use crate::pipeline::infer;
use crate::synthgen::{equal_albedo_regions, Dataset, Judgment, JudgmentSet, Label, PixelPoint};

/// Threshold on the gray ratio above which one point is called darker.
pub const DEFAULT_EVAL_DELTA: f64 = crate::synthgen::DEFAULT_DARKER_THRESHOLD;
/// Judgments drawn per image in random-sampled mode when unspecified.
pub const DEFAULT_K_PER_IMAGE: usize = 5;
/// Minimum pixel fraction per shadow class for the contrast diagnostic.
pub const SHADOW_CLASS_MIN_FRACTION: f64 = 0.01;

/// Which judgments an evaluation run uses.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    RandomSampled,
    All,
}

/// Aggregated evaluation result, serialized as the `--report` JSON.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub whdr: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub mode: EvalMode,
    pub n_judgments: usize,
    pub phy_residual: f64,
    pub shadow_contrast: f64,
}

fn gray_at<T: Scalar>(map: &FeatureMap<T>, p: PixelPoint) -> f64 {
    GRAY_WEIGHTS
        .iter()
        .enumerate()
        .map(|(c, w)| w * map.data[(c, p.y, p.x)].as_f64())
        .sum()
}

fn check_judgment<T: Scalar>(albedo: &FeatureMap<T>, j: &Judgment) -> Result<()> {
    let (_, h, w) = albedo.dims();
    for p in [j.point_a, j.point_b] {
        if p.x >= w || p.y >= h {
            return Err(Error::contract(format!(
                "judgment point ({}, {}) outside a {w}x{h} albedo map",
                p.x, p.y
            )));
        }
    }
    if !(j.weight > 0.0) || !j.weight.is_finite() {
        return Err(Error::contract(format!(
            "judgment weight must be positive and finite, got {}",
            j.weight
        )));
    }
    Ok(())
}

/// Relation predicted from the albedo's gray ratio at the given threshold.
pub fn predict_label<T: Scalar>(
    albedo: &FeatureMap<T>,
    a: PixelPoint,
    b: PixelPoint,
    delta: f64,
) -> Label {
    let (ga, gb) = (gray_at(albedo, a), gray_at(albedo, b));
    if gb / ga > delta {
        Label::ADarker
    } else if ga / gb > delta {
        Label::BDarker
    } else {
        Label::Equal
    }
}

/// Weighted human disagreement rate: `Σ w·[pred ≠ label] / Σ w`.
pub fn whdr<T: Scalar>(albedo: &FeatureMap<T>, set: &JudgmentSet, delta: f64) -> Result<f64> {
    if set.judgments.is_empty() {
        return Err(Error::contract("whdr needs a non-empty judgment set"));
    }
    let mut wrong = 0.0;
    let mut total = 0.0;
    for j in &set.judgments {
        check_judgment(albedo, j)?;
        if predict_label(albedo, j.point_a, j.point_b, delta) != j.label {
            wrong += j.weight;
        }
        total += j.weight;
    }
    Ok(wrong / total)
}

/// Weighted confusion counts for the binary task "an inequality exists".
///
/// A true positive needs the predicted direction to match; predicting the
/// wrong direction on a real inequality counts as both a false positive
/// and a missed inequality.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct PrfCounts {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
}

impl PrfCounts {
    pub fn add<T: Scalar>(
        &mut self,
        albedo: &FeatureMap<T>,
        j: &Judgment,
        delta: f64,
    ) -> Result<()> {
        check_judgment(albedo, j)?;
        let pred = predict_label(albedo, j.point_a, j.point_b, delta);
        let label_pos = j.label != Label::Equal;
        let pred_pos = pred != Label::Equal;
        match (pred_pos, label_pos) {
            (true, true) if pred == j.label => self.tp += j.weight,
            (true, true) => {
                self.fp += j.weight;
                self.fn_ += j.weight;
            }
            (true, false) => self.fp += j.weight,
            (false, true) => self.fn_ += j.weight,
            (false, false) => {}
        }
        Ok(())
    }

    /// `(precision, recall, f_score)`, each 0 when its denominator is 0.
    pub fn resolve(&self) -> (f64, f64, f64) {
        let precision = if self.tp + self.fp > 0.0 {
            self.tp / (self.tp + self.fp)
        } else {
            0.0
        };
        let recall = if self.tp + self.fn_ > 0.0 {
            self.tp / (self.tp + self.fn_)
        } else {
            0.0
        };
        let f_score = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        (precision, recall, f_score)
    }
}

/// Precision, recall and F-score of one albedo against one judgment set.
pub fn prf<T: Scalar>(
    albedo: &FeatureMap<T>,
    set: &JudgmentSet,
    delta: f64,
) -> Result<(f64, f64, f64)> {
    if set.judgments.is_empty() {
        return Err(Error::contract("prf needs a non-empty judgment set"));
    }
    let mut counts = PrfCounts::default();
    for j in &set.judgments {
        counts.add(albedo, j, delta)?;
    }
    Ok(counts.resolve())
}

/// Mean absolute Lambertian residual `mean |x_I − albedo ⊙ shade|`.
pub fn physical_consistency<T: Scalar>(
    x_i: &FeatureMap<T>,
    result: &DecompositionResult<T>,
) -> Result<f64> {
    if x_i.dims() != result.albedo.dims() || x_i.dims() != result.shade.dims() {
        return Err(Error::contract(format!(
            "physical_consistency dims differ: image {:?}, albedo {:?}, shade {:?}",
            x_i.dims(),
            result.albedo.dims(),
            result.shade.dims()
        )));
    }
    let n = x_i.data.len() as f64;
    let mut sum = 0.0;
    for ((x, a), s) in x_i
        .data
        .iter()
        .zip(result.albedo.data.iter())
        .zip(result.shade.data.iter())
    {
        sum += (x.as_f64() - a.as_f64() * s.as_f64()).abs();
    }
    Ok(sum / n)
}

/// Shifted mean that is exact for constant slices: `c + mean(v - c)`.
fn anchored_mean(values: &[f64], anchor: f64) -> f64 {
    let sum: f64 = values.iter().map(|v| v - anchor).sum();
    anchor + sum / values.len() as f64
}

/// Mean gray level of the albedo in shadow relative to lit pixels, within
/// regions of equal ground-truth albedo (1.0 = shadow-free prediction).
///
/// Regions contribute weighted by their smaller class size. Errors when
/// either shadow class covers less than 1% of the image or no region
/// contains both classes.
pub fn shadow_contrast<T: Scalar>(
    albedo: &FeatureMap<T>,
    gt_shadow_mask: &FeatureMap<T>,
    gt_albedo: &FeatureMap<T>,
) -> Result<f64> {
    if gt_shadow_mask.channels() != 1 {
        return Err(Error::contract(format!(
            "shadow mask must be single-channel, got {}",
            gt_shadow_mask.channels()
        )));
    }
    if albedo.dims() != gt_albedo.dims()
        || (albedo.height(), albedo.width())
            != (gt_shadow_mask.height(), gt_shadow_mask.width())
    {
        return Err(Error::contract(format!(
            "shadow_contrast dims differ: albedo {:?}, gt_albedo {:?}, mask {:?}",
            albedo.dims(),
            gt_albedo.dims(),
            gt_shadow_mask.dims()
        )));
    }
    let (_, h, w) = albedo.dims();
    let n = (h * w) as f64;
    let n_shadow = gt_shadow_mask
        .data
        .iter()
        .filter(|&&v| v == T::one())
        .count() as f64;
    let min = SHADOW_CLASS_MIN_FRACTION;
    if n_shadow < min * n || (n - n_shadow) < min * n {
        return Err(Error::contract(format!(
            "degenerate shadow mask: {:.1}% shadowed (need both classes ≥ {:.0}%)",
            100.0 * n_shadow / n,
            100.0 * min
        )));
    }

    let mut num = 0.0;
    let mut den = 0.0;
    for region in equal_albedo_regions(gt_albedo) {
        let (mut shadow, mut lit) = (Vec::new(), Vec::new());
        for &(y, x) in &region {
            let g = gray_at(albedo, PixelPoint { x, y });
            if gt_shadow_mask.data[(0, y, x)] == T::one() {
                shadow.push(g);
            } else {
                lit.push(g);
            }
        }
        if shadow.is_empty() || lit.is_empty() {
            continue;
        }
        let anchor = lit[0];
        let ratio = anchored_mean(&shadow, anchor) / anchored_mean(&lit, anchor);
        let weight = shadow.len().min(lit.len()) as f64;
        num += weight * ratio;
        den += weight;
    }
    if den == 0.0 {
        return Err(Error::contract(
            "no equal-albedo region contains both shadowed and lit pixels",
        ));
    }
    Ok(num / den)
}

/// Pooled WHDR and P/R/F of per-scene albedo predictions over a dataset's
/// judgments. Returns `(whdr, precision, recall, f_score, n_judgments)`.
///
/// Random-sampled mode draws `k_per_image` judgments per scene without
/// replacement from one seeded stream in scene order.
pub fn pooled_judgment_metrics<T: Scalar>(
    albedos: &[FeatureMap<T>],
    dataset: &Dataset<T>,
    mode: EvalMode,
    sample_seed: u64,
    k_per_image: usize,
    delta: f64,
) -> Result<(f64, f64, f64, f64, usize)> {
    if albedos.len() != dataset.scenes.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} scenes",
            albedos.len(),
            dataset.scenes.len()
        )));
    }
    if mode == EvalMode::RandomSampled && k_per_image == 0 {
        return Err(Error::contract(
            "random_sampled mode needs k_per_image ≥ 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut wrong = 0.0;
    let mut total = 0.0;
    let mut counts = PrfCounts::default();
    let mut n_judgments = 0usize;
    for (albedo, set) in albedos.iter().zip(&dataset.judgments) {
        let selected: Vec<&Judgment> = match mode {
            EvalMode::All => set.judgments.iter().collect(),
            EvalMode::RandomSampled => {
                let mut idx: Vec<usize> = (0..set.judgments.len()).collect();
                idx.shuffle(&mut rng);
                idx.truncate(k_per_image.min(set.judgments.len()));
                idx.sort_unstable();
                idx.into_iter().map(|i| &set.judgments[i]).collect()
            }
        };
        for j in selected {
            check_judgment(albedo, j)?;
            if predict_label(albedo, j.point_a, j.point_b, delta) != j.label {
                wrong += j.weight;
            }
            total += j.weight;
            counts.add(albedo, j, delta)?;
            n_judgments += 1;
        }
    }
    if n_judgments == 0 {
        return Err(Error::contract("dataset contains no judgments"));
    }
    let (precision, recall, f_score) = counts.resolve();
    Ok((wrong / total, precision, recall, f_score, n_judgments))
}

/// Runs image-only inference on every scene and aggregates all metrics.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset<T>,
    mode: EvalMode,
    sample_seed: u64,
    k_per_image: usize,
    delta: f64,
) -> Result<EvalReport> {
    if dataset.scenes.is_empty() {
        return Err(Error::contract("evaluation dataset is empty"));
    }
    let mut albedos = Vec::with_capacity(dataset.scenes.len());
    let mut phy_sum = 0.0;
    let mut contrast_sum = 0.0;
    let mut contrast_n = 0usize;
    for scene in &dataset.scenes {
        let result = infer(model, &scene.sample.image)?;
        phy_sum += physical_consistency(&scene.sample.image, &result)?;
        match shadow_contrast(&result.albedo, &scene.gt_shadow_mask, &scene.gt_albedo) {
            Ok(c) => {
                contrast_sum += c;
                contrast_n += 1;
            }
            Err(Error::Contract(_)) => {} // degenerate mask: skip this scene
            Err(e) => return Err(e),
        }
        albedos.push(result.albedo);
    }
    let (whdr, precision, recall, f_score, n_judgments) =
        pooled_judgment_metrics(&albedos, dataset, mode, sample_seed, k_per_image, delta)?;
    if contrast_n == 0 {
        return Err(Error::contract(
            "no scene had a non-degenerate shadow mask for the contrast diagnostic",
        ));
    }
    Ok(EvalReport {
        whdr,
        precision,
        recall,
        f_score,
        mode,
        n_judgments,
        phy_residual: phy_sum / dataset.scenes.len() as f64,
        shadow_contrast: contrast_sum / contrast_n as f64,
    })
}
