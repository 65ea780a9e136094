//! Training objectives.
//!
//! Builders append loss subgraphs to a [`Tape`] and return scalar nodes.
//! Batched terms take per-sample inputs and average over the batch, so every
//! reported number is a per-sample expectation. The weighted total sums the
//! terms in a fixed documented order (adversarial, image, style, content,
//! KLD, perceptual, physical, alignment, smoothness), which keeps repeated
//! runs bitwise identical.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis};

use crate::autodiff::{Tape, Var};
use crate::feature::{StyleCode, GRAY_WEIGHTS, INSTANCE_NORM_EPS};
use crate::num::{lit, Scalar};

/// Variance floor applied when fitting style-code distributions.
pub const STYLE_VAR_FLOOR: f64 = 1e-6;

/// Edge-sensitivity scale of the smoothness weights.
pub const SMOOTH_EDGE_SIGMA: f64 = 0.1;

/// Loss-term weights. Defaults are the reference training configuration;
/// with every term at 1.0 and unit-weight components the total of nine terms
/// is the plain sum.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Within-domain reconstruction.
    pub img: f64,
    /// Style re-encoding consistency.
    pub sty: f64,
    /// Content re-encoding consistency.
    pub cnt: f64,
    /// Style-distribution alignment.
    pub kld: f64,
    /// Perceptual (feature-space) reconstruction.
    pub vgg: f64,
    /// Physical compositing consistency (image = albedo * shade).
    pub phy: f64,
    /// LiDAR-guided albedo alignment.
    pub aa: f64,
    /// Edge-weighted smoothness (off by default).
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            img: 100.0,
            sty: 10.0,
            cnt: 1.0,
            kld: 1.0,
            vgg: 1.0,
            phy: 10.0,
            aa: 100.0,
            smooth: 0.0,
        }
    }
}

impl LossWeights {
    /// Rejects negative or non-finite weights.
    pub fn validate(&self) -> crate::Result<()> {
        for (name, v) in [
            ("img", self.img),
            ("sty", self.sty),
            ("cnt", self.cnt),
            ("kld", self.kld),
            ("vgg", self.vgg),
            ("phy", self.phy),
            ("aa", self.aa),
            ("smooth", self.smooth),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(crate::Error::contract(format!(
                    "loss weight `{name}` must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar tape nodes for each generator-phase term, ready for weighting.
#[derive(Copy, Clone, Debug)]
pub struct LossTerms {
    pub adv_g: Var,
    pub img: Var,
    pub sty: Var,
    pub cnt: Var,
    pub kld: Var,
    pub vgg: Var,
    pub phy: Var,
    pub aa: Var,
    pub smooth: Var,
}

/// Per-iteration loss values in log order. One line of the NDJSON training
/// log is exactly the serialization of this struct.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub iter: u64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub img: f64,
    pub sty: f64,
    pub cnt: f64,
    pub kld: f64,
    pub vgg: f64,
    pub phy: f64,
    pub aa: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossReport {
    /// True when every term is finite; training aborts otherwise. Returns
    /// the first offending term name.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let checks: [(&'static str, f64); 11] = [
            ("adv_d", self.adv_d),
            ("adv_g", self.adv_g),
            ("img", self.img),
            ("sty", self.sty),
            ("cnt", self.cnt),
            ("kld", self.kld),
            ("vgg", self.vgg),
            ("phy", self.phy),
            ("aa", self.aa),
            ("smooth", self.smooth),
            ("total", self.total),
        ];
        checks.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

/// Gaussian fitted to a batch of style codes (tape nodes).
#[derive(Copy, Clone, Debug)]
pub struct GaussianFit {
    pub mean: Var,
    pub var: Var,
}

/// Value-level style-code distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleDistribution<T> {
    pub mean: Array1<T>,
    pub var: Array1<T>,
}

// ---- small composition helpers ----

/// Mean absolute difference of two same-shape nodes.
pub fn mean_abs_diff<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let ad = tape.abs(d);
    tape.mean_all(ad)
}

/// Average of per-sample scalar terms.
pub fn batch_mean<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Var {
    assert!(!terms.is_empty(), "batch_mean over an empty batch");
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    tape.scale(acc, T::one() / T::of_usize(terms.len()))
}

fn batch_mean_abs_pairs<T: Scalar>(tape: &mut Tape<T>, pairs: &[(Var, Var)]) -> Var {
    let terms: Vec<Var> = pairs
        .iter()
        .map(|&(a, b)| mean_abs_diff(tape, a, b))
        .collect();
    batch_mean(tape, &terms)
}

// ---- reconstruction / consistency ----

/// Within-domain reconstruction: the sum over domains of the batch-mean L1
/// between each reconstruction and its input. Pass one pair list per
/// participating domain.
pub fn loss_img<T: Scalar>(tape: &mut Tape<T>, per_domain: &[&[(Var, Var)]]) -> Var {
    let terms: Vec<Var> = per_domain
        .iter()
        .filter(|pairs| !pairs.is_empty())
        .map(|pairs| batch_mean_abs_pairs(tape, pairs))
        .collect();
    assert!(!terms.is_empty(), "loss_img needs at least one domain");
    sum_terms(tape, &terms)
}

/// Style re-encoding consistency: each slot is one re-encoding comparison
/// (e.g. `E^p_R(x_RI)` vs `p_RI`) with one entry per batch sample.
pub fn loss_style<T: Scalar>(tape: &mut Tape<T>, slots: &[Vec<(Var, Var)>]) -> Var {
    per_slot_mean_abs(tape, slots, "loss_style")
}

/// Content re-encoding consistency: each slot compares a translated map's
/// content code against the source content code.
pub fn loss_content<T: Scalar>(tape: &mut Tape<T>, slots: &[Vec<(Var, Var)>]) -> Var {
    per_slot_mean_abs(tape, slots, "loss_content")
}

fn per_slot_mean_abs<T: Scalar>(tape: &mut Tape<T>, slots: &[Vec<(Var, Var)>], what: &str) -> Var {
    let terms: Vec<Var> = slots
        .iter()
        .filter(|pairs| !pairs.is_empty())
        .map(|pairs| batch_mean_abs_pairs(tape, pairs))
        .collect();
    assert!(!terms.is_empty(), "{what} needs at least one slot");
    sum_terms(tape, &terms)
}

fn sum_terms<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    acc
}

// ---- adversarial ----

/// Mean over scales of the per-scale patch-mean of `f(score)`.
fn scale_mean<T: Scalar>(tape: &mut Tape<T>, scores: &[Var], negate: bool) -> Var {
    assert!(!scores.is_empty(), "discriminator returned no scales");
    let terms: Vec<Var> = scores
        .iter()
        .map(|&s| {
            let signed = if negate { tape.scale(s, -T::one()) } else { s };
            let sp = tape.softplus(signed);
            tape.mean_all(sp)
        })
        .collect();
    batch_mean(tape, &terms)
}

/// Discriminator-phase term for one real/fake pairing:
/// `E[softplus(-D(real))] + E[softplus(D(fake))]`, averaged over scales and
/// patches. `real` and `fake` hold one score list per batch sample.
pub fn loss_adv_d<T: Scalar>(tape: &mut Tape<T>, real: &[Vec<Var>], fake: &[Vec<Var>]) -> Var {
    let real_terms: Vec<Var> = real.iter().map(|s| scale_mean(tape, s, true)).collect();
    let fake_terms: Vec<Var> = fake.iter().map(|s| scale_mean(tape, s, false)).collect();
    let r = batch_mean(tape, &real_terms);
    let f = batch_mean(tape, &fake_terms);
    tape.add(r, f)
}

/// Generator-phase (non-saturating) term for one pairing:
/// `E[softplus(-D(fake))]`.
pub fn loss_adv_g<T: Scalar>(tape: &mut Tape<T>, fake: &[Vec<Var>]) -> Var {
    let terms: Vec<Var> = fake.iter().map(|s| scale_mean(tape, s, true)).collect();
    batch_mean(tape, &terms)
}

/// Sum of per-pairing adversarial terms.
pub fn adv_sum<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Var {
    assert!(!terms.is_empty(), "adversarial loss needs at least one pairing");
    sum_terms(tape, terms)
}

// ---- style distribution alignment ----

/// Fits a diagonal Gaussian (population variance, floored) to a batch of
/// style-code nodes. Needs at least two codes for a meaningful spread.
pub fn fit_style_distribution<T: Scalar>(tape: &mut Tape<T>, codes: &[Var]) -> GaussianFit {
    assert!(codes.len() >= 2, "distribution fit needs at least two codes");
    let n = T::of_usize(codes.len());
    let mut sum = codes[0];
    for &c in &codes[1..] {
        sum = tape.add(sum, c);
    }
    let mean = tape.scale(sum, T::one() / n);
    let mut sq_sum: Option<Var> = None;
    for &c in codes {
        let d = tape.sub(c, mean);
        let sq = tape.mul(d, d);
        sq_sum = Some(match sq_sum {
            Some(acc) => tape.add(acc, sq),
            None => sq,
        });
    }
    let var_raw = tape.scale(sq_sum.unwrap(), T::one() / n);
    let var = tape.clamp_min(var_raw, lit(STYLE_VAR_FLOOR));
    GaussianFit { mean, var }
}

/// Value-level counterpart of [`fit_style_distribution`].
pub fn fit_style_distribution_value<T: Scalar>(
    codes: &[StyleCode<T>],
) -> crate::Result<StyleDistribution<T>> {
    if codes.len() < 2 {
        return Err(crate::Error::contract(format!(
            "distribution fit needs at least two codes, got {}",
            codes.len()
        )));
    }
    let dim = codes[0].dim();
    let n = T::of_usize(codes.len());
    let mut mean = Array1::<T>::zeros(dim);
    for c in codes {
        mean = mean + &c.data;
    }
    mean.mapv_inplace(|v| v / n);
    let mut var = Array1::<T>::zeros(dim);
    for c in codes {
        let d = &c.data - &mean;
        var = var + &(&d * &d);
    }
    var.mapv_inplace(|v| (v / n).max(lit(STYLE_VAR_FLOOR)));
    Ok(StyleDistribution { mean, var })
}

/// Closed-form KL divergence between two fitted diagonal Gaussians,
/// `KL(q1 || q2)`, summed over style dimensions.
pub fn kld_between<T: Scalar>(tape: &mut Tape<T>, q1: &GaussianFit, q2: &GaussianFit) -> Var {
    for q in [q1, q2] {
        assert!(
            tape.value(q.var).iter().all(|&v| v > T::zero()),
            "distribution variance must be positive"
        );
    }
    let ln1 = tape.ln(q1.var);
    let ln2 = tape.ln(q2.var);
    let log_ratio = tape.sub(ln2, ln1);
    let md = tape.sub(q1.mean, q2.mean);
    let md2 = tape.mul(md, md);
    let num = tape.add(q1.var, md2);
    let frac = tape.div(num, q2.var);
    let inner = tape.add(log_ratio, frac);
    let shifted = tape.add_scalar(inner, -T::one());
    let total = tape.sum_all(shifted);
    tape.scale(total, lit(0.5))
}

/// Distribution-alignment loss: `KL(q_RI || q_R) + KL(q_SI || q_S)`, pulling
/// the styles mapped from images toward the styles of real albedo/shade
/// exemplars.
pub fn loss_kld<T: Scalar>(
    tape: &mut Tape<T>,
    q_ri: &GaussianFit,
    q_r: &GaussianFit,
    q_si: &GaussianFit,
    q_s: &GaussianFit,
) -> Var {
    let a = kld_between(tape, q_ri, q_r);
    let b = kld_between(tape, q_si, q_s);
    tape.add(a, b)
}

// ---- perceptual ----

/// Feature-space reconstruction: the average over pyramid stages of the
/// mean L1 between frozen-extractor features of `a` and `b`, batch-averaged.
/// `features` holds, per sample, the two per-stage feature lists.
pub fn loss_perceptual<T: Scalar>(tape: &mut Tape<T>, features: &[(Vec<Var>, Vec<Var>)]) -> Var {
    let terms: Vec<Var> = features
        .iter()
        .map(|(fa, fb)| {
            assert_eq!(fa.len(), fb.len(), "feature stage count mismatch");
            let stage_terms: Vec<Var> = fa
                .iter()
                .zip(fb.iter())
                .map(|(&a, &b)| mean_abs_diff(tape, a, b))
                .collect();
            batch_mean(tape, &stage_terms)
        })
        .collect();
    batch_mean(tape, &terms)
}

// ---- physical consistency ----

/// `E[|x_I - x_RI * x_SI|]`: the decomposition must composite back to the
/// image. Symmetric in its two factor arguments.
pub fn loss_phy<T: Scalar>(tape: &mut Tape<T>, triples: &[(Var, Var, Var)]) -> Var {
    let terms: Vec<Var> = triples
        .iter()
        .map(|&(x, r, s)| {
            let prod = tape.mul(r, s);
            mean_abs_diff(tape, x, prod)
        })
        .collect();
    batch_mean(tape, &terms)
}

// ---- albedo alignment ----

/// Albedo-alignment pipeline for one sample: restrict both albedo
/// translations to LiDAR-valid pixels, reduce to grayscale, instance
/// normalize over the valid pixels, then take the mean L1 over those pixels.
/// The LiDAR-path branch (`x_rl`) is detached: it serves as the target and
/// must not receive gradients. An empty mask contributes zero.
///
/// `use_gray` / `use_inst` correspond to the `no_gray` / `no_instance_norm`
/// ablations.
pub fn loss_aa<T: Scalar>(
    tape: &mut Tape<T>,
    x_ri: Var,
    x_rl: Var,
    mask: &Array2<T>,
    use_gray: bool,
    use_inst: bool,
) -> Var {
    let n_valid = mask.iter().copied().sum::<T>();
    if n_valid <= T::zero() {
        return tape.scalar(T::zero());
    }
    let target = tape.detach(x_rl);

    let channels = tape.value(x_ri).shape()[0];
    let mask3 = {
        let (h, w) = mask.dim();
        let mut m = Array3::<T>::zeros((channels, h, w));
        for mut plane in m.axis_iter_mut(Axis(0)) {
            plane.assign(mask);
        }
        tape.constant(m.into_dyn())
    };

    let prep = |tape: &mut Tape<T>, v: Var| -> Var {
        let masked = tape.mul(v, mask3);
        let reduced = if use_gray {
            let weights = GRAY_WEIGHTS.iter().map(|&w| lit(w)).collect();
            tape.weighted_channel_sum(masked, weights)
        } else {
            masked
        };
        if use_inst {
            tape.masked_instance_norm(reduced, mask, lit(INSTANCE_NORM_EPS))
        } else {
            reduced
        }
    };

    let a = prep(tape, x_ri);
    let b = prep(tape, target);
    let out_channels = tape.value(a).shape()[0];

    // Mean L1 over mask-valid pixels only.
    let mask_out = {
        let (h, w) = mask.dim();
        let mut m = Array3::<T>::zeros((out_channels, h, w));
        for mut plane in m.axis_iter_mut(Axis(0)) {
            plane.assign(mask);
        }
        tape.constant(m.into_dyn())
    };
    let d = tape.sub(a, b);
    let ad = tape.abs(d);
    let masked = tape.mul(ad, mask_out);
    let s = tape.sum_all(masked);
    tape.scale(s, T::one() / (n_valid * T::of_usize(out_channels)))
}

/// Batch-mean albedo alignment; masks are per-sample.
pub fn loss_aa_batch<T: Scalar>(
    tape: &mut Tape<T>,
    samples: &[(Var, Var, Array2<T>)],
    use_gray: bool,
    use_inst: bool,
) -> Var {
    let terms: Vec<Var> = samples
        .iter()
        .map(|(ri, rl, mask)| loss_aa(tape, *ri, *rl, mask, use_gray, use_inst))
        .collect();
    batch_mean(tape, &terms)
}

// ---- smoothness ----

/// Edge-weighted total variation of `x`, guided by the (constant) image:
/// neighbor differences of `x` are weighted by `exp(-|∇image| / sigma)` so
/// smoothing relaxes across true image edges. Off by default (zero weight).
pub fn loss_smooth<T: Scalar>(tape: &mut Tape<T>, x: Var, guide: &Array3<T>) -> Var {
    let (gc, h, w) = guide.dim();
    let channels = tape.value(x).shape()[0];
    let sigma: T = lit(SMOOTH_EDGE_SIGMA);

    let edge_weights = |len_y: usize, len_x: usize, dy: usize, dx: usize| -> ArrayD<T> {
        let mut wmap = Array2::<T>::zeros((len_y, len_x));
        for y in 0..len_y {
            for xx in 0..len_x {
                let mut grad = T::zero();
                for c in 0..gc {
                    grad += (guide[[c, y + dy, xx + dx]] - guide[[c, y, xx]]).abs();
                }
                grad = grad / T::of_usize(gc);
                wmap[[y, xx]] = (-grad / sigma).exp();
            }
        }
        let mut full = Array3::<T>::zeros((channels, len_y, len_x));
        for mut plane in full.axis_iter_mut(Axis(0)) {
            plane.assign(&wmap);
        }
        full.into_dyn()
    };

    let horizontal = {
        let right = tape.narrow(x, 2, 1, w - 1);
        let left = tape.narrow(x, 2, 0, w - 1);
        let d = tape.sub(right, left);
        let ad = tape.abs(d);
        let wv = tape.constant(edge_weights(h, w - 1, 0, 1));
        let weighted = tape.mul(ad, wv);
        tape.mean_all(weighted)
    };
    let vertical = {
        let down = tape.narrow(x, 1, 1, h - 1);
        let up = tape.narrow(x, 1, 0, h - 1);
        let d = tape.sub(down, up);
        let ad = tape.abs(d);
        let wv = tape.constant(edge_weights(h - 1, w, 1, 0));
        let weighted = tape.mul(ad, wv);
        tape.mean_all(weighted)
    };
    tape.add(horizontal, vertical)
}

/// Batch-mean smoothness.
pub fn loss_smooth_batch<T: Scalar>(tape: &mut Tape<T>, samples: &[(Var, Array3<T>)]) -> Var {
    let terms: Vec<Var> = samples
        .iter()
        .map(|(x, guide)| loss_smooth(tape, *x, guide))
        .collect();
    batch_mean(tape, &terms)
}

// ---- total ----

/// Weighted generator objective, accumulated in documented order:
/// adversarial first (unit weight), then image, style, content, KLD,
/// perceptual, physical, alignment, smoothness.
pub fn loss_total<T: Scalar>(tape: &mut Tape<T>, weights: &LossWeights, terms: &LossTerms) -> Var {
    weights.validate().expect("loss weights must be valid");
    let mut acc = terms.adv_g;
    for (w, v) in [
        (weights.img, terms.img),
        (weights.sty, terms.sty),
        (weights.cnt, terms.cnt),
        (weights.kld, terms.kld),
        (weights.vgg, terms.vgg),
        (weights.phy, terms.phy),
        (weights.aa, terms.aa),
        (weights.smooth, terms.smooth),
    ] {
        let scaled = tape.scale(v, lit(w));
        acc = tape.add(acc, scaled);
    }
    acc
}
