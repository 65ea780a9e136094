//! Translation-graph wiring: within-domain reconstruction, the image- and
//! LiDAR-encoder cross-domain paths, re-encodings for the consistency
//! losses, adversarial pairings, and image-only inference.
//!
//! [`training_forward`] builds the complete training graph for one batch on
//! one tape; the trainer then derives both optimization phases from the same
//! generator outputs. [`infer`] touches only the image-side components plus
//! the shared albedo/shade generators, which the instrumentation counters
//! prove.

use ndarray::{Array2, Array3, Axis};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::feature::{DecompositionResult, DomainId, FeatureMap, PairedSample};
use crate::losses::{
    self, loss_aa_batch, loss_adv_d, loss_adv_g, loss_content, loss_img, loss_kld,
    loss_perceptual, loss_phy, loss_smooth_batch, loss_style, loss_total, LossTerms, LossWeights,
};
use crate::nets::{MappedStyles, Model};
use crate::num::Scalar;

/// Structural ablation switches. Defaults are the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Drop the albedo-alignment loss.
    pub no_aa: bool,
    /// Skip instance normalization inside albedo alignment.
    pub no_instance_norm: bool,
    /// Skip the grayscale reduction inside albedo alignment.
    pub no_gray: bool,
    /// Drop the image/LiDAR mutual-conversion path (`x_LI`, `x_IL` and the
    /// LiDAR/image discriminators).
    pub no_ilc: bool,
    /// Enable the edge-weighted smoothness term.
    pub with_smooth: bool,
}

/// One encoder path: source style/content codes plus the mapped styles.
#[derive(Copy, Clone, Debug)]
pub struct PathCodes {
    pub style: Var,
    pub content: Var,
    pub mapped: MappedStyles,
}

/// Everything derived from one paired sample during training.
#[derive(Clone, Debug)]
pub struct SamplePaths {
    /// Input image (graph constant).
    pub x_i: Var,
    /// Input LiDAR intensity, zero-filled, single channel (graph constant).
    pub x_l: Var,
    pub image: PathCodes,
    pub lidar: PathCodes,
    /// Within-domain reconstructions.
    pub x_ii: Var,
    pub x_ll: Var,
    /// Image-encoder path translations.
    pub x_ri: Var,
    pub x_si: Var,
    pub x_li: Option<Var>,
    /// LiDAR-encoder path translations.
    pub x_rl: Var,
    pub x_sl: Var,
    pub x_il: Option<Var>,
    /// (re-encoded style, mapped target) per translation, in the fixed
    /// order RI, SI, [LI,] RL, SL[, IL].
    pub style_pairs: Vec<(Var, Var)>,
    /// (re-encoded content, source content) in the same order.
    pub content_pairs: Vec<(Var, Var)>,
}

/// One non-corresponding domain-pool exemplar: codes and reconstruction.
#[derive(Copy, Clone, Debug)]
pub struct PoolPaths {
    pub x: Var,
    pub style: Var,
    pub content: Var,
    pub recon: Var,
}

/// Complete training graph for one batch.
#[derive(Clone, Debug)]
pub struct ForwardBundle<T: Scalar> {
    pub samples: Vec<SamplePaths>,
    /// LiDAR validity masks (values, for the alignment loss).
    pub masks: Vec<Array2<T>>,
    /// Input images (values, smoothness guides).
    pub guides: Vec<Array3<T>>,
    pub albedo_pool: Vec<PoolPaths>,
    pub shade_pool: Vec<PoolPaths>,
    pub ablations: Ablations,
}

fn check_divisible<T: Scalar>(model: &Model<T>, h: usize, w: usize) -> Result<()> {
    let f = model.config.downsample_factor;
    if h % f != 0 || w % f != 0 {
        return Err(Error::contract(format!(
            "spatial dims must be divisible by {f} (no silent padding), got {h}x{w}"
        )));
    }
    Ok(())
}

fn check_channels(what: &str, expected: usize, got: usize) -> Result<()> {
    if got != expected {
        return Err(Error::contract(format!(
            "{what} must have {expected} channels, got {got}"
        )));
    }
    Ok(())
}

/// `G_X(E^c_X(x), E^p_X(x))`: within-domain reconstruction at value level.
pub fn reconstruct_within<T: Scalar>(
    model: &Model<T>,
    domain: DomainId,
    x: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    check_divisible(model, x.height(), x.width())?;
    let expect = model.config.data_channels(domain);
    let ok = match domain {
        DomainId::Lidar => x.channels() == 1 || x.channels() == 2,
        _ => x.channels() == expect,
    };
    if !ok {
        return Err(Error::contract(format!(
            "{domain:?} reconstruction input must have {expect} data channels, got {}",
            x.channels()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.data.clone().into_dyn());
    let p = model.encode_style(&mut tape, domain, xv);
    let c = model.encode_content(&mut tape, domain, xv);
    let out = model.generate(&mut tape, domain, c, p);
    let value = tape
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("generator output is 3-d");
    Ok(FeatureMap::new(value))
}

/// Image-encoder path: source codes, mapped styles and the translations
/// `x_RI`, `x_SI` (plus `x_LI` when the conversion path is on). The content
/// code feeding every generator is the same node.
pub fn forward_image_path<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    x_i: Var,
    with_ilc: bool,
) -> (PathCodes, Var, Var, Option<Var>) {
    let style = model.encode_style(tape, DomainId::Image, x_i);
    let content = model.encode_content(tape, DomainId::Image, x_i);
    let mapped = model.map_styles(tape, DomainId::Image, style);
    let x_ri = model.generate(tape, DomainId::Albedo, content, mapped.albedo);
    let x_si = model.generate(tape, DomainId::Shade, content, mapped.shade);
    let x_li = with_ilc.then(|| model.generate(tape, DomainId::Lidar, content, mapped.cross));
    (
        PathCodes {
            style,
            content,
            mapped,
        },
        x_ri,
        x_si,
        x_li,
    )
}

/// LiDAR-encoder path, symmetric to [`forward_image_path`]. `x_l` may carry
/// the validity mask as a second channel.
pub fn forward_lidar_path<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    x_l: Var,
    with_ilc: bool,
) -> (PathCodes, Var, Var, Option<Var>) {
    let style = model.encode_style(tape, DomainId::Lidar, x_l);
    let content = model.encode_content(tape, DomainId::Lidar, x_l);
    let mapped = model.map_styles(tape, DomainId::Lidar, style);
    let x_rl = model.generate(tape, DomainId::Albedo, content, mapped.albedo);
    let x_sl = model.generate(tape, DomainId::Shade, content, mapped.shade);
    let x_il = with_ilc.then(|| model.generate(tape, DomainId::Image, content, mapped.cross));
    (
        PathCodes {
            style,
            content,
            mapped,
        },
        x_rl,
        x_sl,
        x_il,
    )
}

/// Builds the full training graph for one batch: both encoder paths and
/// within-domain reconstructions per paired sample, pool reconstructions,
/// and every re-encoding the consistency losses need.
pub fn training_forward<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    batch: &[PairedSample<T>],
    albedo_batch: &[FeatureMap<T>],
    shade_batch: &[FeatureMap<T>],
    ablations: Ablations,
) -> Result<ForwardBundle<T>> {
    if batch.is_empty() || albedo_batch.is_empty() || shade_batch.is_empty() {
        return Err(Error::contract(
            "training batch and both domain pools must be non-empty",
        ));
    }
    let with_ilc = !ablations.no_ilc;

    let mut samples = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    let mut guides = Vec::with_capacity(batch.len());
    for sample in batch {
        check_channels("image", 3, sample.image.channels())?;
        check_divisible(model, sample.image.height(), sample.image.width())?;

        let x_i = tape.constant(sample.image.data.clone().into_dyn());
        // Encoder input: intensity plus mask channel; discriminator/recon
        // target: the bare zero-filled intensity.
        let lidar_in = {
            let (h, w) = (sample.lidar.intensity.height(), sample.lidar.intensity.width());
            let mut stacked = Array3::<T>::zeros((2, h, w));
            stacked
                .index_axis_mut(Axis(0), 0)
                .assign(&sample.lidar.intensity.data.index_axis(Axis(0), 0));
            stacked
                .index_axis_mut(Axis(0), 1)
                .assign(&sample.lidar.mask.data.index_axis(Axis(0), 0));
            tape.constant(stacked.into_dyn())
        };
        let x_l = tape.constant(sample.lidar.intensity.data.clone().into_dyn());

        let (image, x_ri, x_si, x_li) = forward_image_path(model, tape, x_i, with_ilc);
        let (lidar, x_rl, x_sl, x_il) = forward_lidar_path(model, tape, lidar_in, with_ilc);
        let x_ii = model.generate(tape, DomainId::Image, image.content, image.style);
        let x_ll = model.generate(tape, DomainId::Lidar, lidar.content, lidar.style);

        let mut style_pairs = Vec::with_capacity(6);
        let mut content_pairs = Vec::with_capacity(6);
        let mut re_encode = |tape: &mut Tape<T>, domain: DomainId, x: Var, style_target: Var, content_target: Var| {
            let p = model.encode_style(tape, domain, x);
            let c = model.encode_content(tape, domain, x);
            style_pairs.push((p, style_target));
            content_pairs.push((c, content_target));
        };
        re_encode(tape, DomainId::Albedo, x_ri, image.mapped.albedo, image.content);
        re_encode(tape, DomainId::Shade, x_si, image.mapped.shade, image.content);
        if let Some(x_li) = x_li {
            re_encode(tape, DomainId::Lidar, x_li, image.mapped.cross, image.content);
        }
        re_encode(tape, DomainId::Albedo, x_rl, lidar.mapped.albedo, lidar.content);
        re_encode(tape, DomainId::Shade, x_sl, lidar.mapped.shade, lidar.content);
        if let Some(x_il) = x_il {
            re_encode(tape, DomainId::Image, x_il, lidar.mapped.cross, lidar.content);
        }

        masks.push(
            sample
                .lidar
                .mask
                .data
                .index_axis(Axis(0), 0)
                .to_owned(),
        );
        guides.push(sample.image.data.clone());
        samples.push(SamplePaths {
            x_i,
            x_l,
            image,
            lidar,
            x_ii,
            x_ll,
            x_ri,
            x_si,
            x_li,
            x_rl,
            x_sl,
            x_il,
            style_pairs,
            content_pairs,
        });
    }

    let mut pool_paths = |maps: &[FeatureMap<T>], domain: DomainId| -> Result<Vec<PoolPaths>> {
        maps.iter()
            .map(|m| {
                check_channels("domain-pool map", 3, m.channels())?;
                check_divisible(model, m.height(), m.width())?;
                let x = tape.constant(m.data.clone().into_dyn());
                let style = model.encode_style(tape, domain, x);
                let content = model.encode_content(tape, domain, x);
                let recon = model.generate(tape, domain, content, style);
                Ok(PoolPaths {
                    x,
                    style,
                    content,
                    recon,
                })
            })
            .collect()
    };
    let albedo_pool = pool_paths(albedo_batch, DomainId::Albedo)?;
    let shade_pool = pool_paths(shade_batch, DomainId::Shade)?;

    Ok(ForwardBundle {
        samples,
        masks,
        guides,
        albedo_pool,
        shade_pool,
        ablations,
    })
}

/// One adversarial pairing: a discriminator domain with its real exemplars
/// and one fake source (graph nodes of images, not scores).
#[derive(Clone, Debug)]
pub struct AdvPairing {
    pub domain: DomainId,
    pub real: Vec<Var>,
    pub fake: Vec<Var>,
}

/// The discriminator menu: `D_R` against both albedo translations, `D_S`
/// against both shade translations, and (when the conversion path is on)
/// `D_L` against `x_LI` and `D_I` against `x_IL`. Real albedo/shade come
/// from the non-corresponding pools.
pub fn adversarial_pairings<T: Scalar>(bundle: &ForwardBundle<T>) -> Vec<AdvPairing> {
    let reals_r: Vec<Var> = bundle.albedo_pool.iter().map(|p| p.x).collect();
    let reals_s: Vec<Var> = bundle.shade_pool.iter().map(|p| p.x).collect();
    let mut pairings = vec![
        AdvPairing {
            domain: DomainId::Albedo,
            real: reals_r.clone(),
            fake: bundle.samples.iter().map(|s| s.x_ri).collect(),
        },
        AdvPairing {
            domain: DomainId::Albedo,
            real: reals_r,
            fake: bundle.samples.iter().map(|s| s.x_rl).collect(),
        },
        AdvPairing {
            domain: DomainId::Shade,
            real: reals_s.clone(),
            fake: bundle.samples.iter().map(|s| s.x_si).collect(),
        },
        AdvPairing {
            domain: DomainId::Shade,
            real: reals_s,
            fake: bundle.samples.iter().map(|s| s.x_sl).collect(),
        },
    ];
    if !bundle.ablations.no_ilc {
        pairings.push(AdvPairing {
            domain: DomainId::Lidar,
            real: bundle.samples.iter().map(|s| s.x_l).collect(),
            fake: bundle.samples.iter().map(|s| s.x_li.expect("ILC on")).collect(),
        });
        pairings.push(AdvPairing {
            domain: DomainId::Image,
            real: bundle.samples.iter().map(|s| s.x_i).collect(),
            fake: bundle.samples.iter().map(|s| s.x_il.expect("ILC on")).collect(),
        });
    }
    pairings
}

fn discriminate_batch<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    domain: DomainId,
    xs: &[Var],
    detach: bool,
) -> Vec<Vec<Var>> {
    xs.iter()
        .map(|&x| {
            let input = if detach { tape.detach(x) } else { x };
            model.discriminate(tape, domain, input)
        })
        .collect()
}

/// Discriminator-phase objective: every pairing scored with fakes detached,
/// so gradients reach only discriminator parameters.
pub fn discriminator_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    bundle: &ForwardBundle<T>,
) -> Var {
    let terms: Vec<Var> = adversarial_pairings(bundle)
        .iter()
        .map(|p| {
            let real = discriminate_batch(model, tape, p.domain, &p.real, true);
            let fake = discriminate_batch(model, tape, p.domain, &p.fake, true);
            loss_adv_d(tape, &real, &fake)
        })
        .collect();
    losses::adv_sum(tape, &terms)
}

/// Generator-phase adversarial objective: fakes scored live (gradients flow
/// into the generators) by the current discriminators.
pub fn generator_adv_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    bundle: &ForwardBundle<T>,
) -> Var {
    let terms: Vec<Var> = adversarial_pairings(bundle)
        .iter()
        .map(|p| {
            let fake = discriminate_batch(model, tape, p.domain, &p.fake, false);
            loss_adv_g(tape, &fake)
        })
        .collect();
    losses::adv_sum(tape, &terms)
}

/// Assembles every non-adversarial generator-phase term from the bundle.
/// The caller supplies `adv_g` (phase-dependent) and weights separately.
pub fn generator_terms<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    bundle: &ForwardBundle<T>,
    adv_g: Var,
) -> LossTerms {
    let abl = bundle.ablations;

    // Within-domain reconstruction over the four domains.
    let img_pairs: Vec<(Var, Var)> = bundle.samples.iter().map(|s| (s.x_ii, s.x_i)).collect();
    let lid_pairs: Vec<(Var, Var)> = bundle.samples.iter().map(|s| (s.x_ll, s.x_l)).collect();
    let alb_pairs: Vec<(Var, Var)> = bundle.albedo_pool.iter().map(|p| (p.recon, p.x)).collect();
    let shd_pairs: Vec<(Var, Var)> = bundle.shade_pool.iter().map(|p| (p.recon, p.x)).collect();
    let img = loss_img(
        tape,
        &[&img_pairs, &lid_pairs, &alb_pairs, &shd_pairs],
    );

    // Re-encoding slots: transpose per-sample pair lists into per-slot
    // batches (every sample has the same slot count).
    let n_slots = bundle.samples[0].style_pairs.len();
    let transpose = |select: &dyn Fn(&SamplePaths) -> &Vec<(Var, Var)>| -> Vec<Vec<(Var, Var)>> {
        (0..n_slots)
            .map(|slot| bundle.samples.iter().map(|s| select(s)[slot]).collect())
            .collect()
    };
    let sty_slots = transpose(&|s| &s.style_pairs);
    let cnt_slots = transpose(&|s| &s.content_pairs);
    let sty = loss_style(tape, &sty_slots);
    let cnt = loss_content(tape, &cnt_slots);

    // Distribution alignment between mapped and pool style codes.
    let p_ri: Vec<Var> = bundle.samples.iter().map(|s| s.image.mapped.albedo).collect();
    let p_si: Vec<Var> = bundle.samples.iter().map(|s| s.image.mapped.shade).collect();
    let p_r: Vec<Var> = bundle.albedo_pool.iter().map(|p| p.style).collect();
    let p_s: Vec<Var> = bundle.shade_pool.iter().map(|p| p.style).collect();
    let q_ri = losses::fit_style_distribution(tape, &p_ri);
    let q_r = losses::fit_style_distribution(tape, &p_r);
    let q_si = losses::fit_style_distribution(tape, &p_si);
    let q_s = losses::fit_style_distribution(tape, &p_s);
    let kld = loss_kld(tape, &q_ri, &q_r, &q_si, &q_s);

    // Perceptual distance between each image and its albedo translation.
    let features: Vec<(Vec<Var>, Vec<Var>)> = bundle
        .samples
        .iter()
        .map(|s| {
            (
                model.extract_features(tape, s.x_i),
                model.extract_features(tape, s.x_ri),
            )
        })
        .collect();
    let vgg = loss_perceptual(tape, &features);

    // Lambertian compositing of the image-path decomposition.
    let triples: Vec<(Var, Var, Var)> = bundle
        .samples
        .iter()
        .map(|s| (s.x_i, s.x_ri, s.x_si))
        .collect();
    let phy = loss_phy(tape, &triples);

    let aa = if abl.no_aa {
        tape.scalar(T::zero())
    } else {
        let aa_samples: Vec<(Var, Var, Array2<T>)> = bundle
            .samples
            .iter()
            .zip(bundle.masks.iter())
            .map(|(s, m)| (s.x_ri, s.x_rl, m.clone()))
            .collect();
        loss_aa_batch(tape, &aa_samples, !abl.no_gray, !abl.no_instance_norm)
    };

    let smooth = if abl.with_smooth {
        let pairs: Vec<(Var, Array3<T>)> = bundle
            .samples
            .iter()
            .zip(bundle.guides.iter())
            .map(|(s, g)| (s.x_ri, g.clone()))
            .collect();
        loss_smooth_batch(tape, &pairs)
    } else {
        tape.scalar(T::zero())
    };

    LossTerms {
        adv_g,
        img,
        sty,
        cnt,
        kld,
        vgg,
        phy,
        aa,
        smooth,
    }
}

/// Full generator-phase objective: adversarial term plus the weighted sum
/// of every enabled loss.
pub fn generator_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    bundle: &ForwardBundle<T>,
    weights: &LossWeights,
) -> (Var, LossTerms) {
    let adv_g = generator_adv_loss(model, tape, bundle);
    let terms = generator_terms(model, tape, bundle, adv_g);
    let total = loss_total(tape, weights, &terms);
    (total, terms)
}

/// Image-only inference: `E^p_I`, `E^c_I`, `f_I`, `G_R`, `G_S` and nothing
/// else (the invocation counters audit this). Input dims must be divisible
/// by the downsample factor; no silent padding.
pub fn infer<T: Scalar>(model: &Model<T>, x_i: &FeatureMap<T>) -> Result<DecompositionResult<T>> {
    check_channels("inference image", 3, x_i.channels())?;
    check_divisible(model, x_i.height(), x_i.width())?;
    let mut tape = Tape::new();
    let x = tape.constant(x_i.data.clone().into_dyn());
    let style = model.encode_style(&mut tape, DomainId::Image, x);
    let content = model.encode_content(&mut tape, DomainId::Image, x);
    let mapped = model.map_styles(&mut tape, DomainId::Image, style);
    let albedo = model.generate(&mut tape, DomainId::Albedo, content, mapped.albedo);
    let shade = model.generate(&mut tape, DomainId::Shade, content, mapped.shade);
    let take = |tape: &Tape<T>, v: Var| -> FeatureMap<T> {
        FeatureMap::new(
            tape.value(v)
                .clone()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("generator output is 3-d"),
        )
    };
    Ok(DecompositionResult {
        albedo: take(&tape, albedo),
        shade: take(&tape, shade),
    })
}
