//! Procedural paired-scene generator: Lambertian images with cast shadows,
//! shadow-free simulated LiDAR intensity, sparse scanline masks, pairwise
//! reflectance judgments, and non-corresponding albedo/shade pools.
//!
//! Every artifact is a deterministic function of a [`SceneSpec`]. Albedo is
//! piecewise constant (a base color plus random ellipses and convex
//! polygons), shade is a normalized low-frequency positive field attenuated
//! inside shadow polygons, the image is `clip(albedo ⊙ shade)` exactly, and
//! LiDAR intensity is `clip(gray(albedo)^γ + noise)` with no shadow term.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::feature::{to_grayscale, FeatureMap, LidarMap, PairedSample};
use crate::num::{lit, Scalar};

/// Darker-judgment threshold on the gray-albedo ratio.
pub const DEFAULT_DARKER_THRESHOLD: f64 = 1.10;
/// Judgments sampled per scene when a caller does not choose.
pub const DEFAULT_PAIRS_PER_SCENE: usize = 20;
/// Shade field lower bound before shadow attenuation.
pub const SHADE_FLOOR: f64 = 0.55;
/// Manifest schema revision.
pub const MANIFEST_VERSION: u64 = 1;
/// Manifest file name inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Parameters of one procedural scene. Two-element arrays are inclusive
/// `[lo, hi]` sampling ranges.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub size: usize,
    pub n_shapes: [usize; 2],
    pub shadow_count: [usize; 2],
    pub shadow_attenuation: [f64; 2],
    pub shade_smoothness: f64,
    pub lidar_coverage: [f64; 2],
    pub lidar_noise_sigma: f64,
    pub lidar_gamma: [f64; 2],
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 64,
            n_shapes: [3, 8],
            shadow_count: [1, 3],
            shadow_attenuation: [0.2, 0.7],
            shade_smoothness: 2.0,
            lidar_coverage: [0.3, 0.6],
            lidar_noise_sigma: 0.01,
            lidar_gamma: [0.7, 1.4],
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// Checks range ordering and the no-padding size contract.
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 || self.size % 4 != 0 {
            return Err(Error::Config(format!(
                "data.size must be a positive multiple of 4 (divisible by the encoder downsampling), got {}",
                self.size
            )));
        }
        if self.n_shapes[0] < 1 || self.n_shapes[0] > self.n_shapes[1] {
            return Err(Error::Config(format!(
                "data.n_shapes range {:?} is not well-ordered (lo ≥ 1, lo ≤ hi)",
                self.n_shapes
            )));
        }
        if self.shadow_count[0] > self.shadow_count[1] {
            return Err(Error::Config(format!(
                "data.shadow_count range {:?} is not well-ordered",
                self.shadow_count
            )));
        }
        for (name, [lo, hi], min, max) in [
            ("data.shadow_attenuation", self.shadow_attenuation, 0.0, 1.0),
            ("data.lidar_coverage", self.lidar_coverage, 0.0, 1.0),
            ("data.lidar_gamma", self.lidar_gamma, 0.0, f64::INFINITY),
        ] {
            if !(lo <= hi) || lo <= min || hi > max {
                return Err(Error::Config(format!(
                    "{name} range [{lo}, {hi}] must be well-ordered within ({min}, {max}]"
                )));
            }
        }
        if !(self.shade_smoothness > 0.0) {
            return Err(Error::Config(format!(
                "data.shade_smoothness must be positive, got {}",
                self.shade_smoothness
            )));
        }
        if !(self.lidar_noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "data.lidar_noise_sigma must be non-negative, got {}",
                self.lidar_noise_sigma
            )));
        }
        Ok(())
    }
}

/// A generated sample together with its ground-truth decomposition.
#[derive(Clone, Debug)]
pub struct Scene<T> {
    pub sample: PairedSample<T>,
    /// `[3, H, W]` piecewise-constant reflectance.
    pub gt_albedo: FeatureMap<T>,
    /// `[3, H, W]` gray shading replicated across channels, shadows included.
    pub gt_shade: FeatureMap<T>,
    /// `[1, H, W]` indicator of cast-shadow pixels.
    pub gt_shadow_mask: FeatureMap<T>,
}

/// Relative reflectance judgment between two pixels.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    ADarker,
    BDarker,
    Equal,
}

/// Pixel coordinate (column `x`, row `y`).
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PixelPoint {
    pub x: usize,
    pub y: usize,
}

/// One weighted pairwise reflectance comparison.
#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Judgment {
    pub point_a: PixelPoint,
    pub point_b: PixelPoint,
    pub label: Label,
    pub weight: f64,
}

/// All judgments for one sample.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JudgmentSet {
    pub sample_id: String,
    pub judgments: Vec<Judgment>,
}

/// Which non-corresponding pool to generate.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Albedo,
    Shade,
}

/// A full on-disk dataset: paired scenes, their judgments, and the two
/// non-corresponding domain pools.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub scenes: Vec<Scene<T>>,
    pub judgments: Vec<JudgmentSet>,
    pub albedo_pool: Vec<FeatureMap<T>>,
    pub shade_pool: Vec<FeatureMap<T>>,
}

// ---- geometry ----

enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        theta: f64,
    },
    Polygon {
        verts: Vec<(f64, f64)>,
    },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse {
                cx,
                cy,
                rx,
                ry,
                theta,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = (dx * theta.cos() + dy * theta.sin()) / rx;
                let v = (-dx * theta.sin() + dy * theta.cos()) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Polygon { verts } => {
                let mut sign = 0.0f64;
                for i in 0..verts.len() {
                    let (ax, ay) = verts[i];
                    let (bx, by) = verts[(i + 1) % verts.len()];
                    let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                    if cross.abs() < 1e-12 {
                        continue;
                    }
                    if sign == 0.0 {
                        sign = cross.signum();
                    } else if cross.signum() != sign {
                        return false;
                    }
                }
                true
            }
        }
    }
}

fn draw_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn random_ellipse(rng: &mut ChaCha8Rng, size: f64) -> Shape {
    Shape::Ellipse {
        cx: draw_range(rng, 0.15 * size, 0.85 * size),
        cy: draw_range(rng, 0.15 * size, 0.85 * size),
        rx: draw_range(rng, 0.08 * size, 0.3 * size),
        ry: draw_range(rng, 0.08 * size, 0.3 * size),
        theta: draw_range(rng, 0.0, std::f64::consts::PI),
    }
}

fn random_polygon(rng: &mut ChaCha8Rng, size: f64, r_lo: f64, r_hi: f64) -> Shape {
    let k = rng.gen_range(3..=6usize);
    let cx = draw_range(rng, 0.2 * size, 0.8 * size);
    let cy = draw_range(rng, 0.2 * size, 0.8 * size);
    let r = draw_range(rng, r_lo * size, r_hi * size);
    let base = draw_range(rng, 0.0, TAU);
    let step = TAU / k as f64;
    let verts = (0..k)
        .map(|i| {
            let ang = base + i as f64 * step + draw_range(rng, -0.4 * step, 0.4 * step);
            (cx + r * ang.cos(), cy + r * ang.sin())
        })
        .collect();
    Shape::Polygon { verts }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [(); 3].map(|_| draw_range(rng, 0.1, 0.95))
}

/// Paints a piecewise-constant albedo: base color, then `n` random shapes.
fn paint_albedo(rng: &mut ChaCha8Rng, size: usize, n: usize) -> Array3<f64> {
    let base = random_color(rng);
    let mut albedo = Array3::from_shape_fn((3, size, size), |(c, _, _)| base[c]);
    for _ in 0..n {
        let shape = if rng.gen_bool(0.5) {
            random_ellipse(rng, size as f64)
        } else {
            random_polygon(rng, size as f64, 0.1, 0.3)
        };
        let color = random_color(rng);
        for y in 0..size {
            for x in 0..size {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..3 {
                        albedo[(c, y, x)] = color[c];
                    }
                }
            }
        }
    }
    albedo
}

/// Low-frequency positive field normalized to `[SHADE_FLOOR, 1]`.
fn smooth_shade(rng: &mut ChaCha8Rng, size: usize, smoothness: f64) -> Array3<f64> {
    let modes: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                draw_range(rng, -smoothness, smoothness),
                draw_range(rng, -smoothness, smoothness),
                draw_range(rng, 0.0, TAU),
                draw_range(rng, 0.5, 1.0),
            )
        })
        .collect();
    let mut field = Array3::zeros((1, size, size));
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.0;
            for &(fx, fy, phase, amp) in &modes {
                v += amp * (TAU * (fx * x as f64 + fy * y as f64) / size as f64 + phase).cos();
            }
            field[(0, y, x)] = v;
        }
    }
    let min = field.iter().copied().fold(f64::INFINITY, f64::min);
    let max = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    field.mapv_inplace(|v| {
        if span > 0.0 {
            SHADE_FLOOR + (1.0 - SHADE_FLOOR) * (v - min) / span
        } else {
            0.5 * (SHADE_FLOOR + 1.0)
        }
    });
    field
}

fn clamp01<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Generates one paired scene deterministically from the spec.
pub fn generate_scene<T: Scalar>(spec: &SceneSpec) -> Result<Scene<T>> {
    spec.validate()?;
    let size = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let n_shapes = rng.gen_range(spec.n_shapes[0]..=spec.n_shapes[1]);
    let albedo_f = paint_albedo(&mut rng, size, n_shapes);
    let shade_f = smooth_shade(&mut rng, size, spec.shade_smoothness);

    let n_shadows = rng.gen_range(spec.shadow_count[0]..=spec.shadow_count[1]);
    let attenuation = draw_range(
        &mut rng,
        spec.shadow_attenuation[0],
        spec.shadow_attenuation[1],
    );
    let shadow_shapes: Vec<Shape> = (0..n_shadows)
        .map(|_| random_polygon(&mut rng, size as f64, 0.12, 0.3))
        .collect();
    let mut shadow_mask = Array3::from_elem((1, size, size), 0.0f64);
    for y in 0..size {
        for x in 0..size {
            if shadow_shapes
                .iter()
                .any(|s| s.contains(x as f64 + 0.5, y as f64 + 0.5))
            {
                shadow_mask[(0, y, x)] = 1.0;
            }
        }
    }

    // Materialize ground truth in the working precision, then derive the
    // image with the same arithmetic so the Lambertian closure is exact.
    let gt_albedo = FeatureMap::new(albedo_f.mapv(|v| lit::<T>(v)));
    let gt_shade = FeatureMap::new(Array3::from_shape_fn((3, size, size), |(_, y, x)| {
        let s = shade_f[(0, y, x)]
            * if shadow_mask[(0, y, x)] == 1.0 {
                attenuation
            } else {
                1.0
            };
        lit::<T>(s)
    }));
    let image = FeatureMap::new(Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        clamp01(gt_albedo.data[(c, y, x)] * gt_shade.data[(c, y, x)])
    }));
    let gt_shadow_mask = FeatureMap::new(shadow_mask.mapv(|v| lit::<T>(v)));

    // LiDAR: per-scene gamma on gray albedo, additive noise, no shadows.
    let gamma: T = lit(draw_range(
        &mut rng,
        spec.lidar_gamma[0],
        spec.lidar_gamma[1],
    ));
    let gray = to_grayscale(&gt_albedo)?;
    let noise: Vec<f64> = if spec.lidar_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.lidar_noise_sigma)
            .map_err(|e| Error::Config(format!("data.lidar_noise_sigma: {e}")))?;
        (0..size * size).map(|_| normal.sample(&mut rng)).collect()
    } else {
        vec![0.0; size * size]
    };
    let intensity = FeatureMap::new(Array3::from_shape_fn((1, size, size), |(_, y, x)| {
        clamp01(gray.data[(0, y, x)].powf(gamma) + lit::<T>(noise[y * size + x]))
    }));

    // Scanline mask with coverage clamped into the requested range.
    let coverage = draw_range(&mut rng, spec.lidar_coverage[0], spec.lidar_coverage[1]);
    let n_lo = ((spec.lidar_coverage[0] * size as f64).ceil() as usize).max(1);
    let n_hi = ((spec.lidar_coverage[1] * size as f64).floor() as usize).min(size);
    let n_rows = ((coverage * size as f64).round() as usize).clamp(n_lo.min(n_hi), n_hi.max(n_lo));
    let mut rows: Vec<usize> = (0..size).collect();
    rows.shuffle(&mut rng);
    rows.truncate(n_rows);
    let mut mask = Array3::from_elem((1, size, size), T::zero());
    for &y in &rows {
        for x in 0..size {
            mask[(0, y, x)] = T::one();
        }
    }

    let lidar = LidarMap::new(intensity, FeatureMap::new(mask))?;
    Ok(Scene {
        sample: PairedSample {
            id: format!("scene_{:016x}", spec.seed),
            image,
            lidar,
        },
        gt_albedo,
        gt_shade,
        gt_shadow_mask,
    })
}

/// Gray value of a pixel of a 3-channel map in `f64`.
fn gray_at<T: Scalar>(map: &FeatureMap<T>, p: PixelPoint) -> f64 {
    crate::feature::GRAY_WEIGHTS
        .iter()
        .enumerate()
        .map(|(c, w)| w * map.data[(c, p.y, p.x)].as_f64())
        .sum()
}

/// Labels a pair from the gray-albedo ratio; `None` when the ratio falls in
/// the ambiguity gap between `equal_band` and `delta`.
pub fn label_pair<T: Scalar>(
    albedo: &FeatureMap<T>,
    a: PixelPoint,
    b: PixelPoint,
    delta: f64,
    equal_band: f64,
) -> Option<Label> {
    let ga = gray_at(albedo, a);
    let gb = gray_at(albedo, b);
    if gb / ga > delta {
        Some(Label::ADarker)
    } else if ga / gb > delta {
        Some(Label::BDarker)
    } else if (ga / gb).max(gb / ga) <= equal_band {
        Some(Label::Equal)
    } else {
        None
    }
}

/// Samples `n_pairs` weighted judgments from the ground-truth albedo.
///
/// Pairs whose gray ratio falls strictly between `equal_band` and `delta`
/// are ambiguous and resampled. With `equal_band = delta` (the default
/// convention) every pair is labelable.
pub fn generate_annotations<T: Scalar>(
    scene: &Scene<T>,
    n_pairs: usize,
    delta: f64,
    equal_band: f64,
    seed: u64,
) -> Result<JudgmentSet> {
    if n_pairs == 0 {
        return Err(Error::contract("n_pairs must be positive"));
    }
    if !(delta > 1.0) || !(equal_band > 0.0) || equal_band > delta {
        return Err(Error::contract(format!(
            "annotation thresholds need delta > 1 and 0 < equal_band ≤ delta, got delta={delta}, equal_band={equal_band}"
        )));
    }
    let size = scene.gt_albedo.height();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut judgments = Vec::with_capacity(n_pairs);
    let mut attempts = 0usize;
    let budget = 1000 * n_pairs;
    while judgments.len() < n_pairs {
        attempts += 1;
        if attempts > budget {
            return Err(Error::contract(format!(
                "could not sample {n_pairs} unambiguous pairs in {budget} attempts (equal_band gap too wide?)"
            )));
        }
        let a = PixelPoint {
            x: rng.gen_range(0..size),
            y: rng.gen_range(0..size),
        };
        let b = PixelPoint {
            x: rng.gen_range(0..size),
            y: rng.gen_range(0..size),
        };
        if a == b {
            continue;
        }
        let Some(label) = label_pair(&scene.gt_albedo, a, b, delta, equal_band) else {
            continue;
        };
        let weight = rng.gen_range(0.5..2.0);
        judgments.push(Judgment {
            point_a: a,
            point_b: b,
            label,
            weight,
        });
    }
    Ok(JudgmentSet {
        sample_id: scene.sample.id.clone(),
        judgments,
    })
}

/// Generates `n` standalone maps of the requested domain.
pub fn generate_domain_pool<T: Scalar>(
    kind: PoolKind,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<FeatureMap<T>>> {
    if n == 0 {
        return Err(Error::contract("pool size must be at least 1"));
    }
    if size < 4 || size % 4 != 0 {
        return Err(Error::Config(format!(
            "pool map size must be a positive multiple of 4, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let map = match kind {
            PoolKind::Albedo => {
                let n_shapes = rng.gen_range(3..=8usize);
                paint_albedo(&mut rng, size, n_shapes).mapv(|v| lit::<T>(v))
            }
            PoolKind::Shade => {
                let field = smooth_shade(&mut rng, size, 2.0);
                let with_shadow = rng.gen_bool(0.5);
                let (shape, att) = if with_shadow {
                    (
                        Some(random_polygon(&mut rng, size as f64, 0.12, 0.3)),
                        draw_range(&mut rng, 0.2, 0.7),
                    )
                } else {
                    (None, 1.0)
                };
                Array3::from_shape_fn((3, size, size), |(_, y, x)| {
                    let shadowed = shape
                        .as_ref()
                        .is_some_and(|s| s.contains(x as f64 + 0.5, y as f64 + 0.5));
                    lit::<T>(field[(0, y, x)] * if shadowed { att } else { 1.0 })
                })
            }
        };
        out.push(FeatureMap::new(map));
    }
    Ok(out)
}

/// Generates a complete dataset: `n` scenes seeded `seed..seed+n`, default
/// annotations for each, and pools of `n` maps per domain.
pub fn generate_dataset<T: Scalar>(spec: &SceneSpec, n: usize) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(Error::contract("dataset must contain at least one scene"));
    }
    spec.validate()?;
    let mut scenes = Vec::with_capacity(n);
    let mut judgments = Vec::with_capacity(n);
    for i in 0..n {
        let mut scene_spec = spec.clone();
        scene_spec.seed = spec.seed.wrapping_add(i as u64);
        let mut scene = generate_scene::<T>(&scene_spec)?;
        scene.sample.id = format!("scene_{i:03}");
        let ann_seed = spec.seed.wrapping_add(0x5eed_a110).wrapping_add(i as u64);
        judgments.push(generate_annotations(
            &scene,
            DEFAULT_PAIRS_PER_SCENE,
            DEFAULT_DARKER_THRESHOLD,
            DEFAULT_DARKER_THRESHOLD,
            ann_seed,
        )?);
        scenes.push(scene);
    }
    let albedo_pool =
        generate_domain_pool(PoolKind::Albedo, n, spec.size, spec.seed ^ 0x00a1_bed0)?;
    let shade_pool = generate_domain_pool(PoolKind::Shade, n, spec.size, spec.seed ^ 0x0005_aade)?;
    Ok(Dataset {
        scenes,
        judgments,
        albedo_pool,
        shade_pool,
    })
}

/// Groups pixel coordinates by exactly equal albedo color.
///
/// Meaningful for piecewise-constant maps where equality is exact; returned
/// groups are sorted largest first.
pub fn equal_albedo_regions<T: Scalar>(albedo: &FeatureMap<T>) -> Vec<Vec<(usize, usize)>> {
    let (_, h, w) = albedo.dims();
    let mut groups: BTreeMap<[u64; 3], Vec<(usize, usize)>> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let key = [
                albedo.data[(0, y, x)].as_f64().to_bits(),
                albedo.data[(1, y, x)].as_f64().to_bits(),
                albedo.data[(2, y, x)].as_f64().to_bits(),
            ];
            groups.entry(key).or_default().push((y, x));
        }
    }
    let mut out: Vec<Vec<(usize, usize)>> = groups.into_values().collect();
    out.sort_by_key(|g| std::cmp::Reverse(g.len()));
    out
}

// ---- dataset I/O ----

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    version: u64,
    samples: Vec<ManifestSample>,
    pools: ManifestPools,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ManifestSample {
    id: String,
    files: BTreeMap<String, String>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ManifestPools {
    albedo: Vec<String>,
    shade: Vec<String>,
}

const SAMPLE_FILE_KEYS: [&str; 7] = [
    "image",
    "albedo",
    "shade",
    "shadow_mask",
    "lidar",
    "lidar_mask",
    "judgments",
];

/// Writes a `[3, H, W]` map in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_rgb8<T: Scalar>(path: &Path, map: &FeatureMap<T>) -> Result<()> {
    let (c, h, w) = map.dims();
    if c != 3 {
        return Err(Error::contract(format!(
            "RGB PNG writer expects 3 channels, got {c}"
        )));
    }
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (map.data[(c, y as usize, x as usize)].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}

fn save_gray16<T: Scalar>(path: &Path, map: &FeatureMap<T>) -> Result<()> {
    let (c, h, w) = map.dims();
    if c != 1 {
        return Err(Error::contract(format!(
            "16-bit gray PNG writer expects 1 channel, got {c}"
        )));
    }
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
        w as u32,
        h as u32,
        |x, y| {
            let v = map.data[(0, y as usize, x as usize)].as_f64().clamp(0.0, 1.0);
            image::Luma([(v * 65535.0).round() as u16])
        },
    );
    img.save(path)?;
    Ok(())
}

fn save_mask8<T: Scalar>(path: &Path, map: &FeatureMap<T>) -> Result<()> {
    let (c, h, w) = map.dims();
    if c != 1 {
        return Err(Error::contract(format!(
            "mask PNG writer expects 1 channel, got {c}"
        )));
    }
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map.data[(0, y as usize, x as usize)];
        image::Luma([if v == T::one() { 255u8 } else { 0u8 }])
    });
    img.save(path)?;
    Ok(())
}

/// Reads an 8-bit RGB PNG into a `[3, H, W]` map in `[0, 1]`.
pub fn load_rgb8<T: Scalar>(path: &Path) -> Result<FeatureMap<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(FeatureMap::new(Array3::from_shape_fn(
        (3, h, w),
        |(c, y, x)| lit::<T>(img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0),
    )))
}

fn load_gray16<T: Scalar>(path: &Path) -> Result<FeatureMap<T>> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(FeatureMap::new(Array3::from_shape_fn(
        (1, h, w),
        |(_, y, x)| lit::<T>(img.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0),
    )))
}

fn load_mask8<T: Scalar>(path: &Path) -> Result<FeatureMap<T>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(FeatureMap::new(Array3::from_shape_fn(
        (1, h, w),
        |(_, y, x)| {
            if img.get_pixel(x as u32, y as u32).0[0] >= 128 {
                T::one()
            } else {
                T::zero()
            }
        },
    )))
}

/// Writes scenes, judgments, pools and the manifest into `dir`.
pub fn write_dataset<T: Scalar>(dir: &Path, dataset: &Dataset<T>) -> Result<()> {
    if dataset.scenes.len() != dataset.judgments.len() {
        return Err(Error::contract(format!(
            "dataset has {} scenes but {} judgment sets",
            dataset.scenes.len(),
            dataset.judgments.len()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(dataset.scenes.len());
    for (scene, judgments) in dataset.scenes.iter().zip(&dataset.judgments) {
        if scene.sample.id != judgments.sample_id {
            return Err(Error::contract(format!(
                "judgment set `{}` does not match scene `{}`",
                judgments.sample_id, scene.sample.id
            )));
        }
        let id = &scene.sample.id;
        let files: BTreeMap<String, String> = SAMPLE_FILE_KEYS
            .iter()
            .map(|key| {
                let ext = if *key == "judgments" { "json" } else { "png" };
                ((*key).to_string(), format!("{id}_{key}.{ext}"))
            })
            .collect();
        save_rgb8(&dir.join(&files["image"]), &scene.sample.image)?;
        save_rgb8(&dir.join(&files["albedo"]), &scene.gt_albedo)?;
        save_rgb8(&dir.join(&files["shade"]), &scene.gt_shade)?;
        save_mask8(&dir.join(&files["shadow_mask"]), &scene.gt_shadow_mask)?;
        save_gray16(&dir.join(&files["lidar"]), &scene.sample.lidar.intensity)?;
        save_mask8(&dir.join(&files["lidar_mask"]), &scene.sample.lidar.mask)?;
        std::fs::write(
            dir.join(&files["judgments"]),
            serde_json::to_vec_pretty(judgments)?,
        )?;
        samples.push(ManifestSample {
            id: id.clone(),
            files,
        });
    }
    let mut pools = ManifestPools {
        albedo: Vec::new(),
        shade: Vec::new(),
    };
    for (i, map) in dataset.albedo_pool.iter().enumerate() {
        let name = format!("pool_albedo_{i:03}.png");
        save_rgb8(&dir.join(&name), map)?;
        pools.albedo.push(name);
    }
    for (i, map) in dataset.shade_pool.iter().enumerate() {
        let name = format!("pool_shade_{i:03}.png");
        save_rgb8(&dir.join(&name), map)?;
        pools.shade.push(name);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        samples,
        pools,
    };
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

fn dataset_file(dir: &Path, name: &str, what: &str) -> Result<std::path::PathBuf> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::Dataset(format!(
            "{what} file `{name}` referenced by {MANIFEST_FILE} is missing in {}",
            dir.display()
        )));
    }
    Ok(path)
}

/// Loads a dataset written by [`write_dataset`]. Errors name any missing
/// or inconsistent file.
pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Dataset(format!(
            "cannot read {MANIFEST_FILE} in {}: {e}",
            dir.display()
        ))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{MANIFEST_FILE} is malformed: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "{MANIFEST_FILE} has version {}, expected {MANIFEST_VERSION}",
            manifest.version
        )));
    }

    let mut scenes = Vec::with_capacity(manifest.samples.len());
    let mut judgments = Vec::with_capacity(manifest.samples.len());
    for sample in &manifest.samples {
        for key in SAMPLE_FILE_KEYS {
            if !sample.files.contains_key(key) {
                return Err(Error::Dataset(format!(
                    "{MANIFEST_FILE} entry `{}` lacks the `{key}` file",
                    sample.id
                )));
            }
        }
        let path = |key: &str| dataset_file(dir, &sample.files[key], key);
        let image = load_rgb8(&path("image")?)?;
        let gt_albedo = load_rgb8(&path("albedo")?)?;
        let gt_shade = load_rgb8(&path("shade")?)?;
        let gt_shadow_mask = load_mask8(&path("shadow_mask")?)?;
        let intensity = load_gray16(&path("lidar")?)?;
        let mask = load_mask8(&path("lidar_mask")?)?;
        let set: JudgmentSet = serde_json::from_str(
            &std::fs::read_to_string(path("judgments")?)?,
        )
        .map_err(|e| {
            Error::Dataset(format!(
                "judgments for `{}` are malformed: {e}",
                sample.id
            ))
        })?;
        if set.sample_id != sample.id {
            return Err(Error::Dataset(format!(
                "judgment file for `{}` names sample `{}`",
                sample.id, set.sample_id
            )));
        }
        judgments.push(set);
        scenes.push(Scene {
            sample: PairedSample {
                id: sample.id.clone(),
                image,
                lidar: LidarMap::new(intensity, mask)?,
            },
            gt_albedo,
            gt_shade,
            gt_shadow_mask,
        });
    }

    let mut albedo_pool = Vec::with_capacity(manifest.pools.albedo.len());
    for name in &manifest.pools.albedo {
        albedo_pool.push(load_rgb8(&dataset_file(dir, name, "albedo pool")?)?);
    }
    let mut shade_pool = Vec::with_capacity(manifest.pools.shade.len());
    for name in &manifest.pools.shade {
        shade_pool.push(load_rgb8(&dataset_file(dir, name, "shade pool")?)?);
    }
    Ok(Dataset {
        scenes,
        judgments,
        albedo_pool,
        shade_pool,
    })
}
