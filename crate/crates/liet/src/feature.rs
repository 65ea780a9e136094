//! Core value types: dense feature maps, sparse LiDAR intensity maps, and
//! the pixel primitives (grayscale, masking, instance norm) shared by the
//! synthetic generator, the losses and the evaluation metrics.
//!
//! Layout is channel-first `[C, H, W]` everywhere. Images, albedo and shade
//! live in `[0, 1]`; LiDAR intensity is a single channel with an explicit
//! binary validity mask.

use ndarray::{Array1, Array3, Axis};

use crate::error::{Error, Result};
use crate::num::{lit, Scalar};

/// BT.601 luma weights used for every RGB → gray reduction in the crate.
pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Variance floor for instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// The four translation domains.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DomainId {
    /// Photographic image `x_I`.
    Image,
    /// LiDAR intensity `x_L`.
    Lidar,
    /// Albedo / reflectance `x_R`.
    Albedo,
    /// Shading `x_S`.
    Shade,
}

impl DomainId {
    pub const ALL: [DomainId; 4] = [
        DomainId::Image,
        DomainId::Lidar,
        DomainId::Albedo,
        DomainId::Shade,
    ];

    /// Stable index used for parameter naming and per-domain tables.
    pub fn index(self) -> usize {
        match self {
            DomainId::Image => 0,
            DomainId::Lidar => 1,
            DomainId::Albedo => 2,
            DomainId::Shade => 3,
        }
    }

    /// Short lowercase tag used in parameter names (`i`, `l`, `r`, `s`).
    pub fn tag(self) -> &'static str {
        match self {
            DomainId::Image => "i",
            DomainId::Lidar => "l",
            DomainId::Albedo => "r",
            DomainId::Shade => "s",
        }
    }
}

/// Dense `[C, H, W]` tensor: an image, an intrinsic layer or an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Array3<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Array3<T>) -> Self {
        FeatureMap { data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn from_elem(channels: usize, height: usize, width: usize, value: T) -> Self {
        FeatureMap {
            data: Array3::from_elem((channels, height, width), value),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }
}

/// Sparse LiDAR return: one intensity channel plus a binary validity mask.
///
/// Intensity at mask-invalid pixels is stored as zero so the map can be fed
/// to dense ops directly.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarMap<T> {
    /// `[1, H, W]` intensity in `[0, 1]`, zero where the mask is zero.
    pub intensity: FeatureMap<T>,
    /// `[1, H, W]` validity mask with values in `{0, 1}`.
    pub mask: FeatureMap<T>,
}

impl<T: Scalar> LidarMap<T> {
    /// Builds a LiDAR map, zero-filling intensity outside the mask.
    ///
    /// Errors if shapes differ, either map is not single-channel, or the
    /// mask contains values other than 0 and 1.
    pub fn new(intensity: FeatureMap<T>, mask: FeatureMap<T>) -> Result<Self> {
        if intensity.channels() != 1 || mask.channels() != 1 {
            return Err(Error::contract(format!(
                "LidarMap expects single-channel intensity and mask, got {} and {} channels",
                intensity.channels(),
                mask.channels()
            )));
        }
        if intensity.dims() != mask.dims() {
            return Err(Error::contract(format!(
                "LidarMap intensity {:?} and mask {:?} shapes differ",
                intensity.dims(),
                mask.dims()
            )));
        }
        if !mask.data.iter().all(|&v| v == T::zero() || v == T::one()) {
            return Err(Error::contract(
                "LidarMap mask must be binary (0 or 1)".to_string(),
            ));
        }
        let intensity = apply_mask(&intensity, &mask)?;
        Ok(LidarMap { intensity, mask })
    }

    pub fn height(&self) -> usize {
        self.intensity.height()
    }

    pub fn width(&self) -> usize {
        self.intensity.width()
    }

    /// Fraction of mask-valid pixels.
    pub fn coverage(&self) -> f64 {
        let total = self.mask.data.len();
        let valid = self.mask.data.iter().filter(|&&v| v == T::one()).count();
        valid as f64 / total as f64
    }
}

/// One training pair: an image and the LiDAR return of the same scene.
#[derive(Clone, Debug)]
pub struct PairedSample<T> {
    pub id: String,
    pub image: FeatureMap<T>,
    pub lidar: LidarMap<T>,
}

/// Style code: a `style_dim` vector.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode<T> {
    pub data: Array1<T>,
}

impl<T: Scalar> StyleCode<T> {
    pub fn new(data: Array1<T>) -> Self {
        StyleCode { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }
}

/// Content code: a spatial feature map at 1/4 resolution.
pub type ContentCode<T> = FeatureMap<T>;

/// Output of image-only inference.
#[derive(Clone, Debug)]
pub struct DecompositionResult<T> {
    pub albedo: FeatureMap<T>,
    pub shade: FeatureMap<T>,
}

/// BT.601 grayscale reduction: `[3, H, W]` → `[1, H, W]`.
pub fn to_grayscale<T: Scalar>(x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if x.channels() != 3 {
        return Err(Error::contract(format!(
            "to_grayscale expects 3 channels, got {}",
            x.channels()
        )));
    }
    let (_, h, w) = x.dims();
    let mut out = Array3::<T>::zeros((1, h, w));
    for (c, &wc) in GRAY_WEIGHTS.iter().enumerate() {
        let wc: T = lit(wc);
        let plane = x.data.index_axis(Axis(0), c);
        out.index_axis_mut(Axis(0), 0)
            .zip_mut_with(&plane, |o, &v| *o += wc * v);
    }
    Ok(FeatureMap::new(out))
}

/// Zeroes `x` wherever the mask is zero; the mask broadcasts over channels.
pub fn apply_mask<T: Scalar>(x: &FeatureMap<T>, mask: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if mask.channels() != 1 {
        return Err(Error::contract(format!(
            "apply_mask expects a single-channel mask, got {} channels",
            mask.channels()
        )));
    }
    if (x.height(), x.width()) != (mask.height(), mask.width()) {
        return Err(Error::contract(format!(
            "apply_mask spatial dims differ: x is {}x{}, mask is {}x{}",
            x.height(),
            x.width(),
            mask.height(),
            mask.width()
        )));
    }
    let mask_plane = mask.data.index_axis(Axis(0), 0);
    let mut out = x.data.clone();
    for mut plane in out.axis_iter_mut(Axis(0)) {
        plane.zip_mut_with(&mask_plane, |o, &m| *o *= m);
    }
    Ok(FeatureMap::new(out))
}

/// Per-channel instance normalization over the spatial dims with population
/// variance: `y = (x - mean_c) / sqrt(var_c + eps)`.
pub fn instance_normalize<T: Scalar>(x: &FeatureMap<T>, eps: T) -> FeatureMap<T> {
    let (_, h, w) = x.dims();
    let n: T = T::of_usize(h * w);
    let mut out = x.data.clone();
    for mut plane in out.axis_iter_mut(Axis(0)) {
        let mean = plane.iter().copied().sum::<T>() / n;
        let var = plane
            .iter()
            .map(|&v| {
                let d = v - mean;
                d * d
            })
            .sum::<T>()
            / n;
        let inv = T::one() / (var + eps).sqrt();
        plane.mapv_inplace(|v| (v - mean) * inv);
    }
    FeatureMap::new(out)
}
