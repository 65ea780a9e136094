//! Network components: per-domain style/content encoders, AdaIN generators,
//! multi-scale patch discriminators, style-mapping MLPs and a frozen
//! perceptual feature extractor.
//!
//! All parameters live in one [`ParamStore`]; components hold `ParamId`s, so
//! "the within-domain and cross-domain paths share weights" is structural:
//! there is exactly one generator per domain and every caller reads the same
//! ids. Each component also counts its invocations, which is how the
//! image-only-inference guarantee is audited.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::feature::{DomainId, FeatureMap, StyleCode, INSTANCE_NORM_EPS};
use crate::num::{lit, Scalar};

/// Seed of the dedicated RNG stream for the perceptual extractor. The
/// extractor is frozen and must be identical across models regardless of the
/// model seed, so it never draws from the model's stream.
pub const EXTRACTOR_SEED: u64 = 0x7e8c_f00d;

/// Gaussian std for trainable conv/dense weights.
const INIT_STD: f64 = 0.02;

/// Negative slope of discriminator LeakyReLU units.
const LEAKY_SLOPE: f64 = 0.2;

/// Architecture hyperparameters. Defaults are the desk-scale configuration
/// used throughout the test suites.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Dimension of style codes.
    pub style_dim: usize,
    /// Channel count of content codes (width of the deepest blocks).
    pub content_channels: usize,
    /// Spatial reduction of the content encoder. Fixed at 4 (two stride-2
    /// stages); kept explicit so configs state their resolution contract.
    pub downsample_factor: usize,
    /// Residual blocks in the content encoder and in each generator.
    pub n_res_blocks: usize,
    /// Number of discriminator scales (input, 1/2, 1/4, ...).
    pub disc_scales: usize,
    /// Hidden width of the style-mapping and AdaIN MLPs.
    pub mlp_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            style_dim: 8,
            content_channels: 64,
            downsample_factor: 4,
            n_res_blocks: 2,
            disc_scales: 3,
            mlp_hidden: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor != 4 {
            return Err(Error::Config(format!(
                "downsample_factor is fixed at 4 (two stride-2 stages), got {}",
                self.downsample_factor
            )));
        }
        if self.content_channels < 4 || self.content_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "content_channels must be a positive multiple of 4, got {}",
                self.content_channels
            )));
        }
        if self.style_dim == 0 {
            return Err(Error::Config("style_dim must be at least 1".into()));
        }
        if self.n_res_blocks == 0 {
            return Err(Error::Config("n_res_blocks must be at least 1".into()));
        }
        if self.disc_scales == 0 {
            return Err(Error::Config("disc_scales must be at least 1".into()));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be at least 1".into()));
        }
        Ok(())
    }

    fn c4(&self) -> usize {
        self.content_channels / 4
    }

    fn c2(&self) -> usize {
        self.content_channels / 2
    }

    /// Total AdaIN parameters a generator consumes: per residual block, two
    /// convs with a scale and a shift per channel.
    pub fn n_adain_params(&self) -> usize {
        self.n_res_blocks * 4 * self.content_channels
    }

    /// Encoder input channels per domain. LiDAR components consume the
    /// intensity with its validity mask stacked as a second channel.
    pub fn encoder_in_channels(&self, domain: DomainId) -> usize {
        match domain {
            DomainId::Lidar => 2,
            _ => 3,
        }
    }

    /// Generator output / discriminator input channels per domain.
    pub fn data_channels(&self, domain: DomainId) -> usize {
        match domain {
            DomainId::Lidar => 1,
            _ => 3,
        }
    }
}

/// Role of a network component, used for invocation counting and parameter
/// grouping.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Component {
    StyleEncoder(DomainId),
    ContentEncoder(DomainId),
    Generator(DomainId),
    Discriminator(DomainId),
    /// Style-mapping MLP `f_I` (image style → albedo/shade/LiDAR styles).
    ImageMapper,
    /// Style-mapping MLP `f_L` (LiDAR style → albedo/shade/image styles).
    LidarMapper,
    Extractor,
}

impl Component {
    /// Parameter-name prefix owned by this component.
    pub fn prefix(self) -> String {
        match self {
            Component::StyleEncoder(d) => format!("style_enc.{}.", d.tag()),
            Component::ContentEncoder(d) => format!("content_enc.{}.", d.tag()),
            Component::Generator(d) => format!("gen.{}.", d.tag()),
            Component::Discriminator(d) => format!("disc.{}.", d.tag()),
            Component::ImageMapper => "mapper.image.".into(),
            Component::LidarMapper => "mapper.lidar.".into(),
            Component::Extractor => "extractor.".into(),
        }
    }
}

/// Per-component invocation counts (forward passes, not parameter reads).
#[derive(Default)]
pub struct Counters {
    style_enc: [AtomicU64; 4],
    content_enc: [AtomicU64; 4],
    generator: [AtomicU64; 4],
    discriminator: [AtomicU64; 4],
    mapper: [AtomicU64; 2],
    extractor: AtomicU64,
}

/// Plain-value copy of [`Counters`] for assertions.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub style_enc: [u64; 4],
    pub content_enc: [u64; 4],
    pub generator: [u64; 4],
    pub discriminator: [u64; 4],
    pub mapper: [u64; 2],
    pub extractor: u64,
}

impl Counters {
    fn bump(&self, c: Component) {
        let cell = match c {
            Component::StyleEncoder(d) => &self.style_enc[d.index()],
            Component::ContentEncoder(d) => &self.content_enc[d.index()],
            Component::Generator(d) => &self.generator[d.index()],
            Component::Discriminator(d) => &self.discriminator[d.index()],
            Component::ImageMapper => &self.mapper[0],
            Component::LidarMapper => &self.mapper[1],
            Component::Extractor => &self.extractor,
        };
        cell.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);
        CounterSnapshot {
            style_enc: [0, 1, 2, 3].map(|i| load(&self.style_enc[i])),
            content_enc: [0, 1, 2, 3].map(|i| load(&self.content_enc[i])),
            generator: [0, 1, 2, 3].map(|i| load(&self.generator[i])),
            discriminator: [0, 1, 2, 3].map(|i| load(&self.discriminator[i])),
            mapper: [0, 1].map(|i| load(&self.mapper[i])),
            extractor: load(&self.extractor),
        }
    }

    pub fn reset(&self) {
        for cell in self
            .style_enc
            .iter()
            .chain(&self.content_enc)
            .chain(&self.generator)
            .chain(&self.discriminator)
            .chain(&self.mapper)
        {
            cell.store(0, Ordering::Relaxed);
        }
        self.extractor.store(0, Ordering::Relaxed);
    }
}

impl CounterSnapshot {
    /// Invocations of any LiDAR-side component (`E^p_L`, `E^c_L`, `G_L`,
    /// `D_L`, `f_L`).
    pub fn lidar_side_total(&self) -> u64 {
        let l = DomainId::Lidar.index();
        self.style_enc[l]
            + self.content_enc[l]
            + self.generator[l]
            + self.discriminator[l]
            + self.mapper[1]
    }
}

// ---- layer descriptors ----

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv0: Conv,
    conv1: Conv,
}

#[derive(Clone, Debug)]
struct StyleEncoder {
    convs: [Conv; 3],
    fc: Dense,
}

#[derive(Clone, Debug)]
struct ContentEncoder {
    stem: Conv,
    down: [Conv; 2],
    res: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct UpBlock {
    conv: Conv,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

#[derive(Clone, Debug)]
struct Generator {
    mlp: [Dense; 3],
    res: Vec<ResBlock>,
    up: [UpBlock; 2],
    out: Conv,
}

#[derive(Clone, Debug)]
struct DiscScale {
    convs: [Conv; 3],
    head: Conv,
}

#[derive(Clone, Debug)]
struct Discriminator {
    scales: Vec<DiscScale>,
}

#[derive(Clone, Debug)]
struct StyleMapper {
    fcs: [Dense; 3],
}

#[derive(Clone, Debug)]
struct Extractor {
    convs: [Conv; 3],
}

/// Mapped style codes produced by `f_I` or `f_L`.
#[derive(Copy, Clone, Debug)]
pub struct MappedStyles {
    /// Style for the albedo generator (`p_RI` / `p_RL`).
    pub albedo: Var,
    /// Style for the shade generator (`p_SI` / `p_SL`).
    pub shade: Var,
    /// Style for the opposite measurement domain (`p_LI` from `f_I`,
    /// `p_IL` from `f_L`).
    pub cross: Var,
}

struct LayerBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    trainable: bool,
}

impl<'a, T: Scalar> LayerBuilder<'a, T> {
    fn gaussian(&mut self, shape: &[usize], std: f64) -> ArrayD<T> {
        let normal = Normal::new(0.0f64, std).expect("std must be positive");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || lit(normal.sample(self.rng)))
    }

    fn conv(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f64,
    ) -> Conv {
        let w = self.gaussian(&[out_c, in_c, k, k], std);
        let b = ArrayD::zeros(IxDyn(&[out_c]));
        Conv {
            w: self.store.register(&format!("{name}.w"), w, self.trainable),
            b: self.store.register(&format!("{name}.b"), b, self.trainable),
            stride,
            pad,
        }
    }

    fn dense(&mut self, name: &str, in_d: usize, out_d: usize) -> Dense {
        let w = self.gaussian(&[out_d, in_d], INIT_STD);
        let b = ArrayD::zeros(IxDyn(&[out_d]));
        Dense {
            w: self.store.register(&format!("{name}.w"), w, self.trainable),
            b: self.store.register(&format!("{name}.b"), b, self.trainable),
        }
    }

    fn res_block(&mut self, name: &str, c: usize) -> ResBlock {
        ResBlock {
            conv0: self.conv(&format!("{name}.conv0"), c, c, 3, 1, 1, INIT_STD),
            conv1: self.conv(&format!("{name}.conv1"), c, c, 3, 1, 1, INIT_STD),
        }
    }
}

/// The full parameter set: every encoder, generator, discriminator, mapper
/// and the frozen extractor, plus invocation counters.
pub struct Model<T: Scalar> {
    pub config: NetConfig,
    pub store: ParamStore<T>,
    pub counters: Counters,
    style_encoders: [StyleEncoder; 4],
    content_encoders: [ContentEncoder; 4],
    generators: [Generator; 4],
    discriminators: [Discriminator; 4],
    mappers: [StyleMapper; 2],
    extractor: Extractor,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model. Trainable weights are Gaussian
    /// with std 0.02 from `seed`; the extractor draws from its own fixed
    /// stream ([`EXTRACTOR_SEED`]) with He-scaled std so its features have
    /// useful magnitude, and is registered frozen.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let style_encoders = DomainId::ALL.map(|d| {
            let mut b = LayerBuilder {
                store: &mut store,
                rng: &mut rng,
                trainable: true,
            };
            let p = format!("style_enc.{}", d.tag());
            let in_c = config.encoder_in_channels(d);
            StyleEncoder {
                convs: [
                    b.conv(&format!("{p}.conv0"), in_c, config.c4(), 7, 2, 3, INIT_STD),
                    b.conv(&format!("{p}.conv1"), config.c4(), config.c2(), 3, 2, 1, INIT_STD),
                    b.conv(&format!("{p}.conv2"), config.c2(), config.c2(), 3, 2, 1, INIT_STD),
                ],
                fc: b.dense(&format!("{p}.fc"), config.c2(), config.style_dim),
            }
        });

        let content_encoders = DomainId::ALL.map(|d| {
            let mut b = LayerBuilder {
                store: &mut store,
                rng: &mut rng,
                trainable: true,
            };
            let p = format!("content_enc.{}", d.tag());
            let in_c = config.encoder_in_channels(d);
            ContentEncoder {
                stem: b.conv(&format!("{p}.stem"), in_c, config.c4(), 7, 1, 3, INIT_STD),
                down: [
                    b.conv(&format!("{p}.down0"), config.c4(), config.c2(), 3, 2, 1, INIT_STD),
                    b.conv(
                        &format!("{p}.down1"),
                        config.c2(),
                        config.content_channels,
                        3,
                        2,
                        1,
                        INIT_STD,
                    ),
                ],
                res: (0..config.n_res_blocks)
                    .map(|i| b.res_block(&format!("{p}.res{i}"), config.content_channels))
                    .collect(),
            }
        });

        let generators = DomainId::ALL.map(|d| {
            let mut b = LayerBuilder {
                store: &mut store,
                rng: &mut rng,
                trainable: true,
            };
            let p = format!("gen.{}", d.tag());
            let c = config.content_channels;
            Generator {
                mlp: [
                    b.dense(&format!("{p}.mlp.fc0"), config.style_dim, config.mlp_hidden),
                    b.dense(&format!("{p}.mlp.fc1"), config.mlp_hidden, config.mlp_hidden),
                    b.dense(
                        &format!("{p}.mlp.fc2"),
                        config.mlp_hidden,
                        config.n_adain_params(),
                    ),
                ],
                res: (0..config.n_res_blocks)
                    .map(|i| b.res_block(&format!("{p}.res{i}"), c))
                    .collect(),
                up: [
                    UpBlock {
                        conv: b.conv(&format!("{p}.up0.conv"), c, config.c2(), 3, 1, 1, INIT_STD),
                        ln_gamma: b.store.register(
                            &format!("{p}.up0.ln.g"),
                            ArrayD::from_elem(IxDyn(&[config.c2()]), T::one()),
                            true,
                        ),
                        ln_beta: b.store.register(
                            &format!("{p}.up0.ln.b"),
                            ArrayD::zeros(IxDyn(&[config.c2()])),
                            true,
                        ),
                    },
                    UpBlock {
                        conv: b.conv(
                            &format!("{p}.up1.conv"),
                            config.c2(),
                            config.c4(),
                            3,
                            1,
                            1,
                            INIT_STD,
                        ),
                        ln_gamma: b.store.register(
                            &format!("{p}.up1.ln.g"),
                            ArrayD::from_elem(IxDyn(&[config.c4()]), T::one()),
                            true,
                        ),
                        ln_beta: b.store.register(
                            &format!("{p}.up1.ln.b"),
                            ArrayD::zeros(IxDyn(&[config.c4()])),
                            true,
                        ),
                    },
                ],
                out: b.conv(
                    &format!("{p}.out"),
                    config.c4(),
                    config.data_channels(d),
                    7,
                    1,
                    3,
                    INIT_STD,
                ),
            }
        });

        let discriminators = DomainId::ALL.map(|d| {
            let mut b = LayerBuilder {
                store: &mut store,
                rng: &mut rng,
                trainable: true,
            };
            let p = format!("disc.{}", d.tag());
            let in_c = config.data_channels(d);
            Discriminator {
                scales: (0..config.disc_scales)
                    .map(|s| DiscScale {
                        convs: [
                            b.conv(&format!("{p}.s{s}.conv0"), in_c, config.c4(), 3, 2, 1, INIT_STD),
                            b.conv(
                                &format!("{p}.s{s}.conv1"),
                                config.c4(),
                                config.c2(),
                                3,
                                2,
                                1,
                                INIT_STD,
                            ),
                            b.conv(
                                &format!("{p}.s{s}.conv2"),
                                config.c2(),
                                config.content_channels,
                                3,
                                2,
                                1,
                                INIT_STD,
                            ),
                        ],
                        head: b.conv(
                            &format!("{p}.s{s}.head"),
                            config.content_channels,
                            1,
                            1,
                            1,
                            0,
                            INIT_STD,
                        ),
                    })
                    .collect(),
            }
        });

        let mappers = ["image", "lidar"].map(|which| {
            let mut b = LayerBuilder {
                store: &mut store,
                rng: &mut rng,
                trainable: true,
            };
            let p = format!("mapper.{which}");
            StyleMapper {
                fcs: [
                    b.dense(&format!("{p}.fc0"), config.style_dim, config.mlp_hidden),
                    b.dense(&format!("{p}.fc1"), config.mlp_hidden, config.mlp_hidden),
                    b.dense(&format!("{p}.fc2"), config.mlp_hidden, 3 * config.style_dim),
                ],
            }
        });

        // The extractor is not trained, so the std-0.02 rule for trainable
        // weights does not apply; He scaling keeps feature magnitudes from
        // collapsing across its three stages.
        let extractor = {
            let mut ex_rng = ChaCha8Rng::seed_from_u64(EXTRACTOR_SEED);
            let mut b = LayerBuilder {
                store: &mut store,
                rng: &mut ex_rng,
                trainable: false,
            };
            let widths = [config.c4() / 2, config.c4(), config.c2()];
            let he = |in_c: usize| (2.0 / (in_c as f64 * 9.0)).sqrt();
            Extractor {
                convs: [
                    b.conv("extractor.conv0", 3, widths[0].max(1), 3, 1, 1, he(3)),
                    b.conv(
                        "extractor.conv1",
                        widths[0].max(1),
                        widths[1].max(1),
                        3,
                        1,
                        1,
                        he(widths[0].max(1)),
                    ),
                    b.conv(
                        "extractor.conv2",
                        widths[1].max(1),
                        widths[2].max(1),
                        3,
                        1,
                        1,
                        he(widths[1].max(1)),
                    ),
                ],
            }
        };

        Ok(Model {
            config,
            store,
            counters: Counters::default(),
            style_encoders,
            content_encoders,
            generators,
            discriminators,
            mappers,
            extractor,
        })
    }

    // ---- parameter grouping ----

    /// Ids of every parameter owned by `component`, in registration order.
    pub fn component_params(&self, component: Component) -> Vec<ParamId> {
        let prefix = component.prefix();
        self.store
            .ids()
            .filter(|&id| self.store.name(id).starts_with(&prefix))
            .collect()
    }

    /// Trainable parameters updated in the generator phase: every encoder,
    /// generator and mapper (not discriminators, not the extractor).
    pub fn generator_side_params(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| {
                self.store.is_trainable(id) && !self.store.name(id).starts_with("disc.")
            })
            .collect()
    }

    /// Trainable parameters updated in the discriminator phase.
    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| {
                self.store.is_trainable(id) && self.store.name(id).starts_with("disc.")
            })
            .collect()
    }

    // ---- tape-level forwards ----

    /// Pads a LiDAR-domain input to two channels with an all-ones validity
    /// mask when the caller provides intensity only (e.g. a generated map).
    fn domain_input(&self, tape: &mut Tape<T>, domain: DomainId, x: Var) -> Var {
        let c = tape.value(x).shape()[0];
        let expect = self.config.encoder_in_channels(domain);
        if domain == DomainId::Lidar && c == 1 {
            let shape = tape.value(x).shape().to_vec();
            let ones = tape.constant(ArrayD::from_elem(IxDyn(&shape), T::one()));
            return tape.concat0(x, ones);
        }
        assert_eq!(
            c,
            expect,
            "{domain:?} encoder expects {expect} input channels, got {c}"
        );
        x
    }

    /// `E^p_X`: style code `[style_dim]` of an input map.
    pub fn encode_style(&self, tape: &mut Tape<T>, domain: DomainId, x: Var) -> Var {
        self.counters.bump(Component::StyleEncoder(domain));
        let enc = &self.style_encoders[domain.index()];
        let mut h = self.domain_input(tape, domain, x);
        for conv in &enc.convs {
            h = conv.apply(tape, &self.store, h);
            h = tape.relu(h);
        }
        let pooled = tape.global_avg_pool(h);
        enc.fc.apply(tape, &self.store, pooled)
    }

    /// `E^c_X`: content code `[C, H/4, W/4]`. Spatial dims must be divisible
    /// by the downsample factor.
    pub fn encode_content(&self, tape: &mut Tape<T>, domain: DomainId, x: Var) -> Var {
        self.counters.bump(Component::ContentEncoder(domain));
        let shape = tape.value(x).shape().to_vec();
        assert!(
            shape[1] % self.config.downsample_factor == 0
                && shape[2] % self.config.downsample_factor == 0,
            "content encoder needs dims divisible by {}, got {}x{}",
            self.config.downsample_factor,
            shape[1],
            shape[2]
        );
        let enc = &self.content_encoders[domain.index()];
        let eps = lit(INSTANCE_NORM_EPS);
        let mut h = self.domain_input(tape, domain, x);
        h = enc.stem.apply(tape, &self.store, h);
        h = tape.instance_norm(h, eps);
        h = tape.relu(h);
        for conv in &enc.down {
            h = conv.apply(tape, &self.store, h);
            h = tape.instance_norm(h, eps);
            h = tape.relu(h);
        }
        for block in &enc.res {
            let c0 = block.conv0.apply(tape, &self.store, h);
            let n0 = tape.instance_norm(c0, eps);
            let a0 = tape.relu(n0);
            let c1 = block.conv1.apply(tape, &self.store, a0);
            let n1 = tape.instance_norm(c1, eps);
            h = tape.add(h, n1);
        }
        h
    }

    /// `G_X`: decodes a content code under a style code into a map in
    /// `[0, 1]` (sigmoid output), upsampling back to input resolution.
    pub fn generate(&self, tape: &mut Tape<T>, domain: DomainId, content: Var, style: Var) -> Var {
        self.counters.bump(Component::Generator(domain));
        let gen = &self.generators[domain.index()];
        let eps = lit(INSTANCE_NORM_EPS);
        let c = self.config.content_channels;

        // Style → AdaIN parameters. Raw MLP outputs are near zero at init,
        // so scales are offset by one to start at identity.
        let mut s = gen.mlp[0].apply(tape, &self.store, style);
        s = tape.relu(s);
        s = gen.mlp[1].apply(tape, &self.store, s);
        s = tape.relu(s);
        let adain_params = gen.mlp[2].apply(tape, &self.store, s);

        let mut h = content;
        for (i, block) in gen.res.iter().enumerate() {
            let base = i * 4 * c;
            let g0_raw = tape.narrow(adain_params, 0, base, c);
            let g0 = tape.add_scalar(g0_raw, T::one());
            let b0 = tape.narrow(adain_params, 0, base + c, c);
            let g1_raw = tape.narrow(adain_params, 0, base + 2 * c, c);
            let g1 = tape.add_scalar(g1_raw, T::one());
            let b1 = tape.narrow(adain_params, 0, base + 3 * c, c);

            let c0 = block.conv0.apply(tape, &self.store, h);
            let a0 = adain(tape, c0, g0, b0, eps);
            let r0 = tape.relu(a0);
            let c1 = block.conv1.apply(tape, &self.store, r0);
            let a1 = adain(tape, c1, g1, b1, eps);
            h = tape.add(h, a1);
        }

        for up in &gen.up {
            h = tape.upsample_nearest2(h);
            h = up.conv.apply(tape, &self.store, h);
            h = tape.layer_norm(h, eps);
            let g = tape.param(&self.store, up.ln_gamma);
            let b = tape.param(&self.store, up.ln_beta);
            h = tape.mul_channel(h, g);
            h = tape.add_channel(h, b);
            h = tape.relu(h);
        }
        let out = gen.out.apply(tape, &self.store, h);
        tape.sigmoid(out)
    }

    /// `D_X`: patch score maps, one per scale (coarser scales on avg-pooled
    /// input). Higher scores mean "real".
    pub fn discriminate(&self, tape: &mut Tape<T>, domain: DomainId, x: Var) -> Vec<Var> {
        self.counters.bump(Component::Discriminator(domain));
        let disc = &self.discriminators[domain.index()];
        let slope = lit(LEAKY_SLOPE);
        let mut input = x;
        let mut scores = Vec::with_capacity(disc.scales.len());
        for (i, scale) in disc.scales.iter().enumerate() {
            let mut h = input;
            for conv in &scale.convs {
                h = conv.apply(tape, &self.store, h);
                h = tape.leaky_relu(h, slope);
            }
            scores.push(scale.head.apply(tape, &self.store, h));
            if i + 1 < disc.scales.len() {
                input = tape.avg_pool2(input);
            }
        }
        scores
    }

    /// `f_I` / `f_L`: maps a measurement-domain style code to the three
    /// translation style codes.
    pub fn map_styles(&self, tape: &mut Tape<T>, source: DomainId, style: Var) -> MappedStyles {
        let (idx, component) = match source {
            DomainId::Image => (0, Component::ImageMapper),
            DomainId::Lidar => (1, Component::LidarMapper),
            other => panic!("style mapper sources are Image and Lidar, got {other:?}"),
        };
        self.counters.bump(component);
        let mapper = &self.mappers[idx];
        let mut h = mapper.fcs[0].apply(tape, &self.store, style);
        h = tape.relu(h);
        h = mapper.fcs[1].apply(tape, &self.store, h);
        h = tape.relu(h);
        let out = mapper.fcs[2].apply(tape, &self.store, h);
        let s = self.config.style_dim;
        MappedStyles {
            albedo: tape.narrow(out, 0, 0, s),
            shade: tape.narrow(out, 0, s, s),
            cross: tape.narrow(out, 0, 2 * s, s),
        }
    }

    /// `V`: frozen three-stage feature pyramid for the perceptual loss.
    pub fn extract_features(&self, tape: &mut Tape<T>, x: Var) -> Vec<Var> {
        self.counters.bump(Component::Extractor);
        let mut feats = Vec::with_capacity(3);
        let mut h = x;
        for (i, conv) in self.extractor.convs.iter().enumerate() {
            if i > 0 {
                h = tape.avg_pool2(h);
            }
            h = conv.apply(tape, &self.store, h);
            h = tape.relu(h);
            feats.push(h);
        }
        feats
    }

    // ---- value-level wrappers (contract-checked) ----

    fn check_domain_input(&self, domain: DomainId, x: &FeatureMap<T>) -> Result<()> {
        let c = x.channels();
        let ok = match domain {
            DomainId::Lidar => c == 1 || c == 2,
            _ => c == 3,
        };
        if !ok {
            return Err(Error::contract(format!(
                "{domain:?} input must have {} channels (LiDAR accepts 1, mask appended), got {c}",
                self.config.encoder_in_channels(domain)
            )));
        }
        Ok(())
    }

    pub fn encode_style_value(&self, domain: DomainId, x: &FeatureMap<T>) -> Result<StyleCode<T>> {
        self.check_domain_input(domain, x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.data.clone().into_dyn());
        let s = self.encode_style(&mut tape, domain, xv);
        Ok(StyleCode::new(
            tape.value(s).clone().into_dimensionality().unwrap(),
        ))
    }

    pub fn encode_content_value(&self, domain: DomainId, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check_domain_input(domain, x)?;
        if x.height() % self.config.downsample_factor != 0
            || x.width() % self.config.downsample_factor != 0
        {
            return Err(Error::contract(format!(
                "content encoding needs spatial dims divisible by {}, got {}x{}",
                self.config.downsample_factor,
                x.height(),
                x.width()
            )));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.data.clone().into_dyn());
        let c = self.encode_content(&mut tape, domain, xv);
        Ok(FeatureMap::new(
            tape.value(c).clone().into_dimensionality().unwrap(),
        ))
    }

    pub fn generate_value(
        &self,
        domain: DomainId,
        content: &FeatureMap<T>,
        style: &StyleCode<T>,
    ) -> Result<FeatureMap<T>> {
        if content.channels() != self.config.content_channels {
            return Err(Error::contract(format!(
                "content code must have {} channels, got {}",
                self.config.content_channels,
                content.channels()
            )));
        }
        if style.dim() != self.config.style_dim {
            return Err(Error::contract(format!(
                "style code must have dim {}, got {}",
                self.config.style_dim,
                style.dim()
            )));
        }
        let mut tape = Tape::new();
        let cv = tape.constant(content.data.clone().into_dyn());
        let sv = tape.constant(style.data.clone().into_dyn());
        let y = self.generate(&mut tape, domain, cv, sv);
        Ok(FeatureMap::new(
            tape.value(y).clone().into_dimensionality().unwrap(),
        ))
    }

    pub fn discriminate_value(
        &self,
        domain: DomainId,
        x: &FeatureMap<T>,
    ) -> Result<Vec<FeatureMap<T>>> {
        if x.channels() != self.config.data_channels(domain) {
            return Err(Error::contract(format!(
                "{domain:?} discriminator expects {} channels, got {}",
                self.config.data_channels(domain),
                x.channels()
            )));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.data.clone().into_dyn());
        let scores = self.discriminate(&mut tape, domain, xv);
        Ok(scores
            .into_iter()
            .map(|s| FeatureMap::new(tape.value(s).clone().into_dimensionality().unwrap()))
            .collect())
    }

    pub fn map_styles_value(
        &self,
        source: DomainId,
        style: &StyleCode<T>,
    ) -> Result<(StyleCode<T>, StyleCode<T>, StyleCode<T>)> {
        if style.dim() != self.config.style_dim {
            return Err(Error::contract(format!(
                "style code must have dim {}, got {}",
                self.config.style_dim,
                style.dim()
            )));
        }
        let mut tape = Tape::new();
        let sv = tape.constant(style.data.clone().into_dyn());
        let mapped = self.map_styles(&mut tape, source, sv);
        let get = |v: Var| {
            StyleCode::new(
                tape.value(v)
                    .clone()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap(),
            )
        };
        Ok((get(mapped.albedo), get(mapped.shade), get(mapped.cross)))
    }

    pub fn extract_features_value(&self, x: &FeatureMap<T>) -> Result<Vec<FeatureMap<T>>> {
        if x.channels() != 3 {
            return Err(Error::contract(format!(
                "extractor expects 3 channels, got {}",
                x.channels()
            )));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.data.clone().into_dyn());
        let feats = self.extract_features(&mut tape, xv);
        Ok(feats
            .into_iter()
            .map(|f| FeatureMap::new(tape.value(f).clone().into_dimensionality().unwrap()))
            .collect())
    }

    /// Overwrites parameter values by name (used when restoring checkpoints
    /// or installing external extractor weights). Shapes must match.
    pub fn assign_named(&mut self, name: &str, value: ArrayD<T>) -> Result<()> {
        let id = self
            .store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if self.store.value(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` shape mismatch: model has {:?}, payload has {:?}",
                self.store.value(id).shape(),
                value.shape()
            )));
        }
        *self.store.value_mut(id) = value;
        Ok(())
    }
}

/// Adaptive instance normalization: per-channel normalize `x`, then apply
/// `gamma[c] * x + beta[c]`.
pub fn adain<T: Scalar>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
    let n = tape.instance_norm(x, eps);
    let scaled = tape.mul_channel(n, gamma);
    tape.add_channel(scaled, beta)
}

/// Per-element mean style code of a batch (used to fit style distributions).
pub fn mean_style<T: Scalar>(tape: &mut Tape<T>, codes: &[Var]) -> Var {
    assert!(!codes.is_empty(), "mean_style over an empty batch");
    let mut acc = codes[0];
    for &c in &codes[1..] {
        acc = tape.add(acc, c);
    }
    tape.scale(acc, T::one() / T::of_usize(codes.len()))
}

/// Builds a [`StyleCode`] filled from a unit Gaussian (for sampling-based
/// diagnostics).
pub fn random_style<T: Scalar>(dim: usize, rng: &mut ChaCha8Rng) -> StyleCode<T> {
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    StyleCode::new(Array1::from_shape_simple_fn(dim, || lit(normal.sample(rng))))
}
