//! Two-phase adversarial training, checkpointing and the run log.
//!
//! Each step builds one training graph, updates the discriminators on
//! detached generator outputs, then re-scores the same outputs with the
//! updated discriminators and updates the generator side on the full
//! weighted objective. Runs are deterministic given a seed: batches come
//! from one counter-based RNG, execution is single-threaded, and the
//! checkpoint stores parameters, optimizer moments and the RNG state so a
//! resumed run continues the exact same stream.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, PairedSample};
use crate::losses::{LossReport, LossWeights};
use crate::nets::{Model, NetConfig};
use crate::num::{lit, Scalar};
use crate::pipeline::{discriminator_loss, generator_loss, training_forward, Ablations};

/// Leading bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LIET";
/// Container format revision.
pub const CHECKPOINT_VERSION: u32 = 1;
/// Adam denominator guard.
pub const ADAM_EPS: f64 = 1e-8;

/// Training hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub max_iters: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub no_aa: bool,
    pub no_instance_norm: bool,
    pub no_gray: bool,
    pub no_ilc: bool,
    pub with_smooth: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            lr_gen: 1e-4,
            lr_disc: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 2,
            max_iters: 200,
            checkpoint_every: 100,
            seed: 0,
            no_aa: false,
            no_instance_norm: false,
            no_gray: false,
            no_ilc: false,
            with_smooth: false,
        }
    }
}

impl TrainConfig {
    /// Validates rates, batch shape and weights; error messages name the
    /// offending key.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.lr_gen", self.lr_gen),
            ("train.lr_disc", self.lr_disc),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be a positive finite number, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("train.adam_beta1", self.adam_beta1),
            ("train.adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "train.batch_size must be at least 2 (style distributions are fitted per batch), got {}",
                self.batch_size
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("train.max_iters must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config(
                "train.checkpoint_every must be at least 1".into(),
            ));
        }
        self.weights.validate()?;
        Ok(())
    }

    /// Structural switches for the pipeline.
    pub fn ablations(&self) -> Ablations {
        Ablations {
            no_aa: self.no_aa,
            no_instance_norm: self.no_instance_norm,
            no_gray: self.no_gray,
            no_ilc: self.no_ilc,
            with_smooth: self.with_smooth,
        }
    }

    /// Effective loss weights after applying ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        if self.no_aa {
            w.aa = 0.0;
        }
        if self.with_smooth && w.smooth == 0.0 {
            // Smoothness enabled but left at the off-default: give it the
            // reference ablation magnitude.
            w.smooth = 1.0;
        }
        w
    }
}

/// Adam with per-parameter first/second moments.
pub struct Adam<T: Scalar> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: u64,
    m: BTreeMap<ParamId, ArrayD<T>>,
    v: BTreeMap<ParamId, ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr: lit(lr),
            beta1: lit(beta1),
            beta2: lit(beta2),
            eps: lit(ADAM_EPS),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the supplied gradients. Parameters without a
    /// gradient are untouched; moments are created lazily.
    pub fn apply(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<ParamId, ArrayD<T>>) {
        if grads.is_empty() {
            return;
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = T::one() - self.beta1.powi(t);
        let bias2 = T::one() - self.beta2.powi(t);
        for (&id, grad) in grads {
            debug_assert!(store.is_trainable(id), "gradient on frozen parameter");
            let m = self
                .m
                .entry(id)
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(id)
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let value = store.value_mut(id);
            for ((p, &g), (mi, vi)) in value
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * g;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *p = *p - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Complete mutable training state.
pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub iter: u64,
    pub rng: ChaCha8Rng,
    opt_gen: Adam<T>,
    opt_disc: Adam<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(net: NetConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(net, config.seed)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let opt_gen = Adam::new(config.lr_gen, config.adam_beta1, config.adam_beta2);
        let opt_disc = Adam::new(config.lr_disc, config.adam_beta1, config.adam_beta2);
        Ok(TrainState {
            model,
            config,
            iter: 0,
            rng,
            opt_gen,
            opt_disc,
        })
    }
}

/// One discriminator-then-generator update on an explicit batch.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[PairedSample<T>],
    albedo_batch: &[FeatureMap<T>],
    shade_batch: &[FeatureMap<T>],
) -> Result<LossReport> {
    let iter = state.iter + 1;
    let model = &state.model;
    let mut tape = Tape::new();
    let bundle = training_forward(
        model,
        &mut tape,
        batch,
        albedo_batch,
        shade_batch,
        state.config.ablations(),
    )?;

    // Phase 1: discriminators, generator outputs detached.
    let d_loss = discriminator_loss(model, &mut tape, &bundle);
    let adv_d = tape.scalar_value(d_loss).as_f64();
    if !adv_d.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "adv_d".into(),
            iter,
        });
    }
    let d_grads = tape.backward(d_loss);
    let d_by_param = tape.param_grads(&d_grads);
    debug_assert!(
        d_by_param
            .keys()
            .all(|&id| state.model.store.name(id).starts_with("disc.")),
        "discriminator phase leaked gradients outside the discriminators"
    );
    state.opt_disc.apply(&mut state.model.store, &d_by_param);

    // Phase 2: generator side, scored by the just-updated discriminators.
    tape.clear_param_cache();
    let model = &state.model;
    let weights = state.config.effective_weights();
    let (total, terms) = generator_loss(model, &mut tape, &bundle, &weights);

    let value = |v| tape.scalar_value(v).as_f64();
    let report = LossReport {
        iter,
        adv_d,
        adv_g: value(terms.adv_g),
        img: value(terms.img),
        sty: value(terms.sty),
        cnt: value(terms.cnt),
        kld: value(terms.kld),
        vgg: value(terms.vgg),
        phy: value(terms.phy),
        aa: value(terms.aa),
        smooth: value(terms.smooth),
        total: value(total),
    };
    if let Some(term) = report.first_non_finite() {
        return Err(Error::NonFiniteLoss {
            term: term.into(),
            iter,
        });
    }

    let g_grads = tape.backward(total);
    let g_by_param = tape.param_grads(&g_grads);
    let gen_side: std::collections::BTreeSet<ParamId> =
        state.model.generator_side_params().into_iter().collect();
    let filtered: BTreeMap<ParamId, ArrayD<T>> = g_by_param
        .into_iter()
        .filter(|(id, _)| gen_side.contains(id))
        .collect();
    debug_assert!(
        filtered
            .keys()
            .all(|&id| !state.model.store.name(id).starts_with("extractor.")),
        "optimizer must never touch the frozen extractor"
    );
    state.opt_gen.apply(&mut state.model.store, &filtered);

    state.iter = iter;
    Ok(report)
}

/// Everything a finished (or aborted-and-resumed) run produced.
#[derive(Debug)]
pub struct FitOutput {
    pub reports: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs `max_iters - iter` steps, sampling batches and non-corresponding
/// pool exemplars from the state RNG. With a run directory, appends one
/// JSON line per step to `train_log.ndjson` and saves checkpoints at every
/// multiple of `checkpoint_every` plus the final iteration.
pub fn fit<T: Scalar>(
    state: &mut TrainState<T>,
    dataset: &[PairedSample<T>],
    albedo_pool: &[FeatureMap<T>],
    shade_pool: &[FeatureMap<T>],
    run_dir: Option<&Path>,
) -> Result<FitOutput> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if albedo_pool.is_empty() || shade_pool.is_empty() {
        return Err(Error::Config(
            "albedo/shade domain pools must be non-empty".into(),
        ));
    }
    let mut log = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("train_log.ndjson"))?,
            )
        }
        None => None,
    };

    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    let b = state.config.batch_size;
    while state.iter < state.config.max_iters {
        let draw = |rng: &mut ChaCha8Rng, len: usize, n: usize| -> Vec<usize> {
            (0..n).map(|_| rng.gen_range(0..len)).collect()
        };
        let batch: Vec<PairedSample<T>> = draw(&mut state.rng, dataset.len(), b)
            .into_iter()
            .map(|i| dataset[i].clone())
            .collect();
        let albedo: Vec<FeatureMap<T>> = draw(&mut state.rng, albedo_pool.len(), b)
            .into_iter()
            .map(|i| albedo_pool[i].clone())
            .collect();
        let shade: Vec<FeatureMap<T>> = draw(&mut state.rng, shade_pool.len(), b)
            .into_iter()
            .map(|i| shade_pool[i].clone())
            .collect();

        let report = train_step(state, &batch, &albedo, &shade)?;
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(&report)?;
            writeln!(f, "{line}")?;
        }
        reports.push(report);

        let due = state.iter % state.config.checkpoint_every == 0
            || state.iter == state.config.max_iters;
        if due {
            if let Some(dir) = run_dir {
                let path = dir.join(format!("checkpoint_{:06}.ckpt", state.iter));
                save_checkpoint(state, &path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(FitOutput {
        reports,
        checkpoints,
    })
}

// ---- checkpoint container ----

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointMeta {
    iter: u64,
    net: NetConfig,
    train: TrainConfig,
    rng: ChaCha8Rng,
    opt_gen_step: u64,
    opt_disc_step: u64,
}

fn push_entry(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: impl Iterator<Item = f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(0u8); // dtype 0: f32
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes parameters, optimizer moments, RNG state and config. The
/// payload is always 32-bit floats regardless of the training scalar type.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let store = &state.model.store;
    let mut entries: u32 = 0;
    let mut body = Vec::new();
    for id in store.ids() {
        let value = store.value(id);
        push_entry(
            &mut body,
            store.name(id),
            value.shape(),
            value.iter().map(|v| v.as_f32()),
        );
        entries += 1;
    }
    for (prefix, opt) in [("opt.gen", &state.opt_gen), ("opt.disc", &state.opt_disc)] {
        for (kind, map) in [("m", &opt.m), ("v", &opt.v)] {
            for id in store.ids() {
                if let Some(moment) = map.get(&id) {
                    push_entry(
                        &mut body,
                        &format!("{prefix}.{kind}.{}", store.name(id)),
                        moment.shape(),
                        moment.iter().map(|v| v.as_f32()),
                    );
                    entries += 1;
                }
            }
        }
    }

    let meta = CheckpointMeta {
        iter: state.iter,
        net: state.model.config.clone(),
        train: state.config.clone(),
        rng: state.rng.clone(),
        opt_gen_step: state.opt_gen.step_count(),
        opt_disc_step: state.opt_disc.step_count(),
    };
    let json = serde_json::to_vec(&meta)?;

    let mut out = Vec::with_capacity(body.len() + json.len() + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&entries.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: expected {n} more bytes for {what}"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Restores a full training state. Rejects bad magic, unknown versions,
/// unknown entries and truncation without partially mutating anything.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let n_entries = r.u32("entry count")?;
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(n_entries as usize);
    for i in 0..n_entries {
        let name_len = r.u32("entry name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "entry name")?)
            .map_err(|_| Error::Checkpoint(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        if dtype != 0 {
            return Err(Error::Checkpoint(format!(
                "entry `{name}`: unknown dtype {dtype}"
            )));
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dimension")? as usize);
        }
        let len: usize = dims.iter().product();
        let raw = r.take(len * 4, "tensor payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, dims, data));
    }
    let json_len = r.u64("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len, "metadata")?)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after metadata",
            bytes.len() - r.pos
        )));
    }

    meta.train.validate()?;
    let mut model = Model::<T>::new(meta.net, meta.train.seed)?;
    let mut opt_gen = Adam::new(meta.train.lr_gen, meta.train.adam_beta1, meta.train.adam_beta2);
    let mut opt_disc = Adam::new(
        meta.train.lr_disc,
        meta.train.adam_beta1,
        meta.train.adam_beta2,
    );
    opt_gen.step = meta.opt_gen_step;
    opt_disc.step = meta.opt_disc_step;

    let mut params_restored = 0usize;
    for (name, dims, data) in entries {
        let array = ArrayD::from_shape_vec(
            ndarray::IxDyn(&dims),
            data.into_iter().map(|v| T::of_f32(v)).collect(),
        )
        .map_err(|_| Error::Checkpoint(format!("entry `{name}`: dims do not match payload")))?;
        if let Some(rest) = name.strip_prefix("opt.") {
            let (opt, rest) = match rest.split_once('.') {
                Some(("gen", rest)) => (&mut opt_gen, rest),
                Some(("disc", rest)) => (&mut opt_disc, rest),
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "unknown optimizer entry `{name}`"
                    )))
                }
            };
            let (kind, param_name) = rest.split_once('.').ok_or_else(|| {
                Error::Checkpoint(format!("malformed optimizer entry `{name}`"))
            })?;
            let id = model.store.find(param_name).ok_or_else(|| {
                Error::Checkpoint(format!("moment for unknown parameter `{param_name}`"))
            })?;
            match kind {
                "m" => opt.m.insert(id, array),
                "v" => opt.v.insert(id, array),
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "unknown moment kind in `{name}`"
                    )))
                }
            };
        } else {
            model.assign_named(&name, array).map_err(|e| {
                Error::Checkpoint(format!("cannot restore entry `{name}`: {e}"))
            })?;
            params_restored += 1;
        }
    }
    if params_restored != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint restored {params_restored} of {} parameters",
            model.store.len()
        )));
    }

    Ok(TrainState {
        model,
        config: meta.train,
        iter: meta.iter,
        rng: meta.rng,
        opt_gen,
        opt_disc,
    })
}
