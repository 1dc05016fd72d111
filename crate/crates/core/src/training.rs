//! Generalized self-reconstruction training.
//!
//! Each step samples one clip, a 5-frame target window and an independent
//! reference frame from the same clip, erases the lower face of the targets,
//! encodes, masks the pyramid, generates, and minimises
//! `L_adv + λ_r·L_rec + λ_s·L_sync` with a logistic discriminator and lazy R1.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Tape, Var};
use crate::codec::{
    encode_audio, encode_face, init_audio_encoder, init_face_encoder, mask_pyramid, slab_tensor,
    style_vector, AUDIO_PREFIX, FACE_PREFIX,
};
use crate::config::ModelConfig;
use crate::data::{build_umask, mask_frame, stack, Image, MelSlab, UMask, VideoClip};
use crate::error::{Error, Result};
use crate::generator::{generate, init_generator, StyleState, GEN_PREFIX};
use crate::nn::{self, conv, init_conv, init_linear, linear, lrelu, Adam, ParamStore, Trainables};
use crate::syncnet::{self, cosine_rows, window_input, WINDOW};
use crate::tensor::{Real, Tensor};

pub const DISC_PREFIX: &str = "disc";
pub const PERC_PREFIX: &str = "perc";
/// Logit magnitude treated as saturation.
pub const LOGIT_LIMIT: f64 = 30.0;
const PERC_WIDTHS: [usize; 4] = [8, 16, 32, 32];
const PERC_SEED: u64 = 0x9e37;

/// Frozen feature extractor for the perceptual term of the reconstruction loss.
pub trait FeatureExtractor<T: Real> {
    fn taps<'t>(&self, x: Var<'t, T>) -> Vec<Var<'t, T>>;
}

/// Returns its input at every tap; useful for checking the loss arithmetic.
pub struct IdentityTaps(pub usize);

impl<T: Real> FeatureExtractor<T> for IdentityTaps {
    fn taps<'t>(&self, x: Var<'t, T>) -> Vec<Var<'t, T>> {
        vec![x; self.0]
    }
}

/// Randomly initialised, frozen conv stack whose activations after each
/// stage serve as the perceptual taps.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor<T> {
    params: ParamStore<T>,
    n_taps: usize,
}

impl<T: Real> RandomConvExtractor<T> {
    pub fn new(n_taps: usize) -> Result<Self> {
        if n_taps > PERC_WIDTHS.len() {
            return Err(Error::Config(format!(
                "at most {} perceptual taps supported, got {n_taps}",
                PERC_WIDTHS.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(PERC_SEED);
        let mut params = ParamStore::new();
        let mut cin = 3;
        for (i, &c) in PERC_WIDTHS.iter().take(n_taps).enumerate() {
            init_conv(&mut params, &mut rng, &format!("{PERC_PREFIX}.conv{i}"), c, cin, 3, true);
            cin = c;
        }
        Ok(Self { params, n_taps })
    }
}

impl<T: Real> FeatureExtractor<T> for RandomConvExtractor<T> {
    fn taps<'t>(&self, x: Var<'t, T>) -> Vec<Var<'t, T>> {
        let b = self.params.bind(x.tape(), |_| false);
        let mut h = x;
        let mut out = Vec::with_capacity(self.n_taps);
        for i in 0..self.n_taps {
            let geom = if i == 0 { nn::SAME3 } else { nn::DOWN3 };
            h = lrelu(conv(&b, &format!("{PERC_PREFIX}.conv{i}"), h, geom));
            out.push(h);
        }
        out
    }
}

/// Mean absolute pixel error plus the mean absolute error at every tap.
pub fn reconstruction_loss<'t, T: Real>(
    pred: Var<'t, T>,
    target: Var<'t, T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut loss = (pred - target).abs().mean();
    let fp = extractor.taps(pred);
    let ft = extractor.taps(target);
    for (a, b) in fp.into_iter().zip(ft) {
        loss = loss + (a - b).abs().mean();
    }
    Ok(loss)
}

pub fn init_discriminator<T: Real, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    rng: &mut R,
    store: &mut ParamStore<T>,
) {
    let s = cfg.image_size;
    init_conv(store, rng, &format!("{DISC_PREFIX}.from_rgb"), cfg.disc_channels(s), 3, 1, true);
    let mut res = s;
    while res > 4 {
        let c = cfg.disc_channels(res);
        init_conv(store, rng, &format!("{DISC_PREFIX}.b{res}.conv"), c, c, 3, true);
        init_conv(store, rng, &format!("{DISC_PREFIX}.b{res}.down"), cfg.disc_channels(res / 2), c, 3, true);
        res /= 2;
    }
    let c4 = cfg.disc_channels(4);
    init_linear(store, rng, &format!("{DISC_PREFIX}.fc"), c4 * 16, c4, Some(0.0));
    init_linear(store, rng, &format!("{DISC_PREFIX}.out"), c4, 1, Some(0.0));
}

/// Logits `[N, 1]` for frames `[N, 3, S, S]` in `[0, 1]`.
pub fn discriminate<'t, T: Real>(cfg: &ModelConfig, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
    let n = x.shape()[0];
    let mut h = lrelu(conv(p, &format!("{DISC_PREFIX}.from_rgb"), x.scale(2.0).add_scalar(-1.0), nn::POINT));
    let mut res = cfg.image_size;
    while res > 4 {
        h = lrelu(conv(p, &format!("{DISC_PREFIX}.b{res}.conv"), h, nn::SAME3));
        h = lrelu(conv(p, &format!("{DISC_PREFIX}.b{res}.down"), h, nn::DOWN3));
        res /= 2;
    }
    let flat = h.numel() / n;
    let h = lrelu(linear(p, &format!("{DISC_PREFIX}.fc"), h.reshape(&[n, flat])));
    linear(p, &format!("{DISC_PREFIX}.out"), h)
}

fn check_logits<T: Real>(v: &Var<'_, T>, what: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} logits")))
    }
}

/// Discriminator loss `mean softplus(−D(real)) + mean softplus(D(fake))`.
pub fn d_logistic_loss<'t, T: Real>(real: Var<'t, T>, fake: Var<'t, T>) -> Result<Var<'t, T>> {
    check_logits(&real, "real")?;
    check_logits(&fake, "fake")?;
    Ok((-real).softplus().mean() + fake.softplus().mean())
}

/// Non-saturating generator loss `mean softplus(−D(fake))`.
pub fn g_nonsat_loss<'t, T: Real>(fake: Var<'t, T>) -> Result<Var<'t, T>> {
    check_logits(&fake, "fake")?;
    Ok((-fake).softplus().mean())
}

/// `(γ/2)·E‖∇_x D(x)‖²` on real frames, built with a differentiable input
/// gradient so the penalty itself can be backpropagated into `D`.
pub fn r1_penalty<'t, T: Real>(
    cfg: &ModelConfig,
    p: &Bound<'t, T>,
    real: Var<'t, T>,
    gamma: f64,
) -> Var<'t, T> {
    let tape = real.tape();
    let n = real.shape()[0];
    let logits = discriminate(cfg, p, real);
    let g = tape.grad(logits.sum(), &[real], true)[0];
    match g {
        Some(g) => g.square().sum().scale(0.5 * gamma / n as f64),
        None => tape.scalar(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_rec: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub l_sync: f64,
    /// Present on the steps where the lazy R1 term ran.
    pub r1: Option<f64>,
    pub total_g: f64,
}

impl LossBreakdown {
    /// `l_adv_g + λ_r·l_rec + λ_s·l_sync`.
    pub fn recompute_total(&self, lambda_rec: f64, lambda_sync: f64) -> f64 {
        self.l_adv_g + lambda_rec * self.l_rec + lambda_sync * self.l_sync
    }

    pub fn is_finite(&self) -> bool {
        [self.l_rec, self.l_adv_g, self.l_adv_d, self.l_sync, self.total_g]
            .iter()
            .all(|v| v.is_finite())
            && self.r1.is_none_or(f64::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// 5-frame windows per step.
    pub windows_per_step: usize,
    pub lambda_rec: f64,
    pub lambda_sync: f64,
    pub adversarial: bool,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_enc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub n_vgg: usize,
    /// Gate the fine pyramid layers with the lower-face mask.
    pub masking: bool,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            windows_per_step: 1,
            lambda_rec: 10.0,
            lambda_sync: 1.0,
            adversarial: true,
            r1_gamma: 1.0,
            r1_interval: 16,
            lr_g: 2e-3,
            lr_d: 2e-3,
            lr_enc: 1e-4,
            beta1: 0.0,
            beta2: 0.99,
            n_vgg: 2,
            masking: true,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows_per_step == 0 {
            return Err(Error::Config("windows_per_step must be positive".into()));
        }
        if self.r1_interval == 0 {
            return Err(Error::Config("r1_interval must be positive".into()));
        }
        for (k, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_sync", self.lambda_sync),
            ("r1_gamma", self.r1_gamma),
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("lr_enc", self.lr_enc),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be a finite non-negative number")));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("train.{k}"), v);
        };
        put("steps", self.steps.to_string());
        put("windows_per_step", self.windows_per_step.to_string());
        put("lambda_rec", self.lambda_rec.to_string());
        put("lambda_sync", self.lambda_sync.to_string());
        put("adversarial", self.adversarial.to_string());
        put("r1_gamma", self.r1_gamma.to_string());
        put("r1_interval", self.r1_interval.to_string());
        put("lr_g", self.lr_g.to_string());
        put("lr_d", self.lr_d.to_string());
        put("lr_enc", self.lr_enc.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("n_vgg", self.n_vgg.to_string());
        put("masking", self.masking.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("seed", self.seed.to_string());
        m
    }

    /// Reads `train.*` keys over the defaults.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in kv {
            let Some(key) = k.strip_prefix("train.") else { continue };
            let bad = || Error::Config(format!("{k}: cannot parse `{v}`"));
            let u = || v.parse::<usize>().map_err(|_| bad());
            let f = || v.parse::<f64>().map_err(|_| bad());
            let b = || v.parse::<bool>().map_err(|_| bad());
            match key {
                "steps" => c.steps = u()?,
                "windows_per_step" => c.windows_per_step = u()?,
                "lambda_rec" => c.lambda_rec = f()?,
                "lambda_sync" => c.lambda_sync = f()?,
                "adversarial" => c.adversarial = b()?,
                "r1_gamma" => c.r1_gamma = f()?,
                "r1_interval" => c.r1_interval = u()?,
                "lr_g" => c.lr_g = f()?,
                "lr_d" => c.lr_d = f()?,
                "lr_enc" => c.lr_enc = f()?,
                "beta1" => c.beta1 = f()?,
                "beta2" => c.beta2 = f()?,
                "n_vgg" => c.n_vgg = u()?,
                "masking" => c.masking = b()?,
                "checkpoint_every" => c.checkpoint_every = u()?,
                "seed" => c.seed = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Fresh encoders, generator and discriminator, all under one store.
pub fn init_model<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> ParamStore<f32> {
    let mut p = ParamStore::new();
    init_face_encoder(cfg, rng, &mut p);
    init_audio_encoder(cfg, rng, &mut p);
    init_generator(cfg, rng, &mut p);
    init_discriminator(cfg, rng, &mut p);
    p
}

/// Tensors for one step: `N = 5·windows` frames.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub targets: Tensor<T>,
    pub masked: Tensor<T>,
    pub refs: Tensor<T>,
    /// Per-frame slabs `[N, 1, 80, 16]` driving the audio encoder.
    pub slabs: Tensor<T>,
    /// Slab at each window start `[windows, 1, 80, 16]` for the sync term.
    pub window_slabs: Tensor<T>,
    pub clip: usize,
    pub starts: Vec<usize>,
    pub reference: usize,
}

impl<T: Real> Batch<T> {
    /// Windows `starts` of `clip` with reference frame `reference`.
    pub fn build(
        clip_index: usize,
        clip: &VideoClip,
        starts: &[usize],
        reference: usize,
        mask: &UMask,
    ) -> Result<Self> {
        if reference >= clip.len() {
            return Err(Error::OutOfRange(format!("reference frame {reference}")));
        }
        let mut frames: Vec<&Image> = Vec::new();
        let mut masked_imgs = Vec::new();
        let mut slabs = Vec::new();
        let mut wslabs = Vec::new();
        for &t in starts {
            if t + WINDOW > clip.len() {
                return Err(Error::OutOfRange(format!("window at {t} exceeds clip")));
            }
            wslabs.push(clip.mel_slab(t)?);
            for u in t..t + WINDOW {
                frames.push(&clip.frames[u]);
                masked_imgs.push(mask_frame(&clip.frames[u], mask)?);
                slabs.push(clip.mel_slab(u)?);
            }
        }
        let refs: Vec<&Image> = vec![&clip.frames[reference]; frames.len()];
        let mrefs: Vec<&Image> = masked_imgs.iter().collect();
        let srefs: Vec<&MelSlab> = slabs.iter().collect();
        let wrefs: Vec<&MelSlab> = wslabs.iter().collect();
        Ok(Self {
            targets: stack(&frames),
            masked: stack(&mrefs),
            refs: stack(&refs),
            slabs: slab_tensor(&srefs),
            window_slabs: slab_tensor(&wrefs),
            clip: clip_index,
            starts: starts.to_vec(),
            reference,
        })
    }

    /// Seeded draw: one clip, `windows` target windows and one reference frame.
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        clips: &[VideoClip],
        windows: usize,
        mask: &UMask,
    ) -> Result<Self> {
        let c = rng.random_range(0..clips.len());
        let clip = &clips[c];
        let starts: Vec<usize> = (0..windows)
            .map(|_| rng.random_range(0..=clip.len() - WINDOW))
            .collect();
        let reference = rng.random_range(0..clip.len());
        Self::build(c, clip, &starts, reference, mask)
    }

    pub fn len(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoder and generator outputs for a batch.
pub struct Forward<'t, T: Real> {
    pub fake: Var<'t, T>,
    pub f_f: Var<'t, T>,
    pub f_a: Var<'t, T>,
    pub delta_w: Option<Vec<Var<'t, T>>>,
}

/// Encode, mask (unless disabled) and generate. `delta_w` supplies optional
/// per-layer style offsets.
pub fn forward<'t, T: Real>(
    cfg: &ModelConfig,
    p: &Bound<'t, T>,
    masked: Var<'t, T>,
    refs: Var<'t, T>,
    slabs: Var<'t, T>,
    masking: bool,
    mask: &UMask,
    delta_w: Option<&dyn Fn(Var<'t, T>) -> Result<Vec<Var<'t, T>>>>,
) -> Result<Forward<'t, T>> {
    let (pyr, f_f) = encode_face(cfg, p, masked, refs)?;
    let f_a = encode_audio(cfg, p, slabs)?;
    let pyr = if masking { mask_pyramid(pyr, mask)? } else { pyr.pass_through()? };
    let w = style_vector(cfg, f_a, f_f);
    let dw = delta_w.map(|f| f(f_f)).transpose()?;
    let style = match &dw {
        None => StyleState::shared(w),
        Some(d) => StyleState::with_offsets(w, d.clone()),
    };
    let fake = generate(cfg, p, &pyr, &style)?;
    Ok(Forward {
        fake,
        f_f,
        f_a,
        delta_w: dw,
    })
}

/// `−mean cos(S_v(fake windows), S_a(slabs))`.
pub fn sync_loss<'t, T: Real>(
    cfg: &ModelConfig,
    sync: &Bound<'t, T>,
    fake: Var<'t, T>,
    window_slabs: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let v = syncnet::embed_visual(cfg, sync, window_input(fake)?)?;
    let a = syncnet::embed_audio(sync, window_slabs)?;
    Ok(-cosine_rows(v, a).mean())
}

/// Receives the loss stream and checkpoints from a training run.
pub trait TrainObserver {
    fn on_step(&mut self, _losses: &LossBreakdown) -> Result<()> {
        Ok(())
    }

    /// Periodic snapshot; `aborted` is set when the run is about to stop on
    /// a non-finite loss.
    fn on_checkpoint(&mut self, _step: usize, _params: &ParamStore<f32>, _aborted: bool) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Collects the loss stream in memory.
#[derive(Debug, Default)]
pub struct History(pub Vec<LossBreakdown>);

impl TrainObserver for History {
    fn on_step(&mut self, losses: &LossBreakdown) -> Result<()> {
        self.0.push(*losses);
        Ok(())
    }
}

fn is_encoder(name: &str) -> bool {
    name.starts_with(&format!("{FACE_PREFIX}.")) || name.starts_with(&format!("{AUDIO_PREFIX}."))
}

fn is_generator(name: &str) -> bool {
    name.starts_with(&format!("{GEN_PREFIX}."))
}

fn is_disc(name: &str) -> bool {
    name.starts_with(&format!("{DISC_PREFIX}."))
}

fn split_grads(
    grads: BTreeMap<String, Tensor<f32>>,
    pred: impl Fn(&str) -> bool,
) -> (BTreeMap<String, Tensor<f32>>, BTreeMap<String, Tensor<f32>>) {
    grads.into_iter().partition(|(k, _)| pred(k))
}

/// Optimizers for one adversarial training run.
pub struct Optimizers {
    pub enc: Adam<f32>,
    pub gen: Adam<f32>,
    pub disc: Adam<f32>,
}

impl Optimizers {
    pub fn new(tc: &TrainConfig) -> Self {
        Self {
            enc: Adam::new(tc.lr_enc, tc.beta1, tc.beta2),
            gen: Adam::new(tc.lr_g, tc.beta1, tc.beta2),
            disc: Adam::new(tc.lr_d, tc.beta1, tc.beta2),
        }
    }
}

/// One discriminator update on `real` vs detached `fake`; returns
/// `(l_adv_d, r1)`.
pub fn discriminator_step(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    params: &mut ParamStore<f32>,
    opt: &mut Adam<f32>,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    step: usize,
) -> Result<(f64, Option<f64>)> {
    let tape = Tape::new();
    let b = params.bind(&tape, is_disc);
    let lr = discriminate(cfg, &b, tape.constant(real.clone()));
    let lf = discriminate(cfg, &b, tape.constant(fake.clone()));
    let mut loss = d_logistic_loss(lr, lf)?;
    let l_adv_d = loss.item() as f64;
    let mut r1 = None;
    if tc.r1_gamma > 0.0 && step % tc.r1_interval == 0 {
        let x = tape.leaf(real.clone());
        let pen = r1_penalty(cfg, &b, x, tc.r1_gamma);
        r1 = Some(pen.item() as f64);
        loss = loss + pen.scale(tc.r1_interval as f64);
    }
    let grads = Trainables::from_bound(&b, is_disc).grads(loss);
    opt.step(params, &grads);
    Ok((l_adv_d, r1))
}

/// Trains encoders, generator and discriminator from a seeded
/// initialization. `sync` holds frozen SyncNet parameters and is required
/// when `λ_s > 0`.
pub fn train_generalized(
    cfg: &ModelConfig,
    clips: &[VideoClip],
    sync: Option<&ParamStore<f32>>,
    tc: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    tc.validate()?;
    if tc.lambda_sync > 0.0 && sync.is_none() {
        return Err(Error::Config(
            "lambda_sync > 0 requires a trained SyncNet checkpoint".into(),
        ));
    }
    if clips.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for (i, c) in clips.iter().enumerate() {
        if c.len() < WINDOW {
            return Err(Error::InvalidArgument(format!(
                "clip {i} has {} frames, at least {WINDOW} required",
                c.len()
            )));
        }
        if c.size() != cfg.image_size {
            return Err(Error::Shape(format!(
                "clip {i} is {0}×{0}, model expects {1}×{1}",
                c.size(),
                cfg.image_size
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut params = init_model(cfg, &mut rng);
    let extractor = RandomConvExtractor::<f32>::new(tc.n_vgg)?;
    let mask = build_umask(cfg.image_size)?;
    let mut opt = Optimizers::new(tc);
    for step in 0..tc.steps {
        let batch = Batch::<f32>::sample(&mut rng, clips, tc.windows_per_step, &mask)?;
        let losses = match generator_step(cfg, tc, &mut params, &mut opt, sync, &extractor, &mask, &batch, step) {
            Ok(l) => l,
            Err(e @ Error::NonFinite(_)) => {
                observer.on_checkpoint(step, &params, true)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        observer.on_step(&losses)?;
        if tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 {
            observer.on_checkpoint(step + 1, &params, false)?;
        }
    }
    Ok(params)
}

/// Generator-side objective for one batch: the weighted sum of the
/// adversarial, reconstruction and sync terms plus its logged breakdown.
pub struct GObjective<'t> {
    pub total: Var<'t, f32>,
    pub record: LossBreakdown,
    pub forward: Forward<'t, f32>,
}

/// Builds the generator objective on `p`, which must hold encoder, generator
/// and discriminator entries; `sync` is bound frozen on the same tape.
#[allow(clippy::too_many_arguments)]
pub fn g_objective<'t>(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    tape: &'t Tape<f32>,
    p: &Bound<'t, f32>,
    sync: Option<&ParamStore<f32>>,
    extractor: &dyn FeatureExtractor<f32>,
    mask: &UMask,
    batch: &Batch<f32>,
    step: usize,
    delta_w: Option<&dyn Fn(Var<'t, f32>) -> Result<Vec<Var<'t, f32>>>>,
) -> Result<GObjective<'t>> {
    let fwd = forward(
        cfg,
        p,
        tape.constant(batch.masked.clone()),
        tape.constant(batch.refs.clone()),
        tape.constant(batch.slabs.clone()),
        tc.masking,
        mask,
        delta_w,
    )?;
    let target = tape.constant(batch.targets.clone());
    let l_rec = reconstruction_loss(fwd.fake, target, extractor)?;
    let l_sync = match sync {
        Some(sp) => {
            let sb = sp.bind(tape, |_| false);
            sync_loss(cfg, &sb, fwd.fake, tape.constant(batch.window_slabs.clone()))?
        }
        None => tape.scalar(0.0),
    };
    let l_adv_g = if tc.adversarial {
        g_nonsat_loss(discriminate(cfg, p, fwd.fake))?
    } else {
        tape.scalar(0.0)
    };
    let total = l_adv_g + l_rec.scale(tc.lambda_rec) + l_sync.scale(tc.lambda_sync);
    let mut record = LossBreakdown {
        step,
        l_rec: l_rec.item() as f64,
        l_adv_g: l_adv_g.item() as f64,
        l_adv_d: 0.0,
        l_sync: l_sync.item() as f64,
        r1: None,
        total_g: 0.0,
    };
    record.total_g = record.recompute_total(tc.lambda_rec, tc.lambda_sync);
    if !record.is_finite() {
        return Err(Error::NonFinite(format!("generator loss at step {step}")));
    }
    Ok(GObjective {
        total,
        record,
        forward: fwd,
    })
}

/// Generator/encoder update followed by the discriminator update.
#[allow(clippy::too_many_arguments)]
fn generator_step(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    params: &mut ParamStore<f32>,
    opt: &mut Optimizers,
    sync: Option<&ParamStore<f32>>,
    extractor: &dyn FeatureExtractor<f32>,
    mask: &UMask,
    batch: &Batch<f32>,
    step: usize,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let trainable = |n: &str| is_encoder(n) || is_generator(n);
    let b = params.bind(&tape, trainable);
    let obj = g_objective(cfg, tc, &tape, &b, sync, extractor, mask, batch, step, None)?;
    let mut rec = obj.record;
    let fake = obj.forward.fake.value().as_ref().clone();
    let grads = Trainables::from_bound(&b, trainable).grads(obj.total);
    let (enc_g, gen_g) = split_grads(grads, is_encoder);
    opt.enc.step(params, &enc_g);
    opt.gen.step(params, &gen_g);
    if tc.adversarial {
        let (d, r1) = discriminator_step(cfg, tc, params, &mut opt.disc, &batch.targets, &fake, step)?;
        rec.l_adv_d = d;
        rec.r1 = r1;
        if !rec.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss at step {step}")));
        }
    }
    Ok(rec)
}

/// Frames generated for `batch` by frozen parameters, `[N, 3, S, S]`.
pub fn render_batch(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    batch: &Batch<f32>,
    masking: bool,
) -> Result<Tensor<f32>> {
    let mask = build_umask(cfg.image_size)?;
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let fwd = forward(
        cfg,
        &b,
        tape.constant(batch.masked.clone()),
        tape.constant(batch.refs.clone()),
        tape.constant(batch.slabs.clone()),
        masking,
        &mask,
        None,
    )?;
    Ok(fwd.fake.value().as_ref().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{preset_speakers, synthesize_clip};
    use crate::gradcheck;

    #[test]
    fn reconstruction_loss_examples() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::randn(&[2, 3, 8, 8], 0.2, &mut rng).map(|v| v + 0.5);
        let target = tape.constant(t.clone());
        let zero = reconstruction_loss(target, target, &IdentityTaps(0)).unwrap();
        assert_eq!(zero.item(), 0.0);
        let pred = tape.constant(t.map(|v| v + 0.1));
        let l1 = reconstruction_loss(pred, target, &IdentityTaps(0)).unwrap().item();
        assert!((l1 - 0.1).abs() < 1e-12);
        let l3 = reconstruction_loss(pred, target, &IdentityTaps(2)).unwrap().item();
        assert!((l3 - 0.3).abs() < 1e-12);
        let conv = RandomConvExtractor::<f64>::new(3).unwrap();
        assert_eq!(reconstruction_loss(target, target, &conv).unwrap().item(), 0.0);
        let other = tape.constant(Tensor::zeros(&[2, 3, 4, 4]));
        assert!(reconstruction_loss(other, target, &conv).is_err());
        assert!(RandomConvExtractor::<f64>::new(9).is_err());
    }

    #[test]
    fn adversarial_loss_examples() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[4, 1]));
        let d = d_logistic_loss(z, z).unwrap().item();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g_nonsat_loss(z).unwrap().item() - 2f64.ln()).abs() < 1e-12);
        let hi = tape.constant(Tensor::full(&[4, 1], LOGIT_LIMIT));
        let lo = tape.constant(Tensor::full(&[4, 1], -LOGIT_LIMIT));
        assert!(d_logistic_loss(hi, lo).unwrap().item() < 1e-12);
        let nan = tape.constant(Tensor::full(&[4, 1], f64::NAN));
        assert!(matches!(d_logistic_loss(nan, z), Err(Error::NonFinite(_))));
    }

    fn disc_params(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        init_discriminator(cfg, &mut ChaCha8Rng::seed_from_u64(seed), &mut p);
        p
    }

    #[test]
    fn r1_vanishes_for_a_constant_discriminator() {
        let cfg = ModelConfig::tiny(16);
        let mut p = disc_params(&cfg, 1);
        let w = p.get("disc.out.weight").unwrap().shape().to_vec();
        p.insert("disc.out.weight", Tensor::zeros(&w));
        let tape = Tape::new();
        let b = p.bind(&tape, |_| true);
        let x = tape.leaf(Tensor::randn(&[2, 3, 16, 16], 0.3, &mut ChaCha8Rng::seed_from_u64(2)));
        assert_eq!(r1_penalty(&cfg, &b, x, 1.0).item(), 0.0);
    }

    #[test]
    fn r1_matches_finite_differences_of_the_input_gradient() {
        let cfg = ModelConfig::tiny(16);
        let p = disc_params(&cfg, 3);
        let x = Tensor::randn(&[2, 3, 16, 16], 0.3, &mut ChaCha8Rng::seed_from_u64(4)).map(|v| v + 0.5);
        // value: compare with a central-difference estimate of ‖∇_x D‖² along a few coordinates
        let tape = Tape::new();
        let b = p.bind(&tape, |_| false);
        let xv = tape.leaf(x.clone());
        let pen = r1_penalty(&cfg, &b, xv, 2.0).item();
        let logits_sum = |t: &Tensor<f64>| {
            let tape = Tape::new();
            let b = p.bind(&tape, |_| false);
            discriminate(&cfg, &b, tape.constant(t.clone())).sum().item()
        };
        let mut sq = 0.0;
        let eps = 1e-5;
        for i in 0..x.len() {
            let mut a = x.clone();
            let mut c = x.clone();
            a.data_mut()[i] += eps;
            c.data_mut()[i] -= eps;
            sq += ((logits_sum(&a) - logits_sum(&c)) / (2.0 * eps)).powi(2);
        }
        let want = 0.5 * 2.0 * sq / 2.0;
        assert!((pen - want).abs() / want < 1e-5, "{pen} vs {want}");

        // the penalty's own parameter gradient is exact (second-order path)
        let names: Vec<String> = p.names().cloned().collect();
        let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
        inputs.push(x);
        let report = gradcheck::check(&inputs, 1e-6, 4, move |tape, vars| {
            let mut b = Bound::new();
            for (n, v) in names.iter().zip(vars) {
                b.insert(n.clone(), *v);
            }
            let real = tape.leaf(vars[names.len()].value().as_ref().clone());
            r1_penalty(&cfg, &b, real, 1.0)
        });
        assert!(report.rel_error < 1e-4, "{report:?}");
    }

    fn tiny_clips() -> Vec<VideoClip> {
        let [a, b] = preset_speakers();
        vec![
            synthesize_clip(&a, 0.6, 1, 16).unwrap(),
            synthesize_clip(&b, 0.6, 2, 16).unwrap(),
        ]
    }

    fn tiny_sync(cfg: &ModelConfig) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        syncnet::init_syncnet(cfg, &mut ChaCha8Rng::seed_from_u64(7), &mut p);
        p
    }

    fn tiny_tc(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            r1_interval: 2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn loss_stream_decomposes_and_is_deterministic() {
        let cfg = ModelConfig::tiny(16);
        let clips = tiny_clips();
        let sync = tiny_sync(&cfg);
        let tc = tiny_tc(4);
        let mut h1 = History::default();
        let p1 = train_generalized(&cfg, &clips, Some(&sync), &tc, &mut h1).unwrap();
        let mut h2 = History::default();
        let p2 = train_generalized(&cfg, &clips, Some(&sync), &tc, &mut h2).unwrap();
        assert_eq!(h1.0, h2.0);
        assert_eq!(p1, p2);
        assert_eq!(h1.0.len(), 4);
        for r in &h1.0 {
            assert!(r.is_finite());
            assert!((r.total_g - r.recompute_total(10.0, 1.0)).abs() < 1e-6);
        }
        assert!(h1.0[0].r1.is_some() && h1.0[1].r1.is_none());
    }

    #[test]
    fn zero_steps_equal_initialization_and_sync_is_untouched() {
        let cfg = ModelConfig::tiny(16);
        let clips = tiny_clips();
        let sync = tiny_sync(&cfg);
        let before = sync.clone();
        let p = train_generalized(&cfg, &clips, Some(&sync), &tiny_tc(0), &mut NoopObserver).unwrap();
        assert_eq!(p, init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(5)));
        train_generalized(&cfg, &clips, Some(&sync), &tiny_tc(2), &mut NoopObserver).unwrap();
        assert_eq!(sync, before);
    }

    #[test]
    fn sync_weight_zero_and_missing_syncnet() {
        let cfg = ModelConfig::tiny(16);
        let clips = tiny_clips();
        let sync = tiny_sync(&cfg);
        let tc = TrainConfig {
            lambda_sync: 0.0,
            ..tiny_tc(2)
        };
        let mut h = History::default();
        train_generalized(&cfg, &clips, Some(&sync), &tc, &mut h).unwrap();
        for r in &h.0 {
            assert!(r.l_sync != 0.0);
            assert!((r.total_g - (r.l_adv_g + 10.0 * r.l_rec)).abs() < 1e-6);
        }
        let err = train_generalized(&cfg, &clips, None, &tiny_tc(1), &mut NoopObserver).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        train_generalized(&cfg, &clips, None, &tc, &mut NoopObserver).unwrap();
    }

    #[test]
    fn config_round_trip() {
        let tc = TrainConfig {
            lambda_sync: 0.0,
            masking: false,
            seed: 42,
            ..Default::default()
        };
        assert_eq!(TrainConfig::from_kv(&tc.to_kv()).unwrap(), tc);
        let mut kv = tc.to_kv();
        kv.insert("train.bogus".into(), "1".into());
        assert!(TrainConfig::from_kv(&kv).is_err());
    }

    struct Failing;
    impl FeatureExtractor<f32> for Failing {
        fn taps<'t>(&self, x: Var<'t, f32>) -> Vec<Var<'t, f32>> {
            vec![x.scale(f64::NAN)]
        }
    }

    #[test]
    fn non_finite_loss_checkpoints_and_aborts() {
        struct Rec(Vec<(usize, bool)>);
        impl TrainObserver for Rec {
            fn on_checkpoint(&mut self, step: usize, _: &ParamStore<f32>, aborted: bool) -> Result<()> {
                self.0.push((step, aborted));
                Ok(())
            }
        }
        let cfg = ModelConfig::tiny(16);
        let clips = tiny_clips();
        let tc = TrainConfig {
            lambda_sync: 0.0,
            ..tiny_tc(3)
        };
        let mut params = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let mut opt = Optimizers::new(&tc);
        let mask = build_umask(16).unwrap();
        let batch = Batch::sample(&mut ChaCha8Rng::seed_from_u64(0), &clips, 1, &mask).unwrap();
        let r = generator_step(&cfg, &tc, &mut params, &mut opt, None, &Failing, &mask, &batch, 0);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        let mut rec = Rec(vec![]);
        let tc = TrainConfig {
            checkpoint_every: 1,
            ..tc
        };
        train_generalized(&cfg, &clips, None, &tc, &mut rec).unwrap();
        assert_eq!(rec.0, vec![(1, false), (2, false), (3, false)]);
    }
}

