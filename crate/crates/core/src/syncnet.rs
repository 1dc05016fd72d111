//! Audio-visual synchrony scorer.
//!
//! The visual tower reads the lower halves of five consecutive frames stacked
//! on channels (`[N, 15, S/2, S]`), the audio tower the 80×16 mel slab that
//! covers the same 0.2 s. Alignment is scored by the cosine of the two
//! embeddings; training uses binary cross-entropy on `(cos + 1) / 2`.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Bound, Tape, Var};
use crate::codec::{audio_tower, init_audio_tower, slab_tensor};
use crate::config::ModelConfig;
use crate::data::{Image, Mel, MelSlab, VideoClip};
use crate::error::{Error, Result};
use crate::nn::{self, conv, init_conv, init_linear, linear, lrelu, Adam, ParamStore, Trainables};
use crate::tensor::{Real, Tensor};

pub const SYNC_PREFIX: &str = "sync";
pub const WINDOW: usize = 5;
/// Offsets scanned by [`sync_confidence`], in frames, each side.
pub const MAX_OFFSET: usize = 15;
/// Minimum distance of an in-clip negative from the aligned position.
pub const MIN_NEGATIVE_OFFSET: usize = 5;
const NORM_EPS: f64 = 1e-12;
const BCE_CLAMP: f64 = 1e-6;

fn visual_downsamples(cfg: &ModelConfig) -> usize {
    // lower half is S/2 high; stop at height 4
    (cfg.image_size / 2).trailing_zeros() as usize - 2
}

fn visual_width(cfg: &ModelConfig, stage: usize) -> usize {
    (cfg.audio_base_channels << stage).min(cfg.audio_base_channels * 4)
}

pub fn init_syncnet<T: Real, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    rng: &mut R,
    store: &mut ParamStore<T>,
) {
    let v = format!("{SYNC_PREFIX}.visual");
    init_conv(store, rng, &format!("{v}.stem"), visual_width(cfg, 0), 3 * WINDOW, 3, true);
    let downs = visual_downsamples(cfg);
    for i in 0..downs {
        init_conv(
            store,
            rng,
            &format!("{v}.down{i}"),
            visual_width(cfg, i + 1),
            visual_width(cfg, i),
            3,
            true,
        );
    }
    let flat = visual_width(cfg, downs) * 4 * 8;
    init_linear(store, rng, &format!("{v}.out"), flat, cfg.sync_dim, Some(0.0));
    init_audio_tower(cfg, rng, store, &format!("{SYNC_PREFIX}.audio"), cfg.sync_dim);
}

/// Visual embeddings for `[N, 15, S/2, S]` inputs in `[0, 1]`.
pub fn embed_visual<'t, T: Real>(
    cfg: &ModelConfig,
    p: &Bound<'t, T>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let s = x.shape();
    let want = [3 * WINDOW, cfg.image_size / 2, cfg.image_size];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::Shape(format!(
            "visual input must be [N, {}, {}, {}], got {s:?}",
            want[0], want[1], want[2]
        )));
    }
    let n = s[0];
    let v = format!("{SYNC_PREFIX}.visual");
    let mut h = lrelu(conv(p, &format!("{v}.stem"), x.add_scalar(-0.5), nn::SAME3));
    for i in 0..visual_downsamples(cfg) {
        h = lrelu(conv(p, &format!("{v}.down{i}"), h, nn::DOWN3));
    }
    let flat = h.numel() / n;
    Ok(linear(p, &format!("{v}.out"), h.reshape(&[n, flat])))
}

/// Audio embeddings for `[N, 1, 80, 16]` slabs.
pub fn embed_audio<'t, T: Real>(p: &Bound<'t, T>, slabs: Var<'t, T>) -> Result<Var<'t, T>> {
    audio_tower(p, &format!("{SYNC_PREFIX}.audio"), slabs)
}

/// Re-packs `[5·N, 3, S, S]` consecutive frames into the visual input
/// `[N, 15, S/2, S]` (lower halves, frames stacked on channels).
pub fn window_input<'t, T: Real>(frames: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = frames.shape();
    if s.len() != 4 || s[0] % WINDOW != 0 || s[1] != 3 {
        return Err(Error::Shape(format!(
            "expected [5·N, 3, S, S] frames, got {s:?}"
        )));
    }
    let half = s[2] / 2;
    let lower = frames.narrow(2, half, half);
    Ok(lower.reshape(&[s[0] / WINDOW, 3 * WINDOW, half, s[3]]))
}

/// Visual input tensor `[1, 15, S/2, S]` for frames `t..t+5`.
pub fn window_tensor<T: Real>(frames: &[Image], t: usize) -> Result<Tensor<T>> {
    if t + WINDOW > frames.len() {
        return Err(Error::OutOfRange(format!(
            "window at {t} exceeds {} frames",
            frames.len()
        )));
    }
    let s = frames[t].width();
    let half = s / 2;
    let mut data = Vec::with_capacity(3 * WINDOW * half * s);
    for f in &frames[t..t + WINDOW] {
        for c in 0..3 {
            data.extend(f.plane(c)[half * s..].iter().map(|&v| T::of(v as f64)));
        }
    }
    Tensor::from_vec(&[1, 3 * WINDOW, half, s], data)
}

/// Row-wise cosine of `[N, d]` embeddings, shape `[N, 1]`.
pub fn cosine_rows<'t, T: Real>(v: Var<'t, T>, a: Var<'t, T>) -> Var<'t, T> {
    let n = v.shape()[0];
    let dot = (v * a).sum_to(&[n, 1]);
    let nv = v.square().sum_to(&[n, 1]).add_scalar(NORM_EPS);
    let na = a.square().sum_to(&[n, 1]).add_scalar(NORM_EPS);
    dot * (nv * na).rsqrt()
}

/// Cosine similarity of two embedding vectors; the lip-sync loss is its
/// negation.
pub fn sync_cosine(v: &[f64], a: &[f64]) -> Result<f64> {
    if v.len() != a.len() {
        return Err(Error::Shape(format!(
            "embedding sizes differ: {} vs {}",
            v.len(),
            a.len()
        )));
    }
    if v.iter().chain(a).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sync embedding".into()));
    }
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nv == 0.0 || na == 0.0 {
        return Err(Error::InvalidArgument(
            "zero-norm sync embedding (collapsed encoder)".into(),
        ));
    }
    let dot: f64 = v.iter().zip(a).map(|(x, y)| x * y).sum();
    Ok((dot / (nv * na)).clamp(-1.0, 1.0))
}

/// Mean binary cross-entropy of `p = (cos + 1) / 2` against `labels` (1 for
/// aligned pairs).
pub fn bce_over_cosine<'t, T: Real>(
    v: Var<'t, T>,
    a: Var<'t, T>,
    labels: &[f64],
) -> Var<'t, T> {
    let n = labels.len();
    let p = cosine_rows(v, a)
        .add_scalar(1.0)
        .scale(0.5)
        .clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let y = Tensor::from_vec(&[n, 1], labels.iter().map(|&l| T::of(l)).collect()).expect("labels");
    let ny = y.map(|l| T::one() - l);
    let pos = p.ln().mul_const(y);
    let neg = p.scale(-1.0).add_scalar(1.0).ln().mul_const(ny);
    -(pos + neg).mean()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Randomly permute labels within each batch (chance-level sanity runs).
    pub shuffle_labels: bool,
}

impl Default for SyncTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
            shuffle_labels: false,
        }
    }
}

impl SyncTrainConfig {
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        [
            ("sync.steps", self.steps.to_string()),
            ("sync.batch_size", self.batch_size.to_string()),
            ("sync.lr", self.lr.to_string()),
            ("sync.seed", self.seed.to_string()),
            ("sync.shuffle_labels", self.shuffle_labels.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Reads `sync.*` keys over the defaults.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in kv {
            let Some(key) = k.strip_prefix("sync.") else { continue };
            let bad = || Error::Config(format!("{k}: cannot parse `{v}`"));
            match key {
                "steps" => c.steps = v.parse().map_err(|_| bad())?,
                "batch_size" => c.batch_size = v.parse().map_err(|_| bad())?,
                "lr" => c.lr = v.parse().map_err(|_| bad())?,
                "seed" => c.seed = v.parse().map_err(|_| bad())?,
                "shuffle_labels" => c.shuffle_labels = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        if c.batch_size == 0 {
            return Err(Error::Config("sync.batch_size must be positive".into()));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct SyncTrainResult {
    pub params: ParamStore<f32>,
    pub losses: Vec<f64>,
}

impl SyncTrainResult {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// One training or evaluation pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncPair {
    pub clip: usize,
    pub frame: usize,
    pub audio_clip: usize,
    pub audio_frame: usize,
}

impl SyncPair {
    pub fn aligned(&self) -> bool {
        self.clip == self.audio_clip && self.frame == self.audio_frame
    }
}

fn check_clips(clips: &[VideoClip]) -> Result<()> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    for (i, c) in clips.iter().enumerate() {
        if c.len() < WINDOW {
            return Err(Error::InvalidArgument(format!(
                "clip {i} has {} frames, at least {WINDOW} required",
                c.len()
            )));
        }
    }
    Ok(())
}

/// A frame position in clip `clip` at least [`MIN_NEGATIVE_OFFSET`] away
/// from `t`, if the clip is long enough to have one.
fn far_frame<R: Rng + ?Sized>(rng: &mut R, clip: &VideoClip, t: usize) -> Option<usize> {
    let last = clip.len() - WINDOW;
    let candidates: Vec<usize> = (0..=last).filter(|&u| u.abs_diff(t) >= MIN_NEGATIVE_OFFSET).collect();
    candidates.choose(rng).copied()
}

/// Aligned pair with probability 1/2; otherwise a negative drawn half the
/// time from a distant position in the same clip and half the time from
/// another clip.
pub fn sample_pair<R: Rng + ?Sized>(rng: &mut R, clips: &[VideoClip]) -> SyncPair {
    let clip = rng.random_range(0..clips.len());
    let frame = rng.random_range(0..=clips[clip].len() - WINDOW);
    let aligned = SyncPair {
        clip,
        frame,
        audio_clip: clip,
        audio_frame: frame,
    };
    if rng.random::<bool>() {
        return aligned;
    }
    let same_clip = rng.random::<bool>() || clips.len() == 1;
    if same_clip {
        if let Some(u) = far_frame(rng, &clips[clip], frame) {
            return SyncPair {
                audio_frame: u,
                ..aligned
            };
        }
    }
    let mut other = rng.random_range(0..clips.len());
    if clips.len() > 1 {
        while other == clip {
            other = rng.random_range(0..clips.len());
        }
    }
    let u = rng.random_range(0..=clips[other].len() - WINDOW);
    if other == clip && u == frame {
        // single short clip: no valid negative exists, fall back to aligned
        return aligned;
    }
    SyncPair {
        audio_clip: other,
        audio_frame: u,
        ..aligned
    }
}

fn batch_tensors<T: Real>(clips: &[VideoClip], pairs: &[SyncPair]) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut vis = Vec::new();
    let mut slabs = Vec::with_capacity(pairs.len());
    for p in pairs {
        let v = window_tensor::<T>(&clips[p.clip].frames, p.frame)?;
        vis.extend_from_slice(v.data());
        slabs.push(clips[p.audio_clip].mel_slab(p.audio_frame)?);
    }
    let s = clips[pairs[0].clip].size();
    let v = Tensor::from_vec(&[pairs.len(), 3 * WINDOW, s / 2, s], vis)?;
    let refs: Vec<&MelSlab> = slabs.iter().collect();
    Ok((v, slab_tensor(&refs)))
}

/// Cosines for a batch of pairs under frozen parameters.
pub fn score_pairs(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    clips: &[VideoClip],
    pairs: &[SyncPair],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(32) {
        let tape = Tape::new();
        let b = params.bind(&tape, |_| false);
        let (v, a) = batch_tensors::<f32>(clips, chunk)?;
        let ev = embed_visual(cfg, &b, tape.constant(v))?;
        let ea = embed_audio(&b, tape.constant(a))?;
        let c = cosine_rows(ev, ea).value();
        out.extend(c.data().iter().map(|&x| x as f64));
    }
    Ok(out)
}

/// Trains the synchrony scorer from a seeded initialization.
pub fn train_syncnet(
    cfg: &ModelConfig,
    clips: &[VideoClip],
    tc: &SyncTrainConfig,
) -> Result<SyncTrainResult> {
    cfg.validate()?;
    check_clips(clips)?;
    if clips.iter().any(|c| c.size() != cfg.image_size) {
        return Err(Error::Shape(format!(
            "clips must be {0}×{0} crops",
            cfg.image_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut params = ParamStore::new();
    init_syncnet(cfg, &mut rng, &mut params);
    let mut opt = Adam::new(tc.lr, 0.9, 0.999);
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let pairs: Vec<SyncPair> = (0..tc.batch_size).map(|_| sample_pair(&mut rng, clips)).collect();
        let mut labels: Vec<f64> = pairs.iter().map(|p| if p.aligned() { 1.0 } else { 0.0 }).collect();
        if tc.shuffle_labels {
            labels = (0..labels.len()).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        }
        let (v, a) = batch_tensors::<f32>(clips, &pairs)?;
        let tape = Tape::new();
        let b = params.bind(&tape, |_| true);
        let ev = embed_visual(cfg, &b, tape.constant(v))?;
        let ea = embed_audio(&b, tape.constant(a))?;
        let loss = bce_over_cosine(ev, ea, &labels);
        let lv = loss.item() as f64;
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("sync loss at step {step}")));
        }
        let grads = Trainables::from_bound(&b, |_| true).grads(loss);
        opt.step(&mut params, &grads);
        losses.push(lv);
        if step % 100 == 0 {
            log::debug!("syncnet step {step} loss {lv:.4}");
        }
    }
    Ok(SyncTrainResult { params, losses })
}

/// Area under the ROC curve for positive vs negative scores (ties count ½).
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // rank-sum with averaged ranks for ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Aligned-vs-offset AUC: for `n` seeded windows, the aligned score against
/// the score with audio shifted by at least [`MIN_NEGATIVE_OFFSET`] frames
/// within the same clip.
pub fn offset_auc(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    clips: &[VideoClip],
    n: usize,
    seed: u64,
) -> Result<f64> {
    check_clips(clips)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut tries = 0;
    while pos.len() < n {
        tries += 1;
        if tries > 100 * n {
            return Err(Error::InvalidArgument(
                "clips too short for offset negatives".into(),
            ));
        }
        let clip = rng.random_range(0..clips.len());
        let frame = rng.random_range(0..=clips[clip].len() - WINDOW);
        let Some(u) = far_frame(&mut rng, &clips[clip], frame) else { continue };
        pos.push(SyncPair {
            clip,
            frame,
            audio_clip: clip,
            audio_frame: frame,
        });
        neg.push(SyncPair {
            clip,
            frame,
            audio_clip: clip,
            audio_frame: u,
        });
    }
    let sp = score_pairs(cfg, params, clips, &pos)?;
    let sn = score_pairs(cfg, params, clips, &neg)?;
    Ok(roc_auc(&sp, &sn))
}

/// Clip-level confidence: for every window, max minus mean cosine over audio
/// offsets in `[-15, 15]` frames, averaged over windows.
pub fn sync_confidence_frames(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    frames: &[Image],
    mel: &Mel,
) -> Result<f64> {
    let need = WINDOW + 2 * MAX_OFFSET;
    if frames.len() < need {
        return Err(Error::InvalidArgument(format!(
            "sync confidence needs at least {need} frames, got {}",
            frames.len()
        )));
    }
    let last = frames.len() - WINDOW - MAX_OFFSET;
    let windows: Vec<usize> = (MAX_OFFSET..=last).collect();
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let mut vis = Vec::new();
    for &t in &windows {
        vis.extend(window_tensor::<f32>(frames, t)?.into_data());
    }
    let s = frames[0].width();
    let vt = Tensor::from_vec(&[windows.len(), 3 * WINDOW, s / 2, s], vis)?;
    let ev = embed_visual(cfg, &b, tape.constant(vt))?.value();
    let slabs: Vec<MelSlab> = (0..=frames.len() - WINDOW).map(|t| mel.slab_at_frame(t)).collect();
    let refs: Vec<&MelSlab> = slabs.iter().collect();
    let ea = embed_audio(&b, tape.constant(slab_tensor(&refs)))?.value();
    let d = cfg.sync_dim;
    let row = |t: &Tensor<f32>, i: usize| -> Vec<f64> {
        t.data()[i * d..(i + 1) * d].iter().map(|&x| x as f64).collect()
    };
    let mut total = 0.0;
    for (wi, &t) in windows.iter().enumerate() {
        let v = row(&ev, wi);
        let mut cos = Vec::with_capacity(2 * MAX_OFFSET + 1);
        for u in t - MAX_OFFSET..=t + MAX_OFFSET {
            cos.push(sync_cosine(&v, &row(&ea, u))?);
        }
        let max = cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = cos.iter().sum::<f64>() / cos.len() as f64;
        total += max - mean;
    }
    Ok(total / windows.len() as f64)
}

pub fn sync_confidence(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    clip: &VideoClip,
) -> Result<f64> {
    sync_confidence_frames(cfg, params, &clip.frames, &clip.mel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_clip, ToySpeakerSpec};
    use crate::gradcheck;

    fn speaker() -> ToySpeakerSpec {
        ToySpeakerSpec {
            identity_id: 1,
            face_hue: 0.08,
            face_width_frac: 0.62,
            mouth_gain: 0.8,
            mouth_rest_open: 0.02,
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((sync_cosine(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(sync_cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((sync_cosine(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 0.96).abs() < 1e-12);
        assert!(sync_cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(sync_cosine(&[1.0], &[1.0, 0.0]).is_err());
        let a = [0.3, -1.2, 2.0];
        let v = [1.5, 0.2, -0.7];
        let base = sync_cosine(&v, &a).unwrap();
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            assert!((sync_cosine(&scaled, &a).unwrap() - base).abs() < 1e-6);
        }
    }

    #[test]
    fn auc_reference_values() {
        assert_eq!(roc_auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(roc_auc(&[0.0, 1.0], &[2.0, 3.0]), 0.0);
        assert_eq!(roc_auc(&[1.0], &[1.0]), 0.5);
        // brute-force pair count
        let pos = [0.1, 0.5, 0.5, 0.9];
        let neg = [0.2, 0.5, 0.3];
        let mut wins = 0.0;
        for p in pos {
            for n in neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        assert!((roc_auc(&pos, &neg) - wins / 12.0).abs() < 1e-12);
    }

    #[test]
    fn window_input_matches_tensor_packing() {
        let clip = synthesize_clip(&speaker(), 0.4, 3, 16).unwrap();
        let direct = window_tensor::<f64>(&clip.frames, 2).unwrap();
        let refs: Vec<&Image> = clip.frames[2..7].iter().collect();
        let tape = Tape::new();
        let x = tape.constant(crate::data::stack::<f64>(&refs));
        let packed = window_input(x).unwrap().value();
        assert_eq!(packed.as_ref(), &direct);
        assert!(window_tensor::<f64>(&clip.frames, 6).is_err());
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let cfg = ModelConfig::tiny(16);
        let mut p = ParamStore::<f64>::new();
        init_syncnet(&cfg, &mut ChaCha8Rng::seed_from_u64(4), &mut p);
        let names: Vec<String> = p.names().cloned().collect();
        let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        inputs.push(Tensor::randn(&[3, 15, 8, 16], 0.3, &mut rng).map(|v| v + 0.5));
        inputs.push(Tensor::randn(&[3, 1, 80, 16], 1.0, &mut rng));
        let labels = [1.0, 0.0, 1.0];
        let report = gradcheck::check(&inputs, 1e-6, 6, move |_, vars| {
            let mut b = Bound::new();
            for (n, v) in names.iter().zip(vars) {
                b.insert(n.clone(), *v);
            }
            let k = names.len();
            let ev = embed_visual(&cfg, &b, vars[k]).unwrap();
            let ea = embed_audio(&b, vars[k + 1]).unwrap();
            bce_over_cosine(ev, ea, &labels)
        });
        assert!(report.rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn zero_steps_return_initialization() {
        let cfg = ModelConfig::tiny(16);
        let clips: Vec<VideoClip> = (0..2).map(|i| synthesize_clip(&speaker(), 0.8, i, 16).unwrap()).collect();
        let tc = SyncTrainConfig {
            steps: 0,
            seed: 9,
            ..Default::default()
        };
        let r = train_syncnet(&cfg, &clips, &tc).unwrap();
        let mut init = ParamStore::new();
        init_syncnet(&cfg, &mut ChaCha8Rng::seed_from_u64(9), &mut init);
        assert_eq!(r.params, init);
        assert!(r.final_loss().is_none());
    }

    #[test]
    fn training_is_seeded_and_rejects_short_clips() {
        let cfg = ModelConfig::tiny(16);
        let clips: Vec<VideoClip> = (0..3).map(|i| synthesize_clip(&speaker(), 0.8, i, 16).unwrap()).collect();
        let tc = SyncTrainConfig {
            steps: 3,
            batch_size: 4,
            seed: 1,
            ..Default::default()
        };
        let a = train_syncnet(&cfg, &clips, &tc).unwrap();
        let b = train_syncnet(&cfg, &clips, &tc).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.losses, b.losses);
        let mut short = clips[0].clone();
        short.frames.truncate(4);
        assert!(train_syncnet(&cfg, &[short], &tc).is_err());
    }

    #[test]
    fn negatives_respect_offset_rule() {
        let clips: Vec<VideoClip> = (0..3).map(|i| synthesize_clip(&speaker(), 1.2, i, 16).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut aligned = 0;
        let total = 2000;
        for _ in 0..total {
            let p = sample_pair(&mut rng, &clips);
            if p.aligned() {
                aligned += 1;
            } else if p.clip == p.audio_clip {
                assert!(p.frame.abs_diff(p.audio_frame) >= MIN_NEGATIVE_OFFSET);
            }
        }
        let frac = aligned as f64 / total as f64;
        assert!((0.45..0.55).contains(&frac), "{frac}");
    }

    #[test]
    fn constant_encoders_have_zero_confidence() {
        let cfg = ModelConfig::tiny(16);
        let mut p = ParamStore::<f32>::new();
        init_syncnet(&cfg, &mut ChaCha8Rng::seed_from_u64(2), &mut p);
        // zero the output projections' weights: embeddings reduce to biases
        for name in ["sync.visual.out.weight", "sync.audio.out.weight"] {
            let z = Tensor::zeros(p.get(name).unwrap().shape());
            p.insert(name, z);
        }
        for name in ["sync.visual.out.bias", "sync.audio.out.bias"] {
            let n = p.get(name).unwrap().len();
            p.insert(name, Tensor::from_vec(&[n], (0..n).map(|i| i as f32 + 1.0).collect()).unwrap());
        }
        let clip = synthesize_clip(&speaker(), 1.6, 3, 16).unwrap();
        let c = sync_confidence(&cfg, &p, &clip).unwrap();
        assert!(c.abs() < 1e-6, "{c}");
        let short = synthesize_clip(&speaker(), 1.2, 3, 16).unwrap();
        assert!(sync_confidence(&cfg, &p, &short).is_err());
    }
}
