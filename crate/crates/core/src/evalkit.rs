//! Frame and clip metrics: PSNR, SSIM, mouth landmark distance, identity
//! similarity under a pluggable embedder, and the toy mouth-opening probe.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Tape;
use crate::data::toy::MOUTH_RGB;
use crate::config::ModelConfig;
use crate::data::{build_umask, Image, Landmarks, VideoClip};
use crate::syncnet::{sync_confidence_frames, MAX_OFFSET, WINDOW};
use crate::error::{Error, Result};
use crate::nn::{self, conv, init_conv, lrelu, ParamStore};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Full mouth height at opening 1, as a fraction of the crop size.
pub const MOUTH_FULL_HEIGHT: f64 = 0.24;
/// RGB distance below which a pixel counts as mouth-coloured.
pub const MOUTH_COLOR_TOL: f64 = 0.25;

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Shape(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio on unit range, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_size(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gray(img: &Image) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0; w * h];
    for c in 0..3 {
        for (o, &v) in out.iter_mut().zip(img.plane(c)) {
            *o += v as f64 / 3.0;
        }
    }
    out
}

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `w×h` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = taps.iter().enumerate().map(|(i, t)| t * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = taps.iter().enumerate().map(|(i, t)| t * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean structural similarity of the channel-mean images over all valid
/// 11×11 Gaussian windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_size(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "frame {w}x{h} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )));
    }
    let (x, y) = (gray(a), gray(b));
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, w, h, &taps);
    let my = filter_valid(&y, w, h, &taps);
    let sxx = filter_valid(&prod(&x, &x), w, h, &taps);
    let syy = filter_valid(&prod(&y, &y), w, h, &taps);
    let sxy = filter_valid(&prod(&x, &y), w, h, &taps);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (m1, m2) = (mx[i], my[i]);
        let v1 = sxx[i] - m1 * m1;
        let v2 = syy[i] - m2 * m2;
        let c12 = sxy[i] - m1 * m2;
        total += ((2.0 * m1 * m2 + SSIM_C1) * (2.0 * c12 + SSIM_C2))
            / ((m1 * m1 + m2 * m2 + SSIM_C1) * (v1 + v2 + SSIM_C2));
    }
    Ok(total / mx.len() as f64)
}

/// Mean Euclidean distance (pixels) over all landmarks of all frames.
pub fn lmd(pred: &[Landmarks], gt: &[Landmarks]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "landmark sequences have {} and {} frames",
            pred.len(),
            gt.len()
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in p.iter().zip(g) {
            total += ((a[0] - b[0]) as f64).hypot((a[1] - b[1]) as f64);
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Maps a face crop to an identity feature vector.
pub trait FaceEmbedder {
    fn embed(&self, img: &Image) -> Result<Vec<f64>>;
}

/// Frozen, randomly initialised conv stack with spatially pooled features; a
/// stand-in for a pretrained face-recognition network.
#[derive(Debug, Clone)]
pub struct SurrogateEmbedder {
    params: ParamStore<f64>,
}

const EMBED_WIDTHS: [usize; 3] = [16, 32, 32];

impl SurrogateEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cin = 3;
        for (i, &c) in EMBED_WIDTHS.iter().enumerate() {
            init_conv(&mut params, &mut rng, &format!("id.conv{i}"), c, cin, 3, true);
            cin = c;
        }
        Self { params }
    }
}

impl Default for SurrogateEmbedder {
    fn default() -> Self {
        Self::new(0x1d)
    }
}

impl FaceEmbedder for SurrogateEmbedder {
    fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let b = self.params.bind(&tape, |_| false);
        let mut h = tape.constant(img.to_tensor::<f64>()).add_scalar(-0.5);
        for i in 0..EMBED_WIDTHS.len() {
            h = lrelu(conv(&b, &format!("id.conv{i}"), h, nn::DOWN3));
        }
        let s = h.shape();
        let pooled = h.sum_to(&[1, s[1], 1, 1]).value();
        let n = (s[2] * s[3]) as f64;
        let mut v: Vec<f64> = pooled.data().iter().map(|x| x / n).collect();
        // centre so that cosine reflects feature pattern, not overall magnitude
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        Ok(v)
    }
}

/// Cosine similarity of the two frames' embeddings.
pub fn identity_distance(a: &Image, b: &Image, embedder: &dyn FaceEmbedder) -> Result<f64> {
    let ea = embedder.embed(a)?;
    let eb = embedder.embed(b)?;
    if ea.len() != eb.len() {
        return Err(Error::Shape("embedding sizes differ".into()));
    }
    let na = ea.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = eb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("zero identity embedding".into()));
    }
    let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn is_mouth_color(rgb: [f32; 3]) -> bool {
    let d: f64 = rgb
        .iter()
        .zip(MOUTH_RGB)
        .map(|(&a, b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    d < MOUTH_COLOR_TOL
}

/// Estimated mouth opening of a toy face crop: vertical extent of the
/// largest 4-connected mouth-coloured region inside the lower-face mask,
/// divided by `0.24·S`, clipped to `[0, 1]`. Returns 0 without such pixels.
pub fn mouth_opening(frame: &Image) -> Result<f64> {
    let s = frame.width();
    if frame.height() != s {
        return Err(Error::Shape("mouth probe expects a square crop".into()));
    }
    let mask = build_umask(s)?;
    let hit: Vec<bool> = (0..s * s)
        .map(|i| mask.values()[i] == 1 && is_mouth_color(frame.rgb(i % s, i / s)))
        .collect();
    let mut seen = vec![false; s * s];
    let mut best: Option<(usize, usize, usize)> = None; // (size, ymin, ymax)
    let mut queue = VecDeque::new();
    for start in 0..s * s {
        if !hit[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut count, mut y0, mut y1) = (0, usize::MAX, 0);
        while let Some(i) = queue.pop_front() {
            count += 1;
            let (x, y) = (i % s, i / s);
            y0 = y0.min(y);
            y1 = y1.max(y);
            let mut push = |j: usize| {
                if hit[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < s {
                push(i + 1);
            }
            if y > 0 {
                push(i - s);
            }
            if y + 1 < s {
                push(i + s);
            }
        }
        if best.is_none_or(|b| count > b.0) {
            best = Some((count, y0, y1));
        }
    }
    Ok(match best {
        None => 0.0,
        Some((_, y0, y1)) => ((y1 - y0 + 1) as f64 / (MOUTH_FULL_HEIGHT * s as f64)).clamp(0.0, 1.0),
    })
}

/// Pearson correlation; `NaN` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return f64::NAN;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (x[i] - mx, y[i] - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Least-squares slope of `y` on `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in 0..n {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx).powi(2);
    }
    sxy / sxx
}

/// Correlation of probed mouth openings of `frames` with the per-frame audio
/// envelope.
pub fn mouth_corr(frames: &[Image], envelope: &[f32]) -> Result<f64> {
    if frames.len() != envelope.len() {
        return Err(Error::Shape(format!(
            "{} frames vs {} envelope values",
            frames.len(),
            envelope.len()
        )));
    }
    let open = frames.iter().map(mouth_opening).collect::<Result<Vec<_>>>()?;
    let env: Vec<f64> = envelope.iter().map(|&v| v as f64).collect();
    Ok(pearson(&open, &env))
}

/// Analytic mouth landmarks implied by a probed opening, for toy LMD.
pub fn probe_landmarks(frame: &Image) -> Result<Landmarks> {
    let open = mouth_opening(frame)?;
    Ok(crate::data::toy::mouth_landmarks(open, frame.width()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClipMetrics {
    pub clip: String,
    pub ssim: f64,
    pub psnr: f64,
    pub lmd: Option<f64>,
    pub sync_conf: Option<f64>,
    pub d_id: f64,
    pub mouth_corr: Option<f64>,
}

/// Slope of probed mouth opening on the audio envelope over a clip.
pub fn mouth_slope(frames: &[Image], envelope: &[f32]) -> Result<f64> {
    if frames.len() != envelope.len() {
        return Err(Error::Shape("frames and envelope differ in length".into()));
    }
    let open = frames.iter().map(mouth_opening).collect::<Result<Vec<_>>>()?;
    let env: Vec<f64> = envelope.iter().map(|&v| v as f64).collect();
    Ok(slope(&env, &open))
}

/// Mean absolute difference over pixels outside the lower-face mask.
pub fn outside_mask_l1(a: &Image, b: &Image) -> Result<f64> {
    same_size(a, b)?;
    let mask = build_umask(a.width())?;
    let mut total = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if mask.at(x, y) {
                continue;
            }
            for c in 0..3 {
                total += (a.get(c, x, y) - b.get(c, x, y)).abs() as f64;
                n += 1;
            }
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Scores generated frames against the clip they reconstruct. The sync
/// confidence needs a SyncNet and at least 35 frames; toy-only fields are
/// `None` for clips without envelope or landmarks.
pub fn evaluate_clip(
    name: &str,
    generated: &[Image],
    clip: &VideoClip,
    sync: Option<(&ModelConfig, &ParamStore<f32>)>,
    embedder: &dyn FaceEmbedder,
) -> Result<ClipMetrics> {
    if generated.len() != clip.len() {
        return Err(Error::Shape(format!(
            "{} generated frames for a {}-frame clip",
            generated.len(),
            clip.len()
        )));
    }
    let n = generated.len() as f64;
    let mut ssim_sum = 0.0;
    let mut psnr_sum = 0.0;
    let mut id_sum = 0.0;
    for (g, t) in generated.iter().zip(&clip.frames) {
        ssim_sum += ssim(g, t)?;
        psnr_sum += psnr(g, t)?;
        id_sum += identity_distance(g, t, embedder)?;
    }
    let lmd = match &clip.landmarks_gt {
        Some(gt) => {
            let pred = generated.iter().map(probe_landmarks).collect::<Result<Vec<_>>>()?;
            Some(lmd(&pred, gt)?)
        }
        None => None,
    };
    let mouth_corr = match &clip.envelope {
        Some(env) => Some(mouth_corr(generated, env)?).filter(|v| v.is_finite()),
        None => None,
    };
    let sync_conf = match sync {
        Some((cfg, p)) if generated.len() >= WINDOW + 2 * MAX_OFFSET => {
            Some(sync_confidence_frames(cfg, p, generated, &clip.mel)?)
        }
        _ => None,
    };
    Ok(ClipMetrics {
        clip: name.to_string(),
        ssim: ssim_sum / n,
        psnr: psnr_sum / n,
        lmd,
        sync_conf,
        d_id: id_sum / n,
        mouth_corr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Over the finite values only.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        let n = v.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub ssim: MeanStd,
    pub psnr: MeanStd,
    pub lmd: MeanStd,
    pub sync_conf: MeanStd,
    pub d_id: MeanStd,
    pub mouth_corr: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub config_fingerprint: String,
    pub clips: Vec<ClipMetrics>,
}

impl MetricsReport {
    pub fn aggregate(&self) -> Aggregate {
        let col = |f: &dyn Fn(&ClipMetrics) -> Option<f64>| MeanStd::of(self.clips.iter().filter_map(f));
        Aggregate {
            ssim: col(&|c| Some(c.ssim)),
            psnr: col(&|c| Some(c.psnr)),
            lmd: col(&|c| c.lmd),
            sync_conf: col(&|c| c.sync_conf),
            d_id: col(&|c| Some(c.d_id)),
            mouth_corr: col(&|c| c.mouth_corr),
        }
    }

    /// One JSON record per clip, then one aggregate record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.clips {
            let mut v = serde_json::to_value(c).expect("serializable");
            v["kind"] = "clip".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let mut agg = serde_json::to_value(self.aggregate()).expect("serializable");
        agg["kind"] = "aggregate".into();
        agg["config_fingerprint"] = self.config_fingerprint.clone().into();
        out.push_str(&agg.to_string());
        out.push('\n');
        out
    }
}
