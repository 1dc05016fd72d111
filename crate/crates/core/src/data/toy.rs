//! ToyTalker: procedurally rendered talking faces whose mouth opening is an
//! affine function of the audio amplitude envelope.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{compute_mel, Image, Landmarks, Speaker, VideoClip, SAMPLES_PER_FRAME, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const CARRIER_HZ: f64 = 220.0;
/// Vertical mouth semi-axis at full opening, as a fraction of the crop size.
pub const MOUTH_MAX_SEMI_AXIS: f64 = 0.12;
/// Horizontal mouth semi-axis as a fraction of the crop size.
pub const MOUTH_HALF_WIDTH: f64 = 0.14;
pub const MOUTH_CENTER_Y: f64 = 0.68;
pub const MOUTH_RGB: [f32; 3] = [0.35, 0.05, 0.08];
pub const BACKGROUND_RGB: [f32; 3] = [0.55, 0.6, 0.65];
const EYE_RGB: [f32; 3] = [0.08, 0.08, 0.1];
/// Envelope knots are placed every four video frames.
const FRAMES_PER_KNOT: usize = 4;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpeakerSpec {
    pub identity_id: u32,
    pub face_hue: f64,
    pub face_width_frac: f64,
    pub mouth_gain: f64,
    pub mouth_rest_open: f64,
}

impl ToySpeakerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("toy speaker: {what}")));
        if !(0.0..1.0).contains(&self.face_hue) {
            return bad("face_hue must lie in [0, 1)");
        }
        if !(0.5..=0.8).contains(&self.face_width_frac) {
            return bad("face_width_frac must lie in [0.5, 0.8]");
        }
        if !(0.3..=1.0).contains(&self.mouth_gain) {
            return bad("mouth_gain must lie in [0.3, 1.0]");
        }
        if !(0.0..=0.1).contains(&self.mouth_rest_open) {
            return bad("mouth_rest_open must lie in [0, 0.1]");
        }
        if self.mouth_gain + self.mouth_rest_open > 1.0 {
            return bad("mouth_gain + mouth_rest_open must not exceed 1");
        }
        Ok(())
    }

    /// Face colour: HSV with fixed saturation and value.
    pub fn face_rgb(&self) -> [f32; 3] {
        hsv_to_rgb(self.face_hue, 0.45, 0.9)
    }

    /// Mouth opening for an envelope value.
    pub fn opening(&self, env: f64) -> f64 {
        self.mouth_gain * env + self.mouth_rest_open
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Per-sample amplitude envelope in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    samples: Vec<f32>,
}

impl Envelope {
    pub fn constant(n_samples: usize, v: f32) -> Self {
        Self {
            samples: vec![v.clamp(0.0, 1.0); n_samples],
        }
    }

    pub fn from_samples(samples: Vec<f32>) -> Result<Self> {
        if samples.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("envelope must lie in [0, 1]".into()));
        }
        Ok(Self { samples })
    }

    /// Smooth random envelope: knots every four frames, each silent with
    /// probability 1/4 or uniform in `[0.15, 1]`, joined by raised-cosine
    /// interpolation.
    pub fn random<R: Rng + ?Sized>(n_samples: usize, rng: &mut R) -> Self {
        let knot_len = FRAMES_PER_KNOT * SAMPLES_PER_FRAME;
        let n_knots = n_samples / knot_len + 2;
        let knots: Vec<f64> = (0..n_knots)
            .map(|_| {
                if rng.random::<f64>() < 0.25 {
                    0.0
                } else {
                    rng.random_range(0.15..=1.0)
                }
            })
            .collect();
        let samples = (0..n_samples)
            .map(|n| {
                let k = n / knot_len;
                let u = (n % knot_len) as f64 / knot_len as f64;
                let w = 0.5 - 0.5 * (std::f64::consts::PI * u).cos();
                (knots[k] * (1.0 - w) + knots[k + 1] * w) as f32
            })
            .collect();
        Self { samples }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    /// Envelope value at the centre of video frame `t`.
    pub fn at_frame(&self, t: usize) -> f32 {
        let i = (t * SAMPLES_PER_FRAME + SAMPLES_PER_FRAME / 2).min(self.samples.len() - 1);
        self.samples[i]
    }
}

/// Deterministic clip for `(spec, duration_s, seed)` at crop size `size`.
pub fn synthesize_clip(
    spec: &ToySpeakerSpec,
    duration_s: f64,
    seed: u64,
    size: usize,
) -> Result<VideoClip> {
    if !(duration_s >= 0.2) {
        return Err(Error::InvalidArgument(format!(
            "clip duration must be at least 0.2 s (5 frames), got {duration_s}"
        )));
    }
    let frames = (duration_s * super::FPS as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let envelope = Envelope::random(frames * SAMPLES_PER_FRAME, &mut rng);
    let phase = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
    render_clip(spec, &envelope, phase, size)
}

/// The two reference speakers: A opens its mouth little, B widely.
pub fn preset_speakers() -> [ToySpeakerSpec; 2] {
    [
        ToySpeakerSpec {
            identity_id: 0,
            face_hue: 0.07,
            face_width_frac: 0.62,
            mouth_gain: 0.4,
            mouth_rest_open: 0.03,
        },
        ToySpeakerSpec {
            identity_id: 1,
            face_hue: 0.55,
            face_width_frac: 0.7,
            mouth_gain: 0.9,
            mouth_rest_open: 0.03,
        },
    ]
}

/// `clips_per_speaker` clips for every speaker, interleaved by speaker.
/// Clip seeds are drawn from one generator seeded with `seed`.
pub fn toy_corpus(
    speakers: &[ToySpeakerSpec],
    clips_per_speaker: usize,
    duration_s: f64,
    size: usize,
    seed: u64,
) -> Result<Vec<VideoClip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(speakers.len() * clips_per_speaker);
    for _ in 0..clips_per_speaker {
        for spec in speakers {
            out.push(synthesize_clip(spec, duration_s, rng.random(), size)?);
        }
    }
    Ok(out)
}

/// Renders a clip whose length is set by the envelope (`len / 640` frames).
pub fn render_clip(
    spec: &ToySpeakerSpec,
    envelope: &Envelope,
    carrier_phase: f64,
    size: usize,
) -> Result<VideoClip> {
    spec.validate()?;
    if size < 16 {
        return Err(Error::InvalidArgument(format!("crop size {size} too small")));
    }
    let frames = envelope.samples.len() / SAMPLES_PER_FRAME;
    if frames < 5 {
        return Err(Error::InvalidArgument(format!(
            "clip needs at least 5 frames, envelope covers {frames}"
        )));
    }
    let n = frames * SAMPLES_PER_FRAME;
    let omega = 2.0 * std::f64::consts::PI * CARRIER_HZ / SAMPLE_RATE as f64;
    let waveform: Vec<f32> = (0..n)
        .map(|i| (envelope.samples[i] as f64 * (omega * i as f64 + carrier_phase).sin()) as f32)
        .collect();
    let mel = compute_mel(&waveform, SAMPLE_RATE)?;
    let base = render_head(spec, size);
    let mut images = Vec::with_capacity(frames);
    let mut opens = Vec::with_capacity(frames);
    let mut envs = Vec::with_capacity(frames);
    let mut landmarks = Vec::with_capacity(frames);
    for t in 0..frames {
        let env = envelope.at_frame(t);
        let open = spec.opening(env as f64);
        let mut img = base.clone();
        draw_mouth(&mut img, open);
        img.quantize8();
        images.push(img);
        opens.push(open as f32);
        envs.push(env);
        landmarks.push(mouth_landmarks(open, size));
    }
    Ok(VideoClip {
        frames: images,
        waveform,
        mel,
        mouth_open_gt: Some(opens),
        envelope: Some(envs),
        landmarks_gt: Some(landmarks),
        speaker: Speaker::Toy(spec.clone()),
    })
}

/// Left corner, right corner, top and bottom of the mouth ellipse, in pixel
/// coordinates (pixel `(x, y)` covers `[x, x+1) × [y, y+1)`).
pub fn mouth_landmarks(open: f64, size: usize) -> Landmarks {
    let s = size as f64;
    let (cx, cy) = (0.5 * s, MOUTH_CENTER_Y * s);
    let a = MOUTH_HALF_WIDTH * s;
    let b = open * MOUTH_MAX_SEMI_AXIS * s;
    [
        [(cx - a) as f32, cy as f32],
        [(cx + a) as f32, cy as f32],
        [cx as f32, (cy - b) as f32],
        [cx as f32, (cy + b) as f32],
    ]
}

/// Fraction of a pixel's supersamples inside `inside(x, y)`.
fn coverage(px: usize, py: usize, inside: impl Fn(f64, f64) -> bool) -> f32 {
    let mut hit = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            if inside(x, y) {
                hit += 1;
            }
        }
    }
    hit as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32
}

fn blend(img: &mut Image, x: usize, y: usize, rgb: [f32; 3], alpha: f32) {
    if alpha <= 0.0 {
        return;
    }
    for (c, v) in rgb.iter().enumerate() {
        let old = img.get(c, x, y);
        img.set(c, x, y, old * (1.0 - alpha) + v * alpha);
    }
}

fn render_head(spec: &ToySpeakerSpec, size: usize) -> Image {
    let s = size as f64;
    let mut img = Image::filled(size, size, BACKGROUND_RGB);
    let face = spec.face_rgb();
    let (hx, hy) = (0.5 * s, 0.5 * s);
    let (ha, hb) = (0.5 * spec.face_width_frac * s, 0.46 * s);
    let eye_r = 0.045 * s;
    let eyes = [(0.36 * s, 0.38 * s), (0.64 * s, 0.38 * s)];
    for y in 0..size {
        for x in 0..size {
            let c = coverage(x, y, |fx, fy| {
                ((fx - hx) / ha).powi(2) + ((fy - hy) / hb).powi(2) <= 1.0
            });
            blend(&mut img, x, y, face, c);
            for &(ex, ey) in &eyes {
                let c = coverage(x, y, |fx, fy| {
                    (fx - ex).powi(2) + (fy - ey).powi(2) <= eye_r * eye_r
                });
                blend(&mut img, x, y, EYE_RGB, c);
            }
        }
    }
    img
}

fn draw_mouth(img: &mut Image, open: f64) {
    let size = img.width();
    let s = size as f64;
    let (cx, cy) = (0.5 * s, MOUTH_CENTER_Y * s);
    let a = MOUTH_HALF_WIDTH * s;
    let b = open * MOUTH_MAX_SEMI_AXIS * s;
    if b <= 0.0 {
        return;
    }
    let y0 = (cy - b).floor().max(0.0) as usize;
    let y1 = ((cy + b).ceil() as usize).min(size - 1);
    let x0 = (cx - a).floor().max(0.0) as usize;
    let x1 = ((cx + a).ceil() as usize).min(size - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let c = coverage(x, y, |fx, fy| {
                ((fx - cx) / a).powi(2) + ((fy - cy) / b).powi(2) <= 1.0
            });
            blend(img, x, y, MOUTH_RGB, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn speaker() -> ToySpeakerSpec {
        ToySpeakerSpec {
            identity_id: 1,
            face_hue: 0.08,
            face_width_frac: 0.65,
            mouth_gain: 0.5,
            mouth_rest_open: 0.05,
        }
    }

    #[test]
    fn opening_formula() {
        assert!((speaker().opening(1.0) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn silent_envelope_closes_the_mouth() {
        let spec = ToySpeakerSpec {
            mouth_rest_open: 0.0,
            ..speaker()
        };
        let clip = render_clip(&spec, &Envelope::constant(640 * 6, 0.0), 0.0, 32).unwrap();
        assert!(clip.mouth_open_gt.as_ref().unwrap().iter().all(|&v| v == 0.0));
        // no mouth pixels: every frame equals the bare head
        let bare = {
            let mut h = render_head(&spec, 32);
            h.quantize8();
            h
        };
        assert!(clip.frames.iter().all(|f| *f == bare));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synthesize_clip(&speaker(), 0.4, 11, 32).unwrap();
        let b = synthesize_clip(&speaker(), 0.4, 11, 32).unwrap();
        let c = synthesize_clip(&speaker(), 0.4, 12, 32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.waveform, c.waveform);
    }

    #[test]
    fn short_durations_are_rejected() {
        let err = synthesize_clip(&speaker(), 0.1, 0, 32).unwrap_err();
        assert!(err.to_string().contains("0.2 s"));
    }

    #[test]
    fn invariants_of_generated_clip() {
        let clip = synthesize_clip(&speaker(), 1.0, 3, 64).unwrap();
        clip.validate().unwrap();
        assert_eq!(clip.len(), 25);
        assert_eq!(clip.waveform.len(), 25 * 640);
        assert_eq!(clip.mel.steps(), 25 * 640 / 200);
        let opens = clip.mouth_open_gt.as_ref().unwrap();
        let envs = clip.envelope.as_ref().unwrap();
        for (o, e) in opens.iter().zip(envs) {
            assert!((0.0..=1.0).contains(e));
            assert!((*o as f64 - (0.5 * *e as f64 + 0.05)).abs() < 1e-6);
        }
        for (t, lm) in clip.landmarks_gt.as_ref().unwrap().iter().enumerate() {
            let gap = lm[3][1] - lm[2][1];
            let want = 2.0 * opens[t] * 0.12 * 64.0;
            assert!((gap - want).abs() < 1.0);
        }
    }

    #[test]
    fn invalid_speakers_are_rejected() {
        let mut s = speaker();
        s.mouth_gain = 1.0;
        s.mouth_rest_open = 0.05;
        assert!(s.validate().is_err());
        s.mouth_rest_open = 0.0;
        assert!(s.validate().is_ok());
        s.face_width_frac = 0.9;
        assert!(s.validate().is_err());
    }
}
