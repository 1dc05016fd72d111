//! Audio-visual clips: procedural toy talkers, log-mel features, the lower-face
//! mask and the on-disk clip directory format.

mod image;
pub mod io;
mod mask;
pub mod mel;
pub mod toy;

pub use image::{stack, Image};
pub use mask::{build_umask, mask_frame, UMask};
pub use mel::{compute_mel, Mel, MelSlab, MEL_BANDS, SLAB_STEPS};
pub use toy::{preset_speakers, render_clip, synthesize_clip, toy_corpus, Envelope, ToySpeakerSpec};

use crate::error::{Error, Result};

pub const FPS: usize = 25;
pub const SAMPLE_RATE: u32 = 16_000;
pub const SAMPLES_PER_FRAME: usize = SAMPLE_RATE as usize / FPS;
/// Number of analytic mouth landmarks: left corner, right corner, top, bottom.
pub const MOUTH_LANDMARKS: usize = 4;

pub type Landmarks = [[f32; 2]; MOUTH_LANDMARKS];

#[derive(Debug, Clone, PartialEq)]
pub enum Speaker {
    Toy(ToySpeakerSpec),
    Opaque(String),
}

impl Speaker {
    pub fn id_string(&self) -> String {
        match self {
            Speaker::Toy(s) => format!("toy-{}", s.identity_id),
            Speaker::Opaque(s) => s.clone(),
        }
    }
}

/// A face-crop frame sequence with its audio track.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Image>,
    pub waveform: Vec<f32>,
    pub mel: Mel,
    /// Per-frame mouth opening fraction (toy data only).
    pub mouth_open_gt: Option<Vec<f32>>,
    /// Per-frame audio amplitude envelope (toy data only).
    pub envelope: Option<Vec<f32>>,
    pub landmarks_gt: Option<Vec<Landmarks>>,
    pub speaker: Speaker,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn size(&self) -> usize {
        self.frames.first().map(|f| f.width()).unwrap_or(0)
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / FPS as f64
    }

    /// Mel slab aligned with frame `t`.
    pub fn mel_slab(&self, t: usize) -> Result<MelSlab> {
        if t >= self.len() {
            return Err(Error::OutOfRange(format!(
                "frame {t} outside clip of {} frames",
                self.len()
            )));
        }
        Ok(self.mel.slab_at_frame(t))
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() < 5 {
            return Err(Error::InvalidArgument(format!(
                "clip has {} frames, at least 5 required",
                self.len()
            )));
        }
        let s = self.size();
        if self
            .frames
            .iter()
            .any(|f| f.width() != s || f.height() != s || !f.all_finite())
        {
            return Err(Error::InvalidArgument(
                "frames must be finite square crops of equal size".into(),
            ));
        }
        if self.mel.steps() != self.waveform.len() / mel::HOP {
            return Err(Error::InvalidArgument(format!(
                "mel has {} steps, waveform implies {}",
                self.mel.steps(),
                self.waveform.len() / mel::HOP
            )));
        }
        if !self.mel.values().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("mel".into()));
        }
        Ok(())
    }

    /// Replaces the audio track, trimming or zero-padding the waveform to the
    /// clip's frame count.
    pub fn with_audio(&self, waveform: &[f32]) -> Result<VideoClip> {
        let want = self.len() * SAMPLES_PER_FRAME;
        let mut w = waveform.to_vec();
        w.resize(want, 0.0);
        let mel = compute_mel(&w, SAMPLE_RATE)?;
        Ok(VideoClip {
            waveform: w,
            mel,
            mouth_open_gt: None,
            envelope: None,
            landmarks_gt: None,
            ..self.clone()
        })
    }
}
