//! Log-mel spectrogram: 800-sample Hann STFT, hop 200, 80 Slaney-scaled
//! bands over 55–7600 Hz, natural log with a 1e-5 floor.

use std::sync::OnceLock;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FPS, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const N_FFT: usize = 800;
pub const HOP: usize = 200;
pub const MEL_BANDS: usize = 80;
pub const SLAB_STEPS: usize = 16;
pub const F_MIN: f64 = 55.0;
pub const F_MAX: f64 = 7600.0;
pub const LOG_FLOOR: f64 = 1e-5;
/// Mel steps per second.
const STEPS_PER_SECOND: usize = SAMPLE_RATE as usize / HOP;

/// `[steps, 80]` log-mel matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mel {
    steps: usize,
    values: Vec<f32>,
}

/// Sixteen mel steps (0.2 s) stored band-major: `values[band * 16 + step]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSlab {
    values: Vec<f32>,
}

impl MelSlab {
    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; MEL_BANDS * SLAB_STEPS],
        }
    }

    pub fn from_values(values: Vec<f32>) -> Result<Self> {
        if values.len() != MEL_BANDS * SLAB_STEPS {
            return Err(Error::Shape(format!(
                "mel slab needs {} values, got {}",
                MEL_BANDS * SLAB_STEPS,
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, band: usize, step: usize) -> f32 {
        self.values[band * SLAB_STEPS + step]
    }
}

impl Mel {
    pub fn from_values(steps: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != steps * MEL_BANDS {
            return Err(Error::Shape(format!(
                "mel with {steps} steps needs {} values, got {}",
                steps * MEL_BANDS,
                values.len()
            )));
        }
        Ok(Self { steps, values })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, step: usize) -> &[f32] {
        &self.values[step * MEL_BANDS..(step + 1) * MEL_BANDS]
    }

    /// First mel step of the slab aligned with video frame `t`.
    pub fn slab_start(t: usize) -> usize {
        t * STEPS_PER_SECOND / FPS
    }

    /// Slab starting at `floor(t·80/25)`; steps past the end are zero.
    pub fn slab_at_frame(&self, t: usize) -> MelSlab {
        self.slab_at_step(Self::slab_start(t))
    }

    pub fn slab_at_step(&self, start: usize) -> MelSlab {
        let mut values = vec![0.0; MEL_BANDS * SLAB_STEPS];
        for step in 0..SLAB_STEPS {
            let r = start + step;
            if r >= self.steps {
                break;
            }
            for (band, &v) in self.row(r).iter().enumerate() {
                values[band * SLAB_STEPS + step] = v;
            }
        }
        MelSlab { values }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * (logstep * (m - min_log_mel)).exp()
    } else {
        f_sp * m
    }
}

/// Edge frequencies of the triangular filters (`MEL_BANDS + 2` points);
/// band `b` peaks at `edges[b + 1]`.
pub fn band_edges_hz() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(F_MAX));
    (0..MEL_BANDS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (MEL_BANDS + 1) as f64))
        .collect()
}

pub fn band_centers_hz() -> Vec<f64> {
    band_edges_hz()[1..=MEL_BANDS].to_vec()
}

/// Area-normalised triangular filterbank, `[80, N_FFT/2 + 1]`.
fn filterbank() -> &'static [Vec<f64>] {
    static BANK: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    BANK.get_or_init(|| {
        let edges = band_edges_hz();
        let bins = N_FFT / 2 + 1;
        (0..MEL_BANDS)
            .map(|b| {
                let (f0, f1, f2) = (edges[b], edges[b + 1], edges[b + 2]);
                let norm = 2.0 / (f2 - f0);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
                        let lower = (f - f0) / (f1 - f0);
                        let upper = (f2 - f) / (f2 - f1);
                        lower.min(upper).max(0.0) * norm
                    })
                    .collect()
            })
            .collect()
    })
}

fn hann() -> &'static [f64] {
    static WIN: OnceLock<Vec<f64>> = OnceLock::new();
    WIN.get_or_init(|| {
        (0..N_FFT)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / N_FFT as f64).cos())
            .collect()
    })
}

/// Log-mel features of a 16 kHz waveform, one row per 200-sample hop.
///
/// Row `r` analyses the 800 samples centred on the middle of hop `r`
/// (`r·200 + 100`), zero-padded outside the waveform, so the output has
/// exactly `floor(len / 200)` rows.
pub fn compute_mel(waveform: &[f32], sample_rate: u32) -> Result<Mel> {
    if sample_rate != SAMPLE_RATE {
        return Err(Error::InvalidArgument(format!(
            "expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz (resample first)"
        )));
    }
    if let Some(i) = waveform.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("waveform sample {i}")));
    }
    let steps = waveform.len() / HOP;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let window = hann();
    let bank = filterbank();
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut mag = vec![0.0f64; N_FFT / 2 + 1];
    let mut values = Vec::with_capacity(steps * MEL_BANDS);
    for r in 0..steps {
        let start = (r * HOP + HOP / 2) as isize - (N_FFT / 2) as isize;
        for (n, c) in buf.iter_mut().enumerate() {
            let idx = start + n as isize;
            let s = if idx >= 0 && (idx as usize) < waveform.len() {
                waveform[idx as usize] as f64
            } else {
                0.0
            };
            *c = Complex::new(s * window[n], 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for filt in bank {
            let e: f64 = filt.iter().zip(&mag).map(|(w, m)| w * m).sum();
            values.push(e.max(LOG_FLOOR).ln() as f32);
        }
    }
    Ok(Mel { steps, values })
}
