//! Inference: drive a template clip with an arbitrary audio track.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::config::ModelConfig;
use crate::data::{build_umask, compute_mel, mask_frame, stack, Image, MelSlab, VideoClip, SAMPLES_PER_FRAME};
use crate::error::{Error, Result};
use crate::evalkit::mouth_opening;
use crate::generator::{blend_into_frame, CropBox};
use crate::nn::ParamStore;
use crate::personalization::{dw_head, PersonalAdapter};
use crate::codec::slab_tensor;
use crate::training::forward;

/// Frames generated per forward pass.
const CHUNK: usize = 25;

/// What to do when the driving audio and the template differ in length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LengthPolicy {
    /// Stop at the shorter of the two.
    #[default]
    Trim,
    /// Extend the template by palindromic looping to cover the audio.
    LoopTemplate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOptions {
    pub ref_index: usize,
    pub masking: bool,
    pub policy: LengthPolicy,
    /// Where the generated crop lands in the template frame; the whole frame
    /// when `None`.
    pub crop: Option<CropBox>,
    pub feather_px: usize,
}

impl InferOptions {
    pub fn new(ref_index: usize) -> Self {
        Self {
            ref_index,
            masking: true,
            policy: LengthPolicy::Trim,
            crop: None,
            feather_px: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    /// Raw generator outputs.
    pub crops: Vec<Image>,
    /// Crops blended into the template frames.
    pub frames: Vec<Image>,
    /// Template frame used for each output frame.
    pub template_index: Vec<usize>,
}

/// Seeded reference frame index for a clip of `len` frames.
pub fn pick_reference(seed: u64, len: usize) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..len.max(1))
}

/// Index into a template of `len` frames when it is played forward, then
/// backward, then forward again.
pub fn palindrome_index(t: usize, len: usize) -> usize {
    if len <= 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let k = t % period;
    if k < len {
        k
    } else {
        period - k
    }
}

/// Generated crops for explicit per-frame inputs.
pub fn generate_frames(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    adapter: Option<&PersonalAdapter>,
    targets: &[&Image],
    reference: &Image,
    slabs: &[MelSlab],
    masking: bool,
) -> Result<Vec<Image>> {
    if targets.len() != slabs.len() {
        return Err(Error::Shape(format!(
            "{} frames vs {} audio slabs",
            targets.len(),
            slabs.len()
        )));
    }
    let effective;
    let params = match adapter {
        Some(a) => {
            a.validate(cfg, params)?;
            effective = a.effective(params)?;
            &effective
        }
        None => params,
    };
    let mask = build_umask(cfg.image_size)?;
    let mut out = Vec::with_capacity(targets.len());
    for (frames, slab_chunk) in targets.chunks(CHUNK).zip(slabs.chunks(CHUNK)) {
        let masked: Vec<Image> = frames.iter().map(|f| mask_frame(f, &mask)).collect::<Result<_>>()?;
        let masked_refs: Vec<&Image> = masked.iter().collect();
        let refs = vec![reference; frames.len()];
        let slab_refs: Vec<&MelSlab> = slab_chunk.iter().collect();
        let tape = Tape::new();
        let mut b = params.bind(&tape, |_| false);
        if let Some(a) = adapter {
            b.extend(a.mlp_dw.bind(&tape, |_| false));
        }
        let head = dw_head(cfg, &b);
        let fwd = forward(
            cfg,
            &b,
            tape.constant(stack(&masked_refs)),
            tape.constant(stack(&refs)),
            tape.constant(slab_tensor(&slab_refs)),
            masking,
            &mask,
            adapter.map(|_| &head as &dyn Fn(_) -> _),
        )?;
        let v = fwd.fake.value();
        for i in 0..frames.len() {
            out.push(Image::from_tensor(v.as_ref(), i)?);
        }
    }
    Ok(out)
}

/// Masks every template frame, encodes it with the reference frame and the
/// aligned slab of `waveform`, generates and blends back.
pub fn infer(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    adapter: Option<&PersonalAdapter>,
    template: &VideoClip,
    waveform: &[f32],
    sample_rate: u32,
    opts: &InferOptions,
) -> Result<InferOutput> {
    if template.is_empty() {
        return Err(Error::InvalidArgument("template clip has no frames".into()));
    }
    if opts.ref_index >= template.len() {
        return Err(Error::OutOfRange(format!(
            "reference index {} for a {}-frame template",
            opts.ref_index,
            template.len()
        )));
    }
    let mel = compute_mel(waveform, sample_rate)?;
    let audio_frames = waveform.len() / SAMPLES_PER_FRAME;
    let n = match opts.policy {
        LengthPolicy::Trim => audio_frames.min(template.len()),
        LengthPolicy::LoopTemplate => audio_frames,
    };
    if n == 0 {
        return Err(Error::InvalidArgument("driving audio is shorter than one frame".into()));
    }
    let template_index: Vec<usize> = (0..n).map(|t| palindrome_index(t, template.len())).collect();
    let targets: Vec<&Image> = template_index.iter().map(|&i| &template.frames[i]).collect();
    let slabs: Vec<MelSlab> = (0..n).map(|t| mel.slab_at_frame(t)).collect();
    let reference = &template.frames[opts.ref_index];
    let crops = generate_frames(cfg, params, adapter, &targets, reference, &slabs, opts.masking)?;
    let crop = opts.crop.unwrap_or(CropBox {
        x: 0,
        y: 0,
        size: cfg.image_size,
    });
    let frames = crops
        .iter()
        .zip(&targets)
        .map(|(g, o)| blend_into_frame(g, o, crop, opts.feather_px))
        .collect::<Result<_>>()?;
    Ok(InferOutput {
        crops,
        frames,
        template_index,
    })
}

/// Self-driven generation: the template's own audio, trimmed to its frames.
pub fn self_driven(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    adapter: Option<&PersonalAdapter>,
    clip: &VideoClip,
    ref_index: usize,
    masking: bool,
) -> Result<Vec<Image>> {
    let slabs: Vec<MelSlab> = (0..clip.len()).map(|t| clip.mel_slab(t)).collect::<Result<_>>()?;
    let targets: Vec<&Image> = clip.frames.iter().collect();
    generate_frames(cfg, params, adapter, &targets, &clip.frames[ref_index], &slabs, masking)
}

/// Mean absolute change in the probed mouth opening of a generated frame
/// when its reference is swapped between the most-closed and most-open frame
/// of the same clip, audio and target fixed. Clips need ground-truth
/// openings.
pub fn reference_sensitivity(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    clips: &[VideoClip],
    probes: usize,
    masking: bool,
    seed: u64,
) -> Result<f64> {
    if clips.is_empty() || probes == 0 {
        return Err(Error::InvalidArgument("need clips and at least one probe".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for k in 0..probes {
        let clip = &clips[k % clips.len()];
        let open = clip
            .mouth_open_gt
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("clip lacks ground-truth openings".into()))?;
        let argmin = (0..open.len()).min_by(|&a, &b| open[a].total_cmp(&open[b])).unwrap();
        let argmax = (0..open.len()).max_by(|&a, &b| open[a].total_cmp(&open[b])).unwrap();
        let t = rng.random_range(0..clip.len());
        let slab = [clip.mel_slab(t)?];
        let target = [&clip.frames[t]];
        let lo = generate_frames(cfg, params, None, &target, &clip.frames[argmin], &slab, masking)?;
        let hi = generate_frames(cfg, params, None, &target, &clip.frames[argmax], &slab, masking)?;
        total += (mouth_opening(&hi[0])? - mouth_opening(&lo[0])?).abs();
    }
    Ok(total / probes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{preset_speakers, synthesize_clip, SAMPLE_RATE};
    use crate::training::init_model;

    #[test]
    fn palindrome_covers_the_template() {
        let idx: Vec<usize> = (0..9).map(|t| palindrome_index(t, 4)).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(palindrome_index(5, 1), 0);
    }

    #[test]
    fn zero_adapter_matches_the_generalized_model_bit_exactly() {
        let cfg = ModelConfig::tiny(16);
        let params = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let clip = synthesize_clip(&preset_speakers()[0], 0.6, 3, 16).unwrap();
        let opts = InferOptions::new(2);
        let plain = infer(&cfg, &params, None, &clip, &clip.waveform, SAMPLE_RATE, &opts).unwrap();
        let zero = PersonalAdapter::init(&cfg, &params, "p", 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let with = infer(&cfg, &params, Some(&zero), &clip, &clip.waveform, SAMPLE_RATE, &opts).unwrap();
        assert_eq!(plain, with);
        assert_eq!(plain.frames.len(), clip.len());
        let again = infer(&cfg, &params, None, &clip, &clip.waveform, SAMPLE_RATE, &opts).unwrap();
        assert_eq!(plain, again);
    }

    #[test]
    fn length_policies_and_errors() {
        let cfg = ModelConfig::tiny(16);
        let params = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let clip = synthesize_clip(&preset_speakers()[1], 0.4, 3, 16).unwrap();
        let long: Vec<f32> = clip.waveform.iter().chain(&clip.waveform).copied().collect();
        let mut opts = InferOptions::new(0);
        assert_eq!(infer(&cfg, &params, None, &clip, &long, SAMPLE_RATE, &opts).unwrap().frames.len(), clip.len());
        opts.policy = LengthPolicy::LoopTemplate;
        let out = infer(&cfg, &params, None, &clip, &long, SAMPLE_RATE, &opts).unwrap();
        assert_eq!(out.frames.len(), 2 * clip.len());
        assert_eq!(out.template_index[clip.len()], clip.len() - 2);
        assert!(infer(&cfg, &params, None, &clip, &long, 22_050, &opts).is_err());
        opts.ref_index = clip.len();
        assert!(infer(&cfg, &params, None, &clip, &long, SAMPLE_RATE, &opts).is_err());
    }
}
