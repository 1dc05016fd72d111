//! Face and audio encoders.
//!
//! The face encoder sees `[masked target, reference]` stacked on channels,
//! halves resolution per stage down to 4×4, projects every stage into the two
//! generator layers at that resolution and flattens the 4×4 bottleneck into
//! the face embedding `f_f`. The audio encoder maps one 80×16 mel slab to
//! `f_a`.

use rand::Rng;

use crate::autograd::{Bound, Var};
use crate::config::ModelConfig;
use crate::data::mel::LOG_FLOOR;
use crate::data::{UMask, MEL_BANDS, SLAB_STEPS};
use crate::error::{Error, Result};
use crate::nn::{self, conv, init_conv, init_linear, linear, lrelu, ParamStore};
use crate::tensor::{Real, Tensor};

/// Fixed scale applied to log-mel input (no shift, so zero stays zero).
pub const MEL_INPUT_SCALE: f64 = 0.25;

pub const FACE_PREFIX: &str = "enc_face";
pub const AUDIO_PREFIX: &str = "enc_audio";

/// Per-layer spatial features delivered to the generator's noise slots,
/// coarse to fine (`maps[0]` is layer 1).
#[derive(Debug, Clone)]
pub struct FeaturePyramid<'t, T: Real> {
    pub maps: Vec<Var<'t, T>>,
    pub masked: bool,
}

impl<'t, T: Real> FeaturePyramid<'t, T> {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Marks the pyramid ready for the generator without gating it (the
    /// "no masking" ablation).
    pub fn pass_through(self) -> Result<Self> {
        if self.masked {
            return Err(Error::Pipeline("pyramid already masked".into()));
        }
        Ok(Self {
            masked: true,
            ..self
        })
    }
}

/// Index of the first gated layer, 1-based: layers `l > floor(L/2)`.
pub fn first_masked_layer(num_layers: usize) -> usize {
    num_layers / 2 + 1
}

/// Zeroes every layer `l > floor(L/2)` wherever the nearest-neighbour
/// downsampled mask is 1; coarser layers pass unchanged.
pub fn mask_pyramid<'t, T: Real>(
    pyr: FeaturePyramid<'t, T>,
    mask: &UMask,
) -> Result<FeaturePyramid<'t, T>> {
    if pyr.masked {
        return Err(Error::Pipeline(
            "pyramid is already masked; mask_pyramid must run exactly once".into(),
        ));
    }
    let l_total = pyr.maps.len();
    let first = first_masked_layer(l_total);
    let mut maps = Vec::with_capacity(l_total);
    for (i, m) in pyr.maps.into_iter().enumerate() {
        let l = i + 1;
        if l < first {
            maps.push(m);
            continue;
        }
        let shape = m.shape();
        let res = shape[2];
        if shape[3] != res || mask.size() < res {
            return Err(Error::Shape(format!(
                "pyramid layer {l} has shape {shape:?}, mask size {}",
                mask.size()
            )));
        }
        let keep = mask.downsample(res);
        let plane: Vec<T> = keep
            .iter()
            .map(|&v| if v != 0 { T::zero() } else { T::one() })
            .collect();
        let gate = Tensor::from_vec(&[1, 1, res, res], plane)?;
        let gate = crate::tensor::expand(&gate, &shape);
        maps.push(m.mul_const(gate));
    }
    Ok(FeaturePyramid { maps, masked: true })
}

pub fn init_face_encoder<T: Real, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    rng: &mut R,
    store: &mut ParamStore<T>,
) {
    let s = cfg.image_size;
    init_conv(store, rng, &format!("{FACE_PREFIX}.stem"), cfg.enc_channels(s), 6, 3, true);
    let mut res = s / 2;
    while res >= 4 {
        init_conv(
            store,
            rng,
            &format!("{FACE_PREFIX}.down{res}"),
            cfg.enc_channels(res),
            cfg.enc_channels(res * 2),
            3,
            true,
        );
        res /= 2;
    }
    for res in cfg.resolutions() {
        let c = cfg.enc_channels(res);
        for side in ["a", "b"] {
            init_conv(store, rng, &format!("{FACE_PREFIX}.proj{res}{side}"), c, c, 1, true);
        }
    }
    init_linear(
        store,
        rng,
        &format!("{FACE_PREFIX}.bottleneck"),
        cfg.enc_channels(4) * 16,
        cfg.face_dim,
        Some(0.0),
    );
}

fn check_frames<T: Real>(cfg: &ModelConfig, x: &Var<'_, T>, what: &str) -> Result<()> {
    let s = x.shape();
    let want = [s.first().copied().unwrap_or(0), 3, cfg.image_size, cfg.image_size];
    if s.len() != 4 || s[1..] != want[1..] {
        return Err(Error::Shape(format!(
            "{what}: expected [N, 3, {0}, {0}], got {s:?}",
            cfg.image_size
        )));
    }
    Ok(())
}

/// `(pyramid, f_f)` for a batch of masked targets and references, both
/// `[N, 3, S, S]`. The pyramid is returned unmasked.
pub fn encode_face<'t, T: Real>(
    cfg: &ModelConfig,
    p: &Bound<'t, T>,
    masked_target: Var<'t, T>,
    reference: Var<'t, T>,
) -> Result<(FeaturePyramid<'t, T>, Var<'t, T>)> {
    check_frames(cfg, &masked_target, "masked target")?;
    check_frames(cfg, &reference, "reference")?;
    let n = masked_target.shape()[0];
    if reference.shape()[0] != n {
        return Err(Error::Shape("target/reference batch sizes differ".into()));
    }
    let s = cfg.image_size;
    let x = Var::concat(&[masked_target, reference], 1);
    let mut h = lrelu(conv(p, &format!("{FACE_PREFIX}.stem"), x, nn::SAME3));
    // stage activations from fine to coarse
    let mut stages = vec![(s, h)];
    let mut res = s / 2;
    while res >= 4 {
        h = lrelu(conv(p, &format!("{FACE_PREFIX}.down{res}"), h, nn::DOWN3));
        stages.push((res, h));
        res /= 2;
    }
    let mut maps = Vec::with_capacity(cfg.num_layers());
    for &(res, act) in stages.iter().rev() {
        for side in ["a", "b"] {
            maps.push(conv(p, &format!("{FACE_PREFIX}.proj{res}{side}"), act, nn::POINT));
        }
    }
    let bottom = stages.last().expect("at least one stage").1;
    let flat = bottom.reshape(&[n, cfg.enc_channels(4) * 16]);
    let f_f = linear(p, &format!("{FACE_PREFIX}.bottleneck"), flat);
    Ok((FeaturePyramid { maps, masked: false }, f_f))
}

/// Spatial height of the mel slab after each stride-2 stage.
const AUDIO_DOWNSAMPLES: usize = 3;

fn audio_width(cfg: &ModelConfig, stage: usize) -> usize {
    (cfg.audio_base_channels << stage).min(cfg.audio_base_channels * 4)
}

/// Convolutional tower over `[N, 1, 80, 16]` mel slabs; shared by the audio
/// encoder and the synchrony scorer's audio side.
pub fn init_audio_tower<T: Real, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    rng: &mut R,
    store: &mut ParamStore<T>,
    prefix: &str,
    out_dim: usize,
) {
    init_conv(store, rng, &format!("{prefix}.stem"), audio_width(cfg, 0), 1, 3, true);
    for i in 0..AUDIO_DOWNSAMPLES {
        init_conv(
            store,
            rng,
            &format!("{prefix}.down{i}"),
            audio_width(cfg, i + 1),
            audio_width(cfg, i),
            3,
            true,
        );
    }
    let flat = audio_width(cfg, AUDIO_DOWNSAMPLES)
        * (MEL_BANDS >> AUDIO_DOWNSAMPLES)
        * (SLAB_STEPS >> AUDIO_DOWNSAMPLES);
    init_linear(store, rng, &format!("{prefix}.out"), flat, out_dim, Some(0.0));
}

pub fn audio_tower<'t, T: Real>(
    p: &Bound<'t, T>,
    prefix: &str,
    slabs: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let s = slabs.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != MEL_BANDS || s[3] != SLAB_STEPS {
        return Err(Error::Shape(format!(
            "mel slabs must be [N, 1, {MEL_BANDS}, {SLAB_STEPS}], got {s:?}"
        )));
    }
    let n = s[0];
    let mut h = lrelu(conv(p, &format!("{prefix}.stem"), slabs.add_scalar(-LOG_FLOOR.ln()).scale(MEL_INPUT_SCALE), nn::SAME3));
    for i in 0..AUDIO_DOWNSAMPLES {
        h = lrelu(conv(p, &format!("{prefix}.down{i}"), h, nn::DOWN3));
    }
    let flat = h.numel() / n;
    Ok(linear(p, &format!("{prefix}.out"), h.reshape(&[n, flat])))
}

pub fn init_audio_encoder<T: Real, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    rng: &mut R,
    store: &mut ParamStore<T>,
) {
    init_audio_tower(cfg, rng, store, AUDIO_PREFIX, cfg.audio_dim);
}

/// `f_a` for a batch of slabs `[N, 1, 80, 16]`.
pub fn encode_audio<'t, T: Real>(
    cfg: &ModelConfig,
    p: &Bound<'t, T>,
    slabs: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let f_a = audio_tower(p, AUDIO_PREFIX, slabs)?;
    if f_a.shape()[1] != cfg.audio_dim {
        return Err(Error::Shape(format!(
            "audio encoder emits {} dims, config expects {}",
            f_a.shape()[1],
            cfg.audio_dim
        )));
    }
    Ok(f_a)
}

/// Stacks slabs into a `[N, 1, 80, 16]` tensor.
pub fn slab_tensor<T: Real>(slabs: &[&crate::data::MelSlab]) -> Tensor<T> {
    let mut data = Vec::with_capacity(slabs.len() * MEL_BANDS * SLAB_STEPS);
    for s in slabs {
        data.extend(s.values().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec(&[slabs.len(), 1, MEL_BANDS, SLAB_STEPS], data).expect("slab shape")
}

/// Style vector `w = concat(f_a, f_f)`; with face style disabled the face
/// slots are zero.
pub fn style_vector<'t, T: Real>(
    cfg: &ModelConfig,
    f_a: Var<'t, T>,
    f_f: Var<'t, T>,
) -> Var<'t, T> {
    let f_f = if cfg.use_face_style {
        f_f
    } else {
        f_f.tape().constant(Tensor::zeros(&f_f.shape()))
    };
    Var::concat(&[f_a, f_f], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::data::build_umask;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(cfg: &ModelConfig) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        init_face_encoder(cfg, &mut rng, &mut p);
        init_audio_encoder(cfg, &mut rng, &mut p);
        p
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn pyramid_geometry_at_64() {
        let cfg = ModelConfig::default();
        let p = params(&cfg);
        let tape = Tape::new();
        let b = p.bind(&tape, |_| false);
        let x = tape.constant(Tensor::zeros(&[2, 3, 64, 64]));
        let (pyr, f_f) = encode_face(&cfg, &b, x, x).unwrap();
        assert_eq!(pyr.len(), 10);
        assert!(!pyr.masked);
        let res: Vec<usize> = pyr.maps.iter().map(|m| m.shape()[2]).collect();
        assert_eq!(res, vec![4, 4, 8, 8, 16, 16, 32, 32, 64, 64]);
        assert_eq!(f_f.shape(), vec![2, 64]);
    }

    #[test]
    fn wrong_frame_size_is_rejected() {
        let cfg = ModelConfig::tiny(16);
        let p = params(&cfg);
        let tape = Tape::new();
        let b = p.bind(&tape, |_| false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        assert!(encode_face(&cfg, &b, x, x).is_err());
        let bad = tape.constant(Tensor::zeros(&[1, 1, 80, 15]));
        assert!(encode_audio(&cfg, &b, bad).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_embeddings() {
        let cfg = ModelConfig::tiny(16);
        let p = params(&cfg).zeros_like();
        let tape = Tape::new();
        let b = p.bind(&tape, |_| false);
        let x = tape.constant(randn(&[1, 3, 16, 16], 3));
        let (_, f_f) = encode_face(&cfg, &b, x, x).unwrap();
        assert!(f_f.value().data().iter().all(|&v| v == 0.0));
        // silent slab with zero biases but random weights
        let mut p2 = params(&cfg);
        let names: Vec<String> = p2.names().filter(|n| n.ends_with(".bias")).cloned().collect();
        for n in names {
            let z = Tensor::zeros(p2.get(&n).unwrap().shape());
            p2.insert(n, z);
        }
        let b2 = p2.bind(&tape, |_| false);
        let slab = tape.constant(Tensor::full(&[1, 1, 80, 16], LOG_FLOOR.ln()));
        let f_a = encode_audio(&cfg, &b2, slab).unwrap();
        assert_eq!(f_a.shape(), vec![1, 6]);
        assert!(f_a.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_audio_dim() {
        let cfg = ModelConfig::default();
        let p = params(&cfg);
        let tape = Tape::<f64>::new();
        let b = p.bind(&tape, |_| false);
        let f_a = encode_audio(&cfg, &b, tape.constant(randn(&[3, 1, 80, 16], 2))).unwrap();
        assert_eq!(f_a.shape(), vec![3, 64]);
    }

    #[test]
    fn masking_layers_and_support() {
        let cfg = ModelConfig::default();
        let p = params(&cfg);
        let tape = Tape::new();
        let b = p.bind(&tape, |_| false);
        let x = tape.constant(randn(&[1, 3, 64, 64], 4));
        let (pyr, _) = encode_face(&cfg, &b, x, x).unwrap();
        let before: Vec<_> = pyr.maps.iter().map(|m| m.value()).collect();
        let mask = build_umask(64).unwrap();
        let masked = mask_pyramid(pyr.clone(), &mask).unwrap();
        assert_eq!(first_masked_layer(10), 6);
        for (i, m) in masked.maps.iter().enumerate() {
            let l = i + 1;
            let v = m.value();
            if l <= 5 {
                assert_eq!(v.as_ref(), before[i].as_ref());
                continue;
            }
            let res = v.shape()[2];
            let down = mask.downsample(res);
            let c = v.shape()[1];
            let mut inside = 0.0;
            for ch in 0..c {
                for (pix, &mv) in down.iter().enumerate() {
                    let val = v.data()[ch * res * res + pix];
                    if mv == 1 {
                        inside += val.abs();
                    } else {
                        assert_eq!(val, before[i].data()[ch * res * res + pix]);
                    }
                }
            }
            assert_eq!(inside, 0.0, "layer {l}");
        }
        assert!(mask_pyramid(masked, &mask).is_err());
        let all = mask_pyramid(pyr, &UMask::uniform(64, true)).unwrap();
        for m in &all.maps[5..] {
            assert!(m.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = ModelConfig::tiny(16);
        let p = params(&cfg);
        let names: Vec<String> = p.names().cloned().collect();
        let tensors: Vec<Tensor<f64>> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
        let img = randn(&[2, 3, 16, 16], 5).map(|v| v.abs().min(1.0));
        let slab = randn(&[2, 1, 80, 16], 6);
        let mut inputs = tensors;
        inputs.push(img.clone());
        inputs.push(slab.clone());
        let cfg2 = cfg.clone();
        let report = gradcheck::check(&inputs, 1e-6, 6, move |_, vars| {
            let mut b = Bound::new();
            for (n, v) in names.iter().zip(vars) {
                b.insert(n.clone(), *v);
            }
            let k = names.len();
            let (pyr, f_f) = encode_face(&cfg2, &b, vars[k], vars[k]).unwrap();
            let f_a = encode_audio(&cfg2, &b, vars[k + 1]).unwrap();
            let mut acc = f_f.square().sum() + f_a.tanh().sum();
            for (i, m) in pyr.maps.iter().enumerate() {
                acc = acc + m.square().sum().scale(1.0 / (i + 1) as f64);
            }
            acc
        });
        assert!(report.rel_error < 1e-4, "{report:?}");
    }
}
