//! Style-modulated generator.
//!
//! A learned 4×4 constant is refined by `L` modulated 3×3 convolutions, two
//! per resolution, the first of each pair upsampling ×2 (except layer 1).
//! Layer `l` receives style `w_l = w + Δw_l` through a per-layer affine, and
//! after its convolution the masked pyramid map for that layer is projected
//! by a 1×1 `B_l` and added (the slot StyleGAN uses for noise). Per-resolution
//! toRGB outputs are skip-accumulated and squashed into `[0, 1]`.

use rand::Rng;

use crate::autograd::{Bound, Tape, Var};
use crate::codec::FeaturePyramid;
use crate::config::ModelConfig;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{self, add_channel_bias, init_linear, linear, lrelu, ParamStore};
use crate::tensor::{ConvGeom, Real, Tensor};

pub const GEN_PREFIX: &str = "gen";
/// The learned constant input; not covered by personal overlays.
pub const CONST_NAME: &str = "gen.const";
pub const DEMOD_EPS: f64 = 1e-8;

/// Per-sample base style plus optional per-layer offsets.
#[derive(Debug, Clone)]
pub struct StyleState<'t, T: Real> {
    /// `[N, d_w]`.
    pub w: Var<'t, T>,
    /// `L` entries of `[N, d_w]` or `[1, d_w]`; `None` means all zero.
    pub delta_w: Option<Vec<Var<'t, T>>>,
}

impl<'t, T: Real> StyleState<'t, T> {
    pub fn shared(w: Var<'t, T>) -> Self {
        Self { w, delta_w: None }
    }

    pub fn with_offsets(w: Var<'t, T>, delta_w: Vec<Var<'t, T>>) -> Self {
        Self {
            w,
            delta_w: Some(delta_w),
        }
    }
}

/// Generator base parameters with an optional personal overlay `ΔP`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams<T> {
    pub base: ParamStore<T>,
    pub delta: Option<ParamStore<T>>,
}

impl<T: Real> GeneratorParams<T> {
    pub fn new(base: ParamStore<T>) -> Self {
        Self { base, delta: None }
    }

    /// `base + delta` as a plain store.
    pub fn effective(&self) -> ParamStore<T> {
        let mut out = self.base.clone();
        if let Some(d) = &self.delta {
            for (k, v) in d.iter() {
                out.get_mut(k).expect("congruent overlay").add_assign(v);
            }
        }
        out
    }

    /// Binds `base + delta` on `tape` under the base names. Base entries are
    /// leaves when `train_base`, overlay entries when `train_delta`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, train_base: bool, train_delta: bool) -> Bound<'t, T> {
        let mut b = self.base.bind(tape, |_| train_base);
        if let Some(d) = &self.delta {
            for (k, v) in d.iter() {
                let dv = if train_delta {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                let sum = b[k.as_str()] + dv;
                b.insert(format!("{k}"), sum);
                b.insert(delta_name(k), dv);
            }
        }
        b
    }
}

/// Name under which an overlay entry is exposed by [`GeneratorParams::bind`].
pub fn delta_name(base_name: &str) -> String {
    format!("delta.{base_name}")
}

/// Returns a new parameter view with `delta` overlaid on `params.base`; the
/// base itself is never modified.
pub fn apply_overlay<T: Real>(
    params: &GeneratorParams<T>,
    delta: ParamStore<T>,
) -> Result<GeneratorParams<T>> {
    params.base.check_congruent(&delta)?;
    if delta.contains(CONST_NAME) {
        return Err(Error::InvalidArgument(format!(
            "overlay must not cover `{CONST_NAME}`"
        )));
    }
    Ok(GeneratorParams {
        base: params.base.clone(),
        delta: Some(delta),
    })
}

/// Zero overlay covering every generator parameter except the constant.
pub fn zero_overlay<T: Real>(base: &ParamStore<T>) -> ParamStore<T> {
    let mut z = base.filter_prefix(&format!("{GEN_PREFIX}.")).zeros_like();
    z.remove(CONST_NAME);
    z
}

fn layer_in_channels(cfg: &ModelConfig, l: usize) -> usize {
    let res = cfg.layer_res(l);
    if l == 1 {
        cfg.gen_channels(4)
    } else if l % 2 == 1 {
        cfg.gen_channels(res / 2)
    } else {
        cfg.gen_channels(res)
    }
}

pub fn init_generator<T: Real, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    rng: &mut R,
    store: &mut ParamStore<T>,
) {
    let dw = cfg.style_dim();
    store.insert(CONST_NAME, Tensor::randn(&[1, cfg.gen_channels(4), 4, 4], 1.0, rng));
    for i in 0..cfg.mapping_layers {
        init_linear(store, rng, &format!("{GEN_PREFIX}.map{i}"), dw, dw, Some(0.0));
    }
    for l in 1..=cfg.num_layers() {
        let res = cfg.layer_res(l);
        let cin = layer_in_channels(cfg, l);
        let cout = cfg.gen_channels(res);
        let p = format!("{GEN_PREFIX}.l{l}");
        init_linear(store, rng, &format!("{p}.affine"), dw, cin, Some(1.0));
        store.insert(format!("{p}.weight"), Tensor::randn(&[cout, cin, 3, 3], 1.0, rng));
        store.insert(format!("{p}.bias"), Tensor::zeros(&[cout]));
        store.insert(
            format!("{p}.inject.weight"),
            Tensor::randn(&[cout, cfg.enc_channels(res), 1, 1], 1.0, rng),
        );
    }
    for res in cfg.resolutions() {
        let cin = cfg.gen_channels(res);
        let p = format!("{GEN_PREFIX}.rgb{res}");
        init_linear(store, rng, &format!("{p}.affine"), dw, cin, Some(1.0));
        store.insert(format!("{p}.weight"), Tensor::randn(&[3, cin, 1, 1], 1.0, rng));
        store.insert(format!("{p}.bias"), Tensor::zeros(&[3]));
    }
}

fn check_finite<T: Real>(v: &Var<'_, T>, what: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Modulated convolution of `x: [N, Cin, H, W]` with `weight: [Cout, Cin, k, k]`
/// under per-sample input-channel scales `style: [N, Cin]`.
///
/// Computed as scale-input, convolve, scale-output, which equals convolving
/// each sample with its own weight `w[o,i]·s[i]`, demodulated by
/// `1/sqrt(Σ_{i,k} (w[o,i,k]·s[i])² + ε)` when `demodulate` is set.
pub fn modulated_conv<'t, T: Real>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    style: Var<'t, T>,
    demodulate: bool,
    geom: ConvGeom,
) -> Result<Var<'t, T>> {
    check_finite(&style, "style")?;
    let (xs, ws, ss) = (x.shape(), weight.shape(), style.shape());
    if xs.len() != 4 || ws.len() != 4 || ss != [xs[0], xs[1]] || ws[1] != xs[1] {
        return Err(Error::Shape(format!(
            "modulated conv: x {xs:?}, weight {ws:?}, style {ss:?}"
        )));
    }
    let (n, cin, cout) = (xs[0], xs[1], ws[0]);
    let xm = x.mul_bcast(style.reshape(&[n, cin, 1, 1]));
    let y = xm.conv2d(weight, geom);
    if !demodulate {
        return Ok(y);
    }
    // Σ_k w[o,i,k]² as [Cin, Cout]
    let w_sq = weight.square().sum_to(&[cout, cin, 1, 1]).reshape(&[cout, cin]).t();
    let norm = style.square().matmul(w_sq).add_scalar(DEMOD_EPS).rsqrt();
    Ok(y.mul_bcast(norm.reshape(&[n, cout, 1, 1])))
}

/// The explicit per-sample weights `[N, Cout, Cin, k, k]` that
/// [`modulated_conv`] applies implicitly.
pub fn modulated_weights<T: Real>(
    weight: &Tensor<T>,
    style: &Tensor<T>,
    demodulate: bool,
) -> Tensor<T> {
    let ws = weight.shape();
    let (cout, cin, kk) = (ws[0], ws[1], ws[2] * ws[3]);
    let n = style.shape()[0];
    let mut out = Vec::with_capacity(n * weight.len());
    for s in 0..n {
        for o in 0..cout {
            let start = out.len();
            for i in 0..cin {
                let si = style.data()[s * cin + i];
                for k in 0..kk {
                    out.push(weight.data()[(o * cin + i) * kk + k] * si);
                }
            }
            if demodulate {
                let ss: f64 = out[start..].iter().map(|v| v.to_f64_lossy().powi(2)).sum();
                let d = T::of(1.0 / (ss + DEMOD_EPS).sqrt());
                for v in &mut out[start..] {
                    *v = *v * d;
                }
            }
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(ws);
    Tensor::from_vec(&shape, out).expect("modulated weight shape")
}

fn equalized<'t, T: Real>(w: Var<'t, T>) -> Var<'t, T> {
    let s = w.shape();
    let fan_in: usize = s[1..].iter().product();
    w.scale(1.0 / (fan_in as f64).sqrt())
}

/// Per-layer styles `w_l` after the optional mapping layers.
fn layer_styles<'t, T: Real>(
    cfg: &ModelConfig,
    p: &Bound<'t, T>,
    style: &StyleState<'t, T>,
) -> Result<Vec<Var<'t, T>>> {
    let l_total = cfg.num_layers();
    let ws = style.w.shape();
    if ws.len() != 2 || ws[1] != cfg.style_dim() {
        return Err(Error::Shape(format!(
            "style must be [N, {}], got {ws:?}",
            cfg.style_dim()
        )));
    }
    check_finite(&style.w, "style")?;
    let mut w = style.w;
    for i in 0..cfg.mapping_layers {
        w = lrelu(linear(p, &format!("{GEN_PREFIX}.map{i}"), w));
    }
    match &style.delta_w {
        None => Ok(vec![w; l_total]),
        Some(d) => {
            if d.len() != l_total {
                return Err(Error::Shape(format!(
                    "expected {l_total} style offsets, got {}",
                    d.len()
                )));
            }
            d.iter()
                .map(|dl| {
                    let s = dl.shape();
                    if s.len() != 2 || s[1] != ws[1] || (s[0] != ws[0] && s[0] != 1) {
                        return Err(Error::Shape(format!("style offset shape {s:?}")));
                    }
                    check_finite(dl, "style offset")?;
                    Ok(w.add_bcast(*dl))
                })
                .collect()
        }
    }
}

/// Renders `[N, 3, S, S]` frames in `[0, 1]` from a masked pyramid and styles.
/// `p` must hold the (effective) generator parameters under their base names.
pub fn generate<'t, T: Real>(
    cfg: &ModelConfig,
    p: &Bound<'t, T>,
    pyr: &FeaturePyramid<'t, T>,
    style: &StyleState<'t, T>,
) -> Result<Var<'t, T>> {
    if !pyr.masked {
        return Err(Error::Pipeline(
            "generator requires a masked pyramid (mask_pyramid must run first)".into(),
        ));
    }
    let l_total = cfg.num_layers();
    if pyr.len() != l_total {
        return Err(Error::Shape(format!(
            "pyramid has {} layers, generator has {l_total}",
            pyr.len()
        )));
    }
    let n = style.w.shape()[0];
    for (i, m) in pyr.maps.iter().enumerate() {
        let res = cfg.layer_res(i + 1);
        let s = m.shape();
        if s != [n, cfg.enc_channels(res), res, res] {
            return Err(Error::Shape(format!("pyramid layer {} has shape {s:?}", i + 1)));
        }
    }
    let styles = layer_styles(cfg, p, style)?;

    let c4 = cfg.gen_channels(4);
    let mut x = p[CONST_NAME].expand(&[n, c4, 4, 4]);
    let mut img: Option<Var<'t, T>> = None;
    for l in 1..=l_total {
        let pre = format!("{GEN_PREFIX}.l{l}");
        if l > 1 && l % 2 == 1 {
            x = x.upsample2();
        }
        let s = linear(p, &format!("{pre}.affine"), styles[l - 1]);
        let w = equalized(p[&format!("{pre}.weight") as &str]);
        x = modulated_conv(x, w, s, true, nn::SAME3)?;
        let b = equalized(p[&format!("{pre}.inject.weight") as &str]);
        x = x + pyr.maps[l - 1].conv2d(b, nn::POINT);
        x = lrelu(add_channel_bias(x, p[&format!("{pre}.bias") as &str]));
        if l % 2 == 0 {
            let res = cfg.layer_res(l);
            let rp = format!("{GEN_PREFIX}.rgb{res}");
            let s = linear(p, &format!("{rp}.affine"), styles[l - 1]);
            let w = equalized(p[&format!("{rp}.weight") as &str]);
            let rgb = modulated_conv(x, w, s, false, nn::POINT)?;
            let rgb = add_channel_bias(rgb, p[&format!("{rp}.bias") as &str]);
            img = Some(match img {
                None => rgb,
                Some(prev) => prev.upsample2() + rgb,
            });
        }
    }
    let img = img.expect("at least one resolution");
    Ok(img.tanh().add_scalar(1.0).scale(0.5))
}

/// Square region of a full frame holding the face crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

/// Pastes `generated` into a copy of `original` at `crop`, blending linearly
/// from the crop edge over `feather_px` pixels. Pixels outside the box are
/// untouched.
pub fn blend_into_frame(
    generated: &Image,
    original: &Image,
    crop: CropBox,
    feather_px: usize,
) -> Result<Image> {
    if generated.width() != crop.size || generated.height() != crop.size {
        return Err(Error::Shape(format!(
            "generated crop is {}x{}, box is {}",
            generated.width(),
            generated.height(),
            crop.size
        )));
    }
    if crop.x + crop.size > original.width() || crop.y + crop.size > original.height() {
        return Err(Error::OutOfRange(format!(
            "crop box {crop:?} outside {}x{} frame",
            original.width(),
            original.height()
        )));
    }
    let mut out = original.clone();
    for j in 0..crop.size {
        for i in 0..crop.size {
            let d = i.min(j).min(crop.size - 1 - i).min(crop.size - 1 - j);
            let alpha = if feather_px == 0 {
                1.0
            } else {
                (d as f32 / feather_px as f32).min(1.0)
            };
            let (fx, fy) = (crop.x + i, crop.y + j);
            for c in 0..3 {
                let g = generated.get(c, i, j);
                let o = original.get(c, fx, fy);
                let v = if alpha == 1.0 { g } else { o + alpha * (g - o) };
                out.set(c, fx, fy, v);
            }
        }
    }
    Ok(out)
}
