//! Few-shot personalization: a per-person style offset head `MLP_Δw(f_f)`
//! and a bounded generator overlay `ΔP`, trained on one person's clips mixed
//! 1:1 with general data while encoders, SyncNet and the generator base stay
//! frozen.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Bound, Tape, Var};
use crate::codec::{AUDIO_PREFIX, FACE_PREFIX};
use crate::config::ModelConfig;
use crate::data::{build_umask, VideoClip, FPS};
use crate::error::{Error, Result};
use crate::generator::{delta_name, zero_overlay, GeneratorParams, GEN_PREFIX};
use crate::nn::{init_linear, linear, lrelu, Adam, ParamStore, Trainables};
use crate::syncnet::WINDOW;
use crate::tensor::Tensor;
use crate::training::{
    discriminator_step, g_objective, Batch, LossBreakdown, RandomConvExtractor, TrainConfig,
    TrainObserver, DISC_PREFIX,
};

pub const MLP_PREFIX: &str = "pers.dw";
/// Minimum personal footage in seconds.
pub const MIN_PERSONAL_SECONDS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalAdapter {
    /// `pers.dw.fc{0,1,2}` weights of the offset head.
    pub mlp_dw: ParamStore<f32>,
    /// Overlay keyed by generator parameter names.
    pub delta_p: ParamStore<f32>,
    pub person_id: String,
    pub lambda_p: f64,
}

impl PersonalAdapter {
    /// Zero-output head and zero overlay: the personalized model starts
    /// identical to the generalized one.
    pub fn init<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        base: &ParamStore<f32>,
        person_id: &str,
        lambda_p: f64,
        rng: &mut R,
    ) -> Self {
        let mut mlp = ParamStore::new();
        let dw = cfg.style_dim();
        let hidden = 2 * dw;
        init_linear(&mut mlp, rng, &format!("{MLP_PREFIX}.fc0"), cfg.face_dim, hidden, Some(0.0));
        init_linear(&mut mlp, rng, &format!("{MLP_PREFIX}.fc1"), hidden, hidden, Some(0.0));
        init_linear(&mut mlp, rng, &format!("{MLP_PREFIX}.fc2"), hidden, cfg.num_layers() * dw, Some(0.0));
        let w = mlp.get(&format!("{MLP_PREFIX}.fc2.weight")).unwrap().shape().to_vec();
        mlp.insert(format!("{MLP_PREFIX}.fc2.weight"), Tensor::zeros(&w));
        Self {
            mlp_dw: mlp,
            delta_p: zero_overlay(base),
            person_id: person_id.to_string(),
            lambda_p,
        }
    }

    /// All adapter arrays in one store (`pers.dw.*` and `delta.gen.*`).
    pub fn to_store(&self) -> ParamStore<f32> {
        let mut s = self.mlp_dw.clone();
        for (k, v) in self.delta_p.iter() {
            s.insert(delta_name(k), v.clone());
        }
        s
    }

    pub fn from_store(store: &ParamStore<f32>, person_id: &str, lambda_p: f64) -> Self {
        let mlp_dw = store.filter_prefix(&format!("{MLP_PREFIX}."));
        let mut delta_p = ParamStore::new();
        for (k, v) in store.filter_prefix("delta.").iter() {
            delta_p.insert(&k["delta.".len()..], v.clone());
        }
        Self {
            mlp_dw,
            delta_p,
            person_id: person_id.to_string(),
            lambda_p,
        }
    }

    /// Shape checks against a model and its config.
    pub fn validate(&self, cfg: &ModelConfig, base: &ParamStore<f32>) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fresh = Self::init(cfg, base, "", 0.0, &mut rng);
        fresh.mlp_dw.check_congruent(&self.mlp_dw)?;
        if self.mlp_dw.len() != fresh.mlp_dw.len() {
            return Err(Error::Shape("adapter head is incomplete".into()));
        }
        base.check_congruent(&self.delta_p)?;
        if self.delta_p.names().any(|n| !n.starts_with(&format!("{GEN_PREFIX}."))) {
            return Err(Error::InvalidArgument("overlay may only cover generator parameters".into()));
        }
        Ok(())
    }

    /// Base parameters with `ΔP` folded in.
    pub fn effective(&self, base: &ParamStore<f32>) -> Result<ParamStore<f32>> {
        let gp = crate::generator::apply_overlay(&GeneratorParams::new(base.clone()), self.delta_p.clone())?;
        Ok(gp.effective())
    }
}

/// Hidden features of the offset head. The embedding is normalized to unit
/// second moment first: the bottleneck is small and its scale drifts with
/// training, which would otherwise leave the head nearly input-blind.
fn head_hidden<'t, T: crate::tensor::Real>(p: &Bound<'t, T>, f_f: Var<'t, T>) -> Var<'t, T> {
    let [n, d] = f_f.shape()[..] else { unreachable!() };
    let norm = f_f.square().sum_to(&[n, 1]).scale(1.0 / d as f64).add_scalar(1e-8).rsqrt();
    let h = lrelu(linear(p, &format!("{MLP_PREFIX}.fc0"), f_f.mul_bcast(norm)));
    lrelu(linear(p, &format!("{MLP_PREFIX}.fc1"), h))
}

/// `L` offsets `[N, d_w]` for face embeddings `[N, face_dim]`; `p` must hold
/// the `pers.dw.*` entries.
pub fn predict_dw<'t, T: crate::tensor::Real>(
    cfg: &ModelConfig,
    p: &Bound<'t, T>,
    f_f: Var<'t, T>,
) -> Result<Vec<Var<'t, T>>> {
    let s = f_f.shape();
    if s.len() != 2 || s[1] != cfg.face_dim {
        return Err(Error::Shape(format!(
            "face embedding must be [N, {}], got {s:?}",
            cfg.face_dim
        )));
    }
    let out = linear(p, &format!("{MLP_PREFIX}.fc2"), head_hidden(p, f_f));
    let dw = cfg.style_dim();
    Ok((0..cfg.num_layers()).map(|l| out.narrow(1, l * dw, dw)).collect())
}

/// `λ_p·(Σ‖Δw‖² + Σ‖ΔP‖²)`, with the style offsets averaged over the batch.
pub fn personal_regularizer<'t, T: crate::tensor::Real>(
    dw: &[Var<'t, T>],
    dp: &[Var<'t, T>],
    lambda_p: f64,
) -> Result<Var<'t, T>> {
    let tape = dw
        .first()
        .or(dp.first())
        .map(|v| v.tape())
        .ok_or_else(|| Error::InvalidArgument("nothing to regularize".into()))?;
    let mut total = tape.scalar(0.0);
    for v in dw {
        if !v.value().all_finite() {
            return Err(Error::NonFinite("style offset".into()));
        }
        let n = v.shape()[0].max(1);
        total = total + v.square().sum().scale(1.0 / n as f64);
    }
    for v in dp {
        if !v.value().all_finite() {
            return Err(Error::NonFinite("generator overlay".into()));
        }
        total = total + v.square().sum();
    }
    Ok(total.scale(lambda_p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizeConfig {
    pub epochs: usize,
    /// General windows interleaved per personal window.
    pub general_per_personal: usize,
    pub lambda_p: f64,
    /// Adam step size of the offset head.
    pub lr_head: f64,
    /// Adam step size of the generator overlay.
    pub lr_overlay: f64,
    /// Loss weights and adversarial settings of the generalized objective.
    pub train: TrainConfig,
    pub person_id: String,
    pub seed: u64,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            general_per_personal: 1,
            lambda_p: 1.0,
            lr_head: 1e-3,
            lr_overlay: 1e-3,
            train: TrainConfig::default(),
            person_id: "person".into(),
            seed: 0,
        }
    }
}

impl PersonalizeConfig {
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = self.train.to_kv();
        m.insert("personalize.epochs".into(), self.epochs.to_string());
        m.insert("personalize.general_per_personal".into(), self.general_per_personal.to_string());
        m.insert("personalize.lambda_p".into(), self.lambda_p.to_string());
        m.insert("personalize.lr_head".into(), self.lr_head.to_string());
        m.insert("personalize.lr_overlay".into(), self.lr_overlay.to_string());
        m.insert("personalize.person_id".into(), self.person_id.clone());
        m.insert("personalize.seed".into(), self.seed.to_string());
        m
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self {
            train: TrainConfig::from_kv(kv)?,
            ..Default::default()
        };
        for (k, v) in kv {
            let Some(key) = k.strip_prefix("personalize.") else { continue };
            let bad = || Error::Config(format!("{k}: cannot parse `{v}`"));
            match key {
                "epochs" => c.epochs = v.parse().map_err(|_| bad())?,
                "general_per_personal" => c.general_per_personal = v.parse().map_err(|_| bad())?,
                "lambda_p" => c.lambda_p = v.parse().map_err(|_| bad())?,
                "lr_head" => c.lr_head = v.parse().map_err(|_| bad())?,
                "lr_overlay" => c.lr_overlay = v.parse().map_err(|_| bad())?,
                "person_id" => c.person_id = v.clone(),
                "seed" => c.seed = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        if !(c.lambda_p >= 0.0 && c.lambda_p.is_finite()) {
            return Err(Error::Config("personalize.lambda_p must be finite and non-negative".into()));
        }
        Ok(c)
    }

    /// Personal windows per epoch: every personal frame once, five per window.
    pub fn steps_per_epoch(person_clips: &[VideoClip]) -> usize {
        person_clips.iter().map(|c| c.len()).sum::<usize>().div_ceil(WINDOW)
    }
}

/// Root-mean over frames of `‖ΔW‖_F` (all layers) for the first window of
/// every clip, with the reference taken from the same clip.
pub fn dw_norm(
    cfg: &ModelConfig,
    base: &ParamStore<f32>,
    adapter: &PersonalAdapter,
    clips: &[VideoClip],
) -> Result<f64> {
    let mask = build_umask(cfg.image_size)?;
    let mut sq = 0.0;
    let mut n = 0usize;
    for (i, c) in clips.iter().enumerate() {
        let batch = Batch::<f32>::build(i, c, &[0], c.len() / 2, &mask)?;
        let tape = Tape::new();
        let b = base.bind(&tape, |_| false);
        let (_, f_f) = crate::codec::encode_face(cfg, &b, tape.constant(batch.masked), tape.constant(batch.refs))?;
        let head = adapter.mlp_dw.bind(&tape, |_| false);
        for v in predict_dw(cfg, &head, f_f)? {
            sq += v.value().sq_norm() as f64;
        }
        n += WINDOW;
    }
    Ok((sq / n.max(1) as f64).sqrt())
}

/// Per-entry curvature bounds for [`Adam::step_damped`]. For the overlay the
/// penalty Hessian is exactly `2λ`. For the last head layer it is `2λ·H` with
/// `H = mean h̃ h̃ᵀ` over the batch's hidden features `h̃ = [h·gain, 1]`,
/// bounded by its absolute row sums. The rest of the head gets none.
fn penalty_curvature(
    adapter: &PersonalAdapter,
    f_f: &Tensor<f32>,
    lambda_p: f64,
) -> (BTreeMap<String, Tensor<f32>>, BTreeMap<String, Tensor<f32>>) {
    let two_l = (2.0 * lambda_p) as f32;
    let overlay = adapter
        .delta_p
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::full(v.shape(), two_l)))
        .collect();

    let tape = Tape::new();
    let p = adapter.mlp_dw.bind(&tape, |_| false);
    let h = head_hidden(&p, tape.constant(f_f.clone())).value().as_ref().clone();
    let (n, k) = (h.shape()[0], h.shape()[1]);
    let gain = 1.0 / (k as f64).sqrt();
    let feat = |r: usize, i: usize| if i < k { h.data()[r * k + i] as f64 * gain } else { 1.0 };
    let rows: Vec<f64> = (0..=k)
        .map(|i| {
            (0..=k)
                .map(|j| ((0..n).map(|r| feat(r, i) * feat(r, j)).sum::<f64>() / n as f64).abs())
                .sum()
        })
        .collect();
    let wn = format!("{MLP_PREFIX}.fc2.weight");
    let out = adapter.mlp_dw.get(&wn).map_or(0, |w| w.shape()[1]);
    let weight = (0..k * out).map(|e| two_l * rows[e / out] as f32).collect();
    let mut head = BTreeMap::new();
    head.insert(wn, Tensor::from_vec(&[k, out], weight).expect("head shape"));
    head.insert(format!("{MLP_PREFIX}.fc2.bias"), Tensor::full(&[out], two_l * rows[k] as f32));
    (overlay, head)
}

/// `predict_dw` as a closure over a bound parameter set.
pub fn dw_head<'a, 't, T: crate::tensor::Real>(
    cfg: &'a ModelConfig,
    p: &'a Bound<'t, T>,
) -> impl Fn(Var<'t, T>) -> Result<Vec<Var<'t, T>>> + 'a {
    move |f| predict_dw(cfg, p, f)
}

fn frozen_names(name: &str) -> bool {
    name.starts_with(&format!("{FACE_PREFIX}."))
        || name.starts_with(&format!("{AUDIO_PREFIX}."))
        || name.starts_with(&format!("{GEN_PREFIX}."))
}

fn check_frozen(before: &ParamStore<f32>, after: &ParamStore<f32>) -> Result<()> {
    for (k, v) in before.iter() {
        let same = after
            .get(k)
            .is_some_and(|w| w.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        if !same {
            return Err(Error::FrozenDrift(k.clone()));
        }
    }
    Ok(())
}

/// Trains an adapter for the person in `person_clips` on top of `base`
/// (encoders, generator and discriminator). The discriminator is updated on
/// a private copy and discarded.
pub fn personalize(
    cfg: &ModelConfig,
    base: &ParamStore<f32>,
    sync: Option<&ParamStore<f32>>,
    person_clips: &[VideoClip],
    general_clips: &[VideoClip],
    pc: &PersonalizeConfig,
    observer: &mut dyn TrainObserver,
) -> Result<PersonalAdapter> {
    cfg.validate()?;
    pc.train.validate()?;
    let seconds: f64 = person_clips.iter().map(|c| c.len() as f64 / FPS as f64).sum();
    if seconds < MIN_PERSONAL_SECONDS {
        return Err(Error::InvalidArgument(format!(
            "personalization needs at least {MIN_PERSONAL_SECONDS} s of footage, got {seconds:.2} s"
        )));
    }
    if pc.general_per_personal > 0 && general_clips.is_empty() {
        return Err(Error::InvalidArgument("general data required for mixing".into()));
    }
    if pc.train.lambda_sync > 0.0 && sync.is_none() {
        return Err(Error::Config(
            "lambda_sync > 0 requires a trained SyncNet checkpoint".into(),
        ));
    }
    for c in person_clips.iter().chain(general_clips) {
        if c.len() < WINDOW || c.size() != cfg.image_size {
            return Err(Error::Shape(format!(
                "clips must have ≥{WINDOW} frames of {0}×{0}",
                cfg.image_size
            )));
        }
    }
    let mut frozen_before = ParamStore::new();
    for (k, v) in base.iter().filter(|(k, _)| frozen_names(k)) {
        frozen_before.insert(k.clone(), v.clone());
    }
    let sync_before = sync.cloned();

    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    let mut adapter = PersonalAdapter::init(cfg, base, &pc.person_id, pc.lambda_p, &mut rng);
    let mut disc = base.filter_prefix(&format!("{DISC_PREFIX}."));
    let mut gp = GeneratorParams::new(base.clone());
    let extractor = RandomConvExtractor::<f32>::new(pc.train.n_vgg)?;
    let mask = build_umask(cfg.image_size)?;
    let mut opt_mlp = Adam::new(pc.lr_head, pc.train.beta1, pc.train.beta2);
    let mut opt_dp = Adam::new(pc.lr_overlay, pc.train.beta1, pc.train.beta2);
    let mut opt_d = Adam::new(pc.train.lr_d, pc.train.beta1, pc.train.beta2);
    let per_epoch = PersonalizeConfig::steps_per_epoch(person_clips);
    let mut step = 0;
    for _ in 0..pc.epochs {
        for _ in 0..per_epoch {
            let mut sources = vec![person_clips];
            sources.extend(std::iter::repeat_n(general_clips, pc.general_per_personal));
            for clips in sources {
                let batch = Batch::<f32>::sample(&mut rng, clips, pc.train.windows_per_step, &mask)?;
                gp.delta = Some(adapter.delta_p.clone());
                let tape = Tape::new();
                let mut b = gp.bind(&tape, false, true);
                b.extend(adapter.mlp_dw.bind(&tape, |_| true));
                b.extend(disc.bind(&tape, |_| false));
                let dw_fn = dw_head(cfg, &b);
                let obj = g_objective(cfg, &pc.train, &tape, &b, sync, &extractor, &mask, &batch, step, Some(&dw_fn))?;
                // The regularizer is part of the gradient; its curvature damps
                // the Adam steps so that large λ_p settles instead of
                // oscillating at ~lr per entry.
                let dp_vars: Vec<_> = adapter.delta_p.names().map(|k| b[delta_name(k).as_str()]).collect();
                let reg = personal_regularizer(obj.forward.delta_w.as_deref().unwrap_or(&[]), &dp_vars, pc.lambda_p)?;
                let mut rec: LossBreakdown = obj.record;
                let reg_v = reg.item() as f64;
                if !reg_v.is_finite() {
                    return Err(Error::NonFinite(format!("regularizer at step {step}")));
                }
                let fake = obj.forward.fake.value().as_ref().clone();
                let (kappa_dp, kappa_head) = penalty_curvature(&adapter, &obj.forward.f_f.value(), pc.lambda_p);
                let trainable = |n: &str| n.starts_with("delta.") || n.starts_with(&format!("{MLP_PREFIX}."));
                let grads = Trainables::from_bound(&b, trainable).grads(obj.total + reg);
                let (dp_g, mlp_g): (BTreeMap<_, _>, BTreeMap<_, _>) =
                    grads.into_iter().partition(|(k, _)| k.starts_with("delta."));
                let dp_g = dp_g
                    .into_iter()
                    .map(|(k, v)| (k["delta.".len()..].to_string(), v))
                    .collect();
                opt_mlp.step_damped(&mut adapter.mlp_dw, &mlp_g, &kappa_head);
                opt_dp.step_damped(&mut adapter.delta_p, &dp_g, &kappa_dp);
                if pc.train.adversarial {
                    let (d, r1) = discriminator_step(cfg, &pc.train, &mut disc, &mut opt_d, &batch.targets, &fake, step)?;
                    rec.l_adv_d = d;
                    rec.r1 = r1;
                }
                rec.total_g += reg_v;
                observer.on_step(&rec)?;
                step += 1;
            }
        }
    }
    let after: ParamStore<f32> = gp.base.filter_names(&frozen_before);
    check_frozen(&frozen_before, &after)?;
    check_frozen(&frozen_before, &base.filter_names(&frozen_before))?;
    if let (Some(a), Some(b)) = (&sync_before, sync) {
        check_frozen(a, b)?;
    }
    Ok(adapter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{preset_speakers, synthesize_clip};
    use crate::gradcheck;
    use crate::tensor::Tensor;
    use crate::training::{init_model, NoopObserver};

    fn tiny() -> (ModelConfig, ParamStore<f32>) {
        let cfg = ModelConfig::tiny(16);
        let base = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        (cfg, base)
    }

    #[test]
    fn fresh_head_predicts_zero_offsets() {
        let (cfg, base) = tiny();
        let a = PersonalAdapter::init(&cfg, &base, "b", 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let tape = Tape::new();
        let b = a.mlp_dw.bind(&tape, |_| false);
        let f = tape.constant(Tensor::randn(&[3, cfg.face_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let dw = predict_dw(&cfg, &b, f).unwrap();
        assert_eq!(dw.len(), cfg.num_layers());
        for v in &dw {
            assert_eq!(v.shape(), vec![3, cfg.style_dim()]);
            assert!(v.value().data().iter().all(|&x| x == 0.0));
        }
        let bad = tape.constant(Tensor::zeros(&[3, cfg.face_dim + 1]));
        assert!(predict_dw(&cfg, &b, bad).is_err());
        assert_eq!(ModelConfig::default().num_layers(), 10);
    }

    #[test]
    fn regularizer_examples() {
        let tape = Tape::<f64>::new();
        let mut w = Tensor::zeros(&[1, 4]);
        w.data_mut()[2] = 0.1;
        let mut p = Tensor::zeros(&[2, 2]);
        p.data_mut()[1] = 0.2;
        let dw = [tape.constant(w)];
        let dp = [tape.constant(p)];
        assert!((personal_regularizer(&dw, &dp, 1.0).unwrap().item() - 0.05).abs() < 1e-12);
        assert!((personal_regularizer(&dw, &dp, 2.0).unwrap().item() - 0.10).abs() < 1e-12);
        let z = [tape.constant(Tensor::zeros(&[1, 4]))];
        assert_eq!(personal_regularizer(&z, &[], 5.0).unwrap().item(), 0.0);
        let nan = [tape.constant(Tensor::full(&[1, 1], f64::NAN))];
        assert!(personal_regularizer(&nan, &[], 1.0).is_err());
    }

    #[test]
    fn offset_head_gradients() {
        let cfg = ModelConfig::tiny(16);
        let mut a = PersonalAdapter::init(&cfg, &ParamStore::<f32>::new(), "x", 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        // non-zero output layer so every weight receives gradient
        let w = a.mlp_dw.get("pers.dw.fc2.weight").unwrap().shape().to_vec();
        a.mlp_dw.insert("pers.dw.fc2.weight", Tensor::randn(&w, 1.0, &mut ChaCha8Rng::seed_from_u64(5)));
        let store = a.mlp_dw.cast::<f64>();
        let names: Vec<String> = store.names().cloned().collect();
        let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        inputs.push(Tensor::randn(&[2, cfg.face_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(6)));
        let r = gradcheck::check(&inputs, 1e-6, 6, move |_tape, vars| {
            let mut b = Bound::new();
            for (n, v) in names.iter().zip(vars) {
                b.insert(n.clone(), *v);
            }
            let dw = predict_dw(&cfg, &b, vars[names.len()]).unwrap();
            personal_regularizer(&dw, &[], 0.7).unwrap()
        });
        assert!(r.rel_error < 1e-4, "{r:?}");
    }

    fn person_clips(seconds: f64) -> Vec<VideoClip> {
        let [_, b] = preset_speakers();
        vec![synthesize_clip(&b, seconds, 9, 16).unwrap()]
    }

    fn general_clips() -> Vec<VideoClip> {
        let [a, b] = preset_speakers();
        vec![synthesize_clip(&a, 1.0, 1, 16).unwrap(), synthesize_clip(&b, 1.0, 2, 16).unwrap()]
    }

    fn quick(epochs: usize, lambda_p: f64) -> PersonalizeConfig {
        PersonalizeConfig {
            epochs,
            lambda_p,
            train: TrainConfig {
                lambda_sync: 0.0,
                r1_interval: 4,
                ..Default::default()
            },
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_give_the_initial_adapter() {
        let (cfg, base) = tiny();
        let a = personalize(&cfg, &base, None, &person_clips(5.0), &general_clips(), &quick(0, 1.0), &mut NoopObserver).unwrap();
        assert_eq!(a, PersonalAdapter::init(&cfg, &base, "person", 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        assert!(a.delta_p.iter().all(|(_, v)| v.sq_norm() == 0.0));
        assert_eq!(a.effective(&base).unwrap(), base);
    }

    #[test]
    fn rejects_short_footage_and_missing_syncnet() {
        let (cfg, base) = tiny();
        let short = personalize(&cfg, &base, None, &person_clips(4.0), &general_clips(), &quick(1, 1.0), &mut NoopObserver);
        assert!(matches!(short, Err(Error::InvalidArgument(_))));
        let mut pc = quick(1, 1.0);
        pc.train.lambda_sync = 1.0;
        let r = personalize(&cfg, &base, None, &person_clips(5.0), &general_clips(), &pc, &mut NoopObserver);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn adapter_store_round_trip() {
        let (cfg, base) = tiny();
        let mut a = PersonalAdapter::init(&cfg, &base, "b", 2.0, &mut ChaCha8Rng::seed_from_u64(2));
        let k = a.delta_p.names().next().unwrap().clone();
        a.delta_p.get_mut(&k).unwrap().data_mut()[0] = 0.5;
        let back = PersonalAdapter::from_store(&a.to_store(), "b", 2.0);
        assert_eq!(back, a);
        back.validate(&cfg, &base).unwrap();
        let eff = a.effective(&base).unwrap();
        assert_eq!(eff.get(&k).unwrap().data()[0], base.get(&k).unwrap().data()[0] + 0.5);
        assert!(a.delta_p.get("gen.const").is_none());
    }

    #[test]
    fn one_epoch_updates_only_the_adapter() {
        let (cfg, base) = tiny();
        let mut sync = ParamStore::new();
        crate::syncnet::init_syncnet(&cfg, &mut ChaCha8Rng::seed_from_u64(8), &mut sync);
        let (base0, sync0) = (base.clone(), sync.clone());
        let mut pc = quick(1, 1.0);
        pc.train.lambda_sync = 1.0;
        let run = || personalize(&cfg, &base, Some(&sync), &person_clips(5.0), &general_clips(), &pc, &mut NoopObserver).unwrap();
        let a = run();
        assert_eq!(base, base0);
        assert_eq!(sync, sync0);
        assert!(a.delta_p.iter().any(|(_, v)| v.sq_norm() > 0.0));
        assert_eq!(a, run());
    }

    #[test]
    fn huge_lambda_pins_the_deltas() {
        let (cfg, base) = tiny();
        let a = personalize(&cfg, &base, None, &person_clips(5.0), &general_clips(), &quick(1, 1e6), &mut NoopObserver).unwrap();
        let dp: f64 = a.delta_p.iter().map(|(_, v)| v.sq_norm() as f64).sum();
        assert!(dp.sqrt() < 1e-3, "{dp}");
        let dw = dw_norm(&cfg, &base, &a, &person_clips(5.0)).unwrap();
        assert!(dw < 1e-3, "{dw}");
    }
}
