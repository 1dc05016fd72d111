//! Parameter storage, layer helpers and the Adam optimizer.
//!
//! Weights are stored with unit-variance initialisation and scaled at run
//! time by `1/sqrt(fan_in)` (equalized learning rate), so one learning rate
//! suits every layer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Real, Tensor};

pub const LRELU_SLOPE: f64 = 0.2;

/// Ordered name → tensor map. Names are stable dotted paths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Entries whose name also appears in `names`.
    pub fn filter_names<U>(&self, names: &ParamStore<U>) -> ParamStore<T> {
        ParamStore {
            map: self
                .map
                .iter()
                .filter(|(k, _)| names.map.contains_key(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.map.extend(other.map);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    /// Same names with zero-filled tensors.
    pub fn zeros_like(&self) -> ParamStore<T> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Sum of squared entries over all tensors.
    pub fn sq_norm(&self) -> f64 {
        self.map.values().map(|t| t.sq_norm().to_f64_lossy()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Binds every tensor on `tape`; names matching `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        let mut b = Bound::new();
        for (k, v) in &self.map {
            let var = if trainable(k) {
                tape.leaf(v.clone())
            } else {
                tape.constant(v.clone())
            };
            b.insert(k.clone(), var);
        }
        b
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_congruent(&self, other: &ParamStore<T>) -> Result<()> {
        for (k, v) in &other.map {
            match self.map.get(k) {
                None => return Err(Error::Shape(format!("overlay entry `{k}` has no base"))),
                Some(b) if b.shape() != v.shape() => {
                    return Err(Error::Shape(format!(
                        "overlay `{k}` shape {:?} vs base {:?}",
                        v.shape(),
                        b.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Differentiable leaves and their names, collected for a gradient call.
pub struct Trainables<'t, T: Real> {
    pub names: Vec<String>,
    pub vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Trainables<'t, T> {
    pub fn from_bound(b: &Bound<'t, T>, filter: impl Fn(&str) -> bool) -> Self {
        let mut names: Vec<String> = b
            .names()
            .filter(|n| filter(n) && b[n.as_str()].requires_grad())
            .cloned()
            .collect();
        names.sort();
        let vars = names.iter().map(|n| b[n.as_str()]).collect();
        Self { names, vars }
    }

    /// Gradients of `loss` keyed by name; parameters the loss does not touch
    /// get zeros.
    pub fn grads(&self, loss: Var<'t, T>) -> BTreeMap<String, Tensor<T>> {
        let tape = loss.tape();
        let gs = tape.grad(loss, &self.vars, false);
        self.names
            .iter()
            .zip(gs)
            .zip(&self.vars)
            .map(|((n, g), v)| {
                let t = match g {
                    Some(g) => g.value().as_ref().clone(),
                    None => Tensor::zeros(&v.shape()),
                };
                (n.clone(), t)
            })
            .collect()
    }
}

pub fn init_conv<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    bias: bool,
) {
    store.insert(format!("{name}.weight"), Tensor::randn(&[cout, cin, k, k], 1.0, rng));
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }
}

pub fn init_linear<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    din: usize,
    dout: usize,
    bias_init: Option<f64>,
) {
    store.insert(format!("{name}.weight"), Tensor::randn(&[din, dout], 1.0, rng));
    if let Some(b) = bias_init {
        store.insert(format!("{name}.bias"), Tensor::full(&[dout], T::of(b)));
    }
}

/// Adds a per-channel bias `[C]` to an `[N, C, H, W]` tensor.
pub fn add_channel_bias<'t, T: Real>(x: Var<'t, T>, bias: Var<'t, T>) -> Var<'t, T> {
    let c = bias.shape()[0];
    x.add_bcast(bias.reshape(&[1, c, 1, 1]))
}

/// Equalized-lr convolution with optional bias (`{name}.weight`, `{name}.bias`).
pub fn conv<'t, T: Real>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>, geom: ConvGeom) -> Var<'t, T> {
    let w = p[&format!("{name}.weight") as &str];
    let ws = w.shape();
    let gain = 1.0 / ((ws[1] * ws[2] * ws[3]) as f64).sqrt();
    let y = x.conv2d(w.scale(gain), geom);
    match p.try_get(&format!("{name}.bias")) {
        Some(b) => add_channel_bias(y, b),
        None => y,
    }
}

/// Equalized-lr affine map on `[N, din]` rows.
pub fn linear<'t, T: Real>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Var<'t, T> {
    let w = p[&format!("{name}.weight") as &str];
    let gain = 1.0 / (w.shape()[0] as f64).sqrt();
    let y = x.matmul(w.scale(gain));
    match p.try_get(&format!("{name}.bias")) {
        Some(b) => {
            let n = b.shape()[0];
            y.add_bcast(b.reshape(&[1, n]))
        }
        None => y,
    }
}

pub fn lrelu<T: Real>(x: Var<'_, T>) -> Var<'_, T> {
    x.leaky_relu(LRELU_SLOPE)
}

pub const SAME3: ConvGeom = ConvGeom { stride: 1, pad: 1 };
pub const DOWN3: ConvGeom = ConvGeom { stride: 2, pad: 1 };
pub const POINT: ConvGeom = ConvGeom { stride: 1, pad: 0 };

/// Adaptive moment estimation.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` to every parameter that has
    /// a gradient.
    pub fn step_with_lr(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) {
        self.update(params, grads, lr, &BTreeMap::new());
    }

    /// Adam step with a per-entry curvature `κ` added to the denominator,
    /// `θ ← θ − m̂ / ((√v̂ + ε)/lr + κ)`. When the gradient includes a stiff
    /// penalty and `κ` bounds its Hessian diagonal from above, the penalty is
    /// integrated semi-implicitly: its stationary points are unchanged but it
    /// no longer oscillates at ~lr per entry. Missing entries mean `κ = 0`.
    pub fn step_damped(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        curvature: &BTreeMap<String, Tensor<T>>,
    ) {
        let lr = self.lr;
        self.update(params, grads, lr, curvature);
    }

    fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        curvature: &BTreeMap<String, Tensor<T>>,
    ) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::of(lr * bc2.sqrt() / bc1.max(1e-12));
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let eps = T::of(self.eps * bc2.sqrt());
        // lr·κ joins √v̂ + ε, which is √v + ε·√bc2 scaled by 1/√bc2
        let kscale = T::of(lr * bc2.sqrt());
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let kappa = curvature.get(name).map(|k| k.data());
            for (i, (((pv, &gv), mv), vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .enumerate()
            {
                *mv = tb1 * *mv + (T::one() - tb1) * gv;
                *vv = tb2 * *vv + (T::one() - tb2) * gv * gv;
                let damp = kappa.map_or(T::zero(), |k| k[i] * kscale);
                *pv = *pv - step_size * *mv / (vv.sqrt() + eps + damp);
            }
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) {
        let lr = self.lr;
        self.step_with_lr(params, grads, lr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..500 {
            let tape = Tape::new();
            let b = p.bind(&tape, |_| true);
            let loss = b["x"].square().sum();
            let tr = Trainables::from_bound(&b, |_| true);
            let g = tr.grads(loss);
            opt.step(&mut p, &g);
        }
        assert!(p.get("x").unwrap().sq_norm() < 1e-3);
    }

    /// `(x − 1)² + λx²` has its minimum at `1/(1 + λ)`.
    fn stiff_run(lambda: f64, damped: bool) -> f64 {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut opt = Adam::new(1e-2, 0.0, 0.99);
        let mut kappa = BTreeMap::new();
        kappa.insert("x".to_string(), Tensor::full(&[1], 2.0 * lambda));
        for _ in 0..2000 {
            let tape = Tape::new();
            let b = p.bind(&tape, |_| true);
            let x = b["x"];
            let loss = x.add_scalar(-1.0).square().sum() + x.square().sum().scale(lambda);
            let g = Trainables::from_bound(&b, |_| true).grads(loss);
            if damped {
                opt.step_damped(&mut p, &g, &kappa);
            } else {
                opt.step(&mut p, &g);
            }
        }
        p.get("x").unwrap().data()[0]
    }

    #[test]
    fn damped_steps_settle_stiff_penalties() {
        let x = stiff_run(1e6, true);
        assert!((x - 1.0 / (1.0 + 1e6)).abs() < 1e-8, "{x}");
        // plain Adam keeps bouncing around the minimum at about the step size
        assert!(stiff_run(1e6, false).abs() > 1e-4);
        // the damping leaves stationary points where they are
        let x = stiff_run(1.0, true);
        assert!((x - 0.5).abs() < 1e-6, "{x}");
    }

    #[test]
    fn congruence_check() {
        let mut a = ParamStore::<f32>::new();
        a.insert("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamStore::<f32>::new();
        b.insert("w", Tensor::zeros(&[2, 3]));
        assert!(a.check_congruent(&b).is_err());
        assert!(a.check_congruent(&a.zeros_like()).is_ok());
        let mut c = ParamStore::<f32>::new();
        c.insert("q", Tensor::zeros(&[1]));
        assert!(a.check_congruent(&c).is_err());
    }
}
