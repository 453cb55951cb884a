//! Central-difference verification of analytic gradients.

use super::nn::Module;
use super::{backward, no_grad, Tensor};
use crate::error::{Error, Result};

/// Magnitude below which errors are compared absolutely.
pub const ABS_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name (empty for a plain input) and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub pass: bool,
}

type Hook = Box<dyn Fn(&mut [f64])>;

/// Central-difference formula used for the numeric gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    #[default]
    ThreePoint,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
    FivePoint,
}

pub struct GradCheck {
    step: f64,
    tol: f64,
    stencil: Stencil,
    floor: Option<f64>,
    analytic_hook: Option<Hook>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABS_FALLBACK {
        diff
    } else {
        diff / scale
    }
}

/// `|a - n| / max(|a|, |n|, floor)`: entries far below `floor` are judged
/// on absolute error measured in units of `floor`.
pub fn floored_relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `f` at `x` with the given step and tolerance.
pub fn grad_check(f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport> {
    GradCheck::new(step, tol)?.check(f, x)
}

struct Tally {
    floor: Option<f64>,
    max: f64,
    worst: Option<(String, usize)>,
    checked: usize,
}

impl Tally {
    fn new(floor: Option<f64>) -> Self {
        Tally {
            floor,
            max: 0.0,
            worst: None,
            checked: 0,
        }
    }

    fn push(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let e = match self.floor {
            Some(f) => floored_relative_error(analytic, numeric, f),
            None => relative_error(analytic, numeric),
        };
        self.checked += 1;
        if e > self.max || self.worst.is_none() {
            self.max = e;
            self.worst = Some((name.to_string(), idx));
        }
    }

    fn finish(self, tol: f64) -> GradCheckReport {
        GradCheckReport {
            pass: self.max < tol,
            max_rel_error: self.max,
            worst: self.worst,
            checked: self.checked,
        }
    }
}

impl GradCheck {
    pub fn new(step: f64, tol: f64) -> Result<Self> {
        if !(step > 0.0) || !(tol > 0.0) {
            return Err(Error::Contract(format!(
                "grad check needs positive step and tolerance, got {step} / {tol}"
            )));
        }
        Ok(GradCheck {
            step,
            tol,
            stencil: Stencil::ThreePoint,
            floor: None,
            analytic_hook: None,
        })
    }

    pub fn with_stencil(mut self, stencil: Stencil) -> Self {
        self.stencil = stencil;
        self
    }

    /// Judges entries by [`floored_relative_error`] instead of
    /// [`relative_error`].
    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = Some(floor);
        self
    }

    /// Applies `hook` to every analytic gradient before comparison; used to
    /// confirm that a corrupted gradient is caught.
    pub fn with_analytic_hook(mut self, hook: impl Fn(&mut [f64]) + 'static) -> Self {
        self.analytic_hook = Some(Box::new(hook));
        self
    }

    fn scalar(out: &Tensor) -> Result<f64> {
        out.item()
            .map_err(|_| Error::Contract(format!("grad check target must be scalar, got {:?}", out.shape())))
    }

    /// Gradient of `f` with respect to its tensor argument.
    pub fn check(&self, f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor) -> Result<GradCheckReport> {
        self.check_input(f, x, Objective::Scalar)
    }

    /// Like [`GradCheck::check`] for a tensor-valued `f` with objective
    /// `sum(f(x))`; outputs are differenced elementwise before summing,
    /// which keeps the summation rounding out of the numerator.
    pub fn check_sum(&self, f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor) -> Result<GradCheckReport> {
        self.check_input(f, x, Objective::Sum)
    }

    /// Gradients of the scalar `f` with respect to every parameter of `module`.
    pub fn check_module<M: Module>(&self, module: &mut M, f: impl Fn(&M) -> Result<Tensor>) -> Result<GradCheckReport> {
        self.check_params(module, f, Objective::Scalar)
    }

    /// Parameter gradients of `sum(f(module))`, differenced elementwise.
    pub fn check_module_sum<M: Module>(
        &self,
        module: &mut M,
        f: impl Fn(&M) -> Result<Tensor>,
    ) -> Result<GradCheckReport> {
        self.check_params(module, f, Objective::Sum)
    }

    fn check_input(
        &self,
        f: impl Fn(&Tensor) -> Result<Tensor>,
        x: &Tensor,
        objective: Objective,
    ) -> Result<GradCheckReport> {
        let leaf = x.detach().as_param();
        backward(&objective.reduce(&f(&leaf)?)?)?;
        let mut analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        if let Some(hook) = &self.analytic_hook {
            hook(&mut analytic);
        }
        let base = x.to_vec();
        let mut tally = Tally::new(self.floor);
        no_grad(|| -> Result<()> {
            for i in 0..base.len() {
                let mut eval_at = |value: f64| -> Result<Vec<f64>> {
                    let mut v = base.clone();
                    v[i] = value;
                    objective.values(&f(&Tensor::new(v, x.shape())?)?)
                };
                let numeric = self.difference(&mut eval_at, base[i])?;
                tally.push("", i, analytic[i], numeric);
            }
            Ok(())
        })?;
        Ok(tally.finish(self.tol))
    }

    fn difference(&self, eval_at: &mut dyn FnMut(f64) -> Result<Vec<f64>>, at: f64) -> Result<f64> {
        let h = self.step;
        let span = |eval_at: &mut dyn FnMut(f64) -> Result<Vec<f64>>, k: f64| -> Result<f64> {
            let plus = eval_at(at + k * h)?;
            let minus = eval_at(at - k * h)?;
            Ok(plus.iter().zip(&minus).map(|(p, m)| p - m).sum())
        };
        match self.stencil {
            Stencil::ThreePoint => Ok(span(eval_at, 1.0)? / (2.0 * h)),
            Stencil::FivePoint => {
                let near = span(eval_at, 1.0)?;
                let far = span(eval_at, 2.0)?;
                Ok((8.0 * near - far) / (12.0 * h))
            }
        }
    }

    fn check_params<M: Module>(
        &self,
        module: &mut M,
        f: impl Fn(&M) -> Result<Tensor>,
        objective: Objective,
    ) -> Result<GradCheckReport> {
        super::nn::zero_grads(module);
        backward(&objective.reduce(&f(module)?)?)?;
        let mut params: Vec<(String, Tensor, Vec<f64>)> = Vec::new();
        module.visit("", &mut |name, t| {
            let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            params.push((name.to_string(), t.clone(), g));
        });
        super::nn::zero_grads(module);
        let mut tally = Tally::new(self.floor);
        for (name, original, mut analytic) in params {
            if let Some(hook) = &self.analytic_hook {
                hook(&mut analytic);
            }
            let base = original.to_vec();
            let shape = original.shape().to_vec();
            for i in 0..base.len() {
                let mut eval_at = |value: f64| -> Result<Vec<f64>> {
                    let mut v = base.clone();
                    v[i] = value;
                    let replacement = Tensor::param(v, &shape)?;
                    set_param(module, &name, replacement);
                    let r = no_grad(|| f(module)).and_then(|t| objective.values(&t));
                    set_param(module, &name, original.clone());
                    r
                };
                let numeric = self.difference(&mut eval_at, base[i])?;
                tally.push(&name, i, analytic[i], numeric);
            }
        }
        Ok(tally.finish(self.tol))
    }
}

#[derive(Clone, Copy)]
enum Objective {
    Scalar,
    Sum,
}

impl Objective {
    fn reduce(self, out: &Tensor) -> Result<Tensor> {
        match self {
            Objective::Scalar => {
                GradCheck::scalar(out)?;
                Ok(out.clone())
            }
            Objective::Sum => out.sum_all(),
        }
    }

    fn values(self, out: &Tensor) -> Result<Vec<f64>> {
        match self {
            Objective::Scalar => Ok(vec![GradCheck::scalar(out)?]),
            Objective::Sum => Ok(out.to_vec()),
        }
    }
}

fn set_param<M: Module>(module: &mut M, name: &str, value: Tensor) {
    let mut value = Some(value);
    module.visit_mut("", &mut |n, t| {
        if n == name {
            if let Some(v) = value.take() {
                *t = v;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::testutil::rand_tensor;

    #[test]
    fn sum_of_squares_passes() {
        let x = rand_tensor(&[5], 21);
        let r = grad_check(|t| t.mul(t)?.sum_all(), &x, 1e-5, 1e-6).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn constant_function_passes_with_zero_gradients() {
        let x = rand_tensor(&[4], 2);
        let r = grad_check(|_| Tensor::scalar(3.0), &x, 1e-5, 1e-6).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = rand_tensor(&[6], 5);
        let leaf = x.as_param();
        let loss = leaf.softmax_lastdim().unwrap().sum_all().unwrap();
        backward(&loss).unwrap();
        assert!(leaf.grad().unwrap().iter().all(|g| g.abs() < 1e-15));
        let r = grad_check(|t| t.softmax_lastdim()?.sum_all(), &x, 1e-5, 1e-6).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn perturbed_gradient_fails() {
        let x = rand_tensor(&[5], 8);
        let r = GradCheck::new(1e-5, 1e-6)
            .unwrap()
            .with_analytic_hook(|g| g[0] += 0.1)
            .check(|t| t.mul(t)?.sum_all(), &x)
            .unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn sum_objective_and_five_point_stencil() {
        let x = rand_tensor(&[4], 3);
        let cube = |t: &Tensor| t.mul(t)?.mul(t);
        let r = GradCheck::new(1e-3, 1e-9)
            .unwrap()
            .with_stencil(Stencil::FivePoint)
            .check_sum(cube, &x)
            .unwrap();
        // a cubic has zero fifth derivative, so only rounding remains
        assert!(r.pass, "{r:?}");
        let r3 = GradCheck::new(1e-3, 1e-9).unwrap().check_sum(cube, &x).unwrap();
        assert!(r3.max_rel_error > r.max_rel_error);
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(GradCheck::new(0.0, 1e-6).is_err());
    }

    #[test]
    fn absolute_fallback_for_tiny_values() {
        assert!((relative_error(1e-10, 3e-10) - 2e-10).abs() < 1e-24);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn floor_bounds_the_denominator() {
        assert_eq!(floored_relative_error(2.0, 1.0, 1e-6), 0.5);
        assert!((floored_relative_error(1e-9, 3e-9, 1e-6) - 2e-3).abs() < 1e-15);
        assert_eq!(floored_relative_error(0.0, 0.0, 1e-6), 0.0);
    }
}
