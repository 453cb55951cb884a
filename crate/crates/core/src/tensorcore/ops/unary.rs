use super::FnBackward;
use crate::error::Result;
use crate::tensorcore::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn unary(
    x: &Tensor,
    name: &'static str,
    f: fn(f64) -> f64,
    // derivative given (input, output)
    df: fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        name,
        data,
        x.shape(),
        &[x],
        FnBackward::new(name, move |ctx, g| {
            let xs = ctx.inputs[0].data();
            let ys = ctx.output.data();
            let gi = xs.iter().zip(ys).zip(g).map(|((&x, &y), &g)| g * df(x, y)).collect();
            vec![Some(gi)]
        }),
    )
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    // log(1 + e^v) without overflow for large v
    if v > 30.0 {
        v + (-v).exp()
    } else {
        v.exp().ln_1p()
    }
}

/// Tanh-form GELU.
pub(crate) fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh())
}

fn gelu_grad(v: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
}

impl Tensor {
    pub fn exp(&self) -> Result<Tensor> {
        unary(self, "exp", f64::exp, |_, y| y)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        unary(self, "sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&self) -> Result<Tensor> {
        unary(
            self,
            "silu",
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn gelu(&self) -> Result<Tensor> {
        unary(self, "gelu", gelu, |x, _| gelu_grad(x))
    }

    pub fn softplus(&self) -> Result<Tensor> {
        unary(self, "softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        unary(self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            "scale",
            data,
            self.shape(),
            &[self],
            FnBackward::new("scale", move |_, g| vec![Some(g.iter().map(|v| v * factor).collect())]),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_values() {
        let x = Tensor::new(vec![0.0, 1.0, -2.0], &[3]).unwrap();
        let s = x.sigmoid().unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        let sp = x.softplus().unwrap();
        assert!((sp.data()[0] - 2f64.ln()).abs() < 1e-15);
        let g = x.gelu().unwrap();
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] - 0.841_191_990_607).abs() < 1e-9);
        let si = x.silu().unwrap();
        assert!((si.data()[2] - (-2.0 * sigmoid(-2.0))).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn exp_overflow_is_a_numeric_error() {
        let x = Tensor::new(vec![1000.0], &[1]).unwrap();
        let err = x.exp().unwrap_err();
        assert!(matches!(err, crate::Error::Numeric { op: "exp", .. }));
    }
}
