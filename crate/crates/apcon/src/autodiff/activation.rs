//! Scalar primitives with closed-form first and second derivatives.
//!
//! Losses contain first input-derivatives of network outputs, so parameter
//! gradients of those losses need second derivatives of every nonlinearity.

/// Elementwise nonlinearities the tape can differentiate twice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Identity,
    Tanh,
    Swish,
    Gelu,
    Softplus,
    Square,
    Sqrt,
    Recip,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    /// Function value.
    #[inline]
    pub fn f(self, u: f64) -> f64 {
        match self {
            Unary::Identity => u,
            Unary::Tanh => u.tanh(),
            Unary::Swish => u * sigmoid(u),
            Unary::Gelu => {
                let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
                0.5 * u * (1.0 + t)
            }
            Unary::Softplus => {
                // Stable in both tails; exact asymptotes, no overflow.
                if u > 0.0 {
                    u + (-u).exp().ln_1p()
                } else {
                    u.exp().ln_1p()
                }
            }
            Unary::Square => u * u,
            Unary::Sqrt => u.sqrt(),
            Unary::Recip => 1.0 / u,
        }
    }

    /// First derivative.
    #[inline]
    pub fn df(self, u: f64) -> f64 {
        match self {
            Unary::Identity => 1.0,
            Unary::Tanh => {
                let t = u.tanh();
                1.0 - t * t
            }
            Unary::Swish => {
                let s = sigmoid(u);
                s * (1.0 + u * (1.0 - s))
            }
            Unary::Gelu => {
                let inner = GELU_C * (u + GELU_A * u * u * u);
                let t = inner.tanh();
                let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * u * u);
                0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * d_inner
            }
            Unary::Softplus => sigmoid(u),
            Unary::Square => 2.0 * u,
            Unary::Sqrt => 0.5 / u.sqrt(),
            Unary::Recip => -1.0 / (u * u),
        }
    }

    /// Second derivative.
    #[inline]
    pub fn d2f(self, u: f64) -> f64 {
        match self {
            Unary::Identity => 0.0,
            Unary::Tanh => {
                let t = u.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Unary::Swish => {
                let s = sigmoid(u);
                s * (1.0 - s) * (2.0 + u * (1.0 - 2.0 * s))
            }
            Unary::Gelu => {
                let inner = GELU_C * (u + GELU_A * u * u * u);
                let t = inner.tanh();
                let sech2 = 1.0 - t * t;
                let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * u * u);
                let dd_inner = 6.0 * GELU_C * GELU_A * u;
                sech2 * d_inner + 0.5 * u * sech2 * (dd_inner - 2.0 * t * d_inner * d_inner)
            }
            Unary::Softplus => {
                let s = sigmoid(u);
                s * (1.0 - s)
            }
            Unary::Square => 2.0,
            Unary::Sqrt => -0.25 / (u * u.sqrt()),
            Unary::Recip => 2.0 / (u * u * u),
        }
    }
}

/// Activations selectable in network configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Swish,
    Gelu,
    Tanh,
    /// Pass-through; useful for isolating wiring from nonlinearity.
    Identity,
}

impl Activation {
    pub fn unary(self) -> Unary {
        match self {
            Activation::Swish => Unary::Swish,
            Activation::Gelu => Unary::Gelu,
            Activation::Tanh => Unary::Tanh,
            Activation::Identity => Unary::Identity,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(f64) -> f64, u: f64, h: f64) -> f64 {
        (f(u + h) - f(u - h)) / (2.0 * h)
    }

    #[test]
    fn first_derivatives_match_central_differences() {
        let all = [
            Unary::Tanh,
            Unary::Swish,
            Unary::Gelu,
            Unary::Softplus,
            Unary::Square,
        ];
        for op in all {
            for u in [-3.0, -0.7, -0.1, 0.0, 0.4, 1.3, 2.9] {
                let fd = central_diff(|z| op.f(z), u, 1e-5);
                let got = op.df(u);
                assert!(
                    (got - fd).abs() <= 1e-8 * (1.0 + fd.abs()),
                    "{op:?} df at {u}: {got} vs fd {fd}"
                );
            }
        }
        // Positive-domain primitives checked away from zero.
        for op in [Unary::Sqrt, Unary::Recip] {
            for u in [0.3, 1.0, 2.7] {
                let fd = central_diff(|z| op.f(z), u, 1e-6);
                let got = op.df(u);
                assert!((got - fd).abs() <= 1e-7 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn second_derivatives_match_central_differences() {
        let all = [
            Unary::Tanh,
            Unary::Swish,
            Unary::Gelu,
            Unary::Softplus,
            Unary::Square,
        ];
        for op in all {
            for u in [-2.3, -0.4, 0.0, 0.6, 1.8] {
                let fd = central_diff(|z| op.df(z), u, 1e-5);
                let got = op.d2f(u);
                assert!(
                    (got - fd).abs() <= 1e-7 * (1.0 + fd.abs()),
                    "{op:?} d2f at {u}: {got} vs fd {fd}"
                );
            }
        }
        for op in [Unary::Sqrt, Unary::Recip] {
            for u in [0.3, 1.0, 2.7] {
                let fd = central_diff(|z| op.df(z), u, 1e-6);
                let got = op.d2f(u);
                assert!((got - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn softplus_is_stable_and_positive_in_the_tails() {
        assert!((Unary::Softplus.f(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let big = Unary::Softplus.f(100.0);
        assert!(big.is_finite() && (big - 100.0).abs() < 1e-12);
        let tiny = Unary::Softplus.f(-100.0);
        assert!(tiny > 0.0 && tiny < 1e-40);
        assert!(Unary::Softplus.f(750.0).is_finite());
    }

    #[test]
    fn swish_and_gelu_reference_values() {
        // swish(1) = 1 * sigmoid(1)
        assert!((Unary::Swish.f(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        // gelu in its tanh form is odd-symmetric around 0 up to the linear term
        assert!(Unary::Gelu.f(0.0).abs() < 1e-15);
        assert!((Unary::Gelu.df(0.0) - 0.5).abs() < 1e-15);
    }
}
