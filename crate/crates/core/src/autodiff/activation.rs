use crate::math;

/// Elementwise activation with derivatives of every order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    /// `min(max(0, y), 6)`.
    Relu6,
    Tanh,
    Sin,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
            Activation::Tanh => "tanh",
            Activation::Sin => "sin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "identity" | "linear" => Activation::Identity,
            "relu" => Activation::Relu,
            "relu6" => Activation::Relu6,
            "tanh" => Activation::Tanh,
            "sin" => Activation::Sin,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Relu6 => 2,
            Activation::Tanh => 3,
            Activation::Sin => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Relu6,
            3 => Activation::Tanh,
            4 => Activation::Sin,
            _ => return None,
        })
    }

    /// True when the derivative of this order vanishes almost everywhere.
    pub fn vanishes(self, order: u32) -> bool {
        match self {
            Activation::Identity | Activation::Relu | Activation::Relu6 => order >= 2,
            Activation::Tanh | Activation::Sin => false,
        }
    }

    /// Piecewise-linear activations have undefined curvature at their kinks.
    pub fn at_kink(self, y: f64) -> bool {
        match self {
            Activation::Relu => y == 0.0,
            Activation::Relu6 => y == 0.0 || y == 6.0,
            _ => false,
        }
    }

    pub fn is_smooth(self) -> bool {
        matches!(self, Activation::Identity | Activation::Tanh | Activation::Sin)
    }

    /// `eval(order, y_i)` over a slice, multiplied elementwise by `scale`
    /// when given. Selects the scalar kernel once per slice.
    pub fn map(self, order: u32, ys: &[f64], scale: Option<&[f64]>) -> Vec<f64> {
        fn run(ys: &[f64], scale: Option<&[f64]>, f: impl Fn(f64) -> f64) -> Vec<f64> {
            match scale {
                None => ys.iter().map(|&y| f(y)).collect(),
                Some(s) => s.iter().zip(ys).map(|(si, &y)| si * f(y)).collect(),
            }
        }
        match (self, order) {
            (Activation::Relu, 0) => run(ys, scale, |y| if y > 0.0 { y } else { 0.0 }),
            (Activation::Relu, 1) => run(ys, scale, |y| if y > 0.0 { 1.0 } else { 0.0 }),
            (Activation::Identity, 0) => run(ys, scale, |y| y),
            (Activation::Tanh, 0) => run(ys, scale, math::tanh),
            (Activation::Sin, 0) => run(ys, scale, math::sin),
            (Activation::Sin, 1) => run(ys, scale, math::cos),
            _ => run(ys, scale, |y| self.eval(order, y)),
        }
    }

    /// Derivative of the given order at `y`. Kinks take the right-continuous
    /// value of zero for ReLU (`relu'(0) = 0`).
    #[inline]
    pub fn eval(self, order: u32, y: f64) -> f64 {
        match self {
            Activation::Identity => match order {
                0 => y,
                1 => 1.0,
                _ => 0.0,
            },
            Activation::Relu => match order {
                0 => {
                    if y > 0.0 {
                        y
                    } else {
                        0.0
                    }
                }
                1 => {
                    if y > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            },
            Activation::Relu6 => match order {
                0 => y.clamp(0.0, 6.0),
                1 => {
                    if y > 0.0 && y < 6.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            },
            Activation::Sin => match order % 4 {
                0 => math::sin(y),
                1 => math::cos(y),
                2 => -math::sin(y),
                _ => -math::cos(y),
            },
            Activation::Tanh => {
                let s = math::tanh(y);
                tanh_derivative(order, s)
            }
        }
    }
}

/// `d^n/dy^n tanh(y)` as a polynomial in `s = tanh(y)`, using
/// `P_{n+1}(s) = P_n'(s) (1 - s^2)`.
fn tanh_derivative(order: u32, s: f64) -> f64 {
    let s2 = s * s;
    match order {
        0 => s,
        1 => 1.0 - s2,
        2 => -2.0 * s * (1.0 - s2),
        3 => (1.0 - s2) * (6.0 * s2 - 2.0),
        4 => (1.0 - s2) * (16.0 * s - 24.0 * s2 * s),
        _ => {
            let mut coeffs: alloc::vec::Vec<f64> = alloc::vec![0.0, 1.0];
            for _ in 0..order {
                // derivative of the polynomial times (1 - s^2)
                let mut d = alloc::vec![0.0; coeffs.len().max(2) - 1];
                for (i, c) in coeffs.iter().enumerate().skip(1) {
                    d[i - 1] = c * i as f64;
                }
                let mut next = alloc::vec![0.0; d.len() + 2];
                for (i, c) in d.iter().enumerate() {
                    next[i] += c;
                    next[i + 2] -= c;
                }
                coeffs = next;
            }
            coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(act: Activation, order: u32, y: f64) -> f64 {
        let h = 1e-5;
        (act.eval(order, y + h) - act.eval(order, y - h)) / (2.0 * h)
    }

    #[test]
    fn smooth_derivatives_match_finite_differences() {
        for act in [Activation::Tanh, Activation::Sin] {
            for order in 0..6 {
                for &y in &[-1.3, -0.2, 0.0, 0.4, 2.1] {
                    let exact = act.eval(order + 1, y);
                    let approx = fd(act, order, y);
                    assert!(
                        (exact - approx).abs() < 1e-6 * (1.0 + exact.abs()),
                        "{act:?} order {order} at {y}: {exact} vs {approx}"
                    );
                }
            }
        }
    }

    #[test]
    fn relu6_saturates() {
        assert_eq!(Activation::Relu6.eval(0, -5.0), 0.0);
        assert_eq!(Activation::Relu6.eval(0, 3.0), 3.0);
        assert_eq!(Activation::Relu6.eval(0, 9.0), 6.0);
        assert!(Activation::Relu6.at_kink(6.0));
    }
}
