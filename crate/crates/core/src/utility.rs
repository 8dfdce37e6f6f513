//! Utility functions, their convex duals and the terminal gain used by the
//! BSDE solvers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NodeId, Tape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UtilityError {
    #[error("{what} must be positive, got {value}")]
    Domain { what: &'static str, value: f64 },
    #[error("power exponent must lie in (0, 1), got {0}")]
    InvalidExponent(f64),
}

/// Lower clip applied to the log terminal gain.
pub const LOG_CLIP: f64 = 50.0;

/// Strictly increasing, strictly concave utility on `(0, inf)` satisfying the
/// Inada conditions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum UtilitySpec {
    /// `x^p / p`.
    Power { p: f64 },
    /// `log x`.
    Log,
    /// `H^{-3}/3 + H^{-1} + x H` with `H(x) = sqrt(2) (sqrt(1 + 4x) - 1)^{-1/2}`.
    NonHara,
}

/// `H(x) = sqrt(2) (sqrt(1 + 4x) - 1)^{-1/2}`.
pub fn nonhara_h(x: f64) -> f64 {
    // sqrt(1+4x) - 1 = 4x / (sqrt(1+4x) + 1) avoids cancellation at small x
    let s = (1.0 + 4.0 * x).sqrt();
    std::f64::consts::SQRT_2 / (4.0 * x / (s + 1.0)).sqrt()
}

fn nonhara_h_prime(x: f64) -> f64 {
    let s = (1.0 + 4.0 * x).sqrt();
    let w = 4.0 * x / (s + 1.0);
    -std::f64::consts::SQRT_2 * w.powf(-1.5) / s
}

fn positive(what: &'static str, value: f64) -> Result<(), UtilityError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(UtilityError::Domain { what, value })
    }
}

impl UtilitySpec {
    pub fn validate(&self) -> Result<(), UtilityError> {
        match self {
            UtilitySpec::Power { p } if !(*p > 0.0 && *p < 1.0) => Err(UtilityError::InvalidExponent(*p)),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            UtilitySpec::Power { p } => format!("power(p={p})"),
            UtilitySpec::Log => "log".into(),
            UtilitySpec::NonHara => "non-hara".into(),
        }
    }

    /// `(U(x), U'(x), U''(x))`.
    pub fn u_eval(&self, x: f64) -> Result<(f64, f64, f64), UtilityError> {
        positive("wealth", x)?;
        Ok(match *self {
            UtilitySpec::Power { p } => (x.powf(p) / p, x.powf(p - 1.0), (p - 1.0) * x.powf(p - 2.0)),
            UtilitySpec::Log => (x.ln(), 1.0 / x, -1.0 / (x * x)),
            UtilitySpec::NonHara => {
                let h = nonhara_h(x);
                (h.powi(-3) / 3.0 + 1.0 / h + x * h, h, nonhara_h_prime(x))
            }
        })
    }

    /// `(U~(y), U~'(y))` with `U~(y) = sup_x {U(x) - x y}`.
    pub fn dual_eval(&self, y: f64) -> Result<(f64, f64), UtilityError> {
        positive("dual state", y)?;
        Ok(match *self {
            UtilitySpec::Power { p } => {
                let q = p / (p - 1.0);
                ((1.0 - p) / p * y.powf(q), -y.powf(1.0 / (p - 1.0)))
            }
            UtilitySpec::Log => (-(1.0 + y.ln()), -1.0 / y),
            UtilitySpec::NonHara => (y.powi(-3) / 3.0 + 1.0 / y, -y.powi(-4) - y.powi(-2)),
        })
    }

    /// `U~''(y)`.
    pub fn dual_second(&self, y: f64) -> Result<f64, UtilityError> {
        positive("dual state", y)?;
        Ok(match *self {
            UtilitySpec::Power { p } => -y.powf((2.0 - p) / (p - 1.0)) / (p - 1.0),
            UtilitySpec::Log => 1.0 / (y * y),
            UtilitySpec::NonHara => 4.0 * y.powi(-5) + 2.0 * y.powi(-3),
        })
    }

    /// `(U')^{-1}(y) = -U~'(y)`.
    pub fn inverse_marginal(&self, y: f64) -> Result<f64, UtilityError> {
        Ok(-self.dual_eval(y)?.1)
    }

    /// `g(x)`: `U(x)` for `x > 0` and `0` otherwise; the log branch is clipped
    /// below at `-LOG_CLIP`.
    pub fn terminal_gain(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return 0.0;
        }
        match self {
            UtilitySpec::Log => x.ln().max(-LOG_CLIP),
            _ => self.u_eval(x).map(|u| u.0).unwrap_or(0.0),
        }
    }

    /// `g'(x)`, zero wherever `g` is flat.
    pub fn terminal_gain_grad(&self, x: f64) -> f64 {
        if !(x > 0.0) || !x.is_finite() {
            return 0.0;
        }
        if matches!(self, UtilitySpec::Log) && x.ln() < -LOG_CLIP {
            return 0.0;
        }
        self.u_eval(x).map(|u| u.1).unwrap_or(0.0)
    }

    /// Whether `g` at `x` is on its clipped branch.
    pub fn clip_active(&self, x: f64) -> bool {
        matches!(self, UtilitySpec::Log) && x > 0.0 && x.ln() < -LOG_CLIP
    }

    /// `U~(y) - (U(x) - x y)`, non-negative and zero iff `U'(x) = y`.
    pub fn legendre_residual(&self, x: f64, y: f64) -> Result<f64, UtilityError> {
        let (u, _, _) = self.u_eval(x)?;
        let (ud, _) = self.dual_eval(y)?;
        Ok(ud - (u - x * y))
    }

    /// `U~` applied element-wise to a positive node.
    pub fn dual_on_tape(&self, tape: &mut Tape, y: NodeId) -> NodeId {
        match *self {
            UtilitySpec::Power { p } => {
                let a = tape.powf(y, p / (p - 1.0));
                tape.scalar_mul(a, (1.0 - p) / p)
            }
            UtilitySpec::Log => {
                let l = tape.log(y);
                let n = tape.neg(l);
                tape.add_scalar(n, -1.0)
            }
            UtilitySpec::NonHara => {
                let a = tape.powf(y, -3.0);
                let a = tape.scalar_mul(a, 1.0 / 3.0);
                let b = tape.powf(y, -1.0);
                tape.add(a, b)
            }
        }
    }

    /// `U~'` applied element-wise to a positive node.
    pub fn dual_marginal_on_tape(&self, tape: &mut Tape, y: NodeId) -> NodeId {
        match *self {
            UtilitySpec::Power { p } => {
                let a = tape.powf(y, 1.0 / (p - 1.0));
                tape.neg(a)
            }
            UtilitySpec::Log => {
                let a = tape.powf(y, -1.0);
                tape.neg(a)
            }
            UtilitySpec::NonHara => {
                let a = tape.powf(y, -4.0);
                let b = tape.powf(y, -2.0);
                let s = tape.add(a, b);
                tape.neg(s)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    const ALL: [UtilitySpec; 4] = [
        UtilitySpec::Power { p: 0.5 },
        UtilitySpec::Power { p: 0.2 },
        UtilitySpec::Log,
        UtilitySpec::NonHara,
    ];

    /// Minimal symbolic expressions in one variable, differentiated by rule.
    #[derive(Clone, Debug)]
    enum Expr {
        X,
        C(f64),
        Add(Box<Expr>, Box<Expr>),
        Mul(Box<Expr>, Box<Expr>),
        Pow(Box<Expr>, f64),
    }

    use Expr::*;

    fn add(a: Expr, b: Expr) -> Expr {
        Add(Box::new(a), Box::new(b))
    }
    fn mul(a: Expr, b: Expr) -> Expr {
        Mul(Box::new(a), Box::new(b))
    }
    fn pow(a: Expr, k: f64) -> Expr {
        Pow(Box::new(a), k)
    }

    impl Expr {
        fn eval(&self, x: f64) -> f64 {
            match self {
                X => x,
                C(c) => *c,
                Add(a, b) => a.eval(x) + b.eval(x),
                Mul(a, b) => a.eval(x) * b.eval(x),
                Pow(a, k) => a.eval(x).powf(*k),
            }
        }

        fn diff(&self) -> Expr {
            match self {
                X => C(1.0),
                C(_) => C(0.0),
                Add(a, b) => add(a.diff(), b.diff()),
                Mul(a, b) => add(mul(a.diff(), (**b).clone()), mul((**a).clone(), b.diff())),
                Pow(a, k) => mul(mul(C(*k), pow((**a).clone(), k - 1.0)), a.diff()),
            }
        }
    }

    fn nonhara_expr() -> Expr {
        // H = sqrt(2) * (-1 + (1 + 4x)^{1/2})^{-1/2}
        let inner = add(C(-1.0), pow(add(C(1.0), mul(C(4.0), X)), 0.5));
        let h = mul(C(2f64.sqrt()), pow(inner, -0.5));
        add(
            add(mul(C(1.0 / 3.0), pow(h.clone(), -3.0)), pow(h.clone(), -1.0)),
            mul(X, h),
        )
    }

    #[test]
    fn u_examples() {
        // U = 2 sqrt(x), U' = 1/sqrt(x)
        let (u, du, _) = UtilitySpec::Power { p: 0.5 }.u_eval(1.0).unwrap();
        assert_eq!((u, du), (2.0, 1.0));
        assert_eq!(UtilitySpec::Power { p: 0.5 }.u_eval(4.0).unwrap().1, 0.5);
        let e = std::f64::consts::E;
        let (u, du, _) = UtilitySpec::Log.u_eval(e).unwrap();
        assert!((u - 1.0).abs() < 1e-15 && (du - 1.0 / e).abs() < 1e-15);
        assert!((nonhara_h(2.0) - 1.0).abs() < 1e-15);
        let (u, du, _) = UtilitySpec::NonHara.u_eval(2.0).unwrap();
        assert!((u - 10.0 / 3.0).abs() < 1e-14 && (du - 1.0).abs() < 1e-15);
        assert!(UtilitySpec::Log.u_eval(0.0).is_err());
        assert!(UtilitySpec::Log.u_eval(-1.0).is_err());
    }

    #[test]
    fn dual_examples() {
        assert!((UtilitySpec::NonHara.dual_eval(1.0).unwrap().0 - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(UtilitySpec::Power { p: 0.5 }.dual_eval(1.0).unwrap().0, 1.0);
        assert_eq!(UtilitySpec::Log.dual_eval(1.0).unwrap().0, -1.0);
        assert!(UtilitySpec::Log.dual_eval(0.0).is_err());
    }

    #[test]
    fn terminal_gain_examples() {
        for s in ALL {
            assert_eq!(s.terminal_gain(-1.0), 0.0);
            assert_eq!(s.terminal_gain(0.0), 0.0);
            assert_eq!(s.terminal_gain_grad(-1.0), 0.0);
        }
        assert_eq!(UtilitySpec::Power { p: 0.5 }.terminal_gain(4.0), 4.0);
        assert_eq!(UtilitySpec::Log.terminal_gain(1e-20), 1e-20f64.ln());
        assert_eq!(UtilitySpec::Log.terminal_gain(1e-300), -LOG_CLIP);
        assert!(UtilitySpec::Log.clip_active(1e-300));
        assert_eq!(UtilitySpec::Log.terminal_gain_grad(1e-300), 0.0);
    }

    #[test]
    fn legendre_examples() {
        let pw = UtilitySpec::Power { p: 0.5 };
        assert_eq!(pw.inverse_marginal(0.5).unwrap(), 4.0);
        assert!(pw.legendre_residual(4.0, 0.5).unwrap().abs() < 1e-15);
        assert!(UtilitySpec::NonHara.legendre_residual(2.0, 1.0).unwrap().abs() < 1e-14);
        assert!((UtilitySpec::NonHara.inverse_marginal(1.0).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn nonhara_marginal_is_h_symbolically() {
        let du = nonhara_expr().diff();
        let d2u = du.diff();
        for i in 0..200 {
            let x = 10f64.powf(-3.0 + 6.0 * i as f64 / 199.0);
            let (u, up, upp) = UtilitySpec::NonHara.u_eval(x).unwrap();
            let sym = nonhara_expr().eval(x);
            assert!((u - sym).abs() <= 1e-10 * sym.abs(), "U at {x}");
            let sd = du.eval(x);
            assert!((up - sd).abs() <= 1e-8 * sd.abs(), "U' at {x}: {up} vs {sd}");
            let sdd = d2u.eval(x);
            assert!((upp - sdd).abs() <= 1e-6 * sdd.abs(), "U'' at {x}: {upp} vs {sdd}");
        }
    }

    #[test]
    fn fenchel_young_on_grid() {
        let grid: Vec<f64> = (0..100).map(|i| 0.1 * 100f64.powf(i as f64 / 99.0)).collect();
        for s in ALL {
            for &x in &grid {
                for &y in &grid {
                    let r = s.legendre_residual(x, y).unwrap();
                    assert!(r >= -1e-12 * (1.0 + s.u_eval(x).unwrap().0.abs()), "{s:?} x={x} y={y} r={r}");
                }
                // equality at the conjugate point
                let y = s.u_eval(x).unwrap().1;
                let r = s.legendre_residual(x, y).unwrap();
                assert!(r.abs() < 1e-10 * (1.0 + s.dual_eval(y).unwrap().0.abs()), "{s:?} x={x}");
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for s in ALL {
            for i in 0..60 {
                let x = 10f64.powf(-1.0 + 2.0 * i as f64 / 59.0);
                let h = 1e-5 * x;
                let (_, du, d2u) = s.u_eval(x).unwrap();
                let fd = (s.u_eval(x + h).unwrap().0 - s.u_eval(x - h).unwrap().0) / (2.0 * h);
                assert!((du - fd).abs() < 1e-6 * du.abs(), "{s:?} U' at {x}");
                let fd2 = (s.u_eval(x + h).unwrap().1 - s.u_eval(x - h).unwrap().1) / (2.0 * h);
                assert!((d2u - fd2).abs() < 1e-6 * d2u.abs(), "{s:?} U'' at {x}");
                let (_, dd) = s.dual_eval(x).unwrap();
                let fd = (s.dual_eval(x + h).unwrap().0 - s.dual_eval(x - h).unwrap().0) / (2.0 * h);
                assert!((dd - fd).abs() < 1e-6 * dd.abs(), "{s:?} dual' at {x}");
                let fd2 = (s.dual_eval(x + h).unwrap().1 - s.dual_eval(x - h).unwrap().1) / (2.0 * h);
                let dd2 = s.dual_second(x).unwrap();
                assert!((dd2 - fd2).abs() < 1e-6 * dd2.abs(), "{s:?} dual'' at {x}");
            }
        }
    }

    #[test]
    fn inada_sampling() {
        for s in ALL {
            assert!(s.u_eval(1e-8).unwrap().1 > 1e3, "{s:?}");
        }
        for s in [UtilitySpec::Power { p: 0.5 }, UtilitySpec::Power { p: 0.2 }, UtilitySpec::Log] {
            assert!(s.u_eval(1e8).unwrap().1 < 1e-3, "{s:?}");
        }
        // U'(x) = H(x) decays only like x^{-1/4}, so it is still 1e-2 at 1e8
        let nh = UtilitySpec::NonHara;
        assert!((nh.u_eval(1e8).unwrap().1 - 1e-2).abs() < 1e-5);
        assert!(nh.u_eval(1e13).unwrap().1 < 1e-3);
        assert!((nh.u_eval(1e12).unwrap().1 * 1e3 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn tape_duals_match() {
        let ys = [0.3, 1.0, 2.5];
        for s in ALL {
            let mut tape = Tape::new();
            let y = tape.var(Tensor::column(&ys));
            let u = s.dual_on_tape(&mut tape, y);
            let du = s.dual_marginal_on_tape(&mut tape, y);
            for (r, &yv) in ys.iter().enumerate() {
                let (a, b) = s.dual_eval(yv).unwrap();
                assert!((tape.value(u).get(r, 0) - a).abs() < 1e-13);
                assert!((tape.value(du).get(r, 0) - b).abs() < 1e-13);
            }
            let m = tape.mean(u);
            let g = tape.backward(m, &[y]).unwrap();
            for (r, &yv) in ys.iter().enumerate() {
                let want = s.dual_eval(yv).unwrap().1 / 3.0;
                assert!((g.get(y).unwrap().get(r, 0) - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn invalid_exponent_rejected() {
        assert!(UtilitySpec::Power { p: 1.0 }.validate().is_err());
        assert!(UtilitySpec::Power { p: 0.0 }.validate().is_err());
        assert!(UtilitySpec::Log.validate().is_ok());
    }
}
