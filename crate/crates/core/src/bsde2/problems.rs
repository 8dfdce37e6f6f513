use serde::{Deserialize, Serialize};

use super::{ControlProblem, Direction, FreeInitial, Jacobians};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::constraint::{ConstraintSet, PenaltyConfig, ProjectionRule};
use crate::sde::{HestonParams, MarketCoefficients};
use crate::utility::UtilitySpec;

/// How the primal control is kept in `K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Enforcement {
    /// Network output is mapped into `K`.
    Hard { rule: ProjectionRule },
    /// Network output is used as is and `beta dist(pi, K)^2` is subtracted
    /// from the Hamiltonian.
    Soft {
        #[serde(default)]
        penalty: PenaltyConfig,
    },
}

impl Default for Enforcement {
    fn default() -> Self {
        Enforcement::Hard {
            rule: ProjectionRule::Max,
        }
    }
}

fn matrix_tensor(m: &nalgebra::DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut t = Tensor::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            t.set(i, j, m[(i, j)]);
        }
    }
    t
}

/// Wealth `dX = X (r + pi^T b) dt + X pi^T sigma dW` with terminal gain
/// `g = U 1_{x > 0}`.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityPrimal {
    pub market: MarketCoefficients,
    pub utility: UtilitySpec,
    pub constraint: ConstraintSet,
    pub enforcement: Enforcement,
    pub x0: f64,
}

impl ControlProblem for UtilityPrimal {
    fn state_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        self.market.dim()
    }
    fn control_dim(&self) -> usize {
        self.market.dim()
    }
    fn direction(&self) -> Direction {
        Direction::Maximise
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![self.x0]
    }
    fn name(&self) -> String {
        format!("primal-{}", self.utility.name())
    }
    fn geometric_coords(&self) -> Vec<usize> {
        vec![0]
    }

    fn coefficients(&self, tape: &mut Tape, t: f64, x: NodeId, control: NodeId) -> (NodeId, NodeId) {
        let b = tape.constant(Tensor::column(&self.market.excess(t)));
        let pb = tape.matmul(control, b);
        let g = tape.add_scalar(pb, self.market.r(t));
        let drift = tape.mul(x, g);
        let sig = tape.constant(matrix_tensor(&self.market.sigma(t)));
        let ps = tape.matmul(control, sig);
        let diff = tape.scale_rows(ps, x);
        (drift, diff)
    }

    fn terminal(&self, x: &[f64]) -> (f64, Vec<f64>) {
        (
            self.utility.terminal_gain(x[0]),
            vec![self.utility.terminal_gain_grad(x[0])],
        )
    }

    fn control_map(&self, tape: &mut Tape, raw: NodeId) -> NodeId {
        match self.enforcement {
            Enforcement::Hard { rule } => self.constraint.project_on_tape(tape, raw, rule),
            Enforcement::Soft { .. } => raw,
        }
    }

    fn penalty(&self, tape: &mut Tape, control: NodeId) -> Option<NodeId> {
        match self.enforcement {
            Enforcement::Soft { penalty } => Some(self.constraint.penalty_on_tape(tape, control, penalty)),
            Enforcement::Hard { .. } => None,
        }
    }

    fn state_jacobians(&self, t: f64, _x: &Tensor, control: &Tensor) -> Jacobians {
        let b = self.market.excess(t);
        let r = self.market.r(t);
        let k = control.rows();
        let mut drift = Tensor::zeros(k, 1);
        for i in 0..k {
            drift.set(i, 0, r + control.row(i).iter().zip(&b).map(|(p, b)| p * b).sum::<f64>());
        }
        let diffusion = control.matmul(&matrix_tensor(&self.market.sigma(t)));
        Jacobians {
            drift,
            diffusion,
            gain: None,
        }
    }
}

/// Dual state `dY = -Y (r + delta_K(v)) dt - Y (theta + sigma^{-1} v)^T dW`
/// with terminal gain `U~` and free initial value `y0`.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityDual {
    pub market: MarketCoefficients,
    pub utility: UtilitySpec,
    pub constraint: ConstraintSet,
    pub rule: ProjectionRule,
    pub x0: f64,
}

impl UtilityDual {
    fn dual_terminal(utility: &UtilitySpec, y: f64) -> (f64, f64) {
        utility.dual_eval(y).unwrap_or((f64::NAN, f64::NAN))
    }
}

impl ControlProblem for UtilityDual {
    fn state_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        self.market.dim()
    }
    fn control_dim(&self) -> usize {
        self.market.dim()
    }
    fn direction(&self) -> Direction {
        Direction::Minimise
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![self.free_initial().map(|f| f.initial_guess).unwrap_or(1.0)]
    }
    fn name(&self) -> String {
        format!("dual-{}", self.utility.name())
    }
    fn geometric_coords(&self) -> Vec<usize> {
        vec![0]
    }

    fn coefficients(&self, tape: &mut Tape, t: f64, y: NodeId, control: NodeId) -> (NodeId, NodeId) {
        let delta = self.constraint.support_on_tape(tape, control);
        let rd = tape.add_scalar(delta, self.market.r(t));
        let yr = tape.mul(y, rd);
        let drift = tape.neg(yr);
        let inv_t = tape.constant(matrix_tensor(&self.market.sigma_inv(t).transpose()));
        let sv = tape.matmul(control, inv_t);
        let theta = tape.constant(Tensor::row_vector(&self.market.theta(t)));
        let a = tape.add_row(sv, theta);
        let ya = tape.scale_rows(a, y);
        (drift, tape.neg(ya))
    }

    fn terminal(&self, y: &[f64]) -> (f64, Vec<f64>) {
        let (u, du) = Self::dual_terminal(&self.utility, y[0]);
        (u, vec![du])
    }

    fn control_map(&self, tape: &mut Tape, raw: NodeId) -> NodeId {
        self.constraint.project_dual_on_tape(tape, raw, self.rule)
    }

    fn trainable_control(&self) -> bool {
        !self.constraint.dual_is_trivial()
    }

    fn free_initial(&self) -> Option<FreeInitial> {
        let guess = self.utility.u_eval(self.x0).map(|u| u.1).unwrap_or(1.0);
        Some(FreeInitial {
            coordinate: 0,
            utility: self.utility,
            x0: self.x0,
            initial_guess: guess,
        })
    }

    fn state_jacobians(&self, t: f64, _y: &Tensor, control: &Tensor) -> Jacobians {
        let k = control.rows();
        let m = control.cols();
        let r = self.market.r(t);
        let theta = self.market.theta(t);
        let inv = self.market.sigma_inv(t);
        let mut drift = Tensor::zeros(k, 1);
        let mut diffusion = Tensor::zeros(k, m);
        for i in 0..k {
            let v = control.row(i);
            drift.set(i, 0, -(r + self.constraint.support(v)));
            for c in 0..m {
                let sv: f64 = (0..m).map(|j| inv[(c, j)] * v[j]).sum();
                diffusion.set(i, c, -(theta[c] + sv));
            }
        }
        Jacobians {
            drift,
            diffusion,
            gain: None,
        }
    }
}

fn heston_common(
    params: &HestonParams,
    tape: &mut Tape,
    x: NodeId,
    n: usize,
) -> (NodeId, NodeId, NodeId, NodeId) {
    let w = tape.slice_cols(x, 0, 1);
    let v = tape.slice_cols(x, 1, 1 + n);
    let vp = tape.relu(v);
    let sv = tape.sqrt(vp);
    let _ = params;
    (w, v, vp, sv)
}

/// Rows `1..=n` of the diffusion: variance `i` loads `rho xi sqrt(v_i)` on
/// `B^s_i` and `sqrt(1-rho^2) xi sqrt(v_i)` on `B^v_i`.
fn heston_variance_rows(params: &HestonParams, tape: &mut Tape, sv: NodeId, n: usize, k: usize) -> Vec<NodeId> {
    let mut parts = Vec::new();
    for i in 0..n {
        let s = tape.slice_cols(sv, i, i + 1);
        let a = tape.scalar_mul(s, params.rho * params.xi);
        let b = tape.scalar_mul(s, params.rho_bar() * params.xi);
        let zeros = |tape: &mut Tape, c: usize| tape.constant(Tensor::zeros(k, c));
        if i > 0 {
            parts.push(zeros(tape, i));
        }
        parts.push(a);
        if n > 1 {
            parts.push(zeros(tape, n - 1));
        }
        parts.push(b);
        if n - 1 - i > 0 {
            parts.push(zeros(tape, n - 1 - i));
        }
    }
    parts
}

fn heston_variance_drift(params: &HestonParams, tape: &mut Tape, vp: NodeId) -> NodeId {
    let neg = tape.scalar_mul(vp, -params.kappa);
    tape.add_scalar(neg, params.kappa * params.long_run_variance)
}

/// Jacobian entries shared by both sides: variance drift and variance rows.
fn heston_variance_jacobians(params: &HestonParams, x: &Tensor, drift: &mut Tensor, diffusion: &mut Tensor) {
    let (k, d) = x.shape();
    let n = d - 1;
    let cols = 2 * n;
    for r in 0..k {
        for i in 0..n {
            let v = x.get(r, 1 + i);
            if v <= 0.0 {
                continue;
            }
            let half_inv = 0.5 / v.sqrt();
            let row = 1 + i;
            drift.set(r, row * d + row, -params.kappa);
            let c1 = row * cols + i;
            let c2 = row * cols + n + i;
            diffusion.set(r, c1 * d + row, params.rho * params.xi * half_inv);
            diffusion.set(r, c2 * d + row, params.rho_bar() * params.xi * half_inv);
        }
    }
}

/// Wealth in an `n`-stock Heston market with state `(x, v_1..v_n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HestonPrimal {
    pub params: HestonParams,
    pub utility: UtilitySpec,
    pub stocks: usize,
    pub constraint: ConstraintSet,
    pub enforcement: Enforcement,
    pub x0: f64,
}

impl ControlProblem for HestonPrimal {
    fn state_dim(&self) -> usize {
        1 + self.stocks
    }
    fn noise_dim(&self) -> usize {
        2 * self.stocks
    }
    fn control_dim(&self) -> usize {
        self.stocks
    }
    fn direction(&self) -> Direction {
        Direction::Maximise
    }
    fn initial_state(&self) -> Vec<f64> {
        let mut s = vec![self.x0];
        s.extend(std::iter::repeat(self.params.v0).take(self.stocks));
        s
    }
    fn name(&self) -> String {
        format!("heston-primal-{}", self.utility.name())
    }
    fn geometric_coords(&self) -> Vec<usize> {
        vec![0]
    }

    fn coefficients(&self, tape: &mut Tape, _t: f64, x: NodeId, control: NodeId) -> (NodeId, NodeId) {
        let n = self.stocks;
        let k = tape.shape(x).0;
        let p = &self.params;
        let (w, _v, vp, sv) = heston_common(p, tape, x, n);
        let pv = tape.row_dot(control, vp);
        let pv = tape.scalar_mul(pv, p.a);
        let pv = tape.add_scalar(pv, p.rate);
        let d0 = tape.mul(w, pv);
        let dv = heston_variance_drift(p, tape, vp);
        let drift = tape.concat_cols(&[d0, dv]);
        let ps = tape.mul(control, sv);
        let row0 = tape.scale_rows(ps, w);
        let mut parts = vec![row0, tape.constant(Tensor::zeros(k, n))];
        parts.extend(heston_variance_rows(p, tape, sv, n, k));
        (drift, tape.concat_cols(&parts))
    }

    fn terminal(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; x.len()];
        grad[0] = self.utility.terminal_gain_grad(x[0]);
        (self.utility.terminal_gain(x[0]), grad)
    }

    fn control_map(&self, tape: &mut Tape, raw: NodeId) -> NodeId {
        match self.enforcement {
            Enforcement::Hard { rule } => self.constraint.project_on_tape(tape, raw, rule),
            Enforcement::Soft { .. } => raw,
        }
    }

    fn penalty(&self, tape: &mut Tape, control: NodeId) -> Option<NodeId> {
        match self.enforcement {
            Enforcement::Soft { penalty } => Some(self.constraint.penalty_on_tape(tape, control, penalty)),
            Enforcement::Hard { .. } => None,
        }
    }

    fn state_jacobians(&self, _t: f64, x: &Tensor, control: &Tensor) -> Jacobians {
        let (k, d) = x.shape();
        let n = self.stocks;
        let cols = 2 * n;
        let p = &self.params;
        let mut drift = Tensor::zeros(k, d * d);
        let mut diffusion = Tensor::zeros(k, d * cols * d);
        heston_variance_jacobians(p, x, &mut drift, &mut diffusion);
        for r in 0..k {
            let w = x.get(r, 0);
            let mut lev = p.rate;
            for i in 0..n {
                let v = x.get(r, 1 + i);
                let pi = control.get(r, i);
                let vp = v.max(0.0);
                lev += p.a * pi * vp;
                // row 0 of sigma, column i: w pi sqrt(v)
                diffusion.set(r, i * d, pi * vp.sqrt());
                if v > 0.0 {
                    drift.set(r, 1 + i, w * p.a * pi);
                    diffusion.set(r, i * d + 1 + i, w * pi * 0.5 / v.sqrt());
                }
            }
            drift.set(r, 0, lev);
        }
        Jacobians {
            drift,
            diffusion,
            gain: None,
        }
    }
}

/// Dual of [`HestonPrimal`] for `K = R^n`: state `(y, v_1..v_n)`, control
/// `gamma` loading the variance noises, free initial `y0`.
#[derive(Clone, Debug, PartialEq)]
pub struct HestonDual {
    pub params: HestonParams,
    pub utility: UtilitySpec,
    pub stocks: usize,
    pub x0: f64,
}

impl ControlProblem for HestonDual {
    fn state_dim(&self) -> usize {
        1 + self.stocks
    }
    fn noise_dim(&self) -> usize {
        2 * self.stocks
    }
    fn control_dim(&self) -> usize {
        self.stocks
    }
    fn direction(&self) -> Direction {
        Direction::Minimise
    }
    fn initial_state(&self) -> Vec<f64> {
        let mut s = vec![self.free_initial().map(|f| f.initial_guess).unwrap_or(1.0)];
        s.extend(std::iter::repeat(self.params.v0).take(self.stocks));
        s
    }
    fn name(&self) -> String {
        format!("heston-dual-{}", self.utility.name())
    }
    fn geometric_coords(&self) -> Vec<usize> {
        vec![0]
    }

    fn coefficients(&self, tape: &mut Tape, _t: f64, x: NodeId, control: NodeId) -> (NodeId, NodeId) {
        let n = self.stocks;
        let k = tape.shape(x).0;
        let p = &self.params;
        let (y, _v, vp, sv) = heston_common(p, tape, x, n);
        let d0 = tape.scalar_mul(y, -p.rate);
        let dv = heston_variance_drift(p, tape, vp);
        let drift = tape.concat_cols(&[d0, dv]);
        let a = tape.scale_rows(sv, y);
        let a = tape.scalar_mul(a, -p.a);
        let g = tape.scale_rows(control, y);
        let g = tape.scalar_mul(g, p.rho_bar());
        let mut parts = vec![a, g];
        parts.extend(heston_variance_rows(p, tape, sv, n, k));
        (drift, tape.concat_cols(&parts))
    }

    fn terminal(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (u, du) = UtilityDual::dual_terminal(&self.utility, x[0]);
        let mut grad = vec![0.0; x.len()];
        grad[0] = du;
        (u, grad)
    }

    fn free_initial(&self) -> Option<FreeInitial> {
        let guess = self.utility.u_eval(self.x0).map(|u| u.1).unwrap_or(1.0);
        Some(FreeInitial {
            coordinate: 0,
            utility: self.utility,
            x0: self.x0,
            initial_guess: guess,
        })
    }

    fn state_jacobians(&self, _t: f64, x: &Tensor, control: &Tensor) -> Jacobians {
        let (k, d) = x.shape();
        let n = self.stocks;
        let cols = 2 * n;
        let p = &self.params;
        let mut drift = Tensor::zeros(k, d * d);
        let mut diffusion = Tensor::zeros(k, d * cols * d);
        heston_variance_jacobians(p, x, &mut drift, &mut diffusion);
        for r in 0..k {
            let y = x.get(r, 0);
            drift.set(r, 0, -p.rate);
            for i in 0..n {
                let v = x.get(r, 1 + i);
                let vp = v.max(0.0);
                diffusion.set(r, i * d, -p.a * vp.sqrt());
                if v > 0.0 {
                    diffusion.set(r, i * d + 1 + i, -y * p.a * 0.5 / v.sqrt());
                }
                diffusion.set(r, (n + i) * d, p.rho_bar() * control.get(r, i));
            }
        }
        Jacobians {
            drift,
            diffusion,
            gain: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde2::{
        autodiff_jacobians, classify_hamiltonian, coefficients_value, hamiltonian_f, hamiltonian_h_grad,
        h_grad_from_jacobians, HamiltonianShape,
    };
    use crate::sde::{heston_dynamics, HestonSide};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_market() -> MarketCoefficients {
        MarketCoefficients::constant(0.0, &[1.0], &[vec![1.0]]).unwrap()
    }

    fn primal(market: MarketCoefficients) -> UtilityPrimal {
        let m = market.dim();
        UtilityPrimal {
            market,
            utility: UtilitySpec::Power { p: 0.5 },
            constraint: ConstraintSet::Full { m },
            enforcement: Enforcement::default(),
            x0: 1.0,
        }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect())
    }

    #[test]
    fn hamiltonian_examples() {
        let p = primal(MarketCoefficients::constant(0.05, &[0.08], &[vec![0.2]]).unwrap());
        let x = Tensor::scalar(2.0);
        let f = hamiltonian_f(&p, 0.0, &x, &Tensor::scalar(0.0), &Tensor::scalar(3.0), &Tensor::scalar(-1.0));
        assert!((f[0] - 2.0 * 3.0 * 0.05).abs() < 1e-15);

        // F(pi) = pi - pi^2/2 at x = z = 1, gamma = -1, r = 0, b = sigma = 1
        let p = primal(scalar_market());
        let pis = [0.0, 0.5, 1.0, 1.5, 2.0];
        let k = pis.len();
        let f = hamiltonian_f(
            &p,
            0.0,
            &Tensor::filled(k, 1, 1.0),
            &Tensor::column(&pis),
            &Tensor::filled(k, 1, 1.0),
            &Tensor::filled(k, 1, -1.0),
        );
        for (pi, fv) in pis.iter().zip(&f) {
            assert!((fv - (pi - pi * pi / 2.0)).abs() < 1e-15);
        }
        assert_eq!(f[2], 0.5);
        assert_eq!(
            classify_hamiltonian(&p, 0.0, &[1.0], &[0.3], &[1.0], &[-1.0]),
            HamiltonianShape::StrictlyConcave
        );
        assert_eq!(
            classify_hamiltonian(&p, 0.0, &[1.0], &[0.3], &[1.0], &[0.0]),
            HamiltonianShape::Linear
        );
        let two = primal(MarketCoefficients::constant(0.0, &[0.1, 0.1], &[vec![0.3, 0.0], vec![0.1, 0.2]]).unwrap());
        assert_eq!(
            classify_hamiltonian(&two, 0.0, &[1.0], &[0.1, 0.2], &[1.0], &[1.0]),
            HamiltonianShape::StrictlyConvex
        );
    }

    #[test]
    fn argmax_is_scale_invariant() {
        let p = primal(scalar_market());
        let pis: Vec<f64> = (0..=200).map(|i| i as f64 * 0.01).collect();
        let k = pis.len();
        for lambda in [0.5, 1.0, 7.0] {
            let f = hamiltonian_f(
                &p,
                0.0,
                &Tensor::filled(k, 1, 1.0),
                &Tensor::column(&pis),
                &Tensor::filled(k, 1, lambda),
                &Tensor::filled(k, 1, -lambda),
            );
            let best = f.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            assert_eq!(best, 100);
            assert!((f[100] - 0.5 * lambda).abs() < 1e-12);
        }
    }

    #[test]
    fn wealth_h_grad_is_hand_derivative() {
        let market = MarketCoefficients::constant(0.03, &[0.08, 0.05], &[vec![0.2, 0.05], vec![0.0, 0.3]]).unwrap();
        let p = primal(market.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 4, 1, 0.5, 2.0);
        let pi = random_tensor(&mut rng, 4, 2, -1.0, 1.0);
        let z = random_tensor(&mut rng, 4, 1, -1.0, 1.0);
        let q = random_tensor(&mut rng, 4, 2, -1.0, 1.0);
        let g = hamiltonian_h_grad(&p, 0.0, &x, &pi, &z, &q);
        let b = market.excess(0.0);
        let s = market.sigma(0.0);
        for r in 0..4 {
            let pr = pi.row(r);
            let lev = 0.03 + pr[0] * b[0] + pr[1] * b[1];
            let ps: Vec<f64> = (0..2).map(|c| pr[0] * s[(0, c)] + pr[1] * s[(1, c)]).collect();
            let want = lev * z.get(r, 0) + ps[0] * q.get(r, 0) + ps[1] * q.get(r, 1);
            assert!((g.get(r, 0) - want).abs() < 1e-14);
        }
    }

    fn check_jacobians<P: ControlProblem>(p: &P, x: &Tensor, u: &Tensor) {
        let analytic = p.state_jacobians(0.1, x, u);
        let auto = autodiff_jacobians(p, 0.1, x, u);
        let scale = 1.0 + analytic.diffusion.max_abs().max(analytic.drift.max_abs());
        assert!(analytic.drift.zip_map(&auto.drift, |a, b| a - b).max_abs() < 1e-12 * scale);
        assert!(analytic.diffusion.zip_map(&auto.diffusion, |a, b| a - b).max_abs() < 1e-12 * scale);
        // finite differences of the coefficients
        let (k, d) = x.shape();
        let n = p.noise_dim();
        for l in 0..d {
            let h = 1e-6;
            let mut up = x.clone();
            let mut dn = x.clone();
            for r in 0..k {
                up.set(r, l, x.get(r, l) + h);
                dn.set(r, l, x.get(r, l) - h);
            }
            let (bu, su) = coefficients_value(p, 0.1, &up, u);
            let (bd, sd) = coefficients_value(p, 0.1, &dn, u);
            for r in 0..k {
                for j in 0..d {
                    let fd = (bu.get(r, j) - bd.get(r, j)) / (2.0 * h);
                    let a = analytic.drift.get(r, j * d + l);
                    assert!((fd - a).abs() <= 1e-5 * (1.0 + a.abs()), "drift {j},{l}: {fd} vs {a}");
                }
                for c in 0..d * n {
                    let fd = (su.get(r, c) - sd.get(r, c)) / (2.0 * h);
                    let a = analytic.diffusion.get(r, c * d + l);
                    assert!((fd - a).abs() <= 1e-5 * (1.0 + a.abs()), "diffusion {c},{l}: {fd} vs {a}");
                }
            }
        }
    }

    #[test]
    fn heston_coefficients_match_reference_rows() {
        let params = HestonParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for stocks in [1, 3] {
            let x = {
                let mut t = random_tensor(&mut rng, 6, 1 + stocks, 0.05, 0.8);
                t.set(0, 0, 1.3);
                t
            };
            let u = random_tensor(&mut rng, 6, stocks, -1.0, 1.0);
            let hp = HestonPrimal {
                params,
                utility: UtilitySpec::Power { p: 0.5 },
                stocks,
                constraint: ConstraintSet::Full { m: stocks },
                enforcement: Enforcement::default(),
                x0: 1.0,
            };
            let hd = HestonDual {
                params,
                utility: UtilitySpec::Power { p: 0.5 },
                stocks,
                x0: 1.0,
            };
            for (side, (b, s)) in [
                (HestonSide::Primal, coefficients_value(&hp, 0.0, &x, &u)),
                (HestonSide::Dual, coefficients_value(&hd, 0.0, &x, &u)),
            ] {
                for r in 0..6 {
                    let (rb, rs) = heston_dynamics(&params, side, x.row(r), u.row(r));
                    for (a, e) in b.row(r).iter().zip(&rb) {
                        assert!((a - e).abs() < 1e-15);
                    }
                    for (a, e) in s.row(r).iter().zip(&rs) {
                        assert!((a - e).abs() < 1e-15);
                    }
                }
            }
            check_jacobians(&hp, &x, &u);
            check_jacobians(&hd, &x, &u);
        }
    }

    #[test]
    fn heston_h_grad_matches_finite_differences() {
        let params = HestonParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let hp = HestonPrimal {
            params,
            utility: UtilitySpec::Power { p: 0.5 },
            stocks: 2,
            constraint: ConstraintSet::Full { m: 2 },
            enforcement: Enforcement::default(),
            x0: 1.0,
        };
        for _ in 0..20 {
            let x = random_tensor(&mut rng, 1, 3, 0.05, 1.5);
            let u = random_tensor(&mut rng, 1, 2, -1.0, 1.0);
            let z = random_tensor(&mut rng, 1, 3, -1.0, 1.0);
            let q = random_tensor(&mut rng, 1, 12, -1.0, 1.0);
            let g = hamiltonian_h_grad(&hp, 0.0, &x, &u, &z, &q);
            let jac = hp.state_jacobians(0.0, &x, &u);
            let g2 = h_grad_from_jacobians(&jac, &z, &q, 3, 4);
            let h_of = |xx: &Tensor| {
                let (b, s) = coefficients_value(&hp, 0.0, xx, &u);
                b.zip_map(&z, |a, c| a * c).sum() + s.zip_map(&q, |a, c| a * c).sum()
            };
            for l in 0..3 {
                let h = 1e-6;
                let mut up = x.clone();
                let mut dn = x.clone();
                up.set(0, l, x.get(0, l) + h);
                dn.set(0, l, x.get(0, l) - h);
                let fd = (h_of(&up) - h_of(&dn)) / (2.0 * h);
                let a = g.get(0, l);
                assert!((a - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "{a} vs {fd}");
                assert!((a - g2.get(0, l)).abs() < 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn utility_jacobians_match_autodiff() {
        let market = MarketCoefficients::example1(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 5, 1, 0.5, 2.0);
        let u = random_tensor(&mut rng, 5, 3, -1.0, 1.0);
        check_jacobians(&primal(market.clone()), &x, &u);
        let dual = UtilityDual {
            market,
            utility: UtilitySpec::Log,
            constraint: ConstraintSet::Ball { m: 3, radius: 1.0 },
            rule: ProjectionRule::Max,
            x0: 1.0,
        };
        check_jacobians(&dual, &x, &u);
    }

    #[test]
    fn dual_rows_follow_dual_dynamics() {
        let market = MarketCoefficients::example1(4, 2);
        let set = ConstraintSet::Ball { m: 2, radius: 0.5 };
        let dual = UtilityDual {
            market: market.clone(),
            utility: UtilitySpec::Log,
            constraint: set.clone(),
            rule: ProjectionRule::Max,
            x0: 1.0,
        };
        let y = Tensor::column(&[0.7, 1.9]);
        let v = Tensor::from_vec(2, 2, vec![0.1, -0.3, 0.0, 0.4]);
        let (b, s) = coefficients_value(&dual, 0.2, &y, &v);
        for r in 0..2 {
            let (rb, rs) = crate::sde::dual_dynamics(&market, &set, 0.2, y.get(r, 0), v.row(r)).unwrap();
            assert!((b.get(r, 0) - rb).abs() < 1e-14);
            for c in 0..2 {
                assert!((s.get(r, c) - rs[c]).abs() < 1e-14);
            }
        }
        assert!(!UtilityDual {
            constraint: ConstraintSet::Full { m: 2 },
            ..dual.clone()
        }
        .trainable_control());
        assert_eq!(dual.free_initial().unwrap().initial_guess, 1.0);
    }
}
