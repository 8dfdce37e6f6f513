//! Closed convex control sets `K`, their support functions and the maps that
//! push raw network outputs into `K` (or into the dual cone for dual controls).

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};

/// Nonempty closed convex set containing the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConstraintSet {
    /// `K = R^m`.
    Full { m: usize },
    /// `K = R_+^m`.
    Cone { m: usize },
    /// Closed Euclidean ball `B(0, R)`.
    Ball { m: usize, radius: f64 },
    /// Product of intervals `[lower_i, upper_i]` with `lower_i <= 0 <= upper_i`.
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

/// How a raw network output is mapped into a set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionRule {
    /// `max(0, x)` on cones, radial rescale on balls, clamping on boxes.
    Max,
    /// Element-wise square on cones.
    Square,
    /// Balls only: `x -> R x (1 - exp(-|x|^2)) / |x|`.
    ExpRescale,
}

impl Default for ProjectionRule {
    fn default() -> Self {
        ProjectionRule::Max
    }
}

/// Quadratic exterior penalty `beta * dist(pi, K)^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub weight: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { weight: 1000.0 }
    }
}

const NORM_FLOOR: f64 = 1e-300;

fn norm(z: &[f64]) -> f64 {
    z.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl ConstraintSet {
    pub fn dim(&self) -> usize {
        match self {
            ConstraintSet::Full { m } | ConstraintSet::Cone { m } | ConstraintSet::Ball { m, .. } => *m,
            ConstraintSet::Box { lower, .. } => lower.len(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dim() == 0 {
            return Err("constraint dimension must be positive".into());
        }
        match self {
            ConstraintSet::Ball { radius, .. } if !(*radius > 0.0 && radius.is_finite()) => {
                Err("ball radius must be positive and finite".into())
            }
            ConstraintSet::Box { lower, upper } => {
                if lower.len() != upper.len() {
                    return Err("box bounds differ in length".into());
                }
                if lower.iter().zip(upper).any(|(l, u)| !(*l <= 0.0 && 0.0 <= *u)) {
                    return Err("box must contain the origin".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Whether the dual set forces `v = 0`.
    pub fn dual_is_trivial(&self) -> bool {
        matches!(self, ConstraintSet::Full { .. })
    }

    /// `delta_K(z) = sup_{pi in K} -pi^T z`, possibly `+inf`.
    pub fn support(&self, z: &[f64]) -> f64 {
        match self {
            ConstraintSet::Full { .. } => {
                if z.iter().all(|x| *x == 0.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ConstraintSet::Cone { .. } => {
                if z.iter().all(|x| *x >= 0.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ConstraintSet::Ball { radius, .. } => radius * norm(z),
            ConstraintSet::Box { lower, upper } => z
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(z, (l, u))| (-l * z).max(-u * z))
                .sum(),
        }
    }

    pub fn contains(&self, pi: &[f64], tol: f64) -> bool {
        match self {
            ConstraintSet::Full { .. } => true,
            ConstraintSet::Cone { .. } => pi.iter().all(|x| *x >= -tol),
            ConstraintSet::Ball { radius, .. } => norm(pi) <= radius + tol,
            ConstraintSet::Box { lower, upper } => pi
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(x, (l, u))| *x >= l - tol && *x <= u + tol),
        }
    }

    /// Whether `v` lies in the effective domain of `delta_K`.
    pub fn dual_contains(&self, v: &[f64], tol: f64) -> bool {
        match self {
            ConstraintSet::Full { .. } => v.iter().all(|x| x.abs() <= tol),
            ConstraintSet::Cone { .. } => v.iter().all(|x| *x >= -tol),
            _ => true,
        }
    }

    /// Maps a raw vector into `K`.
    pub fn project(&self, x: &[f64], rule: ProjectionRule) -> Vec<f64> {
        match self {
            ConstraintSet::Full { .. } => x.to_vec(),
            ConstraintSet::Cone { .. } => match rule {
                ProjectionRule::Square => x.iter().map(|v| v * v).collect(),
                _ => x.iter().map(|v| v.max(0.0)).collect(),
            },
            ConstraintSet::Ball { radius, .. } => {
                let n = norm(x);
                let f = match rule {
                    ProjectionRule::ExpRescale => {
                        if n < 1e-8 {
                            radius * n
                        } else {
                            radius * -(-n * n).exp_m1() / n
                        }
                    }
                    _ => {
                        if n <= *radius {
                            1.0
                        } else {
                            radius / n
                        }
                    }
                };
                x.iter().map(|v| v * f).collect()
            }
            ConstraintSet::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(v, (l, u))| v.clamp(*l, *u))
                .collect(),
        }
    }

    /// Maps a raw vector into the effective domain of `delta_K`.
    pub fn project_dual(&self, x: &[f64], rule: ProjectionRule) -> Vec<f64> {
        match self {
            ConstraintSet::Full { .. } => vec![0.0; x.len()],
            ConstraintSet::Cone { .. } => match rule {
                ProjectionRule::Square => x.iter().map(|v| v * v).collect(),
                _ => x.iter().map(|v| v.max(0.0)).collect(),
            },
            _ => x.to_vec(),
        }
    }

    /// Tape version of [`ConstraintSet::project`] for a `k x m` batch.
    pub fn project_on_tape(&self, tape: &mut Tape, x: NodeId, rule: ProjectionRule) -> NodeId {
        match self {
            ConstraintSet::Full { .. } => x,
            ConstraintSet::Cone { .. } => match rule {
                ProjectionRule::Square => tape.square(x),
                _ => tape.relu(x),
            },
            ConstraintSet::Ball { radius, .. } => {
                let sq = tape.row_dot(x, x);
                let sq = tape.add_scalar(sq, NORM_FLOOR);
                let n = tape.sqrt(sq);
                let factor = match rule {
                    ProjectionRule::ExpRescale => {
                        // R (1 - e^{-n^2}) / n
                        let neg = tape.scalar_mul(sq, -1.0);
                        let e = tape.exp(neg);
                        let one_minus = tape.scalar_mul(e, -1.0);
                        let one_minus = tape.add_scalar(one_minus, 1.0);
                        let q = tape.div(one_minus, n);
                        tape.scalar_mul(q, *radius)
                    }
                    _ => {
                        // min(1, R/n) = 1 - relu(1 - R/n)
                        let inv = tape.powf(n, -1.0);
                        let rn = tape.scalar_mul(inv, -radius);
                        let gap = tape.add_scalar(rn, 1.0);
                        let over = tape.relu(gap);
                        let neg = tape.neg(over);
                        tape.add_scalar(neg, 1.0)
                    }
                };
                tape.scale_rows(x, factor)
            }
            ConstraintSet::Box { lower, upper } => {
                // l + relu(x - l) - relu(x - u)
                let k = tape.shape(x).0;
                let lo = tape.constant(Tensor::row_vector(lower).repeat_rows(k));
                let hi = tape.constant(Tensor::row_vector(upper).repeat_rows(k));
                let a = tape.sub(x, lo);
                let a = tape.relu(a);
                let b = tape.sub(x, hi);
                let b = tape.relu(b);
                let ab = tape.sub(a, b);
                tape.add(lo, ab)
            }
        }
    }

    /// Tape version of [`ConstraintSet::project_dual`].
    pub fn project_dual_on_tape(&self, tape: &mut Tape, x: NodeId, rule: ProjectionRule) -> NodeId {
        match self {
            ConstraintSet::Full { .. } => {
                let (k, m) = tape.shape(x);
                tape.constant(Tensor::zeros(k, m))
            }
            ConstraintSet::Cone { .. } => match rule {
                ProjectionRule::Square => tape.square(x),
                _ => tape.relu(x),
            },
            _ => x,
        }
    }

    /// `delta_K` of every row of a `k x m` node already inside the dual domain,
    /// as a `k x 1` node.
    pub fn support_on_tape(&self, tape: &mut Tape, v: NodeId) -> NodeId {
        let (k, _) = tape.shape(v);
        match self {
            ConstraintSet::Full { .. } | ConstraintSet::Cone { .. } => tape.constant(Tensor::zeros(k, 1)),
            ConstraintSet::Ball { radius, .. } => {
                let sq = tape.row_dot(v, v);
                let sq = tape.add_scalar(sq, NORM_FLOOR);
                let n = tape.sqrt(sq);
                tape.scalar_mul(n, *radius)
            }
            ConstraintSet::Box { lower, upper } => {
                // max(-l z, -u z) = -u z + relu((u - l) z)
                let width: Vec<f64> = upper.iter().zip(lower).map(|(u, l)| u - l).collect();
                let neg_u: Vec<f64> = upper.iter().map(|u| -u).collect();
                let w = tape.constant(Tensor::row_vector(&width).repeat_rows(k));
                let nu = tape.constant(Tensor::row_vector(&neg_u).repeat_rows(k));
                let a = tape.mul(v, nu);
                let b = tape.mul(v, w);
                let b = tape.relu(b);
                let s = tape.add(a, b);
                tape.row_sum(s)
            }
        }
    }

    /// `beta * dist(pi, K)^2`; zero on `K`.
    pub fn penalty(&self, pi: &[f64], config: PenaltyConfig) -> f64 {
        let dist2 = match self {
            ConstraintSet::Full { .. } => 0.0,
            ConstraintSet::Cone { .. } => pi.iter().map(|x| x.min(0.0).powi(2)).sum(),
            ConstraintSet::Ball { radius, .. } => (norm(pi) - radius).max(0.0).powi(2),
            ConstraintSet::Box { lower, upper } => pi
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(x, (l, u))| ((l - x).max(0.0) + (x - u).max(0.0)).powi(2))
                .sum(),
        };
        config.weight * dist2
    }

    /// Per-row penalty of a `k x m` node as a `k x 1` node.
    pub fn penalty_on_tape(&self, tape: &mut Tape, pi: NodeId, config: PenaltyConfig) -> NodeId {
        let (k, _) = tape.shape(pi);
        let dist2 = match self {
            ConstraintSet::Full { .. } => return tape.constant(Tensor::zeros(k, 1)),
            ConstraintSet::Cone { .. } => {
                let neg = tape.neg(pi);
                let out = tape.relu(neg);
                tape.row_dot(out, out)
            }
            ConstraintSet::Ball { radius, .. } => {
                let sq = tape.row_dot(pi, pi);
                let n = tape.sqrt(sq);
                let over = tape.add_scalar(n, -radius);
                let over = tape.relu(over);
                tape.square(over)
            }
            ConstraintSet::Box { lower, upper } => {
                let lo = tape.constant(Tensor::row_vector(lower).repeat_rows(k));
                let hi = tape.constant(Tensor::row_vector(upper).repeat_rows(k));
                let below = tape.sub(lo, pi);
                let below = tape.relu(below);
                let above = tape.sub(pi, hi);
                let above = tape.relu(above);
                let out = tape.add(below, above);
                tape.row_dot(out, out)
            }
        };
        tape.scalar_mul(dist2, config.weight)
    }
}

/// `P_2 delta_K(v) + Q_2^T sigma^{-1} v`, or `None` when `delta_K(v) = inf`.
///
/// `sigma_inv` is the row-major `m x m` inverse volatility.
pub fn complementarity_residual(
    set: &ConstraintSet,
    p2: f64,
    q2: &[f64],
    sigma_inv: &[f64],
    v: &[f64],
) -> Option<f64> {
    let delta = set.support(v);
    if !delta.is_finite() {
        return None;
    }
    let m = v.len();
    let mut cross = 0.0;
    for i in 0..m {
        let s: f64 = (0..m).map(|j| sigma_inv[i * m + j] * v[j]).sum();
        cross += q2[i] * s;
    }
    let lead = if delta == 0.0 { 0.0 } else { p2 * delta };
    Some(lead + cross)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_sets(m: usize) -> Vec<ConstraintSet> {
        vec![
            ConstraintSet::Full { m },
            ConstraintSet::Cone { m },
            ConstraintSet::Ball { m, radius: 1.3 },
            ConstraintSet::Box {
                lower: vec![-0.5; m],
                upper: vec![2.0; m],
            },
        ]
    }

    #[test]
    fn support_examples() {
        assert_eq!(ConstraintSet::Ball { m: 2, radius: 2.0 }.support(&[3.0, 4.0]), 10.0);
        assert_eq!(ConstraintSet::Cone { m: 2 }.support(&[1.0, 2.0]), 0.0);
        assert_eq!(ConstraintSet::Cone { m: 2 }.support(&[1.0, -2.0]), f64::INFINITY);
        assert_eq!(ConstraintSet::Full { m: 2 }.support(&[0.0, 0.0]), 0.0);
        assert_eq!(ConstraintSet::Full { m: 2 }.support(&[0.0, 1e-9]), f64::INFINITY);
        let b = ConstraintSet::Box {
            lower: vec![-1.0],
            upper: vec![2.0],
        };
        // sup over pi in [-1, 2] of -pi z
        assert_eq!(b.support(&[1.0]), 1.0);
        assert_eq!(b.support(&[-1.0]), 2.0);
    }

    #[test]
    fn projection_examples() {
        let cone = ConstraintSet::Cone { m: 2 };
        assert_eq!(cone.project(&[-1.0, 2.0], ProjectionRule::Max), vec![0.0, 2.0]);
        assert_eq!(
            ConstraintSet::Cone { m: 1 }.project(&[-3.0], ProjectionRule::Square),
            vec![9.0]
        );
        let ball = ConstraintSet::Ball { m: 2, radius: 1.0 };
        let p = ball.project(&[3.0, 4.0], ProjectionRule::Max);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        let e = ball.project(&[3.0, 4.0], ProjectionRule::ExpRescale);
        assert!((norm(&e) - (1.0 - (-25.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn penalty_examples() {
        let ball = ConstraintSet::Ball { m: 1, radius: 1.0 };
        let c = PenaltyConfig::default();
        assert_eq!(ball.penalty(&[0.5], c), 0.0);
        assert_eq!(ball.penalty(&[2.0], c), 1000.0);
        assert_eq!(ball.penalty(&[1.0], c), 0.0);
    }

    #[test]
    fn complementarity_examples() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let cone = ConstraintSet::Cone { m: 2 };
        assert_eq!(complementarity_residual(&cone, 1.0, &[0.3, 0.4], &eye, &[0.0, 0.0]), Some(0.0));
        assert_eq!(
            complementarity_residual(&ConstraintSet::Full { m: 2 }, 2.0, &[0.3, 0.4], &eye, &[0.0, 0.0]),
            Some(0.0)
        );
        let inv = [2.0, 0.0, 1.0, 4.0];
        let r = complementarity_residual(&cone, 5.0, &[1.0, 1.0], &inv, &[1.0, 2.0]).unwrap();
        // sigma^{-1} v = (2, 9)
        assert_eq!(r, 11.0);
        let ball = ConstraintSet::Ball { m: 2, radius: 2.0 };
        let r = complementarity_residual(&ball, 0.5, &[0.0, 0.0], &eye, &[3.0, 4.0]).unwrap();
        assert_eq!(r, 5.0);
        assert_eq!(complementarity_residual(&cone, 1.0, &[1.0, 1.0], &eye, &[-1.0, 0.0]), None);
    }

    #[test]
    fn tape_versions_match() {
        let rows = [vec![-1.0, 2.0], vec![3.0, 4.0], vec![0.1, -0.2], vec![-3.0, 5.0]];
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        for set in all_sets(2) {
            for rule in [ProjectionRule::Max, ProjectionRule::Square, ProjectionRule::ExpRescale] {
                let mut tape = Tape::new();
                let x = tape.var(Tensor::from_vec(4, 2, data.clone()));
                let p = set.project_on_tape(&mut tape, x, rule);
                let pen = set.penalty_on_tape(&mut tape, x, PenaltyConfig::default());
                let dual = set.project_dual_on_tape(&mut tape, x, rule);
                let sup = set.support_on_tape(&mut tape, dual);
                for (r, row) in rows.iter().enumerate() {
                    let want = set.project(row, rule);
                    for c in 0..2 {
                        assert!((tape.value(p).get(r, c) - want[c]).abs() < 1e-12, "{set:?} {rule:?}");
                    }
                    let pp = set.penalty(row, PenaltyConfig::default());
                    assert!((tape.value(pen).get(r, 0) - pp).abs() < 1e-9 * (1.0 + pp));
                    let dv = set.project_dual(row, rule);
                    assert!((tape.value(sup).get(r, 0) - set.support(&dv)).abs() < 1e-12);
                }
            }
        }
    }

    fn vec2() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 3)
    }

    proptest! {
        #[test]
        fn projection_lands_in_k(x in vec2()) {
            for set in all_sets(3) {
                for rule in [ProjectionRule::Max, ProjectionRule::Square, ProjectionRule::ExpRescale] {
                    let p = set.project(&x, rule);
                    prop_assert!(set.contains(&p, 1e-12), "{set:?} {rule:?} {p:?}");
                    let pv = set.project_dual(&x, rule);
                    prop_assert!(set.support(&pv).is_finite());
                }
                let p = set.project(&x, ProjectionRule::Max);
                let again = set.project(&p, ProjectionRule::Max);
                for (a, b) in p.iter().zip(&again) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn support_is_positively_homogeneous(z in vec2(), lambda in 0.01f64..50.0) {
            for set in all_sets(3) {
                let scaled: Vec<f64> = z.iter().map(|v| v * lambda).collect();
                let a = set.support(&scaled);
                let b = lambda * set.support(&z);
                if b.is_finite() {
                    prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                } else {
                    prop_assert!(a.is_infinite());
                }
                prop_assert!(set.support(&z) >= 0.0);
            }
        }

        #[test]
        fn penalty_is_zero_exactly_on_k(x in vec2()) {
            for set in all_sets(3) {
                let pen = set.penalty(&x, PenaltyConfig::default());
                if set.contains(&x, 0.0) {
                    prop_assert_eq!(pen, 0.0);
                } else {
                    prop_assert!(pen > 0.0);
                }
            }
        }
    }
}
