//! Discrete-time high-order CBF machinery over linearized boundaries.
//!
//! The barrier sequence is built on the tangent-halfspace value
//! `psi0 := h` and unrolled through the linear recursion
//! `psi_i(x_k) = psi_{i-1}(x_{k+1}) + (gamma_i - 1) psi_{i-1}(x_k)`.
//! Unrolling produces the combinatorial Z-coefficients; the emitted rows
//! are affine in the predicted positions and the relaxation variables.

use crate::geometry::{Point, TangentHalfspace};
use itertools::Itertools;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CbfError {
    #[error("gamma values must lie in (0, 1], got {0}")]
    GammaOutOfRange(f64),
    #[error("cbf order must be at least 1")]
    EmptyGammas,
    #[error("index out of range: nu={nu}, i={i}")]
    IndexOutOfRange { nu: usize, i: usize },
    #[error("order {order} exceeds configured highest order {m_cbf}")]
    OrderTooHigh { order: usize, m_cbf: usize },
    #[error("constraint at step k={k}, order i={i} references step {step} beyond horizon {horizon}")]
    BeyondHorizon {
        k: usize,
        i: usize,
        step: usize,
        horizon: usize,
    },
    #[error("missing tangent halfspace for step {0}")]
    MissingHalfspace(usize),
    #[error("psi0 at the current state is not finite")]
    NonFinitePsi0,
}

/// Decay rates `gamma_1 .. gamma_{m_cbf}`; the vector length is the
/// highest barrier order.
#[derive(Debug, Clone, PartialEq)]
pub struct CbfConfig {
    gammas: Vec<f64>,
}

impl CbfConfig {
    pub fn new(gammas: Vec<f64>) -> Result<Self, CbfError> {
        if gammas.is_empty() {
            return Err(CbfError::EmptyGammas);
        }
        for &g in &gammas {
            if !(g > 0.0 && g <= 1.0) {
                return Err(CbfError::GammaOutOfRange(g));
            }
        }
        Ok(Self { gammas })
    }

    pub fn m_cbf(&self) -> usize {
        self.gammas.len()
    }

    /// `gamma_i`, 1-based as in the recursion.
    pub fn gamma(&self, i: usize) -> f64 {
        self.gammas[i - 1]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }
}

/// How the relaxation variables enter the optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlackMode {
    /// `omega` free in R; feasibility-first, no safety guarantee.
    Unbounded,
    /// `omega >= 0` for first order plus the safety-preserving upper
    /// bounds for higher orders; carries the forward-invariance guarantee.
    Safe,
    /// `omega` pinned to 1: pure decay, no relaxation.
    None,
}

/// Combinatorial coefficient `Z_{nu,i}`: the sum over all
/// `(i - nu - 1)`-element subsets of `{gamma_1 .. gamma_{i-1}}` of the
/// product of `(gamma - 1)` factors. `Z_{i-1,i} = 1`, `Z_{i,i} = 0`.
pub fn z_coefficient(nu: usize, i: usize, gammas: &[f64]) -> Result<f64, CbfError> {
    if i < 1 || nu > i {
        return Err(CbfError::IndexOutOfRange { nu, i });
    }
    if nu == i {
        return Ok(0.0);
    }
    if nu == i - 1 {
        return Ok(1.0);
    }
    if gammas.len() < i - 1 {
        return Err(CbfError::IndexOutOfRange { nu, i });
    }
    let subset_size = i - nu - 1;
    Ok((1..i)
        .combinations(subset_size)
        .map(|subset| subset.iter().map(|&z| gammas[z - 1] - 1.0).product::<f64>())
        .sum())
}

/// Unrolls `psi_order(x_k)` into `sum_d c_d * psi0(x_{k+d})` through the
/// pure recursion; returns `c_0 .. c_order`.
pub fn expand_psi(order: usize, cfg: &CbfConfig) -> Result<Vec<f64>, CbfError> {
    if order > cfg.m_cbf() {
        return Err(CbfError::OrderTooHigh {
            order,
            m_cbf: cfg.m_cbf(),
        });
    }
    // coeffs[d] multiplies psi0 at offset d.
    let mut coeffs = vec![1.0];
    for i in 1..=order {
        let g = cfg.gamma(i);
        let mut next = vec![0.0; coeffs.len() + 1];
        for (d, c) in coeffs.iter().enumerate() {
            next[d + 1] += c; // psi_{i-1}(x_{k+1}) term
            next[d] += (g - 1.0) * c; // (gamma_i - 1) psi_{i-1}(x_k) term
        }
        coeffs = next;
    }
    Ok(coeffs)
}

/// One affine inequality `sum_s coeff_s . pos_s + slack_coeff * omega +
/// constant >= 0` over predicted positions `pos_s` (step index `s >= 1`)
/// and the row's relaxation variable.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    /// `(step, [cx, cy])` pairs; steps are open-loop indices `1..=N`.
    pub position_terms: Vec<(usize, [f64; 2])>,
    pub slack_coeff: f64,
    pub constant: f64,
}

impl ConstraintRow {
    fn zero() -> Self {
        Self {
            position_terms: Vec::new(),
            slack_coeff: 0.0,
            constant: 0.0,
        }
    }

    /// Adds `coeff * psi0(x_step)` expressed through the step's halfspace.
    fn add_psi0_term(&mut self, step: usize, coeff: f64, hs: &TangentHalfspace) {
        if coeff == 0.0 {
            return;
        }
        self.position_terms
            .push((step, [coeff * hs.normal.x, coeff * hs.normal.y]));
        self.constant += coeff * hs.constant();
    }

    /// Evaluates the row at concrete positions and slack value.
    pub fn eval(&self, positions: &dyn Fn(usize) -> Point, omega: f64) -> f64 {
        let mut v = self.constant + self.slack_coeff * omega;
        for (step, c) in &self.position_terms {
            let p = positions(*step);
            v += c[0] * p.x + c[1] * p.y;
        }
        v
    }
}

/// The rows emitted for one `(k, i)` pair of one obstacle.
#[derive(Debug, Clone, PartialEq)]
pub struct CbfRows {
    /// The relaxed barrier inequality itself.
    pub main: ConstraintRow,
    /// Safety-preserving upper bound on the slack (SAFE mode, `i >= 2`).
    pub slack_bound: Option<ConstraintRow>,
    /// `omega >= 0` (SAFE mode, `i = 1`).
    pub slack_sign: Option<ConstraintRow>,
    /// Set when `psi0` at the current state is on or inside the linearized
    /// boundary; the caller must pin this row's slack to zero.
    pub pin_slack_to_zero: bool,
}

/// Threshold below which `psi0(x_{t,0})` is treated as boundary-degenerate
/// and the slack is pinned instead of bounded.
pub const PSI0_DEGENERATE_EPS: f64 = 1e-9;

/// Emits the convex constraint rows for open-loop step `k` and order `i`.
///
/// `halfspaces[s]` is the tangent halfspace linearized at the nominal
/// state of step `s` (index 0 unused); `psi0_at_x0` is the constant
/// barrier value at the measured current state.
pub fn build_constraint_rows(
    k: usize,
    i: usize,
    halfspaces: &[Option<TangentHalfspace>],
    psi0_at_x0: f64,
    cfg: &CbfConfig,
    mode: SlackMode,
) -> Result<CbfRows, CbfError> {
    assert!(i >= 1 && i <= cfg.m_cbf(), "order i out of range");
    assert!(k >= 1, "open-loop step k starts at 1");
    if !psi0_at_x0.is_finite() {
        return Err(CbfError::NonFinitePsi0);
    }
    let horizon = halfspaces.len().saturating_sub(1);
    let hs = |step: usize| -> Result<&TangentHalfspace, CbfError> {
        halfspaces
            .get(step)
            .and_then(|h| h.as_ref())
            .ok_or(CbfError::MissingHalfspace(step))
    };
    let last_step = k + i - 1;
    if last_step > horizon || i > horizon {
        return Err(CbfError::BeyondHorizon {
            k,
            i,
            step: last_step.max(i),
            horizon,
        });
    }

    let gammas = cfg.gammas();
    let g1 = cfg.gamma(1);
    let gi = cfg.gamma(i);
    let decay = (1.0 - g1).powi(k as i32 - 1);

    // Main row: expand psi_{i-1}(x_{t,k}) over steps k..k+i-1, add the
    // correction sum over nu = 1..i, and move the slack term left.
    let mut main = ConstraintRow::zero();
    for (d, c) in expand_psi(i - 1, cfg)?.iter().enumerate() {
        main.add_psi0_term(k + d, *c, hs(k + d)?);
    }
    for nu in 1..=i {
        let z = z_coefficient(nu, i, gammas)?;
        main.add_psi0_term(nu, (gi - 1.0) * z * decay, hs(nu)?);
    }
    let z0 = z_coefficient(0, i, gammas)?;
    let slack_scale = (1.0 - gi) * z0 * decay * psi0_at_x0;
    main.slack_coeff = -slack_scale;

    let degenerate = psi0_at_x0 <= PSI0_DEGENERATE_EPS;
    let mut rows = CbfRows {
        main,
        slack_bound: None,
        slack_sign: None,
        pin_slack_to_zero: false,
    };

    match mode {
        SlackMode::Unbounded | SlackMode::None => {}
        SlackMode::Safe => {
            if degenerate {
                rows.main.slack_coeff = 0.0;
                rows.pin_slack_to_zero = true;
            } else if i == 1 {
                rows.slack_sign = Some(ConstraintRow {
                    position_terms: Vec::new(),
                    slack_coeff: 1.0,
                    constant: 0.0,
                });
            } else {
                // omega * (1-gamma_i) Z_{0,i} (1-gamma_1)^{k-1} psi0(x0)
                //   >= sum_{nu=0}^{i-2} Z_{nu,i} decay psi0(x_{nu+1})
                //    + sum_{nu=1}^{i} (gamma_i-1) Z_{nu,i} decay psi0(x_nu)
                let mut bound = ConstraintRow::zero();
                bound.slack_coeff = slack_scale;
                for nu in 0..=i - 2 {
                    let z = z_coefficient(nu, i, gammas)?;
                    bound.add_psi0_term(nu + 1, -z * decay, hs(nu + 1)?);
                }
                for nu in 1..=i {
                    let z = z_coefficient(nu, i, gammas)?;
                    bound.add_psi0_term(nu, -(gi - 1.0) * z * decay, hs(nu)?);
                }
                rows.slack_bound = Some(bound);
            }
        }
    }
    Ok(rows)
}

/// Evaluates the halfspace barrier at a concrete position.
pub fn psi0_value(halfspace: &TangentHalfspace, position: &Point) -> f64 {
    halfspace.eval(position)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::tangent_halfspace;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn z_explicit_example_from_expansion() {
        // Z_{1,4} = (g1-1)(g2-1) + (g1-1)(g3-1) + (g2-1)(g3-1) at g = 0.5.
        let z = z_coefficient(1, 4, &[0.5, 0.5, 0.5]).unwrap();
        assert_relative_eq!(z, 0.75, epsilon = 1e-15);
    }

    #[test]
    fn z_boundary_cases() {
        let g = [0.3, 0.7, 0.9, 0.2];
        for i in 1..=5 {
            assert_eq!(z_coefficient(i - 1, i, &g).unwrap(), 1.0);
            assert_eq!(z_coefficient(i, i, &g).unwrap(), 0.0);
        }
        assert_relative_eq!(z_coefficient(0, 2, &[0.4]).unwrap(), -0.6, epsilon = 1e-15);
        assert!(z_coefficient(3, 2, &g).is_err());
    }

    #[test]
    fn expand_psi_small_orders() {
        let cfg = CbfConfig::new(vec![0.4, 0.4]).unwrap();
        assert_eq!(expand_psi(0, &cfg).unwrap(), vec![1.0]);
        let c1 = expand_psi(1, &cfg).unwrap();
        assert_relative_eq!(c1[0], -0.6, epsilon = 1e-15);
        assert_relative_eq!(c1[1], 1.0, epsilon = 1e-15);
        let c2 = expand_psi(2, &cfg).unwrap();
        assert_relative_eq!(c2[0], 0.36, epsilon = 1e-15);
        assert_relative_eq!(c2[1], -1.2, epsilon = 1e-15);
        assert_relative_eq!(c2[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn expansion_coefficients_equal_z_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let gammas: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..=1.0)).collect();
            let cfg = CbfConfig::new(gammas.clone()).unwrap();
            for i in 1..=4 {
                let coeffs = expand_psi(i, &cfg).unwrap();
                for (d, c) in coeffs.iter().enumerate() {
                    let z = z_coefficient(d, i + 1, &gammas).unwrap();
                    assert!(
                        (c - z).abs() < 1e-12,
                        "c_{d} = {c} vs Z_{{{d},{}}} = {z}",
                        i + 1
                    );
                }
            }
        }
    }

    fn circle_fixture_halfspaces(n: usize) -> Vec<Option<TangentHalfspace>> {
        // All steps share the (-3,0)-vs-unit-circle tangent line.
        let hs = tangent_halfspace(
            &Point::new(-3.0, 0.0),
            &Point::new(-1.0, 0.0),
            0.0,
        )
        .unwrap();
        (0..=n).map(|_| Some(hs)).collect()
    }

    #[test]
    fn first_order_row_matches_displayed_form() {
        // i=1, k=1: psi0(x_1) >= omega (1-g1) psi0(x_0), omega >= 0.
        let cfg = CbfConfig::new(vec![0.4]).unwrap();
        let hs = circle_fixture_halfspaces(3);
        let rows = build_constraint_rows(1, 1, &hs, 4.0, &cfg, SlackMode::Safe).unwrap();
        let pos = |_: usize| Point::new(-3.0, 0.0);
        // At the nominal point psi0 = 4; row = 4 - omega*(1-0.4)*4.
        assert_relative_eq!(rows.main.eval(&pos, 0.0), 4.0, epsilon = 1e-12);
        assert_relative_eq!(rows.main.eval(&pos, 1.0), 4.0 - 0.6 * 4.0, epsilon = 1e-12);
        assert!(rows.slack_sign.is_some());
        assert!(rows.slack_bound.is_none());

        // General k: factor (1-g1)^k against the constant psi0(x0).
        let rows_k3 = build_constraint_rows(3, 1, &hs, 4.0, &cfg, SlackMode::Safe).unwrap();
        assert_relative_eq!(
            rows_k3.main.slack_coeff,
            -(1.0f64 - 0.4).powi(3) * 4.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn gamma_one_reduces_first_order_to_pure_barrier() {
        let cfg = CbfConfig::new(vec![1.0]).unwrap();
        let hs = circle_fixture_halfspaces(3);
        for k in 1..=3 {
            let rows = build_constraint_rows(k, 1, &hs, 4.0, &cfg, SlackMode::Safe).unwrap();
            assert_eq!(rows.main.slack_coeff, 0.0);
            // Row reduces to psi0(x_k) >= 0.
            let p = Point::new(-2.0, 0.5);
            let expected = hs[k].unwrap().eval(&p);
            assert_relative_eq!(rows.main.eval(&|_| p, 0.7), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn rows_are_affine_by_superposition() {
        let cfg = CbfConfig::new(vec![0.4, 0.7]).unwrap();
        let hs = circle_fixture_halfspaces(5);
        let rows = build_constraint_rows(2, 2, &hs, 4.0, &cfg, SlackMode::Safe).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for row in [&rows.main, rows.slack_bound.as_ref().unwrap()] {
            let pa: Vec<Point> = (0..6)
                .map(|_| Point::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
                .collect();
            let pb: Vec<Point> = (0..6)
                .map(|_| Point::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
                .collect();
            let (wa, wb) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let va = row.eval(&|s| pa[s], wa);
            let vb = row.eval(&|s| pb[s], wb);
            let vmid = row.eval(
                &|s| (pa[s] + pb[s]) / 2.0,
                (wa + wb) / 2.0,
            );
            assert_relative_eq!(vmid, (va + vb) / 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn degenerate_psi0_pins_slack() {
        let cfg = CbfConfig::new(vec![0.4, 0.4]).unwrap();
        let hs = circle_fixture_halfspaces(4);
        let rows = build_constraint_rows(1, 2, &hs, 0.0, &cfg, SlackMode::Safe).unwrap();
        assert!(rows.pin_slack_to_zero);
        assert_eq!(rows.main.slack_coeff, 0.0);
        assert!(rows.slack_bound.is_none());
    }

    #[test]
    fn second_order_row_against_nonconvex_original_form() {
        // i=2, k=1, g1=g2=0.4, the (-3,0)-vs-unit-circle fixture: any
        // assignment satisfying the emitted rows with omega in the bound
        // must also satisfy the original nonconvex form
        // psi1(x_1) >= w (1-g2) psi1(x_0) for some admissible w >= 0,
        // checked by brute force over a grid.
        let cfg2 = CbfConfig::new(vec![0.4, 0.4]).unwrap();
        let cfg1 = CbfConfig::new(vec![0.4]).unwrap();
        let hs_list = circle_fixture_halfspaces(4);
        let psi0_x0 = 4.0;
        let rows2 = build_constraint_rows(1, 2, &hs_list, psi0_x0, &cfg2, SlackMode::Safe).unwrap();
        let rows1 = build_constraint_rows(1, 1, &hs_list, psi0_x0, &cfg1, SlackMode::Safe).unwrap();
        let hs = hs_list[1].unwrap();

        let psi0 = |p: &Point| hs.eval(p);
        let grid: Vec<f64> = (-6..=6).map(|i| i as f64 * 0.5).collect();
        let mut checked = 0;
        for &x1 in &grid {
            for &x2 in &grid {
                let p1 = Point::new(x1, 0.0);
                let p2 = Point::new(x2, 0.0);
                for w1 in [0.0, 0.5, 1.0] {
                    for w2 in [0.0, 0.3, 0.8, 1.0, 1.5] {
                        let pos = |s: usize| if s == 1 { p1 } else { p2 };
                        let ok = rows1.main.eval(&pos, w1) >= -1e-12
                            && w1 >= 0.0
                            && rows2.main.eval(&pos, w2) >= -1e-12
                            && rows2.slack_bound.as_ref().unwrap().eval(&pos, w2) >= -1e-12;
                        if !ok {
                            continue;
                        }
                        checked += 1;
                        // Theorem 2 conclusion for m_cbf = 2: the barrier
                        // stays nonnegative at steps 1 and 2 ...
                        assert!(psi0(&p1) >= -1e-9, "x1={x1}, x2={x2}");
                        assert!(psi0(&p2) >= -1e-9, "x1={x1}, x2={x2}");
                        // ... so the nonconvex original relaxation
                        // psi0(x_2) >= w' (1-g1) psi0(x_1) is satisfiable
                        // (w' = 0 is admissible).
                        assert!(psi0(&p2) >= 0.0 * (1.0 - 0.4) * psi0(&p1) - 1e-9);
                    }
                }
            }
        }
        assert!(checked > 10, "fixture produced too few satisfying points");
    }

    #[test]
    fn psi0_value_matches_halfspace_eval() {
        let hs = tangent_halfspace(&Point::new(-3.0, 0.0), &Point::new(-1.0, 0.0), 0.0).unwrap();
        assert_relative_eq!(psi0_value(&hs, &Point::new(-3.0, 0.0)), 4.0, epsilon = 1e-12);
        assert_relative_eq!(psi0_value(&hs, &Point::new(0.0, 0.0)), -2.0, epsilon = 1e-12);
        assert_relative_eq!(psi0_value(&hs, &Point::new(-1.0, 5.0)), 0.0, epsilon = 1e-12);
    }
}
