//! Neural-ODE feature block: integrates a learnable dynamics field over the
//! encoder output. Gradients come from backpropagation through the unrolled
//! solver steps on the tape, not from an adjoint solve, so they are exact for
//! the discrete trajectory the solver actually took.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvLayer, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, role};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    /// Classical fixed-step fourth-order Runge-Kutta.
    Rk4Fixed,
    /// Dormand-Prince 4(5) with proportional step-size control.
    DopriAdaptive,
    /// Fixed-step forward Euler. First-order; kept as a validation baseline.
    EulerFixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub terminal_time: f64,
    /// Step count for fixed-step methods; initial grid hint for the adaptive one.
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: SolverMethod::Rk4Fixed,
            terminal_time: 1.0,
            steps: 8,
            rtol: 1e-6,
            atol: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.terminal_time.is_finite() && self.terminal_time > 0.0) {
            return Err(Error::Config(format!("solver.terminal_time must be positive and finite, got {}", self.terminal_time)));
        }
        if self.steps == 0 {
            return Err(Error::Config("solver.steps must be at least 1".into()));
        }
        if !(self.rtol.is_finite() && self.rtol > 0.0) {
            return Err(Error::Config(format!("solver.rtol must be positive, got {}", self.rtol)));
        }
        if !(self.atol.is_finite() && self.atol > 0.0) {
            return Err(Error::Config(format!("solver.atol must be positive, got {}", self.atol)));
        }
        Ok(())
    }
}

/// A (possibly time-dependent) vector field over tape states. Implementations
/// must be deterministic functions of `(state, t)`; integration calls `eval`
/// several times per step.
pub trait Dynamics {
    fn eval(&self, tape: &mut Tape, state: Var, t: f64) -> Result<Var>;
}

/// `f(z, t) = 0`: integration is the identity map.
pub struct ZeroDynamics;

impl Dynamics for ZeroDynamics {
    fn eval(&self, tape: &mut Tape, state: Var, _t: f64) -> Result<Var> {
        Ok(tape.scale(state, 0.0))
    }
}

/// `f(z, t) = rate * z`, the textbook linear test problem.
pub struct ScaleDynamics {
    pub rate: f64,
}

impl Dynamics for ScaleDynamics {
    fn eval(&self, tape: &mut Tape, state: Var, _t: f64) -> Result<Var> {
        Ok(tape.scale(state, self.rate))
    }
}

/// `f(z, t) = A z` for a fixed square matrix `A`; state must be rank 1.
pub struct LinearDynamics {
    pub matrix: Tensor,
}

impl Dynamics for LinearDynamics {
    fn eval(&self, tape: &mut Tape, state: Var, _t: f64) -> Result<Var> {
        let m = tape.leaf(self.matrix.clone());
        Ok(tape.matvec(m, state))
    }
}

/// Elementwise closure dynamics `f(z_i, t)` for analytic probes. Gradients do
/// not flow through it; value-level tests only.
pub struct FnDynamics<F: Fn(f64, f64) -> f64> {
    pub f: F,
}

impl<F: Fn(f64, f64) -> f64> Dynamics for FnDynamics<F> {
    fn eval(&self, tape: &mut Tape, state: Var, t: f64) -> Result<Var> {
        let v = tape.value(state);
        let data = v.data().iter().map(|&z| (self.f)(z, t)).collect();
        let out = Tensor::from_vec(v.shape(), data);
        Ok(tape.push(out, vec![], None))
    }
}

/// Reverses another field over `[0, T]`: `g(z, t) = -f(z, T - t)`. Integrating
/// forward under `g` retraces the original trajectory backwards.
pub struct ReversedDynamics<'a> {
    pub inner: &'a dyn Dynamics,
    pub terminal_time: f64,
}

impl Dynamics for ReversedDynamics<'_> {
    fn eval(&self, tape: &mut Tape, state: Var, t: f64) -> Result<Var> {
        let v = self.inner.eval(tape, state, self.terminal_time - t)?;
        Ok(tape.scale(v, -1.0))
    }
}

/// Learnable dynamics: three 3x3 convolutions with ReLU between them, width
/// equal to the feature channel count. With time conditioning the current time
/// enters as an extra constant input channel, making the field non-autonomous.
/// The final layer starts at zero so integration begins as the identity map.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvDynamics {
    pub channels: usize,
    pub time_conditioning: bool,
    pub layers: [ConvLayer; 3],
}

impl ConvDynamics {
    pub fn init(channels: usize, time_conditioning: bool, seed: u64) -> Self {
        let in0 = channels + usize::from(time_conditioning);
        ConvDynamics {
            channels,
            time_conditioning,
            layers: [
                ConvLayer::he_init(channels, in0, 3, derive_seed(seed, &[role::INIT_DYNAMICS, 0])),
                ConvLayer::he_init(channels, channels, 3, derive_seed(seed, &[role::INIT_DYNAMICS, 1])),
                ConvLayer::zeros(channels, channels, 3),
            ],
        }
    }

    pub fn attach(&self, tape: &mut Tape) -> ConvDynamicsVars {
        ConvDynamicsVars {
            channels: self.channels,
            time_conditioning: self.time_conditioning,
            layers: [
                self.layers[0].attach(tape),
                self.layers[1].attach(tape),
                self.layers[2].attach(tape),
            ],
        }
    }
}

/// Tape-attached view of [`ConvDynamics`]. Valid only for the tape it was
/// attached to.
pub struct ConvDynamicsVars {
    channels: usize,
    time_conditioning: bool,
    pub layers: [(Var, Var); 3],
}

impl Dynamics for ConvDynamicsVars {
    fn eval(&self, tape: &mut Tape, state: Var, t: f64) -> Result<Var> {
        let shape = tape.value(state).shape();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(Error::ShapeMismatch {
                context: "dynamics state".into(),
                expected: vec![self.channels],
                got: shape.to_vec(),
            });
        }
        let x = if self.time_conditioning {
            tape.concat_channel_const(state, t)
        } else {
            state
        };
        let h1 = tape.conv2d(x, self.layers[0].0, self.layers[0].1);
        let h1 = tape.relu(h1);
        let h2 = tape.conv2d(h1, self.layers[1].0, self.layers[1].1);
        let h2 = tape.relu(h2);
        Ok(tape.conv2d(h2, self.layers[2].0, self.layers[2].1))
    }
}

/// One evaluation of the vector field, exposed for interface completeness and
/// oracle tests.
pub fn eval_dynamics(tape: &mut Tape, dynamics: &dyn Dynamics, state: Var, t: f64) -> Result<Var> {
    dynamics.eval(tape, state, t)
}

fn check_finite(tape: &Tape, state: Var, step: usize) -> Result<()> {
    if tape.value(state).is_all_finite() {
        Ok(())
    } else {
        Err(Error::IntegrationDiverged { step })
    }
}

fn rk4_step(tape: &mut Tape, dynamics: &dyn Dynamics, y: Var, t: f64, h: f64) -> Result<Var> {
    let k1 = dynamics.eval(tape, y, t)?;
    let y2 = tape.add_scaled(y, k1, h / 2.0);
    let k2 = dynamics.eval(tape, y2, t + h / 2.0)?;
    let y3 = tape.add_scaled(y, k2, h / 2.0);
    let k3 = dynamics.eval(tape, y3, t + h / 2.0)?;
    let y4 = tape.add_scaled(y, k3, h);
    let k4 = dynamics.eval(tape, y4, t + h)?;
    let mut acc = tape.add_scaled(y, k1, h / 6.0);
    acc = tape.add_scaled(acc, k2, h / 3.0);
    acc = tape.add_scaled(acc, k3, h / 3.0);
    acc = tape.add_scaled(acc, k4, h / 6.0);
    Ok(acc)
}

// Dormand-Prince 4(5) tableau. Row i holds the a_ij weights for stage i; B5 is
// the fifth-order solution row (equal to the last stage row), E the difference
// between the fifth- and fourth-order rows used for the error estimate.
const DOPRI_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DOPRI_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DOPRI_B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DOPRI_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

struct DopriStep {
    next: Var,
    /// Scaled error-norm of the embedded pair; accept when <= 1.
    err_norm: f64,
}

fn dopri_step(tape: &mut Tape, dynamics: &dyn Dynamics, y: Var, t: f64, h: f64) -> Result<DopriStep> {
    let mut k: Vec<Var> = Vec::with_capacity(7);
    for i in 0..7 {
        let mut yi = y;
        for (j, &kj) in k.iter().enumerate() {
            let a = DOPRI_A[i][j];
            if a != 0.0 {
                yi = tape.add_scaled(yi, kj, h * a);
            }
        }
        k.push(dynamics.eval(tape, yi, t + DOPRI_C[i] * h)?);
    }
    let mut next = y;
    for (i, &ki) in k.iter().enumerate() {
        if DOPRI_B5[i] != 0.0 {
            next = tape.add_scaled(next, ki, h * DOPRI_B5[i]);
        }
    }

    // Error estimate runs on detached values; step-size control must not
    // appear on the tape.
    let yv = tape.value(y).data().to_vec();
    let nv = tape.value(next).data().to_vec();
    let mut err_norm = 0.0f64;
    for idx in 0..yv.len() {
        let mut e = 0.0;
        for (i, &ki) in k.iter().enumerate() {
            let db = DOPRI_B5[i] - DOPRI_B4[i];
            if db != 0.0 {
                e += db * tape.value(ki).data()[idx];
            }
        }
        e *= h;
        let denom = 1e-8f64.max(tape_err_scale(yv[idx], nv[idx]));
        err_norm = err_norm.max((e / denom).abs());
    }
    Ok(DopriStep { next, err_norm })
}

fn tape_err_scale(y: f64, ynew: f64) -> f64 {
    y.abs().max(ynew.abs())
}

/// Integrates `state` from t=0 to the configured terminal time on the tape,
/// returning the terminal state var. Divergence (non-finite state) and
/// adaptive step-size underflow are reported as errors.
pub fn integrate_on_tape(tape: &mut Tape, dynamics: &dyn Dynamics, state: Var, cfg: &SolverConfig) -> Result<Var> {
    cfg.validate()?;
    let t_end = cfg.terminal_time;
    match cfg.method {
        SolverMethod::Rk4Fixed | SolverMethod::EulerFixed => {
            let h = t_end / cfg.steps as f64;
            let mut y = state;
            for step in 0..cfg.steps {
                let t = step as f64 * h;
                y = match cfg.method {
                    SolverMethod::Rk4Fixed => rk4_step(tape, dynamics, y, t, h)?,
                    SolverMethod::EulerFixed => {
                        let k = dynamics.eval(tape, y, t)?;
                        tape.add_scaled(y, k, h)
                    }
                    SolverMethod::DopriAdaptive => unreachable!(),
                };
                check_finite(tape, y, step)?;
            }
            Ok(y)
        }
        SolverMethod::DopriAdaptive => {
            let mut y = state;
            let mut t = 0.0;
            let mut h = t_end / cfg.steps as f64;
            let mut accepted = 0usize;
            let mut attempts = 0usize;
            let max_attempts = 10_000;
            while t < t_end * (1.0 - 1e-12) {
                if h < 1e-14 * t_end {
                    return Err(Error::StepSizeUnderflow { t });
                }
                h = h.min(t_end - t);
                let trial = dopri_step(tape, dynamics, y, t, h)?;
                attempts += 1;
                if attempts > max_attempts {
                    return Err(Error::StepSizeUnderflow { t });
                }
                let en = trial.err_norm;
                let tol = tape.value(y).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let scaled = en / (cfg.atol + cfg.rtol * tol.max(1e-30)).max(1e-300);
                if scaled.is_finite() && scaled <= 1.0 {
                    y = trial.next;
                    check_finite(tape, y, accepted)?;
                    t += h;
                    accepted += 1;
                    let factor = if scaled <= 0.0 { 5.0 } else { (0.9 * scaled.powf(-0.2)).clamp(0.2, 5.0) };
                    h *= factor;
                } else if scaled.is_finite() {
                    h *= (0.9 * scaled.powf(-0.2)).clamp(0.2, 0.9);
                } else {
                    h *= 0.5;
                }
            }
            Ok(y)
        }
    }
}

/// Value-level integration on a private tape. For dynamics that are
/// self-contained (analytic probes, detached fields).
pub fn integrate(initial: &Tensor, dynamics: &dyn Dynamics, cfg: &SolverConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(initial.clone());
    let out = integrate_on_tape(&mut tape, dynamics, v, cfg)?;
    Ok(tape.value(out).clone())
}

/// Fixed-step trajectory sampled after every step: `steps + 1` states
/// including the initial one. Value-level; used by curve-separation probes.
pub fn trajectory(initial: &Tensor, dynamics: &dyn Dynamics, cfg: &SolverConfig) -> Result<Vec<(f64, Tensor)>> {
    cfg.validate()?;
    if cfg.method == SolverMethod::DopriAdaptive {
        return Err(Error::Config("trajectory sampling requires a fixed-step method".into()));
    }
    let mut tape = Tape::new();
    let mut y = tape.leaf(initial.clone());
    let h = cfg.terminal_time / cfg.steps as f64;
    let mut out = vec![(0.0, initial.clone())];
    for step in 0..cfg.steps {
        let t = step as f64 * h;
        y = match cfg.method {
            SolverMethod::Rk4Fixed => rk4_step(&mut tape, dynamics, y, t, h)?,
            SolverMethod::EulerFixed => {
                let k = dynamics.eval(&mut tape, y, t)?;
                tape.add_scaled(y, k, h)
            }
            SolverMethod::DopriAdaptive => unreachable!(),
        };
        check_finite(&tape, y, step)?;
        out.push((t + h, tape.value(y).clone()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OrderEstimate {
    /// Mean of log2 error ratios across successive grid halvings.
    Order(f64),
    /// Errors hit the floating-point floor; no slope could be measured.
    Indeterminate,
}

/// Empirical convergence order of a fixed-step method on the given problem.
/// Runs `halvings + 1` grids starting at `base_steps`, comparing terminal
/// states against `reference` (or a much finer RK4 solve when absent).
pub fn convergence_order(
    dynamics: &dyn Dynamics,
    initial: &Tensor,
    method: SolverMethod,
    terminal_time: f64,
    base_steps: usize,
    halvings: usize,
    reference: Option<&Tensor>,
) -> Result<OrderEstimate> {
    if method == SolverMethod::DopriAdaptive {
        return Err(Error::Config("convergence order is defined for fixed-step methods".into()));
    }
    if halvings < 3 {
        return Err(Error::Config(format!("convergence order needs at least 3 halvings, got {halvings}")));
    }
    let reference = match reference {
        Some(r) => r.clone(),
        None => {
            let fine = SolverConfig {
                method: SolverMethod::Rk4Fixed,
                terminal_time,
                steps: base_steps << (halvings + 4),
                ..SolverConfig::default()
            };
            integrate(initial, dynamics, &fine)?
        }
    };

    let mut errors = Vec::with_capacity(halvings + 1);
    for i in 0..=halvings {
        let cfg = SolverConfig {
            method,
            terminal_time,
            steps: base_steps << i,
            ..SolverConfig::default()
        };
        let terminal = integrate(initial, dynamics, &cfg)?;
        errors.push(terminal.linf_distance(&reference));
    }

    let floor = 1e-13 * (1.0 + reference.linf_norm());
    if errors.iter().any(|&e| e <= floor) {
        return Ok(OrderEstimate::Indeterminate);
    }
    let mut acc = 0.0;
    for w in errors.windows(2) {
        acc += (w[0] / w[1]).log2();
    }
    Ok(OrderEstimate::Order(acc / halvings as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rk4(steps: usize, t_end: f64) -> SolverConfig {
        SolverConfig {
            method: SolverMethod::Rk4Fixed,
            terminal_time: t_end,
            steps,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn zero_dynamics_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
        for method in [SolverMethod::Rk4Fixed, SolverMethod::EulerFixed, SolverMethod::DopriAdaptive] {
            let cfg = SolverConfig { method, ..SolverConfig::default() };
            let y = integrate(&x, &ZeroDynamics, &cfg).unwrap();
            assert_eq!(x, y, "zero field must leave the state untouched under {method:?}");
        }
    }

    #[test]
    fn rk4_matches_exponential_solution() {
        // y' = y from 1.0 over unit time; 10 steps must land within 1e-4 of e.
        let y = integrate(&Tensor::scalar(1.0), &ScaleDynamics { rate: 1.0 }, &rk4(10, 1.0)).unwrap();
        assert!((y.item() - std::f64::consts::E).abs() < 1e-4, "got {}", y.item());
        // And the decay case against e^-1.
        let y = integrate(&Tensor::scalar(1.0), &ScaleDynamics { rate: -1.0 }, &rk4(10, 1.0)).unwrap();
        assert!((y.item() - (-1.0f64).exp()).abs() < 1e-4, "got {}", y.item());
    }

    #[test]
    fn rk4_empirical_order_is_four() {
        let exact = Tensor::scalar((-1.0f64).exp());
        let est = convergence_order(
            &ScaleDynamics { rate: -1.0 },
            &Tensor::scalar(1.0),
            SolverMethod::Rk4Fixed,
            1.0,
            2,
            3,
            Some(&exact),
        )
        .unwrap();
        match est {
            OrderEstimate::Order(p) => assert!((3.7..=4.3).contains(&p), "order {p}"),
            OrderEstimate::Indeterminate => panic!("errors should be measurable on coarse grids"),
        }
    }

    #[test]
    fn euler_empirical_order_is_one() {
        let exact = Tensor::scalar((-1.0f64).exp());
        let est = convergence_order(
            &ScaleDynamics { rate: -1.0 },
            &Tensor::scalar(1.0),
            SolverMethod::EulerFixed,
            1.0,
            8,
            3,
            Some(&exact),
        )
        .unwrap();
        match est {
            OrderEstimate::Order(p) => assert!((0.8..=1.2).contains(&p), "order {p}"),
            OrderEstimate::Indeterminate => panic!("errors should be measurable"),
        }
    }

    #[test]
    fn convergence_order_reports_indeterminate_at_machine_floor() {
        // Zero dynamics has zero error on every grid.
        let est = convergence_order(
            &ZeroDynamics,
            &Tensor::scalar(0.5),
            SolverMethod::Rk4Fixed,
            1.0,
            2,
            3,
            Some(&Tensor::scalar(0.5)),
        )
        .unwrap();
        assert_eq!(est, OrderEstimate::Indeterminate);
    }

    #[test]
    fn dopri_meets_tolerance_on_linear_problem() {
        let cfg = SolverConfig {
            method: SolverMethod::DopriAdaptive,
            terminal_time: 1.0,
            steps: 4,
            rtol: 1e-9,
            atol: 1e-12,
        };
        let y = integrate(&Tensor::scalar(1.0), &ScaleDynamics { rate: 1.0 }, &cfg).unwrap();
        assert!((y.item() - std::f64::consts::E).abs() < 1e-7, "got {}", y.item());
    }

    #[test]
    fn dopri_and_rk4_agree_through_the_shared_interface() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3], 1.0, &mut rng);
        let m = Tensor::from_vec(&[3, 3], vec![-0.4, 0.2, 0.0, -0.1, -0.5, 0.3, 0.0, 0.1, -0.2]);
        let field = LinearDynamics { matrix: m };
        let fixed = integrate(&x, &field, &rk4(64, 1.0)).unwrap();
        let cfg = SolverConfig {
            method: SolverMethod::DopriAdaptive,
            terminal_time: 1.0,
            steps: 4,
            rtol: 1e-9,
            atol: 1e-11,
        };
        let adaptive = integrate(&x, &field, &cfg).unwrap();
        assert!(fixed.linf_distance(&adaptive) < 1e-6);
    }

    #[test]
    fn diverging_field_reports_the_failing_step() {
        // Quadratic blowup reaches infinity in finite time.
        let f = FnDynamics { f: |z: f64, _t| z * z };
        let err = integrate(&Tensor::scalar(5.0), &f, &rk4(40, 2.0)).unwrap_err();
        match err {
            Error::IntegrationDiverged { step } => assert!(step > 0),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn linear_contraction_respects_the_growth_bound() {
        // Two starts under f = L z separate by exactly exp(L T); the numeric
        // gap must sit within 5% of that bound (equality case of the growth
        // inequality for Lipschitz fields).
        let l = 1.3;
        let cfg = rk4(16, 1.0);
        let a = integrate(&Tensor::scalar(0.7), &ScaleDynamics { rate: l }, &cfg).unwrap();
        let b = integrate(&Tensor::scalar(0.2), &ScaleDynamics { rate: l }, &cfg).unwrap();
        let gap = (a.item() - b.item()).abs();
        let bound = 0.5 * (l * 1.0f64).exp();
        assert!(gap <= bound * 1.05, "gap {gap} above bound {bound}");
        assert!(gap >= bound * 0.95, "gap {gap} should saturate the bound {bound}");
    }

    #[test]
    fn rotation_field_stays_below_growth_bound() {
        // Pure rotation is an isometry: the gap stays constant, strictly
        // below the exp(L T) envelope.
        let omega = 2.0;
        let m = Tensor::from_vec(&[2, 2], vec![0.0, -omega, omega, 0.0]);
        let field = LinearDynamics { matrix: m };
        let cfg = rk4(32, 1.0);
        let a = integrate(&Tensor::from_vec(&[2], vec![1.0, 0.0]), &field, &cfg).unwrap();
        let b = integrate(&Tensor::from_vec(&[2], vec![0.0, 0.5]), &field, &cfg).unwrap();
        let gap2 = (a.data()[0] - b.data()[0]).powi(2) + (a.data()[1] - b.data()[1]).powi(2);
        let init_gap2 = 1.0 + 0.25;
        assert!((gap2 / init_gap2 - 1.0).abs() < 1e-6, "rotation should preserve the gap");
        let bound2 = init_gap2 * (2.0 * omega).exp();
        assert!(gap2 <= bound2 * 1.05);
    }

    #[test]
    fn integral_curves_of_a_1d_field_never_cross() {
        // Uniqueness of solutions keeps trajectories ordered; check the order
        // at 100 interior times for a time-dependent Lipschitz field.
        let f = FnDynamics { f: |z: f64, t: f64| z.sin() + 0.3 * (3.0 * t).cos() };
        let cfg = rk4(100, 1.0);
        let lo = trajectory(&Tensor::scalar(0.3), &f, &cfg).unwrap();
        let hi = trajectory(&Tensor::scalar(0.7), &f, &cfg).unwrap();
        assert_eq!(lo.len(), 101);
        for ((t, a), (_, b)) in lo.iter().zip(&hi) {
            assert!(a.item() < b.item(), "curves crossed at t={t}");
        }
    }

    #[test]
    fn backward_integration_recovers_the_start_at_fourth_order() {
        let f = FnDynamics { f: |z: f64, t: f64| z.sin() * (1.0 + 0.5 * t.cos()) };
        let y0 = Tensor::scalar(0.9);
        let mut errs = Vec::new();
        for steps in [16usize, 32] {
            let cfg = rk4(steps, 1.0);
            let yt = integrate(&y0, &f, &cfg).unwrap();
            let back = ReversedDynamics { inner: &f, terminal_time: 1.0 };
            let y0_again = integrate(&yt, &back, &cfg).unwrap();
            errs.push((y0_again.item() - y0.item()).abs());
        }
        assert!(errs[0] < 1e-6, "round trip error too large: {}", errs[0]);
        let ratio = errs[0] / errs[1];
        assert!((8.0..=40.0).contains(&ratio), "expected ~16x shrink per halving, got {ratio}");
    }

    #[test]
    fn gradients_through_the_solver_match_finite_differences() {
        // End-to-end through attached conv dynamics: d(sum of terminal state)
        // w.r.t. both the initial state and the dynamics parameters.
        let channels = 2;
        let dynamics = ConvDynamics {
            time_conditioning: true,
            ..ConvDynamics::init(channels, true, 77)
        };
        // Give the zero-initialized last layer real weights so its gradient
        // path is exercised from a generic point.
        let mut dynamics = dynamics;
        dynamics.layers[2] = ConvLayer::he_init(channels, channels, 3, 78);

        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let x0 = Tensor::randn(&[channels, 4, 4], 0.5, &mut rng);
        let cfg = rk4(3, 1.0);

        let loss_for = |x: &Tensor, dynp: &ConvDynamics| -> f64 {
            let mut tape = Tape::new();
            let leaf = tape.leaf(x.clone());
            let vars = dynp.attach(&mut tape);
            let out = integrate_on_tape(&mut tape, &vars, leaf, &cfg).unwrap();
            let s = tape.sum(out);
            tape.value(s).item()
        };

        // Analytic gradients.
        let mut tape = Tape::new();
        let leaf = tape.leaf(x0.clone());
        let vars = dynamics.attach(&mut tape);
        let out = integrate_on_tape(&mut tape, &vars, leaf, &cfg).unwrap();
        let s = tape.sum(out);
        let grads = tape.backward(s);

        let num_x = central_diff(&mut |v| loss_for(&Tensor::from_vec(&[channels, 4, 4], v.to_vec()), &dynamics), x0.data(), 1e-5);
        let err = max_rel_error(grads.get(leaf).unwrap().data(), &num_x, 1e-6);
        assert!(err < 1e-4, "initial-state gradient off by {err:.2e}");

        let k0 = dynamics.layers[0].kernel.clone();
        let num_k = central_diff(
            &mut |v| {
                let mut d = dynamics.clone();
                d.layers[0].kernel = Tensor::from_vec(k0.shape(), v.to_vec());
                loss_for(&x0, &d)
            },
            k0.data(),
            1e-5,
        );
        let err = max_rel_error(grads.get(vars.layers[0].0).unwrap().data(), &num_k, 1e-6);
        assert!(err < 1e-4, "dynamics kernel gradient off by {err:.2e}");
    }

    #[test]
    fn conv_dynamics_rejects_wrong_channel_count() {
        let dynamics = ConvDynamics::init(4, true, 1);
        let mut tape = Tape::new();
        let vars = dynamics.attach(&mut tape);
        let bad = tape.leaf(Tensor::zeros(&[3, 4, 4]));
        let err = vars.eval(&mut tape, bad, 0.0).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn fresh_conv_dynamics_starts_as_identity_flow() {
        // Zero-initialized last layer means f = 0 at init, so the ODE block
        // adds nothing until training moves it.
        let dynamics = ConvDynamics::init(3, true, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[3, 6, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let vars = dynamics.attach(&mut tape);
        let out = integrate_on_tape(&mut tape, &vars, leaf, &SolverConfig::default()).unwrap();
        assert_eq!(tape.value(out), &x);
    }

    #[test]
    fn solver_config_validation_names_the_field() {
        let bad = SolverConfig { terminal_time: 0.0, ..SolverConfig::default() };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("terminal_time"), "message was: {msg}");
        let bad = SolverConfig { steps: 0, ..SolverConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("steps"));
    }
}
