//! Fixed-step and adaptive integrators for the augmented system.
//!
//! The state is a [`JointState`]; only its weight channel is driven by the
//! Brownian path. Every drift evaluation goes through one counting wrapper so
//! that `nfe_f` is exact and the field's `notify_evaluation` hook fires once
//! per evaluation, in temporal order.

use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::brownian::BrownianPath;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::state::JointState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    EulerMaruyama,
    Midpoint,
}

impl Method {
    pub fn evals_per_step(self) -> usize {
        match self {
            Method::EulerMaruyama => 1,
            Method::Midpoint => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fixed,
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub mode: Mode,
    /// Number of uniform steps (fixed mode only).
    pub steps: usize,
    pub atol: f64,
    pub rtol: f64,
    pub t0: f64,
    pub t1: f64,
    pub max_nfe: usize,
    /// First trial step in adaptive mode, as a fraction of `t1 - t0`.
    #[serde(default = "default_initial_step")]
    pub initial_step: f64,
}

fn default_initial_step() -> f64 {
    0.1
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Midpoint,
            mode: Mode::Fixed,
            steps: 20,
            atol: 1e-3,
            rtol: 1e-3,
            t0: 1.0,
            t1: 2.0,
            max_nfe: 10_000,
            initial_step: default_initial_step(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 < self.t1) || !self.t0.is_finite() || !self.t1.is_finite() {
            return Err(Error::config(format!("solver horizon [{}, {}] is empty", self.t0, self.t1)));
        }
        if self.max_nfe == 0 {
            return Err(Error::config("max_nfe must be positive"));
        }
        match self.mode {
            Mode::Fixed if self.steps == 0 => Err(Error::config("fixed mode needs steps >= 1")),
            Mode::Adaptive if !(self.atol > 0.0 && self.rtol > 0.0) => {
                Err(Error::config("adaptive mode needs atol > 0 and rtol > 0"))
            }
            Mode::Adaptive if !(self.initial_step > 0.0 && self.initial_step <= 1.0) => {
                Err(Error::config("initial_step must lie in (0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// The uniform schedule used in fixed mode.
    pub fn fixed_schedule(&self) -> Vec<Step> {
        let n = self.steps;
        let span = self.t1 - self.t0;
        let at = |k: usize| if k == n { self.t1 } else { self.t0 + span * k as f64 / n as f64 };
        (0..n).map(|k| Step { t: at(k), h: at(k + 1) - at(k) }).collect()
    }
}

/// One accepted step: start time and width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub t: f64,
    pub h: f64,
}

#[derive(Clone, Debug)]
pub struct SolverReport<'t, T: Scalar> {
    pub final_state: JointState<'t, T>,
    pub nfe_f: usize,
    pub nfe_g: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub step_log: Vec<Step>,
}

/// A drift field over [`JointState`], possibly carrying evaluation-order
/// dependent state (the residual cache of the skip variant).
pub trait DriftField<'t, T: Scalar> {
    type Snapshot: Clone;

    fn evaluate(&mut self, state: &JointState<'t, T>, t: f64) -> Result<JointState<'t, T>>;

    /// Fired once after each evaluation.
    fn notify_evaluation(&mut self) {}

    /// Fired once after each accepted step.
    fn notify_step(&mut self) {}

    fn snapshot(&self) -> Self::Snapshot;

    fn restore(&mut self, snapshot: Self::Snapshot);
}

/// Diffusion acting on the weight channel: returns `g(S, t) dB`.
pub trait DiffusionField<'t, T: Scalar> {
    fn apply(&self, state: &JointState<'t, T>, t: f64, db: Tensor<T>) -> Result<Var<'t, T>>;
}

/// `g = sigma * I` on the weights.
#[derive(Clone, Copy, Debug)]
pub struct ScalarDiffusion {
    pub sigma: f64,
}

impl<'t, T: Scalar> DiffusionField<'t, T> for ScalarDiffusion {
    fn apply(&self, state: &JointState<'t, T>, _t: f64, db: Tensor<T>) -> Result<Var<'t, T>> {
        if db.shape() != [state.weights.value().numel()] {
            return Err(Error::shape(format!(
                "Brownian dim {:?} does not match {} weights",
                db.shape(),
                state.weights.value().numel()
            )));
        }
        let s = T::lit(self.sigma);
        let noise = db.map(|v| v * s).reshape(state.weights.shape().to_vec())?;
        Ok(state.weights.tape().constant(noise))
    }
}

/// Decision returned by [`adaptive_controller`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecision {
    pub accept: bool,
    pub next_h: f64,
}

pub const SAFETY: f64 = 0.9;
pub const MIN_FACTOR: f64 = 0.2;
pub const MAX_FACTOR: f64 = 5.0;

/// Accept iff `err_est <= atol + rtol * state_norm`; the next step follows
/// the square-root rule clamped to `[0.2, 5]` times `h`.
pub fn adaptive_controller(err_est: f64, h: f64, atol: f64, rtol: f64, state_norm: f64) -> StepDecision {
    let tol = atol + rtol * state_norm;
    let accept = err_est <= tol;
    let factor = if err_est == 0.0 {
        MAX_FACTOR
    } else if err_est.is_finite() {
        (SAFETY * (tol / err_est).sqrt()).clamp(MIN_FACTOR, MAX_FACTOR)
    } else {
        MIN_FACTOR
    };
    StepDecision { accept, next_h: h * factor }
}

struct Integrator<'a, 't, T, F, D> {
    field: &'a mut F,
    diffusion: &'a D,
    path: &'a BrownianPath,
    method: Method,
    max_nfe: usize,
    nfe_f: usize,
    nfe_g: usize,
    _marker: PhantomData<(&'t (), T)>,
}

impl<'a, 't, T, F, D> Integrator<'a, 't, T, F, D>
where
    T: Scalar,
    F: DriftField<'t, T>,
    D: DiffusionField<'t, T>,
{
    fn drift(&mut self, state: &JointState<'t, T>, t: f64) -> Result<JointState<'t, T>> {
        if self.nfe_f >= self.max_nfe {
            return Err(Error::Budget { nfe: self.nfe_f + 1, max_nfe: self.max_nfe });
        }
        let out = self.field.evaluate(state, t).map_err(|e| match e {
            Error::NumericDomain(msg) => Error::Divergence { t, context: msg },
            other => other,
        })?;
        self.nfe_f += 1;
        self.field.notify_evaluation();
        Ok(out)
    }

    fn noise(&mut self, state: &JointState<'t, T>, t: f64, db: &Tensor<T>) -> Result<Var<'t, T>> {
        self.nfe_g += 1;
        self.diffusion.apply(state, t, db.clone())
    }

    fn step(&mut self, s: &JointState<'t, T>, t: f64, h: f64) -> Result<JointState<'t, T>> {
        let db: Tensor<T> = self.path.increment(t, t + h)?;
        let dt = T::lit(h);
        match self.method {
            Method::EulerMaruyama => {
                let f = self.drift(s, t)?;
                let g = self.noise(s, t, &db)?;
                s.axpy(&f, dt)?.add_weight_noise(&g)
            }
            Method::Midpoint => {
                let f0 = self.drift(s, t)?;
                let g0 = self.noise(s, t, &db)?;
                let half = T::lit(0.5);
                let mid = s.axpy(&f0, dt * half)?.add_weight_noise(&g0.scale(half))?;
                let tm = t + 0.5 * h;
                let f1 = self.drift(&mid, tm)?;
                let g1 = self.noise(&mid, tm, &db)?;
                s.axpy(&f1, dt)?.add_weight_noise(&g1)
            }
        }
    }

}

fn check_finite<T: Scalar>(state: &JointState<'_, T>, t: f64) -> Result<()> {
    if state.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { t, context: "non-finite solver state".into() })
    }
}

/// Integrate `init` over the configured horizon.
pub fn solve<'t, T, F, D>(
    field: &mut F,
    diffusion: &D,
    path: &BrownianPath,
    init: JointState<'t, T>,
    cfg: &SolverConfig,
) -> Result<SolverReport<'t, T>>
where
    T: Scalar,
    F: DriftField<'t, T>,
    D: DiffusionField<'t, T>,
{
    cfg.validate()?;
    check_path(path, &init, cfg.t0, cfg.t1)?;
    match cfg.mode {
        Mode::Fixed => replay(field, diffusion, path, init, cfg, &cfg.fixed_schedule()),
        Mode::Adaptive => solve_adaptive(field, diffusion, path, init, cfg),
    }
}

/// Re-run a frozen step sequence, e.g. the accepted steps of an earlier
/// adaptive solve, on a recording tape.
pub fn replay<'t, T, F, D>(
    field: &mut F,
    diffusion: &D,
    path: &BrownianPath,
    init: JointState<'t, T>,
    cfg: &SolverConfig,
    schedule: &[Step],
) -> Result<SolverReport<'t, T>>
where
    T: Scalar,
    F: DriftField<'t, T>,
    D: DiffusionField<'t, T>,
{
    check_path(path, &init, cfg.t0, cfg.t1)?;
    let mut it = Integrator {
        field,
        diffusion,
        path,
        method: cfg.method,
        max_nfe: cfg.max_nfe,
        nfe_f: 0,
        nfe_g: 0,
        _marker: PhantomData,
    };
    let mut state = init;
    check_finite(&state, cfg.t0)?;
    for step in schedule {
        state = it.step(&state, step.t, step.h)?;
        check_finite(&state, step.t + step.h)?;
        it.field.notify_step();
    }
    Ok(SolverReport {
        final_state: state,
        nfe_f: it.nfe_f,
        nfe_g: it.nfe_g,
        accepted_steps: schedule.len(),
        rejected_steps: 0,
        step_log: schedule.to_vec(),
    })
}

fn solve_adaptive<'t, T, F, D>(
    field: &mut F,
    diffusion: &D,
    path: &BrownianPath,
    init: JointState<'t, T>,
    cfg: &SolverConfig,
) -> Result<SolverReport<'t, T>>
where
    T: Scalar,
    F: DriftField<'t, T>,
    D: DiffusionField<'t, T>,
{
    let mut it = Integrator {
        field,
        diffusion,
        path,
        method: cfg.method,
        max_nfe: cfg.max_nfe,
        nfe_f: 0,
        nfe_g: 0,
        _marker: PhantomData,
    };
    let span = cfg.t1 - cfg.t0;
    let end_slack = 1e-12 * span;
    let mut state = init;
    check_finite(&state, cfg.t0)?;
    let mut t = cfg.t0;
    let mut h = cfg.initial_step * span;
    let mut log = Vec::new();
    let mut rejected = 0;

    while cfg.t1 - t > end_slack {
        let last = t + h >= cfg.t1 - end_slack;
        let h_try = if last { cfg.t1 - t } else { h };
        let t_next = if last { cfg.t1 } else { t + h_try };
        let h_try = t_next - t;

        let snap = it.field.snapshot();
        let full = it.step(&state, t, h_try)?;
        it.field.restore(snap.clone());
        let t_mid = t + 0.5 * h_try;
        let first = it.step(&state, t, t_mid - t)?;
        it.field.notify_step();
        let second = it.step(&first, t_mid, t_next - t_mid)?;

        let err = if full.is_finite() && second.is_finite() {
            second.rms_distance(&full)?
        } else {
            f64::INFINITY
        };
        let norm = state.rms().max(second.rms());
        let decision = adaptive_controller(err, h_try, cfg.atol, cfg.rtol, norm);
        if decision.accept {
            check_finite(&second, t_next)?;
            it.field.notify_step();
            log.push(Step { t, h: t_mid - t });
            log.push(Step { t: t_mid, h: t_next - t_mid });
            state = second;
            t = t_next;
        } else {
            it.field.restore(snap);
            rejected += 1;
            if !(decision.next_h > end_slack) {
                return Err(Error::Divergence { t, context: "adaptive step size underflow".into() });
            }
        }
        h = decision.next_h;
    }

    Ok(SolverReport {
        final_state: state,
        nfe_f: it.nfe_f,
        nfe_g: it.nfe_g,
        accepted_steps: log.len() / 2,
        rejected_steps: rejected,
        step_log: log,
    })
}

fn check_path<T: Scalar>(path: &BrownianPath, init: &JointState<'_, T>, t0: f64, t1: f64) -> Result<()> {
    let (a, b) = path.horizon();
    if a > t0 || b < t1 {
        return Err(Error::contract(format!(
            "Brownian horizon [{a}, {b}] does not cover the solve [{t0}, {t1}]"
        )));
    }
    if path.dim() != init.weights.value().numel() {
        return Err(Error::shape(format!(
            "Brownian dim {} but {} weights",
            path.dim(),
            init.weights.value().numel()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    /// dw = -rate * w on the weights, activation channel carried along as
    /// dh = -h with zero KL drift.
    struct Linear {
        rate: f64,
        evaluations: usize,
    }

    impl<'t> DriftField<'t, f64> for Linear {
        type Snapshot = usize;

        fn evaluate(&mut self, s: &JointState<'t, f64>, _t: f64) -> Result<JointState<'t, f64>> {
            Ok(JointState {
                act: s.act.neg(),
                momentum: None,
                weights: s.weights.scale(-self.rate),
                kl: s.kl.scale(0.0),
            })
        }

        fn notify_evaluation(&mut self) {
            self.evaluations += 1;
        }

        fn snapshot(&self) -> usize {
            self.evaluations
        }

        fn restore(&mut self, s: usize) {
            self.evaluations = s;
        }
    }

    fn init<'t>(tape: &'t Tape<f64>, w: &[f64]) -> JointState<'t, f64> {
        JointState {
            act: tape.constant(Tensor::from_f64([1], &[1.0]).unwrap()),
            momentum: None,
            weights: tape.constant(Tensor::from_f64([w.len()], w).unwrap()),
            kl: tape.constant(Tensor::scalar(0.0)),
        }
    }

    fn fixed(method: Method, steps: usize, t0: f64, t1: f64) -> SolverConfig {
        SolverConfig { method, mode: Mode::Fixed, steps, t0, t1, ..SolverConfig::default() }
    }

    #[test]
    fn zero_field_leaves_state_unchanged() {
        let tape = Tape::no_grad();
        let path = BrownianPath::new(3, 2, 0.0, 1.0).unwrap();
        for cfg in [
            fixed(Method::EulerMaruyama, 7, 0.0, 1.0),
            fixed(Method::Midpoint, 3, 0.0, 1.0),
            SolverConfig { mode: Mode::Adaptive, t0: 0.0, t1: 1.0, ..SolverConfig::default() },
        ] {
            let mut field = Linear { rate: 0.0, evaluations: 0 };
            let s0 = init(&tape, &[0.4, -1.0]);
            let s0 = JointState { act: tape.constant(Tensor::zeros([1])), ..s0 };
            let r = solve(&mut field, &ScalarDiffusion { sigma: 0.0 }, &path, s0.clone(), &cfg).unwrap();
            assert_eq!(r.final_state.weights.value(), s0.weights.value());
            assert_eq!(r.final_state.act.value(), s0.act.value());
        }
    }

    #[test]
    fn euler_geometric_recursion() {
        let tape = Tape::no_grad();
        let path = BrownianPath::new(0, 1, 0.0, 1.0).unwrap();
        let mut field = Linear { rate: 1.0, evaluations: 0 };
        let cfg = fixed(Method::EulerMaruyama, 10, 0.0, 1.0);
        let r = solve(&mut field, &ScalarDiffusion { sigma: 0.0 }, &path, init(&tape, &[1.0]), &cfg).unwrap();
        let w = r.final_state.weights.value().data()[0];
        assert!((w - 0.9f64.powi(10)).abs() < 1e-12, "{w}");
        assert!((w - 0.348_678_440_1).abs() < 1e-10);
        assert_eq!(r.nfe_f, 10);
        assert_eq!(r.nfe_g, 10);
    }

    #[test]
    fn single_midpoint_step() {
        let tape = Tape::no_grad();
        let path = BrownianPath::new(0, 1, 0.0, 0.1).unwrap();
        let mut field = Linear { rate: 1.0, evaluations: 0 };
        let cfg = fixed(Method::Midpoint, 1, 0.0, 0.1);
        let r = solve(&mut field, &ScalarDiffusion { sigma: 0.0 }, &path, init(&tape, &[1.0]), &cfg).unwrap();
        assert!((r.final_state.weights.value().data()[0] - 0.905).abs() < 1e-15);
    }

    #[test]
    fn fixed_midpoint_nfe_is_twice_steps() {
        let tape = Tape::no_grad();
        let path = BrownianPath::new(5, 1, 1.0, 2.0).unwrap();
        for n in [1, 4, 20] {
            let mut field = Linear { rate: 1.0, evaluations: 0 };
            let r = solve(&mut field, &ScalarDiffusion { sigma: 0.1 }, &path, init(&tape, &[1.0]), &fixed(Method::Midpoint, n, 1.0, 2.0))
                .unwrap();
            assert_eq!(r.nfe_f, 2 * n);
            assert_eq!(field.evaluations, 2 * n);
            assert_eq!(r.step_log.len(), n);
            assert_eq!(r.step_log.last().map(|s| s.t + s.h), Some(2.0));
        }
    }

    #[test]
    fn controller_boundary_cases() {
        let d = adaptive_controller(0.0, 0.1, 1e-3, 1e-3, 1.0);
        assert!(d.accept);
        assert!((d.next_h - 0.5).abs() < 1e-15);
        let tol = 1e-3 + 1e-3 * 2.0;
        let d = adaptive_controller(tol, 0.2, 1e-3, 1e-3, 2.0);
        assert!(d.accept);
        assert!((d.next_h - 0.18).abs() < 1e-15);
        let d = adaptive_controller(1e6, 0.2, 1e-3, 1e-3, 2.0);
        assert!(!d.accept);
        assert!((d.next_h - 0.04).abs() < 1e-15);
        assert!(!adaptive_controller(f64::NAN, 0.2, 1e-3, 1e-3, 1.0).accept);
    }

    #[test]
    fn midpoint_is_second_order() {
        let tape = Tape::no_grad();
        let path = BrownianPath::new(0, 1, 0.0, 1.0).unwrap();
        let err = |n| {
            let mut field = Linear { rate: 1.0, evaluations: 0 };
            let r = solve(&mut field, &ScalarDiffusion { sigma: 0.0 }, &path, init(&tape, &[1.0]), &fixed(Method::Midpoint, n, 0.0, 1.0))
                .unwrap();
            (r.final_state.weights.value().data()[0] - (-1.0f64).exp()).abs()
        };
        for n in [5, 10, 20] {
            let ratio = err(n) / err(2 * n);
            assert!((3.2..=4.8).contains(&ratio), "n={n}: ratio {ratio}");
        }
    }

    #[test]
    fn adaptive_linear_ode_matches_closed_form() {
        let tape = Tape::no_grad();
        let path = BrownianPath::new(0, 1, 1.0, 2.0).unwrap();
        let mut errors = Vec::new();
        for (atol, rtol) in [(5e-3, 5e-3), (1e-3, 1e-3)] {
            let mut field = Linear { rate: 1.0, evaluations: 0 };
            let cfg = SolverConfig { mode: Mode::Adaptive, atol, rtol, ..SolverConfig::default() };
            let r = solve(&mut field, &ScalarDiffusion { sigma: 0.0 }, &path, init(&tape, &[1.0]), &cfg).unwrap();
            let w = r.final_state.weights.value().data()[0];
            let exact = (-1.0f64).exp();
            assert!((w - exact).abs() <= atol + rtol * exact, "atol {atol}: {w} vs {exact}");
            // one full step and two half steps per trial
            assert_eq!(r.nfe_f, 6 * (r.accepted_steps + r.rejected_steps));
            assert_eq!(field.evaluations, 2 * r.step_log.len());
            let end = r.step_log.last().unwrap();
            assert_eq!(end.t + end.h, 2.0);
            errors.push((w - exact).abs());
        }
        assert!(errors[1] < errors[0]);
    }

    #[test]
    fn adaptive_step_log_replays_to_the_same_endpoint() {
        let tape = Tape::no_grad();
        let path = BrownianPath::new(11, 3, 1.0, 2.0).unwrap();
        let cfg = SolverConfig { mode: Mode::Adaptive, ..SolverConfig::default() };
        let mut field = Linear { rate: 2.0, evaluations: 0 };
        let diff = ScalarDiffusion { sigma: 0.3 };
        let s0 = init(&tape, &[1.0, -0.5, 2.0]);
        let a = solve(&mut field, &diff, &path, s0.clone(), &cfg).unwrap();
        let mut field = Linear { rate: 2.0, evaluations: 0 };
        let b = replay(&mut field, &diff, &path, s0, &cfg, &a.step_log).unwrap();
        assert_eq!(a.final_state.weights.value(), b.final_state.weights.value());
    }

    #[test]
    fn ou_terminal_variance() {
        let (sigma, n_paths) = (0.2, 10_000);
        let tape = Tape::no_grad();
        let cfg = fixed(Method::Midpoint, 20, 0.0, 1.0);
        let finals: Vec<f64> = (0..n_paths)
            .map(|seed| {
                let path = BrownianPath::new(seed, 1, 0.0, 1.0).unwrap();
                let mut field = Linear { rate: 1.0, evaluations: 0 };
                let r = solve(&mut field, &ScalarDiffusion { sigma }, &path, init(&tape, &[0.0]), &cfg).unwrap();
                r.final_state.weights.value().data()[0]
            })
            .collect();
        let mean = finals.iter().sum::<f64>() / n_paths as f64;
        let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n_paths - 1) as f64;
        let exact = sigma * sigma * (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((var / exact - 1.0).abs() < 0.05, "var {var} vs {exact}");
    }

    #[test]
    fn deterministic_replay_is_bit_identical() {
        let tape = Tape::no_grad();
        let cfg = SolverConfig { mode: Mode::Adaptive, ..SolverConfig::default() };
        let run = || {
            let path = BrownianPath::new(99, 2, 1.0, 2.0).unwrap();
            let mut field = Linear { rate: 3.0, evaluations: 0 };
            let r = solve(&mut field, &ScalarDiffusion { sigma: 0.5 }, &path, init(&tape, &[1.0, 2.0]), &cfg).unwrap();
            (r.final_state.weights.value().clone(), r.nfe_f, r.rejected_steps, r.step_log)
        };
        assert_eq!(run(), run());
    }

    struct Explode;

    impl<'t> DriftField<'t, f64> for Explode {
        type Snapshot = ();
        fn evaluate(&mut self, s: &JointState<'t, f64>, t: f64) -> Result<JointState<'t, f64>> {
            let v = if t > 1.45 { f64::NAN } else { 1.0 };
            let c = |x: &Var<'t, f64>| s.act.tape().constant(Tensor::full(x.shape().to_vec(), v));
            Ok(JointState { act: c(&s.act), momentum: None, weights: c(&s.weights), kl: c(&s.kl) })
        }
        fn snapshot(&self) {}
        fn restore(&mut self, _: ()) {}
    }

    #[test]
    fn nan_is_a_divergence_error_with_time() {
        let tape = Tape::no_grad();
        let path = BrownianPath::new(0, 1, 1.0, 2.0).unwrap();
        let err = solve(&mut Explode, &ScalarDiffusion { sigma: 0.0 }, &path, init(&tape, &[1.0]), &fixed(Method::EulerMaruyama, 10, 1.0, 2.0))
            .unwrap_err();
        match err {
            Error::Divergence { t, .. } => assert!((t - 1.6).abs() < 1e-12, "{t}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nfe_budget_is_enforced() {
        let tape = Tape::no_grad();
        let path = BrownianPath::new(0, 1, 1.0, 2.0).unwrap();
        let mut field = Linear { rate: 1.0, evaluations: 0 };
        let cfg = SolverConfig { max_nfe: 7, ..fixed(Method::Midpoint, 20, 1.0, 2.0) };
        let err = solve(&mut field, &ScalarDiffusion { sigma: 0.0 }, &path, init(&tape, &[1.0]), &cfg).unwrap_err();
        assert!(matches!(err, Error::Budget { max_nfe: 7, .. }), "{err:?}");
        assert_eq!(field.evaluations, 7);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig { t1: 1.0, ..SolverConfig::default() }.validate().is_err());
        assert!(fixed(Method::Midpoint, 0, 1.0, 2.0).validate().is_err());
        let a = SolverConfig { mode: Mode::Adaptive, atol: 0.0, ..SolverConfig::default() };
        assert!(a.validate().is_err());
        // fixed mode ignores tolerances
        assert!(SolverConfig { atol: 0.0, ..SolverConfig::default() }.validate().is_ok());
    }
}
