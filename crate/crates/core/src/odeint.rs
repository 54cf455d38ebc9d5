//! Fixed-step integration of parameterized dynamics and its gradients.
//!
//! Two gradient routes are provided. [`adjoint_gradients`] sweeps the adjoint
//! state backward in time and keeps only the observation-time states; every
//! state a backward step needs is recomputed by integrating forward again from
//! the preceding observation. [`direct_gradients`] records every solver stage
//! on a tape and reverse-accumulates through it. Both are exact transposes of
//! the same discrete solver, so they agree to round-off.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type DynamicsError = Box<dyn std::error::Error + Send + Sync>;

/// Parameterized right-hand side `dy/dt = f(y, t, θ)` with an exact
/// vector-Jacobian product.
pub trait Dynamics {
    fn eval(
        &self,
        state: &[f64],
        t: f64,
        params: &[f64],
    ) -> std::result::Result<Vec<f64>, DynamicsError>;

    /// Returns `(cᵀ ∂f/∂state, cᵀ ∂f/∂params)` at `(state, t, params)`.
    fn vjp(
        &self,
        state: &[f64],
        t: f64,
        params: &[f64],
        cotangent: &[f64],
    ) -> std::result::Result<(Vec<f64>, Vec<f64>), DynamicsError>;
}

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("invalid integration interval [{t0}, {t1}]")]
    BadInterval { t0: f64, t1: f64 },
    #[error("initial state has a non-finite component at index {0}")]
    NonFiniteInitial(usize),
    #[error("non-finite state produced at step {step}")]
    NonFinite { step: usize },
    #[error("observation times must start at 0, got {0}")]
    NonZeroStart(f64),
    #[error("observation times must be strictly ascending (index {index})")]
    NotAscending { index: usize },
    #[error("need one cotangent per time: {times} times, {cotangents} cotangents")]
    CotangentCount { times: usize, cotangents: usize },
    #[error("cotangent {index} has length {actual}, state has length {expected}")]
    CotangentShape {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("steps_per_unit_time must be at least 1")]
    BadStepCount,
    #[error("dynamics evaluation failed: {0}")]
    Dynamics(#[source] DynamicsError),
}

pub type Result<T> = std::result::Result<T, OdeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: Method,
    pub steps_per_unit_time: u32,
    /// Kept for configuration fidelity; fixed-step methods ignore it.
    pub rtol: f64,
    /// Kept for configuration fidelity; fixed-step methods ignore it.
    pub atol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            steps_per_unit_time: 8,
            rtol: 1e-3,
            atol: 1e-5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_unit_time == 0 {
            return Err(OdeError::BadStepCount);
        }
        Ok(())
    }
}

/// Explicit Runge–Kutta tableau.
struct Tableau {
    a: &'static [&'static [f64]],
    b: &'static [f64],
    c: &'static [f64],
}

const EULER: Tableau = Tableau {
    a: &[&[]],
    b: &[1.0],
    c: &[0.0],
};

const RK4: Tableau = Tableau {
    a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
    b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
    c: &[0.0, 0.5, 0.5, 1.0],
};

fn tableau(method: Method) -> &'static Tableau {
    match method {
        Method::Euler => &EULER,
        Method::Rk4 => &RK4,
    }
}

/// `(t, h)` for every step covering `[t0, t1]`; the last step is shortened to
/// land on `t1` exactly.
pub(crate) fn step_plan(t0: f64, t1: f64, steps_per_unit_time: u32) -> Vec<(f64, f64)> {
    let span = t1 - t0;
    if span <= 0.0 {
        return Vec::new();
    }
    let spu = steps_per_unit_time as f64;
    // absorb round-off such as 0.7 * 10 = 7.000000000000001
    let n = ((span * spu) - 1e-9).ceil().max(1.0) as usize;
    let h = 1.0 / spu;
    (0..n)
        .map(|i| {
            let t = t0 + i as f64 * h;
            if i + 1 == n {
                (t, t1 - t)
            } else {
                (t, h)
            }
        })
        .collect()
}

fn eval<F: Dynamics + ?Sized>(f: &F, y: &[f64], t: f64, p: &[f64]) -> Result<Vec<f64>> {
    f.eval(y, t, p).map_err(OdeError::Dynamics)
}

/// Stage input states `Y_i` and their times for one step. When `full` is
/// false the last slope is not evaluated, which is all a backward step needs.
fn stages<F: Dynamics + ?Sized>(
    f: &F,
    params: &[f64],
    y: &[f64],
    t: f64,
    h: f64,
    tab: &Tableau,
    full: bool,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let s = tab.b.len();
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(s);
    let mut slopes: Vec<Vec<f64>> = Vec::with_capacity(s);
    for i in 0..s {
        let mut yi = y.to_vec();
        for (j, &aij) in tab.a[i].iter().enumerate() {
            if aij != 0.0 {
                let w = h * aij;
                for (v, k) in yi.iter_mut().zip(&slopes[j]) {
                    *v += w * k;
                }
            }
        }
        if full || i + 1 < s {
            slopes.push(eval(f, &yi, t + tab.c[i] * h, params)?);
        }
        inputs.push(yi);
    }
    Ok((inputs, slopes))
}

fn step<F: Dynamics + ?Sized>(
    f: &F,
    params: &[f64],
    y: &[f64],
    t: f64,
    h: f64,
    tab: &Tableau,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (inputs, slopes) = stages(f, params, y, t, h, tab, true)?;
    let mut next = y.to_vec();
    for (i, k) in slopes.iter().enumerate() {
        let w = h * tab.b[i];
        for (v, k) in next.iter_mut().zip(k) {
            *v += w * k;
        }
    }
    Ok((next, inputs))
}

/// Pulls the cotangent of a step's output back through its stages.
///
/// Accumulates parameter cotangents into `grad_params` and returns the
/// cotangent of the step's input state.
#[allow(clippy::too_many_arguments)]
fn step_vjp<F: Dynamics + ?Sized>(
    f: &F,
    params: &[f64],
    inputs: &[Vec<f64>],
    t: f64,
    h: f64,
    tab: &Tableau,
    adj_next: &[f64],
    grad_params: &mut [f64],
) -> Result<Vec<f64>> {
    let s = tab.b.len();
    let mut adj = adj_next.to_vec();
    // stage_adj[m] is the cotangent of stage input Y_m
    let mut stage_adj: Vec<Vec<f64>> = vec![Vec::new(); s];
    for i in (0..s).rev() {
        let mut kbar: Vec<f64> = adj_next.iter().map(|a| h * tab.b[i] * a).collect();
        for m in (i + 1)..s {
            let a_mi = tab.a[m].get(i).copied().unwrap_or(0.0);
            if a_mi != 0.0 {
                let w = h * a_mi;
                for (k, y) in kbar.iter_mut().zip(&stage_adj[m]) {
                    *k += w * y;
                }
            }
        }
        let (gy, gp) = f
            .vjp(&inputs[i], t + tab.c[i] * h, params, &kbar)
            .map_err(OdeError::Dynamics)?;
        for (a, g) in grad_params.iter_mut().zip(&gp) {
            *a += g;
        }
        for (a, g) in adj.iter_mut().zip(&gy) {
            *a += g;
        }
        stage_adj[i] = gy;
    }
    Ok(adj)
}

fn check_finite(y: &[f64]) -> Result<()> {
    match y.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(OdeError::NonFiniteInitial(i)),
        None => Ok(()),
    }
}

fn integrate_plan<F: Dynamics + ?Sized>(
    f: &F,
    params: &[f64],
    y0: &[f64],
    plan: &[(f64, f64)],
    method: Method,
) -> Result<Vec<f64>> {
    let tab = tableau(method);
    let mut y = y0.to_vec();
    for (n, &(t, h)) in plan.iter().enumerate() {
        y = step(f, params, &y, t, h, tab)?.0;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::NonFinite { step: n });
        }
    }
    Ok(y)
}

/// State at `t1` starting from `y0` at `t0`.
pub fn integrate<F: Dynamics + ?Sized>(
    f: &F,
    params: &[f64],
    y0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(t0.is_finite() && t1.is_finite() && t1 >= t0) {
        return Err(OdeError::BadInterval { t0, t1 });
    }
    check_finite(y0)?;
    integrate_plan(
        f,
        params,
        y0,
        &step_plan(t0, t1, cfg.steps_per_unit_time),
        cfg.method,
    )
}

fn check_times(times: &[f64]) -> Result<()> {
    match times.first() {
        Some(&t) if t == 0.0 => {}
        Some(&t) => return Err(OdeError::NonZeroStart(t)),
        None => return Err(OdeError::NotAscending { index: 0 }),
    }
    for (i, w) in times.windows(2).enumerate() {
        if !(w[1] > w[0]) || !w[1].is_finite() {
            return Err(OdeError::NotAscending { index: i + 1 });
        }
    }
    Ok(())
}

/// One continuous trajectory evaluated at every time in `times`.
pub fn integrate_trajectory<F: Dynamics + ?Sized>(
    f: &F,
    params: &[f64],
    y0: &[f64],
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Vec<f64>>> {
    check_times(times)?;
    cfg.validate()?;
    check_finite(y0)?;
    let mut states = Vec::with_capacity(times.len());
    states.push(y0.to_vec());
    for w in times.windows(2) {
        let prev = states.last().expect("non-empty");
        let plan = step_plan(w[0], w[1], cfg.steps_per_unit_time);
        states.push(integrate_plan(f, params, prev, &plan, cfg.method)?);
    }
    Ok(states)
}

/// Gradient of `Σ_k ⟨cotangent_k, y(t_k)⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub y0: Vec<f64>,
}

fn check_cotangents(times: &[f64], y0: &[f64], cotangents: &[Vec<f64>]) -> Result<()> {
    if cotangents.len() != times.len() {
        return Err(OdeError::CotangentCount {
            times: times.len(),
            cotangents: cotangents.len(),
        });
    }
    for (index, c) in cotangents.iter().enumerate() {
        if c.len() != y0.len() {
            return Err(OdeError::CotangentShape {
                index,
                expected: y0.len(),
                actual: c.len(),
            });
        }
    }
    Ok(())
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, x) in acc.iter_mut().zip(x) {
        *a += x;
    }
}

/// Adjoint sensitivity gradients with memory independent of the step count.
///
/// Only the states at observation times are kept. For each backward step the
/// state at the step start is rebuilt by re-integrating forward from the
/// preceding observation, and the step's stages are recomputed from it.
pub fn adjoint_gradients<F: Dynamics + ?Sized>(
    f: &F,
    params: &[f64],
    y0: &[f64],
    times: &[f64],
    cotangents: &[Vec<f64>],
    cfg: &SolverConfig,
) -> Result<Gradients> {
    check_cotangents(times, y0, cotangents)?;
    let checkpoints = integrate_trajectory(f, params, y0, times, cfg)?;
    let tab = tableau(cfg.method);
    let mut adj = vec![0.0; y0.len()];
    let mut grad_params = vec![0.0; params.len()];
    for k in (1..times.len()).rev() {
        add_into(&mut adj, &cotangents[k]);
        let plan = step_plan(times[k - 1], times[k], cfg.steps_per_unit_time);
        for n in (0..plan.len()).rev() {
            let y_n = integrate_plan(f, params, &checkpoints[k - 1], &plan[..n], cfg.method)?;
            let (t, h) = plan[n];
            let (inputs, _) = stages(f, params, &y_n, t, h, tab, false)?;
            adj = step_vjp(f, params, &inputs, t, h, tab, &adj, &mut grad_params)?;
        }
    }
    add_into(&mut adj, &cotangents[0]);
    Ok(Gradients {
        params: grad_params,
        y0: adj,
    })
}

struct TapeStep {
    t: f64,
    h: f64,
    inputs: Vec<Vec<f64>>,
}

/// Gradients by reverse accumulation over a tape of every solver stage.
///
/// Memory grows with the number of steps; intended as an oracle on small
/// problems.
pub fn direct_gradients<F: Dynamics + ?Sized>(
    f: &F,
    params: &[f64],
    y0: &[f64],
    times: &[f64],
    cotangents: &[Vec<f64>],
    cfg: &SolverConfig,
) -> Result<Gradients> {
    check_cotangents(times, y0, cotangents)?;
    check_times(times)?;
    cfg.validate()?;
    check_finite(y0)?;
    let tab = tableau(cfg.method);

    let mut tape: Vec<Vec<TapeStep>> = Vec::with_capacity(times.len());
    tape.push(Vec::new());
    let mut y = y0.to_vec();
    for w in times.windows(2) {
        let mut segment = Vec::new();
        for (n, (t, h)) in step_plan(w[0], w[1], cfg.steps_per_unit_time)
            .into_iter()
            .enumerate()
        {
            let (next, inputs) = step(f, params, &y, t, h, tab)?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(OdeError::NonFinite { step: n });
            }
            segment.push(TapeStep { t, h, inputs });
            y = next;
        }
        tape.push(segment);
    }

    let mut adj = vec![0.0; y0.len()];
    let mut grad_params = vec![0.0; params.len()];
    for k in (0..times.len()).rev() {
        add_into(&mut adj, &cotangents[k]);
        for s in tape[k].iter().rev() {
            adj = step_vjp(f, params, &s.inputs, s.t, s.h, tab, &adj, &mut grad_params)?;
        }
    }
    Ok(Gradients {
        params: grad_params,
        y0: adj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// dy/dt = θ₀·y (θ empty ⇒ dy/dt = y).
    struct Exp;
    impl Dynamics for Exp {
        fn eval(
            &self,
            y: &[f64],
            _t: f64,
            p: &[f64],
        ) -> std::result::Result<Vec<f64>, DynamicsError> {
            let k = p.first().copied().unwrap_or(1.0);
            Ok(y.iter().map(|v| k * v).collect())
        }
        fn vjp(
            &self,
            y: &[f64],
            _t: f64,
            p: &[f64],
            c: &[f64],
        ) -> std::result::Result<(Vec<f64>, Vec<f64>), DynamicsError> {
            let k = p.first().copied().unwrap_or(1.0);
            let gy = c.iter().map(|c| k * c).collect();
            let gp = if p.is_empty() {
                vec![]
            } else {
                vec![c.iter().zip(y).map(|(c, y)| c * y).sum()]
            };
            Ok((gy, gp))
        }
    }

    struct Const(f64);
    impl Dynamics for Const {
        fn eval(
            &self,
            y: &[f64],
            _t: f64,
            _p: &[f64],
        ) -> std::result::Result<Vec<f64>, DynamicsError> {
            Ok(vec![self.0; y.len()])
        }
        fn vjp(
            &self,
            y: &[f64],
            _t: f64,
            p: &[f64],
            _c: &[f64],
        ) -> std::result::Result<(Vec<f64>, Vec<f64>), DynamicsError> {
            Ok((vec![0.0; y.len()], vec![0.0; p.len()]))
        }
    }

    struct Blowup;
    impl Dynamics for Blowup {
        fn eval(
            &self,
            y: &[f64],
            _t: f64,
            _p: &[f64],
        ) -> std::result::Result<Vec<f64>, DynamicsError> {
            Ok(y.iter().map(|v| v * v * 1e200).collect())
        }
        fn vjp(
            &self,
            y: &[f64],
            _t: f64,
            _p: &[f64],
            _c: &[f64],
        ) -> std::result::Result<(Vec<f64>, Vec<f64>), DynamicsError> {
            Ok((vec![0.0; y.len()], vec![]))
        }
    }

    fn cfg(method: Method, spu: u32) -> SolverConfig {
        SolverConfig {
            method,
            steps_per_unit_time: spu,
            ..Default::default()
        }
    }

    #[test]
    fn zero_dynamics_keeps_state() {
        let y0 = [0.3, -1.7, 2.5];
        let y = integrate(&Const(0.0), &[], &y0, 0.0, 1.3, &SolverConfig::default()).unwrap();
        assert_eq!(y, y0);
    }

    #[test]
    fn single_steps() {
        let e = integrate(&Exp, &[], &[1.0], 0.0, 1.0, &cfg(Method::Euler, 1)).unwrap();
        assert_eq!(e, vec![2.0]);
        let r = integrate(&Exp, &[], &[1.0], 0.0, 1.0, &cfg(Method::Rk4, 1)).unwrap();
        assert!((r[0] - 65.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn step_plan_lands_on_endpoint() {
        let plan = step_plan(0.1, 0.8, 10);
        assert_eq!(plan.len(), 7);
        let (t, h) = *plan.last().unwrap();
        assert_eq!(t + h, 0.8);
        let plan = step_plan(0.0, 0.3, 8);
        assert_eq!(plan.len(), 3);
        assert!((plan[2].1 - 0.05).abs() < 1e-15);
        assert!(step_plan(0.5, 0.5, 8).is_empty());
    }

    #[test]
    fn trajectory_examples() {
        let c = SolverConfig::default();
        assert_eq!(
            integrate_trajectory(&Exp, &[], &[1.0], &[0.0], &c).unwrap(),
            vec![vec![1.0]]
        );
        for m in [Method::Euler, Method::Rk4] {
            let s = integrate_trajectory(&Const(1.0), &[], &[0.0], &[0.0, 0.5, 1.0], &cfg(m, 3))
                .unwrap();
            for (got, want) in s.iter().zip([0.0, 0.5, 1.0]) {
                assert!((got[0] - want).abs() < 1e-15);
            }
        }
        let traj = integrate_trajectory(&Exp, &[], &[1.0], &[0.0, 1.0], &c).unwrap();
        let direct = integrate(&Exp, &[], &[1.0], 0.0, 1.0, &c).unwrap();
        assert_eq!(traj[1], direct);
    }

    #[test]
    fn time_validation() {
        let c = SolverConfig::default();
        assert!(matches!(
            integrate_trajectory(&Exp, &[], &[1.0], &[0.0, 0.5, 0.5], &c),
            Err(OdeError::NotAscending { index: 2 })
        ));
        assert!(matches!(
            integrate_trajectory(&Exp, &[], &[1.0], &[0.1, 0.5], &c),
            Err(OdeError::NonZeroStart(_))
        ));
        assert!(matches!(
            integrate(&Exp, &[], &[1.0], 1.0, 0.5, &c),
            Err(OdeError::BadInterval { .. })
        ));
    }

    #[test]
    fn divergence_reports_step() {
        let err = integrate(&Blowup, &[], &[1e60], 0.0, 1.0, &cfg(Method::Euler, 4)).unwrap_err();
        assert!(matches!(err, OdeError::NonFinite { step: 0 }), "{err}");
    }

    #[test]
    fn zero_cotangents_give_zero_gradients() {
        let times = [0.0, 0.4, 1.0];
        let cot = vec![vec![0.0]; 3];
        for g in [
            adjoint_gradients(&Exp, &[0.7], &[1.0], &times, &cot, &SolverConfig::default())
                .unwrap(),
            direct_gradients(&Exp, &[0.7], &[1.0], &times, &cot, &SolverConfig::default()).unwrap(),
        ] {
            assert_eq!(g.params, vec![0.0]);
            assert_eq!(g.y0, vec![0.0]);
        }
    }

    #[test]
    fn cotangent_count_mismatch() {
        let err = adjoint_gradients(
            &Exp,
            &[0.7],
            &[1.0],
            &[0.0, 1.0],
            &[vec![1.0]],
            &SolverConfig::default(),
        );
        assert!(matches!(
            err,
            Err(OdeError::CotangentCount {
                times: 2,
                cotangents: 1
            })
        ));
    }

    #[test]
    fn scalar_growth_rate_gradient() {
        // d/dθ y(1) at θ = 0 is d/dθ e^θ = 1; the discrete solver is accurate to O(h⁴).
        let times = [0.0, 1.0];
        let cot = vec![vec![0.0], vec![1.0]];
        let c = SolverConfig::default();
        let g = adjoint_gradients(&Exp, &[0.0], &[1.0], &times, &cot, &c).unwrap();
        assert!((g.params[0] - 1.0).abs() < 1e-12);
        let h = 1e-5;
        let yp = integrate(&Exp, &[h], &[1.0], 0.0, 1.0, &c).unwrap()[0];
        let ym = integrate(&Exp, &[-h], &[1.0], 0.0, 1.0, &c).unwrap()[0];
        assert!((g.params[0] - (yp - ym) / (2.0 * h)).abs() < 1e-9);
    }

    #[test]
    fn single_euler_step_matches_chain_rule() {
        // y1 = y0 + h·θ·y0 ⇒ ∂y1/∂θ = h·y0, ∂y1/∂y0 = 1 + h·θ
        let c = cfg(Method::Euler, 1);
        let g = direct_gradients(
            &Exp,
            &[0.3],
            &[2.0],
            &[0.0, 1.0],
            &[vec![0.0], vec![1.0]],
            &c,
        )
        .unwrap();
        assert_eq!(g.params, vec![2.0]);
        assert!((g.y0[0] - 1.3).abs() < 1e-15);
    }
}
