//! Explicit Runge–Kutta integrators over time grids with evaluation accounting.
//!
//! Fixed-step `euler`/`rk4` and the adaptive Dormand–Prince 5(4) pair share a
//! single driver that works on flat `f64` buffers, so the same code integrates
//! plain states, state + sensitivity systems and backward adjoint systems.
//! Every right-hand-side call is charged to the caller through [`EvalCount`];
//! batches fold their per-element counts into an [`NfeLedger`] where the span
//! grows by the slowest element and the total by the sum.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;

/// Ordered sub-interval boundaries `t_0 < t_1 < ... < t_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    boundaries: Vec<f64>,
}

impl TimeGrid {
    /// Evenly spaced grid with `n` sub-intervals on `[t0, tn]`.
    pub fn uniform(t0: f64, tn: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("time grid needs at least one sub-interval"));
        }
        if !(t0.is_finite() && tn.is_finite()) || tn <= t0 {
            return Err(Error::config(format!(
                "time grid needs finite t0 < tN, got ({t0}, {tn})"
            )));
        }
        let h = (tn - t0) / n as f64;
        let mut boundaries: Vec<f64> = (0..=n).map(|i| t0 + i as f64 * h).collect();
        boundaries[n] = tn;
        Ok(Self { boundaries })
    }

    pub fn from_boundaries(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::config("time grid needs at least two boundaries"));
        }
        if boundaries.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("time grid boundaries must be finite"));
        }
        if let Some(w) = boundaries.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::config(format!(
                "time grid boundaries must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { boundaries })
    }

    /// Number of sub-intervals `N`.
    pub fn intervals(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn t0(&self) -> f64 {
        self.boundaries[0]
    }

    pub fn tn(&self) -> f64 {
        self.boundaries[self.boundaries.len() - 1]
    }

    /// Span of sub-interval `n`, i.e. `(t_n, t_{n+1})`.
    pub fn span(&self, n: usize) -> (f64, f64) {
        (self.boundaries[n], self.boundaries[n + 1])
    }

    pub fn spans(&self) -> Vec<(f64, f64)> {
        (0..self.intervals()).map(|n| self.span(n)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl Method {
    /// Stages per step for the fixed-step methods.
    pub fn stages(self) -> Option<u64> {
        match self {
            Method::Euler => Some(1),
            Method::Rk4 => Some(4),
            Method::Dopri5 => None,
        }
    }

    pub fn is_fixed_step(self) -> bool {
        self.stages().is_some()
    }
}

/// Solver choice. `steps` applies to fixed-step methods and counts steps per
/// integrated segment; `rtol`/`atol` apply to `dopri5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub method: Method,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_tol")]
    pub rtol: f64,
    #[serde(default = "default_tol")]
    pub atol: f64,
    /// Include sensitivity/auxiliary components in adaptive error control.
    #[serde(default)]
    pub control_all: bool,
}

fn default_steps() -> usize {
    1
}

fn default_tol() -> f64 {
    1e-8
}

impl SolverSpec {
    pub fn rk4(steps: usize) -> Self {
        Self {
            method: Method::Rk4,
            steps,
            rtol: default_tol(),
            atol: default_tol(),
            control_all: false,
        }
    }

    pub fn euler(steps: usize) -> Self {
        Self {
            method: Method::Euler,
            ..Self::rk4(steps)
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            steps: 1,
            rtol,
            atol,
            control_all: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            Method::Dopri5 => {
                if !(self.rtol > 0.0 && self.atol > 0.0) {
                    return Err(Error::config(format!(
                        "dopri5 needs rtol, atol > 0 (got {}, {})",
                        self.rtol, self.atol
                    )));
                }
            }
            _ => {
                if self.steps == 0 {
                    return Err(Error::config("fixed-step solver needs steps >= 1"));
                }
            }
        }
        Ok(())
    }
}

/// Cost of some amount of integration work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCount {
    pub nfe: u64,
    pub jvp: u64,
    pub jmp: u64,
}

impl EvalCount {
    pub const fn new(nfe: u64, jvp: u64, jmp: u64) -> Self {
        Self { nfe, jvp, jmp }
    }

    pub fn times(self, k: u64) -> Self {
        Self {
            nfe: self.nfe * k,
            jvp: self.jvp * k,
            jmp: self.jmp * k,
        }
    }
}

impl std::ops::Add for EvalCount {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self {
            nfe: self.nfe + rhs.nfe,
            jvp: self.jvp + rhs.jvp,
            jmp: self.jmp + rhs.jmp,
        }
    }
}

impl std::ops::AddAssign for EvalCount {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

/// Total and critical-path evaluation counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeLedger {
    pub total_nfe: u64,
    pub span_nfe: u64,
    pub total_jvp: u64,
    pub total_jmp: u64,
}

impl NfeLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Work done on the critical path by a single worker.
    pub fn record_sequential(&mut self, c: EvalCount) {
        self.total_nfe += c.nfe;
        self.span_nfe += c.nfe;
        self.total_jvp += c.jvp;
        self.total_jmp += c.jmp;
    }

    /// Work done by independent elements that may run concurrently.
    pub fn record_parallel<I: IntoIterator<Item = EvalCount>>(&mut self, counts: I) {
        let mut span = 0;
        for c in counts {
            self.total_nfe += c.nfe;
            self.total_jvp += c.jvp;
            self.total_jmp += c.jmp;
            span = span.max(c.nfe);
        }
        self.span_nfe += span;
    }

    /// Append another ledger whose work happened after this one.
    pub fn absorb(&mut self, other: &NfeLedger) {
        self.total_nfe += other.total_nfe;
        self.span_nfe += other.span_nfe;
        self.total_jvp += other.total_jvp;
        self.total_jmp += other.total_jmp;
    }

    /// Merge ledgers of concurrent workers: totals add, span is the max.
    pub fn merge_parallel<'a, I: IntoIterator<Item = &'a NfeLedger>>(ledgers: I) -> NfeLedger {
        let mut out = NfeLedger::new();
        for l in ledgers {
            out.total_nfe += l.total_nfe;
            out.total_jvp += l.total_jvp;
            out.total_jmp += l.total_jmp;
            out.span_nfe = out.span_nfe.max(l.span_nfe);
        }
        out
    }
}

/// Samples of a solution at requested times; the last sample is the endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub cost: EvalCount,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one sample")
    }
}

/// A first-order system on a flat buffer.
pub(crate) trait OdeSystem: Sync {
    fn len(&self) -> usize;

    /// Leading components that take part in adaptive error control.
    fn error_len(&self) -> usize {
        self.len()
    }

    /// Cost charged per right-hand-side call.
    fn cost(&self) -> EvalCount;

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);
}

pub(crate) struct RawSolution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub calls: u64,
}

impl RawSolution {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("solution has at least one sample")
    }
}

struct FieldSystem<'a, F: ?Sized> {
    field: &'a F,
}

impl<F: VectorField + ?Sized> OdeSystem for FieldSystem<'_, F> {
    fn len(&self) -> usize {
        self.field.dim()
    }

    fn cost(&self) -> EvalCount {
        EvalCount::new(1, 0, 0)
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let z = DVector::from_column_slice(y);
        dy.copy_from_slice(self.field.eval(t, &z).as_slice());
    }
}

fn check_finite(y: &[f64], t: f64) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalBlowup {
            time: t,
            context: String::new(),
        })
    }
}

/// Integrate `sys` from `t0` through each time in `stops` (monotone in the
/// direction of integration), recording the state at `t0` and every stop.
pub(crate) fn solve_system<S: OdeSystem + ?Sized>(
    sys: &S,
    y0: &[f64],
    t0: f64,
    stops: &[f64],
    spec: &SolverSpec,
) -> Result<RawSolution> {
    spec.validate()?;
    if y0.len() != sys.len() {
        return Err(Error::config(format!(
            "initial state has {} components, system expects {}",
            y0.len(),
            sys.len()
        )));
    }
    check_finite(y0, t0)?;
    match spec.method {
        Method::Euler | Method::Rk4 => solve_fixed(sys, y0, t0, stops, spec),
        Method::Dopri5 => solve_dopri5(sys, y0, t0, stops, spec),
    }
}

fn axpy_into(out: &mut [f64], y: &[f64], h: f64, k: &[f64]) {
    for ((o, yi), ki) in out.iter_mut().zip(y).zip(k) {
        *o = yi + h * ki;
    }
}

fn solve_fixed<S: OdeSystem + ?Sized>(
    sys: &S,
    y0: &[f64],
    t0: f64,
    stops: &[f64],
    spec: &SolverSpec,
) -> Result<RawSolution> {
    let n = sys.len();
    let mut y = y0.to_vec();
    let mut scratch = FixedScratch::new(n);
    let mut times = vec![t0];
    let mut states = vec![y.clone()];
    let mut calls = 0;
    let mut t_start = t0;
    for &t_end in stops {
        let h = (t_end - t_start) / spec.steps as f64;
        for i in 0..spec.steps {
            let t = t_start + i as f64 * h;
            calls += fixed_step(sys, spec.method, t, &mut y, h, &mut scratch);
            check_finite(&y, t + h)?;
        }
        t_start = t_end;
        times.push(t_end);
        states.push(y.clone());
    }
    Ok(RawSolution {
        times,
        states,
        calls,
    })
}

struct FixedScratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl FixedScratch {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

/// One in-place step; returns the number of right-hand-side calls.
fn fixed_step<S: OdeSystem + ?Sized>(
    sys: &S,
    method: Method,
    t: f64,
    y: &mut [f64],
    h: f64,
    s: &mut FixedScratch,
) -> u64 {
    match method {
        Method::Euler => {
            sys.rhs(t, y, &mut s.k1);
            for (yi, ki) in y.iter_mut().zip(&s.k1) {
                *yi += h * ki;
            }
            1
        }
        Method::Rk4 => {
            let half = 0.5 * h;
            sys.rhs(t, y, &mut s.k1);
            axpy_into(&mut s.tmp, y, half, &s.k1);
            sys.rhs(t + half, &s.tmp, &mut s.k2);
            axpy_into(&mut s.tmp, y, half, &s.k2);
            sys.rhs(t + half, &s.tmp, &mut s.k3);
            axpy_into(&mut s.tmp, y, h, &s.k3);
            sys.rhs(t + h, &s.tmp, &mut s.k4);
            let sixth = h / 6.0;
            for (i, yi) in y.iter_mut().enumerate() {
                *yi += sixth * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
            }
            4
        }
        Method::Dopri5 => unreachable!("dopri5 is not a fixed-step method"),
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// Difference between the 5th and embedded 4th order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const PI_BETA: f64 = 0.04;
const MAX_STEPS: u64 = 1_000_000;

fn scaled_rms(v: &[f64], y: &[f64], spec: &SolverSpec, m: usize) -> f64 {
    let sum: f64 = (0..m)
        .map(|i| {
            let sk = spec.atol + spec.rtol * y[i].abs();
            (v[i] / sk).powi(2)
        })
        .sum();
    (sum / m.max(1) as f64).sqrt()
}

/// Starting step heuristic from Hairer, Nørsett & Wanner (one extra call).
fn initial_step<S: OdeSystem + ?Sized>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    dir: f64,
    spec: &SolverSpec,
    m: usize,
) -> f64 {
    let d0 = scaled_rms(y0, y0, spec, m);
    let d1 = scaled_rms(f0, y0, spec, m);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let mut y1 = vec![0.0; y0.len()];
    axpy_into(&mut y1, y0, dir * h0, f0);
    let mut f1 = vec![0.0; y0.len()];
    sys.rhs(t0 + dir * h0, &y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = scaled_rms(&diff, y0, spec, m) / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1)
}

fn solve_dopri5<S: OdeSystem + ?Sized>(
    sys: &S,
    y0: &[f64],
    t0: f64,
    stops: &[f64],
    spec: &SolverSpec,
) -> Result<RawSolution> {
    let n = sys.len();
    let m = if spec.control_all { n } else { sys.error_len() };
    let mut times = vec![t0];
    let mut states = vec![y0.to_vec()];
    let Some(&t_final) = stops.last() else {
        return Ok(RawSolution {
            times,
            states,
            calls: 0,
        });
    };
    if t_final == t0 {
        for &s in stops {
            times.push(s);
            states.push(y0.to_vec());
        }
        return Ok(RawSolution {
            times,
            states,
            calls: 0,
        });
    }
    let dir = (t_final - t0).signum();

    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];

    let mut calls = 0u64;
    sys.rhs(t0, &y, &mut k1);
    calls += 1;
    let mut h = initial_step(sys, t0, &y, &k1, dir, spec, m);
    calls += 1;
    let mut t = t0;
    let mut fac_old: f64 = 1e-4;
    let mut last_rejected = false;
    let mut attempts = 0u64;

    for &stop in stops {
        while dir * (stop - t) > 0.0 {
            attempts += 1;
            if attempts > MAX_STEPS {
                return Err(Error::StiffnessFailure { time: t, step: h });
            }
            let remaining = (stop - t).abs();
            let mut hs = h.min(remaining);
            // Avoid leaving a sliver at the stop.
            if remaining - hs < 1e-12 * remaining.max(t.abs()) {
                hs = remaining;
            }
            if hs <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
                return Err(Error::StiffnessFailure { time: t, step: hs });
            }
            let hd = dir * hs;
            let hit_stop = hs == remaining;

            for i in 0..n {
                tmp[i] = y[i] + hd * A21 * k1[i];
            }
            sys.rhs(t + C2 * hd, &tmp, &mut k2);
            for i in 0..n {
                tmp[i] = y[i] + hd * (A31 * k1[i] + A32 * k2[i]);
            }
            sys.rhs(t + C3 * hd, &tmp, &mut k3);
            for i in 0..n {
                tmp[i] = y[i] + hd * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            sys.rhs(t + C4 * hd, &tmp, &mut k4);
            for i in 0..n {
                tmp[i] = y[i] + hd * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            sys.rhs(t + C5 * hd, &tmp, &mut k5);
            for i in 0..n {
                tmp[i] = y[i]
                    + hd * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            sys.rhs(t + hd, &tmp, &mut k6);
            for i in 0..n {
                y_new[i] = y[i]
                    + hd * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            let t_new = if hit_stop { stop } else { t + hd };
            sys.rhs(t_new, &y_new, &mut k7);
            calls += 6;

            for i in 0..n {
                err[i] = hd
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i]
                        + E7 * k7[i]);
            }
            let err_norm = {
                let sum: f64 = (0..m)
                    .map(|i| {
                        let sk = spec.atol + spec.rtol * y[i].abs().max(y_new[i].abs());
                        (err[i] / sk).powi(2)
                    })
                    .sum();
                (sum / m.max(1) as f64).sqrt()
            };
            if !err_norm.is_finite() {
                if y_new.iter().any(|v| !v.is_finite()) && hs <= 1e-10 * (stop - t0).abs() {
                    return Err(Error::NumericalBlowup {
                        time: t_new,
                        context: String::new(),
                    });
                }
                h = hs * FAC_MIN;
                last_rejected = true;
                continue;
            }

            let expo = 0.2 - PI_BETA * 0.75;
            let fac11 = err_norm.powf(expo);
            if err_norm <= 1.0 {
                let fac = (fac11 / fac_old.powf(PI_BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
                let mut h_next = hs / fac;
                if last_rejected {
                    h_next = h_next.min(hs);
                }
                fac_old = err_norm.max(1e-4);
                last_rejected = false;
                t = t_new;
                std::mem::swap(&mut y, &mut y_new);
                std::mem::swap(&mut k1, &mut k7);
                check_finite(&y, t)?;
                // A step clamped to hit a stop should not shrink the next one.
                h = if hit_stop { h_next.max(h) } else { h_next };
            } else {
                h = hs / (fac11 / SAFETY).min(1.0 / FAC_MIN);
                last_rejected = true;
            }
        }
        times.push(stop);
        states.push(y.clone());
    }
    Ok(RawSolution {
        times,
        states,
        calls,
    })
}

fn to_trajectory(raw: RawSolution, per_call: EvalCount) -> Trajectory {
    Trajectory {
        times: raw.times,
        states: raw.states.into_iter().map(DVector::from_vec).collect(),
        cost: per_call.times(raw.calls),
    }
}

/// A single fixed step of `method`; charges the stage count to `ledger`.
pub fn step_fixed<F: VectorField + ?Sized>(
    field: &F,
    t: f64,
    z: &DVector<f64>,
    h: f64,
    method: Method,
    ledger: &mut NfeLedger,
) -> Result<DVector<f64>> {
    if !(h > 0.0) {
        return Err(Error::config(format!("step size must be positive, got {h}")));
    }
    if !method.is_fixed_step() {
        return Err(Error::config("step_fixed needs euler or rk4"));
    }
    let sys = FieldSystem { field };
    let mut y = z.as_slice().to_vec();
    let mut scratch = FixedScratch::new(y.len());
    let calls = fixed_step(&sys, method, t, &mut y, h, &mut scratch);
    ledger.record_sequential(EvalCount::new(calls, 0, 0));
    check_finite(&y, t + h)?;
    Ok(DVector::from_vec(y))
}

fn check_span(span: (f64, f64)) -> Result<()> {
    if !(span.0 < span.1) {
        return Err(Error::config(format!(
            "integration span needs t_a < t_b, got ({}, {})",
            span.0, span.1
        )));
    }
    Ok(())
}

/// Integrate from `span.0` to `span.1`; samples the start and the endpoint.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    z0: &DVector<f64>,
    span: (f64, f64),
    spec: &SolverSpec,
    ledger: &mut NfeLedger,
) -> Result<Trajectory> {
    let traj = integrate_unrecorded(field, z0, span, spec)?;
    ledger.record_sequential(traj.cost);
    Ok(traj)
}

fn integrate_unrecorded<F: VectorField + ?Sized>(
    field: &F,
    z0: &DVector<f64>,
    span: (f64, f64),
    spec: &SolverSpec,
) -> Result<Trajectory> {
    check_span(span)?;
    let sys = FieldSystem { field };
    let raw = solve_system(&sys, z0.as_slice(), span.0, &[span.1], spec)?;
    Ok(to_trajectory(raw, sys.cost()))
}

/// Integrate through the given node times, recording the state at each.
/// The first time is the initial time. Fixed-step methods take `spec.steps`
/// steps between consecutive nodes; `dopri5` shortens steps to land on nodes.
pub fn integrate_nodes<F: VectorField + ?Sized>(
    field: &F,
    z0: &DVector<f64>,
    times: &[f64],
    spec: &SolverSpec,
    ledger: &mut NfeLedger,
) -> Result<Trajectory> {
    if times.len() < 2 {
        return Err(Error::config("integrate_nodes needs at least two times"));
    }
    for w in times.windows(2) {
        check_span((w[0], w[1]))?;
    }
    let sys = FieldSystem { field };
    let raw = solve_system(&sys, z0.as_slice(), times[0], &times[1..], spec)?;
    let traj = to_trajectory(raw, sys.cost());
    ledger.record_sequential(traj.cost);
    Ok(traj)
}

/// Element-wise [`integrate`], elements run concurrently on the current
/// rayon pool. Span grows by the most expensive element, total by the sum.
pub fn integrate_batch<F: VectorField + ?Sized>(
    field: &F,
    z0s: &[DVector<f64>],
    spans: &[(f64, f64)],
    spec: &SolverSpec,
    ledger: &mut NfeLedger,
) -> Result<Vec<Trajectory>> {
    if z0s.len() != spans.len() {
        return Err(Error::config(format!(
            "batch has {} initial states but {} spans",
            z0s.len(),
            spans.len()
        )));
    }
    let trajs: Vec<Trajectory> = z0s
        .par_iter()
        .zip(spans.par_iter())
        .enumerate()
        .map(|(i, (z0, span))| integrate_unrecorded(field, z0, *span, spec).map_err(|e| e.in_batch(i)))
        .collect::<Result<_>>()?;
    ledger.record_parallel(trajs.iter().map(|t| t.cost));
    Ok(trajs)
}

/// Sequential solve chained across the grid, restarting the solver at every
/// boundary exactly as the sub-interval flows do. Returns the N+1 node states.
pub fn rollout<F: VectorField + ?Sized>(
    field: &F,
    z0: &DVector<f64>,
    grid: &TimeGrid,
    spec: &SolverSpec,
    ledger: &mut NfeLedger,
) -> Result<Vec<DVector<f64>>> {
    let mut nodes = Vec::with_capacity(grid.intervals() + 1);
    nodes.push(z0.clone());
    for n in 0..grid.intervals() {
        let next = integrate(field, &nodes[n], grid.span(n), spec, ledger)
            .map_err(|e| e.in_batch(n))?
            .final_state()
            .clone();
        nodes.push(next);
    }
    Ok(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::BuiltinField;
    use nalgebra::{dmatrix, dvector};

    fn scalar(a: f64) -> BuiltinField {
        BuiltinField::linear(dmatrix![a]).unwrap()
    }

    #[test]
    fn rk4_step_on_exponential_matches_taylor() {
        let mut ledger = NfeLedger::new();
        let z = step_fixed(&scalar(1.0), 0.0, &dvector![1.0], 0.1, Method::Rk4, &mut ledger).unwrap();
        let h: f64 = 0.1;
        let taylor = 1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((z[0] - taylor).abs() < 1e-15);
        assert!((z[0] - 1.105_170_833_333_333).abs() < 1e-14);
        assert_eq!(ledger.total_nfe, 4);
        assert_eq!(ledger.span_nfe, 4);
    }

    #[test]
    fn zero_field_keeps_state() {
        let zero = scalar(0.0);
        for method in [Method::Euler, Method::Rk4] {
            let mut ledger = NfeLedger::new();
            let z = step_fixed(&zero, 0.3, &dvector![3.0], 0.7, method, &mut ledger).unwrap();
            assert_eq!(z[0], 3.0);
        }
        let traj = integrate(&zero, &dvector![3.0], (0.0, 2.0), &SolverSpec::dopri5(1e-6, 1e-6), &mut NfeLedger::new()).unwrap();
        assert_eq!(traj.final_state()[0], 3.0);
    }

    #[test]
    fn euler_on_constant_field() {
        let one = BuiltinField::constant(dvector![1.0]);
        let mut ledger = NfeLedger::new();
        let z = step_fixed(&one, 0.0, &dvector![0.0], 0.5, Method::Euler, &mut ledger).unwrap();
        assert_eq!(z[0], 0.5);
        assert_eq!(ledger.total_nfe, 1);
    }

    #[test]
    fn step_rejects_bad_inputs() {
        let mut ledger = NfeLedger::new();
        assert!(step_fixed(&scalar(1.0), 0.0, &dvector![1.0], 0.0, Method::Rk4, &mut ledger).is_err());
        assert!(step_fixed(&scalar(1.0), 0.0, &dvector![1.0], 0.1, Method::Dopri5, &mut ledger).is_err());
    }

    #[test]
    fn blowup_names_time() {
        let mut ledger = NfeLedger::new();
        let err = integrate(&scalar(1e6), &dvector![1e300], (0.0, 1.0), &SolverSpec::rk4(4), &mut ledger).unwrap_err();
        match err {
            Error::NumericalBlowup { time, .. } => assert!((time - 0.25).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dopri5_decay() {
        let traj = integrate(&scalar(-1.0), &dvector![1.0], (0.0, 1.0), &SolverSpec::dopri5(1e-8, 1e-8), &mut NfeLedger::new()).unwrap();
        assert!((traj.final_state()[0] - (-1.0f64).exp()).abs() < 1e-7);
        assert_eq!(traj.times, vec![0.0, 1.0]);
    }

    #[test]
    fn dopri5_rotation_returns_to_start() {
        let rot = BuiltinField::linear(dmatrix![0.0, 1.0; -1.0, 0.0]).unwrap();
        let traj = integrate(&rot, &dvector![1.0, 0.0], (0.0, 2.0 * std::f64::consts::PI), &SolverSpec::dopri5(1e-8, 1e-8), &mut NfeLedger::new()).unwrap();
        let z = traj.final_state();
        assert!((z[0] - 1.0).abs() < 1e-6 && z[1].abs() < 1e-6, "{z}");
    }

    #[test]
    fn dopri5_step_underflow_is_stiffness_failure() {
        // Finite-time blowup: z' = z^2 from z=1 explodes at t=1.
        struct Riccati;
        impl VectorField for Riccati {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, _t: f64, z: &DVector<f64>) -> DVector<f64> {
                z.map(|v| v * v)
            }
            fn jac_z(&self, _t: f64, z: &DVector<f64>) -> nalgebra::DMatrix<f64> {
                nalgebra::DMatrix::from_element(1, 1, 2.0 * z[0])
            }
        }
        let blow = Riccati;
        let err = integrate(&blow, &dvector![1.0], (0.0, 2.0), &SolverSpec::dopri5(1e-8, 1e-8), &mut NfeLedger::new()).unwrap_err();
        assert!(matches!(err, Error::StiffnessFailure { .. } | Error::NumericalBlowup { .. }), "{err:?}");
    }

    #[test]
    fn batch_counts_span_as_one_element() {
        let field = scalar(-1.0);
        let z0s: Vec<_> = (0..100).map(|i| dvector![i as f64]).collect();
        let spans: Vec<_> = (0..100).map(|i| (i as f64 * 0.1, (i + 1) as f64 * 0.1)).collect();
        let mut ledger = NfeLedger::new();
        integrate_batch(&field, &z0s, &spans, &SolverSpec::rk4(2), &mut ledger).unwrap();
        assert_eq!(ledger.span_nfe, 8);
        assert_eq!(ledger.total_nfe, 800);
    }

    #[test]
    fn batch_of_decays_scales_linearly() {
        let field = scalar(-1.0);
        let z0s = vec![dvector![1.0], dvector![2.0], dvector![3.0]];
        let spans = vec![(0.0, 1.0); 3];
        let out = integrate_batch(&field, &z0s, &spans, &SolverSpec::dopri5(1e-10, 1e-10), &mut NfeLedger::new()).unwrap();
        for (k, traj) in out.iter().enumerate() {
            let expect = (k + 1) as f64 * (-1.0f64).exp();
            assert!((traj.final_state()[0] - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn batch_error_carries_index() {
        let field = scalar(1e6);
        let z0s = vec![dvector![1.0], dvector![1e300]];
        let spans = vec![(0.0, 1.0); 2];
        let err = integrate_batch(&field, &z0s, &spans, &SolverSpec::rk4(1), &mut NfeLedger::new()).unwrap_err();
        assert!(matches!(err, Error::Batch { index: 1, .. }));
        assert_eq!(err.kind(), "numerical_blowup");
    }

    #[test]
    fn uniform_grid_spacing() {
        let grid = TimeGrid::uniform(0.0, 10.0, 100).unwrap();
        assert_eq!(grid.intervals(), 100);
        assert_eq!(grid.t0(), 0.0);
        assert_eq!(grid.tn(), 10.0);
        for w in grid.boundaries().windows(2) {
            assert!((w[1] - w[0] - 0.1).abs() < 1e-14);
        }
        assert!(TimeGrid::from_boundaries(vec![0.0, 1.0, 1.0]).is_err());
        assert!(TimeGrid::uniform(1.0, 0.0, 3).is_err());
    }

    #[test]
    fn rejects_reversed_span_and_bad_spec() {
        let mut ledger = NfeLedger::new();
        assert!(integrate(&scalar(1.0), &dvector![1.0], (1.0, 0.0), &SolverSpec::rk4(1), &mut ledger).is_err());
        assert!(integrate(&scalar(1.0), &dvector![1.0], (0.0, 1.0), &SolverSpec::dopri5(0.0, 1e-8), &mut ledger).is_err());
        assert!(integrate(&scalar(1.0), &dvector![1.0], (0.0, 1.0), &SolverSpec::rk4(0), &mut ledger).is_err());
    }

    #[test]
    fn backward_integration_of_decay() {
        let sys = FieldSystem { field: &scalar(-1.0) };
        let raw = solve_system(&sys, &[(-1.0f64).exp()], 1.0, &[0.0], &SolverSpec::dopri5(1e-10, 1e-10)).unwrap();
        assert!((raw.last()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nodes_are_hit_exactly() {
        let times = [0.0, 0.3, 0.7, 1.0];
        let traj = integrate_nodes(&scalar(-1.0), &dvector![1.0], &times, &SolverSpec::dopri5(1e-9, 1e-9), &mut NfeLedger::new()).unwrap();
        assert_eq!(traj.times, times.to_vec());
        for (t, z) in traj.times.iter().zip(&traj.states) {
            assert!((z[0] - (-t).exp()).abs() < 1e-8);
        }
    }
}
