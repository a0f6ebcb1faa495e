//! Adaptive Dormand–Prince 5(4) integrator on flat real state vectors.
//!
//! Complex-valued problems are integrated through an interleaved
//! `[re, im, re, im, ...]` layout; see [`complex_as_real`].

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step size underflow at t = {t:.6e} (h = {h:.3e}); problem is stiff or singular")]
    StepUnderflow { t: f64, h: f64 },
    #[error("exceeded {max_steps} steps before reaching t = {target:.6e} (stuck at t = {t:.6e})")]
    TooManySteps { t: f64, target: f64, max_steps: usize },
    #[error("non-finite state encountered at t = {t:.6e}")]
    NonFinite { t: f64 },
}

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

// fifth-order weights minus embedded fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl StepControl {
    pub fn new(tol: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            h_max: f64::INFINITY,
            max_steps: 50_000_000,
        }
    }

    pub fn with_h_max(mut self, h_max: f64) -> Self {
        self.h_max = h_max;
        self
    }
}

/// Dormand–Prince stepper holding its own state and the FSAL derivative.
pub struct Dopri5<F>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    f: F,
    t: f64,
    y: Vec<f64>,
    h: f64,
    ctrl: StepControl,
    k: [Vec<f64>; 7],
    y_stage: Vec<f64>,
    y_new: Vec<f64>,
    fsal_valid: bool,
    accepted: usize,
    rejected: usize,
}

impl<F> Dopri5<F>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    pub fn new(f: F, t0: f64, y0: Vec<f64>, ctrl: StepControl) -> Self {
        let n = y0.len();
        Self {
            f,
            t: t0,
            y: y0,
            h: 0.0,
            ctrl,
            k: std::array::from_fn(|_| vec![0.0; n]),
            y_stage: vec![0.0; n],
            y_new: vec![0.0; n],
            fsal_valid: false,
            accepted: 0,
            rejected: 0,
        }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> &[f64] {
        &self.y
    }

    /// Overwrite the state in place; the cached derivative is discarded.
    pub fn state_mut(&mut self) -> &mut [f64] {
        self.fsal_valid = false;
        &mut self.y
    }

    pub fn accepted_steps(&self) -> usize {
        self.accepted
    }

    pub fn rejected_steps(&self) -> usize {
        self.rejected
    }

    /// Derivative at the current state (computed on demand).
    pub fn derivative(&mut self) -> &[f64] {
        self.ensure_k1();
        &self.k[0]
    }

    fn ensure_k1(&mut self) {
        if !self.fsal_valid {
            let (k0, _) = self.k.split_at_mut(1);
            (self.f)(self.t, &self.y, &mut k0[0]);
            self.fsal_valid = true;
        }
    }

    fn initial_step(&mut self, span: f64) -> f64 {
        self.ensure_k1();
        let n = self.y.len().max(1) as f64;
        let mut d0 = 0.0;
        let mut d1 = 0.0;
        for (yi, fi) in self.y.iter().zip(&self.k[0]) {
            let sc = self.ctrl.atol + self.ctrl.rtol * yi.abs();
            d0 += (yi / sc).powi(2);
            d1 += (fi / sc).powi(2);
        }
        d0 = (d0 / n).sqrt();
        d1 = (d1 / n).sqrt();
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span.abs()).min(self.ctrl.h_max);
        // explicit Euler probe for the second derivative estimate
        let y1: Vec<f64> = self
            .y
            .iter()
            .zip(&self.k[0])
            .map(|(yi, fi)| yi + h0 * fi)
            .collect();
        let mut f1 = vec![0.0; self.y.len()];
        (self.f)(self.t + h0, &y1, &mut f1);
        let mut d2 = 0.0;
        for ((yi, f0), f1i) in self.y.iter().zip(&self.k[0]).zip(&f1) {
            let sc = self.ctrl.atol + self.ctrl.rtol * yi.abs();
            d2 += ((f1i - f0) / sc).powi(2);
        }
        d2 = (d2 / n).sqrt() / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(span.abs()).min(self.ctrl.h_max)
    }

    /// Attempt one step of size `h`; returns the scaled error norm.
    fn try_step(&mut self, h: f64) -> f64 {
        let n = self.y.len();
        let t = self.t;
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
        let ys = &mut self.y_stage;
        let y = &self.y;

        for i in 0..n {
            ys[i] = y[i] + h * A21 * k1[i];
        }
        (self.f)(t + C2 * h, ys, k2);
        for i in 0..n {
            ys[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        (self.f)(t + C3 * h, ys, k3);
        for i in 0..n {
            ys[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        (self.f)(t + C4 * h, ys, k4);
        for i in 0..n {
            ys[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        (self.f)(t + C5 * h, ys, k5);
        for i in 0..n {
            ys[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        (self.f)(t + h, ys, k6);
        let yn = &mut self.y_new;
        for i in 0..n {
            yn[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        (self.f)(t + h, yn, k7);

        let mut err: f64 = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i]
                    + E7 * k7[i]);
            let sc = self.ctrl.atol + self.ctrl.rtol * y[i].abs().max(yn[i].abs());
            err = err.max((e / sc).abs());
        }
        if err.is_nan() {
            f64::INFINITY
        } else {
            err
        }
    }

    /// Integrate forward to exactly `t_end`.
    pub fn advance_to(&mut self, t_end: f64) -> Result<(), OdeError> {
        self.advance_to_with(t_end, |_, _| false)
    }

    /// Integrate forward to exactly `t_end`, calling `on_accept` after every
    /// accepted step. The hook may modify the state (e.g. re-symmetrize it).
    pub fn advance_to_with(
        &mut self,
        t_end: f64,
        mut on_accept: impl FnMut(f64, &mut [f64]) -> bool,
    ) -> Result<(), OdeError> {
        if t_end <= self.t {
            return Ok(());
        }
        self.ensure_k1();
        if self.h <= 0.0 {
            self.h = self.initial_step(t_end - self.t);
        }
        let mut steps = 0usize;
        while self.t < t_end {
            if steps >= self.ctrl.max_steps {
                return Err(OdeError::TooManySteps {
                    t: self.t,
                    target: t_end,
                    max_steps: self.ctrl.max_steps,
                });
            }
            steps += 1;
            let remaining = t_end - self.t;
            let mut h = self.h.min(self.ctrl.h_max);
            let clipped = h >= remaining;
            if clipped {
                h = remaining;
            }
            let min_h = 1e-14 * self.t.abs().max(1e-300) + f64::MIN_POSITIVE;
            if h < min_h && !clipped {
                return Err(OdeError::StepUnderflow { t: self.t, h });
            }
            let err = self.try_step(h);
            if err <= 1.0 {
                self.t = if clipped { t_end } else { self.t + h };
                std::mem::swap(&mut self.y, &mut self.y_new);
                let (k0, rest) = self.k.split_at_mut(1);
                std::mem::swap(&mut k0[0], &mut rest[5]);
                self.accepted += 1;
                if self.y.iter().any(|v| !v.is_finite()) {
                    return Err(OdeError::NonFinite { t: self.t });
                }
                if on_accept(self.t, &mut self.y) {
                    self.fsal_valid = false;
                    self.ensure_k1();
                }
                let fac = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                // keep the unclipped step suggestion when we only shortened to hit t_end
                let h_next = h * fac;
                if !clipped || h_next > self.h {
                    self.h = h_next;
                }
            } else {
                self.rejected += 1;
                let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
                self.h = h * fac;
                if self.h < 1e-14 * self.t.abs().max(1.0) {
                    return Err(OdeError::StepUnderflow { t: self.t, h: self.h });
                }
            }
        }
        Ok(())
    }
}

/// Reinterpret a complex slice as interleaved reals.
pub fn complex_as_real(z: &[Complex64]) -> Vec<f64> {
    z.iter().flat_map(|c| [c.re, c.im]).collect()
}

/// Inverse of [`complex_as_real`].
pub fn real_as_complex(x: &[f64]) -> Vec<Complex64> {
    x.chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect()
}
