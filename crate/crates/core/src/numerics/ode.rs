//! Dormand–Prince 5(4) with step-size control, forced landing times and
//! event location by re-stepping from the start of the bracketing step.

use crate::error::{Error, Result};

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

pub type Rhs<'a> = dyn Fn(f64, &[f64], &mut [f64]) + Sync + 'a;

/// Sign-change event. `rising` selects − → + crossings, otherwise + → −.
pub struct Event<'a> {
    pub g: &'a (dyn Fn(f64, &[f64]) -> f64 + 'a),
    pub rising: bool,
    pub t_min: f64,
    /// Crossings rejected here are skipped and integration continues.
    pub accept: &'a (dyn Fn(f64, &[f64]) -> bool + 'a),
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub t: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub event_hit: bool,
    /// Index into the event list of the event that stopped the integration.
    pub event_index: Option<usize>,
    pub steps: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Dopri5 {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub h_max: f64,
}

impl Default for Dopri5 {
    fn default() -> Self {
        Dopri5 { rtol: 1e-10, atol: 1e-12, max_steps: 2_000_000, h_max: f64::INFINITY }
    }
}

impl Dopri5 {
    pub fn with_tol(rtol: f64, atol: f64) -> Self {
        Dopri5 { rtol, atol, ..Default::default() }
    }

    /// One step of length `h` from `(t, y)`; returns (y_new, error estimate vector).
    pub fn step(f: &Rhs, t: f64, y: &[f64], f0: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
        let n = y.len();
        let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
        k.push(f0.to_vec());
        let mut tmp = vec![0.0; n];
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    acc += A[s][j] * kj[i];
                }
                tmp[i] = y[i] + h * acc;
            }
            let mut ks = vec![0.0; n];
            f(t + C[s] * h, &tmp, &mut ks);
            k.push(ks);
        }
        // stage 7 is evaluated at the 5th-order solution (FSAL)
        let y_new = {
            let mut out = vec![0.0; n];
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..6 {
                    acc += A[6][j] * k[j][i];
                }
                out[i] = y[i] + h * acc;
            }
            out
        };
        let mut err = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..7 {
                acc += E[j] * k[j][i];
            }
            err[i] = h * acc;
        }
        (y_new, err)
    }

    /// Single uncontrolled step, used for dense evaluation between accepted nodes.
    pub fn advance(f: &Rhs, t: f64, y: &[f64], h: f64) -> Vec<f64> {
        if h == 0.0 {
            return y.to_vec();
        }
        let mut f0 = vec![0.0; y.len()];
        f(t, y, &mut f0);
        Self::step(f, t, y, &f0, h).0
    }

    fn err_norm(&self, y: &[f64], y_new: &[f64], err: &[f64]) -> f64 {
        let n = y.len() as f64;
        let mut acc = 0.0;
        for i in 0..y.len() {
            let sc = self.atol + self.rtol * y[i].abs().max(y_new[i].abs());
            acc += (err[i] / sc).powi(2);
        }
        (acc / n).sqrt()
    }

    /// Integrate from `t0` to `t_end` (either direction). Every time in `stops`
    /// lying in the integration range becomes an accepted node. `check` is run on
    /// every accepted node and may abort the integration.
    pub fn integrate(
        &self,
        f: &Rhs,
        t0: f64,
        y0: &[f64],
        t_end: f64,
        stops: &[f64],
        events: &[&Event],
        check: &dyn Fn(f64, &[f64]) -> Result<()>,
    ) -> Result<Solution> {
        let dir = if t_end >= t0 { 1.0 } else { -1.0 };
        let span = (t_end - t0).abs();
        let mut stops: Vec<f64> = stops
            .iter()
            .copied()
            .filter(|&s| dir * (s - t0) > 0.0 && dir * (s - t_end) < 0.0)
            .collect();
        stops.sort_by(|a, b| (dir * a).partial_cmp(&(dir * b)).unwrap());
        stops.push(t_end);
        let mut next_stop = 0usize;

        let mut sol =
            Solution { t: vec![t0], y: vec![y0.to_vec()], event_hit: false, event_index: None, steps: 0, rejected: 0 };
        if span == 0.0 {
            return Ok(sol);
        }
        let mut t = t0;
        let mut y = y0.to_vec();
        let mut f0 = vec![0.0; y.len()];
        f(t, &y, &mut f0);
        let mut h = self.initial_step(f, t, &y, &f0, dir).min(span).min(self.h_max);
        let mut g_prev: Vec<f64> = events.iter().map(|e| (e.g)(t, &y)).collect();

        loop {
            if sol.steps + sol.rejected > self.max_steps {
                return Err(Error::Stiffness { t, h });
            }
            let to_stop = (stops[next_stop] - t).abs();
            let mut landing = false;
            if h >= to_stop {
                h = to_stop;
                landing = true;
            }
            let h_min = 1e-14 * (1.0 + t.abs());
            if h < h_min && !landing {
                return Err(Error::Stiffness { t, h });
            }
            let (y_new, err) = Self::step(f, t, &y, &f0, dir * h);
            let en = self.err_norm(&y, &y_new, &err);
            if !en.is_finite() || en > 1.0 {
                sol.rejected += 1;
                let fac = if en.is_finite() { (0.9 * en.powf(-0.2)).max(0.2) } else { 0.2 };
                h *= fac;
                continue;
            }
            let t_new = if landing { stops[next_stop] } else { t + dir * h };
            sol.steps += 1;

            // earliest accepted crossing among all events inside this step
            let mut hit: Option<(usize, f64, Vec<f64>)> = None;
            for (k, ev) in events.iter().enumerate() {
                let gp = g_prev[k];
                let g_new = (ev.g)(t_new, &y_new);
                g_prev[k] = g_new;
                let crossed = if ev.rising { gp < 0.0 && g_new >= 0.0 } else { gp > 0.0 && g_new <= 0.0 };
                if crossed && dir * (t_new - t0) > ev.t_min {
                    let (te, ye) = self.locate(f, ev, t, &y, t_new - t, gp);
                    let earlier = hit.as_ref().map_or(true, |h| dir * (te - h.1) < 0.0);
                    if earlier && dir * (te - t0) > ev.t_min && (ev.accept)(te, &ye) {
                        hit = Some((k, te, ye));
                    }
                }
            }
            if let Some((k, te, ye)) = hit {
                check(te, &ye)?;
                sol.t.push(te);
                sol.y.push(ye);
                sol.event_hit = true;
                sol.event_index = Some(k);
                return Ok(sol);
            }

            check(t_new, &y_new)?;
            t = t_new;
            y = y_new;
            f(t, &y, &mut f0);
            sol.t.push(t);
            sol.y.push(y.clone());
            if landing {
                next_stop += 1;
                if next_stop == stops.len() {
                    return Ok(sol);
                }
            }
            let fac = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * fac).min(self.h_max);
        }
    }

    fn initial_step(&self, f: &Rhs, t: f64, y: &[f64], f0: &[f64], dir: f64) -> f64 {
        let sc: Vec<f64> = y.iter().map(|v| self.atol + self.rtol * v.abs()).collect();
        let d0 = rms(y, &sc);
        let d1 = rms(f0, &sc);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + dir * h0 * b).collect();
        let mut f1 = vec![0.0; y.len()];
        f(t + dir * h0, &y1, &mut f1);
        let df: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
        let d2 = rms(&df, &sc) / h0;
        let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
        (100.0 * h0).min(h1)
    }

    /// Bracketed root of the event function on a step of signed length `h`.
    fn locate(&self, f: &Rhs, ev: &Event, t: f64, y: &[f64], h: f64, g0: f64) -> (f64, Vec<f64>) {
        let eval = |theta: f64| -> (f64, Vec<f64>) {
            let ys = Self::advance(f, t, y, theta * h);
            ((ev.g)(t + theta * h, &ys), ys)
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut g_lo = g0;
        let (mut g_hi, _) = eval(1.0);
        for _ in 0..200 {
            if (hi - lo) * h.abs() < 1e-15 * (1.0 + t.abs()) {
                break;
            }
            // Illinois-style regula falsi guarded by bisection
            let mut mid = if (g_hi - g_lo).abs() > 0.0 { lo - g_lo * (hi - lo) / (g_hi - g_lo) } else { 0.5 * (lo + hi) };
            if !(mid > lo && mid < hi) || (mid - lo).min(hi - mid) < 0.05 * (hi - lo) {
                mid = 0.5 * (lo + hi);
            }
            let (gm, _) = eval(mid);
            let same_side_as_lo = if ev.rising { gm < 0.0 } else { gm > 0.0 };
            if same_side_as_lo {
                lo = mid;
                g_lo = gm;
            } else {
                hi = mid;
                g_hi = gm;
            }
        }
        let (_, ys) = eval(hi);
        (t + hi * h, ys)
    }
}

fn rms(v: &[f64], sc: &[f64]) -> f64 {
    let n = v.len().max(1) as f64;
    (v.iter().zip(sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn osc(_t: f64, y: &[f64], dy: &mut [f64]) {
        dy[0] = y[1];
        dy[1] = -y[0];
    }

    #[test]
    fn harmonic_matches_cosine() {
        let ok = |_: f64, _: &[f64]| Ok(());
        let sol = Dopri5::default().integrate(&osc, 0.0, &[1.0, 0.0], 10.0, &[], &[], &ok).unwrap();
        let (t, y) = (sol.t.last().unwrap(), sol.y.last().unwrap());
        assert_eq!(*t, 10.0);
        assert!((y[0] - 10f64.cos()).abs() < 1e-8);
    }

    #[test]
    fn lands_on_stops_and_runs_backward() {
        let ok = |_: f64, _: &[f64]| Ok(());
        let stops = [-0.5, -1.25];
        let sol = Dopri5::default().integrate(&osc, 0.0, &[1.0, 0.0], -2.0, &stops, &[], &ok).unwrap();
        for s in stops {
            let i = sol.t.iter().position(|&t| t == s).expect("stop missing");
            assert!((sol.y[i][0] - s.cos()).abs() < 1e-9);
        }
    }

    #[test]
    fn event_finds_velocity_zero() {
        let ok = |_: f64, _: &[f64]| Ok(());
        let g = |_: f64, y: &[f64]| y[1];
        let acc = |_: f64, _: &[f64]| true;
        let ev = Event { g: &g, rising: true, t_min: 1e-3, accept: &acc };
        let sol = Dopri5::default().integrate(&osc, 0.0, &[1.0, 0.0], 10.0, &[], &[&ev], &ok).unwrap();
        assert!(sol.event_hit);
        assert!((sol.t.last().unwrap() - std::f64::consts::PI).abs() < 1e-10);
    }
}
