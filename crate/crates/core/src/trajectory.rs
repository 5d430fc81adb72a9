//! Piecewise cubic trajectories of a triple integrator.
//!
//! Each interval holds `x(τ) = a τ³ + b τ² + c τ + d` per axis over
//! `τ ∈ [0, dt]`, so jerk is constant (`6a`) on the interval. The Bézier
//! view of an interval is its four control points; a cubic Bézier curve
//! stays inside the convex hull of them, which is what the optimizer uses
//! to keep whole intervals inside a corridor polyhedron.

use std::io::Write;

use thiserror::Error;

use crate::Point3;

/// Position, velocity and acceleration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FullState {
    pub pos: Point3,
    pub vel: Point3,
    pub acc: Point3,
}

impl FullState {
    pub fn new(pos: Point3, vel: Point3, acc: Point3) -> Self {
        Self { pos, vel, acc }
    }

    pub fn rest(pos: Point3) -> Self {
        Self::new(pos, Point3::zeros(), Point3::zeros())
    }

    pub fn is_finite(&self) -> bool {
        self.pos.iter().chain(self.vel.iter()).chain(self.acc.iter()).all(|v| v.is_finite())
    }

    /// Largest absolute component difference over position, velocity and
    /// acceleration.
    pub fn max_abs_diff(&self, other: &FullState) -> f64 {
        (self.pos - other.pos)
            .amax()
            .max((self.vel - other.vel).amax())
            .max((self.acc - other.acc).amax())
    }
}

/// State plus the (constant) jerk of the interval it was evaluated on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub state: FullState,
    pub jerk: Point3,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("time {t} outside trajectory span [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },
    #[error("state mismatch {mismatch:e} at splice point exceeds tolerance")]
    ContinuityViolation { mismatch: f64 },
    #[error("interval duration must be positive, got {0}")]
    InvalidDuration(f64),
}

/// One constant-jerk piece.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubicInterval {
    pub a: Point3,
    pub b: Point3,
    pub c: Point3,
    pub d: Point3,
    pub dt: f64,
}

impl CubicInterval {
    /// Interval starting at `start` and applying constant `jerk` for `dt`.
    pub fn from_state(start: &FullState, jerk: Point3, dt: f64) -> Self {
        Self {
            a: jerk / 6.0,
            b: start.acc / 2.0,
            c: start.vel,
            d: start.pos,
            dt,
        }
    }

    pub fn jerk(&self) -> Point3 {
        self.a * 6.0
    }

    pub fn state_at(&self, tau: f64) -> FullState {
        let (a, b, c, d) = (self.a, self.b, self.c, self.d);
        FullState {
            pos: ((a * tau + b) * tau + c) * tau + d,
            vel: (a * (3.0 * tau) + b * 2.0) * tau + c,
            acc: a * (6.0 * tau) + b * 2.0,
        }
    }

    pub fn start_state(&self) -> FullState {
        self.state_at(0.0)
    }

    pub fn end_state(&self) -> FullState {
        self.state_at(self.dt)
    }

    /// Bézier control points `r0..r3`.
    pub fn control_points(&self) -> [Point3; 4] {
        let dt = self.dt;
        let (a, b, c, d) = (self.a, self.b, self.c, self.d);
        [
            d,
            (c * dt + d * 3.0) / 3.0,
            (b * (dt * dt) + c * (2.0 * dt) + d * 3.0) / 3.0,
            a * (dt * dt * dt) + b * (dt * dt) + c * dt + d,
        ]
    }

    /// The same curve restricted to `[tau0, tau0 + len]`, re-based so its
    /// local time starts at zero.
    pub fn sub_interval(&self, tau0: f64, len: f64) -> Self {
        let (a, b, c) = (self.a, self.b, self.c);
        Self {
            a,
            b: b + a * (3.0 * tau0),
            c: c + b * (2.0 * tau0) + a * (3.0 * tau0 * tau0),
            d: self.state_at(tau0).pos,
            dt: len,
        }
    }
}

/// Ordered constant-jerk intervals starting at time `t0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    t0: f64,
    intervals: Vec<CubicInterval>,
    starts: Vec<f64>,
}

impl Trajectory {
    pub fn new(t0: f64, intervals: Vec<CubicInterval>) -> Result<Self, TrajectoryError> {
        if let Some(bad) = intervals.iter().find(|iv| !(iv.dt > 0.0)) {
            return Err(TrajectoryError::InvalidDuration(bad.dt));
        }
        let mut starts = Vec::with_capacity(intervals.len());
        let mut t = t0;
        for iv in &intervals {
            starts.push(t);
            t += iv.dt;
        }
        Ok(Self { t0, intervals, starts })
    }

    /// A vehicle holding still at `pos` for `duration` seconds.
    pub fn rest(pos: Point3, t0: f64, duration: f64) -> Self {
        let iv = CubicInterval::from_state(&FullState::rest(pos), Point3::zeros(), duration.max(1e-3));
        Self::new(t0, vec![iv]).expect("positive duration")
    }

    /// Integrates constant jerks from `x0`, each applied for `dt`.
    pub fn from_jerk_sequence(
        x0: &FullState,
        jerks: &[Point3],
        dt: f64,
        t0: f64,
    ) -> Result<Self, TrajectoryError> {
        if !(dt > 0.0) {
            return Err(TrajectoryError::InvalidDuration(dt));
        }
        let mut state = *x0;
        let mut intervals = Vec::with_capacity(jerks.len());
        for j in jerks {
            let iv = CubicInterval::from_state(&state, *j, dt);
            state = iv.end_state();
            intervals.push(iv);
        }
        Self::new(t0, intervals)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        match (self.starts.last(), self.intervals.last()) {
            (Some(s), Some(iv)) => s + iv.dt,
            _ => self.t0,
        }
    }

    pub fn duration(&self) -> f64 {
        self.t_end() - self.t0
    }

    pub fn intervals(&self) -> &[CubicInterval] {
        &self.intervals
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Start time of every interval.
    pub fn knot_times(&self) -> &[f64] {
        &self.starts
    }

    pub fn jerks(&self) -> Vec<Point3> {
        self.intervals.iter().map(CubicInterval::jerk).collect()
    }

    /// Index of the interval owning `t` and the local time inside it.
    /// Knot times belong to the later interval, the final time to the last.
    fn locate(&self, t: f64) -> (usize, f64) {
        let idx = match self.starts.partition_point(|&s| s <= t) {
            0 => 0,
            k => k - 1,
        };
        let tau = (t - self.starts[idx]).clamp(0.0, self.intervals[idx].dt);
        (idx, tau)
    }

    pub fn eval(&self, t: f64) -> Result<Sample, TrajectoryError> {
        let (start, end) = (self.t0, self.t_end());
        let slack = 1e-12 * (1.0 + end.abs());
        if self.intervals.is_empty() || !(t >= start - slack && t <= end + slack) {
            return Err(TrajectoryError::OutOfDomain { t, start, end });
        }
        let (i, tau) = self.locate(t);
        let iv = &self.intervals[i];
        Ok(Sample { state: iv.state_at(tau), jerk: iv.jerk() })
    }

    /// Evaluates at `t` clamped into the trajectory span.
    pub fn eval_clamped(&self, t: f64) -> Sample {
        let t = t.clamp(self.t0, self.t_end());
        self.eval(t).expect("clamped time is inside the span")
    }

    pub fn start_state(&self) -> FullState {
        self.eval_clamped(self.t0).state
    }

    pub fn end_state(&self) -> FullState {
        self.intervals.last().map_or_else(
            || FullState::rest(Point3::zeros()),
            CubicInterval::end_state,
        )
    }

    /// Largest state jump between consecutive intervals.
    pub fn max_knot_discontinuity(&self) -> f64 {
        self.intervals
            .windows(2)
            .map(|w| w[0].end_state().max_abs_diff(&w[1].start_state()))
            .fold(0.0, f64::max)
    }

    /// The part of the trajectory on `[t_a, t_b]` (clamped to the span).
    /// Intervals cut by either bound are re-based analytically; pieces
    /// shorter than `1e-9` s are dropped.
    pub fn restrict(&self, t_a: f64, t_b: f64) -> Trajectory {
        const MIN_PIECE: f64 = 1e-9;
        let t_a = t_a.clamp(self.t0, self.t_end());
        let t_b = t_b.clamp(t_a, self.t_end());
        let mut out = Vec::new();
        for (iv, &s) in self.intervals.iter().zip(&self.starts) {
            let lo = t_a.max(s);
            let hi = t_b.min(s + iv.dt);
            if hi - lo <= MIN_PIECE {
                continue;
            }
            if lo - s <= MIN_PIECE && s + iv.dt - hi <= MIN_PIECE {
                out.push(*iv);
            } else {
                out.push(iv.sub_interval(lo - s, hi - lo));
            }
        }
        let start = out.first().map_or(t_a, |_| {
            // Align the start with the first kept piece.
            let first_kept = self
                .intervals
                .iter()
                .zip(&self.starts)
                .find(|(iv, &s)| t_b.min(s + iv.dt) - t_a.max(s) > MIN_PIECE)
                .map(|(_, &s)| s.max(t_a));
            first_kept.unwrap_or(t_a)
        });
        Trajectory::new(start, out).expect("restricted pieces have positive length")
    }

    /// `whole` on `[whole.t0, t_r]` followed by `tail`, which must start at
    /// `t_r` in the state `whole` has there.
    pub fn splice(whole: &Trajectory, t_r: f64, tail: &Trajectory) -> Result<Trajectory, TrajectoryError> {
        const STATE_TOL: f64 = 1e-7;
        const TIME_TOL: f64 = 1e-9;
        let here = whole.eval(t_r)?.state;
        let mismatch = here.max_abs_diff(&tail.start_state());
        if mismatch > STATE_TOL || (tail.t0 - t_r).abs() > TIME_TOL {
            return Err(TrajectoryError::ContinuityViolation {
                mismatch: mismatch.max((tail.t0 - t_r).abs()),
            });
        }
        let head = whole.restrict(whole.t0, t_r);
        let t0 = if head.is_empty() { tail.t0 } else { head.t0 };
        let mut intervals = head.intervals;
        intervals.extend_from_slice(&tail.intervals);
        Trajectory::new(t0, intervals)
    }

    /// Writes `t,x,y,z,vx,vy,vz,ax,ay,az,jx,jy,jz` rows sampled at
    /// `rate_hz`, always including the final time.
    pub fn write_csv<W: Write>(&self, mut out: W, rate_hz: f64) -> std::io::Result<()> {
        writeln!(out, "t,x,y,z,vx,vy,vz,ax,ay,az,jx,jy,jz")?;
        if self.is_empty() {
            return Ok(());
        }
        let step = 1.0 / rate_hz;
        let n = (self.duration() / step).floor() as usize;
        let mut times: Vec<f64> = (0..=n).map(|k| self.t0 + k as f64 * step).collect();
        if self.t_end() - times[times.len() - 1] > 1e-9 {
            times.push(self.t_end());
        }
        for t in times {
            let s = self.eval_clamped(t);
            write_sample_row(&mut out, t, &s)?;
        }
        Ok(())
    }
}

/// One CSV row in the trajectory log layout.
pub fn write_sample_row<W: Write>(out: &mut W, t: f64, s: &Sample) -> std::io::Result<()> {
    let st = &s.state;
    writeln!(
        out,
        "{t},{},{},{},{},{},{},{},{},{},{},{},{}",
        st.pos.x, st.pos.y, st.pos.z, st.vel.x, st.vel.y, st.vel.z, st.acc.x, st.acc.y, st.acc.z,
        s.jerk.x, s.jerk.y, s.jerk.z
    )
}

/// De Casteljau evaluation of a cubic Bézier curve at `s ∈ [0, 1]`.
pub fn de_casteljau(points: &[Point3; 4], s: f64) -> Point3 {
    let mut p = *points;
    for level in (1..4).rev() {
        for i in 0..level {
            p[i] = p[i] * (1.0 - s) + p[i + 1] * s;
        }
    }
    p[0]
}
