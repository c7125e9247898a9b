//! Limited-memory BFGS with box constraints.
//!
//! Follows Byrd, Lu, Nocedal and Zhu: each iteration finds the generalized
//! Cauchy point of the quadratic model along the projected steepest-descent
//! path, minimizes the model over the variables still free there, and runs a
//! strong-Wolfe line search along the resulting feasible direction. The
//! limited-memory matrix is kept in compact form `B = θI − W M Wᵀ`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LbfgsbError<E: std::error::Error + 'static> {
    #[error("objective failed: {0}")]
    Objective(#[source] E),
    #[error("objective is not finite at the starting point (value {value})")]
    NonFiniteStart { value: f64 },
    #[error("gradient has {got} entries, expected {expected}")]
    GradientLength { expected: usize, got: usize },
    #[error("bounds have {got} entries, expected {expected}")]
    BoundsLength { expected: usize, got: usize },
    #[error("lower bound {lower} exceeds upper bound {upper} at index {index}")]
    EmptyBox { index: usize, lower: f64, upper: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    /// Number of correction pairs kept.
    pub memory: usize,
    /// Objective evaluations allowed per line search.
    pub max_evaluations: usize,
    /// Stop when the projected gradient's ∞-norm falls to this value.
    pub gradient_tolerance: f64,
    /// Stop when `(f_k − f_{k+1}) / max(|f_k|, |f_{k+1}|, 1)` falls to this value.
    pub relative_decrease: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_evaluations: 20,
            gradient_tolerance: 1e-8,
            relative_decrease: 1e-12,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.memory == 0 {
            return Err("memory must be at least 1");
        }
        if self.max_evaluations == 0 {
            return Err("max_evaluations must be at least 1");
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err("line search requires 0 < c1 < c2 < 1");
        }
        if !(self.gradient_tolerance >= 0.0 && self.relative_decrease >= 0.0) {
            return Err("tolerances must be nonnegative");
        }
        Ok(())
    }
}

/// Box `lower ≤ x ≤ upper`; infinite entries leave a side unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn lower(lower: Vec<f64>) -> Self {
        let upper = vec![f64::INFINITY; lower.len()];
        Self { lower, upper }
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, &l), &u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(l, u);
        }
    }

    /// ∞-norm of `P(x − g) − x`.
    pub fn projected_gradient_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        let mut norm = 0.0f64;
        for i in 0..x.len() {
            let moved = (x[i] - g[i]).clamp(self.lower[i], self.upper[i]);
            norm = norm.max((moved - x[i]).abs());
        }
        norm
    }

    fn check<E: std::error::Error>(&self, n: usize) -> Result<(), LbfgsbError<E>> {
        for len in [self.lower.len(), self.upper.len()] {
            if len != n {
                return Err(LbfgsbError::BoundsLength { expected: n, got: len });
            }
        }
        for (index, (&lower, &upper)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lower <= upper) {
                return Err(LbfgsbError::EmptyBox { index, lower, upper });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    /// Iterate still improving.
    Running,
    /// Projected gradient below tolerance.
    GradientConverged,
    /// Relative decrease below tolerance.
    DecreaseConverged,
    /// No acceptable step even along steepest descent; the iterate is unchanged.
    LineSearchFailed,
}

impl Status {
    pub fn is_done(self) -> bool {
        self != Status::Running
    }
}

/// Result of one call to [`Lbfgsb::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub status: Status,
    pub value: f64,
    pub evaluations: usize,
}

/// Compact limited-memory representation.
struct Memory {
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    theta: f64,
    /// `SᵀY` and `SᵀS`, row-major over the stored pairs.
    sy: Vec<Vec<f64>>,
    ss: Vec<Vec<f64>>,
    /// Inverse of `[[−D, Lᵀ], [L, θ SᵀS]]`, order 2k.
    m: Vec<f64>,
}

impl Memory {
    fn new() -> Self {
        Self {
            s: VecDeque::new(),
            y: VecDeque::new(),
            theta: 1.0,
            sy: Vec::new(),
            ss: Vec::new(),
            m: Vec::new(),
        }
    }

    fn len(&self) -> usize {
        self.s.len()
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.theta = 1.0;
        self.sy.clear();
        self.ss.clear();
        self.m.clear();
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>, capacity: usize) -> bool {
        let sy = dot(&s, &y);
        let yy = dot(&y, &y);
        if !(sy > f64::EPSILON * yy) {
            return false;
        }
        if self.s.len() == capacity {
            self.s.pop_front();
            self.y.pop_front();
            self.sy.remove(0);
            self.ss.remove(0);
            for row in self.sy.iter_mut().chain(self.ss.iter_mut()) {
                row.remove(0);
            }
        }
        for (i, si) in self.s.iter().enumerate() {
            self.sy[i].push(dot(si, &y));
            self.ss[i].push(dot(si, &s));
        }
        let k = self.s.len();
        self.sy.push((0..k).map(|j| dot(&s, &self.y[j])).chain([sy]).collect());
        self.ss
            .push((0..k).map(|j| self.ss[j][k]).chain([dot(&s, &s)]).collect());
        self.s.push_back(s);
        self.y.push_back(y);
        self.theta = yy / sy;
        self.rebuild();
        true
    }

    fn rebuild(&mut self) {
        let k = self.len();
        let n2 = 2 * k;
        let mut a = vec![0.0; n2 * n2];
        for i in 0..k {
            for j in 0..k {
                let sy = self.sy[i][j];
                if i == j {
                    a[i * n2 + j] = -sy;
                } else if i > j {
                    // L block and its transpose
                    a[(k + i) * n2 + j] = sy;
                    a[j * n2 + k + i] = sy;
                }
                a[(k + i) * n2 + k + j] = self.theta * self.ss[i][j];
            }
        }
        self.m = invert(&a, n2).unwrap_or_else(|| vec![0.0; n2 * n2]);
    }

    /// Row `i` of `W = [Y, θS]`.
    fn w_row(&self, i: usize, out: &mut [f64]) {
        let k = self.len();
        for j in 0..k {
            out[j] = self.y[j][i];
            out[k + j] = self.theta * self.s[j][i];
        }
    }

    /// `Wᵀ v`.
    fn wt(&self, v: &[f64]) -> Vec<f64> {
        let k = self.len();
        let mut out = vec![0.0; 2 * k];
        for j in 0..k {
            out[j] = dot(&self.y[j], v);
            out[k + j] = self.theta * dot(&self.s[j], v);
        }
        out
    }

    fn m_mul(&self, v: &[f64]) -> Vec<f64> {
        let n2 = v.len();
        (0..n2)
            .map(|i| (0..n2).map(|j| self.m[i * n2 + j] * v[j]).sum())
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the sum vectorizes
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Gauss-Jordan inversion with partial pivoting of a row-major `n×n` matrix.
fn invert(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut work = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&p, &q| work[p * n + col].abs().total_cmp(&work[q * n + col].abs()))?;
        let p = work[pivot * n + col];
        if p.abs() < 1e-300 || !p.is_finite() {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                work.swap(pivot * n + j, col * n + j);
                inv.swap(pivot * n + j, col * n + j);
            }
        }
        for j in 0..n {
            work[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = work[r * n + col];
            if factor != 0.0 {
                for j in 0..n {
                    work[r * n + j] -= factor * work[col * n + j];
                    inv[r * n + j] -= factor * inv[col * n + j];
                }
            }
        }
    }
    Some(inv)
}

fn solve(a: &[f64], n: usize, b: &[f64]) -> Option<Vec<f64>> {
    let inv = invert(a, n)?;
    Some((0..n).map(|i| (0..n).map(|j| inv[i * n + j] * b[j]).sum()).collect())
}

#[derive(PartialEq)]
struct Breakpoint(f64, usize);

impl Eq for Breakpoint {}

impl PartialOrd for Breakpoint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Breakpoint {
    // reversed so that BinaryHeap pops the smallest time first
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

/// Stateful minimizer. Keeping the state outside a single call lets a driver
/// change the objective between iterations (calling [`Lbfgsb::refresh`]) and
/// drop curvature pairs with [`Lbfgsb::clear_memory`].
pub struct Lbfgsb {
    config: LbfgsConfig,
    bounds: Bounds,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    memory: Memory,
    iteration: usize,
}

type Evaluation = (f64, Vec<f64>);

impl Lbfgsb {
    /// Projects `x0` onto the box and evaluates the objective there.
    pub fn new<E, F>(
        mut objective: F,
        mut x0: Vec<f64>,
        bounds: Bounds,
        config: LbfgsConfig,
    ) -> Result<Self, LbfgsbError<E>>
    where
        E: std::error::Error + 'static,
        F: FnMut(&[f64]) -> Result<Evaluation, E>,
    {
        config.validate().map_err(LbfgsbError::InvalidConfig)?;
        bounds.check(x0.len())?;
        bounds.project(&mut x0);
        let (f, g) = evaluate(&mut objective, &x0)?;
        if !f.is_finite() {
            return Err(LbfgsbError::NonFiniteStart { value: f });
        }
        Ok(Self {
            config,
            bounds,
            x: x0,
            f,
            g,
            memory: Memory::new(),
            iteration: 0,
        })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn into_x(self) -> Vec<f64> {
        self.x
    }

    pub fn value(&self) -> f64 {
        self.f
    }

    pub fn gradient(&self) -> &[f64] {
        &self.g
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn memory_len(&self) -> usize {
        self.memory.len()
    }

    pub fn clear_memory(&mut self) {
        self.memory.clear();
    }

    pub fn projected_gradient_norm(&self) -> f64 {
        self.bounds.projected_gradient_norm(&self.x, &self.g)
    }

    /// Re-evaluates the current point, e.g. after the objective changed.
    pub fn refresh<E, F>(&mut self, mut objective: F) -> Result<f64, LbfgsbError<E>>
    where
        E: std::error::Error + 'static,
        F: FnMut(&[f64]) -> Result<Evaluation, E>,
    {
        let (f, g) = evaluate(&mut objective, &self.x)?;
        self.f = f;
        self.g = g;
        Ok(f)
    }

    /// One iteration: Cauchy point, subspace minimization, line search and
    /// memory update. On a line-search failure the memory is dropped and the
    /// step retried once along the projected steepest-descent path.
    pub fn step<E, F>(&mut self, mut objective: F) -> Result<StepReport, LbfgsbError<E>>
    where
        E: std::error::Error + 'static,
        F: FnMut(&[f64]) -> Result<Evaluation, E>,
    {
        let mut evaluations = 0;
        if self.projected_gradient_norm() <= self.config.gradient_tolerance {
            return Ok(self.report(Status::GradientConverged, evaluations));
        }
        let accepted = loop {
            if self.memory.len() == 0 {
                // no curvature information: scale the model so the Cauchy
                // step along the projected gradient has unit length
                self.memory.theta = dot(&self.g, &self.g).sqrt().max(f64::MIN_POSITIVE);
            }
            let direction = self.search_direction();
            let slope = dot(&direction, &self.g);
            let found = if slope < 0.0 {
                let (result, used) = self.line_search(&mut objective, &direction, slope)?;
                evaluations += used;
                result
            } else {
                None
            };
            match found {
                Some(step) => break Some(step),
                None if self.memory.len() > 0 => {
                    log::debug!("line search failed; retrying with cleared memory");
                    self.memory.clear();
                }
                None => break None,
            }
        };
        let Some((x_new, f_new, g_new)) = accepted else {
            return Ok(self.report(Status::LineSearchFailed, evaluations));
        };
        let s: Vec<f64> = x_new.iter().zip(&self.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&self.g).map(|(a, b)| a - b).collect();
        self.memory.push(s, y, self.config.memory);
        let f_old = self.f;
        self.x = x_new;
        self.f = f_new;
        self.g = g_new;
        self.iteration += 1;
        let scale = f_old.abs().max(f_new.abs()).max(1.0);
        let status = if self.projected_gradient_norm() <= self.config.gradient_tolerance {
            Status::GradientConverged
        } else if (f_old - f_new) / scale <= self.config.relative_decrease {
            Status::DecreaseConverged
        } else {
            Status::Running
        };
        Ok(self.report(status, evaluations))
    }

    fn report(&self, status: Status, evaluations: usize) -> StepReport {
        StepReport {
            status,
            value: self.f,
            evaluations,
        }
    }

    fn search_direction(&self) -> Vec<f64> {
        let (xc, c, free) = self.cauchy_point();
        let target = self.subspace_minimum(xc, &c, &free);
        target.iter().zip(&self.x).map(|(a, b)| a - b).collect()
    }

    /// Generalized Cauchy point. Returns the point, `c = Wᵀ(xc − x)` and the
    /// mask of variables not fixed at a bound.
    fn cauchy_point(&self) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let n = self.x.len();
        let k2 = 2 * self.memory.len();
        let theta = self.memory.theta;
        let (x, g) = (&self.x, &self.g);
        let mut xc = x.clone();
        let mut d = vec![0.0; n];
        let mut free = vec![true; n];
        let mut breakpoints = Vec::new();
        for i in 0..n {
            let t = if g[i] < 0.0 {
                (x[i] - self.bounds.upper[i]) / g[i]
            } else if g[i] > 0.0 {
                (x[i] - self.bounds.lower[i]) / g[i]
            } else {
                f64::INFINITY
            };
            if t == 0.0 {
                free[i] = false;
            } else {
                d[i] = -g[i];
                if t.is_finite() {
                    breakpoints.push(Breakpoint(t, i));
                }
            }
        }
        let mut heap = BinaryHeap::from(breakpoints);
        let mut p = self.memory.wt(&d);
        let mut c = vec![0.0; k2];
        let mut df = -dot(&d, &d);
        // M c and M p are carried along the path instead of recomputed
        let mut mp = self.memory.m_mul(&p);
        let mut mc = vec![0.0; k2];
        let mut ddf = -theta * df - dot(&p, &mp);
        let ddf_floor = f64::EPSILON * ddf;
        let mut dt_min = if ddf > 0.0 { -df / ddf } else { f64::INFINITY };
        let mut t_old = 0.0;
        let mut wb = vec![0.0; k2];
        while let Some(&Breakpoint(t, b)) = heap.peek() {
            let dt = t - t_old;
            if dt_min < dt {
                break;
            }
            heap.pop();
            xc[b] = if d[b] > 0.0 {
                self.bounds.upper[b]
            } else {
                self.bounds.lower[b]
            };
            let zb = xc[b] - x[b];
            for (ci, pi) in c.iter_mut().zip(&p) {
                *ci += dt * pi;
            }
            axpy(dt, &mp, &mut mc);
            self.memory.w_row(b, &mut wb);
            let mw = self.memory.m_mul(&wb);
            let gb = g[b];
            df += dt * ddf + gb * gb + theta * gb * zb - gb * dot(&wb, &mc);
            ddf += -theta * gb * gb - 2.0 * gb * dot(&wb, &mp) - gb * gb * dot(&wb, &mw);
            ddf = ddf.max(ddf_floor);
            for (pi, wi) in p.iter_mut().zip(&wb) {
                *pi += gb * wi;
            }
            axpy(gb, &mw, &mut mp);
            d[b] = 0.0;
            free[b] = false;
            t_old = t;
            dt_min = if ddf > 0.0 { -df / ddf } else { f64::INFINITY };
        }
        if !dt_min.is_finite() {
            // unbounded model along the path with no breakpoint left
            dt_min = 0.0;
        }
        let dt_min = dt_min.max(0.0);
        let t_final = t_old + dt_min;
        for i in 0..n {
            if d[i] != 0.0 {
                xc[i] = (x[i] + t_final * d[i]).clamp(self.bounds.lower[i], self.bounds.upper[i]);
            }
        }
        for (ci, pi) in c.iter_mut().zip(&p) {
            *ci += dt_min * pi;
        }
        (xc, c, free)
    }

    /// Minimizes the model over the free variables starting at the Cauchy
    /// point, then backs the step off so the result stays in the box.
    fn subspace_minimum(&self, mut xc: Vec<f64>, c: &[f64], free: &[bool]) -> Vec<f64> {
        let k = self.memory.len();
        let k2 = 2 * k;
        let theta = self.memory.theta;
        let idx: Vec<usize> = (0..xc.len()).filter(|&i| free[i]).collect();
        if idx.is_empty() {
            return xc;
        }
        // reduced gradient r = Zᵀ(g + θ(xc − x) − W M c), built from the free
        // rows of W gathered column by column
        let mc = self.memory.m_mul(c);
        let cols: Vec<Vec<f64>> = (0..k2)
            .map(|a| {
                let (src, scale) = if a < k {
                    (&self.memory.y[a], 1.0)
                } else {
                    (&self.memory.s[a - k], theta)
                };
                idx.iter().map(|&i| scale * src[i]).collect()
            })
            .collect();
        let mut r: Vec<f64> = idx.iter().map(|&i| self.g[i] + theta * (xc[i] - self.x[i])).collect();
        for (col, &m) in cols.iter().zip(&mc) {
            axpy(-m, col, &mut r);
        }
        let wtr: Vec<f64> = cols.iter().map(|col| dot(col, &r)).collect();
        // blocked so each chunk of every column stays in cache
        let mut wtw = vec![0.0; k2 * k2];
        for start in (0..idx.len()).step_by(2048) {
            let end = (start + 2048).min(idx.len());
            for a in 0..k2 {
                for b in a..k2 {
                    wtw[a * k2 + b] += dot(&cols[a][start..end], &cols[b][start..end]);
                }
            }
        }
        for a in 0..k2 {
            for b in 0..a {
                wtw[a * k2 + b] = wtw[b * k2 + a];
            }
        }
        // du = −(r/θ + W_F N⁻¹ W_Fᵀ r / θ²), N = M⁻¹ − W_FᵀW_F / θ
        let correction = if k > 0 {
            let m_inv = invert(&self.memory.m, k2);
            m_inv.and_then(|m_inv| {
                let n_mat: Vec<f64> = m_inv.iter().zip(&wtw).map(|(a, b)| a - b / theta).collect();
                solve(&n_mat, k2, &wtr)
            })
        } else {
            None
        };
        let mut du: Vec<f64> = r.iter().map(|ri| -ri / theta).collect();
        if let Some(v) = correction {
            for (col, &vi) in cols.iter().zip(&v) {
                axpy(-vi / (theta * theta), col, &mut du);
            }
        }
        let mut alpha = 1.0f64;
        for (j, &i) in idx.iter().enumerate() {
            let step = du[j];
            if step < 0.0 {
                let room = self.bounds.lower[i] - xc[i];
                if alpha * step < room {
                    alpha = (room / step).max(0.0);
                }
            } else if step > 0.0 {
                let room = self.bounds.upper[i] - xc[i];
                if alpha * step > room {
                    alpha = (room / step).max(0.0);
                }
            }
        }
        for (j, &i) in idx.iter().enumerate() {
            xc[i] = (xc[i] + alpha * du[j]).clamp(self.bounds.lower[i], self.bounds.upper[i]);
        }
        xc
    }

    /// Largest step along `d` that stays in the box.
    fn max_step(&self, d: &[f64]) -> f64 {
        let mut limit = f64::INFINITY;
        for i in 0..d.len() {
            if d[i] < 0.0 && self.bounds.lower[i].is_finite() {
                limit = limit.min((self.bounds.lower[i] - self.x[i]) / d[i]);
            } else if d[i] > 0.0 && self.bounds.upper[i].is_finite() {
                limit = limit.min((self.bounds.upper[i] - self.x[i]) / d[i]);
            }
        }
        limit.max(0.0)
    }

    /// Strong-Wolfe search with cubic-interpolation zoom. Returns the
    /// accepted point or `None`, plus the evaluation count.
    #[allow(clippy::type_complexity)]
    fn line_search<E, F>(
        &self,
        objective: &mut F,
        d: &[f64],
        slope0: f64,
    ) -> Result<(Option<(Vec<f64>, f64, Vec<f64>)>, usize), LbfgsbError<E>>
    where
        E: std::error::Error + 'static,
        F: FnMut(&[f64]) -> Result<Evaluation, E>,
    {
        let (c1, c2) = (self.config.c1, self.config.c2);
        let f0 = self.f;
        // trial points are projected onto the box, so without curvature pairs
        // the search may follow the projected path past the first bound
        let stpmax = if self.memory.len() == 0 {
            f64::INFINITY
        } else {
            self.max_step(d)
        };
        if stpmax <= 0.0 {
            return Ok((None, 0));
        }
        // without curvature pairs the direction carries no scale: try a unit-length step
        let mut alpha = if self.memory.len() == 0 {
            (1.0 / dot(d, d).sqrt()).min(stpmax)
        } else {
            1.0f64.min(stpmax)
        };
        let mut used = 0;
        let mut trial = |alpha: f64, used: &mut usize| -> Result<Trial, LbfgsbError<E>> {
            let mut x: Vec<f64> = self.x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
            self.bounds.project(&mut x);
            let (f, g) = evaluate(objective, &x)?;
            *used += 1;
            let f = if f.is_finite() { f } else { f64::INFINITY };
            let slope = dot(&g, d);
            Ok(Trial { alpha, f, slope, x, g })
        };
        let sufficient = |t: &Trial| t.f <= f0 + c1 * t.alpha * slope0;
        let curvature = |t: &Trial| t.slope.abs() <= -c2 * slope0;

        let mut prev = Trial {
            alpha: 0.0,
            f: f0,
            slope: slope0,
            x: Vec::new(),
            g: Vec::new(),
        };
        let (mut lo, mut hi);
        loop {
            let cur = trial(alpha, &mut used)?;
            if !sufficient(&cur) || (used > 1 && cur.f >= prev.f) {
                lo = prev;
                hi = cur;
                break;
            }
            if curvature(&cur) || cur.alpha >= stpmax {
                return Ok((Some((cur.x, cur.f, cur.g)), used));
            }
            if cur.slope >= 0.0 {
                lo = cur;
                hi = prev;
                break;
            }
            if used >= self.config.max_evaluations {
                // sufficient decrease holds; accept rather than discard progress
                return Ok((Some((cur.x, cur.f, cur.g)), used));
            }
            alpha = (4.0 * cur.alpha).min(stpmax);
            prev = cur;
        }
        // zoom: lo satisfies sufficient decrease and has the lower value
        while used < self.config.max_evaluations {
            let width = (hi.alpha - lo.alpha).abs();
            if width <= f64::EPSILON * lo.alpha.abs().max(hi.alpha.abs()) {
                break;
            }
            let (a, b) = if lo.alpha < hi.alpha {
                (lo.alpha, hi.alpha)
            } else {
                (hi.alpha, lo.alpha)
            };
            let guess = cubic_minimizer(&lo, &hi);
            let margin = 0.1 * (b - a);
            let alpha = match guess {
                Some(v) if v >= a + margin && v <= b - margin => v,
                _ => 0.5 * (a + b),
            };
            let cur = trial(alpha, &mut used)?;
            if !sufficient(&cur) || cur.f >= lo.f {
                hi = cur;
            } else {
                if curvature(&cur) {
                    return Ok((Some((cur.x, cur.f, cur.g)), used));
                }
                if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = std::mem::replace(&mut lo, cur);
                } else {
                    lo = cur;
                }
            }
        }
        // out of evaluations: fall back to the best point with sufficient decrease
        if lo.alpha > 0.0 && lo.f < f0 {
            return Ok((Some((lo.x, lo.f, lo.g)), used));
        }
        Ok((None, used))
    }
}

struct Trial {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

/// Minimizer of the cubic interpolating values and slopes at two points.
fn cubic_minimizer(p: &Trial, q: &Trial) -> Option<f64> {
    if !(p.f.is_finite() && q.f.is_finite()) {
        return None;
    }
    let d1 = p.slope + q.slope - 3.0 * (p.f - q.f) / (p.alpha - q.alpha);
    let disc = d1 * d1 - p.slope * q.slope;
    if disc < 0.0 {
        return None;
    }
    let d2 = (q.alpha - p.alpha).signum() * disc.sqrt();
    let denom = q.slope - p.slope + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let v = q.alpha - (q.alpha - p.alpha) * (q.slope + d2 - d1) / denom;
    v.is_finite().then_some(v)
}

fn evaluate<E, F>(objective: &mut F, x: &[f64]) -> Result<Evaluation, LbfgsbError<E>>
where
    E: std::error::Error + 'static,
    F: FnMut(&[f64]) -> Result<Evaluation, E>,
{
    let (f, g) = objective(x).map_err(LbfgsbError::Objective)?;
    if g.len() != x.len() {
        return Err(LbfgsbError::GradientLength {
            expected: x.len(),
            got: g.len(),
        });
    }
    Ok((f, g))
}

/// Outcome of [`lbfgsb_minimize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    /// Objective at the start and after each accepted step.
    pub trace: Vec<f64>,
    pub status: Status,
    pub iterations: usize,
}

/// Minimizes `objective` over `x ≥ lower` for at most `max_iterations`
/// iterations.
pub fn lbfgsb_minimize<E, F>(
    mut objective: F,
    x0: Vec<f64>,
    lower: Vec<f64>,
    config: LbfgsConfig,
    max_iterations: usize,
) -> Result<Minimum, LbfgsbError<E>>
where
    E: std::error::Error + 'static,
    F: FnMut(&[f64]) -> Result<Evaluation, E>,
{
    minimize_in_box(&mut objective, x0, Bounds::lower(lower), config, max_iterations)
}

/// Like [`lbfgsb_minimize`] with lower and upper bounds.
pub fn minimize_in_box<E, F>(
    mut objective: F,
    x0: Vec<f64>,
    bounds: Bounds,
    config: LbfgsConfig,
    max_iterations: usize,
) -> Result<Minimum, LbfgsbError<E>>
where
    E: std::error::Error + 'static,
    F: FnMut(&[f64]) -> Result<Evaluation, E>,
{
    let mut solver = Lbfgsb::new(&mut objective, x0, bounds, config)?;
    let mut trace = vec![solver.value()];
    let mut status = Status::Running;
    if solver.projected_gradient_norm() <= config.gradient_tolerance {
        status = Status::GradientConverged;
    }
    while !status.is_done() && solver.iteration() < max_iterations {
        let report = solver.step(&mut objective)?;
        status = report.status;
        if status != Status::LineSearchFailed && !matches!(status, Status::GradientConverged if report.evaluations == 0)
        {
            trace.push(report.value);
        }
    }
    Ok(Minimum {
        value: solver.value(),
        iterations: solver.iteration(),
        status,
        trace,
        x: solver.into_x(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::convert::Infallible;

    fn quadratic(a: &[f64]) -> impl FnMut(&[f64]) -> Result<Evaluation, Infallible> + '_ {
        move |x: &[f64]| {
            let f = x.iter().zip(a).map(|(xi, ai)| (xi - ai).powi(2)).sum();
            let g = x.iter().zip(a).map(|(xi, ai)| 2.0 * (xi - ai)).collect();
            Ok((f, g))
        }
    }

    fn rosenbrock(x: &[f64]) -> Result<Evaluation, Infallible> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    fn assert_non_increasing(trace: &[f64]) {
        for w in trace.windows(2) {
            assert!(w[1] <= w[0], "trace increased: {w:?}");
        }
    }

    #[test]
    fn interior_quadratic_minimum() {
        let a = [1.0, 2.0, 3.0];
        let m = lbfgsb_minimize(quadratic(&a), vec![0.0; 3], vec![0.0; 3], LbfgsConfig::default(), 10).unwrap();
        for (x, a) in m.x.iter().zip(a) {
            assert!((x - a).abs() < 1e-6);
        }
        assert!(m.iterations <= 10);
        assert!(m.status.is_done());
        assert_non_increasing(&m.trace);
    }

    #[test]
    fn active_bound_quadratic() {
        let a = [-1.0, 2.0];
        let m = lbfgsb_minimize(quadratic(&a), vec![0.5, 0.5], vec![0.0; 2], LbfgsConfig::default(), 50).unwrap();
        assert!(m.x[0].abs() < 1e-6);
        assert!((m.x[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn rosenbrock_from_half() {
        let m = lbfgsb_minimize(rosenbrock, vec![0.5, 0.5], vec![0.0; 2], LbfgsConfig::default(), 200).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{:?}", m.x);
        assert_non_increasing(&m.trace);
    }

    #[test]
    fn rosenbrock_with_binding_upper_bound() {
        // minimum of (1-a)^2 + 100 (b - a^2)^2 with a ≤ 0.5 lies at a = 0.5, b = 0.25
        let bounds = Bounds {
            lower: vec![f64::NEG_INFINITY; 2],
            upper: vec![0.5, f64::INFINITY],
        };
        let m = minimize_in_box(rosenbrock, vec![-1.2, 1.0], bounds, LbfgsConfig::default(), 200).unwrap();
        assert!((m.x[0] - 0.5).abs() < 1e-6 && (m.x[1] - 0.25).abs() < 1e-6, "{:?}", m.x);
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let scales: Vec<f64> = (0..50).map(|i| 10f64.powf(i as f64 / 24.0)).collect();
        let objective = |x: &[f64]| -> Result<Evaluation, Infallible> {
            let f = x.iter().zip(&scales).map(|(xi, s)| s * (xi - 1.0).powi(2)).sum();
            let g = x.iter().zip(&scales).map(|(xi, s)| 2.0 * s * (xi - 1.0)).collect();
            Ok((f, g))
        };
        let lower: Vec<f64> = (0..50)
            .map(|i| if i % 3 == 0 { 1.5 } else { f64::NEG_INFINITY })
            .collect();
        let config = LbfgsConfig {
            relative_decrease: 0.0,
            ..Default::default()
        };
        let m = lbfgsb_minimize(objective, vec![2.0; 50], lower, config, 500).unwrap();
        assert!(matches!(
            m.status,
            Status::GradientConverged | Status::DecreaseConverged
        ));
        for (i, x) in m.x.iter().enumerate() {
            let expected = if i % 3 == 0 { 1.5 } else { 1.0 };
            assert!((x - expected).abs() < 1e-6, "x[{i}] = {x}");
        }
        assert_non_increasing(&m.trace);
    }

    #[test]
    fn start_outside_box_is_projected() {
        let a = [1.0, 2.0, 3.0];
        let m = lbfgsb_minimize(quadratic(&a), vec![-5.0; 3], vec![0.0; 3], LbfgsConfig::default(), 20).unwrap();
        assert!(m.trace[0] == 14.0);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let objective = |x: &[f64]| -> Result<Evaluation, Infallible> { Ok((f64::NAN, vec![0.0; x.len()])) };
        assert!(matches!(
            lbfgsb_minimize(objective, vec![0.0], vec![0.0], LbfgsConfig::default(), 5),
            Err(LbfgsbError::NonFiniteStart { .. })
        ));
    }

    #[test]
    fn objective_errors_propagate() {
        #[derive(Debug, thiserror::Error)]
        #[error("boom")]
        struct Boom;
        let objective = |_: &[f64]| -> Result<Evaluation, Boom> { Err(Boom) };
        assert!(matches!(
            lbfgsb_minimize(objective, vec![0.0], vec![0.0], LbfgsConfig::default(), 5),
            Err(LbfgsbError::Objective(Boom))
        ));
    }

    #[test]
    fn wrong_gradient_reports_line_search_failure() {
        // gradient with the wrong sign: no step satisfies sufficient decrease
        let objective = |x: &[f64]| -> Result<Evaluation, Infallible> { Ok((x[0] * x[0], vec![-2.0 * x[0] - 1.0])) };
        let m = lbfgsb_minimize(objective, vec![1.0], vec![f64::NEG_INFINITY], LbfgsConfig::default(), 5).unwrap();
        assert_eq!(m.status, Status::LineSearchFailed);
        assert_eq!(m.x, vec![1.0]);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let a = [1.0];
        assert!(matches!(
            lbfgsb_minimize(quadratic(&a), vec![0.0], vec![0.0, 0.0], LbfgsConfig::default(), 5),
            Err(LbfgsbError::BoundsLength { .. })
        ));
        let config = LbfgsConfig {
            c1: 0.95,
            ..Default::default()
        };
        assert!(matches!(
            lbfgsb_minimize(quadratic(&a), vec![0.0], vec![0.0], config, 5),
            Err(LbfgsbError::InvalidConfig(_))
        ));
        let bounds = Bounds {
            lower: vec![1.0],
            upper: vec![0.0],
        };
        assert!(matches!(
            minimize_in_box(quadratic(&a), vec![0.0], bounds, LbfgsConfig::default(), 5),
            Err(LbfgsbError::EmptyBox { .. })
        ));
    }

    #[test]
    fn stateful_refresh_and_clear() {
        let a = [1.0, 2.0];
        let mut solver = Lbfgsb::new(
            quadratic(&a),
            vec![0.0; 2],
            Bounds::lower(vec![0.0; 2]),
            LbfgsConfig::default(),
        )
        .unwrap();
        solver.step(quadratic(&a)).unwrap();
        assert!(solver.memory_len() > 0);
        solver.clear_memory();
        assert_eq!(solver.memory_len(), 0);
        let b = [3.0, 3.0];
        let v = solver.refresh(quadratic(&b)).unwrap();
        assert_eq!(v, solver.value());
        for _ in 0..20 {
            if solver.step(quadratic(&b)).unwrap().status.is_done() {
                break;
            }
        }
        assert!((solver.x()[0] - 3.0).abs() < 1e-6 && (solver.x()[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn inversion_matches_identity() {
        let a = vec![4.0, 1.0, 2.0, 1.0, 3.0, 0.5, 2.0, 0.5, 5.0];
        let inv = invert(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert!(invert(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projected_quadratic_minimum(
            a in prop::collection::vec(-5.0f64..5.0, 1..8),
            w in prop::collection::vec(0.1f64..10.0, 8),
            x0 in prop::collection::vec(0.0f64..5.0, 8),
        ) {
            let n = a.len();
            let objective = |x: &[f64]| -> Result<Evaluation, Infallible> {
                let f = (0..n).map(|i| w[i] * (x[i] - a[i]).powi(2)).sum();
                let g = (0..n).map(|i| 2.0 * w[i] * (x[i] - a[i])).collect();
                Ok((f, g))
            };
            let config = LbfgsConfig { relative_decrease: 0.0, ..Default::default() };
            let m = lbfgsb_minimize(objective, x0[..n].to_vec(), vec![0.0; n], config, 200).unwrap();
            for i in 0..n {
                prop_assert!(m.x[i] >= 0.0);
                prop_assert!((m.x[i] - a[i].max(0.0)).abs() < 1e-6);
            }
            for pair in m.trace.windows(2) {
                prop_assert!(pair[1] <= pair[0]);
            }
        }
    }
}
