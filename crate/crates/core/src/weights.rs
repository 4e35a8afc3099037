//! Face-degree weight sequences and everything derived from them: the two
//! generating series, the admissibility fixed point, criticality
//! classification through the 3x3 mean matrix, and the four offspring laws
//! driving the tree sampler.

use std::collections::BTreeMap;
use std::fmt;

use num_traits::ToPrimitive;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combinatorics::{binomial, sample_interleaving, type3_vector_count, type4_vector_count};

/// Hard cap on fixed-point iterations before declaring failure.
const PICARD_ITERS: usize = 400;
const NEWTON_ITERS: usize = 200;
const POWER_ITER_CAP: usize = 200_000;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("weight sequence is not admissible: {0}")]
    NotAdmissible(String),
    #[error("series diverges at ({x}, {y})")]
    DivergentSeries { x: f64, y: f64 },
    #[error("power iteration did not converge within {0} iterations")]
    NonConvergence(usize),
    #[error("weight sequence is not critical (classification {0})")]
    NotCritical(Classification),
    #[error("invalid weight sequence: {0}")]
    InvalidWeights(String),
    #[error("bad weight config: {0}")]
    BadConfig(String),
}

/// How the sequence continues past the explicitly listed degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupportKind {
    /// Zero outside the listed degrees.
    Finite,
    /// Past the largest listed degree d0, q_d = q_{d0} * rate^(d - d0).
    GeometricTail { rate: f64 },
}

/// The face-degree weights q = (q_i), i >= 1, sparse over the listed degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSequence {
    entries: BTreeMap<u32, f64>,
    support: SupportKind,
    max_listed: u32,
}

/// On-disk shape: `{"q": {"4": 0.0833}, "support": "finite"}`.
#[derive(Serialize, Deserialize)]
struct WeightConfig {
    q: BTreeMap<String, f64>,
    support: SupportKind,
}

impl WeightSequence {
    pub fn new(entries: BTreeMap<u32, f64>, support: SupportKind) -> Result<Self, WeightsError> {
        if entries.is_empty() {
            return Err(WeightsError::InvalidWeights("no weights listed".into()));
        }
        for (&d, &q) in &entries {
            if d == 0 {
                return Err(WeightsError::InvalidWeights("degree 0 is not a face degree".into()));
            }
            if !(q >= 0.0) || !q.is_finite() {
                return Err(WeightsError::InvalidWeights(format!("q_{d} = {q} is not a nonnegative real")));
            }
        }
        if entries.values().all(|&q| q == 0.0) {
            return Err(WeightsError::InvalidWeights("all weights are zero".into()));
        }
        if let SupportKind::GeometricTail { rate } = support {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(WeightsError::InvalidWeights(format!("tail rate {rate} outside (0,1)")));
            }
        }
        let max_listed = *entries.keys().max().unwrap();
        Ok(Self { entries, support, max_listed })
    }

    /// Single positive weight at one degree, the usual fixture shape.
    pub fn monomial(degree: u32, q: f64) -> Result<Self, WeightsError> {
        Self::new(BTreeMap::from([(degree, q)]), SupportKind::Finite)
    }

    pub fn support(&self) -> SupportKind {
        self.support
    }

    pub fn entries(&self) -> &BTreeMap<u32, f64> {
        &self.entries
    }

    /// q_d, including the geometric extension when applicable.
    pub fn weight(&self, degree: u32) -> f64 {
        if degree == 0 {
            return 0.0;
        }
        if let Some(&q) = self.entries.get(&degree) {
            return q;
        }
        match self.support {
            SupportKind::Finite => 0.0,
            SupportKind::GeometricTail { rate } => {
                if degree > self.max_listed {
                    self.entries[&self.max_listed] * rate.powi((degree - self.max_listed) as i32)
                } else {
                    0.0
                }
            }
        }
    }

    /// True when some odd degree carries positive weight; when false the
    /// diamond series vanishes identically and Z_diamond = 0.
    pub fn has_odd_support(&self) -> bool {
        match self.support {
            SupportKind::GeometricTail { .. } => true,
            SupportKind::Finite => self.entries.iter().any(|(&d, &q)| d % 2 == 1 && q > 0.0),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, WeightsError> {
        let cfg: WeightConfig =
            serde_json::from_str(text).map_err(|e| WeightsError::BadConfig(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for (key, value) in cfg.q {
            let degree: u32 = key
                .parse()
                .map_err(|_| WeightsError::BadConfig(format!("degree key {key:?} is not an integer")))?;
            entries.insert(degree, value);
        }
        Self::new(entries, cfg.support)
    }

    pub fn to_json(&self) -> String {
        let cfg = WeightConfig {
            q: self.entries.iter().map(|(d, q)| (d.to_string(), *q)).collect(),
            support: self.support,
        };
        serde_json::to_string_pretty(&cfg).unwrap()
    }
}

/// Which of the two generating series, distinguished by the tree type whose
/// offspring it weights: type-3 nodes correspond to faces of degree
/// 2k+k'+2, type-4 nodes to faces of degree 2k+k'+1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    Type3,
    Type4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SeriesMode {
    Value,
    Dx,
    Dy,
    Dxx,
}

fn shell_coefficient(kind: SeriesKind, k: u64, kp: u64) -> f64 {
    let count = match kind {
        SeriesKind::Type3 => type3_vector_count(k, kp),
        SeriesKind::Type4 => type4_vector_count(k, kp),
    };
    (count * binomial(k + kp, k)).to_f64().unwrap_or(f64::INFINITY)
}

impl WeightSequence {
    fn degree_for(&self, kind: SeriesKind, s: u64) -> u32 {
        match kind {
            SeriesKind::Type3 => (s + 2) as u32,
            SeriesKind::Type4 => (s + 1) as u32,
        }
    }

    fn shell_sum(&self, kind: SeriesKind, mode: SeriesMode, s: u64, x: f64, y: f64) -> f64 {
        let q = self.weight(self.degree_for(kind, s));
        if q == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        let mut k = 0;
        while 2 * k <= s {
            let kp = s - 2 * k;
            let coeff = shell_coefficient(kind, k, kp) * q;
            let term = match mode {
                SeriesMode::Value => coeff * x.powi(k as i32) * y.powi(kp as i32),
                SeriesMode::Dx => {
                    if k == 0 {
                        0.0
                    } else {
                        coeff * k as f64 * x.powi(k as i32 - 1) * y.powi(kp as i32)
                    }
                }
                SeriesMode::Dy => {
                    if kp == 0 {
                        0.0
                    } else {
                        coeff * kp as f64 * x.powi(k as i32) * y.powi(kp as i32 - 1)
                    }
                }
                SeriesMode::Dxx => {
                    if k < 2 {
                        0.0
                    } else {
                        coeff * (k * (k - 1)) as f64 * x.powi(k as i32 - 2) * y.powi(kp as i32)
                    }
                }
            };
            acc += term;
            k += 1;
        }
        acc
    }

    fn eval_mode(&self, kind: SeriesKind, mode: SeriesMode, x: f64, y: f64) -> Result<f64, WeightsError> {
        assert!(x >= 0.0 && y >= 0.0, "series arguments must be nonnegative");
        match self.support {
            SupportKind::Finite => {
                let mut acc = 0.0;
                let mut s = 0u64;
                while self.degree_for(kind, s) <= self.max_listed {
                    acc += self.shell_sum(kind, mode, s, x, y);
                    s += 1;
                }
                Ok(acc)
            }
            SupportKind::GeometricTail { rate } => {
                // Explicit shells first, then certified geometric tail.
                // Each term is bounded by 2 * (8x r^2)^k * (4y r)^k' * A, so the
                // tail past shell S is at most 2A * sum_{j>=S} (j+1) m^j with
                // m = max(sqrt(8x r^2), 4y r); declared divergent when m >= 1.
                let mut acc = 0.0;
                let mut s = 0u64;
                while self.degree_for(kind, s) <= self.max_listed {
                    acc += self.shell_sum(kind, mode, s, x, y);
                    s += 1;
                }
                let a = 8.0 * x * rate * rate;
                let b = 4.0 * y * rate;
                let m = a.sqrt().max(b);
                if m >= 1.0 {
                    return Err(WeightsError::DivergentSeries { x, y });
                }
                let amp = self.entries[&self.max_listed].max(1e-300);
                // derivative modes pick up a factor of at most s+1 per term
                // and shed one power of the differentiated variable
                let deriv_fudge = |s: u64| match mode {
                    SeriesMode::Value => 1.0,
                    SeriesMode::Dx => (s as f64 + 1.0) / x.min(1.0).max(1e-12),
                    SeriesMode::Dy => (s as f64 + 1.0) / y.min(1.0).max(1e-12),
                    SeriesMode::Dxx => ((s * s) as f64 + 1.0) / (x * x).min(1.0).max(1e-12),
                };
                loop {
                    let shell = self.shell_sum(kind, mode, s, x, y);
                    acc += shell;
                    s += 1;
                    let tail_bound = {
                        let ms = m.powi(s as i32);
                        2.0 * amp * ms * ((s as f64 + 1.0) * (1.0 - m) + m) / ((1.0 - m) * (1.0 - m))
                    };
                    if tail_bound * deriv_fudge(s) <= 1e-16 * acc.abs().max(1e-30) {
                        return Ok(acc);
                    }
                    if s > 4000 {
                        return Err(WeightsError::DivergentSeries { x, y });
                    }
                }
            }
        }
    }

    /// Evaluates the generating series at (x, y) >= 0, with a certified tail
    /// bound for geometric-tail supports.
    pub fn eval_series(&self, kind: SeriesKind, x: f64, y: f64) -> Result<f64, WeightsError> {
        self.eval_mode(kind, SeriesMode::Value, x, y)
    }

    pub fn eval_series_dx(&self, kind: SeriesKind, x: f64, y: f64) -> Result<f64, WeightsError> {
        self.eval_mode(kind, SeriesMode::Dx, x, y)
    }

    pub fn eval_series_dy(&self, kind: SeriesKind, x: f64, y: f64) -> Result<f64, WeightsError> {
        self.eval_mode(kind, SeriesMode::Dy, x, y)
    }
}

/// Outcome of the admissibility / criticality analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    NotAdmissible,
    AdmissibleSubcritical,
    Critical,
    RegularCritical,
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Classification::NotAdmissible => "not-admissible",
            Classification::AdmissibleSubcritical => "admissible-subcritical",
            Classification::Critical => "critical",
            Classification::RegularCritical => "regular-critical",
        };
        f.write_str(s)
    }
}

/// Fixed point, mean matrix and classification for a weight sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalityReport {
    pub z_plus: f64,
    pub z_diamond: f64,
    /// Z = (Z_diamond)^2 + 2 Z_plus - 1, stored exactly as this combination.
    pub z_total: f64,
    /// Total rooted-map partition function; finite but with no computation
    /// route, so never populated.
    pub z_rooted: Option<f64>,
    pub matrix: [[f64; 3]; 3],
    #[serde(rename = "rho")]
    pub spectral_radius: f64,
    pub classification: Classification,
    pub residual: f64,
}

/// Options for `solve_fixed_point`; `Default` matches the documented knobs.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Residual tolerance for accepting the fixed point.
    pub tol: f64,
    /// |rho - 1| <= this declares criticality.
    pub criticality_tol: f64,
    /// Offset used by the regular-criticality finiteness probe.
    pub epsilon: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-12, criticality_tol: 1e-6, epsilon: 1e-3 }
    }
}

/// Spectral radius of a nonnegative square matrix by power iteration.
///
/// Iterates on M + I so periodic dominant blocks (the bipartite 1->3->1
/// cycle) cannot stall the ratio; deterministic for a given matrix.
pub fn spectral_radius(rows: &[Vec<f64>]) -> Result<f64, WeightsError> {
    let n = rows.len();
    assert!(n > 0 && rows.iter().all(|r| r.len() == n), "square matrix required");
    let mut v = vec![1.0f64; n];
    let mut lambda_prev = f64::NAN;
    for it in 0..POWER_ITER_CAP {
        let mut w = vec![0.0f64; n];
        for i in 0..n {
            let mut acc = v[i]; // the +I shift
            for j in 0..n {
                acc += rows[i][j] * v[j];
            }
            w[i] = acc;
        }
        let norm = w.iter().fold(0.0f64, |m, &x| m.max(x));
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(WeightsError::NonConvergence(it));
        }
        for x in &mut w {
            *x /= norm;
        }
        if (norm - lambda_prev).abs() <= 1e-12 * norm.max(1.0) && it > 4 {
            return Ok(norm - 1.0);
        }
        lambda_prev = norm;
        v = w;
    }
    Err(WeightsError::NonConvergence(POWER_ITER_CAP))
}

fn build_matrix(weights: &WeightSequence, z: f64, w: f64) -> Result<[[f64; 3]; 3], WeightsError> {
    let mut m = [[0.0; 3]; 3];
    m[0][2] = z - 1.0;
    let dx3 = weights.eval_series_dx(SeriesKind::Type3, z, w)?;
    let dy3 = weights.eval_series_dy(SeriesKind::Type3, z, w)?;
    m[2][0] = z * z / (z - 1.0) * dx3;
    m[2][1] = z * w / (z - 1.0) * dy3;
    if weights.has_odd_support() {
        // w > 0 whenever any odd degree has positive weight
        let dx4 = weights.eval_series_dx(SeriesKind::Type4, z, w)?;
        let dy4 = weights.eval_series_dy(SeriesKind::Type4, z, w)?;
        m[1][0] = z / w * dx4;
        m[1][1] = dy4;
    }
    Ok(m)
}

/// Solves the admissibility system
///   (z-1)/z = f3(z, w),   w = f4(z, w)
/// by monotone Picard iteration from (1, 0) with a Newton polish, builds the
/// mean matrix, and classifies the sequence.
///
/// The Picard map is monotone in both coordinates, so starting from (1, 0)
/// the iterates increase toward the smallest solution whenever one exists and
/// blow past f3 = 1 otherwise; Newton keeps linear convergence even at the
/// tangency that criticality creates.
pub fn solve_fixed_point(weights: &WeightSequence, opts: SolveOptions) -> Result<CriticalityReport, WeightsError> {
    let diverged = |z: f64, w: f64| {
        WeightsError::NotAdmissible(format!("fixed-point iteration escaped near z={z:.6}, w={w:.6}"))
    };
    let mut z = 1.0f64;
    let mut w = 0.0f64;
    for _ in 0..PICARD_ITERS {
        let f3 = weights.eval_series(SeriesKind::Type3, z, w).map_err(|_| diverged(z, w))?;
        let f4 = weights.eval_series(SeriesKind::Type4, z, w).map_err(|_| diverged(z, w))?;
        if f3 >= 1.0 - 1e-14 || !f3.is_finite() || !f4.is_finite() || z > 1e12 || w > 1e12 {
            return Err(diverged(z, w));
        }
        let zn = 1.0 / (1.0 - f3);
        let wn = f4;
        if (zn - z).abs() <= 1e-14 * zn.max(1.0) && (wn - w).abs() <= 1e-14 * wn.max(1.0) {
            z = zn;
            w = wn;
            break;
        }
        z = zn;
        w = wn;
    }

    // Newton polish, stopping on step size because residuals vanish
    // quadratically at a critical tangency. Without odd weights the second
    // equation is identically 0 = 0 and h(z) = 1 - 1/z - f3(z, 0) is
    // strictly concave, so the admissibility trichotomy is read off the
    // maximum of h: a tangency there is the critical double root, which a
    // direct root Newton cannot resolve past the f64 cancellation floor.
    if !weights.has_odd_support() {
        w = 0.0;
        let h = |z: f64| -> Result<f64, WeightsError> {
            Ok(1.0 - 1.0 / z - weights.eval_series(SeriesKind::Type3, z, 0.0)?)
        };
        let h1 = |z: f64| -> Result<f64, WeightsError> {
            Ok(1.0 / (z * z) - weights.eval_mode(SeriesKind::Type3, SeriesMode::Dx, z, 0.0)?)
        };
        let h2 = |z: f64| -> Result<f64, WeightsError> {
            Ok(-2.0 / (z * z * z) - weights.eval_mode(SeriesKind::Type3, SeriesMode::Dxx, z, 0.0)?)
        };
        // Newton on h' for the unique maximum (h'' < 0 always)
        let mut zm = z.max(1.0 + 1e-9);
        for _ in 0..NEWTON_ITERS {
            let d1 = h1(zm).map_err(|_| diverged(zm, 0.0))?;
            let d2 = h2(zm).map_err(|_| diverged(zm, 0.0))?;
            let mut step = -d1 / d2;
            while zm + step <= 1.0 {
                step *= 0.5;
            }
            zm += step;
            if step.abs() <= 1e-14 * zm {
                break;
            }
        }
        let hm = h(zm).map_err(|_| diverged(zm, 0.0))?;
        if hm < -1e-12 {
            return Err(WeightsError::NotAdmissible(format!(
                "fixed-point equation has no solution (gap {hm:.3e} at z = {zm:.8})"
            )));
        } else if hm <= 1e-12 {
            // tangency: the double root is the maximum itself
            z = zm;
        } else {
            // two simple roots; polish the smaller one from below
            for _ in 0..NEWTON_ITERS {
                let hv = h(z).map_err(|_| diverged(z, 0.0))?;
                let dv = h1(z).map_err(|_| diverged(z, 0.0))?;
                if dv.abs() < 1e-300 {
                    break;
                }
                let mut dz = -hv / dv;
                while z + dz <= 1.0 || z + dz >= zm {
                    dz *= 0.5;
                    if dz.abs() < 1e-300 {
                        break;
                    }
                }
                z += dz;
                if dz.abs() <= 1e-14 * z.max(1.0) {
                    break;
                }
            }
        }
    }
    // Newton polish on G(z,w) = ((z-1)/z - f3, w - f4); stops on step size
    // because residuals vanish quadratically at a critical tangency.
    for _ in 0..NEWTON_ITERS {
        if !weights.has_odd_support() {
            break;
        }
        let f3 = weights.eval_series(SeriesKind::Type3, z, w).map_err(|_| diverged(z, w))?;
        let f4 = weights.eval_series(SeriesKind::Type4, z, w).map_err(|_| diverged(z, w))?;
        let g0 = (z - 1.0) / z - f3;
        let g1 = w - f4;
        let dx3 = weights.eval_series_dx(SeriesKind::Type3, z, w).map_err(|_| diverged(z, w))?;
        let dy3 = weights.eval_series_dy(SeriesKind::Type3, z, w).map_err(|_| diverged(z, w))?;
        let dx4 = weights.eval_series_dx(SeriesKind::Type4, z, w).map_err(|_| diverged(z, w))?;
        let dy4 = weights.eval_series_dy(SeriesKind::Type4, z, w).map_err(|_| diverged(z, w))?;
        let j00 = 1.0 / (z * z) - dx3;
        let j01 = -dy3;
        let j10 = -dx4;
        let j11 = 1.0 - dy4;
        let det = j00 * j11 - j01 * j10;
        if det.abs() < 1e-300 {
            break;
        }
        let mut dz = -(g0 * j11 - g1 * j01) / det;
        let mut dw = -(j00 * g1 - j10 * g0) / det;
        // keep iterates in the feasible quadrant
        let mut scale = 1.0;
        while z + scale * dz <= 1.0 || w + scale * dw < 0.0 {
            scale *= 0.5;
            if scale < 1e-8 {
                break;
            }
        }
        dz *= scale;
        dw *= scale;
        z += dz;
        w += dw;
        if dz.abs() <= 1e-13 * z.max(1.0) && dw.abs() <= 1e-13 * w.max(1.0) {
            break;
        }
    }
    if !weights.has_odd_support() {
        w = 0.0;
    }

    let f3 = weights.eval_series(SeriesKind::Type3, z, w).map_err(|_| diverged(z, w))?;
    let f4 = weights.eval_series(SeriesKind::Type4, z, w).map_err(|_| diverged(z, w))?;
    let residual = ((z - 1.0) / z - f3).abs().max((w - f4).abs());
    if !(z > 1.0) || residual > opts.tol.max(1e-9) {
        return Err(WeightsError::NotAdmissible(format!(
            "no fixed point found (best residual {residual:.3e} at z={z:.8}, w={w:.8})"
        )));
    }

    let matrix = build_matrix(weights, z, w)?;
    let rows: Vec<Vec<f64>> = matrix.iter().map(|r| r.to_vec()).collect();
    let rho = spectral_radius(&rows)?;

    let classification = if rho > 1.0 + opts.criticality_tol {
        Classification::NotAdmissible
    } else if (rho - 1.0).abs() <= opts.criticality_tol {
        let probe = weights.eval_series(SeriesKind::Type3, z + opts.epsilon, w + opts.epsilon);
        match probe {
            Ok(v) if v.is_finite() => Classification::RegularCritical,
            _ => Classification::Critical,
        }
    } else {
        Classification::AdmissibleSubcritical
    };

    Ok(CriticalityReport {
        z_plus: z,
        z_diamond: w,
        z_total: w * w + 2.0 * z - 1.0,
        z_rooted: None,
        matrix,
        spectral_radius: rho,
        classification,
        residual,
    })
}

/// A finitely supported law on offspring pairs (k, k') with an alias table.
#[derive(Debug, Clone)]
pub struct PairLaw {
    pub pairs: Vec<(u32, u32)>,
    pub probs: Vec<f64>,
    alias_prob: Vec<f64>,
    alias_idx: Vec<u32>,
}

impl PairLaw {
    fn empty() -> Self {
        Self { pairs: Vec::new(), probs: Vec::new(), alias_prob: Vec::new(), alias_idx: Vec::new() }
    }

    fn new(pairs: Vec<(u32, u32)>, probs: Vec<f64>) -> Self {
        // Walker alias construction
        let n = probs.len();
        let mut alias_prob = vec![0.0; n];
        let mut alias_idx = vec![0u32; n];
        let mut scaled: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
        let mut small: Vec<usize> = (0..n).filter(|&i| scaled[i] < 1.0).collect();
        let mut large: Vec<usize> = (0..n).filter(|&i| scaled[i] >= 1.0).collect();
        while let (Some(s), Some(l)) = (small.pop(), large.pop()) {
            alias_prob[s] = scaled[s];
            alias_idx[s] = l as u32;
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                small.push(l);
            } else {
                large.push(l);
            }
        }
        for i in small.into_iter().chain(large) {
            alias_prob[i] = 1.0;
            alias_idx[i] = i as u32;
        }
        Self { pairs, probs, alias_prob, alias_idx }
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (u32, u32) {
        debug_assert!(!self.pairs.is_empty());
        let i = rng.gen_range(0..self.pairs.len());
        if rng.gen::<f64>() < self.alias_prob[i] {
            self.pairs[i]
        } else {
            self.pairs[self.alias_idx[i] as usize]
        }
    }

    pub fn prob(&self, pair: (u32, u32)) -> f64 {
        self.pairs.iter().position(|&p| p == pair).map_or(0.0, |i| self.probs[i])
    }

    /// Mean number of (type-1, type-2) children.
    pub fn means(&self) -> (f64, f64) {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for (&(k, kp), &p) in self.pairs.iter().zip(&self.probs) {
            m1 += k as f64 * p;
            m2 += kp as f64 * p;
        }
        (m1, m2)
    }
}

/// Truncation bookkeeping for the offspring pair laws.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TruncationReport {
    /// Largest k + k' retained.
    pub max_children: u32,
    /// Mass dropped from the type-3 law before renormalization.
    pub tail3: f64,
    /// Same for the type-4 law.
    pub tail4: f64,
}

/// The four offspring laws of the tree: type 1 is geometric over type-3
/// children, type 2 is a Dirac mass on one type-4 child, types 3 and 4 carry
/// the (k, k') pair laws.
#[derive(Debug, Clone)]
pub struct OffspringLaws {
    pub z_plus: f64,
    pub z_diamond: f64,
    /// Success parameter 1/Z_plus of the geometric type-1 law.
    pub geo_success: f64,
    pub type3: PairLaw,
    pub type4: PairLaw,
    /// Right unit eigenvector of the 4x4 mean matrix, components summing to 1.
    pub eigvec: [f64; 4],
    pub mean_matrix: [[f64; 4]; 4],
    pub truncation: TruncationReport,
}

fn truncated_pair_law(
    weights: &WeightSequence,
    kind: SeriesKind,
    z: f64,
    w: f64,
    norm: f64,
    trunc_mass: f64,
) -> (PairLaw, f64, u32) {
    if norm <= 0.0 {
        return (PairLaw::empty(), 0.0, 0);
    }
    let mut pairs = Vec::new();
    let mut probs = Vec::new();
    let mut cum = 0.0;
    let mut s: u64 = 0;
    let mut max_children = 0u32;
    let mut idle_shells = 0;
    while cum < 1.0 - trunc_mass && idle_shells < 4096 && s < 1 << 20 {
        let q = weights.weight(match kind {
            SeriesKind::Type3 => (s + 2) as u32,
            SeriesKind::Type4 => (s + 1) as u32,
        });
        if q > 0.0 {
            idle_shells = 0;
            let mut k = 0u64;
            while 2 * k <= s {
                let kp = s - 2 * k;
                let mass = shell_coefficient(kind, k, kp) * q * z.powi(k as i32) * w.powi(kp as i32) / norm;
                if mass > 0.0 {
                    pairs.push((k as u32, kp as u32));
                    probs.push(mass);
                    cum += mass;
                    max_children = max_children.max((k + kp) as u32);
                }
                k += 1;
            }
        } else {
            idle_shells += 1;
        }
        s += 1;
        if let SupportKind::Finite = weights.support {
            let degree = match kind {
                SeriesKind::Type3 => (s + 2) as u32,
                SeriesKind::Type4 => (s + 1) as u32,
            };
            if degree > weights.max_listed {
                break;
            }
        }
    }
    let tail = (1.0 - cum).max(0.0);
    // renormalize the retained mass to an exact probability vector
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    (PairLaw::new(pairs, probs), tail, max_children)
}

/// Builds the offspring laws for a critical (or regular-critical) report.
pub fn build_offspring(
    report: &CriticalityReport,
    weights: &WeightSequence,
    trunc_mass: f64,
) -> Result<OffspringLaws, WeightsError> {
    match report.classification {
        Classification::Critical | Classification::RegularCritical => {}
        other => return Err(WeightsError::NotCritical(other)),
    }
    let z = report.z_plus;
    let w = report.z_diamond;
    let f3 = weights.eval_series(SeriesKind::Type3, z, w)?;
    let f4 = weights.eval_series(SeriesKind::Type4, z, w)?;
    let (type3, tail3, max3) = truncated_pair_law(weights, SeriesKind::Type3, z, w, f3, trunc_mass);
    let (type4, tail4, max4) = if f4 > 0.0 {
        truncated_pair_law(weights, SeriesKind::Type4, z, w, f4, trunc_mass)
    } else {
        (PairLaw::empty(), 0.0, 0)
    };

    let mut mean = [[0.0f64; 4]; 4];
    mean[0][2] = z - 1.0;
    mean[1][3] = 1.0;
    let (m31, m32) = type3.means();
    mean[2][0] = m31;
    mean[2][1] = m32;
    let (m41, m42) = type4.means();
    mean[3][0] = m41;
    mean[3][1] = m42;

    // right eigenvector for eigenvalue 1 via the shifted power iteration
    let mut v = [0.25f64; 4];
    for _ in 0..POWER_ITER_CAP {
        let mut nv = [0.0f64; 4];
        for i in 0..4 {
            nv[i] = v[i];
            for j in 0..4 {
                nv[i] += mean[i][j] * v[j];
            }
        }
        let sum: f64 = nv.iter().sum();
        for x in &mut nv {
            *x /= sum;
        }
        let delta: f64 = nv.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = nv;
        if delta < 1e-15 {
            break;
        }
    }

    Ok(OffspringLaws {
        z_plus: z,
        z_diamond: w,
        geo_success: 1.0 / z,
        type3,
        type4,
        eigvec: v,
        mean_matrix: mean,
        truncation: TruncationReport { max_children: max3.max(max4), tail3, tail4 },
    })
}

impl OffspringLaws {
    /// Number of type-3 children of a type-1 node: geometric with success
    /// 1/Z_plus, P(k) = (1/Z)(1 - 1/Z)^k.
    pub fn sample_type1_children<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let fail = 1.0 - self.geo_success;
        let mut k = 0;
        while rng.gen::<f64>() < fail {
            k += 1;
        }
        k
    }

    pub fn mu1(&self, k: u32) -> f64 {
        self.geo_success * (1.0 - self.geo_success).powi(k as i32)
    }
}

/// Draws the child-type word for a type-3 or type-4 node with offspring pair
/// (k, k'): uniform among the C(k+k', k) interleavings of k ones (type-1
/// children) and k' twos (type-2 children).
pub fn sample_ordering<R: Rng + ?Sized>(
    parent_type: crate::trees::NodeType,
    kk: (u32, u32),
    rng: &mut R,
) -> Vec<u8> {
    assert!(matches!(parent_type, crate::trees::NodeType::T3 | crate::trees::NodeType::T4));
    let mut word = Vec::with_capacity((kk.0 + kk.1) as usize);
    sample_interleaving(kk.0, kk.1, rng, &mut word);
    word
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn q4() -> WeightSequence {
        WeightSequence::monomial(4, 1.0 / 12.0).unwrap()
    }

    #[test]
    fn series_hand_values() {
        // q4-only: f3(x, y) = (x + y^2)/4, so f3(2, 0) = 0.5
        let w = q4();
        assert!((w.eval_series(SeriesKind::Type3, 2.0, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((w.eval_series(SeriesKind::Type3, 2.0, 1.0).unwrap() - 0.75).abs() < 1e-15);
        // all type-4 monomials carry a factor of y
        assert_eq!(w.eval_series(SeriesKind::Type4, 2.0, 0.0).unwrap(), 0.0);
        // only (k,k') = (0,0) survives at the origin
        let w2 = WeightSequence::monomial(2, 0.3).unwrap();
        assert!((w2.eval_series(SeriesKind::Type3, 0.0, 0.0).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mixed_fixture_fixed_point_is_exact() {
        // q3 = 5/38, q4 = 1/38 was constructed to solve the system at (2, 1)
        let w = WeightSequence::new(
            BTreeMap::from([(3, 5.0 / 38.0), (4, 1.0 / 38.0)]),
            SupportKind::Finite,
        )
        .unwrap();
        let f3 = w.eval_series(SeriesKind::Type3, 2.0, 1.0).unwrap();
        let f4 = w.eval_series(SeriesKind::Type4, 2.0, 1.0).unwrap();
        assert!((f3 - 0.5).abs() < 1e-14);
        assert!((f4 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn solve_q4_regular_critical() {
        let report = solve_fixed_point(&q4(), SolveOptions::default()).unwrap();
        assert!((report.z_plus - 2.0).abs() < 1e-10, "z_plus = {}", report.z_plus);
        assert!(report.z_diamond.abs() < 1e-10);
        assert!((report.spectral_radius - 1.0).abs() < 1e-6);
        assert_eq!(report.classification, Classification::RegularCritical);
        assert!((report.z_total - (2.0 * report.z_plus - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn solve_q4_subcritical_and_inadmissible() {
        let sub = solve_fixed_point(&WeightSequence::monomial(4, 0.05).unwrap(), SolveOptions::default()).unwrap();
        assert_eq!(sub.classification, Classification::AdmissibleSubcritical);
        assert!(sub.spectral_radius < 1.0);
        // smaller root of z^2 - 20z/3 + 20/3
        let expect = (20.0 / 3.0 - (400.0f64 / 9.0 - 80.0 / 3.0).sqrt()) / 2.0;
        assert!((sub.z_plus - expect).abs() < 1e-9);

        let err = solve_fixed_point(&WeightSequence::monomial(4, 1.0 / 6.0).unwrap(), SolveOptions::default());
        assert!(matches!(err, Err(WeightsError::NotAdmissible(_))));
    }

    #[test]
    fn solver_is_deterministic() {
        let a = solve_fixed_point(&q4(), SolveOptions::default()).unwrap();
        let b = solve_fixed_point(&q4(), SolveOptions::default()).unwrap();
        assert_eq!(a.z_plus.to_bits(), b.z_plus.to_bits());
        assert_eq!(a.z_diamond.to_bits(), b.z_diamond.to_bits());
        assert_eq!(a.spectral_radius.to_bits(), b.spectral_radius.to_bits());
    }

    #[test]
    fn spectral_radius_small_cases() {
        let id: Vec<Vec<f64>> = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert!((spectral_radius(&id).unwrap() - 1.0).abs() < 1e-10);
        let perm = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!((spectral_radius(&perm).unwrap() - 1.0).abs() < 1e-10);
        let report = solve_fixed_point(&q4(), SolveOptions::default()).unwrap();
        let rows: Vec<Vec<f64>> = report.matrix.iter().map(|r| r.to_vec()).collect();
        assert!((spectral_radius(&rows).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn offspring_laws_q4() {
        let report = solve_fixed_point(&q4(), SolveOptions::default()).unwrap();
        let laws = build_offspring(&report, &q4(), 1e-12).unwrap();
        // geometric with success 1/2: mu1(k) = 2^-(k+1)
        assert!((laws.mu1(0) - 0.5).abs() < 1e-10);
        assert!((laws.mu1(3) - 1.0 / 16.0).abs() < 1e-10);
        // type-3 law collapses onto (1, 0) because z_diamond = 0
        assert_eq!(laws.type3.pairs, vec![(1, 0)]);
        assert!((laws.type3.probs[0] - 1.0).abs() < 1e-12);
        assert!(laws.type4.is_empty());
        // exact rows of the mean matrix
        assert_eq!(laws.mean_matrix[0], [0.0, 0.0, report.z_plus - 1.0, 0.0]);
        assert_eq!(laws.mean_matrix[1], [0.0, 0.0, 0.0, 1.0]);
        // eigenvector: M a = a within 1e-8, components sum to 1
        let a = laws.eigvec;
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for i in 0..4 {
            let row: f64 = (0..4).map(|j| laws.mean_matrix[i][j] * a[j]).sum();
            assert!((row - a[i]).abs() < 1e-8, "eigvec row {i}: {row} vs {}", a[i]);
        }
    }

    #[test]
    fn pair_law_sampling_matches_probs() {
        let law = PairLaw::new(vec![(1, 0), (0, 2), (2, 1)], vec![0.5, 0.3, 0.2]);
        let mut rng = crate::rng::stream(5, 0);
        let mut counts = [0u64; 3];
        let n = 100_000;
        for _ in 0..n {
            let p = law.sample(&mut rng);
            let i = law.pairs.iter().position(|&x| x == p).unwrap();
            counts[i] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let expect = law.probs[i] * n as f64;
            assert!((c as f64 - expect).abs() < 5.0 * expect.sqrt());
        }
    }

    #[test]
    fn ordering_words_are_uniform() {
        use crate::trees::NodeType;
        let mut rng = crate::rng::stream(9, 0);
        // (0,0) -> empty, (2,0) -> (1,1) always
        assert!(sample_ordering(NodeType::T3, (0, 0), &mut rng).is_empty());
        assert_eq!(sample_ordering(NodeType::T3, (2, 0), &mut rng), vec![1, 1]);
        // (1,1): each of (1,2), (2,1) with probability 1/2, chi-square over 1e5 draws
        let n = 100_000;
        let mut c12 = 0u64;
        for _ in 0..n {
            if sample_ordering(NodeType::T4, (1, 1), &mut rng) == vec![1, 2] {
                c12 += 1;
            }
        }
        let e = n as f64 / 2.0;
        let chi2 = (c12 as f64 - e).powi(2) / e + ((n - c12) as f64 - e).powi(2) / e;
        let p = 1.0 - ChiSquared::new(1.0).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2 = {chi2}, p = {p}");
    }

    #[test]
    fn config_round_trip() {
        let text = r#"{"q": {"4": 0.08333333333333333}, "support": "finite"}"#;
        let w = WeightSequence::from_json(text).unwrap();
        assert!((w.weight(4) - 1.0 / 12.0).abs() < 1e-15);
        assert_eq!(w.weight(3), 0.0);
        let again = WeightSequence::from_json(&w.to_json()).unwrap();
        assert_eq!(w, again);
    }

    #[test]
    fn geometric_tail_weights_extend() {
        let w = WeightSequence::new(
            BTreeMap::from([(3, 0.01)]),
            SupportKind::GeometricTail { rate: 0.2 },
        )
        .unwrap();
        assert!((w.weight(5) - 0.01 * 0.04).abs() < 1e-18);
        // series evaluates finitely well inside the certified region
        let v = w.eval_series(SeriesKind::Type3, 1.1, 0.5).unwrap();
        assert!(v.is_finite() && v > 0.0);
        // and reports divergence when the comparison bound fails
        assert!(matches!(
            w.eval_series(SeriesKind::Type3, 1e6, 1e6),
            Err(WeightsError::DivergentSeries { .. })
        ));
    }
}
