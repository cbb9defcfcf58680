//! Independent numerical oracles for spline densities.
//!
//! Nothing here calls the crate's polynomial, root or integration code:
//! the spline is re-evaluated from its raw knots and heights with the
//! Lagrange basis, crossings are found by bisection, and integrals use
//! two-point Gauss-Legendre on pieces where the integrand is a polynomial.

#![allow(dead_code)]

use rand::Rng;
use spline_conformal::spline::{knot_positions, Degree, IntervalUnion, SplineDensity};

const GL_NODE: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)

/// Raw description of a spline, read back from a density.
#[derive(Debug, Clone)]
pub struct RawSpline {
    pub order: usize,
    pub positions: Vec<f64>,
    pub heights: Vec<f64>,
}

impl RawSpline {
    pub fn from_density(d: &SplineDensity) -> Self {
        Self {
            order: d.degree().order(),
            positions: d.positions().to_vec(),
            heights: d.heights().to_vec(),
        }
    }

    pub fn segment(&self, y: f64) -> usize {
        let k = self.positions.len();
        let mut l = 0;
        while l + 2 < k && self.positions[l + 1] <= y {
            l += 1;
        }
        l
    }

    /// Untruncated polynomial of segment `l` at `y`, by the Lagrange basis.
    pub fn poly(&self, l: usize, y: f64) -> f64 {
        let (lo, hi) = (self.positions[l], self.positions[l + 1]);
        let n = self.order;
        let mut pts = [0.0; 3];
        for (j, t) in pts.iter_mut().enumerate().take(n + 1) {
            *t = lo + (hi - lo) * j as f64 / n as f64;
        }
        let hs = &self.heights[n * l..=n * l + n];
        let mut total = 0.0;
        for j in 0..=n {
            let mut basis = 1.0;
            for m in 0..=n {
                if m != j {
                    basis *= (y - pts[m]) / (pts[j] - pts[m]);
                }
            }
            total += hs[j] * basis;
        }
        total
    }

    /// Truncated, unnormalized value.
    pub fn value(&self, y: f64) -> f64 {
        self.poly(self.segment(y), y).max(0.0)
    }

    /// Stationary points of quadratic segments strictly inside their
    /// segment, found from three point values.
    pub fn vertices(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if self.order < 2 {
            return out;
        }
        for l in 0..self.positions.len() - 1 {
            let (lo, hi) = (self.positions[l], self.positions[l + 1]);
            let h = hi - lo;
            let (p0, pm, p1) = (
                self.poly(l, lo),
                self.poly(l, lo + 0.5 * h),
                self.poly(l, hi),
            );
            let curvature = p0 - 2.0 * pm + p1;
            if curvature.abs() > 0.0 {
                // vertex of the parabola through the three points
                let t = 0.5 - (p1 - p0) / (4.0 * curvature);
                if t > 0.0 && t < 1.0 {
                    out.push(lo + t * h);
                }
            }
        }
        out
    }
}

fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let fa_pos = f(a) > 0.0;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if (f(m) > 0.0) == fa_pos {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

fn gauss2(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
    r * (f(c - r * GL_NODE) + f(c + r * GL_NODE))
}

/// Grid oracle over cells on which each segment polynomial is monotone.
pub struct GridOracle {
    pub spline: RawSpline,
    /// Normalizer the density is divided by.
    pub normalizer: f64,
    cells: Vec<Cell>,
    blocks: Vec<Block>,
}

/// Summary of a run of consecutive cells, so level queries can skip
/// stretches lying wholly above or below the level.
struct Block {
    start: usize,
    end: usize,
    min_p: f64,
    max_p: f64,
    positive_mass: f64,
}

const BLOCK: usize = 256;

struct Cell {
    lo: f64,
    hi: f64,
    seg: usize,
    p_lo: f64,
    p_hi: f64,
    positive_mass: f64,
}

impl GridOracle {
    /// `cells` uniform cells, further split at knots and parabola vertices.
    /// The density is `max(p, 0) / normalizer`.
    pub fn new(spline: RawSpline, cells: usize, normalizer: f64) -> Self {
        let mut pts: Vec<f64> = (0..=cells).map(|i| i as f64 / cells as f64).collect();
        pts.extend_from_slice(&spline.positions);
        pts.extend(spline.vertices());
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        let mut out = Vec::with_capacity(pts.len());
        for w in pts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if hi <= lo {
                continue;
            }
            let seg = spline.segment(0.5 * (lo + hi));
            let p = |y: f64| spline.poly(seg, y);
            let (p_lo, p_hi) = (p(lo), p(hi));
            let positive_mass = integrate_between(&p, lo, hi, p_lo, p_hi, 0.0, f64::INFINITY);
            out.push(Cell {
                lo,
                hi,
                seg,
                p_lo,
                p_hi,
                positive_mass,
            });
        }
        let blocks = (0..out.len())
            .step_by(BLOCK)
            .map(|start| {
                let end = (start + BLOCK).min(out.len());
                let cells = &out[start..end];
                Block {
                    start,
                    end,
                    min_p: cells
                        .iter()
                        .map(|c| c.p_lo.min(c.p_hi))
                        .fold(f64::INFINITY, f64::min),
                    max_p: cells
                        .iter()
                        .map(|c| c.p_lo.max(c.p_hi))
                        .fold(f64::NEG_INFINITY, f64::max),
                    positive_mass: cells.iter().map(|c| c.positive_mass).sum(),
                }
            })
            .collect();
        Self {
            spline,
            normalizer,
            cells: out,
            blocks,
        }
    }

    pub fn for_density(d: &SplineDensity, cells: usize) -> Self {
        Self::new(RawSpline::from_density(d), cells, d.normalizer())
    }

    /// `integral of max(p, 0)`, unnormalized.
    pub fn positive_mass(&self) -> f64 {
        self.cells.iter().map(|c| c.positive_mass).sum()
    }

    pub fn density(&self, y: f64) -> f64 {
        self.spline.value(y) / self.normalizer
    }

    /// Probability mass where the density is at most `level`.
    pub fn mass_below(&self, level: f64) -> f64 {
        let t = level * self.normalizer;
        let mut total = 0.0;
        for b in &self.blocks {
            if b.max_p <= t {
                total += b.positive_mass;
                continue;
            }
            if b.min_p > t {
                continue;
            }
            for c in &self.cells[b.start..b.end] {
                let hi_p = c.p_lo.max(c.p_hi);
                let lo_p = c.p_lo.min(c.p_hi);
                if hi_p <= t {
                    total += c.positive_mass;
                } else if lo_p > t {
                    continue;
                } else {
                    let p = |y: f64| self.spline.poly(c.seg, y);
                    total += integrate_between(&p, c.lo, c.hi, c.p_lo, c.p_hi, 0.0, t);
                }
            }
        }
        total / self.normalizer
    }

    /// `{y : density(y) > level}`; intervals shorter than `sliver` are
    /// dropped and gaps shorter than `sliver` merged.
    pub fn level_set(&self, level: f64, sliver: f64) -> Vec<(f64, f64)> {
        let t = level * self.normalizer;
        let mut out: Vec<(f64, f64)> = Vec::new();
        let mut push = |a: f64, b: f64| match out.last_mut() {
            Some(last) if a - last.1 < sliver => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        };
        for blk in &self.blocks {
            if blk.max_p <= t {
                continue;
            }
            if blk.min_p > t {
                push(self.cells[blk.start].lo, self.cells[blk.end - 1].hi);
                continue;
            }
            for c in &self.cells[blk.start..blk.end] {
                let p = |y: f64| self.spline.poly(c.seg, y) - t;
                match (c.p_lo > t, c.p_hi > t) {
                    (true, true) => push(c.lo, c.hi),
                    (false, false) => {}
                    (true, false) => push(c.lo, bisect(p, c.lo, c.hi)),
                    (false, true) => push(bisect(p, c.lo, c.hi), c.hi),
                }
            }
        }
        out.retain(|(a, b)| b - a >= sliver);
        out
    }
}

/// `integral of p` over the part of `[lo, hi]` where `lower < p <= upper`,
/// for `p` monotone on the cell.
fn integrate_between(
    p: &impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    p_lo: f64,
    p_hi: f64,
    lower: f64,
    upper: f64,
) -> f64 {
    let mut cuts = [lo, hi, hi, hi];
    let mut n = 2;
    for level in [lower, upper] {
        if level.is_finite() && (p_lo > level) != (p_hi > level) {
            cuts[n] = bisect(|y| p(y) - level, lo, hi);
            n += 1;
        }
    }
    let cuts = &mut cuts[..n];
    cuts.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mid = p(0.5 * (a + b));
        if mid > lower && mid <= upper {
            total += gauss2(p, a, b);
        }
    }
    total
}

/// Hausdorff distance between two finite unions of closed intervals.
pub fn hausdorff(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    directed(a, b).max(directed(b, a))
}

fn dist_to(set: &[(f64, f64)], y: f64) -> f64 {
    set.iter()
        .map(|&(lo, hi)| {
            if y < lo {
                lo - y
            } else if y > hi {
                y - hi
            } else {
                0.0
            }
        })
        .fold(f64::INFINITY, f64::min)
}

/// `sup over y in a of dist(y, b)`, attained at endpoints of `a` or at
/// midpoints of gaps in `b`.
fn directed(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut candidates: Vec<f64> = a.iter().flat_map(|&(lo, hi)| [lo, hi]).collect();
    for w in b.windows(2) {
        let mid = 0.5 * (w[0].1 + w[1].0);
        if a.iter().any(|&(lo, hi)| lo <= mid && mid <= hi) {
            candidates.push(mid);
        }
    }
    candidates
        .into_iter()
        .map(|y| dist_to(b, y))
        .fold(0.0, f64::max)
}

/// Random density with knots from softmaxed widths, softplus knot heights
/// and, for degree 2, raw midpoint heights that often dip below zero.
pub fn random_density(rng: &mut impl Rng, degree: Degree, knots: usize) -> SplineDensity {
    loop {
        let raw: Vec<f64> = (0..knots - 1).map(|_| rng.gen_range(-2.5..2.5)).collect();
        let positions = knot_positions(&raw, knots, 1e-3).unwrap();
        let softplus = |x: f64| (1.0 + x.exp()).ln();
        let ends: Vec<f64> = (0..knots)
            .map(|_| softplus(rng.gen_range(-4.0..3.0)))
            .collect();
        let heights = match degree {
            Degree::Linear => ends,
            Degree::Quadratic => {
                let mut h = Vec::with_capacity(2 * knots - 1);
                for &e in &ends[..knots - 1] {
                    h.push(e);
                    h.push(rng.gen_range(-1.5..2.5));
                }
                h.push(ends[knots - 1]);
                h
            }
        };
        if let Ok(d) = SplineDensity::new(degree, positions, heights) {
            return d;
        }
    }
}

pub fn pairs(set: &IntervalUnion) -> Vec<(f64, f64)> {
    set.intervals().iter().map(|i| (i.lo, i.hi)).collect()
}

/// Drops intervals shorter than `sliver`.
pub fn without_slivers(v: Vec<(f64, f64)>, sliver: f64) -> Vec<(f64, f64)> {
    v.into_iter().filter(|(a, b)| b - a >= sliver).collect()
}

/// Worst relative gradient error of the spline NLL for one random model
/// and batch.
pub fn nll_gradient_error(rng: &mut impl Rng, degree: Degree, knots: usize) -> f64 {
    use spline_conformal::gradcore::{gradient_check, GradError, Tensor};
    use spline_conformal::model::{SplineModel, Trainable};

    let dim = rng.gen_range(1..=3);
    let rows = rng.gen_range(2..=6);
    let model = SplineModel::new(dim, degree, knots, 1e-3, rng).unwrap();
    let x = Tensor::new(
        rows,
        dim,
        (0..rows * dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    );
    let y: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.0..1.0)).collect();
    gradient_check(
        |tape, vars| {
            model
                .loss_on_tape(tape, vars, &x, &y)
                .map_err(|_| GradError::NonFiniteEvaluation)
        },
        &model.params().values(),
        1e-5,
    )
    .unwrap()
}

/// Outcome of random score/set duality trials.
#[derive(Debug, Default, Clone, Copy)]
pub struct Duality {
    pub checked: usize,
    pub ties: usize,
    pub violations: usize,
}

/// Draws `trials` random `(x, y, alpha)`, calibrates `cal_scores` at
/// `alpha`, and checks `y in C(x)` against `score(x, y) <= q`.
pub fn duality_trials(
    scorer: &spline_conformal::conformal::Scorer,
    xs: &[&[f64]],
    cal_scores: &[f64],
    trials: usize,
    rng: &mut impl Rng,
) -> Duality {
    use spline_conformal::conformal::calibrate;
    let mut out = Duality::default();
    for _ in 0..trials {
        let x = xs[rng.gen_range(0..xs.len())];
        let y = rng.gen_range(0.0..=1.0);
        let alpha = rng.gen_range(0.01..0.99);
        let cal = calibrate(cal_scores, alpha, scorer.kind()).unwrap();
        let score = scorer.scores(&[x], &[y]).unwrap().scores[0];
        if (score - cal.q_hat).abs() < 1e-9 {
            out.ties += 1;
            continue;
        }
        let set = &scorer.sets(&[x], &cal).unwrap()[0];
        out.checked += 1;
        if set.contains(y) != (score <= cal.q_hat) {
            out.violations += 1;
        }
    }
    out
}

/// Up to five disjoint intervals in `[0, 1]` with gaps of at least 1e-4,
/// plus a knot budget between their count and five.
pub fn random_union(rng: &mut impl Rng) -> (IntervalUnion, usize) {
    loop {
        let m = rng.gen_range(1..=5);
        let mut cuts: Vec<f64> = (0..2 * m).map(|_| rng.gen_range(0.0..1.0)).collect();
        cuts.sort_by(f64::total_cmp);
        if cuts.windows(2).any(|w| w[1] - w[0] < 1e-4) {
            continue;
        }
        let p: Vec<(f64, f64)> = cuts.chunks(2).map(|c| (c[0], c[1])).collect();
        return (IntervalUnion::from_pairs(&p), rng.gen_range(m..=5));
    }
}
