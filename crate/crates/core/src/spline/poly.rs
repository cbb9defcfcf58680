//! Low-order polynomial helpers: stable roots and positive parts.

use serde::{Deserialize, Serialize};

/// Discriminants below this are treated as "no real roots".
pub const DISCRIMINANT_FLOOR: f64 = 1e-12;

/// `a y^2 + b y + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Quadratic {
    pub const fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    #[inline]
    pub fn eval(&self, y: f64) -> f64 {
        (self.a * y + self.b) * y + self.c
    }

    /// Antiderivative vanishing at 0.
    #[inline]
    pub fn antiderivative(&self, y: f64) -> f64 {
        ((self.a / 3.0 * y + self.b / 2.0) * y + self.c) * y
    }

    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        self.antiderivative(hi) - self.antiderivative(lo)
    }

    /// Same polynomial minus a constant.
    pub fn shifted(&self, level: f64) -> Self {
        Self::new(self.a, self.b, self.c - level)
    }

    /// Real roots in ascending order.
    pub fn roots(&self) -> Roots {
        let Quadratic { a, b, c } = *self;
        let mut out = Roots::default();
        if a == 0.0 {
            if b != 0.0 {
                out.push(-c / b);
            }
            return out;
        }
        let disc = b * b - 4.0 * a * c;
        if disc < DISCRIMINANT_FLOOR {
            return out;
        }
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        if q == 0.0 {
            return out;
        }
        let (r1, r2) = (q / a, c / q);
        if r1 <= r2 {
            out.push(r1);
            out.push(r2);
        } else {
            out.push(r2);
            out.push(r1);
        }
        out
    }

    /// Sub-intervals of `[lo, hi]` on which the polynomial is strictly
    /// positive.
    pub fn positive_pieces(&self, lo: f64, hi: f64) -> Pieces {
        let mut cuts = [lo, hi, hi, hi];
        let mut n = 1;
        for r in self.roots().iter() {
            if r > lo && r < hi {
                cuts[n] = r;
                n += 1;
            }
        }
        cuts[n] = hi;
        let mut pieces = Pieces::default();
        for w in cuts[..=n].windows(2) {
            let (s, e) = (w[0], w[1]);
            if e > s && self.eval(0.5 * (s + e)) > 0.0 {
                pieces.push(s, e);
            }
        }
        pieces
    }

    /// `integral of max(p, 0)` over `[lo, hi]`.
    pub fn positive_integral(&self, lo: f64, hi: f64) -> f64 {
        self.positive_pieces(lo, hi)
            .iter()
            .map(|(s, e)| self.integral(s, e))
            .sum::<f64>()
            .max(0.0)
    }
}

/// Up to two real roots, no allocation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Roots {
    vals: [f64; 2],
    len: usize,
}

impl Roots {
    fn push(&mut self, r: f64) {
        self.vals[self.len] = r;
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.vals[..self.len].iter().copied()
    }
}

/// Up to three disjoint sub-intervals; adjacent pieces are merged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pieces {
    vals: [(f64, f64); 3],
    len: usize,
}

impl Pieces {
    fn push(&mut self, s: f64, e: f64) {
        if self.len > 0 && self.vals[self.len - 1].1 == s {
            self.vals[self.len - 1].1 = e;
        } else {
            self.vals[self.len] = (s, e);
            self.len += 1;
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.vals[..self.len].iter().copied()
    }
}
