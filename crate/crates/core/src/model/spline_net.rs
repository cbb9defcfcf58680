use super::net::{head_bound, stack_rows, Encoder, Linear, HIDDEN};
use super::train::Trainable;
use super::{LayerContext, ModelError};
use crate::gradcore::{ParamStore, Tape, Tensor, Var};
use crate::spline::{Degree, Quadratic, SplineDensity};
use rand::Rng;
use std::f64::consts::LN_2;

/// Default minimum knot spacing.
pub const DEFAULT_MIN_SPACING: f64 = 1e-3;

/// Densities are floored here before taking logs.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Weight bound of the midpoint-height head at initialization.
const MIDPOINT_INIT_SCALE: f64 = 1e-2;

/// Encoder plus knot-position and knot-height heads.
///
/// For degree 2 the heights come from two heads: `K` endpoint heights
/// through a softplus and `K-1` raw midpoint heights.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineModel {
    degree: Degree,
    knots: usize,
    min_spacing: f64,
    input_dim: usize,
    params: ParamStore,
    encoder: Encoder,
    position_head: Linear,
    height_head: Linear,
    midpoint_head: Option<Linear>,
}

/// Tape nodes of one batched forward pass.
struct Heads {
    /// `b x K`, first column 0 and last column 1.
    positions: Var,
    /// `b x (K-1)`.
    widths: Var,
    /// `b x K` knot heights.
    heights: Var,
    /// `b x (K-1)` midpoint heights, degree 2 only.
    midpoints: Option<Var>,
}

impl SplineModel {
    /// All weights and biases zero.
    pub fn zeroed(
        input_dim: usize,
        degree: Degree,
        knots: usize,
        min_spacing: f64,
    ) -> Result<Self, ModelError> {
        if input_dim == 0 {
            return Err(ModelError::Config(
                "input dimension must be positive".into(),
            ));
        }
        if knots < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 knots, got {knots}"
            )));
        }
        if !(0.0..1.0 / knots as f64).contains(&min_spacing) {
            return Err(ModelError::Config(format!(
                "minimum knot spacing {min_spacing} must lie in [0, 1/{knots})"
            )));
        }
        let mut params = ParamStore::new();
        let encoder = Encoder::register(&mut params, input_dim);
        let position_head = Linear::register(&mut params, "positions", HIDDEN, knots - 1);
        let height_head = Linear::register(&mut params, "heights", HIDDEN, knots);
        let midpoint_head = match degree {
            Degree::Linear => None,
            Degree::Quadratic => Some(Linear::register(
                &mut params,
                "midpoints",
                HIDDEN,
                knots - 1,
            )),
        };
        Ok(Self {
            degree,
            knots,
            min_spacing,
            input_dim,
            params,
            encoder,
            position_head,
            height_head,
            midpoint_head,
        })
    }

    /// Randomly initialized model drawing from `rng`.
    pub fn new(
        input_dim: usize,
        degree: Degree,
        knots: usize,
        min_spacing: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let mut model = Self::zeroed(input_dim, degree, knots, min_spacing)?;
        let store = &mut model.params;
        model.encoder.init(store, rng);
        let bound = head_bound(HIDDEN);
        model.position_head.init_uniform(store, bound, 0.0, rng);
        model.height_head.init_uniform(store, bound, 0.0, rng);
        if let Some(mid) = model.midpoint_head {
            // Midpoints near softplus(0) keep the first quadratics close to
            // straight lines, so few segments start out truncated.
            mid.init_uniform(store, MIDPOINT_INIT_SCALE, LN_2, rng);
        }
        Ok(model)
    }

    /// Rebuilds a model around stored weights, checking names and shapes.
    pub fn from_params(
        input_dim: usize,
        degree: Degree,
        knots: usize,
        min_spacing: f64,
        params: ParamStore,
    ) -> Result<Self, ModelError> {
        let mut model = Self::zeroed(input_dim, degree, knots, min_spacing)?;
        check_param_layout(&model.params, &params)?;
        model.params.set_values(params.values());
        Ok(model)
    }

    pub fn degree(&self) -> Degree {
        self.degree
    }

    pub fn knots(&self) -> usize {
        self.knots
    }

    pub fn min_spacing(&self) -> f64 {
        self.min_spacing
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn heads(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Heads, ModelError> {
        let k = self.knots;
        let rows = tape.value(x).rows();
        let z = self.encoder.forward(tape, vars, x)?;

        let layer = "position head";
        let raw = self.position_head.apply(tape, vars, z).layer(layer)?;
        let v = tape.softmax_rows(raw).layer(layer)?;
        let eps = self.min_spacing;
        let v = tape.scale(v, 1.0 - eps * k as f64).layer(layer)?;
        let w = tape.offset(v, eps).layer(layer)?;
        let cum = tape.cumsum_rows(w).layer(layer)?;
        let zero = tape.input(Tensor::zeros(rows, 1));
        let positions = tape.concat_cols(&[zero, cum]).layer(layer)?;
        // The widths sum to 1 - eps; the last knot gets the missing eps.
        let mut bump = vec![0.0; k];
        bump[k - 1] = eps;
        let bump = tape.input(Tensor::row(bump));
        let positions = tape.add(positions, bump).layer(layer)?;
        let upper = tape.slice_cols(positions, 1, k).layer(layer)?;
        let lower = tape.slice_cols(positions, 0, k - 1).layer(layer)?;
        let widths = tape.sub(upper, lower).layer(layer)?;

        let layer = "height head";
        let raw = self.height_head.apply(tape, vars, z).layer(layer)?;
        let heights = tape.softplus(raw).layer(layer)?;
        let midpoints = match self.midpoint_head {
            Some(mid) => Some(mid.apply(tape, vars, z).layer("midpoint head")?),
            None => None,
        };
        Ok(Heads {
            positions,
            widths,
            heights,
            midpoints,
        })
    }

    fn build(&self, tape: &Tape, heads: &Heads, row: usize) -> Result<SplineDensity, ModelError> {
        let k = self.knots;
        let mut positions = tape.value(heads.positions).row_slice(row).to_vec();
        positions[0] = 0.0;
        positions[k - 1] = 1.0;
        let knot_heights = tape.value(heads.heights).row_slice(row);
        let heights = match heads.midpoints {
            None => knot_heights.to_vec(),
            Some(mid) => {
                let mid = tape.value(mid).row_slice(row);
                let mut h = Vec::with_capacity(2 * k - 1);
                for i in 0..k - 1 {
                    h.push(knot_heights[i]);
                    h.push(mid[i]);
                }
                h.push(knot_heights[k - 1]);
                h
            }
        };
        Ok(SplineDensity::new(self.degree, positions, heights)?)
    }

    /// Conditional density for each covariate row.
    pub fn densities(&self, rows: &[&[f64]]) -> Result<Vec<SplineDensity>, ModelError> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let x = tape.input(stack_rows(rows, self.input_dim)?);
        let heads = self.heads(&mut tape, &vars, x)?;
        (0..rows.len())
            .map(|r| self.build(&tape, &heads, r))
            .collect()
    }

    /// Conditional density at one covariate vector.
    pub fn density(&self, x: &[f64]) -> Result<SplineDensity, ModelError> {
        Ok(self.densities(&[x])?.remove(0))
    }

    /// Mean floored negative log-likelihood without recording gradients.
    pub fn nll(&self, rows: &[&[f64]], y: &[f64]) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let x = stack_rows(rows, self.input_dim)?;
        let loss = self.loss_on_tape(&mut tape, &vars, &x, y)?;
        Ok(tape.value(loss).item())
    }
}

pub(crate) fn check_param_layout(want: &ParamStore, got: &ParamStore) -> Result<(), ModelError> {
    if want.len() != got.len() {
        return Err(ModelError::Config(format!(
            "expected {} weight tensors, found {}",
            want.len(),
            got.len()
        )));
    }
    for (w, g) in want.params().iter().zip(got.params()) {
        if w.name != g.name || w.value.shape() != g.value.shape() {
            return Err(ModelError::Config(format!(
                "weight '{}' {:?} does not match expected '{}' {:?}",
                g.name,
                g.value.shape(),
                w.name,
                w.value.shape()
            )));
        }
    }
    Ok(())
}

/// `int_0^1 s^2`, `int s`, `int 1` over the pieces of `[0, 1]` where the
/// local polynomial is positive. These are constant almost everywhere in
/// the heights because the polynomial vanishes at every moving endpoint.
fn truncation_moments(a: f64, b: f64, c: f64) -> [f64; 3] {
    let q = Quadratic::new(a, b, c);
    let mut m = [0.0; 3];
    for (s, e) in q.positive_pieces(0.0, 1.0).iter() {
        m[0] += (e * e * e - s * s * s) / 3.0;
        m[1] += (e * e - s * s) / 2.0;
        m[2] += e - s;
    }
    m
}

fn segment_of(positions: &[f64], y: f64) -> usize {
    let idx = positions.partition_point(|&t| t <= y);
    idx.saturating_sub(1).min(positions.len() - 2)
}

impl Trainable for SplineModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn loss_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: &Tensor,
        y: &[f64],
    ) -> Result<Var, ModelError> {
        if x.rows() != y.len() || x.rows() == 0 {
            return Err(ModelError::Config(format!(
                "batch has {} covariate rows and {} targets",
                x.rows(),
                y.len()
            )));
        }
        if x.cols() != self.input_dim {
            return Err(ModelError::InputDim {
                expected: self.input_dim,
                got: x.cols(),
            });
        }
        let k = self.knots;
        let xv = tape.input(x.clone());
        let heads = self.heads(tape, vars, xv)?;
        let y: Vec<f64> = y.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let pos = tape.value(heads.positions);
        let seg: Vec<usize> = y
            .iter()
            .enumerate()
            .map(|(r, &v)| segment_of(pos.row_slice(r), v))
            .collect();
        let next: Vec<usize> = seg.iter().map(|s| s + 1).collect();

        let layer = "likelihood";
        let t_lo = tape.gather(heads.positions, seg.clone()).layer(layer)?;
        let width = tape.gather(heads.widths, seg.clone()).layer(layer)?;
        let yv = tape.input(Tensor::column(y));
        let offset = tape.sub(yv, t_lo).layer(layer)?;
        let s = tape.div(offset, width).layer(layer)?;

        let left = tape.slice_cols(heads.heights, 0, k - 1).layer(layer)?;
        let right = tape.slice_cols(heads.heights, 1, k).layer(layer)?;
        let (value, segment_mass) = match heads.midpoints {
            None => {
                let h0 = tape.gather(heads.heights, seg).layer(layer)?;
                let h1 = tape.gather(heads.heights, next).layer(layer)?;
                let rise = tape.sub(h1, h0).layer(layer)?;
                let step = tape.mul(s, rise).layer(layer)?;
                let value = tape.add(h0, step).layer(layer)?;
                let sum = tape.add(left, right).layer("normalizer")?;
                let mass = tape.scale(sum, 0.5).layer("normalizer")?;
                (value, mass)
            }
            Some(mid) => {
                let ends = tape.add(left, right).layer(layer)?;
                let twice_ends = tape.scale(ends, 2.0).layer(layer)?;
                let four_mid = tape.scale(mid, 4.0).layer(layer)?;
                let a = tape.sub(twice_ends, four_mid).layer(layer)?;
                let three_left = tape.scale(left, -3.0).layer(layer)?;
                let b = tape.add(three_left, four_mid).layer(layer)?;
                let b = tape.sub(b, right).layer(layer)?;
                let c = left;

                let (va, vb, vc) = (tape.value(a), tape.value(b), tape.value(c));
                let (rows, cols) = va.shape();
                let mut moments = [
                    Vec::with_capacity(rows * cols),
                    Vec::with_capacity(rows * cols),
                    Vec::with_capacity(rows * cols),
                ];
                for ((&ai, &bi), &ci) in va.data().iter().zip(vb.data()).zip(vc.data()) {
                    let m = truncation_moments(ai, bi, ci);
                    for j in 0..3 {
                        moments[j].push(m[j]);
                    }
                }
                let [m2, m1, m0] = moments.map(|m| Tensor::new(rows, cols, m));
                let (m2, m1, m0) = (tape.input(m2), tape.input(m1), tape.input(m0));
                let layer_z = "normalizer";
                let ta = tape.mul(a, m2).layer(layer_z)?;
                let tb = tape.mul(b, m1).layer(layer_z)?;
                let tc = tape.mul(c, m0).layer(layer_z)?;
                let mass = tape.add(ta, tb).layer(layer_z)?;
                let mass = tape.add(mass, tc).layer(layer_z)?;

                let al = tape.gather(a, seg.clone()).layer(layer)?;
                let bl = tape.gather(b, seg.clone()).layer(layer)?;
                let cl = tape.gather(c, seg).layer(layer)?;
                let v = tape.mul(al, s).layer(layer)?;
                let v = tape.add(v, bl).layer(layer)?;
                let v = tape.mul(v, s).layer(layer)?;
                let v = tape.add(v, cl).layer(layer)?;
                (tape.max0(v).layer(layer)?, mass)
            }
        };
        let weighted = tape.mul(heads.widths, segment_mass).layer("normalizer")?;
        let z = tape.sum_rows(weighted).layer("normalizer")?;
        let density = tape.div(value, z).layer(layer)?;
        let shifted = tape.offset(density, -DENSITY_FLOOR).layer(layer)?;
        let clipped = tape.max0(shifted).layer(layer)?;
        let floored = tape.offset(clipped, DENSITY_FLOOR).layer(layer)?;
        let logs = tape.log(floored).layer(layer)?;
        let mean = tape.mean(logs).layer(layer)?;
        tape.neg(mean).layer(layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn zero_model_is_uniform() {
        for k in [2, 11] {
            let m = SplineModel::zeroed(3, Degree::Linear, k, DEFAULT_MIN_SPACING).unwrap();
            let d = m.density(&[0.3, -1.0, 2.0]).unwrap();
            for y in [0.0, 0.17, 0.5, 0.93, 1.0] {
                close(d.eval(y).unwrap(), 1.0, 1e-12);
            }
            close(m.nll(&[&[0.0, 0.0, 0.0]], &[0.4]).unwrap(), 0.0, 1e-12);
        }
    }

    #[test]
    fn random_model_densities_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for degree in [Degree::Linear, Degree::Quadratic] {
            let m = SplineModel::new(2, degree, 11, DEFAULT_MIN_SPACING, &mut rng).unwrap();
            let rows: Vec<[f64; 2]> = (0..8).map(|i| [i as f64 * 0.3 - 1.0, 0.5]).collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let ds = m.densities(&refs).unwrap();
            assert_eq!(ds.len(), 8);
            for d in &ds {
                assert_eq!(d.knots(), 11);
                assert!(d
                    .positions()
                    .windows(2)
                    .all(|w| w[1] - w[0] >= DEFAULT_MIN_SPACING * 0.999));
            }
        }
    }

    #[test]
    fn tape_nll_matches_density_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for degree in [Degree::Linear, Degree::Quadratic] {
            let m = SplineModel::new(1, degree, 7, DEFAULT_MIN_SPACING, &mut rng).unwrap();
            let xs: Vec<[f64; 1]> = (0..16).map(|i| [i as f64 / 8.0 - 1.0]).collect();
            let ys: Vec<f64> = (0..16).map(|i| (i as f64 * 0.618).fract()).collect();
            let refs: Vec<&[f64]> = xs.iter().map(|r| r.as_slice()).collect();
            let ds = m.densities(&refs).unwrap();
            let want: f64 = ds
                .iter()
                .zip(&ys)
                .map(|(d, &y)| -d.eval(y).unwrap().max(DENSITY_FLOOR).ln())
                .sum::<f64>()
                / 16.0;
            close(m.nll(&refs, &ys).unwrap(), want, 1e-10);
        }
    }

    #[test]
    fn input_dimension_is_checked() {
        let m = SplineModel::zeroed(2, Degree::Linear, 3, 0.01).unwrap();
        assert!(matches!(
            m.density(&[1.0]),
            Err(ModelError::InputDim { .. })
        ));
        assert!(SplineModel::zeroed(2, Degree::Linear, 1, 0.01).is_err());
        assert!(SplineModel::zeroed(2, Degree::Linear, 10, 0.1).is_err());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let a = SplineModel::zeroed(2, Degree::Linear, 5, 0.01).unwrap();
        let b = SplineModel::zeroed(2, Degree::Linear, 6, 0.01).unwrap();
        assert!(SplineModel::from_params(2, Degree::Linear, 5, 0.01, b.params.clone()).is_err());
        assert!(SplineModel::from_params(2, Degree::Linear, 5, 0.01, a.params.clone()).is_ok());
    }
}
