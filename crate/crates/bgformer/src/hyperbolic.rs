//! Hyperbolic embedding module: FC projection followed by the exponential map
//! at the origin of a Poincare ball, the pairwise cross-entropy loss on
//! hyperbolic distances, and the dual-branch total loss.

use crate::error::{Error, Result};
use crate::numerics::matrix::{matmul, Matrix};
use crate::numerics::params::{ParamGroup, ParamTensor};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{NodeId, Tape};

pub const DEFAULT_CURVATURE: f64 = 1.0;
pub const DEFAULT_TAU: f64 = 0.2;
pub const DEFAULT_NORM_CLIP: f64 = 0.999;

/// FC projection (C -> d) plus ball curvature, loss temperature and the
/// radial clip that keeps mapped points off the ball boundary.
#[derive(Debug, Clone)]
pub struct HemParams {
    pub fc_w: ParamTensor,
    pub fc_b: ParamTensor,
    pub curvature: f64,
    pub tau: f64,
    pub norm_clip: f64,
}

impl HemParams {
    pub fn init(rng: &mut Rng, in_dim: usize, embed_dim: usize, curvature: f64, tau: f64) -> Self {
        assert!(curvature > 0.0 && tau > 0.0);
        HemParams {
            fc_w: ParamTensor::new(
                "hem.fc_w",
                rng.normal_matrix(in_dim, embed_dim, 0.02),
                ParamGroup::BgformerHead,
            ),
            fc_b: ParamTensor::new(
                "hem.fc_b",
                Matrix::zeros(1, embed_dim),
                ParamGroup::BgformerHead,
            ),
            curvature,
            tau,
            norm_clip: DEFAULT_NORM_CLIP,
        }
    }

    /// Largest allowed tanh argument: artanh(norm_clip).
    pub fn max_map_arg(&self) -> f64 {
        self.norm_clip.atanh()
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.fc_w, &self.fc_b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.fc_w, &mut self.fc_b]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> HemIds {
        let mut reg = |p: &ParamTensor| {
            if trainable {
                tape.param(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            }
        };
        HemIds {
            fc_w: reg(&self.fc_w),
            fc_b: reg(&self.fc_b),
        }
    }

    pub fn read_grads(&mut self, tape: &Tape, ids: &HemIds) {
        self.fc_w.grad = tape.grad(ids.fc_w);
        self.fc_b.grad = tape.grad(ids.fc_b);
    }
}

/// Tape handles for registered HEM parameters.
pub struct HemIds {
    pub fc_w: NodeId,
    pub fc_b: NodeId,
}

/// HEM on an existing tape: FC projection, clipped exponential map.
pub fn hem_on_tape(tape: &mut Tape, f: NodeId, p: &HemParams, ids: &HemIds) -> Result<NodeId> {
    let v = tape.matmul(f, ids.fc_w)?;
    let v = tape.add_bias(v, ids.fc_b)?;
    tape.exp_map0(v, p.curvature, p.max_map_arg())
}

/// B x d Poincare-ball coordinates for a fixed curvature. Every row is
/// strictly inside the ball: sqrt(c) * ||z_i|| < 1.
#[derive(Debug, Clone)]
pub struct BallPoints {
    coords: Matrix,
    curvature: f64,
}

impl BallPoints {
    pub fn new(coords: Matrix, curvature: f64) -> Result<Self> {
        if curvature <= 0.0 {
            return Err(Error::contract(format!(
                "ball curvature must be positive, got {curvature}"
            )));
        }
        let sqrt_c = curvature.sqrt();
        for i in 0..coords.rows() {
            let norm = row_norm(coords.row(i));
            if sqrt_c * norm >= 1.0 {
                return Err(Error::domain(format!(
                    "row {i} is on or outside the ball boundary: sqrt(c)*||z|| = {}",
                    sqrt_c * norm
                )));
            }
        }
        Ok(BallPoints { coords, curvature })
    }

    pub(crate) fn new_unchecked(coords: Matrix, curvature: f64) -> Self {
        BallPoints { coords, curvature }
    }

    pub fn coords(&self) -> &Matrix {
        &self.coords
    }

    pub fn curvature(&self) -> f64 {
        self.curvature
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.coords.cols()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.coords.row(i)
    }
}

fn row_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mobius addition on the curvature-c ball.
pub fn mobius_add(u: &[f64], v: &[f64], c: f64) -> Vec<f64> {
    let uv = dot(u, v);
    let nu = dot(u, u);
    let nv = dot(v, v);
    let denom = 1.0 + 2.0 * c * uv + c * c * nu * nv;
    let cu = (1.0 + 2.0 * c * uv + c * nv) / denom;
    let cv = (1.0 - c * nu) / denom;
    u.iter().zip(v).map(|(a, b)| cu * a + cv * b).collect()
}

/// Exponential map at the origin: z = tanh(sqrt(c)||v||) * v / (sqrt(c)||v||),
/// applied row-wise. No radial clipping; see `hem_forward` for the clipped
/// variant used by the model. Inputs so large that tanh rounds to 1 are
/// rejected by the ball validator rather than returned on the boundary.
pub fn exp_map0(v: &Matrix, c: f64) -> Result<BallPoints> {
    if c <= 0.0 {
        return Err(Error::contract(format!(
            "curvature must be positive, got {c}"
        )));
    }
    BallPoints::new(exp_map0_clip_kernel(v, c, f64::INFINITY), c)
}

/// Row-wise exponential map with the tanh argument capped at `max_arg`.
pub(crate) fn exp_map0_clip_kernel(v: &Matrix, c: f64, max_arg: f64) -> Matrix {
    let sqrt_c = c.sqrt();
    let mut out = Matrix::zeros(v.rows(), v.cols());
    for i in 0..v.rows() {
        let row = v.row(i);
        let n = row_norm(row);
        let orow = out.row_mut(i);
        if n == 0.0 {
            continue;
        }
        let r = sqrt_c * n;
        // tanh(r)/r applied to the (possibly rescaled) row; with the clip
        // active this reduces to a fixed hyperbolic radius.
        let g = if r > max_arg {
            max_arg.tanh() / (sqrt_c * n)
        } else {
            r.tanh() / r
        };
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = g * x;
        }
    }
    out
}

/// Reverse-mode of `exp_map0_clip_kernel`.
pub(crate) fn exp_map0_clip_backward(v: &Matrix, c: f64, max_arg: f64, g: &Matrix) -> Matrix {
    let sqrt_c = c.sqrt();
    let mut out = Matrix::zeros(v.rows(), v.cols());
    for i in 0..v.rows() {
        let row = v.row(i);
        let grow = g.row(i);
        let orow = out.row_mut(i);
        let n = row_norm(row);
        if n == 0.0 {
            // Jacobian at the origin is the identity.
            orow.copy_from_slice(grow);
            continue;
        }
        let r = sqrt_c * n;
        let gv = dot(grow, row);
        if r > max_arg {
            // z = K * v/||v|| with K = tanh(max_arg)/sqrt(c): pure radial
            // normalization to a fixed radius.
            let k = max_arg.tanh() / sqrt_c;
            for ((o, &gk), &vk) in orow.iter_mut().zip(grow).zip(row) {
                *o = k / n * (gk - vk * gv / (n * n));
            }
        } else {
            let (gf, gfd) = tanh_ratio_and_grad(r);
            for ((o, &gk), &vk) in orow.iter_mut().zip(grow).zip(row) {
                *o = gf * gk + gfd * sqrt_c * vk / n * gv;
            }
        }
    }
    out
}

/// (tanh(r)/r, d/dr tanh(r)/r); series near zero to avoid cancellation.
fn tanh_ratio_and_grad(r: f64) -> (f64, f64) {
    if r < 1e-3 {
        let r2 = r * r;
        (
            1.0 - r2 / 3.0 + 2.0 * r2 * r2 / 15.0,
            -2.0 * r / 3.0 + 8.0 * r * r2 / 15.0,
        )
    } else {
        let t = r.tanh();
        (t / r, (r * (1.0 - t * t) - t) / (r * r))
    }
}

/// Geodesic distance d_c(x, y) = (2/sqrt(c)) artanh(sqrt(c) ||(-x) (+) y||).
pub fn poincare_distance(x: &[f64], y: &[f64], c: f64) -> Result<f64> {
    let sqrt_c = c.sqrt();
    for (name, p) in [("x", x), ("y", y)] {
        if sqrt_c * row_norm(p) >= 1.0 {
            return Err(Error::domain(format!(
                "point {name} is on or outside the ball boundary"
            )));
        }
    }
    let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
    let m = mobius_add(&neg_x, y, c);
    Ok(2.0 / sqrt_c * (sqrt_c * row_norm(&m)).atanh())
}

/// Full B x B matrix of pairwise distances between rows of `z`. Symmetric,
/// zero diagonal. Assumes the BallPoints invariant.
pub fn pairwise_distance_matrix(z: &BallPoints) -> Matrix {
    pairwise_dist_kernel(z.coords(), z.curvature())
}

pub(crate) fn pairwise_dist_kernel(z: &Matrix, c: f64) -> Matrix {
    let b = z.rows();
    let sqrt_c = c.sqrt();
    let norms2: Vec<f64> = (0..b).map(|i| dot(z.row(i), z.row(i))).collect();
    let mut d = Matrix::zeros(b, b);
    for i in 0..b {
        for j in (i + 1)..b {
            let xy = dot(z.row(i), z.row(j));
            // ||(-x) (+) y||^2 in closed form from the three inner products.
            let uv = -xy;
            let (nu, nv) = (norms2[i], norms2[j]);
            let denom = 1.0 + 2.0 * c * uv + c * c * nu * nv;
            let a = 1.0 + 2.0 * c * uv + c * nv;
            let bb = 1.0 - c * nu;
            let m2 = (a * a * nu + 2.0 * a * bb * uv + bb * bb * nv) / (denom * denom);
            let w = m2.max(0.0).sqrt();
            let dist = 2.0 / sqrt_c * (sqrt_c * w).atanh();
            d.set(i, j, dist);
            d.set(j, i, dist);
        }
    }
    d
}

/// Reverse-mode of `pairwise_dist_kernel`: scatters the upstream B x B
/// gradient back onto the points. Coincident pairs contribute nothing (the
/// distance is at its minimum there and has no defined direction).
pub(crate) fn pairwise_dist_backward(z: &Matrix, c: f64, g: &Matrix) -> Matrix {
    let b = z.rows();
    let dim = z.cols();
    let sqrt_c = c.sqrt();
    let norms2: Vec<f64> = (0..b).map(|i| dot(z.row(i), z.row(i))).collect();
    let bfac: Vec<f64> = norms2.iter().map(|&n| 1.0 - c * n).collect();
    let mut out = Matrix::zeros(b, dim);
    for i in 0..b {
        for j in (i + 1)..b {
            let up = g.get(i, j) + g.get(j, i);
            if up == 0.0 {
                continue;
            }
            let a2: f64 = z
                .row(i)
                .iter()
                .zip(z.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            if a2 < 1e-30 {
                continue;
            }
            let (bi, bj) = (bfac[i], bfac[j]);
            let t = 2.0 * c * a2 / (bi * bj);
            let sqrt_term = (t * (t + 2.0)).sqrt();
            let coef_i = up * 4.0 * c / (sqrt_c * bi * bi * bj * sqrt_term);
            let coef_j = up * 4.0 * c / (sqrt_c * bj * bj * bi * sqrt_term);
            for k in 0..dim {
                let (xi, xj) = (z.get(i, k), z.get(j, k));
                *out.row_mut(i).get_mut(k).unwrap() += coef_i * ((xi - xj) * bi + c * a2 * xi);
                *out.row_mut(j).get_mut(k).unwrap() += coef_j * ((xj - xi) * bj + c * a2 * xj);
            }
        }
    }
    out
}

/// FC projection, radial clip, exponential map. The clip rescales rows whose
/// tanh argument would exceed artanh(norm_clip), so mapped points satisfy
/// sqrt(c)||z|| <= norm_clip.
pub fn hem_forward(f: &Matrix, p: &HemParams) -> Result<BallPoints> {
    let mut v = matmul(f, &p.fc_w.value)?;
    for i in 0..v.rows() {
        for (x, b) in v.row_mut(i).iter_mut().zip(p.fc_b.value.row(0)) {
            *x += b;
        }
    }
    Ok(BallPoints::new_unchecked(
        exp_map0_clip_kernel(&v, p.curvature, p.max_map_arg()),
        p.curvature,
    ))
}

/// Mean over ordered positive pairs (i, j) of the temperature-scaled pairwise
/// cross entropy; the denominator for anchor i runs over all m != i.
pub fn pairwise_ce_loss(z: &BallPoints, labels: &[i64], p: &HemParams) -> Result<f64> {
    if z.len() != labels.len() {
        return Err(Error::contract(format!(
            "point count {} != label count {}",
            z.len(),
            labels.len()
        )));
    }
    let d = pairwise_distance_matrix(z);
    ce_loss_from_distances(&d, labels, p.tau)
}

fn label_histogram(labels: &[i64]) -> String {
    let mut counts: std::collections::BTreeMap<i64, usize> = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    let parts: Vec<String> = counts.iter().map(|(l, c)| format!("{l}:{c}")).collect();
    parts.join(" ")
}

pub(crate) fn positive_pair_count(labels: &[i64]) -> usize {
    let b = labels.len();
    let mut n = 0;
    for i in 0..b {
        for j in 0..b {
            if i != j && labels[i] == labels[j] {
                n += 1;
            }
        }
    }
    n
}

/// Loss value from a precomputed distance matrix; log-sum-exp stabilized.
pub(crate) fn ce_loss_from_distances(d: &Matrix, labels: &[i64], tau: f64) -> Result<f64> {
    let b = labels.len();
    let n_pos = positive_pair_count(labels);
    if n_pos == 0 {
        return Err(Error::contract(format!(
            "pairwise loss needs at least one positive pair; batch has class sizes [{}]",
            label_histogram(labels)
        )));
    }
    let lse = anchor_lse(d, tau);
    let mut loss = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i != j && labels[i] == labels[j] {
                loss += d.get(i, j) / tau + lse[i];
            }
        }
    }
    Ok(loss / n_pos as f64)
}

/// Per-anchor log sum_{m != i} exp(-d_im / tau).
fn anchor_lse(d: &Matrix, tau: f64) -> Vec<f64> {
    let b = d.rows();
    (0..b)
        .map(|i| {
            let mut max = f64::NEG_INFINITY;
            for m in 0..b {
                if m != i {
                    max = max.max(-d.get(i, m) / tau);
                }
            }
            let sum: f64 = (0..b)
                .filter(|&m| m != i)
                .map(|m| (-d.get(i, m) / tau - max).exp())
                .sum();
            max + sum.ln()
        })
        .collect()
}

/// Reverse-mode of `ce_loss_from_distances` onto the distance matrix.
pub(crate) fn ce_loss_backward(d: &Matrix, labels: &[i64], tau: f64, upstream: f64) -> Matrix {
    let b = labels.len();
    let n_pos = positive_pair_count(labels) as f64;
    let lse = anchor_lse(d, tau);
    let pos_per_anchor: Vec<f64> = (0..b)
        .map(|i| (0..b).filter(|&j| j != i && labels[j] == labels[i]).count() as f64)
        .collect();
    let mut out = Matrix::zeros(b, b);
    let scale = upstream / (n_pos * tau);
    for i in 0..b {
        for m in 0..b {
            if m == i {
                continue;
            }
            let sigma = (-d.get(i, m) / tau - lse[i]).exp();
            let pos = if labels[i] == labels[m] { 1.0 } else { 0.0 };
            out.set(i, m, scale * (pos - pos_per_anchor[i] * sigma));
        }
    }
    out
}

/// alpha * l1 + (1 - alpha) * l2 for the dual HEM branches.
pub fn total_loss(l1: f64, l2: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!(
            "loss weight alpha must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(alpha * l1 + (1.0 - alpha) * l2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hem_for_test(tau: f64) -> HemParams {
        let mut rng = Rng::new(0);
        let mut p = HemParams::init(&mut rng, 4, 3, 1.0, tau);
        p.fc_w.value = Matrix::zeros(4, 3);
        p
    }

    #[test]
    fn exp_map_fixes_origin() {
        let z = exp_map0(&Matrix::zeros(3, 4), 1.0).unwrap();
        assert!(z.coords().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exp_map_hand_inversion() {
        let v = Matrix::from_rows(&[&[0.5f64.atanh(), 0.0]]);
        let z = exp_map0(&v, 1.0).unwrap();
        assert!((z.coords().get(0, 0) - 0.5).abs() < 1e-15);
        assert_eq!(z.coords().get(0, 1), 0.0);
    }

    #[test]
    fn exp_map_lands_strictly_inside() {
        let mut rng = Rng::new(2);
        let v = rng.normal_matrix(10, 6, 3.0);
        let c = 0.7;
        let z = exp_map0(&v, c).unwrap();
        for i in 0..10 {
            let arg = c.sqrt() * row_norm(v.row(i));
            let got = c.sqrt() * row_norm(z.point(i));
            assert!((got - arg.tanh()).abs() < 1e-12);
            assert!(got < 1.0);
        }
    }

    #[test]
    fn distance_identity_and_hand_value() {
        let x = [0.3, -0.2, 0.1];
        assert!(poincare_distance(&x, &x, 1.0).unwrap() < 1e-12);
        let o = [0.0, 0.0];
        let y = [0.5, 0.0];
        let d = poincare_distance(&o, &y, 1.0).unwrap();
        assert!((d - 2.0 * 0.5f64.atanh()).abs() < 1e-14);
        assert!((d - 1.0986122886681098).abs() < 1e-12);
    }

    #[test]
    fn distance_euclidean_limit() {
        let mut rng = Rng::new(6);
        let c = 1e-6;
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.normal() * 0.04).collect();
            let y: Vec<f64> = (0..4).map(|_| rng.normal() * 0.04).collect();
            let d = poincare_distance(&x, &y, c).unwrap();
            let e: f64 = x
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!((d - 2.0 * e).abs() < 1e-3, "d={d} 2e={}", 2.0 * e);
        }
    }

    #[test]
    fn distance_rejects_boundary_points() {
        let x = [1.0, 0.0];
        let y = [0.1, 0.0];
        assert!(matches!(
            poincare_distance(&x, &y, 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn distance_symmetry_and_triangle() {
        let mut rng = Rng::new(10);
        let c: f64 = 1.3;
        let max_norm = 0.85 / c.sqrt();
        for _ in 0..200 {
            let pts: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..3).map(|_| rng.normal() * 0.3).collect())
                .collect();
            let pts: Vec<Vec<f64>> = pts
                .into_iter()
                .map(|p| {
                    let n = row_norm(&p);
                    if n >= max_norm {
                        p.iter().map(|v| v * max_norm / n).collect()
                    } else {
                        p
                    }
                })
                .collect();
            let dxy = poincare_distance(&pts[0], &pts[1], c).unwrap();
            let dyx = poincare_distance(&pts[1], &pts[0], c).unwrap();
            assert!((dxy - dyx).abs() < 1e-12);
            let dyz = poincare_distance(&pts[1], &pts[2], c).unwrap();
            let dxz = poincare_distance(&pts[0], &pts[2], c).unwrap();
            assert!(dxz <= dxy + dyz + 1e-9);
        }
    }

    #[test]
    fn pairwise_matrix_matches_pointwise_distance() {
        let mut rng = Rng::new(11);
        let v = rng.normal_matrix(6, 4, 0.8);
        let z = exp_map0(&v, 2.0).unwrap();
        let d = pairwise_distance_matrix(&z);
        for i in 0..6 {
            assert_eq!(d.get(i, i), 0.0);
            for j in 0..6 {
                let want = poincare_distance(z.point(i), z.point(j), 2.0).unwrap();
                assert!((d.get(i, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hem_forward_zero_params_map_to_origin() {
        let p = hem_for_test(0.2);
        let f = Matrix::filled(5, 4, 2.0);
        let z = hem_forward(&f, &p).unwrap();
        assert!(z.coords().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hem_forward_clips_inside_ball() {
        let mut rng = Rng::new(3);
        let mut p = HemParams::init(&mut rng, 4, 3, 1.0, 0.2);
        p.fc_w.value = rng.normal_matrix(4, 3, 50.0);
        let f = rng.normal_matrix(8, 4, 1.0);
        let z = hem_forward(&f, &p).unwrap();
        for i in 0..8 {
            let n = row_norm(z.point(i));
            assert!(n < 1.0);
            assert!(n <= p.norm_clip + 1e-12);
        }
        // Construction must satisfy the BallPoints validator too.
        BallPoints::new(z.coords().clone(), 1.0).unwrap();
    }

    #[test]
    fn loss_degenerate_pair_is_zero() {
        let z = BallPoints::new(Matrix::from_rows(&[&[0.1, 0.2], &[0.1, 0.2]]), 1.0).unwrap();
        let p = hem_for_test(0.2);
        let loss = pairwise_ce_loss(&z, &[4, 4], &p).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn loss_all_origin_three_points() {
        let z = BallPoints::new(Matrix::zeros(3, 2), 1.0).unwrap();
        let p = hem_for_test(0.2);
        let loss = pairwise_ce_loss(&z, &[0, 0, 1], &p).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_when_positives_approach() {
        let p = hem_for_test(0.2);
        let far = BallPoints::new(
            Matrix::from_rows(&[&[0.4, 0.0], &[-0.4, 0.0], &[0.0, 0.5]]),
            1.0,
        )
        .unwrap();
        let near = BallPoints::new(
            Matrix::from_rows(&[&[0.4, 0.0], &[0.3, 0.0], &[0.0, 0.5]]),
            1.0,
        )
        .unwrap();
        let labels = [1, 1, 2];
        let l_far = pairwise_ce_loss(&far, &labels, &p).unwrap();
        let l_near = pairwise_ce_loss(&near, &labels, &p).unwrap();
        assert!(l_near < l_far, "near {l_near} far {l_far}");
    }

    #[test]
    fn loss_requires_positive_pair() {
        let z = BallPoints::new(Matrix::zeros(3, 2), 1.0).unwrap();
        let p = hem_for_test(0.2);
        let err = pairwise_ce_loss(&z, &[0, 1, 2], &p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("positive pair"), "{msg}");
        assert!(msg.contains("0:1"), "{msg}");
    }

    #[test]
    fn total_loss_weighting() {
        assert_eq!(total_loss(3.0, 9.0, 1.0).unwrap(), 3.0);
        assert_eq!(total_loss(3.0, 9.0, 0.0).unwrap(), 9.0);
        assert!((total_loss(1.0, 2.0, 0.6).unwrap() - 1.4).abs() < 1e-15);
        assert!(total_loss(1.0, 2.0, 1.5).is_err());
        assert!(total_loss(1.0, 2.0, -0.1).is_err());
    }
}
