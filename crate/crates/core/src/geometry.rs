//! Riemannian primitives for a metric on R^n: inner products, path length,
//! Christoffel symbols, geodesic shooting, exponential/log maps, the
//! geodesic distance `d_g` and the gradient of `d_g^2` in its second
//! argument.
//!
//! Geodesics are integrated with fixed-step RK4; the log map inverts the
//! exponential by damped-Newton shooting. Uniqueness of minimizing geodesics
//! is assumed (it holds by construction for the constant and pulled-back
//! flat metrics this crate is exercised on); shooting failures are surfaced
//! as errors, never hidden.

use thiserror::Error;

use crate::expr::{EvalError, Expr, ExprMatrix};
use crate::linalg::{self, add_vec, lu_factor, norm2, norm_inf, sub_vec, sym_eigen, Mat};

/// Hard floor on metric eigenvalues; anything below is treated as a loss of
/// positive definiteness.
pub const MIN_METRIC_EIGENVALUE: f64 = 1e-10;

/// Residual tolerance for the shooting Newton iteration.
pub const SHOOTING_TOL: f64 = 1e-8;

const SHOOTING_MAX_ITERS: usize = 50;
const BLOWUP_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("metric matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("metric entries must not reference control variables")]
    ControlInMetric,
    #[error("metric entry ({i},{j}) is not symmetric to its transpose (difference {diff:.3e} at a sample point)")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("metric references x{index} beyond dimension {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("metric not positive definite at {x:?} (min eigenvalue {min_eig:.3e})")]
    NotPositiveDefinite { x: Vec<f64>, min_eig: f64 },
    #[error("geodesic integration blew up (state norm exceeded {BLOWUP_LIMIT:.0e})")]
    GeodesicBlowup,
    #[error(
        "log map shooting did not converge after {iterations} iterations \
         (best residual {residual:.3e}); the metric may be incomplete or the \
         minimizing geodesic non-unique"
    )]
    ShootingFailed { residual: f64, iterations: usize },
    #[error("degenerate polyline: need at least two points")]
    DegeneratePath,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// A Riemannian metric on R^n given entrywise by expressions of the state.
///
/// Symmetry is enforced at construction (structural equality of the entry
/// expressions, falling back to agreement on sampled points) and positive
/// definiteness is checked at every evaluation point.
#[derive(Clone, Debug)]
pub struct MetricField {
    n: usize,
    entries: ExprMatrix,
    /// Cached value when every entry is a constant expression.
    constant: Option<Mat>,
}

impl MetricField {
    pub fn new(entries: ExprMatrix) -> Result<Self, GeometryError> {
        if entries.rows() != entries.cols() {
            return Err(GeometryError::NotSquare { rows: entries.rows(), cols: entries.cols() });
        }
        let n = entries.rows();
        if entries.uses_control() {
            return Err(GeometryError::ControlInMetric);
        }
        if let Some(k) = entries.max_state_index() {
            if k >= n {
                return Err(GeometryError::IndexOutOfRange { index: k + 1, n });
            }
        }
        // entrywise symmetry: identical ASTs, else numerically equal on a
        // low-discrepancy sample of points
        for i in 0..n {
            for j in (i + 1)..n {
                if entries.entry(i, j) == entries.entry(j, i) {
                    continue;
                }
                for s in 0..32 {
                    let x: Vec<f64> = (0..n)
                        .map(|d| -10.0 + 20.0 * crate::contraction::halton(s + 1, PRIMES[d]))
                        .collect();
                    let a = entries.entry(i, j).eval(&x, &[])?;
                    let b = entries.entry(j, i).eval(&x, &[])?;
                    if (a - b).abs() > 1e-9 * (1.0 + a.abs()) {
                        return Err(GeometryError::NotSymmetric { i: i + 1, j: j + 1, diff: a - b });
                    }
                }
            }
        }
        let constant = if entries.is_constant() {
            let m = entries.eval(&vec![0.0; n])?;
            check_positive_definite(&m, &vec![0.0; n])?;
            Some(m.sym_part())
        } else {
            None
        };
        Ok(MetricField { n, entries, constant })
    }

    /// The Euclidean metric on R^n.
    pub fn identity(n: usize) -> Self {
        let entries = ExprMatrix::new(
            n,
            n,
            (0..n * n)
                .map(|k| Expr::Const(if k % (n + 1) == 0 { 1.0 } else { 0.0 }))
                .collect(),
        );
        MetricField::new(entries).expect("identity metric is valid")
    }

    /// Constant metric from a symmetric positive definite matrix.
    pub fn constant(g: &Mat) -> Result<Self, GeometryError> {
        let entries = ExprMatrix::new(
            g.rows(),
            g.cols(),
            (0..g.rows())
                .flat_map(|i| (0..g.cols()).map(move |j| (i, j)))
                .map(|(i, j)| Expr::Const(g.get(i, j)))
                .collect(),
        );
        MetricField::new(entries)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_constant(&self) -> bool {
        self.constant.is_some()
    }

    pub fn entries(&self) -> &ExprMatrix {
        &self.entries
    }

    /// Evaluate `G(x)`, symmetrized, and verify positive definiteness.
    pub fn eval(&self, x: &[f64]) -> Result<Mat, GeometryError> {
        self.check_dim(x)?;
        if let Some(m) = &self.constant {
            return Ok(m.clone());
        }
        let m = self.entries.eval(x)?.sym_part();
        check_positive_definite(&m, x)?;
        Ok(m)
    }

    /// Inner product `<v, w>_{g(x)} = v^T G(x) w`, exactly symmetric in
    /// `(v, w)`.
    pub fn inner(&self, x: &[f64], v: &[f64], w: &[f64]) -> Result<f64, GeometryError> {
        let g = self.eval(x)?;
        if v.len() != self.n || w.len() != self.n {
            return Err(GeometryError::Dim { expected: self.n, got: v.len().max(w.len()) });
        }
        let mut acc = 0.0;
        for i in 0..self.n {
            acc += g.get(i, i) * (v[i] * w[i]);
        }
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                acc += g.get(i, j) * (v[i] * w[j] + v[j] * w[i]);
            }
        }
        Ok(acc)
    }

    /// Norm `|v|_{g(x)}`.
    pub fn norm(&self, x: &[f64], v: &[f64]) -> Result<f64, GeometryError> {
        Ok(self.inner(x, v, v)?.max(0.0).sqrt())
    }

    /// Entrywise directional derivative of `G` at `x` along `v`,
    /// symmetrized.
    pub fn directional_derivative(&self, x: &[f64], v: &[f64]) -> Result<Mat, GeometryError> {
        self.check_dim(x)?;
        if self.constant.is_some() {
            return Ok(Mat::zeros(self.n, self.n));
        }
        Ok(self.entries.directional_derivative(x, v)?.sym_part())
    }

    /// All coordinate partials `dG/dx_l`, `l = 1..n`.
    pub fn partials(&self, x: &[f64]) -> Result<Vec<Mat>, GeometryError> {
        (0..self.n)
            .map(|l| {
                let mut e = vec![0.0; self.n];
                e[l] = 1.0;
                self.directional_derivative(x, &e)
            })
            .collect()
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), GeometryError> {
        if x.len() != self.n {
            Err(GeometryError::Dim { expected: self.n, got: x.len() })
        } else {
            Ok(())
        }
    }
}

const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn check_positive_definite(m: &Mat, x: &[f64]) -> Result<(), GeometryError> {
    let min_eig = sym_eigen(m).min();
    if min_eig <= MIN_METRIC_EIGENVALUE {
        return Err(GeometryError::NotPositiveDefinite { x: x.to_vec(), min_eig });
    }
    Ok(())
}

/// Composite midpoint-rule length of a polyline under the metric: each
/// segment contributes `|p_{k+1} - p_k|` measured at the segment midpoint.
/// Second-order accurate in the number of samples along a smooth path.
pub fn path_length(g: &MetricField, points: &[Vec<f64>]) -> Result<f64, GeometryError> {
    if points.len() < 2 {
        return Err(GeometryError::DegeneratePath);
    }
    let mut total = 0.0;
    for w in points.windows(2) {
        let delta = sub_vec(&w[1], &w[0]);
        let mid: Vec<f64> = w[0].iter().zip(&w[1]).map(|(a, b)| 0.5 * (a + b)).collect();
        total += g.norm(&mid, &delta)?;
    }
    Ok(total)
}

/// Christoffel symbols of the second kind at a point, `G^k_{ij}` stored as
/// `data[k][i * n + j]`.
pub struct Christoffel {
    n: usize,
    data: Vec<Vec<f64>>,
}

impl Christoffel {
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[k][i * self.n + j]
    }

    /// Contraction `Gamma(v, w)^k = sum_ij Gamma^k_ij v_i w_j`.
    pub fn quadratic(&self, v: &[f64], w: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|k| {
                let mut s = 0.0;
                for i in 0..self.n {
                    for j in 0..self.n {
                        s += self.get(k, i, j) * v[i] * w[j];
                    }
                }
                s
            })
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// `Gamma^k_{ij} = 1/2 (G^-1)_{kl} (d_i G_{jl} + d_j G_{il} - d_l G_{ij})`.
pub fn christoffel(g: &MetricField, x: &[f64]) -> Result<Christoffel, GeometryError> {
    let n = g.dim();
    if g.is_constant() {
        return Ok(Christoffel { n, data: vec![vec![0.0; n * n]; n] });
    }
    let gm = g.eval(x)?;
    let dg = g.partials(x)?;
    let lu = lu_factor(&gm)?;
    let mut data = vec![vec![0.0; n * n]; n];
    for i in 0..n {
        for j in i..n {
            let rhs: Vec<f64> = (0..n)
                .map(|l| 0.5 * (dg[i].get(j, l) + dg[j].get(i, l) - dg[l].get(i, j)))
                .collect();
            let gamma = lu.solve(&rhs);
            for k in 0..n {
                data[k][i * n + j] = gamma[k];
                data[k][j * n + i] = gamma[k];
            }
        }
    }
    Ok(Christoffel { n, data })
}

/// Default geodesic step count for an initial velocity `v`.
pub fn geodesic_steps(v: &[f64]) -> usize {
    64usize.max((16.0 * norm2(v)).ceil() as usize)
}

/// Riemannian exponential map: integrate the geodesic equation
/// `gamma'' = -Gamma(gamma)(gamma', gamma')` from `(xhat, v)` over unit time
/// with fixed-step RK4 and return the endpoint.
pub fn exp_map(
    g: &MetricField,
    xhat: &[f64],
    v: &[f64],
    steps: Option<usize>,
) -> Result<Vec<f64>, GeometryError> {
    let n = g.dim();
    if xhat.len() != n || v.len() != n {
        return Err(GeometryError::Dim { expected: n, got: xhat.len().max(v.len()) });
    }
    if g.is_constant() {
        // flat connection: exp_xhat(v) = xhat + v exactly
        return Ok(add_vec(xhat, v));
    }
    let steps = steps.unwrap_or_else(|| geodesic_steps(v));
    let h = 1.0 / steps as f64;
    // y = (position, velocity)
    let mut pos = xhat.to_vec();
    let mut vel = v.to_vec();
    let deriv = |p: &[f64], w: &[f64]| -> Result<(Vec<f64>, Vec<f64>), GeometryError> {
        let gamma = christoffel(g, p)?;
        let acc: Vec<f64> = gamma.quadratic(w, w).iter().map(|a| -a).collect();
        Ok((w.to_vec(), acc))
    };
    for _ in 0..steps {
        let (k1p, k1v) = deriv(&pos, &vel)?;
        let (k2p, k2v) = deriv(
            &combine(&pos, &[(0.5 * h, &k1p)]),
            &combine(&vel, &[(0.5 * h, &k1v)]),
        )?;
        let (k3p, k3v) = deriv(
            &combine(&pos, &[(0.5 * h, &k2p)]),
            &combine(&vel, &[(0.5 * h, &k2v)]),
        )?;
        let (k4p, k4v) = deriv(&combine(&pos, &[(h, &k3p)]), &combine(&vel, &[(h, &k3v)]))?;
        let w = h / 6.0;
        pos = combine(&pos, &[(w, &k1p), (2.0 * w, &k2p), (2.0 * w, &k3p), (w, &k4p)]);
        vel = combine(&vel, &[(w, &k1v), (2.0 * w, &k2v), (2.0 * w, &k3v), (w, &k4v)]);
        if norm_inf(&pos).max(norm_inf(&vel)) > BLOWUP_LIMIT {
            return Err(GeometryError::GeodesicBlowup);
        }
    }
    Ok(pos)
}

fn combine(base: &[f64], terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = base.to_vec();
    for &(s, t) in terms {
        for (o, ti) in out.iter_mut().zip(t) {
            *o += s * ti;
        }
    }
    out
}

/// Result of inverting the exponential map at `xhat`.
#[derive(Clone, Debug)]
pub struct LogMapResult {
    /// Tangent vector at `xhat` with `exp_xhat(v) = x`.
    pub v: Vec<f64>,
    /// Geodesic distance `|v|_{g(xhat)}`.
    pub distance: f64,
    /// Final Euclidean shooting residual `|exp_xhat(v) - x|`.
    pub residual: f64,
    /// Newton iterations used.
    pub iterations: usize,
}

/// Invert the exponential map by damped-Newton shooting on
/// `v -> exp_xhat(v) - x`, initialized at `v0 = x - xhat`. The Jacobian of
/// the shooting map is formed by central finite differences.
pub fn log_map(g: &MetricField, xhat: &[f64], x: &[f64]) -> Result<LogMapResult, GeometryError> {
    let n = g.dim();
    if xhat.len() != n || x.len() != n {
        return Err(GeometryError::Dim { expected: n, got: xhat.len().max(x.len()) });
    }
    let mut v = sub_vec(x, xhat);
    let mut residual_vec = sub_vec(&exp_map(g, xhat, &v, None)?, x);
    let mut residual = norm2(&residual_vec);
    let mut iterations = 0;
    while residual > SHOOTING_TOL && iterations < SHOOTING_MAX_ITERS {
        iterations += 1;
        // finite-difference Jacobian of the shooting map
        let fd = 1e-6 * (1.0 + norm2(&v));
        let mut jac = Mat::zeros(n, n);
        for j in 0..n {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[j] += fd;
            vm[j] -= fd;
            let ep = exp_map(g, xhat, &vp, None)?;
            let em = exp_map(g, xhat, &vm, None)?;
            for i in 0..n {
                jac.set(i, j, (ep[i] - em[i]) / (2.0 * fd));
            }
        }
        let neg_res: Vec<f64> = residual_vec.iter().map(|r| -r).collect();
        let delta = lu_factor(&jac)?.solve(&neg_res);
        // damping: halve until the residual decreases
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let v_try = combine(&v, &[(t, &delta)]);
            let r_try_vec = sub_vec(&exp_map(g, xhat, &v_try, None)?, x);
            let r_try = norm2(&r_try_vec);
            if r_try < residual {
                v = v_try;
                residual_vec = r_try_vec;
                residual = r_try;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if residual > SHOOTING_TOL {
        return Err(GeometryError::ShootingFailed { residual, iterations });
    }
    let distance = g.norm(xhat, &v)?;
    Ok(LogMapResult { v, distance, residual, iterations })
}

/// Geodesic distance `d_g(x1, x2) = |log_{x1}(x2)|_{g(x1)}`.
pub fn distance(g: &MetricField, x1: &[f64], x2: &[f64]) -> Result<f64, GeometryError> {
    Ok(log_map(g, x1, x2)?.distance)
}

/// Riemannian gradient of `xhat -> d_g^2(x, xhat)` at `xhat`:
/// `-2 exp_xhat^{-1}(x)`. Vanishes exactly when `x = xhat`.
pub fn grad_d2(g: &MetricField, x: &[f64], xhat: &[f64]) -> Result<Vec<f64>, GeometryError> {
    let log = log_map(g, xhat, x)?;
    Ok(log.v.iter().map(|c| -2.0 * c).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pe(src: &str) -> Expr {
        parse_expr(src, 2, 0).unwrap()
    }

    /// Pullback of the flat metric by phi(x) = (x1, x2 + x1^2):
    /// G = Dphi^T Dphi = [[1+4x1^2, 2x1], [2x1, 1]].
    fn pullback_metric() -> MetricField {
        MetricField::new(ExprMatrix::new(
            2,
            2,
            vec![pe("1 + 4*x1^2"), pe("2*x1"), pe("2*x1"), Expr::Const(1.0)],
        ))
        .unwrap()
    }

    fn phi(x: &[f64]) -> Vec<f64> {
        vec![x[0], x[1] + x[0] * x[0]]
    }

    fn phi_inv(y: &[f64]) -> Vec<f64> {
        vec![y[0], y[1] - y[0] * y[0]]
    }

    fn diag_metric() -> MetricField {
        MetricField::constant(&Mat::diag(&[1.0, 4.0])).unwrap()
    }

    #[test]
    fn metric_values_are_shareable_across_threads() {
        fn check<T: Send + Sync>() {}
        check::<MetricField>();
        check::<LogMapResult>();
    }

    #[test]
    fn inner_identity() {
        let g = MetricField::identity(2);
        let v = [3.0, 4.0];
        assert_eq!(g.inner(&[0.0, 0.0], &v, &v).unwrap(), 25.0);
    }

    #[test]
    fn inner_diagonal() {
        let g = diag_metric();
        assert_eq!(g.inner(&[0.0, 0.0], &[1.0, 1.0], &[1.0, 1.0]).unwrap(), 5.0);
    }

    #[test]
    fn inner_exactly_symmetric() {
        let g = pullback_metric();
        let x = [0.37, -1.2];
        let v = [0.31, -2.7];
        let w = [1.9, 0.411];
        let a = g.inner(&x, &v, &w).unwrap();
        let b = g.inner(&x, &w, &v).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn metric_must_be_positive_definite() {
        let bad = MetricField::constant(&Mat::diag(&[1.0, -1.0]));
        assert!(matches!(bad, Err(GeometryError::NotPositiveDefinite { .. })));
        // non-constant loss of definiteness at evaluation time
        let g = MetricField::new(ExprMatrix::new(
            2,
            2,
            vec![pe("x1^2"), Expr::Const(0.0), Expr::Const(0.0), Expr::Const(1.0)],
        ))
        .unwrap();
        assert!(g.eval(&[2.0, 0.0]).is_ok());
        assert!(matches!(
            g.eval(&[0.0, 0.0]),
            Err(GeometryError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn asymmetric_metric_rejected() {
        let err = MetricField::new(ExprMatrix::new(
            2,
            2,
            vec![Expr::Const(1.0), pe("x1"), pe("2*x1"), Expr::Const(1.0)],
        ));
        assert!(matches!(err, Err(GeometryError::NotSymmetric { .. })));
    }

    #[test]
    fn path_length_euclidean_straight_segment() {
        let g = MetricField::identity(2);
        for n in [1usize, 7, 100] {
            let pts: Vec<Vec<f64>> = (0..=n)
                .map(|k| {
                    let t = k as f64 / n as f64;
                    vec![3.0 * t, 4.0 * t]
                })
                .collect();
            assert_abs_diff_eq!(path_length(&g, &pts).unwrap(), 5.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn path_length_constant_metric_closed_form() {
        let g = diag_metric();
        let pts = vec![vec![0.0, 0.0], vec![0.5, 0.5], vec![1.0, 1.0]];
        assert_abs_diff_eq!(path_length(&g, &pts).unwrap(), 5f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn path_length_rejects_single_point() {
        let g = MetricField::identity(2);
        assert!(matches!(
            path_length(&g, &[vec![1.0, 2.0]]),
            Err(GeometryError::DegeneratePath)
        ));
    }

    #[test]
    fn path_length_refinement_is_second_order() {
        // sample a fixed smooth curve at increasing resolution under the
        // pullback metric; the midpoint rule converges at O(N^-2)
        let g = pullback_metric();
        let curve = |t: f64| vec![t, (2.0 * t).sin()];
        let length_at = |n: usize| {
            let pts: Vec<Vec<f64>> = (0..=n).map(|k| curve(k as f64 / n as f64)).collect();
            path_length(&g, &pts).unwrap()
        };
        let l1 = length_at(32);
        let l2 = length_at(64);
        let l4 = length_at(128);
        let r1 = (l1 - l2).abs();
        let r2 = (l2 - l4).abs();
        assert!(r2 <= 0.35 * r1, "refinement ratio {r2}/{r1} not second order");
    }

    #[test]
    fn christoffel_constant_metric_is_zero() {
        let gamma = christoffel(&diag_metric(), &[0.3, 0.4]).unwrap();
        assert_eq!(gamma.max_abs(), 0.0);
    }

    #[test]
    fn christoffel_pullback_hand_value() {
        let gamma = christoffel(&pullback_metric(), &[0.0, 0.0]).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let expected = if (k, i, j) == (1, 0, 0) { 2.0 } else { 0.0 };
                    assert_abs_diff_eq!(gamma.get(k, i, j), expected, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn christoffel_symmetric_in_lower_indices() {
        let g = pullback_metric();
        for s in 0..10 {
            let x = [
                -2.0 + 4.0 * crate::contraction::halton(s + 1, 2),
                -2.0 + 4.0 * crate::contraction::halton(s + 1, 3),
            ];
            let gamma = christoffel(&g, &x).unwrap();
            for k in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        assert_eq!(gamma.get(k, i, j), gamma.get(k, j, i));
                    }
                }
            }
        }
    }

    #[test]
    fn exp_map_constant_metric_is_translation() {
        let g = diag_metric();
        let out = exp_map(&g, &[1.0, -2.0], &[0.25, 3.0], None).unwrap();
        assert_eq!(out, vec![1.25, 1.0]);
    }

    #[test]
    fn exp_map_zero_vector_fixes_point() {
        let g = pullback_metric();
        let out = exp_map(&g, &[0.7, -0.3], &[0.0, 0.0], None).unwrap();
        assert_eq!(out, vec![0.7, -0.3]);
    }

    #[test]
    fn exp_map_matches_pullback_oracle() {
        // exp_xhat(v) = phi^-1(phi(xhat) + Dphi(xhat) v)
        let g = pullback_metric();
        let out = exp_map(&g, &[0.0, 0.0], &[1.0, 2.0], None).unwrap();
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(out[1], 1.0, epsilon = 1e-8);
        // a second base point with non-trivial Dphi
        let xhat = [1.0, 0.5];
        let v = [-0.6, 0.9];
        // Dphi(xhat) = [[1,0],[2 xhat1, 1]]
        let dphi_v = vec![v[0], 2.0 * xhat[0] * v[0] + v[1]];
        let expected = phi_inv(&add_vec(&phi(&xhat), &dphi_v));
        let out = exp_map(&g, &xhat, &v, None).unwrap();
        assert_abs_diff_eq!(out[0], expected[0], epsilon = 1e-8);
        assert_abs_diff_eq!(out[1], expected[1], epsilon = 1e-8);
    }

    #[test]
    fn log_map_constant_metric_single_step() {
        let g = diag_metric();
        let res = log_map(&g, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(res.v, vec![1.0, 1.0]);
        assert_eq!(res.iterations, 0);
        assert_abs_diff_eq!(res.distance, 5f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn log_map_identical_points_is_zero() {
        let g = pullback_metric();
        let res = log_map(&g, &[0.4, -0.2], &[0.4, -0.2]).unwrap();
        assert_eq!(res.v, vec![0.0, 0.0]);
        assert_eq!(res.distance, 0.0);
    }

    #[test]
    fn log_map_matches_pullback_oracle() {
        let g = pullback_metric();
        let res = log_map(&g, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(res.v[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(res.v[1], 2.0, epsilon = 1e-7);
        assert_abs_diff_eq!(res.distance, 5f64.sqrt(), epsilon = 1e-7);
        assert!(res.residual <= SHOOTING_TOL);
    }

    #[test]
    fn exp_log_identity_on_pullback_pairs() {
        let g = pullback_metric();
        for s in 0..12 {
            let a = [
                -1.5 + 3.0 * crate::contraction::halton(s + 1, 2),
                -1.5 + 3.0 * crate::contraction::halton(s + 1, 3),
            ];
            let b = [
                -1.5 + 3.0 * crate::contraction::halton(s + 1, 5),
                -1.5 + 3.0 * crate::contraction::halton(s + 1, 7),
            ];
            let log = log_map(&g, &a, &b).unwrap();
            let back = exp_map(&g, &a, &log.v, None).unwrap();
            assert!(norm2(&sub_vec(&back, &b)) <= 1e-7);
        }
    }

    #[test]
    fn distance_euclidean() {
        let g = MetricField::identity(2);
        assert_abs_diff_eq!(
            distance(&g, &[1.0, 2.0], &[4.0, 6.0]).unwrap(),
            5.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn distance_pullback_matches_phi_oracle() {
        let g = pullback_metric();
        for s in 0..10 {
            let a = [
                -1.5 + 3.0 * crate::contraction::halton(s + 1, 2),
                -1.5 + 3.0 * crate::contraction::halton(s + 1, 3),
            ];
            let b = [
                -1.5 + 3.0 * crate::contraction::halton(s + 1, 5),
                -1.5 + 3.0 * crate::contraction::halton(s + 1, 7),
            ];
            let d = distance(&g, &a, &b).unwrap();
            let oracle = norm2(&sub_vec(&phi(&a), &phi(&b)));
            assert!((d - oracle).abs() <= 1e-6 * (1.0 + oracle), "d={d} oracle={oracle}");
        }
    }

    #[test]
    fn distance_symmetry_and_triangle() {
        let g = pullback_metric();
        let pts: Vec<[f64; 2]> = (0..6)
            .map(|s| {
                [
                    -1.0 + 2.0 * crate::contraction::halton(s + 1, 2),
                    -1.0 + 2.0 * crate::contraction::halton(s + 1, 3),
                ]
            })
            .collect();
        for a in &pts {
            for b in &pts {
                let dab = distance(&g, a, b).unwrap();
                let dba = distance(&g, b, a).unwrap();
                assert!((dab - dba).abs() <= 1e-7, "symmetry {dab} vs {dba}");
                for c in &pts {
                    let dac = distance(&g, a, c).unwrap();
                    let dcb = distance(&g, c, b).unwrap();
                    assert!(dac + dcb - dab >= -1e-7, "triangle violated");
                }
            }
        }
    }

    #[test]
    fn grad_d2_constant_metric_closed_form() {
        // for any constant metric the gradient is -2 (x - xhat)
        let g = diag_metric();
        let grad = grad_d2(&g, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(grad, vec![-2.0, -2.0]);
    }

    #[test]
    fn grad_d2_vanishes_at_coincidence() {
        let g = pullback_metric();
        let grad = grad_d2(&g, &[0.3, 0.8], &[0.3, 0.8]).unwrap();
        assert_eq!(grad, vec![0.0, 0.0]);
    }

    #[test]
    fn grad_d2_duality_against_finite_differences() {
        // <grad, phi>_{g(xhat)} == d/dt d^2(x, xhat + t phi) at t = 0
        let g = pullback_metric();
        let x = [1.1, -0.4];
        let xhat = [0.2, 0.5];
        let grad = grad_d2(&g, &x, &xhat).unwrap();
        let dirs = [[1.0, 0.0], [0.0, 1.0], [0.6, -0.8]];
        let h = 1e-5;
        for dir in dirs {
            let lhs = g.inner(&xhat, &grad, &dir).unwrap();
            let xp = combine(&xhat, &[(h, &dir)]);
            let xm = combine(&xhat, &[(-h, &dir)]);
            let dp = distance(&g, &x, &xp).unwrap().powi(2);
            let dm = distance(&g, &x, &xm).unwrap().powi(2);
            let rhs = (dp - dm) / (2.0 * h);
            assert!(
                (lhs - rhs).abs() <= 1e-4 * (1.0 + rhs.abs()),
                "duality: lhs={lhs} rhs={rhs}"
            );
        }
    }

    proptest! {
        #[test]
        fn constant_metric_ops_match_closed_forms(
            x1 in -5.0..5.0f64, y1 in -5.0..5.0f64,
            x2 in -5.0..5.0f64, y2 in -5.0..5.0f64,
        ) {
            let g = diag_metric();
            let a = [x1, y1];
            let b = [x2, y2];
            let d = distance(&g, &a, &b).unwrap();
            let dx = x2 - x1;
            let dy = y2 - y1;
            let closed = (dx * dx + 4.0 * dy * dy).sqrt();
            prop_assert!((d - closed).abs() <= 1e-10 * (1.0 + closed));
            let log = log_map(&g, &a, &b).unwrap();
            prop_assert!(norm2(&sub_vec(&log.v, &sub_vec(&b, &a))) <= 1e-10);
            let grad = grad_d2(&g, &b, &a).unwrap();
            let expected = [-2.0 * dx, -2.0 * dy];
            prop_assert!(norm2(&sub_vec(&grad, &expected)) <= 1e-10);
        }
    }
}
