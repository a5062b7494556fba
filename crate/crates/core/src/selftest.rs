//! Built-in oracle battery behind `wcstab selftest`: quick independent
//! checks of the numerical kernels against closed forms and finite
//! differences.

use crate::contraction::halton;
use crate::expr::{jacobian, parse_expr, Expr, ExprMatrix, Wrt};
use crate::geometry::{distance, exp_map, log_map, MetricField};
use crate::linalg::{dot, norm2, sub_vec, sym_eigen, Mat};
use crate::sim::integrate_fn;
use crate::stabilizer::{local_lqr, solve_lyapunov};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> CheckResult {
    CheckResult { name, pass, detail }
}

/// Run every check; all must pass on a healthy build.
pub fn run() -> Vec<CheckResult> {
    vec![
        ad_vs_finite_differences(),
        constant_metric_closed_forms(),
        pullback_metric_oracle(),
        gradient_duality(),
        rk4_exponential(),
        rk4_order(),
        lyapunov_residual(),
        riccati_scalar(),
        jacobi_eigen(),
    ]
}

fn ad_vs_finite_differences() -> CheckResult {
    let e = parse_expr("sin(x1)*exp(x2) + tanh(x1*x2)/(1 + x2^2)", 2, 0).unwrap();
    let mut worst = 0.0f64;
    for s in 0..100 {
        let x = [-2.0 + 4.0 * halton(s + 1, 2), -2.0 + 4.0 * halton(s + 1, 3)];
        let jac = match jacobian(std::slice::from_ref(&e), &x, &[], Wrt::State) {
            Ok(j) => j,
            Err(err) => return check("ad_vs_fd", false, err.to_string()),
        };
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd =
                (e.eval(&xp, &[]).unwrap() - e.eval(&xm, &[]).unwrap()) / (2.0 * h);
            worst = worst.max((jac.get(0, k) - fd).abs() / (1.0 + fd.abs()));
        }
    }
    check("ad_vs_fd", worst <= 1e-6, format!("max rel err {worst:.3e}"))
}

fn constant_metric_closed_forms() -> CheckResult {
    let g = MetricField::constant(&Mat::diag(&[1.0, 4.0])).unwrap();
    let d = distance(&g, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
    let err = (d - 5f64.sqrt()).abs();
    check("constant_metric", err <= 1e-10, format!("|d - sqrt(5)| = {err:.3e}"))
}

fn pullback() -> MetricField {
    let e = |s: &str| parse_expr(s, 2, 0).unwrap();
    MetricField::new(ExprMatrix::new(
        2,
        2,
        vec![e("1 + 4*x1^2"), e("2*x1"), e("2*x1"), Expr::Const(1.0)],
    ))
    .unwrap()
}

fn pullback_metric_oracle() -> CheckResult {
    let g = pullback();
    let phi = |x: &[f64]| vec![x[0], x[1] + x[0] * x[0]];
    let mut worst = 0.0f64;
    for s in 0..8 {
        let a = [-1.0 + 2.0 * halton(s + 1, 2), -1.0 + 2.0 * halton(s + 1, 3)];
        let b = [-1.0 + 2.0 * halton(s + 1, 5), -1.0 + 2.0 * halton(s + 1, 7)];
        let d = match distance(&g, &a, &b) {
            Ok(d) => d,
            Err(e) => return check("pullback_oracle", false, e.to_string()),
        };
        let oracle = norm2(&sub_vec(&phi(&a), &phi(&b)));
        worst = worst.max((d - oracle).abs() / (1.0 + oracle));
        let log = log_map(&g, &a, &b).unwrap();
        let back = exp_map(&g, &a, &log.v, None).unwrap();
        worst = worst.max(norm2(&sub_vec(&back, &b)));
    }
    check("pullback_oracle", worst <= 1e-6, format!("max err {worst:.3e}"))
}

fn gradient_duality() -> CheckResult {
    let g = pullback();
    let x = [0.9, -0.3];
    let xhat = [0.1, 0.4];
    let grad = crate::geometry::grad_d2(&g, &x, &xhat).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for dir in [[1.0, 0.0], [0.0, 1.0]] {
        let lhs = g.inner(&xhat, &grad, &dir).unwrap();
        let xp = [xhat[0] + h * dir[0], xhat[1] + h * dir[1]];
        let xm = [xhat[0] - h * dir[0], xhat[1] - h * dir[1]];
        let rhs = (distance(&g, &x, &xp).unwrap().powi(2)
            - distance(&g, &x, &xm).unwrap().powi(2))
            / (2.0 * h);
        worst = worst.max((lhs - rhs).abs() / (1.0 + rhs.abs()));
    }
    check("grad_duality", worst <= 1e-4, format!("max rel err {worst:.3e}"))
}

fn rk4_exponential() -> CheckResult {
    let trace = integrate_fn(
        1,
        |_t, y, out| -> Result<(), crate::sim::SimError> {
            out[0] = -y[0];
            Ok(())
        },
        &[1.0],
        1.0,
        1e-3,
        1,
    )
    .unwrap();
    let err = (trace.last_state()[0] - (-1.0f64).exp()).abs();
    check("rk4_exponential", err <= 1e-8, format!("|x(1) - 1/e| = {err:.3e}"))
}

fn rk4_order() -> CheckResult {
    let err_at = |h: f64| {
        let trace = integrate_fn(
            1,
            |_t, y, out| -> Result<(), crate::sim::SimError> {
                out[0] = -y[0];
                Ok(())
            },
            &[1.0],
            1.0,
            h,
            1,
        )
        .unwrap();
        (trace.last_state()[0] - (-1.0f64).exp()).abs()
    };
    let factor = err_at(0.1) / err_at(0.05);
    check(
        "rk4_order",
        (12.0..=20.0).contains(&factor),
        format!("halving factor {factor:.2}"),
    )
}

fn lyapunov_residual() -> CheckResult {
    let a = Mat::from_rows(&[
        vec![-0.5, 2.0, 0.1],
        vec![-2.0, -0.5, 0.3],
        vec![0.0, -0.3, -1.5],
    ]);
    let q = Mat::identity(3);
    match solve_lyapunov(&a, &q) {
        Ok(p) => {
            let res = a.transpose().mul(&p).add(&p.mul(&a)).add(&q).max_abs();
            check("lyapunov_residual", res <= 1e-10, format!("residual {res:.3e}"))
        }
        Err(e) => check("lyapunov_residual", false, e.to_string()),
    }
}

fn riccati_scalar() -> CheckResult {
    let a = Mat::from_rows(&[vec![0.0]]);
    let b = Mat::from_rows(&[vec![1.0]]);
    match local_lqr(&a, &b, 1.0, 1.0) {
        Ok(k) => {
            let err = (k.get(0, 0) - 1.0).abs();
            check("riccati_scalar", err <= 1e-10, format!("|K - 1| = {err:.3e}"))
        }
        Err(e) => check("riccati_scalar", false, e.to_string()),
    }
}

fn jacobi_eigen() -> CheckResult {
    let a = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
    let e = sym_eigen(&a);
    let mut vals = e.values.clone();
    vals.sort_by(f64::total_cmp);
    let err = (vals[0] - 1.0).abs().max((vals[1] - 3.0).abs());
    // eigenvector residual |A v - l v|
    let v = e.max_vector();
    let av = a.mul_vec(&v);
    let lam = dot(&v, &av) / dot(&v, &v);
    let res: f64 = av
        .iter()
        .zip(&v)
        .map(|(avi, vi)| (avi - lam * vi).abs())
        .fold(0.0, f64::max);
    check(
        "jacobi_eigen",
        err <= 1e-12 && res <= 1e-12,
        format!("value err {err:.3e}, vector residual {res:.3e}"),
    )
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_selftests_pass() {
        for r in super::run() {
            assert!(r.pass, "{}: {}", r.name, r.detail);
        }
    }
}
