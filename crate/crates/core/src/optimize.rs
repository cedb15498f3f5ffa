//! Derivative-free one- and two-dimensional optimizers.
//!
//! All routines minimize; callers negate log-likelihoods.

use alloc::vec::Vec;

use crate::math;

/// Result of a scalar root search or minimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarOutcome {
    pub x: f64,
    pub fx: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Brent's zero finder on `[a, b]`; `f(a)` and `f(b)` must differ in sign
/// (or one of them be zero). Returns `None` when they do not bracket.
pub fn brent_root<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    tol: f64,
    max_iter: usize,
) -> Option<ScalarOutcome> {
    let (mut a, mut b) = (a, b);
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Some(ScalarOutcome { x: a, fx: 0.0, iterations: 0, converged: true });
    }
    if fb == 0.0 {
        return Some(ScalarOutcome { x: b, fx: 0.0, iterations: 0, converged: true });
    }
    if !(fa.is_finite() && fb.is_finite()) || fa.signum() == fb.signum() {
        return None;
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for it in 1..=max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if math::abs(fc) < math::abs(fb) {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * math::abs(b) + 0.5 * tol;
        let xm = 0.5 * (c - b);
        if math::abs(xm) <= tol1 || fb == 0.0 {
            return Some(ScalarOutcome { x: b, fx: fb, iterations: it, converged: true });
        }
        if math::abs(e) >= tol1 && math::abs(fa) > math::abs(fb) {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = math::abs(p);
            let min1 = 3.0 * xm * q - math::abs(tol1 * q);
            let min2 = math::abs(e * q);
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        if math::abs(d) > tol1 {
            b += d;
        } else {
            b += if xm > 0.0 { tol1 } else { -tol1 };
        }
        fb = f(b);
        if !fb.is_finite() {
            return Some(ScalarOutcome { x: a, fx: fa, iterations: it, converged: false });
        }
    }
    Some(ScalarOutcome { x: b, fx: fb, iterations: max_iter, converged: false })
}

/// Brent's minimizer (golden section with parabolic steps) on `[a, b]`.
pub fn brent_min<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    max_iter: usize,
) -> ScalarOutcome {
    const CGOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = if a < b { (a, b) } else { (b, a) };
    let mut x = a + CGOLD * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = f(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    let abs_tol = 1e-12 * (b - a).max(f64::MIN_POSITIVE);
    for it in 1..=max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = rel_tol * math::abs(x) + abs_tol;
        let tol2 = 2.0 * tol1;
        if math::abs(x - xm) <= tol2 - 0.5 * (b - a) {
            return ScalarOutcome { x, fx, iterations: it, converged: true };
        }
        let mut golden = true;
        if math::abs(e) > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = math::abs(q);
            let etemp = e;
            e = d;
            if !(math::abs(p) >= math::abs(0.5 * q * etemp) || p <= q * (a - x) || p >= q * (b - x)) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm - x >= 0.0 { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if math::abs(d) >= tol1 { x + d } else { x + if d >= 0.0 { tol1 } else { -tol1 } };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    ScalarOutcome { x, fx, iterations: max_iter, converged: false }
}

/// Box constraints for [`nelder_mead`].
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    fn project(&self, x: &mut [f64]) {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = xi.clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexOutcome {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Nelder-Mead simplex minimization inside a box. Trial points are projected
/// onto the box. Stops when both the simplex diameter (relative to
/// `scale`) and the spread of function values fall below `tol`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    steps: &[f64],
    bounds: &Bounds,
    scale: &[f64],
    tol: f64,
    max_iter: usize,
) -> SimplexOutcome {
    let n = start.len();
    let mut evaluations = 0usize;
    let mut eval = |x: &[f64], evaluations: &mut usize| {
        *evaluations += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut x0 = start.to_vec();
    bounds.project(&mut x0);
    simplex.push(x0.clone());
    for i in 0..n {
        let mut xi = x0.clone();
        xi[i] += steps[i];
        if xi[i] > bounds.upper[i] {
            xi[i] = x0[i] - steps[i];
        }
        bounds.project(&mut xi);
        if xi[i] == x0[i] {
            xi[i] = if x0[i] - bounds.lower[i] > bounds.upper[i] - x0[i] {
                x0[i] - 0.5 * (x0[i] - bounds.lower[i])
            } else {
                x0[i] + 0.5 * (bounds.upper[i] - x0[i])
            };
        }
        simplex.push(xi);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x, &mut evaluations)).collect();

    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        // order by value, index breaks ties so the result is reproducible
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let fspread = math::abs(values[n] - values[0]);
        let diam = (1..=n)
            .map(|k| {
                (0..n)
                    .map(|i| math::abs(simplex[k][i] - simplex[0][i]) / scale[i])
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if diam <= tol && fspread <= tol * (1.0 + math::abs(values[0])) {
            converged = true;
            break;
        }

        let centroid: Vec<f64> =
            (0..n).map(|i| simplex[..n].iter().map(|x| x[i]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = (0..n).map(|i| centroid[i] + t * (simplex[n][i] - centroid[i])).collect();
            bounds.project(&mut p);
            p
        };
        let xr = along(-1.0);
        let fr = eval(&xr, &mut evaluations);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut evaluations);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evaluations);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evaluations);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        // shrink towards the best vertex
        for k in 1..=n {
            let mut p: Vec<f64> =
                (0..n).map(|i| simplex[0][i] + 0.5 * (simplex[k][i] - simplex[0][i])).collect();
            bounds.project(&mut p);
            values[k] = eval(&p, &mut evaluations);
            simplex[k] = p;
        }
    }
    let best = (0..=n)
        .min_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)))
        .unwrap();
    SimplexOutcome {
        x: simplex[best].clone(),
        fx: values[best],
        iterations,
        evaluations,
        converged,
    }
}
