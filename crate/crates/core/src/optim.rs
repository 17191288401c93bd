//! Derivative-free minimization for the GMM criteria, which may be
//! discontinuous in the parameter. Bounded Nelder–Mead with projection onto
//! the box, plus golden-section refinement for one-dimensional problems.
//! Fully deterministic: no randomness, stable tie handling.

/// Convergence tolerance on the simplex diameter.
const SIMPLEX_TOL: f64 = 1e-9;
/// Evaluation budget per start.
const MAX_EVALS: usize = 10_000;

const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn clip(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

/// Minimizes `f` over the box from `start`, returning the best point and
/// value. Standard reflection/expansion/contraction/shrink coefficients.
pub(crate) fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    start: &[f64],
    bounds: &[(f64, f64)],
) -> (Vec<f64>, f64) {
    let dim = start.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    // Initial simplex: start plus one step along each coordinate.
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let mut x0 = start.to_vec();
    clip(&mut x0, bounds);
    let f0 = eval(&x0, &mut evals);
    simplex.push((x0.clone(), f0));
    for j in 0..dim {
        let (lo, hi) = bounds[j];
        let span = (hi - lo).max(1e-8);
        let mut xj = x0.clone();
        let step = 0.1 * span;
        xj[j] = if xj[j] + step <= hi { xj[j] + step } else { xj[j] - step };
        clip(&mut xj, bounds);
        let fj = eval(&xj, &mut evals);
        simplex.push((xj, fj));
    }

    while evals < MAX_EVALS {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        if diameter < SIMPLEX_TOL {
            break;
        }
        let worst = simplex[dim].clone();
        let second_worst = simplex[dim - 1].1;
        let best = simplex[0].1;
        let mut centroid = vec![0.0; dim];
        for (x, _) in &simplex[..dim] {
            for j in 0..dim {
                centroid[j] += x[j] / dim as f64;
            }
        }
        let blend = |alpha: f64| -> Vec<f64> {
            let mut x: Vec<f64> = centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + alpha * (c - w))
                .collect();
            clip(&mut x, bounds);
            x
        };

        let reflected = blend(1.0);
        let f_r = eval(&reflected, &mut evals);
        if f_r < best {
            let expanded = blend(2.0);
            let f_e = eval(&expanded, &mut evals);
            simplex[dim] = if f_e < f_r { (expanded, f_e) } else { (reflected, f_r) };
        } else if f_r < second_worst {
            simplex[dim] = (reflected, f_r);
        } else {
            let contracted = if f_r < worst.1 { blend(0.5) } else { blend(-0.5) };
            let f_c = eval(&contracted, &mut evals);
            if f_c < worst.1.min(f_r) {
                simplex[dim] = (contracted, f_c);
            } else {
                // Shrink toward the best vertex.
                let best_x = simplex[0].0.clone();
                for (x, fx) in simplex.iter_mut().skip(1) {
                    for j in 0..dim {
                        x[j] = best_x[j] + 0.5 * (x[j] - best_x[j]);
                    }
                    clip(x, bounds);
                    *fx = eval(x, &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    simplex.swap_remove(0)
}

/// Golden-section search on `[lo, hi]`; assumes approximate unimodality and
/// returns the best point probed. Used to polish one-dimensional fits where
/// the criterion may be a step function.
pub(crate) fn golden_section(
    f: &mut dyn FnMut(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
) -> (f64, f64) {
    let mut a = hi - GOLDEN * (hi - lo);
    let mut b = lo + GOLDEN * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    for _ in 0..200 {
        if hi - lo < 1e-12 * (1.0 + lo.abs() + hi.abs()) {
            break;
        }
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - GOLDEN * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + GOLDEN * (hi - lo);
            fb = f(b);
        }
    }
    if fa <= fb {
        (a, fa)
    } else {
        (b, fb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let mut f = |x: &[f64]| (x[0] - 1.5).powi(2) + 2.0 * (x[1] + 0.5).powi(2);
        let (x, v) = nelder_mead(&mut f, &[0.0, 0.0], &[(-5.0, 5.0), (-5.0, 5.0)]);
        assert!((x[0] - 1.5).abs() < 1e-5, "{x:?}");
        assert!((x[1] + 0.5).abs() < 1e-5, "{x:?}");
        assert!(v < 1e-9);
    }

    #[test]
    fn respects_bounds() {
        let mut f = |x: &[f64]| (x[0] - 10.0).powi(2);
        let (x, _) = nelder_mead(&mut f, &[0.0], &[(-1.0, 2.0)]);
        assert!((x[0] - 2.0).abs() < 1e-6, "{x:?}");
    }

    #[test]
    fn non_smooth_absolute_value() {
        let mut f = |x: &[f64]| (x[0] - 0.3).abs() + (x[1] - 0.7).abs();
        let (x, _) = nelder_mead(&mut f, &[-2.0, -2.0], &[(-3.0, 3.0), (-3.0, 3.0)]);
        assert!((x[0] - 0.3).abs() < 1e-5 && (x[1] - 0.7).abs() < 1e-5, "{x:?}");
    }

    #[test]
    fn golden_section_on_step_function() {
        // Minimum plateau of a quantile-style objective.
        let mut f = |x: f64| ((x * 4.0).floor() / 4.0 - 0.5).abs();
        let (x, _) = golden_section(&mut f, 0.0, 1.0);
        assert!((0.5..0.75 + 1e-9).contains(&x), "{x}");
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut f = |x: &[f64]| (x[0].sin() + x[1].cos()).abs() + 0.01 * x[0].powi(2);
            nelder_mead(&mut f, &[1.0, 1.0], &[(-4.0, 4.0), (-4.0, 4.0)])
        };
        let (x1, v1) = run();
        let (x2, v2) = run();
        assert_eq!(x1, x2);
        assert_eq!(v1.to_bits(), v2.to_bits());
    }
}
