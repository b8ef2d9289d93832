//! Nelder–Mead simplex minimization.

/// Stopping rules and coefficient choice.
#[derive(Clone, Copy, Debug)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Converged once `f_max - f_min` over the simplex falls below this.
    pub f_tol: f64,
    /// Dimension-dependent coefficients (Gao & Han) for dimension > 2.
    pub adaptive: bool,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 2000,
            f_tol: 1e-6,
            adaptive: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub n_evals: usize,
    pub converged: bool,
}

/// Minimizes `f` from an axis-aligned initial simplex `x0 + steps[k] e_k`.
/// Non-finite function values are treated as `+inf`.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    steps: &[f64],
    opts: NelderMeadOptions,
) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(steps.len(), n, "one initial step per coordinate");
    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = if opts.adaptive && n > 2 {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };

    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for k in 0..n {
        let mut v = x0.to_vec();
        v[k] += steps[k];
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();
    let mut order: Vec<usize> = (0..=n).collect();
    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut converged = false;

    loop {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        let best = order[0];
        let worst = order[n];
        let second = order[n - 1];
        if values[worst] - values[best] < opts.f_tol {
            converged = values[best].is_finite();
            break;
        }
        if evals >= opts.max_evals {
            break;
        }

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &i in &order[..n] {
            for (c, v) in centroid.iter_mut().zip(&simplex[i]) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= nf);

        let along = |t: f64, out: &mut [f64], worst: &[f64], centroid: &[f64]| {
            for k in 0..out.len() {
                out[k] = centroid[k] + t * (centroid[k] - worst[k]);
            }
        };

        along(alpha, &mut trial, &simplex[worst], &centroid);
        let fr = eval(&trial, &mut evals);
        if fr < values[best] {
            let reflected = trial.clone();
            along(alpha * gamma, &mut trial, &simplex[worst], &centroid);
            let fe = eval(&trial, &mut evals);
            if fe < fr {
                simplex[worst].copy_from_slice(&trial);
                values[worst] = fe;
            } else {
                simplex[worst] = reflected;
                values[worst] = fr;
            }
            continue;
        }
        if fr < values[second] {
            simplex[worst].copy_from_slice(&trial);
            values[worst] = fr;
            continue;
        }
        // Contraction: outside if the reflection improved on the worst point.
        let (t, bound) = if fr < values[worst] {
            (alpha * rho, fr)
        } else {
            (-rho, values[worst])
        };
        along(t, &mut trial, &simplex[worst], &centroid);
        let fc = eval(&trial, &mut evals);
        let accept = if t > 0.0 { fc <= bound } else { fc < bound };
        if accept {
            simplex[worst].copy_from_slice(&trial);
            values[worst] = fc;
            continue;
        }
        let anchor = simplex[best].clone();
        for &i in &order[1..] {
            for k in 0..n {
                simplex[i][k] = anchor[k] + sigma * (simplex[i][k] - anchor[k]);
            }
            values[i] = eval(&simplex[i], &mut evals);
        }
    }

    let best = order[0];
    NelderMeadResult {
        x: simplex[best].clone(),
        fx: values[best],
        n_evals: evals,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let res = nelder_mead(
            |x| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2),
            &[0.0, 0.0],
            &[0.5, 0.5],
            NelderMeadOptions {
                f_tol: 1e-14,
                ..Default::default()
            },
        );
        assert!(res.converged);
        assert!((res.x[0] - 1.0).abs() < 1e-5);
        assert!((res.x[1] + 2.0).abs() < 1e-5);
    }

    #[test]
    fn rosenbrock_in_four_dimensions() {
        let rosen = |x: &[f64]| {
            x.windows(2)
                .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
                .sum::<f64>()
        };
        let res = nelder_mead(
            rosen,
            &[-1.0, 1.0, -1.0, 1.0],
            &[0.5; 4],
            NelderMeadOptions {
                max_evals: 20_000,
                f_tol: 1e-16,
                adaptive: true,
            },
        );
        assert!(res.fx < 1e-6, "fx = {}", res.fx);
    }

    #[test]
    fn respects_evaluation_budget() {
        let res = nelder_mead(
            |x| x[0].abs() + x[1].abs() + x[2].abs(),
            &[10.0, -7.0, 3.0],
            &[1.0; 3],
            NelderMeadOptions {
                max_evals: 30,
                f_tol: 0.0,
                adaptive: true,
            },
        );
        assert!(!res.converged);
        assert!(res.n_evals <= 30 + 4);
    }

    #[test]
    fn infinite_region_is_avoided() {
        let res = nelder_mead(
            |x| {
                if x[0] < 0.0 {
                    f64::NAN
                } else {
                    (x[0] - 0.5).powi(2)
                }
            },
            &[2.0],
            &[1.0],
            NelderMeadOptions {
                f_tol: 1e-12,
                ..Default::default()
            },
        );
        assert!((res.x[0] - 0.5).abs() < 1e-4);
    }
}
