//! Small dense linear-algebra helpers shared across modules.

use nalgebra::DMatrix;

/// Thin SVD with singular values sorted in descending order and a
/// deterministic sign convention applied (see [`canonical_row_signs`]).
pub(crate) struct SortedSvd {
    pub u: Option<DMatrix<f64>>,
    pub sigma: Vec<f64>,
    pub v_t: Option<DMatrix<f64>>,
}

pub(crate) fn sorted_svd(a: &DMatrix<f64>, want_u: bool, want_v: bool) -> SortedSvd {
    let svd = a.clone().svd(want_u, want_v);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    let sv = &svd.singular_values;
    order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).unwrap());

    let sigma: Vec<f64> = order.iter().map(|&i| sv[i]).collect();
    let u = svd.u.map(|u| {
        DMatrix::from_fn(u.nrows(), u.ncols(), |r, c| u[(r, order[c])])
    });
    let v_t = svd.v_t.map(|vt| {
        DMatrix::from_fn(vt.nrows(), vt.ncols(), |r, c| vt[(order[r], c)])
    });

    let mut out = SortedSvd { u, sigma, v_t };
    if let Some(v_t) = out.v_t.as_mut() {
        canonical_row_signs(v_t, out.u.as_mut());
    }
    out
}

/// Flips each row of `v_t` so its entry of largest magnitude is positive,
/// flipping the matching column of `u` when present. Ties break on the
/// first index, so the convention is reproducible across runs and
/// platforms.
pub(crate) fn canonical_row_signs(v_t: &mut DMatrix<f64>, mut u: Option<&mut DMatrix<f64>>) {
    for r in 0..v_t.nrows() {
        let mut best = 0usize;
        let mut best_abs = f64::NEG_INFINITY;
        for c in 0..v_t.ncols() {
            let a = v_t[(r, c)].abs();
            if a > best_abs {
                best_abs = a;
                best = c;
            }
        }
        if v_t[(r, best)] < 0.0 {
            for c in 0..v_t.ncols() {
                v_t[(r, c)] = -v_t[(r, c)];
            }
            if let Some(u) = u.as_deref_mut() {
                if r < u.ncols() {
                    for i in 0..u.nrows() {
                        u[(i, r)] = -u[(i, r)];
                    }
                }
            }
        }
    }
}

/// Eigenvalues of a symmetric matrix, sorted ascending.
pub(crate) fn sym_eigenvalues_sorted(a: &DMatrix<f64>) -> Vec<f64> {
    let eig = nalgebra::SymmetricEigen::new(a.clone());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
    vals
}

/// Numerical rank of a matrix from its singular values with the usual
/// `max(nrows, ncols) * eps * sigma_max` threshold.
pub(crate) fn numerical_rank(sigma: &[f64], nrows: usize, ncols: usize) -> usize {
    let smax = sigma.first().copied().unwrap_or(0.0);
    if smax <= 0.0 {
        return 0;
    }
    let tol = (nrows.max(ncols) as f64) * f64::EPSILON * smax;
    sigma.iter().filter(|&&s| s > tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_is_sorted_and_sign_fixed() {
        let a = DMatrix::from_row_slice(3, 4, &[
            0.2, -1.0, 0.5, 0.1,
            1.3, 0.4, -0.2, 0.7,
            -0.5, 0.9, 0.8, -0.3,
        ]);
        let s = sorted_svd(&a, true, true);
        for w in s.sigma.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let v_t = s.v_t.unwrap();
        for r in 0..v_t.nrows() {
            let m = (0..v_t.ncols())
                .map(|c| v_t[(r, c)])
                .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
                .unwrap();
            assert!(m > 0.0);
        }
        // reconstruction still holds after permutation/sign flips
        let u = s.u.unwrap();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s.sigma.clone()));
        let rec = &u * d * &v_t;
        assert!((&rec - &a).abs().max() < 1e-12);
    }

    #[test]
    fn rank_of_rank_one_matrix() {
        let a = DMatrix::from_fn(4, 5, |r, c| (r as f64 + 1.0) * (c as f64 - 2.0));
        let s = sorted_svd(&a, false, false);
        assert_eq!(numerical_rank(&s.sigma, 4, 5), 1);
    }
}
