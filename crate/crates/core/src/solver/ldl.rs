//! Sparse LDL^T factorization for symmetric quasi-definite systems.
//!
//! This is the classic up-looking algorithm driven by the elimination
//! tree. It performs no pivoting; the interior-point caller keeps the KKT
//! matrix quasi-definite (positive-definite primal block, negative-definite
//! dual block) through inertia-corrected regularization, for which LDL^T
//! exists under any symmetric permutation. Inertia is read off the signs
//! of `D`.

use crate::error::SolverError;

/// Upper-triangular part of a symmetric matrix in compressed-column form.
/// Row indices within a column need not be sorted; `row <= col` must hold
/// for every entry and every diagonal must be present.
#[derive(Clone, Debug)]
pub struct SymmetricCsc {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SymmetricCsc {
    /// Build from (row, col) coordinates (upper triangle, duplicates
    /// forbidden). Returns the matrix plus the value position of each input
    /// coordinate so callers can scatter numeric values per iteration.
    pub fn from_coordinates(n: usize, coords: &[(usize, usize)]) -> (Self, Vec<usize>) {
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&k| (coords[k].1, coords[k].0));
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(coords.len());
        let mut positions = vec![0usize; coords.len()];
        for &k in &order {
            let (r, c) = coords[k];
            debug_assert!(r <= c && c < n);
            positions[k] = row_idx.len();
            row_idx.push(r);
            col_ptr[c + 1] += 1;
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        let values = vec![0.0; row_idx.len()];
        (
            SymmetricCsc {
                n,
                col_ptr,
                row_idx,
                values,
            },
            positions,
        )
    }
}

/// Symbolic analysis: elimination tree and column counts, computed once
/// per sparsity pattern and reused across numeric factorizations.
#[derive(Clone, Debug)]
pub struct LdlSymbolic {
    parent: Vec<isize>,
    l_col_ptr: Vec<usize>,
    nnz_l: usize,
}

pub fn ldl_symbolic(a: &SymmetricCsc) -> LdlSymbolic {
    let n = a.n;
    let mut parent = vec![-1isize; n];
    let mut flag = vec![usize::MAX; n];
    let mut lnz = vec![0usize; n];
    for k in 0..n {
        flag[k] = k;
        for p in a.col_ptr[k]..a.col_ptr[k + 1] {
            let mut i = a.row_idx[p];
            while flag[i] != k {
                if parent[i] == -1 {
                    parent[i] = k as isize;
                }
                lnz[i] += 1;
                flag[i] = k;
                i = parent[i] as usize;
            }
        }
    }
    let mut l_col_ptr = vec![0usize; n + 1];
    for k in 0..n {
        l_col_ptr[k + 1] = l_col_ptr[k] + lnz[k];
    }
    let nnz_l = l_col_ptr[n];
    LdlSymbolic {
        parent,
        l_col_ptr,
        nnz_l,
    }
}

/// Numeric factor `A = L D L^T` with unit lower-triangular `L`.
#[derive(Clone, Debug)]
pub struct LdlFactor {
    n: usize,
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
}

pub fn ldl_numeric(a: &SymmetricCsc, sym: &LdlSymbolic) -> Result<LdlFactor, SolverError> {
    let n = a.n;
    let mut l_row_idx = vec![0usize; sym.nnz_l];
    let mut l_values = vec![0.0f64; sym.nnz_l];
    let mut d = vec![0.0f64; n];
    let mut y = vec![0.0f64; n];
    let mut pattern = vec![0usize; n];
    let mut flag = vec![usize::MAX; n];
    let mut lnz_used = vec![0usize; n];

    for k in 0..n {
        // Scatter column k of A into the work vector and derive the row-k
        // pattern of L as paths up the elimination tree.
        let mut top = n;
        flag[k] = k;
        y[k] = 0.0;
        for p in a.col_ptr[k]..a.col_ptr[k + 1] {
            let i = a.row_idx[p];
            y[i] += a.values[p];
            let mut len = 0usize;
            let mut ii = i;
            while flag[ii] != k {
                pattern[len] = ii;
                len += 1;
                flag[ii] = k;
                ii = sym.parent[ii] as usize;
            }
            // Reverse the freshly discovered path onto the stack so the
            // final traversal runs in ascending elimination order.
            while len > 0 {
                len -= 1;
                top -= 1;
                pattern[top] = pattern[len];
            }
        }
        d[k] = y[k];
        y[k] = 0.0;
        for &j in &pattern[top..n] {
            let yj = y[j];
            y[j] = 0.0;
            let l_kj = yj / d[j];
            let start = sym.l_col_ptr[j];
            let end = start + lnz_used[j];
            for p in start..end {
                y[l_row_idx[p]] -= l_values[p] * yj;
            }
            d[k] -= l_kj * yj;
            l_row_idx[end] = k;
            l_values[end] = l_kj;
            lnz_used[j] += 1;
        }
        if d[k] == 0.0 {
            return Err(SolverError::Failed(format!("zero pivot at column {k}")));
        }
    }
    Ok(LdlFactor {
        n,
        l_col_ptr: sym.l_col_ptr.clone(),
        l_row_idx,
        l_values,
        d,
    })
}

impl LdlFactor {
    /// Solve `A x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        for j in 0..self.n {
            let xj = b[j];
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                b[self.l_row_idx[p]] -= self.l_values[p] * xj;
            }
        }
        for j in 0..self.n {
            b[j] /= self.d[j];
        }
        for j in (0..self.n).rev() {
            let mut xj = b[j];
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                xj -= self.l_values[p] * b[self.l_row_idx[p]];
            }
            b[j] = xj;
        }
    }

    /// (positive, negative, near-zero) counts of the pivots.
    pub fn inertia(&self) -> (usize, usize, usize) {
        let mut pos = 0;
        let mut neg = 0;
        let mut zero = 0;
        for &dk in &self.d {
            if dk > 1e-300 {
                pos += 1;
            } else if dk < -1e-300 {
                neg += 1;
            } else {
                zero += 1;
            }
        }
        (pos, neg, zero)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense oracle: Gaussian elimination with partial pivoting.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for r in col + 1..n {
                let f = a[r][col] / a[col][col];
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let mut acc = b[r];
            for c in r + 1..n {
                acc -= a[r][c] * x[c];
            }
            x[r] = acc / a[r][r];
        }
        x
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    #[test]
    fn factor_solves_quasi_definite_system_and_reports_inertia() {
        // [[H, J^T], [J, -C]] with H SPD (n1 = 8), C positive diagonal
        // (n2 = 5), J dense-ish random.
        let n1 = 8;
        let n2 = 5;
        let n = n1 + n2;
        let mut rng = 12345u64;
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n1 {
            dense[i][i] = 3.0 + lcg(&mut rng).abs();
        }
        for i in 0..n1 {
            for j in i + 1..n1 {
                if lcg(&mut rng) > 0.2 {
                    continue;
                }
                let v = 0.3 * lcg(&mut rng);
                dense[i][j] = v;
                dense[j][i] = v;
            }
        }
        for r in 0..n2 {
            dense[n1 + r][n1 + r] = -(1.0 + lcg(&mut rng).abs());
            for c in 0..n1 {
                let v = lcg(&mut rng);
                dense[n1 + r][c] = v;
                dense[c][n1 + r] = v;
            }
        }

        let mut coords = Vec::new();
        let mut vals = Vec::new();
        for c in 0..n {
            for r in 0..=c {
                if dense[r][c] != 0.0 {
                    coords.push((r, c));
                    vals.push(dense[r][c]);
                }
            }
        }
        let (mut m, pos) = SymmetricCsc::from_coordinates(n, &coords);
        for (k, &p) in pos.iter().enumerate() {
            m.values[p] = vals[k];
        }
        let sym = ldl_symbolic(&m);
        let f = ldl_numeric(&m, &sym).unwrap();
        assert_eq!(f.inertia(), (n1, n2, 0));

        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut x = b.clone();
        f.solve(&mut x);
        let oracle = dense_solve(dense, b);
        for (a, b) in x.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn refactor_with_new_values_reuses_symbolic() {
        let coords = vec![(0, 0), (1, 1), (0, 1), (2, 2), (1, 2)];
        let (mut m, pos) = SymmetricCsc::from_coordinates(3, &coords);
        let sym = ldl_symbolic(&m);
        for (vals, rhs) in [
            ([4.0, 3.0, 1.0, 2.0, 0.5], [1.0, 2.0, 3.0]),
            ([5.0, 2.0, -0.5, 1.0, 0.2], [0.3, -1.0, 2.0]),
        ] {
            for (k, &p) in pos.iter().enumerate() {
                m.values[p] = vals[k];
            }
            let f = ldl_numeric(&m, &sym).unwrap();
            let mut x = rhs.to_vec();
            f.solve(&mut x);
            let dense = [
                [vals[0], vals[2], 0.0],
                [vals[2], vals[1], vals[4]],
                [0.0, vals[4], vals[3]],
            ];
            for r in 0..3 {
                let acc: f64 = (0..3).map(|c| dense[r][c] * x[c]).sum();
                assert!((acc - rhs[r]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_pivot_detected() {
        let coords = vec![(0, 0), (1, 1)];
        let (mut m, pos) = SymmetricCsc::from_coordinates(2, &coords);
        m.values[pos[0]] = 1.0;
        m.values[pos[1]] = 0.0;
        let sym = ldl_symbolic(&m);
        assert!(ldl_numeric(&m, &sym).is_err());
    }
}
