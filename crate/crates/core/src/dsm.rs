//! Matching matrices and the (relaxed) doubly-stochastic space.
//!
//! Projection uses log-domain Sinkhorn: alternating row and column
//! log-sum-exp normalization. In relaxed mode one slack row and one slack
//! column with log-score 0 are appended; the real block then ends up with
//! row and column sums at most 1, which models partial overlap.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{lse, Tape, Var};

/// `N × M` matching scores between source point `i` and target point `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchMatrix(pub Array2<f64>);

impl MatchMatrix {
    pub fn new(values: Array2<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n_src: usize, n_tgt: usize) -> Self {
        Self(Array2::zeros((n_src, n_tgt)))
    }

    pub fn identity(n: usize) -> Self {
        Self(Array2::eye(n))
    }

    pub fn n_src(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_tgt(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    /// Debug dump: a `rows,cols` header line, the dimensions, then one line per row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("rows,cols\n{},{}\n", self.n_src(), self.n_tgt());
        for row in self.0.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, msg: &str| Error::Parse {
            line: line + 1,
            msg: msg.to_string(),
        };
        match lines.next() {
            Some((_, h)) if h.trim() == "rows,cols" => {}
            _ => return Err(parse_err(0, "expected `rows,cols` header")),
        }
        let (ln, dims) = lines.next().ok_or_else(|| parse_err(1, "missing dimensions"))?;
        let dims: Vec<usize> = dims
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| parse_err(ln, "bad dimension")))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(parse_err(ln, "expected two dimensions"));
        }
        let mut data = Vec::with_capacity(dims[0] * dims[1]);
        for (ln, line) in lines.take(dims[0]) {
            for v in line.split(',') {
                data.push(v.trim().parse::<f64>().map_err(|_| parse_err(ln, "bad value"))?);
            }
        }
        let arr = Array2::from_shape_vec((dims[0], dims[1]), data)
            .map_err(|e| Error::Schema(format!("matrix dump: {e}")))?;
        Ok(Self(arr))
    }
}

/// Which marginal constraints a projection targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Marginals {
    /// Row sums 1, column sums `N/M` (1 when square).
    Exact,
    /// Row and column sums at most 1, via one slack row and column.
    #[default]
    Relaxed,
}

/// Log target marginals for rows and columns of the (possibly augmented) problem.
fn log_marginals(n: usize, m: usize, mode: Marginals) -> (Vec<f64>, Vec<f64>) {
    match mode {
        Marginals::Exact => (vec![0.0; n], vec![(n as f64 / m as f64).ln(); m]),
        Marginals::Relaxed => {
            let mut mu = vec![0.0; n + 1];
            mu[n] = (m as f64).ln();
            let mut nu = vec![0.0; m + 1];
            nu[m] = (n as f64).ln();
            (mu, nu)
        }
    }
}

fn augment(log: &Array2<f64>, mode: Marginals) -> Array2<f64> {
    match mode {
        Marginals::Exact => log.clone(),
        Marginals::Relaxed => {
            let (n, m) = log.dim();
            let mut a = Array2::zeros((n + 1, m + 1));
            a.slice_mut(ndarray::s![..n, ..m]).assign(log);
            a
        }
    }
}

fn marginal_deviation(log: &Array2<f64>, mu: &[f64]) -> f64 {
    log.rows()
        .into_iter()
        .zip(mu)
        .map(|(row, &lm)| {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            (s - lm.exp()).abs()
        })
        .fold(0.0, f64::max)
}

/// Sinkhorn on log-potentials. Stops early once the row marginals are
/// within `tol` after a column pass; `tol <= 0` always runs `iters` passes.
pub fn sinkhorn_log(logits: &Array2<f64>, iters: usize, mode: Marginals, tol: f64) -> Array2<f64> {
    let (n, m) = logits.dim();
    if n == 0 || m == 0 {
        return Array2::zeros((n, m));
    }
    let (mu, nu) = log_marginals(n, m, mode);
    let mut l = augment(logits, mode);
    for _ in 0..iters {
        for (mut row, &lm) in l.rows_mut().into_iter().zip(&mu) {
            let s = lse(row.iter().copied());
            if s.is_finite() {
                row.mapv_inplace(|v| v - s + lm);
            }
        }
        for (mut col, &ln) in l.columns_mut().into_iter().zip(&nu) {
            let s = lse(col.iter().copied());
            if s.is_finite() {
                col.mapv_inplace(|v| v - s + ln);
            }
        }
        if tol > 0.0 && marginal_deviation(&l, &mu) <= tol {
            break;
        }
    }
    if mode == Marginals::Relaxed {
        cap_rows(&mut l, &mu);
    }
    l.slice(ndarray::s![..n, ..m]).mapv(f64::exp)
}

/// Scale down any row whose mass exceeds its target. Only ever lowers
/// entries, so column bounds reached by the last column pass still hold.
fn cap_rows(l: &mut Array2<f64>, mu: &[f64]) {
    for (mut row, &lm) in l.rows_mut().into_iter().zip(mu) {
        let s = lse(row.iter().copied());
        if s.is_finite() && s > lm {
            row.mapv_inplace(|v| v - (s - lm));
        }
    }
}

/// Project non-negative scores; entries are read as `exp` of their log.
pub fn sinkhorn_project(m: &MatchMatrix, iters: usize, mode: Marginals, tol: f64) -> Result<MatchMatrix> {
    if iters == 0 {
        return Err(Error::Parameter("sinkhorn needs at least one iteration".into()));
    }
    if let Some(bad) = m.0.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Numeric(format!("sinkhorn input entry {bad} is not a finite non-negative score")));
    }
    Ok(MatchMatrix(sinkhorn_log(&m.0.mapv(f64::ln), iters, mode, tol)))
}

/// Project raw real-valued logits (log-potentials).
pub fn sinkhorn_project_logits(m: &MatchMatrix, iters: usize, mode: Marginals, tol: f64) -> Result<MatchMatrix> {
    if iters == 0 {
        return Err(Error::Parameter("sinkhorn needs at least one iteration".into()));
    }
    if m.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sinkhorn input has non-finite logits".into()));
    }
    Ok(MatchMatrix(sinkhorn_log(&m.0, iters, mode, tol)))
}

/// Unrolled, differentiable Sinkhorn over logits on a tape.
pub fn sinkhorn_var(tape: &mut Tape, logits: Var, iters: usize, mode: Marginals) -> Result<Var> {
    let (n, m) = tape.shape(logits);
    if iters == 0 {
        return Err(Error::Parameter("sinkhorn needs at least one iteration".into()));
    }
    let (mu, nu) = log_marginals(n, m, mode);
    let mut l = match mode {
        Marginals::Exact => logits,
        Marginals::Relaxed => {
            let zc = tape.constant(Array2::zeros((n, 1)));
            let widened = tape.concat_cols(logits, zc)?;
            let zr = tape.constant(Array2::zeros((1, m + 1)));
            tape.concat_rows(widened, zr)?
        }
    };
    let (rows, cols) = tape.shape(l);
    let mu = tape.constant(Array2::from_shape_vec((rows, 1), mu).expect("length matches"));
    let nu = tape.constant(Array2::from_shape_vec((1, cols), nu).expect("length matches"));
    for _ in 0..iters {
        let r = tape.logsumexp_rows(l);
        let shift = tape.sub(mu, r)?;
        l = tape.add_col(l, shift)?;
        let c = tape.logsumexp_cols(l);
        let shift = tape.sub(nu, c)?;
        l = tape.add_row(l, shift)?;
    }
    if mode == Marginals::Relaxed {
        let r = tape.logsumexp_rows(l);
        let excess = tape.sub(r, mu)?;
        let excess = tape.relu(excess);
        let shift = tape.scale(excess, -1.0);
        l = tape.add_col(l, shift)?;
    }
    let p = tape.exp(l);
    tape.slice(p, 0, 0, n, m)
}

/// Whether `m` satisfies the marginal constraints of `mode` within `tol`.
pub fn is_doubly_stochastic(m: &MatchMatrix, tol: f64, mode: Marginals) -> bool {
    let (n, k) = m.0.dim();
    if m.0.iter().any(|v| !v.is_finite() || *v < -tol) {
        return false;
    }
    if n == 0 || k == 0 {
        return true;
    }
    let rows = m.0.rows().into_iter().map(|r| r.sum());
    let cols = m.0.columns().into_iter().map(|c| c.sum());
    match mode {
        Marginals::Exact => {
            let col_target = n as f64 / k as f64;
            rows.into_iter().all(|s| (s - 1.0).abs() <= tol)
                && cols.into_iter().all(|s| (s - col_target).abs() <= tol)
        }
        Marginals::Relaxed => {
            rows.into_iter().all(|s| s <= 1.0 + tol) && cols.into_iter().all(|s| s <= 1.0 + tol)
        }
    }
}

/// Largest deviation of any row or column sum from its exact-mode target.
pub fn max_marginal_deviation(m: &MatchMatrix) -> f64 {
    let (n, k) = m.0.dim();
    let col_target = n as f64 / k as f64;
    let r = m.0.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    let c = m
        .0
        .columns()
        .into_iter()
        .map(|c| (c.sum() - col_target).abs())
        .fold(0.0, f64::max);
    r.max(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

fn rank_order(a: &Match, b: &Match) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.i.cmp(&b.i))
        .then(a.j.cmp(&b.j))
}

fn argmax(it: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in it.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// The `k` highest-scoring pairs, descending, ties broken by `(i, j)`.
///
/// With `mutual`, only pairs that are simultaneously the argmax of their
/// row and of their column are eligible.
pub fn top_k_matches(e: &MatchMatrix, k: usize, mutual: bool) -> Vec<Match> {
    let (n, m) = e.0.dim();
    if n == 0 || m == 0 || k == 0 {
        return Vec::new();
    }
    let mut cands: Vec<Match> = if mutual {
        let col_best: Vec<usize> = e
            .0
            .columns()
            .into_iter()
            .map(|c| argmax(c.iter().copied()).unwrap_or(0))
            .collect();
        e.0.rows()
            .into_iter()
            .enumerate()
            .filter_map(|(i, row)| {
                let j = argmax(row.iter().copied())?;
                (col_best[j] == i).then_some(Match { i, j, score: row[j] })
            })
            .collect()
    } else {
        e.0.indexed_iter()
            .map(|((i, j), &score)| Match { i, j, score })
            .collect()
    };
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, rank_order);
        cands.truncate(k);
    }
    cands.sort_by(rank_order);
    cands
}

/// Greedy 0/1 rounding: rows in order, each takes its best unused column.
pub fn round_to_permutation(e: &MatchMatrix) -> Result<MatchMatrix> {
    let (n, m) = e.0.dim();
    if n != m {
        return Err(dim_err(format!("round_to_permutation needs a square matrix, got {n}x{m}")));
    }
    let mut used = vec![false; m];
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        let j = (0..m)
            .filter(|&j| !used[j])
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if e.0[[i, b]] >= e.0[[i, j]] => Some(b),
                _ => Some(j),
            })
            .expect("a column is always free for a square matrix");
        used[j] = true;
        out[[i, j]] = 1.0;
    }
    Ok(MatchMatrix(out))
}

/// Maximum-weight assignment of every row to a distinct column (Hungarian
/// method with potentials, `O(n²m)`). Requires `n <= m`; returns the column
/// of each row.
pub fn max_weight_assignment(e: &MatchMatrix) -> Result<Vec<usize>> {
    let (n, m) = e.0.dim();
    if n > m {
        return Err(dim_err(format!("assignment needs rows <= cols, got {n}x{m}")));
    }
    let cost = |i: usize, j: usize| -e.0[[i - 1, j - 1]];
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    Ok(assign)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_positive(n: usize, m: usize, seed: u64) -> MatchMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MatchMatrix(Array2::from_shape_fn((n, m), |_| rng.random_range(0.05..1.0)))
    }

    /// Plain linear-domain alternating normalization.
    fn naive_sinkhorn(m: &Array2<f64>, iters: usize) -> Array2<f64> {
        let mut a = m.clone();
        for _ in 0..iters {
            for mut r in a.rows_mut() {
                let s = r.sum();
                r.mapv_inplace(|v| v / s);
            }
            for mut c in a.columns_mut() {
                let s = c.sum();
                c.mapv_inplace(|v| v / s);
            }
        }
        a
    }

    #[test]
    fn permutation_is_fixed_point() {
        let p = array![
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0]
        ];
        let out = sinkhorn_project(&MatchMatrix(p.clone()), 10, Marginals::Exact, 0.0).unwrap();
        for (a, b) in out.0.iter().zip(p.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_goes_to_one_third() {
        let out = sinkhorn_project(&MatchMatrix(Array2::from_elem((3, 3), 2.5)), 5, Marginals::Exact, 0.0)
            .unwrap();
        for v in out.0.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_naive_oracle() {
        let m = random_positive(5, 5, 7);
        let ours = sinkhorn_project(&m, 50, Marginals::Exact, 0.0).unwrap();
        let oracle = naive_sinkhorn(&m.0, 50);
        for (a, b) in ours.0.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = random_positive(3, 3, 1);
        m.0[[1, 1]] = f64::NAN;
        assert!(matches!(sinkhorn_project(&m, 5, Marginals::Exact, 0.0), Err(Error::Numeric(_))));
        m.0[[1, 1]] = f64::INFINITY;
        assert!(sinkhorn_project_logits(&m, 5, Marginals::Exact, 0.0).is_err());
        assert!(sinkhorn_project(&random_positive(2, 2, 0), 0, Marginals::Exact, 0.0).is_err());
    }

    #[test]
    fn relaxed_mode_is_substochastic() {
        let m = random_positive(6, 9, 3);
        let out = sinkhorn_project(&m, 20, Marginals::Relaxed, 0.0).unwrap();
        assert!(is_doubly_stochastic(&out, 1e-9, Marginals::Relaxed));
        let big = MatchMatrix(Array2::from_shape_fn((6, 9), |(i, j)| if i == j { 50.0 } else { -50.0 }));
        let out = sinkhorn_project_logits(&big, 20, Marginals::Relaxed, 0.0).unwrap();
        assert!(is_doubly_stochastic(&out, 1e-9, Marginals::Relaxed));
        assert!(out.get(2, 2) > 0.95, "{}", out.get(2, 2));
        let out = sinkhorn_project_logits(&big, 500, Marginals::Relaxed, 0.0).unwrap();
        assert!(out.get(2, 2) > 0.995, "{}", out.get(2, 2));
    }

    #[test]
    fn doubly_stochastic_checks() {
        let mut id = MatchMatrix::identity(3);
        assert!(is_doubly_stochastic(&id, 1e-8, Marginals::Exact));
        id.0[[0, 0]] = 1.1;
        assert!(!is_doubly_stochastic(&id, 1e-8, Marginals::Exact));
        let proj = sinkhorn_project(&random_positive(4, 4, 11), 30, Marginals::Exact, 1e-6).unwrap();
        assert!(is_doubly_stochastic(&proj, 1e-6, Marginals::Exact));
    }

    #[test]
    fn tape_sinkhorn_matches_plain() {
        let m = random_positive(5, 7, 5).0.mapv(|v| 3.0 * v.ln());
        for mode in [Marginals::Exact, Marginals::Relaxed] {
            let plain = sinkhorn_log(&m, 8, mode, 0.0);
            let mut t = Tape::new();
            let x = t.constant(m.clone());
            let y = sinkhorn_var(&mut t, x, 8, mode).unwrap();
            for (a, b) in t.value(y).iter().zip(plain.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top_k_identity_and_ties() {
        let id = MatchMatrix::identity(3);
        let got: Vec<(usize, usize)> = top_k_matches(&id, 3, false).iter().map(|m| (m.i, m.j)).collect();
        assert_eq!(got, vec![(0, 0), (1, 1), (2, 2)]);

        let t = MatchMatrix(array![[0.1, 0.9], [0.9, 0.1]]);
        let got = top_k_matches(&t, 2, false);
        assert_eq!((got[0].i, got[0].j), (0, 1));
        assert_eq!((got[1].i, got[1].j), (1, 0));
        assert!(top_k_matches(&MatchMatrix::zeros(0, 0), 3, false).is_empty());
    }

    #[test]
    fn top_k_matches_full_sort() {
        let m = random_positive(6, 6, 21);
        let mut all: Vec<(f64, usize, usize)> =
            m.0.indexed_iter().map(|((i, j), &v)| (v, i, j)).collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let got = top_k_matches(&m, 5, false);
        for (g, o) in got.iter().zip(all.iter()) {
            assert_eq!((g.score, g.i, g.j), *o);
        }
        assert_eq!(got.len(), 5);
    }

    #[test]
    fn mutual_filter() {
        let m = MatchMatrix(array![[0.9, 0.8], [0.95, 0.1]]);
        // row 0 argmax col 0, but col 0 argmax is row 1 -> not mutual
        let got = top_k_matches(&m, 4, true);
        assert_eq!(got.len(), 1);
        assert_eq!((got[0].i, got[0].j), (1, 0));
    }

    #[test]
    fn rounding() {
        let uniform = MatchMatrix(Array2::from_elem((2, 2), 0.5));
        assert_eq!(round_to_permutation(&uniform).unwrap(), MatchMatrix::identity(2));
        let near = MatchMatrix(array![[0.1, 0.8, 0.1], [0.05, 0.1, 0.85], [0.85, 0.1, 0.05]]);
        let r = round_to_permutation(&near).unwrap();
        assert_eq!(r.0, array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        assert!(round_to_permutation(&MatchMatrix::zeros(2, 3)).is_err());
    }

    fn brute_force_best(e: &Array2<f64>) -> f64 {
        fn rec(e: &Array2<f64>, i: usize, used: &mut Vec<bool>) -> f64 {
            if i == e.nrows() {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..e.ncols() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(e[[i, j]] + rec(e, i + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(e, 0, &mut vec![false; e.ncols()])
    }

    #[test]
    fn hungarian_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..30 {
            let n = 1 + trial % 6;
            let m = n + trial % 2;
            let e = MatchMatrix(Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0)));
            let a = max_weight_assignment(&e).unwrap();
            let mut seen = vec![false; m];
            for &j in &a {
                assert!(!seen[j]);
                seen[j] = true;
            }
            let total: f64 = a.iter().enumerate().map(|(i, &j)| e.get(i, j)).sum();
            assert!((total - brute_force_best(&e.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip() {
        let m = random_positive(3, 4, 2);
        let back = MatchMatrix::from_csv(&m.to_csv()).unwrap();
        assert_eq!(m, back);
        assert!(MatchMatrix::from_csv("nope\n").is_err());
    }
}
