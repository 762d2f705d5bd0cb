//! Analytic two-token model with closed-form gradients.
//!
//! Embeddings and the output head are identities, the FFN is the linear map
//! `W^M`, and attention is hard-wired to the target token `u_2`. For current
//! token `i = u_n` and target `j = u_2`:
//!
//! ```text
//! logit_(n+1)(k) = W^M[i, k] + W^V[j, k]
//! logit_(n+2)(k) = (W^M W^T)[i, k] + (W^V W^T)[j, k]
//! ```
//!
//! Losses are written over counts `N[i, j, k]` of (current, target, token
//! `offset` steps ahead) triples, which makes every gradient a few dense
//! products:
//!
//! ```text
//! E[i, j](k)     = N[i, j] * P^[i, j](k) - N[i, j, k]
//! dL2/dA[i, k']  = sum_j E[i, j](k'),   A = W^M W^T
//! dL2/dB[j, k']  = sum_i E[i, j](k'),   B = W^V W^T
//! dL2/dW^T       = W^M' dL2/dA + W^V' dL2/dB
//! dL2/dW^M       = dL2/dA W^T',   dL2/dW^V = dL2/dB W^T'
//! ```

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{BinaryMatrix, Matrix};

/// Sparse counts `N[i, j, k]` of one loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct CountStats {
    m: usize,
    /// `(i, j) -> [(k, N[i, j, k])]`, `k` ascending, zero counts omitted.
    pairs: BTreeMap<(usize, usize), Vec<(usize, f64)>>,
}

impl CountStats {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            pairs: BTreeMap::new(),
        }
    }

    /// Counts over positions `n = 1 ..= N - offset` (1-based) of each
    /// sequence: current `u_n`, target `u_2`, next `u_(n+offset)`.
    pub fn from_sequences(m: usize, seqs: &[Vec<usize>], offset: usize) -> Result<Self> {
        if offset == 0 {
            return Err(Error::InvalidArgument("offset must be >= 1".into()));
        }
        let mut out = Self::new(m);
        for u in seqs {
            if u.len() < 2 {
                return Err(Error::InvalidArgument("sequences need a target token".into()));
            }
            for p in 0..u.len().saturating_sub(offset) {
                out.add(u[p], u[1], u[p + offset], 1.0)?;
            }
        }
        Ok(out)
    }

    pub fn add(&mut self, i: usize, j: usize, k: usize, count: f64) -> Result<()> {
        if let Some(&id) = [i, j, k].iter().find(|&&x| x >= self.m) {
            return Err(Error::TokenOutOfRange { id, vocab: self.m });
        }
        if count == 0.0 {
            return Ok(());
        }
        let row = self.pairs.entry((i, j)).or_default();
        match row.binary_search_by_key(&k, |e| e.0) {
            Ok(pos) => row[pos].1 += count,
            Err(pos) => row.insert(pos, (k, count)),
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.pairs
            .get(&(i, j))
            .and_then(|row| row.binary_search_by_key(&k, |e| e.0).ok().map(|p| row[p].1))
            .unwrap_or(0.0)
    }

    /// `N[i, j] = sum_k N[i, j, k]`.
    pub fn pair_total(&self, i: usize, j: usize) -> f64 {
        self.pairs.get(&(i, j)).map_or(0.0, |row| row.iter().map(|e| e.1).sum())
    }

    /// `P^data[i, j](k)`; `None` when `N[i, j] = 0`.
    pub fn p_data(&self, i: usize, j: usize, k: usize) -> Option<f64> {
        let n = self.pair_total(i, j);
        (n > 0.0).then(|| self.get(i, j, k) / n)
    }

    /// `((i, j), [(k, N[i, j, k])])` for every pair with `N[i, j] > 0`.
    pub fn pairs(&self) -> impl Iterator<Item = ((usize, usize), &[(usize, f64)])> {
        self.pairs.iter().map(|(&ij, row)| (ij, row.as_slice()))
    }

    pub fn total(&self) -> f64 {
        self.pairs.values().flatten().map(|e| e.1).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for e in out.pairs.values_mut().flatten() {
            e.1 *= c;
        }
        out
    }
}

/// `W^M`, `W^V`, `W^T`, all `M x M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplifiedParams {
    pub wm: Matrix,
    pub wv: Matrix,
    pub wt: Matrix,
    /// `W^T` is held fixed during training.
    pub fixed_wt: bool,
}

impl SimplifiedParams {
    pub fn zeros(m: usize) -> Self {
        Self {
            wm: Matrix::zeros(m, m),
            wv: Matrix::zeros(m, m),
            wt: Matrix::zeros(m, m),
            fixed_wt: false,
        }
    }

    /// Zero backbone with `W^T` fixed to `adjacency`, zero-padded to `m`.
    pub fn with_fixed_transfer(adjacency: &BinaryMatrix, m: usize) -> Self {
        Self {
            wt: adjacency.padded(m).to_matrix(),
            fixed_wt: true,
            ..Self::zeros(m)
        }
    }

    pub fn vocab(&self) -> usize {
        self.wm.rows()
    }

    fn check(&self) -> Result<()> {
        let m = self.vocab();
        for (name, w) in [("W^M", &self.wm), ("W^V", &self.wv), ("W^T", &self.wt)] {
            if w.rows() != m || w.cols() != m {
                return Err(Error::shape(
                    "SimplifiedParams",
                    format!("{name} is {}x{}, expected {m}x{m}", w.rows(), w.cols()),
                ));
            }
        }
        Ok(())
    }
}

/// Next-step and second-step logit rows for current token `i`, target `j`.
pub fn simplified_logits(p: &SimplifiedParams, i: usize, j: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    p.check()?;
    let m = p.vocab();
    if let Some(&id) = [i, j].iter().find(|&&x| x >= m) {
        return Err(Error::TokenOutOfRange { id, vocab: m });
    }
    let first: Vec<f64> = (0..m).map(|k| p.wm[(i, k)] + p.wv[(j, k)]).collect();
    let mut second = vec![0.0; m];
    for d in 0..m {
        let (a, b) = (p.wm[(i, d)], p.wv[(j, d)]);
        for (k, s) in second.iter_mut().enumerate() {
            *s += a * p.wt[(d, k)];
        }
        for (k, s) in second.iter_mut().enumerate() {
            *s += b * p.wt[(d, k)];
        }
    }
    Ok((first, second))
}

fn softmax(row: &[f64]) -> (Vec<f64>, f64) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    (exps.iter().map(|e| e / z).collect(), mx + z.ln())
}

/// Loss of logits `X[i] + Y[j]` over `counts`, with its gradients
/// `dL/dX` and `dL/dY`.
fn count_loss(x: &Matrix, y: &Matrix, counts: &CountStats) -> (f64, Matrix, Matrix) {
    let m = x.cols();
    let mut loss = 0.0;
    let mut gx = Matrix::zeros(x.rows(), m);
    let mut gy = Matrix::zeros(y.rows(), m);
    let mut row = vec![0.0; m];
    for ((i, j), ks) in counts.pairs() {
        for (k, r) in row.iter_mut().enumerate() {
            *r = x[(i, k)] + y[(j, k)];
        }
        let (probs, lse) = softmax(&row);
        let n: f64 = ks.iter().map(|e| e.1).sum();
        loss += n * lse;
        let mut err: Vec<f64> = probs.iter().map(|p| n * p).collect();
        for &(k, c) in ks {
            loss -= c * row[k];
            err[k] -= c;
        }
        for k in 0..m {
            gx[(i, k)] += err[k];
            gy[(j, k)] += err[k];
        }
    }
    (loss, gx, gy)
}

fn products(p: &SimplifiedParams) -> (Matrix, Matrix) {
    let a = p.wm.matmul(&p.wt).expect("square");
    let b = p.wv.matmul(&p.wt).expect("square");
    (a, b)
}

/// Gradients of one loss term, one per matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub wm: Matrix,
    pub wv: Matrix,
    pub wt: Matrix,
}

/// Summed next-step loss `l1` and its gradients (`W^T` does not enter).
pub fn loss1(p: &SimplifiedParams, counts: &CountStats) -> Result<(f64, Gradients)> {
    p.check()?;
    let (loss, gm, gv) = count_loss(&p.wm, &p.wv, counts);
    let m = p.vocab();
    Ok((
        loss,
        Gradients {
            wm: gm,
            wv: gv,
            wt: Matrix::zeros(m, m),
        },
    ))
}

/// Summed second-step loss `l2` in count form.
pub fn loss2(p: &SimplifiedParams, counts: &CountStats) -> Result<f64> {
    p.check()?;
    let (a, b) = products(p);
    Ok(count_loss(&a, &b, counts).0)
}

/// `l2` and its closed-form gradients.
pub fn loss2_with_gradients(p: &SimplifiedParams, counts: &CountStats) -> Result<(f64, Gradients)> {
    p.check()?;
    let (a, b) = products(p);
    let (loss, ga, gb) = count_loss(&a, &b, counts);
    let wt_t = p.wt.transpose();
    let wt = p.wm.transpose().matmul(&ga)?;
    let wt_v = p.wv.transpose().matmul(&gb)?;
    let mut g_wt = wt;
    for (x, y) in g_wt.as_mut_slice().iter_mut().zip(wt_v.as_slice()) {
        *x += y;
    }
    Ok((
        loss,
        Gradients {
            wm: ga.matmul(&wt_t)?,
            wv: gb.matmul(&wt_t)?,
            wt: g_wt,
        },
    ))
}

pub fn grad_wt(p: &SimplifiedParams, counts: &CountStats) -> Result<Matrix> {
    Ok(loss2_with_gradients(p, counts)?.1.wt)
}

pub fn grad_wm(p: &SimplifiedParams, counts: &CountStats) -> Result<Matrix> {
    Ok(loss2_with_gradients(p, counts)?.1.wm)
}

pub fn grad_wv(p: &SimplifiedParams, counts: &CountStats) -> Result<Matrix> {
    Ok(loss2_with_gradients(p, counts)?.1.wv)
}

/// Outcome of checking the per-pair gradient contributions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SignCheckReport {
    /// Sign clauses checked for `W^T` (qualifying `d`).
    pub transfer_checked: usize,
    /// Sign clauses checked for `W^M` and `W^V` (qualifying `k`).
    pub backbone_checked: usize,
    pub violations: usize,
    /// Largest gap between summed contributions and the closed-form gradients.
    pub max_sum_error: f64,
}

impl SignCheckReport {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Enumerate every per-pair contribution to the `l2` gradients, check that
/// its sign follows the prediction error wherever the qualifying factor is
/// positive, and check that the contributions add up to the closed form.
pub fn verify_theorems(p: &SimplifiedParams, counts: &CountStats) -> Result<SignCheckReport> {
    let (_, closed) = loss2_with_gradients(p, counts)?;
    let (a, b) = products(p);
    let m = p.vocab();
    let mut report = SignCheckReport::default();
    let mut sum_t = Matrix::zeros(m, m);
    let mut sum_m = Matrix::zeros(m, m);
    let mut sum_v = Matrix::zeros(m, m);
    let mut row = vec![0.0; m];
    for ((i, j), ks) in counts.pairs() {
        let n: f64 = ks.iter().map(|e| e.1).sum();
        for (k, r) in row.iter_mut().enumerate() {
            *r = a[(i, k)] + b[(j, k)];
        }
        let (probs, _) = softmax(&row);
        for kp in 0..m {
            let p_data = counts.get(i, j, kp) / n;
            let err = probs[kp] - p_data;
            let want = sign(err);
            for d in 0..m {
                let factor = p.wm[(i, d)] + p.wv[(j, d)];
                let c = err * n * factor;
                sum_t[(d, kp)] += c;
                if factor > 0.0 {
                    report.transfer_checked += 1;
                    if sign(c) != want {
                        report.violations += 1;
                    }
                }
            }
            for k in 0..m {
                let w = p.wt[(k, kp)];
                let c = err * n * w;
                sum_m[(i, k)] += c;
                sum_v[(j, k)] += c;
                if w > 0.0 {
                    // The same term feeds W^M[i, k] and W^V[j, k].
                    report.backbone_checked += 2;
                    if sign(c) != want {
                        report.violations += 2;
                    }
                }
            }
        }
    }
    report.max_sum_error = [
        sum_t.max_abs_diff(&closed.wt),
        sum_m.max_abs_diff(&closed.wm),
        sum_v.max_abs_diff(&closed.wv),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplifiedTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Train on `l1 + l2`; otherwise on `l1` alone.
    pub two_token: bool,
}

impl Default for SimplifiedTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.05,
            two_token: true,
        }
    }
}

/// Counts for both loss terms of a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingCounts {
    pub next: CountStats,
    pub second: CountStats,
}

impl TrainingCounts {
    pub fn new(m: usize, seqs: &[Vec<usize>]) -> Result<Self> {
        Ok(Self {
            next: CountStats::from_sequences(m, seqs, 1)?,
            second: CountStats::from_sequences(m, seqs, 2)?,
        })
    }
}

/// Full-batch gradient descent on the position-averaged losses
/// `l1 / |l1 positions| (+ l2 / |l2 positions|)`. Returns the parameters
/// and the objective before every step.
pub fn train_simplified(
    init: SimplifiedParams,
    counts: &TrainingCounts,
    cfg: &SimplifiedTrainConfig,
) -> Result<(SimplifiedParams, Vec<f64>)> {
    init.check()?;
    if counts.next.vocab() != init.vocab() || counts.second.vocab() != init.vocab() {
        return Err(Error::InvalidArgument("count and parameter vocabularies differ".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad learning rate {}", cfg.lr)));
    }
    let n1 = counts.next.total().max(1.0);
    let n2 = counts.second.total().max(1.0);
    let mut p = init;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (l1, g1) = loss1(&p, &counts.next)?;
        let mut objective = l1 / n1;
        let mut g = Gradients {
            wm: g1.wm.scaled(1.0 / n1),
            wv: g1.wv.scaled(1.0 / n1),
            wt: g1.wt,
        };
        if cfg.two_token {
            let (l2, g2) = loss2_with_gradients(&p, &counts.second)?;
            objective += l2 / n2;
            for (dst, src) in [(&mut g.wm, &g2.wm), (&mut g.wv, &g2.wv), (&mut g.wt, &g2.wt)] {
                for (x, y) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                    *x += y / n2;
                }
            }
        }
        if !objective.is_finite() {
            return Err(Error::Diverged {
                epoch: step,
                loss: objective,
            });
        }
        history.push(objective);
        let mut updates = vec![(&mut p.wm, &g.wm), (&mut p.wv, &g.wv)];
        if !p.fixed_wt {
            updates.push((&mut p.wt, &g.wt));
        }
        for (w, gw) in updates {
            for (x, d) in w.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                *x -= cfg.lr * d;
            }
        }
    }
    Ok((p, history))
}

/// Entries of `W^M` and `W^V` that the second-step loss can raise when
/// `W^T` equals the true adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnableMasks {
    /// `(i, k)`: some `(j, k')` with `N2[i, j, k'] > 0`, `A(k, k') = 1` and
    /// `A(i, k) = 0`.
    pub wm: BinaryMatrix,
    /// `(j, k)`: some `(i, k')` with `N2[i, j, k'] > 0`, `A(k, k') = 1` and
    /// `k` not observed to reach `j`.
    pub wv: BinaryMatrix,
}

/// Node-by-node masks; tokens outside `0..n` are ignored.
pub fn learnable_masks(second: &CountStats, adjacency: &BinaryMatrix, observed_reach: &BinaryMatrix) -> LearnableMasks {
    let n = adjacency.size();
    let mut wm = BinaryMatrix::zeros(n);
    let mut wv = BinaryMatrix::zeros(n);
    // Predecessors of each node in the true graph.
    let preds: Vec<Vec<usize>> = (0..n)
        .map(|kp| (0..n).filter(|&k| adjacency.get(k, kp)).collect())
        .collect();
    for ((i, j), ks) in second.pairs() {
        for &(kp, _) in ks {
            if kp >= n {
                continue;
            }
            for &k in &preds[kp] {
                if i < n && !adjacency.get(i, k) {
                    wm.set(i, k, true);
                }
                if j < n && !observed_reach.get(j, k) {
                    wv.set(j, k, true);
                }
            }
        }
    }
    LearnableMasks { wm, wv }
}

/// Parameters uniform in `[-1, 1)` and up to `4m` random count triples.
pub fn random_instance(m: usize, rng: &mut impl Rng) -> (SimplifiedParams, CountStats) {
    let mut mat = || Matrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    let p = SimplifiedParams {
        wm: mat(),
        wv: mat(),
        wt: mat(),
        fixed_wt: false,
    };
    let mut c = CountStats::new(m);
    for _ in 0..rng.random_range(1..4 * m) {
        let (i, j, k) = (rng.random_range(0..m), rng.random_range(0..m), rng.random_range(0..m));
        c.add(i, j, k, rng.random_range(1..5) as f64).expect("indices in range");
    }
    (p, c)
}

/// Relative errors of the closed-form `l2` gradients of `W^M`, `W^V`, `W^T`
/// against central differences with step `h`.
pub fn gradcheck(p: &SimplifiedParams, counts: &CountStats, h: f64) -> Result<[f64; 3]> {
    let (_, g) = loss2_with_gradients(p, counts)?;
    let m = p.vocab();
    let mut out = [0.0; 3];
    for (which, closed) in [&g.wm, &g.wv, &g.wt].into_iter().enumerate() {
        let mut diff = 0.0;
        let mut scale_a = 0.0;
        let mut scale_b = 0.0;
        for r in 0..m {
            for c in 0..m {
                let eval = |delta: f64| {
                    let mut q = p.clone();
                    [&mut q.wm, &mut q.wv, &mut q.wt][which][(r, c)] += delta;
                    loss2(&q, counts)
                };
                let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
                let a = closed[(r, c)];
                diff += (a - fd) * (a - fd);
                scale_a += a * a;
                scale_b += fd * fd;
            }
        }
        out[which] = diff.sqrt() / f64::max(scale_a, scale_b).sqrt().max(1e-300);
    }
    Ok(out)
}
