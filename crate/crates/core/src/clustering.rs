//! Dirichlet-process Gaussian mixture with a Normal-Wishart prior.
//!
//! Each cluster carries two sub-clusters that are fitted alongside it and
//! serve as the split proposal. Assignments are hard: the E-step picks the
//! most probable component, the M-step sets each component to its
//! posterior point estimate. [`run_clustering`] drives the
//! converge / propose / done cycle.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::numeric::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("invalid clustering argument: {0}")]
    InvalidArgument(String),
    #[error("data has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("matrix is not positive definite even after regularization")]
    NotPositiveDefinite,
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// `ln Γ_d(a)`, the multivariate log-gamma function.
pub fn ln_mvgamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * PI.ln() + (1..=d).map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>()
}

/// Denominator turning a Wishart scale into a covariance estimate,
/// floored at 1 for small degrees of freedom.
fn cov_denominator(nu: f64, d: usize) -> f64 {
    (nu - d as f64 - 1.0).max(1.0)
}

fn trace(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows()).map(|i| m[(i, i)]).sum()
}

fn jitter_base(m: &DMatrix<f64>) -> f64 {
    let t = trace(m) / m.nrows().max(1) as f64;
    if t.is_finite() && t > 0.0 {
        t
    } else {
        1.0
    }
}

/// Lower Cholesky factor, adding growing multiples of the identity if the
/// matrix is numerically indefinite.
fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>, ClusterError> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.l());
    }
    let base = jitter_base(m);
    for k in 0..10 {
        let eps = base * 1e-10 * 10f64.powi(k);
        let mut j = m.clone();
        for i in 0..j.nrows() {
            j[(i, i)] += eps;
        }
        if let Some(c) = j.cholesky() {
            log::warn!("covariance regularized with jitter {eps:e}");
            return Ok(c.l());
        }
    }
    Err(ClusterError::NotPositiveDefinite)
}

fn log_det(m: &DMatrix<f64>) -> Result<f64, ClusterError> {
    let l = cholesky_lower(m)?;
    Ok(2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub kappa: f64,
    /// Degrees of freedom; `None` means `d + 1`.
    pub nu: Option<f64>,
    pub alpha: f64,
    pub sigma_scale: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        PriorParams {
            kappa: 1.0,
            nu: None,
            alpha: 10.0,
            sigma_scale: 0.05,
        }
    }
}

/// Normal-Wishart prior over component means and covariances, plus the
/// Dirichlet-process concentration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NWPrior {
    pub mu0: Vec<f64>,
    pub kappa: f64,
    pub nu: f64,
    pub psi0: Matrix,
    pub alpha: f64,
    pub sigma_scale: f64,
}

fn mean_and_cov(z: &Matrix) -> (Vec<f64>, Matrix) {
    let (n, d) = z.shape();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(z.row(i)) {
            *m += x / n as f64;
        }
    }
    let centered = Matrix::from_fn(n, d, |i, j| z.get(i, j) - mean[j]);
    let mut cov = centered.matmul_t(true, &centered, false).expect("square scatter");
    cov.scale_in_place(1.0 / (n.max(2) - 1) as f64);
    (mean, cov)
}

impl NWPrior {
    /// Prior centred on the data mean whose expected covariance is
    /// `sigma_scale` times the data covariance.
    pub fn from_data(z: &Matrix, p: PriorParams) -> Result<NWPrior, ClusterError> {
        let (n, d) = z.shape();
        if n == 0 || d == 0 {
            return Err(ClusterError::InvalidArgument("empty data".into()));
        }
        let nu = p.nu.unwrap_or(d as f64 + 1.0);
        if nu < d as f64 + 1.0 {
            return Err(ClusterError::InvalidArgument(format!("nu = {nu} below d + 1 = {}", d + 1)));
        }
        if !(p.kappa > 0.0 && p.alpha > 0.0 && p.sigma_scale > 0.0) {
            return Err(ClusterError::InvalidArgument(format!(
                "kappa {}, alpha {} and sigma_scale {} must be positive",
                p.kappa, p.alpha, p.sigma_scale
            )));
        }
        let (mu0, cov) = mean_and_cov(z);
        let mut psi0 = cov;
        psi0.scale_in_place(p.sigma_scale * cov_denominator(nu, d));
        let mut dm = to_dmatrix(&psi0);
        if dm.clone().cholesky().is_none() {
            let eps = 1e-6 * jitter_base(&dm);
            for i in 0..d {
                dm[(i, i)] += eps;
            }
            log::warn!("data covariance is singular; prior scale regularized by {eps:e}");
            psi0 = from_dmatrix(&dm);
        }
        Ok(NWPrior {
            mu0,
            kappa: p.kappa,
            nu,
            psi0,
            alpha: p.alpha,
            sigma_scale: p.sigma_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    /// Covariance estimate implied by the prior alone.
    pub fn expected_covariance(&self) -> Matrix {
        let mut m = self.psi0.clone();
        m.scale_in_place(1.0 / cov_denominator(self.nu, self.dim()));
        m
    }
}

/// Count, mean and centred scatter of a set of rows.
#[derive(Debug, Clone)]
pub struct Stats {
    pub n: usize,
    pub mean: DVector<f64>,
    pub scatter: DMatrix<f64>,
}

pub fn stats(z: &Matrix, idx: &[usize]) -> Stats {
    let d = z.cols();
    let n = idx.len();
    let mut mean = DVector::zeros(d);
    for &i in idx {
        for (j, x) in z.row(i).iter().enumerate() {
            mean[j] += x;
        }
    }
    if n > 0 {
        mean /= n as f64;
    }
    let centered = Matrix::from_fn(n, d, |r, j| z.get(idx[r], j) - mean[j]);
    let scatter = centered.matmul_t(true, &centered, false).expect("square scatter");
    Stats {
        n,
        mean,
        scatter: to_dmatrix(&scatter),
    }
}

/// Conjugate posterior hyperparameters.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub kappa: f64,
    pub nu: f64,
    pub mean: DVector<f64>,
    pub psi: DMatrix<f64>,
}

pub fn posterior(prior: &NWPrior, s: &Stats) -> Posterior {
    let n = s.n as f64;
    let mu0 = DVector::from_column_slice(&prior.mu0);
    let kappa = prior.kappa + n;
    let nu = prior.nu + n;
    let mean = (&mu0 * prior.kappa + &s.mean * n) / kappa;
    let mut psi = to_dmatrix(&prior.psi0);
    if s.n > 0 {
        let diff = &s.mean - &mu0;
        psi += &s.scatter + (&diff * diff.transpose()) * (prior.kappa * n / kappa);
    }
    Posterior { kappa, nu, mean, psi }
}

/// Log marginal likelihood of the rows summarized by `s` under the prior.
pub fn log_marginal_likelihood(prior: &NWPrior, s: &Stats) -> Result<f64, ClusterError> {
    if s.n == 0 {
        return Ok(0.0);
    }
    let d = prior.dim();
    let df = d as f64;
    let post = posterior(prior, s);
    let ld0 = log_det(&to_dmatrix(&prior.psi0))?;
    let ldn = log_det(&post.psi)?;
    Ok(-(s.n as f64) * df / 2.0 * PI.ln() + ln_mvgamma(d, post.nu / 2.0) - ln_mvgamma(d, prior.nu / 2.0)
        + prior.nu / 2.0 * ld0
        - post.nu / 2.0 * ldn
        + df / 2.0 * (prior.kappa.ln() - post.kappa.ln()))
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    mean: Vec<f64>,
    cov: Matrix,
}

/// Multivariate normal with a cached whitening transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct Gaussian {
    mean: Vec<f64>,
    cov: Matrix,
    /// `L^{-T}` for the Cholesky factor `L` of `cov`.
    whiten: Matrix,
    log_det: f64,
}

impl TryFrom<GaussianRepr> for Gaussian {
    type Error = ClusterError;

    fn try_from(r: GaussianRepr) -> Result<Self, Self::Error> {
        Gaussian::new(r.mean, r.cov)
    }
}

impl From<Gaussian> for GaussianRepr {
    fn from(g: Gaussian) -> Self {
        GaussianRepr { mean: g.mean, cov: g.cov }
    }
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: Matrix) -> Result<Gaussian, ClusterError> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(ClusterError::Dimension {
                expected: d,
                got: cov.rows(),
            });
        }
        let l = cholesky_lower(&to_dmatrix(&cov))?;
        let log_det = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or(ClusterError::NotPositiveDefinite)?;
        Ok(Gaussian {
            mean,
            cov,
            whiten: from_dmatrix(&linv.transpose()),
            log_det,
        })
    }

    /// Point estimate from a posterior: the posterior mean and the scale
    /// matrix over its floored degrees of freedom, plus a small ridge.
    pub fn from_posterior(post: &Posterior) -> Result<Gaussian, ClusterError> {
        let d = post.mean.len();
        let mut cov = &post.psi / cov_denominator(post.nu, d);
        let eps = 1e-6 * trace(&cov) / d as f64;
        if eps.is_finite() && eps > 0.0 {
            for i in 0..d {
                cov[(i, i)] += eps;
            }
        }
        Gaussian::new(post.mean.iter().copied().collect(), from_dmatrix(&cov))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Squared Mahalanobis norm of `v` (a displacement, not a point).
    fn mahalanobis_sq(&self, v: &[f64]) -> f64 {
        let d = self.dim();
        (0..d)
            .map(|j| {
                let y: f64 = (0..d).map(|i| v[i] * self.whiten.get(i, j)).sum();
                y * y
            })
            .sum()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        -0.5 * (self.dim() as f64 * (2.0 * PI).ln() + self.log_det + self.mahalanobis_sq(&diff))
    }

    /// Log densities of rows `idx` of `z`.
    pub fn log_density_rows(&self, z: &Matrix, idx: &[usize]) -> Vec<f64> {
        let d = self.dim();
        let diff = Matrix::from_fn(idx.len(), d, |r, j| z.get(idx[r], j) - self.mean[j]);
        let w = diff.matmul(&self.whiten).expect("whitening shape");
        let c = -0.5 * (d as f64 * (2.0 * PI).ln() + self.log_det);
        (0..idx.len())
            .map(|r| c - 0.5 * w.row(r).iter().map(|y| y * y).sum::<f64>())
            .collect()
    }

    /// Log of the unnormalised prior density whose mode, combined with the
    /// data likelihood, is exactly the M-step point estimate.
    fn log_pseudo_prior(&self, prior: &NWPrior) -> f64 {
        let d = self.dim();
        let a = prior.nu - d as f64 - 1.0;
        let mut m = prior.psi0.matmul(&self.whiten).expect("shape");
        m = self.whiten.matmul_t(true, &m, false).expect("shape");
        let tr: f64 = (0..d).map(|i| m.get(i, i)).sum();
        let dm: Vec<f64> = self.mean.iter().zip(&prior.mu0).map(|(a, b)| a - b).collect();
        -0.5 * a * self.log_det - 0.5 * tr - 0.5 * prior.kappa * self.mahalanobis_sq(&dm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub count: usize,
    pub gaussian: Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub weight: f64,
    pub count: usize,
    pub gaussian: Gaussian,
    /// Sub-cluster weights are relative to the cluster and sum to 1.
    pub sub: [Component; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Converging,
    Proposal,
    Done,
}

const HISTORY: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub clusters: Vec<Cluster>,
    pub assignments: Vec<usize>,
    pub sub_assignments: Vec<u8>,
    pub phase: Phase,
    pub history: VecDeque<f64>,
}

impl ClusterState {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn dim(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.gaussian.dim())
    }

    /// Cluster means stacked as a `K × d` matrix.
    pub fn means(&self) -> Matrix {
        let d = self.dim();
        Matrix::from_fn(self.k(), d, |k, j| self.clusters[k].gaussian.mean()[j])
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == k).collect()
    }

    /// Re-enters the converging phase, e.g. after the data moved.
    pub fn reopen(&mut self) {
        self.phase = Phase::Converging;
        self.history.clear();
    }

    fn push_history(&mut self, bound: f64) {
        if self.history.len() == HISTORY {
            self.history.pop_front();
        }
        self.history.push_back(bound);
    }

    /// Most probable cluster of every row of `z` under the current
    /// parameters; ties go to the lower index.
    pub fn assign(&self, z: &Matrix) -> Vec<usize> {
        let idx: Vec<usize> = (0..z.rows()).collect();
        let mut best = vec![(f64::NEG_INFINITY, 0usize); z.rows()];
        for (k, c) in self.clusters.iter().enumerate() {
            let lw = c.weight.ln();
            for (i, lp) in c.gaussian.log_density_rows(z, &idx).into_iter().enumerate() {
                if lw + lp > best[i].0 {
                    best[i] = (lw + lp, k);
                }
            }
        }
        best.into_iter().map(|(_, k)| k).collect()
    }

    /// Checks the structural invariants against `n` data rows.
    pub fn check_invariants(&self, n: usize) -> Result<(), String> {
        if self.assignments.len() != n || self.sub_assignments.len() != n {
            return Err(format!("{} assignments for {n} rows", self.assignments.len()));
        }
        let total: f64 = self.clusters.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(format!("weights sum to {total}"));
        }
        let mut counts = vec![0usize; self.k()];
        let mut sub_counts = vec![[0usize; 2]; self.k()];
        for (i, &k) in self.assignments.iter().enumerate() {
            if k >= self.k() {
                return Err(format!("row {i} assigned to missing cluster {k}"));
            }
            counts[k] += 1;
            sub_counts[k][self.sub_assignments[i] as usize] += 1;
        }
        for (k, c) in self.clusters.iter().enumerate() {
            if c.count != counts[k] || c.count == 0 {
                return Err(format!("cluster {k} records {} members, has {}", c.count, counts[k]));
            }
            if c.sub[0].count != sub_counts[k][0] || c.sub[1].count != sub_counts[k][1] {
                return Err(format!("cluster {k} sub-counts disagree"));
            }
            let sw = c.sub[0].weight + c.sub[1].weight;
            if (sw - 1.0).abs() > 1e-9 {
                return Err(format!("cluster {k} sub-weights sum to {sw}"));
            }
        }
        Ok(())
    }
}

fn check_dim(z: &Matrix, prior: &NWPrior) -> Result<(), ClusterError> {
    if z.cols() != prior.dim() {
        return Err(ClusterError::Dimension {
            expected: prior.dim(),
            got: z.cols(),
        });
    }
    Ok(())
}

/// Splits rows `idx` into two halves along their principal axis.
fn principal_split(z: &Matrix, idx: &[usize]) -> Vec<u8> {
    if idx.len() < 2 {
        return vec![0; idx.len()];
    }
    let s = stats(z, idx);
    let eig = SymmetricEigen::new(s.scatter.clone());
    let top = (0..eig.eigenvalues.len())
        .max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
        .unwrap_or(0);
    let axis = eig.eigenvectors.column(top);
    let proj: Vec<f64> = idx
        .iter()
        .map(|&i| z.row(i).iter().enumerate().map(|(j, x)| (x - s.mean[j]) * axis[j]).sum())
        .collect();
    let mut side: Vec<u8> = proj.iter().map(|&p| u8::from(p > 0.0)).collect();
    let ones = side.iter().filter(|&&s| s == 1).count();
    if ones == 0 || ones == side.len() {
        let mut order: Vec<usize> = (0..idx.len()).collect();
        order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
        for (rank, &r) in order.iter().enumerate() {
            side[r] = u8::from(rank >= idx.len() / 2);
        }
    }
    side
}

fn fit(prior: &NWPrior, z: &Matrix, idx: &[usize]) -> Result<Gaussian, ClusterError> {
    Gaussian::from_posterior(&posterior(prior, &stats(z, idx)))
}

/// M-step: drops empty clusters, refits every cluster and sub-cluster to
/// its members and resets the mixture weights. Sub-clusters of a cluster
/// with at least two members are re-seeded if one of them is empty.
pub fn m_step(z: &Matrix, state: &mut ClusterState, prior: &NWPrior) -> Result<(), ClusterError> {
    check_dim(z, prior)?;
    let n = z.rows();
    let k_old = state.clusters.len().max(state.assignments.iter().map(|&k| k + 1).max().unwrap_or(0));
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k_old];
    for (i, &k) in state.assignments.iter().enumerate() {
        groups[k].push(i);
    }
    let mut remap = vec![usize::MAX; k_old];
    let mut kept = Vec::new();
    for (k, g) in groups.into_iter().enumerate() {
        if !g.is_empty() {
            remap[k] = kept.len();
            kept.push(g);
        }
    }
    for a in &mut state.assignments {
        *a = remap[*a];
    }
    let big_k = kept.len() as f64;
    let alpha = prior.alpha;
    let mut clusters = Vec::with_capacity(kept.len());
    for members in &kept {
        let mut halves: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for &i in members {
            halves[state.sub_assignments[i] as usize].push(i);
        }
        if members.len() >= 2 && (halves[0].is_empty() || halves[1].is_empty()) {
            let side = principal_split(z, members);
            halves = [Vec::new(), Vec::new()];
            for (&i, &s) in members.iter().zip(&side) {
                state.sub_assignments[i] = s;
                halves[s as usize].push(i);
            }
        }
        let nk = members.len() as f64;
        let sub = [0, 1].map(|h| -> Result<Component, ClusterError> {
            Ok(Component {
                weight: (halves[h].len() as f64 + alpha / 2.0) / (nk + alpha),
                count: halves[h].len(),
                gaussian: fit(prior, z, &halves[h])?,
            })
        });
        let [s0, s1] = sub;
        clusters.push(Cluster {
            weight: (nk + alpha / big_k) / (n as f64 + alpha),
            count: members.len(),
            gaussian: fit(prior, z, members)?,
            sub: [s0?, s1?],
        });
    }
    state.clusters = clusters;
    Ok(())
}

/// E-step: hard joint assignment of every row to a cluster and one of its
/// sub-clusters, maximizing the cluster score plus the better sub-cluster
/// score. Ties go to the lower index. Returns the number of rows whose
/// cluster changed.
pub fn e_step(z: &Matrix, state: &mut ClusterState) -> usize {
    let n = z.rows();
    let idx: Vec<usize> = (0..n).collect();
    let mut best = vec![(f64::NEG_INFINITY, 0usize, 0u8); n];
    for (k, c) in state.clusters.iter().enumerate() {
        let lw = c.weight.ln();
        let l = c.gaussian.log_density_rows(z, &idx);
        let l0 = c.sub[0].gaussian.log_density_rows(z, &idx);
        let l1 = c.sub[1].gaussian.log_density_rows(z, &idx);
        let (w0, w1) = (c.sub[0].weight.ln(), c.sub[1].weight.ln());
        for i in 0..n {
            let (s0, s1) = (w0 + l0[i], w1 + l1[i]);
            let (sub, h) = if s1 > s0 { (s1, 1) } else { (s0, 0) };
            let score = lw + l[i] + sub;
            if score > best[i].0 {
                best[i] = (score, k, h);
            }
        }
    }
    let mut changed = 0;
    for (i, (_, k, h)) in best.into_iter().enumerate() {
        changed += usize::from(state.assignments[i] != k);
        state.assignments[i] = k;
        state.sub_assignments[i] = h;
    }
    changed
}

/// Hard-assignment log-likelihood of the cluster model plus the log
/// prior-mode terms that the M-step maximizes.
pub fn cluster_bound(z: &Matrix, state: &ClusterState, prior: &NWPrior) -> f64 {
    let big_k = state.k() as f64;
    let mut total = 0.0;
    for k in 0..state.k() {
        let c = &state.clusters[k];
        let members = state.members(k);
        let lw = c.weight.ln();
        total += c.gaussian.log_density_rows(z, &members).iter().map(|lp| lw + lp).sum::<f64>();
        total += c.gaussian.log_pseudo_prior(prior) + prior.alpha / big_k * lw;
    }
    total
}

/// The same objective for the sub-cluster model, each cluster's pair of
/// sub-clusters being a two-component mixture over its members.
pub fn subcluster_bound(z: &Matrix, state: &ClusterState, prior: &NWPrior) -> f64 {
    let mut total = 0.0;
    for k in 0..state.k() {
        let c = &state.clusters[k];
        let members = state.members(k);
        for h in 0..2 {
            let part: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| state.sub_assignments[i] as usize == h)
                .collect();
            let s = &c.sub[h];
            let lsw = s.weight.ln();
            total += s.gaussian.log_density_rows(z, &part).iter().map(|lp| lsw + lp).sum::<f64>();
            total += s.gaussian.log_pseudo_prior(prior) + prior.alpha / 2.0 * lsw;
        }
    }
    total
}

/// Monitored objective: cluster and sub-cluster bounds summed.
pub fn lower_bound(z: &Matrix, state: &ClusterState, prior: &NWPrior) -> f64 {
    cluster_bound(z, state, prior) + subcluster_bound(z, state, prior)
}

/// k-means++ seeding followed by Lloyd iterations, then one M-step.
pub fn kmeans_init<R: Rng>(z: &Matrix, k_init: usize, prior: &NWPrior, rng: &mut R) -> Result<ClusterState, ClusterError> {
    check_dim(z, prior)?;
    let (n, d) = z.shape();
    if k_init == 0 || n < k_init {
        return Err(ClusterError::InvalidArgument(format!("cannot seed {k_init} clusters from {n} rows")));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut centers: Vec<Vec<f64>> = vec![z.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist(z.row(i), &centers[0])).collect();
    while centers.len() < k_init {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(z.row(pick).to_vec());
        let c = centers.last().unwrap();
        for (i, m) in nearest.iter_mut().enumerate() {
            *m = m.min(dist(z.row(i), c));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (k, c) in centers.iter().enumerate() {
                let dk = dist(z.row(i), c);
                if dk < best.0 {
                    best = (dk, k);
                }
            }
            if *a != best.1 {
                *a = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (i, &k) in assign.iter().enumerate() {
            counts[k] += 1;
            for (s, x) in sums[k].iter_mut().zip(z.row(i)) {
                *s += x;
            }
        }
        for k in 0..centers.len() {
            if counts[k] > 0 {
                centers[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
    }
    let mut state = ClusterState {
        clusters: Vec::new(),
        assignments: assign,
        sub_assignments: vec![0; n],
        phase: Phase::Converging,
        history: VecDeque::new(),
    };
    reseed_subclusters(z, &mut state, centers.len());
    m_step(z, &mut state, prior)?;
    Ok(state)
}

fn reseed_subclusters(z: &Matrix, state: &mut ClusterState, k: usize) {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in state.assignments.iter().enumerate() {
        groups[a].push(i);
    }
    for g in groups {
        for (&i, s) in g.iter().zip(principal_split(z, &g)) {
            state.sub_assignments[i] = s;
        }
    }
}

fn ln_u<R: Rng>(rng: &mut R) -> f64 {
    rng.random::<f64>().ln()
}

/// Log Hastings ratio for splitting cluster `k` into its sub-clusters, or
/// `None` when a sub-cluster has fewer than two members.
pub fn split_log_ratio(z: &Matrix, state: &ClusterState, k: usize, prior: &NWPrior) -> Result<Option<f64>, ClusterError> {
    let members = state.members(k);
    let (left, right): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&i| state.sub_assignments[i] == 0);
    if left.len() < 2 || right.len() < 2 {
        return Ok(None);
    }
    let ml = log_marginal_likelihood(prior, &stats(z, &left))?;
    let mr = log_marginal_likelihood(prior, &stats(z, &right))?;
    let mk = log_marginal_likelihood(prior, &stats(z, &members))?;
    Ok(Some(
        prior.alpha.ln() + ln_gamma(left.len() as f64) + ml + ln_gamma(right.len() as f64) + mr
            - ln_gamma(members.len() as f64)
            - mk,
    ))
}

/// Log Hastings ratio for merging clusters `a` and `b`: the reciprocal
/// of the split ratio of the hypothetical merged cluster.
pub fn merge_log_ratio(z: &Matrix, state: &ClusterState, a: usize, b: usize, prior: &NWPrior) -> Result<f64, ClusterError> {
    let ma = state.members(a);
    let mb = state.members(b);
    let mut all = ma.clone();
    all.extend_from_slice(&mb);
    let (na, nb, n) = (ma.len() as f64, mb.len() as f64, all.len() as f64);
    let la = log_marginal_likelihood(prior, &stats(z, &ma))?;
    let lb = log_marginal_likelihood(prior, &stats(z, &mb))?;
    let lab = log_marginal_likelihood(prior, &stats(z, &all))?;
    let split = prior.alpha.ln() + ln_gamma(na) + la + ln_gamma(nb) + lb - ln_gamma(n) - lab;
    Ok(-split)
}

fn apply_split(z: &Matrix, state: &mut ClusterState, k: usize) {
    let fresh = state.k();
    let members = state.members(k);
    let mut halves: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &i in &members {
        let h = state.sub_assignments[i];
        if h == 1 {
            state.assignments[i] = fresh;
        }
        halves[h as usize].push(i);
    }
    for half in &halves {
        for (&i, s) in half.iter().zip(principal_split(z, half)) {
            state.sub_assignments[i] = s;
        }
    }
}

/// Metropolis-Hastings split of cluster `k`. On acceptance the
/// sub-clusters become clusters (the second one is appended) with fresh
/// sub-clusters of their own.
pub fn propose_split<R: Rng>(
    z: &Matrix,
    state: &mut ClusterState,
    k: usize,
    prior: &NWPrior,
    rng: &mut R,
) -> Result<bool, ClusterError> {
    if k >= state.k() {
        return Err(ClusterError::InvalidArgument(format!("no cluster {k}")));
    }
    let Some(log_h) = split_log_ratio(z, state, k, prior)? else {
        return Ok(false);
    };
    if log_h <= ln_u(rng) {
        return Ok(false);
    }
    apply_split(z, state, k);
    m_step(z, state, prior)?;
    Ok(true)
}

/// Relabels so that each `(a, b)` becomes one cluster whose sub-clusters
/// are the former `a` and `b`.
fn apply_merges(z: &Matrix, state: &mut ClusterState, pairs: &[(usize, usize)], prior: &NWPrior) -> Result<(), ClusterError> {
    let mut target: Vec<Option<(usize, u8)>> = vec![None; state.k()];
    for &(a, b) in pairs {
        target[a] = Some((a, 0));
        target[b] = Some((a, 1));
    }
    for i in 0..state.assignments.len() {
        if let Some((t, h)) = target[state.assignments[i]] {
            state.assignments[i] = t;
            state.sub_assignments[i] = h;
        }
    }
    m_step(z, state, prior)
}

/// Metropolis-Hastings merge of clusters `a` and `b`.
pub fn propose_merge<R: Rng>(
    z: &Matrix,
    state: &mut ClusterState,
    a: usize,
    b: usize,
    prior: &NWPrior,
    rng: &mut R,
) -> Result<bool, ClusterError> {
    if a == b || a >= state.k() || b >= state.k() {
        return Err(ClusterError::InvalidArgument(format!("invalid merge pair ({a}, {b})")));
    }
    let log_h = merge_log_ratio(z, state, a, b, prior)?;
    if log_h <= ln_u(rng) {
        return Ok(false);
    }
    apply_merges(z, state, &[(a.min(b), a.max(b))], prior)?;
    Ok(true)
}

/// Whether the monitored bound has stalled or started to oscillate.
fn settled(history: &VecDeque<f64>) -> bool {
    let v: Vec<f64> = history.iter().copied().collect();
    let n = v.len();
    if n >= 2 {
        let d = v[n - 1] - v[n - 2];
        if d.abs() <= 1e-6 * v[n - 1].abs() {
            return true;
        }
    }
    if n >= 5 {
        let deltas: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
        let last = &deltas[deltas.len() - 4..];
        if last.windows(2).all(|w| w[0] * w[1] < 0.0) {
            return true;
        }
    }
    false
}

/// Number of nearest neighbours considered as merge partners per cluster.
const MERGE_CANDIDATES: usize = 3;

fn proposal_round<R: Rng>(z: &Matrix, state: &mut ClusterState, prior: &NWPrior, rng: &mut R) -> Result<bool, ClusterError> {
    let mut any = false;
    let k0 = state.k();
    let mut fresh = vec![false; k0];
    for k in 0..k0 {
        if propose_split(z, state, k, prior, rng)? {
            any = true;
            fresh[k] = true;
            fresh.push(true);
        }
    }
    let means = state.means();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for a in 0..state.k() {
        if fresh[a] {
            continue;
        }
        let mut near: Vec<(f64, usize)> = (0..state.k())
            .filter(|&b| b != a && !fresh[b])
            .map(|b| {
                let d2 = means.row(a).iter().zip(means.row(b)).map(|(x, y)| (x - y).powi(2)).sum();
                (d2, b)
            })
            .collect();
        near.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(d2, b) in near.iter().take(MERGE_CANDIDATES) {
            pairs.push((d2, a.min(b), a.max(b)));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    pairs.dedup_by(|x, y| x.1 == y.1 && x.2 == y.2);
    let mut used = vec![false; state.k()];
    let mut accepted = Vec::new();
    for &(_, a, b) in &pairs {
        if used[a] || used[b] {
            continue;
        }
        let log_h = merge_log_ratio(z, state, a, b, prior)?;
        if log_h > ln_u(rng) {
            used[a] = true;
            used[b] = true;
            accepted.push((a, b));
        }
    }
    if !accepted.is_empty() {
        apply_merges(z, state, &accepted, prior)?;
        any = true;
    }
    Ok(any)
}

/// What a call to [`run_clustering`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunSummary {
    pub em_steps: usize,
    pub proposal_rounds: usize,
    pub accepted_rounds: usize,
}

/// Advances the converge / propose / done state machine by at most
/// `steps` steps (one EM iteration or one proposal round each). A done
/// state is left untouched; call [`ClusterState::reopen`] to resume.
pub fn run_clustering<R: Rng>(
    z: &Matrix,
    prior: &NWPrior,
    steps: usize,
    rng: &mut R,
    state: &mut ClusterState,
) -> Result<RunSummary, ClusterError> {
    if steps == 0 {
        return Err(ClusterError::InvalidArgument("clustering steps must be at least 1".into()));
    }
    check_dim(z, prior)?;
    if state.assignments.len() != z.rows() {
        return Err(ClusterError::InvalidArgument(format!(
            "state covers {} rows, data has {}",
            state.assignments.len(),
            z.rows()
        )));
    }
    let mut summary = RunSummary::default();
    for _ in 0..steps {
        match state.phase {
            Phase::Done => break,
            Phase::Converging => {
                e_step(z, state);
                m_step(z, state, prior)?;
                let b = lower_bound(z, state, prior);
                state.push_history(b);
                summary.em_steps += 1;
                if settled(&state.history) {
                    state.phase = Phase::Proposal;
                }
            }
            Phase::Proposal => {
                summary.proposal_rounds += 1;
                if proposal_round(z, state, prior, rng)? {
                    summary.accepted_rounds += 1;
                    state.reopen();
                } else {
                    state.phase = Phase::Done;
                }
            }
        }
    }
    Ok(summary)
}
