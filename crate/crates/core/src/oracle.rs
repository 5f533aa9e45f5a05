//! Linear-Gaussian regression where the optimum, Hessian, Fisher and log
//! posterior all have closed forms. Used to check the Fisher and
//! forgetting-confidence pipeline against exact answers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LwfError, Result};
use crate::fisher::{
    estimate_fisher, rank_order, score_candidates, ConfidenceEntry, Direction, FcConfig, FisherDiagonal,
};
use crate::model::{Differentiable, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadSample {
    pub phi: Vec<f64>,
    pub y: f64,
}

impl QuadSample {
    pub fn new(phi: Vec<f64>, y: f64) -> Self {
        Self { phi, y }
    }

    fn residual(&self, w: &[f64]) -> f64 {
        dot(w, &self.phi) - self.y
    }

    /// Curvature of this sample's loss along its own feature vector.
    pub fn curvature(&self) -> f64 {
        dot(&self.phi, &self.phi)
    }
}

/// Objective `0.5 * sum_n (w·phi_n - y_n)^2 + 0.5 * lambda * |w|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadProblem {
    pub samples: Vec<QuadSample>,
    pub lambda: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl QuadProblem {
    pub fn new(samples: Vec<QuadSample>, lambda: f64) -> Result<Self> {
        let p = Self { samples, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.samples.first().ok_or(LwfError::EmptyDataset)?;
        let dim = first.phi.len();
        if dim == 0 {
            return Err(LwfError::Invalid("feature vectors must be non-empty".into()));
        }
        for s in &self.samples {
            if s.phi.len() != dim {
                return Err(LwfError::DimensionMismatch {
                    what: "feature vector",
                    got: s.phi.len(),
                    expected: dim,
                });
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(LwfError::InvalidConfig(format!(
                "prior precision must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.samples[0].phi.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `Phi^T Phi + lambda I`
    pub fn hessian(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::<f64>::identity(d, d) * self.lambda;
        for s in &self.samples {
            let v = DVector::from_column_slice(&s.phi);
            h += &v * v.transpose();
        }
        h
    }

    pub fn objective(&self, w: &ParamVector) -> Result<f64> {
        w.check_dim("weights", self.dim())?;
        let data: f64 = self
            .samples
            .iter()
            .map(|s| 0.5 * s.residual(w.as_slice()).powi(2))
            .sum();
        Ok(data + 0.5 * self.lambda * dot(w.as_slice(), w.as_slice()))
    }

    /// Model whose per-sample loss carries a `lambda / N` share of the prior,
    /// so the summed loss over the problem's samples is the objective.
    pub fn model(&self, w: ParamVector) -> Result<QuadModel> {
        w.check_dim("weights", self.dim())?;
        Ok(QuadModel::new(w, self.lambda / self.len() as f64))
    }
}

/// Linear regressor with an optional per-sample ridge share.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadModel {
    params: ParamVector,
    prior_share: f64,
}

impl QuadModel {
    pub fn new(params: ParamVector, prior_share: f64) -> Self {
        Self { params, prior_share }
    }

    pub fn prior_share(&self) -> f64 {
        self.prior_share
    }

    fn check(&self, x: &QuadSample) -> Result<()> {
        if x.phi.len() != self.params.dim() {
            return Err(LwfError::DimensionMismatch {
                what: "feature vector",
                got: x.phi.len(),
                expected: self.params.dim(),
            });
        }
        Ok(())
    }
}

impl Differentiable for QuadModel {
    type Sample = QuadSample;

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn loss(&self, x: &QuadSample) -> Result<f64> {
        self.check(x)?;
        let w = self.params.as_slice();
        Ok(0.5 * x.residual(w).powi(2) + 0.5 * self.prior_share * dot(w, w))
    }

    fn accumulate_grad(&self, x: &QuadSample, scale: f64, grad: &mut [f64]) -> Result<f64> {
        self.check(x)?;
        self.params.check_dim("gradient buffer", grad.len())?;
        let w = self.params.as_slice();
        let r = x.residual(w);
        for i in 0..w.len() {
            grad[i] += scale * (r * x.phi[i] + self.prior_share * w[i]);
        }
        Ok(0.5 * r * r + 0.5 * self.prior_share * dot(w, w))
    }
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let chol = a
        .cholesky()
        .ok_or_else(|| LwfError::Singular(format!("{what}: normal equations are not positive definite")))?;
    Ok(chol.solve(&b))
}

/// Exact minimizer of the problem's objective.
pub fn closed_form_theta_star(problem: &QuadProblem) -> Result<ParamVector> {
    problem.validate()?;
    let mut rhs = DVector::<f64>::zeros(problem.dim());
    for s in &problem.samples {
        rhs += DVector::from_column_slice(&s.phi) * s.y;
    }
    let w = solve_spd(problem.hessian(), rhs, "theta_star")?;
    Ok(ParamVector::new(w.as_slice().to_vec()))
}

/// Precomputed optimum and Hessian of one problem.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub problem: QuadProblem,
    pub theta_star: ParamVector,
    pub hessian: DMatrix<f64>,
}

impl Posterior {
    pub fn new(problem: QuadProblem) -> Result<Self> {
        let theta_star = closed_form_theta_star(&problem)?;
        let hessian = problem.hessian();
        Ok(Self {
            problem,
            theta_star,
            hessian,
        })
    }

    /// `-0.5 (theta - theta*)^T H (theta - theta*)`, constant pinned to 0.
    pub fn log_posterior(&self, theta: &ParamVector) -> Result<f64> {
        theta.check_dim("theta", self.theta_star.dim())?;
        let d = DVector::from_iterator(
            theta.dim(),
            theta
                .as_slice()
                .iter()
                .zip(self.theta_star.as_slice())
                .map(|(a, b)| a - b),
        );
        Ok(-0.5 * d.dot(&(&self.hessian * &d)))
    }

    /// The same quantity from the objective itself, `-(J(theta) - J(theta*))`.
    pub fn direct_log_posterior(&self, theta: &ParamVector) -> Result<f64> {
        Ok(-(self.problem.objective(theta)? - self.problem.objective(&self.theta_star)?))
    }

    /// Curvatures and directions of the Hessian.
    pub fn eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        self.hessian.clone().symmetric_eigen()
    }

    pub fn oracle_fc(&self, x: &QuadSample, theta_base: &ParamVector, alpha: f64) -> Result<f64> {
        Ok(-self.log_posterior(&exact_theta_x(x, theta_base, alpha)?)?)
    }

    /// Empirical diagonal Fisher at theta*, computed from residuals directly.
    pub fn empirical_fisher(&self) -> Result<FisherDiagonal> {
        let share = self.problem.lambda / self.problem.len() as f64;
        let w = self.theta_star.as_slice();
        let mut f = vec![0.0; w.len()];
        for s in &self.problem.samples {
            let r = s.residual(w);
            for i in 0..w.len() {
                let g = r * s.phi[i] + share * w[i];
                f[i] += g * g;
            }
        }
        let n = self.problem.len() as f64;
        FisherDiagonal::new(f.into_iter().map(|v| v / n).collect())
    }
}

pub fn exact_log_posterior(problem: &QuadProblem, theta: &ParamVector) -> Result<f64> {
    Posterior::new(problem.clone())?.log_posterior(theta)
}

/// Exact `theta*(x)` for a single example: the minimizer of its loss under a
/// Gaussian prior centred at `theta_base` with variance `alpha`. A single
/// example leaves its loss singular, so the prior is what pins the solution.
pub fn exact_theta_x(x: &QuadSample, theta_base: &ParamVector, alpha: f64) -> Result<ParamVector> {
    if !(alpha > 0.0) {
        return Err(LwfError::InvalidConfig(format!("alpha must be positive, got {alpha}")));
    }
    theta_base.check_dim("theta_base", x.phi.len())?;
    let r = x.residual(theta_base.as_slice());
    let coef = alpha * r / (1.0 + alpha * x.curvature());
    let mut out = theta_base.clone();
    for (o, p) in out.as_mut_slice().iter_mut().zip(&x.phi) {
        *o -= coef * p;
    }
    Ok(out)
}

pub fn oracle_fc(problem_l: &QuadProblem, x: &QuadSample, theta_base: &ParamVector, alpha: f64) -> Result<f64> {
    Posterior::new(problem_l.clone())?.oracle_fc(x, theta_base, alpha)
}

/// Problem whose samples each touch a single coordinate, so the Hessian is
/// diagonal. Coordinate scales span two orders of magnitude.
pub fn diagonal_problem(dim: usize, per_coord: usize, lambda: f64, noise: f64, seed: u64) -> Result<QuadProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut samples = Vec::with_capacity(dim * per_coord);
    for (i, t) in truth.iter().enumerate() {
        let scale = 10f64.powf(rng.random_range(-1.0..1.0));
        for _ in 0..per_coord {
            let s = scale * rng.random_range(0.5..1.5);
            let mut phi = vec![0.0; dim];
            phi[i] = s;
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            samples.push(QuadSample::new(phi, t * s + sign * noise));
        }
    }
    QuadProblem::new(samples, lambda)
}

/// Problem with dense Gaussian features.
pub fn dense_problem(dim: usize, n: usize, lambda: f64, noise: f64, seed: u64) -> Result<QuadProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let samples = (0..n)
        .map(|_| {
            let phi: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
            let y = dot(&phi, &truth) + noise * gaussian(&mut rng);
            QuadSample::new(phi, y)
        })
        .collect();
    QuadProblem::new(samples, lambda)
}

/// Random candidates with dense features of norm at most `max_norm`.
pub fn candidates(dim: usize, n: usize, max_norm: f64, seed: u64) -> Vec<QuadSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut phi: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
            let norm = dot(&phi, &phi).sqrt();
            let target = max_norm * rng.random_range(0.2..1.0);
            phi.iter_mut().for_each(|p| *p *= target / norm);
            QuadSample::new(phi, rng.random_range(-3.0..3.0))
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Pipeline forgetting confidence of each candidate on a problem: diagonal
/// empirical Fisher at the exact optimum, update from `theta_base` with no
/// prior share.
pub fn pipeline_fc(
    post: &Posterior,
    pool: &[QuadSample],
    theta_base: &ParamVector,
    cfg: &FcConfig,
) -> Result<Vec<f64>> {
    let at_star = post.problem.model(post.theta_star.clone())?;
    let fisher = estimate_fisher(&at_star, &post.problem.samples)?;
    let base = QuadModel::new(theta_base.clone(), 0.0);
    Ok(score_candidates(pool, &base, &post.theta_star, &fisher, cfg)?
        .into_iter()
        .map(|e| e.score)
        .collect())
}

/// Fraction of the `k` highest entries of `a` that are also among the `k`
/// highest of `b`. Ties go to the lower index.
pub fn top_k_overlap(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LwfError::DimensionMismatch {
            what: "series",
            got: b.len(),
            expected: a.len(),
        });
    }
    let k = k.min(a.len());
    if k == 0 {
        return Ok(1.0);
    }
    let top = |v: &[f64]| -> Vec<usize> {
        let entries: Vec<ConfidenceEntry> = v
            .iter()
            .enumerate()
            .map(|(i, s)| ConfidenceEntry {
                example_index: i,
                score: *s,
            })
            .collect();
        rank_order(&entries, Direction::Highest).into_iter().take(k).collect()
    };
    let ta = top(a);
    let tb = top(b);
    Ok(ta.iter().filter(|i| tb.contains(i)).count() as f64 / k as f64)
}

/// Spearman rank correlation, ties given their average rank.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LwfError::DimensionMismatch {
            what: "series",
            got: b.len(),
            expected: a.len(),
        });
    }
    if a.len() < 2 {
        return Err(LwfError::Invalid("rank correlation needs at least two points".into()));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(LwfError::Invalid("rank correlation of a constant series".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let avg = (start + end - 1) as f64 / 2.0 + 1.0;
        for &k in &idx[start..end] {
            out[k] = avg;
        }
        start = end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn single_example_ridge_free() {
        let p = QuadProblem::new(vec![QuadSample::new(vec![1.0], 2.0)], 0.0).unwrap();
        assert!(close(closed_form_theta_star(&p).unwrap()[0], 2.0, 1e-14));
    }

    #[test]
    fn heavy_prior_shrinks_to_zero() {
        let mut p = dense_problem(4, 10, 1e12, 0.1, 3).unwrap();
        assert!(closed_form_theta_star(&p).unwrap().norm() < 1e-9);
        p.lambda = 0.0;
        assert!(closed_form_theta_star(&p).unwrap().norm() > 1e-3);
    }

    #[test]
    fn rank_deficient_without_prior_is_rejected() {
        let p = QuadProblem::new(vec![QuadSample::new(vec![1.0, 1.0], 1.0)], 0.0).unwrap();
        assert!(matches!(closed_form_theta_star(&p), Err(LwfError::Singular(_))));
    }

    #[test]
    fn optimum_has_zero_objective_gradient() {
        let p = dense_problem(5, 20, 0.3, 0.5, 8).unwrap();
        let w = closed_form_theta_star(&p).unwrap();
        let m = p.model(w).unwrap();
        let mut g = vec![0.0; 5];
        for s in &p.samples {
            m.accumulate_grad(s, 1.0, &mut g).unwrap();
        }
        assert!(g.iter().all(|v| v.abs() < 1e-10), "{g:?}");
    }

    #[test]
    fn log_posterior_is_maximal_at_the_optimum() {
        let post = Posterior::new(dense_problem(3, 12, 0.5, 0.2, 1).unwrap()).unwrap();
        assert_eq!(post.log_posterior(&post.theta_star).unwrap(), 0.0);
    }

    #[test]
    fn log_posterior_along_eigenvectors() {
        let post = Posterior::new(dense_problem(4, 15, 0.5, 0.2, 2).unwrap()).unwrap();
        let eig = post.eigen();
        for k in 0..4 {
            let t = 0.7;
            let mut theta = post.theta_star.clone();
            for i in 0..4 {
                theta[i] += t * eig.eigenvectors[(i, k)];
            }
            let expect = -0.5 * eig.eigenvalues[k] * t * t;
            assert!(close(post.log_posterior(&theta).unwrap(), expect, 1e-12));
        }
    }

    #[test]
    fn taylor_and_direct_forms_agree() {
        let post = Posterior::new(dense_problem(6, 30, 0.2, 0.3, 4).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let theta = ParamVector::new((0..6).map(|_| rng.random_range(-2.0..2.0)).collect());
            let a = post.log_posterior(&theta).unwrap();
            let b = post.direct_log_posterior(&theta).unwrap();
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn pipeline_fisher_matches_closed_form() {
        let post = Posterior::new(dense_problem(5, 40, 0.1, 0.5, 6).unwrap()).unwrap();
        let model = post.problem.model(post.theta_star.clone()).unwrap();
        let est = estimate_fisher(&model, &post.problem.samples).unwrap();
        let exact = post.empirical_fisher().unwrap();
        for (a, b) in est.weights().iter().zip(exact.weights()) {
            assert!((a - b).abs() <= 1e-6 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn candidate_at_the_optimum_has_zero_oracle_fc() {
        let post = Posterior::new(dense_problem(3, 10, 0.5, 0.2, 7).unwrap()).unwrap();
        // residual zero at theta* makes the update a no-op
        let phi = vec![0.3, -0.1, 0.8];
        let y = dot(&phi, post.theta_star.as_slice());
        let fc = post
            .oracle_fc(&QuadSample::new(phi, y), &post.theta_star, 0.05)
            .unwrap();
        assert_eq!(fc, 0.0);
    }

    #[test]
    fn oracle_fc_grows_along_an_eigen_direction() {
        let post = Posterior::new(dense_problem(3, 10, 0.5, 0.2, 9).unwrap()).unwrap();
        let eig = post.eigen();
        let v: Vec<f64> = (0..3).map(|i| eig.eigenvectors[(i, 0)]).collect();
        // x = (v, y) moves theta*(x) along v as y varies
        let mut last = -1.0;
        for step in 0..6 {
            let y = dot(&v, post.theta_star.as_slice()) + step as f64;
            let fc = post
                .oracle_fc(&QuadSample::new(v.clone(), y), &post.theta_star, 0.1)
                .unwrap();
            assert!(fc > last);
            last = fc;
        }
    }

    #[test]
    fn dominant_example_scores_below_median() {
        let post = Posterior::new(diagonal_problem(5, 8, 0.1, 0.3, 10).unwrap()).unwrap();
        let dominant = post
            .problem
            .samples
            .iter()
            .max_by(|a, b| a.curvature().total_cmp(&b.curvature()))
            .unwrap()
            .clone();
        let base = ParamVector::zeros(5);
        let pool = candidates(5, 50, 3.0, 11);
        let mut fcs: Vec<f64> = pool.iter().map(|x| post.oracle_fc(x, &base, 1e-2).unwrap()).collect();
        fcs.sort_by(f64::total_cmp);
        let median = 0.5 * (fcs[24] + fcs[25]);
        assert!(post.oracle_fc(&dominant, &base, 1e-2).unwrap() < median);
    }

    #[test]
    fn diagonal_fisher_fc_tracks_oracle_ranking() {
        let post = Posterior::new(diagonal_problem(6, 20, 0.1, 0.3, 12).unwrap()).unwrap();
        let at_star = post.problem.model(post.theta_star.clone()).unwrap();
        let fisher = estimate_fisher(&at_star, &post.problem.samples).unwrap();
        let base = QuadModel::new(ParamVector::zeros(6), 0.0);
        let pool = candidates(6, 50, 3.0, 13);
        let cfg = FcConfig::default();
        let fc: Vec<f64> = score_candidates(&pool, &base, &post.theta_star, &fisher, &cfg)
            .unwrap()
            .into_iter()
            .map(|e| e.score)
            .collect();
        let oracle: Vec<f64> = pool
            .iter()
            .map(|x| post.oracle_fc(x, base.params(), cfg.alpha).unwrap())
            .collect();
        let rho = spearman(&fc, &oracle).unwrap();
        assert!(rho >= 0.95, "rho = {rho}");
    }

    #[test]
    fn spearman_basics() {
        assert!(close(
            spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0,
            1e-15
        ));
        assert!(close(
            spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            -1.0,
            1e-15
        ));
        // ties: ranks (1.5, 1.5, 3) vs (1, 2, 3)
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(close(r, 0.75f64.sqrt(), 1e-12), "{r}");
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
