//! (μ/μ_w, λ) CMA-ES with rank-one and rank-μ covariance updates and
//! cumulative step-size adaptation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SimError;

/// Smallest eigenvalue the covariance may take.
pub const EIGEN_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmaConfig {
    pub lambda: usize,
    pub mu: usize,
    pub sigma0: f64,
    pub seed: u64,
}

impl Default for CmaConfig {
    fn default() -> Self {
        CmaConfig {
            lambda: 16,
            mu: 8,
            sigma0: 0.1,
            seed: 0,
        }
    }
}

impl CmaConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.lambda < 2 || self.mu == 0 || self.mu > self.lambda {
            return Err(SimError::InvalidConfig(format!(
                "need 1 <= mu <= lambda and lambda >= 2, got mu {} lambda {}",
                self.mu, self.lambda
            )));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(SimError::InvalidConfig("sigma0 must be positive".into()));
        }
        Ok(())
    }
}

/// Search distribution `N(m, σ²C)` with its evolution paths.
#[derive(Debug, Clone)]
pub struct CmaState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub sigma: f64,
    pub p_sigma: DVector<f64>,
    pub p_c: DVector<f64>,
    pub generation: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c1: f64,
    c_mu: f64,
    chi_n: f64,
    /// Eigenvectors of C and square roots of its eigenvalues.
    basis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    scales: DVector<f64>,
    rng: ChaCha8Rng,
    lambda: usize,
}

impl CmaState {
    /// Starts at `mean0` with `C = I` and `σ = sigma0`.
    pub fn new(mean0: Vec<f64>, cfg: &CmaConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let n = mean0.len();
        if n == 0 {
            return Err(SimError::InvalidConfig("empty search space".into()));
        }
        let nf = n as f64;
        let raw: Vec<f64> = (1..=cfg.mu)
            .map(|i| (cfg.mu as f64 + 0.5).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Ok(CmaState {
            mean: DVector::from_vec(mean0),
            cov: DMatrix::identity(n, n),
            sigma: cfg.sigma0,
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            generation: 0,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c1,
            c_mu,
            chi_n,
            basis: DMatrix::identity(n, n),
            eigenvalues: DVector::from_element(n, 1.0),
            scales: DVector::from_element(n, 1.0),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            lambda: cfg.lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Smallest eigenvalue of C at the last decomposition.
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.min()
    }

    /// Draws one population, in a fixed order.
    pub fn ask(&mut self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..self.lambda)
            .map(|_| {
                let z = DVector::from_fn(n, |_, _| self.rng.sample::<f64, _>(StandardNormal));
                let y = &self.basis * z.component_mul(&self.scales);
                (&self.mean + y * self.sigma).as_slice().to_vec()
            })
            .collect()
    }

    /// Updates the distribution from a population and its costs. Non-finite
    /// costs rank last; a generation without any finite cost leaves the
    /// distribution unchanged.
    pub fn tell(&mut self, population: &[Vec<f64>], costs: &[f64]) -> Result<(), SimError> {
        let n = self.dim();
        if population.len() != costs.len() || population.len() < self.weights.len() {
            return Err(SimError::InvalidConfig(format!(
                "population of {} with {} costs for mu {}",
                population.len(),
                costs.len(),
                self.weights.len()
            )));
        }
        if population.iter().any(|x| x.len() != n) {
            return Err(SimError::ShapeMismatch {
                expected: n,
                got: population.iter().map(|x| x.len()).find(|&l| l != n).unwrap(),
            });
        }
        self.generation += 1;
        if !costs.iter().any(|c| c.is_finite()) {
            return Ok(());
        }
        let order = rank(costs);
        let ys: Vec<DVector<f64>> = order[..self.weights.len()]
            .iter()
            .map(|&i| (DVector::from_column_slice(&population[i]) - &self.mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(n);
        for (w, y) in self.weights.iter().zip(&ys) {
            y_w += y * *w;
        }
        self.mean += &y_w * self.sigma;

        // C^{-1/2} y_w = B D^{-1} Bᵀ y_w
        let inv_sqrt = &self.basis * (self.basis.tr_mul(&y_w)).component_div(&self.scales);
        let cs = self.c_sigma;
        self.p_sigma = &self.p_sigma * (1.0 - cs) + inv_sqrt * (cs * (2.0 - cs) * self.mu_eff).sqrt();
        let ps_norm = self.p_sigma.norm();
        let decay = 1.0 - (1.0 - cs).powi(2 * self.generation as i32);
        let h_sigma = ps_norm / decay.sqrt() < (1.4 + 2.0 / (n as f64 + 1.0)) * self.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };
        let cc = self.c_c;
        self.p_c = &self.p_c * (1.0 - cc) + &y_w * (h * (cc * (2.0 - cc) * self.mu_eff).sqrt());

        let delta_h = (1.0 - h) * cc * (2.0 - cc);
        let mut cov = &self.cov * (1.0 - self.c1 - self.c_mu + self.c1 * delta_h);
        cov += &self.p_c * self.p_c.transpose() * self.c1;
        for (w, y) in self.weights.iter().zip(&ys) {
            cov += y * y.transpose() * (self.c_mu * w);
        }
        self.cov = (&cov + cov.transpose()) * 0.5;
        self.sigma *= ((cs / self.d_sigma) * (ps_norm / self.chi_n - 1.0)).exp();
        self.decompose()
    }

    /// Refreshes `B`, `D` and enforces the eigenvalue floor.
    fn decompose(&mut self) -> Result<(), SimError> {
        let eig = SymmetricEigen::new(self.cov.clone());
        if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Diverged("covariance became non-finite".into()));
        }
        let floored = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
        if floored != eig.eigenvalues {
            self.cov = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
            self.cov = (&self.cov + self.cov.transpose()) * 0.5;
        }
        self.scales = floored.map(f64::sqrt);
        self.eigenvalues = floored;
        self.basis = eig.eigenvectors;
        assert!(self.min_eigenvalue() >= EIGEN_FLOOR, "covariance lost definiteness");
        Ok(())
    }
}

/// Indices sorted by cost; NaN ranks with +∞, ties keep index order.
fn rank(costs: &[f64]) -> Vec<usize> {
    let key = |c: f64| if c.is_nan() { f64::INFINITY } else { c };
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| key(costs[a]).total_cmp(&key(costs[b])).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaResult {
    pub best: Vec<f64>,
    pub best_cost: f64,
    pub evaluations: usize,
    /// Best cost seen so far, after each generation.
    pub trace: Vec<f64>,
    /// Smallest covariance eigenvalue over all generations.
    pub min_eigenvalue: f64,
    /// Candidates whose cost was not finite.
    pub rejected: usize,
}

/// Minimizes `f` with whole generations until `budget` evaluations are
/// spent. Populations are evaluated in parallel; results do not depend on
/// the thread count.
pub fn cma_minimize(
    f: impl Fn(&[f64]) -> f64 + Sync,
    mean0: Vec<f64>,
    cfg: &CmaConfig,
    budget: usize,
) -> Result<CmaResult, SimError> {
    cfg.validate()?;
    if budget < cfg.lambda {
        return Err(SimError::InvalidConfig(format!(
            "budget {budget} is smaller than one population ({})",
            cfg.lambda
        )));
    }
    let mut state = CmaState::new(mean0, cfg)?;
    let mut best = (f64::INFINITY, state.mean.as_slice().to_vec());
    let mut result = CmaResult {
        best: Vec::new(),
        best_cost: f64::INFINITY,
        evaluations: 0,
        trace: Vec::new(),
        min_eigenvalue: state.min_eigenvalue(),
        rejected: 0,
    };
    while result.evaluations + cfg.lambda <= budget {
        let population = state.ask();
        let costs: Vec<f64> = population.par_iter().map(|x| f(x)).collect();
        result.evaluations += population.len();
        result.rejected += costs.iter().filter(|c| !c.is_finite()).count();
        if let Some(&i) = rank(&costs).first() {
            if costs[i] < best.0 {
                best = (costs[i], population[i].clone());
            }
        }
        result.trace.push(best.0);
        state.tell(&population, &costs)?;
        result.min_eigenvalue = result.min_eigenvalue.min(state.min_eigenvalue());
    }
    result.best_cost = best.0;
    result.best = best.1;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn rosenbrock(x: &[f64]) -> f64 {
        x.windows(2)
            .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
            .sum()
    }

    #[test]
    fn sphere_converges() {
        let cfg = CmaConfig {
            sigma0: 0.5,
            ..Default::default()
        };
        let r = cma_minimize(sphere, vec![1.0; 10], &cfg, 5000).unwrap();
        assert!(sphere(&r.best).sqrt() < 1e-6, "{}", sphere(&r.best).sqrt());
        assert!(r.evaluations <= 5000);
        assert!(r.min_eigenvalue >= EIGEN_FLOOR);
    }

    #[test]
    fn rosenbrock_converges() {
        let cfg = CmaConfig {
            sigma0: 0.5,
            seed: 3,
            ..Default::default()
        };
        let r = cma_minimize(rosenbrock, vec![0.0; 5], &cfg, 20000).unwrap();
        assert!(r.best_cost < 1e-3, "{}", r.best_cost);
        assert!(r.min_eigenvalue >= EIGEN_FLOOR);
    }

    #[test]
    fn trace_is_monotone_and_runs_are_deterministic() {
        let cfg = CmaConfig::default();
        let a = cma_minimize(rosenbrock, vec![0.3; 4], &cfg, 800).unwrap();
        let b = cma_minimize(rosenbrock, vec![0.3; 4], &cfg, 800).unwrap();
        assert_eq!(a, b);
        assert!(a.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(a.trace.len(), 50);
    }

    #[test]
    fn one_generation_returns_best_initial_candidate() {
        let cfg = CmaConfig {
            seed: 9,
            ..Default::default()
        };
        let r = cma_minimize(sphere, vec![0.2; 6], &cfg, cfg.lambda).unwrap();
        let population = CmaState::new(vec![0.2; 6], &cfg).unwrap().ask();
        let best = population
            .iter()
            .min_by(|a, b| sphere(a).total_cmp(&sphere(b)))
            .unwrap();
        assert_eq!(&r.best, best);
        assert_eq!(r.evaluations, cfg.lambda);
        assert!(cma_minimize(sphere, vec![0.2; 6], &cfg, cfg.lambda - 1).is_err());
    }

    #[test]
    fn infinite_costs_are_rejected_not_fatal() {
        let cfg = CmaConfig::default();
        // half the space is infeasible
        let f = |x: &[f64]| if x[0] < 0.0 { f64::INFINITY } else { sphere(&x[1..]) + (x[0] - 0.5).powi(2) };
        let r = cma_minimize(f, vec![0.1; 3], &cfg, 1600).unwrap();
        assert!(r.rejected > 0);
        assert!(r.best_cost < 1e-6);
        let all_bad = cma_minimize(|_: &[f64]| f64::INFINITY, vec![0.0; 3], &cfg, 64).unwrap();
        assert_eq!(all_bad.rejected, 64);
        assert_eq!(all_bad.best_cost, f64::INFINITY);
    }

    #[test]
    fn covariance_stays_symmetric_positive_definite() {
        let mut s = CmaState::new(vec![2.0; 8], &CmaConfig::default()).unwrap();
        for _ in 0..200 {
            let pop = s.ask();
            let costs: Vec<f64> = pop.iter().map(|x| rosenbrock(x)).collect();
            s.tell(&pop, &costs).unwrap();
            assert_eq!(s.cov, s.cov.transpose());
            let eig = SymmetricEigen::new(s.cov.clone());
            assert!(eig.eigenvalues.iter().all(|&v| v >= EIGEN_FLOOR * 0.999));
            assert!(s.sigma > 0.0);
        }
    }

    #[test]
    fn ranking_puts_nan_last() {
        assert_eq!(rank(&[3.0, f64::NAN, 1.0, f64::INFINITY, 1.0]), vec![2, 4, 0, 1, 3]);
    }
}
