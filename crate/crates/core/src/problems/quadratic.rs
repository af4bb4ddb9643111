//! Clustered quadratic: `ℓ_n(θ) = ½(θ − c_n)ᵀ A_n (θ − c_n)` with sample
//! gradients `A_n(θ − c_n) + ξ`, `ξ ∼ N(0, s²I)`.
//!
//! With this noise model the strong-convexity constant, the Lipschitz
//! constant, the per-cluster second moments and the minimizer are all
//! available in closed form.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ClusteredProblem;
use crate::cluster::{BatchItem, ClusterId, ClusterSpec};
use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::vector::ParamVector;

const MAX_CONDITION: f64 = 1e12;
const SYMMETRY_TOL: f64 = 1e-10;

/// Random instance description; the instance is a pure function of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadraticConfig {
    pub dim: usize,
    pub n_clusters: usize,
    /// Cluster probabilities; uniform when absent.
    pub probs: Option<Vec<f64>>,
    pub eig_min: f64,
    pub eig_max: f64,
    pub noise_std: f64,
    /// Multiplies every center `c_n ∼ N(0, I)`.
    pub center_scale: f64,
    pub instance_seed: u64,
}

impl Default for QuadraticConfig {
    fn default() -> Self {
        Self {
            dim: 20,
            n_clusters: 5,
            probs: None,
            eig_min: 0.5,
            eig_max: 2.0,
            noise_std: 0.5,
            center_scale: 1.0,
            instance_seed: 0,
        }
    }
}

impl QuadraticConfig {
    pub fn spec(&self) -> Result<ClusterSpec> {
        match &self.probs {
            Some(p) => {
                if p.len() != self.n_clusters {
                    return Err(Error::InvalidProbs(format!(
                        "{} probabilities for {} clusters",
                        p.len(),
                        self.n_clusters
                    )));
                }
                ClusterSpec::new(p.clone())
            }
            None => ClusterSpec::uniform(self.n_clusters),
        }
    }

    /// Draws `A_n = Q_n diag(λ) Q_nᵀ` with `λ_1 = eig_min`, `λ_d = eig_max`
    /// and the rest uniform in between.
    pub fn build(&self) -> Result<ClusteredQuadratic> {
        if self.dim == 0 {
            return Err(Error::InvalidProblem("dim must be positive".into()));
        }
        if !(self.eig_min > 0.0 && self.eig_max >= self.eig_min) {
            return Err(Error::InvalidProblem(format!(
                "eigenvalue range [{}, {}] is not positive",
                self.eig_min, self.eig_max
            )));
        }
        if !(self.noise_std >= 0.0 && self.center_scale.is_finite()) {
            return Err(Error::InvalidProblem("noise_std must be >= 0".into()));
        }
        let spec = self.spec()?;
        let d = self.dim;
        let mut rng = RngStream::for_purpose(self.instance_seed, Purpose::Instance).rng();
        let mut hessians = Vec::with_capacity(self.n_clusters);
        let mut spectra = Vec::with_capacity(self.n_clusters);
        for _ in 0..self.n_clusters {
            let gauss = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
            let q = gauss.qr().q();
            let mut eig: Vec<f64> = (0..d)
                .map(|i| match i {
                    0 => self.eig_min,
                    i if i == d - 1 => self.eig_max,
                    _ => rng.random_range(self.eig_min..=self.eig_max),
                })
                .collect();
            if d == 1 {
                eig[0] = self.eig_min;
            }
            let a = &q * DMatrix::from_diagonal(&DVector::from_vec(eig.clone())) * q.transpose();
            hessians.push((&a + a.transpose()) * 0.5);
            spectra.push(eig);
        }
        let centers = (0..self.n_clusters)
            .map(|_| {
                ParamVector::from_vec(
                    (0..d)
                        .map(|_| self.center_scale * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            })
            .collect();
        let mut problem = ClusteredQuadratic::new(spec, hessians, centers, self.noise_std)?;
        problem.spectra = Some(spectra);
        Ok(problem)
    }
}

#[derive(Debug, Clone)]
pub struct ClusteredQuadratic {
    spec: ClusterSpec,
    dim: usize,
    hessians: Vec<DMatrix<f64>>,
    /// Row-major copies for the hot matvec.
    rows: Vec<Vec<f64>>,
    centers: Vec<ParamVector>,
    noise_std: f64,
    minimizer: ParamVector,
    /// Eigenvalues used to construct each `A_n`, when generated.
    spectra: Option<Vec<Vec<f64>>>,
}

impl ClusteredQuadratic {
    pub fn new(
        spec: ClusterSpec,
        hessians: Vec<DMatrix<f64>>,
        centers: Vec<ParamVector>,
        noise_std: f64,
    ) -> Result<Self> {
        let n = spec.n_clusters();
        if hessians.len() != n || centers.len() != n {
            return Err(Error::InvalidProblem(format!(
                "{} clusters but {} Hessians and {} centers",
                n,
                hessians.len(),
                centers.len()
            )));
        }
        let dim = centers[0].dim();
        for (i, (a, c)) in hessians.iter().zip(&centers).enumerate() {
            if a.nrows() != dim || a.ncols() != dim || c.dim() != dim {
                return Err(Error::InvalidProblem(format!("cluster {i} has inconsistent dimensions")));
            }
            if (a - a.transpose()).amax() > SYMMETRY_TOL {
                return Err(Error::NotSpd(format!("A_{i} is not symmetric")));
            }
            if a.clone().cholesky().is_none() {
                return Err(Error::NotSpd(format!("A_{i} is not positive definite")));
            }
        }
        if !(noise_std >= 0.0) {
            return Err(Error::InvalidProblem("noise_std must be >= 0".into()));
        }
        let rows = hessians
            .iter()
            .map(|a| {
                let mut r = Vec::with_capacity(dim * dim);
                for i in 0..dim {
                    r.extend(a.row(i).iter().copied());
                }
                r
            })
            .collect();
        let mut problem = Self {
            spec,
            dim,
            hessians,
            rows,
            centers,
            noise_std,
            minimizer: ParamVector::zeros(dim),
            spectra: None,
        };
        problem.minimizer = problem.true_minimizer()?;
        Ok(problem)
    }

    pub fn hessians(&self) -> &[DMatrix<f64>] {
        &self.hessians
    }

    pub fn centers(&self) -> &[ParamVector] {
        &self.centers
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn spectra(&self) -> Option<&[Vec<f64>]> {
        self.spectra.as_deref()
    }

    fn apply(&self, n: ClusterId, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let rows = &self.rows[n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = rows[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `θ* = (Σ p_n A_n)⁻¹ Σ p_n A_n c_n`
    pub fn true_minimizer(&self) -> Result<ParamVector> {
        let d = self.dim;
        let mut pooled = DMatrix::<f64>::zeros(d, d);
        let mut rhs = DVector::<f64>::zeros(d);
        for ((a, c), p) in self.hessians.iter().zip(&self.centers).zip(self.spec.probs()) {
            pooled += a * *p;
            rhs += (a * DVector::from_column_slice(c.as_slice())) * *p;
        }
        let eig = SymmetricEigen::new(pooled.clone()).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if cond > MAX_CONDITION {
            return Err(Error::IllConditioned(cond));
        }
        let chol = pooled.cholesky().ok_or(Error::IllConditioned(cond))?;
        let theta = chol.solve(&rhs);
        Ok(ParamVector::from_vec(theta.iter().copied().collect()))
    }

    /// `‖Σ_n p_n A_n(θ − c_n)‖`
    pub fn stationarity_residual(&self, theta: &ParamVector) -> f64 {
        self.full_gradient(theta).norm()
    }

    /// `σ_n² = 2E‖g(x^n, θ*)‖² = 2(‖A_n(θ*−c_n)‖² + d·s²)`
    pub fn sigma_sq(&self, n: ClusterId) -> f64 {
        let g = self.cluster_mean_gradient(n, &self.minimizer);
        2.0 * (g.norm_sq() + self.dim as f64 * self.noise_std * self.noise_std)
    }

    /// `σ_in² = Σ_n p_n σ_n²`
    pub fn sigma_in_sq(&self) -> f64 {
        self.spec
            .probs()
            .iter()
            .enumerate()
            .map(|(n, p)| p * self.sigma_sq(n))
            .sum()
    }

    /// `Σ_n p_n ‖g_n(θ*)‖²`
    pub fn between_cluster_variance(&self) -> f64 {
        self.spec
            .probs()
            .iter()
            .enumerate()
            .map(|(n, p)| p * self.cluster_mean_gradient(n, &self.minimizer).norm_sq())
            .sum()
    }

    /// `(min_n λ_min(A_n), max_n λ_max(A_n))` from a dense eigensolver.
    pub fn curvature_bounds(&self) -> (f64, f64) {
        self.hessians.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), a| {
            let eig = SymmetricEigen::new(a.clone()).eigenvalues;
            (lo.min(eig.min()), hi.max(eig.max()))
        })
    }

    /// Same instance with every center scaled about the origin.
    pub fn with_center_scale(&self, factor: f64) -> Result<Self> {
        let centers = self.centers.iter().map(|c| c.scaled(factor)).collect();
        let mut out = Self::new(self.spec.clone(), self.hessians.clone(), centers, self.noise_std)?;
        out.spectra = self.spectra.clone();
        Ok(out)
    }

    pub fn with_noise_std(&self, noise_std: f64) -> Result<Self> {
        let mut out = Self::new(
            self.spec.clone(),
            self.hessians.clone(),
            self.centers.clone(),
            noise_std,
        )?;
        out.spectra = self.spectra.clone();
        Ok(out)
    }
}

impl ClusteredProblem for ClusteredQuadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    fn sample_gradient(&self, item: &BatchItem, theta: &ParamVector, seed: u64) -> ParamVector {
        let mut g = self.cluster_mean_gradient(item.cluster, theta);
        if self.noise_std > 0.0 {
            let mut rng = RngStream::for_purpose(seed, Purpose::Noise)
                .substream(item.sample)
                .rng();
            for gi in g.as_mut_slice() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *gi += self.noise_std * z;
            }
        }
        g
    }

    fn cluster_mean_gradient(&self, n: ClusterId, theta: &ParamVector) -> ParamVector {
        let diff = theta.sub(&self.centers[n]);
        let mut out = ParamVector::zeros(self.dim);
        self.apply(n, diff.as_slice(), out.as_mut_slice());
        out
    }

    fn loss(&self, theta: &ParamVector) -> f64 {
        self.spec
            .probs()
            .iter()
            .enumerate()
            .map(|(n, p)| {
                let diff = theta.sub(&self.centers[n]);
                p * 0.5 * diff.dot(&self.cluster_mean_gradient(n, theta))
            })
            .sum()
    }

    fn in_cluster_variance(&self, _theta: &ParamVector) -> f64 {
        self.dim as f64 * self.noise_std * self.noise_std
    }

    fn minimizer(&self) -> Option<&ParamVector> {
        Some(&self.minimizer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_problem(centers: Vec<Vec<f64>>, probs: Vec<f64>, s: f64) -> ClusteredQuadratic {
        let d = centers[0].len();
        let n = centers.len();
        ClusteredQuadratic::new(
            ClusterSpec::new(probs).unwrap(),
            vec![DMatrix::identity(d, d); n],
            centers.into_iter().map(ParamVector::from_vec).collect(),
            s,
        )
        .unwrap()
    }

    #[test]
    fn noiseless_gradient_examples() {
        let p = identity_problem(vec![vec![0.0, 0.0], vec![1.0, 1.0]], vec![0.5, 0.5], 0.0);
        let item = BatchItem { cluster: 0, sample: 9 };
        let g = p.sample_gradient(&item, &ParamVector::from_vec(vec![2.0, 0.0]), 1);
        assert_eq!(g.as_slice(), &[2.0, 0.0]);
        let at_center = BatchItem { cluster: 1, sample: 3 };
        let g = p.sample_gradient(&at_center, &ParamVector::from_vec(vec![1.0, 1.0]), 1);
        assert_eq!(g.norm_sq(), 0.0);
    }

    #[test]
    fn minimizer_examples() {
        let p = identity_problem(vec![vec![1.0], vec![-1.0]], vec![0.5, 0.5], 0.3);
        assert!(p.minimizer().unwrap()[0].abs() < 1e-14);

        let cfg = QuadraticConfig {
            dim: 4,
            n_clusters: 3,
            ..QuadraticConfig::default()
        };
        let base = cfg.build().unwrap();
        let common = ParamVector::from_vec(vec![0.3, -1.0, 2.0, 0.5]);
        let same = ClusteredQuadratic::new(
            base.spec().clone(),
            base.hessians().to_vec(),
            vec![common.clone(); 3],
            0.5,
        )
        .unwrap();
        assert!(same.minimizer().unwrap().dist_sq(&common).sqrt() < 1e-12);
        assert_eq!(same.between_cluster_variance() < 1e-20, true);
    }

    #[test]
    fn random_instance_residual() {
        for seed in 0..5 {
            let p = QuadraticConfig {
                instance_seed: seed,
                probs: Some(vec![0.3, 0.25, 0.2, 0.15, 0.1]),
                ..QuadraticConfig::default()
            }
            .build()
            .unwrap();
            assert!(p.stationarity_residual(p.minimizer().unwrap()) <= 1e-8);
        }
    }

    #[test]
    fn rejects_non_spd_and_ill_conditioned() {
        let spec = ClusterSpec::uniform(1).unwrap();
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let c = vec![ParamVector::zeros(2)];
        assert!(matches!(
            ClusteredQuadratic::new(spec.clone(), vec![bad], c.clone(), 0.0),
            Err(Error::NotSpd(_))
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(ClusteredQuadratic::new(spec.clone(), vec![asym], c.clone(), 0.0).is_err());
        let stiff = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-13]);
        assert!(matches!(
            ClusteredQuadratic::new(spec, vec![stiff], c, 0.0),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn cluster_mean_gradient_vanishes_on_average_at_optimum() {
        let p = QuadraticConfig::default().build().unwrap();
        let theta = p.minimizer().unwrap();
        assert!(p.full_gradient(theta).norm() < 1e-8);
        let c0 = p.centers()[0].clone();
        assert_eq!(p.cluster_mean_gradient(0, &c0).norm_sq(), 0.0);
    }

    #[test]
    fn center_scaling_scales_optimal_cluster_gradients() {
        let cfg = QuadraticConfig {
            dim: 6,
            n_clusters: 3,
            eig_min: 1.3,
            eig_max: 1.3,
            ..QuadraticConfig::default()
        };
        let p = cfg.build().unwrap();
        let scaled = p.with_center_scale(3.0).unwrap();
        for n in 0..3 {
            let g = p.cluster_mean_gradient(n, p.minimizer().unwrap());
            let gs = scaled.cluster_mean_gradient(n, scaled.minimizer().unwrap());
            assert!(gs.dist_sq(&g.scaled(3.0)).sqrt() < 1e-10);
        }
    }

    #[test]
    fn noise_monte_carlo_mean() {
        let p = QuadraticConfig {
            dim: 3,
            n_clusters: 2,
            ..QuadraticConfig::default()
        }
        .build()
        .unwrap();
        let theta = ParamVector::from_vec(vec![0.5, -0.2, 1.0]);
        let exact = p.cluster_mean_gradient(1, &theta);
        let draws = 100_000;
        let mut sum = ParamVector::zeros(3);
        for k in 0..draws {
            let g = p.sample_gradient(&BatchItem { cluster: 1, sample: k }, &theta, 77);
            sum.axpy_in_place(1.0, &g);
        }
        let mean = sum.scaled(1.0 / draws as f64);
        let se = p.noise_std() / (draws as f64).sqrt();
        for i in 0..3 {
            assert!((mean[i] - exact[i]).abs() < 4.0 * se, "coordinate {i}");
        }
    }
}
