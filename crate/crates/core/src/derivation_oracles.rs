//! Numerical checks of the probabilistic derivations behind dot-product
//! attention and the order and distance penalties.
//!
//! Each check evaluates a closed form assembled from parameter blocks and
//! compares it against a direct route (density evaluation, Bayes rule) and
//! returns the observed deviation.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rich_attention::score::{distance_score, order_score, sigmoid};

const SYMMETRY_TOL: f64 = 1e-9;

/// Multivariate normal evaluated through its Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() || cov.nrows() != mean.len() {
            return Err(Error::ShapeMismatch {
                op: "gaussian",
                left: cov.shape(),
                right: (mean.len(), mean.len()),
            });
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(Error::NotPositiveDefinite("covariance is not symmetric"));
        }
        let chol = Cholesky::new(cov).ok_or(Error::NotPositiveDefinite("covariance"))?;
        Ok(Self { mean, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let r = x - &self.mean;
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&r)
            .expect("Cholesky factor has a positive diagonal");
        let log_det: f64 = 2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (y.norm_squared() + log_det + self.dim() as f64 * TAU.ln())
    }

    pub fn density(&self, x: &DVector<f64>) -> f64 {
        self.log_density(x).exp()
    }
}

/// `AᵀA + I` with standard normal `A`.
pub fn random_spd(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = random_matrix(d, d, rng);
    a.transpose() * &a + DMatrix::identity(d, d)
}

pub fn random_vector(d: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

fn random_matrix(r: usize, c: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

fn invert(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or(Error::NotPositiveDefinite(what))
}

fn spread(values: impl IntoIterator<Item = f64>) -> f64 {
    let (lo, hi) = values
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

/// Query/key parameterization of a joint normal over `[h_i; h_j]`.
///
/// The precision matrix is `[[V, W_qᵀW_k], [W_kᵀW_q, W_kᵀW_k]]` and the
/// mean is `[b_q; b_k]`.
#[derive(Debug, Clone)]
pub struct GaussianBlockParams {
    pub b_q: DVector<f64>,
    pub b_k: DVector<f64>,
    pub v: DMatrix<f64>,
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
}

impl GaussianBlockParams {
    /// Splits a joint normal of dimension `2d` into blocks.
    pub fn from_joint(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n % 2 != 0 || cov.shape() != (n, n) {
            return Err(Error::invalid(format!("joint dimension {n} is not 2d")));
        }
        let d = n / 2;
        let precision = invert(cov, "joint covariance")?;
        let p_kk = precision.view((d, d), (d, d)).into_owned();
        let p_kq = precision.view((d, 0), (d, d)).into_owned();
        let l = Cholesky::new(p_kk)
            .ok_or(Error::NotPositiveDefinite("key-key precision block"))?
            .l();
        let w_k = l.transpose();
        let w_q = l
            .solve_lower_triangular(&p_kq)
            .ok_or(Error::NotPositiveDefinite("key-key precision block"))?;
        Ok(Self {
            b_q: mean.rows(0, d).into_owned(),
            b_k: mean.rows(d, d).into_owned(),
            v: precision.view((0, 0), (d, d)).into_owned(),
            w_q,
            w_k,
        })
    }

    pub fn random(d: usize, rng: &mut impl Rng) -> Result<Self> {
        let cov = random_spd(2 * d, rng);
        let mean = random_vector(2 * d, rng);
        Self::from_joint(&mean, &cov)
    }

    pub fn dim(&self) -> usize {
        self.b_q.len()
    }

    pub fn precision(&self) -> DMatrix<f64> {
        let d = self.dim();
        let cross = self.w_q.transpose() * &self.w_k;
        let mut p = DMatrix::zeros(2 * d, 2 * d);
        p.view_mut((0, 0), (d, d)).copy_from(&self.v);
        p.view_mut((0, d), (d, d)).copy_from(&cross);
        p.view_mut((d, 0), (d, d)).copy_from(&cross.transpose());
        p.view_mut((d, d), (d, d))
            .copy_from(&(self.w_k.transpose() * &self.w_k));
        p
    }

    /// Reconstructed joint normal; fails unless `Σ` is symmetric positive definite.
    pub fn gaussian(&self) -> Result<Gaussian> {
        let sigma = invert(&self.precision(), "precision")?;
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        Gaussian::new(stack(&self.b_q, &self.b_k), sigma)
    }

    pub fn query(&self, h_i: &DVector<f64>) -> DVector<f64> {
        -(&self.w_q * (h_i - &self.b_q))
    }

    pub fn key(&self, h_j: &DVector<f64>) -> DVector<f64> {
        &self.w_k * (h_j - &self.b_k)
    }

    /// `qᵀk − ½kᵀk`.
    pub fn attention_logit(&self, h_i: &DVector<f64>, h_j: &DVector<f64>) -> f64 {
        let q = self.query(h_i);
        let k = self.key(h_j);
        q.dot(&k) - 0.5 * k.norm_squared()
    }
}

/// `L(h_i, h_j) − (qᵀk − ½kᵀk)` for each `h_j`.
pub fn dot_product_residuals(
    params: &GaussianBlockParams,
    h_i: &DVector<f64>,
    h_js: &[DVector<f64>],
) -> Result<Vec<f64>> {
    let g = params.gaussian()?;
    Ok(h_js
        .iter()
        .map(|h_j| g.log_density(&stack(h_i, h_j)) - params.attention_logit(h_i, h_j))
        .collect())
}

/// Spread (max − min) of the residuals over the `h_j` samples.
pub fn check_dot_product_reduction(
    params: &GaussianBlockParams,
    h_i: &DVector<f64>,
    h_js: &[DVector<f64>],
) -> Result<f64> {
    Ok(spread(dot_product_residuals(params, h_i, h_js)?))
}

/// Posterior over candidates from raw likelihood values and a prior.
pub fn posterior_by_bayes(prior: &[f64], likelihoods: &[f64]) -> Result<Vec<f64>> {
    if prior.len() != likelihoods.len() || prior.is_empty() {
        return Err(Error::invalid("prior and likelihoods differ in length"));
    }
    let joint: Vec<f64> = prior.iter().zip(likelihoods).map(|(p, l)| p * l).collect();
    let z: f64 = joint.iter().sum();
    if !(z > 0.0) {
        return Err(Error::invalid("evidence is zero"));
    }
    Ok(joint.into_iter().map(|v| v / z).collect())
}

/// `softmax_j(log_likelihood_j + ln prior_j)`.
pub fn posterior_by_softmax(prior: &[f64], log_likelihoods: &[f64]) -> Result<Vec<f64>> {
    if prior.len() != log_likelihoods.len() || prior.is_empty() {
        return Err(Error::invalid("prior and likelihoods differ in length"));
    }
    let logits: Vec<f64> = prior
        .iter()
        .zip(log_likelihoods)
        .map(|(p, l)| l + p.ln())
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// One query token and `m` candidates scored under a shared joint normal
/// with a random categorical prior over which candidate is attended.
pub fn check_softmax_posterior(seed: u64, m: usize, d: usize) -> Result<f64> {
    if m == 0 || m > 5 {
        return Err(Error::invalid(format!("candidate count {m} outside 1..=5")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Gaussian::new(random_vector(2 * d, &mut rng), random_spd(2 * d, &mut rng))?;
    let h_i = random_vector(d, &mut rng);
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let prior: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let points: Vec<DVector<f64>> = (0..m)
        .map(|_| stack(&h_i, &random_vector(d, &mut rng)))
        .collect();
    let dens: Vec<f64> = points.iter().map(|x| g.density(x)).collect();
    let logs: Vec<f64> = points.iter().map(|x| g.log_density(x)).collect();
    let a = posterior_by_bayes(&prior, &dens)?;
    let b = posterior_by_softmax(&prior, &logs)?;
    Ok(max_abs_diff(&a, &b))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `xᵀVx + wᵀx + b`.
#[derive(Debug, Clone)]
pub struct Biaffine {
    pub v: DMatrix<f64>,
    pub w: DVector<f64>,
    pub b: f64,
}

impl Biaffine {
    /// Log-density of `N(μ, Σ)` written as a biaffine function:
    /// `V = −½Σ⁻¹`, `w = Σ⁻¹μ`, `b = −½μᵀΣ⁻¹μ − ½ln(τ^d|Σ|)`.
    pub fn from_class(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        let det = cov.determinant();
        if !(det > 0.0) {
            return Err(Error::NotPositiveDefinite("class covariance"));
        }
        let inv = invert(cov, "class covariance")?;
        let w = &inv * mean;
        let b = -0.5 * mean.dot(&w) - 0.5 * (TAU.powi(d as i32) * det).ln();
        Ok(Self { v: inv * -0.5, w, b })
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.v * x)) + self.w.dot(x) + self.b
    }

    pub fn minus(&self, other: &Biaffine) -> Biaffine {
        Biaffine {
            v: &self.v - &other.v,
            w: &self.w - &other.w,
            b: self.b - other.b,
        }
    }

    /// The same function with its quadratic term dropped.
    pub fn affine_part(&self, x: &DVector<f64>) -> f64 {
        self.w.dot(x) + self.b
    }
}

/// Two Gaussian classes with prior `P(f = 1) = p`.
#[derive(Debug, Clone)]
pub struct BinaryScenario {
    pub mu0: DVector<f64>,
    pub mu1: DVector<f64>,
    pub cov0: DMatrix<f64>,
    pub cov1: DMatrix<f64>,
    pub p: f64,
}

impl BinaryScenario {
    pub fn random(d: usize, equal_cov: bool, rng: &mut impl Rng) -> Self {
        let cov0 = random_spd(d, rng);
        let cov1 = if equal_cov { cov0.clone() } else { random_spd(d, rng) };
        Self {
            mu0: random_vector(d, rng),
            mu1: random_vector(d, rng),
            cov0,
            cov1,
            p: rng.random_range(0.1..0.9),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::invalid(format!("prior {} outside (0, 1)", self.p)));
        }
        Ok(())
    }

    /// `P(f = 1 | x)` from the two class densities.
    pub fn bayes_posterior(&self, x: &DVector<f64>) -> Result<f64> {
        let g0 = Gaussian::new(self.mu0.clone(), self.cov0.clone())?;
        let g1 = Gaussian::new(self.mu1.clone(), self.cov1.clone())?;
        let post = posterior_by_bayes(&[1.0 - self.p, self.p], &[g0.density(x), g1.density(x)])?;
        Ok(post[1])
    }

    /// `biaffine₁ − biaffine₀` with the log prior odds folded into the bias.
    pub fn posterior_logit(&self) -> Result<Biaffine> {
        self.validate()?;
        let b0 = Biaffine::from_class(&self.mu0, &self.cov0)?;
        let b1 = Biaffine::from_class(&self.mu1, &self.cov1)?;
        let mut diff = b1.minus(&b0);
        diff.b += self.p.ln() - (1.0 - self.p).ln();
        Ok(diff)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmoidLemmaReport {
    /// `σ(biaffine(x))` against Bayes.
    pub biaffine_deviation: f64,
    /// `σ(affine(x))`, the quadratic term dropped, against Bayes.
    pub affine_deviation: f64,
    /// Largest entry of `V₁ − V₀`.
    pub quadratic_norm: f64,
}

pub fn check_sigmoid_lemmas(
    scenario: &BinaryScenario,
    xs: &[DVector<f64>],
) -> Result<SigmoidLemmaReport> {
    let logit = scenario.posterior_logit()?;
    let mut report = SigmoidLemmaReport {
        biaffine_deviation: 0.0,
        affine_deviation: 0.0,
        quadratic_norm: logit.v.amax(),
    };
    for x in xs {
        let truth = scenario.bayes_posterior(x)?;
        let bi = sigmoid(logit.eval(x));
        let af = sigmoid(logit.affine_part(x));
        report.biaffine_deviation = report.biaffine_deviation.max((bi - truth).abs());
        report.affine_deviation = report.affine_deviation.max((af - truth).abs());
    }
    Ok(report)
}

/// `y·ln σ(a) + (1−y)·ln(1−σ(a))`, the order score with `p = σ(a)`.
pub fn bernoulli_log_prob(y: f64, logit: f64) -> Result<f64> {
    order_score(y, sigmoid(logit))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BernoulliReport {
    /// `|P(y=1) + P(y=0) − 1|`.
    pub normalization_deviation: f64,
    /// Both outcome probabilities against Bayes.
    pub bayes_deviation: f64,
}

/// The scenario's inputs are stacked pairs `[h_i; h_j]`; covariances must be equal.
pub fn check_bernoulli_feature(
    scenario: &BinaryScenario,
    xs: &[DVector<f64>],
) -> Result<BernoulliReport> {
    if scenario.cov0 != scenario.cov1 {
        return Err(Error::invalid("Bernoulli feature check needs equal covariances"));
    }
    let logit = scenario.posterior_logit()?;
    let mut report = BernoulliReport {
        normalization_deviation: 0.0,
        bayes_deviation: 0.0,
    };
    for x in xs {
        let a = logit.affine_part(x);
        let p1 = bernoulli_log_prob(1.0, a)?.exp();
        let p0 = bernoulli_log_prob(0.0, a)?.exp();
        let truth = scenario.bayes_posterior(x)?;
        report.normalization_deviation = report.normalization_deviation.max((p1 + p0 - 1.0).abs());
        report.bayes_deviation = report
            .bayes_deviation
            .max((p1 - truth).abs())
            .max((p0 - (1.0 - truth)).abs());
    }
    Ok(report)
}

fn lognormal_domain(x: f64, s2: f64) -> Result<()> {
    if !(x > 0.0 && s2 > 0.0 && x.is_finite() && s2.is_finite()) {
        return Err(Error::invalid(format!("log-normal needs x > 0 and σ² > 0, got x={x}, σ²={s2}")));
    }
    Ok(())
}

/// `exp(−(ln x − μ)²/2σ²) / (x√(τσ²))`.
pub fn lognormal_pdf(x: f64, mu: f64, s2: f64) -> Result<f64> {
    lognormal_domain(x, s2)?;
    let u = x.ln() - mu;
    Ok((-u * u / (2.0 * s2)).exp() / (x * (TAU * s2).sqrt()))
}

/// `exp(−(ln x − μ′)²/2σ² − μ′) / √(τσ²e^{σ²})` with `μ′ = μ − σ²`.
pub fn lognormal_pdf_shifted(x: f64, mu: f64, s2: f64) -> Result<f64> {
    lognormal_domain(x, s2)?;
    let mu_p = mu - s2;
    let u = x.ln() - mu_p;
    Ok((-u * u / (2.0 * s2) - mu_p).exp() / (TAU * s2 * s2.exp()).sqrt())
}

/// Relative deviation between the two log-normal forms.
pub fn check_lognormal_forms(x: f64, mu: f64, s2: f64) -> Result<f64> {
    let a = lognormal_pdf(x, mu, s2)?;
    let b = lognormal_pdf_shifted(x, mu, s2)?;
    if a == b {
        return Ok(0.0);
    }
    Ok((a - b).abs() / a.abs().max(b.abs()))
}

pub fn check_lognormal_sweep(seed: u64, samples: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x = rng.random_range(0.05..20.0);
        let mu = rng.random_range(-2.0..2.0);
        let s2 = rng.random_range(0.1..3.0);
        worst = worst.max(check_lognormal_forms(x, mu, s2)?);
    }
    Ok(worst)
}

/// Joint normal over `(ln f, h)` in covariance blocks
/// `Σ = [[w_ff, w_hfᵀ], [w_hf, W_hh]]`, mean `[b_f; b_h]`.
#[derive(Debug, Clone)]
pub struct ConditionalLognormal {
    pub b_f: f64,
    pub b_h: DVector<f64>,
    pub w_ff: f64,
    pub w_hf: DVector<f64>,
    pub w_hh: DMatrix<f64>,
}

impl ConditionalLognormal {
    pub fn random(dim_h: usize, rng: &mut impl Rng) -> Result<Self> {
        let cov = random_spd(dim_h + 1, rng);
        let mean = random_vector(dim_h + 1, rng);
        Ok(Self {
            b_f: mean[0],
            b_h: mean.rows(1, dim_h).into_owned(),
            w_ff: cov[(0, 0)],
            w_hf: cov.view((1, 0), (dim_h, 1)).column(0).into_owned(),
            w_hh: cov.view((1, 1), (dim_h, dim_h)).into_owned(),
        })
    }

    pub fn joint(&self) -> Result<Gaussian> {
        let n = self.b_h.len() + 1;
        let mut cov = DMatrix::zeros(n, n);
        cov[(0, 0)] = self.w_ff;
        for i in 1..n {
            cov[(0, i)] = self.w_hf[i - 1];
            cov[(i, 0)] = self.w_hf[i - 1];
        }
        cov.view_mut((1, 1), (n - 1, n - 1)).copy_from(&self.w_hh);
        let mut mean = DVector::zeros(n);
        mean[0] = self.b_f;
        mean.rows_mut(1, n - 1).copy_from(&self.b_h);
        Gaussian::new(mean, cov)
    }

    pub fn marginal_h(&self) -> Result<Gaussian> {
        Gaussian::new(self.b_h.clone(), self.w_hh.clone())
    }

    /// `μ′ = b_f + w_hfᵀW_hh⁻¹(h − b_h)`.
    pub fn conditional_mean(&self, h: &DVector<f64>) -> Result<f64> {
        let inv = invert(&self.w_hh, "h-h covariance block")?;
        Ok(self.b_f + self.w_hf.dot(&(inv * (h - &self.b_h))))
    }

    /// `σ²′ = w_ff − w_hfᵀW_hh⁻¹w_hf`.
    pub fn conditional_variance(&self) -> Result<f64> {
        let inv = invert(&self.w_hh, "h-h covariance block")?;
        let s2 = self.w_ff - self.w_hf.dot(&(inv * &self.w_hf));
        if !(s2 > 0.0) {
            return Err(Error::NotPositiveDefinite("conditional variance"));
        }
        Ok(s2)
    }

    /// `θ = 1/σ′`.
    pub fn theta(&self) -> Result<f64> {
        Ok(self.conditional_variance()?.sqrt().recip())
    }

    /// `μ″ = μ′ − σ²′`, an affine function of `h`.
    pub fn affine(&self, h: &DVector<f64>) -> Result<f64> {
        Ok(self.conditional_mean(h)? - self.conditional_variance()?)
    }
}

/// Which distance score the model-side form uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceVariant {
    #[default]
    Reference,
    /// Negated penalty, a deliberately broken form for negative controls.
    Negated,
}

impl DistanceVariant {
    pub fn score(self, d: f64, mu: f64, theta: f64) -> f64 {
        match self {
            DistanceVariant::Reference => distance_score(d, mu, theta),
            DistanceVariant::Negated => -distance_score(d, mu, theta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalReport {
    /// Closed-form conditional log-density against `ln(joint / marginal)`.
    pub density_deviation: f64,
    /// Spread of `ln p(f = z | h) − (distance score − affine(h))` over samples.
    pub form_spread: f64,
    /// Quadratic coefficient in `ln z` of the true density against the distance score's.
    pub curvature_deviation: f64,
}

/// Quadratic coefficient of the parabola through three points.
fn quadratic_coefficient(u: [f64; 3], q: [f64; 3]) -> f64 {
    q[0] / ((u[0] - u[1]) * (u[0] - u[2]))
        + q[1] / ((u[1] - u[0]) * (u[1] - u[2]))
        + q[2] / ((u[2] - u[0]) * (u[2] - u[1]))
}

/// `samples` are `(z, h)` with `z > 0` the feature value itself.
pub fn check_conditional_lognormal(
    params: &ConditionalLognormal,
    samples: &[(f64, DVector<f64>)],
    variant: DistanceVariant,
) -> Result<ConditionalReport> {
    let joint = params.joint()?;
    let marginal = params.marginal_h()?;
    let s2 = params.conditional_variance()?;
    let theta = params.theta()?;

    let oracle = |u: f64, h: &DVector<f64>| -> f64 {
        let mut x = DVector::zeros(h.len() + 1);
        x[0] = u;
        x.rows_mut(1, h.len()).copy_from(h);
        joint.log_density(&x) - marginal.log_density(h)
    };

    let mut density_deviation = 0.0f64;
    let mut residuals = Vec::with_capacity(samples.len());
    for (z, h) in samples {
        lognormal_domain(*z, s2)?;
        let u = z.ln();
        let mu = params.conditional_mean(h)?;
        let closed = -0.5 * (TAU * s2).ln() - (u - mu) * (u - mu) / (2.0 * s2);
        let truth = oracle(u, h);
        density_deviation = density_deviation.max((closed - truth).abs());

        let a = params.affine(h)?;
        let log_pf = truth - u;
        residuals.push(log_pf - (variant.score(u, a, theta) - a));
    }

    let curvature_deviation = match samples.first() {
        Some((_, h)) => {
            let a = params.affine(h)?;
            let us = [-0.7, 0.2, 1.3];
            let truth = us.map(|u| oracle(u, h) - u);
            let model = us.map(|u| variant.score(u, a, theta));
            (quadratic_coefficient(us, truth) - quadratic_coefficient(us, model)).abs()
        }
        None => 0.0,
    };

    Ok(ConditionalReport {
        density_deviation,
        form_spread: spread(residuals),
        curvature_deviation,
    })
}

/// One row of the oracle report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: f64,
    pub deviation: f64,
    /// Negative controls pass when the deviation exceeds the tolerance.
    pub must_exceed: bool,
}

impl CheckResult {
    pub fn within(name: impl Into<String>, tolerance: f64, deviation: f64) -> Self {
        Self {
            name: name.into(),
            tolerance,
            deviation,
            must_exceed: false,
        }
    }

    pub fn control(name: impl Into<String>, tolerance: f64, deviation: f64) -> Self {
        Self {
            must_exceed: true,
            ..Self::within(name, tolerance, deviation)
        }
    }

    pub fn passed(&self) -> bool {
        if !self.deviation.is_finite() {
            return false;
        }
        if self.must_exceed {
            self.deviation > self.tolerance
        } else {
            self.deviation < self.tolerance
        }
    }
}

pub fn format_report(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>10}  {:>12}  result", "check", "tolerance", "deviation");
    for r in results {
        let tol = if r.must_exceed {
            format!(">{:.0e}", r.tolerance)
        } else {
            format!("<{:.0e}", r.tolerance)
        };
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>12.3e}  {}",
            r.name,
            tol,
            r.deviation,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    out
}

/// Runs every derivation check on seeded random scenarios.
pub fn run_suite(seed: u64, variant: DistanceVariant) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for trial in 0..20 {
        let m = 1 + trial % 5;
        worst = worst.max(check_softmax_posterior(seed.wrapping_add(trial as u64), m, 2)?);
    }
    out.push(CheckResult::within("softmax_posterior", 1e-12, worst));

    let mut worst = 0.0f64;
    for _ in 0..10 {
        let params = GaussianBlockParams::random(3, &mut rng)?;
        let h_i = random_vector(3, &mut rng);
        let h_js: Vec<_> = (0..10).map(|_| random_vector(3, &mut rng)).collect();
        worst = worst.max(check_dot_product_reduction(&params, &h_i, &h_js)?);
    }
    out.push(CheckResult::within("dot_product_reduction", 1e-10, worst));

    let xs: Vec<_> = (0..50).map(|_| random_vector(2, &mut rng)).collect();
    let (mut eq, mut bi, mut control) = (0.0f64, 0.0f64, f64::INFINITY);
    for _ in 0..10 {
        let same = check_sigmoid_lemmas(&BinaryScenario::random(2, true, &mut rng), &xs)?;
        eq = eq
            .max(same.biaffine_deviation)
            .max(same.affine_deviation)
            .max(same.quadratic_norm);
        let diff = check_sigmoid_lemmas(&BinaryScenario::random(2, false, &mut rng), &xs)?;
        bi = bi.max(diff.biaffine_deviation);
        control = control.min(diff.affine_deviation);
    }
    out.push(CheckResult::within("sigmoid_lemmas_equal_cov", 1e-10, eq));
    out.push(CheckResult::within("sigmoid_lemmas_unequal_cov_biaffine", 1e-10, bi));
    out.push(CheckResult::control("sigmoid_lemmas_unequal_cov_affine_control", 1e-6, control));

    let pairs: Vec<_> = (0..50).map(|_| random_vector(4, &mut rng)).collect();
    let (mut norm, mut bayes) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let r = check_bernoulli_feature(&BinaryScenario::random(4, true, &mut rng), &pairs)?;
        norm = norm.max(r.normalization_deviation);
        bayes = bayes.max(r.bayes_deviation);
    }
    out.push(CheckResult::within("bernoulli_feature_normalization", 1e-12, norm));
    out.push(CheckResult::within("bernoulli_feature_bayes", 1e-10, bayes));

    out.push(CheckResult::within(
        "lognormal_forms",
        1e-10,
        check_lognormal_sweep(seed, 100)?,
    ));

    let (mut dens, mut form, mut curv) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10 {
        let params = ConditionalLognormal::random(4, &mut rng)?;
        let samples: Vec<_> = (0..20)
            .map(|_| {
                let z = rng.random_range(0.05..10.0);
                let h = &params.b_h + random_vector(4, &mut rng);
                (z, h)
            })
            .collect();
        let r = check_conditional_lognormal(&params, &samples, variant)?;
        dens = dens.max(r.density_deviation);
        form = form.max(r.form_spread);
        curv = curv.max(r.curvature_deviation);
    }
    out.push(CheckResult::within("conditional_lognormal_density", 1e-10, dens));
    out.push(CheckResult::within("conditional_lognormal_distance_form", 1e-10, form));
    out.push(CheckResult::within("conditional_lognormal_curvature", 1e-10, curv));

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn m(r: usize, c: usize, xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, xs)
    }

    #[test]
    fn gaussian_matches_scalar_formula() {
        let g = Gaussian::new(v(&[1.0]), m(1, 1, &[4.0])).unwrap();
        let x = v(&[2.0]);
        let expect = (-(1.0f64) / 8.0).exp() / (TAU * 4.0).sqrt();
        assert!((g.density(&x) - expect).abs() < 1e-15);
    }

    #[test]
    fn non_pd_covariance_is_rejected() {
        let r = Gaussian::new(v(&[0.0, 0.0]), m(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(r, Err(Error::NotPositiveDefinite(_))));
        let r = Gaussian::new(v(&[0.0, 0.0]), m(2, 2, &[1.0, 0.5, 0.0, 1.0]));
        assert!(matches!(r, Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn uniform_prior_identical_likelihoods() {
        let prior = [1.0 / 3.0; 3];
        let a = posterior_by_bayes(&prior, &[0.2; 3]).unwrap();
        let b = posterior_by_softmax(&prior, &[0.2f64.ln(); 3]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
            assert!((y - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn prior_dominates_equal_likelihoods() {
        let prior = [0.2, 0.8];
        let a = posterior_by_bayes(&prior, &[0.5, 0.5]).unwrap();
        let b = posterior_by_softmax(&prior, &[-3.0, -3.0]).unwrap();
        assert!((a[0] - 0.2).abs() < 1e-15 && (a[1] - 0.8).abs() < 1e-15);
        assert!((b[0] - 0.2).abs() < 1e-15 && (b[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn softmax_posterior_random() {
        for seed in 0..20 {
            let dev = check_softmax_posterior(seed, 5, 2).unwrap();
            assert!(dev < 1e-12, "seed {seed}: {dev}");
        }
        assert!(check_softmax_posterior(0, 6, 2).is_err());
    }

    #[test]
    fn hand_built_scalar_blocks() {
        // Precision [[2, 1], [1, 4]].
        let params = GaussianBlockParams {
            b_q: v(&[0.5]),
            b_k: v(&[-1.0]),
            v: m(1, 1, &[2.0]),
            w_q: m(1, 1, &[0.5]),
            w_k: m(1, 1, &[2.0]),
        };
        assert_eq!(params.precision(), m(2, 2, &[2.0, 1.0, 1.0, 4.0]));
        let h_i = v(&[0.3]);
        let h_js: Vec<_> = (0..10).map(|k| v(&[-2.0 + 0.45 * k as f64])).collect();
        let spread = check_dot_product_reduction(&params, &h_i, &h_js).unwrap();
        assert!(spread < 1e-12, "{spread}");
    }

    #[test]
    fn blocks_round_trip_the_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = random_spd(6, &mut rng);
        let mean = random_vector(6, &mut rng);
        let params = GaussianBlockParams::from_joint(&mean, &cov).unwrap();
        let p = params.precision();
        let direct = cov.try_inverse().unwrap();
        assert!((p - direct).amax() < 1e-10);
    }

    #[test]
    fn residual_depends_on_query_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = GaussianBlockParams::random(2, &mut rng).unwrap();
        let h_js: Vec<_> = (0..10).map(|_| random_vector(2, &mut rng)).collect();
        let a = dot_product_residuals(&params, &v(&[0.0, 0.0]), &h_js).unwrap();
        let b = dot_product_residuals(&params, &v(&[1.5, -0.5]), &h_js).unwrap();
        assert!(spread(a.iter().copied()) < 1e-10);
        assert!(spread(b.iter().copied()) < 1e-10);
        assert!((a[0] - b[0]).abs() > 1e-3);
    }

    #[test]
    fn single_key_has_zero_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = GaussianBlockParams::random(2, &mut rng).unwrap();
        let spread =
            check_dot_product_reduction(&params, &v(&[0.1, 0.2]), &[v(&[0.0, 0.0])]).unwrap();
        assert_eq!(spread, 0.0);
    }

    #[test]
    fn symmetric_classes_give_half() {
        let s = BinaryScenario {
            mu0: v(&[0.3, -0.2]),
            mu1: v(&[0.3, -0.2]),
            cov0: m(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            cov1: m(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            p: 0.5,
        };
        let logit = s.posterior_logit().unwrap();
        for x in [v(&[0.0, 0.0]), v(&[3.0, -1.0])] {
            assert!((sigmoid(logit.eval(&x)) - 0.5).abs() < 1e-15);
            assert!((sigmoid(logit.affine_part(&x)) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_covariance_reduces_to_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xs: Vec<_> = (0..40).map(|_| random_vector(2, &mut rng)).collect();
        let r = check_sigmoid_lemmas(&BinaryScenario::random(2, true, &mut rng), &xs).unwrap();
        assert!(r.biaffine_deviation < 1e-10, "{r:?}");
        assert!(r.affine_deviation < 1e-10, "{r:?}");
        assert!(r.quadratic_norm < 1e-12, "{r:?}");
    }

    #[test]
    fn unequal_covariance_needs_quadratic_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let xs: Vec<_> = (0..40).map(|_| random_vector(2, &mut rng)).collect();
        let r = check_sigmoid_lemmas(&BinaryScenario::random(2, false, &mut rng), &xs).unwrap();
        assert!(r.biaffine_deviation < 1e-10, "{r:?}");
        assert!(r.affine_deviation > 1e-3, "{r:?}");
    }

    #[test]
    fn bernoulli_matches_order_score_and_bayes() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = BinaryScenario::random(4, true, &mut rng);
        let xs: Vec<_> = (0..40).map(|_| random_vector(4, &mut rng)).collect();
        let r = check_bernoulli_feature(&s, &xs).unwrap();
        assert!(r.normalization_deviation < 1e-12, "{r:?}");
        assert!(r.bayes_deviation < 1e-10, "{r:?}");
        for a in [-2.0, 0.0, 0.7] {
            let p = sigmoid(a);
            assert_eq!(
                bernoulli_log_prob(1.0, a).unwrap().to_bits(),
                order_score(1.0, p).unwrap().to_bits()
            );
        }
        let unequal = BinaryScenario::random(4, false, &mut rng);
        assert!(check_bernoulli_feature(&unequal, &xs).is_err());
    }

    #[test]
    fn lognormal_at_unit_point() {
        let a = lognormal_pdf(1.0, 0.0, 1.0).unwrap();
        let b = lognormal_pdf_shifted(1.0, 0.0, 1.0).unwrap();
        assert!((a - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((b - 0.398_942_280_401_432_7).abs() < 1e-12);
    }

    #[test]
    fn lognormal_at_median() {
        let (mu, s2) = (0.8f64, 0.6);
        let x = mu.exp();
        let a = lognormal_pdf(x, mu, s2).unwrap();
        assert!((a - 1.0 / (x * (TAU * s2).sqrt())).abs() < 1e-15);
        assert!(check_lognormal_forms(x, mu, s2).unwrap() < 1e-12);
    }

    #[test]
    fn lognormal_domain_errors() {
        assert!(lognormal_pdf(0.0, 0.0, 1.0).is_err());
        assert!(lognormal_pdf_shifted(1.0, 0.0, 0.0).is_err());
        assert!(check_lognormal_sweep(4, 100).unwrap() < 1e-10);
    }

    #[test]
    fn independent_feature_has_constant_mean() {
        let params = ConditionalLognormal {
            b_f: 0.4,
            b_h: v(&[1.0, -1.0]),
            w_ff: 0.5,
            w_hf: v(&[0.0, 0.0]),
            w_hh: m(2, 2, &[1.0, 0.2, 0.2, 2.0]),
        };
        for h in [v(&[0.0, 0.0]), v(&[5.0, 3.0])] {
            assert_eq!(params.conditional_mean(&h).unwrap(), 0.4);
        }
        assert_eq!(params.conditional_variance().unwrap(), 0.5);
        let samples = vec![(1.5, v(&[0.0, 0.0])), (0.2, v(&[2.0, 1.0]))];
        let r = check_conditional_lognormal(&params, &samples, DistanceVariant::Reference).unwrap();
        assert!(r.density_deviation < 1e-12, "{r:?}");
    }

    #[test]
    fn scalar_conditional_by_hand() {
        // Σ = [[2, 1], [1, 1]]: μ′ = 0.5 + (h − 1), σ²′ = 1.
        let params = ConditionalLognormal {
            b_f: 0.5,
            b_h: v(&[1.0]),
            w_ff: 2.0,
            w_hf: v(&[1.0]),
            w_hh: m(1, 1, &[1.0]),
        };
        assert!((params.conditional_mean(&v(&[3.0])).unwrap() - 2.5).abs() < 1e-15);
        assert!((params.conditional_variance().unwrap() - 1.0).abs() < 1e-15);
        assert!((params.theta().unwrap() - 1.0).abs() < 1e-15);
        let samples = vec![(0.5, v(&[3.0])), (2.0, v(&[0.0])), (7.0, v(&[-1.0]))];
        let r = check_conditional_lognormal(&params, &samples, DistanceVariant::Reference).unwrap();
        assert!(r.density_deviation < 1e-10, "{r:?}");
        assert!(r.form_spread < 1e-10, "{r:?}");
        assert!(r.curvature_deviation < 1e-10, "{r:?}");
    }

    #[test]
    fn suite_passes_and_lists_each_check_once() {
        let results = run_suite(0, DistanceVariant::Reference).unwrap();
        for r in &results {
            assert!(r.passed(), "{}", format_report(&results));
        }
        let mut names: Vec<_> = results.iter().map(|r| r.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), results.len());
    }

    #[test]
    fn negated_distance_fails_distance_checks() {
        let results = run_suite(0, DistanceVariant::Negated).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert_eq!(
            failed,
            ["conditional_lognormal_distance_form", "conditional_lognormal_curvature"]
        );
    }

    #[test]
    fn report_has_header_and_rows() {
        let results = vec![
            CheckResult::within("a", 1e-10, 1e-12),
            CheckResult::control("b", 1e-6, 1e-8),
        ];
        let text = format_report(&results);
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().ends_with("PASS"));
        assert!(text.lines().nth(2).unwrap().ends_with("FAIL"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lognormal_forms_agree(x in 0.01f64..50.0, mu in -3.0f64..3.0, s2 in 0.05f64..4.0) {
            prop_assert!(check_lognormal_forms(x, mu, s2).unwrap() < 1e-10);
        }

        #[test]
        fn dot_product_residual_is_key_independent(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = GaussianBlockParams::random(2, &mut rng).unwrap();
            let h_i = random_vector(2, &mut rng);
            let h_js: Vec<_> = (0..6).map(|_| random_vector(2, &mut rng)).collect();
            prop_assert!(check_dot_product_reduction(&params, &h_i, &h_js).unwrap() < 1e-10);
        }
    }
}
