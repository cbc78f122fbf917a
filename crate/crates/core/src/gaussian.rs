//! Diagonal-Gaussian algebra: closed-form KL to the standard normal,
//! log-densities, and reparameterized sampling.
//!
//! Two mirrored surfaces: value-level ops on [`DiagGaussian`] for inference
//! and Monte Carlo work, and graph-level ops on [`GaussianNode`] used inside
//! differentiable objectives. Both implement the same formulas.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Variance heads emit pre-variance values mapped through softplus and
/// floored here, so every stored variance is strictly positive.
pub const VAR_FLOOR: f64 = 1e-6;

/// Standard normal draw via Box-Muller; consumes exactly two uniforms, so
/// the RNG stream position fully captures sampling state.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::from_f64(standard_normal(rng)))
}

#[derive(Debug, Clone)]
pub struct DiagGaussian<S: Scalar> {
    mean: Tensor<S>,
    var: Tensor<S>,
}

impl<S: Scalar> DiagGaussian<S> {
    /// `var` must be strictly positive elementwise.
    pub fn new(mean: Tensor<S>, var: Tensor<S>) -> Result<Self> {
        if mean.shape() != var.shape() {
            return Err(Error::shape(
                "diag gaussian",
                format!("mean {:?} vs var {:?}", mean.shape(), var.shape()),
            ));
        }
        if var.data().iter().any(|&v| v <= S::zero()) {
            return Err(Error::shape("diag gaussian", "variance must be positive".to_string()));
        }
        Ok(DiagGaussian { mean, var })
    }

    /// Maps raw variance-head outputs through softplus + floor.
    pub fn from_pre_variance(mean: Tensor<S>, pre_var: Tensor<S>) -> Result<Self> {
        let var = pre_var.map(|v| {
            let x = v.as_f64();
            let sp = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
            S::from_f64(sp + VAR_FLOOR)
        });
        DiagGaussian::new(mean, var)
    }

    pub fn standard(shape: &[usize]) -> Self {
        DiagGaussian { mean: Tensor::zeros(shape), var: Tensor::full(shape, S::one()) }
    }

    pub fn mean(&self) -> &Tensor<S> {
        &self.mean
    }

    pub fn var(&self) -> &Tensor<S> {
        &self.var
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    /// KL(q || N(0, I)) = 1/2 sum(mu^2 + var - ln var - 1). Non-negative.
    pub fn kl_to_standard_normal(&self) -> f64 {
        self.mean
            .data()
            .iter()
            .zip(self.var.data())
            .map(|(&m, &v)| {
                let (m, v) = (m.as_f64(), v.as_f64());
                m * m + v - v.ln() - 1.0
            })
            .sum::<f64>()
            * 0.5
    }

    /// z = mu + sqrt(var) * eps.
    pub fn sample_reparameterized(&self, epsilon: &Tensor<S>) -> Result<Tensor<S>> {
        if epsilon.shape() != self.shape() {
            return Err(Error::shape(
                "sample_reparameterized",
                format!("epsilon {:?} vs mean {:?}", epsilon.shape(), self.shape()),
            ));
        }
        let data = self
            .mean
            .data()
            .iter()
            .zip(self.var.data())
            .zip(epsilon.data())
            .map(|((&m, &v), &e)| m + v.sqrt() * e)
            .collect();
        Tensor::new(self.shape().to_vec(), data)
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Tensor<S> {
        let eps = normal_tensor(rng, self.shape());
        self.sample_reparameterized(&eps).expect("epsilon drawn with matching shape")
    }

    /// sum_i [ -ln(2 pi)/2 - ln(var_i)/2 - (x_i - mu_i)^2 / (2 var_i) ]
    pub fn log_density(&self, x: &Tensor<S>) -> Result<f64> {
        if x.shape() != self.shape() {
            return Err(Error::shape(
                "log_density",
                format!("x {:?} vs mean {:?}", x.shape(), self.shape()),
            ));
        }
        Ok(self
            .mean
            .data()
            .iter()
            .zip(self.var.data())
            .zip(x.data())
            .map(|((&m, &v), &xv)| {
                let (m, v, xv) = (m.as_f64(), v.as_f64(), xv.as_f64());
                let d = xv - m;
                -0.5 * LN_2PI - 0.5 * v.ln() - d * d / (2.0 * v)
            })
            .sum())
    }
}

/// A diagonal Gaussian whose mean and variance live on the tape.
#[derive(Debug, Clone, Copy)]
pub struct GaussianNode {
    pub mean: NodeId,
    pub var: NodeId,
}

impl GaussianNode {
    /// Wraps a mean head and a raw variance head: var = softplus(pre) + floor.
    pub fn from_heads<S: Scalar>(g: &mut Graph<S>, mean: NodeId, pre_var: NodeId) -> GaussianNode {
        let sp = g.softplus(pre_var);
        let var = g.add_scalar(sp, S::from_f64(VAR_FLOOR));
        GaussianNode { mean, var }
    }

    pub fn shape<'g, S: Scalar>(&self, g: &'g Graph<S>) -> &'g [usize] {
        g.value(self.mean).shape()
    }

    /// Scalar node: KL(q || N(0,I)) summed over all elements.
    pub fn kl_to_standard_normal<S: Scalar>(&self, g: &mut Graph<S>) -> Result<NodeId> {
        let mu2 = g.square(self.mean);
        let lnv = g.ln(self.var);
        let t = g.add(mu2, self.var)?;
        let t = g.sub(t, lnv)?;
        let t = g.add_scalar(t, S::from_f64(-1.0));
        let s = g.sum(t);
        Ok(g.mul_scalar(s, S::from_f64(0.5)))
    }

    /// z = mu + sqrt(var) * eps with eps entering as a constant, so gradient
    /// flows to mean and variance but not to the noise.
    pub fn sample_reparameterized<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        epsilon: Tensor<S>,
    ) -> Result<NodeId> {
        if epsilon.shape() != g.value(self.mean).shape() {
            return Err(Error::shape(
                "sample_reparameterized",
                format!("epsilon {:?} vs mean {:?}", epsilon.shape(), g.value(self.mean).shape()),
            ));
        }
        let eps = g.constant(epsilon);
        let std = g.sqrt(self.var);
        let scaled = g.mul(std, eps)?;
        g.add(self.mean, scaled)
    }

    pub fn sample<S: Scalar>(&self, g: &mut Graph<S>, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        let eps = normal_tensor(rng, g.value(self.mean).shape());
        self.sample_reparameterized(g, eps)
    }

    /// Scalar node: log density of `x` under this Gaussian, summed over all
    /// elements. Differentiable in mean, variance, and `x`.
    pub fn log_density<S: Scalar>(&self, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let xs = g.value(x).shape();
        let ms = g.value(self.mean).shape();
        if xs != ms {
            return Err(Error::shape("log_density", format!("x {xs:?} vs mean {ms:?}")));
        }
        let numel = g.value(x).numel() as f64;
        let d = g.sub(x, self.mean)?;
        let d2 = g.square(d);
        let two_var = g.mul_scalar(self.var, S::from_f64(2.0));
        let quad = g.div(d2, two_var)?;
        let lnv = g.ln(self.var);
        let half_lnv = g.mul_scalar(lnv, S::from_f64(0.5));
        let t = g.add(half_lnv, quad)?;
        let s = g.sum(t);
        let neg = g.mul_scalar(s, S::from_f64(-1.0));
        Ok(g.add_scalar(neg, S::from_f64(-0.5 * LN_2PI * numel)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kl_zero_for_standard_normal() {
        let q = DiagGaussian::<f64>::standard(&[3, 4]);
        assert!(q.kl_to_standard_normal().abs() < 1e-12);
    }

    #[test]
    fn kl_half_for_unit_mean_shift() {
        let q = DiagGaussian::new(Tensor::full(&[1], 1.0f64), Tensor::full(&[1], 1.0)).unwrap();
        assert!((q.kl_to_standard_normal() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo_for_doubled_variance() {
        let q = DiagGaussian::new(Tensor::zeros(&[1]), Tensor::full(&[1], 2.0f64)).unwrap();
        let closed = q.kl_to_standard_normal();
        // 0.5 * (0 + 2 - ln 2 - 1)
        assert!((closed - 0.5 * (2.0 - 2.0f64.ln() - 1.0)).abs() < 1e-12);
        assert!((closed - 0.15343).abs() < 1e-5);

        // MC estimate of E_q[ln q - ln p] over 10^6 samples
        let p = DiagGaussian::<f64>::standard(&[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let z = q.sample(&mut rng);
            let v = q.log_density(&z).unwrap() - p.log_density(&z).unwrap();
            acc += v;
            acc2 += v * v;
        }
        let mc = acc / n as f64;
        let se = ((acc2 / n as f64 - mc * mc) / n as f64).sqrt();
        assert!(
            (mc - closed).abs() < 3.0 * se,
            "closed {closed} vs mc {mc} (se {se})"
        );
    }

    #[test]
    fn log_density_constants() {
        let p = DiagGaussian::<f64>::standard(&[1]);
        let x = Tensor::zeros(&[1]);
        let got = p.log_density(&x).unwrap();
        assert!((got + 0.918939).abs() < 1e-5, "{got}");

        let d = 7;
        let q = DiagGaussian::new(Tensor::full(&[d], 0.3f64), Tensor::full(&[d], 1.0)).unwrap();
        let got = q.log_density(&Tensor::full(&[d], 0.3)).unwrap();
        assert!((got + d as f64 / 2.0 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn log_density_integrates_to_one() {
        // Simpson quadrature of exp(log_density) on a 1-D grid.
        let q = DiagGaussian::new(Tensor::full(&[1], 0.4f64), Tensor::full(&[1], 1.7)).unwrap();
        let sigma = 1.7f64.sqrt();
        let (lo, hi) = (0.4 - 10.0 * sigma, 0.4 + 10.0 * sigma);
        let n = 4000; // even
        let h = (hi - lo) / n as f64;
        let f = |x: f64| q.log_density(&Tensor::full(&[1], x)).unwrap().exp();
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(lo + i as f64 * h);
        }
        let integral = acc * h / 3.0;
        assert!((integral - 1.0).abs() < 1e-6, "{integral}");
    }

    #[test]
    fn reparameterized_sampling_matches_moments() {
        let q = DiagGaussian::new(Tensor::full(&[1], -0.7f64), Tensor::full(&[1], 0.9)).unwrap();
        // eps = 0 -> mean exactly
        let z = q.sample_reparameterized(&Tensor::zeros(&[1])).unwrap();
        assert_eq!(z.data()[0], -0.7);

        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let v = q.sample(&mut rng).data()[0];
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let se_mean = (0.9f64 / n as f64).sqrt();
        let se_var = 0.9 * (2.0 / n as f64).sqrt();
        assert!((mean + 0.7).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - 0.9).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn mc_error_shrinks_with_sample_count() {
        let q = DiagGaussian::new(Tensor::full(&[2], 0.8f64), Tensor::full(&[2], 0.5)).unwrap();
        let p = DiagGaussian::<f64>::standard(&[2]);
        let closed = q.kl_to_standard_normal();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut last_scaled = f64::INFINITY;
        for exp in [3u32, 4, 5, 6] {
            let n = 10usize.pow(exp);
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            for _ in 0..n {
                let z = q.sample(&mut rng);
                let v = q.log_density(&z).unwrap() - p.log_density(&z).unwrap();
                acc += v;
                acc2 += v * v;
            }
            let mc = acc / n as f64;
            let sd = (acc2 / n as f64 - mc * mc).sqrt();
            let err = (mc - closed).abs();
            assert!(err < 4.0 * sd / (n as f64).sqrt(), "n={n}: err {err}, sd {sd}");
            let _ = last_scaled;
            last_scaled = err * (n as f64).sqrt();
        }
    }

    #[test]
    fn variance_floor_applies_to_pre_variance_heads() {
        let q = DiagGaussian::<f64>::from_pre_variance(
            Tensor::zeros(&[3]),
            Tensor::full(&[3], -60.0),
        )
        .unwrap();
        for &v in q.var().data() {
            assert!(v >= VAR_FLOOR && v < 2.0 * VAR_FLOOR);
        }
        // var -> floor limit: sample collapses to the mean
        let z = q.sample_reparameterized(&Tensor::full(&[3], 1.0)).unwrap();
        for &v in z.data() {
            assert!(v.abs() < 2e-3);
        }
    }

    #[test]
    fn graph_ops_match_value_ops() {
        let mean = Tensor::from_fn(&[2, 3], |i| 0.3 * i as f64 - 0.8);
        let pre = Tensor::from_fn(&[2, 3], |i| 0.5 * i as f64 - 1.0);
        let x = Tensor::from_fn(&[2, 3], |i| (i as f64).cos());

        let vq = DiagGaussian::from_pre_variance(mean.clone(), pre.clone()).unwrap();

        let mut g = Graph::<f64>::new();
        let m = g.constant(mean);
        let pv = g.constant(pre);
        let gq = GaussianNode::from_heads(&mut g, m, pv);
        let kl = gq.kl_to_standard_normal(&mut g).unwrap();
        assert!((g.value(kl).item() - vq.kl_to_standard_normal()).abs() < 1e-12);
        let xn = g.constant(x.clone());
        let ld = gq.log_density(&mut g, xn).unwrap();
        assert!((g.value(ld).item() - vq.log_density(&x).unwrap()).abs() < 1e-12);
    }
}
