//! Prior and posterior Gaussian heads for the two latent variables,
//! reparameterized sampling, closed-form KL divergence, and the
//! KL-capacity penalty.
//!
//! Each head is a single linear map producing stacked `[mu ; log variance]`.
//! Posterior heads read `[h^C ; h^A]` (answer latent) or `[h^C ; h^Q]`
//! (question latent); prior heads read `h^C` alone. Math exists twice: as
//! plain `f64` functions for diagnostics and estimation, and as tape ops for
//! training; a unit test pins the two routes together.

use ndarray::{Array1, ArrayD, Ix1, Ix2};

use crate::nn::ForwardCtx;
use crate::params::ParameterStore;
use crate::tape::{Tape, Var};

/// Diagonal Gaussian with log-variance clamped to `[-clamp, clamp]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Array1<f64>,
    pub logvar: Array1<f64>,
}

impl GaussianParams {
    pub fn standard(dim: usize) -> Self {
        GaussianParams { mu: Array1::zeros(dim), logvar: Array1::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Log density of `x` under this Gaussian.
    pub fn log_density(&self, x: &Array1<f64>) -> f64 {
        assert_eq!(x.len(), self.dim(), "log_density dim mismatch");
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        -0.5 * self
            .mu
            .iter()
            .zip(self.logvar.iter())
            .zip(x.iter())
            .map(|((m, lv), xi)| ln_2pi + lv + (xi - m).powi(2) * (-lv).exp())
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentKind {
    Z,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSource {
    Prior,
    Posterior,
}

/// Which linear head to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentHead {
    PriorZ,
    PostZ,
    PriorY,
    PostY,
}

impl LatentHead {
    pub fn param_names(self) -> (&'static str, &'static str) {
        match self {
            LatentHead::PriorZ => ("latent.prior_z.w", "latent.prior_z.b"),
            LatentHead::PostZ => ("latent.post_z.w", "latent.post_z.b"),
            LatentHead::PriorY => ("latent.prior_y.w", "latent.prior_y.b"),
            LatentHead::PostY => ("latent.post_y.w", "latent.post_y.b"),
        }
    }

    pub fn is_posterior(self) -> bool {
        matches!(self, LatentHead::PostZ | LatentHead::PostY)
    }

    pub fn kind(self) -> LatentKind {
        match self {
            LatentHead::PriorZ | LatentHead::PostZ => LatentKind::Z,
            LatentHead::PriorY | LatentHead::PostY => LatentKind::Y,
        }
    }
}

/// A draw of one latent variable together with the Gaussian that produced it
/// and the noise used.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub value: Array1<f64>,
    pub params: GaussianParams,
    pub epsilon: Array1<f64>,
    pub which: LatentKind,
    pub source: SampleSource,
}

/// Evaluates a latent head on encoder summaries. Posterior heads require two
/// inputs, prior heads one.
pub fn gaussian_params(
    inputs: &[&Array1<f64>],
    head: LatentHead,
    store: &ParameterStore,
    logvar_clamp: f64,
) -> GaussianParams {
    let expected = if head.is_posterior() { 2 } else { 1 };
    assert_eq!(inputs.len(), expected, "{head:?} takes {expected} input(s), got {}", inputs.len());
    let stacked: Array1<f64> = if inputs.len() == 2 {
        ndarray::concatenate![ndarray::Axis(0), inputs[0].view(), inputs[1].view()]
    } else {
        inputs[0].clone()
    };
    let (w_name, b_name) = head.param_names();
    let w = store.get(w_name).view().into_dimensionality::<Ix2>().expect("head weight 2-d");
    let b = store.get(b_name).view().into_dimensionality::<Ix1>().expect("head bias 1-d");
    assert_eq!(w.ncols(), stacked.len(), "{head:?}: weight expects {} inputs, got {}", w.ncols(), stacked.len());
    let out = w.dot(&stacked) + &b;
    let k = out.len() / 2;
    let mu = out.slice(ndarray::s![0..k]).to_owned();
    let logvar = out.slice(ndarray::s![k..2 * k]).mapv(|x| x.clamp(-logvar_clamp, logvar_clamp));
    GaussianParams { mu, logvar }
}

/// Tape version of [`gaussian_params`]; returns `(mu, logvar)` nodes.
pub fn gaussian_params_var(ctx: &ForwardCtx, inputs: &[Var], head: LatentHead) -> (Var, Var) {
    let expected = if head.is_posterior() { 2 } else { 1 };
    assert_eq!(inputs.len(), expected, "{head:?} takes {expected} input(s), got {}", inputs.len());
    let t = ctx.tape();
    let stacked = if inputs.len() == 2 { t.concat(inputs) } else { inputs[0] };
    let (w_name, b_name) = head.param_names();
    let out = t.add(t.matvec(ctx.var(w_name), stacked), ctx.var(b_name));
    let k = t.shape(out)[0] / 2;
    let mu = t.slice1(out, 0, k);
    let clamp = ctx.cfg.logvar_clamp;
    let logvar = t.clamp(t.slice1(out, k, 2 * k), -clamp, clamp);
    (mu, logvar)
}

/// `value = mu + exp(logvar / 2) .* epsilon`; deterministic given `epsilon`.
pub fn reparameterize(
    gp: &GaussianParams,
    epsilon: &Array1<f64>,
    which: LatentKind,
    source: SampleSource,
) -> LatentSample {
    assert_eq!(epsilon.len(), gp.dim(), "epsilon dim mismatch");
    let sigma = gp.logvar.mapv(|lv| (0.5 * lv).exp());
    let value = &gp.mu + &(sigma * epsilon);
    LatentSample { value, params: gp.clone(), epsilon: epsilon.clone(), which, source }
}

/// Tape version of [`reparameterize`].
pub fn reparameterize_var(t: &Tape, mu: Var, logvar: Var, epsilon: &Array1<f64>) -> Var {
    let sigma = t.exp(t.affine(logvar, 0.5, 0.0));
    let eps = t.constant(epsilon.clone().into_dyn());
    t.add(mu, t.mul(sigma, eps))
}

/// KL(q || p) for diagonal Gaussians of equal dimension:
/// `0.5 * sum(exp(lv_q - lv_p) + (mu_q - mu_p)^2 * exp(-lv_p) - 1 + lv_p - lv_q)`.
pub fn kl_diag_gaussians(q: &GaussianParams, p: &GaussianParams) -> f64 {
    assert_eq!(q.dim(), p.dim(), "KL dim mismatch");
    let mut total = 0.0;
    for i in 0..q.dim() {
        let (mq, lq) = (q.mu[i], q.logvar[i]);
        let (mp, lp) = (p.mu[i], p.logvar[i]);
        total += (lq - lp).exp() + (mq - mp).powi(2) * (-lp).exp() - 1.0 + lp - lq;
    }
    0.5 * total
}

/// Tape version of [`kl_diag_gaussians`]; returns a scalar node.
pub fn kl_diag_gaussians_var(t: &Tape, q_mu: Var, q_lv: Var, p_mu: Var, p_lv: Var) -> Var {
    let ratio = t.exp(t.sub(q_lv, p_lv));
    let diff = t.sub(q_mu, p_mu);
    let mahal = t.mul(t.mul(diff, diff), t.exp(t.neg(p_lv)));
    let inner = t.add(t.add(ratio, mahal), t.sub(p_lv, q_lv));
    let summed = t.sum(inner);
    let n = t.shape(q_mu)[0] as f64;
    t.affine(summed, 0.5, -0.5 * n)
}

/// The capacity penalty `|kl - c|` from the training objective.
pub fn kl_control_penalty(kl: f64, c: f64) -> f64 {
    assert!(kl >= -1e-12, "KL must be non-negative, got {kl}");
    assert!(c >= 0.0, "capacity target must be non-negative");
    (kl - c).abs()
}

/// Tape version of [`kl_control_penalty`]; the kink at `kl == c` uses the
/// zero subgradient.
pub fn kl_control_penalty_var(t: &Tape, kl: Var, c: f64) -> Var {
    t.abs(t.affine(kl, 1.0, -c))
}

/// Standard-normal noise vector.
pub fn draw_epsilon<R: rand::Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng))
}

pub(crate) fn to_array1(v: ArrayD<f64>) -> Array1<f64> {
    v.into_dimensionality::<Ix1>().expect("expected 1-d value")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ModelConfig, ParameterStore};
    use ndarray::{arr1, ArrayD};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            word_vocab: 10,
            char_vocab: 9,
            d_word: 6,
            d_char: 4,
            char_filters: 5,
            char_filter_width: 3,
            word_len: 6,
            hidden: 7,
            latent: 4,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn random_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> GaussianParams {
        GaussianParams {
            mu: Array1::from_shape_fn(dim, |_| rng.gen_range(-1.5..1.5)),
            logvar: Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0)),
        }
    }

    #[test]
    fn head_output_dims_match_latent() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = ParameterStore::init(&cfg, &mut rng);
        let h_c = Array1::from_elem(2 * cfg.hidden, 0.3);
        let gp = gaussian_params(&[&h_c], LatentHead::PriorZ, &store, cfg.logvar_clamp);
        assert_eq!(gp.mu.len(), cfg.latent);
        assert_eq!(gp.logvar.len(), cfg.latent);
    }

    #[test]
    fn zero_head_gives_standard_normal() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::init(&cfg, &mut rng);
        let shape = store.get("latent.prior_z.w").raw_dim();
        store.set("latent.prior_z.w", ArrayD::zeros(shape));
        let h_c = Array1::from_elem(2 * cfg.hidden, 0.7);
        let gp = gaussian_params(&[&h_c], LatentHead::PriorZ, &store, cfg.logvar_clamp);
        assert!(gp.mu.iter().all(|&x| x == 0.0));
        assert!(gp.logvar.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn posterior_distinguishes_second_input() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = ParameterStore::init(&cfg, &mut rng);
        let h_c = Array1::from_shape_fn(2 * cfg.hidden, |i| (i as f64).sin());
        let h_a1 = Array1::from_elem(2 * cfg.hidden, 0.2);
        let h_a2 = Array1::from_elem(2 * cfg.hidden, -0.9);
        let g1 = gaussian_params(&[&h_c, &h_a1], LatentHead::PostZ, &store, cfg.logvar_clamp);
        let g2 = gaussian_params(&[&h_c, &h_a2], LatentHead::PostZ, &store, cfg.logvar_clamp);
        assert!(g1.mu.iter().zip(g2.mu.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    #[should_panic(expected = "takes 2 input(s)")]
    fn posterior_rejects_single_input() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = ParameterStore::init(&cfg, &mut rng);
        let h_c = Array1::zeros(2 * cfg.hidden);
        let _ = gaussian_params(&[&h_c], LatentHead::PostZ, &store, cfg.logvar_clamp);
    }

    #[test]
    fn reparameterize_zero_epsilon_returns_mean() {
        let gp = GaussianParams { mu: arr1(&[1.0, -2.0]), logvar: arr1(&[0.3, -0.4]) };
        let s = reparameterize(&gp, &arr1(&[0.0, 0.0]), LatentKind::Z, SampleSource::Posterior);
        assert_eq!(s.value, gp.mu);
    }

    #[test]
    fn reparameterize_unit_variance_shifts_by_epsilon() {
        let gp = GaussianParams { mu: arr1(&[1.0, 2.0]), logvar: arr1(&[0.0, 0.0]) };
        let s = reparameterize(&gp, &arr1(&[1.0, 0.0]), LatentKind::Y, SampleSource::Prior);
        assert_eq!(s.value, arr1(&[2.0, 2.0]));
    }

    #[test]
    fn reparameterized_sample_mean_matches_mu() {
        let gp = GaussianParams { mu: arr1(&[0.5, -1.0, 2.0]), logvar: arr1(&[0.2, -0.6, 0.0]) };
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut sums = Array1::<f64>::zeros(3);
        for _ in 0..n {
            let eps = draw_epsilon(3, &mut rng);
            sums += &reparameterize(&gp, &eps, LatentKind::Z, SampleSource::Prior).value;
        }
        let means = sums / n as f64;
        for i in 0..3 {
            let sigma = (0.5 * gp.logvar[i]).exp();
            let tol = 3.0 * sigma / (n as f64).sqrt();
            assert!(
                (means[i] - gp.mu[i]).abs() < tol,
                "coordinate {i}: mean {} vs mu {} (tol {tol})",
                means[i],
                gp.mu[i]
            );
        }
    }

    #[test]
    fn kl_of_identical_distributions_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_gaussian(&mut rng, 8);
        assert_eq!(kl_diag_gaussians(&q, &q), 0.0);
    }

    #[test]
    fn kl_unit_shift_is_one_half() {
        let mut q = GaussianParams::standard(6);
        q.mu[0] = 1.0;
        let p = GaussianParams::standard(6);
        assert!((kl_diag_gaussians(&q, &p) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let q = random_gaussian(&mut rng, 4);
            let p = random_gaussian(&mut rng, 4);
            assert!(kl_diag_gaussians(&q, &p) >= 0.0);
        }
    }

    #[test]
    fn kl_grows_as_means_separate() {
        let q = GaussianParams::standard(4);
        let mut prev = 0.0;
        for step in 1..10 {
            let mut p = GaussianParams::standard(4);
            p.mu[0] = step as f64 * 0.5;
            let kl = kl_diag_gaussians(&q, &p);
            assert!(kl > prev, "KL must strictly increase with mean distance");
            prev = kl;
        }
    }

    #[test]
    fn tape_kl_matches_plain_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let q = random_gaussian(&mut rng, 5);
            let p = random_gaussian(&mut rng, 5);
            let t = Tape::new();
            let q_mu = t.constant(q.mu.clone().into_dyn());
            let q_lv = t.constant(q.logvar.clone().into_dyn());
            let p_mu = t.constant(p.mu.clone().into_dyn());
            let p_lv = t.constant(p.logvar.clone().into_dyn());
            let kl = t.scalar(kl_diag_gaussians_var(&t, q_mu, q_lv, p_mu, p_lv));
            assert!((kl - kl_diag_gaussians(&q, &p)).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_heads_match_plain_heads() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let store = ParameterStore::init(&cfg, &mut rng);
        let h_c = Array1::from_shape_fn(2 * cfg.hidden, |i| (i as f64 * 0.37).cos());
        let h_a = Array1::from_shape_fn(2 * cfg.hidden, |i| (i as f64 * 0.11).sin());
        let plain = gaussian_params(&[&h_c, &h_a], LatentHead::PostZ, &store, cfg.logvar_clamp);

        let t = Tape::new();
        let ctx = ForwardCtx::eval(&t, &store, &cfg);
        let hc = t.constant(h_c.into_dyn());
        let ha = t.constant(h_a.into_dyn());
        let (mu, lv) = gaussian_params_var(&ctx, &[hc, ha], LatentHead::PostZ);
        assert_eq!(to_array1(t.value(mu)), plain.mu);
        assert_eq!(to_array1(t.value(lv)), plain.logvar);
    }

    #[test]
    fn penalty_examples() {
        assert!((kl_control_penalty(4.862, 5.0) - 0.138).abs() < 1e-12);
        assert_eq!(kl_control_penalty(2.0, 2.0), 0.0);
        assert_eq!(kl_control_penalty(1.25, 0.0), 1.25);
    }

    #[test]
    fn log_density_of_standard_normal_at_origin() {
        let gp = GaussianParams::standard(2);
        let expected = -(2.0 * std::f64::consts::PI).ln();
        assert!((gp.log_density(&arr1(&[0.0, 0.0])) - expected).abs() < 1e-12);
    }
}
