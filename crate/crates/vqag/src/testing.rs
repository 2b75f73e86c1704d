//! Model-rigging helpers for estimator identity checks: configurations in
//! which the latent machinery provably cancels, so estimators must reduce to
//! their deterministic counterparts.

use ndarray::Ix2;

use crate::model::Model;

/// Makes each posterior head compute exactly its prior head: the context
/// block of the posterior weight copies the prior weight, the second input's
/// block is zeroed, and biases match. Afterwards `q(z|a,c) = p(z|c)` and
/// `q(y|q,c) = p(y|c)` for every input.
pub fn tie_posteriors_to_priors(model: &mut Model) {
    for (post_w, post_b, prior_w, prior_b) in [
        ("latent.post_z.w", "latent.post_z.b", "latent.prior_z.w", "latent.prior_z.b"),
        ("latent.post_y.w", "latent.post_y.b", "latent.prior_y.w", "latent.prior_y.b"),
    ] {
        let prior = model
            .store
            .get(prior_w)
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("prior head weight is 2-d");
        let (rows, prior_cols) = prior.dim();
        let post_cols = model.store.get(post_w).shape()[1];
        let mut tied = ndarray::Array2::<f64>::zeros((rows, post_cols));
        tied.slice_mut(ndarray::s![.., 0..prior_cols]).assign(&prior);
        model.store.set(post_w, tied.into_dyn());
        let b = model.store.get(prior_b).clone();
        model.store.set(post_b, b);
    }
}

/// Zeroes the latent-to-initial-state maps of both decoders, so decoding no
/// longer depends on the latent draws (the init biases still set a constant
/// starting state).
pub fn decouple_decoders_from_latents(model: &mut Model) {
    for name in ["ans_dec.init.w", "q_dec.init.w"] {
        let shape = model.store.get(name).raw_dim();
        model.store.set(name, ndarray::ArrayD::zeros(shape));
    }
}
