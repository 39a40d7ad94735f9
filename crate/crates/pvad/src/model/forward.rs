//! Whole-model forward/backward: backbone, speaker conditioning, classifier.

use super::block::{add_grad, block_bwd, block_train, BlockTape};
use super::{GradMap, ModelBundleOf, Variant};
use crate::error::{Error, Result};
use crate::layers::{linear_bwd, linear_fwd, softmax_rows_fwd};
use crate::tensor::{dot, Scalar, TensorOf};

pub const PRENET_PREFIX: &str = "prenet.enc";

struct FilmTape<F> {
    cond: TensorOf<F>,
    gamma: TensorOf<F>,
    beta: TensorOf<F>,
    per_frame: bool,
}

struct PrenetTape<F> {
    blocks: Vec<BlockTape<F>>,
    proj_in: TensorOf<F>,
    backbone_out: TensorOf<F>,
    e_pre: TensorOf<F>,
    sims: Vec<F>,
    zero_target: bool,
}

/// Forward intermediates for one utterance.
pub struct ModelTape<F> {
    xin: TensorOf<F>,
    embedding: TensorOf<F>,
    blocks: Vec<BlockTape<F>>,
    h: TensorOf<F>,
    film: Option<FilmTape<F>>,
    prenet: Option<PrenetTape<F>>,
    h_mod: TensorOf<F>,
    pub logits: TensorOf<F>,
    pub posteriors: TensorOf<F>,
}

/// Gradients of a scalar loss with respect to everything upstream.
pub struct ModelGrads<F> {
    pub params: GradMap<F>,
    pub features: TensorOf<F>,
    pub embedding: TensorOf<F>,
}

fn is_zero<F: Scalar>(v: &TensorOf<F>) -> bool {
    v.data().iter().all(|&x| x == F::zero())
}

impl<F: Scalar> ModelBundleOf<F> {
    fn check_io(&self, features: &TensorOf<F>, embedding: &TensorOf<F>) -> Result<()> {
        if features.cols() != self.config.input_dim {
            return Err(Error::Contract(format!(
                "feature dim {} != configured input_dim {}",
                features.cols(),
                self.config.input_dim
            )));
        }
        if embedding.len() != self.config.embedding_dim {
            return Err(Error::Contract(format!(
                "embedding dim {} != configured embedding_dim {}",
                embedding.len(),
                self.config.embedding_dim
            )));
        }
        Ok(())
    }

    /// Frame posteriors `[p_tss, p_ntss, p_ns]` for one utterance.
    pub fn forward(&self, features: &TensorOf<F>, embedding: &TensorOf<F>) -> Result<TensorOf<F>> {
        Ok(self.forward_train(features, embedding)?.posteriors)
    }

    /// Forward pass retaining the tape for [`ModelBundleOf::backward`].
    pub fn forward_train(
        &self,
        features: &TensorOf<F>,
        embedding: &TensorOf<F>,
    ) -> Result<ModelTape<F>> {
        self.check_io(features, embedding)?;
        let cfg = &self.config;
        let frames = features.rows();

        // Input to the main backbone.
        let xin = match cfg.variant {
            Variant::Concat => {
                let mut x = TensorOf::zeros(&[frames, cfg.effective_input_dim()]);
                for t in 0..frames {
                    let row = x.row_mut(t);
                    row[..cfg.input_dim].copy_from_slice(features.row(t));
                    row[cfg.input_dim..].copy_from_slice(embedding.data());
                }
                x
            }
            _ => features.clone(),
        };

        let mut cur = linear_fwd(&xin, self.get("in_proj.w"), self.get("in_proj.b"));
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let (next, tape) = block_train(self, &format!("enc.{i}"), &cur, cfg);
            blocks.push(tape);
            cur = next;
        }
        let h = cur;

        // Speaker pre-net and cosine scores.
        let prenet = if cfg.variant.has_prenet() {
            Some(self.prenet_forward(features, embedding)?)
        } else {
            None
        };

        // FiLM conditioning.
        let (h_mod, film) = match cfg.variant {
            Variant::Concat => (h.clone(), None),
            Variant::Film => {
                let cond = TensorOf::from_vec(&[1, cfg.embedding_dim], embedding.data().to_vec());
                let (gamma, beta) = self.film_generate(&cond)?;
                let mut out = h.clone();
                for t in 0..frames {
                    let row = out.row_mut(t);
                    for j in 0..cfg.model_dim {
                        row[j] = gamma.at(0, j) * row[j] + beta.at(0, j);
                    }
                }
                (
                    out,
                    Some(FilmTape {
                        cond,
                        gamma,
                        beta,
                        per_frame: false,
                    }),
                )
            }
            Variant::Prenet | Variant::Combined => {
                let sims = &prenet.as_ref().unwrap().sims;
                let cond_dim = cfg.film_cond_dim();
                let mut cond = TensorOf::zeros(&[frames, cond_dim]);
                for t in 0..frames {
                    let row = cond.row_mut(t);
                    if cfg.variant == Variant::Combined {
                        row[..cfg.embedding_dim].copy_from_slice(embedding.data());
                    }
                    row[cond_dim - 1] = sims[t];
                }
                let (gamma, beta) = self.film_generate(&cond)?;
                let mut out = h.clone();
                for t in 0..frames {
                    let row = out.row_mut(t);
                    for j in 0..cfg.model_dim {
                        row[j] = gamma.at(t, j) * row[j] + beta.at(t, j);
                    }
                }
                (
                    out,
                    Some(FilmTape {
                        cond,
                        gamma,
                        beta,
                        per_frame: true,
                    }),
                )
            }
        };

        let logits = linear_fwd(&h_mod, self.get("classifier.w"), self.get("classifier.b"));
        let posteriors = softmax_rows_fwd(&logits);

        Ok(ModelTape {
            xin,
            embedding: embedding.clone(),
            blocks,
            h,
            film,
            prenet,
            h_mod,
            logits,
            posteriors,
        })
    }

    fn prenet_forward(
        &self,
        features: &TensorOf<F>,
        embedding: &TensorOf<F>,
    ) -> Result<PrenetTape<F>> {
        let cfg = &self.config;
        let mut cur = linear_fwd(
            features,
            self.get("prenet.in_proj.w"),
            self.get("prenet.in_proj.b"),
        );
        let proj_in = features.clone();
        let mut blocks = Vec::with_capacity(cfg.prenet_layers);
        for i in 0..cfg.prenet_layers {
            let (next, tape) = block_train(self, &format!("{PRENET_PREFIX}.{i}"), &cur, cfg);
            blocks.push(tape);
            cur = next;
        }
        let backbone_out = cur;
        let e_pre = linear_fwd(
            &backbone_out,
            self.get("prenet.out.w"),
            self.get("prenet.out.b"),
        );
        let zero_target = is_zero(embedding);
        let sims = cosine_rows(&e_pre, embedding, zero_target);
        Ok(PrenetTape {
            blocks,
            proj_in,
            backbone_out,
            e_pre,
            sims,
            zero_target,
        })
    }

    /// Per-frame pre-net embeddings (the vectors the cosine scores compare
    /// against the target). Also usable as a self-contained speaker encoder:
    /// mean-pool and normalize to enroll from audio.
    pub fn prenet_embeddings(&self, features: &TensorOf<F>) -> Result<TensorOf<F>> {
        if !self.config.variant.has_prenet() {
            return Err(Error::Contract(format!(
                "variant {} has no speaker pre-net",
                self.config.variant.name()
            )));
        }
        let zero = TensorOf::zeros(&[self.config.embedding_dim]);
        self.check_io(features, &zero)?;
        Ok(self.prenet_forward(features, &zero)?.e_pre)
    }

    /// Per-frame cosine similarity between the pre-net embedding and the
    /// target embedding. Zero-sentinel targets score 0 on every frame.
    pub fn prenet_similarity(
        &self,
        features: &TensorOf<F>,
        embedding: &TensorOf<F>,
    ) -> Result<Vec<F>> {
        if !self.config.variant.has_prenet() {
            return Err(Error::Contract(format!(
                "variant {} has no speaker pre-net",
                self.config.variant.name()
            )));
        }
        self.check_io(features, embedding)?;
        Ok(self.prenet_forward(features, embedding)?.sims)
    }

    /// FiLM generator: one affine map of the conditioner per output.
    pub fn film_generate(&self, cond: &TensorOf<F>) -> Result<(TensorOf<F>, TensorOf<F>)> {
        if !self.config.variant.has_film() {
            return Err(Error::Contract(format!(
                "variant {} has no FiLM generator",
                self.config.variant.name()
            )));
        }
        if cond.cols() != self.config.film_cond_dim() {
            return Err(Error::Contract(format!(
                "conditioner dim {} != expected {}",
                cond.cols(),
                self.config.film_cond_dim()
            )));
        }
        let gamma = linear_fwd(cond, self.get("film.gamma.w"), self.get("film.gamma.b"));
        let beta = linear_fwd(cond, self.get("film.beta.w"), self.get("film.beta.b"));
        Ok((gamma, beta))
    }

    /// Backward from classifier-logit gradients to every parameter and input.
    pub fn backward(&self, tape: &ModelTape<F>, dlogits: &TensorOf<F>) -> ModelGrads<F> {
        let cfg = &self.config;
        let mut grads: GradMap<F> = GradMap::new();
        let mut gemb = TensorOf::zeros(&[cfg.embedding_dim]);

        let (gh_mod, gw_cls, gb_cls) = linear_bwd(&tape.h_mod, self.get("classifier.w"), dlogits);
        add_grad(&mut grads, "classifier.w", gw_cls);
        add_grad(&mut grads, "classifier.b", gb_cls);

        // Undo the FiLM modulation.
        let (gh, gs_per_frame) = match (&tape.film, cfg.variant) {
            (None, _) => (gh_mod, None),
            (Some(film), Variant::Film) => {
                let frames = tape.h.rows();
                let mut ggamma = TensorOf::zeros(&[1, cfg.model_dim]);
                let mut gbeta = TensorOf::zeros(&[1, cfg.model_dim]);
                let mut gh = TensorOf::zeros(tape.h.shape());
                for t in 0..frames {
                    for j in 0..cfg.model_dim {
                        let g = gh_mod.at(t, j);
                        ggamma.set(0, j, ggamma.at(0, j) + g * tape.h.at(t, j));
                        gbeta.set(0, j, gbeta.at(0, j) + g);
                        gh.set(t, j, g * film.gamma.at(0, j));
                    }
                }
                let gcond = self.film_generator_bwd(&film.cond, &ggamma, &gbeta, &mut grads);
                for (a, &g) in gemb.data_mut().iter_mut().zip(gcond.row(0)) {
                    *a = *a + g;
                }
                (gh, None)
            }
            (Some(film), _) => {
                debug_assert!(film.per_frame);
                let frames = tape.h.rows();
                let mut ggamma = TensorOf::zeros(film.gamma.shape());
                let mut gbeta = TensorOf::zeros(film.beta.shape());
                let mut gh = TensorOf::zeros(tape.h.shape());
                for t in 0..frames {
                    for j in 0..cfg.model_dim {
                        let g = gh_mod.at(t, j);
                        ggamma.set(t, j, g * tape.h.at(t, j));
                        gbeta.set(t, j, g);
                        gh.set(t, j, g * film.gamma.at(t, j));
                    }
                }
                let gcond = self.film_generator_bwd(&film.cond, &ggamma, &gbeta, &mut grads);
                let cond_dim = cfg.film_cond_dim();
                let mut gs = vec![F::zero(); frames];
                for t in 0..frames {
                    gs[t] = gcond.at(t, cond_dim - 1);
                    if cfg.variant == Variant::Combined {
                        for (a, &g) in gemb
                            .data_mut()
                            .iter_mut()
                            .zip(&gcond.row(t)[..cfg.embedding_dim])
                        {
                            *a = *a + g;
                        }
                    }
                }
                (gh, Some(gs))
            }
        };

        // Main backbone.
        let mut g = gh;
        for i in (0..cfg.num_layers).rev() {
            g = block_bwd(self, &format!("enc.{i}"), &tape.blocks[i], &g, &mut grads);
        }
        let (gxin, gw_in, gb_in) = linear_bwd(&tape.xin, self.get("in_proj.w"), &g);
        add_grad(&mut grads, "in_proj.w", gw_in);
        add_grad(&mut grads, "in_proj.b", gb_in);

        let mut gfeatures = match cfg.variant {
            Variant::Concat => {
                let mut gx = TensorOf::zeros(&[tape.xin.rows(), cfg.input_dim]);
                for t in 0..tape.xin.rows() {
                    gx.row_mut(t).copy_from_slice(&gxin.row(t)[..cfg.input_dim]);
                    for (a, &g) in gemb
                        .data_mut()
                        .iter_mut()
                        .zip(&gxin.row(t)[cfg.input_dim..])
                    {
                        *a = *a + g;
                    }
                }
                gx
            }
            _ => gxin,
        };

        // Speaker pre-net chain.
        if let (Some(prenet), Some(gs)) = (&tape.prenet, gs_per_frame) {
            let ge_pre = cosine_rows_bwd(
                &prenet.e_pre,
                &tape.embedding,
                &prenet.sims,
                &gs,
                prenet.zero_target,
                &mut gemb,
            );
            let (gph, gw_out, gb_out) =
                linear_bwd(&prenet.backbone_out, self.get("prenet.out.w"), &ge_pre);
            add_grad(&mut grads, "prenet.out.w", gw_out);
            add_grad(&mut grads, "prenet.out.b", gb_out);
            let mut g = gph;
            for i in (0..cfg.prenet_layers).rev() {
                g = block_bwd(
                    self,
                    &format!("{PRENET_PREFIX}.{i}"),
                    &prenet.blocks[i],
                    &g,
                    &mut grads,
                );
            }
            let (gx_pre, gw_pin, gb_pin) =
                linear_bwd(&prenet.proj_in, self.get("prenet.in_proj.w"), &g);
            add_grad(&mut grads, "prenet.in_proj.w", gw_pin);
            add_grad(&mut grads, "prenet.in_proj.b", gb_pin);
            gfeatures.add_assign(&gx_pre);
        }

        // Parameters untouched by this variant's paths still need zero grads
        // so optimizers and checkers can iterate the full manifest.
        for (name, t) in &self.params {
            grads
                .entry(name.clone())
                .or_insert_with(|| TensorOf::zeros(t.shape()));
        }

        ModelGrads {
            params: grads,
            features: gfeatures,
            embedding: gemb,
        }
    }

    fn film_generator_bwd(
        &self,
        cond: &TensorOf<F>,
        ggamma: &TensorOf<F>,
        gbeta: &TensorOf<F>,
        grads: &mut GradMap<F>,
    ) -> TensorOf<F> {
        let (gc_gamma, gw_g, gb_g) = linear_bwd(cond, self.get("film.gamma.w"), ggamma);
        add_grad(grads, "film.gamma.w", gw_g);
        add_grad(grads, "film.gamma.b", gb_g);
        let (gc_beta, gw_b, gb_b) = linear_bwd(cond, self.get("film.beta.w"), gbeta);
        add_grad(grads, "film.beta.w", gw_b);
        add_grad(grads, "film.beta.b", gb_b);
        let mut gc = gc_gamma;
        gc.add_assign(&gc_beta);
        gc
    }
}

const COS_NORM_FLOOR: f64 = 1e-12;

fn cosine_rows<F: Scalar>(e_pre: &TensorOf<F>, target: &TensorOf<F>, zero_target: bool) -> Vec<F> {
    let frames = e_pre.rows();
    if zero_target {
        return vec![F::zero(); frames];
    }
    let nb = dot(target.data(), target.data()).sqrt();
    (0..frames)
        .map(|t| {
            let a = e_pre.row(t);
            let na = dot(a, a).sqrt();
            let denom = na * nb;
            if denom.as_f64() < COS_NORM_FLOOR {
                F::zero()
            } else {
                dot(a, target.data()) / denom
            }
        })
        .collect()
}

/// Backward of the per-frame cosine: returns grad wrt `e_pre` and adds the
/// target-side gradient into `gtarget`.
#[allow(clippy::too_many_arguments)]
fn cosine_rows_bwd<F: Scalar>(
    e_pre: &TensorOf<F>,
    target: &TensorOf<F>,
    sims: &[F],
    gs: &[F],
    zero_target: bool,
    gtarget: &mut TensorOf<F>,
) -> TensorOf<F> {
    let mut ge = TensorOf::zeros(e_pre.shape());
    if zero_target {
        return ge;
    }
    let b = target.data();
    let nb = dot(b, b).sqrt();
    for t in 0..e_pre.rows() {
        let a = e_pre.row(t);
        let na = dot(a, a).sqrt();
        let denom = na * nb;
        if denom.as_f64() < COS_NORM_FLOOR {
            continue;
        }
        let s = sims[t];
        let g = gs[t];
        let out = ge.row_mut(t);
        for j in 0..a.len() {
            out[j] = g * (b[j] / denom - s * a[j] / (na * na));
        }
        for j in 0..b.len() {
            gtarget.data_mut()[j] =
                gtarget.data_mut()[j] + g * (a[j] / denom - s * b[j] / (nb * nb));
        }
    }
    ge
}

#[cfg(test)]
mod tests {
    use super::super::{build_model, ModelConfig, SpeakerEmbedding, Variant};
    use super::*;
    use crate::tensor::Tensor;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            num_layers: 2,
            model_dim: 16,
            heads: 4,
            conv_kernel: 5,
            left_context: 6,
            input_dim: 24,
            embedding_dim: 10,
            prenet_layers: 1,
            num_classes: 3,
            ffn_expansion: 2,
        }
    }

    fn rand_features(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    fn rand_embedding(dim: usize, seed: u64) -> SpeakerEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpeakerEmbedding::unit((0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    fn emb_tensor(e: &SpeakerEmbedding) -> Tensor {
        Tensor::from_vec(&[e.dim()], e.values().to_vec())
    }

    #[test]
    fn posterior_rows_sum_to_one_for_all_variants() {
        for variant in Variant::ALL {
            let cfg = small_config(variant);
            let bundle = build_model(&cfg, 3).unwrap();
            let x = rand_features(12, cfg.input_dim, 5);
            let e = rand_embedding(cfg.embedding_dim, 6);
            let p = bundle.forward(&x, &emb_tensor(&e)).unwrap();
            assert_eq!(p.shape(), &[12, 3]);
            for t in 0..p.rows() {
                let sum: f32 = p.row(t).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "{}: row {t} sums {sum}", variant.name());
                assert!(p.row(t).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn film_is_identity_at_init_for_all_modulated_variants() {
        // A freshly built generator outputs gamma=1, beta=0, so posteriors
        // must match a generator-ablated model (classifier applied to h).
        for variant in [Variant::Film, Variant::Prenet, Variant::Combined] {
            let cfg = small_config(variant);
            let bundle = build_model(&cfg, 11).unwrap();
            let x = rand_features(9, cfg.input_dim, 13);
            let e = rand_embedding(cfg.embedding_dim, 17);
            let tape = bundle.forward_train(&x, &emb_tensor(&e)).unwrap();
            // Ablated: classifier directly on the backbone output.
            let logits = linear_fwd(&tape.h, bundle.get("classifier.w"), bundle.get("classifier.b"));
            let ablated = softmax_rows_fwd(&logits);
            assert_eq!(
                tape.posteriors.data(),
                ablated.data(),
                "variant {}",
                variant.name()
            );
        }
    }

    #[test]
    fn film_generator_at_init_returns_ones_and_zeros() {
        let cfg = small_config(Variant::Film);
        let bundle = build_model(&cfg, 2).unwrap();
        let cond = rand_features(1, cfg.embedding_dim, 3);
        let (gamma, beta) = bundle.film_generate(&cond).unwrap();
        assert!(gamma.data().iter().all(|&v| v == 1.0));
        assert!(beta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn film_generator_is_affine() {
        // generate(a+b) == generate(a) + generate(b) - generate(0)
        let cfg = small_config(Variant::Film);
        let mut bundle = build_model(&cfg, 2).unwrap();
        // Give the generator non-trivial weights.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for name in ["film.gamma.w", "film.beta.w"] {
            let t = bundle.params.get_mut(name).unwrap();
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let a = rand_features(1, cfg.embedding_dim, 21);
        let b = rand_features(1, cfg.embedding_dim, 22);
        let mut ab = a.clone();
        ab.add_assign(&b);
        let zero = Tensor::zeros(&[1, cfg.embedding_dim]);

        let (ga, ba) = bundle.film_generate(&a).unwrap();
        let (gb_, bb) = bundle.film_generate(&b).unwrap();
        let (gab, bab) = bundle.film_generate(&ab).unwrap();
        let (g0, b0) = bundle.film_generate(&zero).unwrap();
        for j in 0..cfg.model_dim {
            let lhs = gab.at(0, j);
            let rhs = ga.at(0, j) + gb_.at(0, j) - g0.at(0, j);
            assert!((lhs - rhs).abs() < 1e-5, "gamma affine at {j}");
            let lhs = bab.at(0, j);
            let rhs = ba.at(0, j) + bb.at(0, j) - b0.at(0, j);
            assert!((lhs - rhs).abs() < 1e-5, "beta affine at {j}");
        }
        // Zero conditioner returns the biases.
        assert_eq!(g0.data(), bundle.get("film.gamma.b").data());
        assert_eq!(b0.data(), bundle.get("film.beta.b").data());
    }

    #[test]
    fn prenet_similarity_contract() {
        let cfg = small_config(Variant::Concat);
        let bundle = build_model(&cfg, 1).unwrap();
        let x = rand_features(4, cfg.input_dim, 2);
        let e = rand_embedding(cfg.embedding_dim, 3);
        assert!(bundle.prenet_similarity(&x, &emb_tensor(&e)).is_err());
    }

    #[test]
    fn stubbed_prenet_scores_plus_and_minus_one() {
        let cfg = small_config(Variant::Prenet);
        let mut bundle = build_model(&cfg, 5).unwrap();
        let e = rand_embedding(cfg.embedding_dim, 7);
        // Stub: zero the projection weights and set the bias to the target,
        // forcing e_pre == e_target on every frame.
        {
            let w = bundle.params.get_mut("prenet.out.w").unwrap();
            for v in w.data_mut() {
                *v = 0.0;
            }
            let b = bundle.params.get_mut("prenet.out.b").unwrap();
            b.data_mut().copy_from_slice(e.values());
        }
        let x = rand_features(6, cfg.input_dim, 8);
        let sims = bundle.prenet_similarity(&x, &emb_tensor(&e)).unwrap();
        for s in &sims {
            assert!((s - 1.0).abs() < 1e-5, "cos(v,v) = {s}");
        }
        // Now force e_pre == -e_target.
        {
            let b = bundle.params.get_mut("prenet.out.b").unwrap();
            for (v, &t) in b.data_mut().iter_mut().zip(e.values()) {
                *v = -t;
            }
        }
        let sims = bundle.prenet_similarity(&x, &emb_tensor(&e)).unwrap();
        for s in &sims {
            assert!((s + 1.0).abs() < 1e-5, "cos(v,-v) = {s}");
        }
    }

    #[test]
    fn zero_sentinel_gives_zero_similarity() {
        let cfg = small_config(Variant::Combined);
        let bundle = build_model(&cfg, 5).unwrap();
        let x = rand_features(5, cfg.input_dim, 6);
        let zero = Tensor::zeros(&[cfg.embedding_dim]);
        let sims = bundle.prenet_similarity(&x, &zero).unwrap();
        assert!(sims.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn concat_zero_embedding_contributes_nothing_to_preactivation() {
        let cfg = small_config(Variant::Concat);
        let bundle = build_model(&cfg, 19).unwrap();
        let x = rand_features(7, cfg.input_dim, 23);
        let zero = Tensor::zeros(&[cfg.embedding_dim]);

        // Truncated projection: only the feature rows of in_proj.w.
        let w = bundle.get("in_proj.w");
        let wb = bundle.get("in_proj.b");
        let w_feat = {
            let mut t = Tensor::zeros(&[cfg.input_dim, cfg.model_dim]);
            for i in 0..cfg.input_dim {
                t.row_mut(i).copy_from_slice(w.row(i));
            }
            t
        };
        let truncated = linear_fwd(&x, &w_feat, wb);

        let mut xin = Tensor::zeros(&[x.rows(), cfg.effective_input_dim()]);
        for t in 0..x.rows() {
            xin.row_mut(t)[..cfg.input_dim].copy_from_slice(x.row(t));
            xin.row_mut(t)[cfg.input_dim..].copy_from_slice(zero.data());
        }
        let full = linear_fwd(&xin, w, wb);
        assert_eq!(truncated.data(), full.data());
    }

    #[test]
    fn receptive_field_bound_is_exact() {
        // Output at frame t must be bit-identical under perturbations older
        // than R frames, and must react to a perturbation exactly R back.
        let mut cfg = small_config(Variant::Combined);
        cfg.num_layers = 2;
        cfg.left_context = 3;
        cfg.conv_kernel = 3;
        let r = cfg.receptive_field();
        assert_eq!(r, 2 * (3 + 2));
        let t_total = r + 6;
        let bundle = build_model(&cfg, 31).unwrap();
        let e = rand_embedding(cfg.embedding_dim, 32);
        let x = rand_features(t_total, cfg.input_dim, 33);
        let base = bundle.forward(&x, &emb_tensor(&e)).unwrap();

        // Perturb frame 0; frames strictly later than 0 + R are untouched.
        let mut past = x.clone();
        for j in 0..cfg.input_dim {
            past.set(0, j, past.at(0, j) + 1.0);
        }
        let p_past = bundle.forward(&past, &emb_tensor(&e)).unwrap();
        for t in r + 1..t_total {
            assert_eq!(base.row(t), p_past.row(t), "frame {t} leaked past beyond R={r}");
        }
        // The perturbation must reach frame R (window edges are inclusive).
        assert_ne!(base.row(r), p_past.row(r));

        // Perturb the last frame; all earlier frames are untouched.
        let mut fut = x.clone();
        for j in 0..cfg.input_dim {
            fut.set(t_total - 1, j, fut.at(t_total - 1, j) - 1.0);
        }
        let p_fut = bundle.forward(&fut, &emb_tensor(&e)).unwrap();
        for t in 0..t_total - 1 {
            assert_eq!(base.row(t), p_fut.row(t), "future leaked into frame {t}");
        }
    }

    #[test]
    fn dim_mismatches_are_contract_errors() {
        let cfg = small_config(Variant::Film);
        let bundle = build_model(&cfg, 1).unwrap();
        let x = rand_features(3, cfg.input_dim + 1, 2);
        let e = rand_embedding(cfg.embedding_dim, 3);
        assert!(bundle.forward(&x, &emb_tensor(&e)).is_err());
        let x = rand_features(3, cfg.input_dim, 2);
        let bad_e = Tensor::zeros(&[cfg.embedding_dim + 2]);
        assert!(bundle.forward(&x, &bad_e).is_err());
        let bad_cond = Tensor::zeros(&[1, cfg.film_cond_dim() + 1]);
        assert!(bundle.film_generate(&bad_cond).is_err());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        use crate::layers::gradcheck::{check_model_end_to_end, END_TO_END_TOL};
        for (variant, seed) in [
            (Variant::Concat, 1u64),
            (Variant::Film, 2),
            (Variant::Prenet, 3),
            (Variant::Combined, 4),
        ] {
            let err = check_model_end_to_end(variant, seed).unwrap();
            assert!(
                err < END_TO_END_TOL,
                "{}: end-to-end gradient error {err}",
                variant.name()
            );
        }
    }
}
