//! The training objective: diffusion, guidance, spectral and content terms.

use rand::Rng;

use super::{PipelineError, TrainConfig};
use crate::autograd::{ConvSpec, Graph, Var};
use crate::denoiser::{self, DenoiserConfig, DenoiserParams};
use crate::diffusion::{gaussian_like, predict_x0, q_sample, NoisePredictor, NoiseSchedule, Prediction};
use crate::hfpm::{self, GraphPyramid, HfpmParams};
use crate::imaging::{gaussian_window, mse, PairedSample, SSIM_C1, SSIM_C2, SSIM_WINDOW};
use crate::nn::Bound;
use crate::tensor::{ImageTensor, Tensor};
use crate::vlg::{self, Embedder, PromptPair};
use crate::wavelet::{decompose, WaveletPyramid};
use crate::Scalar;

/// One batched noise-prediction request. `coefficients` holds
/// `(√ᾱ_t, √(1−ᾱ_t))` per sample. `noise` is the draw used to build `x_t`;
/// learned predictors ignore it.
pub struct NoiseQuery<'q, T> {
    pub x_t: Var,
    pub condition: Var,
    pub timesteps: &'q [usize],
    pub coefficients: &'q [(T, T)],
    pub noise: &'q Tensor<T>,
}

/// A noise predictor recorded into a graph.
pub trait GraphNoisePredictor<T: Scalar> {
    fn predict_graph(&self, g: &mut Graph<T>, query: &NoiseQuery<'_, T>) -> Var;
}

/// Denoiser weights bound into a graph, with the output read per `prediction`.
pub struct BoundDenoiser<'a, T> {
    pub params: Bound<'a, T>,
    pub config: DenoiserConfig,
    pub prediction: Prediction,
}

impl<T: Scalar> GraphNoisePredictor<T> for BoundDenoiser<'_, T> {
    fn predict_graph(&self, g: &mut Graph<T>, query: &NoiseQuery<'_, T>) -> Var {
        let out = denoiser::forward(g, &self.params, &self.config, query.x_t, query.condition, query.timesteps);
        match self.prediction {
            Prediction::Noise => out,
            Prediction::Velocity => {
                let a = per_sample(g, &query.coefficients.iter().map(|c| c.0).collect::<Vec<_>>());
                let b = per_sample(g, &query.coefficients.iter().map(|c| c.1).collect::<Vec<_>>());
                let av = g.mul(out, a);
                let bx = g.mul(query.x_t, b);
                g.add(av, bx)
            }
        }
    }
}

/// Returns the exact noise; useful for checking the rest of the objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleNoise;

impl<T: Scalar> GraphNoisePredictor<T> for OracleNoise {
    fn predict_graph(&self, g: &mut Graph<T>, query: &NoiseQuery<'_, T>) -> Var {
        g.constant(query.noise.clone())
    }
}

/// `mean‖ε − ε̂‖² + mean‖x̂0 − x0‖²` for one random `t ∈ 1..=T`.
pub fn diffusion_loss<T: Scalar, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    x0: &ImageTensor<T>,
    condition: &ImageTensor<T>,
    denoiser: &P,
    s: &NoiseSchedule<T>,
    rng: &mut R,
) -> Result<T, PipelineError> {
    x0.check_same_dims(condition)?;
    let t = rng.random_range(1..=s.len());
    let (h, w, c) = x0.dims();
    let eps = gaussian_like(h, w, c, rng);
    let x_t = q_sample(x0, t, &eps, s)?;
    let eps_hat = denoiser.predict_noise(&x_t, condition, t)?;
    let x0_hat = predict_x0(&x_t, &eps_hat, t, s)?;
    Ok(mse(&eps, &eps_hat)? + mse(&x0_hat, x0)?)
}

/// Mean SSIM of `[n, c, h, w]` batches with the same window and constants
/// as [`crate::imaging::ssim`].
pub fn ssim_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let c = g.shape(a)[1];
    let taps = gaussian_window::<T>();
    let mut kernel = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for &ty in &taps {
        kernel.extend(taps.iter().map(|&tx| ty * tx));
    }
    let planes = 5 * c;
    let weights: Vec<T> = (0..planes).flat_map(|_| kernel.iter().copied()).collect();
    let w = g.constant(Tensor::from_vec([planes, 1, SSIM_WINDOW, SSIM_WINDOW], weights).expect("window size"));
    let aa = g.mul(a, a);
    let bb = g.mul(b, b);
    let ab = g.mul(a, b);
    let stack = g.concat(&[a, b, aa, bb, ab]);
    let spec = ConvSpec {
        stride: 1,
        padding: 0,
        dilation: 1,
        groups: planes,
    };
    let blurred = g.conv2d(stack, w, None, spec);
    let mu_a = g.slice_channels(blurred, 0, c);
    let mu_b = g.slice_channels(blurred, c, c);
    let e_aa = g.slice_channels(blurred, 2 * c, c);
    let e_bb = g.slice_channels(blurred, 3 * c, c);
    let e_ab = g.slice_channels(blurred, 4 * c, c);

    let mu_aa = g.mul(mu_a, mu_a);
    let mu_bb = g.mul(mu_b, mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_aa);
    let var_b = g.sub(e_bb, mu_bb);
    let cov = g.sub(e_ab, mu_ab);

    let two = T::lit(2.0);
    let n1 = g.affine(mu_ab, two, T::lit(SSIM_C1));
    let n2 = g.affine(cov, two, T::lit(SSIM_C2));
    let num = g.mul(n1, n2);
    let d1 = g.add(mu_aa, mu_bb);
    let d1 = g.affine(d1, T::one(), T::lit(SSIM_C1));
    let d2 = g.add(var_a, var_b);
    let d2 = g.affine(d2, T::one(), T::lit(SSIM_C2));
    let den = g.mul(d1, d2);
    let map = g.div(num, den);
    g.mean(map)
}

/// `Σ γ_l · mean‖Φ^l(a) − Φ^l(b)‖² + (1 − SSIM(a, b))` on `[n, c, h, w]` batches.
pub fn content_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    embedder: &dyn Embedder<T>,
    enhanced: Var,
    reference: Var,
    weights: &[f64; 5],
) -> Var {
    let fa = embedder.image_features_graph(g, enhanced);
    let fb = embedder.image_features_graph(g, reference);
    let ssim = ssim_graph(g, enhanced, reference);
    let mut total = g.affine(ssim, -T::one(), T::one());
    for ((&a, &b), &gamma) in fa.iter().zip(&fb).zip(weights) {
        if gamma == 0.0 {
            continue;
        }
        let d = g.sub(a, b);
        let sq = g.square(d);
        let m = g.mean(sq);
        let m = g.scale(m, T::lit(gamma));
        total = g.add(total, m);
    }
    total
}

pub fn content_loss<T: Scalar>(
    enhanced: &ImageTensor<T>,
    reference: &ImageTensor<T>,
    embedder: &dyn Embedder<T>,
    weights: &[f64; 5],
) -> Result<T, PipelineError> {
    if !enhanced.same_dims(reference) {
        return Err(PipelineError::ShapeMismatch(format!(
            "enhanced {:?} vs reference {:?}",
            enhanced.dims(),
            reference.dims()
        )));
    }
    let side = enhanced.height().min(enhanced.width());
    if side < SSIM_WINDOW {
        return Err(PipelineError::ShapeMismatch(format!("side {side} below the {SSIM_WINDOW}-pixel SSIM window")));
    }
    let mut g = Graph::new();
    let a = g.constant(enhanced.to_tensor());
    let b = g.constant(reference.to_tensor());
    let loss = content_loss_graph(&mut g, embedder, a, b, weights);
    Ok(g.item(loss))
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub diffusion: f64,
    pub vlg: f64,
    pub spectral: f64,
    pub content: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.diffusion, self.vlg, self.spectral, self.content]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Handles into a recorded objective. Disabled terms are `None`.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: Var,
    pub diffusion: Var,
    pub vlg: Option<Var>,
    pub spectral: Option<Var>,
    pub content: Option<Var>,
    /// Enhancement preview `I_E` built from the one-step latent estimate.
    pub preview: Var,
}

impl LossGraph {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| g.item(v).to_f64().unwrap_or(f64::NAN));
        LossBreakdown {
            total: get(Some(self.total)),
            diffusion: get(Some(self.diffusion)),
            vlg: get(self.vlg),
            spectral: get(self.spectral),
            content: get(self.content),
        }
    }
}

fn stack<T: Scalar>(images: &[&ImageTensor<T>]) -> Result<Tensor<T>, PipelineError> {
    Ok(hfpm::stack_bands(images)?)
}

fn graph_pyramid<T: Scalar>(g: &mut Graph<T>, pyramids: &[WaveletPyramid<T>]) -> Result<GraphPyramid, PipelineError> {
    let levels = pyramids[0].levels();
    let partial: Vec<Vec<ImageTensor<T>>> =
        pyramids.iter().map(hfpm::approximations).collect::<Result<_, _>>()?;
    let mut approx = Vec::with_capacity(levels);
    let mut details = Vec::with_capacity(levels);
    for k in 0..levels {
        let a: Vec<&ImageTensor<T>> = partial.iter().map(|p| &p[k]).collect();
        approx.push(g.constant(stack(&a)?));
        let mut bands = Vec::with_capacity(3);
        for i in 0..3 {
            let b: Vec<&ImageTensor<T>> = pyramids.iter().map(|p| p.level(k + 1).bands()[i]).collect();
            bands.push(g.constant(stack(&b)?));
        }
        details.push([bands[0], bands[1], bands[2]]);
    }
    Ok(GraphPyramid { approx, details })
}

fn per_sample<T: Scalar>(g: &mut Graph<T>, values: &[T]) -> Var {
    g.constant(Tensor::from_vec([values.len(), 1, 1, 1], values.to_vec()).expect("one value per sample"))
}

/// Records the full objective for a batch of paired patches.
///
/// Draws one `t` per sample and unit Gaussian noise, predicts the noise on
/// the coarsest approximation, and builds the enhancement preview from the
/// one-step estimate `x̂0` and the (enhanced) detail bands. Guidance scores
/// the preview; the content term compares it with the reference.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_graph<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    pairs: &[PairedSample<T>],
    denoiser: &dyn GraphNoisePredictor<T>,
    hfpm_params: &Bound<'_, T>,
    config: &TrainConfig,
    schedule: &NoiseSchedule<T>,
    embedder: &dyn Embedder<T>,
    text: &(Vec<T>, Vec<T>),
    rng: &mut R,
) -> Result<LossGraph, PipelineError> {
    if pairs.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let k_levels = config.levels;
    let low: Vec<WaveletPyramid<T>> = pairs.iter().map(|p| decompose(&p.low, k_levels)).collect::<Result<_, _>>()?;
    let high: Vec<WaveletPyramid<T>> = pairs.iter().map(|p| decompose(&p.high, k_levels)).collect::<Result<_, _>>()?;

    let timesteps: Vec<usize> = pairs.iter().map(|_| rng.random_range(1..=schedule.len())).collect();
    let (h, w, c) = low[0].approx.dims();
    let noise: Vec<ImageTensor<T>> = pairs.iter().map(|_| gaussian_like(h, w, c, rng)).collect();
    let noise = stack(&noise.iter().collect::<Vec<_>>())?;
    let x0 = stack(&high.iter().map(|p| &p.approx).collect::<Vec<_>>())?;
    let cond = stack(&low.iter().map(|p| &p.approx).collect::<Vec<_>>())?;
    let coefficients: Vec<(T, T)> = timesteps.iter().map(|&t| schedule.forward_coefficients(t)).collect();
    let mut x_t = x0.clone();
    let plane = c * h * w;
    for (i, &(a, b)) in coefficients.iter().enumerate() {
        let span = i * plane..(i + 1) * plane;
        for (x, &e) in x_t.data_mut()[span.clone()].iter_mut().zip(&noise.data()[span]) {
            *x = a * *x + b * e;
        }
    }

    let x0_var = g.constant(x0);
    let x_t = g.constant(x_t);
    let condition = g.constant(cond);
    let eps_hat = denoiser.predict_graph(
        g,
        &NoiseQuery {
            x_t,
            condition,
            timesteps: &timesteps,
            coefficients: &coefficients,
            noise: &noise,
        },
    );
    let eps = g.constant(noise.clone());
    let d = g.sub(eps, eps_hat);
    let d = g.square(d);
    let term1 = g.mean(d);
    let b = per_sample(g, &coefficients.iter().map(|c| c.1).collect::<Vec<_>>());
    let inv_a = per_sample(g, &coefficients.iter().map(|c| T::one() / c.0).collect::<Vec<_>>());
    let scaled = g.mul(eps_hat, b);
    let x0_hat = g.sub(x_t, scaled);
    let x0_hat = g.mul(x0_hat, inv_a);
    let d = g.sub(x0_hat, x0_var);
    let d = g.square(d);
    let term2 = g.mean(d);
    let diffusion = g.add(term1, term2);

    let low_g = graph_pyramid(g, &low)?;
    let (spectral, details) = if config.use_hfpm {
        let high_g = graph_pyramid(g, &high)?;
        let hcfg = config.hfpm_config();
        let (loss, details) = hfpm::hfpm_loss_graph(
            g,
            hfpm_params,
            &hcfg,
            &low_g,
            &high_g,
            config.hfpm_version,
            T::lit(config.amplitude_weight),
            T::lit(config.phase_weight),
            config.phase_distance,
        );
        (Some(loss), details)
    } else {
        (None, low_g.details.clone())
    };

    // Â^K = x̂0, then Â^{k-1} = IDWT(Â^k, details_k); Â^0 is the preview.
    let mut approximations = vec![x0_hat];
    let mut a = x0_hat;
    for k in (1..=k_levels).rev() {
        let [v, hh, dd] = details[k - 1];
        a = g.idwt2(a, v, hh, dd);
        if k > 1 {
            approximations.push(a);
        }
    }
    approximations.reverse();
    let preview = a;

    let stages = config.stages();
    let vlg = if stages.0 > 0 {
        let rescaled: Vec<Var> = approximations
            .iter()
            .enumerate()
            .map(|(i, &ak)| {
                let s = g.scale(ak, T::lit(0.5f64.powi(i as i32 + 1)));
                g.clamp(s, T::zero(), T::one())
            })
            .collect();
        let image = g.clamp(preview, T::zero(), T::one());
        vlg::vlg_loss_graph(g, embedder, text, &rescaled, image, config.similarity_mode, stages)
    } else {
        None
    };

    let content = if config.use_content {
        let reference = g.constant(stack(&pairs.iter().map(|p| &p.high).collect::<Vec<_>>())?);
        Some(content_loss_graph(g, embedder, preview, reference, &config.content_weights))
    } else {
        None
    };

    let mut total = diffusion;
    for term in [vlg, spectral, content].into_iter().flatten() {
        total = g.add(total, term);
    }
    Ok(LossGraph {
        total,
        diffusion,
        vlg,
        spectral,
        content,
        preview,
    })
}

/// Evaluates the objective with frozen weights.
pub fn total_loss<T: Scalar, R: Rng + ?Sized>(
    pairs: &[PairedSample<T>],
    denoiser: &DenoiserParams<T>,
    hfpm_params: &HfpmParams<T>,
    config: &TrainConfig,
    embedder: &dyn Embedder<T>,
    rng: &mut R,
) -> Result<LossBreakdown, PipelineError> {
    config.validate()?;
    let schedule = config.schedule_spec().build::<T>()?;
    let text = PromptPair::new(config.prompt_positive.as_str(), config.prompt_negative.as_str())?.resolve(embedder)?;
    let mut g = Graph::new();
    let den = BoundDenoiser {
        params: denoiser.store.bind(&mut g, false),
        config: denoiser.config,
        prediction: config.prediction,
    };
    let hp = hfpm_params.store.bind(&mut g, false);
    let lg = total_loss_graph(&mut g, pairs, &den, &hp, config, &schedule, embedder, &text, rng)?;
    Ok(lg.breakdown(&g))
}
