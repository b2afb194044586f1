//! Conditional noise predictor `ε̂(x_t, condition, t)`.
//!
//! Architecture (`ch_l = base · 2^l`, `L = levels`, `d = 4 · base`):
//!
//! | block | layers |
//! |---|---|
//! | time | sinusoidal(base) → linear base→d → SiLU → linear d→d |
//! | `in` | conv3 2C→ch_0 |
//! | `enc{l}` | ResBlock ch_l→ch_l, then `down{l}`: conv3 stride 2 ch_l→ch_{l+1} |
//! | `mid` | ResBlock ch_L→ch_L, self-attention (`attn`) |
//! | `dec{l}` | upsample, `up{l}`: conv3 ch_{l+1}→ch_l, concat skip, ResBlock 2ch_l→ch_l |
//! | `out` | GroupNorm, SiLU, conv3 ch_0→C |
//!
//! A ResBlock `cin→cout` is `norm1, SiLU, conv1 (3×3), + temb (linear d→cout
//! of SiLU(time)), norm2, SiLU, conv2 (3×3)`, plus a 1×1 `skip` when
//! `cin ≠ cout`. Attention is GroupNorm, 1×1 `q`/`k`/`v`, windowed
//! single-head attention, 1×1 `proj`, residual.

use thiserror::Error;

use crate::autograd::{ConvSpec, Graph, Var};
use crate::diffusion::{DiffusionError, NoisePredictor};
use crate::nn::{self, Bound, Initializer, ParamStore};
use crate::tensor::{ImageTensor, Tensor};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("timestep {0} must be at least 1")]
    StepOutOfRange(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Latent channels `C`; the network input has `2C` (latent ‖ condition).
    pub channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    /// Side of the attention tiles at the bottleneck.
    pub attention_window: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            base_channels: 32,
            levels: 2,
            attention_window: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        if self.base_channels < 4 {
            return Err(DenoiserError::InvalidArchitecture(format!(
                "base channels must be at least 4, got {}",
                self.base_channels
            )));
        }
        if !self.base_channels.is_multiple_of(2) {
            return Err(DenoiserError::InvalidArchitecture("base channels must be even".into()));
        }
        if self.levels == 0 || self.levels > 6 {
            return Err(DenoiserError::InvalidArchitecture(format!("levels must be in 1..=6, got {}", self.levels)));
        }
        if self.channels == 0 || self.attention_window == 0 {
            return Err(DenoiserError::InvalidArchitecture("channels and attention window must be positive".into()));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "denoiser/1 channels={} base={} levels={} window={}",
            self.channels, self.base_channels, self.levels, self.attention_window
        )
    }

    pub fn from_fingerprint(s: &str) -> Option<Self> {
        let rest = s.strip_prefix("denoiser/1 ")?;
        let mut cfg = Self::default();
        let mut seen = 0;
        for part in rest.split(' ') {
            let (key, value) = part.split_once('=')?;
            let value: usize = value.parse().ok()?;
            match key {
                "channels" => cfg.channels = value,
                "base" => cfg.base_channels = value,
                "levels" => cfg.levels = value,
                "window" => cfg.attention_window = value,
                _ => return None,
            }
            seen += 1;
        }
        (seen == 4 && cfg.validate().is_ok()).then_some(cfg)
    }

    /// Latent sides must be divisible by `2^levels`.
    pub fn check_latent(&self, height: usize, width: usize) -> Result<(), DenoiserError> {
        let m = 1 << self.levels;
        if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(DenoiserError::ShapeMismatch(format!(
                "latent {height}×{width} must be a nonzero multiple of {m}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T> {
    pub config: DenoiserConfig,
    pub store: ParamStore<T>,
}

impl<T: Scalar> DenoiserParams<T> {
    pub fn fingerprint(&self) -> &str {
        self.store.fingerprint()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Rebuilds params from a store, checking its fingerprint and every shape.
    pub fn from_store(store: ParamStore<T>) -> Result<Self, DenoiserError> {
        let config = DenoiserConfig::from_fingerprint(store.fingerprint()).ok_or_else(|| {
            DenoiserError::InvalidArchitecture(format!("unrecognized fingerprint {:?}", store.fingerprint()))
        })?;
        let template = init_params::<T>(0, &config)?;
        check_layout(&template.store, &store).map_err(DenoiserError::InvalidArchitecture)?;
        Ok(Self { config, store })
    }
}

/// Same names, order and shapes in both stores.
pub(crate) fn check_layout<T: Scalar>(template: &ParamStore<T>, store: &ParamStore<T>) -> Result<(), String> {
    if template.len() != store.len() {
        return Err(format!("expected {} tensors, found {}", template.len(), store.len()));
    }
    for ((en, et), (gn, gt)) in template.iter().zip(store.iter()) {
        if en != gn || et.shape() != gt.shape() {
            return Err(format!("expected {en} {:?}, found {gn} {:?}", et.shape(), gt.shape()));
        }
    }
    Ok(())
}

fn init_resblock<T: Scalar>(init: &mut Initializer, s: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, tdim: usize) {
    init.norm(s, &format!("{name}.norm1"), cin);
    init.conv(s, &format!("{name}.conv1"), cin, cout, 3, 1);
    init.linear(s, &format!("{name}.temb"), tdim, cout);
    init.norm(s, &format!("{name}.norm2"), cout);
    init.conv(s, &format!("{name}.conv2"), cout, cout, 3, 1);
    if cin != cout {
        init.conv(s, &format!("{name}.skip"), cin, cout, 1, 1);
    }
}

/// Deterministic fan-in scaled uniform initialization.
pub fn init_params<T: Scalar>(seed: u64, config: &DenoiserConfig) -> Result<DenoiserParams<T>, DenoiserError> {
    config.validate()?;
    let mut init = Initializer::new(seed);
    let mut s = ParamStore::new(config.fingerprint());
    let (base, tdim, c) = (config.base_channels, config.time_dim(), config.channels);
    init.linear(&mut s, "time.fc1", base, tdim);
    init.linear(&mut s, "time.fc2", tdim, tdim);
    init.conv(&mut s, "in", 2 * c, base, 3, 1);
    for l in 0..config.levels {
        let ch = config.channels_at(l);
        init_resblock(&mut init, &mut s, &format!("enc{l}"), ch, ch, tdim);
        init.conv(&mut s, &format!("down{l}"), ch, config.channels_at(l + 1), 3, 1);
    }
    let top = config.channels_at(config.levels);
    init_resblock(&mut init, &mut s, "mid", top, top, tdim);
    init.norm(&mut s, "attn.norm", top);
    for name in ["attn.q", "attn.k", "attn.v", "attn.proj"] {
        init.conv(&mut s, name, top, top, 1, 1);
    }
    for l in (0..config.levels).rev() {
        let ch = config.channels_at(l);
        init.conv(&mut s, &format!("up{l}"), config.channels_at(l + 1), ch, 3, 1);
        init_resblock(&mut init, &mut s, &format!("dec{l}"), 2 * ch, ch, tdim);
    }
    init.norm(&mut s, "out.norm", base);
    init.conv(&mut s, "out", base, c, 3, 1);
    Ok(DenoiserParams {
        config: *config,
        store: s,
    })
}

/// Sinusoidal features `[sin(t·f_i) …, cos(t·f_i) …]`, `f_i = 10000^(−i/(dim/2))`,
/// as a `[n, dim, 1, 1]` tensor.
pub fn timestep_embedding<T: Scalar>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * t as f64);
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.sin(), a.cos())).unzip();
        data.extend(sin.into_iter().chain(cos).map(T::lit));
        data.extend((2 * half..dim).map(|_| T::zero()));
    }
    Tensor::from_vec([timesteps.len(), dim, 1, 1], data).expect("embedding size")
}

fn resblock<T: Scalar>(g: &mut Graph<T>, p: &Bound<'_, T>, name: &str, x: Var, temb: Var) -> Var {
    let h = nn::norm(g, p, &format!("{name}.norm1"), x);
    let h = g.silu(h);
    let h = nn::conv(g, p, &format!("{name}.conv1"), h, ConvSpec::same(3));
    let t = nn::linear(g, p, &format!("{name}.temb"), temb);
    let h = g.add(h, t);
    let h = nn::norm(g, p, &format!("{name}.norm2"), h);
    let h = g.silu(h);
    let h = nn::conv(g, p, &format!("{name}.conv2"), h, ConvSpec::same(3));
    let cin = g.shape(x)[1];
    let cout = g.shape(h)[1];
    let skip = if cin != cout {
        nn::conv(g, p, &format!("{name}.skip"), x, ConvSpec::same(1))
    } else {
        x
    };
    g.add(h, skip)
}

fn self_attention<T: Scalar>(g: &mut Graph<T>, p: &Bound<'_, T>, x: Var, window: usize) -> Var {
    let h = nn::norm(g, p, "attn.norm", x);
    let q = nn::conv(g, p, "attn.q", h, ConvSpec::same(1));
    let k = nn::conv(g, p, "attn.k", h, ConvSpec::same(1));
    let v = nn::conv(g, p, "attn.v", h, ConvSpec::same(1));
    let a = g.windowed_attention(q, k, v, window);
    let out = nn::conv(g, p, "attn.proj", a, ConvSpec::same(1));
    g.add(x, out)
}

/// Records the network on `[n, C, h, w]` inputs with one timestep per batch
/// element. Shapes are assumed valid (see [`DenoiserConfig::check_latent`]).
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    config: &DenoiserConfig,
    x_t: Var,
    condition: Var,
    timesteps: &[usize],
) -> Var {
    let emb = g.constant(timestep_embedding(timesteps, config.base_channels));
    let temb = nn::linear(g, p, "time.fc1", emb);
    let temb = g.silu(temb);
    let temb = nn::linear(g, p, "time.fc2", temb);
    let temb = g.silu(temb);

    let input = g.concat(&[x_t, condition]);
    let mut h = nn::conv(g, p, "in", input, ConvSpec::same(3));
    let mut skips = Vec::with_capacity(config.levels);
    for l in 0..config.levels {
        h = resblock(g, p, &format!("enc{l}"), h, temb);
        skips.push(h);
        h = nn::conv(g, p, &format!("down{l}"), h, ConvSpec::same(3).with_stride(2));
    }
    h = resblock(g, p, "mid", h, temb);
    h = self_attention(g, p, h, config.attention_window);
    for l in (0..config.levels).rev() {
        h = g.upsample2(h);
        h = nn::conv(g, p, &format!("up{l}"), h, ConvSpec::same(3));
        h = g.concat(&[h, skips[l]]);
        h = resblock(g, p, &format!("dec{l}"), h, temb);
    }
    let h = nn::norm(g, p, "out.norm", h);
    let h = g.silu(h);
    nn::conv(g, p, "out", h, ConvSpec::same(3))
}

/// Single-image inference.
pub fn predict_noise<T: Scalar>(
    x_t: &ImageTensor<T>,
    condition: &ImageTensor<T>,
    t: usize,
    params: &DenoiserParams<T>,
) -> Result<ImageTensor<T>, DenoiserError> {
    if !x_t.same_dims(condition) {
        return Err(DenoiserError::ShapeMismatch(format!(
            "latent {:?} vs condition {:?}",
            x_t.dims(),
            condition.dims()
        )));
    }
    if x_t.channels() != params.config.channels {
        return Err(DenoiserError::ShapeMismatch(format!(
            "{} latent channels, network expects {}",
            x_t.channels(),
            params.config.channels
        )));
    }
    params.config.check_latent(x_t.height(), x_t.width())?;
    if t == 0 {
        return Err(DenoiserError::StepOutOfRange(t));
    }
    let mut g = Graph::new();
    let p = params.store.bind(&mut g, false);
    let x = g.constant(x_t.to_tensor());
    let c = g.constant(condition.to_tensor());
    let out = forward(&mut g, &p, &params.config, x, c, &[t]);
    Ok(ImageTensor::from_tensor(g.value(out), 0).expect("network output shape"))
}

impl<T: Scalar> NoisePredictor<T> for DenoiserParams<T> {
    fn predict_noise(
        &self,
        x_t: &ImageTensor<T>,
        condition: &ImageTensor<T>,
        t: usize,
    ) -> Result<ImageTensor<T>, DiffusionError> {
        predict_noise(x_t, condition, t, self).map_err(|e| DiffusionError::Predictor(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        ImageTensor::new(h, w, c, data).unwrap()
    }

    /// Parameter count summed layer by layer from the architecture table.
    fn closed_form_count(c: usize, base: usize, levels: usize) -> usize {
        let d = 4 * base;
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let norm = |ch: usize| 2 * ch;
        let res = |cin: usize, cout: usize| {
            norm(cin) + conv(cin, cout, 3) + conv(d, cout, 1) + norm(cout) + conv(cout, cout, 3)
                + if cin != cout { conv(cin, cout, 1) } else { 0 }
        };
        let ch = |l: usize| base * (1 << l);
        let mut total = conv(base, d, 1) + conv(d, d, 1) + conv(2 * c, base, 3);
        for l in 0..levels {
            total += res(ch(l), ch(l)) + conv(ch(l), ch(l + 1), 3);
            total += conv(ch(l + 1), ch(l), 3) + res(2 * ch(l), ch(l));
        }
        let top = ch(levels);
        total += res(top, top) + norm(top) + 4 * conv(top, top, 1);
        total + norm(base) + conv(base, c, 3)
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = DenoiserConfig {
            channels: 3,
            base_channels: 16,
            levels: 2,
            attention_window: 32,
        };
        let p = init_params::<f32>(0, &cfg).unwrap();
        assert_eq!(p.parameter_count(), closed_form_count(3, 16, 2));
        // Hand evaluation of the table for C=3, base=16, L=2.
        assert_eq!(closed_form_count(3, 16, 2), 214_979);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = DenoiserConfig { base_channels: 8, ..Default::default() };
        let a = init_params::<f32>(5, &cfg).unwrap();
        assert_eq!(a, init_params::<f32>(5, &cfg).unwrap());
        assert_ne!(a, init_params::<f32>(6, &cfg).unwrap());
        assert!(matches!(
            init_params::<f32>(0, &DenoiserConfig { base_channels: 2, ..cfg }),
            Err(DenoiserError::InvalidArchitecture(_))
        ));
        assert!(init_params::<f32>(0, &DenoiserConfig { levels: 0, ..cfg }).is_err());
    }

    #[test]
    fn fingerprint_round_trip_and_layout_check() {
        let cfg = DenoiserConfig { base_channels: 8, levels: 1, ..Default::default() };
        assert_eq!(DenoiserConfig::from_fingerprint(&cfg.fingerprint()), Some(cfg));
        assert_eq!(DenoiserConfig::from_fingerprint("denoiser/1 channels=3"), None);
        let p = init_params::<f32>(1, &cfg).unwrap();
        assert_eq!(DenoiserParams::from_store(p.store.clone()).unwrap(), p);
        let mut wrong = ParamStore::new(cfg.fingerprint());
        wrong.insert("x", Tensor::<f32>::zeros([1, 1, 1, 1]));
        assert!(DenoiserParams::from_store(wrong).is_err());
    }

    #[test]
    fn embedding_values() {
        let e = timestep_embedding::<f64>(&[0, 3], 6);
        assert_eq!(e.shape(), [2, 6, 1, 1]);
        assert_eq!(&e.data()[..6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!((e.data()[6] - 3f64.sin()).abs() < 1e-15);
        let f1 = (-(10000f64.ln()) / 3.0).exp();
        assert!((e.data()[10] - (3.0 * f1).cos()).abs() < 1e-15);
    }

    #[test]
    fn output_shape_and_determinism_on_64px_latents() {
        let cfg = DenoiserConfig { base_channels: 8, ..Default::default() };
        let p = init_params::<f32>(2, &cfg).unwrap();
        let x = random_image(64, 64, 3, 1).cast::<f32>();
        let c = random_image(64, 64, 3, 2).cast::<f32>();
        let a = predict_noise(&x, &c, 10, &p).unwrap();
        assert_eq!(a.dims(), (64, 64, 3));
        assert_eq!(a, predict_noise(&x, &c, 10, &p).unwrap());
        assert_ne!(a, predict_noise(&x, &c, 11, &p).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = DenoiserConfig { base_channels: 4, ..Default::default() };
        let p = init_params::<f64>(2, &cfg).unwrap();
        let x = random_image(8, 8, 3, 1);
        assert!(matches!(predict_noise(&x, &random_image(8, 4, 3, 2), 1, &p), Err(DenoiserError::ShapeMismatch(_))));
        assert!(matches!(predict_noise(&random_image(6, 6, 3, 1), &random_image(6, 6, 3, 1), 1, &p), Err(DenoiserError::ShapeMismatch(_))));
        assert!(matches!(predict_noise(&x, &x, 0, &p), Err(DenoiserError::StepOutOfRange(0))));
    }

    #[test]
    fn micro_network_gradients_match_finite_differences() {
        let cfg = DenoiserConfig {
            channels: 3,
            base_channels: 4,
            levels: 1,
            attention_window: 32,
        };
        let params = init_params::<f64>(9, &cfg).unwrap();
        let x = random_image(8, 8, 3, 3).to_tensor();
        let c = random_image(8, 8, 3, 4).to_tensor();
        let inputs: Vec<(String, Tensor<f64>)> = params.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let report = check_gradients(&inputs, 1e-4, |g, vars| {
            let bound = Bound::from_vars(&params.store, vars.to_vec());
            let xv = g.constant(x.clone());
            let cv = g.constant(c.clone());
            let out = forward(g, &bound, &cfg, xv, cv, &[7]);
            let sq = g.square(out);
            g.mean(sq)
        });
        assert_eq!(report.tensors.len(), params.store.len());
        for t in &report.tensors {
            assert!(t.relative_error <= 1e-3, "{}: {:e}", t.name, t.relative_error);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn shape_preserved_for_divisible_sizes(hm in 1usize..4, wm in 1usize..4, levels in 1usize..3, seed in any::<u64>()) {
            let cfg = DenoiserConfig { channels: 3, base_channels: 4, levels, attention_window: 4 };
            let p = init_params::<f32>(seed, &cfg).unwrap();
            let m = 1 << levels;
            let x = random_image(hm * m, wm * m, 3, seed).cast::<f32>();
            let out = predict_noise(&x, &x, 5, &p).unwrap();
            prop_assert_eq!(out.dims(), x.dims());
            prop_assert_eq!(out, predict_noise(&x, &x, 5, &p).unwrap());
        }
    }
}
