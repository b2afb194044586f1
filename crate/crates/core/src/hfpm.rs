//! High-frequency perception: learned enhancement of wavelet detail triples
//! and the wavelet→Fourier spectral loss against a reference pyramid.
//!
//! Enhancement of `(V, H, D)` with feature width `F`:
//!
//! 1. per band `b`: depthwise 3×3 `b.dw`, pointwise `b.pw` C→F, SiLU;
//! 2. `fuse`: 1×1 over `[f_V ‖ f_H]` (2F→F);
//! 3. cross-attention: `attn.q` from `f_D`, `attn.k`/`attn.v` from the fused
//!    map, `attn.proj`, added to `f_D`;
//! 4. shared dilated stage on every band: `dil1` (3×3, dilation 2), SiLU,
//!    `dil2` (3×3, dilation 3), residual;
//! 5. per band: depthwise 3×3 `b.out_dw`, pointwise `b.out_pw` F→C, added to
//!    the input band.
//!
//! `b.out_pw` starts at zero, so freshly initialized params act as identity.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autograd::{ConvSpec, Graph, Var};
use crate::denoiser::check_layout;
use crate::nn::{self, Bound, Initializer, ParamStore};
use crate::spectral::{dft_amp_phase, spectral_l1_loss, PhaseDistance, SpectralError};
use crate::tensor::{ImageTensor, Tensor, TensorError};
use crate::wavelet::{idwt2, SubbandTriple, WaveletError, WaveletPyramid};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum HfpmError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pyramid level mismatch: {low} vs {reference}")]
    LevelMismatch { low: usize, reference: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
}

impl From<TensorError> for HfpmError {
    fn from(e: TensorError) -> Self {
        HfpmError::ShapeMismatch(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HfpmVersion {
    /// Spectra of the approximation bands, no enhancement.
    V1,
    /// Finest-level detail triple only.
    V2,
    /// Every detail level.
    #[default]
    V3,
}

impl fmt::Display for HfpmVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HfpmVersion::V1 => "v1",
            HfpmVersion::V2 => "v2",
            HfpmVersion::V3 => "v3",
        })
    }
}

impl FromStr for HfpmVersion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "v1" => Ok(Self::V1),
            "v2" => Ok(Self::V2),
            "v3" => Ok(Self::V3),
            other => Err(format!("unknown module version {other:?}")),
        }
    }
}

impl HfpmVersion {
    /// Detail levels (1-based) that are enhanced and compared.
    pub fn enhanced_levels(&self, levels: usize) -> std::ops::Range<usize> {
        match self {
            HfpmVersion::V1 => 1..1,
            HfpmVersion::V2 => 1..2,
            HfpmVersion::V3 => 1..levels + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HfpmConfig {
    pub channels: usize,
    pub features: usize,
    /// Side of the cross-attention tiles.
    pub attention_window: usize,
}

impl Default for HfpmConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            features: 16,
            attention_window: 32,
        }
    }
}

const BANDS: [&str; 3] = ["v", "h", "d"];

impl HfpmConfig {
    pub fn validate(&self) -> Result<(), HfpmError> {
        if self.channels == 0 || self.features == 0 || self.attention_window == 0 {
            return Err(HfpmError::InvalidArchitecture(
                "channels, features and attention window must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "hfpm/1 channels={} features={} window={}",
            self.channels, self.features, self.attention_window
        )
    }

    pub fn from_fingerprint(s: &str) -> Option<Self> {
        let rest = s.strip_prefix("hfpm/1 ")?;
        let mut cfg = Self::default();
        let mut seen = 0;
        for part in rest.split(' ') {
            let (key, value) = part.split_once('=')?;
            let value: usize = value.parse().ok()?;
            match key {
                "channels" => cfg.channels = value,
                "features" => cfg.features = value,
                "window" => cfg.attention_window = value,
                _ => return None,
            }
            seen += 1;
        }
        (seen == 3 && cfg.validate().is_ok()).then_some(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HfpmParams<T> {
    pub config: HfpmConfig,
    pub store: ParamStore<T>,
}

pub fn init_hfpm<T: Scalar>(seed: u64, config: &HfpmConfig) -> Result<HfpmParams<T>, HfpmError> {
    config.validate()?;
    let (c, f) = (config.channels, config.features);
    let mut init = Initializer::new(seed);
    let mut s = ParamStore::new(config.fingerprint());
    for b in BANDS {
        init.conv(&mut s, &format!("{b}.dw"), c, c, 3, c);
        init.conv(&mut s, &format!("{b}.pw"), c, f, 1, 1);
    }
    init.conv(&mut s, "fuse", 2 * f, f, 1, 1);
    for name in ["attn.q", "attn.k", "attn.v", "attn.proj"] {
        init.conv(&mut s, name, f, f, 1, 1);
    }
    init.conv(&mut s, "dil1", f, f, 3, 1);
    init.conv(&mut s, "dil2", f, f, 3, 1);
    for b in BANDS {
        init.conv(&mut s, &format!("{b}.out_dw"), f, f, 3, f);
        init.conv(&mut s, &format!("{b}.out_pw"), f, c, 1, 1);
    }
    let mut params = HfpmParams {
        config: *config,
        store: s,
    };
    params.zero_output();
    Ok(params)
}

impl<T: Scalar> HfpmParams<T> {
    pub fn fingerprint(&self) -> &str {
        self.store.fingerprint()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Zeroes the output projections so that enhancement is the identity.
    pub fn zero_output(&mut self) {
        for b in BANDS {
            for suffix in ["w", "b"] {
                let t = self.store.get_mut(&format!("{b}.out_pw.{suffix}")).expect("output projection");
                t.data_mut().fill(T::zero());
            }
        }
    }

    pub fn from_store(store: ParamStore<T>) -> Result<Self, HfpmError> {
        let config = HfpmConfig::from_fingerprint(store.fingerprint()).ok_or_else(|| {
            HfpmError::InvalidArchitecture(format!("unrecognized fingerprint {:?}", store.fingerprint()))
        })?;
        let template = init_hfpm::<T>(0, &config)?;
        check_layout(&template.store, &store).map_err(HfpmError::InvalidArchitecture)?;
        Ok(Self { config, store })
    }
}

/// Records the enhancement of one batch of `[n, C, h, w]` bands.
pub fn enhance_graph<T: Scalar>(g: &mut Graph<T>, p: &Bound<'_, T>, config: &HfpmConfig, bands: [Var; 3]) -> [Var; 3] {
    let c = config.channels;
    let f = config.features;
    let mut feats = [bands[0]; 3];
    for (i, b) in BANDS.iter().enumerate() {
        let x = nn::conv(g, p, &format!("{b}.dw"), bands[i], ConvSpec::same(3).with_groups(c));
        let x = nn::conv(g, p, &format!("{b}.pw"), x, ConvSpec::same(1));
        feats[i] = g.silu(x);
    }
    let vh = g.concat(&[feats[0], feats[1]]);
    let fused = nn::conv(g, p, "fuse", vh, ConvSpec::same(1));
    let q = nn::conv(g, p, "attn.q", feats[2], ConvSpec::same(1));
    let k = nn::conv(g, p, "attn.k", fused, ConvSpec::same(1));
    let v = nn::conv(g, p, "attn.v", fused, ConvSpec::same(1));
    let a = g.windowed_attention(q, k, v, config.attention_window);
    let a = nn::conv(g, p, "attn.proj", a, ConvSpec::same(1));
    feats[2] = g.add(feats[2], a);
    let mut out = bands;
    for (i, b) in BANDS.iter().enumerate() {
        let x = nn::conv(g, p, "dil1", feats[i], ConvSpec::dilated(3, 2));
        let x = g.silu(x);
        let x = nn::conv(g, p, "dil2", x, ConvSpec::dilated(3, 3));
        let x = g.add(feats[i], x);
        let x = nn::conv(g, p, &format!("{b}.out_dw"), x, ConvSpec::same(3).with_groups(f));
        let x = nn::conv(g, p, &format!("{b}.out_pw"), x, ConvSpec::same(1));
        out[i] = g.add(bands[i], x);
    }
    out
}

pub fn enhance_details<T: Scalar>(triple: &SubbandTriple<T>, params: &HfpmParams<T>) -> Result<SubbandTriple<T>, HfpmError> {
    triple.v.check_same_dims(&triple.h)?;
    triple.v.check_same_dims(&triple.d)?;
    if triple.v.channels() != params.config.channels {
        return Err(HfpmError::ShapeMismatch(format!(
            "{} band channels, module expects {}",
            triple.v.channels(),
            params.config.channels
        )));
    }
    let mut g = Graph::new();
    let p = params.store.bind(&mut g, false);
    let bands = triple.bands().map(|b| g.constant(b.to_tensor()));
    let out = enhance_graph(&mut g, &p, &params.config, bands);
    let [v, h, d] = out.map(|o| ImageTensor::from_tensor(g.value(o), 0).expect("band shape"));
    Ok(SubbandTriple { v, h, d })
}

/// Graph-side view of a pyramid: `approx[i]` is `A^{i+1}` and `details[i]`
/// the level-`i+1` triple, finest first.
#[derive(Debug, Clone)]
pub struct GraphPyramid {
    pub approx: Vec<Var>,
    pub details: Vec<[Var; 3]>,
}

impl GraphPyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }
}

/// `ϑ1·mean|amp_a − amp_b| + ϑ2·mean|pha_a − pha_b|` over every bin of the
/// channel-stacked maps `a`, `b`.
fn spectral_term<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, w_amp: T, w_pha: T, distance: PhaseDistance) -> Var {
    let c = g.shape(a)[1];
    let sa = g.spectrum(a);
    let sb = g.spectrum(b);
    let diff = g.sub(sa, sb);
    let gap = g.abs(diff);
    let amp = g.slice_channels(gap, 0, c);
    let mut pha = g.slice_channels(gap, c, c);
    if distance == PhaseDistance::Wrapped {
        // min(d, 2π − d) = d − max(0, 2d − 2π)
        let excess = g.affine(pha, T::lit(2.0), -T::lit(2.0) * T::PI());
        let excess = g.clamp_min(excess, T::zero());
        pha = g.sub(pha, excess);
    }
    let amp = g.mean(amp);
    let pha = g.mean(pha);
    let amp = g.scale(amp, w_amp);
    let pha = g.scale(pha, w_pha);
    g.add(amp, pha)
}

/// Loss and the detail triples to use for reconstruction (enhanced where the
/// version enhances, raw elsewhere).
#[allow(clippy::too_many_arguments)]
pub fn hfpm_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    config: &HfpmConfig,
    low: &GraphPyramid,
    reference: &GraphPyramid,
    version: HfpmVersion,
    w_amp: T,
    w_pha: T,
    distance: PhaseDistance,
) -> (Var, Vec<[Var; 3]>) {
    let mut details = low.details.clone();
    let mut terms = Vec::new();
    match version {
        HfpmVersion::V1 => {
            for (&a, &b) in low.approx.iter().zip(&reference.approx) {
                terms.push(spectral_term(g, a, b, w_amp, w_pha, distance));
            }
        }
        HfpmVersion::V2 | HfpmVersion::V3 => {
            for level in version.enhanced_levels(low.levels()) {
                let enhanced = enhance_graph(g, p, config, low.details[level - 1]);
                details[level - 1] = enhanced;
                let a = g.concat(&enhanced);
                let b = g.concat(&reference.details[level - 1]);
                terms.push(spectral_term(g, a, b, w_amp, w_pha, distance));
            }
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    let loss = g.scale(total, T::one() / T::from_usize(terms.len()).unwrap());
    (loss, details)
}

/// `[A^1, …, A^K]` recovered by partial reconstruction.
pub fn approximations<T: Scalar>(p: &WaveletPyramid<T>) -> Result<Vec<ImageTensor<T>>, WaveletError> {
    let mut out = vec![p.approx.clone()];
    for k in (1..p.levels()).rev() {
        let t = &p.details[k];
        let a = idwt2(&out[0], &t.v, &t.h, &t.d)?;
        out.insert(0, a);
    }
    Ok(out)
}

fn check_pyramids<T: Scalar>(low: &WaveletPyramid<T>, reference: &WaveletPyramid<T>) -> Result<(), HfpmError> {
    if low.levels() != reference.levels() {
        return Err(HfpmError::LevelMismatch {
            low: low.levels(),
            reference: reference.levels(),
        });
    }
    low.approx.check_same_dims(&reference.approx)?;
    for (a, b) in low.details.iter().zip(&reference.details) {
        for (x, y) in a.bands().iter().zip(b.bands()) {
            x.check_same_dims(y)?;
        }
    }
    Ok(())
}

/// Spectral L1 loss between (enhanced) low-light spectra and raw reference
/// spectra, averaged over the compared levels and over all bins of each
/// level.
pub fn hfpm_loss<T: Scalar>(
    pyramid_low: &WaveletPyramid<T>,
    pyramid_ref: &WaveletPyramid<T>,
    params: &HfpmParams<T>,
    version: HfpmVersion,
    w_amp: T,
    w_pha: T,
    distance: PhaseDistance,
) -> Result<T, HfpmError> {
    check_pyramids(pyramid_low, pyramid_ref)?;
    let (mut pred, mut target) = (Vec::new(), Vec::new());
    match version {
        HfpmVersion::V1 => {
            for (a, b) in approximations(pyramid_low)?.iter().zip(&approximations(pyramid_ref)?) {
                pred.push(dft_amp_phase(a));
                target.push(dft_amp_phase(b));
            }
        }
        HfpmVersion::V2 | HfpmVersion::V3 => {
            for level in version.enhanced_levels(pyramid_low.levels()) {
                let enhanced = enhance_details(pyramid_low.level(level), params)?;
                for (a, b) in enhanced.bands().iter().zip(pyramid_ref.level(level).bands()) {
                    pred.push(dft_amp_phase(a));
                    target.push(dft_amp_phase(b));
                }
            }
        }
    }
    Ok(spectral_l1_loss(&pred, &target, w_amp, w_pha, distance)?)
}

/// Stacks one band per batch element into a `[n, C, h, w]` tensor.
pub fn stack_bands<T: Scalar>(bands: &[&ImageTensor<T>]) -> Result<Tensor<T>, TensorError> {
    let tensors: Vec<Tensor<T>> = bands.iter().map(|b| b.to_tensor()).collect();
    Tensor::stack(&tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::wavelet::decompose;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(h, w, c, data).unwrap()
    }

    /// Randomizes every tensor so no stage is trivially zero.
    fn busy_params(seed: u64, cfg: &HfpmConfig) -> HfpmParams<f64> {
        let mut p = init_hfpm::<f64>(seed, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for t in p.store.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random::<f64>() * 0.4 - 0.2;
            }
        }
        p
    }

    fn small() -> HfpmConfig {
        HfpmConfig {
            channels: 3,
            features: 4,
            attention_window: 32,
        }
    }

    #[test]
    fn fresh_params_are_identity() {
        let p = init_hfpm::<f64>(3, &small()).unwrap();
        let pyr = decompose(&random_image(16, 16, 3, 1), 1).unwrap();
        assert_eq!(enhance_details(&pyr.details[0], &p).unwrap(), pyr.details[0]);
        for version in [HfpmVersion::V1, HfpmVersion::V2, HfpmVersion::V3] {
            assert_eq!(hfpm_loss(&pyr, &pyr, &p, version, 1.0, 1.0, PhaseDistance::Raw).unwrap(), 0.0);
        }
        assert_ne!(p, init_hfpm::<f64>(4, &small()).unwrap());
    }

    #[test]
    fn shape_and_determinism_on_128px_triples() {
        let cfg = HfpmConfig { features: 4, ..Default::default() };
        let p = busy_params(1, &cfg).store.cast::<f32>();
        let p = HfpmParams::from_store(p).unwrap();
        let pyr = decompose(&random_image(256, 256, 3, 2).cast::<f32>(), 1).unwrap();
        let a = enhance_details(&pyr.details[0], &p).unwrap();
        assert_eq!(a.dims(), (128, 128, 3));
        assert_eq!(a, enhance_details(&pyr.details[0], &p).unwrap());
        assert_ne!(a, pyr.details[0]);
    }

    #[test]
    fn rejects_mismatches() {
        let p = init_hfpm::<f64>(0, &small()).unwrap();
        let bad = SubbandTriple {
            v: random_image(4, 4, 3, 0),
            h: random_image(4, 2, 3, 0),
            d: random_image(4, 4, 3, 0),
        };
        assert!(matches!(enhance_details(&bad, &p), Err(HfpmError::ShapeMismatch(_))));
        let a = decompose(&random_image(8, 8, 3, 1), 2).unwrap();
        let b = decompose(&random_image(8, 8, 3, 1), 1).unwrap();
        assert!(matches!(
            hfpm_loss(&a, &b, &p, HfpmVersion::V3, 1.0, 1.0, PhaseDistance::Raw),
            Err(HfpmError::LevelMismatch { low: 2, reference: 1 })
        ));
    }

    #[test]
    fn v3_is_the_level_mean_and_v2_the_first_level() {
        let p = busy_params(5, &small());
        let low = decompose(&random_image(16, 16, 3, 7), 2).unwrap();
        let reference = decompose(&random_image(16, 16, 3, 8), 2).unwrap();
        // Per-level terms computed directly from enhanced bands.
        let level_term = |k: usize| {
            let e = enhance_details(low.level(k), &p).unwrap();
            let pred: Vec<_> = e.bands().iter().map(|b| dft_amp_phase(b)).collect();
            let target: Vec<_> = reference.level(k).bands().iter().map(|b| dft_amp_phase(b)).collect();
            spectral_l1_loss(&pred, &target, 1.0, 1.0, PhaseDistance::Raw).unwrap()
        };
        let (l1, l2) = (level_term(1), level_term(2));
        let v2 = hfpm_loss(&low, &reference, &p, HfpmVersion::V2, 1.0, 1.0, PhaseDistance::Raw).unwrap();
        let v3 = hfpm_loss(&low, &reference, &p, HfpmVersion::V3, 1.0, 1.0, PhaseDistance::Raw).unwrap();
        assert!((v2 - l1).abs() < 1e-12);
        assert!((v3 - (l1 + l2) / 2.0).abs() < 1e-12);

        let k1 = decompose(&random_image(16, 16, 3, 7), 1).unwrap();
        let r1 = decompose(&random_image(16, 16, 3, 8), 1).unwrap();
        let a = hfpm_loss(&k1, &r1, &p, HfpmVersion::V2, 1.0, 1.0, PhaseDistance::Raw).unwrap();
        let b = hfpm_loss(&k1, &r1, &p, HfpmVersion::V3, 1.0, 1.0, PhaseDistance::Raw).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let p = busy_params(6, &small());
        let low = decompose(&random_image(16, 16, 3, 9), 2).unwrap();
        let reference = decompose(&random_image(16, 16, 3, 10), 2).unwrap();
        for version in [HfpmVersion::V1, HfpmVersion::V2, HfpmVersion::V3] {
            for distance in [PhaseDistance::Raw, PhaseDistance::Wrapped] {
                let expected = hfpm_loss(&low, &reference, &p, version, 0.7, 1.3, distance).unwrap();
                let mut g = Graph::new();
                let bound = p.store.bind(&mut g, false);
                let mut to_graph = |pyr: &WaveletPyramid<f64>| GraphPyramid {
                    approx: approximations(pyr).unwrap().iter().map(|a| g.constant(a.to_tensor())).collect(),
                    details: pyr.details.iter().map(|t| t.bands().map(|b| g.constant(b.to_tensor()))).collect(),
                };
                let (gl, gr) = (to_graph(&low), to_graph(&reference));
                let (loss, _) = hfpm_loss_graph(&mut g, &bound, &p.config, &gl, &gr, version, 0.7, 1.3, distance);
                assert!((g.item(loss) - expected).abs() < 1e-10, "{version} {distance:?}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = small();
        let p = busy_params(11, &cfg);
        let low = decompose(&random_image(16, 16, 3, 12), 1).unwrap();
        let bands: Vec<Tensor<f64>> = low.details[0].bands().iter().map(|b| b.to_tensor()).collect();
        let inputs: Vec<(String, Tensor<f64>)> = p.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let report = check_gradients(&inputs, 1e-4, |g, vars| {
            let bound = Bound::from_vars(&p.store, vars.to_vec());
            let b = [0, 1, 2].map(|i| g.constant(bands[i].clone()));
            let out = enhance_graph(g, &bound, &cfg, b);
            let cat = g.concat(&out);
            let sq = g.square(cat);
            g.mean(sq)
        });
        assert_eq!(report.tensors.len(), p.store.len());
        for t in &report.tensors {
            assert!(t.relative_error <= 1e-3, "{}: {:e}", t.name, t.relative_error);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn loss_is_nonnegative(seed in any::<u64>(), levels in 1usize..3, v in 0usize..3) {
            let version = [HfpmVersion::V1, HfpmVersion::V2, HfpmVersion::V3][v];
            let p = busy_params(seed, &small());
            let low = decompose(&random_image(8, 8, 3, seed), levels).unwrap();
            let reference = decompose(&random_image(8, 8, 3, seed.wrapping_add(1)), levels).unwrap();
            let loss = hfpm_loss(&low, &reference, &p, version, 1.0, 1.0, PhaseDistance::Raw).unwrap();
            prop_assert!(loss >= 0.0 && loss.is_finite());
        }
    }
}
