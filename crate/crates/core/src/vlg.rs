//! Visual-language guidance: image/text embedders and the cosine-similarity
//! guidance losses.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::autograd::{ConvSpec, Graph, Var};
use crate::nn::{self, Initializer, ParamStore};
use crate::records::{put_str, put_store, put_u32, Reader};
use crate::tensor::{ImageTensor, Tensor};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum VlgError {
    #[error("no approximations supplied")]
    EmptyList,
    #[error("embedder produced a zero vector")]
    DegenerateEmbedding,
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("no embedding known for text {0:?}")]
    UnknownText(String),
    #[error("image has {0} channels; embedders take 1 or 3")]
    Channels(usize),
    #[error("image {0}×{1} is too small for the embedder")]
    TooSmall(usize, usize),
    #[error(
        "pretrained embedder file {0} not found; train with `--embedder stub` or supply the weights file"
    )]
    MissingWeights(String),
    #[error("embedder file {path}: {reason}")]
    CorruptWeights { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lower clamp on `cos(·, T_p)` in the ratio term.
pub const COSINE_FLOOR: f64 = 1e-4;
pub const DEFAULT_POSITIVE: &str = "a well-lit, high-contrast photo";
pub const DEFAULT_NEGATIVE: &str = "a dark, underexposed, noisy photo";

/// Image and text encoders sharing one embedding space.
///
/// Graph methods take `[n, C, h, w]` images and return unnormalized
/// `[n, D, 1, 1]` embeddings or feature maps, so guidance and content losses
/// can backpropagate into the image.
pub trait Embedder<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    fn image_embedding_graph(&self, g: &mut Graph<T>, image: Var) -> Var;

    /// Five feature maps, layers `l = 0..4`.
    fn image_features_graph(&self, g: &mut Graph<T>, image: Var) -> Vec<Var>;

    /// Unit-norm text embedding.
    fn embed_text(&self, text: &str) -> Result<Vec<T>, VlgError>;

    /// Unit-norm image embedding.
    fn embed_image(&self, image: &ImageTensor<T>) -> Result<Vec<T>, VlgError> {
        check_image(image)?;
        let mut g = Graph::new();
        let x = g.constant(image.to_tensor());
        let e = self.image_embedding_graph(&mut g, x);
        normalize(g.value(e).data())
    }

    fn image_features(&self, image: &ImageTensor<T>) -> Result<Vec<Tensor<T>>, VlgError> {
        check_image(image)?;
        let mut g = Graph::new();
        let x = g.constant(image.to_tensor());
        let feats = self.image_features_graph(&mut g, x);
        Ok(feats.into_iter().map(|f| g.value(f).clone()).collect())
    }
}

fn check_image<T: Scalar>(image: &ImageTensor<T>) -> Result<(), VlgError> {
    if image.channels() != 1 && image.channels() != 3 {
        return Err(VlgError::Channels(image.channels()));
    }
    if image.height() < 2 || image.width() < 2 {
        return Err(VlgError::TooSmall(image.height(), image.width()));
    }
    Ok(())
}

pub fn normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>, VlgError> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(VlgError::DegenerateEmbedding);
    }
    Ok(v.iter().map(|&x| x / norm).collect())
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair<T> {
    pub positive: String,
    pub negative: String,
    /// Precomputed unit embeddings that override the text encoder.
    pub embeddings: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Default for PromptPair<T> {
    fn default() -> Self {
        Self {
            positive: DEFAULT_POSITIVE.into(),
            negative: DEFAULT_NEGATIVE.into(),
            embeddings: None,
        }
    }
}

impl<T: Scalar> PromptPair<T> {
    pub fn new(positive: impl Into<String>, negative: impl Into<String>) -> Result<Self, VlgError> {
        let (positive, negative) = (positive.into(), negative.into());
        if positive.trim().is_empty() || negative.trim().is_empty() {
            return Err(VlgError::InvalidPrompt("prompts must be non-empty".into()));
        }
        Ok(Self {
            positive,
            negative,
            embeddings: None,
        })
    }

    pub fn with_embeddings(mut self, positive: Vec<T>, negative: Vec<T>) -> Result<Self, VlgError> {
        for v in [&positive, &negative] {
            let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
            if (norm - T::one()).abs() > T::lit(1e-5) {
                return Err(VlgError::InvalidPrompt(format!("embedding norm {norm} is not 1")));
            }
        }
        self.embeddings = Some((positive, negative));
        Ok(self)
    }

    /// `(Φ_text(T_p), Φ_text(T_n))`.
    pub fn resolve(&self, embedder: &dyn Embedder<T>) -> Result<(Vec<T>, Vec<T>), VlgError> {
        match &self.embeddings {
            Some((p, n)) => Ok((p.clone(), n.clone())),
            None => Ok((embedder.embed_text(&self.positive)?, embedder.embed_text(&self.negative)?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityMode {
    /// `cos_n / max(cos_p, ε) + cos_p`, exactly as written.
    Literal,
    /// `cos_n / max(cos_p, ε) + (1 − cos_p)`, rewarding alignment with `T_p`.
    #[default]
    Corrected,
}

impl fmt::Display for SimilarityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityMode::Literal => "literal",
            SimilarityMode::Corrected => "corrected",
        })
    }
}

impl FromStr for SimilarityMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "literal" => Ok(Self::Literal),
            "corrected" => Ok(Self::Corrected),
            other => Err(format!("unknown similarity mode {other:?}")),
        }
    }
}

/// One level's term from `(cos_p, cos_n)`.
pub fn similarity_term<T: Scalar>(cos_p: T, cos_n: T, mode: SimilarityMode) -> T {
    let ratio = cos_n / cos_p.max(T::lit(COSINE_FLOOR));
    match mode {
        SimilarityMode::Literal => ratio + cos_p,
        SimilarityMode::Corrected => ratio + (T::one() - cos_p),
    }
}

/// Two-way softmax probability of the negative prompt.
pub fn negative_probability<T: Scalar>(cos_p: T, cos_n: T) -> T {
    let (ep, en) = (cos_p.exp(), cos_n.exp());
    en / (ep + en)
}

fn cosines<T: Scalar>(image: &ImageTensor<T>, p: &[T], n: &[T], embedder: &dyn Embedder<T>) -> Result<(T, T), VlgError> {
    let e = embedder.embed_image(image)?;
    Ok((cosine(&e, p), cosine(&e, n)))
}

/// Sum over levels of [`similarity_term`]; inputs are image-range
/// approximations (see [`rescale_approximation`]).
pub fn similarity_loss_1<T: Scalar>(
    approximations: &[ImageTensor<T>],
    prompts: &PromptPair<T>,
    embedder: &dyn Embedder<T>,
    mode: SimilarityMode,
) -> Result<T, VlgError> {
    if approximations.is_empty() {
        return Err(VlgError::EmptyList);
    }
    let (p, n) = prompts.resolve(embedder)?;
    let mut total = T::zero();
    for a in approximations {
        let (cp, cn) = cosines(a, &p, &n, embedder)?;
        total += similarity_term(cp, cn, mode);
    }
    Ok(total)
}

pub fn similarity_loss_2<T: Scalar>(
    enhanced: &ImageTensor<T>,
    prompts: &PromptPair<T>,
    embedder: &dyn Embedder<T>,
) -> Result<T, VlgError> {
    let (p, n) = prompts.resolve(embedder)?;
    let (cp, cn) = cosines(enhanced, &p, &n, embedder)?;
    Ok(negative_probability(cp, cn))
}

pub fn vlg_loss<T: Scalar>(
    approximations: &[ImageTensor<T>],
    enhanced: &ImageTensor<T>,
    prompts: &PromptPair<T>,
    embedder: &dyn Embedder<T>,
    mode: SimilarityMode,
) -> Result<T, VlgError> {
    Ok(similarity_loss_1(approximations, prompts, embedder, mode)? + similarity_loss_2(enhanced, prompts, embedder)?)
}

/// `clamp(a · 2^{−k}, 0, 1)`: brings a level-`k` approximation to image range.
pub fn rescale_approximation<T: Scalar>(a: &ImageTensor<T>, k: usize) -> ImageTensor<T> {
    let s = T::lit(0.5f64.powi(k as i32));
    a.map(|v| (v * s).max(T::zero()).min(T::one()))
}

/// Number of guidance stages in use: 0 disables guidance, 1 keeps only the
/// final-image term, 2 adds the coarsest-level term, 3 adds every level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuidanceStages(pub u8);

impl Default for GuidanceStages {
    fn default() -> Self {
        Self(3)
    }
}

impl GuidanceStages {
    /// Levels `k` (1-based) whose ratio term is included, for a `K`-level pyramid.
    pub fn levels(&self, k_max: usize) -> Vec<usize> {
        match self.0 {
            0 | 1 => Vec::new(),
            2 => vec![k_max],
            _ => (1..=k_max).collect(),
        }
    }

    pub fn uses_final(&self) -> bool {
        self.0 >= 1
    }
}

/// Batched cosine of `[n, D, 1, 1]` embeddings against a fixed unit vector,
/// as `[n, 1, 1, 1]`.
pub fn cosine_graph<T: Scalar>(g: &mut Graph<T>, embedding: Var, unit: &[T]) -> Var {
    let d = unit.len();
    let u = g.constant(Tensor::from_vec([1, d, 1, 1], unit.to_vec()).expect("embedding width"));
    let prod = g.mul(embedding, u);
    let dot = g.sum_channels(prod);
    let sq = g.square(embedding);
    let n2 = g.sum_channels(sq);
    let n2 = g.affine(n2, T::one(), T::lit(1e-12));
    let norm = g.sqrt(n2);
    g.div(dot, norm)
}

/// Guidance loss recorded in `g`, averaged over the batch. `approximations[k-1]`
/// holds the image-range `Â^k`.
pub fn vlg_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    embedder: &dyn Embedder<T>,
    text: &(Vec<T>, Vec<T>),
    approximations: &[Var],
    enhanced: Var,
    mode: SimilarityMode,
    stages: GuidanceStages,
) -> Option<Var> {
    let mut terms = Vec::new();
    for k in stages.levels(approximations.len()) {
        let e = embedder.image_embedding_graph(g, approximations[k - 1]);
        let cp = cosine_graph(g, e, &text.0);
        let cn = cosine_graph(g, e, &text.1);
        let denom = g.clamp_min(cp, T::lit(COSINE_FLOOR));
        let ratio = g.div(cn, denom);
        let tail = match mode {
            SimilarityMode::Literal => cp,
            SimilarityMode::Corrected => g.affine(cp, -T::one(), T::one()),
        };
        let term = g.add(ratio, tail);
        terms.push(g.mean(term));
    }
    if stages.uses_final() {
        let e = embedder.image_embedding_graph(g, enhanced);
        let cp = cosine_graph(g, e, &text.0);
        let cn = cosine_graph(g, e, &text.1);
        let ep = g.exp(cp);
        let en = g.exp(cn);
        let total = g.add(ep, en);
        let prob = g.div(en, total);
        terms.push(g.mean(prob));
    }
    let mut iter = terms.into_iter();
    let first = iter.next()?;
    Some(iter.fold(first, |acc, t| g.add(acc, t)))
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const STUB_DIM: usize = 7;
const STUB_BIAS: f64 = 0.25;
const POSITIVE_ANCHOR: [f64; STUB_DIM] = [1.0, 1.0, 0.5, 0.0, 0.0, 0.0, 0.0];
const NEGATIVE_ANCHOR: [f64; STUB_DIM] = [0.0, 0.0, 0.3, 0.0, 0.0, 0.0, 1.0];
const POSITIVE_WORDS: [&str; 3] = ["well-lit", "bright", "high-contrast"];
const NEGATIVE_WORDS: [&str; 3] = ["dark", "underexposed", "noisy"];

/// Deterministic hand-crafted embedder. The image embedding is
/// `[mean luminance, contrast, gradient energy, R−lum, G−lum, B−lum, 0.25]`
/// with `contrast = √(var + 1e-6)` and gradient energy the mean squared
/// forward difference along both axes. Text maps keywords to a bright,
/// contrasty anchor or a dark, flat anchor and normalizes their sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubEmbedder;

impl StubEmbedder {
    fn luminance<T: Scalar>(g: &mut Graph<T>, image: Var) -> Var {
        let c = g.shape(image)[1];
        let weights: Vec<T> = if c == 3 {
            LUMA.iter().map(|&w| T::lit(w)).collect()
        } else {
            vec![T::one() / T::from_usize(c).unwrap(); c]
        };
        let w = g.constant(Tensor::from_vec([1, c, 1, 1], weights).unwrap());
        g.conv2d(image, w, None, ConvSpec::same(1))
    }

    fn diff_energy<T: Scalar>(g: &mut Graph<T>, lum: Var, kernel: [f64; 4]) -> Var {
        let k = g.constant(Tensor::from_vec([1, 1, 2, 2], kernel.map(T::lit).to_vec()).unwrap());
        let spec = ConvSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        };
        let d = g.conv2d(lum, k, None, spec);
        let sq = g.square(d);
        g.mean_spatial(sq)
    }
}

impl<T: Scalar> Embedder<T> for StubEmbedder {
    fn dim(&self) -> usize {
        STUB_DIM
    }

    fn image_embedding_graph(&self, g: &mut Graph<T>, image: Var) -> Var {
        let [n, c, _, _] = g.shape(image);
        let lum = Self::luminance(g, image);
        let mean = g.mean_spatial(lum);
        let centered = g.sub(lum, mean);
        let sq = g.square(centered);
        let var = g.mean_spatial(sq);
        let var = g.affine(var, T::one(), T::lit(1e-6));
        let contrast = g.sqrt(var);
        let dx = Self::diff_energy(g, lum, [-1.0, 1.0, 0.0, 0.0]);
        let dy = Self::diff_energy(g, lum, [-1.0, 0.0, 1.0, 0.0]);
        let grad = g.add(dx, dy);
        let chroma = if c == 3 {
            let means = g.mean_spatial(image);
            g.sub(means, mean)
        } else {
            g.constant(Tensor::zeros([n, 3, 1, 1]))
        };
        let bias = g.constant(Tensor::full([n, 1, 1, 1], T::lit(STUB_BIAS)));
        g.concat(&[mean, contrast, grad, chroma, bias])
    }

    fn image_features_graph(&self, g: &mut Graph<T>, image: Var) -> Vec<Var> {
        let mut feats = vec![image];
        let mut x = image;
        for _ in 0..3 {
            x = g.avg_pool2(x);
            feats.push(x);
        }
        feats.push(self.image_embedding_graph(g, image));
        feats
    }

    fn embed_text(&self, text: &str) -> Result<Vec<T>, VlgError> {
        let lower = text.to_lowercase();
        let mut acc = [0.0; STUB_DIM];
        let mut matched = false;
        for word in lower.split(|c: char| !(c.is_alphanumeric() || c == '-')) {
            let anchor = if POSITIVE_WORDS.contains(&word) {
                &POSITIVE_ANCHOR
            } else if NEGATIVE_WORDS.contains(&word) {
                &NEGATIVE_ANCHOR
            } else {
                continue;
            };
            matched = true;
            let norm = anchor.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (a, v) in acc.iter_mut().zip(anchor) {
                *a += v / norm;
            }
        }
        if !matched {
            return Err(VlgError::UnknownText(text.to_string()));
        }
        normalize(&acc.map(T::lit))
    }
}

const EMBEDDER_MAGIC: &[u8; 8] = b"CFWDEMBD";
const EMBEDDER_VERSION: u32 = 1;
const ENCODER_STAGES: usize = 4;

/// Convolutional image encoder plus a fixed table of text embeddings, loaded
/// from a weights file.
///
/// Encoder: four stages `enc{i}` (3×3 conv, stride 2, SiLU), then global
/// average pooling and a linear `proj` to `D`. Feature maps are the input and
/// the four stage outputs.
///
/// File layout (little-endian): `"CFWDEMBD"`, `u32` version (1), `u8` dtype
/// tag (4 or 8), a parameter section, `u32` text count, and per text a `u32`
/// length + UTF-8 bytes followed by `D` scalars.
#[derive(Debug, Clone)]
pub struct PretrainedEmbedder<T> {
    store: ParamStore<T>,
    texts: Vec<(String, Vec<T>)>,
    dim: usize,
}

impl<T: Scalar> PretrainedEmbedder<T> {
    /// Random encoder weights; used to produce demo weight files and in tests.
    pub fn random(seed: u64, input_channels: usize, width: usize, dim: usize, texts: &[&str]) -> Self {
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new(format!("embedder/1 channels={input_channels} width={width} dim={dim}"));
        let mut cin = input_channels;
        for i in 0..ENCODER_STAGES {
            init.conv(&mut store, &format!("enc{i}"), cin, width, 3, 1);
            cin = width;
        }
        init.linear(&mut store, "proj", width, dim);
        let mut rng_init = Initializer::new(seed.wrapping_add(1));
        let mut table = ParamStore::<T>::new("texts");
        let texts = texts
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                rng_init.linear(&mut table, &format!("t{i}"), dim, 1);
                let raw = table.get(&format!("t{i}.w")).unwrap().data().to_vec();
                (t.to_string(), normalize(&raw).expect("random text vector"))
            })
            .collect();
        Self { store, texts, dim }
    }

    fn encode(&self, g: &mut Graph<T>, p: &nn::Bound<'_, T>, image: Var) -> Vec<Var> {
        let mut feats = vec![image];
        let mut x = image;
        for i in 0..ENCODER_STAGES {
            x = nn::conv(g, p, &format!("enc{i}"), x, ConvSpec::same(3).with_stride(2));
            x = g.silu(x);
            feats.push(x);
        }
        feats
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = EMBEDDER_MAGIC.to_vec();
        put_u32(&mut out, EMBEDDER_VERSION);
        out.push(T::TAG);
        put_store(&mut out, &self.store);
        put_u32(&mut out, self.texts.len() as u32);
        for (text, v) in &self.texts {
            put_str(&mut out, text);
            for &x in v {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), VlgError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, VlgError> {
        if !path.is_file() {
            return Err(VlgError::MissingWeights(path.display().to_string()));
        }
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|reason| VlgError::CorruptWeights {
            path: path.display().to_string(),
            reason,
        })
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader::new(bytes);
        if r.bytes(8)? != EMBEDDER_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != EMBEDDER_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let tag = r.u8()?;
        if tag != T::TAG {
            return Err(format!("dtype tag {tag}, expected {}", T::TAG));
        }
        let store: ParamStore<T> = r.store()?;
        let proj = store.get("proj.w").ok_or("missing proj.w")?;
        let dim = proj.shape()[0];
        let mut cin = None;
        for i in 0..ENCODER_STAGES {
            let w = store.get(&format!("enc{i}.w")).ok_or(format!("missing enc{i}.w"))?;
            let [cout, ci, kh, kw] = w.shape();
            if (kh, kw) != (3, 3) || cin.is_some_and(|c| c != ci) {
                return Err(format!("enc{i}.w has shape {:?}", w.shape()));
            }
            cin = Some(cout);
        }
        if proj.shape()[1] != cin.unwrap() {
            return Err("proj.w width does not match the encoder".into());
        }
        let count = r.u32()? as usize;
        let mut texts = Vec::with_capacity(count);
        for _ in 0..count {
            let text = r.string()?;
            let raw = r.bytes(dim * T::TAG as usize)?;
            let v: Vec<T> = raw.chunks_exact(T::TAG as usize).map(T::read_le).collect();
            texts.push((text, normalize(&v).map_err(|e| e.to_string())?));
        }
        if r.remaining() != 0 {
            return Err("trailing bytes".into());
        }
        Ok(Self { store, texts, dim })
    }
}

impl<T: Scalar> Embedder<T> for PretrainedEmbedder<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn image_embedding_graph(&self, g: &mut Graph<T>, image: Var) -> Var {
        let p = self.store.bind(g, false);
        let feats = self.encode(g, &p, image);
        let pooled = g.mean_spatial(*feats.last().unwrap());
        nn::linear(g, &p, "proj", pooled)
    }

    fn image_features_graph(&self, g: &mut Graph<T>, image: Var) -> Vec<Var> {
        let p = self.store.bind(g, false);
        self.encode(g, &p, image)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<T>, VlgError> {
        self.texts
            .iter()
            .find(|(t, _)| t == text)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| VlgError::UnknownText(text.to_string()))
    }
}
