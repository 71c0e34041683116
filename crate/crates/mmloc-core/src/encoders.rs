//! Toy trainable encoders: conv backbones for images and sketches, an MLP
//! over mean token embeddings for glosses, the nonlinear attention heads
//! (`psi_*`) and the scoring heads (`phi_*`) that produce query and proposal
//! vectors.
//!
//! All encoders are deterministic functions of (parameters, input). The
//! backbones are four conv layers, the first three with stride 2, so the
//! total stride is 8 and a 128x128 image maps to a 16x16xd feature grid.

use ndarray::prelude::*;

use crate::autodiff::{Graph, NodeId};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use rand_chacha::ChaCha8Rng;

/// RGB raster, `(h, w, 3)` u8, as produced by the scene generator or PNG IO.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbRaster {
    pub pixels: Array3<u8>,
}

impl RgbRaster {
    pub fn new(pixels: Array3<u8>) -> Self {
        Self { pixels }
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    /// Channel-first f64 tensor in [0,1].
    pub fn to_tensor(&self) -> Array3<f64> {
        let (h, w, _) = self.pixels.dim();
        Array3::from_shape_fn((3, h, w), |(c, y, x)| self.pixels[(y, x, c)] as f64 / 255.0)
    }
}

/// Grayscale sketch raster with values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct SketchRaster {
    pub pixels: Array2<f64>,
}

impl SketchRaster {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "sketch pixel values must lie in [0,1]".into(),
            ));
        }
        Ok(Self { pixels })
    }

    pub fn size(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn to_tensor(&self) -> Array3<f64> {
        let (h, w) = self.pixels.dim();
        let mut t = Array3::zeros((1, h, w));
        t.index_axis_mut(Axis(0), 0).assign(&self.pixels);
        t
    }
}

/// Dense activation grid produced by an encoder; channel-first `(d, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    /// Image pixels per feature cell.
    pub stride: u32,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, stride: u32) -> Result<Self> {
        let (d, h, w) = data.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::shape("FeatureMap", "nonempty (d,h,w)", format!("{:?}", (d, h, w))));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("feature-map stride must be positive".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature map contains non-finite values".into()));
        }
        Ok(Self { data, stride })
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn depth(&self) -> usize {
        self.data.dim().0
    }

    /// Value at spatial location `(x, y)` in channel `c`.
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(c, y, x)]
    }

    /// The depth-d local vector at `(x, y)`.
    pub fn local_vector(&self, x: usize, y: usize) -> Array1<f64> {
        self.data.slice(s![.., y, x]).to_owned()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Sketch,
    Gloss,
    Class,
}

/// Length-d query or proposal feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryVector {
    pub data: Array1<f64>,
    pub modality: Modality,
}

impl QueryVector {
    pub fn new(data: Array1<f64>, modality: Modality) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("query vector contains non-finite values".into()));
        }
        Ok(Self { data, modality })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Tokenized gloss (or category-name) text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlossTokens {
    pub tokens: Vec<usize>,
    pub category: usize,
}

impl GlossTokens {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::EmptyTokens);
        }
        for &t in &self.tokens {
            if t >= vocab_size {
                return Err(Error::UnknownToken { id: t, vocab: vocab_size });
            }
        }
        Ok(())
    }
}

fn conv_block_names(prefix: &str) -> [(String, String); 4] {
    [1, 2, 3, 4].map(|i| (format!("{prefix}.c{i}.w"), format!("{prefix}.c{i}.b")))
}

/// Registers every encoder parameter (backbones, text MLP, psi and phi heads).
pub fn init_params(params: &mut ParamSet, cfg: &ModelConfig, vocab_size: usize, rng: &mut ChaCha8Rng) {
    let mut init_backbone = |params: &mut ParamSet, prefix: &str, in_ch: usize, hidden: [usize; 3]| {
        let chans = [in_ch, hidden[0], hidden[1], hidden[2], cfg.d];
        for (i, (wname, bname)) in conv_block_names(prefix).iter().enumerate() {
            let (ci, co) = (chans[i], chans[i + 1]);
            params.init_uniform(wname, &[co, ci, 3, 3], ci * 9, rng);
            params.init_zeros(bname, &[co]);
        }
    };
    init_backbone(params, "enc_i", 3, cfg.image_channels);
    init_backbone(params, "enc_s", 1, cfg.sketch_channels);

    params.init_uniform("embed.table", &[vocab_size, cfg.d], cfg.d, rng);
    for layer in ["enc_t.l1", "enc_t.l2"] {
        params.init_uniform(&format!("{layer}.w"), &[cfg.d, cfg.d], cfg.d, rng);
        params.init_zeros(&format!("{layer}.b"), &[cfg.d]);
    }

    for psi in ["psi_i", "psi_s"] {
        params.init_uniform(&format!("{psi}.w"), &[cfg.d, cfg.d, 1, 1], cfg.d, rng);
        params.init_zeros(&format!("{psi}.b"), &[cfg.d]);
    }
    params.init_uniform("psi_t.w", &[cfg.d, cfg.d], cfg.d, rng);
    params.init_zeros("psi_t.b", &[cfg.d]);

    for phi in ["phi_i", "phi_s"] {
        params.init_uniform(&format!("{phi}.c1.w"), &[cfg.roi_mid_channels, cfg.d, 3, 3], cfg.d * 9, rng);
        params.init_zeros(&format!("{phi}.c1.b"), &[cfg.roi_mid_channels]);
        params.init_uniform(&format!("{phi}.c2.w"), &[cfg.d, cfg.roi_mid_channels, 1, 1], cfg.roi_mid_channels, rng);
        params.init_zeros(&format!("{phi}.c2.b"), &[cfg.d]);
    }
    for layer in ["phi_t.l1", "phi_t.l2"] {
        params.init_uniform(&format!("{layer}.w"), &[cfg.d, cfg.d], cfg.d, rng);
        params.init_zeros(&format!("{layer}.b"), &[cfg.d]);
    }
}

/// Parameters trained only in stage 2 (the attention path).
pub fn is_attention_param(name: &str) -> bool {
    name.starts_with("psi_") || name.starts_with("att.")
}

// ---- graph builders ----

/// Four-layer conv backbone; `x` is a `(C,H,W)` node. ReLU after the three
/// stride-2 blocks, linear final layer.
pub fn backbone_node(g: &mut Graph, params: &ParamSet, prefix: &str, x: NodeId) -> NodeId {
    let mut h = x;
    for (i, (wname, bname)) in conv_block_names(prefix).iter().enumerate() {
        let w = g.param(wname, params.get(wname).clone());
        let b = g.param(bname, params.get(bname).clone());
        let stride = if i < 3 { 2 } else { 1 };
        h = g.conv2d(h, w, Some(b), stride, 1);
        if i < 3 {
            h = g.relu(h);
        }
    }
    h
}

/// 1x1 conv + ReLU head over a feature map (`psi_i` / `psi_s`).
pub fn psi_map_node(g: &mut Graph, params: &ParamSet, prefix: &str, fm: NodeId) -> NodeId {
    let w = g.param(&format!("{prefix}.w"), params.get(&format!("{prefix}.w")).clone());
    let b = g.param(&format!("{prefix}.b"), params.get(&format!("{prefix}.b")).clone());
    let h = g.conv2d(fm, w, Some(b), 1, 0);
    g.relu(h)
}

/// Dense + ReLU head over a vector (`psi_t`).
pub fn psi_vec_node(g: &mut Graph, params: &ParamSet, v: NodeId) -> NodeId {
    let w = g.param("psi_t.w", params.get("psi_t.w").clone());
    let b = g.param("psi_t.b", params.get("psi_t.b").clone());
    let h = g.matvec(w, v);
    let h = g.add(h, b);
    g.relu(h)
}

/// Mean token embedding followed by the one-hidden-layer text MLP.
pub fn encode_text_node(g: &mut Graph, params: &ParamSet, tokens: &[usize]) -> NodeId {
    let table = g.param("embed.table", params.get("embed.table").clone());
    let mean = g.embed_mean(table, tokens.to_vec());
    dense_node(g, params, "enc_t.l1", mean, true)
        .pipe(|h| dense_node(g, params, "enc_t.l2", h, false))
}

/// `phi_t` scoring head: one hidden layer, linear output.
pub fn phi_text_node(g: &mut Graph, params: &ParamSet, v: NodeId) -> NodeId {
    let h = dense_node(g, params, "phi_t.l1", v, true);
    dense_node(g, params, "phi_t.l2", h, false)
}

/// `phi_i` / `phi_s` scoring head: 3x3 valid conv, ReLU, 1x1 conv, mean pool.
pub fn phi_map_node(g: &mut Graph, params: &ParamSet, prefix: &str, fm: NodeId) -> NodeId {
    let w1 = g.param(&format!("{prefix}.c1.w"), params.get(&format!("{prefix}.c1.w")).clone());
    let b1 = g.param(&format!("{prefix}.c1.b"), params.get(&format!("{prefix}.c1.b")).clone());
    let h = g.conv2d(fm, w1, Some(b1), 1, 0);
    let h = g.relu(h);
    let w2 = g.param(&format!("{prefix}.c2.w"), params.get(&format!("{prefix}.c2.w")).clone());
    let b2 = g.param(&format!("{prefix}.c2.b"), params.get(&format!("{prefix}.c2.b")).clone());
    let h = g.conv2d(h, w2, Some(b2), 1, 0);
    g.global_mean_pool(h)
}

fn dense_node(g: &mut Graph, params: &ParamSet, layer: &str, x: NodeId, relu: bool) -> NodeId {
    let w = g.param(&format!("{layer}.w"), params.get(&format!("{layer}.w")).clone());
    let b = g.param(&format!("{layer}.b"), params.get(&format!("{layer}.b")).clone());
    let h = g.matvec(w, x);
    let h = g.add(h, b);
    if relu {
        g.relu(h)
    } else {
        h
    }
}

trait Pipe: Sized {
    fn pipe<T>(self, f: impl FnOnce(Self) -> T) -> T {
        f(self)
    }
}
impl Pipe for NodeId {}

// ---- library wrappers over the graph builders ----

fn node_to_feature_map(g: &Graph, id: NodeId, stride: u32) -> Result<FeatureMap> {
    let v = g
        .value(id)
        .view()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::shape("feature map", "(d,h,w)", format!("{:?}", g.shape(id))))?
        .to_owned();
    FeatureMap::new(v, stride)
}

fn node_to_query_vector(g: &Graph, id: NodeId, modality: Modality) -> Result<QueryVector> {
    let v = g
        .value(id)
        .view()
        .into_dimensionality::<Ix1>()
        .map_err(|_| Error::shape("query vector", "(d)", format!("{:?}", g.shape(id))))?
        .to_owned();
    QueryVector::new(v, modality)
}

/// `phi_I`: image backbone.
pub fn encode_image(params: &ParamSet, cfg: &ModelConfig, image: &RgbRaster) -> Result<FeatureMap> {
    if image.height() % cfg.stride != 0 || image.width() % cfg.stride != 0 {
        return Err(Error::shape(
            "encode_image",
            format!("dimensions divisible by {}", cfg.stride),
            format!("{}x{}", image.width(), image.height()),
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(image.to_tensor().into_dyn());
    let fm = backbone_node(&mut g, params, "enc_i", x);
    node_to_feature_map(&g, fm, cfg.stride as u32)
}

/// `phi_S`: sketch backbone.
pub fn encode_sketch(params: &ParamSet, cfg: &ModelConfig, sketch: &SketchRaster) -> Result<FeatureMap> {
    if sketch.size() % cfg.stride != 0 {
        return Err(Error::shape(
            "encode_sketch",
            format!("dimensions divisible by {}", cfg.stride),
            format!("{}", sketch.size()),
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(sketch.to_tensor().into_dyn());
    let fm = backbone_node(&mut g, params, "enc_s", x);
    node_to_feature_map(&g, fm, cfg.stride as u32)
}

/// `phi_T`: mean token embedding through the text MLP.
pub fn encode_text(params: &ParamSet, cfg: &ModelConfig, tokens: &GlossTokens) -> Result<QueryVector> {
    let vocab = params.get("embed.table").shape()[0];
    tokens.validate(vocab)?;
    let _ = cfg;
    let mut g = Graph::new();
    let v = encode_text_node(&mut g, params, &tokens.tokens);
    node_to_query_vector(&g, v, Modality::Gloss)
}

/// Which `psi` head to apply in [`psi_transform_map`] / [`psi_transform_vec`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsiHead {
    Image,
    Sketch,
    Text,
}

/// Nonlinear transform of a feature map (`psi_I` or `psi_S`).
pub fn psi_transform_map(params: &ParamSet, head: PsiHead, fm: &FeatureMap) -> Result<FeatureMap> {
    let prefix = match head {
        PsiHead::Image => "psi_i",
        PsiHead::Sketch => "psi_s",
        PsiHead::Text => {
            return Err(Error::InvalidArgument(
                "psi_T applies to query vectors, not feature maps".into(),
            ))
        }
    };
    let expected = params.get(&format!("{prefix}.w")).shape()[1];
    if fm.depth() != expected {
        return Err(Error::shape("psi_transform", format!("depth {expected}"), format!("depth {}", fm.depth())));
    }
    let mut g = Graph::new();
    let x = g.constant(fm.data.clone().into_dyn());
    let out = psi_map_node(&mut g, params, prefix, x);
    node_to_feature_map(&g, out, fm.stride)
}

/// Nonlinear transform of a text query vector (`psi_T`).
pub fn psi_transform_vec(params: &ParamSet, head: PsiHead, v: &QueryVector) -> Result<QueryVector> {
    if head != PsiHead::Text {
        return Err(Error::InvalidArgument(
            "psi_I / psi_S apply to feature maps, not vectors".into(),
        ));
    }
    let expected = params.get("psi_t.w").shape()[1];
    if v.len() != expected {
        return Err(Error::shape("psi_transform", format!("length {expected}"), format!("length {}", v.len())));
    }
    let mut g = Graph::new();
    let x = g.constant(v.data.clone().into_dyn());
    let out = psi_vec_node(&mut g, params, x);
    node_to_query_vector(&g, out, v.modality)
}

/// `phi'_I`: proposal head over a pooled RoI patch.
pub fn proposal_head(params: &ParamSet, cfg: &ModelConfig, patch: &FeatureMap) -> Result<QueryVector> {
    if patch.depth() != cfg.d || patch.height() != cfg.roi_size || patch.width() != cfg.roi_size {
        return Err(Error::shape(
            "proposal_head",
            format!("({}, {}, {})", cfg.d, cfg.roi_size, cfg.roi_size),
            format!("({}, {}, {})", patch.depth(), patch.height(), patch.width()),
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(patch.data.clone().into_dyn());
    let out = phi_map_node(&mut g, params, "phi_i", x);
    node_to_query_vector(&g, out, Modality::Sketch).map(|mut q| {
        q.modality = Modality::Sketch; // proposal vectors carry no modality; tag unused
        q
    })
}

/// `phi'_S` and `phi'_T`: the query heads used to build the scoring basis.
pub fn query_heads(
    params: &ParamSet,
    cfg: &ModelConfig,
    sketch_fm: &FeatureMap,
    gloss_vec: &QueryVector,
) -> Result<(QueryVector, QueryVector)> {
    if sketch_fm.depth() != cfg.d {
        return Err(Error::shape("query_heads", format!("depth {}", cfg.d), format!("depth {}", sketch_fm.depth())));
    }
    if gloss_vec.len() != cfg.d {
        return Err(Error::shape("query_heads", format!("length {}", cfg.d), format!("length {}", gloss_vec.len())));
    }
    let mut g = Graph::new();
    let s = g.constant(sketch_fm.data.clone().into_dyn());
    let t = g.constant(gloss_vec.data.clone().into_dyn());
    let s_out = phi_map_node(&mut g, params, "phi_s", s);
    let t_out = phi_text_node(&mut g, params, t);
    Ok((
        node_to_query_vector(&g, s_out, Modality::Sketch)?,
        node_to_query_vector(&g, t_out, Modality::Gloss)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn setup(cfg: &ModelConfig, vocab: usize, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_params(&mut params, cfg, vocab, &mut rng);
        params
    }

    fn zero_biases(params: &mut ParamSet) {
        let names: Vec<String> = params
            .names()
            .filter(|n| n.ends_with(".b"))
            .map(str::to_string)
            .collect();
        for n in names {
            let shape = params.get(&n).shape().to_vec();
            params.set(&n, ArrayD::zeros(ndarray::IxDyn(&shape)));
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, size: usize) -> RgbRaster {
        RgbRaster::new(Array3::from_shape_fn((size, size, 3), |_| rng.gen::<u8>()))
    }

    #[test]
    fn encode_image_shape_contract() {
        let cfg = ModelConfig::default();
        let params = setup(&cfg, 32, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 128);
        let fm = encode_image(&params, &cfg, &img).unwrap();
        assert_eq!((fm.width(), fm.height(), fm.depth()), (16, 16, 64));
        assert_eq!(fm.stride, 8);
    }

    #[test]
    fn encode_image_rejects_indivisible_size() {
        let cfg = ModelConfig::default();
        let params = setup(&cfg, 32, 0);
        let img = RgbRaster::new(Array3::zeros((100, 100, 3)));
        assert!(matches!(
            encode_image(&params, &cfg, &img),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_map() {
        let cfg = ModelConfig::default();
        let mut params = setup(&cfg, 32, 0);
        zero_biases(&mut params);
        let img = RgbRaster::new(Array3::zeros((128, 128, 3)));
        let fm = encode_image(&params, &cfg, &img).unwrap();
        assert!(fm.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_image_is_deterministic_and_finite() {
        let cfg = ModelConfig::default();
        let params = setup(&cfg, 32, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 128);
        let a = encode_image(&params, &cfg, &img).unwrap();
        let b = encode_image(&params, &cfg, &img).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_sketch_shape_and_sensitivity() {
        let cfg = ModelConfig::default();
        let params = setup(&cfg, 32, 0);
        let blank = SketchRaster::new(Array2::zeros((64, 64))).unwrap();
        let mut drawn_px = Array2::zeros((64, 64));
        drawn_px.slice_mut(s![20..44, 30]).fill(1.0);
        let drawn = SketchRaster::new(drawn_px).unwrap();
        let fb = encode_sketch(&params, &cfg, &blank).unwrap();
        let fd = encode_sketch(&params, &cfg, &drawn).unwrap();
        assert_eq!((fb.width(), fb.height(), fb.depth()), (8, 8, 64));
        assert_ne!(fb, fd);
        // identical rasters encode identically
        assert_eq!(fd, encode_sketch(&params, &cfg, &drawn).unwrap());
    }

    #[test]
    fn encode_text_mean_and_permutation_invariance() {
        let cfg = ModelConfig { d: 4, ..ModelConfig::tiny() };
        let mut params = setup(&cfg, 6, 0);
        // identity MLP: l1 = l2 = I with zero bias; nonnegative embeddings
        // pass through the hidden ReLU unchanged.
        let eye = Array2::<f64>::eye(4).into_dyn();
        params.set("enc_t.l1.w", eye.clone());
        params.set("enc_t.l2.w", eye);
        zero_biases(&mut params);
        let mut emb = Array2::<f64>::zeros((6, 4));
        for v in 0..6 {
            for j in 0..4 {
                emb[(v, j)] = (v * 4 + j) as f64 * 0.1;
            }
        }
        params.set("embed.table", emb.clone().into_dyn());

        // single token, identity MLP -> its embedding
        let one = GlossTokens { tokens: vec![2], category: 0 };
        let v = encode_text(&params, &cfg, &one).unwrap();
        for j in 0..4 {
            assert!((v.data[j] - emb[(2, j)]).abs() < 1e-12);
        }
        // two tokens -> MLP of the mean
        let two = GlossTokens { tokens: vec![1, 4], category: 0 };
        let v2 = encode_text(&params, &cfg, &two).unwrap();
        for j in 0..4 {
            let want = (emb[(1, j)] + emb[(4, j)]) / 2.0;
            assert!((v2.data[j] - want).abs() < 1e-12);
        }
        // bag semantics
        let swapped = GlossTokens { tokens: vec![4, 1], category: 0 };
        assert_eq!(v2, encode_text(&params, &cfg, &swapped).unwrap());
    }

    #[test]
    fn encode_text_error_paths() {
        let cfg = ModelConfig::tiny();
        let params = setup(&cfg, 6, 0);
        let empty = GlossTokens { tokens: vec![], category: 0 };
        assert!(matches!(encode_text(&params, &cfg, &empty), Err(Error::EmptyTokens)));
        let bad = GlossTokens { tokens: vec![99], category: 0 };
        assert!(matches!(encode_text(&params, &cfg, &bad), Err(Error::UnknownToken { .. })));
    }

    #[test]
    fn psi_transform_preserves_shape_and_zeroes() {
        let cfg = ModelConfig::default();
        let mut params = setup(&cfg, 32, 0);
        zero_biases(&mut params);
        let fm = FeatureMap::new(Array3::zeros((64, 5, 7)), 8).unwrap();
        let out = psi_transform_map(&params, PsiHead::Image, &fm).unwrap();
        assert_eq!((out.depth(), out.height(), out.width()), (64, 5, 7));
        assert!(out.data.iter().all(|&v| v == 0.0));
        // depth mismatch
        let bad = FeatureMap::new(Array3::zeros((32, 5, 7)), 8).unwrap();
        assert!(psi_transform_map(&params, PsiHead::Image, &bad).is_err());
    }

    #[test]
    fn proposal_head_constant_patch_identity_conv() {
        // identity convs: c1 center tap (valid padding), c2 1x1 identity.
        let cfg = ModelConfig { roi_mid_channels: 4, ..ModelConfig::tiny() };
        let mut params = setup(&cfg, 6, 0);
        zero_biases(&mut params);
        let mut c1 = Array4::<f64>::zeros((4, 4, 3, 3));
        let mut c2 = Array4::<f64>::zeros((4, 4, 1, 1));
        for c in 0..4 {
            c1[(c, c, 1, 1)] = 1.0;
            c2[(c, c, 0, 0)] = 1.0;
        }
        params.set("phi_i.c1.w", c1.into_dyn());
        params.set("phi_i.c2.w", c2.into_dyn());
        let patch = FeatureMap::new(Array3::from_elem((4, 5, 5), 0.7), 8).unwrap();
        let v = proposal_head(&params, &cfg, &patch).unwrap();
        for j in 0..4 {
            assert!((v.data[j] - 0.7).abs() < 1e-12);
        }
        // zero patch, zero bias -> zero vector
        let zero = FeatureMap::new(Array3::zeros((4, 5, 5)), 8).unwrap();
        let vz = proposal_head(&params, &cfg, &zero).unwrap();
        assert!(vz.data.iter().all(|&v| v == 0.0));
        // wrong patch shape is an error
        let wrong = FeatureMap::new(Array3::zeros((4, 4, 5)), 8).unwrap();
        assert!(proposal_head(&params, &cfg, &wrong).is_err());
    }

    #[test]
    fn proposal_head_matches_direct_conv_mean_pool() {
        let cfg = ModelConfig::tiny();
        let params = setup(&cfg, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let patch = FeatureMap::new(
            Array3::from_shape_fn((cfg.d, 5, 5), |_| rng.gen_range(-1.0..1.0)),
            8,
        )
        .unwrap();
        let got = proposal_head(&params, &cfg, &patch).unwrap();

        // hand-rolled conv(valid) + relu + 1x1 conv + mean pool
        let w1 = params.get("phi_i.c1.w").view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let b1 = params.get("phi_i.c1.b").view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let w2 = params.get("phi_i.c2.w").view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let b2 = params.get("phi_i.c2.b").view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mid = cfg.roi_mid_channels;
        let mut h1 = Array3::<f64>::zeros((mid, 3, 3));
        for o in 0..mid {
            for y in 0..3 {
                for x in 0..3 {
                    let mut acc = b1[o];
                    for c in 0..cfg.d {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                acc += patch.data[(c, y + ky, x + kx)] * w1[(o, c, ky, kx)];
                            }
                        }
                    }
                    h1[(o, y, x)] = acc.max(0.0);
                }
            }
        }
        for j in 0..cfg.d {
            let mut total = 0.0;
            for y in 0..3 {
                for x in 0..3 {
                    let mut acc = b2[j];
                    for c in 0..mid {
                        acc += h1[(c, y, x)] * w2[(j, c, 0, 0)];
                    }
                    total += acc;
                }
            }
            let want = total / 9.0;
            assert!((got.data[j] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn query_heads_shapes_and_determinism() {
        let cfg = ModelConfig::default();
        let mut params = setup(&cfg, 32, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fm = FeatureMap::new(
            Array3::from_shape_fn((64, 8, 8), |_| rng.gen_range(-1.0..1.0)),
            8,
        )
        .unwrap();
        let gv = QueryVector::new(
            Array1::from_shape_fn(64, |_| rng.gen_range(-1.0..1.0)),
            Modality::Gloss,
        )
        .unwrap();
        let (s1, t1) = query_heads(&params, &cfg, &fm, &gv).unwrap();
        let (s2, t2) = query_heads(&params, &cfg, &fm, &gv).unwrap();
        assert_eq!(s1.len(), 64);
        assert_eq!(t1.len(), 64);
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);

        // zero inputs with zero biases give zero vectors
        zero_biases(&mut params);
        let zfm = FeatureMap::new(Array3::zeros((64, 8, 8)), 8).unwrap();
        let zv = QueryVector::new(Array1::zeros(64), Modality::Gloss).unwrap();
        let (zs, zt) = query_heads(&params, &cfg, &zfm, &zv).unwrap();
        assert!(zs.data.iter().all(|&v| v == 0.0));
        assert!(zt.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backbone_parameter_gradients_match_finite_differences() {
        // run the tiny image backbone end to end and check dLoss/dW for the
        // first and last conv against central differences
        let cfg = ModelConfig::tiny();
        let params = setup(&cfg, 6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Array3::from_shape_fn((3, cfg.image_size, cfg.image_size), |_| {
            rng.gen_range(0.0..1.0)
        });
        let loss_fn = |p: &ParamSet| -> f64 {
            let mut g = Graph::new();
            let x = g.constant(img.clone().into_dyn());
            let fm = backbone_node(&mut g, p, "enc_i", x);
            let s = g.sum(fm);
            g.scalar_value(s)
        };
        let analytic = {
            let mut g = Graph::new();
            let x = g.constant(img.clone().into_dyn());
            let fm = backbone_node(&mut g, &params, "enc_i", x);
            let s = g.sum(fm);
            g.backward(s)
        };
        for name in ["enc_i.c1.w", "enc_i.c4.w", "enc_i.c2.b"] {
            let grad = &analytic[name];
            let base = params.get(name).to_owned();
            let h = 1e-4;
            // probe a few entries
            for idx in [0usize, grad.len() / 2, grad.len() - 1] {
                let mut pp = params.clone();
                let mut plus = base.clone();
                plus.as_slice_mut().unwrap()[idx] += h;
                pp.set(name, plus);
                let fp = loss_fn(&pp);
                let mut pm = params.clone();
                let mut minus = base.clone();
                minus.as_slice_mut().unwrap()[idx] -= h;
                pm.set(name, minus);
                let fmi = loss_fn(&pm);
                let fd = (fp - fmi) / (2.0 * h);
                let a = grad.as_slice().unwrap()[idx];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (a - fd).abs() / denom < 1e-4,
                    "{name}[{idx}]: analytic {a}, fd {fd}"
                );
            }
        }
    }
}
