//! The two networks: a residual CNN that regresses the 239 morphable
//! coefficients from the LR image, and the spatial attention SR network
//! (SFT conditioning, residual channel attention chain, progressive
//! transposed-conv upscaling).
//!
//! Every parameter lives in a [`VarStore`] under a hierarchical name and is
//! initialized from an RNG seeded by `(seed, name)`, so two models built with
//! the same seed share identical values for every parameter they have in
//! common regardless of which extra parameters exist (this is what makes the
//! prior/no-prior ablation a paired comparison).

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::morphable::{FaceCoefficients, COEFF_DIM};
use crate::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Channels of the conditioning stack: rendered RGB + four coefficient maps.
pub const PRIOR_CHANNELS: usize = 7;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct VarStore<T: Real = f32> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> VarStore<T> {
    pub fn new() -> Self {
        VarStore { names: Vec::new(), index: HashMap::new(), tensors: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) {
        match self.index.get(name) {
            Some(&i) => self.tensors[i] = tensor,
            None => {
                self.index.insert(name.to_string(), self.tensors.len());
                self.names.push(name.to_string());
                self.tensors.push(tensor);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters under a name prefix.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }
}

/// Graph leaf ids for every parameter of a store, bound once per step.
pub struct BoundParams {
    ids: HashMap<String, VarId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> VarId {
        *self.ids.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

/// Inserts every parameter as a graph leaf.
pub fn bind_params<T: Real>(g: &mut Graph<T>, store: &VarStore<T>) -> BoundParams {
    let mut ids = HashMap::new();
    for (name, t) in store.iter() {
        ids.insert(name.to_string(), g.leaf(t));
    }
    BoundParams { ids }
}

/// Copies gradients from the graph back into the store tensors.
pub fn collect_grads<T: Real>(g: &Graph<T>, bound: &BoundParams, store: &mut VarStore<T>) {
    for (name, t) in store.iter_mut() {
        if let Some(&id) = bound.ids.get(name) {
            if let Some(grad) = g.grad(id) {
                t.grad = Some(grad.to_vec());
            }
        }
    }
}

fn fnv1a(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(seed, name))
}

/// Kaiming-uniform tensor: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
fn kaiming<T: Real>(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let mut rng = param_rng(seed, name);
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("consistent shape").param()
}

#[derive(Clone, Debug)]
struct Conv2dLayer {
    weight: String,
    bias: String,
    stride: usize,
    pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    fn init<T: Real>(
        store: &mut VarStore<T>,
        seed: u64,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, kaiming(seed, &weight, &[out_ch, in_ch, k, k], in_ch * k * k));
        store.insert(&bias, Tensor::zeros(&[out_ch]).param());
        Conv2dLayer { weight, bias, stride, pad }
    }

    /// All-zero weights with a constant bias; the SFT heads use this so the
    /// modulation starts as the identity.
    fn init_const<T: Real>(
        store: &mut VarStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        bias_value: f64,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, Tensor::zeros(&[out_ch, in_ch, k, k]).param());
        store.insert(&bias, Tensor::full(&[out_ch], T::from_f64(bias_value)).param());
        Conv2dLayer { weight, bias, stride: 1, pad: k / 2 }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: VarId) -> Result<VarId> {
        g.conv2d(x, p.id(&self.weight), p.id(&self.bias), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
struct ConvT2dLayer {
    weight: String,
    bias: String,
    stride: usize,
    pad: usize,
}

impl ConvT2dLayer {
    #[allow(clippy::too_many_arguments)]
    fn init<T: Real>(
        store: &mut VarStore<T>,
        seed: u64,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, kaiming(seed, &weight, &[in_ch, out_ch, k, k], in_ch * k * k));
        store.insert(&bias, Tensor::zeros(&[out_ch]).param());
        ConvT2dLayer { weight, bias, stride, pad }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: VarId) -> Result<VarId> {
        g.conv_transpose2d(x, p.id(&self.weight), p.id(&self.bias), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
struct LinearLayer {
    weight: String,
    bias: String,
}

impl LinearLayer {
    fn init<T: Real>(store: &mut VarStore<T>, seed: u64, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, kaiming(seed, &weight, &[out_dim, in_dim], in_dim));
        store.insert(&bias, Tensor::zeros(&[out_dim]).param());
        LinearLayer { weight, bias }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: VarId) -> Result<VarId> {
        g.linear(x, p.id(&self.weight), p.id(&self.bias))
    }
}

/// Configuration of the coefficient regressor (a compact residual CNN; the
/// output contract is fixed at 239 coefficients).
#[derive(Clone, Debug)]
pub struct RegressorConfig {
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig { stage_widths: vec![16, 32, 64, 128], blocks_per_stage: 2 }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    proj: Option<Conv2dLayer>,
}

impl ResBlock {
    fn init<T: Real>(store: &mut VarStore<T>, seed: u64, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let conv1 = Conv2dLayer::init(store, seed, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1);
        let conv2 = Conv2dLayer::init(store, seed, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1);
        let proj = if stride != 1 || in_ch != out_ch {
            Some(Conv2dLayer::init(store, seed, &format!("{name}.proj"), in_ch, out_ch, 1, stride, 0))
        } else {
            None
        };
        ResBlock { conv1, conv2, proj }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: VarId) -> Result<VarId> {
        let mut y = self.conv1.forward(g, p, x)?;
        y = g.relu(y);
        y = self.conv2.forward(g, p, y)?;
        let shortcut = match &self.proj {
            Some(proj) => proj.forward(g, p, x)?,
            None => x,
        };
        let sum = g.add(y, shortcut)?;
        Ok(g.relu(sum))
    }
}

/// Residual CNN regressing the coefficient vector from a LR image.
///
/// The raw head output is offset by a fixed canonical vector (band-0 light,
/// canonical depth) so that a freshly initialized network already renders a
/// lit, centered face.
#[derive(Clone, Debug)]
pub struct Regressor {
    pub config: RegressorConfig,
    stem: Conv2dLayer,
    stages: Vec<Vec<ResBlock>>,
    head: LinearLayer,
}

impl Regressor {
    pub const PREFIX: &'static str = "regressor.";

    pub fn init<T: Real>(store: &mut VarStore<T>, config: &RegressorConfig, seed: u64) -> Self {
        let w0 = config.stage_widths[0];
        let stem = Conv2dLayer::init(store, seed, "regressor.stem", 3, w0, 3, 1, 1);
        let mut stages = Vec::new();
        let mut in_ch = w0;
        for (si, &width) in config.stage_widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..config.blocks_per_stage {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let name = format!("regressor.stage{si}.block{bi}");
                blocks.push(ResBlock::init(store, seed, &name, in_ch, width, stride));
                in_ch = width;
            }
            stages.push(blocks);
        }
        let head = LinearLayer::init(store, seed, "regressor.head", in_ch, COEFF_DIM);
        Regressor { config: config.clone(), stem, stages, head }
    }

    /// `[N,3,s,s] -> [N,239]` with `s` in `{16, 32}`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, lr_image: VarId) -> Result<VarId> {
        let shape = g.shape(lr_image).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] || !matches!(shape[2], 16 | 32) {
            return Err(Error::dim(
                "regressor",
                format!("expected [N,3,16,16] or [N,3,32,32] input, got {shape:?}"),
            ));
        }
        let n = shape[0];
        let mut x = self.stem.forward(g, p, lr_image)?;
        x = g.relu(x);
        for blocks in &self.stages {
            for b in blocks {
                x = b.forward(g, p, x)?;
            }
        }
        let last_width = *self.config.stage_widths.last().expect("non-empty");
        let pooled = g.global_avg_pool(x)?;
        let flat = g.reshape(pooled, &[n, last_width])?;
        let raw = self.head.forward(g, p, flat)?;
        let offset_row = FaceCoefficients::<T>::canonical().to_flat();
        let mut tiled = Vec::with_capacity(n * COEFF_DIM);
        for _ in 0..n {
            tiled.extend_from_slice(&offset_row);
        }
        let offset = g.constant(&Tensor::new(&[n, COEFF_DIM], tiled)?);
        g.add(raw, offset)
    }

    /// Convenience single-image regression to a coefficient struct.
    pub fn regress<T: Real>(&self, store: &VarStore<T>, lr_image: &Tensor<T>) -> Result<FaceCoefficients<T>> {
        let mut g = Graph::new();
        let bound = bind_params(&mut g, store);
        let mut img = lr_image.clone();
        if img.shape.len() == 3 {
            img.shape.insert(0, 1);
        }
        let x = g.constant(&img);
        let out = self.forward(&mut g, &bound, x)?;
        FaceCoefficients::from_flat(g.value(out))
    }
}

/// Structure of the SR branch.
#[derive(Clone, Debug)]
pub struct SamConfig {
    pub channels: usize,
    pub rcab_count: usize,
    pub reduction: usize,
    pub scale: usize,
    pub kernel: usize,
    /// Drop the rendered-prior path entirely (ablation).
    pub no_prior: bool,
    /// Drop the spatial attention machinery: priors (if any) are concatenated
    /// to the input and the trunk is a plain residual chain (ablation).
    pub no_sam: bool,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig { channels: 64, rcab_count: 8, reduction: 16, scale: 8, kernel: 3, no_prior: false, no_sam: false }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 4 | 8) {
            return Err(Error::Config(format!("scale must be 4 or 8, got {}", self.scale)));
        }
        if self.channels == 0 || self.channels % self.reduction != 0 {
            return Err(Error::Config(format!(
                "reduction {} must divide channels {}",
                self.reduction, self.channels
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        Ok(())
    }

    pub fn upscale_stages(&self) -> usize {
        (self.scale as f64).log2() as usize
    }

    pub fn lr_size(&self) -> usize {
        128 / self.scale
    }
}

/// Spatial feature transform: a shared conv trunk over the prior stack and
/// two heads emitting the modulation pair. Heads start at the identity
/// (mu = 1, nu = 0).
#[derive(Clone, Debug)]
struct SftLayer {
    trunk: Conv2dLayer,
    mu_head: Conv2dLayer,
    nu_head: Conv2dLayer,
}

impl SftLayer {
    fn init<T: Real>(store: &mut VarStore<T>, seed: u64, name: &str, prior_ch: usize, channels: usize, k: usize) -> Self {
        let trunk = Conv2dLayer::init(store, seed, &format!("{name}.trunk"), prior_ch, channels, k, 1, k / 2);
        let mu_head = Conv2dLayer::init_const(store, &format!("{name}.mu"), channels, channels, k, 1.0);
        let nu_head = Conv2dLayer::init_const(store, &format!("{name}.nu"), channels, channels, k, 0.0);
        SftLayer { trunk, mu_head, nu_head }
    }

    /// `(mu, nu) = Theta(prior)`.
    fn condition<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, prior: VarId) -> Result<(VarId, VarId)> {
        let trunk = self.trunk.forward(g, p, prior)?;
        let trunk = g.relu(trunk);
        let mu = self.mu_head.forward(g, p, trunk)?;
        let nu = self.nu_head.forward(g, p, trunk)?;
        Ok((mu, nu))
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, features: VarId, prior: VarId) -> Result<VarId> {
        let fs = g.shape(features).to_vec();
        let ps = g.shape(prior).to_vec();
        if fs[2] != ps[2] || fs[3] != ps[3] {
            return Err(Error::dim(
                "sft",
                format!("prior spatial {}x{} does not match features {}x{}", ps[2], ps[3], fs[2], fs[3]),
            ));
        }
        let (mu, nu) = self.condition(g, p, prior)?;
        sft_modulate(g, features, mu, nu)
    }
}

/// `SFT(F | mu, nu) = mu * F + nu`, elementwise.
pub fn sft_modulate<T: Real>(g: &mut Graph<T>, features: VarId, mu: VarId, nu: VarId) -> Result<VarId> {
    if g.shape(features) != g.shape(mu) || g.shape(features) != g.shape(nu) {
        return Err(Error::dim(
            "sft_modulate",
            format!(
                "shapes must match: F {:?}, mu {:?}, nu {:?}",
                g.shape(features),
                g.shape(mu),
                g.shape(nu)
            ),
        ));
    }
    let scaled = g.mul(mu, features)?;
    g.add(scaled, nu)
}

/// Residual channel attention block: two stacked convs, a squeeze-excite
/// gate per channel, residual add. With `attention` off it degrades to a
/// plain residual block.
#[derive(Clone, Debug)]
struct Rcab {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    ca_down: Option<LinearLayer>,
    ca_up: Option<LinearLayer>,
    channels: usize,
}

impl Rcab {
    fn init<T: Real>(
        store: &mut VarStore<T>,
        seed: u64,
        name: &str,
        channels: usize,
        reduction: usize,
        attention: bool,
        k: usize,
    ) -> Self {
        let conv1 = Conv2dLayer::init(store, seed, &format!("{name}.conv1"), channels, channels, k, 1, k / 2);
        let conv2 = Conv2dLayer::init(store, seed, &format!("{name}.conv2"), channels, channels, k, 1, k / 2);
        let (ca_down, ca_up) = if attention {
            (
                Some(LinearLayer::init(store, seed, &format!("{name}.ca_down"), channels, channels / reduction)),
                Some(LinearLayer::init(store, seed, &format!("{name}.ca_up"), channels / reduction, channels)),
            )
        } else {
            (None, None)
        };
        Rcab { conv1, conv2, ca_down, ca_up, channels }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, f_prev: VarId) -> Result<VarId> {
        let n = g.shape(f_prev)[0];
        let mut x = self.conv1.forward(g, p, f_prev)?;
        x = g.relu(x);
        x = self.conv2.forward(g, p, x)?;
        let gated = match (&self.ca_down, &self.ca_up) {
            (Some(down), Some(up)) => {
                let pooled = g.global_avg_pool(x)?;
                let flat = g.reshape(pooled, &[n, self.channels])?;
                let mut gate = down.forward(g, p, flat)?;
                gate = g.relu(gate);
                gate = up.forward(g, p, gate)?;
                gate = g.sigmoid(gate);
                let gate4 = g.reshape(gate, &[n, self.channels, 1, 1])?;
                g.mul(x, gate4)?
            }
            _ => x,
        };
        g.add(f_prev, gated)
    }
}

/// Progressive upscaler: `log2(scale)` stride-2 transposed convolutions with
/// halving channel widths, then a 3-channel output conv.
#[derive(Clone, Debug)]
struct Upscale {
    stages: Vec<ConvT2dLayer>,
    tail: Conv2dLayer,
}

impl Upscale {
    fn widths(channels: usize, stages: usize) -> Vec<usize> {
        let mut w = vec![channels];
        for _ in 0..stages {
            let next = (w.last().unwrap() / 2).max(8);
            w.push(next);
        }
        w
    }

    fn init<T: Real>(store: &mut VarStore<T>, seed: u64, name: &str, channels: usize, n_stages: usize, k: usize) -> Self {
        let widths = Self::widths(channels, n_stages);
        let mut stages = Vec::new();
        for i in 0..n_stages {
            stages.push(ConvT2dLayer::init(store, seed, &format!("{name}.up{i}"), widths[i], widths[i + 1], 4, 2, 1));
        }
        let tail = Conv2dLayer::init(store, seed, &format!("{name}.tail"), widths[n_stages], 3, k, 1, k / 2);
        Upscale { stages, tail }
    }

    fn stage_count(&self) -> usize {
        self.stages.len()
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, mut x: VarId) -> Result<VarId> {
        for s in &self.stages {
            x = s.forward(g, p, x)?;
            x = g.relu(x);
        }
        self.tail.forward(g, p, x)
    }
}

/// The SR branch. With `no_prior` the SFT layers (and with them every
/// `sam.sft*` parameter) do not exist; with `no_sam` priors are concatenated
/// at the input and the trunk loses its attention machinery.
#[derive(Clone, Debug)]
pub struct SamNetwork {
    pub config: SamConfig,
    head: Conv2dLayer,
    sft_in: Option<SftLayer>,
    sft_out: Option<SftLayer>,
    rcabs: Vec<Rcab>,
    upscale: Upscale,
}

impl SamNetwork {
    pub const PREFIX: &'static str = "sam.";
    pub const SFT_PREFIX: &'static str = "sam.sft";

    pub fn init<T: Real>(store: &mut VarStore<T>, config: &SamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let c = config.channels;
        let use_sft = !config.no_prior && !config.no_sam;
        let concat_prior = !config.no_prior && config.no_sam;
        let in_ch = if concat_prior { 3 + PRIOR_CHANNELS } else { 3 };
        let head = Conv2dLayer::init(store, seed, "sam.head", in_ch, c, k, 1, k / 2);
        let sft_in = use_sft.then(|| SftLayer::init(store, seed, "sam.sft_in", PRIOR_CHANNELS, c, k));
        let sft_out = use_sft.then(|| SftLayer::init(store, seed, "sam.sft_out", PRIOR_CHANNELS, c, k));
        let attention = !config.no_sam;
        let rcabs = (0..config.rcab_count)
            .map(|i| Rcab::init(store, seed, &format!("sam.rcab{i}"), c, config.reduction, attention, k))
            .collect();
        let upscale = Upscale::init(store, seed, "sam.upscale", c, config.upscale_stages(), k);
        Ok(SamNetwork { config: config.clone(), head, sft_in, sft_out, rcabs, upscale })
    }

    pub fn upscale_stage_count(&self) -> usize {
        self.upscale.stage_count()
    }

    /// `[N,3,s,s]` (+ optional `[N,7,s,s]` prior) -> `[N,3,128,128]`.
    /// `clamp` applies the inference-only clamp to `[0,1]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        lr_image: VarId,
        prior: Option<VarId>,
        clamp: bool,
    ) -> Result<VarId> {
        let shape = g.shape(lr_image).to_vec();
        let s = self.config.lr_size();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::dim(
                "sam",
                format!("expected [N,3,{s},{s}] input for scale {}, got {shape:?}", self.config.scale),
            ));
        }
        if self.config.no_prior && prior.is_some() {
            return Err(Error::Config("prior supplied to a no_prior network".into()));
        }
        if !self.config.no_prior {
            let ps = prior.map(|id| g.shape(id).to_vec());
            match ps {
                Some(ps) if ps == vec![shape[0], PRIOR_CHANNELS, s, s] => {}
                other => {
                    return Err(Error::dim(
                        "sam",
                        format!("expected prior [N,{PRIOR_CHANNELS},{s},{s}], got {other:?}"),
                    ))
                }
            }
        }

        let mut x = if self.config.no_sam && !self.config.no_prior {
            let cat = g.channel_concat(lr_image, prior.expect("validated"))?;
            self.head.forward(g, p, cat)?
        } else {
            self.head.forward(g, p, lr_image)?
        };
        x = g.relu(x);
        if !self.config.no_sam {
            if let (Some(sft), Some(pr)) = (&self.sft_in, prior) {
                x = sft.forward(g, p, x, pr)?;
            }
        }
        for rcab in &self.rcabs {
            x = rcab.forward(g, p, x)?;
        }
        if !self.config.no_sam {
            if let (Some(sft), Some(pr)) = (&self.sft_out, prior) {
                x = sft.forward(g, p, x, pr)?;
            }
        }
        let mut out = self.upscale.forward(g, p, x)?;
        if clamp {
            out = g.clamp01(out);
        }
        Ok(out)
    }

    /// Exposes the first SFT condition net (for tests and diagnostics).
    pub fn condition<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, prior: VarId) -> Result<(VarId, VarId)> {
        match &self.sft_in {
            Some(sft) => sft.condition(g, p, prior),
            None => Err(Error::Config("network has no SFT layer".into())),
        }
    }

    /// Analytic parameter count of one RCAB at this configuration.
    pub fn rcab_param_count(&self) -> usize {
        let c = self.config.channels;
        let k = self.config.kernel;
        let conv = c * c * k * k + c;
        let ca = if self.config.no_sam {
            0
        } else {
            let cr = c / self.config.reduction;
            c * cr + cr + cr * c + c
        };
        2 * conv + ca
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi) as f32).collect()).unwrap()
    }

    #[test]
    fn regressor_outputs_239_with_fixed_split_and_is_deterministic() {
        let mut store = VarStore::<f32>::new();
        let reg = Regressor::init(&mut store, &RegressorConfig::default(), 1);
        let img = rand_tensor(5, &[3, 16, 16], 0.0, 1.0);
        let c1 = reg.regress(&store, &img).unwrap();
        let c2 = reg.regress(&store, &img).unwrap();
        assert_eq!(c1.to_flat().len(), COEFF_DIM);
        assert_eq!(c1.alpha.len(), 80);
        assert_eq!(c1.beta.len(), 64);
        assert_eq!(c1.delta.len(), 80);
        assert_eq!(c1.gamma.len(), 9);
        assert_eq!(c1.rho.len(), 6);
        assert_eq!(c1, c2);
        // canonical offset keeps the fresh network lit and in front of the camera
        assert!(c1.gamma[0] > 0.5, "gamma0 = {}", c1.gamma[0]);
        assert!(c1.rho[5] < -1.0, "tz = {}", c1.rho[5]);
    }

    #[test]
    fn regressor_rejects_wrong_input_size() {
        let mut store = VarStore::<f32>::new();
        let reg = Regressor::init(&mut store, &RegressorConfig::default(), 1);
        let img = rand_tensor(5, &[3, 20, 20], 0.0, 1.0);
        assert!(reg.regress(&store, &img).is_err());
    }

    #[test]
    fn sft_heads_start_at_identity() {
        let mut store = VarStore::<f32>::new();
        let cfg = SamConfig { channels: 16, rcab_count: 2, reduction: 4, scale: 8, ..Default::default() };
        let sam = SamNetwork::init(&mut store, &cfg, 3).unwrap();
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &store);
        let prior = g.constant(&rand_tensor(11, &[2, PRIOR_CHANNELS, 16, 16], 0.0, 1.0));
        let (mu, nu) = sam.condition(&mut g, &bound, prior).unwrap();
        assert_eq!(g.shape(mu), &[2, 16, 16, 16]);
        assert!(g.value(mu).iter().all(|&v| v == 1.0));
        assert!(g.value(nu).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sft_modulate_is_exact_elementwise_affine() {
        let mut g = Graph::<f32>::new();
        let f = g.constant(&rand_tensor(1, &[1, 2, 3, 3], -1.0, 1.0));
        let mu = g.constant(&rand_tensor(2, &[1, 2, 3, 3], -1.0, 1.0));
        let nu = g.constant(&rand_tensor(3, &[1, 2, 3, 3], -1.0, 1.0));
        let y = sft_modulate(&mut g, f, mu, nu).unwrap();
        for i in 0..18 {
            let want = g.value(mu)[i] * g.value(f)[i] + g.value(nu)[i];
            assert_eq!(g.value(y)[i], want);
        }

        // mu = 1, nu = 0 -> output == F exactly
        let one = g.constant(&Tensor::full(&[1, 2, 3, 3], 1.0));
        let zero = g.constant(&Tensor::zeros(&[1, 2, 3, 3]));
        let id = sft_modulate(&mut g, f, one, zero).unwrap();
        assert_eq!(g.value(id), g.value(f));

        // mu = 0, nu = c -> constant c
        let c = g.constant(&Tensor::full(&[1, 2, 3, 3], 0.7));
        let z = g.constant(&Tensor::zeros(&[1, 2, 3, 3]));
        let constant = sft_modulate(&mut g, f, z, c).unwrap();
        assert!(g.value(constant).iter().all(|&v| v == 0.7));

        let bad = g.constant(&Tensor::zeros(&[1, 2, 4, 4]));
        assert!(sft_modulate(&mut g, f, bad, nu).is_err());
    }

    #[test]
    fn rcab_residual_identities() {
        let x = rand_tensor(21, &[1, 8, 5, 5], -1.0, 1.0);

        // zero convs: block is exactly the identity
        let mut store = VarStore::<f32>::new();
        let rcab = Rcab::init(&mut store, 9, "t.rcab", 8, 4, true, 3);
        for name in ["t.rcab.conv1.weight", "t.rcab.conv1.bias", "t.rcab.conv2.weight", "t.rcab.conv2.bias"] {
            let t = store.get_mut(name).unwrap();
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &store);
        let xv = g.constant(&x);
        let y = rcab.forward(&mut g, &bound, xv).unwrap();
        assert_eq!(g.value(y), x.data.as_slice());

        // zero attention linears, live convs: gate = sigmoid(0) = 0.5,
        // so F_b = F_prev + 0.5 * X_b
        let mut store = VarStore::<f32>::new();
        let rcab = Rcab::init(&mut store, 9, "t.rcab", 8, 4, true, 3);
        for name in ["t.rcab.ca_down.weight", "t.rcab.ca_down.bias", "t.rcab.ca_up.weight", "t.rcab.ca_up.bias"] {
            let t = store.get_mut(name).unwrap();
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &store);
        let xv = g.constant(&x);
        let y = rcab.forward(&mut g, &bound, xv).unwrap();
        // reconstruct X_b with the same weights
        let mut g2 = Graph::new();
        let bound2 = bind_params(&mut g2, &store);
        let xv2 = g2.constant(&x);
        let mut xb = rcab.conv1.forward(&mut g2, &bound2, xv2).unwrap();
        xb = g2.relu(xb);
        xb = rcab.conv2.forward(&mut g2, &bound2, xb).unwrap();
        for i in 0..x.numel() {
            let want = x.data[i] + 0.5 * g2.value(xb)[i];
            assert!((g.value(y)[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn upscale_geometry_and_stage_counts() {
        for (scale, s, stages) in [(8usize, 16usize, 3usize), (4, 32, 2)] {
            let cfg = SamConfig { channels: 16, rcab_count: 1, reduction: 4, scale, ..Default::default() };
            let mut store = VarStore::<f32>::new();
            let sam = SamNetwork::init(&mut store, &cfg, 2).unwrap();
            assert_eq!(sam.upscale_stage_count(), stages);
            let mut g = Graph::new();
            let bound = bind_params(&mut g, &store);
            let lr = g.constant(&rand_tensor(1, &[1, 3, s, s], 0.0, 1.0));
            let prior = g.constant(&rand_tensor(2, &[1, PRIOR_CHANNELS, s, s], 0.0, 1.0));
            let out = sam.forward(&mut g, &bound, lr, Some(prior), true).unwrap();
            assert_eq!(g.shape(out), &[1, 3, 128, 128]);
            assert!(g.value(out).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn prior_network_at_init_equals_no_prior_ablation() {
        let seed = 14;
        let cfg = SamConfig { channels: 16, rcab_count: 2, reduction: 4, scale: 8, ..Default::default() };
        let mut store_full = VarStore::<f32>::new();
        let sam_full = SamNetwork::init(&mut store_full, &cfg, seed).unwrap();
        let cfg_np = SamConfig { no_prior: true, ..cfg.clone() };
        let mut store_np = VarStore::<f32>::new();
        let sam_np = SamNetwork::init(&mut store_np, &cfg_np, seed).unwrap();

        // identical non-SFT initialization
        for (name, t) in store_np.iter() {
            assert_eq!(t.data, store_full.get(name).unwrap().data, "{name} differs");
        }
        // the parameter difference is exactly the SFT set
        let missing: Vec<&String> =
            store_full.names().iter().filter(|n| store_np.get(n).is_none()).collect();
        assert!(!missing.is_empty());
        assert!(missing.iter().all(|n| n.starts_with(SamNetwork::SFT_PREFIX)), "{missing:?}");

        let lr = rand_tensor(33, &[2, 3, 16, 16], 0.0, 1.0);
        let prior = rand_tensor(34, &[2, PRIOR_CHANNELS, 16, 16], 0.0, 1.0);
        let mut g1 = Graph::new();
        let b1 = bind_params(&mut g1, &store_full);
        let lr1 = g1.constant(&lr);
        let p1 = g1.constant(&prior);
        let out_full = sam_full.forward(&mut g1, &b1, lr1, Some(p1), false).unwrap();
        let mut g2 = Graph::new();
        let b2 = bind_params(&mut g2, &store_np);
        let lr2 = g2.constant(&lr);
        let out_np = sam_np.forward(&mut g2, &b2, lr2, None, false).unwrap();
        assert_eq!(g1.value(out_full), g2.value(out_np));
    }

    #[test]
    fn rcab_count_changes_params_by_analytic_amount() {
        let seed = 4;
        let base = SamConfig { channels: 32, rcab_count: 3, reduction: 8, scale: 4, ..Default::default() };
        let mut s3 = VarStore::<f32>::new();
        let sam3 = SamNetwork::init(&mut s3, &base, seed).unwrap();
        let mut s4 = VarStore::<f32>::new();
        let _sam4 = SamNetwork::init(&mut s4, &SamConfig { rcab_count: 4, ..base.clone() }, seed).unwrap();
        let diff = s4.param_count("sam.") - s3.param_count("sam.");
        assert_eq!(diff, sam3.rcab_param_count());
    }

    #[test]
    fn seeded_init_is_independent_of_creation_order() {
        // Same parameter name + seed yields the same values regardless of
        // which other parameters exist in the store.
        let mut a = VarStore::<f32>::new();
        Conv2dLayer::init(&mut a, 7, "sam.head", 3, 8, 3, 1, 1);
        let mut b = VarStore::<f32>::new();
        Conv2dLayer::init(&mut b, 7, "other.first", 5, 5, 3, 1, 1);
        Conv2dLayer::init(&mut b, 7, "sam.head", 3, 8, 3, 1, 1);
        assert_eq!(a.get("sam.head.weight").unwrap().data, b.get("sam.head.weight").unwrap().data);
    }
}
