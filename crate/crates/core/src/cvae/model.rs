use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::body::BodyParams;
use crate::diff::{
    read_checkpoint, write_checkpoint, CheckpointEntry, Graph, Tensor, TensorRef,
};

use super::scene::SceneTensor;
use super::CvaeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    S1,
    S2,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Semantic category ids in channel order.
    pub categories: Vec<u8>,
    /// Latent width of the S1 model and the S2 local branch.
    pub latent: usize,
    /// Latent width of the S2 global branch.
    pub global_latent: usize,
    pub scene_code: usize,
    pub lift: usize,
    pub hidden: usize,
    pub res_blocks: usize,
    /// Output channels of the six stride-2 convolutions.
    pub conv_channels: Vec<usize>,
}

impl ModelConfig {
    pub fn s1(categories: Vec<u8>) -> Self {
        ModelConfig {
            arch: Arch::S1,
            categories,
            latent: 32,
            global_latent: 8,
            scene_code: 256,
            lift: 256,
            hidden: 384,
            res_blocks: 2,
            conv_channels: vec![8, 16, 24, 32, 48, 64],
        }
    }

    pub fn s2(categories: Vec<u8>) -> Self {
        ModelConfig { arch: Arch::S2, ..Self::s1(categories) }
    }

    pub fn input_channels(&self) -> usize {
        1 + self.categories.len()
    }

    fn conv_out_side(&self) -> usize {
        super::SCENE_SIZE >> self.conv_channels.len()
    }

    fn flat_dim(&self) -> usize {
        let side = self.conv_out_side();
        self.conv_channels.last().copied().unwrap_or(0) * side * side
    }
}

// ---- layers ----

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    pub input: Linear,
    pub blocks: Vec<ResBlock>,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct SceneEncoder {
    pub convs: Vec<Conv>,
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct S1Model {
    pub scene: SceneEncoder,
    pub lift: Linear,
    pub enc: Mlp,
    pub dec: Mlp,
}

#[derive(Debug, Clone)]
pub(crate) struct S2Model {
    pub scene_g: SceneEncoder,
    pub lift_g: Linear,
    pub enc_g: Mlp,
    pub dec_g: Mlp,
    pub grec_enc: Linear,
    pub scene_l: SceneEncoder,
    pub lift_l: Linear,
    pub enc_l: Mlp,
    pub dec_l: Mlp,
}

#[derive(Debug, Clone)]
pub(crate) enum ModelKind {
    S1(S1Model),
    S2(S2Model),
}

/// Scene-conditioned body generator: parameters plus architecture config.
#[derive(Debug, Clone)]
pub struct CvaeModel {
    pub config: ModelConfig,
    pub(crate) kind: ModelKind,
}

// ---- parameter traversal (ordering contract shared by Adam, binding, and
// checkpoints) ----

impl Linear {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<f64>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut Tensor<f64>)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

impl Conv {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<f64>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut Tensor<f64>)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

impl ResBlock {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<f64>)) {
        self.fc1.for_each(&format!("{prefix}.fc1"), f);
        self.fc2.for_each(&format!("{prefix}.fc2"), f);
    }

    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut Tensor<f64>)) {
        self.fc1.for_each_mut(&format!("{prefix}.fc1"), f);
        self.fc2.for_each_mut(&format!("{prefix}.fc2"), f);
    }
}

impl Mlp {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<f64>)) {
        self.input.for_each(&format!("{prefix}.in"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.for_each(&format!("{prefix}.res{i}"), f);
        }
        self.out.for_each(&format!("{prefix}.out"), f);
    }

    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut Tensor<f64>)) {
        self.input.for_each_mut(&format!("{prefix}.in"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("{prefix}.res{i}"), f);
        }
        self.out.for_each_mut(&format!("{prefix}.out"), f);
    }
}

impl SceneEncoder {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<f64>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.for_each(&format!("{prefix}.conv{i}"), f);
        }
        self.proj.for_each(&format!("{prefix}.proj"), f);
    }

    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut Tensor<f64>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.for_each_mut(&format!("{prefix}.conv{i}"), f);
        }
        self.proj.for_each_mut(&format!("{prefix}.proj"), f);
    }
}

impl CvaeModel {
    pub(crate) fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<f64>)) {
        match &self.kind {
            ModelKind::S1(m) => {
                m.scene.for_each("scene", f);
                m.lift.for_each("lift", f);
                m.enc.for_each("enc", f);
                m.dec.for_each("dec", f);
            }
            ModelKind::S2(m) => {
                m.scene_g.for_each("g.scene", f);
                m.lift_g.for_each("g.lift", f);
                m.enc_g.for_each("g.enc", f);
                m.dec_g.for_each("g.dec", f);
                m.grec_enc.for_each("grec", f);
                m.scene_l.for_each("l.scene", f);
                m.lift_l.for_each("l.lift", f);
                m.enc_l.for_each("l.enc", f);
                m.dec_l.for_each("l.dec", f);
            }
        }
    }

    pub(crate) fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut Tensor<f64>)) {
        match &mut self.kind {
            ModelKind::S1(m) => {
                m.scene.for_each_mut("scene", f);
                m.lift.for_each_mut("lift", f);
                m.enc.for_each_mut("enc", f);
                m.dec.for_each_mut("dec", f);
            }
            ModelKind::S2(m) => {
                m.scene_g.for_each_mut("g.scene", f);
                m.lift_g.for_each_mut("g.lift", f);
                m.enc_g.for_each_mut("g.enc", f);
                m.dec_g.for_each_mut("g.dec", f);
                m.grec_enc.for_each_mut("grec", f);
                m.scene_l.for_each_mut("l.scene", f);
                m.lift_l.for_each_mut("l.lift", f);
                m.enc_l.for_each_mut("l.enc", f);
                m.dec_l.for_each_mut("l.dec", f);
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(&mut |n, _| names.push(n));
        names
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        let mut out = Vec::new();
        self.for_each_mut(&mut |n, t| out.push((n, t)));
        out
    }
}

// ---- initialization ----

fn init_linear(rng: &mut ChaCha12Rng, out_dim: usize, in_dim: usize) -> Linear {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = Tensor::from_fn(&[out_dim, in_dim], |_| rng.random_range(-bound..bound));
    let b = Tensor::from_fn(&[out_dim], |_| rng.random_range(-bound..bound));
    Linear { w, b }
}

fn init_conv(rng: &mut ChaCha12Rng, f: usize, c: usize) -> Conv {
    let bound = 1.0 / ((c * 9) as f64).sqrt();
    let w = Tensor::from_fn(&[f, c, 3, 3], |_| rng.random_range(-bound..bound));
    let b = Tensor::from_fn(&[f], |_| rng.random_range(-bound..bound));
    Conv { w, b }
}

fn init_mlp(rng: &mut ChaCha12Rng, in_dim: usize, hidden: usize, out_dim: usize, blocks: usize) -> Mlp {
    Mlp {
        input: init_linear(rng, hidden, in_dim),
        blocks: (0..blocks)
            .map(|_| ResBlock {
                fc1: init_linear(rng, hidden, hidden),
                fc2: init_linear(rng, hidden, hidden),
            })
            .collect(),
        out: init_linear(rng, out_dim, hidden),
    }
}

fn init_scene_encoder(rng: &mut ChaCha12Rng, cfg: &ModelConfig) -> SceneEncoder {
    let mut convs = Vec::new();
    let mut c_in = cfg.input_channels();
    for &c_out in &cfg.conv_channels {
        convs.push(init_conv(rng, c_out, c_in));
        c_in = c_out;
    }
    SceneEncoder { convs, proj: init_linear(rng, cfg.scene_code, cfg.flat_dim()) }
}

/// Depth of the translation bias at init, so early reconstructions project
/// in front of the camera.
const INIT_DEPTH_BIAS: f64 = 2.5;

/// Fresh model with seeded uniform fan-in initialization.
pub fn new_model(config: ModelConfig, seed: u64) -> CvaeModel {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let kind = match config.arch {
        Arch::S1 => {
            let mut m = S1Model {
                scene: init_scene_encoder(&mut rng, &config),
                lift: init_linear(&mut rng, config.lift, 75),
                enc: init_mlp(
                    &mut rng,
                    config.scene_code + config.lift,
                    config.hidden,
                    2 * config.latent,
                    config.res_blocks,
                ),
                dec: init_mlp(
                    &mut rng,
                    config.latent + config.scene_code,
                    config.hidden,
                    75,
                    config.res_blocks,
                ),
            };
            m.dec.out.b.values_mut()[2] = INIT_DEPTH_BIAS;
            ModelKind::S1(m)
        }
        Arch::S2 => {
            let mut m = S2Model {
                scene_g: init_scene_encoder(&mut rng, &config),
                lift_g: init_linear(&mut rng, config.lift, 3),
                enc_g: init_mlp(
                    &mut rng,
                    config.scene_code + config.lift,
                    config.hidden,
                    2 * config.global_latent,
                    config.res_blocks,
                ),
                dec_g: init_mlp(
                    &mut rng,
                    config.global_latent + config.scene_code,
                    config.hidden,
                    3,
                    config.res_blocks,
                ),
                grec_enc: init_linear(&mut rng, config.lift, 3),
                scene_l: init_scene_encoder(&mut rng, &config),
                lift_l: init_linear(&mut rng, config.lift, 72),
                enc_l: init_mlp(
                    &mut rng,
                    config.scene_code + 2 * config.lift,
                    config.hidden,
                    2 * config.latent,
                    config.res_blocks,
                ),
                dec_l: init_mlp(
                    &mut rng,
                    config.latent + config.scene_code + config.lift,
                    config.hidden,
                    72,
                    config.res_blocks,
                ),
            };
            m.dec_g.out.b.values_mut()[2] = INIT_DEPTH_BIAS;
            ModelKind::S2(m)
        }
    };
    CvaeModel { config, kind }
}

// ---- graph binding and forward ----

struct LinearRef {
    w: TensorRef,
    b: TensorRef,
}

struct ConvRef {
    w: TensorRef,
    b: TensorRef,
}

struct ResBlockRef {
    fc1: LinearRef,
    fc2: LinearRef,
}

struct MlpRef {
    input: LinearRef,
    blocks: Vec<ResBlockRef>,
    out: LinearRef,
}

struct SceneEncoderRef {
    convs: Vec<ConvRef>,
    proj: LinearRef,
}

fn bind_tensor(g: &mut Graph<f64>, t: &Tensor<f64>, trainable: bool, order: &mut Vec<TensorRef>) -> TensorRef {
    let r = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
    order.push(r);
    r
}

fn bind_linear(g: &mut Graph<f64>, l: &Linear, tr: bool, order: &mut Vec<TensorRef>) -> LinearRef {
    LinearRef { w: bind_tensor(g, &l.w, tr, order), b: bind_tensor(g, &l.b, tr, order) }
}

fn bind_conv(g: &mut Graph<f64>, c: &Conv, tr: bool, order: &mut Vec<TensorRef>) -> ConvRef {
    ConvRef { w: bind_tensor(g, &c.w, tr, order), b: bind_tensor(g, &c.b, tr, order) }
}

fn bind_mlp(g: &mut Graph<f64>, m: &Mlp, tr: bool, order: &mut Vec<TensorRef>) -> MlpRef {
    MlpRef {
        input: bind_linear(g, &m.input, tr, order),
        blocks: m
            .blocks
            .iter()
            .map(|b| ResBlockRef {
                fc1: bind_linear(g, &b.fc1, tr, order),
                fc2: bind_linear(g, &b.fc2, tr, order),
            })
            .collect(),
        out: bind_linear(g, &m.out, tr, order),
    }
}

fn bind_scene(g: &mut Graph<f64>, s: &SceneEncoder, tr: bool, order: &mut Vec<TensorRef>) -> SceneEncoderRef {
    SceneEncoderRef {
        convs: s.convs.iter().map(|c| bind_conv(g, c, tr, order)).collect(),
        proj: bind_linear(g, &s.proj, tr, order),
    }
}

const LEAKY_SLOPE: f64 = 0.01;

fn linear_fw(g: &mut Graph<f64>, l: &LinearRef, x: TensorRef) -> Result<TensorRef, CvaeError> {
    let n = g.value(x).numel();
    let out = g.shape(l.w)[0];
    let col = g.reshape(x, &[n, 1])?;
    let y = g.matmul(l.w, col)?;
    let bcol = g.reshape(l.b, &[out, 1])?;
    let y = g.add(y, bcol)?;
    Ok(g.reshape(y, &[out])?)
}

fn mlp_fw(g: &mut Graph<f64>, m: &MlpRef, x: TensorRef) -> Result<TensorRef, CvaeError> {
    let mut h = linear_fw(g, &m.input, x)?;
    h = g.leaky_relu(h, LEAKY_SLOPE);
    for b in &m.blocks {
        let a = linear_fw(g, &b.fc1, h)?;
        let a = g.leaky_relu(a, LEAKY_SLOPE);
        let a = linear_fw(g, &b.fc2, a)?;
        h = g.add(h, a)?;
    }
    linear_fw(g, &m.out, h)
}

fn scene_fw(
    g: &mut Graph<f64>,
    enc: &SceneEncoderRef,
    scene: TensorRef,
) -> Result<TensorRef, CvaeError> {
    let shape = g.value(scene).shape().to_vec();
    let mut x = g.reshape(scene, &[1, shape[0], shape[1], shape[2]])?;
    for conv in &enc.convs {
        let y = g.conv2d(x, conv.w, 2, 1)?;
        let f = g.shape(conv.b)[0];
        let b = g.reshape(conv.b, &[1, f, 1, 1])?;
        let yshape = g.value(y).shape().to_vec();
        let bb = g.broadcast(b, &yshape)?;
        let y = g.add(y, bb)?;
        x = g.leaky_relu(y, LEAKY_SLOPE);
    }
    let n = g.value(x).numel();
    let flat = g.reshape(x, &[n])?;
    let code = linear_fw(g, &enc.proj, flat)?;
    Ok(g.leaky_relu(code, LEAKY_SLOPE))
}

fn reparameterize(
    g: &mut Graph<f64>,
    mu: TensorRef,
    log_var: TensorRef,
    eps: &[f64],
) -> Result<TensorRef, CvaeError> {
    let half_lv = g.scale(log_var, 0.5);
    let sigma = g.exp(half_lv);
    let noise = g.constant(Tensor::from_vec(eps.to_vec()));
    let scaled = g.mul(sigma, noise)?;
    Ok(g.add(mu, scaled)?)
}

/// Handles from one S1 forward pass.
pub struct S1Forward {
    pub x_rec: TensorRef,
    pub mu: TensorRef,
    pub log_var: TensorRef,
    /// Bound parameter leaves, in `param_names` order.
    pub param_refs: Vec<TensorRef>,
}

/// One-stage forward: encode scene and body, reparameterize with the given
/// noise, decode conditioned on the scene code.
pub fn s1_forward(
    g: &mut Graph<f64>,
    model: &CvaeModel,
    scene: &SceneTensor,
    x_h: TensorRef,
    eps: &[f64],
    trainable: bool,
) -> Result<S1Forward, CvaeError> {
    let ModelKind::S1(m) = &model.kind else {
        return Err(CvaeError::BadMeta("s1_forward on a non-S1 model".to_string()));
    };
    let latent = model.config.latent;
    assert_eq!(eps.len(), latent);
    let mut order = Vec::new();
    let scene_ref = bind_scene(g, &m.scene, trainable, &mut order);
    let lift_ref = bind_linear(g, &m.lift, trainable, &mut order);
    let enc_ref = bind_mlp(g, &m.enc, trainable, &mut order);
    let dec_ref = bind_mlp(g, &m.dec, trainable, &mut order);

    let scene_in = g.constant(scene.data.clone());
    let code = scene_fw(g, &scene_ref, scene_in)?;
    let lifted = linear_fw(g, &lift_ref, x_h)?;
    let lifted = g.leaky_relu(lifted, LEAKY_SLOPE);
    let joint = g.concat(&[code, lifted], 0)?;
    let head = mlp_fw(g, &enc_ref, joint)?;
    let mu = g.slice(head, 0, 0, latent)?;
    let log_var = g.slice(head, 0, latent, latent)?;
    let z = reparameterize(g, mu, log_var, eps)?;
    let dec_in = g.concat(&[z, code], 0)?;
    let x_rec = mlp_fw(g, &dec_ref, dec_in)?;
    Ok(S1Forward { x_rec, mu, log_var, param_refs: order })
}

/// Handles from one S2 forward pass.
pub struct S2Forward {
    pub x_rec: TensorRef,
    pub x_g_rec: TensorRef,
    pub x_l_rec: TensorRef,
    pub mu_g: TensorRef,
    pub log_var_g: TensorRef,
    pub mu_l: TensorRef,
    pub log_var_l: TensorRef,
    pub param_refs: Vec<TensorRef>,
}

/// Two-stage forward: the global branch reconstructs the translation, its
/// output is re-encoded and conditions the local branch.
pub fn s2_forward(
    g: &mut Graph<f64>,
    model: &CvaeModel,
    scene: &SceneTensor,
    x_h: TensorRef,
    eps_g: &[f64],
    eps_l: &[f64],
    trainable: bool,
) -> Result<S2Forward, CvaeError> {
    let ModelKind::S2(m) = &model.kind else {
        return Err(CvaeError::BadMeta("s2_forward on a non-S2 model".to_string()));
    };
    let (gl, ll) = (model.config.global_latent, model.config.latent);
    assert_eq!(eps_g.len(), gl);
    assert_eq!(eps_l.len(), ll);
    let mut order = Vec::new();
    let scene_g = bind_scene(g, &m.scene_g, trainable, &mut order);
    let lift_g = bind_linear(g, &m.lift_g, trainable, &mut order);
    let enc_g = bind_mlp(g, &m.enc_g, trainable, &mut order);
    let dec_g = bind_mlp(g, &m.dec_g, trainable, &mut order);
    let grec_enc = bind_linear(g, &m.grec_enc, trainable, &mut order);
    let scene_l = bind_scene(g, &m.scene_l, trainable, &mut order);
    let lift_l = bind_linear(g, &m.lift_l, trainable, &mut order);
    let enc_l = bind_mlp(g, &m.enc_l, trainable, &mut order);
    let dec_l = bind_mlp(g, &m.dec_l, trainable, &mut order);

    let x = g.reshape(x_h, &[75])?;
    let x_g = g.slice(x, 0, 0, 3)?;
    let x_l = g.slice(x, 0, 3, 72)?;
    let scene_in = g.constant(scene.data.clone());

    let code_g = scene_fw(g, &scene_g, scene_in)?;
    let lifted_g = linear_fw(g, &lift_g, x_g)?;
    let lifted_g = g.leaky_relu(lifted_g, LEAKY_SLOPE);
    let joint_g = g.concat(&[code_g, lifted_g], 0)?;
    let head_g = mlp_fw(g, &enc_g, joint_g)?;
    let mu_g = g.slice(head_g, 0, 0, gl)?;
    let log_var_g = g.slice(head_g, 0, gl, gl)?;
    let z_g = reparameterize(g, mu_g, log_var_g, eps_g)?;
    let dec_g_in = g.concat(&[z_g, code_g], 0)?;
    let x_g_rec = mlp_fw(g, &dec_g, dec_g_in)?;

    let g_code = linear_fw(g, &grec_enc, x_g_rec)?;
    let g_code = g.leaky_relu(g_code, LEAKY_SLOPE);

    let code_l = scene_fw(g, &scene_l, scene_in)?;
    let lifted_l = linear_fw(g, &lift_l, x_l)?;
    let lifted_l = g.leaky_relu(lifted_l, LEAKY_SLOPE);
    let joint_l = g.concat(&[code_l, lifted_l, g_code], 0)?;
    let head_l = mlp_fw(g, &enc_l, joint_l)?;
    let mu_l = g.slice(head_l, 0, 0, ll)?;
    let log_var_l = g.slice(head_l, 0, ll, ll)?;
    let z_l = reparameterize(g, mu_l, log_var_l, eps_l)?;
    let dec_l_in = g.concat(&[z_l, code_l, g_code], 0)?;
    let x_l_rec = mlp_fw(g, &dec_l, dec_l_in)?;

    let x_rec = g.concat(&[x_g_rec, x_l_rec], 0)?;
    Ok(S2Forward { x_rec, x_g_rec, x_l_rec, mu_g, log_var_g, mu_l, log_var_l, param_refs: order })
}

// ---- sampling ----

/// Scene codes used by the decoder(s): one code for S1, (global, local)
/// codes for S2.
pub fn scene_code_values(model: &CvaeModel, scene: &SceneTensor) -> Result<Vec<Vec<f64>>, CvaeError> {
    let mut g: Graph<f64> = Graph::new();
    let mut order = Vec::new();
    let scene_in = g.constant(scene.data.clone());
    match &model.kind {
        ModelKind::S1(m) => {
            let enc = bind_scene(&mut g, &m.scene, false, &mut order);
            let code = scene_fw(&mut g, &enc, scene_in)?;
            Ok(vec![g.value(code).values().to_vec()])
        }
        ModelKind::S2(m) => {
            let enc_g = bind_scene(&mut g, &m.scene_g, false, &mut order);
            let enc_l = bind_scene(&mut g, &m.scene_l, false, &mut order);
            let code_g = scene_fw(&mut g, &enc_g, scene_in)?;
            let code_l = scene_fw(&mut g, &enc_l, scene_in)?;
            Ok(vec![
                g.value(code_g).values().to_vec(),
                g.value(code_l).values().to_vec(),
            ])
        }
    }
}

/// Decode one latent with a precomputed S1 scene code.
pub fn decode_s1(model: &CvaeModel, scene_code: &[f64], z: &[f64]) -> Result<Vec<f64>, CvaeError> {
    let ModelKind::S1(m) = &model.kind else {
        return Err(CvaeError::BadMeta("decode_s1 on a non-S1 model".to_string()));
    };
    let mut g: Graph<f64> = Graph::new();
    let mut order = Vec::new();
    let dec = bind_mlp(&mut g, &m.dec, false, &mut order);
    let zt = g.constant(Tensor::from_vec(z.to_vec()));
    let ct = g.constant(Tensor::from_vec(scene_code.to_vec()));
    let dec_in = g.concat(&[zt, ct], 0)?;
    let out = mlp_fw(&mut g, &dec, dec_in)?;
    Ok(g.value(out).values().to_vec())
}

/// Decode one (global, local) latent pair with precomputed S2 scene codes.
pub fn decode_s2(
    model: &CvaeModel,
    codes: &[Vec<f64>],
    z_g: &[f64],
    z_l: &[f64],
) -> Result<Vec<f64>, CvaeError> {
    let ModelKind::S2(m) = &model.kind else {
        return Err(CvaeError::BadMeta("decode_s2 on a non-S2 model".to_string()));
    };
    let mut g: Graph<f64> = Graph::new();
    let mut order = Vec::new();
    let dec_g = bind_mlp(&mut g, &m.dec_g, false, &mut order);
    let grec_enc = bind_linear(&mut g, &m.grec_enc, false, &mut order);
    let dec_l = bind_mlp(&mut g, &m.dec_l, false, &mut order);

    let zg = g.constant(Tensor::from_vec(z_g.to_vec()));
    let cg = g.constant(Tensor::from_vec(codes[0].clone()));
    let dec_g_in = g.concat(&[zg, cg], 0)?;
    let x_g_rec = mlp_fw(&mut g, &dec_g, dec_g_in)?;
    let g_code = linear_fw(&mut g, &grec_enc, x_g_rec)?;
    let g_code = g.leaky_relu(g_code, LEAKY_SLOPE);

    let zl = g.constant(Tensor::from_vec(z_l.to_vec()));
    let cl = g.constant(Tensor::from_vec(codes[1].clone()));
    let dec_l_in = g.concat(&[zl, cl, g_code], 0)?;
    let x_l_rec = mlp_fw(&mut g, &dec_l, dec_l_in)?;
    let full = g.concat(&[x_g_rec, x_l_rec], 0)?;
    Ok(g.value(full).values().to_vec())
}

/// Draw `n` bodies for a scene: z ~ N(0, I) per sample, decoded conditioned
/// on the scene code. Deterministic for a given seed.
pub fn sample(
    model: &CvaeModel,
    scene: &SceneTensor,
    n: usize,
    seed: u64,
) -> Result<Vec<BodyParams<f64>>, CvaeError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let codes = scene_code_values(model, scene)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut normal = |k: usize| -> Vec<f64> {
        (0..k)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect()
    };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let flat = match model.config.arch {
            Arch::S1 => {
                let z = normal(model.config.latent);
                decode_s1(model, &codes[0], &z)?
            }
            Arch::S2 => {
                let zg = normal(model.config.global_latent);
                let zl = normal(model.config.latent);
                decode_s2(model, &codes, &zg, &zl)?
            }
        };
        out.push(BodyParams::from_flat(&flat)?);
    }
    Ok(out)
}

/// Decode a line sweep through latent space: the selected dims vary linearly
/// over `range`, all others stay zero. For S2 the sweep drives the local
/// latent while the global latent stays at zero.
pub fn latent_traverse(
    model: &CvaeModel,
    scene: &SceneTensor,
    dims: &[usize],
    range: (f64, f64),
    steps: usize,
) -> Result<Vec<BodyParams<f64>>, CvaeError> {
    let latent = model.config.latent;
    if let Some(&bad) = dims.iter().find(|&&d| d >= latent) {
        return Err(CvaeError::BadMeta(format!("latent dim {bad} out of range 0..{latent}")));
    }
    let codes = scene_code_values(model, scene)?;
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = if steps <= 1 {
            0.5
        } else {
            i as f64 / (steps - 1) as f64
        };
        let v = range.0 + (range.1 - range.0) * t;
        let mut z = vec![0.0; latent];
        for &d in dims {
            z[d] = v;
        }
        let flat = match model.config.arch {
            Arch::S1 => decode_s1(model, &codes[0], &z)?,
            Arch::S2 => {
                let zg = vec![0.0; model.config.global_latent];
                decode_s2(model, &codes, &zg, &z)?
            }
        };
        out.push(BodyParams::from_flat(&flat)?);
    }
    Ok(out)
}

// ---- persistence ----

const META_KEY: &str = "__meta";
const META_FORMAT: f64 = 1.0;

/// Save to the tensor checkpoint format, with the architecture encoded in a
/// `__meta` entry.
pub fn save_model(path: &Path, model: &CvaeModel) -> Result<(), CvaeError> {
    let cfg = &model.config;
    let mut meta = vec![
        META_FORMAT,
        match cfg.arch {
            Arch::S1 => 0.0,
            Arch::S2 => 1.0,
        },
        cfg.latent as f64,
        cfg.global_latent as f64,
        cfg.scene_code as f64,
        cfg.lift as f64,
        cfg.hidden as f64,
        cfg.res_blocks as f64,
        cfg.conv_channels.len() as f64,
    ];
    meta.extend(cfg.conv_channels.iter().map(|&c| c as f64));
    meta.push(cfg.categories.len() as f64);
    meta.extend(cfg.categories.iter().map(|&c| c as f64));

    let mut entries = vec![CheckpointEntry::f64(META_KEY, &[meta.len()], meta)];
    model.for_each(&mut |name, t| {
        entries.push(CheckpointEntry::f64(name, t.shape(), t.values().to_vec()));
    });
    write_checkpoint(path, &entries)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CvaeModel, CvaeError> {
    let entries = read_checkpoint(path)?;
    let meta = entries
        .iter()
        .find(|e| e.name == META_KEY)
        .ok_or_else(|| CvaeError::MissingParam(META_KEY.to_string()))?;
    let m = meta.data.to_f64();
    if m.first() != Some(&META_FORMAT) {
        return Err(CvaeError::BadMeta(format!("unknown meta format {:?}", m.first())));
    }
    let mut i = 1usize;
    let next = |i: &mut usize| -> Result<f64, CvaeError> {
        let v = m.get(*i).copied().ok_or_else(|| CvaeError::BadMeta("meta too short".to_string()))?;
        *i += 1;
        Ok(v)
    };
    let arch = match next(&mut i)? as u32 {
        0 => Arch::S1,
        1 => Arch::S2,
        other => return Err(CvaeError::BadMeta(format!("unknown arch code {other}"))),
    };
    let latent = next(&mut i)? as usize;
    let global_latent = next(&mut i)? as usize;
    let scene_code = next(&mut i)? as usize;
    let lift = next(&mut i)? as usize;
    let hidden = next(&mut i)? as usize;
    let res_blocks = next(&mut i)? as usize;
    let n_conv = next(&mut i)? as usize;
    let mut conv_channels = Vec::with_capacity(n_conv);
    for _ in 0..n_conv {
        conv_channels.push(next(&mut i)? as usize);
    }
    let n_cat = next(&mut i)? as usize;
    let mut categories = Vec::with_capacity(n_cat);
    for _ in 0..n_cat {
        categories.push(next(&mut i)? as u8);
    }
    let config = ModelConfig {
        arch,
        categories,
        latent,
        global_latent,
        scene_code,
        lift,
        hidden,
        res_blocks,
        conv_channels,
    };
    let mut model = new_model(config, 0);
    let mut err: Option<CvaeError> = None;
    model.for_each_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match entries.iter().find(|e| e.name == name) {
            None => err = Some(CvaeError::MissingParam(name)),
            Some(e) => {
                if e.dims != t.shape() {
                    err = Some(CvaeError::ParamShape {
                        name,
                        expected: t.shape().to_vec(),
                        got: e.dims.clone(),
                    });
                } else {
                    *t = Tensor::new(&e.dims, e.data.to_f64()).expect("checked shape");
                }
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::category;

    fn small_config(arch: Arch) -> ModelConfig {
        let mut cfg = match arch {
            Arch::S1 => ModelConfig::s1(category::SUBSET.to_vec()),
            Arch::S2 => ModelConfig::s2(category::SUBSET.to_vec()),
        };
        // Shrink for fast unit tests.
        cfg.hidden = 48;
        cfg.scene_code = 32;
        cfg.lift = 32;
        cfg.conv_channels = vec![4, 4, 8, 8, 8, 16];
        cfg
    }

    fn flat_scene(seed: u64) -> SceneTensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data = Tensor::from_fn(&[13, 128, 128], |_| rng.random_range(0.0..1.0));
        SceneTensor { data, channels: 13, content: (128, 128), depth_all_zero: false }
    }

    fn feature() -> Vec<f64> {
        (0..75).map(|i| if i == 2 { 3.0 } else { 0.05 * (i as f64).cos() }).collect()
    }

    #[test]
    fn collapsed_noise_gives_identical_outputs() {
        let model = new_model(small_config(Arch::S1), 1);
        let scene = flat_scene(2);
        let x = feature();
        let run = |eps_scale: f64| {
            let mut g: Graph<f64> = Graph::new();
            let xh = g.constant(Tensor::from_vec(x.clone()));
            // log_var forced tiny by scaling eps to zero: equivalent to
            // epsilon ~ 0 draws.
            let eps = vec![eps_scale; 32];
            let fwd = s1_forward(&mut g, &model, &scene, xh, &eps, false).unwrap();
            g.value(fwd.x_rec).values().to_vec()
        };
        let a = run(0.0);
        let b = run(0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn s1_gradients_reach_every_parameter() {
        let model = new_model(small_config(Arch::S1), 3);
        let scene = flat_scene(5);
        let x = feature();
        let mut g: Graph<f64> = Graph::new();
        let xh = g.constant(Tensor::from_vec(x));
        let eps = vec![0.3; 32];
        let fwd = s1_forward(&mut g, &model, &scene, xh, &eps, true).unwrap();
        assert!(g.value(fwd.x_rec).is_finite());

        // A loss touching the reconstruction, mu, and log_var so every head
        // participates.
        let sq = g.square(fwd.x_rec);
        let l1 = g.sum(sq);
        let m2 = g.square(fwd.mu);
        let l2 = g.sum(m2);
        let v2 = g.square(fwd.log_var);
        let l3 = g.sum(v2);
        let l12 = g.add(l1, l2).unwrap();
        let loss = g.add(l12, l3).unwrap();
        let grads = g.backward(loss).unwrap();
        let names = model.param_names();
        for (name, r) in names.iter().zip(&fwd.param_refs) {
            let grad = grads.get(*r).unwrap();
            let norm: f64 = grad.values().iter().map(|v| v.abs()).sum();
            assert!(norm > 0.0, "zero gradient for parameter {name}");
        }
    }

    #[test]
    fn s2_gradients_reach_every_parameter_and_stage2_sees_stage1() {
        let model = new_model(small_config(Arch::S2), 4);
        let scene = flat_scene(6);
        let x = feature();
        let mut g: Graph<f64> = Graph::new();
        let xh = g.constant(Tensor::from_vec(x.clone()));
        let fwd = s2_forward(&mut g, &model, &scene, xh, &[0.1; 8], &[0.1; 32], true).unwrap();
        let sq = g.square(fwd.x_rec);
        let l1 = g.sum(sq);
        let mg = g.square(fwd.mu_g);
        let l2 = g.sum(mg);
        let vg = g.square(fwd.log_var_g);
        let l3 = g.sum(vg);
        let ml = g.square(fwd.mu_l);
        let l4 = g.sum(ml);
        let vl = g.square(fwd.log_var_l);
        let l5 = g.sum(vl);
        let mut loss = g.add(l1, l2).unwrap();
        loss = g.add(loss, l3).unwrap();
        loss = g.add(loss, l4).unwrap();
        loss = g.add(loss, l5).unwrap();
        let grads = g.backward(loss).unwrap();
        for (name, r) in model.param_names().iter().zip(&fwd.param_refs) {
            let norm: f64 = grads.get(*r).unwrap().values().iter().map(|v| v.abs()).sum();
            assert!(norm > 0.0, "zero gradient for parameter {name}");
        }

        // Stage 2 conditioning is live: perturbing the stage-1 scene encoder
        // changes the local reconstruction.
        let base_local = g.value(fwd.x_l_rec).values().to_vec();
        let mut perturbed = model.clone();
        if let ModelKind::S2(m) = &mut perturbed.kind {
            m.dec_g.out.b.values_mut()[0] += 0.5;
        }
        let mut g2: Graph<f64> = Graph::new();
        let xh2 = g2.constant(Tensor::from_vec(x));
        let fwd2 = s2_forward(&mut g2, &perturbed, &scene, xh2, &[0.1; 8], &[0.1; 32], false).unwrap();
        let new_local = g2.value(fwd2.x_l_rec).values().to_vec();
        let diff: f64 = base_local.iter().zip(&new_local).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-9, "stage-2 output ignores stage-1 reconstruction");
    }

    #[test]
    fn sample_counts_and_determinism() {
        let model = new_model(small_config(Arch::S1), 9);
        let scene = flat_scene(1);
        assert!(sample(&model, &scene, 0, 7).unwrap().is_empty());
        let a = sample(&model, &scene, 5, 7).unwrap();
        let b = sample(&model, &scene, 5, 7).unwrap();
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_flat(), y.to_flat());
        }
        let c = sample(&model, &scene, 5, 8).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.to_flat() != y.to_flat()));
    }

    #[test]
    fn scene_conditioning_is_live() {
        let model = new_model(small_config(Arch::S1), 9);
        let s1 = flat_scene(1);
        let s2 = flat_scene(2);
        let a = sample(&model, &s1, 1, 7).unwrap();
        let b = sample(&model, &s2, 1, 7).unwrap();
        assert_ne!(a[0].to_flat(), b[0].to_flat());
    }

    #[test]
    fn traverse_zero_matches_zero_decode_and_dims_differ() {
        let model = new_model(small_config(Arch::S1), 12);
        let scene = flat_scene(3);
        let single = latent_traverse(&model, &scene, &[0], (0.0, 0.0), 1).unwrap();
        let codes = scene_code_values(&model, &scene).unwrap();
        let zero = decode_s1(&model, &codes[0], &vec![0.0; 32]).unwrap();
        assert_eq!(single[0].to_flat(), zero);

        let sweep_a = latent_traverse(&model, &scene, &[0, 1], (-3.0, 3.0), 5).unwrap();
        let sweep_b = latent_traverse(&model, &scene, &[30, 31], (-3.0, 3.0), 5).unwrap();
        let differ = sweep_a
            .iter()
            .zip(&sweep_b)
            .any(|(x, y)| x.to_flat() != y.to_flat());
        assert!(differ, "disjoint dim sets produced identical trajectories");
    }

    #[test]
    fn reparameterization_statistics() {
        // Empirical mean/std of z over many draws match (mu, exp(0.5 lv)).
        let mu = [0.7f64, -1.2];
        let lv = [0.4f64, -0.8];
        let draws = 100_000;
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for _ in 0..draws {
            for k in 0..2 {
                let eps: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                let z = mu[k] + (0.5 * lv[k]).exp() * eps;
                sums[k] += z;
                sq[k] += z * z;
            }
        }
        for k in 0..2 {
            let mean = sums[k] / draws as f64;
            let std = (sq[k] / draws as f64 - mean * mean).sqrt();
            let want_std = (0.5 * lv[k]).exp();
            assert!((mean - mu[k]).abs() < 0.02 * (1.0 + mu[k].abs()), "mean {mean}");
            assert!((std - want_std).abs() < 0.02 * want_std, "std {std}");
        }
    }

    #[test]
    fn save_load_roundtrip_preserves_outputs() {
        let model = new_model(small_config(Arch::S2), 31);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.psiw");
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.param_names(), model.param_names());
        let scene = flat_scene(4);
        let a = sample(&model, &scene, 3, 5).unwrap();
        let b = sample(&back, &scene, 3, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_flat(), y.to_flat());
        }
    }

    #[test]
    fn param_name_order_matches_binding_order() {
        let model = new_model(small_config(Arch::S1), 2);
        let scene = flat_scene(2);
        let mut g: Graph<f64> = Graph::new();
        let xh = g.constant(Tensor::from_vec(feature()));
        let fwd = s1_forward(&mut g, &model, &scene, xh, &[0.0; 32], true).unwrap();
        let names = model.param_names();
        assert_eq!(names.len(), fwd.param_refs.len());
        // Shapes line up pairwise, which pins the ordering contract.
        let mut m = model.clone();
        for ((_, t), r) in m.params_mut().into_iter().zip(&fwd.param_refs) {
            assert_eq!(t.shape(), g.value(*r).shape());
        }
    }
}
