//! Encoders, heads, the dual-encoder matcher, the attention planner and the
//! student-to-teacher channel projector.
//!
//! Every network keeps its weights in a [`ParamSet`] and is evaluated by
//! binding that set into a fresh [`Graph`]. Image batches are `[B, C, H, W]`;
//! patch features are `[B, C_f, N]` with `N = grid²`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

const STAGE: Conv2dSpec = Conv2dSpec {
    stride: 2,
    padding: 1,
};
const KERNEL: usize = 3;

/// Batches used by the no-gradient inference helpers.
pub const INFER_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub image_size: usize,
}

impl EncoderConfig {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Spatial extent after the last stride-2 stage.
    pub fn patch_grid(&self) -> usize {
        (0..self.stages()).fold(self.image_size, |s, _| {
            (s + 2 * STAGE.padding - KERNEL) / STAGE.stride + 1
        })
    }

    pub fn patches(&self) -> usize {
        self.patch_grid() * self.patch_grid()
    }

    pub fn out_channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("encoder widths {:?} must be non-empty and positive", self.widths)));
        }
        if self.in_channels == 0 || self.image_size < KERNEL {
            return Err(Error::Config(format!(
                "encoder needs channels > 0 and image size >= {KERNEL}, got {} and {}",
                self.in_channels, self.image_size
            )));
        }
        if self.patches() < 4 {
            return Err(Error::Config(format!(
                "{} stages on {}px leave {} patches; at least 4 are required",
                self.stages(),
                self.image_size,
                self.patches()
            )));
        }
        Ok(())
    }
}

/// Affine map over the last axis. Weights are `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut Rng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = ps.add(format!("{name}.w"), Tensor::randn(&[in_dim, out_dim], std, rng));
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let last = g.shape(x).last().copied().unwrap_or(0);
        if last != self.in_dim {
            return Err(Error::dim(format!("linear expects last dim {}, got {:?}", self.in_dim, g.shape(x))));
        }
        let y = g.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Patch features and their spatial mean.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    /// `[B, C_f, N]`
    pub z: Var,
    /// `[B, C_f]`
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<(ParamId, ParamId)>,
}

impl Encoder {
    /// He-normal kernels, zero biases.
    pub fn new(ps: &mut ParamSet, name: &str, config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut cin = config.in_channels;
        let mut stages = Vec::with_capacity(config.stages());
        for (i, &cout) in config.widths.iter().enumerate() {
            let fan_in = cin * KERNEL * KERNEL;
            let w = Tensor::randn(&[cout, cin, KERNEL, KERNEL], (2.0 / fan_in as f64).sqrt(), rng);
            let wid = ps.add(format!("{name}.conv{i}.w"), w);
            let bid = ps.add(format!("{name}.conv{i}.b"), Tensor::zeros(&[cout]));
            stages.push((wid, bid));
            cin = cout;
        }
        Ok(Encoder {
            config: config.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn stage_params(&self) -> &[(ParamId, ParamId)] {
        &self.stages
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Features> {
        let c = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != c.in_channels || shape[2] != c.image_size || shape[3] != c.image_size {
            return Err(Error::dim(format!(
                "encoder expects [B, {}, {s}, {s}], got {shape:?}",
                c.in_channels,
                s = c.image_size
            )));
        }
        let mut h = x;
        for &(w, b) in &self.stages {
            let y = g.conv2d(h, p.var(w), p.var(b), STAGE)?;
            h = g.relu(y);
        }
        let z = g.reshape(h, &[shape[0], c.out_channels(), c.patches()])?;
        let pooled = g.mean_axis(z, 2)?;
        let pooled = g.reshape(pooled, &[shape[0], c.out_channels()])?;
        Ok(Features { z, pooled })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub encoder: EncoderConfig,
    pub classes: usize,
}

/// Values produced by a no-gradient forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    /// `[M, C_f, N]`
    pub z: Tensor,
    /// `[M, C_f]`
    pub pooled: Tensor,
    /// `[M, C]`
    pub logits: Tensor,
}

/// Encoder plus linear head; used for both the teacher and the student.
#[derive(Clone, Debug)]
pub struct Classifier {
    config: ClassifierConfig,
    pub params: ParamSet,
    encoder: Encoder,
    head: Linear,
}

impl Classifier {
    pub fn new(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        if config.classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::new(&mut params, "enc", &config.encoder, &mut rng)?;
        let head = Linear::new(&mut params, "head", config.encoder.out_channels(), config.classes, true, &mut rng);
        Ok(Classifier {
            config: config.clone(),
            params,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn encode(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Features> {
        self.encoder.forward(g, p, x)
    }

    pub fn classify(&self, g: &mut Graph, p: &Bound, pooled: Var) -> Result<Var> {
        self.head.forward(g, p, pooled)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Features, Var)> {
        let f = self.encode(g, p, x)?;
        let logits = self.classify(g, p, f.pooled)?;
        Ok((f, logits))
    }

    /// Forward every image of `images` without recording gradients.
    pub fn infer(&self, images: &Tensor) -> Result<Inference> {
        let mut zs = Vec::new();
        let mut pooled = Vec::new();
        let mut logits = Vec::new();
        for chunk in batches(images, INFER_BATCH)? {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let x = g.constant(chunk);
            let (f, l) = self.forward(&mut g, &p, x)?;
            zs.push(g.value(f.z).clone());
            pooled.push(g.value(f.pooled).clone());
            logits.push(g.value(l).clone());
        }
        Ok(Inference {
            z: concat_rows(&zs)?,
            pooled: concat_rows(&pooled)?,
            logits: concat_rows(&logits)?,
        })
    }

    pub fn save(&self, dir: &Path, seed: u64, epoch: usize) -> Result<()> {
        save_checkpoint(dir, "classifier", &self.config, seed, epoch, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, config) = read_manifest::<ClassifierConfig>(dir, "classifier")?;
        let mut c = Classifier::new(&config, manifest.seed)?;
        c.params.load_dir(dir)?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Multispectral input, or the teacher side of the planner.
    Ms,
    /// RGB or pseudo-RGB input, or the student side of the planner.
    Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub ms_channels: usize,
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    /// Initial value of the logit scale `τ`.
    #[serde(default = "default_logit_scale")]
    pub init_logit_scale: f64,
}

fn default_logit_scale() -> f64 {
    1.0 / 0.07
}

/// Twin encoders for MS and pseudo-RGB images projected onto a shared unit
/// sphere, with a learnable logit scale stored as its logarithm.
#[derive(Clone, Debug)]
pub struct Matcher {
    config: MatcherConfig,
    pub params: ParamSet,
    enc_ms: Encoder,
    enc_rgb: Encoder,
    proj_ms: Linear,
    proj_rgb: Linear,
    log_scale: ParamId,
}

impl Matcher {
    pub fn new(config: &MatcherConfig, seed: u64) -> Result<Self> {
        if config.embed_dim == 0 || !(config.init_logit_scale > 0.0) {
            return Err(Error::Config("matcher needs embed_dim > 0 and a positive logit scale".into()));
        }
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        let ms_cfg = EncoderConfig {
            in_channels: config.ms_channels,
            widths: config.widths.clone(),
            image_size: config.image_size,
        };
        let rgb_cfg = EncoderConfig {
            in_channels: 3,
            ..ms_cfg.clone()
        };
        let enc_ms = Encoder::new(&mut params, "ms", &ms_cfg, &mut rng)?;
        let enc_rgb = Encoder::new(&mut params, "rgb", &rgb_cfg, &mut rng)?;
        let width = ms_cfg.out_channels();
        let proj_ms = Linear::new(&mut params, "ms.proj", width, config.embed_dim, false, &mut rng);
        let proj_rgb = Linear::new(&mut params, "rgb.proj", width, config.embed_dim, false, &mut rng);
        let log_scale = params.add("log_scale", Tensor::scalar(config.init_logit_scale.ln()));
        Ok(Matcher {
            config: config.clone(),
            params,
            enc_ms,
            enc_rgb,
            proj_ms,
            proj_rgb,
            log_scale,
        })
    }

    pub fn config(&self) -> &MatcherConfig {
        &self.config
    }

    /// Unit-norm embeddings `[B, d_e]`.
    pub fn embed(&self, g: &mut Graph, p: &Bound, modality: Modality, x: Var) -> Result<Var> {
        let (enc, proj) = match modality {
            Modality::Ms => (&self.enc_ms, &self.proj_ms),
            Modality::Rgb => (&self.enc_rgb, &self.proj_rgb),
        };
        let f = enc.forward(g, p, x)?;
        let e = proj.forward(g, p, f.pooled)?;
        Ok(g.l2_normalize(e))
    }

    /// `τ = exp(log_scale)` as a graph scalar.
    pub fn logit_scale(&self, g: &mut Graph, p: &Bound) -> Var {
        g.exp(p.var(self.log_scale))
    }

    pub fn logit_scale_value(&self) -> f64 {
        self.params.get(self.log_scale).item().exp()
    }

    /// Cap `τ` at `max`, as CLIP does after each update.
    pub fn clamp_logit_scale(&mut self, max: f64) {
        let cap = max.ln();
        let v = self.params.get_mut(self.log_scale);
        if v.item() > cap {
            *v = Tensor::scalar(cap);
        }
    }

    pub fn infer(&self, modality: Modality, images: &Tensor) -> Result<Tensor> {
        let mut out = Vec::new();
        for chunk in batches(images, INFER_BATCH)? {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let x = g.constant(chunk);
            let e = self.embed(&mut g, &p, modality, x)?;
            out.push(g.value(e).clone());
        }
        concat_rows(&out)
    }

    pub fn save(&self, dir: &Path, seed: u64, epoch: usize) -> Result<()> {
        save_checkpoint(dir, "matcher", &self.config, seed, epoch, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, config) = read_manifest::<MatcherConfig>(dir, "matcher")?;
        let mut m = Matcher::new(&config, manifest.seed)?;
        m.params.load_dir(dir)?;
        Ok(m)
    }
}

/// Multi-head query/key attention over patches. Each side has its own input
/// projection to `d_model`; the query and key maps are shared.
#[derive(Clone, Debug)]
pub struct Planner {
    heads: usize,
    d_model: usize,
    in_teacher: Linear,
    in_student: Linear,
    wq: Linear,
    wk: Linear,
}

impl Planner {
    pub fn new(
        ps: &mut ParamSet,
        teacher_channels: usize,
        student_channels: usize,
        d_model: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!("heads ({heads}) must divide d_model ({d_model})")));
        }
        Ok(Planner {
            heads,
            d_model,
            in_teacher: Linear::new(ps, "planner.in_t", teacher_channels, d_model, false, rng),
            in_student: Linear::new(ps, "planner.in_s", student_channels, d_model, false, rng),
            wq: Linear::new(ps, "planner.q", d_model, d_model, false, rng),
            wk: Linear::new(ps, "planner.k", d_model, d_model, false, rng),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn input_projection(&self, side: Modality) -> &Linear {
        match side {
            Modality::Ms => &self.in_teacher,
            Modality::Rgb => &self.in_student,
        }
    }

    pub fn query(&self) -> &Linear {
        &self.wq
    }

    pub fn key(&self) -> &Linear {
        &self.wk
    }

    /// `softmax(Q Kᵀ / √d)` per head for patch features `z: [B, C_f, N]`,
    /// returned as `[B, H, N, N]`.
    pub fn attention(&self, g: &mut Graph, p: &Bound, z: Var, side: Modality) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 3 {
            return Err(Error::dim(format!("planner expects [B, C_f, N], got {shape:?}")));
        }
        let (b, n) = (shape[0], shape[2]);
        if n < 1 {
            return Err(Error::dim("planner needs at least one patch"));
        }
        let (h, d) = (self.heads, self.head_dim());
        let tokens = g.permute(z, &[0, 2, 1])?;
        let x = self.input_projection(side).forward(g, p, tokens)?;
        let split = |g: &mut Graph, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[b, n, h, d])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[b * h, n, d])
        };
        let q = self.wq.forward(g, p, x)?;
        let q = split(g, q)?;
        let k = self.wk.forward(g, p, x)?;
        let k = split(g, k)?;
        let kt = g.transpose(k)?;
        let s = g.bmm(q, kt)?;
        let s = g.scale(s, 1.0 / (d as f64).sqrt());
        let a = g.softmax(s);
        g.reshape(a, &[b, h, n, n])
    }
}

/// Per-patch linear map from student to teacher channels; the identity when
/// the widths agree.
#[derive(Clone, Debug)]
pub struct Projector {
    map: Option<ParamId>,
    student_channels: usize,
    teacher_channels: usize,
}

impl Projector {
    pub fn new(ps: &mut ParamSet, student_channels: usize, teacher_channels: usize, rng: &mut Rng) -> Self {
        let map = (student_channels != teacher_channels).then(|| {
            let std = (1.0 / student_channels as f64).sqrt();
            ps.add("projector.w", Tensor::randn(&[student_channels, teacher_channels], std, rng))
        });
        Projector {
            map,
            student_channels,
            teacher_channels,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.map.is_none()
    }

    pub fn weight(&self) -> Option<ParamId> {
        self.map
    }

    /// `[B, C_s, N] → [B, C_t, N]`.
    pub fn project(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 3 || shape[1] != self.student_channels {
            return Err(Error::dim(format!(
                "projector expects [B, {}, N], got {shape:?}",
                self.student_channels
            )));
        }
        let Some(w) = self.map else { return Ok(z) };
        let t = g.permute(z, &[0, 2, 1])?;
        let t = g.matmul(t, p.var(w))?;
        g.permute(t, &[0, 2, 1])
    }

    /// `[B, C_s] → [B, C_t]`.
    pub fn project_pooled(&self, g: &mut Graph, p: &Bound, pooled: Var) -> Result<Var> {
        let shape = g.shape(pooled).to_vec();
        if shape.len() != 2 || shape[1] != self.student_channels {
            return Err(Error::dim(format!(
                "projector expects [B, {}], got {shape:?}",
                self.student_channels
            )));
        }
        match self.map {
            Some(w) => g.matmul(pooled, p.var(w)),
            None => Ok(pooled),
        }
        .inspect(|&v| debug_assert_eq!(g.shape(v)[1], self.teacher_channels))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub teacher_channels: usize,
    pub student_channels: usize,
    pub d_model: usize,
    pub heads: usize,
}

/// Planner and projector, trained jointly with the student.
#[derive(Clone, Debug)]
pub struct Bridge {
    config: BridgeConfig,
    pub params: ParamSet,
    pub planner: Planner,
    pub projector: Projector,
}

impl Bridge {
    pub fn new(config: &BridgeConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        let planner = Planner::new(
            &mut params,
            config.teacher_channels,
            config.student_channels,
            config.d_model,
            config.heads,
            &mut rng,
        )?;
        let projector = Projector::new(&mut params, config.student_channels, config.teacher_channels, &mut rng);
        Ok(Bridge {
            config: config.clone(),
            params,
            planner,
            projector,
        })
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.config
    }

    pub fn save(&self, dir: &Path, seed: u64, epoch: usize) -> Result<()> {
        save_checkpoint(dir, "bridge", &self.config, seed, epoch, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, config) = read_manifest::<BridgeConfig>(dir, "bridge")?;
        let mut b = Bridge::new(&config, manifest.seed)?;
        b.params.load_dir(dir)?;
        Ok(b)
    }
}

/// All trainable pieces of one distillation run.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub teacher: Classifier,
    pub student: Classifier,
    pub matcher: Matcher,
    pub bridge: Bridge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub epoch: usize,
    pub fingerprint: String,
    pub tensors: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn save_checkpoint<C: Serialize>(
    dir: &Path,
    kind: &str,
    config: &C,
    seed: u64,
    epoch: usize,
    params: &ParamSet,
) -> Result<()> {
    params.save_dir(dir)?;
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        config: serde_json::to_value(config).map_err(|e| Error::json(dir, e))?,
        seed,
        epoch,
        fingerprint: params.fingerprint(),
        tensors: params.names().iter().map(|n| format!("{n}.sbt")).collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest<C: for<'de> Deserialize<'de>>(dir: &Path, kind: &str) -> Result<(CheckpointManifest, C)> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing {
            what: "checkpoint manifest",
            path: path.clone(),
        },
        _ => Error::io(&path, e),
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.kind != kind {
        return Err(Error::Config(format!(
            "{} holds a {} checkpoint, expected {kind}",
            dir.display(),
            manifest.kind
        )));
    }
    let config = serde_json::from_value(manifest.config.clone()).map_err(|e| Error::json(&path, e))?;
    Ok((manifest, config))
}

/// Split along the leading axis into chunks of at most `size` rows.
pub fn batches(t: &Tensor, size: usize) -> Result<Vec<Tensor>> {
    if t.rank() == 0 {
        return Err(Error::dim("cannot batch a scalar"));
    }
    let rows = t.shape()[0];
    let mut out = Vec::new();
    let mut start = 0;
    while start < rows {
        let end = (start + size).min(rows);
        let idx: Vec<usize> = (start..end).collect();
        out.push(t.select_rows(&idx));
        start = end;
    }
    Ok(out)
}

/// Concatenate along the leading axis.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(Error::dim("nothing to concatenate"));
    };
    let tail = first.shape()[1..].to_vec();
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.shape()[1..] != tail[..] {
            return Err(Error::dim(format!("concat: {:?} vs {:?}", p.shape(), first.shape())));
        }
        rows += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![rows];
    shape.extend(tail);
    Tensor::new(shape, data)
}
