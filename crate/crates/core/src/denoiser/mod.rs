//! The noise-prediction network: a temporal convolutional encoder-decoder
//! with skip concatenation, conditioned on a fused time + text embedding
//! through per-block scale-and-shift.
//!
//! Activations are `(batch * len, channels)` matrices. Every layer keeps what
//! it needs for an exact reverse-mode backward pass in a [`Workspace`].

mod layers;
mod params;

use std::f64::consts::LN_10;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::text::TextEmbedding;
use layers::{
    avg_pool2, avg_pool2_backward, concat_channels, film, film_backward, silu, silu_backward, split_channels,
    upsample2, upsample2_backward, Conv1d, GroupNorm, Linear, NormCache,
};
pub use params::{NamedTensor, Params};
use params::{ParamBuilder, ParamSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Frames per sequence (`L`).
    pub seq_len: usize,
    /// Flattened keypoint channels (`C`).
    pub channels: usize,
    /// Width of caption embeddings fed to the fusion projection.
    pub text_dim: usize,
    /// Width of the fused time + text embedding; must be even.
    pub embed_dim: usize,
    /// Channel width per resolution level, finest first.
    pub hidden: Vec<usize>,
    pub levels: usize,
}

impl DenoiserConfig {
    pub fn new(seq_len: usize, channels: usize, text_dim: usize) -> Self {
        Self {
            seq_len,
            channels,
            text_dim,
            embed_dim: 64,
            hidden: vec![64, 128],
            levels: 2,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.levels == 0 {
            out.push("levels must be at least 1".to_string());
        }
        if self.hidden.len() != self.levels {
            out.push(format!(
                "hidden lists {} widths for {} levels",
                self.hidden.len(),
                self.levels
            ));
        }
        if self.hidden.contains(&0) {
            out.push("hidden widths must be positive".to_string());
        }
        if self.channels == 0 || self.text_dim == 0 {
            out.push("channels and text_dim must be positive".to_string());
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            out.push(format!(
                "embed_dim must be positive and even, got {}",
                self.embed_dim
            ));
        }
        let stride = 1usize << self.levels.saturating_sub(1).min(63);
        if self.seq_len == 0 || !self.seq_len.is_multiple_of(stride) {
            out.push(format!(
                "seq_len {} must be a positive multiple of {stride}",
                self.seq_len
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }
}

/// Sinusoidal code of step `t`: interleaved `(sin, cos)` pairs at
/// geometrically spaced frequencies from 1 down to 1e-4.
pub fn time_embed(t: usize, steps: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "time embedding width must be positive and even, got {dim}"
        )));
    }
    if t == 0 || t > steps {
        return Err(Error::StepOutOfRange { t, steps });
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-4.0 * LN_10 * i as f64 / half as f64).exp();
        let (sin, cos) = (t as f64 * freq).sin_cos();
        out.push(sin);
        out.push(cos);
    }
    Ok(out)
}

/// Time embedding plus projected caption (or the learned null vector).
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbedding(pub Vec<f64>);

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv1d,
    norm2: GroupNorm,
    modulation: Linear,
    conv2: Conv1d,
    skip: Option<Linear>,
}

#[derive(Debug, Clone)]
struct ResCache {
    x: Array2<f64>,
    n1: NormCache,
    y1: Array2<f64>,
    cols1: Array2<f64>,
    n2: NormCache,
    y2: Array2<f64>,
    ss: Array2<f64>,
    f: Array2<f64>,
    cols2: Array2<f64>,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, cond: usize) -> Self {
        Self {
            norm1: GroupNorm::new(pb, &format!("{name}.norm1"), cin),
            conv1: Conv1d::new(pb, &format!("{name}.conv1"), cin, cout),
            norm2: GroupNorm::new(pb, &format!("{name}.norm2"), cout),
            modulation: Linear::new(pb, &format!("{name}.modulation"), cond, 2 * cout, false),
            conv2: Conv1d::new(pb, &format!("{name}.conv2"), cout, cout),
            skip: (cin != cout).then(|| Linear::new(pb, &format!("{name}.skip"), cin, cout, false)),
        }
    }

    fn forward(&self, p: &Params, x: Array2<f64>, cond: &Array2<f64>, len: usize) -> (Array2<f64>, ResCache) {
        let (y1, n1) = self.norm1.forward(p, &x, len);
        let (h1, cols1) = self.conv1.forward(p, &silu(&y1), len);
        let (y2, n2) = self.norm2.forward(p, &h1, len);
        let ss = self.modulation.forward(p, cond);
        let f = film(&y2, &ss, len);
        let (mut out, cols2) = self.conv2.forward(p, &silu(&f), len);
        match &self.skip {
            Some(skip) => out += &skip.forward(p, &x),
            None => out += &x,
        }
        let cache = ResCache {
            x,
            n1,
            y1,
            cols1,
            n2,
            y2,
            ss,
            f,
            cols2,
        };
        (out, cache)
    }

    /// Returns `(dx, dcond)`.
    fn backward(
        &self,
        p: &Params,
        c: &ResCache,
        cond: &Array2<f64>,
        dout: &Array2<f64>,
        len: usize,
        g: &mut Params,
    ) -> (Array2<f64>, Array2<f64>) {
        let da2 = self.conv2.backward(p, &c.cols2, dout, len, g);
        let df = silu_backward(&c.f, &da2);
        let (dy2, dss) = film_backward(&c.y2, &c.ss, &df, len);
        let dcond = self.modulation.backward(p, cond, &dss, g);
        let dh1 = self.norm2.backward(p, &c.n2, &dy2, len, g);
        let da1 = self.conv1.backward(p, &c.cols1, &dh1, len, g);
        let dy1 = silu_backward(&c.y1, &da1);
        let mut dx = self.norm1.backward(p, &c.n1, &dy1, len, g);
        match &self.skip {
            Some(skip) => dx += &skip.backward(p, &c.x, dout, g),
            None => dx += dout,
        }
        (dx, dcond)
    }
}

/// Intermediate state from one batched forward pass.
#[derive(Debug, Clone)]
struct Trace {
    batch: usize,
    emb: Array2<f64>,
    e1: Array2<f64>,
    a1: Array2<f64>,
    e2: Array2<f64>,
    cond: Array2<f64>,
    in_cols: Array2<f64>,
    enc: Vec<ResCache>,
    mid: ResCache,
    dec: Vec<ResCache>,
    out_norm: NormCache,
    out_pre: Array2<f64>,
    out_act: Array2<f64>,
}

/// Activation storage for one forward/backward pair. Separate workspaces let
/// several passes share one parameter set.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    trace: Option<Trace>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.trace = None;
    }
}

/// Gradients from [`Denoiser::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Params,
    /// With respect to the noisy input, `(batch * len, channels)`.
    pub input: Array2<f64>,
    /// With respect to the fused embeddings, `(batch, embed_dim)`.
    pub embedding: Array2<f64>,
}

/// Network layout. Parameters live separately in [`Params`].
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    specs: Vec<ParamSpec>,
    text_proj: Linear,
    null_embed: usize,
    emb1: Linear,
    emb2: Linear,
    conv_in: Conv1d,
    enc: Vec<ResBlock>,
    mid: ResBlock,
    /// Indexed by level, finest first; executed coarsest first.
    dec: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_proj: Linear,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::default();
        let e = config.embed_dim;
        let h = &config.hidden;
        let n = config.levels;
        let text_proj = Linear::new(&mut pb, "fuse.text_proj", config.text_dim, e, false);
        let null_embed = pb.add("fuse.null".into(), vec![e], params::Init::Zeros);
        let emb1 = Linear::new(&mut pb, "cond.fc1", e, e, false);
        let emb2 = Linear::new(&mut pb, "cond.fc2", e, e, false);
        let conv_in = Conv1d::new(&mut pb, "input", config.channels, h[0]);
        let enc = (0..n)
            .map(|i| {
                let cin = if i == 0 { h[0] } else { h[i - 1] };
                ResBlock::new(&mut pb, &format!("down.{i}"), cin, h[i], e)
            })
            .collect();
        let mid = ResBlock::new(&mut pb, "mid", h[n - 1], h[n - 1], e);
        let mut dec: Vec<ResBlock> = (0..n)
            .rev()
            .map(|i| {
                let below = if i == n - 1 { h[n - 1] } else { h[i + 1] };
                ResBlock::new(&mut pb, &format!("up.{i}"), below + h[i], h[i], e)
            })
            .collect();
        dec.reverse();
        let out_norm = GroupNorm::new(&mut pb, "output.norm", h[0]);
        let out_proj = Linear::new(&mut pb, "output.proj", h[0], config.channels, true);
        Ok(Self {
            config,
            specs: pb.specs,
            text_proj,
            null_embed,
            emb1,
            emb2,
            conv_in,
            enc,
            mid,
            dec,
            out_norm,
            out_proj,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Fan-in scaled normal weights, unit norm gains, zero biases, and a zero
    /// output projection so a fresh model predicts no noise.
    pub fn init_params(&self, seed: u64) -> Params {
        Params::from_specs(&self.specs, &mut SeededRng::new(seed))
    }

    /// Validate externally supplied tensors against this layout.
    pub fn params_from_tensors(&self, tensors: Vec<NamedTensor>) -> Result<Params> {
        Params::from_tensors(&self.specs, tensors)
    }

    pub fn fuse(&self, p: &Params, t_embed: &[f64], z: &TextEmbedding) -> Result<FusedEmbedding> {
        let z = [z];
        let emb = self.fuse_rows(p, &[t_embed], &z)?;
        Ok(FusedEmbedding(emb.row(0).to_vec()))
    }

    /// Batched fusion, one row per sample.
    pub fn fuse_rows(
        &self,
        p: &Params,
        t_embeds: &[&[f64]],
        conds: &[&TextEmbedding],
    ) -> Result<Array2<f64>> {
        let e = self.config.embed_dim;
        if t_embeds.len() != conds.len() {
            return Err(Error::Shape(format!(
                "{} time embeddings for {} conditions",
                t_embeds.len(),
                conds.len()
            )));
        }
        let mut out = Array2::zeros((conds.len(), e));
        for (b, (te, z)) in t_embeds.iter().zip(conds).enumerate() {
            if te.len() != e {
                return Err(Error::Shape(format!("time embedding width {} != {e}", te.len())));
            }
            let mut row = out.row_mut(b);
            row.assign(&ndarray::aview1(te));
            if z.is_null() {
                row += &p.vec(self.null_embed);
                continue;
            }
            if z.dim() != self.config.text_dim {
                return Err(Error::Shape(format!(
                    "text embedding width {} != {}",
                    z.dim(),
                    self.config.text_dim
                )));
            }
            let zmat = ArrayView2::from_shape((1, z.dim()), z.values()).expect("row vector");
            let proj = self.text_proj.forward(p, &zmat.to_owned());
            row += &proj.row(0);
        }
        Ok(out)
    }

    /// Accumulate fusion-parameter gradients given `d_emb` for each row.
    pub fn fuse_backward(&self, p: &Params, conds: &[&TextEmbedding], d_emb: &Array2<f64>, g: &mut Params) {
        for (b, z) in conds.iter().enumerate() {
            let d = d_emb.slice(s![b..b + 1, ..]).to_owned();
            if z.is_null() {
                g.vec_mut(self.null_embed).zip_mut_with(&d.row(0), |a, v| *a += v);
            } else {
                let zmat = ArrayView2::from_shape((1, z.dim()), z.values())
                    .expect("row vector")
                    .to_owned();
                self.text_proj.backward(p, &zmat, &d, g);
            }
        }
    }

    /// Single-sample prediction: `(L, C)` in, `(L, C)` out.
    pub fn forward(&self, p: &Params, x_t: &Array2<f64>, emb: &FusedEmbedding) -> Result<Array2<f64>> {
        let emb = Array2::from_shape_vec((1, emb.0.len()), emb.0.clone())
            .map_err(|e| Error::Shape(e.to_string()))?;
        self.forward_batch(p, x_t, &emb, &mut Workspace::new())
    }

    /// Batched prediction over `(batch * L, C)` stacked samples and
    /// `(batch, embed_dim)` embeddings. Records state for [`Self::backward`].
    pub fn forward_batch(
        &self,
        p: &Params,
        x: &Array2<f64>,
        emb: &Array2<f64>,
        ws: &mut Workspace,
    ) -> Result<Array2<f64>> {
        let cfg = &self.config;
        let batch = emb.nrows();
        if emb.ncols() != cfg.embed_dim {
            return Err(Error::Shape(format!(
                "embedding width {} != {}",
                emb.ncols(),
                cfg.embed_dim
            )));
        }
        if x.dim() != (batch * cfg.seq_len, cfg.channels) {
            return Err(Error::Shape(format!(
                "input {:?} does not match batch {batch} x ({}, {})",
                x.dim(),
                cfg.seq_len,
                cfg.channels
            )));
        }
        ws.clear();
        let e1 = self.emb1.forward(p, emb);
        let a1 = silu(&e1);
        let e2 = self.emb2.forward(p, &a1);
        let cond = silu(&e2);

        let mut len = cfg.seq_len;
        let (mut h, in_cols) = self.conv_in.forward(p, x, len);
        let n = cfg.levels;
        let mut enc = Vec::with_capacity(n);
        let mut skips = Vec::with_capacity(n);
        for (i, block) in self.enc.iter().enumerate() {
            let (out, cache) = block.forward(p, h, &cond, len);
            enc.push(cache);
            skips.push(out.clone());
            h = out;
            if i + 1 < n {
                h = avg_pool2(&h);
                len /= 2;
            }
        }
        let (mut h, mid) = self.mid.forward(p, h, &cond, len);
        let mut dec = Vec::with_capacity(n);
        for i in (0..n).rev() {
            if i + 1 < n {
                h = upsample2(&h);
                len *= 2;
            }
            let (out, cache) = self.dec[i].forward(p, concat_channels(&h, &skips[i]), &cond, len);
            dec.push(cache);
            h = out;
        }
        let (out_pre, out_norm) = self.out_norm.forward(p, &h, len);
        let out_act = silu(&out_pre);
        let y = self.out_proj.forward(p, &out_act);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        ws.trace = Some(Trace {
            batch,
            emb: emb.clone(),
            e1,
            a1,
            e2,
            cond,
            in_cols,
            enc,
            mid,
            dec,
            out_norm,
            out_pre,
            out_act,
        });
        Ok(y)
    }

    /// Reverse-mode gradients of `sum(dout * output)` for the pass recorded
    /// in `ws`.
    pub fn backward(&self, p: &Params, ws: &Workspace, dout: &Array2<f64>) -> Result<Gradients> {
        let tr = ws.trace.as_ref().ok_or(Error::NoForwardState)?;
        let cfg = &self.config;
        let n = cfg.levels;
        if dout.dim() != (tr.batch * cfg.seq_len, cfg.channels) {
            return Err(Error::Shape(format!("upstream gradient {:?}", dout.dim())));
        }
        let mut g = p.zeros_like();
        let mut dcond = Array2::zeros(tr.cond.dim());

        let d_act = self.out_proj.backward(p, &tr.out_act, dout, &mut g);
        let d_pre = silu_backward(&tr.out_pre, &d_act);
        let coarsest = cfg.seq_len >> (n - 1);
        let mut dh = self
            .out_norm
            .backward(p, &tr.out_norm, &d_pre, cfg.seq_len, &mut g);

        // decoder caches were pushed coarsest first
        let mut dskips: Vec<Option<Array2<f64>>> = vec![None; n];
        let mut len = cfg.seq_len;
        for (pos, i) in (0..n).enumerate() {
            let cache = &tr.dec[n - 1 - pos];
            let (dcat, dc) = self.dec[i].backward(p, cache, &tr.cond, &dh, len, &mut g);
            dcond += &dc;
            let below = dcat.ncols() - cfg.hidden[i];
            let (d_below, d_skip) = split_channels(&dcat, below);
            dskips[i] = Some(d_skip);
            dh = d_below;
            if i + 1 < n {
                dh = upsample2_backward(&dh);
                len /= 2;
            }
        }
        debug_assert_eq!(len, coarsest);
        let (d_mid_in, dc) = self.mid.backward(p, &tr.mid, &tr.cond, &dh, len, &mut g);
        dcond += &dc;
        dh = d_mid_in;
        for i in (0..n).rev() {
            if i + 1 < n {
                dh = avg_pool2_backward(&dh);
                len *= 2;
            }
            dh += dskips[i].as_ref().expect("filled by decoder pass");
            let (dx, dc) = self.enc[i].backward(p, &tr.enc[i], &tr.cond, &dh, len, &mut g);
            dcond += &dc;
            dh = dx;
        }
        let dx = self.conv_in.backward(p, &tr.in_cols, &dh, len, &mut g);

        let de2 = silu_backward(&tr.e2, &dcond);
        let da1 = self.emb2.backward(p, &tr.a1, &de2, &mut g);
        let de1 = silu_backward(&tr.e1, &da1);
        let demb = self.emb1.backward(p, &tr.emb, &de1, &mut g);
        Ok(Gradients {
            params: g,
            input: dx,
            embedding: demb,
        })
    }
}

/// Stack per-sample `(L, C)` matrices into `(batch * L, C)`.
pub fn stack_rows(samples: &[Array2<f64>]) -> Result<Array2<f64>> {
    let views: Vec<_> = samples.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}
