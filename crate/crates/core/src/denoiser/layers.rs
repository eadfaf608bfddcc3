//! Layer primitives over `(batch * len, channels)` activations, each with an
//! explicit backward pass. Rows are grouped per sample, `len` rows each.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, Axis};

use super::params::{Init, ParamBuilder, Params};

pub(crate) const KERNEL: usize = 3;
const NORM_EPS: f64 = 1e-5;
const MAX_GROUPS: usize = 8;

/// `x W + b`, computed row by row with a fixed accumulation order so each
/// output row depends only on its own input row, whatever the batch size.
pub(crate) fn affine_rows(x: &Array2<f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let (rows, inner) = x.dim();
    let out = w.ncols();
    debug_assert_eq!(inner, w.nrows());
    let w = w.as_standard_layout();
    let w = w.as_slice().expect("standard layout");
    let bias = b.to_vec();
    let mut y = Vec::with_capacity(rows * out);
    let mut acc = vec![0.0; out];
    for row in x.rows() {
        acc.copy_from_slice(&bias);
        for (k, &xv) in row.iter().enumerate() {
            let wk = &w[k * out..(k + 1) * out];
            for (a, &wv) in acc.iter_mut().zip(wk) {
                *a += xv * wv;
            }
        }
        y.extend_from_slice(&acc);
    }
    Array2::from_shape_vec((rows, out), y).expect("rows * out values")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub(crate) fn silu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, fan_in: usize, out: usize, zero: bool) -> Self {
        let init = if zero { Init::Zeros } else { Init::FanIn(fan_in) };
        Self {
            w: pb.add(format!("{name}.weight"), vec![fan_in, out], init),
            b: pb.add(format!("{name}.bias"), vec![out], Init::Zeros),
        }
    }

    pub fn forward(&self, p: &Params, x: &Array2<f64>) -> Array2<f64> {
        affine_rows(x, p.mat(self.w), p.vec(self.b))
    }

    pub fn backward(&self, p: &Params, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Params) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut g.mat_mut(self.w));
        g.vec_mut(self.b)
            .zip_mut_with(&dy.sum_axis(Axis(0)), |a, b| *a += b);
        dy.dot(&p.mat(self.w).t())
    }
}

/// Width-3, zero-padded temporal convolution. Weight layout `[k, in, out]`,
/// which is exactly the im2col matrix `[k * in, out]`.
#[derive(Debug, Clone)]
pub(crate) struct Conv1d {
    w: usize,
    b: usize,
    cin: usize,
}

fn im2col(x: &Array2<f64>, len: usize) -> Array2<f64> {
    let (rows, cin) = x.dim();
    let mut cols = Array2::zeros((rows, KERNEL * cin));
    for r in 0..rows {
        let t = r % len;
        for k in 0..KERNEL {
            let src = t as isize + k as isize - 1;
            if src < 0 || src >= len as isize {
                continue;
            }
            let src_row = r - t + src as usize;
            cols.slice_mut(s![r, k * cin..(k + 1) * cin])
                .assign(&x.row(src_row));
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, len: usize, cin: usize) -> Array2<f64> {
    let rows = dcols.nrows();
    let mut dx = Array2::zeros((rows, cin));
    for r in 0..rows {
        let t = r % len;
        for k in 0..KERNEL {
            let src = t as isize + k as isize - 1;
            if src < 0 || src >= len as isize {
                continue;
            }
            let src_row = r - t + src as usize;
            let mut target = dx.row_mut(src_row);
            target += &dcols.slice(s![r, k * cin..(k + 1) * cin]);
        }
    }
    dx
}

impl Conv1d {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: pb.add(
                format!("{name}.weight"),
                vec![KERNEL, cin, cout],
                Init::FanIn(KERNEL * cin),
            ),
            b: pb.add(format!("{name}.bias"), vec![cout], Init::Zeros),
            cin,
        }
    }

    /// Returns the output and the im2col buffer needed for backward.
    pub fn forward(&self, p: &Params, x: &Array2<f64>, len: usize) -> (Array2<f64>, Array2<f64>) {
        let cols = im2col(x, len);
        let y = affine_rows(&cols, p.mat(self.w), p.vec(self.b));
        (y, cols)
    }

    pub fn backward(
        &self,
        p: &Params,
        cols: &Array2<f64>,
        dy: &Array2<f64>,
        len: usize,
        g: &mut Params,
    ) -> Array2<f64> {
        general_mat_mul(1.0, &cols.t(), dy, 1.0, &mut g.mat_mut(self.w));
        g.vec_mut(self.b)
            .zip_mut_with(&dy.sum_axis(Axis(0)), |a, b| *a += b);
        col2im(&dy.dot(&p.mat(self.w).t()), len, self.cin)
    }
}

/// Plain left-to-right sum. ndarray's reductions pick a strategy from the
/// memory layout, which would make a sample's statistics depend on its batch.
fn ordered_sum(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, |acc, v| acc + v)
}

/// Largest group count up to eight that divides `channels`.
pub(crate) fn group_count(channels: usize) -> usize {
    (1..=MAX_GROUPS.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    xhat: Array2<f64>,
    /// One entry per (sample, group).
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        Self {
            gamma: pb.add(format!("{name}.weight"), vec![channels], Init::Ones),
            beta: pb.add(format!("{name}.bias"), vec![channels], Init::Zeros),
            groups: group_count(channels),
        }
    }

    pub fn forward(&self, p: &Params, x: &Array2<f64>, len: usize) -> (Array2<f64>, NormCache) {
        let (rows, ch) = x.dim();
        let cg = ch / self.groups;
        let n = (len * cg) as f64;
        let mut xhat = Array2::zeros((rows, ch));
        let mut inv_std = Vec::with_capacity(rows / len * self.groups);
        for b in 0..rows / len {
            for g in 0..self.groups {
                let block = x.slice(s![b * len..(b + 1) * len, g * cg..(g + 1) * cg]);
                let mean = ordered_sum(block.iter().copied()) / n;
                let var = ordered_sum(block.iter().map(|v| (v - mean).powi(2))) / n;
                let istd = 1.0 / (var + NORM_EPS).sqrt();
                xhat.slice_mut(s![b * len..(b + 1) * len, g * cg..(g + 1) * cg])
                    .assign(&block.mapv(|v| (v - mean) * istd));
                inv_std.push(istd);
            }
        }
        let y = &xhat * &p.vec(self.gamma) + p.vec(self.beta);
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        p: &Params,
        cache: &NormCache,
        dy: &Array2<f64>,
        len: usize,
        g: &mut Params,
    ) -> Array2<f64> {
        let (rows, ch) = dy.dim();
        let cg = ch / self.groups;
        let n = (len * cg) as f64;
        g.vec_mut(self.gamma)
            .zip_mut_with(&(dy * &cache.xhat).sum_axis(Axis(0)), |a, b| *a += b);
        g.vec_mut(self.beta)
            .zip_mut_with(&dy.sum_axis(Axis(0)), |a, b| *a += b);
        let dxhat = dy * &p.vec(self.gamma);
        let mut dx = Array2::zeros((rows, ch));
        for b in 0..rows / len {
            for grp in 0..self.groups {
                let sl = s![b * len..(b + 1) * len, grp * cg..(grp + 1) * cg];
                let d = dxhat.slice(sl);
                let xh = cache.xhat.slice(sl);
                let sum_d = ordered_sum(d.iter().copied());
                let sum_dx = ordered_sum(d.iter().zip(xh.iter()).map(|(a, b)| a * b));
                let istd = cache.inv_std[b * self.groups + grp];
                let mut out = dx.slice_mut(sl);
                ndarray::Zip::from(&mut out)
                    .and(&d)
                    .and(&xh)
                    .for_each(|o, &dv, &xv| {
                        *o = istd / n * (n * dv - sum_d - xv * sum_dx);
                    });
            }
        }
        dx
    }
}

/// Per-sample affine modulation `h * (1 + scale) + shift`; `ss` holds
/// `[scale | shift]` per sample.
pub(crate) fn film(h: &Array2<f64>, ss: &Array2<f64>, len: usize) -> Array2<f64> {
    let ch = h.ncols();
    let mut y = h.clone();
    for (b, mut block) in y.axis_chunks_iter_mut(Axis(0), len).enumerate() {
        let scale = ss.slice(s![b, ..ch]).mapv(|v| 1.0 + v);
        let shift = ss.slice(s![b, ch..]);
        block *= &scale;
        block += &shift;
    }
    y
}

/// Returns `(dh, dss)`.
pub(crate) fn film_backward(
    h: &Array2<f64>,
    ss: &Array2<f64>,
    dy: &Array2<f64>,
    len: usize,
) -> (Array2<f64>, Array2<f64>) {
    let ch = h.ncols();
    let mut dh = dy.clone();
    let mut dss = Array2::zeros(ss.dim());
    for (b, (mut dblock, (hblock, yblock))) in dh
        .axis_chunks_iter_mut(Axis(0), len)
        .zip(
            h.axis_chunks_iter(Axis(0), len)
                .zip(dy.axis_chunks_iter(Axis(0), len)),
        )
        .enumerate()
    {
        let scale = ss.slice(s![b, ..ch]).mapv(|v| 1.0 + v);
        dblock *= &scale;
        dss.slice_mut(s![b, ..ch])
            .assign(&(&yblock * &hblock).sum_axis(Axis(0)));
        dss.slice_mut(s![b, ch..]).assign(&yblock.sum_axis(Axis(0)));
    }
    (dh, dss)
}

/// Average adjacent frame pairs; `len` must be even.
pub(crate) fn avg_pool2(x: &Array2<f64>) -> Array2<f64> {
    let (rows, ch) = x.dim();
    Array2::from_shape_fn((rows / 2, ch), |(r, c)| 0.5 * (x[[2 * r, c]] + x[[2 * r + 1, c]]))
}

pub(crate) fn avg_pool2_backward(dy: &Array2<f64>) -> Array2<f64> {
    let (rows, ch) = dy.dim();
    Array2::from_shape_fn((rows * 2, ch), |(r, c)| 0.5 * dy[[r / 2, c]])
}

/// Nearest-neighbour doubling along time.
pub(crate) fn upsample2(x: &Array2<f64>) -> Array2<f64> {
    let (rows, ch) = x.dim();
    Array2::from_shape_fn((rows * 2, ch), |(r, c)| x[[r / 2, c]])
}

pub(crate) fn upsample2_backward(dy: &Array2<f64>) -> Array2<f64> {
    let (rows, ch) = dy.dim();
    Array2::from_shape_fn((rows / 2, ch), |(r, c)| dy[[2 * r, c]] + dy[[2 * r + 1, c]])
}

pub(crate) fn concat_channels(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a.view(), b.view()])
        .expect("row counts agree")
        .as_standard_layout()
        .into_owned()
}

pub(crate) fn split_channels(d: &Array2<f64>, left: usize) -> (Array2<f64>, Array2<f64>) {
    (
        d.slice(s![.., ..left]).to_owned(),
        d.slice(s![.., left..]).to_owned(),
    )
}
