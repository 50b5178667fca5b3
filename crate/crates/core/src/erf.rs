//! Effective receptive field probing.
//!
//! A unit gradient is injected at the central output voxel of every channel
//! and `|∂y/∂x|` (summed over input channels) is averaged over standard-normal
//! inputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::{Graph, Var};
use crate::conv3d::DepthwiseKernel;
use crate::error::{Error, Result};
use crate::export::{fmt_e12, normalize_to_u8, pgm_bytes, write_text};
use crate::rt3d;
use crate::tensor::{seeded_normal, Rng, Tensor};

pub const DEFAULT_SAMPLES: usize = 32;

/// A differentiable volume-to-volume map that can be probed.
pub trait ErfModel {
    fn build(&self, g: &mut Graph, x: Var) -> Result<Var>;

    fn describe(&self) -> String;
}

/// Stacked "same"-padded depthwise convolutions, optionally with GELU between
/// layers.
#[derive(Debug, Clone)]
pub struct DwStack {
    pub kernels: Vec<DepthwiseKernel>,
    pub gelu: bool,
}

impl DwStack {
    pub fn linear(kernels: Vec<DepthwiseKernel>) -> Self {
        Self { kernels, gelu: false }
    }

    /// Parses a comma-separated layer list such as `ones3,ones3` or
    /// `uniform7@0.05`. Each layer is `<init><k>[@β]` with init one of
    /// `ones`, `delta`, `normal`, `uniform` (on [0.1, 1)); the `@β` suffix
    /// multiplies the kernel by the distance-decay prior with that β.
    pub fn from_spec(spec: &str, channels: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let mut kernels = Vec::new();
        for layer in spec.split(',').map(str::trim) {
            let bad = || Error::Config(format!("bad layer `{layer}` in model spec `{spec}`"));
            let (body, beta) = match layer.split_once('@') {
                Some((b, beta)) => (b, Some(beta.parse::<f64>().map_err(|_| bad())?)),
                None => (layer, None),
            };
            let split = body.find(|c: char| c.is_ascii_digit()).ok_or_else(bad)?;
            let (init, k) = body.split_at(split);
            let k: usize = k.parse().map_err(|_| bad())?;
            crate::conv3d::check_odd(k)?;
            let shape = [channels, 1, k, k, k];
            let mut w = match init {
                "ones" => Tensor::ones(&shape),
                "delta" => DepthwiseKernel::delta(channels, k)?.into_weights(),
                "normal" => seeded_normal(&mut rng, &shape),
                "uniform" => Tensor::new(shape.to_vec(), (0..channels * k * k * k).map(|_| rng.uniform_range(0.1, 1.0)).collect())?,
                _ => return Err(bad()),
            };
            if let Some(beta) = beta {
                let d = crate::lrbm::distance_map(k)?;
                w = w.mul(&crate::lrbm::prior_mask(&d, beta, channels)?.p)?;
            }
            kernels.push(DepthwiseKernel::new(w)?);
        }
        Ok(Self::linear(kernels))
    }
}

impl ErfModel for DwStack {
    fn build(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, k) in self.kernels.iter().enumerate() {
            let w = g.constant(k.weights().clone());
            h = g.dwconv3d(h, w, k.padding())?;
            if self.gelu && i + 1 < self.kernels.len() {
                h = g.gelu(h)?;
            }
        }
        Ok(h)
    }

    fn describe(&self) -> String {
        let sizes: Vec<String> = self.kernels.iter().map(|k| k.kernel_size().to_string()).collect();
        format!("dwstack(k={}, gelu={})", sizes.join("+"), self.gelu)
    }
}

/// Mean input-gradient magnitude, shape `[D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErfMap {
    pub values: Tensor,
    /// Standard error of the mean per voxel.
    pub std_err: Tensor,
    pub n_samples: usize,
    pub seed: u64,
    pub description: String,
}

impl ErfMap {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[0], s[1], s[2]]
    }

    pub fn center(&self) -> [usize; 3] {
        self.dims().map(|d| (d - 1) / 2)
    }

    pub fn max(&self) -> f64 {
        self.values.data().iter().cloned().fold(0.0, f64::max)
    }
}

fn check_odd_volume(shape: &[usize], what: &str) -> Result<()> {
    if shape.len() != 5 || shape[0] != 1 || shape[2..].iter().any(|&d| d % 2 == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{what} must be [1, C, D, H, W] with odd spatial sizes"),
        });
    }
    Ok(())
}

/// Unit upstream gradient at the central voxel of every output channel.
fn center_seed(out_shape: &[usize]) -> Result<Tensor> {
    check_odd_volume(out_shape, "model output")?;
    let mut seed = Tensor::zeros(out_shape);
    let [d, h, w] = [out_shape[2], out_shape[3], out_shape[4]].map(|v| (v - 1) / 2);
    for c in 0..out_shape[1] {
        let o = seed.offset(&[0, c, d, h, w]);
        seed.data_mut()[o] = 1.0;
    }
    Ok(seed)
}

/// `Σ_c |∂(Σ_c' y[c', center])/∂x[c]|` for one input.
pub fn erf_single(model: &dyn ErfModel, x: &Tensor) -> Result<Tensor> {
    check_odd_volume(x.shape(), "input")?;
    let mut g = Graph::new();
    let xv = g.param("x", x.clone())?;
    let y = model.build(&mut g, xv)?;
    let seed = center_seed(g.value(y).shape())?;
    let grads = g.backward_with_seed(y, seed)?;
    let dx = grads.get("x")?;
    let (c, v) = (x.shape()[1], x.shape()[2] * x.shape()[3] * x.shape()[4]);
    let mut out = vec![0.0; v];
    for ch in 0..c {
        for (o, g) in out.iter_mut().zip(&dx.data()[ch * v..(ch + 1) * v]) {
            *o += g.abs();
        }
    }
    Tensor::new(x.shape()[2..].to_vec(), out)?.check_finite("erf_single")
}

/// Averages [`erf_single`] over `n_samples` standard-normal inputs of
/// `input_shape`, in sample order.
pub fn erf_accumulate(model: &dyn ErfModel, input_shape: &[usize], n_samples: usize, seed: u64) -> Result<ErfMap> {
    check_odd_volume(input_shape, "input")?;
    if n_samples == 0 {
        return Err(Error::Config("ERF needs at least one sample".into()));
    }
    let mut rng = Rng::new(seed);
    let spatial = &input_shape[2..];
    let mut sum = Tensor::zeros(spatial);
    let mut sq = Tensor::zeros(spatial);
    for _ in 0..n_samples {
        let x = seeded_normal(&mut rng, input_shape);
        let e = erf_single(model, &x)?;
        for ((s, q), v) in sum.data_mut().iter_mut().zip(sq.data_mut()).zip(e.data()) {
            *s += v;
            *q += v * v;
        }
    }
    let n = n_samples as f64;
    let values = sum.scale(1.0 / n)?;
    let std_err = values.zip_map(&sq, "erf_accumulate", |m, q| {
        let var = (q / n - m * m).max(0.0);
        if n_samples > 1 {
            (var * n / (n - 1.0) / n).sqrt()
        } else {
            0.0
        }
    })?;
    Ok(ErfMap {
        values,
        std_err,
        n_samples,
        seed,
        description: model.describe(),
    })
}

/// Voxels whose center output depends on them, found by perturbing each input
/// voxel (all channels) by `delta` and re-running the forward pass. Probe
/// around a small input: a saturated GELU can hide a real dependence.
pub fn brute_force_support(model: &dyn ErfModel, x: &Tensor, delta: f64) -> Result<Vec<bool>> {
    check_odd_volume(x.shape(), "input")?;
    let forward = |t: &Tensor| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(t.clone());
        let y = model.build(&mut g, xv)?;
        let out = g.value(y);
        check_odd_volume(out.shape(), "model output")?;
        let [d, h, w] = [out.shape()[2], out.shape()[3], out.shape()[4]].map(|v| (v - 1) / 2);
        Ok((0..out.shape()[1]).map(|c| out.at(&[0, c, d, h, w])).collect())
    };
    let base = forward(x)?;
    let (c, v) = (x.shape()[1], x.shape()[2] * x.shape()[3] * x.shape()[4]);
    let mut probe = x.clone();
    let mut support = vec![false; v];
    for (i, s) in support.iter_mut().enumerate() {
        for ch in 0..c {
            probe.data_mut()[ch * v + i] += delta;
        }
        let y = forward(&probe)?;
        *s = y.iter().zip(&base).any(|(a, b)| a != b);
        probe.data_mut().copy_from_slice(x.data());
    }
    Ok(support)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadialBin {
    /// Bin `r` collects distances in `[r, r + 1)`.
    pub radius: usize,
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErfSupport {
    pub mask: Vec<bool>,
    pub voxels: Vec<[usize; 3]>,
    /// Inclusive `(min, max)` corners of the support.
    pub bbox: ([usize; 3], [usize; 3]),
    pub radial_profile: Vec<RadialBin>,
}

impl ErfSupport {
    pub fn bbox_extent(&self) -> [usize; 3] {
        let (lo, hi) = self.bbox;
        [0, 1, 2].map(|a| hi[a] - lo[a] + 1)
    }
}

fn voxel_distance(idx: [usize; 3], center: [usize; 3]) -> f64 {
    let d: f64 = (0..3).map(|a| (idx[a] as f64 - center[a] as f64).powi(2)).sum();
    d.sqrt()
}

fn voxels(dims: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    (0..dims[0]).flat_map(move |i| (0..dims[1]).flat_map(move |j| (0..dims[2]).map(move |l| [i, j, l])))
}

/// Nonzero voxels with value `≥ rel_threshold · max`, plus their bounding box
/// and the radial profile of the whole map.
pub fn erf_support(m: &ErfMap, rel_threshold: f64) -> Result<ErfSupport> {
    let max = m.max();
    if !(max > 0.0) {
        return Err(Error::Config("ERF map is all zero".into()));
    }
    let dims = m.dims();
    let cut = rel_threshold * max;
    let mut mask = Vec::with_capacity(m.values.len());
    let mut vox = Vec::new();
    let mut lo = dims;
    let mut hi = [0; 3];
    for (idx, &v) in voxels(dims).zip(m.values.data()) {
        let inside = v > 0.0 && v >= cut;
        mask.push(inside);
        if inside {
            vox.push(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(idx[a]);
                hi[a] = hi[a].max(idx[a]);
            }
        }
    }
    Ok(ErfSupport {
        mask,
        voxels: vox,
        bbox: (lo, hi),
        radial_profile: radial_profile(m),
    })
}

pub fn radial_profile(m: &ErfMap) -> Vec<RadialBin> {
    let center = m.center();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for (idx, &v) in voxels(m.dims()).zip(m.values.data()) {
        let r = voxel_distance(idx, center).floor() as usize;
        if sums.len() <= r {
            sums.resize(r + 1, (0.0, 0));
        }
        sums[r].0 += v;
        sums[r].1 += 1;
    }
    sums.into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(radius, (s, count))| RadialBin {
            radius,
            mean: s / count as f64,
            count,
        })
        .collect()
}

/// Smallest Euclidean distance `r` from the center such that voxels within
/// `r` hold at least `fraction` of the total mass.
pub fn mass_radius(m: &ErfMap, fraction: f64) -> Result<f64> {
    let center = m.center();
    let mut pts: Vec<(f64, f64)> = voxels(m.dims())
        .zip(m.values.data())
        .map(|(idx, &v)| (voxel_distance(idx, center), v))
        .collect();
    let total: f64 = pts.iter().map(|p| p.1).sum();
    if !(total > 0.0) {
        return Err(Error::Config("ERF map is all zero".into()));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = 0.0;
    let mut i = 0;
    while i < pts.len() {
        let r = pts[i].0;
        while i < pts.len() && pts[i].0 == r {
            acc += pts[i].1;
            i += 1;
        }
        if acc >= fraction * total {
            return Ok(r);
        }
    }
    Ok(pts.last().map_or(0.0, |p| p.0))
}

/// Central slice perpendicular to `axis`, row-major `(rows, cols, values)`.
pub fn central_slice(m: &ErfMap, axis: usize) -> Result<(usize, usize, Vec<f64>)> {
    if axis > 2 {
        return Err(Error::InvalidAxes {
            axes: vec![axis],
            rank: 3,
        });
    }
    let dims = m.dims();
    let c = m.center()[axis];
    let (ra, ca) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut vals = Vec::with_capacity(dims[ra] * dims[ca]);
    for r in 0..dims[ra] {
        for col in 0..dims[ca] {
            let mut idx = [0; 3];
            idx[axis] = c;
            idx[ra] = r;
            idx[ca] = col;
            vals.push(m.values.at(&idx));
        }
    }
    Ok((dims[ra], dims[ca], vals))
}

/// Writes `{prefix}_slice{axis}.pgm`, `{prefix}_slice{axis}.csv`,
/// `{prefix}_radial.csv` and `{prefix}.rt3d`; returns the paths.
pub fn export_slices(m: &ErfMap, axis: usize, prefix: &Path) -> Result<Vec<PathBuf>> {
    let (rows, cols, vals) = central_slice(m, axis)?;
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    let pgm = with(&format!("_slice{axis}.pgm"));
    std::fs::write(&pgm, pgm_bytes(cols, rows, &normalize_to_u8(&vals))?)?;

    let mut csv = String::from("row,col,value\n");
    for r in 0..rows {
        for c in 0..cols {
            let _ = writeln!(csv, "{r},{c},{}", fmt_e12(vals[r * cols + c]));
        }
    }
    let slice_csv = with(&format!("_slice{axis}.csv"));
    write_text(&slice_csv, &csv)?;

    let mut radial = String::from("radius,mean,count\n");
    for b in radial_profile(m) {
        let _ = writeln!(radial, "{},{},{}", b.radius, fmt_e12(b.mean), b.count);
    }
    let radial_csv = with("_radial.csv");
    write_text(&radial_csv, &radial)?;

    let full = with(".rt3d");
    rt3d::write(&full, &m.values)?;
    Ok(vec![pgm, slice_csv, radial_csv, full])
}
