//! Deep network interpolation: blending parameters of architecture-identical
//! checkpoints, filter correlation analysis and α selection.
//!
//! Coefficients are snapped to a 2⁻⁴⁰ grid so that `1 − α` is exact; the
//! blend itself runs in `f64` and is rounded to `f32` once.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model_io::{compat_check, is_running_stat, Checkpoint, CheckpointMeta};
use crate::tensor::Tensor;
use crate::train::{apply_checkpoint, evaluate_pairs, Pair};

const GRID: f64 = (1u64 << 40) as f64;

/// Tolerance on `Σαᵢ = 1` for multi-way blends.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Correlation measure reported alongside every [`CorrReport`].
pub const CORRELATION_METHOD: &str = "pearson";

pub fn snap_alpha(alpha: f64) -> f64 {
    (alpha * GRID).round() / GRID
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InterpOptions {
    /// When false, entries named `*.bias` are copied from the first checkpoint.
    pub biases: bool,
}

impl Default for InterpOptions {
    fn default() -> Self {
        Self { biases: true }
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

fn check_compatible(models: &[&Checkpoint]) -> Result<()> {
    let first = models[0];
    for m in &models[1..] {
        if m.meta.arch != first.meta.arch || m.meta.arch_config != first.meta.arch_config {
            return Err(Error::Incompatible(format!(
                "architecture `{}` {} vs `{}` {}",
                first.meta.arch, first.meta.arch_config, m.meta.arch, m.meta.arch_config
            )));
        }
        compat_check(&first.params, &m.params).into_result()?;
    }
    Ok(())
}

fn blended_meta(models: &[&Checkpoint], weights: &[f64]) -> CheckpointMeta {
    let first = &models[0].meta;
    let parts: Vec<String> =
        models.iter().zip(weights).map(|(m, w)| format!("{}:{w}", m.meta.provenance)).collect();
    CheckpointMeta {
        provenance: format!("dni({})", parts.join(",")),
        lineage: models.iter().map(|m| m.meta.provenance.clone()).collect(),
        experimental: models[0].params.keys().filter(|n| is_running_stat(n)).cloned().collect(),
        ..first.clone()
    }
}

fn validate_alpha(alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("α = {alpha} outside [0, 1]")));
    }
    Ok(snap_alpha(alpha))
}

/// `θ = α·θ_A + (1 − α)·θ_B` for every entry.
pub fn interpolate(a: &Checkpoint, b: &Checkpoint, alpha: f64) -> Result<Checkpoint> {
    interpolate_with(a, b, alpha, InterpOptions::default())
}

pub fn interpolate_with(a: &Checkpoint, b: &Checkpoint, alpha: f64, opts: InterpOptions) -> Result<Checkpoint> {
    let wa = validate_alpha(alpha)?;
    check_compatible(&[a, b])?;
    let wb = 1.0 - wa;
    let meta = blended_meta(&[a, b], &[wa, wb]);
    let params = a
        .params
        .iter()
        .map(|(name, ta)| {
            let tb = &b.params[name];
            let t = if wa == 1.0 || (!opts.biases && is_bias(name)) {
                ta.clone()
            } else if wa == 0.0 {
                tb.clone()
            } else {
                Tensor::from_fn(ta.shape().to_vec(), |i| {
                    (wa * ta.data()[i] as f64 + wb * tb.data()[i] as f64) as f32
                })
            };
            (name.clone(), t)
        })
        .collect();
    Ok(Checkpoint::new(meta, params))
}

/// Convex combination `Σ αᵢ θᵢ` of any number of compatible checkpoints.
pub fn interpolate_multi(models: &[Checkpoint], alphas: &[f64]) -> Result<Checkpoint> {
    if models.is_empty() || models.len() != alphas.len() {
        return Err(Error::InvalidArgument(format!("{} checkpoints with {} coefficients", models.len(), alphas.len())));
    }
    if alphas.iter().any(|&a| !(a >= 0.0 && a.is_finite())) {
        return Err(Error::InvalidArgument(format!("coefficients must be finite and ≥ 0: {alphas:?}")));
    }
    let sum: f64 = alphas.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidArgument(format!("coefficients sum to {sum}, not 1")));
    }
    if models.len() == 2 {
        return interpolate(&models[0], &models[1], alphas[0]);
    }
    let refs: Vec<&Checkpoint> = models.iter().collect();
    check_compatible(&refs)?;
    let alphas: Vec<f64> = alphas.iter().map(|&a| snap_alpha(a)).collect();
    let meta = blended_meta(&refs, &alphas);
    if let Some(k) = alphas.iter().position(|&a| a == 1.0) {
        return Ok(Checkpoint::new(meta, models[k].params.clone()));
    }
    let params = models[0]
        .params
        .iter()
        .map(|(name, t0)| {
            let tensors: Vec<&Tensor<f32>> = models.iter().map(|m| &m.params[name]).collect();
            let t = Tensor::from_fn(t0.shape().to_vec(), |i| {
                tensors.iter().zip(&alphas).map(|(t, &w)| w * t.data()[i] as f64).sum::<f64>() as f32
            });
            (name.clone(), t)
        })
        .collect();
    Ok(Checkpoint::new(meta, params))
}

// ------------------------------------------------------------------ correlation

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson over unequal lengths");
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

fn weight_name(layer: &str) -> String {
    if layer.ends_with(".weight") {
        layer.to_string()
    } else {
        format!("{layer}.weight")
    }
}

fn layer_of(weight: &str) -> &str {
    weight.strip_suffix(".weight").unwrap_or(weight)
}

fn conv_weight<'a>(c: &'a Checkpoint, layer: &str) -> Result<&'a Tensor<f32>> {
    let name = weight_name(layer);
    let t = c.params.get(&name).ok_or_else(|| Error::Missing(name.clone()))?;
    if t.rank() != 4 {
        return Err(Error::InvalidArgument(format!("`{name}` has rank {}, not a conv weight", t.rank())));
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCorr {
    pub layer: String,
    /// One index per output filter.
    pub indices: Vec<f64>,
}

impl LayerCorr {
    pub fn median(&self) -> f64 {
        median(&self.indices)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-filter correlation between the same conv layer of two checkpoints.
pub fn filter_correlation(a: &Checkpoint, b: &Checkpoint, layer: &str) -> Result<LayerCorr> {
    let (wa, wb) = (conv_weight(a, layer)?, conv_weight(b, layer)?);
    if wa.shape() != wb.shape() {
        return Err(Error::Incompatible(format!("`{layer}`: {:?} vs {:?}", wa.shape(), wb.shape())));
    }
    let per = wa.numel() / wa.shape()[0];
    let indices = wa.data().chunks(per).zip(wb.data().chunks(per)).map(|(x, y)| pearson(x, y)).collect();
    Ok(LayerCorr { layer: layer_of(&weight_name(layer)).to_string(), indices })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrReport {
    pub method: &'static str,
    pub layers: Vec<LayerCorr>,
}

impl CorrReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,filter_index,corr\n");
        for l in &self.layers {
            for (i, c) in l.indices.iter().enumerate() {
                let _ = writeln!(out, "{},{i},{c:.8}", l.layer);
            }
        }
        out
    }

    /// `layer<TAB>median` lines.
    pub fn summary(&self) -> String {
        let mut out = format!("# correlation: {}\n", self.method);
        for l in &self.layers {
            let _ = writeln!(out, "{}\t{:.6}", l.layer, l.median());
        }
        out
    }
}

/// Correlations for one layer, or for every conv layer when `layer` is `None`.
pub fn correlation_report(a: &Checkpoint, b: &Checkpoint, layer: Option<&str>) -> Result<CorrReport> {
    let layers = match layer {
        Some(l) => vec![filter_correlation(a, b, l)?],
        None => a
            .params
            .iter()
            .filter(|(n, t)| n.ends_with(".weight") && t.rank() == 4)
            .map(|(n, _)| filter_correlation(a, b, n))
            .collect::<Result<_>>()?,
    };
    Ok(CorrReport { method: CORRELATION_METHOD, layers })
}

// ------------------------------------------------------------------ α selection

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    /// `(α, PSNR)` in ascending α.
    pub rows: Vec<(f64, f64)>,
    pub best_alpha: f64,
    pub best_psnr: f64,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,psnr\n");
        for (a, p) in &self.rows {
            let _ = writeln!(out, "{a:.6},{p:.6}");
        }
        out
    }
}

/// `0, interval, …, 1`; `interval` must divide 1.
pub fn alpha_grid(interval: f64) -> Result<Vec<f64>> {
    let n = (1.0 / interval).round();
    if !(interval > 0.0 && interval <= 1.0) || (n * interval - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("interval {interval} does not divide 1")));
    }
    let n = n as usize;
    Ok((0..=n).map(|i| snap_alpha(i as f64 / n as f64)).collect())
}

/// Evaluate `score` on `interpolate(a, b, α)` over the grid and keep the
/// smallest α attaining the maximum.
pub fn sweep_alpha_with(
    a: &Checkpoint,
    b: &Checkpoint,
    interval: f64,
    mut score: impl FnMut(&Checkpoint) -> Result<f64>,
) -> Result<SweepReport> {
    let grid = alpha_grid(interval)?;
    check_compatible(&[a, b])?;
    let mut rows = Vec::with_capacity(grid.len());
    for alpha in grid {
        rows.push((alpha, score(&interpolate(a, b, alpha)?)?));
    }
    let (mut best_alpha, mut best_psnr) = rows[0];
    for &(al, p) in &rows[1..] {
        if p > best_psnr {
            (best_alpha, best_psnr) = (al, p);
        }
    }
    Ok(SweepReport { rows, best_alpha, best_psnr })
}

/// PSNR sweep of interpolated checkpoints over validation pairs.
pub fn sweep_alpha(a: &Checkpoint, b: &Checkpoint, pairs: &[Pair], interval: f64) -> Result<SweepReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no validation pairs".into()));
    }
    sweep_alpha_with(a, b, interval, |c| evaluate_pairs(c, pairs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    /// Clamped to `[0, 1]`.
    pub alpha: f64,
    /// Unclamped projection coefficient.
    pub projection: f64,
    /// `‖θ_T − (α·θ_A + (1 − α)·θ_B)‖₂` at the clamped α.
    pub residual: f64,
    /// Per-layer projection coefficients; `None` where A and B agree.
    pub per_layer: Vec<(String, Option<f64>)>,
}

fn projection(a: &[f32], b: &[f32], t: &[f32]) -> (f64, f64) {
    let (mut num, mut den) = (0.0, 0.0);
    for ((&x, &y), &z) in a.iter().zip(b).zip(t) {
        let d = x as f64 - y as f64;
        num += (z as f64 - y as f64) * d;
        den += d * d;
    }
    (num, den)
}

/// Least-squares α placing `target` on the segment from B (α=0) to A (α=1).
pub fn alpha_by_fit(a: &Checkpoint, b: &Checkpoint, target: &Checkpoint) -> Result<FitReport> {
    check_compatible(&[a, b, target])?;
    let (fa, fb, ft) = (a.flat(), b.flat(), target.flat());
    let (num, den) = projection(&fa, &fb, &ft);
    if den == 0.0 {
        return Err(Error::InvalidArgument("checkpoints A and B are identical; α is undetermined".into()));
    }
    let proj = num / den;
    let alpha = proj.clamp(0.0, 1.0);
    let residual = fa
        .iter()
        .zip(&fb)
        .zip(&ft)
        .map(|((&x, &y), &z)| {
            let fit = alpha * x as f64 + (1.0 - alpha) * y as f64;
            (z as f64 - fit).powi(2)
        })
        .sum::<f64>()
        .sqrt();

    let mut groups: Vec<(String, Vec<&str>)> = Vec::new();
    for name in a.params.keys() {
        let layer = name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l);
        match groups.last_mut() {
            Some((l, names)) if l == layer => names.push(name),
            _ => groups.push((layer.to_string(), vec![name])),
        }
    }
    let per_layer = groups
        .into_iter()
        .map(|(layer, names)| {
            let (mut num, mut den) = (0.0, 0.0);
            for n in names {
                let (x, y) = projection(a.params[n].data(), b.params[n].data(), target.params[n].data());
                num += x;
                den += y;
            }
            (layer, (den > 0.0).then(|| num / den))
        })
        .collect();
    Ok(FitReport { alpha, projection: proj, residual, per_layer })
}

// ------------------------------------------------------------------ spatial control

/// Pointwise blend of two network outputs under a mask, each produced with
/// its own interpolation coefficient.
pub fn spatial_blend(
    a: &Checkpoint,
    b: &Checkpoint,
    alpha_fg: f64,
    alpha_bg: f64,
    mask: &Image,
    x: &Image,
) -> Result<Image> {
    if mask.height() != x.height() || mask.width() != x.width() {
        return Err(Error::InvalidArgument(format!(
            "mask {}×{} does not match input {}×{}",
            mask.height(),
            mask.width(),
            x.height(),
            x.width()
        )));
    }
    if mask.channels() != 1 && mask.channels() != x.channels() {
        return Err(Error::InvalidArgument(format!("mask has {} channels, input {}", mask.channels(), x.channels())));
    }
    if mask.data().iter().any(|&m| !(0.0..=1.0).contains(&m)) {
        return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
    }
    let fg = apply_checkpoint(&interpolate(a, b, alpha_fg)?, std::slice::from_ref(x))?.remove(0);
    let bg = apply_checkpoint(&interpolate(a, b, alpha_bg)?, std::slice::from_ref(x))?.remove(0);
    blend(mask, &fg, &bg)
}

/// `M ⊙ fg + (1 − M) ⊙ bg`; a single-channel mask applies to every channel.
pub fn blend(mask: &Image, fg: &Image, bg: &Image) -> Result<Image> {
    fg.same_shape(bg)?;
    let (h, w, c) = fg.dims();
    let mc = mask.channels();
    Ok(Image::from_fn(h, w, c, |y, x, ch| {
        let m = mask.get(y, x, if mc == 1 { 0 } else { ch }) as f64;
        (m * fg.get(y, x, ch) as f64 + (1.0 - m) * bg.get(y, x, ch) as f64) as f32
    }))
}

// ------------------------------------------------------------------ filter export

/// Layout of an exported filter grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterGrid {
    pub count: usize,
    /// Tiles per row and per column (`ceil(√count)`).
    pub side: usize,
    pub tile_h: usize,
    pub tile_w: usize,
}

impl FilterGrid {
    pub const SEPARATOR: f32 = 1.0;

    /// A filter of shape `cin×k×k` becomes a `k × (cin·k)` tile.
    pub fn for_weight(shape: &[usize]) -> Self {
        let side = (1..).find(|s| s * s >= shape[0]).unwrap();
        Self { count: shape[0], side, tile_h: shape[2], tile_w: shape[1] * shape[3] }
    }

    pub fn height(&self) -> usize {
        self.side * self.tile_h + self.side - 1
    }

    pub fn width(&self) -> usize {
        self.side * self.tile_w + self.side - 1
    }

    /// Top-left pixel of tile `i` (row-major).
    pub fn origin(&self, i: usize) -> (usize, usize) {
        ((i / self.side) * (self.tile_h + 1), (i % self.side) * (self.tile_w + 1))
    }

    /// Cut tile `i` back out of a grid image, row-major.
    pub fn tile(&self, img: &Image, i: usize) -> Vec<f32> {
        let (y0, x0) = self.origin(i);
        (0..self.tile_h).flat_map(|y| (0..self.tile_w).map(move |x| (y, x))).map(|(y, x)| img.get(y0 + y, x0 + x, 0)).collect()
    }
}

/// Min-max normalize `v` to `[0, 1]`; constant input maps to 0.5.
pub fn normalize_filter(v: &[f32]) -> Vec<f32> {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.5; v.len()];
    }
    let span = (hi - lo) as f64;
    v.iter().map(|&x| ((x - lo) as f64 / span) as f32).collect()
}

/// Tile image of every filter in a conv layer, each normalized on its own.
pub fn filter_grid(ckpt: &Checkpoint, layer: &str) -> Result<(Image, FilterGrid)> {
    let w = conv_weight(ckpt, layer)?;
    let s = w.shape();
    let (cin, k) = (s[1], s[2]);
    let grid = FilterGrid::for_weight(s);
    let mut img = Image::filled(grid.height(), grid.width(), 1, FilterGrid::SEPARATOR);
    let per = cin * k * k;
    for (i, f) in w.data().chunks(per).enumerate() {
        let norm = normalize_filter(f);
        let (y0, x0) = grid.origin(i);
        let gw = grid.width();
        for c in 0..cin {
            for y in 0..k {
                for x in 0..s[3] {
                    img.data_mut()[(y0 + y) * gw + x0 + c * s[3] + x] = norm[(c * k + y) * s[3] + x];
                }
            }
        }
    }
    // tiles past the last filter stay at the separator value
    Ok((img, grid))
}

/// Write the filter grid of `layer` as a PGM.
pub fn export_filters(ckpt: &Checkpoint, layer: &str, out: &Path) -> Result<FilterGrid> {
    let (img, grid) = filter_grid(ckpt, layer)?;
    img.save(out)?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(entries: &[(&str, Vec<usize>, Vec<f32>)], tag: &str) -> Checkpoint {
        let params = entries
            .iter()
            .map(|(n, s, d)| (n.to_string(), Tensor::new(s.clone(), d.clone()).unwrap()))
            .collect();
        Checkpoint::new(CheckpointMeta { arch: "toy".into(), provenance: tag.into(), ..Default::default() }, params)
    }

    fn scalar(v: f32, tag: &str) -> Checkpoint {
        ckpt(&[("p.weight", vec![1], vec![v])], tag)
    }

    #[test]
    fn scalar_midpoint_and_endpoints() {
        let (a, b) = (scalar(2.0, "A"), scalar(4.0, "B"));
        assert_eq!(interpolate(&a, &b, 0.5).unwrap().params["p.weight"].data(), &[3.0]);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap().params, a.params);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap().params, b.params);
        assert!(interpolate(&a, &b, 1.5).is_err());
        let out = interpolate(&a, &b, 0.25).unwrap();
        assert_eq!(out.meta.lineage, vec!["A".to_string(), "B".to_string()]);
    }

    #[test]
    fn mismatch_lists_offenders() {
        let a = scalar(1.0, "A");
        let b = ckpt(&[("q.weight", vec![1], vec![1.0])], "B");
        let err = interpolate(&a, &b, 0.5).unwrap_err().to_string();
        assert!(err.contains("p.weight") && err.contains("q.weight"), "{err}");
    }

    #[test]
    fn biases_optional() {
        let a = ckpt(&[("l.bias", vec![1], vec![1.0]), ("l.weight", vec![1], vec![0.0])], "A");
        let b = ckpt(&[("l.bias", vec![1], vec![3.0]), ("l.weight", vec![1], vec![2.0])], "B");
        let out = interpolate_with(&a, &b, 0.5, InterpOptions { biases: false }).unwrap();
        assert_eq!(out.params["l.bias"].data(), &[1.0]);
        assert_eq!(out.params["l.weight"].data(), &[1.0]);
    }

    #[test]
    fn multi_cases() {
        let ms = vec![scalar(0.0, "a"), scalar(3.0, "b"), scalar(6.0, "c")];
        let third = 1.0 / 3.0;
        let out = interpolate_multi(&ms, &[third, third, third]).unwrap();
        assert!((out.params["p.weight"].data()[0] - 3.0).abs() < 1e-6);
        assert_eq!(interpolate_multi(&ms, &[0.0, 1.0, 0.0]).unwrap().params, ms[1].params);
        assert!(interpolate_multi(&ms, &[0.5, 0.6, -0.1]).is_err());
        assert!(interpolate_multi(&ms, &[0.5, 0.4, 0.0]).is_err());
        let two = interpolate_multi(&ms[..2], &[0.3, 0.7]).unwrap();
        assert_eq!(two, interpolate(&ms[0], &ms[1], 0.3).unwrap());
    }

    #[test]
    fn running_stats_are_flagged() {
        let a = ckpt(&[("bn.running_mean", vec![1], vec![0.0]), ("bn.weight", vec![1], vec![1.0])], "A");
        let out = interpolate(&a, &a, 0.5).unwrap();
        assert_eq!(out.meta.experimental, vec!["bn.running_mean".to_string()]);
    }

    #[test]
    fn pearson_hand_pair() {
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 9.0]);
        // Σdxdy = 11.5, Σdx² = 5, Σdy² = 26.75
        assert!((r - 11.5 / (5.0f64 * 26.75).sqrt()).abs() < 1e-12, "{r}");
        assert!((r - 0.994377).abs() < 1e-6);
        assert_eq!(pearson(&[1.0, 1.0], &[3.0, 4.0]), 0.0);
        assert_eq!(pearson(&[1.0, 2.0], &[-1.0, -2.0]), -1.0);
    }

    #[test]
    fn correlation_report_layout() {
        let data: Vec<f32> = (0..8).map(|i| (i * i) as f32).collect();
        let a = ckpt(&[("c.weight", vec![2, 1, 2, 2], data.clone()), ("c.bias", vec![2], vec![0.0; 2])], "A");
        let mut b = a.clone();
        b.params.get_mut("c.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = -*v);
        let rep = correlation_report(&a, &b, None).unwrap();
        assert_eq!(rep.to_csv(), "layer,filter_index,corr\nc,0,-1.00000000\nc,1,-1.00000000\n");
        assert!(filter_correlation(&a, &b, "missing").is_err());
        assert!(filter_correlation(&a, &b, "c.bias").is_err());
        assert!(rep.summary().contains("pearson"));
    }

    #[test]
    fn grid_and_sweep_tiebreak() {
        assert_eq!(alpha_grid(0.05).unwrap().len(), 21);
        assert_eq!(alpha_grid(0.1).unwrap().len(), 11);
        assert!(alpha_grid(0.3).is_err());
        let a = scalar(1.0, "A");
        let rep = sweep_alpha_with(&a, &a, 0.25, |_| Ok(7.0)).unwrap();
        assert_eq!(rep.best_alpha, 0.0);
        assert_eq!(rep.to_csv().lines().count(), 6);
        let b = scalar(0.0, "B");
        let peak = sweep_alpha_with(&a, &b, 0.1, |c| Ok(-(c.params["p.weight"].data()[0] as f64 - 0.4).abs())).unwrap();
        assert!((peak.best_alpha - 0.4).abs() < 1e-12);
    }

    #[test]
    fn fit_scalar_hand_case() {
        // A = (1, 0), B = (0, 0), T = (0.25, 5): projection 0.25, residual 5.
        let mk = |x: f32, y: f32, t: &str| ckpt(&[("l.weight", vec![2], vec![x, y])], t);
        let rep = alpha_by_fit(&mk(1.0, 0.0, "A"), &mk(0.0, 0.0, "B"), &mk(0.25, 5.0, "T")).unwrap();
        assert_eq!(rep.alpha, 0.25);
        assert!((rep.residual - 5.0).abs() < 1e-12);
        assert_eq!(rep.per_layer, vec![("l".to_string(), Some(0.25))]);
        let over = alpha_by_fit(&mk(1.0, 0.0, "A"), &mk(0.0, 0.0, "B"), &mk(2.0, 0.0, "T")).unwrap();
        assert_eq!((over.alpha, over.projection), (1.0, 2.0));
        assert!(alpha_by_fit(&mk(1.0, 0.0, "A"), &mk(1.0, 0.0, "B"), &mk(2.0, 0.0, "T")).is_err());
    }

    #[test]
    fn blend_pointwise() {
        let fg = Image::filled(2, 2, 1, 0.8);
        let bg = Image::filled(2, 2, 1, 0.2);
        let mask = Image::new(2, 2, 1, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let out = blend(&mask, &fg, &bg).unwrap();
        assert_eq!(out.data(), &[0.8, 0.2, 0.8, 0.2]);
        let soft = Image::filled(2, 2, 1, 0.37);
        assert_eq!(blend(&soft, &fg, &fg).unwrap(), fg);
    }

    #[test]
    fn filter_grid_layout_and_detile() {
        let mut data: Vec<f32> = (0..5 * 9).map(|i| ((i * 7) % 11) as f32).collect();
        data[9..18].fill(2.0);
        let c = ckpt(&[("conv.weight", vec![5, 1, 3, 3], data.clone())], "A");
        let (img, grid) = filter_grid(&c, "conv").unwrap();
        assert_eq!(grid.side, 3);
        assert_eq!((img.height(), img.width()), (11, 11));
        assert!(grid.tile(&img, 1).iter().all(|&v| v == 0.5));
        for i in 0..5 {
            assert_eq!(grid.tile(&img, i), normalize_filter(&data[i * 9..(i + 1) * 9]));
        }
        assert_eq!(img.get(3, 0, 0), FilterGrid::SEPARATOR);
    }
}
