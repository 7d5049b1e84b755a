//! Linear cluster probe and GradCAM attribution maps.
//!
//! A probe score is linear in the pooled features, so its gradient at the
//! pooled layer is the probe row; GradCAM then backpropagates that row to
//! the two configured conv layers.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::GrayImage;
use crate::ssl::EncoderWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// L2 strength on the standardized-feature weights.
    pub l2: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub memory: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            memory: 10,
        }
    }
}

/// Multinomial logistic map from raw features to cluster scores. Rows of
/// clusters without training samples are zero and listed in `excluded`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub k: usize,
    pub d: usize,
    /// Row-major `k * d`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub excluded: Vec<usize>,
    pub train_accuracy: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LinearProbe {
    pub fn row(&self, cluster: usize) -> &[f64] {
        &self.weights[cluster * self.d..(cluster + 1) * self.d]
    }

    pub fn is_class(&self, cluster: usize) -> bool {
        cluster < self.k && !self.excluded.contains(&cluster)
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        (0..self.k)
            .map(|c| self.bias[c] + self.row(c).iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Highest-scoring trained class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        (0..self.k)
            .filter(|&c| self.is_class(c))
            .fold(None, |best: Option<usize>, c| match best {
                Some(b) if s[b] >= s[c] => Some(b),
                _ => Some(c),
            })
            .expect("at least one class")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with Armijo backtracking. Returns the minimizer,
/// the iteration count and whether the gradient tolerance was met.
fn lbfgs(
    x0: Vec<f64>,
    f: impl Fn(&[f64]) -> (f64, Vec<f64>),
    max_iter: usize,
    tol: f64,
    memory: usize,
) -> (Vec<f64>, usize, bool) {
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    for it in 0..max_iter {
        if dot(&g, &g).sqrt() < tol {
            return (x, it, true);
        }
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let a = dot(s, &q) / dot(y, s);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let scale = 1.0 / dot(&g, &g).sqrt().max(1.0);
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for ((s, y), a) in s_hist.iter().zip(&y_hist).zip(alphas.iter().rev()) {
            let b = dot(y, &q) / dot(y, s);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = 1.0;
        let (x_new, f_new, g_new) = loop {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (fc, gc) = f(&cand);
            if fc <= fx + 1e-4 * step * slope {
                break (cand, fc, gc);
            }
            step *= 0.5;
            if step < 1e-20 {
                return (x, it, false);
            }
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 {
            if s_hist.len() == memory.max(1) {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    let done = dot(&g, &g).sqrt() < tol;
    (x, max_iter, done)
}

/// Fits the probe on row-major `features` (`n * d`) against cluster
/// assignments in `0..k`. Features are standardized internally and the
/// solution is mapped back to raw feature space.
pub fn fit_probe(
    features: &[f64],
    d: usize,
    assignments: &[usize],
    k: usize,
    config: &ProbeConfig,
) -> Result<LinearProbe> {
    let n = assignments.len();
    if d == 0 || features.len() != n * d {
        return Err(Error::Shape {
            expected: format!("{n}x{d} features"),
            actual: format!("{} values", features.len()),
        });
    }
    if n == 0 {
        return Err(Error::invalid("probe needs at least one sample"));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe features".into()));
    }
    let mut counts = vec![0usize; k];
    for &a in assignments {
        if a >= k {
            return Err(Error::invalid(format!("cluster index {a} out of range for k = {k}")));
        }
        counts[a] += 1;
    }
    let classes: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    let excluded: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !excluded.is_empty() {
        log::warn!("probe: clusters without samples excluded: {excluded:?}");
    }
    let class_of: Vec<usize> = {
        let mut m = vec![usize::MAX; k];
        classes.iter().enumerate().for_each(|(i, &c)| m[c] = i);
        m
    };

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for row in features.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    for row in features.chunks_exact(d) {
        for j in 0..d {
            sd[j] += (row[j] - mean[j]).powi(2) / n as f64;
        }
    }
    sd.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let z: Vec<f64> = features
        .chunks_exact(d)
        .flat_map(|row| (0..d).map(|j| (row[j] - mean[j]) / sd[j]).collect::<Vec<_>>())
        .collect();

    let nc = classes.len();
    let lambda = config.l2;
    let objective = |theta: &[f64]| {
        let (w, b) = theta.split_at(nc * d);
        let mut grad = vec![0.0; theta.len()];
        let mut loss = 0.0;
        let mut logits = vec![0.0; nc];
        for (i, row) in z.chunks_exact(d).enumerate() {
            for c in 0..nc {
                logits[c] = b[c] + dot(&w[c * d..(c + 1) * d], row);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let y = class_of[assignments[i]];
            loss += max + sum.ln() - logits[y];
            for c in 0..nc {
                let p = (logits[c] - max).exp() / sum - if c == y { 1.0 } else { 0.0 };
                let gw = &mut grad[c * d..(c + 1) * d];
                gw.iter_mut().zip(row).for_each(|(g, v)| *g += p * v / n as f64);
                grad[nc * d + c] += p / n as f64;
            }
        }
        loss /= n as f64;
        loss += 0.5 * lambda * dot(w, w);
        for (g, wi) in grad[..nc * d].iter_mut().zip(w) {
            *g += lambda * wi;
        }
        (loss, grad)
    };
    let (theta, iterations, converged) = lbfgs(
        vec![0.0; nc * d + nc],
        objective,
        config.max_iterations,
        config.gradient_tolerance,
        config.memory,
    );
    if !converged {
        log::warn!("probe: gradient tolerance not reached after {iterations} iterations");
    }

    let mut weights = vec![0.0; k * d];
    let mut bias = vec![0.0; k];
    for (ci, &c) in classes.iter().enumerate() {
        let w = &theta[ci * d..(ci + 1) * d];
        let mut shift = 0.0;
        for j in 0..d {
            weights[c * d + j] = w[j] / sd[j];
            shift += w[j] * mean[j] / sd[j];
        }
        bias[c] = theta[nc * d + ci] - shift;
    }
    let mut probe = LinearProbe {
        k,
        d,
        weights,
        bias,
        excluded,
        train_accuracy: 0.0,
        iterations,
        converged,
    };
    let correct = features
        .chunks_exact(d)
        .zip(assignments)
        .filter(|(row, &a)| probe.predict(row) == a)
        .count();
    probe.train_accuracy = correct as f64 / n as f64;
    Ok(probe)
}

/// GradCAM map at the input image's resolution, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub image_id: String,
    pub cluster: usize,
    pub layers: Vec<String>,
    pub map: GrayImage,
}

/// Per-layer GradCAM channel weights: the spatial mean of the probe-score
/// gradient with respect to each channel's post-ReLU activation.
pub struct CamLayers {
    pub channel_weights: Vec<Vec<f64>>,
    /// Rectified weighted activation sums at layer resolution.
    pub layer_maps: Vec<(usize, usize, Vec<f64>)>,
}

fn check_cluster(probe: &LinearProbe, weights: &EncoderWeights, cluster: usize) -> Result<()> {
    if !probe.is_class(cluster) {
        return Err(Error::invalid(format!("cluster {cluster} is not a probe class")));
    }
    if probe.d != weights.encoder.feature_dim() {
        return Err(Error::Shape {
            expected: format!("{}-dimensional probe", weights.encoder.feature_dim()),
            actual: format!("{}", probe.d),
        });
    }
    Ok(())
}

pub fn cam_layers(weights: &EncoderWeights, probe: &LinearProbe, image: &GrayImage, cluster: usize) -> Result<CamLayers> {
    check_cluster(probe, weights, cluster)?;
    let enc = &weights.encoder;
    let trace = enc.forward(&weights.params, image);
    let act_grads = enc.backward_from_pooled(&weights.params, &trace, probe.row(cluster), None, true);
    let mut channel_weights = Vec::new();
    let mut layer_maps = Vec::new();
    for id in &enc.spec.attribution_layers {
        let li = enc.spec.conv_index(id)?;
        let (c, h, w) = enc.layer_shape(li);
        let area = h * w;
        let grads = &act_grads[li];
        let acts = &trace.activations[li];
        let alpha: Vec<f64> = grads
            .chunks_exact(area)
            .map(|ch| ch.iter().sum::<f64>() / area as f64)
            .collect();
        let mut map = vec![0.0; area];
        for ch in 0..c {
            let a = &acts[ch * area..(ch + 1) * area];
            map.iter_mut().zip(a).for_each(|(m, v)| *m += alpha[ch] * v);
        }
        map.iter_mut().for_each(|v| *v = v.max(0.0));
        channel_weights.push(alpha);
        layer_maps.push((h, w, map));
    }
    Ok(CamLayers {
        channel_weights,
        layer_maps,
    })
}

/// Bilinear upsampling with pixel-centre alignment and edge clamping.
pub fn upsample_bilinear(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let c = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, c - lo as f64)
    };
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out[y * out_w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

pub fn gradcam(
    weights: &EncoderWeights,
    probe: &LinearProbe,
    image_id: &str,
    image: &GrayImage,
    cluster: usize,
) -> Result<AttributionMap> {
    let cam = cam_layers(weights, probe, image, cluster)?;
    let (h, w) = image.dims();
    let mut combined = vec![0.0; h * w];
    for (lh, lw, m) in &cam.layer_maps {
        let up = upsample_bilinear(m, *lh, *lw, h, w);
        combined.iter_mut().zip(&up).for_each(|(c, u)| *c += u / cam.layer_maps.len() as f64);
    }
    let max = combined.iter().copied().fold(0.0, f64::max);
    let data = combined
        .iter()
        .map(|&v| if max > 0.0 { (v / max) as f32 } else { 0.0 })
        .collect();
    Ok(AttributionMap {
        image_id: image_id.to_owned(),
        cluster,
        layers: weights.encoder.spec.attribution_layers.to_vec(),
        map: GrayImage::from_vec(h, w, data)?,
    })
}

/// Fraction of the top-decile attribution mass (the `ceil(N/10)` highest
/// pixels) that falls inside `region`. `None` for a zero map.
pub fn top_decile_fraction(map: &[f32], region: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b)));
    let top = &order[..map.len().div_ceil(10)];
    let total: f64 = top.iter().map(|&i| map[i] as f64).sum();
    if total <= 0.0 {
        return None;
    }
    let inside: f64 = top.iter().filter(|&&i| region[i]).map(|&i| map[i] as f64).sum();
    Some(inside / total)
}

/// Map blended over the image in red, alpha `0.5 * map`, as 8-bit RGB.
pub fn write_overlay_png(image: &GrayImage, map: &GrayImage, path: &Path) -> Result<()> {
    if image.dims() != map.dims() {
        return Err(Error::Shape {
            expected: format!("{}x{}", image.height, image.width),
            actual: format!("{}x{}", map.height, map.width),
        });
    }
    let mut rgb = Vec::with_capacity(3 * image.data.len());
    for (&g, &m) in image.data.iter().zip(&map.data) {
        let a = 0.5 * m.clamp(0.0, 1.0);
        let g = g.clamp(0.0, 1.0);
        for c in [1.0f32, 0.0, 0.0] {
            rgb.push((((1.0 - a) * g + a * c) * 255.0).round() as u8);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    w.write_image_data(&rgb).map_err(|e| Error::Png(e.to_string()))?;
    w.finish().map_err(|e| Error::Png(e.to_string()))
}

pub struct AttributionItem<'a> {
    pub image_id: &'a str,
    pub image: &'a GrayImage,
    pub cluster: usize,
}

#[derive(Debug, Default)]
pub struct BatchReport {
    pub written: Vec<PathBuf>,
    pub failures: Vec<(String, String)>,
}

/// Writes `<id>.attr.png` and `<id>.overlay.png` per item into `out_dir`.
/// Per-image failures are logged and collected, not fatal.
pub fn batch_attribute(
    weights: &EncoderWeights,
    probe: &LinearProbe,
    items: &[AttributionItem<'_>],
    out_dir: &Path,
    exec: Exec,
) -> BatchReport {
    let results = exec.map_slice(items, |item| -> Result<PathBuf> {
        let a = gradcam(weights, probe, item.image_id, item.image, item.cluster)?;
        let p = out_dir.join(format!("{}.attr.png", item.image_id));
        a.map.save_png(&p)?;
        write_overlay_png(item.image, &a.map, &out_dir.join(format!("{}.overlay.png", item.image_id)))?;
        Ok(p)
    });
    let mut report = BatchReport::default();
    for (item, r) in items.iter().zip(results) {
        match r {
            Ok(p) => report.written.push(p),
            Err(e) => {
                log::warn!("attribution failed for {}: {e}", item.image_id);
                report.failures.push((item.image_id.to_owned(), e.to_string()));
            }
        }
    }
    report
}
