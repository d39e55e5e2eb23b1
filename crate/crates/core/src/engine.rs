//! Sliding-window prediction difference analysis.
//!
//! For every window position the classifier output is averaged over
//! replacements of the window's pixels, the target-class probability shift
//! is turned into a Weight of Evidence, and that value is added to every
//! pixel the window covers.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::classifier::{ClassDistribution, Classifier, Corruption};
use crate::error::{Error, Result};
use crate::imaging::{Image, Rect};
use crate::patch_stats::{sample_inner, ConditioningPlan, PatchGaussian, Sampler};
use crate::rng::{substream, StreamRng};

/// Upper bound on exhaustive assignments per window.
pub const MAX_EXHAUSTIVE_ASSIGNMENTS: usize = 1 << 20;

/// `(p * n + 1) / (n + k)`.
pub fn laplace_correct(p: f64, n: f64, k: f64) -> f64 {
    (p * n + 1.0) / (n + k)
}

fn log2_odds(p: f64) -> f64 {
    (p / (1.0 - p)).log2()
}

/// `log2 odds(p_orig) - log2 odds(p_marg)` after Laplace correction of both.
/// Positive values mean the corrupted region was evidence for the class.
pub fn weight_of_evidence(p_orig: f64, p_marg: f64, n: f64, k: f64) -> f64 {
    log2_odds(laplace_correct(p_orig, n, k)) - log2_odds(laplace_correct(p_marg, n, k))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub win_size: usize,
    pub pad_size: usize,
    pub stride: usize,
    pub samples_per_roi: usize,
    /// Training-set size used for the Laplace correction.
    pub laplace_n: u64,
    pub laplace_k: usize,
    pub seed: u64,
}

impl WindowConfig {
    pub const DEFAULT_WIN: usize = 15;
    pub const DEFAULT_PAD: usize = 2;
    pub const DEFAULT_STRIDE: usize = 1;
    pub const DEFAULT_SAMPLES: usize = 10;

    pub fn new(win_size: usize, laplace_n: u64, laplace_k: usize) -> Self {
        Self {
            win_size,
            pad_size: Self::DEFAULT_PAD,
            stride: Self::DEFAULT_STRIDE,
            samples_per_roi: Self::DEFAULT_SAMPLES,
            laplace_n,
            laplace_k,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.win_size == 0 {
            return bad("win_size must be >= 1");
        }
        if self.stride == 0 {
            return bad("stride must be >= 1");
        }
        if self.samples_per_roi == 0 {
            return bad("samples per ROI must be >= 1");
        }
        if self.laplace_n == 0 {
            return bad("Laplace N must be >= 1");
        }
        if self.laplace_k < 2 {
            return bad("Laplace K must be >= 2");
        }
        Ok(())
    }

    pub fn patch_edge(&self) -> usize {
        self.win_size + 2 * self.pad_size
    }
}

/// Execution knobs that never change results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    /// Worker threads; `None` uses rayon's global pool.
    pub workers: Option<usize>,
    /// Corrupted images per classifier call.
    pub batch_size: usize,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            workers: None,
            batch_size: 64,
        }
    }
}

/// Origins along one axis: multiples of `stride`, plus the last origin that
/// puts the window flush with the far edge.
pub fn axis_origins(len: usize, win: usize, stride: usize) -> Vec<usize> {
    if win == 0 || win > len || stride == 0 {
        return Vec::new();
    }
    let last = len - win;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Window rects in canonical order (row-major over origins).
pub fn window_positions(width: usize, height: usize, win: usize, stride: usize) -> Vec<Rect> {
    let xs = axis_origins(width, win, stride);
    let ys = axis_origins(height, win, stride);
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| Rect::square(x, y, win)))
        .collect()
}

fn axis_coverage(len: usize, win: usize, stride: usize) -> Vec<u32> {
    let mut cov = vec![0u32; len];
    for o in axis_origins(len, win, stride) {
        for c in &mut cov[o..o + win] {
            *c += 1;
        }
    }
    cov
}

/// Number of windows covering each pixel (row-major).
pub fn visit_count_grid(width: usize, height: usize, config: &WindowConfig) -> Result<Vec<u32>> {
    if config.win_size == 0 || config.win_size > width.min(height) || config.stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "window {} with stride {} does not fit a {width}x{height} image",
            config.win_size, config.stride
        )));
    }
    let cx = axis_coverage(width, config.win_size, config.stride);
    let cy = axis_coverage(height, config.win_size, config.stride);
    Ok(cy
        .iter()
        .flat_map(|&a| cx.iter().map(move |&b| a * b))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub class_index: usize,
    pub we_sum: Vec<f64>,
    pub visit_count: Vec<u32>,
    pub config: WindowConfig,
}

impl SaliencyMap {
    pub fn we_at(&self, x: usize, y: usize) -> f64 {
        self.we_sum[y * self.width + x]
    }

    pub fn visits_at(&self, x: usize, y: usize) -> u32 {
        self.visit_count[y * self.width + x]
    }

    /// Share of the total positive evidence that falls inside `rect`
    /// (0 when the map has no positive evidence).
    pub fn positive_mass_fraction(&self, rect: Rect) -> f64 {
        let mut inside = 0.0;
        let mut total = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.we_at(x, y).max(0.0);
                total += v;
                if rect.contains(x, y) {
                    inside += v;
                }
            }
        }
        if total > 0.0 {
            inside / total
        } else {
            0.0
        }
    }
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// `WEM1 width height class win pad stride S N K seed`, then the WE grid, then
/// the visit-count grid, one image row per line.
pub fn write_wem<W: Write>(mut out: W, map: &SaliencyMap) -> Result<()> {
    let c = &map.config;
    writeln!(
        out,
        "WEM1 {} {} {} {} {} {} {} {} {} {}",
        map.width,
        map.height,
        map.class_index,
        c.win_size,
        c.pad_size,
        c.stride,
        c.samples_per_roi,
        c.laplace_n,
        c.laplace_k,
        c.seed
    )?;
    for row in map.we_sum.chunks(map.width) {
        let line: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    for row in map.visit_count.chunks(map.width) {
        let line: Vec<String> = row.iter().map(u32::to_string).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_wem<R: BufRead>(input: R) -> Result<SaliencyMap> {
    let mut tokens: Vec<String> = Vec::new();
    for line in input.lines() {
        tokens.extend(line?.split_whitespace().map(str::to_owned));
    }
    let mut it = tokens.into_iter();
    if it.next().as_deref() != Some("WEM1") {
        return Err(Error::format("WEM1", "missing magic"));
    }
    let mut header = [0u64; 10];
    for (i, slot) in header.iter_mut().enumerate() {
        *slot = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format("WEM1", format!("bad header field {}", i + 1)))?;
    }
    let [w, h, class, win, pad, stride, s, n, k, seed] = header;
    let (w, h) = (w as usize, h as usize);
    let cells = w * h;
    let rest: Vec<String> = it.collect();
    if rest.len() != 2 * cells {
        return Err(Error::format(
            "WEM1",
            format!("expected {} values, found {}", 2 * cells, rest.len()),
        ));
    }
    let we_sum = rest[..cells]
        .iter()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format("WEM1", e.to_string()))?;
    let visit_count = rest[cells..]
        .iter()
        .map(|t| t.parse::<u32>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format("WEM1", e.to_string()))?;
    Ok(SaliencyMap {
        width: w,
        height: h,
        class_index: class as usize,
        we_sum,
        visit_count,
        config: WindowConfig {
            win_size: win as usize,
            pad_size: pad as usize,
            stride: stride as usize,
            samples_per_roi: s as usize,
            laplace_n: n,
            laplace_k: k as usize,
            seed,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiRecord {
    pub rect: Rect,
    /// Marginal probability of the target class with the window corrupted.
    pub marginal: f64,
    pub we: f64,
    /// Corrupted images classified for this window.
    pub evaluations: u64,
}

#[derive(Debug, Clone)]
pub struct AnalysisReport {
    pub map: SaliencyMap,
    pub original: ClassDistribution,
    pub rois: Vec<RoiRecord>,
    pub elapsed: Duration,
    pub classifier_calls: u64,
}

impl AnalysisReport {
    pub fn summary(&self) -> String {
        let p = self.original.get(self.map.class_index);
        let (lo, hi) = self
            .rois
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.we), hi.max(r.we)));
        let c = &self.map.config;
        format!(
            "image {}x{}\nclass_index {}\np_original {p:.17}\nwindows {}\nclassifier_calls {}\n\
             win {} pad {} stride {} samples {} laplace_n {} laplace_k {} seed {}\n\
             roi_we_min {lo:.6}\nroi_we_max {hi:.6}\nelapsed_ms {}\n",
            self.map.width,
            self.map.height,
            self.map.class_index,
            self.rois.len(),
            self.classifier_calls,
            c.win_size,
            c.pad_size,
            c.stride,
            c.samples_per_roi,
            c.laplace_n,
            c.laplace_k,
            c.seed,
            self.elapsed.as_millis()
        )
    }
}

/// Which sides of the padded patch fall outside the image, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Clip {
    left: usize,
    top: usize,
    right: usize,
    bottom: usize,
}

impl Clip {
    fn of(roi: Rect, pad: usize, width: usize, height: usize) -> Self {
        Clip {
            left: pad.saturating_sub(roi.x),
            top: pad.saturating_sub(roi.y),
            right: (roi.x + roi.w + pad).saturating_sub(width),
            bottom: (roi.y + roi.h + pad).saturating_sub(height),
        }
    }
}

/// Produces corrupted replacements for window positions of one image.
struct CorruptionSource<'a> {
    image: &'a Image,
    sampler: &'a Sampler,
    pad: usize,
    samples: usize,
    plans: HashMap<Clip, Arc<ConditioningPlan>>,
}

/// Replacements for one window, with weights for exact enumeration.
struct Draws {
    corruptions: Vec<Corruption>,
    weights: Option<Vec<f64>>,
}

impl<'a> CorruptionSource<'a> {
    fn new(image: &'a Image, sampler: &'a Sampler, win: usize, pad: usize, samples: usize) -> Result<Self> {
        match sampler {
            Sampler::GaussianConditional(pg) => {
                if pg.patch_edge() != win + 2 * pad || pg.channels() != image.channels() {
                    return Err(Error::InvalidArgument(format!(
                        "patch model is {}px x {}ch but window {win} + 2 x pad {pad} on a {}-channel image needs {}px",
                        pg.patch_edge(),
                        pg.channels(),
                        image.channels(),
                        win + 2 * pad
                    )));
                }
            }
            Sampler::Discrete { sampler, exhaustive: true } => {
                let m = win * win * image.channels();
                match sampler.assignment_count(m) {
                    Some(n) if n <= MAX_EXHAUSTIVE_ASSIGNMENTS => {}
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "exhaustive enumeration of {}^{m} assignments is too large",
                            sampler.support().len()
                        )))
                    }
                }
            }
            Sampler::Discrete { .. } => {}
        }
        Ok(Self {
            image,
            sampler,
            pad,
            samples,
            plans: HashMap::new(),
        })
    }

    /// Builds the conditioning plans needed by `rois` ahead of time.
    fn prepare(&mut self, rois: &[Rect]) -> Result<()> {
        let Sampler::GaussianConditional(pg) = self.sampler else {
            return Ok(());
        };
        let (w, h) = (self.image.width(), self.image.height());
        let mut keys: Vec<Clip> = rois.iter().map(|r| Clip::of(*r, self.pad, w, h)).collect();
        keys.sort_by_key(|c| (c.left, c.top, c.right, c.bottom));
        keys.dedup();
        let pad = self.pad;
        let built: Vec<(Clip, Arc<ConditioningPlan>)> = keys
            .into_par_iter()
            .map(|clip| {
                let inner = pg.inner_indices(pad);
                let border = border_indices(pg, pad, clip);
                Ok((clip, Arc::new(ConditioningPlan::new(pg, &inner, &border)?)))
            })
            .collect::<Result<_>>()?;
        self.plans.extend(built);
        Ok(())
    }

    fn draws(&self, roi: Rect, rng: &mut StreamRng) -> Result<Draws> {
        self.image.check_rect(roi)?;
        let m = roi.area() * self.image.channels();
        match self.sampler {
            Sampler::GaussianConditional(pg) => {
                let clip = Clip::of(roi, self.pad, self.image.width(), self.image.height());
                let plan = match self.plans.get(&clip) {
                    Some(p) => p.clone(),
                    None => {
                        let inner = pg.inner_indices(self.pad);
                        Arc::new(ConditioningPlan::new(pg, &inner, &border_indices(pg, self.pad, clip))?)
                    }
                };
                let border_values = self.border_values(pg, roi, plan.border());
                let cond = plan.condition(&border_values)?;
                let corruptions = (0..self.samples)
                    .map(|_| Corruption {
                        rect: roi,
                        values: sample_inner(&cond, rng),
                    })
                    .collect();
                Ok(Draws {
                    corruptions,
                    weights: None,
                })
            }
            Sampler::Discrete {
                sampler,
                exhaustive: false,
            } => Ok(Draws {
                corruptions: (0..self.samples)
                    .map(|_| Corruption {
                        rect: roi,
                        values: sampler.draw(m, rng),
                    })
                    .collect(),
                weights: None,
            }),
            Sampler::Discrete {
                sampler,
                exhaustive: true,
            } => {
                let (corruptions, weights) = sampler
                    .enumerate(m)
                    .map(|(values, w)| (Corruption { rect: roi, values }, w))
                    .unzip();
                Ok(Draws {
                    corruptions,
                    weights: Some(weights),
                })
            }
        }
    }

    fn border_values(&self, pg: &PatchGaussian, roi: Rect, border: &[usize]) -> Vec<f64> {
        let edge = pg.patch_edge();
        let c = pg.channels();
        border
            .iter()
            .map(|&i| {
                let ch = i % c;
                let pix = i / c;
                let (px, py) = (pix % edge, pix / edge);
                // in-bounds by construction of the border set
                let x = roi.x + px - self.pad;
                let y = roi.y + py - self.pad;
                self.image.get(x, y, ch)
            })
            .collect()
    }
}

/// Ring indices of the patch model that land inside the image for `clip`.
fn border_indices(pg: &PatchGaussian, pad: usize, clip: Clip) -> Vec<usize> {
    let edge = pg.patch_edge();
    let win = edge - 2 * pad;
    let mut out = Vec::new();
    for py in clip.top..edge - clip.bottom {
        for px in clip.left..edge - clip.right {
            let in_window = (pad..pad + win).contains(&px) && (pad..pad + win).contains(&py);
            if !in_window {
                for c in 0..pg.channels() {
                    out.push(pg.index(px, py, c));
                }
            }
        }
    }
    out
}

fn reduce(dists: &[ClassDistribution], weights: Option<&[f64]>) -> ClassDistribution {
    match weights {
        Some(ws) => ClassDistribution::mixture(ws.iter().copied().zip(dists)),
        None => {
            let mut acc = vec![0.0; dists[0].len()];
            for d in dists {
                for (a, p) in acc.iter_mut().zip(d.probs()) {
                    *a += p;
                }
            }
            let n = dists.len() as f64;
            ClassDistribution::from_normalized(acc.into_iter().map(|a| (a / n).clamp(0.0, 1.0)).collect())
        }
    }
}

fn classify_in_batches(
    classifier: &dyn Classifier,
    image: &Image,
    corruptions: &[Corruption],
    batch_size: usize,
) -> Result<Vec<ClassDistribution>> {
    let mut out = Vec::with_capacity(corruptions.len());
    for chunk in corruptions.chunks(batch_size.max(1)) {
        let dists = classifier.classify_corrupted(image, chunk)?;
        if dists.len() != chunk.len() {
            return Err(Error::External(format!(
                "classifier returned {} results for {} inputs",
                dists.len(),
                chunk.len()
            )));
        }
        out.extend(dists);
    }
    Ok(out)
}

/// Marginal class distribution with `roi` corrupted: a Monte-Carlo average
/// over `samples` draws, or the exact weighted sum for exhaustive samplers.
pub fn marginal_class_probability(
    classifier: &dyn Classifier,
    image: &Image,
    roi: Rect,
    sampler: &Sampler,
    pad_size: usize,
    samples: usize,
    rng: &mut StreamRng,
) -> Result<ClassDistribution> {
    if roi.w != roi.h {
        return Err(Error::InvalidArgument(format!("ROI {roi} is not square")));
    }
    image.check_rect(roi)?;
    classifier.check_dims(image)?;
    let source = CorruptionSource::new(image, sampler, roi.w, pad_size, samples.max(1))?;
    let draws = source.draws(roi, rng)?;
    let dists = classify_in_batches(classifier, image, &draws.corruptions, ExecOptions::default().batch_size)?;
    Ok(reduce(&dists, draws.weights.as_deref()))
}

/// Full sliding-window analysis of `image` for class `target`.
pub fn analyze(
    classifier: &dyn Classifier,
    image: &Image,
    target: usize,
    config: &WindowConfig,
    sampler: &Sampler,
    exec: &ExecOptions,
) -> Result<AnalysisReport> {
    let start = Instant::now();
    config.validate()?;
    let k = classifier.catalog().len();
    if target >= k {
        return Err(Error::InvalidArgument(format!(
            "target class {target} outside catalog of {k}"
        )));
    }
    if config.laplace_k != k {
        return Err(Error::InvalidArgument(format!(
            "Laplace K={} but the classifier has {k} classes",
            config.laplace_k
        )));
    }
    let (w, h) = (image.width(), image.height());
    if config.win_size > w.min(h) {
        return Err(Error::InvalidArgument(format!(
            "window {} larger than {w}x{h} image",
            config.win_size
        )));
    }
    classifier.check_dims(image)?;
    let original = classifier.classify(image)?;
    let p_orig = original.get(target);

    let rois = window_positions(w, h, config.win_size, config.stride);
    let mut source = CorruptionSource::new(image, sampler, config.win_size, config.pad_size, config.samples_per_roi)?;
    source.prepare(&rois)?;

    let batch = exec.batch_size.max(1);
    let per_unit = if sampler.is_exhaustive() {
        1
    } else {
        (batch / config.samples_per_roi).max(1)
    };
    let units: Vec<(usize, &[Rect])> = rois
        .chunks(per_unit)
        .enumerate()
        .map(|(u, chunk)| (u * per_unit, chunk))
        .collect();

    let (n, kf) = (config.laplace_n as f64, k as f64);
    let evaluate = |&(first, chunk): &(usize, &[Rect])| -> Result<Vec<RoiRecord>> {
        let wrap = |i: usize, e: Error| Error::Roi {
            index: first + i,
            rect: chunk[i],
            source: Box::new(e),
        };
        let mut draws = Vec::with_capacity(chunk.len());
        for (i, roi) in chunk.iter().enumerate() {
            let mut rng = substream(config.seed, (first + i) as u64);
            draws.push(source.draws(*roi, &mut rng).map_err(|e| wrap(i, e))?);
        }
        let all: Vec<Corruption> = draws.iter().flat_map(|d| d.corruptions.iter().cloned()).collect();
        let dists = classify_in_batches(classifier, image, &all, batch).map_err(|e| wrap(0, e))?;
        let mut offset = 0;
        Ok(draws
            .iter()
            .zip(chunk)
            .map(|(d, roi)| {
                let n_draws = d.corruptions.len();
                let marginal = reduce(&dists[offset..offset + n_draws], d.weights.as_deref());
                offset += n_draws;
                let p_marg = marginal.get(target);
                RoiRecord {
                    rect: *roi,
                    marginal: p_marg,
                    we: weight_of_evidence(p_orig, p_marg, n, kf),
                    evaluations: n_draws as u64,
                }
            })
            .collect())
    };

    let per_unit_records: Vec<Vec<RoiRecord>> = if !classifier.concurrent() || exec.workers == Some(1) {
        units.iter().map(evaluate).collect::<Result<_>>()?
    } else if let Some(workers) = exec.workers {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| units.par_iter().map(evaluate).collect::<Result<_>>())?
    } else {
        units.par_iter().map(evaluate).collect::<Result<_>>()?
    };
    let records: Vec<RoiRecord> = per_unit_records.into_iter().flatten().collect();

    // Canonical accumulation in ROI order.
    let mut we_sum = vec![0.0; w * h];
    let mut visit_count = vec![0u32; w * h];
    for r in &records {
        for y in r.rect.y..r.rect.y + r.rect.h {
            let row = y * w;
            for x in r.rect.x..r.rect.x + r.rect.w {
                we_sum[row + x] += r.we;
                visit_count[row + x] += 1;
            }
        }
    }
    let classifier_calls = 1 + records.iter().map(|r| r.evaluations).sum::<u64>();
    Ok(AnalysisReport {
        map: SaliencyMap {
            width: w,
            height: h,
            class_index: target,
            we_sum,
            visit_count,
            config: *config,
        },
        original,
        rois: records,
        elapsed: start.elapsed(),
        classifier_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ClassifierKind, ConstantClassifier, LinearSoftmax, LinearSoftmaxWeights};
    use crate::dataset::ClassCatalog;
    use crate::patch_stats::{fit_patch_gaussian, DiscreteSampler};
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};
    use rand::Rng;

    /// Two classes; p(class 0) equals the value of the single pixel.
    struct PixelValue(ClassCatalog);

    impl Classifier for PixelValue {
        fn catalog(&self) -> &ClassCatalog {
            &self.0
        }
        fn input_dims(&self) -> Option<(usize, usize, usize)> {
            Some((1, 1, 1))
        }
        fn kind(&self) -> ClassifierKind {
            ClassifierKind::Custom
        }
        fn classify_batch(&self, images: &[Image]) -> Result<Vec<ClassDistribution>> {
            images
                .iter()
                .map(|i| ClassDistribution::new(vec![i.pixels()[0], 1.0 - i.pixels()[0]]))
                .collect()
        }
    }

    #[test]
    fn laplace_examples() {
        for n in [1.0, 10.0, 1e6] {
            assert!((laplace_correct(1.0 / 7.0, n, 7.0) - 1.0 / 7.0).abs() < 1e-15);
        }
        assert!((laplace_correct(0.0, 3.0, 7.0) - 0.1).abs() < 1e-15);
        assert!((laplace_correct(1.0, 93.0, 7.0) - 0.94).abs() < 1e-15);
    }

    #[test]
    fn we_examples() {
        assert_eq!(weight_of_evidence(0.3, 0.3, 10.0, 2.0), 0.0);
        // correction is negligible at N = 1e6: log2(4) - log2(1)
        assert!((weight_of_evidence(0.8, 0.5, 1e6, 2.0) - 2.0).abs() < 1e-3);
        let a = weight_of_evidence(0.9, 0.2, 50.0, 7.0);
        assert_eq!(weight_of_evidence(0.2, 0.9, 50.0, 7.0), -a);
        assert!(weight_of_evidence(1.0, 0.0, 5.0, 2.0).is_finite());
    }

    #[test]
    fn origins_touch_far_edge() {
        assert_eq!(axis_origins(10, 3, 4), vec![0, 4, 7]);
        assert_eq!(axis_origins(10, 3, 1).len(), 8);
        assert_eq!(axis_origins(5, 5, 2), vec![0]);
        assert!(axis_origins(4, 5, 1).is_empty());
    }

    #[test]
    fn visit_counts_examples() {
        let cfg = WindowConfig::new(3, 10, 2);
        let grid = visit_count_grid(9, 7, &cfg).unwrap();
        let at = |x: usize, y: usize| grid[y * 9 + x];
        assert_eq!(at(0, 0), 1);
        assert_eq!(at(8, 0), 1);
        assert_eq!(at(0, 6), 1);
        assert_eq!(at(8, 6), 1);
        assert_eq!(at(4, 3), 9);
        let single = visit_count_grid(4, 4, &WindowConfig::new(4, 10, 2)).unwrap();
        assert!(single.iter().all(|&c| c == 1));
        assert!(visit_count_grid(3, 8, &WindowConfig::new(4, 10, 2)).is_err());
    }

    #[test]
    fn constant_classifier_gives_zero_map() {
        let cat = ClassCatalog::numbered(3).unwrap();
        let clf = ConstantClassifier::new(cat, ClassDistribution::new(vec![0.2, 0.5, 0.3]).unwrap()).unwrap();
        let img = Image::filled(6, 5, 1, 0.4).unwrap();
        let mut cfg = WindowConfig::new(2, 100, 3);
        cfg.samples_per_roi = 3;
        let rep = analyze(&clf, &img, 1, &cfg, &Sampler::constant(0.5).unwrap(), &ExecOptions::default()).unwrap();
        assert!(rep.map.we_sum.iter().all(|&v| v == 0.0));
        assert_eq!(rep.map.visit_count, visit_count_grid(6, 5, &cfg).unwrap());
        assert_eq!(rep.rois.len(), 5 * 4);
        assert_eq!(rep.classifier_calls, 1 + 20 * 3);
    }

    #[test]
    fn constant_classifier_marginal() {
        let cat = ClassCatalog::numbered(2).unwrap();
        let d = ClassDistribution::new(vec![0.3, 0.7]).unwrap();
        let clf = ConstantClassifier::new(cat, d.clone()).unwrap();
        let img = Image::filled(4, 4, 1, 0.1).unwrap();
        let s = Sampler::Discrete {
            sampler: DiscreteSampler::uniform(vec![0.0, 1.0]).unwrap(),
            exhaustive: false,
        };
        let m = marginal_class_probability(&clf, &img, Rect::square(1, 1, 2), &s, 0, 5, &mut substream(0, 0)).unwrap();
        assert!((m.get(0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn two_term_average() {
        let clf = PixelValue(ClassCatalog::numbered(2).unwrap());
        let img = Image::filled(1, 1, 1, 0.8).unwrap();
        let s = Sampler::Discrete {
            sampler: DiscreteSampler::uniform(vec![0.0, 1.0]).unwrap(),
            exhaustive: true,
        };
        let m = marginal_class_probability(&clf, &img, Rect::square(0, 0, 1), &s, 0, 1, &mut substream(0, 0)).unwrap();
        assert_eq!(m.probs(), &[0.5, 0.5]);
    }

    fn linear_2x2() -> LinearSoftmax {
        let w = LinearSoftmaxWeights::new(2, 4, vec![1.5, -0.7, 0.3, 2.1, -1.0, 0.4, 0.9, -0.2], vec![0.1, -0.1]).unwrap();
        LinearSoftmax::new(ClassCatalog::numbered(2).unwrap(), w, (2, 2, 1)).unwrap()
    }

    #[test]
    fn exhaustive_matches_hand_enumeration() {
        let clf = linear_2x2();
        let img = Image::new(2, 2, 1, vec![0.9, 0.1, 0.5, 0.3]).unwrap();
        let s = Sampler::Discrete {
            sampler: DiscreteSampler::uniform(vec![0.2, 0.4]).unwrap(),
            exhaustive: true,
        };
        let got = marginal_class_probability(&clf, &img, Rect::square(0, 0, 2), &s, 0, 1, &mut substream(0, 0)).unwrap();
        // oracle: all 16 assignments, each weight 1/16, softmax written out
        let w = clf.weights();
        let mut p0 = 0.0;
        for mask in 0..16u32 {
            let x: Vec<f64> = (0..4).map(|b| if mask >> (3 - b) & 1 == 1 { 0.4 } else { 0.2 }).collect();
            let l0: f64 = w.bias[0] + (0..4).map(|i| w.weights[i] * x[i]).sum::<f64>();
            let l1: f64 = w.bias[1] + (0..4).map(|i| w.weights[4 + i] * x[i]).sum::<f64>();
            p0 += (1.0 / (1.0 + (l1 - l0).exp())) / 16.0;
        }
        assert!((got.get(0) - p0).abs() < 1e-12);
    }

    #[test]
    fn stride_and_parallelism_do_not_change_map() {
        let mut rng = substream(5, 5);
        let (w, h) = (9, 8);
        let weights = LinearSoftmaxWeights::new(
            2,
            w * h,
            (0..2 * w * h).map(|_| rng.random_range(-1.0..1.0)).collect(),
            vec![0.0, 0.0],
        )
        .unwrap();
        let clf = LinearSoftmax::new(ClassCatalog::numbered(2).unwrap(), weights, (w, h, 1)).unwrap();
        let img = Image::new(w, h, 1, (0..w * h).map(|_| rng.random()).collect()).unwrap();
        let corpus: Vec<Image> = (0..4)
            .map(|_| Image::new(w, h, 1, (0..w * h).map(|_| rng.random()).collect()).unwrap())
            .collect();
        let mut cfg = WindowConfig::new(3, 50, 2);
        cfg.pad_size = 1;
        cfg.stride = 2;
        cfg.samples_per_roi = 4;
        cfg.seed = 77;
        let pg = fit_patch_gaussian(&corpus, cfg.patch_edge(), 500, 1e-4, 1).unwrap();
        let sampler = Sampler::gaussian(pg);
        let run = |workers, batch| {
            analyze(&clf, &img, 0, &cfg, &sampler, &ExecOptions { workers: Some(workers), batch_size: batch })
                .unwrap()
                .map
        };
        let a = run(1, 64);
        assert_eq!(a, run(3, 5));
        assert_eq!(a, run(8, 1));
        assert_eq!(a.visit_count, visit_count_grid(w, h, &cfg).unwrap());
    }

    #[test]
    fn mismatched_patch_model_is_rejected() {
        let clf = linear_2x2();
        let img = Image::filled(2, 2, 1, 0.5).unwrap();
        let pg = fit_patch_gaussian(&[img.clone(), Image::filled(2, 2, 1, 0.1).unwrap()], 2, 10, 1e-4, 0).unwrap();
        let mut cfg = WindowConfig::new(1, 10, 2);
        cfg.pad_size = 1;
        let err = analyze(&clf, &img, 0, &cfg, &Sampler::gaussian(pg), &ExecOptions::default());
        assert!(err.is_err());
        cfg.laplace_k = 3;
        assert!(analyze(&clf, &img, 0, &cfg, &Sampler::constant(0.5).unwrap(), &ExecOptions::default()).is_err());
    }

    #[test]
    fn roi_errors_name_the_window() {
        struct FailOnDark(ClassCatalog);
        impl Classifier for FailOnDark {
            fn catalog(&self) -> &ClassCatalog {
                &self.0
            }
            fn input_dims(&self) -> Option<(usize, usize, usize)> {
                None
            }
            fn classify_batch(&self, images: &[Image]) -> Result<Vec<ClassDistribution>> {
                images
                    .iter()
                    .map(|i| {
                        if i.pixels().contains(&0.0) {
                            Err(Error::External("dark pixel".into()))
                        } else {
                            Ok(ClassDistribution::uniform(2))
                        }
                    })
                    .collect()
            }
        }
        let clf = FailOnDark(ClassCatalog::numbered(2).unwrap());
        let img = Image::filled(3, 3, 1, 0.5).unwrap();
        let cfg = WindowConfig::new(1, 10, 2);
        let err = analyze(&clf, &img, 0, &cfg, &Sampler::constant(0.0).unwrap(), &ExecOptions { workers: Some(1), batch_size: 1 })
            .unwrap_err();
        assert!(matches!(err, Error::Roi { index: 0, .. }), "{err}");
    }

    #[test]
    fn wem_round_trip() {
        let map = SaliencyMap {
            width: 3,
            height: 2,
            class_index: 1,
            we_sum: vec![0.1, -2.5e-7, 3.0, 0.0, 1.0 / 3.0, -1.0],
            visit_count: vec![1, 2, 1, 1, 2, 1],
            config: WindowConfig::new(2, 99, 7),
        };
        let mut buf = Vec::new();
        write_wem(&mut buf, &map).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("WEM1 3 2 1 2 2 1 10 99 7 0\n"));
        assert_eq!(read_wem(&buf[..]).unwrap(), map);
        assert!(read_wem(&b"WEM1 1 1 0 1 0 1 1 1 2 0 0.5"[..]).is_err());
    }

    #[test]
    fn positive_mass() {
        let map = SaliencyMap {
            width: 2,
            height: 1,
            class_index: 0,
            we_sum: vec![3.0, -1.0],
            visit_count: vec![1, 1],
            config: WindowConfig::new(1, 1, 2),
        };
        assert_eq!(map.positive_mass_fraction(Rect::square(0, 0, 1)), 1.0);
        assert_eq!(map.positive_mass_fraction(Rect::square(1, 0, 1)), 0.0);
    }

    proptest! {
        #[test]
        fn we_is_antisymmetric_and_monotone(p in 0.0f64..=1.0, q in 0.0f64..=1.0, r in 0.0f64..=1.0, n in 1u32..100_000) {
            let n = n as f64;
            prop_assert_eq!(weight_of_evidence(p, q, n, 7.0), -weight_of_evidence(q, p, n, 7.0));
            prop_assert_eq!(weight_of_evidence(p, p, n, 7.0), 0.0);
            if q < r {
                prop_assert!(weight_of_evidence(p, q, n, 7.0) > weight_of_evidence(p, r, n, 7.0));
            }
            let c = laplace_correct(p, n, 7.0);
            prop_assert!(c > 0.0 && c < 1.0);
        }

        #[test]
        fn visit_mass_equals_positions_times_area(w in 1usize..20, h in 1usize..20, win in 1usize..8, stride in 1usize..5) {
            prop_assume!(win <= w.min(h));
            let mut cfg = WindowConfig::new(win, 1, 2);
            cfg.stride = stride;
            let grid = visit_count_grid(w, h, &cfg).unwrap();
            let positions = window_positions(w, h, win, stride).len();
            prop_assert_eq!(grid.iter().map(|&c| c as usize).sum::<usize>(), positions * win * win);
        }
    }
}
