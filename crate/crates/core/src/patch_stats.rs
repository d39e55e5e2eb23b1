//! Gaussian patch model, conditioning on a patch's padding ring, and samplers
//! for the corrupted window.
//!
//! A single location-independent Gaussian is fitted over square patches of
//! edge `win + 2 * pad`. For a window position the inner `win x win` block is
//! conditioned on the in-bounds part of the surrounding ring:
//!
//! ```text
//! mean = mu_a + S_ab S_bb^-1 (x_b - mu_b)
//! cov  = S_aa - S_ab S_bb^-1 S_ba
//! ```
//!
//! `S_bb` is only ever factorized, never inverted.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::imaging::{clamp_unit, Image};
use crate::rng::{substream, StreamRng};

pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGaussian {
    patch_edge: usize,
    channels: usize,
    mean: Vec<f64>,
    covariance: DMatrix<f64>,
    epsilon: f64,
    sample_count: usize,
}

impl PatchGaussian {
    pub fn new(
        patch_edge: usize,
        channels: usize,
        mean: Vec<f64>,
        covariance: DMatrix<f64>,
        epsilon: f64,
        sample_count: usize,
    ) -> Result<Self> {
        let m = patch_edge * patch_edge * channels;
        if patch_edge == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::InvalidArgument(format!(
                "bad patch geometry edge={patch_edge} channels={channels}"
            )));
        }
        if mean.len() != m || covariance.nrows() != m || covariance.ncols() != m {
            return Err(Error::InvalidArgument(format!(
                "patch model of dimension {m} got mean {} and covariance {}x{}",
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite patch statistics".into()));
        }
        for i in 0..m {
            for j in 0..i {
                let (a, b) = (covariance[(i, j)], covariance[(j, i)]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::InvalidArgument(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self {
            patch_edge,
            channels,
            mean,
            covariance,
            epsilon,
            sample_count,
        })
    }

    pub fn patch_edge(&self) -> usize {
        self.patch_edge
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Flattened dimension `edge^2 * channels`.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Flattened index of `(x, y, c)` inside the patch.
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.patch_edge + x) * self.channels + c
    }

    /// Indices of the centered `win x win` block left by a padding of `pad`.
    pub fn inner_indices(&self, pad: usize) -> Vec<usize> {
        let win = self.patch_edge.saturating_sub(2 * pad);
        let mut out = Vec::with_capacity(win * win * self.channels);
        for y in pad..pad + win {
            for x in pad..pad + win {
                for c in 0..self.channels {
                    out.push(self.index(x, y, c));
                }
            }
        }
        out
    }

    /// Complement of `inner` in ascending order.
    pub fn complement(&self, inner: &[usize]) -> Vec<usize> {
        let mut mask = vec![false; self.dim()];
        for &i in inner {
            mask[i] = true;
        }
        (0..self.dim()).filter(|&i| !mask[i]).collect()
    }

    fn submatrix(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.covariance[(rows[i], cols[j])])
    }
}

/// Fits one Gaussian over `patch_edge`-square patches of the corpus.
///
/// When the corpus has at most `max_patches` patch positions all of them are
/// used in order; otherwise `max_patches` positions are drawn uniformly
/// (with replacement) from the seed. Covariance uses the `n - 1` divisor
/// and gets `epsilon * I` added.
pub fn fit_patch_gaussian(
    corpus: &[Image],
    patch_edge: usize,
    max_patches: usize,
    epsilon: f64,
    seed: u64,
) -> Result<PatchGaussian> {
    let first = corpus
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty corpus".into()))?;
    if patch_edge == 0 {
        return Err(Error::InvalidArgument("patch edge must be positive".into()));
    }
    if max_patches < 2 {
        return Err(Error::InvalidArgument("max_patches must be at least 2".into()));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge epsilon {epsilon} must be >= 0")));
    }
    let channels = first.channels();
    let mut positions_per_image = Vec::with_capacity(corpus.len());
    for img in corpus {
        if img.width() < patch_edge || img.height() < patch_edge {
            return Err(Error::InvalidArgument(format!(
                "corpus image {}x{} smaller than patch edge {patch_edge}",
                img.width(),
                img.height()
            )));
        }
        if img.channels() != channels {
            return Err(Error::InvalidArgument("corpus mixes channel counts".into()));
        }
        positions_per_image.push((img.width() - patch_edge + 1) * (img.height() - patch_edge + 1));
    }
    let total: usize = positions_per_image.iter().sum();
    let picks: Vec<usize> = if total <= max_patches {
        (0..total).collect()
    } else {
        let mut rng = substream(seed, 0);
        (0..max_patches).map(|_| rng.random_range(0..total)).collect()
    };
    if picks.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "corpus yields only {} patch(es); need at least 2",
            picks.len()
        )));
    }

    let m = patch_edge * patch_edge * channels;
    let n = picks.len();
    let mut data = DMatrix::<f64>::zeros(n, m);
    for (row, &global) in picks.iter().enumerate() {
        let mut idx = global;
        let mut img_i = 0;
        while idx >= positions_per_image[img_i] {
            idx -= positions_per_image[img_i];
            img_i += 1;
        }
        let img = &corpus[img_i];
        let span = img.width() - patch_edge + 1;
        let (x0, y0) = (idx % span, idx / span);
        let mut col = 0;
        for y in y0..y0 + patch_edge {
            for x in x0..x0 + patch_edge {
                for c in 0..channels {
                    data[(row, col)] = img.get(x, y, c);
                    col += 1;
                }
            }
        }
    }
    let mean: Vec<f64> = (0..m).map(|j| data.column(j).sum() / n as f64).collect();
    for (j, &mu) in mean.iter().enumerate() {
        for v in data.column_mut(j).iter_mut() {
            *v -= mu;
        }
    }
    let mut cov = data.tr_mul(&data) / (n - 1) as f64;
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        cov[(i, i)] += epsilon;
    }
    PatchGaussian::new(patch_edge, channels, mean, cov, epsilon, n)
}

/// Lower Cholesky factor of a symmetric matrix.
///
/// Strict mode fails on the first non-positive pivot. Semidefinite mode
/// treats pivots below `1e-12 * max diagonal` as exact zeros and zeroes the
/// corresponding column, which yields a valid square-root factor of a PSD
/// matrix.
pub fn cholesky_lower(a: &DMatrix<f64>, semidefinite: bool) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::InvalidArgument("Cholesky needs a square matrix".into()));
    }
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale;
    // Column-major upper factor U (U^T U = A): column j of U is contiguous.
    let mut u = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..=j {
            let (ci, cj) = (i * n, j * n);
            let mut s = a[(i, j)];
            for k in 0..i {
                s -= u[ci + k] * u[cj + k];
            }
            if i == j {
                if !s.is_finite() || (!semidefinite && s <= 0.0) {
                    return Err(Error::SingularCovariance { index: j, pivot: s });
                }
                u[cj + j] = if s > tol { s.sqrt() } else { 0.0 };
            } else {
                let d = u[ci + i];
                u[cj + i] = if d > 0.0 { s / d } else { 0.0 };
            }
        }
    }
    // U stored column-major equals L stored row-major.
    Ok(DMatrix::from_row_slice(n, n, &u))
}

/// Everything about conditioning that depends only on which indices are
/// inner and which border values are available.
#[derive(Debug, Clone)]
pub struct ConditioningPlan {
    inner: Arc<[usize]>,
    border: Vec<usize>,
    mu_inner: DVector<f64>,
    mu_border: DVector<f64>,
    /// `S_ab S_bb^-1`, `m x nb`.
    regression: DMatrix<f64>,
    factor: Arc<DMatrix<f64>>,
}

impl ConditioningPlan {
    /// `inner` and `border` must be disjoint subsets of `[0, M)`. Border
    /// indices outside the set are marginalized out.
    pub fn new(pg: &PatchGaussian, inner: &[usize], border: &[usize]) -> Result<Self> {
        let m = pg.dim();
        let mut seen = vec![false; m];
        for &i in inner.iter().chain(border) {
            if i >= m {
                return Err(Error::InvalidArgument(format!("index {i} outside patch of dimension {m}")));
            }
            if seen[i] {
                return Err(Error::InvalidArgument(format!("index {i} listed twice")));
            }
            seen[i] = true;
        }
        let mu_inner = DVector::from_iterator(inner.len(), inner.iter().map(|&i| pg.mean[i]));
        let mu_border = DVector::from_iterator(border.len(), border.iter().map(|&i| pg.mean[i]));
        let s_aa = pg.submatrix(inner, inner);
        let (regression, cond_cov) = if border.is_empty() {
            (DMatrix::zeros(inner.len(), 0), s_aa)
        } else {
            let s_bb = pg.submatrix(border, border);
            let s_ba = pg.submatrix(border, inner);
            let l = cholesky_lower(&s_bb, false)?;
            let v = l
                .solve_lower_triangular(&s_ba)
                .ok_or(Error::SingularCovariance { index: 0, pivot: 0.0 })?;
            let rt = l
                .tr_solve_lower_triangular(&v)
                .ok_or(Error::SingularCovariance { index: 0, pivot: 0.0 })?;
            let mut cov = s_aa - v.tr_mul(&v);
            let n = cov.nrows();
            for i in 0..n {
                for j in 0..i {
                    let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                    cov[(i, j)] = s;
                    cov[(j, i)] = s;
                }
            }
            (rt.transpose(), cov)
        };
        let factor = cholesky_lower(&cond_cov, true)?;
        Ok(Self {
            inner: inner.into(),
            border: border.to_vec(),
            mu_inner,
            mu_border,
            regression,
            factor: Arc::new(factor),
        })
    }

    pub fn inner(&self) -> &[usize] {
        &self.inner
    }

    pub fn border(&self) -> &[usize] {
        &self.border
    }

    /// Conditional distribution given border values (in `border()` order).
    pub fn condition(&self, border_values: &[f64]) -> Result<ConditionalGaussian> {
        if border_values.len() != self.border.len() {
            return Err(Error::InvalidArgument(format!(
                "{} border values for {} border indices",
                border_values.len(),
                self.border.len()
            )));
        }
        let mut mean = self.mu_inner.clone();
        if !self.border.is_empty() {
            let innovation = DVector::from_column_slice(border_values) - &self.mu_border;
            mean += &self.regression * innovation;
        }
        Ok(ConditionalGaussian {
            inner: self.inner.clone(),
            mean: mean.as_slice().to_vec(),
            factor: self.factor.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ConditionalGaussian {
    inner: Arc<[usize]>,
    mean: Vec<f64>,
    factor: Arc<DMatrix<f64>>,
}

impl ConditionalGaussian {
    pub fn new(inner: Vec<usize>, mean: Vec<f64>, factor: DMatrix<f64>) -> Result<Self> {
        let m = inner.len();
        if mean.len() != m || factor.nrows() != m || factor.ncols() != m {
            return Err(Error::InvalidArgument("conditional Gaussian shape mismatch".into()));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite conditional mean".into()));
        }
        Ok(Self {
            inner: inner.into(),
            mean,
            factor: Arc::new(factor),
        })
    }

    pub fn inner(&self) -> &[usize] {
        &self.inner
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.factor.as_ref() * self.factor.transpose()
    }
}

/// Conditions the full patch model on every non-inner value. `border_values`
/// follow the ascending order of the complement of `inner`.
pub fn condition_on_border(
    pg: &PatchGaussian,
    inner: &[usize],
    border_values: &[f64],
) -> Result<ConditionalGaussian> {
    let border = pg.complement(inner);
    ConditioningPlan::new(pg, inner, &border)?.condition(border_values)
}

/// One draw `mean + L z`, clamped to `[0, 1]`.
pub fn sample_inner(cond: &ConditionalGaussian, rng: &mut StreamRng) -> Vec<f64> {
    let m = cond.mean.len();
    let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let l = cond.factor.as_ref();
    (0..m)
        .map(|i| {
            let mut v = cond.mean[i];
            for (k, zk) in z.iter().enumerate().take(i + 1) {
                v += l[(i, k)] * zk;
            }
            clamp_unit(v)
        })
        .collect()
}

/// Independent per-pixel draws from a finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSampler {
    support: Vec<f64>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

pub fn make_discrete_sampler(support: Vec<f64>, weights: Vec<f64>) -> Result<DiscreteSampler> {
    if support.is_empty() || support.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "support of {} values with {} weights",
            support.len(),
            weights.len()
        )));
    }
    if let Some(v) = support.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("support value {v} outside [0,1]")));
    }
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument("weights must be positive".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!("weights sum to {sum}, not 1")));
    }
    let mut acc = 0.0;
    let cumulative = weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    Ok(DiscreteSampler {
        support,
        weights,
        cumulative,
    })
}

impl DiscreteSampler {
    /// Equal weights over `support`.
    pub fn uniform(support: Vec<f64>) -> Result<Self> {
        let n = support.len().max(1);
        let mut weights = vec![1.0 / n as f64; n];
        // push rounding into the last weight so the sum is exactly 1
        let head: f64 = weights[..n - 1].iter().sum();
        weights[n - 1] = 1.0 - head;
        make_discrete_sampler(support, weights)
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn draw(&self, m: usize, rng: &mut StreamRng) -> Vec<f64> {
        (0..m)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
                let k = self.cumulative.partition_point(|&c| c <= u);
                self.support[k.min(self.support.len() - 1)]
            })
            .collect()
    }

    /// Number of assignments of `m` values, if it fits in `usize`.
    pub fn assignment_count(&self, m: usize) -> Option<usize> {
        self.support.len().checked_pow(m as u32)
    }

    /// All `|support|^m` assignments with their product weights, in
    /// lexicographic order (last position varies fastest).
    pub fn enumerate(&self, m: usize) -> Enumeration<'_> {
        Enumeration {
            sampler: self,
            digits: vec![0; m],
            done: false,
        }
    }
}

pub struct Enumeration<'a> {
    sampler: &'a DiscreteSampler,
    digits: Vec<usize>,
    done: bool,
}

impl Iterator for Enumeration<'_> {
    type Item = (Vec<f64>, f64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let values = self.digits.iter().map(|&d| self.sampler.support[d]).collect();
        let weight = self
            .digits
            .iter()
            .map(|&d| self.sampler.weights[d])
            .product();
        let base = self.sampler.support.len();
        let mut pos = self.digits.len();
        loop {
            if pos == 0 {
                self.done = true;
                break;
            }
            pos -= 1;
            self.digits[pos] += 1;
            if self.digits[pos] < base {
                break;
            }
            self.digits[pos] = 0;
        }
        Some((values, weight))
    }
}

/// Replacement distribution for a corrupted window.
#[derive(Debug, Clone)]
pub enum Sampler {
    /// Conditional draws from a fitted patch model.
    GaussianConditional(Arc<PatchGaussian>),
    /// Independent per-pixel draws; `exhaustive` switches the engine to exact
    /// enumeration of every assignment.
    Discrete {
        sampler: DiscreteSampler,
        exhaustive: bool,
    },
}

impl Sampler {
    pub fn gaussian(pg: PatchGaussian) -> Self {
        Sampler::GaussianConditional(Arc::new(pg))
    }

    /// Mean occlusion: every corrupted value becomes `value`.
    pub fn constant(value: f64) -> Result<Self> {
        Ok(Sampler::Discrete {
            sampler: make_discrete_sampler(vec![value], vec![1.0])?,
            exhaustive: false,
        })
    }

    pub fn is_exhaustive(&self) -> bool {
        matches!(self, Sampler::Discrete { exhaustive: true, .. })
    }
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// `PGS1 patch_edge channels M sample_count epsilon`, then the mean, then
/// the covariance row by row.
pub fn write_pgs<W: Write>(mut out: W, pg: &PatchGaussian) -> Result<()> {
    let m = pg.dim();
    writeln!(
        out,
        "PGS1 {} {} {} {} {}",
        pg.patch_edge,
        pg.channels,
        m,
        pg.sample_count,
        fmt_real(pg.epsilon)
    )?;
    let line: Vec<String> = pg.mean.iter().map(|&v| fmt_real(v)).collect();
    writeln!(out, "{}", line.join(" "))?;
    for i in 0..m {
        let line: Vec<String> = (0..m).map(|j| fmt_real(pg.covariance[(i, j)])).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_pgs<R: BufRead>(input: R) -> Result<PatchGaussian> {
    let mut tokens: Vec<String> = Vec::new();
    for line in input.lines() {
        tokens.extend(line?.split_whitespace().map(str::to_owned));
    }
    let mut it = tokens.into_iter();
    if it.next().as_deref() != Some("PGS1") {
        return Err(Error::format("PGS1", "missing magic"));
    }
    let mut int = |what: &str| -> Result<usize> {
        it.next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format("PGS1", format!("bad {what}")))
    };
    let edge = int("patch_edge")?;
    let channels = int("channels")?;
    let m = int("M")?;
    let sample_count = int("sample_count")?;
    let rest: Vec<f64> = it
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format("PGS1", e.to_string()))?;
    if m != edge * edge * channels {
        return Err(Error::format("PGS1", format!("M={m} inconsistent with edge {edge} x {channels}")));
    }
    if rest.len() != 1 + m + m * m {
        return Err(Error::format(
            "PGS1",
            format!("expected {} values, found {}", 1 + m + m * m, rest.len()),
        ));
    }
    let epsilon = rest[0];
    let mean = rest[1..1 + m].to_vec();
    let cov = DMatrix::from_row_slice(m, m, &rest[1 + m..]);
    PatchGaussian::new(edge, channels, mean, cov, epsilon, sample_count)
        .map_err(|e| Error::format("PGS1", e.to_string()))
}
