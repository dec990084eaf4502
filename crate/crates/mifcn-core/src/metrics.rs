//! Image-quality metrics and the paired significance test.
//!
//! PSNR needs a reference image; MSR, CNR, and ENL are no-reference metrics
//! computed from rectangular regions of interest — foreground regions over
//! tissue and one background region over noise-only area. All standard
//! deviations use the population formula (divide by the pixel count), so a
//! given image and region always produce the same number.
//!
//! Degenerate inputs (zero MSE, zero variance) are reported as explicit
//! [`MetricValue`] flags rather than infinities or NaNs so downstream
//! formatting stays total.

use libm::erfc;

use crate::error::{Error, Result};
use crate::roi::{Rect, RoiSpec};
use crate::tensor::Tensor;

/// A metric outcome: a number, or one of the two degenerate flags.
///
/// `Infinite` marks values that grow without bound as the denominator
/// vanishes (PSNR of identical images, ENL of a constant background).
/// `Undefined` marks 0/0-style cases and metrics that were not requested
/// (for example PSNR without a reference image).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetricValue {
    Finite(f64),
    Infinite,
    Undefined,
}

impl MetricValue {
    pub fn as_finite(&self) -> Option<f64> {
        match self {
            MetricValue::Finite(v) => Some(*v),
            _ => None,
        }
    }

    /// Fixed-precision rendering for the aligned table.
    fn fixed(&self, precision: usize) -> String {
        match self {
            MetricValue::Finite(v) => format!("{v:.precision$}"),
            MetricValue::Infinite => "inf".into(),
            MetricValue::Undefined => "n/a".into(),
        }
    }

    /// Full-precision rendering for machine-readable output.
    fn csv(&self) -> String {
        match self {
            MetricValue::Finite(v) => format!("{v}"),
            MetricValue::Infinite => "inf".into(),
            MetricValue::Undefined => "n/a".into(),
        }
    }
}

/// Mean squared error between two equally shaped images.
pub fn mse(x: &Tensor, reference: &Tensor) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "mse needs equal shapes, got {:?} and {:?}",
            x.shape(),
            reference.shape()
        )));
    }
    x.sub(reference)?.square().reduce_mean()
}

pub const PSNR_PEAK: f64 = 255.0;

/// Peak signal-to-noise ratio in dB for a given mean squared error.
pub fn psnr_from_mse(mse: f64) -> MetricValue {
    if mse < 0.0 || !mse.is_finite() {
        return MetricValue::Undefined;
    }
    if mse == 0.0 {
        return MetricValue::Infinite;
    }
    MetricValue::Finite(10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10())
}

/// Peak signal-to-noise ratio between an image and its reference.
pub fn psnr(x: &Tensor, reference: &Tensor) -> Result<MetricValue> {
    Ok(psnr_from_mse(mse(x, reference)?))
}

/// Population mean and standard deviation of one region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiStats {
    pub mean: f64,
    pub sd: f64,
}

/// Mean and population standard deviation over a rectangle of a 2-D image.
pub fn roi_stats(image: &Tensor, rect: &Rect) -> Result<RoiStats> {
    let shape = image.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("roi_stats expects a 2-D image, got {shape:?}")));
    }
    if !rect.fits_within(shape[0], shape[1]) {
        return Err(Error::Domain(format!(
            "region {}..{} x {}..{} is outside a {}x{} image",
            rect.top,
            rect.bottom(),
            rect.left,
            rect.right(),
            shape[0],
            shape[1]
        )));
    }
    let n = rect.area() as f64;
    let mut sum = 0.0;
    for r in rect.top..rect.bottom() {
        for c in rect.left..rect.right() {
            sum += image.at2(r, c);
        }
    }
    let mean = sum / n;
    let mut sq = 0.0;
    for r in rect.top..rect.bottom() {
        for c in rect.left..rect.right() {
            let d = image.at2(r, c) - mean;
            sq += d * d;
        }
    }
    Ok(RoiStats { mean, sd: (sq / n).sqrt() })
}

/// Mean-to-standard-deviation ratio averaged over foreground regions.
/// A constant region makes the ratio unbounded, flagged `Infinite`.
pub fn msr(image: &Tensor, foregrounds: &[Rect]) -> Result<MetricValue> {
    if foregrounds.is_empty() {
        return Err(Error::Domain("msr needs at least one foreground region".into()));
    }
    let mut sum = 0.0;
    for rect in foregrounds {
        let stats = roi_stats(image, rect)?;
        if stats.sd == 0.0 {
            return Ok(MetricValue::Infinite);
        }
        sum += stats.mean / stats.sd;
    }
    Ok(MetricValue::Finite(sum / foregrounds.len() as f64))
}

/// Contrast-to-noise ratio: mean over foreground regions m of
/// `(mean_m - mean_b) / sqrt(sd_m^2 + sd_b^2)` against one background
/// region b. A region pair with both deviations zero has no defined
/// contrast scale, flagged `Undefined`.
pub fn cnr(image: &Tensor, foregrounds: &[Rect], background: &Rect) -> Result<MetricValue> {
    if foregrounds.is_empty() {
        return Err(Error::Domain("cnr needs at least one foreground region".into()));
    }
    let bg = roi_stats(image, background)?;
    let mut sum = 0.0;
    for rect in foregrounds {
        let fg = roi_stats(image, rect)?;
        let denom = (fg.sd * fg.sd + bg.sd * bg.sd).sqrt();
        if denom == 0.0 {
            return Ok(MetricValue::Undefined);
        }
        sum += (fg.mean - bg.mean) / denom;
    }
    Ok(MetricValue::Finite(sum / foregrounds.len() as f64))
}

/// Equivalent number of looks of the background region: `mean^2 / sd^2`.
/// A perfectly smoothed (constant) background is flagged `Infinite`.
pub fn enl(image: &Tensor, background: &Rect) -> Result<MetricValue> {
    if background.area() < 2 {
        return Err(Error::Domain("enl needs a background region of at least 2 pixels".into()));
    }
    let stats = roi_stats(image, background)?;
    if stats.sd == 0.0 {
        return Ok(MetricValue::Infinite);
    }
    Ok(MetricValue::Finite(stats.mean * stats.mean / (stats.sd * stats.sd)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Full distribution of the signed-rank statistic over all sign
    /// assignments (used for n <= 25).
    Exact,
    /// Normal approximation with continuity and tie corrections.
    NormalApprox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of the ranks of positive differences (half-integer under ties).
    pub statistic: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_used: usize,
    /// Two-sided p-value.
    pub p_value: f64,
    /// All paired differences were exactly zero; `p_value` is 1 by fiat.
    pub all_zero: bool,
    pub method: WilcoxonMethod,
}

/// Doubled average ranks of the absolute differences (doubling keeps tied
/// average ranks integral), plus the sizes of the tie groups.
fn doubled_ranks(abs_diffs: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let n = abs_diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs_diffs[a].partial_cmp(&abs_diffs[b]).unwrap());
    let mut ranks = vec![0u64; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_diffs[order[j + 1]] == abs_diffs[order[i]] {
            j += 1;
        }
        // 1-based rank positions i+1 ..= j+1 share average (i+j+2)/2,
        // i.e. doubled rank i + j + 2.
        let doubled = (i + j + 2) as u64;
        for &idx in &order[i..=j] {
            ranks[idx] = doubled;
        }
        tie_sizes.push(j - i + 1);
        i = j + 1;
    }
    (ranks, tie_sizes)
}

/// Exact two-sided p: distribution of the doubled statistic over all 2^n
/// sign assignments via subset-sum counting (equivalent to enumerating the
/// assignments, but polynomial in n).
fn exact_p(doubled: &[u64], w2: u64) -> f64 {
    let total: u64 = doubled.iter().sum();
    let mut dp = vec![0u64; total as usize + 1];
    dp[0] = 1;
    for &r in doubled {
        for s in (r as usize..dp.len()).rev() {
            dp[s] += dp[s - r as usize];
        }
    }
    let le: u64 = dp[..=w2 as usize].iter().sum();
    let ge: u64 = dp[w2 as usize..].iter().sum();
    let denom = (1u64 << doubled.len()) as f64;
    let tail = le.min(ge) as f64 / denom;
    (2.0 * tail).min(1.0)
}

/// Normal-approximation two-sided p with continuity correction and the tie
/// correction `sum(t^3 - t)/48` subtracted from the variance.
fn normal_p(w_plus: f64, n: usize, tie_sizes: &[usize]) -> Result<f64> {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            (t * t * t - t) / 48.0
        })
        .sum();
    let variance = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    if variance <= 0.0 {
        return Err(Error::Numeric(
            "signed-rank variance is not positive; too many tied differences".into(),
        ));
    }
    let diff = w_plus - mean;
    let corrected = if diff > 0.5 {
        diff - 0.5
    } else if diff < -0.5 {
        diff + 0.5
    } else {
        0.0
    };
    let z = corrected / variance.sqrt();
    Ok(erfc(z.abs() / std::f64::consts::SQRT_2))
}

/// Largest n that still uses the exact signed-rank distribution.
pub const WILCOXON_EXACT_LIMIT: usize = 25;

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped first. If everything is zero the samples
/// are indistinguishable and p = 1 is returned with `all_zero` set; between
/// one and four usable pairs is an error because no rejection is possible
/// at conventional levels.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Domain("paired samples must be finite".into()));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            n_used: 0,
            p_value: 1.0,
            all_zero: true,
            method: WilcoxonMethod::Exact,
        });
    }
    let n = diffs.len();
    if n < 5 {
        return Err(Error::Data(format!(
            "only {n} nonzero paired differences; the test needs at least 5"
        )));
    }
    let abs_diffs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (doubled, tie_sizes) = doubled_ranks(&abs_diffs);
    let w2: u64 = doubled
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| *r)
        .sum();
    let w_plus = w2 as f64 / 2.0;
    if n <= WILCOXON_EXACT_LIMIT {
        Ok(WilcoxonResult {
            statistic: w_plus,
            n_used: n,
            p_value: exact_p(&doubled, w2),
            all_zero: false,
            method: WilcoxonMethod::Exact,
        })
    } else {
        Ok(WilcoxonResult {
            statistic: w_plus,
            n_used: n,
            p_value: normal_p(w_plus, n, &tie_sizes)?,
            all_zero: false,
            method: WilcoxonMethod::NormalApprox,
        })
    }
}

/// Per-image metric values.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr: MetricValue,
    pub msr: MetricValue,
    pub cnr: MetricValue,
    pub enl: MetricValue,
}

/// Compute one row. `reference` drives PSNR and `rois` drives the
/// no-reference metrics; whichever is absent leaves its columns `n/a`.
pub fn metric_row(
    id: &str,
    image: &Tensor,
    reference: Option<&Tensor>,
    rois: Option<&RoiSpec>,
) -> Result<MetricRow> {
    let psnr_value = match reference {
        Some(r) => psnr(image, r)?,
        None => MetricValue::Undefined,
    };
    let (msr_value, cnr_value, enl_value) = match rois {
        Some(spec) => {
            let shape = image.shape();
            if shape.len() != 2 {
                return Err(Error::Shape(format!("metrics expect a 2-D image, got {shape:?}")));
            }
            spec.validate_for(shape[0], shape[1])?;
            let fg = spec.foreground_rects();
            (
                msr(image, &fg)?,
                cnr(image, &fg, &spec.background.rect)?,
                enl(image, &spec.background.rect)?,
            )
        }
        None => (MetricValue::Undefined, MetricValue::Undefined, MetricValue::Undefined),
    };
    Ok(MetricRow { id: id.into(), psnr: psnr_value, msr: msr_value, cnr: cnr_value, enl: enl_value })
}

/// A table of per-image rows plus optional paired tests against another
/// method's rows.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// (metric name, test result) pairs, in display order.
    pub p_values: Vec<(String, WilcoxonResult)>,
}

/// Mean and population SD over the finite entries of one column.
fn column_summary(values: &[MetricValue]) -> (MetricValue, MetricValue) {
    let finite: Vec<f64> = values.iter().filter_map(|v| v.as_finite()).collect();
    if finite.is_empty() {
        return (MetricValue::Undefined, MetricValue::Undefined);
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (MetricValue::Finite(mean), MetricValue::Finite(var.sqrt()))
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>) -> MetricReport {
        MetricReport { rows, p_values: Vec::new() }
    }

    /// Column-wise (mean, sd) of (psnr, msr, cnr, enl) over finite entries.
    pub fn summary(&self) -> [(MetricValue, MetricValue); 4] {
        let col = |f: fn(&MetricRow) -> MetricValue| -> Vec<MetricValue> {
            self.rows.iter().map(f).collect()
        };
        [
            column_summary(&col(|r| r.psnr)),
            column_summary(&col(|r| r.msr)),
            column_summary(&col(|r| r.cnr)),
            column_summary(&col(|r| r.enl)),
        ]
    }

    /// Aligned plain-text table with mean/sd footer and any paired tests.
    pub fn to_text(&self) -> String {
        let mut width = 5usize;
        for row in &self.rows {
            width = width.max(row.id.len());
        }
        let mut out = format!("{:width$}  {:>10}  {:>10}  {:>10}  {:>10}\n", "image", "psnr", "msr", "cnr", "enl");
        for row in &self.rows {
            out.push_str(&format!(
                "{:width$}  {:>10}  {:>10}  {:>10}  {:>10}\n",
                row.id,
                row.psnr.fixed(3),
                row.msr.fixed(3),
                row.cnr.fixed(3),
                row.enl.fixed(3),
            ));
        }
        let [p, m, c, e] = self.summary();
        out.push_str(&format!(
            "{:width$}  {:>10}  {:>10}  {:>10}  {:>10}\n",
            "mean",
            p.0.fixed(3),
            m.0.fixed(3),
            c.0.fixed(3),
            e.0.fixed(3),
        ));
        out.push_str(&format!(
            "{:width$}  {:>10}  {:>10}  {:>10}  {:>10}\n",
            "sd",
            p.1.fixed(3),
            m.1.fixed(3),
            c.1.fixed(3),
            e.1.fixed(3),
        ));
        for (name, test) in &self.p_values {
            if test.all_zero {
                out.push_str(&format!("wilcoxon {name}: p = 1 (all paired differences zero)\n"));
            } else {
                out.push_str(&format!(
                    "wilcoxon {name}: p = {:.6} (W+ = {}, n = {})\n",
                    test.p_value, test.statistic, test.n_used
                ));
            }
        }
        out
    }

    /// Machine-readable rows, full precision, one image per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,msr,cnr,enl\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.id,
                row.psnr.csv(),
                row.msr.csv(),
                row.cnr.csv(),
                row.enl.csv(),
            ));
        }
        out
    }
}
