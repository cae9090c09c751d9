//! Frequency diagnostics: mean amplitude spectra of token features at a
//! probe point, and per-domain radial Δ-amplitude curves.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fft;
use crate::model::{FamlpModel, Probe};
use crate::tensor::Tensor;

pub const RADIAL_BINS: usize = 16;
pub const CSV_HEADER: &str = "domain,radial_bin,delta_amplitude";

/// Shell index of every bin of a `[rows, cols]` spectrum.
///
/// Each axis contributes its wrapped distance from DC, `min(i, n−i)`,
/// normalized by `n/2`; the radius is the Euclidean norm of the two,
/// divided by √2 so it lies in `[0, 1]`, and cut into [`RADIAL_BINS`]
/// equal shells.
pub fn radial_bins(rows: usize, cols: usize) -> Vec<usize> {
    let norm = |i: usize, n: usize| {
        if n < 2 {
            0.0
        } else {
            i.min(n - i) as f64 / (n as f64 / 2.0)
        }
    };
    let mut out = Vec::with_capacity(rows * cols);
    for u in 0..rows {
        for v in 0..cols {
            let (a, b) = (norm(u, rows), norm(v, cols));
            let r = (a * a + b * b).sqrt() / std::f64::consts::SQRT_2;
            out.push(((r * RADIAL_BINS as f64) as usize).min(RADIAL_BINS - 1));
        }
    }
    out
}

pub fn bin_populations(rows: usize, cols: usize) -> [usize; RADIAL_BINS] {
    let mut counts = [0; RADIAL_BINS];
    radial_bins(rows, cols).into_iter().for_each(|b| counts[b] += 1);
    counts
}

/// Shell means of a `[rows, cols]` map; `None` for empty shells.
pub fn radial_profile(map: &Tensor) -> Result<Vec<Option<f64>>> {
    let (rows, cols) = match map.shape() {
        [r, c] => (*r, *c),
        s => return Err(Error::dim("radial_profile", format!("expected a matrix, got {s:?}"))),
    };
    let mut sums = [0.0; RADIAL_BINS];
    let mut counts = [0usize; RADIAL_BINS];
    for (b, v) in radial_bins(rows, cols).into_iter().zip(map.data()) {
        sums[b] += v;
        counts[b] += 1;
    }
    Ok((0..RADIAL_BINS)
        .map(|b| (counts[b] > 0).then(|| sums[b] / counts[b] as f64))
        .collect())
}

/// Amplitude of the `[C, T]` spectrum of `[T, C]` token features.
pub fn feature_amplitude(features: &Tensor) -> Result<Tensor> {
    Ok(fft::amplitude(&fft::fft2(&features.t()?)?))
}

fn mean_of(maps: impl Iterator<Item = Result<Tensor>>) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    let mut n = 0usize;
    for m in maps {
        let m = m?;
        acc = Some(match acc {
            None => m,
            Some(a) => a.zip_map(&m, |x, y| x + y)?,
        });
        n += 1;
    }
    let acc = acc.ok_or(Error::EmptyAxis { op: "layer_amplitude" })?;
    Ok(acc.map(|v| v / n as f64))
}

/// Mean over `images` of the feature amplitude spectrum `[C, T]` at one
/// probe point of layer `layer`.
pub fn layer_amplitude(model: &FamlpModel, images: &[&Tensor], layer: usize, probe: Probe) -> Result<Tensor> {
    let feats = model.probe_many(images, layer, &[probe])?;
    mean_of(feats.into_iter().map(|mut f| feature_amplitude(&f.remove(0))))
}

/// Per-domain before-minus-after amplitude around one filter layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainCurve {
    pub domain: String,
    /// `[C, T]` mean amplitude difference.
    pub delta: Tensor,
    /// Shell means of `delta`; `None` for empty shells.
    pub radial: Vec<Option<f64>>,
}

/// Δ-amplitude (`before − after_aff`) of layer `layer` for each domain.
/// Positive values mean the filter suppresses that frequency.
pub fn delta_amplitude(model: &FamlpModel, domains: &[(String, Vec<&Tensor>)], layer: usize) -> Result<Vec<DomainCurve>> {
    if domains.is_empty() {
        return Err(Error::Parameter("no domains to analyze".into()));
    }
    let mut out = Vec::with_capacity(domains.len());
    for (name, images) in domains {
        if images.is_empty() {
            return Err(Error::Parameter(format!("domain `{name}` has no images")));
        }
        let feats = model.probe_many(images, layer, &[Probe::Before, Probe::AfterAff])?;
        let mut before = Vec::with_capacity(feats.len());
        let mut after = Vec::with_capacity(feats.len());
        for f in &feats {
            before.push(feature_amplitude(&f[0]));
            after.push(feature_amplitude(&f[1]));
        }
        let before = mean_of(before.into_iter())?;
        let after = mean_of(after.into_iter())?;
        let delta = before.zip_map(&after, |b, a| b - a)?;
        let radial = radial_profile(&delta)?;
        out.push(DomainCurve {
            domain: name.clone(),
            delta,
            radial,
        });
    }
    Ok(out)
}

/// CSV text of the radial curves; empty shells are omitted.
pub fn curves_to_csv(curves: &[DomainCurve]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for c in curves {
        for (bin, v) in c.radial.iter().enumerate() {
            if let Some(v) = v {
                s.push_str(&format!("{},{bin},{v:.8e}\n", c.domain));
            }
        }
    }
    s
}

pub fn export_csv(curves: &[DomainCurve], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, curves_to_csv(curves)).map_err(|e| Error::io(path, e))
}

/// Parses [`curves_to_csv`] output into `(domain, bin, value)` rows.
pub fn parse_curves_csv(text: &str) -> Result<Vec<(String, usize, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::format("curve csv", "missing header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split(',').collect();
            let [d, b, v] = parts[..] else {
                return Err(Error::format("curve csv", format!("bad row `{l}`")));
            };
            let b = b.parse().map_err(|_| Error::format("curve csv", format!("bad bin in `{l}`")))?;
            let v = v.parse().map_err(|_| Error::format("curve csv", format!("bad value in `{l}`")))?;
            Ok((d.to_string(), b, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn populations_partition_the_spectrum() {
        for (r, c) in [(64, 16), (7, 5), (1, 9), (1, 1)] {
            assert_eq!(bin_populations(r, c).iter().sum::<usize>(), r * c);
        }
        assert_eq!(radial_bins(4, 4)[0], 0);
    }

    #[test]
    fn nyquist_corner_is_in_last_shell() {
        let bins = radial_bins(8, 8);
        assert_eq!(bins[4 * 8 + 4], RADIAL_BINS - 1);
    }

    #[test]
    fn empty_curve_set_is_header_only() {
        assert_eq!(curves_to_csv(&[]), format!("{CSV_HEADER}\n"));
    }
}
