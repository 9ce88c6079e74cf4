//! Edit-quality metrics: identity similarity, PSNR and SSIM restricted to the
//! shared non-hair region, and average hair-color difference.
//!
//! Region metrics and ACD return `None` when their region is empty or too
//! small; batch reports exclude such items from the means and count them.

use serde::{Deserialize, Serialize};

use crate::backends::{BackendBundle, FaceParser, IdentityEmbedder};
use crate::embedding::cosine;
use crate::error::{shape_err, Error, Result};
use crate::image::{Image, CHANNELS};
use crate::losses::average_hair_color;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Minimum intersected non-hair probability for a pixel to count.
pub const REGION_THRESHOLD: f64 = 0.5;

pub fn ids(a: &Image, b: &Image, embedder: &dyn IdentityEmbedder) -> Result<f64> {
    let ea = embedder.embed(a)?;
    let eb = embedder.embed(b)?;
    cosine(ea.as_slice(), eb.as_slice())
}

fn same_resolution(a: &Image, b: &Image) -> Result<()> {
    if a.resolution() != b.resolution() {
        return Err(shape_err(format!(
            "images are {:?} and {:?}",
            a.resolution(),
            b.resolution()
        )));
    }
    Ok(())
}

/// Per-pixel membership of the non-hair intersection.
pub fn preserved_region(a: &Image, b: &Image, parser: &dyn FaceParser) -> Result<Vec<bool>> {
    same_resolution(a, b)?;
    let ma = parser.non_hair_mask(a)?;
    let mb = parser.non_hair_mask(b)?;
    Ok(ma
        .intersect(&mb)?
        .as_slice()
        .iter()
        .map(|&p| p >= REGION_THRESHOLD)
        .collect())
}

/// PSNR in dB over the non-hair intersection, capped at [`PSNR_CAP_DB`].
pub fn region_psnr(a: &Image, b: &Image, parser: &dyn FaceParser) -> Result<Option<f64>> {
    let region = preserved_region(a, b, parser)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, _) in region.iter().enumerate().filter(|(_, &inside)| inside) {
        for c in 0..CHANNELS {
            let d = a.as_slice()[i * CHANNELS + c] - b.as_slice()[i * CHANNELS + c];
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(Some(PSNR_CAP_DB));
    }
    Ok(Some((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)))
}

/// SSIM of two equally sized sample sets with population statistics.
pub fn ssim_window(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Mean SSIM over every 7x7 window lying entirely inside the non-hair
/// intersection, averaged over channels.
pub fn region_ssim(a: &Image, b: &Image, parser: &dyn FaceParser) -> Result<Option<f64>> {
    let region = preserved_region(a, b, parser)?;
    let (h, w) = a.resolution();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Ok(None);
    }
    let k = SSIM_WINDOW;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut xs = Vec::with_capacity(k * k);
    let mut ys = Vec::with_capacity(k * k);
    for r0 in 0..=h - k {
        for c0 in 0..=w - k {
            let inside = (r0..r0 + k).all(|r| (c0..c0 + k).all(|c| region[r * w + c]));
            if !inside {
                continue;
            }
            for ch in 0..CHANNELS {
                xs.clear();
                ys.clear();
                for r in r0..r0 + k {
                    for c in c0..c0 + k {
                        xs.push(a.pixel(r, c)[ch]);
                        ys.push(b.pixel(r, c)[ch]);
                    }
                }
                total += ssim_window(&xs, &ys);
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Mean absolute per-channel difference of the average hair colors.
pub fn acd(a: &Image, b: &Image, parser: &dyn FaceParser) -> Result<Option<f64>> {
    let ca = average_hair_color(a, parser)?;
    let cb = average_hair_color(b, parser)?;
    if ca.empty || cb.empty {
        return Ok(None);
    }
    Ok(Some(
        ca.rgb.iter().zip(&cb.rgb).map(|(x, y)| (x - y).abs()).sum::<f64>() / CHANNELS as f64,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub id: String,
    pub ids: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub acd: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub count: usize,
    pub excluded: usize,
}

impl MetricSummary {
    fn of(values: impl Iterator<Item = Option<f64>>) -> Self {
        let (mut sum, mut count, mut excluded) = (0.0, 0, 0);
        for v in values {
            match v {
                Some(v) => {
                    sum += v;
                    count += 1;
                }
                None => excluded += 1,
            }
        }
        Self {
            mean: (count > 0).then(|| sum / count as f64),
            count,
            excluded,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub items: Vec<MetricRecord>,
    pub ids: MetricSummary,
    pub psnr: MetricSummary,
    pub ssim: MetricSummary,
    pub acd: MetricSummary,
}

pub fn evaluate_pair(id: &str, before: &Image, after: &Image, backends: &BackendBundle) -> Result<MetricRecord> {
    let parser = backends.parser.as_ref();
    Ok(MetricRecord {
        id: id.to_string(),
        ids: ids(before, after, backends.identity_embedder.as_ref())?,
        psnr: region_psnr(before, after, parser)?,
        ssim: region_ssim(before, after, parser)?,
        acd: acd(before, after, parser)?,
    })
}

/// Metrics of each `(id, before, after)` item and their means.
pub fn evaluate_batch(items: &[(String, Image, Image)], backends: &BackendBundle) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let items = items
        .iter()
        .map(|(id, before, after)| evaluate_pair(id, before, after, backends))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        ids: MetricSummary::of(items.iter().map(|r| Some(r.ids))),
        psnr: MetricSummary::of(items.iter().map(|r| r.psnr)),
        ssim: MetricSummary::of(items.iter().map(|r| r.ssim)),
        acd: MetricSummary::of(items.iter().map(|r| r.acd)),
        items,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "missing".into())
}

impl MetricsReport {
    /// CSV with one row per item followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,ids,psnr,ssim,acd\n");
        for r in &self.items {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.id,
                cell(Some(r.ids)),
                cell(r.psnr),
                cell(r.ssim),
                cell(r.acd)
            ));
        }
        out.push_str(&format!(
            "mean,{},{},{},{}\n",
            cell(self.ids.mean),
            cell(self.psnr.mean),
            cell(self.ssim.mean),
            cell(self.acd.mean)
        ));
        out
    }

    /// Fixed-width summary table for the console.
    pub fn to_table(&self) -> String {
        let fmt = |s: &MetricSummary, digits: usize| match s.mean {
            Some(m) => format!("{m:.digits$}"),
            None => "n/a".into(),
        };
        let mut out = format!("{:<10}{:>10}{:>10}{:>10}{:>10}\n", "", "IDS", "PSNR", "SSIM", "ACD");
        out.push_str(&format!(
            "{:<10}{:>10}{:>10}{:>10}{:>10}\n",
            "mean",
            fmt(&self.ids, 3),
            fmt(&self.psnr, 2),
            fmt(&self.ssim, 3),
            fmt(&self.acd, 3)
        ));
        out.push_str(&format!(
            "{:<10}{:>10}{:>10}{:>10}{:>10}\n",
            "excluded", self.ids.excluded, self.psnr.excluded, self.ssim.excluded, self.acd.excluded
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::{toy_bundle, ToyFaceParser};
    use crate::backends::ToyBackendConfig;
    use crate::config::Dims;

    fn dims() -> Dims {
        Dims {
            layers: 3,
            latent_dim: 4,
            embed_dim: 8,
            height: 20,
            width: 10,
        }
    }

    #[test]
    fn psnr_hand_values() {
        let p = ToyFaceParser::new(&dims(), 0.4).unwrap();
        let a = Image::filled(20, 10, [0.0; 3]).unwrap();
        let b = Image::filled(20, 10, [0.5; 3]).unwrap();
        let v = region_psnr(&a, &b, &p).unwrap().unwrap();
        assert!((v - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert_eq!(region_psnr(&a, &a, &p).unwrap(), Some(PSNR_CAP_DB));
    }

    #[test]
    fn empty_region_is_missing() {
        let p = ToyFaceParser::new(&dims(), 1.0).unwrap();
        let a = Image::filled(20, 10, [0.3; 3]).unwrap();
        assert_eq!(region_psnr(&a, &a, &p).unwrap(), None);
        assert_eq!(region_ssim(&a, &a, &p).unwrap(), None);
        let bald = ToyFaceParser::new(&dims(), 0.0).unwrap();
        assert_eq!(acd(&a, &a, &bald).unwrap(), None);
    }

    #[test]
    fn ssim_window_must_fit() {
        // 20 rows, top 8 are hair, leaving 12 rows: windows fit.
        let p = ToyFaceParser::new(&dims(), 0.4).unwrap();
        let a = Image::filled(20, 10, [0.3; 3]).unwrap();
        assert_eq!(region_ssim(&a, &a, &p).unwrap(), Some(1.0));
        // 20 rows with top 15 hair: only 5 rows remain.
        let p = ToyFaceParser::new(&dims(), 0.75).unwrap();
        assert_eq!(region_ssim(&a, &a, &p).unwrap(), None);
    }

    #[test]
    fn acd_red_green() {
        let p = ToyFaceParser::new(&dims(), 0.4).unwrap();
        let red = Image::filled(20, 10, [1.0, 0.0, 0.0]).unwrap();
        let green = Image::filled(20, 10, [0.0, 1.0, 0.0]).unwrap();
        assert!((acd(&red, &green, &p).unwrap().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn batch_report_excludes_missing() {
        let d = dims();
        let cfg = ToyBackendConfig {
            encoder_grid: 5,
            ..Default::default()
        };
        let b = toy_bundle(1, &d, &cfg).unwrap();
        let x = Image::from_fn(20, 10, |r, c| [r as f64 / 19.0, c as f64 / 9.0, 0.5]).unwrap();
        let y = Image::filled(20, 10, [0.2; 3]).unwrap();
        let report = evaluate_batch(&[("a".into(), x.clone(), x.clone()), ("b".into(), x.clone(), y.clone())], &b).unwrap();
        assert_eq!(report.items[0].psnr, Some(PSNR_CAP_DB));
        assert!((report.ids.mean.unwrap() - (report.items[0].ids + report.items[1].ids) / 2.0).abs() < 1e-15);
        assert_eq!(report.psnr.count, 2);
        assert!(report.to_csv().starts_with("id,ids,psnr,ssim,acd\n"));
        assert!(report.to_table().contains("PSNR"));
        assert!(evaluate_batch(&[], &b).is_err());
    }
}
