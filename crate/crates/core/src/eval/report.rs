//! Result tables and per-sample image galleries.

use std::path::Path;

use image::GrayImage;
use serde::Serialize;

use super::benchmark::{score_sample, BenchmarkResult, MethodAdapter, MetricRecord};
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::nets::ModelHandle;
use crate::rawio;
use crate::real::Real;
use crate::{Image, Mask, SegMap};

pub const CSV_FILE: &str = "results.csv";
pub const JSON_FILE: &str = "results.json";
pub const TABLES_FILE: &str = "tables.txt";
pub const GALLERY_DIR: &str = "gallery";

/// Gap between gallery panels, pixels.
const GUTTER: usize = 2;

#[derive(Serialize)]
struct CsvRow<'a> {
    method: &'a str,
    psnr_mean: String,
    psnr_std: String,
    ssim_mean: String,
    ssim_std: String,
    dice_mean: String,
    dice_std: String,
    n: usize,
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

pub fn results_csv(records: &[MetricRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(CsvRow {
            method: &r.method,
            psnr_mean: f6(r.psnr_mean),
            psnr_std: f6(r.psnr_std),
            ssim_mean: f6(r.ssim_mean),
            ssim_std: f6(r.ssim_std),
            dice_mean: f6(r.dice_mean),
            dice_std: f6(r.dice_std),
            n: r.n,
        })
        .map_err(|e| Error::Usage(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Usage(format!("csv: {e}")))
}

pub fn tables_text(records: &[MetricRecord]) -> String {
    let width = records.iter().map(|r| r.method.chars().count()).max().unwrap_or(6).max(6) + 2;
    let mut s = String::new();
    s.push_str("Image quality inside the ROI (mean ± std)\n\n");
    s.push_str(&format!("{:<width$}{:>22}{:>22}\n", "Method", "PSNR (dB)", "SSIM"));
    for r in records {
        s.push_str(&format!(
            "{:<width$}{:>22}{:>22}{}\n",
            r.method,
            format!("{:.4} ± {:.4}", r.psnr_mean, r.psnr_std),
            format!("{:.4} ± {:.4}", r.ssim_mean, r.ssim_std),
            if r.partial { "  (partial)" } else { "" }
        ));
    }
    s.push_str("\nDice of the pretrained segmentation model, liver and tumor (mean ± std)\n\n");
    s.push_str(&format!("{:<width$}{:>22}{:>6}\n", "Method", "Dice", "n"));
    for r in records {
        s.push_str(&format!(
            "{:<width$}{:>22}{:>6}\n",
            r.method,
            format!("{:.4} ± {:.4}", r.dice_mean, r.dice_std),
            r.n
        ));
    }
    s
}

/// What the gallery needs beyond the aggregated records.
pub struct GalleryInput<'a, T> {
    pub methods: &'a [MethodAdapter<T>],
    pub samples: &'a [SamplePair],
    pub seg_model: &'a ModelHandle<T>,
    pub mask: &'a Mask,
    pub ids: &'a [String],
}

#[derive(Debug, Clone, Serialize)]
pub struct PanelCaption {
    pub title: String,
    pub psnr: f64,
    pub ssim: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GalleryCaptions {
    pub sample_id: String,
    /// Top row: images. Bottom row: predicted labels of the same images.
    pub rows: [&'static str; 2],
    pub panels: Vec<PanelCaption>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn grid(images: &[Image], labels: &[SegMap]) -> GrayImage {
    let (h, w) = images[0].dim();
    let cols = images.len();
    let width = cols * w + (cols - 1) * GUTTER;
    let height = 2 * h + GUTTER;
    let mut img = GrayImage::from_pixel(width as u32, height as u32, image::Luma([255]));
    for (k, (im, lab)) in images.iter().zip(labels).enumerate() {
        let x0 = k * (w + GUTTER);
        for ((i, j), &v) in im.indexed_iter() {
            img.put_pixel((x0 + j) as u32, i as u32, image::Luma([to_u8(v)]));
        }
        for ((i, j), &l) in lab.indexed_iter() {
            let shade = [0u8, 128, 255][l.min(2) as usize];
            img.put_pixel((x0 + j) as u32, (h + GUTTER + i) as u32, image::Luma([shade]));
        }
    }
    img
}

/// Panels for one sample: low-dose, every reconstruction method, full-dose.
fn render_gallery<T: Real>(input: &GalleryInput<'_, T>, id: &str, out_dir: &Path) -> Result<()> {
    let sample = input
        .samples
        .iter()
        .find(|s| s.sample_id == id)
        .ok_or_else(|| Error::Usage(format!("unknown gallery sample id {id:?}")))?;
    let low = MethodAdapter::<T>::low_dose();
    let full = MethodAdapter::<T>::full_dose();
    let order: Vec<&MethodAdapter<T>> = std::iter::once(&low)
        .chain(input.methods.iter().filter(|m| !m.is_reference()))
        .chain(std::iter::once(&full))
        .collect();
    let mut images = Vec::with_capacity(order.len());
    let mut labels = Vec::with_capacity(order.len());
    let mut panels = Vec::with_capacity(order.len());
    for m in order {
        let (img, lab, score) = score_sample(m, sample, input.seg_model, input.mask)?;
        images.push(img);
        labels.push(lab);
        panels.push(PanelCaption {
            title: m.name.clone(),
            psnr: score.psnr,
            ssim: score.ssim,
            dice: score.dice,
        });
    }
    let dir = out_dir.join(GALLERY_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let png = dir.join(format!("{id}.png"));
    grid(&images, &labels).save(&png)?;
    let captions = GalleryCaptions {
        sample_id: id.to_string(),
        rows: ["image", "predicted segmentation"],
        panels,
    };
    rawio::write_bytes(&dir.join(format!("{id}.json")), &serde_json::to_vec_pretty(&captions)?)
}

/// Writes `results.csv`, `results.json`, `tables.txt` and, when given, one
/// gallery grid plus caption file per requested sample.
pub fn render_report<T: Real>(
    result: &BenchmarkResult,
    gallery: Option<&GalleryInput<'_, T>>,
    out_dir: &Path,
) -> Result<()> {
    if result.records.is_empty() {
        return Err(Error::Usage("no metric records to report".into()));
    }
    if let Some(g) = gallery {
        // Validate every id before writing anything.
        if let Some(bad) = g.ids.iter().find(|id| !g.samples.iter().any(|s| &s.sample_id == *id)) {
            return Err(Error::Usage(format!("unknown gallery sample id {bad:?}")));
        }
    }
    rawio::write_bytes(&out_dir.join(CSV_FILE), &results_csv(&result.records)?)?;
    rawio::write_bytes(&out_dir.join(JSON_FILE), &serde_json::to_vec_pretty(result)?)?;
    rawio::write_bytes(&out_dir.join(TABLES_FILE), tables_text(&result.records).as_bytes())?;
    if let Some(g) = gallery {
        for id in g.ids {
            render_gallery(g, id, out_dir)?;
        }
    }
    Ok(())
}
