//! Raster figures for a finished run: an AUC heat table, per-method score
//! distributions along the ladder, and input / reconstruction / map strips.

use std::fs;
use std::path::PathBuf;

use image::{Rgb, RgbImage};

use crate::datasets::{stack_images, Image, Sample, ShiftLadder, CLEAN_RUNG};
use crate::error::{DrueError, Result};
use crate::evaluation::{Distributions, EvalReport, MethodDistributions};
use crate::pipeline::Pipeline;
use crate::uncertainty::{reconstructions, UncertaintyMap};

const GLYPH: u32 = 8;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([200, 200, 200]);

/// A white canvas with rectangle and 8×8 bitmap-text primitives.
pub struct Canvas {
    pub img: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            img: RgbImage::from_pixel(width.max(1), height.max(1), WHITE),
        }
    }

    pub fn fill_rect(&mut self, x: u32, y: u32, w: u32, h: u32, color: Rgb<u8>) {
        for yy in y..(y + h).min(self.img.height()) {
            for xx in x..(x + w).min(self.img.width()) {
                self.img.put_pixel(xx, yy, color);
            }
        }
    }

    /// ASCII text; other characters render as `?`.
    pub fn text(&mut self, x: u32, y: u32, s: &str, color: Rgb<u8>) {
        for (i, ch) in s.chars().enumerate() {
            let code = if ch.is_ascii() {
                ch as usize
            } else {
                b'?' as usize
            };
            let glyph = font8x8::legacy::BASIC_LEGACY[code];
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..8 {
                    if bits >> col & 1 == 1 {
                        let px = x + i as u32 * GLYPH + col;
                        let py = y + row as u32;
                        if px < self.img.width() && py < self.img.height() {
                            self.img.put_pixel(px, py, color);
                        }
                    }
                }
            }
        }
    }

    /// Copies `src` scaled up by an integer factor.
    pub fn blit(&mut self, x: u32, y: u32, src: &RgbImage, scale: u32) {
        for (sx, sy, p) in src.enumerate_pixels() {
            self.fill_rect(x + sx * scale, y + sy * scale, scale, scale, *p);
        }
    }
}

fn text_width(s: &str) -> u32 {
    s.chars().count() as u32 * GLYPH
}

/// Diverging colour for an AUC: blue below 0.5, white at 0.5, red above.
pub fn auc_color(v: f64) -> Rgb<u8> {
    let t = ((v - 0.5) * 2.0).clamp(-1.0, 1.0);
    let fade = |a: f64| (255.0 * (1.0 - a)).round() as u8;
    if t >= 0.0 {
        Rgb([255 - (t * 75.0) as u8, fade(t * 0.85), fade(t * 0.85)])
    } else {
        let a = -t;
        Rgb([fade(a * 0.85), fade(a * 0.6), 255 - (a * 75.0) as u8])
    }
}

fn ink_for(bg: Rgb<u8>) -> Rgb<u8> {
    let l = 0.299 * f64::from(bg[0]) + 0.587 * f64::from(bg[1]) + 0.114 * f64::from(bg[2]);
    if l < 128.0 {
        WHITE
    } else {
        BLACK
    }
}

/// Datasets down the side, methods across the top, mean AUC per cell.
pub fn heat_table(report: &EvalReport) -> RgbImage {
    let pad = 8;
    let label_w = report
        .datasets
        .iter()
        .map(|d| text_width(&d.name))
        .max()
        .unwrap_or(0)
        .max(text_width("dataset"))
        + 2 * pad;
    let col_w = report
        .methods
        .iter()
        .map(|m| text_width(m))
        .max()
        .unwrap_or(0)
        .max(text_width("0.000+0.000"))
        + 2 * pad;
    let row_h = 20;
    let head_h = 3 * row_h;
    let width = label_w + col_w * report.methods.len() as u32;
    let height = head_h + row_h * report.datasets.len() as u32 + pad;
    let mut c = Canvas::new(width, height);
    c.text(pad, pad, "AUC (mean+std over seeds)", BLACK);
    c.text(pad, 2 * row_h + 6, "dataset", BLACK);
    for (j, m) in report.methods.iter().enumerate() {
        c.text(label_w + j as u32 * col_w + pad, 2 * row_h + 6, m, BLACK);
    }
    for (i, d) in report.datasets.iter().enumerate() {
        let y = head_h + i as u32 * row_h;
        c.text(pad, y + 6, &d.name, BLACK);
        for (j, m) in report.methods.iter().enumerate() {
            let x = label_w + j as u32 * col_w;
            if let Some(cell) = report.cell(&d.name, m) {
                let bg = auc_color(cell.auc.mean);
                c.fill_rect(x, y, col_w, row_h, bg);
                c.text(
                    x + pad,
                    y + 6,
                    &format!("{:.3}+{:.3}", cell.auc.mean, cell.auc.std),
                    ink_for(bg),
                );
            }
        }
        c.fill_rect(0, y, width, 1, GRID);
    }
    c.img
}

/// One histogram row per dataset over the method's shared bin edges, with the
/// median marked in red and the interquartile range in grey.
pub fn distributions_figure(dist: &MethodDistributions) -> RgbImage {
    let pad = 8;
    let label_w = dist
        .histograms
        .iter()
        .map(|h| text_width(&h.dataset))
        .max()
        .unwrap_or(0)
        + 2 * pad;
    let bins = dist.bin_edges.len().saturating_sub(1).max(1) as u32;
    let bar_w = 8;
    let plot_w = bins * bar_w;
    let row_h = 36;
    let head_h = 28;
    let axis_h = 24;
    let width = label_w + plot_w + pad;
    let height = head_h + row_h * dist.histograms.len() as u32 + axis_h;
    let mut c = Canvas::new(width, height);
    c.text(
        pad,
        pad,
        &format!("{} score distributions", dist.method),
        BLACK,
    );
    let lo = dist.bin_edges.first().copied().unwrap_or(0.0);
    let hi = dist.bin_edges.last().copied().unwrap_or(1.0);
    let to_x = |v: f64| {
        label_w
            + (((v - lo) / (hi - lo).max(1e-300)) * f64::from(plot_w))
                .round()
                .clamp(0.0, f64::from(plot_w - 1)) as u32
    };
    for (i, h) in dist.histograms.iter().enumerate() {
        let y0 = head_h + i as u32 * row_h;
        let base = y0 + row_h - 4;
        c.text(pad, y0 + row_h / 2 - 4, &h.dataset, BLACK);
        let peak = h.counts.iter().copied().max().unwrap_or(1).max(1) as f64;
        let (q1, q3) = (to_x(h.q1), to_x(h.q3));
        c.fill_rect(q1, base + 1, (q3 - q1).max(1), 3, Rgb([150, 150, 150]));
        for (k, &n) in h.counts.iter().enumerate() {
            let bh = ((n as f64 / peak) * f64::from(row_h - 8)).round() as u32;
            if bh > 0 {
                c.fill_rect(
                    label_w + k as u32 * bar_w,
                    base - bh,
                    bar_w - 1,
                    bh,
                    Rgb([70, 110, 170]),
                );
            }
        }
        c.fill_rect(to_x(h.median), y0 + 4, 2, row_h - 8, Rgb([200, 30, 30]));
        c.fill_rect(label_w, base, plot_w, 1, GRID);
    }
    let axis_y = head_h + row_h * dist.histograms.len() as u32 + 6;
    c.text(label_w, axis_y, &format!("{lo:.3}"), BLACK);
    let hi_label = format!("{hi:.3}");
    c.text(
        label_w + plot_w - text_width(&hi_label),
        axis_y,
        &hi_label,
        BLACK,
    );
    c.img
}

fn gray_to_rgb(map: &UncertaintyMap) -> RgbImage {
    let g = map.to_gray8();
    RgbImage::from_fn(g.width(), g.height(), |x, y| {
        let v = g.get_pixel(x, y)[0];
        Rgb([v, v, v])
    })
}

/// Input, `x̂`, `x̂′` and the normalised uncertainty map side by side.
pub fn triptych(
    title: &str,
    input: &Image,
    xhat: &Image,
    xhat_prime: &Image,
    map: &UncertaintyMap,
) -> RgbImage {
    let scale = 2;
    let pad = 8;
    let tile = input.width as u32 * scale;
    let labels = ["input", "x_hat", "x_hat'", "map"];
    let width = 4 * tile + 5 * pad;
    let height = tile + 3 * pad + 2 * GLYPH + 4;
    let mut c = Canvas::new(width, height);
    c.text(pad, pad / 2, title, BLACK);
    let tiles = [
        input.to_rgb8(),
        xhat.to_rgb8(),
        xhat_prime.to_rgb8(),
        gray_to_rgb(map),
    ];
    for (i, (img, label)) in tiles.iter().zip(labels).enumerate() {
        let x = pad + i as u32 * (tile + pad);
        let y = pad + GLYPH + 2;
        c.blit(x, y, img, scale);
        c.text(x, y + tile + 4, label, BLACK);
    }
    c.img
}

/// Clean rung, the most severe rung of every corruption kind, and every
/// external folder.
fn triptych_rungs(ladder: &ShiftLadder) -> Vec<usize> {
    let mut picks: Vec<usize> = ladder
        .rungs
        .iter()
        .position(|r| r.name == CLEAN_RUNG)
        .into_iter()
        .collect();
    for (_, chain) in ladder.chains() {
        if let Some(&last) = chain.last() {
            if !picks.contains(&last) {
                picks.push(last);
            }
        }
    }
    for (i, r) in ladder.rungs.iter().enumerate() {
        if r.kind.is_none() && r.name != CLEAN_RUNG {
            picks.push(i);
        }
    }
    picks
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes every figure of the run into `plots/` and returns the paths.
pub fn render_all(pipeline: &Pipeline, report: &EvalReport) -> Result<Vec<PathBuf>> {
    let dir = pipeline.run.plots_dir();
    fs::create_dir_all(&dir).map_err(|e| DrueError::io(&dir, e))?;
    let mut written = Vec::new();
    let path = dir.join("heat_table.png");
    heat_table(report).save(&path)?;
    written.push(path);
    let seed = *report
        .seeds
        .first()
        .ok_or_else(|| DrueError::contract("report has no seeds"))?;
    let dpath = pipeline.run.distributions(seed);
    if !dpath.exists() {
        return Err(DrueError::missing(dpath.display().to_string(), "evaluate"));
    }
    let text = fs::read_to_string(&dpath).map_err(|e| DrueError::io(&dpath, e))?;
    let dist: Distributions = serde_json::from_str(&text)?;
    for m in &dist.methods {
        let path = dir.join(format!("distributions_{}.png", file_safe(&m.method)));
        distributions_figure(m).save(&path)?;
        written.push(path);
    }
    let bundle = pipeline.load_bundle(seed)?;
    if bundle.has(crate::training::Stage::G0) && bundle.has(crate::training::Stage::G1) {
        let ladder = pipeline.load_ladder()?;
        let maps = dir.join("maps");
        fs::create_dir_all(&maps).map_err(|e| DrueError::io(&maps, e))?;
        for i in triptych_rungs(&ladder) {
            let rung = &ladder.rungs[i];
            let Some(sample) = rung.samples.first() else {
                continue;
            };
            let (xhat, xhat_prime, map) = sample_views(&bundle, sample)?;
            let title = format!(
                "{} / {} / DRUE {:.4}",
                rung.name,
                sample.sample_id,
                map.raw_mean()
            );
            let path = dir.join(format!("triptych_{}.png", file_safe(&rung.name)));
            triptych(&title, &sample.image, &xhat, &xhat_prime, &map).save(&path)?;
            written.push(path);
            map.save(&maps.join(format!("{}.png", file_safe(&rung.name))))?;
        }
    }
    Ok(written)
}

/// `(x̂, x̂′, map)` for one sample.
pub fn sample_views(
    bundle: &crate::training::CheckpointBundle,
    sample: &Sample,
) -> Result<(Image, Image, UncertaintyMap)> {
    let x = stack_images(&[sample]);
    let (a, b) = reconstructions(bundle, &x)?;
    Ok((
        Image::from_feature_map(&a, 0),
        Image::from_feature_map(&b, 0),
        UncertaintyMap::from_reconstructions(&a, &b, 0),
    ))
}
