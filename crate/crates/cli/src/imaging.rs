//! PNG emission: synthetic-sample grids and simple line plots.

use dfq_core::nn::generator::Normalization;
use dfq_core::{Generator, Real};
use image::{Rgb, RgbImage};
use ndarray::Ix4;
use std::path::Path;

/// Render one row per class, `cols` samples per row. Deterministic
/// given the seed.
pub fn dump_synthetic_grid(
    generator: &mut Generator,
    norm: &Normalization,
    cols: usize,
    seed: u64,
    path: &Path,
) -> Result<(), String> {
    let nc = generator.num_classes;
    let labels: Vec<usize> = (0..nc)
        .flat_map(|c| std::iter::repeat_n(c, cols))
        .collect();
    let batch = generator
        .sample_synthetic(&labels, seed, norm)
        .map_err(|e| e.to_string())?;
    let imgs = batch
        .images
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|e| e.to_string())?;
    let (_, _, h, w) = imgs.dim();
    let mut canvas = RgbImage::new((cols * w) as u32, (nc * h) as u32);
    for (i, _) in labels.iter().enumerate() {
        let row = i / cols;
        let col = i % cols;
        for y in 0..h {
            for x in 0..w {
                let px = Rgb([
                    to_byte(imgs[[i, 0, y, x]], norm.mean[0], norm.std[0]),
                    to_byte(imgs[[i, 1, y, x]], norm.mean[1], norm.std[1]),
                    to_byte(imgs[[i, 2, y, x]], norm.mean[2], norm.std[2]),
                ]);
                canvas.put_pixel((col * w + x) as u32, (row * h + y) as u32, px);
            }
        }
    }
    canvas.save(path).map_err(|e| e.to_string())
}

fn to_byte(v: Real, mean: f64, std: f64) -> u8 {
    ((v * std + mean) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Minimal line plot: one polyline per series on a white canvas with a
/// light frame. Returns an error only on I/O.
pub fn line_plot(
    series: &[(&str, Vec<(f64, f64)>)],
    path: &Path,
) -> Result<(), String> {
    const W: u32 = 640;
    const H: u32 = 420;
    const M: f64 = 48.0; // margin
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));

    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if pts.is_empty() {
        return Err("empty plot".into());
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let map = |x: f64, y: f64| -> (f64, f64) {
        (
            M + (x - x0) / (x1 - x0) * (W as f64 - 2.0 * M),
            (H as f64 - M) - (y - y0) / (y1 - y0) * (H as f64 - 2.0 * M),
        )
    };

    // frame
    let frame = Rgb([180, 180, 180]);
    draw_line(&mut img, (M, M), (M, H as f64 - M), frame);
    draw_line(
        &mut img,
        (M, H as f64 - M),
        (W as f64 - M, H as f64 - M),
        frame,
    );

    let palette = [
        Rgb([31, 119, 180]),
        Rgb([255, 127, 14]),
        Rgb([44, 160, 44]),
        Rgb([214, 39, 40]),
    ];
    for (si, (_, points)) in series.iter().enumerate() {
        let color = palette[si % palette.len()];
        let mut sorted = points.clone();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for pair in sorted.windows(2) {
            draw_line(&mut img, map(pair[0].0, pair[0].1), map(pair[1].0, pair[1].1), color);
        }
        for &(x, y) in &sorted {
            let (px, py) = map(x, y);
            draw_dot(&mut img, px, py, color);
        }
    }
    img.save(path).map_err(|e| e.to_string())
}

fn draw_dot(img: &mut RgbImage, x: f64, y: f64, color: Rgb<u8>) {
    for dy in -2i32..=2 {
        for dx in -2i32..=2 {
            let (px, py) = (x as i32 + dx, y as i32 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}
