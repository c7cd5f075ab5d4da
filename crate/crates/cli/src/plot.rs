//! Renders a `transcribe --dump` directory as PNG images, or as CSV with
//! `--csv`. Matrices are drawn with time on the x axis and one image row
//! per bin, the highest bin at the top. A missing or unreadable dump file
//! is reported and skipped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use image::{Rgb, RgbImage};
use ndarray::Array2;

use pitchtrack::pipeline::dump::{
    read_activations, read_contours, read_matrix, ActivationDump, ContourDump, ACTIVATIONS_FILE, CONTOURS_FILE,
    PITCHOGRAM_FILE, SPECTROGRAM_FILE, TENTOGRAM_FILE,
};

use crate::Failure;

#[derive(Args)]
pub struct PlotArgs {
    /// Dump directory written by `transcribe --dump`.
    #[arg(long)]
    dump: PathBuf,
    /// Output directory; defaults to the dump directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Contour whose OC, OCS and OFC curves are drawn.
    #[arg(long, default_value_t = 0)]
    contour: usize,
    /// Write CSV files instead of images.
    #[arg(long)]
    csv: bool,
}

const CURVE_HEIGHT: u32 = 240;
const CURVE_COLORS: [Rgb<u8>; 3] = [Rgb([200, 30, 30]), Rgb([30, 120, 200]), Rgb([30, 160, 60])];

fn heat(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let r = (3.0 * v).min(1.0);
    let g = (3.0 * v - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * v - 2.0).clamp(0.0, 1.0);
    Rgb([(255.0 * r) as u8, (255.0 * g) as u8, (255.0 * b) as u8])
}

/// `frames x bins` matrix as an image, scaled between the 1st and 99.9th
/// percentile of the positive values.
pub fn matrix_image(m: &Array2<f64>) -> RgbImage {
    let (frames, bins) = m.dim();
    let mut pos: Vec<f64> = m.iter().copied().filter(|v| *v > 0.0).collect();
    pos.sort_by(f64::total_cmp);
    let (lo, hi) = if pos.is_empty() {
        (0.0, 1.0)
    } else {
        (pos[pos.len() / 100], pos[(pos.len() * 999 / 1000).min(pos.len() - 1)])
    };
    let span = (hi - lo).max(f64::EPSILON);
    RgbImage::from_fn(frames.max(1) as u32, bins.max(1) as u32, |x, y| {
        let (f, b) = (x as usize, bins.saturating_sub(1 + y as usize));
        if f >= frames || bins == 0 {
            return Rgb([0, 0, 0]);
        }
        let v = m[[f, b]];
        if v <= 0.0 {
            Rgb([0, 0, 0])
        } else {
            heat(0.15 + 0.85 * (v - lo) / span)
        }
    })
}

pub fn overlay_contours(img: &mut RgbImage, contours: &[ContourDump]) {
    let (w, h) = img.dimensions();
    for c in contours {
        for (k, (&bin, &ridge)) in c.bins.iter().zip(&c.ridge).enumerate() {
            let x = (c.start + k) as u32;
            let b = bin.round();
            if x >= w || b < 0.0 || b >= h as f64 {
                continue;
            }
            let y = h - 1 - b as u32;
            let px = if ridge { Rgb([255, 255, 255]) } else { Rgb([0, 255, 255]) };
            for dy in [-1i64, 0, 1] {
                let yy = y as i64 + dy;
                if (0..h as i64).contains(&yy) {
                    img.put_pixel(x, yy as u32, px);
                }
            }
        }
    }
}

/// OC, OCS and OFC of one contour on a shared [0, 1] axis, two pixels per frame.
pub fn curves_image(a: &ActivationDump) -> RgbImage {
    let n = a.oc.len().max(1);
    let w = 2 * n as u32;
    let mut img = RgbImage::from_pixel(w, CURVE_HEIGHT, Rgb([255, 255, 255]));
    for y in [0, CURVE_HEIGHT / 2, CURVE_HEIGHT - 1] {
        for x in 0..w {
            img.put_pixel(x, y, Rgb([210, 210, 210]));
        }
    }
    let to_y = |v: f64| ((1.0 - v.clamp(0.0, 1.0)) * (CURVE_HEIGHT - 1) as f64).round() as i64;
    for (curve, color) in [&a.oc, &a.ocs, &a.ofc].into_iter().zip(CURVE_COLORS) {
        for i in 0..curve.len() {
            let y0 = to_y(curve[i]);
            let y1 = to_y(*curve.get(i + 1).unwrap_or(&curve[i]));
            for x in [2 * i as u32, 2 * i as u32 + 1] {
                for y in y0.min(y1)..=y0.max(y1) {
                    img.put_pixel(x, y as u32, color);
                }
            }
        }
    }
    img
}

fn matrix_csv(m: &Array2<f64>) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn curves_csv(a: &ActivationDump) -> String {
    let mut s = String::from("frame,oc,ocs,ofc\n");
    for i in 0..a.oc.len() {
        let get = |c: &[f64]| c.get(i).copied().unwrap_or(f64::NAN);
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", a.start + i, a.oc[i], get(&a.ocs), get(&a.ofc));
    }
    s
}

fn contours_csv(contours: &[ContourDump]) -> String {
    let mut s = String::from("contour,frame,cents,ridge\n");
    for c in contours {
        for (k, (cents, ridge)) in c.cents.iter().zip(&c.ridge).enumerate() {
            let _ = writeln!(s, "{},{},{:.3},{}", c.id, c.start + k, cents, u8::from(*ridge));
        }
    }
    s
}

fn save_png(img: &RgbImage, path: &Path, written: &mut Vec<PathBuf>, failed: &mut usize) {
    match img.save(path) {
        Ok(()) => written.push(path.to_path_buf()),
        Err(e) => {
            log::warn!("cannot write {}: {e}", path.display());
            *failed += 1;
        }
    }
}

fn save_text(text: &str, path: &Path, written: &mut Vec<PathBuf>, failed: &mut usize) {
    match std::fs::write(path, text) {
        Ok(()) => written.push(path.to_path_buf()),
        Err(e) => {
            log::warn!("cannot write {}: {e}", path.display());
            *failed += 1;
        }
    }
}

pub fn run(a: &PlotArgs) -> Result<(), Failure> {
    if !a.dump.is_dir() {
        return Err(Failure::Input(format!("{} is not a dump directory", a.dump.display())));
    }
    let out = a.out.clone().unwrap_or_else(|| a.dump.clone());
    std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut written = Vec::new();
    let mut failed = 0usize;
    let contours = match read_contours(a.dump.join(CONTOURS_FILE)) {
        Ok(c) => Some(c),
        Err(e) => {
            log::warn!("skipping contours: {e}");
            failed += 1;
            None
        }
    };
    for file in [SPECTROGRAM_FILE, TENTOGRAM_FILE, PITCHOGRAM_FILE] {
        let m = match read_matrix(a.dump.join(file)) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("skipping {file}: {e}");
                failed += 1;
                continue;
            }
        };
        let stem = file.trim_end_matches(".mat");
        if a.csv {
            save_text(&matrix_csv(&m), &out.join(format!("{stem}.csv")), &mut written, &mut failed);
            continue;
        }
        let mut img = matrix_image(&m);
        save_png(&img, &out.join(format!("{stem}.png")), &mut written, &mut failed);
        if file == PITCHOGRAM_FILE {
            if let Some(c) = &contours {
                overlay_contours(&mut img, c);
                save_png(&img, &out.join("contours.png"), &mut written, &mut failed);
            }
        }
    }
    if a.csv {
        if let Some(c) = &contours {
            save_text(&contours_csv(c), &out.join("contours.csv"), &mut written, &mut failed);
        }
    }
    match read_activations(a.dump.join(ACTIVATIONS_FILE)) {
        Ok(acts) => match acts.iter().find(|x| x.contour == a.contour).or(acts.get(a.contour)) {
            Some(act) if a.csv => save_text(&curves_csv(act), &out.join("curves.csv"), &mut written, &mut failed),
            Some(act) => save_png(&curves_image(act), &out.join("curves.png"), &mut written, &mut failed),
            None => log::warn!("no activation curves for contour {}", a.contour),
        },
        Err(e) => {
            log::warn!("skipping activation curves: {e}");
            failed += 1;
        }
    }
    for p in &written {
        println!("{}", p.display());
    }
    if written.is_empty() && failed > 0 {
        return Err(Failure::Input(format!("nothing could be rendered from {}", a.dump.display())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn high_bins_are_drawn_at_the_top() {
        let mut m = Array2::zeros((4, 10));
        m[[2, 9]] = 1.0;
        let img = matrix_image(&m);
        assert_eq!(img.dimensions(), (4, 10));
        assert_ne!(*img.get_pixel(2, 0), Rgb([0, 0, 0]));
        assert_eq!(*img.get_pixel(2, 9), Rgb([0, 0, 0]));
    }

    #[test]
    fn curves_share_one_figure() {
        let a = ActivationDump {
            contour: 0,
            start: 5,
            oc: vec![0.0, 0.5, 1.0],
            ocs: vec![0.1, 0.2, 0.3],
            ofc: vec![1.0, 0.0, 0.0],
        };
        let img = curves_image(&a);
        assert_eq!(img.dimensions(), (6, CURVE_HEIGHT));
        for c in CURVE_COLORS {
            assert!(img.pixels().any(|p| *p == c));
        }
        assert!(curves_csv(&a).starts_with("frame,oc,ocs,ofc\n5,"));
    }
}
