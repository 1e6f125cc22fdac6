//! Static figure rendering: proposal overlays, confusion-matrix heatmaps,
//! and loss curves. Everything draws into an [`ImageTensor`] and is saved as
//! PNG by the caller.

use ndarray::Array3;

use crate::dwm::WindowProposal;
use crate::engine::LogRecord;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::metrics::MetricsReport;

/// Border colors cycled per DWM scale.
pub const SCALE_COLORS: [[f64; 3]; 4] = [
    [1.0, 0.15, 0.15], // red
    [1.0, 0.9, 0.1],   // yellow
    [0.2, 0.9, 0.9],   // cyan
    [0.95, 0.3, 0.95], // magenta
];

const BORDER: usize = 2;

/// Draws each proposal as a 2-px rectangle border colored by scale.
pub fn draw_proposals(image: &ImageTensor, proposals: &[WindowProposal]) -> ImageTensor {
    let mut data = image.data().clone();
    for p in proposals {
        let color = SCALE_COLORS[p.scale_index % SCALE_COLORS.len()];
        draw_rect(&mut data, p.tl_y, p.tl_x, p.br_y, p.br_x, &color);
    }
    ImageTensor::from_valid(data)
}

fn draw_rect(data: &mut Array3<f64>, ty: usize, tx: usize, by: usize, bx: usize, color: &[f64; 3]) {
    let (_, h, w) = data.dim();
    let (by, bx) = (by.min(h), bx.min(w));
    let mut put = |y: usize, x: usize| {
        if y < h && x < w {
            for c in 0..3 {
                data[[c, y, x]] = color[c];
            }
        }
    };
    for d in 0..BORDER {
        for x in tx..bx {
            put(ty + d, x);
            put(by.saturating_sub(1 + d), x);
        }
        for y in ty..by {
            put(y, tx + d);
            put(y, bx.saturating_sub(1 + d));
        }
    }
}

// 5x7 bitmap glyphs for the handful of characters the figures need.
fn glyph(ch: char) -> Option<[u8; 7]> {
    // Each row is 5 bits, most significant bit on the left.
    let rows = match ch {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ' ' => [0x00; 7],
        _ => return None,
    };
    Some(rows)
}

fn draw_text(data: &mut Array3<f64>, y: usize, x: usize, text: &str, color: &[f64; 3]) {
    let (_, h, w) = data.dim();
    let mut cx = x;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (ry, row) in rows.iter().enumerate() {
                for rx in 0..5 {
                    if row & (1 << (4 - rx)) != 0 {
                        let (py, px) = (y + ry, cx + rx);
                        if py < h && px < w {
                            for c in 0..3 {
                                data[[c, py, px]] = color[c];
                            }
                        }
                    }
                }
            }
        }
        cx += 6;
    }
}

/// Renders the 2×2 confusion matrix as a heatmap with count labels.
pub fn confusion_heatmap(report: &MetricsReport) -> ImageTensor {
    let side = 220usize;
    let cell = 100usize;
    let margin = 10usize;
    let mut data = Array3::from_elem((3, side, side), 1.0);

    let counts = [
        [report.counts.tp, report.counts.fn_],
        [report.counts.fp, report.counts.tn],
    ];
    let labels = [["TP", "FN"], ["FP", "TN"]];
    let max = counts.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;

    for (row, (crow, lrow)) in counts.iter().zip(labels.iter()).enumerate() {
        for (col, (&count, label)) in crow.iter().zip(lrow.iter()).enumerate() {
            let y0 = margin + row * cell;
            let x0 = margin + col * cell;
            let t = count as f64 / max;
            // White to blue ramp.
            let color = [1.0 - 0.75 * t, 1.0 - 0.45 * t, 1.0];
            for y in y0..y0 + cell - 4 {
                for x in x0..x0 + cell - 4 {
                    for c in 0..3 {
                        data[[c, y, x]] = color[c];
                    }
                }
            }
            let ink = [0.1, 0.1, 0.2];
            draw_text(&mut data, y0 + 12, x0 + 12, label, &ink);
            draw_text(&mut data, y0 + 40, x0 + 12, &count.to_string(), &ink);
        }
    }
    ImageTensor::from_valid(data)
}

/// Plots the logged loss curve (iteration on x, loss on y).
pub fn plot_loss(records: &[LogRecord], width: usize, height: usize) -> Result<ImageTensor> {
    if records.is_empty() {
        return Err(Error::invalid_argument("no log records to plot"));
    }
    let mut data = Array3::from_elem((3, height, width), 1.0);
    let margin = 30usize;
    let (x0, y0) = (margin, margin / 2);
    let (x1, y1) = (width - margin / 2, height - margin);

    let axis_color = [0.2, 0.2, 0.2];
    for x in x0..x1 {
        for c in 0..3 {
            data[[c, y1, x]] = axis_color[c];
        }
    }
    for y in y0..=y1 {
        for c in 0..3 {
            data[[c, y, x0]] = axis_color[c];
        }
    }

    let max_iter = records.iter().map(|r| r.iteration).max().unwrap() as f64;
    let min_iter = records.iter().map(|r| r.iteration).min().unwrap() as f64;
    let max_loss = records.iter().map(|r| r.loss).fold(f64::MIN, f64::max);
    let min_loss = records.iter().map(|r| r.loss).fold(f64::MAX, f64::min);
    let span_i = (max_iter - min_iter).max(1.0);
    let span_l = (max_loss - min_loss).max(1e-12);

    let to_px = |r: &LogRecord| -> (usize, usize) {
        let fx = (r.iteration as f64 - min_iter) / span_i;
        let fy = (r.loss - min_loss) / span_l;
        let px = x0 + (fx * (x1 - x0 - 1) as f64) as usize;
        let py = y1 - 1 - (fy * (y1 - y0 - 1) as f64) as usize;
        (py, px)
    };

    let line = [0.85, 0.25, 0.25];
    let mut prev: Option<(usize, usize)> = None;
    for r in records {
        let (py, px) = to_px(r);
        if let Some((qy, qx)) = prev {
            draw_segment(&mut data, qy, qx, py, px, &line);
        }
        prev = Some((py, px));
    }

    // Axis extents as text.
    let ink = [0.25, 0.25, 0.25];
    draw_text(&mut data, y0, 2, &format!("{max_loss:.3}"), &ink);
    draw_text(&mut data, y1.saturating_sub(8), 2, &format!("{min_loss:.3}"), &ink);
    draw_text(&mut data, y1 + 6, x1.saturating_sub(40), &format!("{}", max_iter as u64), &ink);
    Ok(ImageTensor::from_valid(data))
}

fn draw_segment(data: &mut Array3<f64>, y0: usize, x0: usize, y1: usize, x1: usize, color: &[f64; 3]) {
    let steps = (y0.abs_diff(y1)).max(x0.abs_diff(x1)).max(1);
    let (_, h, w) = data.dim();
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let y = (y0 as f64 + (y1 as f64 - y0 as f64) * t).round() as usize;
        let x = (x0 as f64 + (x1 as f64 - x0 as f64) * t).round() as usize;
        if y < h && x < w {
            for c in 0..3 {
                data[[c, y, x]] = color[c];
            }
        }
    }
}
