//! Minimal line charts rendered straight into an image.

use mcitrack::image::Image;

const MARGIN: usize = 24;
const BG: [f32; 3] = [1.0, 1.0, 1.0];
const AXIS: [f32; 3] = [0.2, 0.2, 0.2];
const GRID: [f32; 3] = [0.88, 0.88, 0.88];
const LINE: [f32; 3] = [0.1, 0.35, 0.8];

fn draw_line(img: &mut Image, (x0, y0): (i64, i64), (x1, y1): (i64, i64), rgb: [f32; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
            img.set_pixel(x as usize, y as usize, rgb);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Plots `points` with the x range `x_range` and y range `[0, 1]`.
pub fn line_chart(points: &[(f64, f64)], x_range: (f64, f64), width: usize, height: usize) -> Image {
    let mut img = Image::filled(width, height, BG);
    let (w, h) = ((width - 2 * MARGIN) as f64, (height - 2 * MARGIN) as f64);
    let span = (x_range.1 - x_range.0).max(f64::MIN_POSITIVE);
    let to_px = |x: f64, y: f64| {
        let px = MARGIN as f64 + (x - x_range.0) / span * w;
        let py = (height - MARGIN) as f64 - y.clamp(0.0, 1.0) * h;
        (px.round() as i64, py.round() as i64)
    };
    for k in 1..=4 {
        let y = k as f64 / 4.0;
        draw_line(&mut img, to_px(x_range.0, y), to_px(x_range.1, y), GRID);
    }
    draw_line(&mut img, to_px(x_range.0, 0.0), to_px(x_range.1, 0.0), AXIS);
    draw_line(&mut img, to_px(x_range.0, 0.0), to_px(x_range.0, 1.0), AXIS);
    for pair in points.windows(2) {
        draw_line(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), LINE);
    }
    for &(x, y) in points {
        let (px, py) = to_px(x, y);
        for d in -1..=1 {
            draw_line(&mut img, (px - 1, py + d), (px + 1, py + d), LINE);
        }
    }
    img
}
