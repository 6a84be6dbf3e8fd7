//! Self-contained SVG heatmaps (one rect per cell), used for the optional
//! truth / prediction / absolute-error triptychs.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::grid::Field;

/// Small perceptual colormap (viridis-like anchor stops, linearly blended).
const STOPS: [(f64, [u8; 3]); 5] = [
    (0.00, [68, 1, 84]),
    (0.25, [59, 82, 139]),
    (0.50, [33, 145, 140]),
    (0.75, [94, 201, 98]),
    (1.00, [253, 231, 37]),
];

fn color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    for w in STOPS.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            return [
                (c0[0] as f64 + f * (c1[0] as f64 - c0[0] as f64)) as u8,
                (c0[1] as f64 + f * (c1[1] as f64 - c0[1] as f64)) as u8,
                (c0[2] as f64 + f * (c1[2] as f64 - c0[2] as f64)) as u8,
            ];
        }
    }
    STOPS[STOPS.len() - 1].1
}

fn panel(out: &mut String, field: &Field, x0: f64, label: &str, lo: f64, hi: f64, cell: f64) {
    let g = field.grid();
    let span = (hi - lo).max(1e-300);
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"12\" font-family=\"monospace\" font-size=\"11\">{} [{:.2e}, {:.2e}]</text>",
        x0, label, lo, hi
    );
    for iy in 0..g.ny() {
        for ix in 0..g.nx() {
            let v = (field.get(ix, iy) - lo) / span;
            let [r, gg, b] = color(v);
            // y axis flipped so the domain origin is bottom-left
            let _ = writeln!(
                out,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"rgb({r},{gg},{b})\"/>",
                x0 + ix as f64 * cell,
                16.0 + (g.ny() - 1 - iy) as f64 * cell,
                cell,
                cell
            );
        }
    }
}

/// Writes a truth / prediction / |error| triptych as one standalone SVG.
pub fn write_triptych(path: &Path, truth: &Field, prediction: &Field) -> Result<()> {
    let g = truth.grid();
    let cell = (384.0 / g.nx() as f64).max(2.0);
    let w = g.nx() as f64 * cell;
    let h = g.ny() as f64 * cell;
    let gap = 14.0;
    let total_w = 3.0 * w + 2.0 * gap;
    let total_h = h + 20.0;

    let abs_err = Field::from_values(
        g,
        truth
            .values()
            .iter()
            .zip(prediction.values())
            .map(|(a, b)| (a - b).abs())
            .collect(),
    )?;
    let lo = truth.min().min(prediction.min());
    let hi = truth.max().max(prediction.max());

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w:.0}\" height=\"{total_h:.0}\" viewBox=\"0 0 {total_w:.0} {total_h:.0}\">"
    );
    panel(&mut out, truth, 0.0, "truth", lo, hi, cell);
    panel(&mut out, prediction, w + gap, "prediction", lo, hi, cell);
    panel(&mut out, &abs_err, 2.0 * (w + gap), "abs error", 0.0, abs_err.max(), cell);
    let _ = writeln!(out, "</svg>");
    std::fs::write(path, out)?;
    Ok(())
}
