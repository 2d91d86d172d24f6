//! Minimal SVG rendering for score histograms. Hand-rolled markup keeps
//! the reports self-contained and byte-stable.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 46.0;

fn bin_counts(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for &v in values {
        let idx = (((v - lo) / span) * bins as f64) as usize;
        counts[idx.min(bins - 1)] += 1;
    }
    counts
}

/// Overlaid clean/poison histogram as an SVG document string.
pub fn render_histogram_svg(title: &str, clean: &[f64], poison: &[f64], bins: usize) -> String {
    assert!(bins > 0, "need at least one bin");
    let all: Vec<f64> = clean.iter().chain(poison).copied().collect();
    let (lo, hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    // degenerate ranges still draw a single centered column
    let (lo, hi) = if all.is_empty() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };

    let series = [
        ("clean", "#4878a8", bin_counts(clean, lo, hi, bins)),
        ("poison", "#c04848", bin_counts(poison, lo, hi, bins)),
    ];
    let peak = series.iter().flat_map(|(_, _, c)| c.iter()).copied().max().unwrap_or(0).max(1);

    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" \
         text-anchor=\"middle\">{title}</text>\n",
        WIDTH / 2.0
    );

    for (name, color, counts) in &series {
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let h = plot_h * c as f64 / peak as f64;
            let x = MARGIN + plot_w * i as f64 / bins as f64;
            let y = HEIGHT - MARGIN - h;
            let w = plot_w / bins as f64;
            let _ = write!(
                svg,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" \
                 fill=\"{color}\" fill-opacity=\"0.55\"><title>{name} bin {i}: {c}</title></rect>\n"
            );
        }
    }

    // axes and range labels
    let _ = write!(
        svg,
        "<line x1=\"{m}\" y1=\"{b:.1}\" x2=\"{r:.1}\" y2=\"{b:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b:.1}\" stroke=\"black\"/>\n\
         <text x=\"{m}\" y=\"{lbl:.1}\" font-family=\"sans-serif\" font-size=\"11\">{lo:.4}</text>\n\
         <text x=\"{r:.1}\" y=\"{lbl:.1}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"end\">{hi:.4}</text>\n\
         <text x=\"{m}\" y=\"{ty}\" font-family=\"sans-serif\" font-size=\"11\">{peak}</text>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN,
        lbl = HEIGHT - MARGIN + 16.0,
        ty = MARGIN - 6.0,
    );

    // legend
    for (i, (name, color, counts)) in series.iter().enumerate() {
        let total: usize = counts.iter().sum();
        let y = MARGIN + 14.0 + 18.0 * i as f64;
        let _ = write!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{ry:.1}\" width=\"12\" height=\"12\" fill=\"{color}\" \
             fill-opacity=\"0.55\"/>\n\
             <text x=\"{tx:.1}\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"12\">\
             {name} (n={total})</text>\n",
            x = WIDTH - MARGIN - 120.0,
            ry = y - 10.0,
            tx = WIDTH - MARGIN - 102.0,
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn save_histogram_svg(
    path: &Path,
    title: &str,
    clean: &[f64],
    poison: &[f64],
    bins: usize,
) -> io::Result<()> {
    fs::write(path, render_histogram_svg(title, clean, poison, bins))
}
