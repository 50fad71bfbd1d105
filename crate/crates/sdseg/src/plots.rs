//! Plot artifacts: a per-domain Dice bar chart (SVG) and image/label/
//! prediction slice triptychs (PNG). All outputs are deterministic so reruns
//! overwrite with identical bytes.

use crate::error::{Result, SdsegError};
use crate::evalbench::MetricsReport;
use ndarray::{Array3, Axis};
use std::path::Path;

const CHART_WIDTH: usize = 640;
const CHART_HEIGHT: usize = 360;
const MARGIN_LEFT: usize = 60;
const MARGIN_BOTTOM: usize = 60;
const MARGIN_TOP: usize = 30;

/// Fixed label palette; class 0 stays black, colors repeat past 7 classes.
const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [225, 80, 60],
    [70, 160, 230],
    [240, 200, 60],
    [110, 200, 120],
    [170, 110, 220],
    [240, 140, 40],
    [160, 160, 160],
];

pub fn class_color(class: u8) -> [u8; 3] {
    if class == 0 {
        PALETTE[0]
    } else {
        PALETTE[1 + ((class as usize - 1) % (PALETTE.len() - 1))]
    }
}

/// Per-domain Dice means with ±std whiskers, source bar marked darker.
pub fn render_dice_bar_chart(report: &MetricsReport) -> String {
    let n = report.domains.len();
    let plot_w = CHART_WIDTH - MARGIN_LEFT - 20;
    let plot_h = CHART_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let slot = plot_w / n.max(1);
    let bar_w = (slot * 7) / 10;
    let scale = |points: f64| plot_h as f64 * (points / 100.0).clamp(0.0, 1.0);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_WIDTH}\" \
         height=\"{CHART_HEIGHT}\" viewBox=\"0 0 {CHART_WIDTH} {CHART_HEIGHT}\">\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"18\" font-family=\"monospace\" font-size=\"14\">\
         per-domain Dice (points)</text>\n",
        MARGIN_LEFT
    ));
    for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let y = MARGIN_TOP as f64 + plot_h as f64 - scale(tick);
        s.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" \
             stroke=\"#cccccc\" stroke-width=\"1\"/>\n",
            MARGIN_LEFT,
            MARGIN_LEFT + plot_w
        ));
        s.push_str(&format!(
            "  <text x=\"{}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" \
             text-anchor=\"end\">{tick:.0}</text>\n",
            MARGIN_LEFT - 6,
            y + 4.0
        ));
    }
    for (i, d) in report.domains.iter().enumerate() {
        let x = MARGIN_LEFT + i * slot + (slot - bar_w) / 2;
        let h = scale(d.dice_mean);
        let y = MARGIN_TOP as f64 + plot_h as f64 - h;
        let fill = if d.is_source { "#1f5f8b" } else { "#5ba4cf" };
        s.push_str(&format!(
            "  <rect x=\"{x}\" y=\"{y:.1}\" width=\"{bar_w}\" height=\"{h:.1}\" \
             fill=\"{fill}\"/>\n"
        ));
        let cx = x as f64 + bar_w as f64 / 2.0;
        let y_lo = MARGIN_TOP as f64 + plot_h as f64 - scale(d.dice_mean - d.dice_std);
        let y_hi = MARGIN_TOP as f64 + plot_h as f64 - scale(d.dice_mean + d.dice_std);
        s.push_str(&format!(
            "  <line x1=\"{cx:.1}\" y1=\"{y_lo:.1}\" x2=\"{cx:.1}\" y2=\"{y_hi:.1}\" \
             stroke=\"#222222\" stroke-width=\"1.5\"/>\n"
        ));
        s.push_str(&format!(
            "  <text x=\"{cx:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" \
             text-anchor=\"middle\">{:.1}</text>\n",
            y - 5.0,
            d.dice_mean
        ));
        let name = if d.is_source {
            format!("{}*", d.domain_id)
        } else {
            d.domain_id.clone()
        };
        s.push_str(&format!(
            "  <text x=\"{cx:.1}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" \
             text-anchor=\"middle\">{name}</text>\n",
            MARGIN_TOP + plot_h + 20
        ));
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_dice_bar_chart(report: &MetricsReport, path: &Path) -> Result<()> {
    std::fs::write(path, render_dice_bar_chart(report))
        .map_err(|e| SdsegError::io(path.display().to_string(), e))
}

fn gray(v: f64) -> [u8; 3] {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

/// Image | labels | prediction for one slice, separated by 2-pixel gutters.
pub fn render_triptych(
    volume: &Array3<f64>,
    labels: &Array3<u8>,
    prediction: &Array3<u8>,
    slice: usize,
) -> Result<image::RgbImage> {
    if volume.dim() != labels.dim() || volume.dim() != prediction.dim() {
        return Err(SdsegError::InvalidArgument(format!(
            "triptych inputs disagree: volume {:?}, labels {:?}, prediction {:?}",
            volume.dim(),
            labels.dim(),
            prediction.dim()
        )));
    }
    let (d, h, w) = volume.dim();
    if slice >= d {
        return Err(SdsegError::InvalidArgument(format!(
            "slice {slice} out of range for depth {d}"
        )));
    }
    let gutter = 2usize;
    let mut img = image::RgbImage::from_pixel(
        (3 * w + 2 * gutter) as u32,
        h as u32,
        image::Rgb([255, 255, 255]),
    );
    let vol = volume.index_axis(Axis(0), slice);
    let lab = labels.index_axis(Axis(0), slice);
    let pred = prediction.index_axis(Axis(0), slice);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Rgb(gray(vol[[y, x]])));
            img.put_pixel(
                (w + gutter + x) as u32,
                y as u32,
                image::Rgb(class_color(lab[[y, x]])),
            );
            img.put_pixel(
                (2 * (w + gutter) + x) as u32,
                y as u32,
                image::Rgb(class_color(pred[[y, x]])),
            );
        }
    }
    Ok(img)
}

pub fn write_triptych(
    volume: &Array3<f64>,
    labels: &Array3<u8>,
    prediction: &Array3<u8>,
    slice: usize,
    path: &Path,
) -> Result<()> {
    let img = render_triptych(volume, labels, prediction, slice)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| SdsegError::Data(format!("{}: png encode: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalbench::DomainMetrics;
    use ndarray::Array3;

    fn report() -> MetricsReport {
        MetricsReport {
            domains: vec![
                DomainMetrics {
                    domain_id: "source".into(),
                    n_samples: 4,
                    dice_mean: 91.0,
                    dice_std: 2.0,
                    jaccard_mean: 85.0,
                    jaccard_std: 2.5,
                    is_source: true,
                },
                DomainMetrics {
                    domain_id: "bright".into(),
                    n_samples: 10,
                    dice_mean: 78.5,
                    dice_std: 4.0,
                    jaccard_mean: 66.0,
                    jaccard_std: 5.0,
                    is_source: false,
                },
            ],
        }
    }

    #[test]
    fn bar_chart_is_deterministic_svg() {
        let r = report();
        let a = render_dice_bar_chart(&r);
        let b = render_dice_bar_chart(&r);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<rect").count(), 2, "one bar per domain");
        assert!(a.contains("source*"));
        assert!(a.contains("78.5"));
    }

    #[test]
    fn bar_chart_handles_source_only() {
        let mut r = report();
        r.domains.truncate(1);
        let svg = render_dice_bar_chart(&r);
        assert_eq!(svg.matches("<rect").count(), 1);
    }

    #[test]
    fn triptych_layout_and_determinism() {
        let d = 3;
        let (h, w) = (8, 8);
        let volume = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
            (z * 100 + y * 10 + x) as f64 / 400.0
        });
        let labels = Array3::from_shape_fn((d, h, w), |(_, y, _)| (y % 3) as u8);
        let pred = labels.mapv(|l| if l == 2 { 1 } else { l });
        let img = render_triptych(&volume, &labels, &pred, 1).unwrap();
        assert_eq!(img.dimensions(), ((3 * w + 4) as u32, h as u32));
        // Label panel row of class 1 is the palette color, not grayscale.
        assert_eq!(img.get_pixel((w + 2) as u32, 1).0, class_color(1));

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        write_triptych(&volume, &labels, &pred, 1, &p1).unwrap();
        write_triptych(&volume, &labels, &pred, 1, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        assert_eq!(b1, std::fs::read(&p2).unwrap());
        assert_eq!(&b1[1..4], b"PNG");
    }

    #[test]
    fn triptych_rejects_bad_inputs() {
        let volume = Array3::<f64>::zeros((2, 4, 4));
        let labels = Array3::<u8>::zeros((2, 4, 4));
        let small = Array3::<u8>::zeros((2, 4, 3));
        assert!(render_triptych(&volume, &labels, &small, 0).is_err());
        assert!(render_triptych(&volume, &labels, &labels.clone(), 5).is_err());
    }

    #[test]
    fn class_colors_are_distinct_for_small_k() {
        let colors: Vec<_> = (0..5u8).map(class_color).collect();
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                assert_ne!(colors[i], colors[j]);
            }
        }
    }
}
