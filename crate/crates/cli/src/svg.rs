//! Minimal SVG line and scatter plots. Presentation only.

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Line,
    Points,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
}

impl Series {
    pub fn line(label: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.to_string(),
            points,
            style: Style::Line,
        }
    }

    pub fn points(label: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.to_string(),
            points,
            style: Style::Points,
        }
    }
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let widen = |a: f64, b: f64| if b - a > 0.0 { (a, b) } else { (a - 0.5, b + 0.5) };
    let (x0, x1) = widen(x0, x1);
    let (y0, y1) = widen(y0, y1);
    (x0, x1, y0, y1)
}

pub fn plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n\
         <rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n",
        W / 2.0,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n",
        W / 2.0,
        H - 10.0
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>\n",
        H / 2.0,
        H / 2.0
    ));
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"{anchor}\">{v:.3}</text>\n",
            sx(v),
            H - PAD + 14.0
        ));
    }
    for v in [y0, y1] {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>\n",
            PAD - 4.0,
            sy(v) + 4.0
        ));
    }
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts = ser.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite());
        match ser.style {
            Style::Line => {
                let d: Vec<String> = pts.map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                s.push_str(&format!(
                    "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                    d.join(" ")
                ));
            }
            Style::Points => {
                for &(x, y) in pts {
                    s.push_str(&format!(
                        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\" fill=\"{c}\" fill-opacity=\"0.6\"/>\n",
                        sx(x),
                        sy(y)
                    ));
                }
            }
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>\n",
            W - PAD - 100.0,
            PAD + 14.0 * (i + 1) as f64,
            ser.label
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_lines_and_points() {
        let s = plot(
            "t",
            "x",
            "y",
            &[
                Series::line("a", vec![(0.0, 0.0), (1.0, 2.0)]),
                Series::points("b", vec![(0.5, 1.0), (f64::NAN, 1.0)]),
            ],
        );
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert_eq!(s.matches("<polyline").count(), 1);
        assert_eq!(s.matches("<circle").count(), 1);
    }

    #[test]
    fn degenerate_ranges_do_not_divide_by_zero() {
        let s = plot("t", "x", "y", &[Series::line("a", vec![(1.0, 1.0)])]);
        assert!(!s.contains("NaN"));
        assert!(!plot("t", "x", "y", &[]).contains("NaN"));
    }
}
