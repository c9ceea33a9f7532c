//! Minimal deterministic SVG line plots for training curves.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 32.0;
const MARGIN_B: f64 = 44.0;

const COLORS: [&str; 4] = ["#1f6f43", "#b3452c", "#2c5aa0", "#8a5fa8"];

/// One plot, several named series over epochs 1..=n. Series may have
/// different lengths; the x axis spans the longest.
pub fn line_plot(title: &str, y_label: &str, series: &[(&str, &[f64])]) -> String {
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, values) in series {
        for &v in *values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = (hi - lo) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);

    let x_of = |i: usize| {
        let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        MARGIN_L + t * (WIDTH - MARGIN_L - MARGIN_R)
    };
    let y_of = |v: f64| {
        let t = (v - lo) / (hi - lo);
        HEIGHT - MARGIN_B - t * (HEIGHT - MARGIN_T - MARGIN_B)
    };

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        WIDTH / 2.0
    );

    // Axes with 5 horizontal gridlines labeled by value.
    for g in 0..=4 {
        let v = lo + (hi - lo) * g as f64 / 4.0;
        let y = y_of(v);
        s.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#ddd\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>\n",
            WIDTH - MARGIN_R,
            MARGIN_L - 6.0,
            y + 4.0
        ));
    }
    s.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" stroke=\"#333\"/>\n\
         <line x1=\"{MARGIN_L}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"#333\"/>\n",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">epoch</text>\n\
         <text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{y_label}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    ));
    if n > 0 {
        for (i, label) in [(0usize, 1usize), (n.saturating_sub(1), n)] {
            s.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>\n",
                x_of(i),
                HEIGHT - MARGIN_B + 16.0
            ));
        }
    }

    for (si, (name, values)) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let points: Vec<String> =
            values.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", x_of(i), y_of(v))).collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let ly = MARGIN_T + 16.0 * si as f64;
        s.push_str(&format!(
            "<line x1=\"{0:.1}\" y1=\"{ly:.1}\" x2=\"{1:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n<text x=\"{2:.1}\" y=\"{3:.1}\">{name}</text>\n",
            MARGIN_L + 8.0,
            MARGIN_L + 28.0,
            MARGIN_L + 34.0,
            ly + 4.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_contains_one_polyline_per_series() {
        let a = [0.9, 0.5, 0.3];
        let b = [1.0, 0.6, 0.4];
        let svg = line_plot("loss", "loss", &[("train", &a), ("val", &b)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("train") && svg.contains("val"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn constant_series_does_not_divide_by_zero() {
        let flat = [0.5, 0.5, 0.5];
        let svg = line_plot("acc", "accuracy", &[("train", &flat)]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn plot_is_deterministic() {
        let a = [0.123456789, 0.2];
        let one = line_plot("x", "y", &[("s", &a)]);
        let two = line_plot("x", "y", &[("s", &a)]);
        assert_eq!(one, two);
    }
}
