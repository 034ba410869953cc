//! Dependency-free SVG emission, bit-stable for golden-file tests.

/// Fixed-layout bar chart of histogram counts over [0,1].
pub fn histogram_svg(counts: &[usize], title: &str) -> String {
    let width = 640.0;
    let height = 400.0;
    let margin_left = 56.0;
    let margin_right = 16.0;
    let margin_top = 40.0;
    let margin_bottom = 48.0;
    let plot_w = width - margin_left - margin_right;
    let plot_h = height - margin_top - margin_bottom;
    let max_count = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bins = counts.len().max(1) as f64;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    ));
    s.push_str("<rect x=\"0\" y=\"0\" width=\"640\" height=\"400\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" font-family=\"monospace\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        margin_left + plot_w / 2.0,
        xml_escape(title)
    ));
    for (i, &c) in counts.iter().enumerate() {
        let bar_h = plot_h * c as f64 / max_count;
        let x = margin_left + plot_w * i as f64 / bins;
        let y = margin_top + plot_h - bar_h;
        let w = plot_w / bins;
        s.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{bar_h:.2}\" fill=\"#47a3ff\" stroke=\"white\" stroke-width=\"0.5\"/>\n"
        ));
    }
    // axes
    s.push_str(&format!(
        "<line x1=\"{margin_left:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        margin_top + plot_h,
        margin_left + plot_w,
        margin_top + plot_h
    ));
    s.push_str(&format!(
        "<line x1=\"{margin_left:.1}\" y1=\"{margin_top:.1}\" x2=\"{margin_left:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        margin_top + plot_h
    ));
    for (frac, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        let x = margin_left + plot_w * frac;
        s.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{label}</text>\n",
            margin_top + plot_h + 18.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
        margin_left - 6.0,
        margin_top + 4.0,
        max_count as usize
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">0</text>\n",
        margin_left - 6.0,
        margin_top + plot_h + 4.0
    ));
    s.push_str("</svg>\n");
    s
}

/// Grayscale rendering of one image with a caption, for failure reports.
pub fn image_card_svg(pixels: &[f64], size: usize, caption: &str) -> String {
    let cell = 6.0;
    let w = size as f64 * cell;
    let h = w + 20.0;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n"
    ));
    for r in 0..size {
        for c in 0..size {
            let v = (pixels[r * size + c].clamp(0.0, 1.0) * 255.0).round() as u8;
            s.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell:.1}\" height=\"{cell:.1}\" fill=\"rgb({v},{v},{v})\"/>\n",
                c as f64 * cell,
                r as f64 * cell
            ));
        }
    }
    s.push_str(&format!(
        "<text x=\"2\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\">{}</text>\n",
        w + 14.0,
        xml_escape(caption)
    ));
    s.push_str("</svg>\n");
    s
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
