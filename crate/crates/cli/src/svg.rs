//! Static line charts for the speed benchmark. No dependencies: the charts
//! are simple enough that hand-written SVG stays readable and diffable.

/// One polyline. `class` ends up on the element so tests and stylesheets can
/// address series by name.
pub struct Series {
    pub name: String,
    pub class: String,
    /// (x category index, y value); gaps are allowed and split the line.
    pub points: Vec<(usize, f64)>,
    pub dashed: bool,
}

const PALETTE: &[&str] =
    &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

const W: f64 = 640.0;
const H: f64 = 400.0;
const ML: f64 = 56.0; // left margin, y labels
const MR: f64 = 160.0; // right margin, legend
const MT: f64 = 36.0;
const MB: f64 = 44.0;

fn fmt(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

/// Category x-axis line chart. `x_labels` fixes the category order; series
/// points index into it.
pub fn line_chart(title: &str, y_label: &str, x_labels: &[String], series: &[Series]) -> String {
    let ymax = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .fold(1.0f64, f64::max)
        * 1.08;
    let plot_w = W - ML - MR;
    let plot_h = H - MT - MB;
    let nx = x_labels.len().max(2);
    let x_of = |i: usize| ML + plot_w * i as f64 / (nx - 1) as f64;
    let y_of = |v: f64| MT + plot_h * (1.0 - v / ymax);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!("<title>{title}</title>\n"));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        ML + plot_w / 2.0
    ));
    // Frame and gridlines with y ticks at quarters.
    s.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"#999\"/>\n"
    ));
    for q in 0..=4 {
        let v = ymax * q as f64 / 4.0;
        let y = y_of(v);
        if q > 0 && q < 4 {
            s.push_str(&format!(
                "<line x1=\"{ML}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
                 stroke=\"#ddd\"/>\n",
                ML + plot_w
            ));
        }
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            ML - 6.0,
            y + 4.0,
            fmt(v)
        ));
    }
    // Reference line at speedup 1.
    if ymax > 1.0 {
        let y = y_of(1.0);
        s.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#bbb\" stroke-dasharray=\"2 3\"/>\n",
            ML + plot_w
        ));
    }
    for (i, lab) in x_labels.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{lab}</text>\n",
            x_of(i),
            MT + plot_h + 18.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" transform=\"rotate(-90 16 {:.1})\" \
         text-anchor=\"middle\">{y_label}</text>\n",
        MT + plot_h / 2.0,
        MT + plot_h / 2.0
    ));

    for (si, ser) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let dash = if ser.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(i, v)| format!("{:.1},{:.1}", x_of(i), y_of(v)))
            .collect();
        s.push_str(&format!(
            "<polyline class=\"{}\" fill=\"none\" stroke=\"{color}\" \
             stroke-width=\"1.8\"{dash} points=\"{}\"/>\n",
            ser.class,
            pts.join(" ")
        ));
        for &(i, v) in &ser.points {
            s.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.4\" fill=\"{color}\"/>\n",
                x_of(i),
                y_of(v)
            ));
        }
        let ly = MT + 14.0 * si as f64;
        let lx = ML + plot_w + 10.0;
        s.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
             stroke=\"{color}\" stroke-width=\"1.8\"{dash}/>\n",
            ly, lx + 18.0, ly
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            lx + 24.0,
            ly + 4.0,
            ser.name
        ));
    }
    s.push_str("</svg>\n");
    s
}
