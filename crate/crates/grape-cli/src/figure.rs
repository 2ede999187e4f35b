//! Static SVG rendering for the k-sweep figure: one panel per clustering
//! metric, mean line with a +-1 std shaded envelope, and a vertical marker
//! at the true number of complexes.

use grape_core::eval::MetricsReport;

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;

fn path_from(points: &[(f64, f64)]) -> String {
    points
        .iter()
        .enumerate()
        .map(|(i, (x, y))| format!("{}{x:.2},{y:.2}", if i == 0 { "M" } else { "L" }))
        .collect::<Vec<_>>()
        .join(" ")
}

struct Panel<'a> {
    title: &'a str,
    series: Vec<(usize, f64, f64)>, // (k, mean, std)
}

/// Render the sweep as side-by-side panels. `true_k` draws a dashed
/// vertical line in each panel.
pub fn render_sweep_svg(reports: &[MetricsReport], true_k: usize) -> String {
    let panels = [
        Panel {
            title: "purity",
            series: reports.iter().map(|r| (r.k, r.purity.mean, r.purity.std)).collect(),
        },
        Panel {
            title: "NMI",
            series: reports.iter().map(|r| (r.k, r.nmi.mean, r.nmi.std)).collect(),
        },
        Panel {
            title: "ARI",
            series: reports.iter().map(|r| (r.k, r.ari.mean, r.ari.std)).collect(),
        },
    ];
    let total_w = MARGIN + panels.len() as f64 * (PANEL_W + MARGIN);
    let total_h = PANEL_H + 2.0 * MARGIN;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w}\" height=\"{total_h}\" \
         viewBox=\"0 0 {total_w} {total_h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let k_min = reports.iter().map(|r| r.k).min().unwrap_or(1) as f64;
    let k_max = reports.iter().map(|r| r.k).max().unwrap_or(2) as f64;
    let k_span = (k_max - k_min).max(1.0);
    for (pi, panel) in panels.iter().enumerate() {
        let x0 = MARGIN + pi as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        // value range padded around mean +- std
        let lo = panel
            .series
            .iter()
            .map(|(_, m, s)| m - s)
            .fold(f64::INFINITY, f64::min)
            .min(0.0);
        let hi = panel
            .series
            .iter()
            .map(|(_, m, s)| m + s)
            .fold(f64::NEG_INFINITY, f64::max)
            .max(1.0);
        let span = (hi - lo).max(1e-9);
        let sx = |k: f64| x0 + (k - k_min) / k_span * PANEL_W;
        let sy = |v: f64| y0 + PANEL_H - (v - lo) / span * PANEL_H;

        svg.push_str(&format!(
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\" \
             fill=\"none\" stroke=\"#444\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            x0 + PANEL_W / 2.0,
            y0 - 10.0,
            panel.title
        ));
        // std envelope: upper path forward, lower path backward
        let mut env: Vec<(f64, f64)> = panel
            .series
            .iter()
            .map(|(k, m, s)| (sx(*k as f64), sy(m + s)))
            .collect();
        env.extend(
            panel
                .series
                .iter()
                .rev()
                .map(|(k, m, s)| (sx(*k as f64), sy(m - s))),
        );
        svg.push_str(&format!(
            "<path d=\"{} Z\" fill=\"#4a90d9\" fill-opacity=\"0.25\" stroke=\"none\"/>\n",
            path_from(&env)
        ));
        let mean: Vec<(f64, f64)> = panel
            .series
            .iter()
            .map(|(k, m, _)| (sx(*k as f64), sy(*m)))
            .collect();
        svg.push_str(&format!(
            "<path d=\"{}\" fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"2\"/>\n",
            path_from(&mean)
        ));
        if (k_min..=k_max).contains(&(true_k as f64)) {
            let x = sx(true_k as f64);
            svg.push_str(&format!(
                "<line x1=\"{x:.2}\" y1=\"{y0}\" x2=\"{x:.2}\" y2=\"{:.2}\" \
                 stroke=\"#c0392b\" stroke-dasharray=\"4 3\"/>\n",
                y0 + PANEL_H
            ));
        }
        // axis labels: k ticks at each evaluated k
        for (k, _, _) in &panel.series {
            let x = sx(*k as f64);
            svg.push_str(&format!(
                "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{k}</text>\n",
                y0 + PANEL_H + 16.0
            ));
        }
        for v in [lo, (lo + hi) / 2.0, hi] {
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>\n",
                x0 - 4.0,
                sy(v) + 4.0
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use grape_core::eval::Stat;

    fn report(k: usize, v: f64) -> MetricsReport {
        MetricsReport {
            k,
            restarts: 10,
            seed: 0,
            map: 0.5,
            purity: Stat { mean: v, std: 0.05 },
            nmi: Stat { mean: v, std: 0.05 },
            ari: Stat { mean: v, std: 0.05 },
        }
    }

    #[test]
    fn svg_has_three_panels_and_true_k_marker() {
        let reports: Vec<_> = (2..=6).map(|k| report(k, 0.5 + 0.05 * k as f64)).collect();
        let svg = render_sweep_svg(&reports, 4);
        assert_eq!(svg.matches("<rect").count(), 3);
        assert_eq!(svg.matches("stroke-dasharray").count(), 3);
        assert!(svg.contains("purity") && svg.contains("NMI") && svg.contains("ARI"));
        // coordinates stay inside the canvas
        assert!(!svg.contains("NaN"));
    }
}
