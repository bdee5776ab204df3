//! SVG emitters for the analysis artifacts: affinity heatmaps, layered
//! route diagrams, prune curves and coverage histograms.
//!
//! Outputs are plain SVG strings; plotting never mutates its inputs.

use crate::analysis::{AffinityMatrix, CoverageStats, RoutingGraph};

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n<rect width=\"{w:.0}\" height=\"{h:.0}\" fill=\"white\"/>\n"
    )
}

/// Blue-to-red ramp over [0, 1].
fn ramp(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * v) as u8;
    let g = (80.0 * (1.0 - (2.0 * v - 1.0).abs())) as u8;
    let b = (255.0 * (1.0 - v)) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heatmap of a row-stochastic matrix with row/column labels.
pub fn heatmap_svg(m: &AffinityMatrix, title: &str) -> String {
    let (rows, cols) = (m.rows(), m.cols());
    let cell = 14.0;
    let margin_left = 70.0;
    let margin_top = 40.0;
    let w = margin_left + cols as f64 * cell + 20.0;
    let h = margin_top + rows as f64 * cell + 60.0;
    let mut out = svg_open(w, h);
    out.push_str(&format!(
        "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        margin_left,
        esc(title)
    ));
    let max = m.data.iter().cloned().fold(0.0_f64, f64::max).max(1e-12);
    for r in 0..rows {
        for c in 0..cols {
            let v = m.data[r * cols + c] / max;
            out.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\"/>\n",
                margin_left + c as f64 * cell,
                margin_top + r as f64 * cell,
                ramp(v)
            ));
        }
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"end\">{}</text>\n",
            margin_left - 4.0,
            margin_top + r as f64 * cell + cell * 0.75,
            esc(&m.row_labels[r])
        ));
    }
    for c in 0..cols {
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"9\" transform=\"rotate(45 {:.1} {:.1})\">{}</text>\n",
            margin_left + c as f64 * cell + 2.0,
            margin_top + rows as f64 * cell + 12.0,
            margin_left + c as f64 * cell + 2.0,
            margin_top + rows as f64 * cell + 12.0,
            esc(&m.col_labels[c])
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Layered cross-layer routing diagram. Edge styling follows the two
/// percentile bands: below the first percentile grey, between the bands
/// blue, above the second red.
pub fn routes_svg(graph: &RoutingGraph, bands: (f64, f64), title: &str) -> String {
    let e = graph.num_experts;
    let layers = graph.layers.len();
    let col_gap = 160.0;
    let row_gap = (420.0 / e as f64).clamp(6.0, 28.0);
    let margin = 60.0;
    let w = margin * 2.0 + (layers.saturating_sub(1)) as f64 * col_gap + 40.0;
    let h = margin * 2.0 + (e - 1) as f64 * row_gap + 40.0;
    let mut out = svg_open(w.max(320.0), h.max(240.0));
    out.push_str(&format!(
        "<text x=\"{margin}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        esc(title)
    ));

    // percentile bands over all traversed edges
    let mut pool: Vec<f64> = Vec::new();
    for (pi, c) in graph.counts.iter().enumerate() {
        for (i, &cv) in c.iter().enumerate() {
            if cv > 0 {
                pool.push(graph.weights[pi][i]);
            }
        }
    }
    pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // interpolated percentile: keeps the top band reachable on small graphs
    let pct = |p: f64| -> f64 {
        if pool.is_empty() {
            return 0.0;
        }
        let pos = (p / 100.0) * (pool.len() - 1) as f64;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        if i + 1 < pool.len() {
            pool[i] * (1.0 - frac) + pool[i + 1] * frac
        } else {
            pool[pool.len() - 1]
        }
    };
    let (lo, hi) = (pct(bands.0), pct(bands.1));

    let x_of = |li: usize| margin + li as f64 * col_gap;
    let y_of = |ex: usize| margin + ex as f64 * row_gap;
    for (pi, &(_, _)) in graph.layer_pairs.iter().enumerate() {
        for from in 0..e {
            for to in 0..e {
                let cnt = graph.counts[pi][from * e + to];
                if cnt == 0 {
                    continue;
                }
                let wgt = graph.weights[pi][from * e + to];
                let (color, width) = if wgt > hi {
                    ("#cc2222", 2.2)
                } else if wgt >= lo {
                    ("#2255cc", 1.4)
                } else {
                    ("#bbbbbb", 0.7)
                };
                out.push_str(&format!(
                    "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-width=\"{width}\" stroke-opacity=\"0.8\"/>\n",
                    x_of(pi),
                    y_of(from),
                    x_of(pi + 1),
                    y_of(to)
                ));
            }
        }
    }
    for (li, &layer) in graph.layers.iter().enumerate() {
        for ex in 0..e {
            let load = graph.node_loads.get(&layer).map(|l| l[ex]).unwrap_or(0);
            let fill = if load == 0 { "#eeeeee" } else { "#333333" };
            out.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{fill}\"/>\n",
                x_of(li),
                y_of(ex)
            ));
        }
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">layer {layer}</text>\n",
            x_of(li),
            h.max(240.0) - 16.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Accuracy (and dropped-expert count) against pruning percentile.
pub fn prune_curve_svg(points: &[(f64, f64, usize)], title: &str) -> String {
    let (w, h) = (520.0, 360.0);
    let (ml, mr, mt, mb) = (60.0, 60.0, 40.0, 50.0);
    let mut out = svg_open(w, h);
    out.push_str(&format!(
        "<text x=\"{ml}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        esc(title)
    ));
    if points.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let max_dropped = points.iter().map(|p| p.2).max().unwrap_or(1).max(1) as f64;
    let x_of = |p: f64| ml + (p / 100.0) * (w - ml - mr);
    let y_acc = |a: f64| h - mb - (a / 100.0) * (h - mt - mb);
    let y_cnt = |c: usize| h - mb - (c as f64 / max_dropped) * (h - mt - mb);

    // axes
    out.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb
    ));
    out.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb
    ));
    let path_from = |ys: Vec<(f64, f64)>| -> String {
        ys.iter()
            .enumerate()
            .map(|(i, (x, y))| format!("{}{:.1},{:.1}", if i == 0 { "M" } else { "L" }, x, y))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let acc_path = path_from(points.iter().map(|p| (x_of(p.0), y_acc(p.1))).collect());
    let cnt_path = path_from(points.iter().map(|p| (x_of(p.0), y_cnt(p.2))).collect());
    out.push_str(&format!(
        "<path d=\"{acc_path}\" fill=\"none\" stroke=\"#2255cc\" stroke-width=\"2\"/>\n"
    ));
    out.push_str(&format!(
        "<path d=\"{cnt_path}\" fill=\"none\" stroke=\"#cc8822\" stroke-width=\"2\" stroke-dasharray=\"5,3\"/>\n"
    ));
    for p in points {
        out.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#2255cc\"/>\n",
            x_of(p.0),
            y_acc(p.1)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">percentile</text>\n",
        (w - ml - mr) / 2.0 + ml,
        h - 14.0
    ));
    out.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#2255cc\" transform=\"rotate(-90 14 {:.1})\">accuracy %</text>\n",
        (h - mt - mb) / 2.0 + mt,
        (h - mt - mb) / 2.0 + mt
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#cc8822\" transform=\"rotate(-90 {:.1} {:.1})\">dropped</text>\n",
        w - 16.0,
        (h - mt - mb) / 2.0 + mt,
        w - 16.0,
        (h - mt - mb) / 2.0 + mt
    ));
    out.push_str("</svg>\n");
    out
}

/// Histogram of coverage fractions.
pub fn coverage_histogram_svg(stats: &CoverageStats, title: &str) -> String {
    let (w, h) = (520.0, 320.0);
    let (ml, mt, mb) = (50.0, 40.0, 50.0);
    let mr = 20.0;
    let mut out = svg_open(w, h);
    out.push_str(&format!(
        "<text x=\"{ml}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        esc(title)
    ));
    let max_count = stats
        .histogram
        .iter()
        .map(|(_, _, c)| *c)
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let n = stats.histogram.len() as f64;
    let bw = (w - ml - mr) / n;
    for (i, (lo, _hi, count)) in stats.histogram.iter().enumerate() {
        let bh = (*count as f64 / max_count) * (h - mt - mb);
        out.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#44779955\" stroke=\"#447799\"/>\n",
            ml + i as f64 * bw,
            h - mb - bh,
            bw - 1.0,
            bh
        ));
        if i % 2 == 0 {
            out.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"9\">{:.2}</text>\n",
                ml + i as f64 * bw,
                h - mb + 14.0,
                lo
            ));
        }
    }
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">coverage fraction (threshold {})</text>\n",
        ml,
        h - 10.0,
        stats.threshold
    ));
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    /// Tiny well-formedness checker: tags balance, attributes quoted,
    /// ampersands escaped. Enough to catch malformed emitter output.
    pub fn assert_well_formed_xml(s: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = s;
        while let Some(start) = rest.find('<') {
            let tail = &rest[start + 1..];
            let end = tail.find('>').expect("unclosed tag bracket");
            let tag = &tail[..end];
            if let Some(name) = tag.strip_prefix('/') {
                let open = stack.pop().unwrap_or_else(|| panic!("orphan </{name}>"));
                assert_eq!(open, name, "mismatched close tag");
            } else if !tag.ends_with('/') && !tag.starts_with('?') && !tag.starts_with('!') {
                let name: String = tag
                    .chars()
                    .take_while(|c| !c.is_whitespace() && *c != '>')
                    .collect();
                stack.push(name);
            }
            // raw ampersands must be escaped entities
            for (i, _) in tail[..end].match_indices('&') {
                let after = &tail[i + 1..end.min(i + 6)];
                assert!(
                    after.starts_with("amp;")
                        || after.starts_with("lt;")
                        || after.starts_with("gt;")
                        || after.starts_with("quot;"),
                    "raw ampersand in attribute"
                );
            }
            rest = &tail[end + 1..];
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    }

    fn sample_matrix() -> AffinityMatrix {
        AffinityMatrix {
            row_labels: vec!["class<0>".into(), "class&1".into()],
            col_labels: vec!["expert0".into(), "expert1".into(), "expert2".into()],
            data: vec![0.9, 0.05, 0.05, 0.1, 0.8, 0.1],
            absent_rows: vec![],
        }
    }

    #[test]
    fn heatmap_is_valid_xml_with_escaped_labels() {
        let svg = heatmap_svg(&sample_matrix(), "affinity & more");
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("&amp;"));
        assert!(!svg.contains("class<0>"));
        assert_well_formed_xml(&svg);
    }

    #[test]
    fn route_diagram_renders_all_bands() {
        // ten weight-1 edges, one weight-20 edge, one weight-200 edge:
        // under interpolated (90, 99.9) bands they split grey/blue/red
        let mut c = vec![0u64; 16];
        for slot in [0usize, 1, 2, 3, 4, 5, 6, 7, 8, 9] {
            c[slot] = 1;
        }
        c[10] = 20;
        c[15] = 200;
        let counts = vec![c];
        let weights: Vec<Vec<f64>> = counts
            .iter()
            .map(|c| {
                let t: u64 = c.iter().sum();
                c.iter().map(|&v| v as f64 / t as f64).collect()
            })
            .collect();
        let mut node_loads = BTreeMap::new();
        node_loads.insert(0usize, vec![4u64, 4, 22, 200]);
        node_loads.insert(1usize, vec![3, 3, 23, 201]);
        let g = RoutingGraph {
            num_experts: 4,
            layer_pairs: vec![(0, 1)],
            counts,
            weights,
            layers: vec![0, 1],
            node_loads,
        };
        let svg = routes_svg(&g, (90.0, 99.9), "routes");
        assert_well_formed_xml(&svg);
        assert!(svg.contains("#cc2222"), "a red high-traffic edge");
        assert!(svg.contains("#2255cc"), "a blue mid-traffic edge");
        assert!(svg.contains("#bbbbbb"), "a grey low-traffic edge");
    }

    #[test]
    fn prune_curve_and_histogram_are_valid() {
        let svg = prune_curve_svg(
            &[(0.0, 80.0, 0), (50.0, 78.0, 4), (90.0, 60.0, 11)],
            "prune",
        );
        assert_well_formed_xml(&svg);

        let stats = CoverageStats {
            coverage: vec![0.1, 0.2, 0.9],
            threshold: 0.01,
            histogram: vec![(0.0, 0.5, 2), (0.5, 1.0, 1)],
        };
        let svg = coverage_histogram_svg(&stats, "coverage");
        assert_well_formed_xml(&svg);
    }
}
