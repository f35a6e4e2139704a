//! Error-vs-resource Pareto fronts, CSV export and a small SVG scatter plot.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{NashError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    pub variant: String,
    pub wbits: u8,
    pub abits: u8,
    pub error_pct: f64,
    pub bram: u64,
    pub lut: f64,
    pub latency_ms: f64,
    pub throughput_fps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKey {
    Bram,
    Lut,
}

impl ResourceKey {
    pub fn of(self, p: &ParetoPoint) -> f64 {
        match self {
            ResourceKey::Bram => p.bram as f64,
            ResourceKey::Lut => p.lut,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ResourceKey::Bram => "bram",
            ResourceKey::Lut => "lut",
        }
    }
}

impl std::str::FromStr for ResourceKey {
    type Err = NashError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bram" => Ok(ResourceKey::Bram),
            "lut" => Ok(ResourceKey::Lut),
            _ => Err(NashError::invalid(format!("unknown resource `{s}` (bram or lut)"))),
        }
    }
}

/// `a` dominates `b`: no worse in both error and resource, strictly better in one.
pub fn dominates(a: &ParetoPoint, b: &ParetoPoint, key: ResourceKey) -> bool {
    let (ea, ra, eb, rb) = (a.error_pct, key.of(a), b.error_pct, key.of(b));
    ea <= eb && ra <= rb && (ea < eb || ra < rb)
}

/// Non-dominated subset, sorted by resource then error. Points with identical
/// coordinates collapse to the one with the smallest label.
pub fn pareto_front(points: &[ParetoPoint], key: ResourceKey) -> Result<Vec<ParetoPoint>> {
    for p in points {
        if !p.error_pct.is_finite() || !key.of(p).is_finite() {
            return Err(NashError::invalid(format!("point `{}` has a non-finite coordinate", p.label)));
        }
    }
    let mut front: Vec<ParetoPoint> = points
        .iter()
        .filter(|p| !points.iter().any(|q| dominates(q, p, key)))
        .cloned()
        .collect();
    front.sort_by(|a, b| {
        key.of(a)
            .total_cmp(&key.of(b))
            .then(a.error_pct.total_cmp(&b.error_pct))
            .then_with(|| a.label.cmp(&b.label))
    });
    front.dedup_by(|b, a| a.error_pct == b.error_pct && key.of(a) == key.of(b));
    Ok(front)
}

pub fn emit_csv(points: &[ParetoPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p)?;
    }
    if points.is_empty() {
        w.write_record(["label", "variant", "wbits", "abits", "error_pct", "bram", "lut", "latency_ms", "throughput_fps"])?;
    }
    let bytes = w.into_inner().map_err(|e| NashError::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn load_csv(text: &str) -> Result<Vec<ParetoPoint>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(NashError::from)).collect()
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Resource on x, error on y. All points are drawn as circles and the front
/// as a polyline through its points in resource order.
pub fn emit_svg(points: &[ParetoPoint], front: &[ParetoPoint], key: ResourceKey) -> Result<String> {
    if points.is_empty() {
        return Err(NashError::invalid("nothing to plot"));
    }
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 56.0;
    let xs: Vec<f64> = points.iter().map(|p| key.of(p)).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.error_pct).collect();
    let span = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, hi + 1.0)
        }
    };
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{M}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{M}" y1="{M}" x2="{M}" y2="{b}"/></g>"#,
        b = H - M,
        r = W - M
    );
    for (v, x) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" font-size="11" text-anchor="middle">{v:.1}</text>"#, H - M + 16.0);
    }
    for (v, y) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}" font-size="11" text-anchor="end">{v:.1}</text>"#, M - 6.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, key.name());
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.1})">error %</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(s, r#"<g class="points" fill="steelblue">"#);
    for p in points {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4"><title>{}</title></circle>"#,
            px(key.of(p)),
            py(p.error_pct),
            esc(&p.label)
        );
    }
    let _ = writeln!(s, "</g>");
    let pts: Vec<String> = front.iter().map(|p| format!("{:.2},{:.2}", px(key.of(p)), py(p.error_pct))).collect();
    let _ = writeln!(s, r#"<polyline class="front" fill="none" stroke="crimson" stroke-width="2" points="{}"/>"#, pts.join(" "));
    s.push_str("</svg>\n");
    Ok(s)
}
