//! Report envelope, input digests and the CSV/SVG renderings of curves and
//! confusion matrices.

use std::fmt::Write as _;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::ClassLabel;
use crate::metrics::{ConfusionMatrix, CurveKind, CurveSeries};

pub const SCHEMA_VERSION: u32 = 1;

/// JSON Schema every emitted report validates against.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

pub const TIE_BREAK_NOTE: &str =
    "argmax ties within 1e-12 go to the most severe class (A-EGJA > E-EGJA > control)";

pub const POOLED_PAIRING_NOTE: &str = "model-vs-group tests pair the model's prediction with every \
reader observation of the same image; group-vs-group kappa pairs every answer of one group with \
every answer of the other on shared images. This pairing is an analysis choice of this tool.";

pub const WEIGHTED_N_NOTE: &str =
    "weighted intervals use the effective sample size n = sum of weights (the patient count)";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputDigest {
    pub role: String,
    /// File name without directories, so digests do not depend on where the
    /// inputs live.
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

impl InputDigest {
    pub fn new(role: &str, path: &std::path::Path, content: &[u8]) -> Self {
        Self {
            role: role.to_string(),
            file: path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            bytes: content.len(),
            sha256: sha256_hex(content),
        }
    }
}

/// Fields shared by every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Envelope {
    pub schema_version: u32,
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub inputs: Vec<InputDigest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at_unix: Option<u64>,
    pub notes: Vec<String>,
}

impl Envelope {
    pub fn new(command: &str, config: serde_json::Value, inputs: Vec<InputDigest>, stamp: bool) -> Self {
        let config_hash = sha256_hex(&serde_json::to_vec(&config).expect("config serializes"));
        let generated_at_unix = stamp.then(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        });
        Self {
            schema_version: SCHEMA_VERSION,
            tool: "gjeval",
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config,
            config_hash,
            inputs,
            generated_at_unix,
            notes: vec![TIE_BREAK_NOTE.to_string()],
        }
    }
}

/// An envelope with a command-specific body flattened into it.
#[derive(Debug, Clone, Serialize)]
pub struct Report<T: Serialize> {
    #[serde(flatten)]
    pub envelope: Envelope,
    #[serde(flatten)]
    pub body: T,
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}

pub fn cm_csv(cm: &ConfusionMatrix) -> String {
    let mut s = String::from("truth\\pred");
    for c in ClassLabel::ALL {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for t in ClassLabel::ALL {
        s.push_str(t.as_str());
        for p in ClassLabel::ALL {
            let _ = write!(s, ",{}", cm.get(t, p));
        }
        s.push('\n');
    }
    s
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Minimal line chart of one or more curves on the unit square.
pub fn curves_svg(title: &str, series: &[(String, &CurveSeries)]) -> String {
    const SIZE: f64 = 360.0;
    const PAD: f64 = 48.0;
    let kind = series.first().map(|s| s.1.kind).unwrap_or(CurveKind::Roc);
    let (x_label, y_label) = match kind {
        CurveKind::Roc => ("false positive rate", "true positive rate"),
        CurveKind::Pr => ("recall", "precision"),
    };
    let px = |x: f64| PAD + x * SIZE;
    let py = |y: f64| PAD + (1.0 - y) * SIZE;
    let total = SIZE + 2.0 * PAD;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{h}" viewBox="0 0 {total} {h}" font-family="sans-serif" font-size="11">"#,
        h = total + 16.0 * series.len() as f64
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        total / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{t}</text>"#,
            px(t),
            PAD + SIZE + 14.0,
            PAD - 4.0,
            py(t) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x_label}</text>"#,
        total / 2.0,
        PAD + SIZE + 30.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{y_label}</text>"#,
        total / 2.0,
        total / 2.0
    );
    if kind == CurveKind::Roc {
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999" stroke-dasharray="4 3"/>"##,
            px(0.0),
            py(0.0),
            px(1.0),
            py(1.0)
        );
    }
    for (i, (name, curve)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.x), py(p.y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = total + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{PAD}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{} (area {:.4})</text>"#,
            ly - 4.0,
            PAD + 20.0,
            ly - 4.0,
            PAD + 26.0,
            ly,
            escape(name),
            curve.area
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::roc_points;

    #[test]
    fn digest_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn cm_csv_layout() {
        let cm = ConfusionMatrix::from_counts([[463.0, 29.0, 5.0], [30.0, 176.0, 2.0], [0.0, 2.0, 207.0]]);
        let s = cm_csv(&cm);
        assert_eq!(s.lines().next().unwrap(), "truth\\pred,A-EGJA,E-EGJA,control");
        assert_eq!(s.lines().nth(1).unwrap(), "A-EGJA,463,29,5");
    }

    #[test]
    fn config_hash_is_stable() {
        let cfg = serde_json::json!({"level": "image", "seed": 1});
        let a = Envelope::new("evaluate", cfg.clone(), vec![], false);
        let b = Envelope::new("evaluate", cfg, vec![], false);
        assert_eq!(a, b);
        assert!(a.generated_at_unix.is_none());
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let roc = roc_points(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]).unwrap();
        let svg = curves_svg("ROC <test>", &[("a".into(), &roc), ("b".into(), &roc)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("ROC &lt;test&gt;"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
