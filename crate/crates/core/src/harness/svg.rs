//! Minimal bar-chart SVG writer and a reader that recovers its bars.

use std::fmt::Write as _;

use quick_xml::events::Event;
use quick_xml::escape::escape;
use quick_xml::{Reader, XmlVersion};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    /// Optional second series drawn beside the first (e.g. Max-PAF).
    pub secondary: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarChart {
    pub title: String,
    pub y_label: String,
    pub bars: Vec<Bar>,
}

const BAR_W: f64 = 28.0;
const GAP: f64 = 14.0;
const PLOT_H: f64 = 240.0;
const LEFT: f64 = 60.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 120.0;

impl BarChart {
    pub fn to_svg(&self) -> String {
        let per = if self.bars.iter().any(|b| b.secondary.is_some()) { 2.0 } else { 1.0 };
        let width = LEFT + 20.0 + self.bars.len() as f64 * (per * BAR_W + GAP);
        let height = TOP + PLOT_H + BOTTOM;
        let top = self
            .bars
            .iter()
            .flat_map(|b| [b.value, b.secondary.unwrap_or(0.0)])
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max);
        let scale = if top > 0.0 { PLOT_H / top } else { 0.0 };
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" data-title="{}">"#,
            escape(self.title.as_str())
        );
        let _ = writeln!(s, r#"<text x="{LEFT}" y="20" font-size="14">{}</text>"#, escape(self.title.as_str()));
        let _ = writeln!(
            s,
            r#"<text x="12" y="{:.1}" font-size="11" transform="rotate(-90 12 {:.1})">{}</text>"#,
            TOP + PLOT_H / 2.0,
            TOP + PLOT_H / 2.0,
            escape(self.y_label.as_str())
        );
        let base = TOP + PLOT_H;
        let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{base}" x2="{width:.1}" y2="{base}" stroke="black"/>"#);
        for (i, b) in self.bars.iter().enumerate() {
            let x = LEFT + i as f64 * (per * BAR_W + GAP);
            let h = if b.value.is_finite() { (b.value.max(0.0)) * scale } else { 0.0 };
            let _ = writeln!(
                s,
                r##"<rect class="bar" x="{x:.1}" y="{:.1}" width="{BAR_W}" height="{h:.1}" fill="#4c72b0" data-label="{}" data-value="{:e}"/>"##,
                base - h,
                escape(b.label.as_str()),
                b.value
            );
            if let Some(v) = b.secondary {
                let h2 = if v.is_finite() { v.max(0.0) * scale } else { 0.0 };
                let _ = writeln!(
                    s,
                    r##"<rect class="bar2" x="{:.1}" y="{:.1}" width="{BAR_W}" height="{h2:.1}" fill="#dd8452" data-label="{}" data-value="{v:e}"/>"##,
                    x + BAR_W,
                    base - h2,
                    escape(b.label.as_str())
                );
            }
            let lx = x + BAR_W / 2.0;
            let _ = writeln!(
                s,
                r#"<text x="{lx:.1}" y="{:.1}" font-size="9" transform="rotate(60 {lx:.1} {:.1})">{}</text>"#,
                base + 12.0,
                base + 12.0,
                escape(b.label.as_str())
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// Parses a chart written by [`BarChart::to_svg`]. Fails on malformed
    /// XML or a missing root, so it doubles as a validator.
    pub fn from_svg(text: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidArgument(format!("svg: {m}"));
        let mut reader = Reader::from_str(text);
        let mut chart = BarChart {
            title: String::new(),
            y_label: String::new(),
            bars: Vec::new(),
        };
        let mut saw_root = false;
        let mut depth = 0usize;
        loop {
            let ev = reader.read_event().map_err(|e| bad(e.to_string()))?;
            let (e, empty) = match &ev {
                Event::Start(e) => (e, false),
                Event::Empty(e) => (e, true),
                Event::End(_) => {
                    depth = depth.checked_sub(1).ok_or_else(|| bad("unbalanced end tag".into()))?;
                    continue;
                }
                Event::Eof => break,
                _ => continue,
            };
            if !empty {
                depth += 1;
            }
            let attr = |name: &str| -> Result<Option<String>> {
                match e.try_get_attribute(name).map_err(|x| bad(x.to_string()))? {
                    Some(a) => Ok(Some(a.normalized_value(XmlVersion::Implicit1_0).map_err(|x| bad(x.to_string()))?.into_owned())),
                    None => Ok(None),
                }
            };
            match e.name().0 {
                "svg" => {
                    saw_root = true;
                    chart.title = attr("data-title")?.unwrap_or_default();
                }
                "rect" => {
                    let class = attr("class")?;
                    let label = attr("data-label")?;
                    let value = attr("data-value")?;
                    let (Some(class), Some(label), Some(value)) = (class, label, value) else {
                        continue;
                    };
                    let v: f64 = value.parse().map_err(|_| bad(format!("bad bar value {value:?}")))?;
                    match class.as_str() {
                        "bar" => chart.bars.push(Bar {
                            label,
                            value: v,
                            secondary: None,
                        }),
                        "bar2" => {
                            let last = chart.bars.last_mut().ok_or_else(|| bad("secondary bar before primary".into()))?;
                            last.secondary = Some(v);
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
        }
        if !saw_root {
            return Err(bad("no <svg> root element".into()));
        }
        if depth != 0 {
            return Err(bad("unclosed elements".into()));
        }
        // The rotated axis label is the second text element; recover it
        // from the raw text rather than tracking element order.
        if let Some(start) = text.find("rotate(-90") {
            if let Some(gt) = text[start..].find('>') {
                let rest = &text[start + gt + 1..];
                if let Some(end) = rest.find("</text>") {
                    chart.y_label = quick_xml::escape::unescape(&rest[..end])
                        .map_err(|e| bad(e.to_string()))?
                        .into_owned();
                }
            }
        }
        Ok(chart)
    }
}
