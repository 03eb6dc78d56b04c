//! Metric reports as JSON and CSV.

use dgcrf_core::metrics::MetricReport;
use serde_json::{json, Map, Value};

pub fn report_json(r: &MetricReport) -> Value {
    let mut m = Map::new();
    for (k, v) in MetricReport::FIELDS.iter().zip(r.values()) {
        m.insert((*k).to_string(), json!(v));
    }
    m.insert("valid_pixels".into(), json!(r.valid_pixel_count));
    m.insert("cap".into(), json!(r.cap));
    Value::Object(m)
}

pub fn csv_header() -> String {
    format!("name,{},valid_pixels", MetricReport::FIELDS.join(","))
}

pub fn csv_row(name: &str, r: &MetricReport) -> String {
    let values: Vec<String> = r.values().iter().map(|v| format!("{v:?}")).collect();
    format!("{name},{},{}", values.join(","), r.valid_pixel_count)
}

/// Mean of the per-image reports; pixel counts are summed.
pub fn aggregate(reports: &[MetricReport]) -> Option<MetricReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(MetricReport {
        rel: mean(|r| r.rel),
        sq_rel: mean(|r| r.sq_rel),
        rms: mean(|r| r.rms),
        rms_log: mean(|r| r.rms_log),
        log10: mean(|r| r.log10),
        delta1: mean(|r| r.delta1),
        delta2: mean(|r| r.delta2),
        delta3: mean(|r| r.delta3),
        valid_pixel_count: reports.iter().map(|r| r.valid_pixel_count).sum(),
        cap: first.cap,
    })
}

/// Per-image rows plus an `aggregate` entry.
pub struct EvalReport {
    pub per_image: Vec<(String, MetricReport)>,
    pub aggregate: MetricReport,
}

impl EvalReport {
    pub fn to_json(&self) -> Value {
        let images: Map<String, Value> = self
            .per_image
            .iter()
            .map(|(n, r)| (n.clone(), report_json(r)))
            .collect();
        json!({ "aggregate": report_json(&self.aggregate), "images": images })
    }

    pub fn to_csv(&self) -> String {
        let mut out = csv_header();
        out.push('\n');
        for (n, r) in &self.per_image {
            out.push_str(&csv_row(n, r));
            out.push('\n');
        }
        out.push_str(&csv_row("aggregate", &self.aggregate));
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dgcrf_core::metrics::evaluate;

    #[test]
    fn json_uses_fixed_field_names() {
        let r = evaluate(&[2.0, 2.0], &[1.0, 4.0], 80.0, None).unwrap();
        let v = report_json(&r);
        for k in ["rel", "sq_rel", "rms", "rms_log", "log10", "d1", "d2", "d3"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["rel"], json!(0.75));
    }

    #[test]
    fn aggregate_is_the_mean() {
        let a = evaluate(&[1.0], &[1.0], 80.0, None).unwrap();
        let b = evaluate(&[2.0, 2.0], &[1.0, 4.0], 80.0, None).unwrap();
        let m = aggregate(&[a, b]).unwrap();
        assert_eq!(m.rel, 0.375);
        assert_eq!(m.delta1, 0.5);
        assert_eq!(m.valid_pixel_count, 3);
    }
}
