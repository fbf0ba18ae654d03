use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::plot::{line_chart, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mi,
    Tp,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Mi => "mi",
            Metric::Tp => "tp",
        }
    }
}

/// Per-layer increments of a site metric and the MHA/FFN split of their sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub metric: Metric,
    pub sites: Vec<String>,
    pub values: Vec<f64>,
    pub delta_mha: Vec<f64>,
    pub delta_ffn: Vec<f64>,
    /// Running sums of the clamped increments, one entry per layer.
    pub cumulative_mha: Vec<f64>,
    pub cumulative_ffn: Vec<f64>,
    pub ffn_ratio: f64,
    pub mha_ratio: f64,
    pub raw_mha_sum: f64,
    pub raw_ffn_sum: f64,
}

/// Canonical site names for an `layers`-block model.
pub fn site_names(layers: usize) -> Vec<String> {
    let mut v = vec!["embed".to_string()];
    for l in 1..=layers {
        v.push(format!("L{l}.mha"));
        v.push(format!("L{l}.ffn"));
    }
    v
}

/// `Δ_mha(l) = m(l.mha) − m(previous site)`, `Δ_ffn(l) = m(l.ffn) − m(l.mha)`;
/// the ratios use increments clamped at zero, the raw sums do not.
pub fn contribution_ratio(
    metric: Metric,
    sites: &[String],
    values: &[f64],
) -> Result<ContributionReport> {
    if sites.len() != values.len() || sites.len() < 3 || sites.len() % 2 == 0 {
        return Err(LabError::Invalid(format!(
            "expected embed plus mha/ffn pairs, got {} sites and {} values",
            sites.len(),
            values.len()
        )));
    }
    let layers = (sites.len() - 1) / 2;
    if sites != site_names(layers).as_slice() {
        return Err(LabError::Invalid(format!(
            "site order {sites:?} is not embed, L1.mha, L1.ffn, ..."
        )));
    }
    let mut report = ContributionReport {
        metric,
        sites: sites.to_vec(),
        values: values.to_vec(),
        delta_mha: Vec::with_capacity(layers),
        delta_ffn: Vec::with_capacity(layers),
        cumulative_mha: Vec::with_capacity(layers),
        cumulative_ffn: Vec::with_capacity(layers),
        ffn_ratio: 0.0,
        mha_ratio: 0.0,
        raw_mha_sum: 0.0,
        raw_ffn_sum: 0.0,
    };
    let (mut cm, mut cf) = (0.0, 0.0);
    for l in 0..layers {
        let dm = values[1 + 2 * l] - values[2 * l];
        let df = values[2 + 2 * l] - values[1 + 2 * l];
        report.delta_mha.push(dm);
        report.delta_ffn.push(df);
        report.raw_mha_sum += dm;
        report.raw_ffn_sum += df;
        cm += dm.max(0.0);
        cf += df.max(0.0);
        report.cumulative_mha.push(cm);
        report.cumulative_ffn.push(cf);
    }
    if cm + cf == 0.0 {
        return Err(LabError::UndefinedRatio);
    }
    report.ffn_ratio = cf / (cf + cm);
    report.mha_ratio = 1.0 - report.ffn_ratio;
    Ok(report)
}

impl ContributionReport {
    /// Columns `site,metric,value,delta,kind`, then summary rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["site", "metric", "value", "delta", "kind"])
            .map_err(csv_err)?;
        let m = self.metric.as_str();
        for (i, (s, v)) in self.sites.iter().zip(&self.values).enumerate() {
            let (delta, kind) = match i {
                0 => (String::new(), "embed"),
                i if i % 2 == 1 => (self.delta_mha[i / 2].to_string(), "mha"),
                i => (self.delta_ffn[i / 2 - 1].to_string(), "ffn"),
            };
            w.write_record([s.as_str(), m, &v.to_string(), &delta, kind])
                .map_err(csv_err)?;
        }
        for (name, v) in [
            ("ffn_ratio", self.ffn_ratio),
            ("mha_ratio", self.mha_ratio),
            ("raw_ffn_sum", self.raw_ffn_sum),
            ("raw_mha_sum", self.raw_mha_sum),
        ] {
            w.write_record([name, m, &v.to_string(), "", "summary"])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Cumulative clamped increments per layer for both sublayer kinds.
    pub fn svg(&self) -> String {
        let pts = |c: &[f64]| {
            c.iter()
                .enumerate()
                .map(|(l, &v)| ((l + 1) as f64, v))
                .collect()
        };
        line_chart(
            &format!(
                "cumulative {} increments (FFN share {:.3})",
                self.metric.as_str().to_uppercase(),
                self.ffn_ratio
            ),
            "layer",
            "cumulative increment",
            &[
                Series::new("MHA", pts(&self.cumulative_mha)),
                Series::new("FFN", pts(&self.cumulative_ffn)),
            ],
        )
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.svg().as_bytes())?;
        Ok(())
    }
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// fewer than two points or either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub(crate) fn csv_err(e: csv::Error) -> LabError {
    LabError::Format(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ratio(v: &[f64]) -> Result<ContributionReport> {
        contribution_ratio(Metric::Tp, &site_names((v.len() - 1) / 2), v)
    }

    #[test]
    fn mha_only_and_ffn_only() {
        assert_eq!(ratio(&[0.0, 1.0, 1.0, 2.0, 2.0]).unwrap().ffn_ratio, 0.0);
        assert_eq!(ratio(&[0.0, 0.0, 1.0, 1.0, 2.0]).unwrap().ffn_ratio, 1.0);
    }

    #[test]
    fn negative_increment_is_clamped_but_reported() {
        // Δmha = [0.5, -0.2], Δffn = [0.1, 0.4]
        let r = ratio(&[0.0, 0.5, 0.6, 0.4, 0.8]).unwrap();
        assert!((r.ffn_ratio - 0.5 / 1.0).abs() < 1e-12);
        assert!((r.raw_mha_sum - 0.3).abs() < 1e-12);
        assert!((r.raw_ffn_sum - 0.5).abs() < 1e-12);
        assert_eq!(r.ffn_ratio + r.mha_ratio, 1.0);
    }

    #[test]
    fn spearman_small_cases() {
        assert_eq!(spearman(&[1.0, 0.5, 0.0], &[0.4, 0.3, 0.1]), Some(1.0));
        assert_eq!(spearman(&[1.0, 0.5, 0.0], &[0.1, 0.3, 0.4]), Some(-1.0));
        // ranks (3,2,1) vs (2,3,1): 1 - 6*2/(3*8)
        assert!((spearman(&[1.0, 0.5, 0.0], &[0.3, 0.4, 0.1]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(spearman(&[1.0], &[2.0]), None);
        assert_eq!(spearman(&[1.0, 2.0], &[3.0, 3.0]), None);
    }

    #[test]
    fn flat_metric_is_undefined() {
        assert!(matches!(
            ratio(&[1.0, 1.0, 0.5]),
            Err(LabError::UndefinedRatio)
        ));
    }

    #[test]
    fn wrong_site_order_rejected() {
        let sites: Vec<String> = ["embed", "L1.ffn", "L1.mha"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert!(contribution_ratio(Metric::Mi, &sites, &[0.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn csv_has_site_rows_and_summary() {
        let r = ratio(&[0.0, 0.5, 0.6]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 + 4);
        assert!(text.contains("L1.mha,tp,0.5,0.5,mha"));
        assert!(r.svg().starts_with("<svg"));
    }
}
