//! Normalized trade-off scores and Pareto filtering.
//!
//! Each score places a system between the edge model (0) and the full cloud
//! model (1): `s_comm` measures transmitted bytes, `s_comp` FLOPS and `s_p`
//! how much of the edge-to-cloud accuracy gap is recovered.

use std::cmp::Ordering;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Route, RouteRecord};
use crate::train::{accuracy, recall};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommScore {
    pub tau: f64,
    pub psi: f64,
    pub s_comm: f64,
}

/// Offload ratio `τ`, mean size ratio `ψ` over offloaded samples, and the
/// byte-weighted score `Σ bytes / (N · input_bytes)`.
pub fn comm_score(records: &[RouteRecord], input_bytes: u64) -> Result<CommScore> {
    if records.is_empty() {
        return Err(Error::usage("no route records"));
    }
    if input_bytes == 0 {
        return Err(Error::usage("input size must be positive"));
    }
    let n = records.len() as f64;
    let offloaded: Vec<&RouteRecord> = records.iter().filter(|r| r.route != Route::EdgeOnly).collect();
    let total: u64 = records.iter().map(|r| r.bytes_sent).sum();
    let tau = offloaded.len() as f64 / n;
    let psi = if offloaded.is_empty() {
        0.0
    } else {
        offloaded.iter().map(|r| r.bytes_sent as f64 / input_bytes as f64).sum::<f64>() / offloaded.len() as f64
    };
    Ok(CommScore {
        tau,
        psi,
        s_comm: total as f64 / (n * input_bytes as f64),
    })
}

/// `(F_ecc − F_edge) / (F_cloud − F_edge)`.
pub fn comp_score_from_flops(flops_edge: f64, flops_cloud: f64, flops_ecc: f64) -> Result<f64> {
    if flops_cloud.is_nan() || flops_edge.is_nan() || flops_cloud <= flops_edge {
        return Err(Error::config(
            "flops",
            format!("cloud FLOPS {flops_cloud} must exceed edge FLOPS {flops_edge}"),
        ));
    }
    Ok((flops_ecc - flops_edge) / (flops_cloud - flops_edge))
}

/// Mean per-sample FLOPS of a routed system and its normalized score.
/// Every record pays its own edge and cloud-side FLOPS, so mixed branches are
/// weighted by how often they are taken; `flops_edge` and `flops_cloud` are
/// only the anchors.
pub fn comp_score(flops_edge: f64, flops_cloud: f64, records: &[RouteRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::usage("no route records"));
    }
    let total: f64 = records.iter().map(|r| (r.flops_edge + r.flops_cloud_side) as f64).sum();
    let ecc = total / records.len() as f64;
    Ok((ecc, comp_score_from_flops(flops_edge, flops_cloud, ecc)?))
}

/// `(π_ecc − π_edge) / (π_cloud − π_edge)`, or `None` when the gap is zero.
pub fn perf_score(pi_ecc: f64, pi_edge: f64, pi_cloud: f64) -> Option<f64> {
    let gap = pi_cloud - pi_edge;
    (gap != 0.0 && gap.is_finite()).then(|| (pi_ecc - pi_edge) / gap)
}

/// Inputs shared by every report of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchors {
    pub flops_edge: f64,
    pub flops_cloud: f64,
    pub pi_edge: f64,
    pub pi_cloud: f64,
    pub input_bytes: u64,
    pub normal_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub label: String,
    pub tau: f64,
    pub psi: f64,
    pub s_comm: f64,
    pub flops_ecc: f64,
    pub flops_edge: f64,
    pub flops_cloud: f64,
    pub s_comp: f64,
    pub pi_ecc: f64,
    pub pi_edge: f64,
    pub pi_cloud: f64,
    pub s_p: Option<f64>,
    pub accuracy: f64,
    pub recall: f64,
}

impl CostReport {
    /// Scores a routed system; `π` is accuracy.
    pub fn from_records(label: impl Into<String>, records: &[RouteRecord], labels: &[usize], a: &Anchors) -> Result<Self> {
        if records.len() != labels.len() {
            return Err(Error::usage("one label per route record required"));
        }
        let comm = comm_score(records, a.input_bytes)?;
        let (flops_ecc, s_comp) = comp_score(a.flops_edge, a.flops_cloud, records)?;
        let preds: Vec<usize> = records.iter().map(|r| r.prediction).collect();
        let acc = accuracy(&preds, labels);
        Ok(CostReport {
            label: label.into(),
            tau: comm.tau,
            psi: comm.psi,
            s_comm: comm.s_comm,
            flops_ecc,
            flops_edge: a.flops_edge,
            flops_cloud: a.flops_cloud,
            s_comp,
            pi_ecc: acc,
            pi_edge: a.pi_edge,
            pi_cloud: a.pi_cloud,
            s_p: perf_score(acc, a.pi_edge, a.pi_cloud),
            accuracy: acc,
            recall: recall(&preds, labels, a.normal_class),
        })
    }

    pub fn row(&self) -> ReportRow {
        ReportRow {
            label: self.label.clone(),
            s_p: self.s_p,
            s_comp: self.s_comp,
            s_comm: self.s_comm,
            tau: self.tau,
            psi: self.psi,
            flops_ecc: self.flops_ecc,
            accuracy: self.accuracy,
            recall: self.recall,
        }
    }
}

/// One line of `reports.csv` and the frontier files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub s_p: Option<f64>,
    pub s_comp: f64,
    pub s_comm: f64,
    pub tau: f64,
    pub psi: f64,
    pub flops_ecc: f64,
    pub accuracy: f64,
    pub recall: f64,
}

pub const REPORT_HEADER: [&str; 9] = ["label", "s_p", "s_comp", "s_comm", "tau", "psi", "flops_ecc", "accuracy", "recall"];

pub fn write_rows<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != REPORT_HEADER {
        return Err(Error::config("header", format!("expected {}", REPORT_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sense {
    Maximize,
    Minimize,
}

impl Sense {
    /// `Less` when `a` is the better value.
    fn order(self, a: f64, b: f64) -> Ordering {
        match self {
            Sense::Maximize => cmp_finite(b, a),
            Sense::Minimize => cmp_finite(a, b),
        }
    }
}

/// Points are validated finite, so this is total; `-0.0 == 0.0`.
fn cmp_finite(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).expect("finite objective")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    pub values: Vec<f64>,
    pub senses: Vec<Sense>,
}

impl ParetoPoint {
    pub fn new(label: impl Into<String>, values: Vec<f64>, senses: Vec<Sense>) -> Result<Self> {
        let p = ParetoPoint {
            label: label.into(),
            values,
            senses,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.values.len() != self.senses.len() {
            return Err(Error::usage(format!("point `{}` needs one sense per objective", self.label)));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::usage(format!("point `{}` has a non-finite objective", self.label)));
        }
        Ok(())
    }

    /// Performance (maximized) against one cost (minimized).
    pub fn perf_cost(label: impl Into<String>, perf: f64, cost: f64) -> Result<Self> {
        ParetoPoint::new(label, vec![perf, cost], vec![Sense::Maximize, Sense::Minimize])
    }
}

/// `a` is no worse than `b` everywhere and strictly better somewhere.
pub fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> Result<bool> {
    if a.senses != b.senses {
        return Err(Error::usage(format!(
            "points `{}` and `{}` have different objectives",
            a.label, b.label
        )));
    }
    a.validate()?;
    b.validate()?;
    Ok(dominates_unchecked(a, b))
}

fn dominates_unchecked(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    let mut strict = false;
    for ((&x, &y), &s) in a.values.iter().zip(&b.values).zip(&a.senses) {
        match s.order(x, y) {
            Ordering::Greater => return false,
            Ordering::Less => strict = true,
            Ordering::Equal => {}
        }
    }
    strict
}

/// Non-dominated subset. Points with identical objective vectors collapse to
/// the one with the smallest label. The result is sorted by the first
/// objective ascending, then the remaining objectives, then label.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Result<Vec<ParetoPoint>> {
    let Some(first) = points.first() else {
        return Err(Error::usage("pareto frontier of an empty set"));
    };
    for p in points {
        if p.senses != first.senses {
            return Err(Error::usage(format!("point `{}` has different objectives", p.label)));
        }
        p.validate()?;
    }
    // best-first lexicographic order: a dominator always precedes what it
    // dominates, so each candidate only needs checking against kept points
    let mut order: Vec<&ParetoPoint> = points.iter().collect();
    order.sort_by(|a, b| {
        a.values
            .iter()
            .zip(&b.values)
            .zip(&a.senses)
            .map(|((&x, &y), &s)| s.order(x, y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut kept: Vec<&ParetoPoint> = Vec::new();
    for p in order {
        let duplicate = kept.last().is_some_and(|k| k.values == p.values);
        if !duplicate && !kept.iter().any(|k| dominates_unchecked(k, p)) {
            kept.push(p);
        }
    }
    let mut out: Vec<ParetoPoint> = kept.into_iter().cloned().collect();
    out.sort_by(|a, b| {
        a.values
            .iter()
            .zip(&b.values)
            .map(|(&x, &y)| cmp_finite(x, y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.label.cmp(&b.label))
    });
    Ok(out)
}

/// Frontier of report rows for `s_p` against a cost column. Rows without a
/// defined `s_p` are left out.
pub fn frontier_rows(rows: &[ReportRow], cost: impl Fn(&ReportRow) -> f64) -> Result<Vec<ReportRow>> {
    let points: Vec<ParetoPoint> = rows
        .iter()
        .filter_map(|r| r.s_p.map(|sp| ParetoPoint::perf_cost(r.label.clone(), sp, cost(r))))
        .collect::<Result<_>>()?;
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let front = pareto_frontier(&points)?;
    Ok(front
        .iter()
        .map(|p| rows.iter().find(|r| r.label == p.label).expect("label from rows").clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rec(route: Route, bytes: u64, side: u64) -> RouteRecord {
        RouteRecord {
            route,
            confidence: 0.5,
            bytes_sent: bytes,
            flops_edge: 10,
            flops_cloud_side: side,
            prediction: 0,
        }
    }

    #[test]
    fn comm_anchors() {
        let edge = vec![rec(Route::EdgeOnly, 0, 0); 5];
        assert_eq!(comm_score(&edge, 64).unwrap(), CommScore { tau: 0.0, psi: 0.0, s_comm: 0.0 });
        let cloud = vec![rec(Route::FullCloud, 64, 100); 5];
        assert_eq!(comm_score(&cloud, 64).unwrap(), CommScore { tau: 1.0, psi: 1.0, s_comm: 1.0 });
        assert!(comm_score(&[], 64).is_err());
    }

    #[test]
    fn comm_feature_ratio() {
        // 3x32x32 input, 16x16x16 feature, 60% offloaded
        let mut r = vec![rec(Route::Adaptive, 4096 * 4, 1); 60];
        r.extend(vec![rec(Route::EdgeOnly, 0, 0); 40]);
        let s = comm_score(&r, 3072 * 4).unwrap();
        assert_abs_diff_eq!(s.psi, 4096.0 / 3072.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.s_comm, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(s.s_comm, s.tau * s.psi, epsilon = 1e-12);
    }

    #[test]
    fn comp_examples() {
        assert_abs_diff_eq!(comp_score_from_flops(3.47, 38.50, 26.88).unwrap(), 0.6682, epsilon = 5e-4);
        let edge = vec![rec(Route::EdgeOnly, 0, 0); 4];
        assert_eq!(comp_score(10.0, 100.0, &edge).unwrap(), (10.0, 0.0));
        let cloud = vec![rec(Route::FullCloud, 1, 100); 4];
        let (f, s) = comp_score(10.0, 100.0, &cloud).unwrap();
        assert_eq!(f, 110.0);
        assert!(s > 1.0);
        assert!(matches!(comp_score_from_flops(5.0, 5.0, 5.0), Err(Error::Config { .. })));
    }

    #[test]
    fn perf_examples() {
        assert_abs_diff_eq!(perf_score(91.01, 77.32, 91.83).unwrap(), 0.9435, epsilon = 5e-4);
        assert_eq!(perf_score(0.7, 0.7, 0.9), Some(0.0));
        assert_abs_diff_eq!(perf_score(0.9, 0.7, 0.9).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(perf_score(0.8, 0.7, 0.7), None);
    }

    fn pt(label: &str, perf: f64, cost: f64) -> ParetoPoint {
        ParetoPoint::perf_cost(label, perf, cost).unwrap()
    }

    #[test]
    fn dominance_examples() {
        let (a, b, c) = (pt("A", 0.9, 0.7), pt("B", 0.8, 0.8), pt("C", 0.95, 0.9));
        assert!(dominates(&a, &b).unwrap());
        assert!(!dominates(&a, &a).unwrap());
        assert!(!dominates(&a, &c).unwrap() && !dominates(&c, &a).unwrap());
        let three = ParetoPoint::new("D", vec![1.0, 1.0, 1.0], vec![Sense::Maximize; 3]).unwrap();
        assert!(dominates(&a, &three).is_err());
    }

    #[test]
    fn frontier_examples() {
        let (a, b, c) = (pt("A", 0.9, 0.7), pt("B", 0.8, 0.8), pt("C", 0.95, 0.9));
        let f = pareto_frontier(&[a.clone(), b, c.clone()]).unwrap();
        assert_eq!(f, vec![a.clone(), c]);
        assert_eq!(pareto_frontier(std::slice::from_ref(&a)).unwrap(), vec![a.clone()]);
        let dup = pareto_frontier(&[pt("Z", 0.9, 0.7), a.clone()]).unwrap();
        assert_eq!(dup, vec![a]);
        assert!(pareto_frontier(&[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            ReportRow {
                label: "edge".into(),
                s_p: Some(0.0),
                s_comp: 0.0,
                s_comm: 0.0,
                tau: 0.0,
                psi: 0.0,
                flops_ecc: 383.0,
                accuracy: 0.7,
                recall: 0.8,
            },
            ReportRow {
                label: "odd, label".into(),
                s_p: None,
                s_comp: 0.25,
                s_comm: 0.1,
                tau: 0.2,
                psi: 0.5,
                flops_ecc: 1000.5,
                accuracy: 0.75,
                recall: 0.9,
            },
        ];
        let mut buf = Vec::new();
        write_rows(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("label,s_p,s_comp,s_comm,tau,psi,flops_ecc,accuracy,recall\n"));
        assert!(text.contains("\"odd, label\",,"));
        assert_eq!(read_rows(&buf[..]).unwrap(), rows);
        assert!(read_rows("a,b\n1,2\n".as_bytes()).is_err());
    }
}
