use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-target percentages are shown in tables only below this value.
pub const ON_TARGET_DISPLAY_THRESHOLD: f64 = 90.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteScore {
    pub src: String,
    pub tgt: String,
    pub bleu: f64,
    pub chrf: f64,
    pub on_target_pct: Option<f64>,
    pub n_scored: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "all")]
    All,
    #[serde(rename = "in-in")]
    InIn,
    #[serde(rename = "out-in")]
    OutIn,
    #[serde(rename = "in-out")]
    InOut,
    #[serde(rename = "out-out")]
    OutOut,
}

impl Group {
    pub const ORDER: [Group; 5] = [Group::All, Group::InIn, Group::OutIn, Group::InOut, Group::OutOut];

    pub fn classify(src_in: bool, tgt_in: bool) -> Group {
        match (src_in, tgt_in) {
            (true, true) => Group::InIn,
            (false, true) => Group::OutIn,
            (true, false) => Group::InOut,
            (false, false) => Group::OutOut,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Group::All => "all",
            Group::InIn => "in→in",
            Group::OutIn => "out→in",
            Group::InOut => "in→out",
            Group::OutOut => "out→out",
        }
    }
}

/// Unweighted means over the routes of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub routes: usize,
    pub bleu: f64,
    pub chrf: f64,
    /// Mean over routes whose on-target rate is defined.
    pub on_target_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub domain: String,
    pub languages: Vec<String>,
    pub in_domain: Vec<String>,
    pub routes: Vec<RouteScore>,
    pub groups: BTreeMap<Group, GroupSummary>,
    /// Model whose scores heatmap deltas were taken against.
    #[serde(default)]
    pub baseline: Option<String>,
}

impl EvalReport {
    pub fn group(&self, g: Group) -> Option<&GroupSummary> {
        self.groups.get(&g)
    }

    pub fn route(&self, src: &str, tgt: &str) -> Option<&RouteScore> {
        self.routes.iter().find(|r| r.src == src && r.tgt == tgt)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Groups route scores by whether source and target are in-domain
/// languages and averages each group.
pub fn aggregate(
    model: &str,
    domain: &str,
    languages: &[String],
    in_domain: &BTreeSet<String>,
    routes: Vec<RouteScore>,
) -> Result<EvalReport> {
    let known: BTreeSet<&str> = languages.iter().map(String::as_str).collect();
    if let Some(l) = in_domain.iter().find(|l| !known.contains(l.as_str())) {
        return Err(Error::Evaluation(format!("in-domain language `{l}` is not in the grid")));
    }
    let mut members: BTreeMap<Group, Vec<&RouteScore>> = BTreeMap::new();
    for r in &routes {
        if r.src == r.tgt || !known.contains(r.src.as_str()) || !known.contains(r.tgt.as_str()) {
            return Err(Error::Evaluation(format!("cannot classify route {}-{}", r.src, r.tgt)));
        }
        let g = Group::classify(in_domain.contains(&r.src), in_domain.contains(&r.tgt));
        members.entry(g).or_default().push(r);
        members.entry(Group::All).or_default().push(r);
    }
    let groups = members
        .into_iter()
        .map(|(g, rs)| {
            let s = GroupSummary {
                routes: rs.len(),
                bleu: mean(rs.iter().map(|r| r.bleu)).unwrap_or(0.0),
                chrf: mean(rs.iter().map(|r| r.chrf)).unwrap_or(0.0),
                on_target_pct: mean(rs.iter().filter_map(|r| r.on_target_pct)),
            };
            (g, s)
        })
        .collect();
    Ok(EvalReport {
        model: model.to_string(),
        domain: domain.to_string(),
        languages: languages.to_vec(),
        in_domain: in_domain.iter().cloned().collect(),
        routes,
        groups,
        baseline: None,
    })
}

/// Route-wise mean of reports of one model over several runs (e.g.
/// seeds), regrouped. The reports must cover the same routes.
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    compare_reports(reports)?;
    let first = &reports[0];
    for r in &reports[1..] {
        if r.model != first.model || r.domain != first.domain || r.routes.len() != first.routes.len() {
            return Err(Error::Evaluation(format!(
                "cannot average `{}`/{} with `{}`/{}",
                r.model, r.domain, first.model, first.domain
            )));
        }
    }
    let n = reports.len() as f64;
    let mut routes = Vec::with_capacity(first.routes.len());
    for (i, r0) in first.routes.iter().enumerate() {
        let rows: Vec<&RouteScore> = reports.iter().map(|r| &r.routes[i]).collect();
        if rows.iter().any(|r| r.src != r0.src || r.tgt != r0.tgt) {
            return Err(Error::Evaluation("reports list routes in different orders".into()));
        }
        let on_target: Vec<f64> = rows.iter().filter_map(|r| r.on_target_pct).collect();
        routes.push(RouteScore {
            src: r0.src.clone(),
            tgt: r0.tgt.clone(),
            bleu: rows.iter().map(|r| r.bleu).sum::<f64>() / n,
            chrf: rows.iter().map(|r| r.chrf).sum::<f64>() / n,
            on_target_pct: (!on_target.is_empty()).then(|| on_target.iter().sum::<f64>() / on_target.len() as f64),
            n_scored: rows.iter().map(|r| r.n_scored).sum(),
        });
    }
    let in_domain: BTreeSet<String> = first.in_domain.iter().cloned().collect();
    let mut out = aggregate(&first.model, &first.domain, &first.languages, &in_domain, routes)?;
    out.baseline = first.baseline.clone();
    Ok(out)
}

fn cell(s: Option<&GroupSummary>, delta_base: Option<&GroupSummary>) -> String {
    let Some(s) = s else {
        return "-".into();
    };
    let mut out = format!("{:.1}", s.bleu);
    if let Some(p) = s.on_target_pct.filter(|&p| p < ON_TARGET_DISPLAY_THRESHOLD) {
        write!(out, " ({p:.0}%)").unwrap();
    }
    if let Some(b) = delta_base {
        write!(out, " [{:+.1}]", s.bleu - b.bleu).unwrap();
    }
    out
}

/// Text table: one row per report, BLEU group means, on-target percentage
/// in parentheses when below the display threshold, and the BLEU delta
/// against `baseline` in brackets when given.
pub fn render_table(reports: &[EvalReport], baseline: Option<&str>) -> Result<String> {
    compare_reports(reports)?;
    let base = match baseline {
        Some(b) => Some(
            reports
                .iter()
                .find(|r| r.model == b)
                .ok_or_else(|| Error::Evaluation(format!("baseline `{b}` is not among the reports")))?,
        ),
        None => None,
    };
    let mut rows = vec![std::iter::once("model".to_string())
        .chain(Group::ORDER.iter().map(|g| g.label().to_string()))
        .collect::<Vec<_>>()];
    for r in reports {
        let mut row = vec![r.model.clone()];
        for g in Group::ORDER {
            let b = base.filter(|b| b.model != r.model).and_then(|b| b.group(g));
            row.push(cell(r.group(g), b));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        if i == 0 {
            writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))).unwrap();
        }
    }
    if let Some(b) = base {
        writeln!(out, "deltas vs {}", b.model).unwrap();
    }
    Ok(out)
}

/// Checks that reports share one language grid and in-domain set.
pub fn compare_reports(reports: &[EvalReport]) -> Result<()> {
    let Some(first) = reports.first() else {
        return Err(Error::Evaluation("no reports to compare".into()));
    };
    for r in &reports[1..] {
        if r.languages != first.languages || r.in_domain != first.in_domain {
            return Err(Error::Evaluation(format!(
                "report `{}` uses a different language grid than `{}`",
                r.model, first.model
            )));
        }
    }
    Ok(())
}

/// Heatmap rows `src_lang,tgt_lang,metric,value,delta_vs_baseline`, with
/// languages ordered in-domain first.
pub fn heatmap_csv(report: &EvalReport, baseline: Option<&EvalReport>) -> String {
    let in_set: BTreeSet<&str> = report.in_domain.iter().map(String::as_str).collect();
    let mut order: Vec<&String> = report.languages.iter().filter(|l| in_set.contains(l.as_str())).collect();
    order.extend(report.languages.iter().filter(|l| !in_set.contains(l.as_str())));
    let mut out = String::from("src_lang,tgt_lang,metric,value,delta_vs_baseline\n");
    for s in &order {
        for t in &order {
            let Some(r) = report.route(s, t) else {
                continue;
            };
            let b = baseline.and_then(|b| b.route(s, t));
            let metrics: [(&str, Option<f64>, Option<f64>); 3] = [
                ("bleu", Some(r.bleu), b.map(|b| b.bleu)),
                ("chrf", Some(r.chrf), b.map(|b| b.chrf)),
                ("on_target_pct", r.on_target_pct, b.and_then(|b| b.on_target_pct)),
            ];
            for (name, v, bv) in metrics {
                let Some(v) = v else { continue };
                let delta = bv.map(|bv| format!("{:.4}", v - bv)).unwrap_or_default();
                writeln!(out, "{s},{t},{name},{v:.4},{delta}").unwrap();
            }
        }
    }
    out
}
