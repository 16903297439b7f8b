// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run summary, plot-ready CSVs and a static three-panel SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chain::{TaskKind, VariantKind};
use crate::config::{RunConfig, VariantMode};
use crate::error::{Error, Result};
use crate::horizon::HorizonReport;
use crate::metrics::mean;
use crate::pipeline::{primary_kind, Analysis, AnalysisMeta, Curves, PairResult, ProbeReport, VariantSet};
use crate::stats::{bca_ci, CurvePoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n: usize,
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: TaskKind,
    pub model: String,
    pub variants: VariantMode,
    pub n_eval: usize,
    pub n_probe: usize,
    pub n_variants: usize,
    pub n_rejected: usize,
    pub rejects_by_reason: BTreeMap<String, usize>,
    pub accuracy: f64,
    pub corrupt_accuracy: Option<f64>,
    #[serde(rename = "S")]
    pub s: f64,
    pub n_pairs: usize,
    pub n_conditioned_out: usize,
    pub n_unmatched: usize,
    pub mean_nldd: Option<Interval>,
    /// Paraphrase controls when a run mixes both variant kinds.
    pub control_nldd: Option<Interval>,
    pub scalar_rsa: Option<f64>,
    pub mean_tas: Option<f64>,
    pub k_star: Option<usize>,
    pub alt_k: Option<usize>,
    pub agreement: Option<usize>,
    pub agreement_flagged: bool,
    pub pruning_zone: Vec<usize>,
    pub zone_note: Option<String>,
    pub horizon_reason: Option<String>,
    /// Held-out probe accuracy keyed by layer index.
    pub probe_accuracies: BTreeMap<usize, f64>,
}

fn interval(pairs: &[PairResult], kind: VariantKind, cfg: &RunConfig, key: &str) -> Result<Option<Interval>> {
    let of_kind: Vec<&PairResult> = pairs.iter().filter(|p| p.kind == kind).collect();
    let values: Vec<f64> = of_kind.iter().filter_map(|p| p.nldd).collect();
    if values.is_empty() {
        return Ok(None);
    }
    let (ci_lo, ci_hi) = if values.len() >= 3 {
        let (lo, hi) = bca_ci(&values, &cfg.bootstrap_config(), key, 0)?;
        (Some(lo), Some(hi))
    } else {
        (None, None)
    };
    Ok(Some(Interval {
        mean: mean(&values),
        ci_lo,
        ci_hi,
        n: values.len(),
        n_excluded: of_kind.len() - values.len(),
    }))
}

/// Mean of every defined window value, one window series per position.
pub fn scalar_rsa(pairs: &[PairResult], kind: VariantKind) -> Option<f64> {
    let mut seen = std::collections::BTreeSet::new();
    let mut vals = Vec::new();
    for p in pairs.iter().filter(|p| p.kind == kind) {
        if seen.insert(p.k) {
            vals.extend(p.rsa_t.iter().flatten().copied());
        }
    }
    (!vals.is_empty()).then(|| mean(&vals))
}

pub fn summarize(
    cfg: &RunConfig,
    variants: &VariantSet,
    analysis: &Analysis,
    horizon: &HorizonReport,
    probe: Option<&ProbeReport>,
) -> Result<Summary> {
    summarize_parts(cfg, variants, &analysis.meta, &analysis.pairs, horizon, probe)
}

/// Same as [`summarize`] from the pieces a run directory stores.
pub fn summarize_parts(
    cfg: &RunConfig,
    variants: &VariantSet,
    meta: &AnalysisMeta,
    pairs: &[PairResult],
    horizon: &HorizonReport,
    probe: Option<&ProbeReport>,
) -> Result<Summary> {
    let kind = primary_kind(cfg.variants);
    let mut rejects_by_reason = BTreeMap::new();
    for r in &variants.rejects {
        let reason = r.reason.split(':').next().unwrap_or(&r.reason).to_string();
        *rejects_by_reason.entry(reason).or_insert(0) += 1;
    }
    Ok(Summary {
        task: cfg.task,
        model: meta.model.clone(),
        variants: cfg.variants,
        n_eval: meta.n_clean,
        n_probe: probe.map_or(0, |p| p.n_chains),
        n_variants: variants.variants.len(),
        n_rejected: variants.rejects.len(),
        rejects_by_reason,
        accuracy: meta.accuracy,
        corrupt_accuracy: meta.corrupt_accuracy,
        s: meta.calibration.s,
        n_pairs: pairs.iter().filter(|p| p.kind == kind).count(),
        n_conditioned_out: meta.n_conditioned_out,
        n_unmatched: meta.n_unmatched,
        mean_nldd: interval(pairs, kind, cfg, "nldd_overall")?,
        control_nldd: if cfg.variants == VariantMode::Both {
            interval(pairs, VariantKind::Paraphrase, cfg, "nldd_control")?
        } else {
            None
        },
        scalar_rsa: scalar_rsa(pairs, kind),
        mean_tas: meta.mean_tas_clean,
        k_star: horizon.k_star,
        alt_k: horizon.alt_k,
        agreement: horizon.agreement,
        agreement_flagged: horizon.flagged,
        pruning_zone: horizon.pruning_zone.clone(),
        zone_note: horizon.zone_note.clone(),
        horizon_reason: horizon.reason.clone(),
        probe_accuracies: probe
            .map(|p| p.layers.iter().map(|l| (l.layer, l.accuracy)).collect())
            .unwrap_or_default(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `k,mean,se,ci_lo,ci_hi,n,n_excluded` rows.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("k,mean,se,ci_lo,ci_hi,n,n_excluded\n");
    for p in points {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            p.k,
            p.mean,
            cell(p.se),
            cell(p.ci_lo),
            cell(p.ci_hi),
            p.n,
            p.n_excluded
        )
        .unwrap();
    }
    s
}

/// Per-pair `LD_clean - LD_corrupt`.
pub fn prob_delta_csv(pairs: &[PairResult], kind: VariantKind) -> String {
    let mut s = String::from("record_id,k,ld_clean,ld_corrupt,delta\n");
    for p in pairs.iter().filter(|p| p.kind == kind) {
        writeln!(
            s,
            "{},{},{},{},{}",
            p.record_id,
            p.k,
            p.ld_clean,
            p.ld_corrupt,
            p.ld_clean - p.ld_corrupt
        )
        .unwrap();
    }
    s
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write the CSVs and the SVG figure for one run into `dir`.
pub fn write_plot_data(
    dir: &Path,
    task: TaskKind,
    curves: &Curves,
    pairs: &[PairResult],
    kind: VariantKind,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let t = task.as_str();
    write_file(&dir.join(format!("nldd_{t}.csv")), &curve_csv(&curves.nldd))?;
    write_file(&dir.join(format!("rsa_{t}.csv")), &curve_csv(&curves.rsa))?;
    write_file(&dir.join(format!("tas_{t}.csv")), &curve_csv(&curves.tas))?;
    write_file(&dir.join(format!("prob_delta_{t}.csv")), &prob_delta_csv(pairs, kind))?;
    write_file(&dir.join(format!("curves_{t}.svg")), &curves_svg(task, curves))?;
    Ok(())
}

const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 240.0;
const PAD: f64 = 36.0;

fn panel(out: &mut String, x0: f64, title: &str, points: &[CurvePoint], color: &str) {
    let inner_w = PANEL_W - 2.0 * PAD;
    let inner_h = PANEL_H - 2.0 * PAD;
    writeln!(out, r#"<g transform="translate({x0},0)">"#).unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
        PANEL_W / 2.0
    )
    .unwrap();
    writeln!(
        out,
        r##"<rect x="{PAD}" y="{PAD}" width="{inner_w}" height="{inner_h}" fill="none" stroke="#888"/>"##
    )
    .unwrap();
    if points.is_empty() {
        writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">no data</text>"#,
            PANEL_W / 2.0,
            PANEL_H / 2.0
        )
        .unwrap();
        out.push_str("</g>\n");
        return;
    }
    let kmin = points.first().unwrap().k as f64;
    let kmax = points.last().unwrap().k as f64;
    let lo = points
        .iter()
        .map(|p| p.ci_lo.unwrap_or(p.mean))
        .fold(f64::INFINITY, f64::min);
    let hi = points
        .iter()
        .map(|p| p.ci_hi.unwrap_or(p.mean))
        .fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    };
    let sx = |k: f64| {
        PAD + if kmax > kmin {
            (k - kmin) / (kmax - kmin) * inner_w
        } else {
            inner_w / 2.0
        }
    };
    let sy = |v: f64| PAD + (hi - v) / (hi - lo) * inner_h;
    let band: Vec<String> = points
        .iter()
        .map(|p| format!("{:.2},{:.2}", sx(p.k as f64), sy(p.ci_hi.unwrap_or(p.mean))))
        .chain(
            points
                .iter()
                .rev()
                .map(|p| format!("{:.2},{:.2}", sx(p.k as f64), sy(p.ci_lo.unwrap_or(p.mean)))),
        )
        .collect();
    writeln!(
        out,
        r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
        band.join(" ")
    )
    .unwrap();
    let line: Vec<String> = points
        .iter()
        .map(|p| format!("{:.2},{:.2}", sx(p.k as f64), sy(p.mean)))
        .collect();
    writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
        line.join(" ")
    )
    .unwrap();
    for p in points {
        writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            sx(p.k as f64),
            PANEL_H - PAD + 14.0,
            p.k
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="4" y="{:.2}" font-size="10">{:.3}</text>"#,
        sy(hi) + 4.0,
        hi
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="4" y="{:.2}" font-size="10">{:.3}</text>"#,
        sy(lo) + 4.0,
        lo
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">k</text>"#,
        PANEL_W / 2.0,
        PANEL_H - 4.0
    )
    .unwrap();
    out.push_str("</g>\n");
}

/// NLDD, RSA and TAS against corruption position, side by side.
pub fn curves_svg(task: TaskKind, curves: &Curves) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif">"#,
        3.0 * PANEL_W,
        PANEL_H
    )
    .unwrap();
    writeln!(s, "<title>{}</title>", task.as_str()).unwrap();
    panel(&mut s, 0.0, "NLDD", &curves.nldd, "#c0392b");
    panel(&mut s, PANEL_W, "RSA", &curves.rsa, "#2471a3");
    panel(&mut s, 2.0 * PANEL_W, "TAS", &curves.tas, "#229954");
    s.push_str("</svg>\n");
    s
}

/// Rebuild the summary from a run directory's intermediate files.
pub fn rebuild_summary(cfg: &RunConfig, dir: &Path) -> Result<Summary> {
    use crate::jsonl;
    use crate::pipeline::files;
    let variants = VariantSet {
        variants: jsonl::read(&dir.join(files::VARIANTS))?,
        rejects: jsonl::read(&dir.join(files::REJECTS))?,
    };
    let meta: AnalysisMeta = jsonl::read_json(&dir.join(files::ANALYSIS))?;
    let pairs: Vec<PairResult> = jsonl::read(&dir.join(files::RESULTS))?;
    let horizon: HorizonReport = jsonl::read_json(&dir.join(files::HORIZON))?;
    let probe_path = dir.join(files::PROBE);
    let probe: Option<ProbeReport> = if cfg.probe && probe_path.exists() {
        Some(jsonl::read_json(&probe_path)?)
    } else {
        None
    };
    summarize_parts(cfg, &variants, &meta, &pairs, &horizon, probe.as_ref())
}
