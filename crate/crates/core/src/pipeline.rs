// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end stages: generate, split, corrupt, trace, analyze, aggregate,
//! horizon, probe. Each stage is a function over in-memory data so the CLI
//! verbs and [`run_pipeline`] share one implementation.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{ReasoningChain, TaskKind, TokenClass, VariantKind};
use crate::config::{Backend, RsaMode, RunConfig, VariantMode};
use crate::counterfactual::{build_paraphrases, build_variants, whitespace_tokens, RejectLog};
use crate::error::{Error, Result};
use crate::horizon::{analyze_horizon, curve_from_points, HorizonReport};
use crate::jsonl;
use crate::metrics::{
    batch_tas, calibrate_s, logit_margin, mean, nldd, shared_prefix, step_terminal_rsa, tas, trajectory, windowed_rsa,
    Calibration,
};
use crate::mock::MockBackend;
use crate::probe::{build_all_layers, probe_layers, ProbeResult};
use crate::report::{self, Summary};
use crate::rng::keyed_rng;
use crate::stats::{aggregate_curve, BootstrapConfig, CurvePoint};
use crate::taskgen::{generate, load_gsm8k, split_disjoint, SplitManifest};
use crate::trace::{build_requests, join_traces, validate_record, TraceRecord, TraceRequest};
use crate::CounterfactualVariant;

/// Scores whole prompts for the perplexity-ratio filter.
pub trait PerplexitySource: Sync {
    fn perplexity(&self, prompt: &str) -> Result<f64>;
}

impl PerplexitySource for MockBackend {
    fn perplexity(&self, prompt: &str) -> Result<f64> {
        MockBackend::perplexity(self, prompt)
    }
}

/// Perplexities looked up by exact prompt text.
#[derive(Debug, Clone, Default)]
pub struct PplTable(pub HashMap<String, f64>);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PplEntry {
    pub prompt: String,
    pub perplexity: f64,
}

impl PplTable {
    pub fn load(path: &Path) -> Result<Self> {
        let rows: Vec<PplEntry> = jsonl::read(path)?;
        Ok(Self(rows.into_iter().map(|r| (r.prompt, r.perplexity)).collect()))
    }
}

impl PerplexitySource for PplTable {
    fn perplexity(&self, prompt: &str) -> Result<f64> {
        self.0.get(prompt).copied().ok_or_else(|| Error::Stage {
            stage: "corrupt",
            record: None,
            message: format!(
                "no perplexity for prompt starting `{}`",
                prompt.lines().next().unwrap_or("")
            ),
        })
    }
}

/// Perplexity filter switched off: every prompt scores 1.
pub struct NoPerplexity;

impl PerplexitySource for NoPerplexity {
    fn perplexity(&self, _: &str) -> Result<f64> {
        Ok(1.0)
    }
}

pub fn load_chains(cfg: &RunConfig) -> Result<Vec<ReasoningChain>> {
    match cfg.task {
        TaskKind::Gsm8k => {
            let path = cfg
                .gsm8k_path
                .as_ref()
                .ok_or_else(|| Error::Config("task = gsm8k needs `gsm8k_path`".into()))?;
            Ok(load_gsm8k(path, &cfg.gen_config())?.0)
        }
        _ => generate(&cfg.gen_config()),
    }
}

#[derive(Debug, Clone, Default)]
pub struct VariantSet {
    pub variants: Vec<CounterfactualVariant>,
    pub rejects: Vec<RejectLog>,
}

/// Build the variants for every evaluation chain. Each chain draws from its
/// own keyed stream, so results do not depend on scheduling.
pub fn make_variants(cfg: &RunConfig, eval: &[ReasoningChain], ppl: &dyn PerplexitySource) -> Result<VariantSet> {
    let filter = cfg.filter_config();
    filter.validate()?;
    let per_chain = eval
        .par_iter()
        .map(|chain| -> Result<VariantSet> {
            let mut out = VariantSet::default();
            if cfg.variants != VariantMode::Paraphrase {
                let mut rng = keyed_rng(cfg.seed, &["corrupt".into(), chain.id.as_str().into()]);
                let (acc, rej) = build_variants(chain, &filter, whitespace_tokens, |p| ppl.perplexity(p), &mut rng)
                    .map_err(|e| e.in_stage("corrupt", Some(chain.id.clone())))?;
                out.variants.extend(acc);
                out.rejects.extend(rej);
            }
            if cfg.variants != VariantMode::Corruption {
                let mut rng = keyed_rng(cfg.seed, &["paraphrase".into(), chain.id.as_str().into()]);
                let mut para = build_paraphrases(chain, &filter, filter.max_variants_per_sample, &mut rng)
                    .map_err(|e| e.in_stage("corrupt", Some(chain.id.clone())))?;
                para.iter_mut().for_each(|v| v.accepted = true);
                out.variants.extend(para);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all = VariantSet::default();
    for set in per_chain {
        all.variants.extend(set.variants);
        all.rejects.extend(set.rejects);
    }
    Ok(all)
}

/// Run every request through the mock backend, in request order.
pub fn trace_mock(backend: &MockBackend, requests: &[TraceRequest]) -> Result<Vec<TraceRecord>> {
    requests
        .par_iter()
        .map(|r| {
            backend
                .trace(r)
                .map_err(|e| e.in_stage("trace", Some(r.record_id.clone())))
        })
        .collect()
}

/// Reject any record with protocol violations.
pub fn check_records(records: &[TraceRecord]) -> Result<()> {
    for r in records {
        let violations = validate_record(r);
        if !violations.is_empty() {
            return Err(Error::InvalidRecord {
                id: r.record_id.clone(),
                violations,
            });
        }
    }
    Ok(())
}

/// Per-pair metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub record_id: String,
    pub parent_id: String,
    pub k: usize,
    pub kind: VariantKind,
    pub nldd: Option<f64>,
    pub excluded: bool,
    pub ld_clean: f64,
    pub ld_corrupt: f64,
    /// Per-window RSA of this pair's position group.
    pub rsa_t: Vec<Option<f64>>,
    pub tas: Option<f64>,
}

/// Run-level facts from analysis that are not per-pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisMeta {
    pub task: TaskKind,
    pub model: String,
    pub calibration: Calibration,
    pub n_clean: usize,
    pub n_clean_correct: usize,
    pub accuracy: f64,
    pub corrupt_accuracy: Option<f64>,
    pub n_joined: usize,
    pub n_conditioned_out: usize,
    pub n_unmatched: usize,
    pub mean_tas_clean: Option<f64>,
    pub rsa_mode: RsaMode,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub meta: AnalysisMeta,
    pub pairs: Vec<PairResult>,
}

/// Whether a record's answer is correct for `chain`.
pub fn is_correct(chain: &ReasoningChain, record: &TraceRecord) -> bool {
    match chain.answer.token_class {
        TokenClass::SingleToken => record.max_logit_correct > record.max_logit_other,
        TokenClass::MultiToken => record.predicted_answer.trim() == chain.answer.text.trim(),
    }
}

fn middle_layer(r: &TraceRecord) -> Result<&crate::trace::Matrix> {
    r.analysis_layer().map(|(_, m)| m).ok_or_else(|| Error::Stage {
        stage: "analyze",
        record: Some(r.record_id.clone()),
        message: "record has no hidden states".into(),
    })
}

/// Rows of `m` at the first `k` step-terminal positions.
fn step_terminal_rows(r: &TraceRecord, k: usize) -> Result<Vec<Vec<f64>>> {
    let m = middle_layer(r)?;
    r.step_end_positions
        .iter()
        .take(k)
        .map(|&p| {
            (p < m.rows)
                .then(|| m.row_f64(p))
                .ok_or_else(|| Error::Shape(format!("{}: step end {p} beyond {} hidden rows", r.record_id, m.rows)))
        })
        .collect()
}

/// Compute margins, NLDD, TAS and RSA for every joined clean/variant pair.
pub fn analyze(
    cfg: &RunConfig,
    eval: &[ReasoningChain],
    variants: &[CounterfactualVariant],
    records: &[TraceRecord],
) -> Result<Analysis> {
    let table = join_traces(eval, variants, records)?;
    let by_id = crate::trace::index_records(records)?;
    let clean: Vec<(&ReasoningChain, &TraceRecord)> = eval
        .iter()
        .map(|c| {
            by_id.get(c.id.as_str()).map(|r| (c, *r)).ok_or_else(|| Error::Stage {
                stage: "analyze",
                record: Some(c.id.clone()),
                message: "clean trace missing".into(),
            })
        })
        .collect::<Result<_>>()?;
    let calibration = calibrate_s(
        clean.iter().map(|(_, r)| *r),
        &format!("{}/{}", cfg.task, cfg.model_tag()),
    )
    .map_err(|e| e.in_stage("calibrate", None))?;
    let correct: HashMap<&str, bool> = clean.iter().map(|(c, r)| (c.id.as_str(), is_correct(c, r))).collect();
    let n_clean_correct = correct.values().filter(|&&v| v).count();

    let corrupt_hits: Vec<bool> = table
        .rows
        .iter()
        .map(|row| is_correct(row.parent, row.corrupt))
        .collect();
    let corrupt_accuracy = (!corrupt_hits.is_empty())
        .then(|| corrupt_hits.iter().filter(|&&h| h).count() as f64 / corrupt_hits.len() as f64);

    let used: Vec<_> = table
        .rows
        .iter()
        .filter(|row| !cfg.condition_on_correct || correct[row.parent.id.as_str()])
        .collect();

    let mut pairs = used
        .par_iter()
        .map(|row| -> Result<PairResult> {
            let ld_clean = logit_margin(row.clean, &calibration);
            let ld_corrupt = logit_margin(row.corrupt, &calibration);
            let value = nldd(ld_clean, ld_corrupt);
            let traj = trajectory(middle_layer(row.corrupt)?, usize::MAX);
            let t = tas(&traj).map_err(|e| e.in_stage("analyze", Some(row.variant.variant_id.clone())))?;
            Ok(PairResult {
                record_id: row.variant.variant_id.clone(),
                parent_id: row.parent.id.clone(),
                k: row.variant.corrupt_position,
                kind: row.variant.kind,
                nldd: value,
                excluded: value.is_none(),
                ld_clean,
                ld_corrupt,
                rsa_t: Vec::new(),
                tas: Some(t.tas),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // RSA is a group statistic over all pairs sharing a position and kind
    let mut groups: BTreeMap<(usize, bool), Vec<usize>> = BTreeMap::new();
    for (i, row) in used.iter().enumerate() {
        groups
            .entry((
                row.variant.corrupt_position,
                row.variant.kind == VariantKind::Paraphrase,
            ))
            .or_default()
            .push(i);
    }
    let series: Vec<(Vec<usize>, Vec<Option<f64>>)> = groups
        .into_par_iter()
        .map(|((k, _), idx)| -> Result<(Vec<usize>, Vec<Option<f64>>)> {
            if idx.len() < 2 {
                return Ok((idx, Vec::new()));
            }
            let mut clean_set = Vec::with_capacity(idx.len());
            let mut corrupt_set = Vec::with_capacity(idx.len());
            for &i in &idx {
                let row = used[i];
                match cfg.rsa_mode {
                    RsaMode::Windowed => {
                        let prefix = shared_prefix(row.clean, row.corrupt, k)?;
                        clean_set.push(trajectory(middle_layer(row.clean)?, prefix));
                        corrupt_set.push(trajectory(middle_layer(row.corrupt)?, prefix));
                    }
                    RsaMode::StepTerminal => {
                        clean_set.push(step_terminal_rows(row.clean, k)?);
                        corrupt_set.push(step_terminal_rows(row.corrupt, k)?);
                    }
                }
            }
            let values = match cfg.rsa_mode {
                RsaMode::Windowed => windowed_rsa(&clean_set, &corrupt_set, cfg.window)?.series,
                RsaMode::StepTerminal => vec![step_terminal_rsa(&clean_set, &corrupt_set)?],
            };
            Ok((idx, values))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("analyze", None))?;
    for (idx, values) in series {
        for i in idx {
            pairs[i].rsa_t = values.clone();
        }
    }

    let clean_trajs = clean
        .iter()
        .map(|(_, r)| Ok(trajectory(middle_layer(r)?, usize::MAX)))
        .collect::<Result<Vec<_>>>()?;
    let mean_tas_clean = if clean_trajs.is_empty() {
        None
    } else {
        Some(batch_tas(&clean_trajs)?)
    };

    Ok(Analysis {
        meta: AnalysisMeta {
            task: cfg.task,
            model: cfg.model_tag(),
            calibration,
            n_clean: clean.len(),
            n_clean_correct,
            accuracy: n_clean_correct as f64 / clean.len() as f64,
            corrupt_accuracy,
            n_joined: table.rows.len(),
            n_conditioned_out: table.rows.len() - used.len(),
            n_unmatched: table.unmatched.len(),
            mean_tas_clean,
            rsa_mode: cfg.rsa_mode,
        },
        pairs,
    })
}

/// The variant kind a run's curves summarize.
pub fn primary_kind(mode: VariantMode) -> VariantKind {
    match mode {
        VariantMode::Paraphrase => VariantKind::Paraphrase,
        _ => VariantKind::Corruption,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub nldd: Vec<CurvePoint>,
    pub rsa: Vec<CurvePoint>,
    pub tas: Vec<CurvePoint>,
}

/// Per-position curves over pairs of `kind`. RSA cells use the window values
/// of each position group as their samples.
pub fn aggregate(pairs: &[PairResult], kind: VariantKind, boot: &BootstrapConfig) -> Result<Curves> {
    let of_kind: Vec<&PairResult> = pairs.iter().filter(|p| p.kind == kind).collect();
    let nldd_rows: Vec<(usize, Option<f64>)> = of_kind.iter().map(|p| (p.k, p.nldd)).collect();
    let tas_rows: Vec<(usize, Option<f64>)> = of_kind.iter().map(|p| (p.k, p.tas)).collect();
    let mut rsa_rows = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for p in &of_kind {
        if seen.insert(p.k) {
            rsa_rows.extend(p.rsa_t.iter().map(|v| (p.k, *v)));
        }
    }
    Ok(Curves {
        nldd: aggregate_curve(&nldd_rows, "nldd", Some(boot))?,
        rsa: aggregate_curve(&rsa_rows, "rsa", Some(boot))?,
        tas: aggregate_curve(&tas_rows, "tas", Some(boot))?,
    })
}

pub fn horizon(curves: &Curves, task: TaskKind, model: &str) -> HorizonReport {
    analyze_horizon(&curve_from_points(&curves.nldd), task.as_str(), model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: TaskKind,
    pub n_chains: usize,
    pub layers: Vec<ProbeResult>,
}

pub fn probe(
    cfg: &RunConfig,
    probe_chains: &[ReasoningChain],
    records: &[TraceRecord],
    manifest: &SplitManifest,
) -> Result<ProbeReport> {
    let datasets = build_all_layers(probe_chains, records, manifest).map_err(|e| e.in_stage("probe", None))?;
    let layers = probe_layers(&datasets, &cfg.probe_config()).map_err(|e| e.in_stage("probe", None))?;
    Ok(ProbeReport {
        task: cfg.task,
        n_chains: probe_chains.len(),
        layers,
    })
}

/// Everything a run produces in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub chains: Vec<ReasoningChain>,
    pub eval: Vec<ReasoningChain>,
    pub probe_chains: Vec<ReasoningChain>,
    pub manifest: SplitManifest,
    pub variants: VariantSet,
    pub requests: Vec<TraceRequest>,
    pub records: Vec<TraceRecord>,
    pub analysis: Analysis,
    pub curves: Curves,
    pub horizon: HorizonReport,
    pub probe: Option<ProbeReport>,
    pub summary: Summary,
}

/// Execute every stage without touching the filesystem, except to read
/// configured input files.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let chains = load_chains(cfg).map_err(|e| e.in_stage("gen", None))?;
    let (eval, probe_chains) =
        split_disjoint(&chains, cfg.eval_fraction, cfg.seed).map_err(|e| e.in_stage("split", None))?;
    let manifest = SplitManifest::from_split(&eval, &probe_chains);

    let mock = match cfg.backend {
        Backend::Mock => Some(MockBackend::new(cfg.mock_regime())?),
        Backend::Traces => None,
    };
    let table;
    let ppl: &dyn PerplexitySource = match (&mock, cfg.ppl_filter, &cfg.ppl_path) {
        (_, false, _) => &NoPerplexity,
        (_, true, Some(path)) => {
            table = PplTable::load(path)?;
            &table
        }
        (Some(m), true, None) => m,
        (None, true, None) => return Err(Error::Config("no perplexity source".into())),
    };
    let variants = make_variants(cfg, &eval, ppl)?;
    let probe_for_trace: &[ReasoningChain] = if cfg.probe { &probe_chains } else { &[] };
    let requests = build_requests(&eval, &variants.variants, probe_for_trace)?;
    let records = match &mock {
        Some(m) => trace_mock(m, &requests)?,
        None => {
            let path = cfg.traces_path.as_ref().expect("validated");
            jsonl::read(path).map_err(|e| e.in_stage("trace", None))?
        }
    };
    check_records(&records).map_err(|e| e.in_stage("trace", None))?;

    let analysis = analyze(cfg, &eval, &variants.variants, &records)?;
    let boot = cfg.bootstrap_config();
    let curves =
        aggregate(&analysis.pairs, primary_kind(cfg.variants), &boot).map_err(|e| e.in_stage("aggregate", None))?;
    let horizon = horizon(&curves, cfg.task, &cfg.model_tag());
    let probe = if cfg.probe {
        Some(probe(cfg, &probe_chains, &records, &manifest)?)
    } else {
        None
    };
    let summary = report::summarize(cfg, &variants, &analysis, &horizon, probe.as_ref())?;
    Ok(RunOutput {
        chains,
        eval,
        probe_chains,
        manifest,
        variants,
        requests,
        records,
        analysis,
        curves,
        horizon,
        probe,
        summary,
    })
}

/// File names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.txt";
    pub const DATASET: &str = "dataset.jsonl";
    pub const SPLIT: &str = "split.json";
    pub const VARIANTS: &str = "variants.jsonl";
    pub const REJECTS: &str = "rejects.jsonl";
    pub const REQUESTS: &str = "requests.jsonl";
    pub const TRACES: &str = "traces.jsonl";
    pub const CALIBRATION: &str = "calibration.json";
    pub const ANALYSIS: &str = "analysis.json";
    pub const RESULTS: &str = "results.jsonl";
    pub const CURVES: &str = "curves.json";
    pub const HORIZON: &str = "horizon.json";
    pub const PROBE: &str = "probe.json";
    pub const SUMMARY: &str = "summary.json";
    pub const PLOTS: &str = "plots";
}

/// Run every stage and write all intermediate files under `out_dir`.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutput> {
    let out = execute(cfg)?;
    write_run(cfg, &out, out_dir)?;
    Ok(out)
}

pub fn write_run(cfg: &RunConfig, out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = |name: &str| -> PathBuf { dir.join(name) };
    std::fs::write(p(files::CONFIG), cfg.to_text()).map_err(|e| Error::io(p(files::CONFIG), e))?;
    jsonl::write(&p(files::DATASET), &out.chains)?;
    jsonl::write_json(&p(files::SPLIT), &out.manifest)?;
    jsonl::write(&p(files::VARIANTS), &out.variants.variants)?;
    jsonl::write(&p(files::REJECTS), &out.variants.rejects)?;
    jsonl::write(&p(files::REQUESTS), &out.requests)?;
    if cfg.backend == Backend::Mock {
        jsonl::write(&p(files::TRACES), &out.records)?;
    }
    jsonl::write_json(&p(files::CALIBRATION), &out.analysis.meta.calibration)?;
    jsonl::write_json(&p(files::ANALYSIS), &out.analysis.meta)?;
    jsonl::write(&p(files::RESULTS), &out.analysis.pairs)?;
    jsonl::write_json(&p(files::CURVES), &out.curves)?;
    jsonl::write_json(&p(files::HORIZON), &out.horizon)?;
    if let Some(probe) = &out.probe {
        jsonl::write_json(&p(files::PROBE), probe)?;
    }
    jsonl::write_json(&p(files::SUMMARY), &out.summary)?;
    report::write_plot_data(
        &p(files::PLOTS),
        cfg.task,
        &out.curves,
        &out.analysis.pairs,
        primary_kind(cfg.variants),
    )?;
    Ok(())
}

/// Mean of the defined values, if any.
pub fn mean_of(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| mean(&v))
}
