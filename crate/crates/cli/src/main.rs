// SPDX-License-Identifier: MIT OR Apache-2.0

//! `stepfaith`: run the faithfulness pipeline end to end or one stage at a time.
//!
//! Every stage reads its inputs from and writes its outputs to the run
//! directory (`--out-dir`), so stages can be rerun independently.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use stepfaith_core::config::{Backend, RunConfig};
use stepfaith_core::jsonl;
use stepfaith_core::metrics::{calibrate_s, Calibration};
use stepfaith_core::mock::MockBackend;
use stepfaith_core::pipeline::{
    aggregate, analyze, files, horizon, load_chains, make_variants, primary_kind, probe, run_pipeline, trace_mock,
    Curves, NoPerplexity, PairResult, PerplexitySource, PplTable,
};
use stepfaith_core::report::{rebuild_summary, write_plot_data, Summary};
use stepfaith_core::taskgen::{split_disjoint, SplitManifest};
use stepfaith_core::trace::{build_requests, index_records, TraceRecord, TraceRequest};
use stepfaith_core::{CounterfactualVariant, ReasoningChain};

#[derive(Parser)]
#[command(
    name = "stepfaith",
    version,
    about = "Step-level chain-of-thought faithfulness diagnostics"
)]
struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory that stages read from and write to.
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    /// Override one configuration key, e.g. `--set task=prontoqa`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load chains and split them into evaluation and probing sets.
    Gen,
    /// Build counterfactual variants and the trace requests.
    Corrupt,
    /// Trace every request with the mock backend, or check external traces.
    Trace,
    /// Compute the logit-scale calibration constant.
    Calibrate,
    /// Join traces and compute per-pair metrics and curves.
    Analyze,
    /// Detect the faithfulness horizon from the NLDD curve.
    Horizon,
    /// Train layer-wise probes on the probing split.
    Probe,
    /// Assemble the summary from the stage outputs.
    Report,
    /// Write CSV and SVG plot data.
    PlotData,
    /// Run every stage.
    Run,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        };
        cfg.set(k.trim(), v.trim()).with_context(|| format!("--set {kv}"))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Run<'a> {
    cfg: RunConfig,
    dir: &'a Path,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn read<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<Vec<T>> {
        jsonl::read(&self.path(name)).with_context(|| format!("run `gen`/earlier stages first? reading {name}"))
    }

    fn read_json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        jsonl::read_json(&self.path(name)).with_context(|| format!("run earlier stages first? reading {name}"))
    }

    /// Evaluation and probing chains, in dataset order.
    fn split(&self) -> Result<(Vec<ReasoningChain>, Vec<ReasoningChain>, SplitManifest)> {
        let chains: Vec<ReasoningChain> = self.read(files::DATASET)?;
        let manifest: SplitManifest = self.read_json(files::SPLIT)?;
        let (eval, probe) = chains.into_iter().partition(|c| manifest.eval_ids.contains(&c.id));
        Ok((eval, probe, manifest))
    }

    fn records(&self) -> Result<Vec<TraceRecord>> {
        match self.cfg.backend {
            Backend::Mock => self.read(files::TRACES),
            Backend::Traces => {
                let path = self.cfg.traces_path.as_ref().expect("validated");
                Ok(jsonl::read(path)?)
            }
        }
    }

    fn gen(&self) -> Result<()> {
        std::fs::create_dir_all(self.dir)?;
        let chains = load_chains(&self.cfg)?;
        let (eval, probe) = split_disjoint(&chains, self.cfg.eval_fraction, self.cfg.seed)?;
        std::fs::write(self.path(files::CONFIG), self.cfg.to_text())?;
        jsonl::write(&self.path(files::DATASET), &chains)?;
        jsonl::write_json(&self.path(files::SPLIT), &SplitManifest::from_split(&eval, &probe))?;
        println!(
            "{} chains: {} evaluation, {} probing",
            chains.len(),
            eval.len(),
            probe.len()
        );
        Ok(())
    }

    fn corrupt(&self) -> Result<()> {
        let (eval, probe_chains, _) = self.split()?;
        let mock;
        let table;
        let ppl: &dyn PerplexitySource = match (&self.cfg.backend, self.cfg.ppl_filter, &self.cfg.ppl_path) {
            (_, false, _) => &NoPerplexity,
            (_, true, Some(path)) => {
                table = PplTable::load(path)?;
                &table
            }
            (Backend::Mock, true, None) => {
                mock = MockBackend::new(self.cfg.mock_regime())?;
                &mock
            }
            (Backend::Traces, true, None) => unreachable!("rejected by validation"),
        };
        let set = make_variants(&self.cfg, &eval, ppl)?;
        let probe_chains: &[ReasoningChain] = if self.cfg.probe { &probe_chains } else { &[] };
        let requests = build_requests(&eval, &set.variants, probe_chains)?;
        jsonl::write(&self.path(files::VARIANTS), &set.variants)?;
        jsonl::write(&self.path(files::REJECTS), &set.rejects)?;
        jsonl::write(&self.path(files::REQUESTS), &requests)?;
        println!(
            "{} variants, {} rejected, {} trace requests",
            set.variants.len(),
            set.rejects.len(),
            requests.len()
        );
        Ok(())
    }

    fn trace(&self) -> Result<()> {
        let requests: Vec<TraceRequest> = self.read(files::REQUESTS)?;
        let records = match self.cfg.backend {
            Backend::Mock => {
                let records = trace_mock(&MockBackend::new(self.cfg.mock_regime())?, &requests)?;
                jsonl::write(&self.path(files::TRACES), &records)?;
                records
            }
            Backend::Traces => self.records()?,
        };
        stepfaith_core::pipeline::check_records(&records)?;
        let by_id = index_records(&records)?;
        let missing = requests
            .iter()
            .filter(|r| !by_id.contains_key(r.record_id.as_str()))
            .count();
        println!(
            "{} records for {} requests ({missing} missing)",
            records.len(),
            requests.len()
        );
        Ok(())
    }

    fn calibrate(&self) -> Result<Calibration> {
        let (eval, _, _) = self.split()?;
        let records = self.records()?;
        let by_id = index_records(&records)?;
        let clean = eval
            .iter()
            .map(|c| {
                by_id
                    .get(c.id.as_str())
                    .copied()
                    .with_context(|| format!("no clean trace for `{}`", c.id))
            })
            .collect::<Result<Vec<_>>>()?;
        let cal = calibrate_s(clean, &format!("{}/{}", self.cfg.task, self.cfg.model_tag()))?;
        jsonl::write_json(&self.path(files::CALIBRATION), &cal)?;
        println!("S = {:.6} over {} clean records", cal.s, cal.m);
        Ok(cal)
    }

    fn analyze(&self) -> Result<()> {
        let (eval, _, _) = self.split()?;
        let variants: Vec<CounterfactualVariant> = self.read(files::VARIANTS)?;
        let records = self.records()?;
        let analysis = analyze(&self.cfg, &eval, &variants, &records)?;
        let curves = aggregate(
            &analysis.pairs,
            primary_kind(self.cfg.variants),
            &self.cfg.bootstrap_config(),
        )?;
        jsonl::write_json(&self.path(files::CALIBRATION), &analysis.meta.calibration)?;
        jsonl::write_json(&self.path(files::ANALYSIS), &analysis.meta)?;
        jsonl::write(&self.path(files::RESULTS), &analysis.pairs)?;
        jsonl::write_json(&self.path(files::CURVES), &curves)?;
        let m = &analysis.meta;
        println!(
            "{} pairs joined, {} conditioned out, {} unmatched; clean accuracy {:.3}",
            m.n_joined, m.n_conditioned_out, m.n_unmatched, m.accuracy
        );
        Ok(())
    }

    fn horizon(&self) -> Result<()> {
        let curves: Curves = self.read_json(files::CURVES)?;
        let report = horizon(&curves, self.cfg.task, &self.cfg.model_tag());
        jsonl::write_json(&self.path(files::HORIZON), &report)?;
        match (report.k_star, report.alt_k) {
            (Some(k), Some(alt)) => println!(
                "k* = {k}, steepest decline at {alt}{}",
                if report.flagged { " (flagged)" } else { "" }
            ),
            _ => println!("no horizon: {}", report.reason.as_deref().unwrap_or("unknown")),
        }
        Ok(())
    }

    fn probe(&self) -> Result<()> {
        if !self.cfg.probe {
            bail!("probing is disabled (probe = false)");
        }
        let (_, probe_chains, manifest) = self.split()?;
        let report = probe(&self.cfg, &probe_chains, &self.records()?, &manifest)?;
        jsonl::write_json(&self.path(files::PROBE), &report)?;
        for l in &report.layers {
            println!("layer {}: accuracy {:.3} ({} test rows)", l.layer, l.accuracy, l.n_test);
        }
        Ok(())
    }

    fn report(&self) -> Result<Summary> {
        let summary = rebuild_summary(&self.cfg, self.dir)?;
        jsonl::write_json(&self.path(files::SUMMARY), &summary)?;
        print_summary(&summary);
        Ok(summary)
    }

    fn plot_data(&self) -> Result<()> {
        let curves: Curves = self.read_json(files::CURVES)?;
        let pairs: Vec<PairResult> = self.read(files::RESULTS)?;
        let dir = self.path(files::PLOTS);
        write_plot_data(&dir, self.cfg.task, &curves, &pairs, primary_kind(self.cfg.variants))?;
        println!("plot data written to {}", dir.display());
        Ok(())
    }
}

fn print_summary(s: &Summary) {
    println!("task {} / model {}", s.task, s.model);
    println!("clean accuracy {:.3} over {} chains", s.accuracy, s.n_eval);
    match &s.mean_nldd {
        Some(i) => println!(
            "mean NLDD {:.2} [{}, {}] over {} pairs",
            i.mean,
            i.ci_lo.map_or("-".into(), |v| format!("{v:.2}")),
            i.ci_hi.map_or("-".into(), |v| format!("{v:.2}")),
            i.n
        ),
        None => println!("mean NLDD undefined"),
    }
    match s.k_star {
        Some(k) => println!("horizon k* = {k}"),
        None => println!("horizon: {}", s.horizon_reason.as_deref().unwrap_or("undefined")),
    }
    for (layer, acc) in &s.probe_accuracies {
        println!("probe layer {layer}: {acc:.3}");
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let run = Run { cfg, dir: &cli.out_dir };
    match cli.command {
        Command::Gen => run.gen(),
        Command::Corrupt => run.corrupt(),
        Command::Trace => run.trace(),
        Command::Calibrate => run.calibrate().map(drop),
        Command::Analyze => run.analyze(),
        Command::Horizon => run.horizon(),
        Command::Probe => run.probe(),
        Command::Report => run.report().map(drop),
        Command::PlotData => run.plot_data(),
        Command::Run => {
            let out = run_pipeline(&run.cfg, run.dir)?;
            print_summary(&out.summary);
            Ok(())
        }
    }
}
