// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Every criterion runs against the mock backend and
//! prints one `PASS`/`FAIL` line; the binary exits nonzero if any fails.
//!
//! Reference values are computed here by independent oracles (a stack
//! simulator, forward chaining, naive RDM and rank code, a percentile
//! bootstrap) rather than by the library routines under test.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use stepfaith_core::config::RunConfig;
use stepfaith_core::metrics::{average_ranks, nldd, rdm, spearman, tas, windowed_rsa};
use stepfaith_core::pipeline::{analyze, execute, run_pipeline, RunOutput};
use stepfaith_core::rng::keyed_rng;
use stepfaith_core::stats::{aggregate_curve, bca_ci, resample_means, BootstrapConfig};
use stepfaith_core::taskgen::{generate, GenConfig};
use stepfaith_core::{Annotation, TaskKind};

type Outcome = Result<String, String>;
type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn check(cond: bool, ok: impl Into<String>, bad: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(bad.into())
    }
}

fn run(cfg_text: &str) -> RunOutput {
    execute(&RunConfig::parse(cfg_text).expect("config")).expect("pipeline")
}

// ---------------------------------------------------------------- oracles

/// Depth after each input token, by explicit stack simulation.
fn stack_depths(tokens: &[&str]) -> (Vec<usize>, Option<char>) {
    let mut stack: Vec<char> = Vec::new();
    let mut depths = Vec::new();
    for t in tokens {
        let c = t.chars().next().unwrap();
        match c {
            '(' | '[' | '{' | '<' => stack.push(c),
            _ => {
                let top = stack.pop().expect("balanced prefix");
                let want = match top {
                    '(' => ')',
                    '[' => ']',
                    '{' => '}',
                    _ => '>',
                };
                assert_eq!(c, want, "mismatched closer");
            }
        }
        depths.push(stack.len());
    }
    let next = stack.last().map(|top| match top {
        '(' => ')',
        '[' => ']',
        '{' => '}',
        _ => '>',
    });
    (depths, next)
}

/// Categories reachable from the entity's category under `All X are Y.` rules.
fn forward_closure(input: &str) -> BTreeSet<String> {
    let facts = input.strip_prefix("Facts: ").unwrap();
    let (fact, rules) = facts.split_once(" Rules: ").unwrap();
    let start = fact.trim_end_matches('.').split(' ').next_back().unwrap().to_string();
    let rules: Vec<(String, String)> = rules
        .split('.')
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|r| {
            let words: Vec<&str> = r.split(' ').collect();
            assert_eq!((words[0], words[2]), ("All", "are"), "rule `{r}`");
            (words[1].to_string(), words[3].to_string())
        })
        .collect();
    let mut closure = BTreeSet::from([start]);
    loop {
        let before = closure.len();
        for (from, to) in &rules {
            if closure.contains(from) {
                closure.insert(to.clone());
            }
        }
        if closure.len() == before {
            return closure;
        }
    }
}

fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
    cov / (vx.sqrt() * vy.sqrt())
}

/// Rank by counting: `1 + #less + (#equal - 1) / 2`.
fn counting_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|w| *w < v).count() as f64;
            let equal = x.iter().filter(|w| *w == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Average rank over every ordering that breaks ties, by enumeration.
fn exhaustive_ranks(x: &[f64]) -> Vec<f64> {
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }
    let n = x.len();
    let mut sums = vec![0.0; n];
    let mut count = 0.0;
    for perm in permutations(n) {
        // perm lists indices in sorted position order; keep only orders sorted by value
        if perm.windows(2).all(|w| x[w[0]] <= x[w[1]]) {
            count += 1.0;
            for (pos, &i) in perm.iter().enumerate() {
                sums[i] += (pos + 1) as f64;
            }
        }
    }
    sums.into_iter().map(|s| s / count).collect()
}

fn naive_upper_rdm(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            out.push(1.0 - naive_pearson(&rows[i], &rows[j]));
        }
    }
    out
}

// -------------------------------------------------------------- criteria

fn generator_oracles() -> Outcome {
    let t0 = Instant::now();
    let dyck = generate(&GenConfig {
        n_samples: 1000,
        ..GenConfig::new(TaskKind::Dyck)
    })
    .map_err(|e| e.to_string())?;
    let mut mismatches = 0;
    for c in &dyck {
        let tokens: Vec<&str> = c.input_text.strip_prefix("Input: ").unwrap().split(' ').collect();
        let (depths, next) = stack_depths(&tokens);
        for (s, d) in c.steps.iter().zip(&depths) {
            if s.annotation != Annotation::Depth(*d as u8) {
                mismatches += 1;
            }
        }
        if c.steps.len() != tokens.len() || next.map(String::from) != Some(c.answer.text.clone()) {
            mismatches += 1;
        }
    }
    let logic = generate(&GenConfig {
        n_samples: 500,
        ..GenConfig::new(TaskKind::ProntoQA)
    })
    .map_err(|e| e.to_string())?;
    for c in &logic {
        let closure = forward_closure(&c.input_text);
        let asked = c.question.trim_end_matches('?').split(' ').next_back().unwrap();
        let truth = closure.contains(asked);
        if c.steps.iter().any(|s| s.annotation != Annotation::Truth(truth)) {
            mismatches += 1;
        }
        if c.answer.text != if truth { "True" } else { "False" } {
            mismatches += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs < 10.0,
        format!("1000 Dyck + 500 ProntoQA chains match oracles ({secs:.2}s)"),
        format!("{mismatches} mismatches, {secs:.2}s"),
    )
}

fn metric_identities() -> Outcome {
    let mut rng = keyed_rng(7, &["identities".into()]);
    for _ in 0..1000 {
        let x: f64 = rng.random_range(-50.0..50.0);
        if x.abs() >= 1e-6 && nldd(x, x) != Some(0.0) {
            return Err(format!("nldd({x}, {x}) != 0"));
        }
    }
    let traj = |s: u64| -> Vec<Vec<f64>> {
        let mut r = keyed_rng(s, &["traj".into()]);
        (0..6)
            .map(|_| (0..5).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect()
    };
    let set: Vec<Vec<Vec<f64>>> = (0..4).map(traj).collect();
    let same = windowed_rsa(&set, &set, 3).map_err(|e| e.to_string())?;
    if same.series.iter().any(|v| (v.unwrap() - 1.0).abs() > 1e-9) {
        return Err(format!("RSA of identical sets: {:?}", same.series));
    }
    let dir: Vec<f64> = (0..7).map(|i| (i as f64 * 0.7).cos()).collect();
    let line: Vec<Vec<f64>> = (0..9)
        .map(|t| dir.iter().map(|d| 0.3 + t as f64 * d).collect())
        .collect();
    let straight = tas(&line).map_err(|e| e.to_string())?.tas;
    if (straight - 1.0).abs() > 1e-9 {
        return Err(format!("TAS of a straight line is {straight}"));
    }
    for m in 0..100 {
        let n = rng.random_range(2..12);
        let d = rng.random_range(2..16);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let r = rdm(&rows).map_err(|e| e.to_string())?;
        for i in 0..n {
            if r.get(i, i) != 0.0 {
                return Err(format!("matrix {m}: nonzero diagonal"));
            }
            for j in 0..n {
                let v = r.get(i, j);
                if v != r.get(j, i) || !(0.0..=2.0).contains(&v) {
                    return Err(format!("matrix {m}: entry ({i},{j}) = {v}"));
                }
            }
        }
    }
    Ok("nldd(x,x)=0, RSA(identical)=1, TAS(line)=1, 100 RDMs symmetric/zero-diagonal/in [0,2]".into())
}

fn scale_invariance(base: &RunOutput, cfg: &RunConfig) -> Outcome {
    let reference = &base.analysis.pairs;
    if reference.len() < 500 {
        return Err(format!("only {} pairs", reference.len()));
    }
    let mut worst = 0.0f64;
    for c in [0.1, 3.0, 17.0] {
        let mut scaled = base.records.clone();
        scaled.iter_mut().for_each(|r| r.scale_logits(c));
        let out = analyze(cfg, &base.eval, &base.variants.variants, &scaled).map_err(|e| e.to_string())?;
        for (a, b) in reference.iter().zip(&out.pairs) {
            let (a, b) = (a.nldd.unwrap(), b.nldd.unwrap());
            worst = worst.max((a - b).abs() / a.abs().max(1e-12));
        }
    }
    check(
        worst <= 1e-6,
        format!(
            "{} pairs x c in {{0.1, 3, 17}}: max relative NLDD change {worst:.2e}",
            reference.len()
        ),
        format!("max relative NLDD change {worst:.2e}"),
    )
}

fn oracle_equivalence() -> Outcome {
    // windowed RSA against naive per-window recomputation
    let mut rng = keyed_rng(11, &["windowed".into()]);
    let (n, t, d) = (3, 5, 4);
    let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<Vec<f64>>> {
        (0..n)
            .map(|_| {
                (0..t)
                    .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect()
    };
    let clean = mk(&mut rng);
    let corrupt = mk(&mut rng);
    let got = windowed_rsa(&clean, &corrupt, 3).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for s in 0..=t - 3 {
        let stack = |set: &[Vec<Vec<f64>>]| -> Vec<Vec<f64>> {
            set.iter().flat_map(|traj| traj[s..s + 3].iter().cloned()).collect()
        };
        let a = naive_upper_rdm(&stack(&clean));
        let b = naive_upper_rdm(&stack(&corrupt));
        let want = naive_pearson(&counting_ranks(&a), &counting_ranks(&b));
        worst = worst.max((got.series[s].unwrap() - want).abs());
    }
    if got.series.len() != t - 2 || worst > 1e-9 {
        return Err(format!("windowed RSA differs from naive oracle by {worst:.2e}"));
    }

    // ties: ranks identical to exhaustive enumeration, rho exact on the fixed case
    let (x, y) = ([1.0, 1.0, 2.0], [1.0, 2.0, 2.0]);
    if spearman(&x, &y) != Some(0.5) || average_ranks(&x) != exhaustive_ranks(&x) {
        return Err(format!("spearman ties: {:?}", spearman(&x, &y)));
    }
    for _ in 0..200 {
        let len = rng.random_range(3..8);
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(0..3) as f64).collect();
        if average_ranks(&v) != exhaustive_ranks(&v) {
            return Err(format!("ranks of {v:?}"));
        }
    }

    // BCa on symmetric data against a percentile bootstrap over the same resamples
    let cfg = BootstrapConfig::default();
    let data = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let (lo, hi) = bca_ci(&data, &cfg, "oracle", 0).map_err(|e| e.to_string())?;
    let mut boot = resample_means(&data, &cfg, "oracle", 0);
    boot.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let b = boot.len() as f64;
    let pct = |q: f64| boot[((q * b).ceil() as usize).clamp(1, boot.len()) - 1];
    let (plo, phi) = (pct(0.025), pct(0.975));
    check(
        (lo - plo).abs() <= 1e-6 && (hi - phi).abs() <= 1e-6,
        format!(
            "windowed RSA within {worst:.1e} of naive; tie ranks exact; BCa ({lo}, {hi}) = percentile ({plo}, {phi})"
        ),
        format!("BCa ({lo}, {hi}) vs percentile ({plo}, {phi})"),
    )
}

fn regime_discrimination(faithful: &RunOutput) -> Outcome {
    let t0 = Instant::now();
    let anti = run("task = prontoqa\nregime = anti");
    let gap = run("regime = gap");
    let secs = t0.elapsed().as_secs_f64() + faithful_secs();

    let f = faithful.summary.mean_nldd.as_ref().ok_or("faithful: no NLDD")?;
    let a = anti.summary.mean_nldd.as_ref().ok_or("anti: no NLDD")?;
    let probe_min = gap
        .summary
        .probe_accuracies
        .values()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let middle = gap.summary.probe_accuracies.get(&2).copied().unwrap_or(0.0);
    let ok_f = f.mean > 30.0 && f.ci_lo.is_some_and(|lo| lo > 0.0) && faithful.summary.n_eval == 100;
    let ok_a = a.mean < 0.0 && a.ci_hi.is_some_and(|hi| hi < 0.0) && anti.summary.n_eval == 100;
    let ok_g = middle >= 0.8 && probe_min >= 0.8 && gap.summary.accuracy <= 0.05;
    let line = format!(
        "faithful NLDD {:.1} [{:.1}, {:.1}]; anti {:.1} [{:.1}, {:.1}]; gap probe {:.2} (min over layers {:.2}), answer acc {:.2}; {secs:.1}s",
        f.mean,
        f.ci_lo.unwrap_or(f64::NAN),
        f.ci_hi.unwrap_or(f64::NAN),
        a.mean,
        a.ci_lo.unwrap_or(f64::NAN),
        a.ci_hi.unwrap_or(f64::NAN),
        middle,
        probe_min,
        gap.summary.accuracy
    );
    check(ok_f && ok_a && ok_g && secs < 120.0, line.clone(), line)
}

static FAITHFUL_SECS: std::sync::OnceLock<f64> = std::sync::OnceLock::new();

fn faithful_secs() -> f64 {
    FAITHFUL_SECS.get().copied().unwrap_or(0.0)
}

fn horizon_robustness() -> Outcome {
    let mut agree = 0;
    let mut detail = Vec::new();
    for i in 0..20 {
        let h = 0.6 + 0.25 * i as f64 / 19.0;
        let out = run(&format!(
            "seed = {}\nhorizon_fraction = {h}\nprobe = false\nbootstrap_b = 200",
            1000 + i
        ));
        let (k, alt) = (out.horizon.k_star, out.horizon.alt_k);
        if let (Some(k), Some(alt)) = (k, alt) {
            if k.abs_diff(alt) <= 1 {
                agree += 1;
            }
        }
        detail.push(format!(
            "{}/{}",
            k.map_or("-".into(), |v| v.to_string()),
            alt.map_or("-".into(), |v| v.to_string())
        ));
    }
    check(
        agree >= 18,
        format!("{agree}/20 seeds within one step (k*/alt: {})", detail.join(" ")),
        format!("only {agree}/20 agree: {}", detail.join(" ")),
    )
}

fn stability_filter(base: &RunOutput) -> Outcome {
    let mut cfg = RunConfig::parse("condition_on_correct = false").unwrap();
    cfg.bootstrap_b = 200;
    // flatten the clean margin of every third evaluation chain
    let flattened: BTreeSet<String> = base.eval.iter().step_by(3).map(|c| c.id.clone()).collect();
    let mut records = base.records.clone();
    for r in records.iter_mut().filter(|r| flattened.contains(&r.record_id)) {
        r.max_logit_other = r.max_logit_correct;
    }
    let out = analyze(&cfg, &base.eval, &base.variants.variants, &records).map_err(|e| e.to_string())?;
    let rows: Vec<(usize, Option<f64>)> = out.pairs.iter().map(|p| (p.k, p.nldd)).collect();
    let curve = aggregate_curve(&rows, "nldd", None).map_err(|e| e.to_string())?;
    let mut input: BTreeMap<usize, usize> = BTreeMap::new();
    let mut expect_excl: BTreeMap<usize, usize> = BTreeMap::new();
    for p in &out.pairs {
        *input.entry(p.k).or_default() += 1;
        if flattened.contains(&p.parent_id) {
            *expect_excl.entry(p.k).or_default() += 1;
            if !p.excluded || p.ld_clean.abs() >= 1e-6 {
                return Err(format!("{} not excluded", p.record_id));
            }
        } else if p.excluded {
            return Err(format!("{} wrongly excluded", p.record_id));
        }
    }
    for pt in &curve {
        if pt.n + pt.n_excluded != input[&pt.k] || pt.n_excluded != expect_excl.get(&pt.k).copied().unwrap_or(0) {
            return Err(format!(
                "k={}: {} used + {} excluded != {}",
                pt.k, pt.n, pt.n_excluded, input[&pt.k]
            ));
        }
    }
    let total_excl: usize = curve.iter().map(|p| p.n_excluded).sum();
    check(
        curve.len() == input.len() && total_excl > 0,
        format!(
            "{total_excl} of {} pairs excluded; used + excluded = input at all {} positions",
            out.pairs.len(),
            curve.len()
        ),
        "positions missing from curve",
    )
}

fn determinism() -> Outcome {
    let cfg = RunConfig::parse("n = 120\nbootstrap_b = 1000").unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(&cfg, a.path()).map_err(|e| e.to_string())?;
    run_pipeline(&cfg, b.path()).map_err(|e| e.to_string())?;
    let mut compared = vec!["summary.json".to_string()];
    for entry in std::fs::read_dir(a.path().join("plots")).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name.ends_with(".csv") {
            compared.push(format!("plots/{name}"));
        }
    }
    compared.sort();
    for f in &compared {
        let (x, y) = (
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
        );
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("byte-identical across reruns: {}", compared.join(", ")))
}

fn paraphrase_control() -> Outcome {
    let out = run("variants = paraphrase\nprobe = false");
    let m = out.summary.mean_nldd.as_ref().ok_or("no NLDD")?;
    check(
        m.mean.abs() <= 5.0 && m.n >= 100,
        format!("paraphrase mean NLDD {:.2} over {} pairs", m.mean, m.n),
        format!("paraphrase mean NLDD {:.2}", m.mean),
    )
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let cfg = RunConfig::parse("").unwrap();
    let faithful = execute(&cfg).expect("faithful pipeline");
    FAITHFUL_SECS.set(t0.elapsed().as_secs_f64()).unwrap();

    let criteria: Vec<(&str, Criterion)> = vec![
        ("generator oracles", Box::new(generator_oracles)),
        ("metric identities", Box::new(metric_identities)),
        ("scale invariance", Box::new(|| scale_invariance(&faithful, &cfg))),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("regime discrimination", Box::new(|| regime_discrimination(&faithful))),
        ("horizon robustness", Box::new(horizon_robustness)),
        ("stability filter", Box::new(|| stability_filter(&faithful))),
        ("determinism", Box::new(determinism)),
        ("paraphrase control", Box::new(paraphrase_control)),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
            Ok(Ok(msg)) => println!("PASS  {name}: {msg}"),
            Ok(Err(msg)) => {
                failed += 1;
                println!("FAIL  {name}: {msg}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    println!(
        "{} of {} acceptance criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
