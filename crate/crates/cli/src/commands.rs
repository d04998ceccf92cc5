//! Subcommand bodies. Each writes its artifacts plus a run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use duoserve_core::config::load_config;
use duoserve_core::predictor::{
    evaluate, save_model, train, Architecture, ExpertPredictor, HitRateReport, InputLayout, OraclePredictor,
    PopularityPredictor, TrainHyper, TrainReport,
};
use duoserve_core::sim::{run_experiment, simulate_request, Comparison, SimReport};
use duoserve_core::stats::{load_stats, save_stats, StatsDocument};
use duoserve_core::trace::{generate_traces, load_traces, save_traces, split_dataset, Provenance};
use duoserve_core::{CostModel, GeneratorParams, ModelConfig, SchedulerPolicy, TraceDataset, TraceStats};

use crate::manifest::{digest_of, ManifestBuilder};
use crate::model::LoadedModel;
use crate::{
    usage, CompareArgs, EvalArgs, GenArgs, HyperArgs, PipelineArgs, Precision, SeedArg, SimInputs, SimulateArgs,
    StatsArgs, TrainArgs,
};

fn config(path: &Path) -> Result<(ModelConfig, CostModel, String)> {
    let (cfg, cost) = load_config(path).with_context(|| format!("loading config {}", path.display()))?;
    Ok((cfg, cost, digest_of(path)?))
}

fn traces(path: &Path, cfg: &ModelConfig) -> Result<(TraceDataset, String)> {
    let ds = load_traces(path, cfg).with_context(|| format!("loading traces {}", path.display()))?;
    Ok((ds, digest_of(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn inputs(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn parse_policies(names: &[String]) -> Result<Vec<SchedulerPolicy>> {
    if names.is_empty() {
        return Err(usage("no policies given"));
    }
    names
        .iter()
        .map(|n| n.parse::<SchedulerPolicy>().map_err(|e| usage(e.to_string())))
        .collect()
}

pub fn gen_traces(a: &GenArgs) -> Result<PathBuf> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(usage(format!("--alpha must lie in [0, 1], got {}", a.alpha)));
    }
    if a.requests == 0 || a.decode_len == 0 || a.prefill_len == 0 {
        return Err(usage("--requests, --decode-len and --prefill-len must be at least 1"));
    }
    let mut m = ManifestBuilder::start("gen-traces");
    let (cfg, _, cfg_digest) = config(&a.config)?;
    let seed = a.seed.seed;
    let params = GeneratorParams::synthetic(&cfg, a.alpha, seed);
    let mut ds = generate_traces(&params, &cfg, a.requests, a.decode_len, a.prefill_len)?;
    if let Provenance::Synthetic { config_digest, .. } = &mut ds.provenance {
        config_digest.replace(cfg_digest.clone());
    }
    save_traces(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    m.config(&a.config).seed("generator", seed).input("config", &cfg_digest);
    m.output("traces", &a.out)?;
    m.finish(&a.out)?;
    println!("wrote {} traces to {}", ds.len(), a.out.display());
    Ok(a.out.clone())
}

pub fn stats(a: &StatsArgs) -> Result<TraceStats> {
    let mut m = ManifestBuilder::start("stats");
    let (cfg, _, cfg_digest) = config(&a.config)?;
    let (ds, ds_digest) = traces(&a.traces, &cfg)?;
    let stats = TraceStats::build(&ds, a.decode_only)?;
    let doc = StatsDocument::new(&stats, inputs(&[("config", &cfg_digest), ("traces", &ds_digest)]));
    save_stats(&a.out, &doc).with_context(|| format!("writing {}", a.out.display()))?;
    m.config(&a.config)
        .input("config", &cfg_digest)
        .input("traces", &ds_digest);
    m.output("stats", &a.out)?;
    if let Some(dir) = &a.csv_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let pop = dir.join("popularity.csv");
        write_text(&pop, &stats.popularity_csv())?;
        m.output("popularity_csv", &pop)?;
        for l in 0..doc.affinity.len() {
            let p = dir.join(format!("affinity_{l:02}.csv"));
            write_text(&p, &stats.affinity_csv(l))?;
            m.output(&format!("affinity_csv_{l:02}"), &p)?;
        }
    }
    m.finish(&a.out)?;
    println!("wrote statistics over {} tokens to {}", doc.n, a.out.display());
    Ok(stats)
}

fn architecture(layout: &InputLayout, hyper: &HyperArgs) -> Result<Architecture> {
    let (input, output) = (layout.input_dim(), layout.shape.experts);
    Ok(match hyper.hidden_width {
        None => Architecture::standard(input, output),
        Some(0) => return Err(usage("--hidden-width must be at least 1")),
        Some(w) => Architecture::uniform(input, w, output),
    })
}

pub fn train_cmd(a: &TrainArgs) -> Result<TrainReport> {
    let h = &a.hyper;
    if h.batch_size < 2 {
        return Err(usage("--batch-size must be at least 2"));
    }
    if !h.learning_rate.is_finite() || h.learning_rate <= 0.0 {
        return Err(usage(format!(
            "--learning-rate must be positive, got {}",
            h.learning_rate
        )));
    }
    let mut m = ManifestBuilder::start("train");
    let (cfg, _, cfg_digest) = config(&a.config)?;
    let (ds, ds_digest) = traces(&a.traces, &cfg)?;
    let (stats, _) = load_stats(&a.stats).with_context(|| format!("loading {}", a.stats.display()))?;
    let stats_digest = digest_of(&a.stats)?;
    if stats.model.shape != cfg.shape() {
        return Err(usage(format!(
            "statistics are for {}, config is {}",
            stats.model.shape,
            cfg.shape()
        )));
    }
    let layout = InputLayout::new(cfg.shape(), h.affinity.into());
    let arch = architecture(&layout, h)?;
    let hyper = TrainHyper {
        epochs: h.epochs,
        batch_size: h.batch_size,
        learning_rate: h.learning_rate,
        seed: a.seed.seed,
    };
    let provenance = inputs(&[
        ("config", &cfg_digest),
        ("traces", &ds_digest),
        ("stats", &stats_digest),
    ]);
    let report = match h.precision {
        Precision::F32 => {
            let (net, report) = train::<f32>(&ds, &stats, layout, arch, &hyper)?;
            save_model(&a.out, &net, layout, provenance)?;
            report
        }
        Precision::F64 => {
            let (net, report) = train::<f64>(&ds, &stats, layout, arch, &hyper)?;
            save_model(&a.out, &net, layout, provenance)?;
            report
        }
    };
    let report_path = a.report.clone().unwrap_or_else(|| {
        let mut p = a.out.as_os_str().to_owned();
        p.push(".report.json");
        PathBuf::from(p)
    });
    write_json(&report_path, &report)?;
    m.config(&a.config)
        .seed("train", a.seed.seed)
        .input("config", &cfg_digest)
        .input("traces", &ds_digest)
        .input("stats", &stats_digest);
    m.output("model", &a.out)?.output("report", &report_path)?;
    m.finish(&a.out)?;
    println!(
        "trained on {} samples: loss {:.4} -> {:.4}; model at {}",
        report.samples,
        report.initial_loss,
        report.final_loss,
        a.out.display()
    );
    Ok(report)
}

/// Path of the popularity-baseline report written beside `out`.
pub fn baseline_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".baseline.json");
    PathBuf::from(p)
}

pub fn eval(a: &EvalArgs) -> Result<HitRateReport> {
    let mut m = ManifestBuilder::start("eval");
    let (cfg, _, cfg_digest) = config(&a.config)?;
    let (ds, ds_digest) = traces(&a.traces, &cfg)?;
    let (stats, _) = load_stats(&a.stats).with_context(|| format!("loading {}", a.stats.display()))?;
    let stats_digest = digest_of(&a.stats)?;
    let mut provenance = inputs(&[
        ("config", &cfg_digest),
        ("traces", &ds_digest),
        ("stats", &stats_digest),
    ]);
    m.config(&a.config)
        .input("config", &cfg_digest)
        .input("traces", &ds_digest)
        .input("stats", &stats_digest);

    let mut report = if a.oracle {
        evaluate(&OraclePredictor, &ds)?
    } else {
        let path = a
            .model
            .as_ref()
            .ok_or_else(|| usage("--model or --oracle is required"))?;
        let model = LoadedModel::load(path)?;
        let model_digest = digest_of(path)?;
        provenance.insert("model".into(), model_digest.clone());
        m.input("model", &model_digest);
        if model.header().inputs.get("traces") == Some(&ds_digest) {
            eprintln!("warning: evaluation traces are the traces the model was trained on");
            provenance.insert("train_test_overlap".into(), "true".into());
        }
        let predictor = model.predictor(&stats)?;
        evaluate(predictor.as_ref(), &ds)?
    };
    report.inputs = provenance.clone();
    write_json(&a.out, &report)?;
    m.output("report", &a.out)?;
    println!(
        "{}: top-k {:.4}, at-least-one {:.4} over {} predictions",
        report.predictor, report.topk_hit_rate, report.at_least_one_rate, report.n_evaluated
    );
    if a.baseline {
        let mut base = evaluate(&PopularityPredictor::new(&stats), &ds)?;
        base.inputs = provenance;
        let path = baseline_path(&a.out);
        write_json(&path, &base)?;
        m.output("baseline", &path)?;
        println!(
            "{}: top-k {:.4}, at-least-one {:.4}",
            base.predictor, base.topk_hit_rate, base.at_least_one_rate
        );
    }
    m.finish(&a.out)?;
    Ok(report)
}

/// Everything a simulation needs, loaded once.
struct SimContext {
    cfg: ModelConfig,
    cost: CostModel,
    ds: TraceDataset,
    stats: Option<TraceStats>,
    model: Option<LoadedModel>,
    provenance: BTreeMap<String, String>,
    seed: u64,
}

impl SimContext {
    fn load(a: &SimInputs, policies: &[SchedulerPolicy], m: &mut ManifestBuilder) -> Result<Self> {
        let (cfg, cost, cfg_digest) = config(&a.config)?;
        let (ds, ds_digest) = traces(&a.traces, &cfg)?;
        let mut provenance = inputs(&[("config", &cfg_digest), ("traces", &ds_digest)]);
        let needs_model = policies.contains(&SchedulerPolicy::DuoServe);
        let (mut stats, mut model) = (None, None);
        if needs_model {
            let (Some(model_path), Some(stats_path)) = (&a.model, &a.stats) else {
                return Err(usage("the duoserve policy needs --model and --stats"));
            };
            let (s, _) = load_stats(stats_path).with_context(|| format!("loading {}", stats_path.display()))?;
            provenance.insert("stats".into(), digest_of(stats_path)?);
            provenance.insert("model".into(), digest_of(model_path)?);
            stats = Some(s);
            model = Some(LoadedModel::load(model_path)?);
        }
        m.config(&a.config).seed("simulation", a.seed.seed);
        for (k, v) in &provenance {
            m.input(k, v);
        }
        Ok(SimContext {
            cfg,
            cost,
            ds,
            stats,
            model,
            provenance,
            seed: a.seed.seed,
        })
    }

    fn run(&self, policies: &[SchedulerPolicy]) -> Result<Vec<SimReport>> {
        let predictor: Option<Box<dyn ExpertPredictor + '_>> = match (&self.model, &self.stats) {
            (Some(model), Some(stats)) => Some(model.predictor(stats)?),
            _ => None,
        };
        let mut reports = run_experiment(
            policies,
            &self.ds,
            &self.cfg,
            &self.cost,
            predictor.as_deref(),
            self.seed,
            &self.provenance["config"],
        )?;
        for r in &mut reports {
            r.inputs = self.provenance.clone();
        }
        Ok(reports)
    }
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let policy = parse_policies(std::slice::from_ref(&a.policy))?[0];
    let mut m = ManifestBuilder::start("simulate");
    let ctx = SimContext::load(&a.inputs, &[policy], &mut m)?;
    let report = ctx.run(&[policy])?.remove(0);
    write_text(&a.out, &report.to_json())?;
    m.output("report", &a.out)?;
    if let Some(path) = &a.timeline {
        let requests = ctx.ds.requests();
        let request = match a.timeline_request {
            None => requests.first(),
            Some(id) => requests.iter().find(|r| r.request_id == id),
        }
        .ok_or_else(|| usage("--timeline-request names no request in the trace file"))?;
        let predictor: Option<Box<dyn ExpertPredictor + '_>> = match (&ctx.model, &ctx.stats) {
            (Some(model), Some(stats)) => Some(model.predictor(stats)?),
            _ => None,
        };
        let (_, timeline) = simulate_request(policy, request, &ctx.cfg, &ctx.cost, predictor.as_deref())?;
        write_text(path, &timeline.to_jsonl())?;
        m.output("timeline", path)?;
    }
    m.finish(&a.out)?;
    let agg = &report.aggregate;
    println!(
        "{}: {} requests, mean TTFT {:.4} s, mean throughput {:.2} tok/s",
        report.policy, agg.requests, agg.mean_ttft_s, agg.mean_throughput_tokens_per_s
    );
    Ok(())
}

/// File name of one policy's report inside a compare output directory.
pub fn report_file(policy: SchedulerPolicy) -> String {
    format!("report_{}.json", policy.as_str())
}

pub fn compare(a: &CompareArgs) -> Result<Comparison> {
    let policies = parse_policies(&a.policies)?;
    let mut m = ManifestBuilder::start("compare");
    let ctx = SimContext::load(&a.inputs, &policies, &mut m)?;
    let reports = ctx.run(&policies)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for r in &reports {
        let path = a.out_dir.join(report_file(r.policy));
        write_text(&path, &r.to_json())?;
        m.output(&format!("report_{}", r.policy), &path)?;
    }
    let mut comparison = Comparison::new(&reports);
    comparison.inputs = ctx.provenance.clone();
    let json = a.out_dir.join("comparison.json");
    write_text(&json, &comparison.to_json())?;
    let table = comparison.to_table();
    let txt = a.out_dir.join("comparison.txt");
    write_text(&txt, &table)?;
    m.output("comparison", &json)?.output("table", &txt)?;
    m.finish(&json)?;
    print!("{table}");
    Ok(comparison)
}

pub fn pipeline(a: &PipelineArgs) -> Result<()> {
    if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
        return Err(usage(format!(
            "--train-fraction must lie in (0, 1), got {}",
            a.train_fraction
        )));
    }
    let seed = a.seed.seed;
    let dir = &a.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let all = dir.join("traces.jsonl");
    gen_traces(&GenArgs {
        config: a.config.clone(),
        out: all.clone(),
        requests: a.requests,
        decode_len: a.decode_len,
        prefill_len: a.prefill_len,
        alpha: a.alpha,
        seed: SeedArg { seed },
    })?;

    let mut m = ManifestBuilder::start("split");
    let (cfg, _, _) = config(&a.config)?;
    let (ds, ds_digest) = traces(&all, &cfg)?;
    let (train_ds, test_ds) = split_dataset(&ds, a.train_fraction, seed)?;
    let (train_path, test_path) = (dir.join("train.jsonl"), dir.join("test.jsonl"));
    save_traces(&train_ds, &train_path)?;
    save_traces(&test_ds, &test_path)?;
    m.config(&a.config).seed("split", seed).input("traces", &ds_digest);
    m.output("train", &train_path)?.output("test", &test_path)?;
    m.finish(&train_path)?;

    let stats_path = dir.join("stats.json");
    stats(&StatsArgs {
        config: a.config.clone(),
        traces: train_path.clone(),
        out: stats_path.clone(),
        csv_dir: Some(dir.join("csv")),
        decode_only: a.decode_only,
    })?;

    let model_path = dir.join("model.bin");
    train_cmd(&TrainArgs {
        config: a.config.clone(),
        traces: train_path,
        stats: stats_path.clone(),
        out: model_path.clone(),
        report: Some(dir.join("train_report.json")),
        hyper: a.hyper.clone(),
        seed: SeedArg { seed },
    })?;

    eval(&EvalArgs {
        config: a.config.clone(),
        traces: test_path.clone(),
        stats: stats_path.clone(),
        model: Some(model_path.clone()),
        oracle: false,
        baseline: true,
        out: dir.join("eval.json"),
    })?;

    compare(&CompareArgs {
        inputs: SimInputs {
            config: a.config.clone(),
            traces: test_path,
            model: Some(model_path),
            stats: Some(stats_path),
            seed: SeedArg { seed },
        },
        policies: a.policies.clone(),
        out_dir: dir.join("sim"),
    })?;
    Ok(())
}
