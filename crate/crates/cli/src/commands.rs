use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use moe_prefetch::estimator::{
    evaluate, train_estimator as train, write_curve_csv, Dataset, Estimator, EstimatorConfig, InputKind, TrainConfig,
};
use moe_prefetch::metrics::{fmt6, write_text, Evaluator};
use moe_prefetch::model::trace::{byte_tokens, random_tokens};
use moe_prefetch::model::{build_model, run_trace, Model, ModelConfig, TraceBundle, TraceField, TraceWriter};
use moe_prefetch::offload::{
    analytic_improvement, boundary_term, run_offloaded_decode, simulate_on_demand, simulate_prefetch, summary_csv,
    ExecConfig, ExecMode, ExecReport, ScheduleReport, TimingSpec,
};
use moe_prefetch::speculation::{accumulate_default_vectors, DefaultVectorTable, HybridMap, Predictor, PredictorKind};

use crate::manifest::Recorder;
use crate::{
    DefaultVectorsArgs, E2eArgs, E2eMode, GenModelArgs, Globals, InputArg, PredictorArgs, SimMode, SimulateArgs,
    SpeculateArgs, TraceArgs, TrainArgs, UsageError,
};

fn seed(g: &Globals) -> u64 {
    g.seed.unwrap_or(0)
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model bundle {}", path.display()))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn gen_model(g: &Globals, a: &GenModelArgs) -> Result<()> {
    let mut rec = Recorder::new("gen-model", a, &a.out, g.threads)?;
    let config = match (&a.preset, &a.config) {
        (Some(name), _) => ModelConfig::preset(name, seed(g))?,
        (None, Some(path)) => {
            rec.input("config", path);
            let mut c: ModelConfig =
                serde_json::from_slice(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)
                    .map_err(|e| UsageError(format!("model config {}: {e}", path.display())))?;
            if let Some(s) = g.seed {
                c.seed = s;
            }
            c
        }
        (None, None) => bail!(UsageError("one of --preset or --config is required".into())),
    };
    config.validate()?;
    rec.seed("model", config.seed);
    rec.resolved(&config)?;
    build_model(config)?.save(&a.out)?;
    rec.finish()?;
    Ok(())
}

pub fn trace(g: &Globals, a: &TraceArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let mut rec = Recorder::new("trace", a, &a.out, g.threads)?;
    rec.input("model", &a.model);
    let tokens = match (&a.corpus, a.random_tokens) {
        (Some(path), _) => {
            rec.input("corpus", path);
            byte_tokens(&fs::read(path).with_context(|| format!("corpus unreadable: {}", path.display()))?)
        }
        (None, Some(n)) => {
            rec.seed("tokens", seed(g));
            random_tokens(seed(g), n, model.config.vocab)
        }
        (None, None) => bail!(UsageError("one of --corpus or --random-tokens is required".into())),
    };
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= model.config.vocab) {
        bail!(UsageError(format!(
            "token {t} outside the model vocabulary ({})",
            model.config.vocab
        )));
    }
    let fields = match &a.fields {
        None => TraceField::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| TraceField::parse(n))
            .collect::<moe_prefetch::Result<_>>()?,
    };
    let mut writer = TraceWriter::create(&a.out, &model.config, a.window, &fields)?;
    run_trace(&model, &tokens, a.window, &mut writer)?;
    let manifest = writer.finish()?;
    rec.resolved(&manifest)?;
    rec.finish()?;
    Ok(())
}

pub fn default_vectors(g: &Globals, a: &DefaultVectorsArgs) -> Result<()> {
    let bundle = TraceBundle::open(&a.trace)?;
    let mut rec = Recorder::new("default-vectors", a, &a.out, g.threads)?;
    rec.input("trace", &a.trace);
    let table = accumulate_default_vectors(&bundle)?;
    table.save(&a.out)?;
    rec.resolved(&table.shape())?;
    rec.finish()?;
    Ok(())
}

fn load_predictor(model: &Model, a: &PredictorArgs, rec: &mut Recorder) -> Result<Predictor> {
    let kind = PredictorKind::parse(&a.predictor)?;
    let table = match &a.default_vectors {
        Some(p) => {
            rec.input("default_vectors", p);
            Some(Arc::new(
                DefaultVectorTable::load(p).with_context(|| format!("loading {}", p.display()))?,
            ))
        }
        None => None,
    };
    let estimator = match &a.estimator {
        Some(p) => {
            rec.input("estimator", p);
            Some(Arc::new(
                Estimator::load(p).with_context(|| format!("loading {}", p.display()))?,
            ))
        }
        None => None,
    };
    let hybrid = match &a.hybrid_map {
        Some(p) => {
            rec.input("hybrid_map", p);
            Some(HybridMap::load(p).with_context(|| format!("loading {}", p.display()))?)
        }
        None => None,
    };
    Ok(Predictor::new(kind, model, table, estimator, hybrid)?)
}

pub fn speculate(g: &Globals, a: &SpeculateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let bundle = TraceBundle::open(&a.trace)?;
    if bundle.config() != &model.config {
        bail!(UsageError("trace was recorded with a different model config".into()));
    }
    let mut rec = Recorder::new("speculate", a, &a.out, g.threads)?;
    rec.input("model", &a.model);
    rec.input("trace", &a.trace);
    let dv = a
        .predictor
        .default_vectors
        .as_ref()
        .ok_or_else(|| UsageError("--default-vectors is required (drift.csv needs it)".into()))?;
    let predictor = load_predictor(&model, &a.predictor, &mut rec)?;
    let table = DefaultVectorTable::load(dv)?;
    if table.shape() != (model.config.layers, model.config.experts, model.config.hidden) {
        bail!(UsageError("default vectors do not match the model".into()));
    }
    bundle.require(&[TraceField::S, TraceField::R, TraceField::Ids, TraceField::Gates])?;
    let mut ev = Evaluator::new(&model, Some(&table));
    ev.track(&predictor, None);
    bundle.replay(&mut ev)?;
    write_text(a.out.join("hit_rate.csv"), &ev.hit_rate_csv())?;
    write_text(a.out.join("rank_align.csv"), &ev.rank_align_csv())?;
    write_text(a.out.join("drift.csv"), &ev.drift_csv())?;
    for (name, layers) in ev.reports() {
        let n = layers.len().max(1) as f64;
        let mean = layers.iter().map(|r| r.recall_at_k.mean).sum::<f64>() / n;
        println!(
            "{name}: mean recall@k {} over {} source layers",
            fmt6(mean),
            layers.len()
        );
    }
    rec.resolved(&serde_json::json!({ "predictor": predictor.kind().name() }))?;
    rec.finish()?;
    Ok(())
}

pub fn train_estimator(g: &Globals, a: &TrainArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let bundle = TraceBundle::open(&a.trace)?;
    if bundle.config() != &model.config {
        bail!(UsageError("trace was recorded with a different model config".into()));
    }
    let mut rec = Recorder::new("train-estimator", a, &a.out, g.threads)?;
    rec.input("model", &a.model);
    rec.input("trace", &a.trace);
    let mut hp = match &a.config {
        Some(p) => {
            rec.input("config", p);
            serde_json::from_slice::<TrainConfig>(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
                .map_err(|e| UsageError(format!("training config {}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.steps {
        hp.steps = v;
    }
    if let Some(v) = a.lr {
        hp.lr = v;
    }
    if let Some(v) = a.batch {
        hp.batch = v;
    }
    if let Some(v) = a.eval_every {
        hp.eval_every = v;
    }
    hp.seed = seed(g);
    let table = match &a.default_vectors {
        Some(p) => {
            rec.input("default_vectors", p);
            Some(DefaultVectorTable::load(p)?)
        }
        None => None,
    };
    let input = match a.input {
        InputArg::Quasi => InputKind::Quasi,
        InputArg::NextRouterInput => InputKind::NextRouterInput,
    };
    let data = Dataset::from_trace(&bundle, &model, table.as_ref(), input)?;
    let (tr, val) = data.split_90_10();
    let mut cfg = EstimatorConfig::for_model(&model, seed(g));
    cfg.m = a.m;
    cfg.n = a.n;
    cfg.validate()?;
    rec.seed("estimator", seed(g));
    let (est, curve) = train(&cfg, &tr, &val, &hp, model.config.gating)?;
    est.save(&a.out)?;
    write_curve_csv(a.out.join("curve.csv"), &curve)?;
    let r = evaluate(&est, &val, model.config.gating)?;
    let first = curve.first().map_or(0.0, |p| p.val_hit_rate);
    println!(
        "val recall@k {} (step 0: {}), val KL {}, {} params",
        fmt6(r.mean_recall),
        fmt6(first),
        fmt6(r.mean_kl),
        cfg.param_count()
    );
    rec.resolved(&serde_json::json!({ "estimator": cfg, "train": hp, "input": input }))?;
    rec.finish()?;
    Ok(())
}

fn resolve_timing(a: &SimulateArgs) -> Result<TimingSpec> {
    let path = Path::new(&a.timing);
    if path.is_file() {
        let spec = TimingSpec::load(path).map_err(|e| UsageError(format!("timing file {}: {e}", path.display())))?;
        // A geometry file may leave k to the command line.
        return Ok(match (spec, a.top_k) {
            (TimingSpec::Geometry(mut gt), Some(k)) => {
                gt.top_k = k;
                TimingSpec::Geometry(gt)
            }
            (s, _) => s,
        });
    }
    Ok(TimingSpec::preset(&a.timing, a.top_k)?)
}

fn summary_row(mode: &str, r: &ScheduleReport) -> String {
    let (c, p, i) = r.breakdown.fractions();
    format!("{mode},{},{},{},{}\n", fmt6(r.tpot), fmt6(c), fmt6(p), fmt6(i))
}

pub fn simulate(g: &Globals, a: &SimulateArgs) -> Result<()> {
    let spec = resolve_timing(a)?;
    let tm = spec.resolve()?;
    let mut rec = Recorder::new("simulate", a, &a.out, g.threads)?;
    rec.resolved(&tm)?;
    let mut csv = String::from("mode,tpot_us,compute_frac,copy_frac,idle_frac\n");
    let run_ond = matches!(a.mode, SimMode::OnDemand | SimMode::Both);
    let run_pf = matches!(a.mode, SimMode::Prefetch | SimMode::Both);
    let ond = if run_ond { Some(simulate_on_demand(&tm)?) } else { None };
    let pf = if run_pf { Some(simulate_prefetch(&tm)?) } else { None };
    for (mode, r) in [("on_demand", &ond), ("prefetch", &pf)] {
        if let Some(r) = r {
            csv.push_str(&summary_row(mode, r));
            write_json(&a.out.join(format!("timeline_{mode}.json")), &r.events)?;
            let (c, p, i) = r.breakdown.fractions();
            println!(
                "{mode}: tpot {} us, compute {}, copy {}, idle {}",
                fmt6(r.tpot),
                fmt6(c),
                fmt6(p),
                fmt6(i)
            );
        }
    }
    let analytic = analytic_improvement(&tm);
    if a.mode != SimMode::Analytic {
        write_text(a.out.join("summary.csv"), &csv)?;
    }
    let mut analytic_json = serde_json::json!({
        "delta_t_analytic_us": analytic,
        "boundary_term_us": boundary_term(&tm),
    });
    if let (Some(o), Some(p)) = (&ond, &pf) {
        if p.tpot > o.tpot {
            bail!(moe_prefetch::Error::Invariant(format!(
                "prefetch tpot {} exceeds on-demand tpot {}",
                p.tpot, o.tpot
            )));
        }
        let sim = o.tpot - p.tpot;
        println!(
            "delta_t sim {} us vs analytic {} us (speedup {})",
            fmt6(sim),
            fmt6(analytic),
            fmt6(o.tpot / p.tpot)
        );
        analytic_json["delta_t_sim_us"] = sim.into();
        analytic_json["speedup_sim"] = (o.tpot / p.tpot).into();
    }
    if a.mode == SimMode::Analytic {
        println!("delta_t analytic {} us", fmt6(analytic));
    }
    write_json(&a.out.join("analytic.json"), &analytic_json)?;
    rec.finish()?;
    Ok(())
}

fn overlap_credit(ond: &ExecReport, pf: &ExecReport, layers: usize) -> f64 {
    let copy = ond.mean_layer_copy_us(layers);
    let comp = pf.mean_layer_compute_us(layers);
    copy.iter().zip(&comp).map(|(c, p)| c.min(*p)).sum()
}

pub fn e2e(g: &Globals, a: &E2eArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let mut rec = Recorder::new("e2e", a, &a.out, g.threads)?;
    rec.input("model", &a.model);
    let predictor = load_predictor(&model, &a.predictor, &mut rec)?;
    let prompt = byte_tokens(a.prompt.as_bytes());
    if prompt.is_empty() {
        bail!(UsageError("--prompt must not be empty".into()));
    }
    if let Some(&t) = prompt.iter().find(|&&t| t as usize >= model.config.vocab) {
        bail!(UsageError(format!("prompt byte {t} outside the model vocabulary")));
    }
    let latency = Duration::from_micros(a.copy_latency_us);
    let modes: &[ExecMode] = match a.mode {
        E2eMode::OnDemand => &[ExecMode::OnDemand],
        E2eMode::Prefetch => &[ExecMode::Prefetch],
        E2eMode::Both => &[ExecMode::OnDemand, ExecMode::Prefetch],
    };
    let mut reports = Vec::new();
    for &mode in modes {
        let mut cfg = ExecConfig::new(mode, latency);
        cfg.per_expert = a.per_expert;
        let r = run_offloaded_decode(&model, &prompt, a.new_tokens, Some(&predictor), &cfg)?;
        r.check_invariants()?;
        write_json(&a.out.join(format!("timeline_{}.json", mode.name())), &r.events)?;
        let text: String = r
            .tokens
            .iter()
            .map(|&t| char::from_u32(t).filter(|c| !c.is_control()).unwrap_or('.'))
            .collect();
        println!("{}: tokens {:?}", mode.name(), r.tokens);
        println!("{}: text {text:?}", mode.name());
        let per: Vec<String> = r.token_us().iter().map(|&x| fmt6(x)).collect();
        println!("{}: per-token us [{}]", mode.name(), per.join(", "));
        let (c, p, i) = r.breakdown().fractions();
        println!(
            "{}: mean tpot {} us, compute {}, copy {}, idle {}",
            mode.name(),
            fmt6(r.mean_tpot_us()),
            fmt6(c),
            fmt6(p),
            fmt6(i)
        );
        reports.push(r);
    }
    let refs: Vec<&ExecReport> = reports.iter().collect();
    write_text(a.out.join("summary.csv"), &summary_csv(&refs))?;
    let mut tokens = serde_json::json!({
        "prompt": prompt,
        "predictor": predictor.kind().name(),
    });
    for r in &reports {
        tokens[r.mode.name()] = serde_json::json!({ "tokens": r.tokens, "per_token_us": r.token_us() });
    }
    if let [ond, pf] = reports.as_slice() {
        let credit = overlap_credit(ond, pf, model.config.layers);
        let saved = ond.mean_tpot_us() - pf.mean_tpot_us();
        println!(
            "overlap: saved {} us per token, sum of min(copy, compute) {} us",
            fmt6(saved),
            fmt6(credit)
        );
        tokens["overlap"] = serde_json::json!({ "saved_us": saved, "sum_min_copy_compute_us": credit });
    }
    write_json(&a.out.join("tokens.json"), &tokens)?;
    rec.resolved(&serde_json::json!({ "copy_latency_us": a.copy_latency_us, "new_tokens": a.new_tokens }))?;
    rec.finish()?;
    Ok(())
}
