//! Subcommand implementations.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dola_core::bench::{compare_decode, markdown_table, BenchOptions};
use dola_core::decode::{
    cd_generate, generate, CdPair, DecodeConfig, Generation, PenaltyScope, PenaltyStage, SelectionMode,
};
use dola_core::dola::{buckets_for, CandidateBucket, ContrastConfig, MaskValue, Strategy};
use dola_core::eval::{
    eval_mc, load_mc_jsonl, load_open_jsonl, sweep_mc, sweep_open, two_fold_validate, write_sweep_csv, EvalModel,
    EvalOptions, SweepAxis, ValidationMetric,
};
use dola_core::golden::{check_golden, Golden};
use dola_core::probe::{critical_layer_histogram, default_taps, jsd_matrix, CorpusItem, HistogramOptions};
use dola_core::synthetic::{identity_model, random_model, toy_config};
use dola_core::tokenizer::tokenizer_for_dir;
use dola_core::{load_model, Model, Tokenizer};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::args::*;
use crate::UsageError;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn need<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| usage(format!("{flag} is required")))
}

/// Alternatives: setting one on the command line drops the others from the
/// config file.
const EXCLUSIVE: &[[&str; 2]] = &[["bucket", "layers"], ["prompt", "prompt_file"]];

/// Overlay the flags given on the command line onto the config file.
/// Returns the merged arguments and the merged object for echoing.
fn resolve<T: Serialize + DeserializeOwned>(cli: &T, file: &Map<String, Value>) -> Result<(T, Value)> {
    let mut merged = file.clone();
    let Value::Object(given) = serde_json::to_value(cli)? else {
        bail!("arguments did not serialize to an object");
    };
    for group in EXCLUSIVE {
        if group.iter().any(|k| given.get(*k).is_some_and(|v| !v.is_null())) {
            for k in group {
                merged.remove(*k);
            }
        }
    }
    for (k, v) in given {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    merged.retain(|_, v| !v.is_null());
    let merged = Value::Object(merged);
    let args = serde_json::from_value(merged.clone()).map_err(|e| usage(format!("config file: {e}")))?;
    Ok((args, merged))
}

fn read_config(path: Option<&Path>) -> Result<Map<String, Value>> {
    let Some(path) = path else { return Ok(Map::new()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))? {
        Value::Object(map) => Ok(map),
        _ => Err(usage(format!("{}: expected a JSON object", path.display()))),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("DOLA_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("DOLA_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn env_threads() -> Option<usize> {
    std::env::var("DOLA_THREADS").ok()?.trim().parse().ok()
}

pub fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    let file = read_config(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(a) => cmd_generate(resolve(&a, &file)?),
        Command::ScoreMc(a) => cmd_score_mc(resolve(&a, &file)?),
        Command::Validate(a) => cmd_validate(resolve(&a, &file)?),
        Command::Bench(a) => cmd_bench(resolve(&a, &file)?),
        Command::Probe(ProbeCommand::Jsd(a)) => cmd_probe_jsd(resolve(&a, &file)?),
        Command::Probe(ProbeCommand::Critical(a)) => cmd_probe_critical(resolve(&a, &file)?),
        Command::Sweep(a) => cmd_sweep(resolve(&a, &file)?),
        Command::CheckGolden(a) => cmd_check_golden(resolve(&a, &file)?),
        Command::Toy(a) => cmd_toy(resolve(&a, &file)?),
    }
}

struct Loaded {
    model: Model,
    tokenizer: Box<dyn Tokenizer>,
}

/// A directory holds `weights.bin` and the tokenizer files; a file path
/// takes the tokenizer from its parent directory.
fn load(path: &Path) -> Result<Loaded> {
    let (weights, dir) = if path.is_dir() {
        (path.join("weights.bin"), path.to_path_buf())
    } else {
        let parent = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        (path.to_path_buf(), parent)
    };
    let model = load_model(&weights).with_context(|| format!("loading {}", weights.display()))?;
    let tokenizer = tokenizer_for_dir(&dir).with_context(|| format!("loading tokenizer from {}", dir.display()))?;
    if tokenizer.vocab_size() > model.vocab_size() {
        bail!(
            "tokenizer has {} entries but the model vocabulary is {}",
            tokenizer.vocab_size(),
            model.vocab_size()
        );
    }
    Ok(Loaded { model, tokenizer })
}

fn load_model_arg(m: &ModelArgs) -> Result<Loaded> {
    load(&need(m.model.clone(), "--model")?)
}

/// Build the contrast configuration. Dynamic and random selection default to
/// the highest automatic bucket when neither `--bucket` nor `--layers` is set.
fn contrast_config(a: &ContrastArgs, model: &Model, default: StrategyArg, mask: MaskArg) -> Result<ContrastConfig> {
    if a.bucket.is_some() && a.layers.is_some() {
        return Err(usage("--bucket and --layers are mutually exclusive"));
    }
    let cfg = model.config();
    let bucket = || -> Result<CandidateBucket> {
        if let Some(layers) = &a.layers {
            return CandidateBucket::explicit(layers.iter().copied(), cfg.n_layers, cfg.tied_embeddings)
                .map_err(|e| usage(format!("--layers: {e}")));
        }
        let auto = buckets_for(cfg.n_layers, cfg.tied_embeddings);
        match a.bucket {
            Some(id) => auto.get(id).cloned().ok_or_else(|| {
                usage(format!("--bucket {id}: this model has buckets 0..{}", auto.len()))
            }),
            None => auto.last().cloned().ok_or_else(|| usage("this model has no candidate buckets")),
        }
    };
    let strategy = match a.strategy.unwrap_or(default) {
        StrategyArg::Vanilla => Strategy::Vanilla,
        StrategyArg::Dola => Strategy::DolaDynamic { bucket: bucket()? },
        StrategyArg::DolaStatic => {
            Strategy::DolaStatic { static_layer: need(a.static_layer, "--static-layer (for dola-static)")? }
        }
        StrategyArg::DolaRandom => Strategy::DolaRandom { bucket: bucket()?, rng_seed: a.rng_seed.unwrap_or(0) },
        StrategyArg::Cd => {
            need(a.amateur.as_ref(), "--amateur (for cd)")?;
            Strategy::Cd
        }
    };
    let mut config = ContrastConfig::new(strategy);
    if let Some(alpha) = a.alpha {
        config = config.with_alpha(alpha);
    }
    if let Some(p) = a.post_softmax {
        config = config.with_post_softmax(p.on());
    }
    config = config.with_mask(mask_value(a.mask.unwrap_or(mask)));
    config.validate(cfg.n_layers, cfg.tied_embeddings).map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn mask_value(m: MaskArg) -> MaskValue {
    match m {
        MaskArg::NegInf => MaskValue::NegInfinity,
        MaskArg::Finite => MaskValue::Finite,
    }
}

/// Decoding defaults: no repetition penalty for vanilla decoding, 1.2
/// otherwise. Without `--max-new-tokens` the length is capped by the
/// remaining context.
fn decode_config(a: &DecodeArgs, contrast: &ContrastConfig, room: usize, stop_id: Option<u32>) -> DecodeConfig {
    let theta = a.theta.unwrap_or(if contrast.strategy == Strategy::Vanilla { 1.0 } else { 1.2 });
    let mut d = DecodeConfig::greedy(a.max_new_tokens.unwrap_or_else(|| DecodeConfig::default().max_new_tokens.min(room)))
        .with_penalty(theta);
    if let Some(m) = a.mode {
        d.mode = match m {
            ModeArg::Greedy => SelectionMode::Greedy,
            ModeArg::Sample => SelectionMode::Sample,
        };
    }
    if let Some(t) = a.temperature {
        d.temperature = t;
    }
    d.seed = a.seed.unwrap_or(0);
    d.stop_strings = a.stop.clone().unwrap_or_default();
    d.stop_token_ids = stop_id.into_iter().collect();
    if let Some(s) = a.penalty_scope {
        d.penalty_scope = match s {
            ScopeArg::PromptAndGenerated => PenaltyScope::PromptAndGenerated,
            ScopeArg::GeneratedOnly => PenaltyScope::GeneratedOnly,
        };
    }
    if let Some(s) = a.penalty_stage {
        d.penalty_stage = match s {
            StageArg::Contrasted => PenaltyStage::Contrasted,
            StageArg::MatureLogits => PenaltyStage::MatureLogits,
        };
    }
    d
}

/// Every JSON report carries the merged flags, the resolved configs and the
/// seed next to its result.
fn report(command: &str, flags: &Value, effective: Value, seed: u64, result: impl Serialize) -> Result<Value> {
    Ok(json!({
        "command": command,
        "flags": flags,
        "effective": effective,
        "seed": seed,
        "result": serde_json::to_value(result)?,
    }))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn emit_json(out: Option<&Path>, value: &Value) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

/// CSV tables go to `out` (or stdout) with the JSON summary beside them in
/// `<out>.json`.
fn emit_csv(out: Option<&Path>, summary: &Value, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write(&mut std::io::BufWriter::new(f))?;
            let mut side = p.as_os_str().to_owned();
            side.push(".json");
            write_json(Path::new(&side), summary)
        }
        None => write(&mut std::io::stdout().lock()),
    }
}

fn cmd_generate((a, flags): (GenerateArgs, Value)) -> Result<()> {
    let Loaded { model, tokenizer } = load_model_arg(&a.model)?;
    let contrast = contrast_config(&a.contrast, &model, StrategyArg::Dola, MaskArg::NegInf)?;
    let text = match (&a.prompt, &a.prompt_file) {
        (Some(_), Some(_)) => return Err(usage("--prompt and --prompt-file are mutually exclusive")),
        (Some(p), None) => p.clone(),
        (None, Some(f)) => std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?,
        (None, None) => return Err(usage("--prompt or --prompt-file is required")),
    };
    let prompt = tokenizer.encode(&text)?;
    let room = model.config().max_seq_len.saturating_sub(prompt.len()).max(1);
    let mut decode = decode_config(&a.decode, &contrast, room, tokenizer.eos());
    decode.record_logits = a.record_logits.unwrap_or(false);
    let out: Generation = if contrast.strategy == Strategy::Cd {
        let amateur = load(a.contrast.amateur.as_deref().expect("checked in contrast_config"))?;
        let pair = CdPair::new(&model, tokenizer.as_ref(), &amateur.model, amateur.tokenizer.as_ref())?;
        cd_generate(&pair, tokenizer.as_ref(), contrast.alpha, &decode, &prompt)?
    } else {
        generate(&model, tokenizer.as_ref(), &contrast, &decode, &prompt)?
    };
    if let Some(path) = &a.trace {
        out.trace.write_jsonl(path).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", out.text);
    if let Some(path) = &a.out {
        let result = json!({
            "text": out.text,
            "tokens": out.tokens,
            "premature_layers": out.trace.premature_layers(),
        });
        let effective = json!({ "contrast": contrast, "decode": decode });
        write_json(path, &report("generate", &flags, effective, decode.seed, result)?)?;
    }
    Ok(())
}

fn eval_options(length_normalize: Option<OnOff>, workers: Option<usize>, mask: MaskValue) -> EvalOptions {
    EvalOptions {
        length_normalize: length_normalize.is_some_and(OnOff::on),
        workers: workers.unwrap_or(0),
        mask,
    }
}

fn cmd_score_mc((a, flags): (ScoreMcArgs, Value)) -> Result<()> {
    let Loaded { model, tokenizer } = load_model_arg(&a.model)?;
    let contrast = contrast_config(&a.contrast, &model, StrategyArg::Dola, MaskArg::Finite)?;
    let data = load_mc_jsonl(need(a.data.as_ref(), "--data")?)?;
    let options = eval_options(a.length_normalize, a.workers, contrast.mask);
    let amateur = match &a.contrast.amateur {
        Some(p) if contrast.strategy == Strategy::Cd => Some(load(p)?),
        _ => None,
    };
    let pair = match &amateur {
        Some(am) => Some(CdPair::new(&model, tokenizer.as_ref(), &am.model, am.tokenizer.as_ref())?),
        None => None,
    };
    let target: EvalModel<'_> = match &pair {
        Some(p) => p.into(),
        None => (&model).into(),
    };
    let r = eval_mc(&data, target, tokenizer.as_ref(), &contrast, options)?;
    eprintln!(
        "mc1 {:.4}  mc2 {:.4}  mc3 {:.4}  n {}",
        r.metrics.mc1, r.metrics.mc2, r.metrics.mc3, r.metrics.n
    );
    let seed = a.contrast.rng_seed.unwrap_or(0);
    let effective = json!({ "contrast": contrast, "options": options });
    emit_json(a.out.as_deref(), &report("score-mc", &flags, effective, seed, r)?)
}

fn cmd_validate((a, flags): (ValidateArgs, Value)) -> Result<()> {
    let Loaded { model, tokenizer } = load_model_arg(&a.model)?;
    let data = load_mc_jsonl(need(a.data.as_ref(), "--data")?)?;
    let cfg = model.config();
    let buckets = buckets_for(cfg.n_layers, cfg.tied_embeddings);
    let mut base = ContrastConfig::vanilla();
    if let Some(alpha) = a.alpha {
        base = base.with_alpha(alpha);
    }
    if let Some(p) = a.post_softmax {
        base = base.with_post_softmax(p.on());
    }
    let metric = match a.metric.unwrap_or(MetricArg::Mc3) {
        MetricArg::Mc3 => ValidationMetric::Mc3,
        MetricArg::Accuracy => ValidationMetric::Accuracy,
    };
    let options = eval_options(a.length_normalize, a.workers, MaskValue::Finite);
    let r = two_fold_validate(&data, (&model).into(), tokenizer.as_ref(), &buckets, &base, metric, options)?;
    let chosen = &buckets[r.selection.final_bucket];
    eprintln!("final bucket {} layers {:?}", chosen.id, chosen.layers);
    let effective = json!({ "base": base, "buckets": buckets, "metric": metric, "options": options });
    emit_json(a.out.as_deref(), &report("validate", &flags, effective, 0, r)?)
}

fn cmd_bench((a, flags): (BenchArgs, Value)) -> Result<()> {
    let Loaded { model, tokenizer } = load_model_arg(&a.model)?;
    let candidate = contrast_config(&a.contrast, &model, StrategyArg::Dola, MaskArg::NegInf)?;
    if candidate.strategy == Strategy::Cd {
        return Err(usage("bench measures single-model strategies; cd is not supported"));
    }
    let data = load_open_jsonl(need(a.data.as_ref(), "--data")?)?;
    let prompts = data.iter().map(|ex| tokenizer.encode(&ex.prompt)).collect::<Result<Vec<_>, _>>()?;
    let defaults = BenchOptions::default();
    let options = BenchOptions {
        runs: a.runs.unwrap_or(defaults.runs),
        warmup: a.warmup.unwrap_or(defaults.warmup),
        threads: a.threads.or_else(env_threads).unwrap_or(defaults.threads),
        repetition_penalty: a.theta.unwrap_or(defaults.repetition_penalty),
    };
    let forced = a.new_tokens.unwrap_or(50);
    let c = compare_decode(&model, tokenizer.as_ref(), &ContrastConfig::vanilla(), &candidate, &prompts, forced, options)?;
    println!("{}", markdown_table(&[&c.baseline, &c.candidate]));
    let effective = json!({ "candidate": candidate, "options": options, "forced_new_tokens": forced });
    let value = report("bench", &flags, effective, 0, &c)?;
    if let Some(out) = &a.out {
        write_json(out, &value)?;
    }
    Ok(())
}

fn cmd_probe_jsd((a, flags): (ProbeJsdArgs, Value)) -> Result<()> {
    let Loaded { model, tokenizer } = load_model_arg(&a.model)?;
    let mut prompt: Vec<u32> = tokenizer.bos().into_iter().collect();
    prompt.extend(tokenizer.encode(&need(a.prompt.clone(), "--prompt")?)?);
    let targets = tokenizer.encode(&need(a.target.clone(), "--target")?)?;
    if targets.is_empty() {
        return Err(usage("--target encodes to no tokens"));
    }
    let taps = a.taps.clone().unwrap_or_else(|| default_taps(&model));
    let m = jsd_matrix(&model, tokenizer.as_ref(), &prompt, &targets, &taps)?;
    let effective = json!({ "taps": m.taps, "prompt_tokens": prompt, "target_tokens": targets });
    let summary = report("probe jsd", &flags, effective, 0, json!({ "shape": m.shape() }))?;
    emit_csv(a.out.as_deref(), &summary, |w| Ok(m.write_csv(w)?))
}

fn cmd_probe_critical((a, flags): (ProbeCriticalArgs, Value)) -> Result<()> {
    let Loaded { model, tokenizer } = load_model_arg(&a.model)?;
    let path = need(a.corpus.clone(), "--corpus")?;
    let reader = BufReader::new(File::open(&path).with_context(|| format!("opening {}", path.display()))?);
    let mut corpus = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: CorpusItem =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        corpus.push(item.resolve(tokenizer.as_ref())?);
    }
    let taps = a.taps.clone().unwrap_or_else(|| default_taps(&model));
    let options = HistogramOptions { prepend_bos: !a.no_bos.unwrap_or(false), workers: a.workers.unwrap_or(0) };
    let h = critical_layer_histogram(&model, tokenizer.as_ref(), &corpus, &taps, options)?;
    let effective = json!({ "taps": taps, "options": options });
    let summary = report("probe critical", &flags, effective, 0, &h)?;
    emit_csv(a.out.as_deref(), &summary, |w| Ok(h.write_csv(w)?))
}

fn cmd_sweep((a, flags): (SweepArgs, Value)) -> Result<()> {
    let Loaded { model, tokenizer } = load_model_arg(&a.model)?;
    let axis = match need(a.axis, "--axis")? {
        AxisArg::Theta => SweepAxis::Theta,
        AxisArg::Alpha => SweepAxis::Alpha,
        AxisArg::StaticLayer => SweepAxis::StaticLayer,
    };
    let values = need(a.values.clone(), "--values")?;
    let task = a.task.unwrap_or(TaskArg::Mc);
    let default_strategy = if axis == SweepAxis::StaticLayer { StrategyArg::DolaStatic } else { StrategyArg::Dola };
    let mut contrast_args = a.contrast.clone();
    if axis == SweepAxis::StaticLayer && contrast_args.static_layer.is_none() {
        // Placeholder; every row overrides it.
        contrast_args.static_layer = values.first().map(|&v| v as usize);
    }
    let mask = if task == TaskArg::Mc { MaskArg::Finite } else { MaskArg::NegInf };
    let base = contrast_config(&contrast_args, &model, default_strategy, mask)?;
    if base.strategy == Strategy::Cd {
        return Err(usage("sweep supports single-model strategies"));
    }
    let data = need(a.data.as_ref(), "--data")?;
    let (rows, effective, seed) = match task {
        TaskArg::Mc => {
            let options = eval_options(a.length_normalize, a.workers, base.mask);
            let d = load_mc_jsonl(data)?;
            let rows = sweep_mc(&d, (&model).into(), tokenizer.as_ref(), &base, axis, &values, options)?;
            (rows, json!({ "base": base, "options": options }), a.contrast.rng_seed.unwrap_or(0))
        }
        TaskArg::Open => {
            let d = load_open_jsonl(data)?;
            let room = model.config().max_seq_len / 2;
            let decode = decode_config(&a.decode, &base, room, tokenizer.eos());
            let rows = sweep_open(
                &d,
                (&model).into(),
                tokenizer.as_ref(),
                &base,
                &decode,
                axis,
                &values,
                a.workers.unwrap_or(0),
            )?;
            (rows, json!({ "base": base, "decode": decode }), decode.seed)
        }
    };
    let summary = report("sweep", &flags, effective, seed, &rows)?;
    emit_csv(a.out.as_deref(), &summary, |w| Ok(write_sweep_csv(&rows, w)?))
}

fn cmd_check_golden((a, flags): (CheckGoldenArgs, Value)) -> Result<()> {
    let path = need(a.model.model.clone(), "--model")?;
    let Loaded { model, tokenizer } = load(&path)?;
    let golden_path = a.golden.clone().unwrap_or_else(|| {
        if path.is_dir() { path.join("golden.json") } else { path.with_file_name("golden.json") }
    });
    let golden = Golden::load(&golden_path).with_context(|| format!("loading {}", golden_path.display()))?;
    let r = check_golden(&model, tokenizer.as_ref(), &golden)?;
    let passed = r.passed();
    emit_json(None, &report("check-golden", &flags, json!({ "golden": golden_path }), 0, &r)?)?;
    if !passed {
        bail!("model does not match {}", golden_path.display());
    }
    Ok(())
}

fn cmd_toy((a, _flags): (ToyArgs, Value)) -> Result<()> {
    let dir = need(a.out.clone(), "--out")?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let seed = a.seed.unwrap_or(0);
    let model = if a.identity.unwrap_or(false) {
        identity_model(toy_config(), seed)?
    } else {
        random_model(toy_config(), seed)?
    };
    let path = dir.join("weights.bin");
    model.save(&path)?;
    eprintln!("wrote {} ({} parameters)", path.display(), model.parameter_count());
    Ok(())
}
