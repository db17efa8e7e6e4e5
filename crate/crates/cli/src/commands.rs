use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde_json::json;
use unguide_core::base_train::train_base;
use unguide_core::checkpoint::{load_checkpoint, save_checkpoint, Artifact};
use unguide_core::config::RunConfig;
use unguide_core::diffusion::{sample, CfgParams, NoiseSchedule};
use unguide_core::eval::{norm_table_report, run_erasure_eval, NormGrid};
use unguide_core::lora::{merge_adapters, AdapterSet, TargetMode};
use unguide_core::model::DenoiserModel;
use unguide_core::plot::emit_plot;
use unguide_core::report::{metrics_csv, norms_csv, sample_rows, samples_csv};
use unguide_core::rng::{derive_seed, stream};
use unguide_core::unguidance::{generate_unguided, probe, sample_with_weight};
use unguide_core::unlearn::{train_lora, UnlearnConfig};
use unguide_core::vocab::{ConceptId, ConceptVocabulary};

use crate::{Cli, Command, MixArgs, NormTableArgs, ProbeArgs, SampleArgs, SampleMode, Shared, TargetModeArg, TrainLoraArgs};

pub fn run(cli: Cli) -> Result<()> {
    let shared = &cli.shared;
    match cli.command {
        Command::TrainBase => train_base_cmd(shared),
        Command::TrainLora(args) => train_lora_cmd(shared, &args),
        Command::Probe(args) => probe_cmd(shared, &args),
        Command::Sample(args) => sample_cmd(shared, &args),
        Command::Eval(args) => eval_cmd(shared, &args.concept, args.n),
        Command::Mix(args) => mix_cmd(shared, &args),
        Command::NormTable(args) => norm_table_cmd(shared, &args),
        Command::Plot(args) => {
            let out = required(&shared.out, "--out")?;
            emit_plot(&args.input, out).with_context(|| format!("plotting {}", args.input.display()))
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("{flag} is required for this command"))
}

/// Everything a command needs from the configuration.
struct Env {
    cfg: RunConfig,
    vocab: ConceptVocabulary,
    sched: NoiseSchedule,
}

impl Env {
    fn concept(&self, token: &str) -> Result<ConceptId> {
        Ok(self.vocab.resolve(token)?)
    }
}

/// `--config` wins; otherwise the snapshot stored with the base model;
/// otherwise the defaults. `--seed` then reseeds.
fn environment(shared: &Shared, snapshot: Option<&serde_json::Value>) -> Result<Env> {
    let mut cfg = if let Some(path) = &shared.config {
        RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?
    } else if let Some(run) = snapshot.and_then(|s| s.get("run")) {
        serde_json::from_value(run.clone()).context("config snapshot in the base checkpoint")?
    } else {
        RunConfig::default()
    };
    if let Some(seed) = shared.seed {
        cfg.reseed(seed);
    }
    cfg.validate()?;
    let vocab = cfg.vocabulary()?;
    let sched = cfg.schedule()?;
    Ok(Env { cfg, vocab, sched })
}

fn load_base(shared: &Shared) -> Result<(DenoiserModel, Env)> {
    let path = required(&shared.base, "--base")?;
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let env = environment(shared, Some(&ckpt.config))?;
    let model = ckpt.into_model()?;
    if model.n_concepts() != env.vocab.len() {
        bail!("base model has {} concepts but the configuration describes {}", model.n_concepts(), env.vocab.len());
    }
    Ok((model, env))
}

struct LoadedAdapter {
    set: AdapterSet,
    erased: Vec<ConceptId>,
    snapshot: serde_json::Value,
}

fn load_adapter(path: &Path) -> Result<LoadedAdapter> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let erased = match ckpt.config.get("erased") {
        Some(v) => serde_json::from_value(v.clone()).context("erased list in the adapter checkpoint")?,
        None => Vec::new(),
    };
    let snapshot = ckpt.config.clone();
    Ok(LoadedAdapter { set: ckpt.into_adapters()?, erased, snapshot })
}

fn single_adapter(shared: &Shared) -> Result<(AdapterSet, Vec<ConceptId>)> {
    match shared.lora.as_slice() {
        [one] => load_adapter(one).map(|a| (a.set, a.erased)),
        [] => bail!("--lora is required for this command"),
        _ => bail!("this command takes exactly one --lora; combine adapters with `mix` first"),
    }
}

fn adapter_snapshot(cfg: &RunConfig, erased: &[ConceptId]) -> serde_json::Value {
    json!({ "run": cfg, "erased": erased })
}

/// Write to `--out`, or stdout when it is absent.
fn emit(out: &Option<PathBuf>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => unguide_core::checkpoint::write_atomic(path, bytes).with_context(|| format!("writing {}", path.display())),
        None => Ok(std::io::stdout().write_all(bytes)?),
    }
}

fn train_base_cmd(shared: &Shared) -> Result<()> {
    let out = required(&shared.out, "--out")?;
    let env = environment(shared, None)?;
    let data = env.cfg.dataset(&env.vocab)?;
    let mut model = env.cfg.init_model()?;
    let report = train_base(&mut model, &data, &env.vocab, &env.sched, &env.cfg.base_train)?;
    let running = report.running_loss(100).unwrap_or(f32::NAN);
    info!("base training finished, running loss {running:.4}");
    save_checkpoint(out, &Artifact::Model(model), &json!({ "run": env.cfg }))?;
    println!("steps={} running_loss={running:.4} out={}", env.cfg.base_train.steps, out.display());
    Ok(())
}

fn train_lora_cmd(shared: &Shared, args: &TrainLoraArgs) -> Result<()> {
    let out = required(&shared.out, "--out")?;
    let (base, mut env) = load_base(shared)?;
    let mut u = env.cfg.unlearn.clone();
    if args.target_mode == Some(TargetModeArg::Noncond) {
        u = UnlearnConfig { seed: u.seed, ..UnlearnConfig::explicit_content(u.target, u.mapping) };
    }
    if let Some(c) = &args.concept {
        u.target = env.concept(c)?;
        u.mapping = env.vocab.mapping_for(u.target).unwrap_or(u.mapping);
    }
    if let Some(m) = &args.mapping {
        u.mapping = env.concept(m)?;
    }
    if let Some(v) = args.alpha {
        u.start_guidance = v;
    }
    if let Some(v) = args.gamma {
        u.negative_guidance = v;
    }
    if let Some(v) = args.iters {
        u.iterations = v;
    }
    if let Some(v) = args.lr {
        u.lr = v;
    }
    if let Some(mode) = args.target_mode {
        u.target_mode = match mode {
            TargetModeArg::Cond => TargetMode::Cond,
            TargetModeArg::Noncond => TargetMode::Noncond,
        };
    }
    env.cfg.unlearn = u;
    env.cfg.validate()?;
    let (adapter, report) = train_lora(&base, &env.vocab, &env.sched, &env.cfg.unlearn)?;
    let target = env.cfg.unlearn.target;
    save_checkpoint(out, &Artifact::Adapters(adapter.into()), &adapter_snapshot(&env.cfg, &[target]))?;
    println!(
        "concept={} mapping={} iterations={} running_loss={:.4} out={}",
        env.vocab.get(target)?.name,
        env.vocab.get(env.cfg.unlearn.mapping)?.name,
        env.cfg.unlearn.iterations,
        report.running_loss(50).unwrap_or(f32::NAN),
        out.display()
    );
    Ok(())
}

fn probe_cmd(shared: &Shared, args: &ProbeArgs) -> Result<()> {
    let (base, mut env) = load_base(shared)?;
    let (set, _) = single_adapter(shared)?;
    let adapted = base.with_adapters(set)?;
    let p = &mut env.cfg.probe;
    if let Some(v) = args.trials {
        p.trials = v;
    }
    if let Some(v) = args.probe_steps {
        p.probe_steps = v;
    }
    if let Some(v) = args.w_erase {
        p.w_erase = v;
    }
    if let Some(v) = args.w_retain {
        p.w_retain = v;
    }
    let c = env.concept(&args.concept)?;
    let d = probe(&base, &adapted, &env.vocab, c, &env.cfg.probe, &env.sched)?;
    println!(
        "concept={} mean_c={:.6} mean_c0={:.6} route={} w={}",
        env.vocab.get(c)?.name,
        d.mean_c,
        d.mean_c0,
        d.route,
        d.weight
    );
    Ok(())
}

fn sample_cmd(shared: &Shared, args: &SampleArgs) -> Result<()> {
    let (base, env) = load_base(shared)?;
    let c = env.concept(&args.concept)?;
    let n = args.n.unwrap_or(env.cfg.eval.n_per_prompt);
    let cfg = CfgParams::new(args.cfg_scale.unwrap_or(env.cfg.eval.cfg_scale))?;
    let seed = derive_seed(env.cfg.seed, &[stream::SAMPLE]);
    let steps = env.sched.full_steps();
    let adapted = || -> Result<DenoiserModel> { Ok(base.with_adapters(single_adapter(shared)?.0)?) };
    if args.w.is_some() && args.mode != SampleMode::Unguide {
        bail!("--w only applies to --mode unguide");
    }
    let points = match args.mode {
        SampleMode::Base => sample(&base, c, &steps, cfg, n, seed, &env.sched)?,
        SampleMode::Lora => sample(&adapted()?, c, &steps, cfg, n, seed, &env.sched)?,
        SampleMode::Unguide => {
            let w = args.w.context("--mode unguide needs --w")?;
            sample_with_weight(&base, &adapted()?, c, w, cfg, n, seed, &env.sched)?
        }
        SampleMode::Auto => {
            let out = generate_unguided(&base, &adapted()?, &env.vocab, c, &env.cfg.probe, cfg, n, seed, &env.sched)?;
            eprintln!("route={} w={}", out.decision.route, out.decision.weight);
            out.samples
        }
    };
    let name = &env.vocab.get(c)?.name;
    let label = if name.is_empty() { "neutral" } else { name.as_str() };
    emit(&shared.out, &samples_csv(&sample_rows(label, &points)?)?)
}

fn erased_or_recorded(env: &Env, tokens: &[String], recorded: &[ConceptId]) -> Result<Vec<ConceptId>> {
    if tokens.is_empty() {
        if recorded.is_empty() {
            bail!("the adapter file records no erased concept; pass --concept");
        }
        return Ok(recorded.to_vec());
    }
    tokens.iter().map(|t| env.concept(t)).collect()
}

fn eval_cmd(shared: &Shared, tokens: &[String], n: Option<usize>) -> Result<()> {
    let (base, mut env) = load_base(shared)?;
    let (set, recorded) = single_adapter(shared)?;
    let erased = erased_or_recorded(&env, tokens, &recorded)?;
    if let Some(n) = n {
        env.cfg.eval.n_per_prompt = n;
    }
    let adapted = base.with_adapters(set)?;
    let data = env.cfg.dataset(&env.vocab)?;
    let report = run_erasure_eval(&base, &adapted, &env.vocab, &data, &erased, &env.cfg.eval_settings()?, &env.sched)?;
    if let Some(out) = &shared.out {
        emit(&Some(out.clone()), &metrics_csv(&report)?)?;
    }
    for p in &report.prompts {
        println!("{:<10} {:<12} {:>4}/{:<4} route={} w={}", p.class, p.name, p.hits, p.n, p.route, p.weight);
    }
    println!(
        "acc_e={:.4} acc_s={:.4} acc_g={:.4} h_o={:.4} pass={}",
        report.acc_e,
        report.acc_s,
        report.acc_g,
        report.h_o,
        report.passes(&env.cfg.eval.thresholds)
    );
    Ok(())
}

fn mix_cmd(shared: &Shared, args: &MixArgs) -> Result<()> {
    let out = required(&shared.out, "--out")?;
    let [first, second] = shared.lora.as_slice() else {
        bail!("mix takes exactly two --lora files");
    };
    let a = load_adapter(first)?;
    let b = load_adapter(second)?;
    let mut erased = a.erased;
    for c in b.erased {
        if !erased.contains(&c) {
            erased.push(c);
        }
    }
    let env = environment(shared, Some(&a.snapshot))?;
    let merged = merge_adapters(a.set, b.set, args.alpha)?;
    save_checkpoint(out, &Artifact::Adapters(merged), &adapter_snapshot(&env.cfg, &erased))?;
    println!("alpha={} erased={:?} out={}", args.alpha, erased.iter().map(|c| c.0).collect::<Vec<_>>(), out.display());
    Ok(())
}

fn norm_table_cmd(shared: &Shared, args: &NormTableArgs) -> Result<()> {
    let (base, env) = load_base(shared)?;
    let (set, recorded) = single_adapter(shared)?;
    let erased = match &args.concept {
        Some(t) => env.concept(t)?,
        None => *recorded.first().context("the adapter file records no erased concept; pass --concept")?,
    };
    let retained = match &args.retained {
        Some(t) => env.concept(t)?,
        None => env
            .vocab
            .primaries()
            .into_iter()
            .find(|c| *c != erased && !recorded.contains(c))
            .context("no retained primary concept left")?,
    };
    let grid = NormGrid {
        steps: args.steps_grid.clone(),
        repeats: args.repeats_grid.clone(),
        seeds: args.seeds.clone(),
        cfg_scale: env.cfg.probe.cfg_scale,
    };
    let adapted = base.with_adapters(set)?;
    let rows = norm_table_report(&base, &adapted, &env.vocab, erased, retained, &grid, &env.sched)?;
    emit(&shared.out, &norms_csv(&rows)?)
}
