use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tara_core::adapters::{load_adapter, save_adapter, AdapterRegistry, LoraAdapter, RegistryManifest};
use tara_core::analysis::{
    attention_summary, compose_check as run_compose_check, composed_prompt, region_mse, token_influence,
    write_attention_csv, write_heatmaps, write_influence_csv, write_interference_csv, InterferenceEntry,
    InterferenceReport,
};
use tara_core::diffusion::{sample, LatentSample, Probes, Region, SampleOptions};
use tara_core::numerics::Fault;
use tara_core::text::{build_vocab, encode_prompt, tokenize, TokenSequence};
use tara_core::training::{gradcheck as run_gradcheck, train as run_train, write_loss_csv, ConceptDataset, OptimizerKind, TrainConfig, TrainMethod};
use tara_core::{ConceptBinding, World};

use crate::config::{CliConfig, ConfigError};
use crate::manifest::RunManifest;
use crate::{AnalyzeArgs, Common, ComposeArgs, GenerateArgs, GradcheckArgs, MakeVocabArgs, MethodArg, Mode, OptimizerArg, TrainArgs};

const PROBES_FILE: &str = "probes.json";
const INTERFERENCE_FILE: &str = "interference.json";

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn inputs_of(common: &Common) -> Vec<PathBuf> {
    common.config.iter().chain(common.vocab.iter()).cloned().collect()
}

fn setup(common: &Common) -> anyhow::Result<(CliConfig, World)> {
    let cfg = CliConfig::load(common.config.as_deref())?;
    let world = cfg.build_world(common.vocab.as_deref())?;
    Ok((cfg, world))
}

pub fn make_vocab(args: MakeVocabArgs) -> anyhow::Result<u8> {
    let cfg = CliConfig::load(args.common.config.as_deref())?;
    let seed = match args.common.seed {
        Some(s) => s,
        None => cfg.world.seed,
    };
    let dim = args.dim.unwrap_or(cfg.world.model.d_text);
    let vocab = build_vocab(seed, dim, &cfg.world.all_words())?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    vocab.save(&args.out)?;
    println!("vocabulary: {} tokens, d = {dim}, checksum {:016x}", vocab.len(), vocab.checksum());
    Ok(0)
}

/// `NAME=RARE:CLASS`
fn parse_concept(spec: &str, world: &World) -> anyhow::Result<ConceptBinding> {
    let (name, rest) = spec
        .split_once('=')
        .ok_or_else(|| config_error(format!("concept `{spec}` is not NAME=RARE:CLASS")))?;
    let (rare, class) = rest
        .rsplit_once(':')
        .ok_or_else(|| config_error(format!("concept `{spec}` is not NAME=RARE:CLASS")))?;
    Ok(world.binding(name, rare, class)?)
}

pub fn train(args: TrainArgs) -> anyhow::Result<u8> {
    let (cfg, world) = setup(&args.common)?;
    let seed = cfg.resolve_seed(args.common.seed)?;
    let mut tc = if args.desk_scale {
        TrainConfig {
            seed,
            ..TrainConfig::desk_scale()
        }
    } else {
        cfg.train.clone()
    };
    tc.seed = seed;
    if let Some(v) = args.steps {
        tc.max_steps = Some(v);
    }
    if let Some(v) = args.epochs {
        tc.epochs = v;
    }
    if let Some(v) = args.lr {
        tc.learning_rate = v;
    }
    if let Some(v) = args.lambda {
        tc.lambda = v;
    }
    if let Some(v) = args.rank {
        tc.rank = v;
    }
    if let Some(o) = args.optimizer {
        tc.optimizer = match o {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Momentum => OptimizerKind::Momentum,
            OptimizerArg::Adam => OptimizerKind::Adam,
        };
    }
    tc.validate()?;
    let method = match args.method {
        MethodArg::Tara => TrainMethod::Tara,
        MethodArg::DbLora => TrainMethod::DbLora,
        MethodArg::Rob => TrainMethod::Rob,
    };
    let concept = parse_concept(&args.concept, &world)?;
    let data_seed = args.data_seed.unwrap_or(seed);
    let data = ConceptDataset::synthesize(&world, concept, &cfg.dataset, data_seed)?;

    let base_before = world.model.checksum();
    let vocab_before = world.vocab.checksum();
    let outcome = run_train(&world.model, &world.vocab, &data, &tc, method)?;
    if world.model.checksum() != base_before || world.vocab.checksum() != vocab_before {
        bail!("base model or embeddings changed during training");
    }

    create_dir(&args.out)?;
    let adapter_path = args.out.join("adapter.tara");
    let loss_path = args.out.join("loss.csv");
    save_adapter(&outcome.adapter, &adapter_path)?;
    write_loss_csv(&loss_path, &outcome.log)?;

    let snapshot = CliConfig {
        seed: Some(seed),
        train: tc.clone(),
        ..cfg.clone()
    };
    let seeds = BTreeMap::from([("train".to_string(), seed), ("data".to_string(), data_seed)]);
    let mut manifest = RunManifest::new("train", serde_json::to_value(&snapshot)?, seeds, inputs_of(&args.common))?;
    manifest.outputs = vec![adapter_path.clone(), loss_path];
    manifest.details = json!({
        "concept": args.concept,
        "method": method.as_str(),
        "steps": outcome.log.len(),
        "initial": outcome.initial,
        "final": outcome.final_losses,
        "base_checksum": format!("{base_before:016x}"),
        "vocab_checksum": format!("{vocab_before:016x}"),
        "adapter_checksum": format!("{:016x}", outcome.adapter.checksum()),
    });
    manifest.save(&args.out)?;
    println!(
        "{} `{}`: {} steps, denoise {:.4} -> {:.4}, align {:.4} -> {:.4}",
        method.as_str(),
        outcome.adapter.concept.name,
        outcome.log.len(),
        outcome.initial.denoise,
        outcome.final_losses.denoise,
        outcome.initial.align,
        outcome.final_losses.align
    );
    Ok(0)
}

fn load_adapters(paths: &[PathBuf], registry: Option<&Path>) -> anyhow::Result<(Vec<LoraAdapter>, Vec<PathBuf>)> {
    let mut adapters = Vec::new();
    let mut inputs = paths.to_vec();
    for p in paths {
        adapters.push(load_adapter(p)?);
    }
    if let Some(r) = registry {
        let manifest = RegistryManifest::load(r)?;
        let base = r.parent().unwrap_or(Path::new("."));
        inputs.push(r.to_path_buf());
        for p in &manifest.adapters {
            let full = base.join(p);
            adapters.push(load_adapter(&full)?);
            inputs.push(full);
        }
    }
    Ok((adapters, inputs))
}

fn encode(world: &World, adapters: &[LoraAdapter], prompt: &[String]) -> anyhow::Result<TokenSequence> {
    let bindings: Vec<ConceptBinding> = adapters.iter().map(|a| a.concept.clone()).collect();
    Ok(encode_prompt(&world.vocab, &bindings, prompt)?)
}

fn token_words(world: &World, seq: &TokenSequence) -> Vec<String> {
    seq.ids().iter().map(|t| world.vocab.token(*t).to_string()).collect()
}

pub fn generate(args: GenerateArgs) -> anyhow::Result<u8> {
    let (cfg, world) = setup(&args.common)?;
    let seed = cfg.resolve_seed(args.common.seed)?;
    let steps = args.steps.unwrap_or(cfg.sampler_steps);
    let (adapters, adapter_inputs) = load_adapters(&args.adapters, args.registry.as_deref())?;
    let prompt = tokenize(&args.prompt);
    let seq = encode(&world, &adapters, &prompt)?;
    let registry = AdapterRegistry::from_adapters(adapters.iter().cloned())?;
    let run = sample(&world.model, &registry, &seq, SampleOptions { seed, steps, probes: true })?;

    create_dir(&args.out)?;
    let sample_path = args.out.join("sample.fmat");
    let probes_path = args.out.join(PROBES_FILE);
    run.sample.save(&sample_path)?;
    run.probes.as_ref().expect("probes requested").save(&probes_path)?;

    let mut inputs = inputs_of(&args.common);
    inputs.extend(adapter_inputs);
    let snapshot = CliConfig {
        seed: Some(seed),
        sampler_steps: steps,
        ..cfg
    };
    let seeds = BTreeMap::from([("sample".to_string(), seed)]);
    let mut manifest = RunManifest::new("generate", serde_json::to_value(&snapshot)?, seeds, inputs)?;
    manifest.outputs = vec![sample_path.clone(), tara_core::diffusion::sidecar_path(&sample_path), probes_path];
    manifest.details = json!({
        "prompt": args.prompt,
        "tokens": token_words(&world, &seq),
        "adapters": adapters.iter().map(|a| a.concept.name.clone()).collect::<Vec<_>>(),
        "sample_checksum": format!("{:016x}", run.sample.z.checksum()),
    });
    manifest.save(&args.out)?;
    println!("sample {:016x} written to {}", run.sample.z.checksum(), args.out.display());
    Ok(0)
}

/// Interference data kept in a compose-check run directory.
#[derive(Serialize, Deserialize)]
struct StoredInterference {
    report: InterferenceReport,
    regions: BTreeMap<String, Region>,
    grid: usize,
}

pub fn compose_check(args: ComposeArgs) -> anyhow::Result<u8> {
    let (cfg, world) = setup(&args.common)?;
    let seed = cfg.resolve_seed(args.common.seed)?;
    let steps = args.steps.unwrap_or(cfg.sampler_steps);
    let (adapters, adapter_inputs) = load_adapters(&args.adapters, None)?;
    let bindings: Vec<ConceptBinding> = adapters.iter().map(|a| a.concept.clone()).collect();
    let prompt = match &args.prompt {
        Some(p) => tokenize(p),
        None => composed_prompt(&world.vocab, &bindings),
    };
    let check = run_compose_check(&world, &args.label, &adapters, &prompt, SampleOptions { seed, steps, probes: true })?;

    create_dir(&args.out)?;
    let mut outputs = Vec::new();
    for (name, z) in &check.solo {
        let path = args.out.join(format!("solo_{name}.fmat"));
        LatentSample::new(z.clone(), tara_core::diffusion::Provenance::Generated { seed, steps })?.save(&path)?;
        outputs.push(tara_core::diffusion::sidecar_path(&path));
        outputs.push(path);
    }
    let composed_path = args.out.join("composed.fmat");
    check.composed.sample.save(&composed_path)?;
    outputs.push(tara_core::diffusion::sidecar_path(&composed_path));
    outputs.push(composed_path);
    let probes_path = args.out.join(PROBES_FILE);
    check.composed.probes.as_ref().expect("probes requested").save(&probes_path)?;
    outputs.push(probes_path);

    let mut regions = BTreeMap::new();
    for b in &bindings {
        regions.insert(b.name.clone(), world.concept_region(b)?);
    }
    let stored = StoredInterference {
        report: check.report.clone(),
        regions,
        grid: world.grid(),
    };
    let stored_path = args.out.join(INTERFERENCE_FILE);
    std::fs::write(&stored_path, serde_json::to_string_pretty(&stored)?)?;
    outputs.push(stored_path);
    let csv_path = args.out.join("interference.csv");
    write_interference_csv(&csv_path, std::slice::from_ref(&check.report))?;
    outputs.push(csv_path);

    let mut inputs = inputs_of(&args.common);
    inputs.extend(adapter_inputs);
    let snapshot = CliConfig {
        seed: Some(seed),
        sampler_steps: steps,
        ..cfg
    };
    let seeds = BTreeMap::from([("sample".to_string(), seed)]);
    let mut manifest = RunManifest::new("compose-check", serde_json::to_value(&snapshot)?, seeds, inputs)?;
    manifest.outputs = outputs;
    manifest.details = json!({
        "prompt": prompt.join(" "),
        "tokens": token_words(&world, &check.seq),
        "label": args.label,
        "adapters": adapters.iter().map(|a| a.concept.name.clone()).collect::<Vec<_>>(),
    });
    manifest.save(&args.out)?;
    for e in &check.report.entries {
        println!("{:<16} region mse {:.6e}", e.concept, e.mse);
    }
    Ok(0)
}

fn parse_range(s: &str) -> anyhow::Result<std::ops::Range<usize>> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| config_error(format!("step range `{s}` is not START..END")))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| config_error(format!("bad step range `{s}`")));
    Ok(parse(a)?..parse(b)?)
}

fn load_probes(run: &Path) -> anyhow::Result<Probes> {
    let path = run.join(PROBES_FILE);
    if !path.exists() {
        return Err(tara_core::Error::MissingProbes).with_context(|| format!("no {} in {}", PROBES_FILE, run.display()));
    }
    Ok(Probes::load(&path)?)
}

fn run_tokens(run: &Path) -> Vec<String> {
    RunManifest::load(run)
        .ok()
        .and_then(|m| serde_json::from_value(m.details["tokens"].clone()).ok())
        .unwrap_or_default()
}

pub fn analyze(args: AnalyzeArgs) -> anyhow::Result<u8> {
    let cfg = CliConfig::load(args.common.config.as_deref())?;
    let top_fraction = args.top_fraction.unwrap_or(cfg.top_fraction);
    let run = &args.runs[0];
    let out = args.out.clone().unwrap_or_else(|| run.join("analysis"));
    match args.mode {
        Mode::Tokens => {
            let probes = load_probes(run)?;
            let report = token_influence(Some(&probes))?;
            create_dir(&out)?;
            write_influence_csv(&out.join("influence.csv"), &report, &run_tokens(run))?;
            std::fs::write(out.join("influence.json"), serde_json::to_string_pretty(&report)?)?;
            for e in &report.entries {
                let nz: Vec<usize> = (0..e.magnitudes.len()).filter(|&i| e.magnitudes[i] != 0.0).collect();
                println!("{} {}: nonzero at positions {nz:?}", e.adapter, e.projection.as_str());
            }
        }
        Mode::Attention => {
            let probes = load_probes(run)?;
            let steps = args.step_range.as_deref().map(parse_range).transpose()?;
            let positions: Vec<usize> = (0..probes.tokens.len()).collect();
            let summary = attention_summary(Some(&probes), &positions, steps, top_fraction)?;
            create_dir(&out)?;
            let words = run_tokens(run);
            write_attention_csv(&out.join("attention.csv"), &summary, &words)?;
            let heat = out.join("heatmaps");
            create_dir(&heat)?;
            write_heatmaps(&heat, &summary)?;
            let json = json!({
                "top_fraction": summary.top_fraction,
                "steps": [summary.steps.start, summary.steps.end],
                "tokens": words,
                "entropy": summary.entropy,
                "top_sets": summary.top_sets,
                "iou": summary.iou,
            });
            std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&json)?)?;
            println!("attention summary over {} tokens written to {}", positions.len(), out.display());
        }
        Mode::Interference => {
            let mut reports = Vec::new();
            for r in &args.runs {
                reports.push(recompute_interference(r)?);
            }
            create_dir(&out)?;
            write_interference_csv(&out.join("interference.csv"), &reports)?;
            let mut ranking: Vec<(String, f64)> = reports.iter().map(|r| (r.method.clone(), r.mean_mse())).collect();
            ranking.sort_by(|a, b| a.1.total_cmp(&b.1));
            std::fs::write(
                out.join("summary.json"),
                serde_json::to_string_pretty(&json!({ "reports": reports, "ordering": ranking }))?,
            )?;
            for (method, mse) in &ranking {
                println!("{method:<12} mean region mse {mse:.6e}");
            }
        }
    }
    Ok(0)
}

/// Rebuilds the interference report of a compose-check run from its stored
/// latents.
fn recompute_interference(run: &Path) -> anyhow::Result<InterferenceReport> {
    let path = run.join(INTERFERENCE_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("{} is not a compose-check run", run.display()))?;
    let stored: StoredInterference = serde_json::from_str(&text)?;
    let composed = LatentSample::load(&run.join("composed.fmat"))?.z;
    let mut entries = Vec::new();
    for (concept, region) in &stored.regions {
        let solo = LatentSample::load(&run.join(format!("solo_{concept}.fmat")))?.z;
        entries.push(InterferenceEntry {
            concept: concept.clone(),
            mse: region_mse(&solo, &composed, region, stored.grid)?,
        });
    }
    Ok(InterferenceReport {
        method: stored.report.method,
        entries,
    })
}

pub fn gradcheck(args: GradcheckArgs) -> anyhow::Result<u8> {
    let (cfg, world) = setup(&args.common)?;
    let mut gc = cfg.gradcheck.clone();
    if let Some(l) = args.lambda {
        gc.lambda = l;
    }
    if let Some(t) = args.tolerance {
        gc.tolerance = t;
    }
    gc.seed = cfg.resolve_seed_or(args.common.seed, gc.seed)?;
    let fault = args.corrupt_adjoint.then_some(Fault::MatMulLeftAdjoint(1.5));
    let report = run_gradcheck(&world, &gc, fault)?;
    for b in &report.blocks {
        let note = if b.rel_error >= gc.tolerance && b.passes(gc.tolerance) { "  (within rounding noise)" } else { "" };
        println!(
            "{:<12} entries {:>4}  rel {:.3e}  abs {:.3e}  noise {:.1e}{note}",
            b.name, b.entries, b.rel_error, b.abs_error, b.roundoff
        );
    }
    if report.passes(gc.tolerance) {
        println!("PASS: max relative error {:.3e} (tolerance {:e})", report.max_rel_error(), gc.tolerance);
        Ok(0)
    } else {
        let worst = report
            .blocks
            .iter()
            .filter(|b| !b.passes(gc.tolerance))
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .expect("a failing block");
        println!("FAIL: block {} has relative error {:.3e} (tolerance {:e})", worst.name, worst.rel_error, gc.tolerance);
        Ok(1)
    }
}
