use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textrecon::inference::{evaluate, load_trained, reconstruct_preview};
use textrecon::masking::{
    build_cloze_mask, build_masked_char_mask, build_permuted_mask, merge_and, sample_linguistic_mask,
    sample_visual_mask, Permutation,
};
use textrecon::model::{Model, ModelConfig};
use textrecon::synthdata::{build_dataset, build_splits, load_dataset, read_manifest, write_pnm_bytes, TextImage};
use textrecon::trainer::{prepare_samples, restore_state, run_phase, save_state, Flow, Phase, Sample, TrainState};

use crate::config::{Overrides, RunConfig};
use crate::{ConfigArgs, EvalArgs, GenDataArgs, MasksArgs, PhaseArg, ReconstructArgs, TrainArgs};

/// Bad flags or configuration; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

fn run_config(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<(RunConfig, ModelConfig)> {
    if let Some(p) = path {
        if !p.exists() {
            bail!("config file {} does not exist", p.display());
        }
    }
    let rc = RunConfig::load(path, overrides).map_err(|e| UsageError(format!("{e:#}")))?;
    let cfg = rc.model_config().map_err(|e| UsageError(format!("{e:#}")))?;
    Ok((rc, cfg))
}

pub fn show_config(a: ConfigArgs) -> anyhow::Result<()> {
    let (rc, _) = run_config(a.config.as_deref(), &a.overrides)?;
    print!("{}", rc.to_toml());
    Ok(())
}

fn parse_splits(s: &str) -> anyhow::Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let Some((name, n)) = part.split_once('=') else {
            return usage(format!("split {part:?} is not name=count"));
        };
        let n: usize = match n.trim().parse() {
            Ok(n) if n > 0 => n,
            _ => return usage(format!("split {name} needs a positive count, got {n:?}")),
        };
        out.push((name.trim().to_string(), n));
    }
    if out.is_empty() {
        return usage("no splits given");
    }
    Ok(out)
}

pub fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let (rc, _) = run_config(a.config.as_deref(), &a.overrides)?;
    let splits = a.splits.as_deref().map(parse_splits).transpose()?;
    if splits.is_none() && rc.n == 0 {
        return usage("--n must be at least 1");
    }
    let spec = rc.dataset_spec().map_err(|e| UsageError(format!("{e:#}")))?;
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    match splits {
        Some(splits) => {
            let named: Vec<(&str, usize)> = splits.iter().map(|(n, c)| (n.as_str(), *c)).collect();
            for dir in build_splits(&spec, &a.out, &named)? {
                println!("wrote {}", dir.display());
            }
        }
        None => {
            let entries = build_dataset(&spec, &a.out)?;
            println!("wrote {} samples to {}", entries.len(), a.out.display());
        }
    }
    Ok(())
}

fn load_images(dir: &Path) -> anyhow::Result<Vec<TextImage>> {
    let images = load_dataset(dir)
        .with_context(|| format!("loading dataset {}", dir.display()))?
        .collect::<Result<Vec<_>, _>>()?;
    Ok(images)
}

fn load_samples(dir: &Path, cfg: &ModelConfig) -> anyhow::Result<Vec<Sample>> {
    let images = load_images(dir)?;
    if images.is_empty() {
        bail!("dataset {} is empty", dir.display());
    }
    Ok(prepare_samples(&images, cfg)?)
}

pub fn checkpoint_path(out: &Path, phase: Phase) -> PathBuf {
    out.join(format!("{phase}.ckpt"))
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    let (rc, cfg) = run_config(a.config.as_deref(), &a.overrides)?;
    let phases: &[Phase] = match a.phase {
        PhaseArg::Mvlr => &[Phase::Mvlr],
        PhaseArg::Finetune => &[Phase::FineTune],
        PhaseArg::Both => &[Phase::Mvlr, Phase::FineTune],
    };
    let samples = load_samples(&a.data, &cfg)?;
    let mut state = match &a.resume {
        Some(path) => {
            if !path.exists() {
                bail!("checkpoint {} does not exist", path.display());
            }
            let state = restore_state(path, Some(&cfg)).with_context(|| format!("resuming {}", path.display()))?;
            if state.phase == Phase::FineTune && a.phase == PhaseArg::Mvlr {
                return usage("cannot pretrain from a fine-tuning checkpoint");
            }
            state
        }
        None => TrainState::new(Model::new(cfg.clone(), rc.seed)?, phases[0]),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("run.toml"), rc.to_toml())?;
    let mut log = OpenOptions::new().create(true).append(true).open(a.out.join("train.log"))?;

    let mut budget = a.stop_after;
    for &phase in phases {
        if phase == Phase::Mvlr && state.phase == Phase::FineTune {
            continue;
        }
        if state.phase != phase {
            state = state.into_phase(phase);
        }
        let pc = match phase {
            Phase::Mvlr => rc.mvlr_phase(&cfg),
            Phase::FineTune => rc.finetune_phase(&cfg),
        };
        let ckpt = checkpoint_path(&a.out, phase);
        let total = pc.total_steps(samples.len());
        let mut io_error = None;
        let mut stopped = false;
        state = run_phase(&samples, &pc, state, |rec, st| {
            if let Err(e) = writeln!(log, "{}", rec.to_line()) {
                io_error = Some(e.into());
                return Flow::Stop;
            }
            if rec.step % 50 == 0 || rec.step + 1 == total {
                eprintln!("{}", rec.to_line());
            }
            if rc.checkpoint_every > 0 && st.step % rc.checkpoint_every == 0 {
                if let Err(e) = save_state(&ckpt, st) {
                    io_error = Some(anyhow::Error::from(e));
                    return Flow::Stop;
                }
            }
            if let Some(b) = budget.as_mut() {
                *b -= 1;
                if *b == 0 {
                    stopped = true;
                    return Flow::Stop;
                }
            }
            Flow::Continue
        })?;
        if let Some(e) = io_error {
            return Err(e);
        }
        save_state(&ckpt, &state)?;
        println!("{phase}: step {}/{} saved {}", state.step, total, ckpt.display());
        if stopped {
            println!("stopped early; continue with --resume {}", ckpt.display());
            break;
        }
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_trained(&a.ckpt)?;
    let samples = load_samples(&a.data, model.config())?;
    let names: Vec<String> = read_manifest(&a.data)?.into_iter().map(|e| e.filename).collect();
    let iters = if a.no_refine { 0 } else { a.refine_iters };
    let report = evaluate(&model, &samples, &names, iters)?;
    print!("{}", report.table());
    if let Some(path) = &a.records {
        fs::write(path, report.records_tsv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn reconstruct(a: ReconstructArgs) -> anyhow::Result<()> {
    let model = load_trained(&a.ckpt)?;
    let cfg = model.config().clone();
    let r_v = a.r_v.unwrap_or(cfg.r_v);
    if !(0.0..=1.0).contains(&r_v) {
        return usage(format!("--r-v {r_v} outside [0, 1]"));
    }
    let images: Vec<TextImage> = load_dataset(&a.data)
        .with_context(|| format!("loading dataset {}", a.data.display()))?
        .take(a.n)
        .collect::<Result<_, _>>()?;
    let samples = prepare_samples(&images, &cfg)?;
    fs::create_dir_all(&a.out)?;
    let ext = if cfg.image.channels == 3 { "ppm" } else { "pgm" };
    let (mut mse, mut base) = (0.0, 0.0);
    for (i, s) in samples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        rng.set_stream(i as u64);
        let plan = sample_visual_mask(cfg.num_patches(), r_v, &mut rng);
        let seq = sample_linguistic_mask(&s.seq, cfg.r_l, &mut rng);
        let preview = reconstruct_preview(&model, &s.patches, &plan, &seq)?;
        let (shape, bytes) = preview.composite();
        let path = a.out.join(format!("recon_{i:04}.{ext}"));
        write_pnm_bytes(&path, shape, &bytes)?;
        println!("{}\t{:.6}\t{:.6}", path.display(), preview.masked_mse, preview.baseline_mse);
        mse += preview.masked_mse;
        base += preview.baseline_mse;
    }
    let n = samples.len().max(1) as f64;
    println!("mean masked mse {:.6} baseline {:.6}", mse / n, base / n);
    Ok(())
}

fn parse_perm(s: &str, len: usize) -> anyhow::Result<Permutation> {
    match s {
        "identity" => Ok(Permutation::identity(len)),
        "reverse" => Ok(Permutation::reverse(len)),
        _ => match s.strip_prefix("seed:").map(str::parse::<u64>) {
            Some(Ok(k)) => Ok(Permutation::random(len, &mut ChaCha8Rng::seed_from_u64(k))),
            _ => usage(format!("--perm {s:?} is not identity, reverse or seed:<k>")),
        },
    }
}

fn parse_positions(s: &str, len: usize) -> anyhow::Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.parse::<usize>() {
            Ok(p) if (1..=len).contains(&p) => out.push(p),
            _ => return usage(format!("masked position {part:?} outside 1..={len}")),
        }
    }
    Ok(out)
}

pub fn masks(a: MasksArgs) -> anyhow::Result<()> {
    if a.len == 0 {
        return usage("--len must be at least 1");
    }
    let perm = parse_perm(&a.perm, a.len)?;
    let masked = parse_positions(&a.masked, a.len)?;
    let n = a.len + 1;
    let base = if a.cloze { build_cloze_mask(n, n) } else { build_permuted_mask(&perm, n) };
    let mask = merge_and(&base, &build_masked_char_mask(&masked, n, n))?;
    print!("{}", mask.to_grid());
    Ok(())
}
