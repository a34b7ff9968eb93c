use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mpgan::metrics::{augmentation_experiment, recovery_target, score_recovery, BoxStats, LabelledSet, RecoveryCase};
use mpgan::nets::Classifier;
use mpgan::phantom::generate_dataset;
use mpgan::train::{self, load_checkpoint, Event, Model, TrainState};
use mpgan::vismap::{self, AtlasVolume, Colormap, OverlaySpec, View};
use mpgan::volume::{load_grid, load_volume, save_grid};
use mpgan::{ClassLabel, Error, Volume};

use crate::config::{parse_config, resolve_seed, ConfigError, RunConfig, SEED_ENV};
use crate::data::{split_csv, write_phantom, write_text, OnDisk};
use crate::{Cli, CliError, CliResult, Command, EvalArgs, VisualizeArgs};

const RUN_DIRS: [&str; 4] = ["checkpoints", "maps", "overlays", "reports"];

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(parse_config(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

/// Creates the run directory and writes `config.frozen`, headed by the
/// invoking command as comment lines.
fn prepare_run_dir(out: &Path, config: &RunConfig, command: &str) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for dir in RUN_DIRS {
        let p = out.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let text = format!("# mpgan {command}\n{}", config.frozen());
    Ok(write_text(&out.join("config.frozen"), &text)?)
}

fn manifest_path(flag: Option<PathBuf>, config: &mut RunConfig) -> CliResult<PathBuf> {
    let path = flag.or_else(|| config.manifest.clone()).ok_or_else(|| ConfigError::missing("data.manifest"))?;
    config.manifest = Some(path.clone());
    Ok(path)
}

fn spec_mismatch(message: String) -> CliError {
    Error::SpecMismatch(message).into()
}

/// Loads the manifest and fixes K: the configured value when pinned,
/// otherwise one more than the largest stage present.
fn load_data(manifest: &Path, k: Option<usize>) -> CliResult<OnDisk> {
    let mut data = OnDisk::load(manifest)?;
    if let Some(k) = k {
        if data.k > k {
            return Err(spec_mismatch(format!("manifest has stage {} but K = {k}", data.k - 1)));
        }
        data.k = k;
    }
    Ok(data)
}

fn seed_for(cli_seed: Option<u64>, config: &RunConfig) -> CliResult<u64> {
    let env = std::env::var(SEED_ENV).ok();
    Ok(resolve_seed(cli_seed, env.as_deref(), config.seed)?)
}

pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Phantom { config, out } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.apply_seed(seed_for(cli.seed, &cfg)?);
            phantom(&cfg, &out)
        }
        Command::Train { config, data, out, resume } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.apply_seed(seed_for(cli.seed, &cfg)?);
            let manifest = manifest_path(data, &mut cfg)?;
            train_cmd(cfg, &manifest, &out, resume.as_deref())
        }
        Command::Visualize(args) => {
            let mut cfg = RunConfig::default();
            cfg.apply_seed(seed_for(cli.seed, &cfg)?);
            visualize(&cfg, &args)
        }
        Command::Evaluate(args) => {
            let (cfg, manifest) = eval_setup(cli.seed, &args)?;
            evaluate(&cfg, &manifest, &args)
        }
        Command::AugmentEval { common, per_class } => {
            let (mut cfg, manifest) = eval_setup(cli.seed, &common)?;
            if let Some(n) = per_class {
                cfg.augment_per_class = n;
            }
            augment_eval(&cfg, &manifest, &common)
        }
    }
}

fn phantom(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let samples = generate_dataset(&cfg.phantom)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rows = write_phantom(&samples, out)?;
    write_text(&out.join("config.frozen"), &format!("# mpgan phantom\n{}", cfg.frozen()))?;
    Ok(format!("phantom: {} volumes, {} subjects, K = {} -> {}", rows.len(), cfg.phantom.subject_count, cfg.phantom.k, out.display()))
}

fn write_map(out: &Path, name: &str, map: &mpgan::ClassDiscriminativeMap) -> CliResult<()> {
    Ok(save_grid(map.grid(), out.join("maps").join(format!("{name}.mpgv")))?)
}

fn train_cmd(mut cfg: RunConfig, manifest: &Path, out: &Path, resume: Option<&Path>) -> CliResult<String> {
    let data = load_data(manifest, cfg.k_set.then(|| cfg.train.k()))?;
    cfg.train.set_k(data.k);
    let split = data.split(cfg.split, cfg.train.seed)?;
    let model = Model::new(cfg.train.clone())?;
    prepare_run_dir(out, &cfg, "train")?;
    write_text(&out.join("reports/split.csv"), &split_csv(&data, &split))?;
    let mut state = match resume {
        Some(p) => train::resume(&model, p)?,
        None => model.init_state(),
    };
    let summary = train::run(&model, &mut state, &data.dataset(&split.train)?, &data.dataset(&split.val)?, Some(out), |e| {
        if let Event::Validation { step, ssim, improved } = e {
            eprintln!("step {step}: val ssim {ssim:.4}{}", if improved { " (best)" } else { "" });
        }
    })?;
    let best = &summary.best;
    for &i in &split.test {
        let target = recovery_target(data.label(i)?)?;
        let map = vismap::map_with(&model.generator, &best.g, &data.volumes[i], target)?;
        let name = format!("{}_to{}", data.stem(i), target.index());
        write_map(out, &name, &map)?;
        let spec = OverlaySpec::central(View::Axial, map.shape());
        vismap::render_overlay(&data.volumes[i], &map, &spec, out.join("overlays").join(format!("{name}_axial.png")))?;
    }
    write_text(
        &out.join("reports/train_summary.csv"),
        &format!(
            "steps,best_step,best_val_ssim,stopped_early\n{},{},{:?},{}\n",
            state.step, summary.best_step, best.best_val_ssim, summary.stopped_early
        ),
    )?;
    Ok(format!(
        "train: {} steps, best step {} (val SSIM {:.4}){} -> {}",
        state.step,
        summary.best_step,
        best.best_val_ssim,
        if summary.stopped_early { ", stopped early" } else { "" },
        out.display()
    ))
}

fn eval_setup(cli_seed: Option<u64>, args: &EvalArgs) -> CliResult<(RunConfig, PathBuf)> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.apply_seed(seed_for(cli_seed, &cfg)?);
    let manifest = manifest_path(args.data.clone(), &mut cfg)?;
    Ok((cfg, manifest))
}

/// Checkpoint plus the dataset it is evaluated on, with K taken from the
/// checkpoint.
fn load_for_eval(manifest: &Path, checkpoint: &Path) -> CliResult<(Model, TrainState, OnDisk)> {
    let (model, state) = load_checkpoint(checkpoint)?;
    let data = load_data(manifest, Some(model.config.k()))?;
    Ok((model, state, data))
}

fn evaluate(cfg: &RunConfig, manifest: &Path, args: &EvalArgs) -> CliResult<String> {
    let (model, state, data) = load_for_eval(manifest, &args.checkpoint)?;
    let split = data.split(cfg.split, cfg.train.seed)?;
    prepare_run_dir(&args.out, cfg, &format!("evaluate --checkpoint {}", args.checkpoint.display()))?;
    let mut cases = Vec::with_capacity(split.test.len());
    for &i in &split.test {
        let label = data.label(i)?;
        cases.push(RecoveryCase {
            volume: &data.volumes[i],
            label,
            subject_id: data.rows[i].subject_id,
            truth: data.truth(i, recovery_target(label)?.index())?,
        });
    }
    let rec = score_recovery(&model.generator, &state.g, &cases, cfg.train.seed)?;
    let mut samples = String::from("path,subject_id,stage,target,ncc,psnr\n");
    for (n, &i) in split.test.iter().enumerate() {
        let label = data.label(i)?;
        let target = recovery_target(label)?;
        let r = &data.rows[i];
        samples.push_str(&format!(
            "{},{},{},{},{:?},{:?}\n",
            r.path.display(),
            r.subject_id,
            r.stage,
            target.index(),
            rec.report.ncc[n],
            rec.report.psnr[n]
        ));
        let map = vismap::map_with(&model.generator, &state.g, &data.volumes[i], target)?;
        write_map(&args.out, &format!("{}_to{}", data.stem(i), target.index()), &map)?;
    }
    let reports = args.out.join("reports");
    write_text(&reports.join("samples.csv"), &samples)?;
    write_text(&reports.join("summary.csv"), &rec.report.summary_csv()?)?;
    let ncc = BoxStats::of(&rec.report.ncc)?.median;
    let baseline = BoxStats::of(&rec.baseline_ncc).map(|b| b.median).unwrap_or(f64::NAN);
    write_text(
        &reports.join("recovery.csv"),
        &format!("n,median_ncc,median_baseline_ncc,margin,peak\n{},{ncc:?},{baseline:?},{:?},{:?}\n", cases.len(), ncc - baseline, rec.report.peak),
    )?;
    Ok(format!(
        "evaluate: {} test volumes, median NCC {ncc:.3} (permutation baseline {baseline:.3}) -> {}",
        cases.len(),
        args.out.display()
    ))
}

fn augment_eval(cfg: &RunConfig, manifest: &Path, args: &EvalArgs) -> CliResult<String> {
    let (model, state, data) = load_for_eval(manifest, &args.checkpoint)?;
    let split = data.split(cfg.split, cfg.train.seed)?;
    prepare_run_dir(&args.out, cfg, &format!("augment-eval --checkpoint {}", args.checkpoint.display()))?;
    let pick = |idx: &[usize]| -> CliResult<(Vec<&Volume>, Vec<ClassLabel>)> {
        Ok((idx.iter().map(|&i| &data.volumes[i]).collect(), data.labels(idx)?))
    };
    let (tv, tl) = pick(&split.train)?;
    let (ev, el) = pick(&split.test)?;
    let classifier = Classifier::new(model.config.classifier.clone())?;
    let outcome = augmentation_experiment(
        &model.generator,
        &state.g,
        LabelledSet { volumes: &tv, labels: &tl },
        cfg.augment_per_class,
        &classifier,
        &cfg.augment,
        LabelledSet { volumes: &ev, labels: &el },
    )?;
    write_text(&args.out.join("reports/augmentation.csv"), &outcome.csv())?;
    let (b, a) = (outcome.baseline_metrics(), outcome.augmented_metrics());
    Ok(format!(
        "augment-eval: accuracy {:.3} -> {:.3} ({:+.3}), AUC {:.3} -> {:.3}, {} synthesized per class -> {}",
        b.accuracy,
        a.accuracy,
        outcome.accuracy_gain(),
        b.auc,
        a.auc,
        cfg.augment_per_class,
        args.out.display()
    ))
}

fn visualize(cfg: &RunConfig, args: &VisualizeArgs) -> CliResult<String> {
    let (model, state) = load_checkpoint(&args.checkpoint)?;
    let x = load_volume(&args.input)?;
    let target = ClassLabel::new(args.target_class, model.config.k())?;
    let views = args.views.split(',').map(|v| View::parse(v.trim())).collect::<mpgan::Result<Vec<_>>>()?;
    let colormap = Colormap::parse(&args.colormap)?;
    let map = vismap::map_with(&model.generator, &state.g, &x, target)?;
    prepare_run_dir(&args.out_dir, cfg, &format!("visualize --checkpoint {} --input {}", args.checkpoint.display(), args.input.display()))?;
    let stem = args.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
    let name = format!("{stem}_to{}", target.index());
    write_map(&args.out_dir, &name, &map)?;
    for &view in &views {
        let mut spec = OverlaySpec::central(view, x.shape());
        spec.colormap = colormap;
        spec.alpha = args.alpha;
        if let Some(s) = args.slice {
            spec.slice_index = s;
        }
        vismap::render_overlay(&x, &map, &spec, args.out_dir.join("overlays").join(format!("{name}_{}.png", view.name())))?;
    }
    if let Some(atlas) = &args.atlas {
        let atlas = AtlasVolume::from_grid(&load_grid(atlas)?, BTreeMap::new())?;
        let rows = vismap::region_report(&map, &atlas, args.top_n, None)?;
        write_text(&args.out_dir.join("reports").join(format!("{name}_regions.csv")), &vismap::region_csv(&rows))?;
    }
    let stats = vismap::map_stats(&map);
    Ok(format!(
        "visualize: map toward stage {} (mean |dx| {:.4}, max |dx| {:.4}), {} overlay(s) -> {}",
        target.index(),
        stats.mean_abs,
        stats.max_abs,
        views.len(),
        args.out_dir.display()
    ))
}
