use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use pn2v::data::{list_images, load_image, save_image, synth_dataset, ImageArray, NoiseKind, Pattern, SynthSpec};
use pn2v::evaluation::{evaluate_set, MetricKind};
use pn2v::inference::{check_mode, denoise_image, DenoiseMode, TilingConfig};
use pn2v::network::UNetConfig;
use pn2v::noise_model::{build_histogram, load_noise_model, save_noise_model, NoiseModel, DEFAULT_BINS};
use pn2v::training::{load_checkpoint, save_checkpoint, train as run_training, TrainConfig, TrainData, TrainMode};
use pn2v::Checkpoint32;

use crate::settings::Settings;
use crate::{BuildNmArgs, DenoiseArgs, EvaluateArgs, Failure, SynthArgs, TrainArgs};

/// Core-pixel interior of default tiles.
const DEFAULT_TILE_CORE: usize = 128;
const MANIFEST: &str = "manifest.txt";

/// Errors raised while checking inputs, before anything is written.
fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::usage(e.to_string())
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Output directories must be absent or empty unless `force` is set.
fn check_out_dir(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Failure::usage(format!("{}: not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?.next().is_some();
        if non_empty && !force {
            return Err(Failure::usage(format!("{}: directory is not empty (use --force)", dir.display())));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<ImageArray>, Failure> {
    paths.iter().map(|p| load_image(p).map_err(invalid)).collect()
}

/// Pairs images of `a` with images of `b` by file name; both sets must match exactly.
fn matched_files(a: &Path, b: &Path) -> Result<Vec<(PathBuf, PathBuf)>, Failure> {
    let left = list_images(a).map_err(invalid)?;
    let right = list_images(b).map_err(invalid)?;
    let names = |v: &[PathBuf]| v.iter().map(|p| file_name(p)).collect::<Vec<_>>();
    let (ln, rn) = (names(&left), names(&right));
    if let Some(n) = ln.iter().find(|n| !rn.contains(n)) {
        return Err(Failure::usage(format!("{n}: present in {} but not in {}", a.display(), b.display())));
    }
    if let Some(n) = rn.iter().find(|n| !ln.contains(n)) {
        return Err(Failure::usage(format!("{n}: present in {} but not in {}", b.display(), a.display())));
    }
    if left.is_empty() {
        return Err(Failure::usage(format!("{}: no images found", a.display())));
    }
    Ok(left.into_iter().zip(right).collect())
}

fn parse_enum<T: std::str::FromStr>(raw: &str) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(invalid)
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let mut cfg = Settings::load(a.config.as_deref())?;
    let d = SynthSpec::default();
    let kind: String = cfg.get("kind", a.kind, d.kind.to_string())?;
    let pattern: String = cfg.get("pattern", a.pattern, d.pattern.to_string())?;
    let spec = SynthSpec {
        kind: parse_enum::<NoiseKind>(&kind)?,
        pattern: parse_enum::<Pattern>(&pattern)?,
        size: cfg.get("size", a.size, d.size)?,
        n_images: cfg.get("n", a.n, d.n_images)?,
        sigma: cfg.get("sigma", a.sigma, d.sigma)?,
        gain: cfg.get("gain", a.gain, d.gain)?,
        low: cfg.get("low", a.low, d.low)?,
        high: cfg.get("high", a.high, d.high)?,
        level: cfg.get("level", a.level, d.level)?,
        seed: cfg.get("seed", a.seed, d.seed)?,
    };
    let format: String = cfg.get("format", a.format, "raw".to_owned())?;
    cfg.finish()?;
    if format != "raw" && format != "png" {
        return Err(Failure::usage(format!("unknown format `{format}` (raw, png)")));
    }
    spec.validate().map_err(invalid)?;
    check_out_dir(&a.out, a.force)?;

    log::info!("synthesizing {} {}x{} images", spec.n_images, spec.size, spec.size);
    let (clean, noisy) = synth_dataset(&spec)?;
    let width = spec.n_images.saturating_sub(1).to_string().len().max(3);
    for (sub, images) in [("clean", &clean), ("noisy", &noisy)] {
        let dir = a.out.join(sub);
        create_dir(&dir)?;
        let mut clipped = 0;
        for (i, img) in images.iter().enumerate() {
            clipped += save_image(img, dir.join(format!("img_{i:0width$}.{format}")))?;
        }
        if clipped > 0 {
            log::warn!("{sub}: {clipped} pixels clipped to the 16-bit range");
        }
    }
    let manifest = format!(
        "# replay with: pn2v synth --config {MANIFEST} --out DIR\n\
         kind = {}\npattern = {}\nsize = {}\nn = {}\nsigma = {:?}\ngain = {:?}\n\
         low = {:?}\nhigh = {:?}\nlevel = {:?}\nseed = {}\nformat = {format}\n",
        spec.kind, spec.pattern, spec.size, spec.n_images, spec.sigma, spec.gain, spec.low, spec.high, spec.level, spec.seed
    );
    write_file(&a.out.join(MANIFEST), &manifest)?;
    println!("wrote {} image pairs to {}", spec.n_images, a.out.display());
    Ok(())
}

pub fn build_nm(a: BuildNmArgs) -> Result<(), Failure> {
    let mut cfg = Settings::load(a.config.as_deref())?;
    let bins: usize = cfg.get("bins", a.bins, DEFAULT_BINS)?;
    let bins_x: usize = cfg.get("bins-x", a.bins_x, bins)?;
    let lo: Option<f64> = cfg.opt("range-min", a.range_min)?;
    let hi: Option<f64> = cfg.opt("range-max", a.range_max)?;
    cfg.finish()?;
    let range = match (lo, hi) {
        (Some(l), Some(h)) => Some((l, h)),
        (None, None) => None,
        _ => return Err(Failure::usage("--range-min and --range-max must be given together")),
    };
    let files = matched_files(&a.data.join("clean"), &a.data.join("noisy"))?;
    let mut pairs = Vec::with_capacity(files.len());
    for (c, n) in &files {
        pairs.push((load_image(c).map_err(invalid)?, load_image(n).map_err(invalid)?));
    }
    log::info!("histogram from {} image pairs", pairs.len());
    let built = build_histogram(&pairs, bins, bins_x, range).map_err(invalid)?;
    save_noise_model(&built.model, &a.out)?;
    println!(
        "row coverage: {:.4} ({}/{} rows, {} samples)",
        built.row_coverage(),
        built.filled_rows,
        built.model.bins_s(),
        built.samples
    );
    println!("digest: {}", built.model.digest());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = Settings::load(a.config.as_deref())?;
    let d = TrainConfig::default();
    let mode_raw: String = cfg.get("mode", a.mode, d.mode.to_string())?;
    let mode: TrainMode = parse_enum(&mode_raw)?;
    let desk = UNetConfig::desk_scale();
    let default_k = if mode == TrainMode::Pn2v { desk.out_channels } else { 1 };
    let net = UNetConfig {
        depth: cfg.get("depth", a.depth, desk.depth)?,
        out_channels: cfg.get("k", a.k, default_k)?,
        base_features: cfg.get("base-features", a.base_features, desk.base_features)?,
        seed: cfg.get("init-seed", a.init_seed, desk.seed)?,
        ..desk
    };
    let tc = TrainConfig {
        mode,
        epochs: cfg.get("epochs", a.epochs, d.epochs)?,
        steps_per_epoch: cfg.get("steps-per-epoch", a.steps_per_epoch, d.steps_per_epoch)?,
        batch_size: cfg.get("batch-size", a.batch_size, d.batch_size)?,
        patch_size: cfg.get("patch-size", a.patch_size, d.patch_size)?,
        learning_rate: cfg.get("learning-rate", a.learning_rate, d.learning_rate)?,
        plateau_factor: cfg.get("plateau-factor", a.plateau_factor, d.plateau_factor)?,
        plateau_patience: cfg.get("plateau-patience", a.plateau_patience, d.plateau_patience)?,
        n_masked: cfg.get("n-masked", a.n_masked, d.n_masked)?,
        window: cfg.get("window", a.window, d.window)?,
        seed: cfg.get("seed", a.seed, d.seed)?,
        val_fraction: cfg.get("val-fraction", a.val_fraction, d.val_fraction)?,
        val_patches: cfg.get("val-patches", a.val_patches, d.val_patches)?,
        augment: !cfg.switch("no-augment", a.no_augment)?,
    };
    let nm_path: Option<PathBuf> = cfg.opt("noise-model", a.noise_model)?;
    let log_path: PathBuf = cfg.get("log", a.log, a.out.with_extension("log"))?;
    cfg.finish()?;
    tc.validate(&net).map_err(invalid)?;

    let model = match (mode, &nm_path) {
        (TrainMode::Pn2v, None) => return Err(Failure::usage("pn2v training requires --noise-model")),
        (TrainMode::Pn2v, Some(p)) => Some(load_noise_model(p).map_err(invalid)?),
        (_, Some(_)) => {
            log::warn!("{mode} training ignores --noise-model");
            None
        }
        _ => None,
    };
    let noisy_dir = if a.data.join("noisy").is_dir() { a.data.join("noisy") } else { a.data.clone() };
    let clean = if mode == TrainMode::Supervised {
        let files = matched_files(&noisy_dir, &a.data.join("clean"))
            .map_err(|e| if let Failure::Usage(m) = e { Failure::usage(format!("supervised training needs clean/: {m}")) } else { e })?;
        let (n, c): (Vec<_>, Vec<_>) = files.into_iter().unzip();
        Some((load_all(&n)?, load_all(&c)?))
    } else {
        None
    };
    let (noisy, clean) = match clean {
        Some((n, c)) => (n, Some(c)),
        None => {
            let paths = list_images(&noisy_dir).map_err(invalid)?;
            if paths.is_empty() {
                return Err(Failure::usage(format!("{}: no images found", noisy_dir.display())));
            }
            (load_all(&paths)?, None)
        }
    };

    let mut log_file = fs::File::create(&log_path).map_err(|e| Failure::runtime(format!("{}: {e}", log_path.display())))?;
    let mut log_err = None;
    log::info!("training {mode} on {} images ({} parameters)", noisy.len(), net_param_hint(&net));
    let data = TrainData { noisy: &noisy, clean: clean.as_deref(), noise_model: model.as_ref() };
    let outcome = run_training::<f32>(&tc, net, data, |e| {
        log::info!("{e}");
        if log_err.is_none() {
            if let Err(err) = writeln!(log_file, "{e}") {
                log_err = Some(err);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(Failure::runtime(format!("{}: {e}", log_path.display())));
    }
    save_checkpoint(&outcome.checkpoint, &a.out)?;
    println!(
        "best epoch {} val_loss {:.6} -> {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.best_val,
        a.out.display()
    );
    Ok(())
}

fn net_param_hint(net: &UNetConfig) -> String {
    pn2v::UNet32::zeros(*net).map(|n| n.param_count().to_string()).unwrap_or_else(|_| "?".into())
}

fn parse_coord(raw: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::usage(format!("--dump-posterior expects ROW,COL, got `{raw}`"));
    let (r, c) = raw.split_once(',').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

pub fn denoise(a: DenoiseArgs) -> Result<(), Failure> {
    let mut cfg = Settings::load(a.config.as_deref())?;
    let mode_raw: Option<String> = cfg.opt("mode", a.mode)?;
    let nm_path: Option<PathBuf> = cfg.opt("noise-model", a.noise_model)?;
    let tile: Option<usize> = cfg.opt("tile", a.tile)?;
    let overlap: Option<usize> = cfg.opt("overlap", a.overlap)?;
    cfg.finish()?;
    let dump = a.dump_posterior.iter().map(|s| parse_coord(s)).collect::<Result<Vec<_>, _>>()?;

    let ck: Checkpoint32 = load_checkpoint(&a.checkpoint).map_err(invalid)?;
    let mode = match mode_raw {
        Some(m) => parse_enum(&m)?,
        None if ck.mode == TrainMode::Pn2v => DenoiseMode::Mmse,
        None => DenoiseMode::N2vDirect,
    };
    let model: Option<NoiseModel> = nm_path.as_ref().map(|p| load_noise_model(p).map_err(invalid)).transpose()?;
    for w in check_mode(&ck, mode, model.as_ref()).map_err(invalid)? {
        log::warn!("{w}");
    }
    let net_cfg = *ck.net.config();
    let auto = TilingConfig::for_network(&net_cfg, DEFAULT_TILE_CORE);
    let overlap = overlap.unwrap_or(auto.overlap);
    let tiling = TilingConfig { tile: tile.unwrap_or(overlap * 2 + auto.tile - 2 * auto.overlap), overlap };
    tiling.validate(&net_cfg).map_err(invalid)?;

    let inputs = if a.input.is_dir() { list_images(&a.input).map_err(invalid)? } else { vec![a.input.clone()] };
    if inputs.is_empty() {
        return Err(Failure::usage(format!("{}: no images found", a.input.display())));
    }
    let images = load_all(&inputs)?;
    for (p, img) in inputs.iter().zip(&images) {
        let (h, w) = img.shape();
        if let Some((r, c)) = dump.iter().find(|&&(r, c)| r >= h || c >= w) {
            return Err(Failure::usage(format!("{}: posterior coordinate {r},{c} outside {h}x{w} image", p.display())));
        }
    }
    check_out_dir(&a.out, a.force)?;
    create_dir(&a.out)?;

    for (path, img) in inputs.iter().zip(&images) {
        let name = file_name(path);
        log::info!("denoising {name} ({mode})");
        let res = denoise_image(&ck, img, &tiling, mode, model.as_ref(), &dump)
            .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        for w in &res.warnings {
            log::warn!("{name}: {w}");
        }
        save_image(&res.image, a.out.join(&name))?;
        if !res.posteriors.is_empty() {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut text = String::new();
            for p in &res.posteriors {
                let _ = writeln!(text, "{p}");
            }
            write_file(&a.out.join(format!("{stem}.posterior.txt")), &text)?;
        }
    }
    println!("denoised {} image(s) into {}", inputs.len(), a.out.display());
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let mut cfg = Settings::load(a.config.as_deref())?;
    let metric_raw: String = cfg.get("metric", a.metric, MetricKind::Psnr.to_string())?;
    let records: Option<PathBuf> = cfg.opt("records", a.records)?;
    cfg.finish()?;
    let metric: MetricKind = parse_enum(&metric_raw)?;
    let files = matched_files(&a.pred, &a.gt)?;
    let names: Vec<String> = files.iter().map(|(p, _)| file_name(p)).collect();
    let (p, g): (Vec<_>, Vec<_>) = files.into_iter().unzip();
    let preds = load_all(&p)?;
    let gts = load_all(&g)?;
    let report = evaluate_set(&preds, &gts, metric)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    print!("{}", report.table(&names));
    if let Some(path) = records {
        write_file(&path, &report.records(&names))?;
    }
    Ok(())
}
