//! Implementations of the CLI subcommands. Each command resolves its
//! configuration, runs, writes its outputs, and records a run manifest
//! (resolved config + SHA-256 digests of inputs and outputs) next to the
//! primary output.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use functa_core::classify::{self, Classifier, ClassifierConfig};
use functa_core::codec::{self, checkpoints, Archive, ArrayData};
use functa_core::data::{self, GridItem, SyntheticKind, SyntheticSpec};
use functa_core::ddpm::{self, EpsNet, EpsNetConfig, NoiseSchedule};
use functa_core::flow::{self, FlowConfig, FlowModel};
use functa_core::functaset::{Functaset, NormStats};
use functa_core::infer::{self, MapConfig, Prior};
use functa_core::inr::{self, LatentModulatedSiren, SirenConfig};
use functa_core::meta::{inner_loop_fit, FitTask, InnerLoopConfig, MetaState};
use functa_core::opt::LrSchedule;
use functa_core::render::{RenderConfig, Subsample, View};
use functa_core::rng;
use functa_core::{FunctaError, Result};

use crate::config::Config;
use crate::manifest::Manifest;

// ---------------------------------------------------------------------------
// shared helpers

fn parse_kind(s: &str) -> Result<SyntheticKind> {
    match s {
        "blobs" => Ok(SyntheticKind::BlobImages),
        "voxels" => Ok(SyntheticKind::EllipsoidVoxels),
        "fields" => Ok(SyntheticKind::SphereFields),
        other => Err(FunctaError::Config(format!(
            "unknown dataset kind '{other}' (expected blobs|voxels|fields|scenes)"
        ))),
    }
}

fn dataset_spec(cfg: &mut Config) -> Result<(String, SyntheticSpec)> {
    let kind = cfg.get("kind", "blobs".to_string())?;
    let spec = SyntheticSpec {
        kind: if kind == "scenes" {
            SyntheticKind::BlobImages // placeholder; scene datasets bypass this
        } else {
            parse_kind(&kind)?
        },
        count: cfg.get("count", 32usize)?,
        resolution: cfg.get("resolution", 16usize)?,
        seed: cfg.get("data_seed", 0u64)?,
    };
    Ok((kind, spec))
}

fn render_config_from(cfg: &mut Config) -> Result<RenderConfig> {
    let size = cfg.get("render_size", 16usize)?;
    let rc = RenderConfig {
        height: size,
        width: size,
        num_points_per_ray: cfg.get("points_per_ray", 8usize)?,
        near: cfg.get("near", 2.0f64)?,
        far: cfg.get("far", 6.0f64)?,
        white_background: cfg.get("white_background", true)?,
    };
    rc.validate()?;
    Ok(rc)
}

fn inner_cfg_from(cfg: &mut Config, defaults: &InnerLoopConfig) -> Result<InnerLoopConfig> {
    Ok(InnerLoopConfig {
        n_inner: cfg.get("n_inner", defaults.n_inner)?,
        fixed_lr: cfg.get("fixed_inner_lr", defaults.fixed_lr)?,
        use_meta_sgd: cfg.get("use_meta_sgd", defaults.use_meta_sgd)?,
    })
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut s = String::from(header);
    s.push('\n');
    for row in rows {
        s.push_str(&row);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn load_meta(path: &Path) -> Result<MetaState> {
    checkpoints::load_meta_state(&Archive::load(path)?)
}

fn load_flow_model(path: &Path) -> Result<FlowModel> {
    checkpoints::load_flow(&Archive::load(path)?)
}

/// File extension for the decoded form of a base network's output domain.
fn decoded_ext(config: &SirenConfig) -> Result<&'static str> {
    match (config.in_dim, config.out_dim) {
        (2, 1) => Ok("pgm"),
        (2, 3) => Ok("ppm"),
        (3, 1) => Ok("vox"),
        (i, o) => Err(FunctaError::Config(format!(
            "cannot decode a {i}-in/{o}-out network to a file"
        ))),
    }
}

/// Evaluates the network at a dense grid and writes the matching file kind.
fn decode_to_file(
    model: &LatentModulatedSiren,
    phi: &Array2<f64>,
    resolution: usize,
    path: &Path,
) -> Result<()> {
    match (model.config.in_dim, model.config.out_dim) {
        (2, 1) => {
            let g = data::grid_2d(resolution, resolution);
            let p = model.forward(phi, &g.coords)?;
            data::save_pgm(path, resolution, resolution, &p)
        }
        (2, 3) => {
            let g = data::grid_2d(resolution, resolution);
            let p = model.forward(phi, &g.coords)?;
            data::save_ppm(path, resolution, resolution, &p)
        }
        (3, 1) => {
            let g = data::grid_3d(resolution);
            let p = model.forward(phi, &g.coords)?;
            data::save_voxels(path, [resolution; 3], &p)
        }
        (i, o) => Err(FunctaError::Config(format!(
            "cannot decode a {i}-in/{o}-out network to a file"
        ))),
    }
}

/// Loads a grayscale or color image as ((h, w), targets, channels).
fn load_image(path: &Path) -> Result<((usize, usize), Array2<f64>)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => {
            let (h, w, t) = data::load_pgm(path)?;
            Ok(((h, w), t))
        }
        Some("ppm") => {
            let (h, w, t) = data::load_ppm(path)?;
            Ok(((h, w), t))
        }
        other => Err(FunctaError::Config(format!(
            "unsupported image extension {other:?} (expected pgm or ppm)"
        ))),
    }
}

fn save_image(path: &Path, h: usize, w: usize, data_: &Array2<f64>) -> Result<()> {
    match data_.ncols() {
        1 => data::save_pgm(path, h, w, data_),
        3 => data::save_ppm(path, h, w, data_),
        c => Err(FunctaError::Shape(format!("{c}-channel image"))),
    }
}

/// Infers the class count from labels (at least 2).
fn class_count(labels: &[u32]) -> usize {
    (labels.iter().copied().max().unwrap_or(0) as usize + 1).max(2)
}

/// Loads the optional flow prior (flow checkpoint + stats source).
struct PriorParts {
    flow: FlowModel,
    stats: NormStats,
    label: Option<u32>,
}

fn load_prior(
    cfg: &mut Config,
    manifest: &mut Manifest,
) -> Result<Option<PriorParts>> {
    let Some(flow_path) = cfg.optional_path("flow")? else {
        return Ok(None);
    };
    let set_path = cfg.require_path("functaset")?;
    manifest.add_input(&flow_path)?;
    manifest.add_input(&set_path)?;
    let flow = load_flow_model(&flow_path)?;
    let set = Functaset::load(&set_path)?;
    let label = cfg.optional::<u32>("label")?;
    Ok(Some(PriorParts {
        flow,
        stats: set.stats,
        label,
    }))
}

fn map_cfg_from(cfg: &mut Config) -> Result<MapConfig> {
    let d = MapConfig::default();
    Ok(MapConfig {
        lambda: cfg.get("lambda", d.lambda)?,
        steps: cfg.get("steps", d.steps)?,
        lr: cfg.get("lr", d.lr)?,
    })
}

// ---------------------------------------------------------------------------
// meta-train

pub fn meta_train(cfg: &mut Config, workers: usize) -> Result<()> {
    let mut manifest = Manifest::new("meta-train", workers);
    let (kind, spec) = dataset_spec(cfg)?;
    let latent_dim = cfg.get("latent_dim", 64usize)?;
    let width = cfg.get("width", 32usize)?;
    let depth = cfg.get("depth", 2usize)?;
    let omega0 = cfg.get("omega0", 30.0f64)?;
    let inner = inner_cfg_from(cfg, &InnerLoopConfig::default())?;
    let outer_steps = cfg.get("outer_steps", 200usize)?;
    let batch_size = cfg.get("batch_size", 4usize)?;
    let outer_lr = cfg.get("outer_lr", 1e-4f64)?;
    let seed = cfg.get("seed", 0u64)?;
    let log_every = cfg.get("log_every", 50usize)?;
    let out = cfg.require_path("out")?;
    let loss_csv = cfg.optional_path("loss_csv")?;

    // Either dense-grid datapoints or posed scenes.
    enum Data {
        Grid {
            coords: Array2<f64>,
            items: Vec<GridItem>,
        },
        Scenes {
            items: Vec<data::SceneItem>,
            subsample: Subsample,
        },
    }
    let (siren_cfg, dataset) = if kind == "scenes" {
        let rc = render_config_from(cfg)?;
        let n_views = cfg.get("n_views", 5usize)?;
        let subsample = Subsample {
            num_views: cfg.get("subsample_views", 2usize)?,
            num_pixels: cfg.get("subsample_pixels", 64usize)?,
            seed: cfg.get("subsample_seed", 0u64)?,
        };
        let items = (0..spec.count)
            .map(|i| data::make_scene(spec.seed, i, n_views, &rc))
            .collect::<Result<Vec<_>>>()?;
        (
            SirenConfig::new(3, 4, width, depth).with_omega0(omega0),
            Data::Scenes { items, subsample },
        )
    } else {
        let coords = data::coords_for(&spec).coords;
        let items = data::make_dataset(&spec);
        let (in_dim, out_dim) = match spec.kind {
            SyntheticKind::BlobImages => (2, 1),
            SyntheticKind::EllipsoidVoxels => (3, 1),
            SyntheticKind::SphereFields => (2, 1),
        };
        (
            SirenConfig::new(in_dim, out_dim, width, depth).with_omega0(omega0),
            Data::Grid { coords, items },
        )
    };
    cfg.reject_unused()?;

    let model = LatentModulatedSiren::init(siren_cfg, latent_dim, seed)?;
    let mut state = MetaState::new(model, inner, outer_lr, seed.wrapping_add(1));
    let count = match &dataset {
        Data::Grid { items, .. } => items.len(),
        Data::Scenes { items, .. } => items.len(),
    };
    if count == 0 || batch_size == 0 {
        return Err(FunctaError::Config("empty dataset or batch".into()));
    }

    let mut r = rng::seeded(seed.wrapping_add(2));
    let mut losses = Vec::with_capacity(outer_steps);
    for step in 0..outer_steps {
        let idx = rng::choose(&mut r, count, batch_size.min(count));
        let tasks: Vec<FitTask> = match &dataset {
            Data::Grid { coords, items } => idx
                .iter()
                .map(|&i| FitTask::Grid {
                    coords,
                    targets: &items[i].targets,
                })
                .collect(),
            Data::Scenes { items, subsample } => idx
                .iter()
                .map(|&i| {
                    let mut s = *subsample;
                    s.seed = s.seed.wrapping_add(i as u64);
                    FitTask::Scene {
                        views: &items[i].views,
                        subsample: s,
                        config: items[i].config.clone(),
                    }
                })
                .collect(),
        };
        let loss = state.meta_step(&tasks)?;
        losses.push(loss);
        if log_every > 0 && (step + 1) % log_every == 0 {
            println!("step {}/{outer_steps}: loss {loss:.6}", step + 1);
        }
    }

    checkpoints::save_meta_state(&state).save(&out)?;
    manifest.record_config(cfg);
    manifest.add_output(&out)?;
    if let Some(csv) = &loss_csv {
        write_csv(
            csv,
            "iter,loss",
            losses.iter().enumerate().map(|(i, l)| format!("{},{l}", i + 1)),
        )?;
        manifest.add_output(csv)?;
    }
    let mpath = manifest.write_for(&out)?;
    println!(
        "wrote {} ({} outer steps, final loss {:.6}); manifest {}",
        out.display(),
        outer_steps,
        losses.last().copied().unwrap_or(f64::NAN),
        mpath.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit-functaset

pub fn fit_functaset(cfg: &mut Config, workers: usize) -> Result<()> {
    let mut manifest = Manifest::new("fit-functaset", workers);
    let model_path = cfg.require_path("model")?;
    let (kind, spec) = dataset_spec(cfg)?;
    if kind == "scenes" {
        return Err(FunctaError::Config(
            "fit-functaset supports grid kinds only (blobs|voxels|fields)".into(),
        ));
    }
    let split = cfg.get("split", "train".to_string())?;
    let norm_factor = cfg.get("norm_factor", 4.0f64)?;
    let stats_from = cfg.optional_path("stats_from")?;
    let out = cfg.require_path("out")?;

    manifest.add_input(&model_path)?;
    let state = load_meta(&model_path)?;
    let inner = inner_cfg_from(cfg, &state.inner_cfg)?;
    cfg.reject_unused()?;

    let coords = data::coords_for(&spec).coords;
    let items = data::make_dataset(&spec);
    if items.is_empty() {
        return Err(FunctaError::Config("empty dataset".into()));
    }

    // Independent per-item fits; the reduction is ordered by item index, so
    // the result is identical for any worker count.
    let n = items.len();
    let fit_one = |i: usize| -> (usize, Result<(Array2<f64>, Vec<f64>)>) {
        let task = FitTask::Grid {
            coords: &coords,
            targets: &items[i].targets,
        };
        (
            i,
            inner_loop_fit(&state.model, Some(&state.inner_lrs), &inner, &task),
        )
    };
    let mut results: Vec<Option<(Array2<f64>, f64)>> = vec![None; n];
    let mut excluded = Vec::new();
    let raw: Vec<(usize, Result<(Array2<f64>, Vec<f64>)>)> = if workers <= 1 {
        (0..n).map(fit_one).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers.min(n))
                .map(|w| {
                    let fit_one = &fit_one;
                    s.spawn(move || {
                        (w..n).step_by(workers).map(fit_one).collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };
    for (i, res) in raw {
        match res {
            Ok((phi, losses)) if phi.iter().all(|v| v.is_finite()) => {
                results[i] = Some((phi, *losses.last().unwrap()));
            }
            Ok(_) | Err(FunctaError::Numerical(_)) => excluded.push(i),
            Err(e) => return Err(e),
        }
    }
    excluded.sort_unstable();
    if !excluded.is_empty() {
        eprintln!(
            "warning: {} item(s) failed to fit and were excluded: {excluded:?}",
            excluded.len()
        );
    }

    let kept: Vec<usize> = (0..n).filter(|i| results[*i].is_some()).collect();
    if kept.is_empty() {
        return Err(FunctaError::Numerical("every fit diverged".into()));
    }
    let mut mods = Array2::zeros((kept.len(), state.model.latent_dim));
    let mut mses = Vec::with_capacity(kept.len());
    let mut labels = Vec::with_capacity(kept.len());
    for (row, &i) in kept.iter().enumerate() {
        let (phi, mse) = results[i].take().unwrap();
        mods.row_mut(row).assign(&phi.row(0));
        mses.push(mse);
        labels.push(items[i].label.unwrap_or(0) as u32);
    }

    let stats = match &stats_from {
        Some(p) => {
            manifest.add_input(p)?;
            Functaset::load(p)?.stats
        }
        None => NormStats::from_modulations(&mods, norm_factor)?,
    };
    let digest = codec::params_digest(&state.model.params);
    let set = Functaset::new(mods, labels, split, state.model.config.clone(), digest, stats)?;
    set.save(&out)?;

    manifest.record_config(cfg);
    manifest.add_output(&out)?;
    let mpath = manifest.write_for(&out)?;
    let mean_psnr = inr::dataset_psnr(&mses);
    println!(
        "wrote {} ({} entries, mean PSNR {mean_psnr:.2} dB); manifest {}",
        out.display(),
        set.len(),
        mpath.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// flow-train

pub fn flow_train(cfg: &mut Config, workers: usize) -> Result<()> {
    let mut manifest = Manifest::new("flow-train", workers);
    let set_path = cfg.require_path("functaset")?;
    manifest.add_input(&set_path)?;
    let set = Functaset::load(&set_path)?;

    let mut fc = FlowConfig::new(set.latent_dim, cfg.get("n_layers", 4usize)?);
    fc.n_bins = cfg.get("n_bins", fc.n_bins)?;
    fc.tail_bound = cfg.get("tail_bound", fc.tail_bound)?;
    fc.hidden = cfg.get("hidden", fc.hidden)?;
    fc.embed_dim = cfg.get("embed_dim", fc.embed_dim)?;
    fc.base_std = cfg.get("base_std", fc.base_std)?;
    fc.dropout = cfg.get("dropout", fc.dropout)?;
    let conditional = cfg.get("conditional", false)?;
    if conditional {
        fc.n_classes = class_count(&set.labels);
    }
    let iters = cfg.get("iters", 500usize)?;
    let batch = cfg.get("batch", 32usize)?;
    let lr = cfg.get("lr", 3e-4f64)?;
    let warmup = cfg.get("warmup", 100u64)?;
    let seed = cfg.get("seed", 0u64)?;
    let out = cfg.require_path("out")?;
    let loss_csv = cfg.optional_path("loss_csv")?;
    cfg.reject_unused()?;

    let mut model = FlowModel::init(fc, seed)?;
    let data_ = set.normalized();
    let labels = conditional.then(|| set.labels.clone());
    let schedule = LrSchedule::new(lr, warmup);
    let losses = flow::train_flow(
        &mut model,
        &data_,
        labels.as_deref(),
        iters,
        batch,
        seed.wrapping_add(1),
        &schedule,
    )?;

    checkpoints::save_flow(&model).save(&out)?;
    manifest.record_config(cfg);
    manifest.add_output(&out)?;
    if let Some(csv) = &loss_csv {
        write_csv(
            csv,
            "iter,nll",
            losses.iter().enumerate().map(|(i, l)| format!("{},{l}", i + 1)),
        )?;
        manifest.add_output(csv)?;
    }
    let mpath = manifest.write_for(&out)?;
    println!(
        "wrote {} (final NLL {:.4}); manifest {}",
        out.display(),
        losses.last().copied().unwrap_or(f64::NAN),
        mpath.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sample decoding shared by flow-sample and ddpm-sample

#[allow(clippy::too_many_arguments)]
fn write_samples(
    manifest: &mut Manifest,
    cfg: &mut Config,
    samples_z: Array2<f64>,
    set: &Functaset,
    meta_path: &Path,
    out_dir: &Path,
    resolution: usize,
    command: &str,
) -> Result<()> {
    let state = load_meta(meta_path)?;
    codec::checkpoints::check_base_match(&set.params_digest, &state.model.params)?;
    let mods = set.stats.denormalize(&samples_z)?;

    std::fs::create_dir_all(out_dir)?;
    let mods_path = out_dir.join("modulations.fns");
    let mut archive = Archive::new("sampled-modulations");
    archive.set_meta("command", command);
    archive.push_array("modulations", ArrayData::F64(mods.clone()));
    archive.save(&mods_path)?;

    let ext = decoded_ext(&state.model.config)?;
    let mut image_paths = Vec::new();
    for i in 0..mods.nrows() {
        let phi = mods.row(i).insert_axis(ndarray::Axis(0)).to_owned();
        let path = out_dir.join(format!("sample{i:03}.{ext}"));
        decode_to_file(&state.model, &phi, resolution, &path)?;
        image_paths.push(path);
    }

    manifest.record_config(cfg);
    manifest.add_output(&mods_path)?;
    for p in &image_paths {
        manifest.add_output(p)?;
    }
    let mpath = manifest.write_for(&mods_path)?;
    println!(
        "wrote {} samples to {}; manifest {}",
        mods.nrows(),
        out_dir.display(),
        mpath.display()
    );
    Ok(())
}

pub fn flow_sample(cfg: &mut Config, workers: usize) -> Result<()> {
    let mut manifest = Manifest::new("flow-sample", workers);
    let flow_path = cfg.require_path("flow")?;
    let set_path = cfg.require_path("functaset")?;
    let meta_path = cfg.require_path("model")?;
    let count = cfg.get("count", 16usize)?;
    let temperature = cfg.get("temperature", 1.0f64)?;
    let label = cfg.optional::<u32>("label")?;
    let seed = cfg.get("seed", 0u64)?;
    let resolution = cfg.get("resolution", 16usize)?;
    let out_dir = cfg.require_path("out_dir")?;

    manifest.add_input(&flow_path)?;
    manifest.add_input(&set_path)?;
    manifest.add_input(&meta_path)?;
    let model = load_flow_model(&flow_path)?;
    let set = Functaset::load(&set_path)?;

    let labels: Option<Vec<u32>> = label.map(|l| vec![l; count]);
    let z = model.sample(count, labels.as_deref(), temperature, seed)?;
    cfg.reject_unused()?;
    write_samples(
        &mut manifest,
        cfg,
        z,
        &set,
        &meta_path,
        &out_dir,
        resolution,
        "flow-sample",
    )
}

// ---------------------------------------------------------------------------
// ddpm-train / ddpm-sample

pub fn ddpm_train(cfg: &mut Config, workers: usize) -> Result<()> {
    let mut manifest = Manifest::new("ddpm-train", workers);
    let set_path = cfg.require_path("functaset")?;
    manifest.add_input(&set_path)?;
    let set = Functaset::load(&set_path)?;

    let mut nc = EpsNetConfig::new(
        set.latent_dim,
        cfg.get("width", 64usize)?,
        cfg.get("n_blocks", 3usize)?,
    );
    nc.dropout = cfg.get("dropout", 0.0f64)?;
    let schedule_steps = cfg.get("schedule_steps", 1000usize)?;
    let iters = cfg.get("iters", 500usize)?;
    let batch = cfg.get("batch", 32usize)?;
    let lr = cfg.get("lr", 1e-3f64)?;
    let warmup = cfg.get("warmup", 100u64)?;
    let seed = cfg.get("seed", 0u64)?;
    let out = cfg.require_path("out")?;
    let loss_csv = cfg.optional_path("loss_csv")?;
    cfg.reject_unused()?;

    let schedule = NoiseSchedule::linear(schedule_steps)?;
    let mut net = EpsNet::init(nc, seed)?;
    let data_ = set.normalized();
    let lr_schedule = LrSchedule::new(lr, warmup);
    let losses = ddpm::train_ddpm(
        &mut net,
        &schedule,
        &data_,
        iters,
        batch,
        seed.wrapping_add(1),
        &lr_schedule,
    )?;

    checkpoints::save_eps_net(&net, schedule_steps).save(&out)?;
    manifest.record_config(cfg);
    manifest.add_output(&out)?;
    if let Some(csv) = &loss_csv {
        write_csv(
            csv,
            "iter,loss",
            losses.iter().enumerate().map(|(i, l)| format!("{},{l}", i + 1)),
        )?;
        manifest.add_output(csv)?;
    }
    let mpath = manifest.write_for(&out)?;
    println!(
        "wrote {} (final loss {:.4}); manifest {}",
        out.display(),
        losses.last().copied().unwrap_or(f64::NAN),
        mpath.display()
    );
    Ok(())
}

pub fn ddpm_sample(cfg: &mut Config, workers: usize) -> Result<()> {
    let mut manifest = Manifest::new("ddpm-sample", workers);
    let ddpm_path = cfg.require_path("ddpm")?;
    let set_path = cfg.require_path("functaset")?;
    let meta_path = cfg.require_path("model")?;
    let count = cfg.get("count", 16usize)?;
    let seed = cfg.get("seed", 0u64)?;
    let resolution = cfg.get("resolution", 16usize)?;
    let out_dir = cfg.require_path("out_dir")?;

    manifest.add_input(&ddpm_path)?;
    manifest.add_input(&set_path)?;
    manifest.add_input(&meta_path)?;
    let (net, schedule_steps) = checkpoints::load_eps_net(&Archive::load(&ddpm_path)?)?;
    let set = Functaset::load(&set_path)?;
    let schedule = NoiseSchedule::linear(schedule_steps)?;
    let z = ddpm::sample(&net, &schedule, count, seed)?;
    cfg.reject_unused()?;
    write_samples(
        &mut manifest,
        cfg,
        z,
        &set,
        &meta_path,
        &out_dir,
        resolution,
        "ddpm-sample",
    )
}

// ---------------------------------------------------------------------------
// impute

pub fn impute(cfg: &mut Config, workers: usize) -> Result<()> {
    let mut manifest = Manifest::new("impute", workers);
    let model_path = cfg.require_path("model")?;
    let input = cfg.require_path("input")?;
    let mask_path = cfg.require_path("mask")?;
    let out = cfg.require_path("out")?;
    let metrics_csv = cfg.optional_path("metrics_csv")?;
    let map_cfg = map_cfg_from(cfg)?;
    let prior_parts = load_prior(cfg, &mut manifest)?;
    cfg.reject_unused()?;

    manifest.add_input(&model_path)?;
    manifest.add_input(&input)?;
    manifest.add_input(&mask_path)?;
    let state = load_meta(&model_path)?;
    let ((h, w), targets) = load_image(&input)?;
    if state.model.config.in_dim != 2 || state.model.config.out_dim != targets.ncols() {
        return Err(FunctaError::Config(format!(
            "model domain ({} in, {} out) does not match a {}-channel image",
            state.model.config.in_dim,
            state.model.config.out_dim,
            targets.ncols()
        )));
    }
    let grid = data::grid_2d(h, w);
    let mask = data::load_mask(&mask_path, grid.coords.nrows())?;

    let prior = prior_parts.as_ref().map(|p| Prior {
        flow: &p.flow,
        stats: &p.stats,
        label: p.label,
    });
    let (preds, fit) = infer::impute(
        &state.model,
        &grid.coords,
        &targets,
        &mask,
        prior.as_ref(),
        &map_cfg,
    )?;
    save_image(&out, h, w, &preds)?;

    // PSNR over observed / unobserved / all elements.
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for (i, (p, t)) in preds.rows().into_iter().zip(targets.rows()).enumerate() {
        let se: f64 = p
            .iter()
            .zip(t.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let k = if mask[i] { 0 } else { 1 };
        sums[k] += se;
        counts[k] += preds.ncols();
        sums[2] += se;
        counts[2] += preds.ncols();
    }
    let psnrs: Vec<f64> = (0..3)
        .map(|k| inr::psnr(sums[k] / counts[k].max(1) as f64))
        .collect();
    println!(
        "PSNR observed {:.2} dB, unobserved {:.2} dB, overall {:.2} dB",
        psnrs[0], psnrs[1], psnrs[2]
    );

    manifest.record_config(cfg);
    manifest.add_output(&out)?;
    if let Some(csv) = &metrics_csv {
        write_csv(
            csv,
            "metric,value",
            [
                format!("psnr_observed,{}", psnrs[0]),
                format!("psnr_unobserved,{}", psnrs[1]),
                format!("psnr_overall,{}", psnrs[2]),
                format!("final_objective,{}", fit.trace.last().copied().unwrap_or(f64::NAN)),
            ],
        )?;
        manifest.add_output(csv)?;
    }
    let mpath = manifest.write_for(&out)?;
    println!("wrote {}; manifest {}", out.display(), mpath.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// novel-view

pub fn novel_view(cfg: &mut Config, workers: usize) -> Result<()> {
    let mut manifest = Manifest::new("novel-view", workers);
    let model_path = cfg.require_path("model")?;
    let views_dir = cfg.require_path("views")?;
    let target_pose_path = cfg.require_path("target_pose")?;
    let out = cfg.require_path("out")?;
    let points_per_ray = cfg.get("points_per_ray", 8usize)?;
    let near = cfg.get("near", 2.0f64)?;
    let far = cfg.get("far", 6.0f64)?;
    let white_background = cfg.get("white_background", true)?;
    let subsample = Subsample {
        num_views: cfg.get("subsample_views", 2usize)?,
        num_pixels: cfg.get("subsample_pixels", 128usize)?,
        seed: cfg.get("subsample_seed", 0u64)?,
    };
    let map_cfg = map_cfg_from(cfg)?;
    let prior_parts = load_prior(cfg, &mut manifest)?;
    cfg.reject_unused()?;

    manifest.add_input(&model_path)?;
    manifest.add_input(&target_pose_path)?;
    let state = load_meta(&model_path)?;

    // Observed views: every <stem>.pose with a matching <stem>.ppm.
    let mut stems: Vec<PathBuf> = std::fs::read_dir(&views_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("pose"))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(FunctaError::Config(format!(
            "no .pose files in {}",
            views_dir.display()
        )));
    }
    let mut views = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for pose_path in &stems {
        let img_path = pose_path.with_extension("ppm");
        manifest.add_input(pose_path)?;
        manifest.add_input(&img_path)?;
        let pose = data::load_pose(pose_path)?;
        let (h, w, image) = data::load_ppm(&img_path)?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(FunctaError::Shape("views differ in size".into()))
            }
            _ => {}
        }
        views.push(View { pose, image });
    }
    let (h, w) = dims.unwrap();
    let rc = RenderConfig {
        height: h,
        width: w,
        num_points_per_ray: points_per_ray,
        near,
        far,
        white_background,
    };
    rc.validate()?;
    let target_pose = data::load_pose(&target_pose_path)?;

    let prior = prior_parts.as_ref().map(|p| Prior {
        flow: &p.flow,
        stats: &p.stats,
        label: p.label,
    });
    let (images, fit) = infer::novel_view(
        &state.model,
        &views,
        &[target_pose],
        &rc,
        &subsample,
        prior.as_ref(),
        &map_cfg,
    )?;
    data::save_ppm(&out, h, w, &images[0])?;

    manifest.record_config(cfg);
    manifest.add_output(&out)?;
    let mpath = manifest.write_for(&out)?;
    println!(
        "wrote {} (final objective {:.6}); manifest {}",
        out.display(),
        fit.trace.last().copied().unwrap_or(f64::NAN),
        mpath.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// classify-train / classify-eval

pub fn classify_train(cfg: &mut Config, workers: usize) -> Result<()> {
    let mut manifest = Manifest::new("classify-train", workers);
    let set_path = cfg.require_path("functaset")?;
    manifest.add_input(&set_path)?;
    let set = Functaset::load(&set_path)?;

    let cc = ClassifierConfig {
        in_dim: set.latent_dim,
        n_classes: class_count(&set.labels),
        width: cfg.get("width", 128usize)?,
        depth: cfg.get("depth", 2usize)?,
        dropout: cfg.get("dropout", 0.0f64)?,
    };
    let iters = cfg.get("iters", 500usize)?;
    let batch = cfg.get("batch", 32usize)?;
    let lr = cfg.get("lr", 1e-4f64)?;
    let seed = cfg.get("seed", 0u64)?;
    let shuffle_labels = cfg.get("shuffle_labels", false)?;
    let out = cfg.require_path("out")?;
    let metrics_csv = cfg.optional_path("metrics_csv")?;
    cfg.reject_unused()?;

    let mut model = Classifier::init(cc, seed)?;
    let data_ = set.normalized();
    // Optional label shuffling for a chance-level sanity check.
    let labels: Vec<u32> = if shuffle_labels {
        let mut r = rng::seeded(seed.wrapping_add(7));
        let perm = rng::permutation(&mut r, set.labels.len());
        perm.iter().map(|&i| set.labels[i]).collect()
    } else {
        set.labels.clone()
    };
    let stats = classify::train_classifier(
        &mut model,
        &data_,
        &labels,
        iters,
        batch,
        lr,
        seed.wrapping_add(1),
    )?;

    checkpoints::save_classifier(&model).save(&out)?;
    manifest.record_config(cfg);
    manifest.add_output(&out)?;
    if let Some(csv) = &metrics_csv {
        write_csv(
            csv,
            "iter,loss",
            stats
                .losses
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{},{l}", i + 1)),
        )?;
        manifest.add_output(csv)?;
    }
    let mpath = manifest.write_for(&out)?;
    println!(
        "wrote {} (EMA train accuracy {:.3}); manifest {}",
        out.display(),
        stats.ema_accuracy,
        mpath.display()
    );
    Ok(())
}

pub fn classify_eval(cfg: &mut Config, workers: usize) -> Result<()> {
    let mut manifest = Manifest::new("classify-eval", workers);
    let clf_path = cfg.require_path("classifier")?;
    let set_path = cfg.require_path("functaset")?;
    let csv = cfg.optional_path("metrics_csv")?;
    cfg.reject_unused()?;

    manifest.add_input(&clf_path)?;
    manifest.add_input(&set_path)?;
    let model = checkpoints::load_classifier(&Archive::load(&clf_path)?)?;
    let set = Functaset::load(&set_path)?;
    let eval = classify::evaluate(&model, &set.normalized(), &set.labels)?;
    println!("accuracy {:.4} over {} items", eval.accuracy, set.len());
    for (class, acc, count) in &eval.per_class {
        println!("  class {class}: {acc:.4} ({count} items)");
    }

    manifest.record_config(cfg);
    if let Some(csv) = &csv {
        let mut rows = vec![format!("overall,{},{}", eval.accuracy, set.len())];
        rows.extend(
            eval.per_class
                .iter()
                .map(|(c, a, n)| format!("class_{c},{a},{n}")),
        );
        write_csv(csv, "group,accuracy,count", rows)?;
        manifest.add_output(csv)?;
        let mpath = manifest.write_for(csv)?;
        println!("wrote {}; manifest {}", csv.display(), mpath.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// render

pub fn render(cfg: &mut Config, workers: usize) -> Result<()> {
    let mut manifest = Manifest::new("render", workers);
    let model_path = cfg.require_path("model")?;
    let set_path = cfg.require_path("functaset")?;
    let index = cfg.get("index", 0usize)?;
    let resolution = cfg.get("resolution", 16usize)?;
    let out = cfg.require_path("out")?;
    cfg.reject_unused()?;

    manifest.add_input(&model_path)?;
    manifest.add_input(&set_path)?;
    let state = load_meta(&model_path)?;
    let set = Functaset::load(&set_path)?;
    codec::checkpoints::check_base_match(&set.params_digest, &state.model.params)?;
    if index >= set.len() {
        return Err(FunctaError::Config(format!(
            "index {index} out of range for {} entries",
            set.len()
        )));
    }
    let phi = set
        .modulations
        .row(index)
        .insert_axis(ndarray::Axis(0))
        .to_owned();
    decode_to_file(&state.model, &phi, resolution, &out)?;

    manifest.record_config(cfg);
    manifest.add_output(&out)?;
    let mpath = manifest.write_for(&out)?;
    println!("wrote {}; manifest {}", out.display(), mpath.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// perturb-analyze

pub fn perturb_analyze(cfg: &mut Config, workers: usize) -> Result<()> {
    let mut manifest = Manifest::new("perturb-analyze", workers);
    let model_path = cfg.require_path("model")?;
    let set_path = cfg.require_path("functaset")?;
    let index = cfg.get("index", 0usize)?;
    let delta = cfg.get("delta", 0.01f64)?;
    let resolution = cfg.get("resolution", 16usize)?;
    let out = cfg.require_path("out")?;
    let map_out = cfg.optional_path("map_out")?;
    let map_dim = cfg.get("map_dim", 0usize)?;
    cfg.reject_unused()?;

    manifest.add_input(&model_path)?;
    manifest.add_input(&set_path)?;
    let state = load_meta(&model_path)?;
    let set = Functaset::load(&set_path)?;
    codec::checkpoints::check_base_match(&set.params_digest, &state.model.params)?;
    if index >= set.len() {
        return Err(FunctaError::Config(format!(
            "index {index} out of range for {} entries",
            set.len()
        )));
    }
    let phi = set
        .modulations
        .row(index)
        .insert_axis(ndarray::Axis(0))
        .to_owned();
    let coords = match state.model.config.in_dim {
        2 => data::grid_2d(resolution, resolution).coords,
        3 => data::grid_3d(resolution).coords,
        d => {
            return Err(FunctaError::Config(format!(
                "unsupported input dimension {d}"
            )))
        }
    };

    let shift_dim = state.model.config.shift_dim();
    let mut rows = Vec::with_capacity(shift_dim);
    let mut saved_map = None;
    for d in 0..shift_dim {
        let (l1, rmse) = inr::perturb_modulation_rmse(&state.model, &phi, d, delta, &coords)?;
        rows.push(format!("{d},{rmse}"));
        if d == map_dim {
            saved_map = Some(l1);
        }
    }
    write_csv(&out, "shift_dim,rmse", rows)?;

    manifest.record_config(cfg);
    manifest.add_output(&out)?;
    if let Some(map_path) = &map_out {
        let l1 = saved_map.ok_or_else(|| {
            FunctaError::Config(format!("map_dim {map_dim} out of range {shift_dim}"))
        })?;
        if state.model.config.in_dim != 2 {
            return Err(FunctaError::Config(
                "map_out requires a 2-D input domain".into(),
            ));
        }
        // Normalize the error map into [0, 1] for visualization.
        let max = l1.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
        let gray: Array2<f64> = if l1.ncols() > 1 {
            let mean = l1.mean_axis(ndarray::Axis(1)).unwrap();
            mean.insert_axis(ndarray::Axis(1))
        } else {
            l1
        };
        let per_pixel = gray / max;
        data::save_pgm(map_path, resolution, resolution, &per_pixel)?;
        manifest.add_output(map_path)?;
    }
    let mpath = manifest.write_for(&out)?;
    println!("wrote {}; manifest {}", out.display(), mpath.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report

/// With `--manifest`: re-verifies every recorded digest. With a config
/// naming one or more checkpoints (`models=a.ckpt,b.ckpt`) and a dataset:
/// prints a mean-PSNR-per-inner-step table per checkpoint (rows keyed by
/// latent dimension), optionally written as CSV.
pub fn report(
    manifest_path: Option<&Path>,
    cfg: &mut Config,
    workers: usize,
) -> Result<()> {
    if let Some(mp) = manifest_path {
        let (lines, ok) = crate::manifest::verify(mp)?;
        for line in lines {
            println!("{line}");
        }
        if ok {
            println!("all digests verified");
            return Ok(());
        }
        return Err(FunctaError::Digest {
            found: "see report above".into(),
            expected: "manifest digests".into(),
        });
    }

    let mut manifest = Manifest::new("report", workers);
    let models: String = cfg.require("models")?;
    let (kind, spec) = dataset_spec(cfg)?;
    if kind == "scenes" {
        return Err(FunctaError::Config("report supports grid kinds only".into()));
    }
    let out = cfg.optional_path("out")?;

    let coords = data::coords_for(&spec).coords;
    let items = data::make_dataset(&spec);
    if items.is_empty() {
        return Err(FunctaError::Config("empty dataset".into()));
    }

    let mut rows = Vec::new();
    for model_path in models.split(',') {
        let path = Path::new(model_path.trim());
        manifest.add_input(path)?;
        let state = load_meta(path)?;
        let n_steps = state.inner_cfg.n_inner;
        let mut sums = vec![0.0f64; n_steps + 1];
        let mut n_ok = 0usize;
        for item in &items {
            let task = FitTask::Grid {
                coords: &coords,
                targets: &item.targets,
            };
            match inner_loop_fit(&state.model, Some(&state.inner_lrs), &state.inner_cfg, &task) {
                Ok((_, losses)) => {
                    for (k, m) in losses.iter().enumerate() {
                        sums[k] += inr::psnr(*m);
                    }
                    n_ok += 1;
                }
                Err(FunctaError::Numerical(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if n_ok == 0 {
            return Err(FunctaError::Numerical("every fit diverged".into()));
        }
        let psnrs: Vec<f64> = sums.iter().map(|s| s / n_ok as f64).collect();
        let cells: Vec<String> = psnrs.iter().map(|p| format!("{p:.2}")).collect();
        println!(
            "latent_dim {:3} ({}): PSNR by inner step [{}] dB over {} items",
            state.model.latent_dim,
            path.display(),
            cells.join(", "),
            n_ok
        );
        let mut row = format!("{},{}", path.display(), state.model.latent_dim);
        for p in &psnrs {
            row.push_str(&format!(",{p}"));
        }
        rows.push(row);
    }
    cfg.reject_unused()?;

    manifest.record_config(cfg);
    if let Some(csv) = &out {
        let max_steps = rows
            .iter()
            .map(|r| r.matches(',').count() - 1)
            .max()
            .unwrap_or(0);
        let header: Vec<String> = (0..max_steps).map(|k| format!("psnr_step{k}")).collect();
        write_csv(csv, &format!("model,latent_dim,{}", header.join(",")), rows)?;
        manifest.add_output(csv)?;
        let mpath = manifest.write_for(csv)?;
        println!("wrote {}; manifest {}", csv.display(), mpath.display());
    }
    Ok(())
}
