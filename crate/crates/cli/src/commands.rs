use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ttr_core::align::{
    predict_graph, read_reconstruction, solve_alignment, write_reconstruction, PairGraph, Reconstruction, POSES_FILE,
};
use ttr_core::eval::evaluate;
use ttr_core::metrics::{
    diagnose_consistency, mean, mean_discrepancy, render_heatmap_svg, CloudRow, ConsistencyReport, DepthRow,
};
use ttr_core::net::{load_prompts, load_weights, save_prompts, save_weights, ModelConfig, PromptSet, Weights};
use ttr_core::pretrain::{load_optimizer, save_optimizer, write_loss_csv, TrainConfig, TrainState};
use ttr_core::scene::{generate_scene, read_archive, write_archive, write_grid, GenerationConfig, Grid, SceneBundle, MANIFEST_FILE};
use ttr_core::table::write_csv;
use ttr_core::ttt::{adapt as run_adapt, write_trace_csv};
use ttr_core::{Error, Result};

use crate::config::{self, required};
use crate::{AdaptArgs, DiagnoseArgs, EvalArgs, PretrainArgs, ReconstructArgs, SynthArgs};

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Input(format!("{}: {e}", path.display()))
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Input(format!("{} exists and is not a directory", dir.display())));
        }
        let used = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
        if used && !force {
            return Err(Error::Input(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn images(scene: &SceneBundle) -> Vec<Vec<f64>> {
    scene.views.iter().map(|v| v.image.clone()).collect()
}

fn check_scene_size(scene: &SceneBundle, model: &ModelConfig) -> Result<()> {
    if (scene.width(), scene.height()) != (model.width, model.height) {
        return Err(Error::Input(format!(
            "scene is {}×{} but the model expects {}×{}",
            scene.width(),
            scene.height(),
            model.width,
            model.height
        )));
    }
    Ok(())
}

/// Backbone weights plus optional tuned prompts, with the model config the
/// prompts were tuned under.
fn load_model(weights: &Path, prompts: Option<&Path>) -> Result<(ModelConfig, Weights, Option<PromptSet>)> {
    let (model, w) = load_weights(weights)?;
    let Some(path) = prompts else {
        return Ok((model, w, None));
    };
    let (pmodel, p) = load_prompts(path)?;
    let backbone = ModelConfig {
        prompt_len: model.prompt_len,
        prompt_mode: model.prompt_mode,
        ..pmodel.clone()
    };
    if backbone != model {
        return Err(Error::Input(format!(
            "prompts in {} were tuned for a different backbone than {}",
            path.display(),
            weights.display()
        )));
    }
    Ok((pmodel, w, Some(p)))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: config::SynthConfig = config::load(a.common.config.as_deref())?;
    if a.short_baseline {
        cfg.scene.baseline = GenerationConfig::short_baseline().baseline;
    }
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.scene.views = a.views.unwrap_or(cfg.scene.views);
    cfg.scene.width = a.width.unwrap_or(cfg.scene.width);
    cfg.scene.height = a.height.unwrap_or(cfg.scene.height);
    cfg.out = a.common.out.or(cfg.out);
    let out = required(&cfg.out, "out")?.to_path_buf();
    cfg.scene.validate()?;
    prepare_out(&out, a.common.force)?;
    let scene = generate_scene(cfg.seed, &cfg.scene)?;
    write_archive(&scene, &out)?;
    config::write_resolved(&out, &cfg)?;
    log::info!("wrote {} views of scene {} to {}", scene.num_views(), cfg.seed, out.display());
    Ok(())
}

/// Generated pool `index` for streamed pretraining.
fn scene_pool(data: &config::DataConfig, index: usize) -> Vec<SceneBundle> {
    let first = data.first_seed + (index * data.pool) as u64;
    (first..first + data.pool as u64)
        .filter_map(|seed| match generate_scene(seed, &data.scene) {
            Ok(s) => Some(s),
            Err(e) => {
                log::warn!("skipping training scene {seed}: {e}");
                None
            }
        })
        .collect()
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg: config::PretrainConfig = config::load(a.common.config.as_deref())?;
    cfg.train.steps = a.steps.unwrap_or(cfg.train.steps);
    cfg.train.batch_pairs = a.batch_pairs.unwrap_or(cfg.train.batch_pairs);
    cfg.train.lr = a.lr.unwrap_or(cfg.train.lr);
    cfg.train.seed = a.seed.unwrap_or(cfg.train.seed);
    cfg.overfit = a.overfit.or(cfg.overfit);
    cfg.out = a.common.out.or(cfg.out);
    let out = required(&cfg.out, "out")?.to_path_buf();
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg.checkpoint_every == 0 || cfg.data.pool == 0 || cfg.data.refresh_steps == 0 {
        return Err(Error::Input("checkpoint_every, data.pool and data.refresh_steps must be positive".into()));
    }
    let weights_path = out.join("weights.ckpt");
    let optimizer_path = out.join("optimizer.ckpt");
    let loss_path = out.join("loss.csv");
    let mut state = if a.resume {
        let (model, w) = load_weights(&weights_path)?;
        if model != cfg.model {
            return Err(Error::Input(format!(
                "{} was trained with a different model config",
                weights_path.display()
            )));
        }
        let state = load_optimizer(&optimizer_path, w)?;
        log::info!("resuming at step {}", state.step);
        state
    } else {
        prepare_out(&out, a.common.force)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        TrainState::new(Weights::init(&cfg.model, &mut rng)?)
    };
    config::write_resolved(&out, &cfg)?;
    let overfit = cfg.overfit.as_deref().map(read_archive).transpose()?;
    if let Some(s) = &overfit {
        check_scene_size(s, &cfg.model)?;
    }
    let mut append = a.resume && loss_path.exists();
    let mut pool: Option<(usize, Vec<SceneBundle>)> = None;
    let mut losses = Vec::new();
    let t0 = Instant::now();
    let total = cfg.train.steps;
    while state.step < total {
        let mut end = ((state.step / cfg.checkpoint_every + 1) * cfg.checkpoint_every).min(total);
        let scenes = match &overfit {
            Some(s) => std::slice::from_ref(s),
            None => {
                let index = state.step / cfg.data.refresh_steps;
                end = end.min((index + 1) * cfg.data.refresh_steps);
                if pool.as_ref().is_none_or(|p| p.0 != index) {
                    pool = Some((index, scene_pool(&cfg.data, index)));
                }
                &pool.as_ref().expect("pool").1[..]
            }
        };
        let chunk = TrainConfig {
            steps: end,
            loss_threshold: f64::INFINITY,
            ..cfg.train.clone()
        };
        let report = ttr_core::pretrain::pretrain(&cfg.model, &mut state, scenes, &chunk, |step, loss| {
            if step % 50 == 0 {
                log::info!("step {step} loss {loss:.5} ({:.0}s)", t0.elapsed().as_secs_f64());
            }
        })?;
        write_loss_csv(&loss_path, &report.losses, append)?;
        append = true;
        losses.extend(report.losses.iter().map(|l| l.1));
        if state.step % cfg.checkpoint_every == 0 || state.step == total {
            save_weights(&weights_path, &cfg.model, &state.weights)?;
            save_optimizer(&optimizer_path, &cfg.model, &state)?;
        }
    }
    if losses.is_empty() {
        if !weights_path.exists() {
            save_weights(&weights_path, &cfg.model, &state.weights)?;
            save_optimizer(&optimizer_path, &cfg.model, &state)?;
        }
        log::info!("nothing to train: the checkpoint is at step {}", state.step);
        return Ok(());
    }
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_loss = mean(tail);
    log::info!(
        "trained to step {} in {:.0}s; mean loss of the last {} steps {final_loss:.5}",
        state.step,
        t0.elapsed().as_secs_f64(),
        tail.len()
    );
    if final_loss > cfg.train.loss_threshold {
        log::warn!(
            "final training loss {final_loss:.4} is above the threshold {}",
            cfg.train.loss_threshold
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct AdaptSummary {
    scene: String,
    views: usize,
    triplets: usize,
    epochs: usize,
    lr: f64,
    prompt_len: usize,
    prompt_params: usize,
    backbone_params: usize,
    total_params: usize,
    prompt_percent: f64,
    seconds: f64,
    first_epoch_loss: f64,
    last_epoch_loss: f64,
}

fn dir_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn adapt(a: AdaptArgs) -> Result<()> {
    let mut cfg: config::AdaptConfig = config::load(a.common.config.as_deref())?;
    cfg.weights = a.weights.or(cfg.weights);
    cfg.scene = a.scene.or(cfg.scene);
    cfg.prompt_len = a.prompt_len.unwrap_or(cfg.prompt_len);
    cfg.prompt_mode = a.prompt_mode.map_or(cfg.prompt_mode, Into::into);
    cfg.ttt.lr = a.lr.unwrap_or(cfg.ttt.lr);
    cfg.ttt.epochs = a.epochs.unwrap_or(cfg.ttt.epochs);
    cfg.ttt.triplet_cap = a.triplet_cap.unwrap_or(cfg.ttt.triplet_cap);
    cfg.ttt.seed = a.seed.unwrap_or(cfg.ttt.seed);
    cfg.ttt.norm_mode = a.norm.map_or(cfg.ttt.norm_mode, Into::into);
    cfg.out = a.common.out.or(cfg.out);
    let weights_path = required(&cfg.weights, "weights")?.to_path_buf();
    let scene_path = required(&cfg.scene, "scene")?.to_path_buf();
    let out = required(&cfg.out, "out")?.to_path_buf();
    cfg.ttt.validate()?;

    let (backbone, weights) = load_weights(&weights_path)?;
    let model = ModelConfig {
        prompt_len: cfg.prompt_len,
        prompt_mode: cfg.prompt_mode,
        ..backbone
    };
    model.validate()?;
    let scene = read_archive(&scene_path)?;
    check_scene_size(&scene, &model)?;
    prepare_out(&out, a.common.force)?;
    config::write_resolved(&out, &cfg)?;

    let n = scene.num_views();
    let prompts = PromptSet::init(&model, &mut ChaCha8Rng::seed_from_u64(cfg.prompt_seed));
    let t0 = Instant::now();
    let report = run_adapt(&model, &weights, prompts, &images(&scene), &cfg.ttt, |row| {
        if row.step % 20 == 0 {
            log::info!("epoch {} triplet {} loss {:.6}", row.epoch, row.step, row.loss);
        }
    })?;
    let seconds = t0.elapsed().as_secs_f64();
    let (_, on_disk) = load_weights(&weights_path)?;
    if !on_disk.bit_identical(&weights) {
        return Err(Error::Contract("backbone weights differ from the checkpoint after adaptation".into()));
    }
    log::info!(
        "{} triplets ({} ordered triplets exist for {n} views)",
        report.triplets.len(),
        n.pow(3)
    );
    let mut epoch_means = Vec::new();
    for e in 0..cfg.ttt.epochs {
        let l: Vec<f64> = report
            .trace
            .iter()
            .filter(|r| r.epoch == e && r.src1 != r.src2)
            .map(|r| r.loss)
            .collect();
        if l.is_empty() {
            epoch_means.push(0.0);
            continue;
        }
        let (lo, hi) = l.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        epoch_means.push(mean(&l));
        log::info!("epoch {e}: loss mean {:.6} min {lo:.6} max {hi:.6}", mean(&l));
    }
    log::info!("adapted in {seconds:.1}s");

    save_prompts(&out.join("prompts.ckpt"), &model, &report.prompts)?;
    write_trace_csv(&out.join("trace.csv"), &report.trace)?;
    let prompt_params = report.prompts.num_params();
    let backbone_params = weights.num_params();
    let total_params = prompt_params + backbone_params;
    write_csv(
        &out.join("summary.csv"),
        &[AdaptSummary {
            scene: dir_name(&scene_path),
            views: n,
            triplets: report.triplets.len(),
            epochs: cfg.ttt.epochs,
            lr: cfg.ttt.lr,
            prompt_len: model.prompt_len,
            prompt_params,
            backbone_params,
            total_params,
            prompt_percent: 100.0 * prompt_params as f64 / total_params as f64,
            seconds,
            first_epoch_loss: epoch_means[0],
            last_epoch_loss: *epoch_means.last().expect("at least one epoch"),
        }],
    )
}

fn parse_pairs(s: &str) -> Result<Vec<[usize; 2]>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (r, src) = p
                .trim()
                .split_once('-')
                .ok_or_else(|| Error::Input(format!("pair `{p}` is not of the form ref-src")))?;
            let num = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Input(format!("pair `{p}`: `{x}` is not a view index")))
            };
            Ok([num(r)?, num(src)?])
        })
        .collect()
}

pub fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let mut cfg: config::ReconstructConfig = config::load(a.common.config.as_deref())?;
    cfg.weights = a.weights.or(cfg.weights);
    cfg.prompts = a.prompts.or(cfg.prompts);
    cfg.scene = a.scene.or(cfg.scene);
    if let Some(p) = &a.pairs {
        cfg.pairs = Some(parse_pairs(p)?);
    }
    cfg.align.iterations = a.iterations.unwrap_or(cfg.align.iterations);
    cfg.align.lr = a.lr.unwrap_or(cfg.align.lr);
    cfg.out = a.common.out.or(cfg.out);
    let weights_path = required(&cfg.weights, "weights")?.to_path_buf();
    let scene_path = required(&cfg.scene, "scene")?.to_path_buf();
    let out = required(&cfg.out, "out")?.to_path_buf();

    let (model, weights, prompts) = load_model(&weights_path, cfg.prompts.as_deref())?;
    let scene = read_archive(&scene_path)?;
    check_scene_size(&scene, &model)?;
    let n = scene.num_views();
    if n < 2 {
        return Err(Error::Input("reconstruction needs at least 2 views".into()));
    }
    let pairs: Vec<(usize, usize)> = match &cfg.pairs {
        Some(p) => p.iter().map(|p| (p[0], p[1])).collect(),
        None => PairGraph::complete_pairs(n),
    };
    prepare_out(&out, a.common.force)?;
    config::write_resolved(&out, &cfg)?;
    let imgs = images(&scene);
    let graph = predict_graph(&model, &weights, prompts.as_ref(), &imgs, &pairs)?;
    let intrinsics: Vec<_> = scene.views.iter().map(|v| v.intrinsics).collect();
    let t0 = Instant::now();
    let result = solve_alignment(&graph, &intrinsics, None, &cfg.align)?;
    log::info!(
        "aligned {n} views over {} edges in {:.1}s; objective {:.6e} -> {:.6e}",
        graph.edges.len(),
        t0.elapsed().as_secs_f64(),
        result.trace[0].objective,
        result.objective
    );
    write_reconstruction(&out, &result, &imgs)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg: config::EvalConfig = config::load(a.common.config.as_deref())?;
    cfg.pred = a.pred.or(cfg.pred);
    cfg.gt = a.gt.or(cfg.gt);
    cfg.name = a.name.or(cfg.name);
    cfg.depth_align = a.align.map_or(cfg.depth_align, Into::into);
    cfg.cloud_align = a.cloud_align.map_or(cfg.cloud_align, Into::into);
    cfg.out = a.common.out.or(cfg.out);
    let pred: PathBuf = required(&cfg.pred, "pred")?.to_path_buf();
    let gt_path = required(&cfg.gt, "gt")?.to_path_buf();
    let out = required(&cfg.out, "out")?.to_path_buf();
    let name = cfg.name.get_or_insert_with(|| dir_name(&gt_path)).clone();

    let gt = read_archive(&gt_path)?;
    let rec = if pred.join(POSES_FILE).is_file() {
        read_reconstruction(&pred)?
    } else if pred.join(MANIFEST_FILE).is_file() {
        Reconstruction::from_scene(&read_archive(&pred)?)
    } else {
        return Err(Error::Input(format!(
            "{} is neither a reconstruction nor a scene archive",
            pred.display()
        )));
    };
    let report = evaluate(&rec, &gt, cfg.depth_align, cfg.cloud_align, &cfg.icp)?;
    prepare_out(&out, a.common.force)?;
    config::write_resolved(&out, &cfg)?;
    write_csv(&out.join("cloud_metrics.csv"), &[CloudRow::new(name.clone(), &report.cloud)])?;
    let rows: Vec<DepthRow> = report
        .depth
        .iter()
        .enumerate()
        .map(|(view, d)| DepthRow {
            scene: name.clone(),
            view,
            rel: d.rel,
            tau: d.tau,
        })
        .collect();
    write_csv(&out.join("depth_metrics.csv"), &rows)?;
    let c = &report.cloud;
    log::info!(
        "{name}: acc {:.5} comp {:.5} nc {:.4}; depth rel {:.5} tau {:.2}%",
        c.acc_mean,
        c.comp_mean,
        c.nc_mean,
        mean(&rows.iter().map(|r| r.rel).collect::<Vec<_>>()),
        mean(&rows.iter().map(|r| r.tau).collect::<Vec<_>>())
    );
    Ok(())
}

pub fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let mut cfg: config::DiagnoseConfig = config::load(a.common.config.as_deref())?;
    cfg.weights = a.weights.or(cfg.weights);
    cfg.prompts = a.prompts.or(cfg.prompts);
    cfg.scene = a.scene.or(cfg.scene);
    cfg.out = a.common.out.or(cfg.out);
    if !a.references.is_empty() {
        cfg.references = a.references;
    }
    let weights_path = required(&cfg.weights, "weights")?.to_path_buf();
    let scene_path = required(&cfg.scene, "scene")?.to_path_buf();
    let out = required(&cfg.out, "out")?.to_path_buf();

    let (model, weights, prompts) = load_model(&weights_path, cfg.prompts.as_deref())?;
    let scene = read_archive(&scene_path)?;
    check_scene_size(&scene, &model)?;
    if a.all_refs {
        cfg.references = (0..scene.num_views()).collect();
    }
    prepare_out(&out, a.common.force)?;
    config::write_resolved(&out, &cfg)?;
    let imgs = images(&scene);
    let mut report = ConsistencyReport::default();
    for &r in &cfg.references {
        report.extend(diagnose_consistency(&model, &weights, prompts.as_ref(), &imgs, r, &cfg.icp)?);
    }
    write_csv(&out.join("consistency.csv"), &report.rows)?;
    for d in &report.differences {
        let stem = format!("diff_r{}_a{}_b{}", d.reference, d.src_a, d.src_b);
        write_grid(
            &out.join(format!("{stem}.bin")),
            &Grid {
                width: d.diff.width,
                height: d.diff.height,
                channels: 0,
                image: Vec::new(),
                depth: d.diff.data.clone(),
            },
        )?;
        let title = format!("z difference, reference {} sources {} and {}", d.reference, d.src_a, d.src_b);
        let svg = render_heatmap_svg(&d.diff, &title);
        let path = out.join(format!("{stem}.svg"));
        fs::write(&path, svg).map_err(|e| io_err(&path, e))?;
    }
    log::info!(
        "{} source pairs; mean raw discrepancy {:.6}, after ICP {:.6}",
        report.rows.len(),
        mean_discrepancy(&report.rows),
        if report.rows.is_empty() {
            0.0
        } else {
            mean(&report.rows.iter().map(|r| r.icp_disc).collect::<Vec<_>>())
        }
    );
    Ok(())
}
