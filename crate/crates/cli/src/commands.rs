use std::path::{Path, PathBuf};

use anyhow::Context;

use eunet_core::data::{
    generate_synthetic, kfold, load_checkpoint, read_pgm, save_checkpoint, write_csv, write_map_csv, write_pgm, Sample,
};
use eunet_core::explain::{composite, grad_cam, stage_cams, MapKind, PixelMap};
use eunet_core::harness::{evaluate, train as fit, TrainHistory};
use eunet_core::models::ModelGraph;
use eunet_core::uncertainty::{
    agreement_metrics_with, collaboration_map, ensemble_stats, select_samples, EnsembleMeasure, Experiment,
    ExperimentRow, SampleMaps,
};
use eunet_core::Tensor;

use crate::config::RunConfig;
use crate::Failure;

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("config.txt");
    std::fs::write(&path, cfg.resolved()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn mask_map(s: &Sample, values: impl Fn(usize) -> f64) -> Result<PixelMap, Failure> {
    let (h, w) = (s.height(), s.width());
    Ok(PixelMap::new(h, w, (0..h * w).map(values).collect(), MapKind::Cam)?)
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    prepare_out(cfg, out)?;
    let data = generate_synthetic(&cfg.data)?;
    let k = (cfg.model.class_count - 1).max(1) as f64;
    for s in &data {
        let image = PixelMap::new(s.height(), s.width(), s.image.data().to_vec(), MapKind::Cam)?;
        write_pgm(&image, out.join(format!("image_{:04}.pgm", s.id)))?;
        write_pgm(
            &mask_map(s, |i| s.mask[i] as f64 / k)?,
            out.join(format!("mask_{:04}.pgm", s.id)),
        )?;
        write_pgm(
            &mask_map(s, |i| f64::from(u8::from(s.ambiguous[i])))?,
            out.join(format!("band_{:04}.pgm", s.id)),
        )?;
    }
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn split(cfg: &RunConfig, data: &[Sample]) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>), Failure> {
    let ids: Vec<usize> = data.iter().map(|s| s.id).collect();
    let plan = kfold(&ids, cfg.folds, cfg.data.seed)?;
    let val_fold = (cfg.test_fold + 1) % cfg.folds;
    let pick = |pred: &dyn Fn(usize) -> bool| -> Vec<Sample> {
        plan.assignments
            .iter()
            .filter(|a| pred(a.1))
            .map(|a| data[a.0].clone())
            .collect()
    };
    Ok((
        pick(&|f| f != cfg.test_fold && f != val_fold),
        pick(&|f| f == val_fold),
        pick(&|f| f == cfg.test_fold),
    ))
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    prepare_out(cfg, out)?;
    let data = generate_synthetic(&cfg.data)?;
    let (train_set, val_set, test_set) = split(cfg, &data)?;
    let model = ModelGraph::build(&cfg.model)?;
    let (best, history): (ModelGraph, TrainHistory) = fit(&model, &train_set, &val_set, &cfg.train)?;
    save_checkpoint(&best, out.join("model.ckpt"))?;
    history.write_csv(out.join("history.csv"))?;
    let val = evaluate(&best, &val_set, cfg.train.loss_kind, cfg.train.batch_size)?;
    let test = evaluate(&best, &test_set, cfg.train.loss_kind, cfg.train.batch_size)?;
    write_csv(
        out.join("metrics.csv"),
        "split,samples,loss,dice",
        [
            format!("val,{},{},{}", val_set.len(), val.loss, val.dice),
            format!("test,{},{},{}", test_set.len(), test.loss, test.dice),
        ],
    )?;
    println!(
        "trained {} epochs (best {}), test dice {:.4}",
        history.stop_epoch, history.best_epoch, test.dice
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelGraph, Failure> {
    load_checkpoint(path)
        .map_err(|e| Failure::Other(anyhow::Error::new(e).context(format!("loading {}", path.display()))))
}

fn image_tensor(model: &ModelGraph, path: &Path) -> Result<Tensor, Failure> {
    let map = read_pgm(path)
        .map_err(|e| Failure::Other(anyhow::Error::new(e).context(format!("reading {}", path.display()))))?;
    let unit = 1usize << model.config().depth;
    if map.height() % unit != 0 || map.width() % unit != 0 {
        return Err(Failure::Config(format!(
            "image is {}x{}, sides must be multiples of {unit}",
            map.height(),
            map.width()
        )));
    }
    if model.config().in_channels != 1 {
        return Err(Failure::Config(
            "model expects multi-channel input; PGM is single-channel".into(),
        ));
    }
    Ok(Tensor::new(
        vec![1, 1, map.height(), map.width()],
        map.values().to_vec(),
    )?)
}

/// Normalised copy of `m` at `height × width` for viewing.
fn view(m: &PixelMap, height: usize) -> PixelMap {
    m.normalized().upsample_nearest(height / m.height())
}

pub fn explain(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    image: &Path,
    class: usize,
    stage: &str,
) -> Result<(), Failure> {
    let model = load_model(checkpoint)?;
    let mc = model.config();
    if class >= mc.class_count {
        return Err(Failure::BadClass(format!(
            "class {class} outside [0, {})",
            mc.class_count
        )));
    }
    if !mc.with_mhex {
        return Err(Failure::Structural("checkpoint has no MHEX+ blocks".into()));
    }
    let stages: Vec<usize> = match stage {
        "all" => (1..=mc.depth).collect(),
        s => match s.parse::<usize>() {
            Ok(l) if (1..=mc.depth).contains(&l) => vec![l],
            _ => {
                return Err(Failure::Config(format!(
                    "--stage must be 1..={} or all, got {s:?}",
                    mc.depth
                )))
            }
        },
    };
    let img = image_tensor(&model, image)?;
    let (h, w) = (img.dims()[2], img.dims()[3]);
    prepare_out(cfg, out)?;
    let cams = stage_cams(&model, &img, class)?;
    for &l in &stages {
        let cam = &cams[l - 1];
        write_map_csv(cam, out.join(format!("cam_stage{l}.csv")))?;
        write_pgm(&view(cam, h), out.join(format!("cam_stage{l}.pgm")))?;
        let gc = grad_cam(&model, &img, class, l)?;
        write_map_csv(&gc.raw, out.join(format!("gradcam_stage{l}.csv")))?;
        write_pgm(&view(&gc.raw, h), out.join(format!("gradcam_stage{l}.pgm")))?;
        if gc.zero_gradient {
            eprintln!("note: stage {l}: no pixel predicted as class {class}; Grad-CAM is zero");
        }
    }
    let comp = composite(&cams, h, w)?;
    write_map_csv(&comp, out.join("cam_composite.csv"))?;
    write_pgm(&comp.normalized(), out.join("cam_composite.pgm"))?;
    println!(
        "wrote {} stage map pairs and a composite to {}",
        stages.len(),
        out.display()
    );
    Ok(())
}

pub struct UncertRequest {
    pub checkpoint: Option<PathBuf>,
    pub ensemble: Vec<PathBuf>,
    pub method: String,
    pub image: Option<PathBuf>,
}

fn save_map(m: &PixelMap, scale: f64, out: &Path, stem: &str) -> Result<(), Failure> {
    write_map_csv(m, out.join(format!("{stem}.csv")))?;
    let shown = PixelMap::new(
        m.height(),
        m.width(),
        m.values().iter().map(|v| (v / scale).clamp(0.0, 1.0)).collect(),
        m.kind(),
    )?;
    write_pgm(&shown, out.join(format!("{stem}.pgm")))?;
    Ok(())
}

pub fn uncert(cfg: &RunConfig, out: &Path, req: &UncertRequest) -> Result<(), Failure> {
    let want_mu = req.method != "ensemble";
    let want_de = req.method != "mhex";
    let eu = match (&req.checkpoint, want_mu) {
        (Some(p), true) => Some(load_model(p)?),
        (None, true) => return Err(Failure::Config(format!("--method {} needs --checkpoint", req.method))),
        _ => None,
    };
    if let Some(m) = &eu {
        let mc = m.config();
        if !mc.with_mhex || mc.depth < 2 {
            return Err(Failure::Structural(
                "collaboration uncertainty needs MHEX+ blocks on at least two decoder stages".into(),
            ));
        }
    }
    if want_de && req.ensemble.len() < 2 {
        return Err(Failure::Config(format!(
            "--method {} needs at least two --ensemble checkpoints, got {}",
            req.method,
            req.ensemble.len()
        )));
    }
    let members = req
        .ensemble
        .iter()
        .map(|p| load_model(p))
        .collect::<Result<Vec<_>, _>>()?;
    let reference = eu.as_ref().or(members.first()).expect("some model");

    let inputs: Vec<(usize, Tensor)> = match &req.image {
        Some(p) => vec![(0, image_tensor(reference, p)?)],
        None => {
            let data = generate_synthetic(&cfg.data)?;
            if cfg.samples > data.len() {
                return Err(Failure::Config(format!(
                    "--samples {} exceeds sample_count {}",
                    cfg.samples,
                    data.len()
                )));
            }
            let unit = 1usize << reference.config().depth;
            if cfg.data.image_size % unit != 0 {
                return Err(Failure::Config(format!("image_size must be a multiple of {unit}")));
            }
            select_samples(data.len(), cfg.samples, cfg.uncertainty.seed)?
                .into_iter()
                .map(|i| (data[i].id, data[i].batch_image()))
                .collect()
        }
    };
    prepare_out(cfg, out)?;

    let ucfg = &cfg.uncertainty;
    let mut experiment = Experiment {
        rows: Vec::new(),
        maps: Vec::new(),
    };
    for (id, img) in &inputs {
        let mu = match &eu {
            Some(m) => {
                let c = collaboration_map(m, img, ucfg)?.map;
                let scale = if ucfg.normalize {
                    1.0
                } else {
                    (m.config().depth - 1) as f64
                };
                save_map(&c, scale, out, &format!("mu_{id:04}"))?;
                Some(c)
            }
            None => None,
        };
        let de = if want_de {
            let e = ensemble_stats(&members, img, ucfg.exec)?;
            let k = e.mean_prob.len();
            save_map(&e.entropy, (k as f64).ln(), out, &format!("de_entropy_{id:04}"))?;
            save_map(&e.variance, 0.25, out, &format!("de_variance_{id:04}"))?;
            save_map(&e.mean_prob[k - 1], 1.0, out, &format!("de_mean_{id:04}"))?;
            Some(e)
        } else {
            None
        };
        if let (Some(mu), Some(de)) = (mu, de) {
            for method in EnsembleMeasure::ALL {
                experiment.rows.push(ExperimentRow {
                    method,
                    sample_id: *id,
                    report: agreement_metrics_with(&mu, method.pick(&de), ucfg.seed, ucfg.exec)?,
                });
            }
            experiment.maps.push(SampleMaps {
                sample_id: *id,
                collaboration: mu,
                ensemble: de,
            });
        }
    }
    if !experiment.rows.is_empty() {
        write_csv(out.join("agreement.csv"), Experiment::CSV_HEADER, experiment.csv_rows())?;
        let summary = experiment.summary_csv();
        let path = out.join("summary.csv");
        std::fs::write(&path, &summary).with_context(|| format!("writing {}", path.display()))?;
        print!("{summary}");
    }
    println!("processed {} input(s) into {}", inputs.len(), out.display());
    Ok(())
}

pub fn bench_cam(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, sizes: &[usize]) -> Result<(), Failure> {
    let model = match checkpoint {
        Some(p) => load_model(p)?,
        None => ModelGraph::build(&cfg.model)?,
    };
    if !model.config().with_mhex {
        return Err(Failure::Structural("benchmark needs MHEX+ blocks".into()));
    }
    let unit = 1usize << model.config().depth;
    if sizes.is_empty() || sizes.iter().any(|&s| s == 0 || s % unit != 0) {
        return Err(Failure::Config(format!("--sizes must be positive multiples of {unit}")));
    }
    if sizes.len() < 3 {
        return Err(Failure::Config("--sizes needs at least three sizes".into()));
    }
    prepare_out(cfg, out)?;
    let rows = eunet_core::explain::cam_benchmark(&model, sizes)?;
    write_csv(
        out.join("bench_cam.csv"),
        "size,mhex_prep_s,gradcam_s",
        rows.iter()
            .map(|r| format!("{},{},{}", r.size, r.mhex_prep_s, r.gradcam_s)),
    )?;
    for r in &rows {
        println!(
            "{:>5}  mhex {:.3e} s  grad-cam {:.3e} s",
            r.size, r.mhex_prep_s, r.gradcam_s
        );
    }
    Ok(())
}
