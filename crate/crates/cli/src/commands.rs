use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::Path;

use densecontrast::dataset::{generate_pairs, synthesize_scene, PairGenConfig, SyntheticSceneSpec};
use densecontrast::eval::{feature_match_recall, EvalPose, FeatureSource, FmrConfig, FmrReport};
use densecontrast::io::write_atomic;
use densecontrast::nn::{Faults, UNet};
use densecontrast::train::{read_training_checkpoint, TrainLogRecord, Trainer};
use densecontrast::verify::{self, Suite, VerifyOptions};
use serde_json::json;

use crate::config::{PretrainConfig, PRETRAIN_TEMPLATE, SYNTH_TEMPLATE};
use crate::error::{validation, CliError, CliResult};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::store::{self, PairEntry, PairIndex, PAIR_INDEX};
use crate::{EvalArgs, FaultArg, PairgenArgs, PoseArg, PretrainArgs, SuiteArg, SynthArgs, VerifyArgs};

pub const LOSS_CSV: &str = "loss.csv";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.pcck";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_SUMMARY: &str = "summary.json";

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| validation(format!("--{flag} is required")))
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    if a.print_template {
        print!("{SYNTH_TEMPLATE}");
        return Ok(());
    }
    let (spec_path, out) = (required(&a.spec, "spec")?, required(&a.out, "out")?);
    let text = fs::read_to_string(spec_path).map_err(|e| validation(format!("{}: {e}", spec_path.display())))?;
    let mut spec: SyntheticSceneSpec =
        toml::from_str(&text).map_err(|e| validation(format!("{}: {}", spec_path.display(), e.message())))?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    store::ensure_dir(out)?;
    let names: Vec<String> = (0..spec.cameras.count).map(store::frame_file_name).collect();
    RunManifest::new("synth", spec.seed, serde_json::to_value(&spec)?, vec![path_str(spec_path)], names).write(out)?;
    let frames = synthesize_scene::<f64>(&spec)?;
    for (k, f) in frames.iter().enumerate() {
        store::write_frame(out, k, f)?;
    }
    println!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

pub fn pairgen(a: PairgenArgs) -> CliResult<()> {
    let cfg = PairGenConfig {
        stride: a.stride,
        overlap_threshold: a.threshold,
        radius: a.radius,
        voxel_size: a.voxel_size,
    };
    cfg.validate()?;
    println!(
        "stride={} threshold={:.2} radius={} voxel_size={}",
        cfg.stride, cfg.overlap_threshold, cfg.radius, cfg.voxel_size
    );
    store::ensure_dir(&a.out)?;
    let config = json!({
        "stride": cfg.stride,
        "threshold": cfg.overlap_threshold,
        "radius": cfg.radius,
        "voxel_size": cfg.voxel_size,
    });
    let inputs = a.frames.iter().map(|p| path_str(p)).collect();
    RunManifest::new("pairgen", 0, config, inputs, vec![PAIR_INDEX.into()]).write(&a.out)?;
    let mut entries = Vec::new();
    for dir in &a.frames {
        let scene_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| validation(format!("{}: cannot derive a scene id", dir.display())))?;
        let frames = store::read_frames(dir)?;
        for pair in generate_pairs(&frames, &cfg, &scene_id)? {
            let file = store::write_pair(&a.out, &pair)?;
            entries.push(PairEntry {
                file,
                scene_id: pair.scene_id.clone(),
                frames: pair.frame_ids,
                overlap: pair.overlap,
            });
        }
    }
    let n = entries.len();
    store::write_index(
        &a.out,
        &PairIndex {
            radius: cfg.radius,
            overlap_threshold: cfg.overlap_threshold,
            voxel_size: cfg.voxel_size,
            stride: cfg.stride,
            pairs: entries,
        },
    )?;
    println!("{n} pairs");
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> CliResult<()> {
    if a.print_template {
        print!("{PRETRAIN_TEMPLATE}");
        return Ok(());
    }
    let (pairs_dir, cfg_path, out) = (
        required(&a.pairs, "pairs")?,
        required(&a.config, "config")?,
        required(&a.out, "out")?,
    );
    let mut cfg = PretrainConfig::load(cfg_path)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = a.max_iters {
        cfg.train.max_iters = m;
    }
    if let Some(lr) = a.base_lr {
        cfg.train.base_lr = lr;
    }
    cfg.train.validate()?;
    let corpus = store::read_pairs(pairs_dir)?;
    store::ensure_dir(out)?;
    let mut inputs = vec![path_str(pairs_dir), path_str(cfg_path)];
    inputs.extend(a.resume.as_deref().map(path_str));
    let artifacts = vec![
        LOSS_CSV.into(),
        TRAIN_LOG_CSV.into(),
        FINAL_CHECKPOINT.into(),
        "checkpoint_*.pcck".into(),
    ];
    RunManifest::new("pretrain", cfg.train.seed, serde_json::to_value(&cfg)?, inputs, artifacts).write(out)?;

    let mut trainer = match &a.resume {
        None => Trainer::new(&corpus, &cfg.model, cfg.train.clone())?,
        Some(path) => {
            let mut r = BufReader::new(File::open(path).map_err(|e| validation(format!("{}: {e}", path.display())))?);
            let (model, params, state) = read_training_checkpoint(&mut r)?;
            if model != cfg.model {
                return Err(validation("checkpoint model differs from [model] in the config"));
            }
            Trainer::resume(&corpus, &cfg.model, cfg.train.clone(), params, state)?
        }
    };

    let log_tmp = out.join(format!(".{TRAIN_LOG_CSV}.partial"));
    let mut log = OpenOptions::new().create(true).write(true).truncate(true).open(&log_tmp)?;
    writeln!(log, "{}", TrainLogRecord::CSV_HEADER)?;
    let mut loss_csv = String::from("iter,lr,loss,collapse\n");
    let mut last = None;
    trainer.run(|rec, t| {
        writeln!(log, "{}", rec.csv_row())?;
        loss_csv.push_str(&rec.csv_row_deterministic());
        loss_csv.push('\n');
        last = Some(*rec);
        if t.wants_checkpoint() && !t.is_done() {
            let mut bytes = Vec::new();
            t.write_checkpoint(&mut bytes)?;
            write_atomic(&out.join(format!("checkpoint_{:06}.pcck", t.iteration())), &bytes)?;
        }
        Ok(())
    })?;
    log.flush()?;
    drop(log);
    fs::rename(&log_tmp, out.join(TRAIN_LOG_CSV))?;
    write_atomic(&out.join(LOSS_CSV), loss_csv.as_bytes())?;
    let mut bytes = Vec::new();
    trainer.write_checkpoint(&mut bytes)?;
    write_atomic(&out.join(FINAL_CHECKPOINT), &bytes)?;
    match last {
        Some(r) => println!(
            "{} iterations, final loss {:.4}, collapse {:.4}, {} skipped pairs",
            trainer.iteration(),
            r.loss,
            r.collapse,
            trainer.skipped()
        ),
        None => println!("{} iterations, every pair skipped", trainer.iteration()),
    }
    Ok(())
}

fn report_json(r: &FmrReport) -> serde_json::Value {
    json!({ "fmr": r.fmr, "mean_hit_ratio": r.mean_hit_ratio })
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let fmr = FmrConfig {
        inlier_distance: a.inlier_distance,
        inlier_ratio: a.inlier_ratio,
    };
    fmr.validate()?;
    if !(a.voxel_size > 0.0) {
        return Err(validation("--voxel-size must be positive"));
    }
    let pose = match a.pose {
        PoseArg::World => EvalPose::World,
        PoseArg::Rotated => EvalPose::RandomRotation,
    };
    let pairs = store::read_pairs(&a.pairs)?;
    store::ensure_dir(&a.out)?;
    let config = json!({
        "inlier_distance": fmr.inlier_distance,
        "inlier_ratio": fmr.inlier_ratio,
        "voxel_size": a.voxel_size,
        "pose": pose,
        "coordinates": a.coordinates,
        "compare_random": a.compare_random,
    });
    let mut inputs = vec![path_str(&a.pairs)];
    inputs.extend(a.checkpoint.as_deref().map(path_str));
    let manifest = RunManifest::new("eval", a.seed, config, inputs, vec![EVAL_CSV.into(), EVAL_SUMMARY.into()]);
    manifest.write(&a.out)?;

    let mut summary = json!({
        "run_id": manifest.run_id,
        "manifest": MANIFEST_FILE,
        "pose": pose,
        "inlier_distance": fmr.inlier_distance,
        "inlier_ratio": fmr.inlier_ratio,
        "voxel_size": a.voxel_size,
        "pairs": pairs.len(),
    });
    let report = if a.coordinates {
        summary["source"] = json!("coordinates");
        feature_match_recall(&pairs, &FeatureSource::Coordinates, &fmr, a.voxel_size, pose, a.seed)?
    } else {
        let path = required(&a.checkpoint, "checkpoint")?;
        let mut r = BufReader::new(File::open(path).map_err(|e| validation(format!("{}: {e}", path.display())))?);
        let (model, params, _) = read_training_checkpoint::<f64, _>(&mut r)?;
        let net = UNet::new(&model)?;
        summary["source"] = json!("checkpoint");
        let report = feature_match_recall(
            &pairs,
            &FeatureSource::Network { net: &net, params: &params },
            &fmr,
            a.voxel_size,
            pose,
            a.seed,
        )?;
        if a.compare_random {
            let random = net.init_params::<f64>(a.seed)?;
            let baseline = feature_match_recall(
                &pairs,
                &FeatureSource::Network { net: &net, params: &random },
                &fmr,
                a.voxel_size,
                pose,
                a.seed,
            )?;
            summary["random_init"] = report_json(&baseline);
            summary["delta_fmr"] = json!(report.fmr - baseline.fmr);
            println!(
                "random-init FMR {:.4}, pretrained FMR {:.4}, delta {:+.4}",
                baseline.fmr,
                report.fmr,
                report.fmr - baseline.fmr
            );
        }
        report
    };
    summary["fmr"] = json!(report.fmr);
    summary["mean_hit_ratio"] = json!(report.mean_hit_ratio);
    write_atomic(&a.out.join(EVAL_CSV), report.csv().as_bytes())?;
    write_atomic(&a.out.join(EVAL_SUMMARY), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    println!("FMR {:.4}, mean hit ratio {:.4} over {} pairs", report.fmr, report.mean_hit_ratio, pairs.len());
    Ok(())
}

pub fn verify(a: VerifyArgs) -> CliResult<()> {
    let suite = match a.suite {
        SuiteArg::Gradcheck => Suite::Gradcheck,
        SuiteArg::Oracles => Suite::Oracles,
        SuiteArg::All => Suite::All,
    };
    if a.instances == 0 {
        return Err(validation("--instances must be positive"));
    }
    let opts = VerifyOptions {
        seed: a.seed,
        instances: a.instances,
        faults: Faults {
            flip_conv_backward: a.inject_fault == Some(FaultArg::ConvBackwardSign),
        },
    };
    let checks = verify::run(suite, &opts)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{}/{} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} verification checks failed")));
    }
    Ok(())
}
