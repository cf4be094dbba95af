use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lifthead::efficiency::{efficiency_report, DeconvConfig};
use lifthead::gradcheck::{run_timed, SuiteOptions};
use lifthead::synthetic::SyntheticGen;
use lifthead::training::{load_checkpoint, lr_at, train, Sample, AVERAGED_CHECKPOINT};
use lifthead::{LiftingHead, ParamStore, PoseOutput};
use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

/// Raised when a gradient check exceeds its tolerance.
#[derive(Debug)]
pub struct GradcheckFailed(pub Vec<String>);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed for: {}", self.0.join(", "))
    }
}

impl std::error::Error for GradcheckFailed {}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let gen = SyntheticGen::new(&cfg.head, cfg.data.seed, cfg.data.noise_sigma)?;
    let data: Vec<Sample<f32>> = gen.generate(cfg.data.samples);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let (head, mut store) = LiftingHead::init::<f32, _>(&cfg.head, &mut rng)?;
    info!(
        "training {} parameters on {} samples for {} epochs",
        store.numel(),
        data.len(),
        cfg.train.epochs
    );

    let dir = &cfg.paths.out;
    let report = train(&head, &mut store, &data, &cfg.train, Some(dir))?;
    if report.log.is_empty() {
        return Ok(());
    }

    // wall time lives in its own file so the metrics log is reproducible
    let mut metrics = String::from("step\tepoch\tlr\tloss\n");
    let mut timing = String::from("step\twall_ms\n");
    for r in &report.log {
        let _ = writeln!(metrics, "{}\t{}\t{:e}\t{:e}", r.step, r.epoch, r.lr, r.loss);
        let _ = writeln!(timing, "{}\t{:.3}", r.step, r.wall_ms);
    }
    let metrics_path = cfg.metrics_path();
    fs::write(&metrics_path, metrics).with_context(|| format!("writing {}", metrics_path.display()))?;
    fs::write(dir.join("timing.tsv"), timing)?;

    for (i, loss) in report.epoch_losses.iter().enumerate() {
        debug!("epoch {} loss {loss:.6}", i + 1);
        println!("epoch\t{}\t{loss:e}", i + 1);
    }
    println!("averaged\t{}", dir.join(AVERAGED_CHECKPOINT).display());
    println!("metrics\t{}", metrics_path.display());
    Ok(())
}

/// Per-group errors over a set of predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub keypoint_mse: f64,
    pub twist_deg: f64,
    pub beta_mse: f64,
}

pub fn evaluate(head: &LiftingHead, store: &ParamStore<f32>, data: &[Sample<f32>]) -> Result<EvalMetrics> {
    let pairs = data
        .iter()
        .map(|s| Ok((head.predict(store, &s.features)?.cast(), s.target.cast())))
        .collect::<Result<Vec<_>>>()?;
    Ok(pose_metrics(&pairs))
}

/// Keypoint MSE, mean absolute twist angle error in degrees and beta MSE
/// over `(prediction, target)` pairs.
pub fn pose_metrics(pairs: &[(PoseOutput<f64>, PoseOutput<f64>)]) -> EvalMetrics {
    let (mut kp, mut tw, mut be) = (0.0, 0.0, 0.0);
    let (mut n_kp, mut n_tw, mut n_be) = (0usize, 0usize, 0usize);
    for (pred, target) in pairs {
        for (p, t) in pred.keypoints.data().iter().zip(target.keypoints.data()) {
            kp += (p - t).powi(2);
            n_kp += 1;
        }
        for (p, t) in pred.twists.data().chunks(2).zip(target.twists.data().chunks(2)) {
            let cross = p[0] * t[1] - p[1] * t[0];
            let dot = p[0] * t[0] + p[1] * t[1];
            tw += cross.atan2(dot).abs().to_degrees();
            n_tw += 1;
        }
        for (p, t) in pred.beta.data().iter().zip(target.beta.data()) {
            be += (p - t).powi(2);
            n_be += 1;
        }
    }
    EvalMetrics {
        keypoint_mse: kp / n_kp as f64,
        twist_deg: tw / n_tw as f64,
        beta_mse: be / n_be as f64,
    }
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let (store, _) =
        load_checkpoint::<f32>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let head = LiftingHead::bind(&cfg.head, &store)
        .with_context(|| format!("{} does not fit the configured head", checkpoint.display()))?;
    let gen = SyntheticGen::new(&cfg.head, cfg.data.seed, cfg.data.noise_sigma)?;
    let held_out: Vec<Sample<f32>> = gen.generate_split(cfg.data.eval_samples, 1);
    let m = evaluate(&head, &store, &held_out)?;
    println!("eval.samples\t{}", held_out.len());
    println!("eval.keypoint_mse\t{:e}", m.keypoint_mse);
    println!("eval.twist_deg\t{:e}", m.twist_deg);
    println!("eval.beta_mse\t{:e}", m.beta_mse);
    Ok(())
}

pub fn cmd_gradcheck(fault: Option<String>) -> Result<()> {
    let opts = SuiteOptions {
        fault,
        ..SuiteOptions::default()
    };
    let (results, secs) = run_timed(&opts)?;
    println!("check\tmax_rel_err\ttolerance\tchecked\tskipped\tstatus");
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{}\t{:e}\t{:e}\t{}\t{}\t{status}",
            r.name, r.max_rel_err, r.tolerance, r.checked, r.skipped
        );
    }
    info!("gradient suite took {secs:.2}s");
    let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(GradcheckFailed(failed).into())
    }
}

pub fn cmd_params(cfg: &RunConfig) -> Result<()> {
    print!("{}", efficiency_report(&cfg.head, &DeconvConfig::default()).to_tsv());
    Ok(())
}

pub fn cmd_schedule(cfg: &RunConfig, steps: u64) -> Result<()> {
    println!("step\tlr");
    for step in 1..=steps {
        println!("{step}\t{}", lr_at(step, cfg.train.max_lr, cfg.train.warmup_steps)?);
    }
    Ok(())
}
