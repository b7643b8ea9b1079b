//! Command definitions and experiment drivers.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use ppmn_core::data::{split_identities, IdentityDataset};
use ppmn_core::eval::{average_trials, build_single_shot, cmc_from_scores, probe_representation, probe_scores, report, CmcCurve, EvalImage};
use ppmn_core::graph::ParamStore;
use ppmn_core::mix_seed;
use ppmn_core::model::PpmnModel;
use ppmn_core::synth::synth_dataset;
use ppmn_core::tensor::Tensor;
use ppmn_core::train::{
    group_errors, mine_and_retrain, model_grad_check, train, GradCheckOptions, TracePoint,
    TrainObserver,
};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_dataset, save_dataset};
use crate::error::{CliError, Result};
use crate::parallel::{parallel_map, thread_count};
use crate::reports::{dump_maps, write_cmc_csv, write_loss_csv, write_text};

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "ppmn", about = "Pyramid pair-matching network experiments", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic re-identification dataset on disk
    Synth {
        /// Number of identities
        #[arg(long)]
        ids: usize,
        /// Images per identity per camera
        #[arg(long = "per-camera")]
        per_camera: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model (stage 1, plus mining and stage 2 when hnm.enabled)
    Train {
        /// Flat key=value config file
        #[arg(long)]
        config: PathBuf,
        /// Trailing `--key value` config overrides
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0..)]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint with single-shot CMC over seeded trials
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root directory
        #[arg(long)]
        data: PathBuf,
        /// Number of gallery-selection trials to average
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker cap for probe scoring (falls back to PPMN_THREADS)
        #[arg(long)]
        threads: Option<usize>,
        /// Also write the matching maps of the first probe pair as PGM
        #[arg(long = "dump-maps")]
        dump_maps: bool,
        /// Output directory (defaults to the config's out.dir)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0..)]
        overrides: Vec<String>,
    },
    /// Finite-difference check of every parameter group's gradients
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0..)]
        overrides: Vec<String>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { ids, per_camera, seed, out } => cmd_synth(ids, per_camera, seed, &out),
        Command::Train { config, overrides } => cmd_train(&config, &overrides),
        Command::Eval {
            config,
            checkpoint,
            data,
            trials,
            seed,
            threads,
            dump_maps,
            out,
            overrides,
        } => cmd_eval(&config, &checkpoint, &data, trials, seed, threads, dump_maps, out, &overrides),
        Command::Gradcheck { config, seed, overrides } => cmd_gradcheck(&config, seed, &overrides),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(CliError::io(path))
}

pub fn cmd_synth(ids: usize, per_camera: usize, seed: u64, out: &Path) -> Result<()> {
    let dataset = synth_dataset(ids, per_camera, seed)?;
    ensure_dir(out)?;
    save_dataset(&dataset, out)?;
    let resolved = format!("synth.ids = {ids}\nsynth.per_camera = {per_camera}\nsynth.seed = {seed}\n");
    write_text(&out.join("resolved_config.txt"), &resolved)?;
    println!(
        "wrote {} identities x 2 cameras x {} images to {}",
        ids,
        per_camera,
        out.display()
    );
    Ok(())
}

/// Prints loss lines and writes cadence checkpoints as they happen.
struct RunObserver {
    out_dir: PathBuf,
    stage: &'static str,
    failure: Option<CliError>,
}

impl RunObserver {
    fn new(out_dir: &Path, stage: &'static str) -> Self {
        RunObserver {
            out_dir: out_dir.to_path_buf(),
            stage,
            failure: None,
        }
    }

    fn finish(self) -> Result<()> {
        match self.failure {
            Some(err) => Err(err),
            None => Ok(()),
        }
    }
}

impl TrainObserver for RunObserver {
    fn on_log(&mut self, point: &TracePoint) {
        println!(
            "[{}] iter {:>6}  lr {:.6}  loss {:.6}",
            self.stage, point.iter, point.lr, point.loss
        );
    }

    fn on_checkpoint(&mut self, iter: usize, params: &ParamStore) {
        let path = self
            .out_dir
            .join(format!("checkpoint_{}_{:06}.ckpt", self.stage, iter));
        if let Err(err) = checkpoint::save(params, &path) {
            self.failure.get_or_insert(err);
        }
    }
}

fn load_split(cfg: &RunConfig, root: &Path) -> Result<(IdentityDataset, IdentityDataset)> {
    let dataset = load_dataset(root, cfg.model.input_h, cfg.model.input_w)?;
    if cfg.n_train + cfg.n_test == 0 {
        let empty = IdentityDataset {
            source: dataset.source.clone(),
            identities: Vec::new(),
        };
        return Ok((dataset, empty));
    }
    Ok(split_identities(&dataset, cfg.n_train, cfg.n_test, cfg.split_seed)?)
}

pub fn cmd_train(config_path: &Path, overrides: &[String]) -> Result<()> {
    let cfg = RunConfig::load(config_path, overrides)?;
    let root = cfg
        .data_root
        .clone()
        .ok_or_else(|| CliError::Config("train requires data.root".into()))?;
    ensure_dir(&cfg.out_dir)?;
    cfg.write_resolved(&cfg.out_dir.join("resolved_config.txt"))?;
    let (train_set, _) = load_split(&cfg, &root)?;
    println!(
        "training on {} identities ({} images) from {}",
        train_set.identity_count(),
        train_set.image_count(),
        root.display()
    );

    let mut model = PpmnModel::build(cfg.model.clone())?;
    let two_stage = cfg.train.hnm.enabled;
    let stage1_name = if two_stage { "stage1" } else { "model" };

    let mut observer = RunObserver::new(&cfg.out_dir, if two_stage { "stage1" } else { "train" });
    let trace = train(&mut model, &train_set, &cfg.train, &mut observer)?;
    observer.finish()?;
    checkpoint::save(model.params(), &cfg.out_dir.join(format!("{stage1_name}.ckpt")))?;
    write_loss_csv(
        &cfg.out_dir.join(if two_stage { "loss_stage1.csv" } else { "loss.csv" }),
        &trace,
    )?;

    if two_stage {
        let mut observer = RunObserver::new(&cfg.out_dir, "stage2");
        let (mining, stage2_trace) =
            mine_and_retrain(&mut model, &train_set, &cfg.train, &mut observer)?;
        observer.finish()?;
        checkpoint::save(model.params(), &cfg.out_dir.join("stage2.ckpt"))?;
        write_loss_csv(&cfg.out_dir.join("loss_stage2.csv"), &stage2_trace)?;
        println!(
            "mined {} negatives, retained {} hardest",
            mining.scored.len(),
            mining.retained_count
        );
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

/// Parallel score matrix: gallery representations are computed once, then
/// probes fan out over the worker pool; rows merge in probe order.
fn scores_parallel(
    model: &PpmnModel,
    probes: &[EvalImage],
    gallery: &[EvalImage],
    threads: usize,
) -> Result<Vec<f32>> {
    let gallery_reps: Vec<Tensor> = gallery
        .iter()
        .map(|g| probe_representation(model, &g.image))
        .collect::<ppmn_core::Result<_>>()?;
    let gallery_stack = Tensor::stack(&gallery_reps.iter().collect::<Vec<_>>())?;
    let rows = parallel_map(probes.len(), threads, |p| -> ppmn_core::Result<Vec<f32>> {
        let rep = probe_representation(model, &probes[p].image)?;
        probe_scores(model, &rep, &gallery_stack)
    });
    let mut scores = Vec::with_capacity(probes.len() * gallery.len());
    for row in rows {
        scores.extend(row?);
    }
    Ok(scores)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    config_path: &Path,
    checkpoint_path: &Path,
    data: &Path,
    trials: usize,
    seed: u64,
    threads: Option<usize>,
    dump: bool,
    out: Option<PathBuf>,
    overrides: &[String],
) -> Result<()> {
    if trials == 0 {
        return Err(CliError::Config("eval needs at least one trial".into()));
    }
    let cfg = RunConfig::load(config_path, overrides)?;
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    ensure_dir(&out_dir)?;
    cfg.write_resolved(&out_dir.join("resolved_config.txt"))?;

    let mut model = PpmnModel::build(cfg.model.clone())?;
    checkpoint::load_into(model.params_mut(), checkpoint_path)?;

    let dataset = load_dataset(data, cfg.model.input_h, cfg.model.input_w)?;
    let test_set = if cfg.n_test > 0 {
        split_identities(&dataset, cfg.n_train, cfg.n_test, cfg.split_seed)?.1
    } else {
        dataset
    };
    let workers = thread_count(threads);
    println!(
        "evaluating {} identities over {trials} trial(s), {workers} worker(s)",
        test_set.identity_count()
    );

    let mut curves: Vec<CmcCurve> = Vec::with_capacity(trials);
    for trial in 0..trials {
        let (probes, gallery) = build_single_shot(&test_set, mix_seed(seed, trial as u64))?;
        let scores = scores_parallel(&model, &probes, &gallery, workers)?;
        let probe_ids: Vec<&str> = probes.iter().map(|p| p.identity.as_str()).collect();
        let gallery_ids: Vec<&str> = gallery.iter().map(|g| g.identity.as_str()).collect();
        let curve = cmc_from_scores(&probe_ids, &gallery_ids, &scores)?;
        println!(
            "trial {trial}: rank-1 {:.2}  ({} probes, gallery {})",
            curve.rank(1).unwrap_or(0.0) * 100.0,
            curve.probe_count,
            curve.gallery_size
        );
        if dump && trial == 0 {
            let target = gallery
                .iter()
                .find(|g| g.identity == probes[0].identity)
                .expect("probe identity is in the gallery");
            dump_maps(&model, &probes[0].image, &target.image, &out_dir)?;
        }
        curves.push(curve);
    }
    let (mean, std) = average_trials(&curves)?;
    let table = report(&mean);
    print!("{table}");
    for k in [1usize, 5, 10] {
        if k <= mean.gallery_size {
            println!("rank-{k} stddev {:.2}", std[k - 1] * 100.0);
        }
    }
    write_cmc_csv(&out_dir.join("cmc.csv"), &mean)?;
    write_text(&out_dir.join("cmc.txt"), &table)?;
    Ok(())
}

pub fn cmd_gradcheck(config_path: &Path, seed: u64, overrides: &[String]) -> Result<()> {
    let cfg = RunConfig::load(config_path, overrides)?;
    let mut model = PpmnModel::build(cfg.model.clone())?;

    // Two positive and two negative pairs from a tiny synthetic set.
    let probe_set = synth_dataset(4, 1, mix_seed(seed, 0x6C))?
        .resized(cfg.model.input_h, cfg.model.input_w);
    let image = |ident: usize, img: usize| &probe_set.identities[ident].images[img].image;
    let image_a = Tensor::stack(&[image(0, 0), image(1, 0), image(2, 0), image(3, 0)])?;
    let image_b = Tensor::stack(&[image(0, 1), image(1, 1), image(3, 1), image(2, 1)])?;
    let labels = [true, true, false, false];

    let opts = GradCheckOptions { seed, ..GradCheckOptions::default() };
    let report = model_grad_check(&mut model, &image_a, &image_b, &labels, opts)?;
    let groups = model.param_groups();

    println!("{:<14} {:>13} {:>8} {:>9}", "group", "max_rel_err", "checked", "excluded");
    for (group, names) in &groups {
        let checked: usize = report
            .entries
            .iter()
            .filter(|e| names.contains(&e.name))
            .map(|e| e.coords_checked)
            .sum();
        let excluded: usize = report
            .entries
            .iter()
            .filter(|e| names.contains(&e.name))
            .map(|e| e.coords_excluded)
            .sum();
        let worst = group_errors(&report, std::slice::from_ref(&(group.clone(), names.clone())))[0].1;
        println!("{group:<14} {worst:>13.3e} {checked:>8} {excluded:>9}");
    }
    let worst = report.max_rel_err();
    if worst > GRADCHECK_TOLERANCE {
        return Err(CliError::GradCheckFailed {
            worst,
            tolerance: GRADCHECK_TOLERANCE,
        });
    }
    println!("PASS: worst relative error {worst:.3e} within {GRADCHECK_TOLERANCE:.1e}");
    Ok(())
}
