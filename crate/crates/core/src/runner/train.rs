//! Training loop and episode evaluation.

use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::codec::{BinaryMask, Codec};
use crate::data::io::load_manifest;
use crate::data::metrics::{counts, IouAccumulator};
use crate::data::{build_folds, gen_synthetic, sample_episodes, DatasetIndex, Episode, EpisodeSpec, FoldSpec};
use crate::error::{Error, Result};
use crate::generation::{build_train_sample, encode_episode, infer, InferOptions, TrainSample};
use crate::params::GradStore;
use crate::unet::{ForwardOptions, UNet};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::optim::AdamW;

const TRAIN_EPISODE_SALT: u64 = 0x7472_6169_6e00_0001;
const EVAL_EPISODE_SALT: u64 = 0x6576_616c_0000_0002;
const STEP_SALT: u64 = 0x7374_6570_0000_0003;

/// The manifest named by `data`, or the synthetic shapes set.
pub fn load_dataset(cfg: &RunConfig) -> Result<DatasetIndex> {
    if cfg.data.is_empty() {
        gen_synthetic(cfg.num_classes, cfg.images_per_class, (cfg.canvas, cfg.canvas), cfg.seed)
    } else {
        load_manifest(Path::new(&cfg.data))
    }
}

pub fn fold_spec(cfg: &RunConfig) -> Result<FoldSpec> {
    FoldSpec::new(cfg.num_classes, cfg.num_folds, cfg.fold)
}

fn check_classes(ds: &DatasetIndex, fold: &FoldSpec) -> Result<()> {
    match ds.classes().into_iter().find(|&c| c >= fold.num_classes) {
        Some(c) => Err(Error::InvalidFold(format!("dataset class {c} outside the {} fold classes", fold.num_classes))),
        None => Ok(()),
    }
}

/// Mean-squared-error graph of one training sample.
pub fn loss_graph(model: &UNet, g: &mut Graph, s: &TrainSample) -> Result<Var> {
    let opts = ForwardOptions { timestep: s.timestep, kv_sampling: None };
    let out = model.forward_graph(g, &s.query, &s.supports, &opts)?;
    Ok(g.mse(out, s.target.to_matrix()))
}

pub fn loss_and_grads(model: &UNet, s: &TrainSample) -> Result<(f64, GradStore)> {
    let mut g = Graph::new();
    let l = loss_graph(model, &mut g, s)?;
    let grads = g.backward(l);
    Ok((g.value(l).data[0], g.param_grads(&grads, &model.params)))
}

/// Averaged loss and gradient over a batch of samples.
pub fn batch_grads(model: &UNet, batch: &[TrainSample]) -> Result<(f64, GradStore)> {
    let mut total = GradStore::zeros_like(&model.params);
    let mut loss = 0.0;
    for s in batch {
        let (l, g) = loss_and_grads(model, s)?;
        loss += l;
        total.accumulate(&g);
    }
    let k = batch.len() as f64;
    total.scale(1.0 / k);
    Ok((loss / k, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    /// Mean loss of every iteration.
    pub losses: Vec<f64>,
    /// `(iterations completed, training-episode mIoU)` at each evaluation.
    pub evals: Vec<(usize, f64)>,
}

enum EpisodeSource {
    Fixed(Vec<Episode>),
    Fresh(Vec<usize>),
}

fn training_classes(cfg: &RunConfig, ds: &DatasetIndex) -> Result<Vec<usize>> {
    let fold = fold_spec(cfg)?;
    check_classes(ds, &fold)?;
    let (train_classes, _) = build_folds(&fold)?;
    let present = ds.classes();
    let classes: Vec<usize> = train_classes.into_iter().filter(|c| present.contains(c)).collect();
    if classes.is_empty() {
        return Err(Error::Empty("no training classes in the dataset".into()));
    }
    Ok(classes)
}

/// The fixed training episodes when `train_episodes > 0`, otherwise none.
pub fn training_specs(cfg: &RunConfig, ds: &DatasetIndex) -> Result<Vec<EpisodeSpec>> {
    if cfg.train_episodes == 0 {
        return Ok(Vec::new());
    }
    let classes = training_classes(cfg, ds)?;
    sample_episodes(ds, &classes, cfg.n_shot_max, cfg.train_episodes, cfg.seed ^ TRAIN_EPISODE_SALT)
}

/// Trains from the configured initialisation. Checkpoints requested by
/// `checkpoint_every` are written to `out` when given.
pub fn train(cfg: &RunConfig, ds: &DatasetIndex, out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let classes = training_classes(cfg, ds)?;
    let codec = Codec::new(4);
    let unet_cfg = cfg.unet();
    let gen = cfg.generation();
    let sched = gen.schedule()?;
    let mut model = UNet::new(unet_cfg.clone(), cfg.seed)?;
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ STEP_SALT);

    let fixed_specs = training_specs(cfg, ds)?;
    let source = if cfg.train_episodes > 0 {
        EpisodeSource::Fixed(fixed_specs.iter().map(|s| ds.episode(s)).collect())
    } else {
        // fail early rather than mid-run
        sample_episodes(ds, &classes, cfg.n_shot_max, 1, 0)?;
        EpisodeSource::Fresh(classes)
    };

    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut evals = Vec::new();
    let mut cursor = 0usize;
    let mut done = 0;
    for i in 0..cfg.iterations {
        let n = rng.random_range(cfg.n_shot_min..=cfg.n_shot_max);
        let mut batch = Vec::with_capacity(cfg.grad_accum);
        for _ in 0..cfg.grad_accum {
            let ep = match &source {
                EpisodeSource::Fixed(eps) => {
                    let e = eps[cursor % eps.len()].with_shots(n);
                    cursor += 1;
                    e
                }
                EpisodeSource::Fresh(classes) => {
                    let spec = sample_episodes(ds, classes, n, 1, rng.random())?.remove(0);
                    ds.episode(&spec)
                }
            };
            let enc = encode_episode(&codec, &ep, &unet_cfg, cfg.supervision_form)?;
            batch.push(build_train_sample(&enc, &gen, &sched, &mut rng)?);
        }
        let (loss, grads) = batch_grads(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: i, value: loss });
        }
        opt.step(&mut model.params, &grads, cfg.lr_at(i));
        losses.push(loss);
        done = i + 1;

        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            if let Some(dir) = out {
                let ck = Checkpoint { config: cfg.clone(), iteration: done, params: model.params.clone() };
                ck.save(&dir.join(format!("checkpoint_{done:06}.ckpt")))?;
            }
        }
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && !fixed_specs.is_empty() {
            let miou = evaluate_episodes(&model, cfg, ds, &fixed_specs, cfg.n_shot_infer.min(cfg.n_shot_max))?
                .acc
                .miou()?;
            info!("iteration {done}: loss {loss:.6}, training mIoU {miou:.4}");
            evals.push((done, miou));
            if cfg.early_stop_miou > 0.0 && miou >= cfg.early_stop_miou {
                break;
            }
        } else if done % 50 == 0 {
            info!("iteration {done}: loss {loss:.6}");
        }
    }
    Ok(TrainReport {
        checkpoint: Checkpoint { config: cfg.clone(), iteration: done, params: model.params },
        losses,
        evals,
    })
}

/// Result of one evaluated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub spec: EpisodeSpec,
    pub prediction: BinaryMask,
    pub intersection: usize,
    pub union: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub acc: IouAccumulator,
    pub outcomes: Vec<EpisodeOutcome>,
}

impl Evaluation {
    pub fn csv(&self, fold: usize, n_shot: usize) -> Result<String> {
        self.acc.to_csv(fold, n_shot)
    }
}

/// Runs inference on the given episodes, each with its first `n_shot` supports.
pub fn evaluate_episodes(
    model: &UNet,
    cfg: &RunConfig,
    ds: &DatasetIndex,
    specs: &[EpisodeSpec],
    n_shot: usize,
) -> Result<Evaluation> {
    let codec = Codec::new(4);
    let gen = cfg.generation();
    let opts = InferOptions { form: cfg.supervision_form, threshold: cfg.threshold()?, kv_sampling: cfg.infer_kv_sampling };
    let mut acc = IouAccumulator::default();
    let mut outcomes = Vec::with_capacity(specs.len());
    for (k, spec) in specs.iter().enumerate() {
        let ep = ds.episode(spec).with_shots(n_shot);
        let enc = encode_episode(&codec, &ep, &model.cfg, cfg.supervision_form)?;
        let out = infer(model, &enc, &gen, &codec, &opts, cfg.seed.wrapping_add(k as u64))?;
        let (i, u) = counts(&out.mask, &ep.query_mask)?;
        acc.add_counts(spec.class_id, i, u);
        outcomes.push(EpisodeOutcome { spec: spec.clone(), prediction: out.mask, intersection: i, union: u });
    }
    Ok(Evaluation { acc, outcomes })
}

/// Samples `eval_episodes` episodes of the held-out classes and scores them.
pub fn evaluate(model: &UNet, cfg: &RunConfig, ds: &DatasetIndex, fold: &FoldSpec, n_shot: usize) -> Result<Evaluation> {
    if fold.num_classes != cfg.num_classes {
        return Err(Error::InvalidFold(format!(
            "fold covers {} classes, run configured for {}",
            fold.num_classes, cfg.num_classes
        )));
    }
    check_classes(ds, fold)?;
    let (_, test) = build_folds(fold)?;
    let present = ds.classes();
    let classes: Vec<usize> = test.into_iter().filter(|c| present.contains(c)).collect();
    if classes.is_empty() {
        return Err(Error::InvalidFold("no held-out classes present in the dataset".into()));
    }
    let specs = sample_episodes(ds, &classes, n_shot, cfg.eval_episodes, cfg.seed ^ EVAL_EPISODE_SALT)?;
    evaluate_episodes(model, cfg, ds, &specs, n_shot)
}
