//! Optimization, the training loop, evaluation and run artifacts.

mod adam;
mod baseline;
mod batching;
mod checkpoint;
mod config;
mod dataset;
mod model;
mod probe;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, adam_step_scaled, adam_update, AdamConfig, AdamState};
pub use baseline::train_baseline;
pub use batching::group_balanced_batches;
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{Effective, Mode, TrainConfig, MODES};
pub use dataset::{stack_patches, Dataset, Example, SyntheticData};
pub use model::{binary_labels, Batch, Forward, GotDiagnostics, Model, StepOutput, LABEL_SEED};
pub use probe::{leakage_probe, ProbeData};

use crate::autodiff::{argmax, Tape, Tensor};
use crate::data::batches;
use crate::error::{Error, Result};
use crate::heads::LossBreakdown;
use crate::metrics::{report, write_predictions, PredictionRecord, Report};
use crate::params::ParamStore;
use crate::rng;
use crate::stride::StrideConfig;

pub const LOG_HEADER: [&str; 6] = ["step", "L_c", "L_GOT", "L_s", "L_conf", "L_total"];
pub const LOG_FILE: &str = "train_log.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.csv";
pub const RECORD_FILE: &str = "run_record.json";
pub const WEIGHTS_FILE: &str = "stride_weights.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// Batch plan for one epoch over the training split.
pub fn epoch_plan(cfg: &TrainConfig, data: &Dataset, epoch: usize) -> (Vec<Vec<usize>>, bool) {
    if cfg.group_balanced_batching {
        let groups: Vec<usize> = data.train.iter().map(|e| e.sample.s_race).collect();
        group_balanced_batches(&groups, cfg.batch, cfg.seed, epoch)
    } else {
        (batches(data.train.len(), cfg.batch, cfg.seed, epoch), false)
    }
}

/// Assembles a batch; `flip_stream` enables random horizontal mirroring.
pub fn make_batch(cfg: &TrainConfig, examples: &[&Example], flip_stream: Option<&str>) -> Result<Batch> {
    let flip: Vec<bool> = match flip_stream {
        Some(name) => {
            use rand::Rng;
            let mut r = rng::stream(cfg.seed, name);
            examples.iter().map(|_| r.gen_bool(0.5)).collect()
        }
        None => Vec::new(),
    };
    let enc = cfg.encoder();
    let data = stack_patches(examples, cfg.height, cfg.width, cfg.patch, &flip)?;
    Ok(Batch {
        patches: Tensor::new(vec![examples.len(), enc.num_patches(), enc.patch_dim()], data)?,
        y: examples.iter().map(|e| e.sample.y).collect(),
        race: examples.iter().map(|e| e.sample.s_race).collect(),
        gender: examples.iter().map(|e| e.sample.s_gender).collect(),
        adv_weights: None,
    })
}

/// Per-sample inference results, in input order.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub records: Vec<PredictionRecord>,
    pub weights: Vec<Vec<f64>>,
    pub pooled: Vec<Vec<f64>>,
}

/// Runs the network over `examples` in fixed-size chunks.
pub fn evaluate(cfg: &TrainConfig, model: &Model, store: &ParamStore, stride: &StrideConfig, examples: &[Example]) -> Result<Evaluation> {
    let mut out = Evaluation {
        records: Vec::with_capacity(examples.len()),
        weights: Vec::with_capacity(examples.len()),
        pooled: Vec::with_capacity(examples.len()),
    };
    let p = cfg.encoder().num_patches();
    for chunk in examples.chunks(cfg.batch) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = make_batch(cfg, &refs, None)?;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = model.forward(&mut tape, &bound, batch.patches, stride)?;
        let logits = tape.value(f.logits);
        let w = tape.value(f.weights);
        let z = tape.value(f.pooled);
        for (i, ex) in chunk.iter().enumerate() {
            out.records.push(PredictionRecord {
                id: ex.sample.id.clone(),
                y_hat: argmax(logits.row(i)) as i64,
                y: ex.sample.y,
                s_race: ex.sample.s_race,
                s_gender: ex.sample.s_gender,
            });
            out.weights.push(w.data()[i * p..(i + 1) * p].to_vec());
            out.pooled.push(z.row(i).to_vec());
        }
    }
    Ok(out)
}

pub fn write_weights(path: &Path, ids: &[String], weights: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let p = weights.first().map_or(0, Vec::len);
    let mut header = vec!["id".to_string()];
    header.extend((0..p).map(|i| format!("w_{i}")));
    w.write_record(&header)?;
    for (id, row) in ids.iter().zip(weights) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `id,w_0..` rows back.
pub fn read_weights(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").to_string();
        let w = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|_| Error::Data(format!("{}: bad weight {v:?}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        out.push((id, w));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub acc_overall: f64,
    pub acc_macro: f64,
    pub pqd_race: f64,
    pub eom_race: f64,
    pub pqd_rg: f64,
    pub eom_rg: f64,
}

impl From<&Report> for FinalMetrics {
    fn from(r: &Report) -> Self {
        Self {
            acc_overall: r.race.acc_overall,
            acc_macro: r.race.acc_macro,
            pqd_race: r.race.pqd,
            eom_race: r.race.eom,
            pqd_rg: r.race_gender.pqd,
            eom_rg: r.race_gender.eom,
        }
    }
}

/// Summary of a finished run; `config` alone re-launches it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub mode: Mode,
    pub seed: u64,
    pub config: TrainConfig,
    pub effective: Effective,
    pub metrics: FinalMetrics,
    pub report: Report,
    /// Cell-balanced leakage-probe accuracy on race.
    pub probe_acc: f64,
    pub probe_acc_gender: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub unconverged_steps: usize,
    pub single_group_steps: usize,
    pub wall_time_s: f64,
    pub checkpoint: PathBuf,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint directory.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// `(step, breakdown)` for every step run by this invocation.
    pub losses: Vec<(usize, LossBreakdown)>,
    pub record: RunRecord,
    pub store: ParamStore,
    pub model: Model,
}

struct LogWriter {
    file: fs::File,
}

impl LogWriter {
    fn open(path: &Path, header: &[&str], append: bool) -> Result<Self> {
        let fresh = !append || !path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file })
    }

    fn row(&mut self, values: &[String]) -> Result<()> {
        writeln!(self.file, "{}", values.join(",")).map_err(|e| Error::io("log", e))
    }
}

/// Loads the manifest named in the config and trains.
pub fn train_from_config(cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.manifest, cfg.height, cfg.width, cfg.train_frac, cfg.seed)?;
    train(cfg, &data, opts)
}

fn training_error(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Training {
            step,
            msg: format!("non-finite value in {what}"),
        },
        other => other,
    }
}

/// Runs `epochs` passes over the training split, logging every step and
/// writing checkpoints, predictions, weights and the run record under
/// `out_dir`.
pub fn train(cfg: &TrainConfig, data: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let started = Instant::now();
    let eff = cfg.effective();
    let got_cfg = cfg.got();
    let adam_cfg = cfg.adam();
    let run_id = cfg.run_id();
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let ckpt_root = cfg.checkpoint_root();

    let (model, mut store, mut adam, start_step, mut unconverged_steps, mut single_group_steps) = match &opts.resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            if ck.meta.config_hash != cfg.hash() {
                return Err(Error::Checkpoint(format!(
                    "{} was written by a different configuration",
                    dir.display()
                )));
            }
            let model = Model::from_store(cfg, &ck.params)?;
            info!("resuming {run_id} from step {}", ck.meta.step);
            (model, ck.params, ck.adam, ck.meta.step, ck.meta.unconverged_steps, ck.meta.single_group_steps)
        }
        None => {
            let labels = binary_labels(cfg)?;
            let (model, store) = Model::init(cfg, data.groups, &labels)?;
            (model, store, AdamState::default(), 0, 0, 0)
        }
    };

    let steps_per_epoch = epoch_plan(cfg, data, 0).0.len();
    let total_steps = steps_per_epoch * cfg.epochs;
    let unconverged_budget = (cfg.max_unconverged_frac * total_steps as f64).floor() as usize;
    let resumed = opts.resume.is_some();
    let mut log = LogWriter::open(&cfg.out_dir.join(LOG_FILE), &LOG_HEADER, resumed)?;
    let mut eval_log = LogWriter::open(
        &cfg.out_dir.join(EVAL_LOG_FILE),
        &["step", "acc_overall", "pqd_race", "eom_race", "pqd_rg", "eom_rg"],
        resumed,
    )?;

    let save = |store: &ParamStore, adam: &AdamState, step: usize, unconv: usize, single: usize| -> Result<PathBuf> {
        let dir = Checkpoint::dir_for(&ckpt_root, step);
        Checkpoint {
            params: store.clone(),
            adam: adam.clone(),
            meta: CheckpointMeta {
                format_version: 1,
                step,
                adam_t: adam.t,
                config_hash: cfg.hash(),
                config: cfg.clone(),
                rng_seed: cfg.seed,
                rng_streams: vec!["init".into(), "shuffle/<epoch>".into(), "flip/<step>".into()],
                unconverged_steps: unconv,
                single_group_steps: single,
            },
        }
        .save(&dir)?;
        Ok(dir)
    };

    let cell_weights = cfg
        .adversary_balanced
        .then(|| vec![data.cell_weights(|s| s.s_race), data.cell_weights(|s| s.s_gender)]);

    let mut losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let (plan, _) = epoch_plan(cfg, data, epoch);
        for idx in plan {
            step += 1;
            if step <= start_step {
                continue;
            }
            let examples: Vec<&Example> = idx.iter().map(|&i| &data.train[i]).collect();
            let flip_name = format!("flip/{step}");
            let mut batch = make_batch(cfg, &examples, cfg.hflip.then_some(flip_name.as_str()))?;
            if let Some(w) = &cell_weights {
                batch.adv_weights = Some(w.iter().map(|wa| idx.iter().map(|&i| wa[i]).collect()).collect());
            }
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let out = match model.training_step(&mut tape, &bound, &batch, &eff.weights, &eff.stride, &got_cfg, cfg) {
                Ok(o) => o,
                Err(Error::EmptyBatch) => {
                    warn!("step {step}: every label in the batch is uncertain; skipping");
                    continue;
                }
                Err(e) => return Err(training_error(step, e)),
            };
            if let Some(d) = out.got {
                if d.unconverged > 0 {
                    unconverged_steps += 1;
                    if unconverged_steps > unconverged_budget {
                        return Err(Error::Training {
                            step,
                            msg: format!(
                                "transport solver failed to converge on {unconverged_steps} steps (budget {unconverged_budget})"
                            ),
                        });
                    }
                }
                if d.single_group {
                    single_group_steps += 1;
                }
            }
            let grads = tape.backward(out.loss).map_err(|e| training_error(step, e))?;
            let g = bound.collect_grads(&store, &grads);
            adam_step_scaled(&mut store, &g, &mut adam, &adam_cfg, |n| cfg.lr_scale(n))?;
            if !store.all_finite() {
                return Err(Error::Training {
                    step,
                    msg: "parameters became non-finite".into(),
                });
            }
            let b = out.breakdown;
            log.row(&[
                step.to_string(),
                b.l_c.to_string(),
                b.l_got.to_string(),
                b.l_s.to_string(),
                b.l_conf.to_string(),
                b.l_total.to_string(),
            ])?;
            losses.push((step, b));
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < total_steps {
                let ev = evaluate(cfg, &model, &store, &eff.stride, &data.test)?;
                match report(&ev.records, cfg.strict_metrics) {
                    Ok(r) => {
                        let m = FinalMetrics::from(&r);
                        info!("step {step}: test acc {:.4}, PQD {:.4}, EOM {:.4}", m.acc_overall, m.pqd_race, m.eom_race);
                        eval_log.row(&[
                            step.to_string(),
                            m.acc_overall.to_string(),
                            m.pqd_race.to_string(),
                            m.eom_race.to_string(),
                            m.pqd_rg.to_string(),
                            m.eom_rg.to_string(),
                        ])?;
                    }
                    Err(e) => warn!("step {step}: metrics unavailable: {e}"),
                }
            }
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < total_steps {
                save(&store, &adam, step, unconverged_steps, single_group_steps)?;
            }
        }
    }

    let final_dir = save(&store, &adam, total_steps, unconverged_steps, single_group_steps)?;
    let ev_test = evaluate(cfg, &model, &store, &eff.stride, &data.test)?;
    let rep = report(&ev_test.records, cfg.strict_metrics)?;
    let metrics = FinalMetrics::from(&rep);
    eval_log.row(&[
        total_steps.to_string(),
        metrics.acc_overall.to_string(),
        metrics.pqd_race.to_string(),
        metrics.eom_race.to_string(),
        metrics.pqd_rg.to_string(),
        metrics.eom_rg.to_string(),
    ])?;
    write_predictions(&cfg.out_dir.join(PREDICTIONS_FILE), &ev_test.records)?;
    rep.write(&cfg.out_dir.join("report"))?;
    if cfg.mode == Mode::Stridenet {
        let ids: Vec<String> = ev_test.records.iter().map(|r| r.id.clone()).collect();
        write_weights(&cfg.out_dir.join(WEIGHTS_FILE), &ids, &ev_test.weights)?;
    }

    let ev_train = evaluate(cfg, &model, &store, &eff.stride, &data.train)?;
    let probe_for = |attr: usize| -> Result<f64> {
        let s_of = |e: &Example| if attr == 0 { e.sample.s_race } else { e.sample.s_gender };
        let (tr_s, tr_y): (Vec<usize>, Vec<i64>) = data.train.iter().map(|e| (s_of(e), e.sample.y)).unzip();
        let (te_s, te_y): (Vec<usize>, Vec<i64>) = data.test.iter().map(|e| (s_of(e), e.sample.y)).unzip();
        leakage_probe(
            ProbeData {
                z: &ev_train.pooled,
                s: &tr_s,
                y: &tr_y,
            },
            ProbeData {
                z: &ev_test.pooled,
                s: &te_s,
                y: &te_y,
            },
            data.groups[attr].max(1),
            cfg.seed,
        )
    };
    let probe_acc = probe_for(0)?;
    let probe_acc_gender = probe_for(1)?;

    let record = RunRecord {
        run_id,
        mode: cfg.mode,
        seed: cfg.seed,
        config: cfg.clone(),
        effective: eff,
        metrics,
        report: rep,
        probe_acc,
        probe_acc_gender,
        final_loss: losses.last().map_or(f64::NAN, |(_, b)| b.l_total),
        steps: total_steps,
        unconverged_steps,
        single_group_steps,
        wall_time_s: started.elapsed().as_secs_f64(),
        checkpoint: final_dir,
    };
    let path = cfg.out_dir.join(RECORD_FILE);
    fs::write(&path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
    Ok(TrainOutcome {
        losses,
        record,
        store,
        model,
    })
}
