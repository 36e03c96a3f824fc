//! The optimisation loop: augment, label, forward, loss, backward, step.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::augment::augment;
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::corpus::Sample;
use super::imaging::normalize;
use super::optim::{poly_lr, Nesterov};
use super::stream_rng;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::labels::gen_label_maps;
use crate::losses::{detector_loss, LossValues};
use crate::network::Detector;
use crate::nn::ParamStore;

// rng stream families; the low 32 bits carry the index inside the family
const EPOCH_STREAM: u64 = 1 << 32;
const SAMPLE_STREAM: u64 = 2 << 32;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const DUMP_FILE: &str = "nonfinite_dump.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    /// Batch means of the loss terms.
    pub loss: LossValues,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    iter: usize,
    lr: f64,
    samples: Vec<&'a str>,
    losses: Vec<LossValues>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub detector: Detector,
    pub store: ParamStore,
    optimizer: Nesterov,
    iter: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (detector, store) = Detector::new(config.model.clone(), config.seed)?;
        let optimizer = Nesterov::new(&store, config.momentum, config.weight_decay);
        Ok(Self {
            config,
            detector,
            store,
            optimizer,
            iter: 0,
        })
    }

    /// Steps taken so far.
    pub fn iteration(&self) -> usize {
        self.iter
    }

    /// Corpus indices of the samples in batch `iter`. Sample visits are
    /// numbered consecutively and every epoch uses its own permutation.
    pub fn batch_indices(&self, iter: usize, n: usize) -> Vec<usize> {
        let b = self.config.batch_size;
        (iter * b..(iter + 1) * b)
            .map(|k| {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut stream_rng(self.config.seed, EPOCH_STREAM + (k / n) as u64));
                perm[k % n]
            })
            .collect()
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self, samples: &[Sample], dump_dir: Option<&Path>) -> Result<LogRecord> {
        if samples.is_empty() {
            return Err(Error::Invalid("empty training corpus".into()));
        }
        let cfg = &self.config;
        let lr = poly_lr(self.iter, cfg.max_iter, cfg.lr0, cfg.power)?;
        let idx = self.batch_indices(self.iter, samples.len());
        let mut sum: Vec<Option<Vec<f64>>> = vec![None; self.store.len()];
        let mut losses = Vec::with_capacity(idx.len());
        for (j, &i) in idx.iter().enumerate() {
            let s = &samples[i];
            let visit = (self.iter * cfg.batch_size + j) as u64;
            let mut rng = stream_rng(cfg.seed, SAMPLE_STREAM + visit);
            let (img, annots, _) = augment(&s.image, &s.annots, &cfg.augment, cfg.image_size, &mut rng)?;
            let labels = gen_label_maps(&annots, cfg.image_size, cfg.image_size, &cfg.labels)?;
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            let x = g.constant(normalize(&img));
            let out = self.detector.forward_nodes(&mut g, &p, x)?;
            let l = detector_loss(&mut g, &out, &labels, &cfg.loss)?;
            let v = l.values(&g);
            losses.push(v);
            if !v.total.is_finite() {
                continue;
            }
            let grads = g.backward(l.total)?;
            for (acc, gr) in sum.iter_mut().zip(p.gradients_opt(&grads)) {
                match (acc.as_mut(), gr) {
                    (_, None) => {}
                    (None, Some(gr)) => *acc = Some(gr),
                    (Some(a), Some(gr)) => a.iter_mut().zip(gr).for_each(|(a, g)| *a += g),
                }
            }
        }
        let finite_grads = sum.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
        if losses.iter().any(|v| !v.total.is_finite()) || !finite_grads {
            let detail = if finite_grads {
                format!("losses {:?}", losses.iter().map(|v| v.total).collect::<Vec<_>>())
            } else {
                "non-finite gradient".to_string()
            };
            if let Some(dir) = dump_dir {
                let dump = NonFiniteDump {
                    iter: self.iter,
                    lr,
                    samples: idx.iter().map(|&i| samples[i].name.as_str()).collect(),
                    losses,
                };
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join(DUMP_FILE), serde_json::to_string_pretty(&dump)?)?;
            }
            return Err(Error::NonFiniteLoss { iter: self.iter, detail });
        }
        let nb = idx.len() as f64;
        for g in sum.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v /= nb);
        }
        self.optimizer.step(&mut self.store, &sum, lr)?;
        let mean = |f: fn(&LossValues) -> f64| losses.iter().map(f).sum::<f64>() / nb;
        let rec = LogRecord {
            iter: self.iter,
            lr,
            loss: LossValues {
                total: mean(|v| v.total),
                prob: mean(|v| v.prob),
                binary: mean(|v| v.binary),
                thresh: mean(|v| v.thresh),
            },
        };
        self.iter += 1;
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.config, self.iter, &self.store)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    /// One record per step.
    pub log: Vec<LogRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Runs `max_iter` steps. With an output directory, every `log_every`-th
/// record (and the last) goes to the log file, periodic checkpoints are
/// written when enabled, and the final checkpoint always is.
pub fn train(
    config: TrainConfig,
    samples: &[Sample],
    out: Option<&Path>,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config)?;
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };
    let (max_iter, every, ck_every) = (t.config.max_iter, t.config.log_every, t.config.checkpoint_every);
    let mut log = Vec::with_capacity(max_iter);
    while t.iteration() < max_iter {
        let rec = t.step(samples, out)?;
        let done = t.iteration();
        if rec.iter % every == 0 || done == max_iter {
            if let Some(w) = writer.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            on_log(&rec);
        }
        if let Some(dir) = out {
            if ck_every > 0 && done % ck_every == 0 && done < max_iter {
                t.checkpoint().save(&dir.join(format!("ckpt_{done:06}.ckpt")))?;
            }
        }
        log.push(rec);
    }
    let final_checkpoint = match out {
        Some(dir) => {
            let p = dir.join(FINAL_CHECKPOINT);
            t.checkpoint().save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainOutcome {
        trainer: t,
        log,
        final_checkpoint,
    })
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer").field("iter", &self.iter).finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polygon;
    use crate::labels::TextAnnotation;
    use crate::tensor::FeatureMap;

    fn tiny(max_iter: usize) -> TrainConfig {
        let mut c = TrainConfig::desk();
        c.model.backbone.stem = 8;
        c.model.backbone.widths = [8, 8, 16, 16];
        c.model.fused_channels = 16;
        c.model.low_level_channels = 4;
        c.model.cla_reduction = 2;
        c.image_size = 64;
        c.batch_size = 2;
        c.max_iter = max_iter;
        c.augment.enabled = false;
        c
    }

    fn samples() -> Vec<Sample> {
        let mk = |name: &str, x0: f64| {
            let poly = Polygon::rect(x0, 16.0, x0 + 28.0, 36.0);
            let image = FeatureMap::from_fn(3, 64, 64, |_, y, x| {
                if poly.contains([x as f64 + 0.5, y as f64 + 0.5]) && (x / 2) % 2 == 0 {
                    0.1
                } else {
                    0.8
                }
            });
            Sample {
                name: name.into(),
                image,
                annots: vec![TextAnnotation::new(poly, false)],
            }
        };
        vec![mk("a", 8.0), mk("b", 28.0), mk("c", 18.0)]
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let t = Trainer::new(tiny(10)).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|i| t.batch_indices(i, 3)).take(6).collect();
        seen[..3].sort();
        seen[3..].sort();
        assert_eq!(seen, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn first_step_matches_manual_update() {
        let cfg = tiny(10);
        let data = samples();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let before = t.store.clone();
        let idx = t.batch_indices(0, data.len());
        t.step(&data, None).unwrap();

        // gradient of the batch mean, then the first Nesterov step by hand
        let mut want = before.clone();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; before.len()];
        for &i in &idx {
            let s = &data[i];
            let labels = gen_label_maps(&s.annots, 64, 64, &cfg.labels).unwrap();
            let mut g = Graph::new();
            let p = before.bind(&mut g);
            let x = g.constant(normalize(&s.image));
            let out = t.detector.forward_nodes(&mut g, &p, x).unwrap();
            let l = detector_loss(&mut g, &out, &labels, &cfg.loss).unwrap();
            let gr = g.backward(l.total).unwrap();
            for (a, b) in grads.iter_mut().zip(p.gradients_opt(&gr)) {
                if let Some(b) = b {
                    let a = a.get_or_insert_with(|| vec![0.0; b.len()]);
                    a.iter_mut().zip(&b).for_each(|(a, b)| *a += b / 2.0);
                }
            }
        }
        let (mu, wd, lr) = (cfg.momentum, cfg.weight_decay, cfg.lr0);
        for (p, g) in want.iter_mut().zip(&grads) {
            let g = g.as_ref().unwrap();
            for (w, gi) in p.value.iter_mut().zip(g) {
                let d = gi + wd * *w;
                *w -= lr * (d + mu * d);
            }
        }
        for (a, b) in t.store.iter().zip(want.iter()) {
            for (x, y) in a.value.iter().zip(&b.value) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{}: {x} vs {y}", a.name);
            }
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let data = samples();
        let mut cfg = tiny(3);
        cfg.augment.enabled = true;
        let a = train(cfg.clone(), &data, None, |_| {}).unwrap();
        let b = train(cfg, &data, None, |_| {}).unwrap();
        assert_eq!(a.trainer.store, b.trainer.store);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn disabled_fdr_is_never_updated() {
        let data = samples();
        let cfg = tiny(3);
        let mut off = cfg.clone();
        off.model.enable_fdr = false;
        off.model.enable_cla = false;
        let init = Trainer::new(off.clone()).unwrap().store;
        let run = train(off, &data, None, |_| {}).unwrap();
        let mut moved = 0;
        for (a, b) in run.trainer.store.iter().zip(init.iter()) {
            if Detector::is_fdr_param(&a.name) || Detector::is_cla_param(&a.name) {
                assert_eq!(a.value, b.value, "{}", a.name);
            } else if a.value != b.value {
                moved += 1;
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn fixed_batch_loss_trends_down() {
        let data = samples();
        let mut cfg = tiny(200);
        // one batch is the whole corpus, so every step sees the same images
        cfg.batch_size = data.len();
        let run = train(cfg, &data, None, |_| {}).unwrap();
        let medians: Vec<f64> = run
            .log
            .chunks(40)
            .map(|w| {
                let mut v: Vec<f64> = w.iter().map(|r| r.loss.total).collect();
                v.sort_by(|a, b| a.total_cmp(b));
                v[v.len() / 2]
            })
            .collect();
        assert!(medians.windows(2).all(|p| p[1] < p[0]), "window medians {medians:?}");
    }

    #[test]
    fn outputs_written_and_nan_dumped() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(4);
        cfg.log_every = 2;
        cfg.checkpoint_every = 2;
        let run = train(cfg.clone(), &samples(), Some(dir.path()), |_| {}).unwrap();
        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let iters: Vec<usize> = log.lines().map(|l| serde_json::from_str::<LogRecord>(l).unwrap().iter).collect();
        assert_eq!(iters, vec![0, 2, 3]);
        assert!(dir.path().join("ckpt_000002.ckpt").exists());
        let ck = Checkpoint::load(run.final_checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(ck.iteration, 4);
        assert_eq!(ck.restore().unwrap().1, run.trainer.store);

        let mut data = samples();
        data.iter_mut().for_each(|s| s.image.data_mut()[5] = f64::NAN);
        let mut t = Trainer::new(cfg).unwrap();
        let err = t.step(&data, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { iter: 0, .. }), "{err}");
        let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(DUMP_FILE)).unwrap()).unwrap();
        assert_eq!(dump["iter"], 0);
    }
}
