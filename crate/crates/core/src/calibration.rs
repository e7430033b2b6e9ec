//! Multi-task calibration data and gate-activation capture.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Matrix;
use crate::model::checkpoint::{Container, NamedTensor};
use crate::model::{DenseGluModel, HParams};
use crate::{seed, tokenizer};

/// Printable ASCII excluding space; each task cluster draws from its own window.
const ALPHABET_START: u8 = 33;
const ALPHABET_LEN: usize = 94;
const LEXICON_SIZE: usize = 24;
const TASK_WORDS: usize = 8;

/// One line of the calibration / corpus JSON-lines format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub task: String,
    pub cluster: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CalibSample {
    pub task: usize,
    pub cluster: usize,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CalibrationSet {
    pub samples: Vec<CalibSample>,
    pub task_names: Vec<String>,
    pub cluster_names: Vec<String>,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn task_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_tasks()];
        for s in &self.samples {
            counts[s.task] += 1;
        }
        counts
    }

    /// Task id of every sample, in column order.
    pub fn task_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.task).collect()
    }

    /// Builds a set from labelled records, assigning ids by first appearance.
    pub fn from_records(records: &[Record]) -> Self {
        let mut tasks: HashMap<&str, usize> = HashMap::new();
        let mut clusters: HashMap<&str, usize> = HashMap::new();
        let mut task_names = Vec::new();
        let mut cluster_names = Vec::new();
        let mut samples = Vec::with_capacity(records.len());
        for r in records {
            let task = *tasks.entry(&r.task).or_insert_with(|| {
                task_names.push(r.task.clone());
                task_names.len() - 1
            });
            let cluster = *clusters.entry(&r.cluster).or_insert_with(|| {
                cluster_names.push(r.cluster.clone());
                cluster_names.len() - 1
            });
            samples.push(CalibSample {
                task,
                cluster,
                tokens: tokenizer::encode(&r.text),
            });
        }
        CalibrationSet {
            samples,
            task_names,
            cluster_names,
        }
    }

    pub fn to_records(&self) -> Vec<Record> {
        self.samples
            .iter()
            .map(|s| Record {
                task: self.task_names[s.task].clone(),
                cluster: self.cluster_names[s.cluster].clone(),
                text: tokenizer::decode(&s.tokens),
            })
            .collect()
    }
}

/// Parameters of the synthetic multi-task generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub clusters: usize,
    pub per_task: usize,
    /// Fixes lexicons and task grammars; share it between calibration and corpus.
    pub structure_seed: u64,
    /// Drives the individual samples.
    pub sample_seed: u64,
    pub min_len: usize,
    pub max_len: usize,
}

impl SyntheticSpec {
    pub fn new(tasks: usize, clusters: usize, per_task: usize, seed: u64) -> Self {
        SyntheticSpec {
            tasks,
            clusters,
            per_task,
            structure_seed: seed,
            sample_seed: seed::derive(seed, "calibration"),
            min_len: 40,
            max_len: 120,
        }
    }

    /// Same task grammars as [`SyntheticSpec::new`] with the same seed, but
    /// an independent stream of samples, for building a training corpus.
    pub fn corpus(tasks: usize, clusters: usize, per_task: usize, seed: u64) -> Self {
        SyntheticSpec {
            sample_seed: seed::derive(seed, "corpus"),
            ..SyntheticSpec::new(tasks, clusters, per_task, seed)
        }
    }
}

struct TaskGrammar {
    cluster: usize,
    words: Vec<String>,
    /// Preferred successor of each word.
    next: Vec<usize>,
}

fn cluster_alphabet(cluster: usize, clusters: usize) -> Vec<u8> {
    let width = (ALPHABET_LEN / clusters.max(1)).max(2);
    (0..width)
        .map(|i| ALPHABET_START + ((cluster * width + i) % ALPHABET_LEN) as u8)
        .collect()
}

fn grammars(spec: &SyntheticSpec) -> Vec<TaskGrammar> {
    let lexicons: Vec<Vec<String>> = (0..spec.clusters)
        .map(|c| {
            let alphabet = cluster_alphabet(c, spec.clusters);
            let mut rng = seed::rng(spec.structure_seed, &format!("lexicon{c}"));
            (0..LEXICON_SIZE)
                .map(|_| {
                    let len = rng.random_range(2..=6);
                    (0..len)
                        .map(|_| *alphabet.choose(&mut rng).unwrap() as char)
                        .collect()
                })
                .collect()
        })
        .collect();
    (0..spec.tasks)
        .map(|t| {
            let cluster = t % spec.clusters;
            let mut rng = seed::rng(spec.structure_seed, &format!("task{t}"));
            let words: Vec<String> = lexicons[cluster]
                .choose_multiple(&mut rng, TASK_WORDS)
                .cloned()
                .collect();
            let next = (0..words.len())
                .map(|_| rng.random_range(0..words.len()))
                .collect();
            TaskGrammar {
                cluster,
                words,
                next,
            }
        })
        .collect()
}

/// Generates labelled texts, task-major (`per_task` samples of task 0, then task 1, ...).
pub fn synthetic_records(spec: &SyntheticSpec) -> Result<Vec<Record>> {
    if spec.tasks == 0 || spec.per_task == 0 || spec.clusters == 0 {
        return Err(Error::Config(
            "tasks, clusters and per-task count must all be at least 1".into(),
        ));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "invalid length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    let grammars = grammars(spec);
    let mut rng = seed::rng(spec.sample_seed, "samples");
    let mut out = Vec::with_capacity(spec.tasks * spec.per_task);
    for (t, g) in grammars.iter().enumerate() {
        for _ in 0..spec.per_task {
            let target = rng.random_range(spec.min_len..=spec.max_len);
            let mut text = String::with_capacity(target + 8);
            let mut w = rng.random_range(0..g.words.len());
            while text.len() < target {
                if !text.is_empty() {
                    text.push(' ');
                }
                text.push_str(&g.words[w]);
                w = if rng.random_bool(0.7) {
                    g.next[w]
                } else {
                    rng.random_range(0..g.words.len())
                };
            }
            text.truncate(target);
            out.push(Record {
                task: format!("task{t:02}"),
                cluster: format!("cluster{}", g.cluster),
                text,
            });
        }
    }
    Ok(out)
}

/// Deterministic multi-task calibration set with `tasks × per_task` samples.
pub fn build_synthetic_calibration(
    tasks: usize,
    clusters: usize,
    per_task: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    let spec = SyntheticSpec::new(tasks, clusters, per_task, seed);
    Ok(CalibrationSet::from_records(&synthetic_records(&spec)?))
}

pub fn write_jsonl(records: &[Record], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads `task`/`cluster`/`text` records and tokenizes them in file order.
pub fn load_calibration_jsonl(path: &Path) -> Result<CalibrationSet> {
    let records = read_jsonl(path)?;
    if records.is_empty() {
        return Err(Error::Input(format!(
            "{}: calibration file has no records",
            path.display()
        )));
    }
    Ok(CalibrationSet::from_records(&records))
}

/// Token-averaged gate activations of one layer: `d_ffn × M`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub layer: usize,
    pub a: Matrix,
    pub task_labels: Vec<usize>,
}

impl ActivationMatrix {
    pub fn d_ffn(&self) -> usize {
        self.a.rows()
    }

    pub fn samples(&self) -> usize {
        self.a.cols()
    }
}

#[derive(Clone, Debug)]
pub struct Capture {
    pub layers: Vec<ActivationMatrix>,
    /// Non-fatal notes, e.g. truncated samples.
    pub warnings: Vec<String>,
}

/// Mean over token positions of each neuron's signed Swish gate output, for
/// every layer and every calibration sample.
pub fn capture_activations(model: &DenseGluModel, calib: &CalibrationSet) -> Result<Capture> {
    let hp = model.hparams();
    let max_len = hp.max_seq_len;
    let per_sample: Vec<(Vec<Vec<f64>>, Option<String>)> = calib
        .samples
        .par_iter()
        .enumerate()
        .map(|(m, s)| -> Result<_> {
            if s.tokens.is_empty() {
                return Err(Error::Input(format!("calibration sample {m} has no tokens")));
            }
            let (tokens, warning) = if s.tokens.len() > max_len {
                (
                    &s.tokens[..max_len],
                    Some(format!(
                        "sample {m}: truncated from {} to {max_len} tokens",
                        s.tokens.len()
                    )),
                )
            } else {
                (&s.tokens[..], None)
            };
            let mut means = Vec::with_capacity(hp.n_layers);
            model.backbone.forward_with(tokens, |l, x| {
                model.ffn[l].forward_masked(x, |gate| {
                    means.push(column_means(gate));
                    Ok(())
                })
            })?;
            Ok((means, warning))
        })
        .collect::<Result<_>>()?;

    let m_count = calib.len();
    let labels = calib.task_labels();
    let mut layers: Vec<ActivationMatrix> = (0..hp.n_layers)
        .map(|l| ActivationMatrix {
            layer: l,
            a: Matrix::zeros(hp.d_ffn, m_count),
            task_labels: labels.clone(),
        })
        .collect();
    let mut warnings = Vec::new();
    for (m, (means, warning)) in per_sample.into_iter().enumerate() {
        for (l, col) in means.into_iter().enumerate() {
            for (j, v) in col.into_iter().enumerate() {
                layers[l].a.set(j, m, v as f32);
            }
        }
        warnings.extend(warning);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Capture { layers, warnings })
}

fn column_means(x: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0f64; x.cols()];
    for r in 0..x.rows() {
        for (a, &v) in acc.iter_mut().zip(x.row(r)) {
            *a += v as f64;
        }
    }
    let n = x.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Row `j`, entry `t`: mean over task-`t` samples of `|A[j][m]|`.
pub fn per_task_profiles(act: &ActivationMatrix, num_tasks: usize) -> Result<Vec<Vec<f64>>> {
    if act.task_labels.len() != act.samples() {
        return Err(Error::shape(
            "per_task_profiles",
            format!("{} labels for {} columns", act.task_labels.len(), act.samples()),
        ));
    }
    let mut counts = vec![0usize; num_tasks];
    for &t in &act.task_labels {
        if t >= num_tasks {
            return Err(Error::Input(format!("task label {t} >= {num_tasks}")));
        }
        counts[t] += 1;
    }
    if let Some(t) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Input(format!("task {t} has no calibration samples")));
    }
    Ok((0..act.d_ffn())
        .map(|j| {
            let mut acc = vec![0.0f64; num_tasks];
            for (&v, &t) in act.a.row(j).iter().zip(&act.task_labels) {
                acc[t] += (v as f64).abs();
            }
            for (a, &c) in acc.iter_mut().zip(&counts) {
                *a /= c as f64;
            }
            acc
        })
        .collect())
}

/// Writes `layer{ℓ}.A` tensors in the checkpoint container.
pub fn save_activations(
    path: &Path,
    hparams: &HParams,
    layers: &[ActivationMatrix],
    calib: &CalibrationSet,
) -> Result<()> {
    let mut c = Container::new("activations", hparams.clone());
    for act in layers {
        c.push(NamedTensor::matrix(format!("layer{}.A", act.layer), &act.a));
    }
    c.meta = serde_json::json!({
        "task_names": calib.task_names,
        "task_labels": calib.task_labels(),
    });
    c.save(path)
}
