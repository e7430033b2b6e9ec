use std::path::{Path, PathBuf};

use log::info;
use weaver_core::calibration::{
    capture_activations, load_calibration_jsonl, synthetic_records, write_jsonl, SyntheticSpec,
};
use weaver_core::evaluation::{compare_methods, evaluate_moe, reports_csv, reports_table, routing_jsonl, routing_specialization_report};
use weaver_core::model::checkpoint::Container;
use weaver_core::seed;
use weaver_core::specialization::{allocate, allocation_report};
use weaver_core::training::{write_loss_csv, Corpus, TrainConfig, Trainer};
use weaver_core::weaving::{weave_model, MoeModel};
use weaver_core::{DenseGluModel, Error};

use crate::manifest::{sidecar, RunManifest};
use crate::settings::{self, load_or_default};
use crate::{CliError, CptArgs, EvalArgs, GenDataArgs, ReportArgs, RunFlags, TrainArgs, TrainFlags, WeaveArgs, WeaveFlags};

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn json_line(value: &impl serde::Serialize) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut s: settings::GenData = load_or_default(a.config.as_deref())?;
    s.tasks = a.tasks.unwrap_or(s.tasks);
    s.clusters = a.clusters.unwrap_or(s.clusters);
    s.per_task = a.per_task.unwrap_or(s.per_task);
    s.corpus_per_task = a.corpus_per_task.unwrap_or(s.corpus_per_task);
    s.seed = a.seed.unwrap_or(s.seed);
    s.validate()?;

    let mut m = RunManifest::start("gen-data", &s)?;
    m.seed("seed", s.seed);
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    let calib = a.out_dir.join("calibration.jsonl");
    write_jsonl(&synthetic_records(&SyntheticSpec::new(s.tasks, s.clusters, s.per_task, s.seed))?, &calib)?;
    m.output(&calib);
    if s.corpus_per_task > 0 {
        let corpus = a.out_dir.join("corpus.jsonl");
        let spec = SyntheticSpec::corpus(s.tasks, s.clusters, s.corpus_per_task, s.seed);
        write_jsonl(&synthetic_records(&spec)?, &corpus)?;
        m.output(&corpus);
    }
    info!("wrote {} calibration records to {}", s.tasks * s.per_task, calib.display());
    m.finish(&a.out_dir.join("gen-data.manifest.json"))
}

fn apply_train_flags(c: &mut TrainConfig, f: &TrainFlags) {
    c.total_steps = f.steps.unwrap_or(c.total_steps);
    c.warmup_steps = f.warmup.unwrap_or(c.warmup_steps);
    c.batch_size = f.batch_size.unwrap_or(c.batch_size);
    c.seq_len = f.seq_len.unwrap_or(c.seq_len);
    c.peak_lr = f.lr.unwrap_or(c.peak_lr);
    c.min_lr = f.min_lr.unwrap_or(c.min_lr);
    c.weight_decay = f.weight_decay.unwrap_or(c.weight_decay);
    c.grad_clip = f.grad_clip.unwrap_or(c.grad_clip);
    c.seed = f.seed.unwrap_or(c.seed);
}

/// Steps `trainer` on the training split, then writes the model through
/// `save`, the loss CSV, the optional state file and the manifest.
fn drive(
    mut trainer: Trainer,
    run: &RunFlags,
    mut m: RunManifest,
    save: impl Fn(&Trainer, &Path) -> Result<(), CliError>,
) -> Result<(), CliError> {
    if run.stop_at.is_some() && run.state_out.is_none() {
        return Err(CliError::Usage("--stop-at needs --state-out to be resumable".into()));
    }
    m.input(&run.corpus)?;
    if let Some(r) = &run.resume {
        m.input(r)?;
    }
    m.seed("train", trainer.config().seed);
    let (train, _) = Corpus::load(&run.corpus)?.split();
    let stream = train.stream();
    let until = run.stop_at.unwrap_or(usize::MAX);
    info!(
        "training from step {} to {} on {} tokens",
        trainer.step_index(),
        until.min(trainer.config().total_steps),
        stream.len()
    );
    let rows = trainer.run(&stream, until)?;

    save(&trainer, &run.out)?;
    m.output(&run.out);
    let csv = run.loss_csv.clone().unwrap_or_else(|| sidecar(&run.out, "loss.csv"));
    write_loss_csv(&rows, &csv)?;
    m.output(&csv);
    if let Some(state) = &run.state_out {
        trainer.save_state(state)?;
        m.output(state);
    }
    if let Some(last) = rows.last() {
        info!("step {} loss {:.4}", last.step, last.l_total);
    }
    m.finish(&sidecar(&run.out, "manifest.json"))
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut s: settings::Train = load_or_default(a.run.config.as_deref())?;
    if a.run.config.is_none() {
        s.train = settings::pretrain_defaults();
    }
    apply_train_flags(&mut s.train, &a.train);
    let shape = &mut s.model;
    shape.d_model = a.d_model.unwrap_or(shape.d_model);
    shape.n_layers = a.n_layers.unwrap_or(shape.n_layers);
    shape.n_heads = a.n_heads.unwrap_or(shape.n_heads);
    shape.d_ffn = a.d_ffn.unwrap_or(shape.d_ffn);
    shape.max_seq_len = a.max_seq_len.unwrap_or(shape.max_seq_len);

    let trainer = match &a.run.resume {
        Some(path) => {
            let t = Trainer::load_state(path)?;
            t.dense_model()?;
            t
        }
        None => {
            let init_seed = seed::derive(s.train.seed, "init");
            let model = DenseGluModel::random(&s.model.hparams(), init_seed)?;
            Trainer::dense(&model, s.train.clone())?
        }
    };
    let mut m = RunManifest::start("train", &settings::Train { train: trainer.config().clone(), ..s })?;
    m.seed("init", seed::derive(trainer.config().seed, "init"));
    drive(trainer, &a.run, m, |t, out| {
        let model = t.dense_model()?;
        model.save(out)?;
        DenseGluModel::load(out)?;
        Ok(())
    })
}

pub fn cpt(a: CptArgs) -> Result<(), CliError> {
    let mut c: TrainConfig = match &a.run.config {
        Some(p) => load_or_default(Some(p))?,
        None => settings::cpt_defaults(),
    };
    apply_train_flags(&mut c, &a.train);
    c.lb_lambda = a.lambda.unwrap_or(c.lb_lambda);
    let trainer = match &a.run.resume {
        Some(path) => {
            let t = Trainer::load_state(path)?;
            t.moe_model()?;
            t
        }
        None => Trainer::moe(&MoeModel::load(&a.model)?, c)?,
    };
    let mut m = RunManifest::start("cpt", trainer.config())?;
    m.input(&a.model)?;
    drive(trainer, &a.run, m, |t, out| {
        let model = t.moe_model()?;
        model.save(out)?;
        MoeModel::load(out)?;
        Ok(())
    })
}

fn apply_weave_flags(w: &mut settings::Weave, f: &WeaveFlags) {
    w.n_experts = f.n_experts.unwrap_or(w.n_experts);
    w.k = f.k.unwrap_or(w.k);
    w.alpha_min = f.alpha_min.unwrap_or(w.alpha_min);
    w.alpha_max = f.alpha_max.unwrap_or(w.alpha_max);
    w.tau = f.tau.unwrap_or(w.tau);
    w.mode = f.mode.unwrap_or(w.mode);
    w.uniform_shared = f.uniform_shared.unwrap_or(w.uniform_shared);
    w.seed = f.seed.unwrap_or(w.seed);
    if f.no_renorm {
        w.renormalize_gates = false;
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn weave(a: WeaveArgs) -> Result<(), CliError> {
    let mut s: settings::Weave = load_or_default(a.config.as_deref())?;
    apply_weave_flags(&mut s, &a.weave);
    let cfg = s.weaver_config()?;
    require_file(&a.model, "model checkpoint")?;
    require_file(&a.calib, "calibration file")?;

    let mut m = RunManifest::start("weave", &cfg)?;
    m.seed("weave", cfg.seed);
    m.input(&a.model)?;
    m.input(&a.calib)?;
    let dense = DenseGluModel::load(&a.model)?;
    cfg.d_expert(dense.hparams().d_ffn)?;
    let calib = load_calibration_jsonl(&a.calib)?;
    let acts = capture_activations(&dense, &calib)?.layers;
    let allocs = allocate(&acts, calib.num_tasks(), &cfg)?;
    let moe = weave_model(&dense, &acts, &allocs, &cfg)?;
    moe.save(&a.out)?;
    MoeModel::load(&a.out)?;
    m.output(&a.out);

    let rows = allocation_report(&allocs);
    for r in &rows {
        info!("layer {}: r={:.3} alpha={:.3} n_se={} n_re={}", r.layer, r.r, r.alpha, r.n_se, r.n_re);
    }
    let alloc_path = sidecar(&a.out, "alloc.json");
    write(&alloc_path, json_line(&rows)?)?;
    m.output(&alloc_path);
    m.finish(&sidecar(&a.out, "manifest.json"))
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut s: settings::Eval = load_or_default(a.config.as_deref())?;
    s.sparsity = a.sparsity.clone().unwrap_or(s.sparsity);
    s.whole_corpus |= a.whole_corpus;
    apply_weave_flags(&mut s.weave, &a.weave);
    let cfg = s.weave.weaver_config()?;
    require_file(&a.model, "model checkpoint")?;

    let mut m = RunManifest::start("eval", &s)?;
    m.input(&a.model)?;
    m.input(&a.corpus)?;
    let corpus = Corpus::load(&a.corpus)?;
    let heldout = if s.whole_corpus { corpus } else { corpus.split().1 };
    let container = Container::load(&a.model)?;
    let load_err = |reason: String| Error::Load { path: a.model.clone(), reason };
    let reports = match container.kind.as_str() {
        "moe" => vec![evaluate_moe(&MoeModel::from_container(container).map_err(load_err)?, &heldout)?],
        "dense" => {
            let dense = DenseGluModel::from_container(container).map_err(load_err)?;
            let calib_path: PathBuf = a
                .calib
                .clone()
                .ok_or_else(|| CliError::Usage("--calib is required to compare methods on a dense model".into()))?;
            m.input(&calib_path)?;
            m.seed("weave", cfg.seed);
            let calib = load_calibration_jsonl(&calib_path)?;
            let acts = capture_activations(&dense, &calib)?.layers;
            compare_methods(&dense, &heldout, &acts, calib.num_tasks(), &s.sparsity, &cfg)?
        }
        other => return Err(load_err(format!("cannot evaluate a {other:?} checkpoint")).into()),
    };
    print!("{}", reports_table(&reports));
    write(&a.out, json_line(&reports)?)?;
    m.output(&a.out);
    let csv = sidecar(&a.out, "csv");
    write(&csv, reports_csv(&reports))?;
    m.output(&csv);
    m.finish(&sidecar(&a.out, "manifest.json"))
}

pub fn report(a: ReportArgs) -> Result<(), CliError> {
    let primary = a
        .routing
        .clone()
        .or_else(|| a.allocation.clone())
        .ok_or_else(|| CliError::Usage("nothing to do: pass --routing and/or --allocation".into()))?;
    require_file(&a.model, "model checkpoint")?;
    require_file(&a.calib, "calibration file")?;
    let mut m = RunManifest::start("report", &serde_json::json!({}))?;
    m.input(&a.model)?;
    m.input(&a.calib)?;
    let moe = MoeModel::load(&a.model)?;
    if let Some(path) = &a.allocation {
        let allocs: Vec<_> = moe.layers.iter().map(|l| l.allocation.clone()).collect();
        write(path, json_line(&allocation_report(&allocs))?)?;
        m.output(path);
    }
    if let Some(path) = &a.routing {
        let calib = load_calibration_jsonl(&a.calib)?;
        let tables = routing_specialization_report(&moe, &calib)?;
        write(path, routing_jsonl(&tables)?)?;
        m.output(path);
    }
    m.finish(&sidecar(&primary, "manifest.json"))
}
